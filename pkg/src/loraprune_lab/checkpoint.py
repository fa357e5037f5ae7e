"""Versioned binary checkpoints.

Layout::

    b"LPLAB1"
    u64 length | UTF-8 JSON header (model spec, seed, per-layer manifest)
    for each layer, in header order:
        u64 length | W0     little-endian float64, row-major
        u64 length | bias   (if present)
        u64 length | A, then u64 length | B, then u64 length | packed mask bits
                     (adapted layers only; mask bits little-endian, row-major)

All lengths are byte counts, little-endian unsigned 64-bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .lora import Linear, LoraModule
from .models import Model, ModelSpec

MAGIC = b"LPLAB"
VERSION = 1
_LEN = struct.Struct("<Q")


def _chunk(payload: bytes) -> bytes:
    return _LEN.pack(len(payload)) + payload


def _floats(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def dumps(model: Model, seed: int | None = None) -> bytes:
    manifest = []
    chunks = []
    for name, layer in model.layers.items():
        d, k = layer.shape
        entry = {"name": name, "shape": [d, k], "bias": layer.bias is not None}
        base = layer.W0 if isinstance(layer, LoraModule) else layer.weight
        chunks.append(_chunk(_floats(base.data)))
        if layer.bias is not None:
            chunks.append(_chunk(_floats(layer.bias.data)))
        if isinstance(layer, LoraModule):
            entry.update(kind="lora", mode=layer.mode, rank=layer.rank)
            chunks.append(_chunk(_floats(layer.A.data)))
            chunks.append(_chunk(_floats(layer.B.data)))
            bits = np.packbits(layer.mask.ravel().astype(bool), bitorder="little")
            chunks.append(_chunk(bits.tobytes()))
        else:
            entry["kind"] = "linear"
        manifest.append(entry)
    header = {
        "format_version": VERSION,
        "spec": model.spec.to_dict(),
        "seed": model.spec.seed if seed is None else seed,
        "layers": manifest,
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + str(VERSION).encode() + _chunk(text) + b"".join(chunks)


def save(path, model: Model, seed: int | None = None) -> None:
    Path(path).write_bytes(dumps(model, seed))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated checkpoint at offset {self.pos}: {what} needs {n} bytes, "
                f"{len(self.buf) - self.pos} remain"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def chunk(self, what: str, expected: int | None = None) -> bytes:
        at = self.pos
        (n,) = _LEN.unpack(self.take(_LEN.size, f"length of {what}"))
        if expected is not None and n != expected:
            raise FormatError(f"{what} at offset {at}: length {n}, expected {expected}")
        return self.take(n, what)

    def floats(self, shape: tuple[int, int], what: str) -> np.ndarray:
        raw = self.chunk(what, 8 * shape[0] * shape[1])
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def loads(buf: bytes) -> Model:
    r = _Reader(buf)
    head = r.take(len(MAGIC) + 1, "magic")
    if head[:len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic at offset 0: {head!r}")
    if head[len(MAGIC):] != str(VERSION).encode():
        raise FormatError(
            f"unsupported checkpoint version {head[len(MAGIC):].decode(errors='replace')!r} "
            f"at offset {len(MAGIC)}; this build reads version {VERSION}"
        )
    at = r.pos
    try:
        header = json.loads(r.chunk("header").decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        manifest = header["layers"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable header at offset {at}: {exc}") from None

    layers = {}
    for entry in manifest:
        name = entry["name"]
        d, k = entry["shape"]
        w0 = r.floats((d, k), f"{name}.W0")
        bias = r.floats((1, k), f"{name}.bias") if entry["bias"] else None
        layer = Linear(w0, bias, name=name)
        if entry["kind"] == "lora":
            rank = entry["rank"]
            a_cols = k if entry["mode"] == "parallel" else d
            A = r.floats((rank, a_cols), f"{name}.A")
            B = r.floats((d, rank), f"{name}.B")
            nbytes = (d * k + 7) // 8
            bits = np.frombuffer(r.chunk(f"{name}.mask", nbytes), dtype=np.uint8)
            mask = np.unpackbits(bits, count=d * k, bitorder="little").reshape(d, k)
            lm = LoraModule(layer, A, B, entry["mode"])
            lm.mask = mask.astype(np.float64)
            layers[name] = lm
        elif entry["kind"] == "linear":
            layers[name] = layer
        else:
            raise FormatError(f"unknown layer kind {entry['kind']!r} for {name}")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return Model(spec, layers)


def load(path) -> Model:
    return loads(Path(path).read_bytes())
