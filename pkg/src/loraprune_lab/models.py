"""Small classifiers built from :mod:`loraprune_lab.lora` layers.

Two architectures are available:

``mlp``
    ``fc0 .. fc{n-1}`` hidden layers followed by a ``head`` classifier.
``transformer``
    Each input row is cut into ``tokens`` equal chunks, embedded, passed through
    one pre-residual single-head attention block and a GELU feed-forward block
    (both followed by layer norm), mean-pooled per example and classified.

Adapter targets are selected by name group: ``all`` (every hidden/attention/FFN
layer), ``attention`` or ``ffn``. The embedding and the head are never pruned.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .lora import MODES, Linear, LoraModule, attach_lora
from .tensor import Tape, Tensor

Layer = Union[Linear, LoraModule]

ATTENTION_LAYERS = ("attn.q", "attn.k", "attn.v", "attn.o")
FFN_LAYERS = ("ffn.up", "ffn.down")
_MASKED_SCORE = -1e9


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "mlp"
    in_dim: int = 16
    classes: int = 4
    hidden: tuple[int, ...] = (8,)
    activation: str = "relu"
    tokens: int = 4
    d_model: int = 8
    d_ff: int = 16
    targets: str = "all"
    rank: int = 2
    mode: str = "parallel"
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("mlp", "transformer"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown adapter mode {self.mode!r}")
        if self.in_dim < 1 or self.classes < 2:
            raise ConfigError("in_dim must be >= 1 and classes >= 2")
        if self.arch == "mlp":
            if not self.hidden or min(self.hidden) < 1:
                raise ConfigError("mlp needs at least one positive hidden width")
            if self.targets not in ("all", "ffn"):
                raise ConfigError(f"mlp targets must be 'all' or 'ffn', got {self.targets!r}")
        else:
            if self.tokens < 1 or self.in_dim % self.tokens:
                raise ConfigError(f"in_dim {self.in_dim} is not divisible by tokens {self.tokens}")
            if self.targets not in ("all", "attention", "ffn"):
                raise ConfigError(f"transformer targets must be all/attention/ffn, got {self.targets!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(int(h) for h in d["hidden"])
        return cls(**d)

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        if self.arch == "mlp":
            widths = [self.in_dim, *self.hidden]
            shapes = {f"fc{i}": (widths[i], widths[i + 1]) for i in range(len(self.hidden))}
            shapes["head"] = (widths[-1], self.classes)
            return shapes
        dm = self.d_model
        shapes = {"embed": (self.in_dim // self.tokens, dm)}
        shapes.update({name: (dm, dm) for name in ATTENTION_LAYERS})
        shapes.update({"ffn.up": (dm, self.d_ff), "ffn.down": (self.d_ff, dm), "head": (dm, self.classes)})
        return shapes

    def target_names(self) -> list[str]:
        names = list(self.layer_shapes())
        if self.arch == "mlp":
            return [n for n in names if n.startswith("fc")]
        if self.targets == "attention":
            return list(ATTENTION_LAYERS)
        if self.targets == "ffn":
            return list(FFN_LAYERS)
        return [*ATTENTION_LAYERS, *FFN_LAYERS]


@dataclass
class Model:
    spec: ModelSpec
    layers: dict[str, Layer] = field(default_factory=dict)

    @classmethod
    def init(cls, spec: ModelSpec, trainable: bool = True) -> "Model":
        rng = np.random.default_rng(spec.seed)
        layers: dict[str, Layer] = {}
        for name, (d, k) in spec.layer_shapes().items():
            w = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, k))
            layers[name] = Linear(w, np.zeros((1, k)), name=name, trainable=trainable)
        return cls(spec, layers)

    # ------------------------------------------------------------ structure

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers.values() for p in layer.parameters()]

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    def freeze(self) -> None:
        for layer in self.layers.values():
            if isinstance(layer, Linear):
                layer.freeze()

    def lora_modules(self) -> dict[str, LoraModule]:
        return {n: l for n, l in self.layers.items() if isinstance(l, LoraModule)}

    def attach_lora(self, rng: np.random.Generator, rank: int | None = None, mode: str | None = None) -> dict[str, LoraModule]:
        """Freeze everything and attach adapters to every layer in ``target_names()``."""
        rank = self.spec.rank if rank is None else rank
        mode = self.spec.mode if mode is None else mode
        self.freeze()
        for name in self.spec.target_names():
            layer = self.layers[name]
            if isinstance(layer, LoraModule):
                raise ConfigError(f"{name} already has an adapter")
            self.layers[name] = attach_lora(layer, rank, mode, rng)
        return self.lora_modules()

    def merged(self) -> "Model":
        """Copy with every layer folded into a frozen dense weight."""
        layers: dict[str, Layer] = {}
        for name, layer in self.layers.items():
            bias = None if layer.bias is None else layer.bias.data
            layers[name] = Linear(layer.merge().data, bias, name=name)
        return Model(self.spec, layers)

    def sparsity(self) -> float:
        mods = self.lora_modules().values()
        total = sum(m.mask.size for m in mods)
        return sum(m.n_pruned() for m in mods) / total if total else 0.0

    # -------------------------------------------------------------- forward

    def forward(self, x, overrides: dict[str, Tensor] | None = None) -> Tensor:
        overrides = overrides or {}
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise DimensionError(f"expected inputs with {self.spec.in_dim} columns, got {x.shape}")

        def run(name, h):
            return self.layers[name].forward(h, overrides.get(name))

        act = T.relu if self.spec.activation == "relu" else T.gelu
        if self.spec.arch == "mlp":
            h = Tensor(x)
            for i in range(len(self.spec.hidden)):
                h = act(run(f"fc{i}", h))
            return run("head", h)

        n, L = x.shape[0], self.spec.tokens
        tokens = Tensor(x.reshape(n * L, self.spec.in_dim // L))
        block = np.kron(np.eye(n), np.ones((L, L)))
        h0 = run("embed", tokens)
        q, k, v = run("attn.q", h0), run("attn.k", h0), run("attn.v", h0)
        scores = T.add(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(self.spec.d_model)),
                       np.where(block > 0, 0.0, _MASKED_SCORE))
        attn = T.matmul(T.softmax(scores), v)
        h1 = T.layer_norm(T.add(h0, run("attn.o", attn)))
        ff = run("ffn.down", T.gelu(run("ffn.up", h1)))
        h2 = T.layer_norm(T.add(h1, ff))
        pooled = T.matmul(np.kron(np.eye(n), np.full((1, L), 1.0 / L)), h2)
        return run("head", pooled)

    def loss(self, x, y, overrides: dict[str, Tensor] | None = None) -> Tensor:
        return T.softmax_cross_entropy(self.forward(x, overrides), y)

    def loss_value(self, x, y, overrides: dict[str, Tensor] | None = None) -> float:
        return self.loss(x, y, overrides).item()

    def predict(self, x) -> np.ndarray:
        return self.forward(x).data.argmax(axis=1)

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))

    def backward(self, x, y) -> float:
        """One forward/backward pass; gradients accumulate into parameters."""
        with Tape() as tape:
            loss = self.loss(x, y)
        tape.backward(loss)
        return loss.item()
