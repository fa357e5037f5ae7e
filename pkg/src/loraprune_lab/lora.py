"""Frozen linear layers, low-rank adapters, binary masks and merging.

A layer maps ``x (n x d)`` to ``x W + b`` with ``W`` stored as ``d x k``
(inputs by outputs). Attaching an adapter freezes ``W0`` and trains either

* parallel factors ``A (r x k)``, ``B (d x r)`` with ``W = W0 + B A``, or
* sequential factors ``A (r x d)``, ``B (d x r)`` with ``W = (B A + E) W0``.

The binary mask multiplies the adapted composite ``W`` elementwise, so the
pruned forward is ``x (W * mask) + b``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InvariantError
from .tensor import Tensor

PARALLEL = "parallel"
SEQUENTIAL = "sequential"
MODES = (PARALLEL, SEQUENTIAL)
INIT_STD = 0.02


class Linear:
    """Plain dense layer; trainable during full fine-tuning, frozen otherwise."""

    def __init__(self, weight, bias=None, name: str = "", trainable: bool = False):
        self.name = name
        self.weight = Tensor(weight, requires_grad=trainable, name=f"{name}.weight")
        self.bias = None if bias is None else Tensor(bias, requires_grad=trainable, name=f"{name}.bias")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.weight, self.bias) if p is not None and p.requires_grad]

    def freeze(self) -> None:
        for p in (self.weight, self.bias):
            if p is not None:
                p.requires_grad = False
                p.grad = None

    def forward(self, x, override: Tensor | None = None) -> Tensor:
        w = self.weight if override is None else override
        z = T.matmul(x, w)
        return z if self.bias is None else T.add(z, self.bias)

    def merge(self) -> Tensor:
        return Tensor(self.weight.data)


class LoraModule:
    """Frozen base weight plus trainable low-rank factors and a binary mask."""

    def __init__(self, base: Linear, A: np.ndarray, B: np.ndarray, mode: str):
        if mode not in MODES:
            raise ConfigError(f"unknown adapter mode {mode!r}; expected one of {MODES}")
        d, k = base.shape
        r = A.shape[0]
        want_a = (r, k) if mode == PARALLEL else (r, d)
        if A.shape != want_a or B.shape != (d, r):
            raise DimensionError(
                f"{mode} adapter for {d}x{k} needs A {want_a}, B {(d, r)}; got {A.shape}, {B.shape}"
            )
        base.freeze()
        self.name = base.name
        self.mode = mode
        self.rank = r
        self.W0 = base.weight
        self.bias = base.bias
        self.A = Tensor(A, requires_grad=True, name=f"{self.name}.A")
        self.B = Tensor(B, requires_grad=True, name=f"{self.name}.B")
        self.mask = np.ones((d, k))
        # on-tape intermediates of the latest forward, for exact-gradient criteria
        self.product: Tensor | None = None
        self.composite: Tensor | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.W0.shape

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def composite_tensor(self) -> Tensor:
        """Build the adapted weight on the active tape."""
        ba = T.matmul(self.B, self.A)
        if self.mode == PARALLEL:
            w = T.add(self.W0, ba)
        else:
            w = T.matmul(T.add(ba, np.eye(self.shape[0])), self.W0)
        self.product, self.composite = ba, w
        return w

    def composite_array(self) -> np.ndarray:
        """Dense unmasked composite, computed off-tape."""
        ba = self.B.data @ self.A.data
        if self.mode == PARALLEL:
            return self.W0.data + ba
        return (ba + np.eye(self.shape[0])) @ self.W0.data

    def forward(self, x, override: Tensor | None = None) -> Tensor:
        """Masked forward ``x (W * mask) + b``.

        ``override`` substitutes an externally built composite ``W`` (still
        masked); oracles use it to differentiate w.r.t. ``W`` as a leaf.
        """
        x = T.as_tensor(x)
        if x.shape[1] != self.shape[0]:
            raise DimensionError(f"{self.name}: input has {x.shape[1]} columns, layer expects {self.shape[0]}")
        w = self.composite_tensor() if override is None else override
        if w.shape != self.mask.shape:
            raise DimensionError(f"{self.name}: mask {self.mask.shape} vs weight {w.shape}")
        z = T.matmul(x, T.hadamard(w, self.mask))
        return z if self.bias is None else T.add(z, self.bias)

    forward_masked = forward

    def merge(self) -> Tensor:
        """Re-parameterised dense weight ``W * mask`` as a frozen tensor."""
        return Tensor(self.composite_array() * self.mask)

    def apply_mask(self, new_mask) -> None:
        new_mask = np.asarray(new_mask, dtype=np.float64)
        if new_mask.shape != self.mask.shape:
            raise DimensionError(f"{self.name}: mask shape {new_mask.shape} != {self.mask.shape}")
        if not np.all((new_mask == 0.0) | (new_mask == 1.0)):
            raise InvariantError(f"{self.name}: mask entries must be 0 or 1")
        if np.any(new_mask > self.mask):
            raise InvariantError(f"{self.name}: cannot revive pruned mask entries")
        self.mask = new_mask.copy()

    def n_pruned(self) -> int:
        return int(self.mask.size - np.count_nonzero(self.mask))

    def sparsity(self) -> float:
        return self.n_pruned() / self.mask.size


def attach_lora(layer: Linear, rank: int, mode: str = PARALLEL, rng: np.random.Generator | None = None) -> LoraModule:
    """Freeze ``layer`` and wrap it with a zero-product adapter (B = 0)."""
    d, k = layer.shape
    if not 1 <= rank < min(d, k):
        raise ConfigError(f"{layer.name}: rank must satisfy 1 <= r < min(d, k) = {min(d, k)}, got {rank}")
    if mode not in MODES:
        raise ConfigError(f"unknown adapter mode {mode!r}; expected one of {MODES}")
    rng = rng if rng is not None else np.random.default_rng(0)
    a_cols = k if mode == PARALLEL else d
    A = rng.normal(0.0, INIT_STD, size=(rank, a_cols))
    B = np.zeros((d, rank))
    return LoraModule(layer, A, B, mode)
