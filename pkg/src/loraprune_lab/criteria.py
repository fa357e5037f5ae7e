"""Importance criteria for unstructured pruning of adapted layers.

The LoRA-gradient criterion never touches the gradient of the frozen weight.
It rebuilds an estimate of the product gradient from the adapter factor
gradients alone::

    G_hat = dB @ A + B @ dA - dB @ dA

which is exactly the (negated, learning-rate free) one-step change of ``B A``
under plain SGD. Scores are then squared first-order Taylor terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .lora import PARALLEL, SEQUENTIAL, LoraModule

LORA_GRAD = "lora-grad"
EXACT_GRAD = "exact-grad"
MAGNITUDE = "magnitude"
MOVEMENT = "movement"
RANDOM = "random"
CRITERIA = (LORA_GRAD, EXACT_GRAD, MAGNITUDE, MOVEMENT, RANDOM)

EMA_RECURSIVE = "recursive"
EMA_LITERAL = "literal"
EMA_MODES = (EMA_RECURSIVE, EMA_LITERAL)

SEQ_CHAIN = "chain"
SEQ_LITERAL = "literal"
SEQ_VARIANTS = (SEQ_CHAIN, SEQ_LITERAL)


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def estimate_product_gradient(A, B, gradA, gradB) -> np.ndarray:
    """Product-gradient estimate from factor values and factor gradients."""
    if gradA is None or gradB is None:
        raise UsageError("adapter gradients are missing; run a backward pass first")
    A, B, gA, gB = _arr(A), _arr(B), _arr(gradA), _arr(gradB)
    if gA.shape != A.shape or gB.shape != B.shape:
        raise DimensionError("factor gradients must match factor shapes")
    return gB @ A + B @ gA - gB @ gA


def module_product_gradient(m: LoraModule) -> np.ndarray:
    return estimate_product_gradient(m.A, m.B, m.A.grad, m.B.grad)


def importance_parallel(m: LoraModule, g_hat) -> np.ndarray:
    """``(G_ij * ((BA)_ij + w0_ij))**2`` for a parallel adapter."""
    if m.mode != PARALLEL:
        raise UsageError(f"{m.name}: parallel importance on a {m.mode} adapter")
    g = _arr(g_hat)
    if g.shape != m.shape:
        raise DimensionError(f"{m.name}: gradient {g.shape} vs weight {m.shape}")
    return (g * (m.B.data @ m.A.data + m.W0.data)) ** 2


def importance_sequential(m: LoraModule, g_hat, variant: str = SEQ_CHAIN) -> np.ndarray:
    """Sequential-adapter importance from a ``d x d`` product-gradient estimate.

    ``literal`` multiplies elementwise by the frozen weight (square layers only);
    ``chain`` pushes the estimate through the frozen right factor first.
    """
    if m.mode != SEQUENTIAL:
        raise UsageError(f"{m.name}: sequential importance on a {m.mode} adapter")
    if variant not in SEQ_VARIANTS:
        raise ConfigError(f"unknown sequential variant {variant!r}")
    d, k = m.shape
    g = _arr(g_hat)
    if g.shape != (d, d):
        raise DimensionError(f"{m.name}: expected a {d}x{d} product gradient, got {g.shape}")
    w = m.composite_array()
    if variant == SEQ_LITERAL:
        if d != k:
            raise ConfigError(f"{m.name}: literal sequential scoring needs a square layer, got {d}x{k}")
        return (g * m.W0.data * w) ** 2
    return ((g @ m.W0.data) * w) ** 2


def importance_lora(m: LoraModule, g_hat, variant: str = SEQ_CHAIN) -> np.ndarray:
    if m.mode == PARALLEL:
        return importance_parallel(m, g_hat)
    return importance_sequential(m, g_hat, variant)


def importance_taylor_exact(W, gradW) -> np.ndarray:
    return (_arr(gradW) * _arr(W)) ** 2


def importance_magnitude(W) -> np.ndarray:
    return np.abs(_arr(W))


def importance_random(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=shape)


def ema(prev_smooth, prev_inst, inst, lam: float, mode: str = EMA_RECURSIVE) -> np.ndarray:
    """One moving-average update; ``literal`` mixes the previous *instantaneous* score."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if mode not in EMA_MODES:
        raise ConfigError(f"unknown EMA mode {mode!r}")
    history = prev_smooth if mode == EMA_RECURSIVE else prev_inst
    return lam * history + (1.0 - lam) * inst


@dataclass
class ImportanceState:
    """Per-layer instantaneous/smoothed scores and movement accumulators."""

    lam: float = 0.9
    inst: dict[str, np.ndarray] = field(default_factory=dict)
    smooth: dict[str, np.ndarray] = field(default_factory=dict)
    prev_inst: dict[str, np.ndarray] = field(default_factory=dict)
    mvp_acc: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")


def ema_update(state: ImportanceState, inst_new: dict[str, np.ndarray], mode: str = EMA_RECURSIVE) -> None:
    """Fold new instantaneous scores into ``state.smooth``; the first call copies them."""
    if mode not in EMA_MODES:
        raise ConfigError(f"unknown EMA mode {mode!r}")
    for name, inst in inst_new.items():
        inst = np.array(inst, dtype=np.float64)
        if state.step == 0 or name not in state.smooth:
            state.smooth[name] = inst.copy()
        else:
            state.smooth[name] = ema(state.smooth[name], state.inst[name], inst, state.lam, mode)
        state.prev_inst[name] = state.inst.get(name, inst)
        state.inst[name] = inst
    state.step += 1


def importance_movement_update(state: ImportanceState, name: str, W, gradW) -> np.ndarray:
    """Accumulate ``-gradW * W`` for layer ``name`` and return the running score."""
    term = -_arr(gradW) * _arr(W)
    acc = state.mvp_acc.get(name)
    state.mvp_acc[name] = term.copy() if acc is None else acc + term
    return state.mvp_acc[name]
