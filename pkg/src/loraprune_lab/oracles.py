"""Ground truth used to check the approximations.

Nothing here relies on the tape for its answer except
:func:`exact_composite_grad`, and that function is itself checked against
:func:`finite_diff_grad` in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import NonFiniteError, UsageError
from .lora import LoraModule
from .models import Model
from .tensor import Tape, Tensor

FD_STEP = 1e-5
LOO_BUDGET = 512


def finite_diff_grad(f: Callable[[], float], theta: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every entry of ``theta`` (perturbed in place)."""
    if h <= 0:
        raise UsageError("finite-difference step must be positive")
    grad = np.zeros_like(theta.data)
    flat = theta.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"loss is not finite around coordinate {i}")
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference scaled by the larger gradient magnitude."""
    denom = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / denom)


def gradcheck(build_loss: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = FD_STEP) -> float:
    """Worst relative error between tape gradients and central differences."""
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = finite_diff_grad(lambda: build_loss().item(), t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _layer_weight(model: Model, name: str) -> np.ndarray:
    layer = model.layers[name]
    return layer.composite_array() if isinstance(layer, LoraModule) else layer.weight.data.copy()


def exact_composite_grad(model: Model, x, y, names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """dL/dW for each composite weight, treating W as a leaf.

    For a parallel adapter dL/dW equals dL/d(BA). Defaults to the adapted
    layers, or every layer when the model has none. Parameter values and
    gradients are left untouched.
    """
    if names is None:
        names = list(model.lora_modules()) or list(model.layers)
    saved = [(p, p.grad) for p in model.parameters()]
    leaves = {n: Tensor(_layer_weight(model, n), requires_grad=True) for n in names}
    try:
        with Tape() as tape:
            loss = model.loss(x, y, overrides=leaves)
        tape.backward(loss)
    finally:
        for p, g in saved:
            p.grad = g
    return {n: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)) for n, leaf in leaves.items()}


def leave_one_out_importance(model: Model, x, y, layer: str, budget: int = LOO_BUDGET,
                             seed: int = 0) -> np.ndarray:
    """``(L(W) - L(W | w_ij = 0))**2`` by re-running the forward per coordinate.

    Coordinates beyond ``budget`` are skipped (sampled by ``seed``) and come
    back as NaN.
    """
    w = _layer_weight(model, layer)
    base = model.loss_value(x, y, overrides={layer: Tensor(w)})
    n = w.size
    coords = np.arange(n)
    if n > budget:
        coords = np.sort(np.random.default_rng(seed).choice(n, size=budget, replace=False))
    out = np.full(n, np.nan)
    flat = w.reshape(-1)
    for c in coords:
        if flat[c] == 0.0:
            out[c] = 0.0
            continue
        zeroed = flat.copy()
        zeroed[c] = 0.0
        out[c] = (base - model.loss_value(x, y, overrides={layer: Tensor(zeroed.reshape(w.shape))})) ** 2
    return out.reshape(w.shape)


@dataclass
class RankStats:
    spearman: float
    topk_overlap: dict[float, float] = field(default_factory=dict)


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    ra, rb = rankdata(a), rankdata(b)
    if np.all(ra == ra[0]) or np.all(rb == rb[0]):
        return 1.0 if np.array_equal(ra, rb) else 0.0
    ra, rb = ra - ra.mean(), rb - rb.mean()
    rho = float(ra @ rb / np.sqrt((ra @ ra) * (rb @ rb)))
    return min(1.0, max(-1.0, rho))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores; earlier index wins ties."""
    return np.argsort(-np.asarray(scores), kind="stable")[:k]


def rank_stats(scores_a, scores_b, ks: Sequence[float] = (0.1, 0.5)) -> RankStats:
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise UsageError(f"score arrays differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise UsageError("rank statistics need at least two scores")
    overlap = {}
    for frac in ks:
        k = max(1, int(round(frac * a.size)))
        overlap[frac] = len(set(top_k(a, k)) & set(top_k(b, k))) / k
    return RankStats(_spearman(a, b), overlap)
