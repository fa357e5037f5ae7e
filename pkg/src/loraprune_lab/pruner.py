"""Progressive pruning of adapted layers with a cubic sparsity schedule.

Each iteration clears gradients, runs the masked forward/backward, scores
every prunable layer with the configured criterion, smooths the scores and
steps the adapters. Every ``prune_interval`` iterations inside the prune
window the smallest smoothed scores are masked until the layer (or the whole
prunable pool, for global scope) reaches the scheduled sparsity.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import criteria as C
from .errors import ConfigError, InvariantError, UsageError
from .lora import PARALLEL, SEQUENTIAL, LoraModule
from .models import Model
from .oracles import rank_stats
from .tensor import Tape, sgd_step

PER_LAYER = "per-layer"
GLOBAL = "global"
SCOPES = (PER_LAYER, GLOBAL)
PROGRESSIVE = "progressive"
ONE_SHOT = "one-shot"
_QUOTA_SLACK = 1e-9


@dataclass
class PruneConfig:
    target_sparsity: float = 0.5
    lam: float = 0.9
    total_iterations: int = 100
    prune_start_frac: float = 0.10
    prune_end_frac: float = 0.70
    prune_interval: int = 1
    criterion: str = C.LORA_GRAD
    ema_mode: str = C.EMA_RECURSIVE
    scope: str = PER_LAYER
    seed: int = 0
    lr: float = 0.01
    batch_size: int = 32
    seq_variant: str = C.SEQ_CHAIN
    finetune: str = "lora"
    schedule: str = PROGRESSIVE
    track_oracle: bool = False

    def __post_init__(self):
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigError(f"target_sparsity must lie in [0, 1), got {self.target_sparsity}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.prune_start_frac < self.prune_end_frac <= 1.0:
            raise ConfigError("need 0 <= prune_start_frac < prune_end_frac <= 1")
        if self.total_iterations < 1 or self.prune_interval < 1 or self.batch_size < 1:
            raise ConfigError("total_iterations, prune_interval and batch_size must be >= 1")
        checks = {
            "criterion": (self.criterion, C.CRITERIA),
            "ema_mode": (self.ema_mode, C.EMA_MODES),
            "scope": (self.scope, SCOPES),
            "seq_variant": (self.seq_variant, C.SEQ_VARIANTS),
            "finetune": (self.finetune, ("lora", "none")),
            "schedule": (self.schedule, (PROGRESSIVE, ONE_SHOT)),
        }
        for key, (value, allowed) in checks.items():
            if value not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")
        Schedule.from_config(self)


@dataclass(frozen=True)
class Schedule:
    t_start: int
    t_end: int
    target: float
    total: int

    @classmethod
    def from_config(cls, cfg: PruneConfig) -> "Schedule":
        t_i = math.ceil(cfg.prune_start_frac * cfg.total_iterations)
        t_f = math.floor(cfg.prune_end_frac * cfg.total_iterations)
        if t_f <= t_i:
            raise ConfigError(
                f"prune window [{t_i}, {t_f}] is empty for {cfg.total_iterations} iterations"
            )
        return cls(t_i, t_f, cfg.target_sparsity, cfg.total_iterations)

    def __call__(self, t: int) -> float:
        if not 0 <= t <= self.total:
            raise UsageError(f"iteration {t} outside [0, {self.total}]")
        if t <= self.t_start:
            return 0.0
        if t >= self.t_end:
            return self.target
        frac = (t - self.t_start) / (self.t_end - self.t_start)
        return self.target * (1.0 - (1.0 - frac) ** 3)

    def prune_iterations(self, interval: int) -> list[int]:
        its = list(range(self.t_start, self.t_end + 1, interval))
        if its[-1] != self.t_end:
            its.append(self.t_end)
        return its


def sparsity_target(t: int, cfg: PruneConfig) -> float:
    return Schedule.from_config(cfg)(t)


def _quota(target: float, n: int) -> int:
    return int(math.floor(target * n + _QUOTA_SLACK))


def _masked_scores(state: C.ImportanceState, name: str, m: LoraModule) -> np.ndarray:
    if name not in state.smooth:
        raise UsageError(f"no importance scores for layer {name}")
    scores = np.array(state.smooth[name], dtype=np.float64).ravel()
    scores[m.mask.ravel() == 0] = -np.inf
    return scores


def prune_step(model: Model, state: C.ImportanceState, target: float, scope: str = PER_LAYER) -> int:
    """Mask the lowest-scoring entries until ``floor(target * n)`` are zero.

    Already pruned entries sort first, so only the shortfall is newly removed.
    Ties resolve in (layer, row, col) order. Returns the number of new zeros.
    """
    if scope not in SCOPES:
        raise ConfigError(f"scope must be one of {SCOPES}, got {scope!r}")
    mods = model.lora_modules()
    if not mods:
        raise UsageError("model has no prunable layers")
    before = sum(m.n_pruned() for m in mods.values())

    if scope == PER_LAYER:
        for name, m in mods.items():
            want = _quota(target, m.mask.size)
            if want < m.n_pruned():
                raise InvariantError(f"{name}: target {target} is below current sparsity {m.sparsity()}")
            order = np.argsort(_masked_scores(state, name, m), kind="stable")
            new = m.mask.ravel().copy()
            new[order[:want]] = 0.0
            m.apply_mask(new.reshape(m.mask.shape))
    else:
        names = list(mods)
        pool = np.concatenate([_masked_scores(state, n, mods[n]) for n in names])
        want = _quota(target, pool.size)
        if want < before:
            raise InvariantError(f"target {target} is below current global sparsity")
        flat = np.ones(pool.size)
        flat[np.argsort(pool, kind="stable")[:want]] = 0.0
        offset = 0
        for n in names:
            m = mods[n]
            m.apply_mask(m.mask * flat[offset:offset + m.mask.size].reshape(m.mask.shape))
            offset += m.mask.size

    return sum(m.n_pruned() for m in mods.values()) - before


def one_shot_prune(model: Model, state: C.ImportanceState, s: float, scope: str = PER_LAYER) -> int:
    return prune_step(model, state, s, scope)


# ------------------------------------------------------------------ the loop


@dataclass
class PruneEvent:
    iteration: int
    target: float
    newly_pruned: int
    layer_zeros: dict[str, int]
    layer_sizes: dict[str, int]


@dataclass
class RunReport:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    events: list[PruneEvent] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def batch_stream(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless minibatches; one shuffled pass over ``range(n)`` per epoch."""
    while True:
        perm = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield perm[lo:lo + batch_size]


def check_compatible(model: Model, cfg: PruneConfig) -> None:
    for name, m in model.lora_modules().items():
        if (cfg.criterion == C.LORA_GRAD and m.mode == SEQUENTIAL
                and cfg.seq_variant == C.SEQ_LITERAL and m.shape[0] != m.shape[1]):
            raise ConfigError(f"{name}: literal sequential scoring needs a square layer, got {m.shape}")


def instant_scores(model: Model, state: C.ImportanceState, criterion: str, cfg: PruneConfig) -> dict[str, np.ndarray]:
    """Score every prunable layer from the gradients of the latest backward pass."""
    out = {}
    for i, (name, m) in enumerate(model.lora_modules().items()):
        if criterion == C.LORA_GRAD:
            out[name] = C.importance_lora(m, C.module_product_gradient(m), cfg.seq_variant)
        elif criterion == C.EXACT_GRAD:
            if m.mode == PARALLEL:
                out[name] = C.importance_parallel(m, m.product.grad)
            else:
                out[name] = C.importance_taylor_exact(m.composite.data, m.composite.grad)
        elif criterion == C.MAGNITUDE:
            out[name] = C.importance_magnitude(m.composite_array())
        elif criterion == C.MOVEMENT:
            out[name] = C.importance_movement_update(state, name, m.composite.data, m.composite.grad)
        else:
            if name not in state.inst:
                state.inst[name] = C.importance_random(m.shape, seed=cfg.seed * 1009 + i)
            out[name] = state.inst[name]
    return out


def _update_state(state: C.ImportanceState, inst: dict, criterion: str, ema_mode: str) -> None:
    if criterion in (C.LORA_GRAD, C.EXACT_GRAD):
        C.ema_update(state, inst, ema_mode)
        return
    # magnitude, movement and random scores are used as they are
    for name, s in inst.items():
        state.inst[name] = s
        state.smooth[name] = s
    state.step += 1


def _pool_rank_stats(model: Model, a: C.ImportanceState, b: C.ImportanceState):
    sa, sb = [], []
    for name, m in model.lora_modules().items():
        live = m.mask.ravel() != 0
        sa.append(a.smooth[name].ravel()[live])
        sb.append(b.smooth[name].ravel()[live])
    return rank_stats(np.concatenate(sa), np.concatenate(sb), ks=(0.5,))


def run(model: Model, X: np.ndarray, y: np.ndarray, cfg: PruneConfig,
        on_iteration: Callable[[int, float], None] | None = None) -> RunReport:
    """Joint LoRA fine-tuning and progressive (or terminal one-shot) pruning."""
    mods = model.lora_modules()
    if not mods:
        raise UsageError("attach adapters before pruning")
    check_compatible(model, cfg)
    schedule = Schedule.from_config(cfg)
    prune_at = set(schedule.prune_iterations(cfg.prune_interval)) if cfg.schedule == PROGRESSIVE else set()
    rng = np.random.default_rng(cfg.seed)
    batches = batch_stream(len(X), cfg.batch_size, rng)
    params = model.parameters()
    state = C.ImportanceState(lam=cfg.lam)
    shadow_criterion = C.EXACT_GRAD if cfg.criterion == C.LORA_GRAD else C.LORA_GRAD
    shadow = C.ImportanceState(lam=cfg.lam) if cfg.track_oracle else None
    report = RunReport()
    oracle_stats = []
    start = time.perf_counter()

    def record_event(t, target):
        new = prune_step(model, state, target, cfg.scope)
        report.events.append(PruneEvent(
            t, target, new,
            {n: m.n_pruned() for n, m in mods.items()},
            {n: m.mask.size for n, m in mods.items()},
        ))

    for t in range(1, cfg.total_iterations + 1):
        model.zero_grad()
        idx = next(batches)
        with Tape() as tape:
            loss = model.loss(X[idx], y[idx])
        tape.backward(loss)

        # scores use the factors at which the gradient was taken
        inst = instant_scores(model, state, cfg.criterion, cfg)
        if shadow is not None:
            _update_state(shadow, instant_scores(model, shadow, shadow_criterion, cfg),
                          shadow_criterion, cfg.ema_mode)
        if cfg.finetune == "lora":
            sgd_step(params, cfg.lr)
        _update_state(state, inst, cfg.criterion, cfg.ema_mode)

        if t in prune_at:
            if shadow is not None:
                oracle_stats.append(_pool_rank_stats(model, state, shadow))
            record_event(t, schedule(t))
        report.rows.append((t, loss.item(), model.sparsity(), cfg.lr))
        if on_iteration is not None:
            on_iteration(t, loss.item())

    if cfg.schedule == ONE_SHOT:
        if shadow is not None:
            oracle_stats.append(_pool_rank_stats(model, state, shadow))
        record_event(cfg.total_iterations, cfg.target_sparsity)

    report.summary = {
        "criterion": cfg.criterion,
        "seed": cfg.seed,
        "target_sparsity": cfg.target_sparsity,
        "final_sparsity": model.sparsity(),
        "layer_sparsity": {n: m.sparsity() for n, m in mods.items()},
        "final_loss": report.rows[-1][1],
    }
    if oracle_stats:
        report.summary["oracle_spearman"] = float(np.mean([s.spearman for s in oracle_stats]))
        report.summary["oracle_top50_overlap"] = float(np.mean([s.topk_overlap[0.5] for s in oracle_stats]))
    report.summary["wall_time_s"] = time.perf_counter() - start
    model.zero_grad()
    return report
