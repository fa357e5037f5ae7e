"""End-to-end workflows: base training, pruning runs, criterion grids.

Every function here is deterministic given its config and seed; the CLI and
the acceptance tests both go through this module.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import checkpoint
from .config import DataConfig, LabConfig
from .data import Dataset, gen_dataset
from .errors import InvariantError
from .models import Model
from .pruner import PruneConfig, RunReport, batch_stream, run
from .tensor import sgd_step

MERGE_TOL = 1e-12


def make_dataset(dc: DataConfig) -> Dataset:
    return gen_dataset(dc.kind, dc.n, dc.d, dc.classes, dc.seed, task_seed=dc.task_seed,
                       shift=dc.shift, noise=dc.noise, spread=dc.spread, hidden=dc.hidden)


def evaluate(model: Model, X: np.ndarray, y: np.ndarray) -> float:
    """Accuracy of the merged model; checks the merge against the masked forward."""
    merged = model.merged()
    dense = merged.forward(X).data
    gap = float(np.max(np.abs(model.forward(X).data - dense))) if len(X) else 0.0
    if gap > MERGE_TOL:
        raise InvariantError(f"merged model deviates from masked forward by {gap:.3e}")
    return float(np.mean(dense.argmax(axis=1) == y))


def iterations_per_epoch(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size)


def train_full(cfg: LabConfig, data: Dataset | None = None) -> tuple[Model, RunReport]:
    """Full fine-tuning of a fresh model on the source task (no adapters)."""
    data = data if data is not None else make_dataset(cfg.data)
    X, y = data.split("train")
    model = Model.init(cfg.model, trainable=True)
    params = model.parameters()
    rng = np.random.default_rng([cfg.seed, 11])
    batches = batch_stream(len(X), cfg.train.batch_size, rng)
    total = cfg.train.epochs * iterations_per_epoch(len(X), cfg.train.batch_size)
    report = RunReport()
    start = time.perf_counter()
    for t in range(1, total + 1):
        model.zero_grad()
        idx = next(batches)
        loss = model.backward(X[idx], y[idx])
        sgd_step(params, cfg.train.lr)
        report.rows.append((t, loss, 0.0, cfg.train.lr))
    model.zero_grad()
    model.freeze()
    report.summary = {
        "criterion": "none",
        "seed": cfg.seed,
        "final_sparsity": 0.0,
        "val_accuracy": evaluate(model, *data.split("val")),
        "final_accuracy": evaluate(model, *data.split("test")),
        "wall_time_s": time.perf_counter() - start,
    }
    return model, report


def cell_seed(master: int, seed: int) -> int:
    """Seed shared by every cell with the same grid seed (paired comparisons)."""
    return int(np.random.SeedSequence([master, seed]).generate_state(1)[0])


def prune_config(cfg: LabConfig, n_train: int, seed: int, criterion: str | None = None,
                 sparsity: float | None = None, schedule: str | None = None) -> PruneConfig:
    p = cfg.prune
    per_epoch = iterations_per_epoch(n_train, p.batch_size)
    return PruneConfig(
        target_sparsity=p.sparsity if sparsity is None else sparsity,
        lam=p.lam,
        total_iterations=p.epochs * per_epoch,
        prune_start_frac=p.start_frac,
        prune_end_frac=p.end_frac,
        prune_interval=p.interval or per_epoch,
        criterion=p.criterion if criterion is None else criterion,
        ema_mode=p.ema_mode,
        scope=p.scope,
        seed=seed,
        lr=p.lr,
        batch_size=p.batch_size,
        seq_variant=p.seq_variant,
        finetune=p.finetune,
        schedule=p.schedule if schedule is None else schedule,
        track_oracle=p.track_oracle,
    )


def prune_from_base(base: Model | bytes, cfg: LabConfig, data: Dataset, seed: int,
                    criterion: str | None = None, sparsity: float | None = None,
                    schedule: str | None = None) -> tuple[Model, RunReport]:
    """Copy ``base``, attach adapters, run the pruner, and score the result."""
    blob = base if isinstance(base, bytes) else checkpoint.dumps(base)
    model = checkpoint.loads(blob)
    derived = cell_seed(cfg.seed, seed)
    model.attach_lora(np.random.default_rng([derived, 5]))
    X, y = data.split("train")
    pcfg = prune_config(cfg, len(X), derived, criterion, sparsity, schedule)
    report = run(model, X, y, pcfg)
    report.summary["seed"] = seed
    report.summary["val_accuracy"] = evaluate(model, *data.split("val"))
    report.summary["final_accuracy"] = evaluate(model, *data.split("test"))
    return model, report


@dataclass
class Cell:
    index: int
    criterion: str
    sparsity: float
    seed: int


def grid(cfg: LabConfig) -> list[Cell]:
    cells = []
    for crit in cfg.compare.criteria:
        for s in cfg.compare.sparsities:
            for seed in cfg.compare.seeds:
                cells.append(Cell(len(cells), crit, float(s), int(seed)))
    return cells


def _run_cell(args) -> dict:
    blob, cfg, cell = args
    data = make_dataset(cfg.downstream)
    _, report = prune_from_base(blob, cfg, data, cell.seed, cell.criterion, cell.sparsity)
    s = report.summary
    row = {
        "cell": cell.index,
        "criterion": cell.criterion,
        "sparsity": cell.sparsity,
        "seed": cell.seed,
        "test_accuracy": s["final_accuracy"],
        "val_accuracy": s["val_accuracy"],
        "final_sparsity": s["final_sparsity"],
        "final_loss": s["final_loss"],
        "oracle_spearman": s.get("oracle_spearman", float("nan")),
        "oracle_top50_overlap": s.get("oracle_top50_overlap", float("nan")),
    }
    return {"row": row, "rows": report.rows, "wall_time_s": s["wall_time_s"]}


def compare(cfg: LabConfig, base: Model | bytes, jobs: int = 1) -> list[dict]:
    """Run the criterion x sparsity x seed grid; results come back in grid order."""
    blob = base if isinstance(base, bytes) else checkpoint.dumps(base)
    tasks = [(blob, cfg, cell) for cell in grid(cfg)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell, tasks))
    return [_run_cell(t) for t in tasks]


def summarize(results: list[dict]) -> dict:
    """Mean/std test accuracy per (criterion, sparsity)."""
    groups: dict[tuple[str, float], list[dict]] = {}
    for r in results:
        row = r["row"]
        groups.setdefault((row["criterion"], row["sparsity"]), []).append(row)
    out = []
    for (crit, s), rows in groups.items():
        acc = np.array([r["test_accuracy"] for r in rows])
        entry = {"criterion": crit, "sparsity": s, "n": len(rows),
                 "mean_accuracy": float(acc.mean()), "std_accuracy": float(acc.std())}
        overlaps = [r["oracle_top50_overlap"] for r in rows if not np.isnan(r["oracle_top50_overlap"])]
        if overlaps:
            entry["mean_oracle_top50_overlap"] = float(np.mean(overlaps))
            entry["mean_oracle_spearman"] = float(np.mean([r["oracle_spearman"] for r in rows]))
        out.append(entry)
    return {"groups": out}


def describe(cell: Cell) -> dict:
    return asdict(cell)


def with_prune(cfg: LabConfig, **changes) -> LabConfig:
    return replace(cfg, prune=replace(cfg.prune, **changes))
