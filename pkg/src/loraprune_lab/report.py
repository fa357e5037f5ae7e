"""CSV and JSON report writers. Column sets are fixed per ``FORMAT_VERSION``."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable

FORMAT_VERSION = 1
ITERATION_COLUMNS = ("iteration", "loss", "sparsity", "lr", "config_hash")
COMPARE_COLUMNS = (
    "cell", "criterion", "sparsity", "seed", "test_accuracy", "val_accuracy",
    "final_sparsity", "final_loss", "oracle_spearman", "oracle_top50_overlap", "config_hash",
)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_csv(path, columns: tuple[str, ...], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=",", lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def write_iterations(path, rows, config_hash: str) -> None:
    write_csv(path, ITERATION_COLUMNS, (
        {"iteration": it, "loss": loss, "sparsity": sp, "lr": lr, "config_hash": config_hash}
        for it, loss, sp, lr in rows
    ))


def write_compare(path, results: list[dict], config_hash: str) -> None:
    write_csv(path, COMPARE_COLUMNS, ({**r["row"], "config_hash": config_hash} for r in results))


def write_json(path, payload: dict, config_hash: str) -> None:
    body = {"format_version": FORMAT_VERSION, "config_hash": config_hash, **payload}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True, default=float) + "\n")


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
