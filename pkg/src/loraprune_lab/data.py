"""Deterministic synthetic classification tasks.

``task_seed`` fixes the underlying distribution (class means, spiral
embedding, teacher network); ``seed`` fixes the drawn samples and the split.
``shift`` perturbs the distribution so a downstream task can differ from the
source task a base model was trained on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

KINDS = ("blobs", "spirals", "lowrank-teacher")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass
class Dataset:
    name: str
    features: np.ndarray
    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train, "val": self.val, "test": self.test}[which]
        return self.features[idx], self.labels[idx]

    def to_bytes(self) -> bytes:
        return b"".join(a.tobytes() for a in (self.features, self.labels, self.train, self.val, self.test))


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes).astype(np.int64)


def _blobs(n, d, classes, rng, task_rng, shift, spread, noise):
    means = task_rng.normal(0.0, spread, size=(classes, d))
    if shift:
        means = means + shift * task_rng.normal(0.0, spread, size=(classes, d))
    y = _balanced_labels(n, classes, rng)
    return means[y] + noise * rng.normal(size=(n, d)), y, {"means": means}


def _spirals(n, d, classes, rng, task_rng, shift, noise):
    if d < 2:
        raise ConfigError("spirals need d >= 2")
    y = _balanced_labels(n, classes, rng)
    r = rng.uniform(0.1, 1.0, size=n)
    theta = 3.0 * np.pi * r + 2.0 * np.pi * y / classes + shift
    plane = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    basis, _ = np.linalg.qr(task_rng.normal(size=(d, d)))
    x = plane @ basis[:, :2].T + noise * rng.normal(size=(n, d))
    return x, y, {}


def teacher_weights(d: int, hidden: int, classes: int, task_rng: np.random.Generator,
                    shift: float, delta_rank: int = 2) -> dict[str, np.ndarray]:
    w1 = task_rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden))
    w2 = task_rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, classes))
    u = task_rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, delta_rank))
    v = task_rng.normal(0.0, 1.0, size=(delta_rank, hidden))
    return {"w1": w1, "w2": w2, "delta": shift * (u @ v)}


def _lowrank_teacher(n, d, classes, rng, task_rng, shift, hidden):
    t = teacher_weights(d, hidden, classes, task_rng, shift)
    x = rng.normal(size=(n, d))
    logits = np.maximum(x @ (t["w1"] + t["delta"]), 0.0) @ t["w2"]
    return x, logits.argmax(axis=1).astype(np.int64), {"teacher": t}


def gen_dataset(kind: str, n: int, d: int, classes: int, seed: int, *, task_seed: int = 0,
                shift: float = 0.0, noise: float = 1.0, spread: float = 1.5,
                hidden: int = 16) -> Dataset:
    if kind not in KINDS:
        raise ConfigError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if n < 2 or d < 1 or classes < 2:
        raise ConfigError(f"need n >= 2, d >= 1, classes >= 2 (got n={n}, d={d}, classes={classes})")
    rng = np.random.default_rng([seed, 1])
    task_rng = np.random.default_rng([task_seed, 2])
    if kind == "blobs":
        x, y, meta = _blobs(n, d, classes, rng, task_rng, shift, spread, noise)
    elif kind == "spirals":
        x, y, meta = _spirals(n, d, classes, rng, task_rng, shift, 0.05 * noise)
    else:
        x, y, meta = _lowrank_teacher(n, d, classes, rng, task_rng, shift, hidden)

    perm = np.random.default_rng([seed, 3]).permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return Dataset(
        name=kind,
        features=x,
        labels=y,
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train:n_train + n_val]),
        test=np.sort(perm[n_train + n_val:]),
        seed=seed,
        meta=meta,
    )
