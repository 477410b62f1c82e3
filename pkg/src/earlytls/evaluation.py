"""Cross-validated experiments over flow stores.

All experiments work on a :class:`~earlytls.pipeline.FlowStore`, which can
re-extract features at any packet threshold ``d``, so training and testing
thresholds can be chosen independently.
"""

from __future__ import annotations

import csv
import io
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .classifier import Dataset, TrainParams, train
from .pipeline import FlowStore

__all__ = [
    "EvalError",
    "LengthMismatch",
    "EmptyInput",
    "TooFewInstances",
    "DisjointLabels",
    "ExperimentConfig",
    "ResultMatrix",
    "accuracy",
    "stratified_folds",
    "cross_validate",
    "run_d_sweep",
    "run_threshold_matrix",
    "run_generic_vs_dedicated",
]


class EvalError(ValueError):
    pass


class LengthMismatch(EvalError):
    pass


class EmptyInput(EvalError):
    pass


class TooFewInstances(EvalError):
    def __init__(self, label: str, count: int, folds: int):
        super().__init__(f"label {label!r} has {count} instances, fewer than {folds} folds")
        self.label = label


class DisjointLabels(EvalError):
    pass


def _as_list(v) -> list[int]:
    return [v] if isinstance(v, (int, np.integer)) else list(v)


@dataclass
class ExperimentConfig:
    folds: int = 10
    seed: int = 0
    min_instances_per_label: int = 14
    train_d: Union[int, Sequence[int]] = 5
    test_d: Union[int, Sequence[int]] = 5
    whole_set: bool = False  # train and test on every flow instead of k-fold
    params: TrainParams = field(default_factory=TrainParams)

    def __post_init__(self):
        if self.folds < 2:
            raise EvalError("folds must be >= 2")

    @property
    def train_ds(self) -> list[int]:
        return _as_list(self.train_d)

    @property
    def test_ds(self) -> list[int]:
        return _as_list(self.test_d)


@dataclass
class ResultMatrix:
    """Accuracy mean/std per (row, column); NaN marks cells not computed."""

    rows: list
    cols: list
    mean: np.ndarray
    std: np.ndarray
    row_title: str = "train_d"
    col_title: str = "test_d"

    def cell(self, row, col) -> float:
        return float(self.mean[self.rows.index(row), self.cols.index(col)])

    def cell_std(self, row, col) -> float:
        return float(self.std[self.rows.index(row), self.cols.index(col)])

    def to_csv(self, which: str = "mean") -> str:
        values = self.mean if which == "mean" else self.std
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"{self.row_title}\\{self.col_title}", *self.cols])
        for r, row in zip(self.rows, values):
            w.writerow([r, *("" if np.isnan(v) else f"{v:.6f}" for v in row)])
        return buf.getvalue()

    def format(self) -> str:
        width = max(8, *(len(str(c)) + 2 for c in self.cols))
        head = f"{self.row_title}\\{self.col_title}"
        lines = [f"{head:>14s}" + "".join(f"{str(c):>{width + 7}s}" for c in self.cols)]
        for i, r in enumerate(self.rows):
            cells = []
            for j in range(len(self.cols)):
                m, s = self.mean[i, j], self.std[i, j]
                cells.append(f"{'-':>{width + 7}s}" if np.isnan(m)
                             else f"{100 * m:>{width}.2f}±{100 * s:<5.2f}"[:width + 7]
                             .rjust(width + 7))
            lines.append(f"{str(r):>14s}" + "".join(cells))
        return "\n".join(lines)


def accuracy(predictions: Sequence, truth: Sequence) -> float:
    """Fraction of predictions equal to the truth."""
    if len(predictions) != len(truth):
        raise LengthMismatch(f"{len(predictions)} predictions, {len(truth)} truths")
    if len(truth) == 0:
        raise EmptyInput("accuracy of zero instances")
    hits = sum(1 for p, t in zip(predictions, truth) if p == t)
    return hits / len(truth)


def stratified_folds(labels: Sequence, k: int, seed: int = 0) -> list[np.ndarray]:
    """Split indices into ``k`` disjoint folds preserving per-label proportions.

    Each label's instances are shuffled (seeded) and dealt round-robin; the
    dealing position carries over between labels so fold totals stay even.
    """
    if k < 2:
        raise EvalError("k must be >= 2")
    labels = list(labels)
    by_label: dict = {}
    for i, lab in enumerate(labels):
        by_label.setdefault(lab, []).append(i)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    folds: list[list[int]] = [[] for _ in range(k)]
    slot = 0
    for lab in sorted(by_label, key=str):
        idx = by_label[lab]
        if len(idx) < k:
            raise TooFewInstances(str(lab), len(idx), k)
        for i in rng.permutation(idx):
            folds[slot % k].append(int(i))
            slot += 1
    return [np.array(sorted(f), dtype=np.intp) for f in folds]


def _prepare(store: FlowStore, cfg: ExperimentConfig) -> FlowStore:
    store = store.filter_min_instances(cfg.min_instances_per_label)
    if len(store) == 0:
        raise EmptyInput("no label passes the minimum-instance filter")
    if not cfg.whole_set:
        smallest = min(Counter(store.labels).values())
        if smallest < cfg.folds:
            lab = min(Counter(store.labels).items(), key=lambda kv: kv[1])[0]
            raise TooFewInstances(lab, smallest, cfg.folds)
    return store


def _splits(n_labels: list, cfg: ExperimentConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    if cfg.whole_set:
        everything = np.arange(len(n_labels))
        return [(everything, everything)]
    folds = stratified_folds(n_labels, cfg.folds, cfg.seed)
    out = []
    for j, test in enumerate(folds):
        train_idx = np.concatenate([f for i, f in enumerate(folds) if i != j])
        out.append((np.sort(train_idx), test))
    return out


def _mean_std(values: list) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def cross_validate(store: FlowStore, d: int, cfg: ExperimentConfig) -> tuple[float, float]:
    """Aligned k-fold accuracy (mean, std over folds) at threshold ``d``."""
    m = run_threshold_matrix(store, ExperimentConfig(
        cfg.folds, cfg.seed, cfg.min_instances_per_label, d, d, cfg.whole_set, cfg.params))
    return m.cell(d, d), m.cell_std(d, d)


def run_d_sweep(store: FlowStore, d_values: Sequence[int],
                cfg: ExperimentConfig) -> list[tuple[int, float, float]]:
    """``(d, mean accuracy, std)`` for models trained and tested at the same ``d``."""
    store = _prepare(store, cfg)
    splits = _splits(store.labels, cfg)
    vocab = sorted(set(store.labels))
    out = []
    for d in d_values:
        data = store.dataset(d, vocab)
        accs = []
        for tr, te in splits:
            tree = train(data.subset(tr), cfg.params)
            accs.append(float(np.mean(tree.predict_indices(data.X[te]) == data.y[te])))
        out.append((d, *_mean_std(accs)))
    return out


def run_threshold_matrix(store: FlowStore, cfg: ExperimentConfig) -> ResultMatrix:
    """Train at each ``train_d`` and test at each ``test_d`` on held-out folds.

    With ``cfg.whole_set`` every flow is used for both training and testing
    and the (trivially perfect) diagonal is left empty.
    """
    store = _prepare(store, cfg)
    splits = _splits(store.labels, cfg)
    vocab = sorted(set(store.labels))
    rows, cols = cfg.train_ds, cfg.test_ds
    tests = {d: store.dataset(d, vocab) for d in cols}
    acc = {(r, c): [] for r in rows for c in cols}
    for r in rows:
        data = store.dataset(r, vocab)
        for tr, te in splits:
            tree = train(data.subset(tr), cfg.params)
            for c in cols:
                if cfg.whole_set and r == c:
                    continue
                t = tests[c]
                acc[r, c].append(float(np.mean(tree.predict_indices(t.X[te]) == t.y[te])))
    mean = np.full((len(rows), len(cols)), np.nan)
    std = np.full((len(rows), len(cols)), np.nan)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            if acc[r, c]:
                mean[i, j], std[i, j] = _mean_std(acc[r, c])
    return ResultMatrix(rows, cols, mean, std)


def run_generic_vs_dedicated(partitions: Mapping[str, FlowStore],
                             cfg: ExperimentConfig) -> ResultMatrix:
    """Dedicated per-partition models vs one pooled model.

    Every partition is split into stratified folds. For each fold a dedicated
    model is trained on each partition's training part and a pooled model on
    the union of all training parts; every model is then scored on every
    partition's held-out part. Rows are models (partition names, then
    ``"pooled"``), columns the partition tested. Training uses the first
    ``train_d`` and testing the first ``test_d`` value of ``cfg``.
    """
    if len(partitions) < 2:
        raise EvalError("need at least two partitions")
    names = list(partitions)
    stores = {n: _prepare(partitions[n], cfg) for n in names}
    label_sets = [set(s.labels) for s in stores.values()]
    if not set.intersection(*label_sets):
        raise DisjointLabels("partitions share no label")
    vocab = sorted(set.union(*label_sets))
    d_tr, d_te = cfg.train_ds[0], cfg.test_ds[0]
    train_sets = {n: stores[n].dataset(d_tr, vocab) for n in names}
    test_sets = {n: stores[n].dataset(d_te, vocab) for n in names}
    splits = {n: _splits(stores[n].labels, cfg) for n in names}
    n_splits = len(next(iter(splits.values())))
    model_names = names + ["pooled"]
    acc = {(m, p): [] for m in model_names for p in names}
    for j in range(n_splits):
        models = {n: train(train_sets[n].subset(splits[n][j][0]), cfg.params) for n in names}
        pooled = Dataset(np.vstack([train_sets[n].X[splits[n][j][0]] for n in names]),
                         [vocab[i] for n in names for i in train_sets[n].y[splits[n][j][0]]],
                         vocab)
        models["pooled"] = train(pooled, cfg.params)
        for m, tree in models.items():
            for p in names:
                te = splits[p][j][1]
                t = test_sets[p]
                acc[m, p].append(float(np.mean(tree.predict_indices(t.X[te]) == t.y[te])))
    mean = np.zeros((len(model_names), len(names)))
    std = np.zeros_like(mean)
    for i, m in enumerate(model_names):
        for k, p in enumerate(names):
            mean[i, k], std[i, k] = _mean_std(acc[m, p])
    return ResultMatrix(model_names, names, mean, std, "model", "tested_on")


def write_result(matrix: ResultMatrix, out_dir: Union[str, os.PathLike], stem: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for which in ("mean", "std"):
        path = os.path.join(out_dir, f"{stem}_{which}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(matrix.to_csv(which))
        paths.append(path)
    return paths
