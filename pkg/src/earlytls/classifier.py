"""C4.5-style decision tree.

Binary splits only: ``x <= threshold`` for numeric features and ``x == code``
for categorical ones. Splits are chosen by gain ratio; the finished tree is
pruned bottom-up by subtree replacement against the upper confidence bound of
the leaf error rate.

Model text format (UTF-8, LF line endings)::

    c45-model v1 features=<m> labels=<s>
    label <index> <name>                                  (s lines, index order)
    node <id> split f=<idx> kind=<le|eq> v=<value> l=<id> r=<id>
    node <id> leaf label=<idx> counts=<idx>:<n>[,<idx>:<n>...]

Nodes are listed in pre-order and numbered consecutively from 0 (the root).
Numeric thresholds are written with Python's shortest round-trip float repr,
categorical codes as integers; ``counts`` lists non-zero label counts in
increasing label index.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "EmptyDataset",
    "EmptyCounts",
    "FormatError",
    "TrainParams",
    "Dataset",
    "Leaf",
    "Split",
    "DecisionTree",
    "entropy",
    "best_split",
    "train",
    "predict",
    "serialize",
    "deserialize",
    "pessimistic_error",
    "normal_ppf",
]

# gain ratios closer than this are ties, settled by the documented tie rules
TIE_TOL = 1e-12
MIN_GAIN = 1e-12


class EmptyDataset(ValueError):
    pass


class EmptyCounts(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class TrainParams:
    min_leaf: int = 2
    prune: bool = True
    confidence: float = 0.25
    categorical_features: frozenset = frozenset({22})

    def __post_init__(self):
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must be in (0, 1)")
        object.__setattr__(self, "categorical_features", frozenset(self.categorical_features))


class Dataset:
    """Feature matrix, integer-coded labels and the sorted label vocabulary."""

    def __init__(self, X, labels: Sequence[str], vocabulary: Optional[Sequence[str]] = None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be 2-D")
        if len(labels) != X.shape[0]:
            raise ValueError("one label per row required")
        vocab = sorted(set(labels)) if vocabulary is None else list(vocabulary)
        index = {name: i for i, name in enumerate(vocab)}
        missing = set(labels) - index.keys()
        if missing:
            raise ValueError(f"labels outside vocabulary: {sorted(missing)[:5]}")
        self.X = X
        self.labels = vocab
        self.y = np.fromiter((index[l] for l in labels), dtype=np.intp, count=len(labels))

    @classmethod
    def from_instances(cls, instances, vocabulary=None) -> "Dataset":
        X = (np.vstack([i.features for i in instances]) if instances
             else np.zeros((0, 0)))
        return cls(X, [i.label for i in instances], vocabulary)

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        out = Dataset.__new__(Dataset)
        out.X = self.X[idx]
        out.y = self.y[idx]
        out.labels = self.labels
        return out

    def label_names(self) -> list[str]:
        return [self.labels[i] for i in self.y]


# -- information measures ---------------------------------------------------

def entropy(class_counts) -> float:
    """Shannon entropy in bits of a label -> count mapping (or count sequence)."""
    counts = class_counts.values() if hasattr(class_counts, "values") else class_counts
    counts = [c for c in counts if c > 0]
    total = sum(counts)
    if total <= 0:
        raise EmptyCounts("entropy of empty counts")
    return -sum((c / total) * math.log2(c / total) for c in counts)


def _xlogx(a: np.ndarray) -> np.ndarray:
    return a * np.log2(np.where(a > 0, a, 1.0))


def _entropy_rows(C: np.ndarray, n: np.ndarray) -> np.ndarray:
    # H = log2 n - sum(c log2 c) / n
    return np.log2(n) - _xlogx(C).sum(axis=1) / n


@dataclass(frozen=True)
class _Candidate:
    feature: int
    kind: str  # "le" or "eq"
    value: float
    gain: float
    gain_ratio: float


def _score(L: np.ndarray, total: np.ndarray, n: int, parent_h: float, min_leaf: int):
    nl = L.sum(axis=1)
    nr = n - nl
    ok = (nl >= min_leaf) & (nr >= min_leaf)
    if not ok.any():
        return None
    L = L[ok]
    nl = nl[ok].astype(float)
    nr = nr[ok].astype(float)
    R = total - L
    gain = parent_h - (nl / n) * _entropy_rows(L, nl) - (nr / n) * _entropy_rows(R, nr)
    pl, pr = nl / n, nr / n
    split_info = -(pl * np.log2(pl) + pr * np.log2(pr))
    ratio = gain / split_info
    keep = gain > MIN_GAIN
    if not keep.any():
        return None
    ratio = np.where(keep, ratio, -np.inf)
    best = ratio.max()
    pick = int(np.flatnonzero(ratio >= best - TIE_TOL)[0])
    where = np.flatnonzero(ok)[pick]
    return where, float(gain[pick]), float(ratio[pick])


def _split_feature(x: np.ndarray, y: np.ndarray, k: int, feature: int, categorical: bool,
                   min_leaf: int, total: np.ndarray, parent_h: float) -> Optional[_Candidate]:
    n = len(x)
    if categorical:
        codes, inv = np.unique(x, return_inverse=True)
        if len(codes) < 2:
            return None
        L = np.zeros((len(codes), k))
        np.add.at(L, (inv, y), 1.0)
        res = _score(L, total, n, parent_h, min_leaf)
        if res is None:
            return None
        where, gain, ratio = res
        return _Candidate(feature, "eq", float(codes[where]), gain, ratio)

    order = np.argsort(x, kind="stable")
    xs = x[order]
    boundary = np.flatnonzero(xs[:-1] < xs[1:])
    if len(boundary) == 0:
        return None
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y[order]] = 1.0
    L = np.cumsum(onehot, axis=0)[boundary]
    res = _score(L, total, n, parent_h, min_leaf)
    if res is None:
        return None
    where, gain, ratio = res
    i = boundary[where]
    lo, hi = xs[i], xs[i + 1]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return _Candidate(feature, "le", float(thr), gain, ratio)


def best_split(X, y, feature: int, is_categorical: bool, min_leaf: int = 2,
               n_classes: Optional[int] = None) -> Optional[tuple]:
    """Best binary test on one feature as ``(test, gain, gain_ratio)``.

    ``test`` is ``("le", threshold)`` or ``("eq", code)``. Returns ``None`` when
    no candidate has positive gain with ``min_leaf`` instances on each side.
    """
    X = np.asarray(X, dtype=float)
    x = X[:, feature] if X.ndim == 2 else X
    y = np.asarray(y, dtype=np.intp)
    k = int(n_classes if n_classes is not None else y.max() + 1)
    total = np.bincount(y, minlength=k).astype(float)
    n = len(y)
    if n < 2 or np.count_nonzero(total) < 2:
        return None
    parent_h = float(_entropy_rows(total[None, :], np.array([float(n)]))[0])
    cand = _split_feature(x, y, k, feature, is_categorical, min_leaf, total, parent_h)
    if cand is None:
        return None
    return (cand.kind, cand.value), cand.gain, cand.gain_ratio


# -- tree -------------------------------------------------------------------

@dataclass(eq=False)
class Leaf:
    label: int
    counts: np.ndarray  # per-label training counts (length s)

    @property
    def training_errors(self) -> int:
        return int(self.counts.sum() - self.counts[self.label])


@dataclass(eq=False)
class Split:
    feature: int
    kind: str
    value: float
    left: "Node"
    right: "Node"
    counts: np.ndarray


Node = Union[Leaf, Split]


def _make_leaf(counts: np.ndarray) -> Leaf:
    return Leaf(int(np.argmax(counts)), counts)  # argmax keeps the first (smallest) label


@dataclass(eq=False)
class DecisionTree:
    root: Node
    labels: list
    n_features: int
    _flat: Optional[tuple] = field(default=None, repr=False)

    def nodes(self) -> Iterable[Node]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if isinstance(node, Split):
                stack.append(node.right)
                stack.append(node.left)

    @property
    def node_count(self) -> int:
        return sum(1 for _ in self.nodes())

    @property
    def leaf_count(self) -> int:
        return sum(1 for n in self.nodes() if isinstance(n, Leaf))

    @property
    def depth(self) -> int:
        best = 0
        stack = [(self.root, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if isinstance(node, Split):
                stack.append((node.left, d + 1))
                stack.append((node.right, d + 1))
        return best

    def leaf_for(self, fv) -> Leaf:
        node = self.root
        while isinstance(node, Split):
            v = fv[node.feature]
            go_left = v == node.value if node.kind == "eq" else v <= node.value
            node = node.left if go_left else node.right
        return node

    def predict(self, fv) -> tuple[str, float, dict]:
        return predict(self, fv)

    def _compile(self) -> tuple:
        if self._flat is None:
            order = list(self.nodes())
            ids = {id(n): i for i, n in enumerate(order)}
            m = len(order)
            feat = np.zeros(m, dtype=np.intp)
            value = np.zeros(m)
            is_eq = np.zeros(m, dtype=bool)
            left = np.full(m, -1, dtype=np.intp)
            right = np.full(m, -1, dtype=np.intp)
            label = np.full(m, -1, dtype=np.intp)
            for i, node in enumerate(order):
                if isinstance(node, Split):
                    feat[i], value[i], is_eq[i] = node.feature, node.value, node.kind == "eq"
                    left[i], right[i] = ids[id(node.left)], ids[id(node.right)]
                else:
                    label[i] = node.label
            self._flat = (feat, value, is_eq, left, right, label)
        return self._flat

    def predict_indices(self, X) -> np.ndarray:
        """Vectorized prediction: label index per row of ``X``."""
        X = np.asarray(X, dtype=float)
        feat, value, is_eq, left, right, label = self._compile()
        node = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        active = label[node] < 0
        while active.any():
            r = rows[active]
            nd = node[r]
            v = X[r, feat[nd]]
            thr = value[nd]
            go_left = np.where(is_eq[nd], v == thr, v <= thr)
            node[r] = np.where(go_left, left[nd], right[nd])
            active = label[node] < 0
        return label[node]

    def predict_labels(self, X) -> list[str]:
        return [self.labels[i] for i in self.predict_indices(X)]


def predict(tree: DecisionTree, fv) -> tuple[str, float, dict]:
    """(label, confidence, leaf class counts) for one feature vector."""
    leaf = tree.leaf_for(fv)
    counts = leaf.counts
    total = counts.sum()
    dist = {tree.labels[i]: int(c) for i, c in enumerate(counts) if c}
    return tree.labels[leaf.label], float(counts[leaf.label] / total), dist


def train(data: Dataset, params: TrainParams = TrainParams()) -> DecisionTree:
    n = len(data)
    if n == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    X, y = data.X, data.y
    k = len(data.labels)
    m = X.shape[1]
    cats = params.categorical_features
    min_leaf = params.min_leaf

    def grow(idx: np.ndarray) -> Node:
        yy = y[idx]
        counts = np.bincount(yy, minlength=k).astype(float)
        if np.count_nonzero(counts) < 2 or len(idx) < 2 * min_leaf:
            return _make_leaf(counts)
        parent_h = float(_entropy_rows(counts[None, :], np.array([float(len(idx))]))[0])
        best: Optional[_Candidate] = None
        Xn = X[idx]
        for f in range(m):
            cand = _split_feature(Xn[:, f], yy, k, f, f in cats, min_leaf, counts, parent_h)
            if cand is not None and (best is None
                                     or cand.gain_ratio > best.gain_ratio + TIE_TOL):
                best = cand
        if best is None:
            return _make_leaf(counts)
        col = Xn[:, best.feature]
        mask = col == best.value if best.kind == "eq" else col <= best.value
        return Split(best.feature, best.kind, best.value,
                     grow(idx[mask]), grow(idx[~mask]), counts)

    root = grow(np.arange(n))
    if params.prune:
        root = _prune(root, normal_ppf(1.0 - params.confidence))
    return DecisionTree(root, list(data.labels), m)


# -- pruning ------------------------------------------------------------------

def pessimistic_error(errors: float, n: float, z: float) -> float:
    """Upper confidence bound on the error rate of a leaf with ``errors`` of ``n`` wrong."""
    f = errors / n
    z2 = z * z
    return (f + z2 / (2 * n) + z * math.sqrt(max(f / n - f * f / n + z2 / (4 * n * n), 0.0))) \
        / (1 + z2 / n)


def _estimated_errors(node: Node, z: float) -> float:
    if isinstance(node, Leaf):
        n = float(node.counts.sum())
        return n * pessimistic_error(node.training_errors, n, z)
    return _estimated_errors(node.left, z) + _estimated_errors(node.right, z)


def _prune(node: Node, z: float) -> Node:
    if isinstance(node, Leaf):
        return node
    node.left = _prune(node.left, z)
    node.right = _prune(node.right, z)
    leaf = _make_leaf(node.counts)
    n = float(node.counts.sum())
    if n * pessimistic_error(leaf.training_errors, n, z) <= _estimated_errors(node, z):
        return leaf
    return node


# Acklam's rational approximation to the inverse normal CDF
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549671010269487e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def normal_ppf(p: float) -> float:
    """Standard normal quantile; rational approximation plus one Halley step."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log(1 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


# -- serialization ----------------------------------------------------------

def serialize(tree: DecisionTree) -> bytes:
    lines = [f"c45-model v1 features={tree.n_features} labels={len(tree.labels)}"]
    for i, name in enumerate(tree.labels):
        lines.append(f"label {i} {name}")
    order = list(tree.nodes())
    ids = {id(n): i for i, n in enumerate(order)}
    for i, node in enumerate(order):
        if isinstance(node, Split):
            v = repr(float(node.value)) if node.kind == "le" else str(int(node.value))
            lines.append(f"node {i} split f={node.feature} kind={node.kind} v={v} "
                         f"l={ids[id(node.left)]} r={ids[id(node.right)]}")
        else:
            counts = ",".join(f"{j}:{int(c)}" for j, c in enumerate(node.counts) if c)
            lines.append(f"node {i} leaf label={node.label} counts={counts}")
    return ("\n".join(lines) + "\n").encode("utf-8")


_HEADER = re.compile(r"c45-model v1 features=(\d+) labels=(\d+)")
_LABEL = re.compile(r"label (\d+) (\S.*)")
_SPLIT = re.compile(r"node (\d+) split f=(\d+) kind=(le|eq) v=(\S+) l=(\d+) r=(\d+)")
_LEAF = re.compile(r"node (\d+) leaf label=(\d+) counts=(\d+:\d+(?:,\d+:\d+)*)")


def deserialize(data: Union[bytes, str]) -> DecisionTree:
    """Parse the text model format; raises :class:`FormatError` on any defect."""
    try:
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    except UnicodeDecodeError as exc:
        raise FormatError(f"not UTF-8: {exc}", 1, 0) from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("empty model", 1, 0)
    m = _HEADER.fullmatch(lines[0])
    if not m:
        raise FormatError("bad header", 1, _mismatch_col(lines[0], "c45-model v1 features="))
    n_features, n_labels = int(m.group(1)), int(m.group(2))
    labels = []
    pos = 1
    for i in range(n_labels):
        if pos >= len(lines):
            raise FormatError(f"missing label {i}", pos + 1, 0)
        m = _LABEL.fullmatch(lines[pos])
        if not m or int(m.group(1)) != i:
            raise FormatError(f"expected 'label {i} <name>'", pos + 1,
                              _mismatch_col(lines[pos], f"label {i} "))
        labels.append(m.group(2))
        pos += 1

    raw = []
    for lineno in range(pos, len(lines)):
        line = lines[lineno]
        expect = len(raw)
        m = _SPLIT.fullmatch(line)
        if m:
            nid, f, kind, v, l, r = m.groups()
            if int(f) >= n_features:
                raise FormatError(f"feature {f} out of range", lineno + 1, line.index("f=") + 2)
            try:
                value = float(v) if kind == "le" else float(int(v))
            except ValueError:
                raise FormatError(f"bad value {v!r}", lineno + 1, line.index("v=") + 2) from None
            if not math.isfinite(value):
                raise FormatError("non-finite value", lineno + 1, line.index("v=") + 2)
            raw.append((int(nid), "split", (int(f), kind, value, int(l), int(r)), lineno + 1))
        else:
            m = _LEAF.fullmatch(line)
            if not m:
                raise FormatError("expected a node line", lineno + 1,
                                  _mismatch_col(line, f"node {expect} "))
            nid, lab, counts = m.groups()
            vec = np.zeros(n_labels)
            for item in counts.split(","):
                j, c = (int(t) for t in item.split(":"))
                if j >= n_labels:
                    raise FormatError(f"label index {j} out of range", lineno + 1,
                                      line.index("counts="))
                vec[j] = c
            if int(lab) >= n_labels or vec.sum() <= 0:
                raise FormatError("bad leaf", lineno + 1, line.index("label="))
            raw.append((int(nid), "leaf", (int(lab), vec), lineno + 1))
        if raw[-1][0] != expect:
            raise FormatError(f"node id {raw[-1][0]}, expected {expect}", lineno + 1, 5)
    if not raw:
        raise FormatError("no nodes", len(lines) + 1, 0)

    # rebuild in reverse pre-order so children exist before parents
    built: dict[int, Node] = {}
    used = set()
    for nid, kind, payload, lineno in reversed(raw):
        if kind == "leaf":
            built[nid] = Leaf(payload[0], payload[1])
            continue
        f, k, value, l, r = payload
        for child in (l, r):
            if child <= nid or child not in built or child in used:
                raise FormatError(f"bad child reference {child}", lineno, 0)
            used.add(child)
        left, right = built[l], built[r]
        built[nid] = Split(f, k, value, left, right, left.counts + right.counts)
    if len(used) != len(raw) - 1:
        raise FormatError("unreachable nodes", len(lines), 0)
    return DecisionTree(built[0], labels, n_features)


def _mismatch_col(line: str, expected_prefix: str) -> int:
    for i, (a, b) in enumerate(zip(line, expected_prefix)):
        if a != b:
            return i + 1
    return min(len(line), len(expected_prefix)) + 1
