"""The 36 per-flow statistics used for service identification.

Layout (zero-based column index in brackets):

* [0-8]   client-to-server packets: size mean, p25, p50, p75, variance, max;
  inter-arrival p25, p50, p75
* [9-17]  the same nine for server-to-client packets
* [18-20] ClientHello: session id length, cipher suite count, extensions length
* [21-23] ServerHello: session id length, chosen cipher suite, extensions length
* [24-29] client-to-server application data: size mean, p25, p50, p75, variance, max
* [30-35] the same six for server-to-client application data

Columns 0-17 cover the handshake packets plus the first ``d`` application data
packets; columns 24-35 cover just those application data packets. Sizes are
TCP payload byte counts and times are integer microseconds. Percentiles use
the nearest-rank rule and variance is the population variance. Anything that
cannot be computed is 0.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .reassembly import BWD, FWD, FlowPhase, FlowState

__all__ = [
    "N_FEATURES",
    "FEATURE_NAMES",
    "CIPHER_SUITE_INDEX",
    "INTEGER_FEATURES",
    "NotReady",
    "EmptyInput",
    "SchemaMismatch",
    "LabeledInstance",
    "percentile",
    "size_stats",
    "iat_percentiles",
    "extract",
    "write_feature_csv",
    "read_feature_csv",
]

_SIZE = ["pkt_size_mean", "pkt_size_p25", "pkt_size_p50", "pkt_size_p75",
         "pkt_size_var", "pkt_size_max"]
_IAT = ["iat_p25", "iat_p50", "iat_p75"]

FEATURE_NAMES: tuple[str, ...] = tuple(
    [f"fwd_{n}" for n in _SIZE + _IAT]
    + [f"bwd_{n}" for n in _SIZE + _IAT]
    + ["ch_session_id_len", "ch_cipher_suites_count", "ch_extensions_len",
       "sh_session_id_len", "sh_cipher_suite", "sh_extensions_len"]
    + [f"fwd_app_{n}" for n in _SIZE]
    + [f"bwd_app_{n}" for n in _SIZE]
)
N_FEATURES = len(FEATURE_NAMES)
CIPHER_SUITE_INDEX = FEATURE_NAMES.index("sh_cipher_suite")

# every column except means and variances holds an integer
INTEGER_FEATURES = frozenset(
    i for i, n in enumerate(FEATURE_NAMES) if not n.endswith(("_mean", "_var"))
)

META_COLUMNS = ("meta_flow", "meta_trace", "meta_appdata_available")


class NotReady(Exception):
    pass


class EmptyInput(ValueError):
    pass


class SchemaMismatch(ValueError):
    pass


@dataclass
class LabeledInstance:
    features: np.ndarray
    label: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.label:
            raise ValueError("label must be non-empty")


def percentile(values: Sequence[float], p: int) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * n)``-th smallest value."""
    n = len(values)
    if n == 0:
        raise EmptyInput("percentile of an empty list")
    if not 0 <= p <= 100:
        raise ValueError("p must be in [0, 100]")
    return _nearest_rank(sorted(values), p)


def _nearest_rank(ordered: list, p: int):
    n = len(ordered)
    return ordered[max(1, -(-p * n // 100)) - 1]


def size_stats(sizes: Sequence[int]) -> tuple:
    """(mean, p25, p50, p75, population variance, max); zeros when empty."""
    n = len(sizes)
    if n == 0:
        return (0.0, 0, 0, 0, 0.0, 0)
    ordered = sorted(sizes)
    mean = math.fsum(ordered) / n
    var = math.fsum((x - mean) ** 2 for x in ordered) / n
    return (mean, _nearest_rank(ordered, 25), _nearest_rank(ordered, 50),
            _nearest_rank(ordered, 75), var, ordered[-1])


def iat_percentiles(timestamps: Sequence[int]) -> tuple:
    """Nearest-rank p25/p50/p75 of successive gaps; zeros with fewer than 2 stamps."""
    if len(timestamps) < 2:
        return (0, 0, 0)
    gaps = sorted(b - a for a, b in zip(timestamps, timestamps[1:]))
    return (_nearest_rank(gaps, 25), _nearest_rank(gaps, 50), _nearest_rank(gaps, 75))


def extract(flow: FlowState, d_threshold: int) -> np.ndarray:
    """Feature vector of a ready flow using its first ``d_threshold`` data packets."""
    if flow.phase is not FlowPhase.READY:
        raise NotReady(f"flow {flow.key} is {flow.phase.value}")
    if d_threshold < 0:
        raise ValueError("d_threshold must be >= 0")
    app = flow.appdata_pkts[:d_threshold]
    out = np.zeros(N_FEATURES)
    for direction, common_at, app_at in ((FWD, 0, 24), (BWD, 9, 30)):
        app_sizes = [n for _, d, n in app if d == direction]
        pkts = [p for p in flow.handshake_pkts if p[1] == direction]
        pkts += [p for p in app if p[1] == direction]
        out[common_at:common_at + 6] = size_stats([n for _, _, n in pkts])
        out[common_at + 6:common_at + 9] = iat_percentiles(sorted(t for t, _, _ in pkts))
        out[app_at:app_at + 6] = size_stats(app_sizes)
    ch = flow.client_hello
    if ch is not None:
        out[18:21] = (ch.session_id_len, ch.cipher_suites_count, ch.extensions_total_len)
    sh = flow.server_hello
    if sh is not None:
        out[21:24] = (sh.session_id_len, sh.chosen_cipher_suite, sh.extensions_total_len)
    return out


def _fmt(i: int, v: float) -> str:
    if i in INTEGER_FEATURES or float(v).is_integer():
        return str(int(v))
    return f"{v:.9g}"


def write_feature_csv(dest: Union[str, os.PathLike, io.TextIOBase],
                      instances: Iterable[LabeledInstance]) -> int:
    """Write the feature CSV (36 columns, label, meta columns); returns row count."""
    own = not hasattr(dest, "write")
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(FEATURE_NAMES) + ["label", *META_COLUMNS])
        rows = 0
        for inst in instances:
            meta = inst.meta
            w.writerow([_fmt(i, v) for i, v in enumerate(inst.features)]
                       + [inst.label, meta.get("flow", ""), meta.get("trace", ""),
                          meta.get("appdata_available", "")])
            rows += 1
        return rows
    finally:
        if own:
            fh.close()


def read_feature_csv(src: Union[str, os.PathLike, io.TextIOBase]) -> list[LabeledInstance]:
    own = not hasattr(src, "read")
    fh = open(src, encoding="utf-8", newline="") if own else src
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaMismatch("empty feature file")
        if tuple(header[:N_FEATURES]) != FEATURE_NAMES or len(header) <= N_FEATURES \
                or header[N_FEATURES] != "label":
            raise SchemaMismatch(
                f"expected {N_FEATURES} feature columns followed by 'label'")
        meta_names = [h[len("meta_"):] for h in header[N_FEATURES + 1:]]
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaMismatch(f"line {lineno}: {len(row)} fields, expected {len(header)}")
            try:
                vec = np.array([float(x) for x in row[:N_FEATURES]])
            except ValueError as exc:
                raise SchemaMismatch(f"line {lineno}: {exc}") from None
            meta = dict(zip(meta_names, row[N_FEATURES + 1:]))
            out.append(LabeledInstance(vec, row[N_FEATURES], meta))
        return out
    finally:
        if own:
            fh.close()


def feature_matrix(instances: Sequence[LabeledInstance]) -> tuple[np.ndarray, list[str]]:
    if not instances:
        return np.zeros((0, N_FEATURES)), []
    return np.vstack([i.features for i in instances]), [i.label for i in instances]


def describe(vector: np.ndarray, names: Optional[Sequence[str]] = None) -> str:
    names = names or FEATURE_NAMES
    return "\n".join(f"{n:>26s} {_fmt(i, v)}" for i, (n, v) in enumerate(zip(names, vector)))
