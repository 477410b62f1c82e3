"""Command-line entry point: ``earlytls <command> [flags]``.

Commands: extract, train, predict, evaluate, synth, bench. Exit status is 0 on
success, 1 on error and 2 when a command succeeded but produced nothing.
Every output file is written to a temporary name next to its destination and
renamed into place only once complete.

A JSON config file (``--config``) may supply defaults for any flag, using the
flag's long name with dashes or underscores, either at top level or inside a
section named after the command; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import statistics
import sys
import tempfile
import time
from collections import Counter
from typing import Optional, Sequence

import numpy as np

from . import capture, classifier, evaluation, features, pipeline, synth
from .classifier import DecisionTree, TrainParams

EXIT_OK, EXIT_ERROR, EXIT_EMPTY = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports usage errors with exit 2, which here means 'empty'."""

    def error(self, message):
        raise UsageError(message)


def _err(msg: str) -> None:
    print(f"earlytls: {msg}", file=sys.stderr)


# -- argument types ----------------------------------------------------------

def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _port_filter(text: str) -> Optional[int]:
    if str(text).lower() == "none":
        return None
    v = int(text)
    if not 0 <= v <= 65535:
        raise argparse.ArgumentTypeError("port must be 0..65535 or 'none'")
    return v


def _labels(text: str) -> str:
    if text == "sni" or (text.startswith("manifest:") and len(text) > len("manifest:")):
        return text
    raise argparse.ArgumentTypeError("expected 'sni' or 'manifest:PATH'")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}")
    if not values or min(values) < 0:
        raise argparse.ArgumentTypeError("need one or more integers >= 0")
    return values


def _confidence(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("must be in (0, 1)")
    return v


def _difficulty(text: str) -> float:
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError("must be in [0, 1]")
    return v


# -- atomic output -------------------------------------------------------------

@contextlib.contextmanager
def _atomic(path: str, mode: str = "w"):
    """Yield a file handle whose contents replace ``path`` only on success."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        kwargs = {"encoding": "utf-8", "newline": ""} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def _write_text(path: str, text: str) -> None:
    with _atomic(path) as fh:
        fh.write(text)


# -- shared loaders ------------------------------------------------------------

def _label_source(spec: str):
    if spec == "sni":
        return "sni"
    return pipeline.read_manifest(spec[len("manifest:"):])


def _load_model(path: str) -> DecisionTree:
    with open(path, "rb") as fh:
        tree = classifier.deserialize(fh.read())
    if tree.n_features != features.N_FEATURES:
        raise classifier.FormatError(
            f"model expects {tree.n_features} features, extractor produces "
            f"{features.N_FEATURES}")
    return tree


def _trace_id(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


# -- commands ------------------------------------------------------------------

def cmd_extract(args) -> int:
    labels = _label_source(args.labels)
    result = pipeline.process_trace(args.pcap, args.d, port_filter=args.port_filter)
    flows, unlabeled = pipeline.label_events(result.events, labels, _trace_id(args.pcap))
    with _atomic(args.out) as fh:
        rows = features.write_feature_csv(fh, (f.instance(args.d) for f in flows))
    s = result.summary()
    print(f"packets={s['packets']} tcp_segments={s['tcp_segments']} "
          f"flows_ready={s['flows_ready']} flows_invalid={s['flows_invalid']} "
          f"unlabeled={unlabeled} rows={rows}")
    return EXIT_OK if rows else EXIT_EMPTY


def cmd_train(args) -> int:
    instances = features.read_feature_csv(args.features)
    counts = Counter(i.label for i in instances)
    kept = [i for i in instances if counts[i.label] >= args.min_instances]
    if not kept:
        _err(f"no label has at least {args.min_instances} instances "
             f"({len(instances)} rows, {len(counts)} labels)")
        return EXIT_EMPTY
    data = classifier.Dataset.from_instances(kept)
    params = TrainParams(min_leaf=args.min_leaf, prune=not args.no_prune,
                         confidence=args.confidence)
    tree = classifier.train(data, params)
    with _atomic(args.out, "wb") as fh:
        fh.write(classifier.serialize(tree))
    acc = float(np.mean(tree.predict_indices(data.X) == data.y))
    print(f"nodes={tree.node_count} leaves={tree.leaf_count} depth={tree.depth} "
          f"labels={len(data.labels)} instances={len(data)} "
          f"dropped_labels={len(counts) - len(data.labels)} training_accuracy={acc:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    tree = _load_model(args.model)
    out_rows = []
    if args.features:
        for inst in features.read_feature_csv(args.features):
            t0 = time.perf_counter_ns()
            label, conf, _ = classifier.predict(tree, inst.features)
            micros = (time.perf_counter_ns() - t0) / 1000
            out_rows.append((inst.meta.get("flow", ""), label, conf,
                             inst.meta.get("appdata_available", ""), micros))
    else:
        def on_ready(ev):
            t0 = time.perf_counter_ns()
            fv = features.extract(ev.flow, args.d)
            label, conf, _ = classifier.predict(tree, fv)
            micros = (time.perf_counter_ns() - t0) / 1000
            out_rows.append((ev.flow.oriented(), label, conf,
                             min(args.d, len(ev.flow.appdata_pkts)), micros))

        pipeline.process_trace(args.pcap, args.d, port_filter=args.port_filter,
                               on_ready=on_ready)
    with _atomic(args.out) as fh:
        fh.write("flow,predicted,confidence,appdata_pkts,micros\n")
        for flow, label, conf, used, micros in out_rows:
            fh.write(f"{flow},{label},{conf:.6f},{used},{micros:.1f}\n")
    print(f"flows={len(out_rows)}")
    return EXIT_OK if out_rows else EXIT_EMPTY


def _stores_from_args(args, max_d: int) -> dict:
    """Partition name -> FlowStore for evaluate."""
    if args.features:
        instances = features.read_feature_csv(args.features)
        return {"features": _CsvStore(instances)}
    labels = _label_source(args.labels)
    stores = {}
    for path in args.pcap:
        stores[_trace_id(path)] = pipeline.FlowStore.from_trace(
            path, max_d, labels, port_filter=args.port_filter, trace_id=_trace_id(path))
    if args.partitions:
        mapping = pipeline.read_manifest(args.partitions)
        flows = [f for s in stores.values() for f in s.flows]
        parts: dict = {}
        for f in flows:
            key = f.flow.oriented()
            name = mapping.get(key) or mapping.get(pipeline._reverse(key))
            if name:
                parts.setdefault(name, []).append(f)
        return {n: pipeline.FlowStore(fs, max_d) for n, fs in sorted(parts.items())}
    return stores


class _CsvStore(pipeline.FlowStore):
    """Pre-extracted instances: every d maps to the same matrix."""

    def __init__(self, instances):
        super().__init__([], 0)
        self._instances = list(instances)
        self._X, self._labels = features.feature_matrix(self._instances)

    def __len__(self):
        return len(self._instances)

    @property
    def labels(self):
        return self._labels

    def matrix(self, d):
        return self._X

    def filter_min_instances(self, minimum):
        counts = Counter(self._labels)
        return _CsvStore([i for i in self._instances if counts[i.label] >= minimum])


def cmd_evaluate(args) -> int:
    train_ds = args.train_d or [5]
    test_ds = args.test_d or train_ds
    params = TrainParams(min_leaf=args.min_leaf, prune=not args.no_prune,
                         confidence=args.confidence)
    max_d = max(train_ds + test_ds)
    stores = _stores_from_args(args, max_d)
    if args.features and (len(set(train_ds + test_ds)) > 1):
        _err("a feature CSV holds one threshold; use --pcap to vary d")
        return EXIT_ERROR
    lines = []
    written = []
    if args.mode in ("sweep", "matrix"):
        pooled = _pool(stores, max_d)
        if len(pooled) == 0:
            _err("no labeled flows")
            return EXIT_EMPTY
    if args.mode == "sweep":
        cfg = evaluation.ExperimentConfig(args.folds, args.seed, args.min_instances,
                                          params=params)
        rows = evaluation.run_d_sweep(pooled, train_ds, cfg)
        text = "d,mean,std\n" + "".join(f"{d},{m:.6f},{s:.6f}\n" for d, m, s in rows)
        path = os.path.join(args.out, "sweep.csv")
        _write_text(path, text)
        written.append(path)
        lines += [f"d={d} accuracy={100 * m:.2f}±{100 * s:.2f}" for d, m, s in rows]
    elif args.mode == "matrix":
        cfg = evaluation.ExperimentConfig(args.folds, args.seed, args.min_instances,
                                          train_ds, test_ds, args.whole_set, params)
        m = evaluation.run_threshold_matrix(pooled, cfg)
        written += _write_matrix(m, args.out, "matrix")
        lines.append(m.format())
    else:
        if len(stores) < 2:
            _err("generic mode needs two or more partitions (several --pcap or --partitions)")
            return EXIT_ERROR
        cfg = evaluation.ExperimentConfig(args.folds, args.seed, args.min_instances,
                                          train_ds[0], test_ds[0], params=params)
        m = evaluation.run_generic_vs_dedicated(stores, cfg)
        written += _write_matrix(m, args.out, "generic")
        lines.append(m.format())
    summary = "\n".join(lines) + "\n"
    path = os.path.join(args.out, "summary.txt")
    _write_text(path, summary)
    print(summary, end="")
    return EXIT_OK


def _pool(stores: dict, max_d: int):
    if len(stores) == 1:
        return next(iter(stores.values()))
    return pipeline.FlowStore([f for s in stores.values() for f in s.flows], max_d)


def _write_matrix(m, out_dir: str, stem: str) -> list[str]:
    paths = []
    for which in ("mean", "std"):
        path = os.path.join(out_dir, f"{stem}_{which}.csv")
        _write_text(path, m.to_csv(which))
        paths.append(path)
    return paths


def cmd_synth(args) -> int:
    specs = synth.make_service_specs(args.services, args.archetypes, args.difficulty,
                                     seed=args.seed)
    trace = synth.synth_generate(specs, args.flows_per_service, seed=args.seed)
    with _atomic(args.out, "wb") as fh:
        fh.write(trace.pcap)
    if args.manifest:
        _write_text(args.manifest, "".join(line + "\n" for line in trace.manifest_lines()))
    if args.archetype_manifest:
        _write_text(args.archetype_manifest,
                    "".join(f"{f.manifest_key} {f.archetype}\n" for f in trace.flows))
    print(f"flows={len(trace.flows)} services={args.services} archetypes={args.archetypes} "
          f"bytes={len(trace.pcap)}")
    return EXIT_OK if trace.flows else EXIT_EMPTY


def cmd_bench(args) -> int:
    from . import fastpath

    tree = _load_model(args.model)
    with open(args.pcap, "rb") as fh:
        data = fh.read()
    capture.PacketStream.from_bytes(data[:24])
    fastpath.warm_up()
    reports = []
    for r in range(args.repeat):
        latencies = []

        def on_ready(ev):
            t0 = time.perf_counter_ns()
            fv = features.extract(ev.flow, args.d)
            classifier.predict(tree, fv)
            latencies.append((time.perf_counter_ns() - t0) / 1e6)

        table = pipeline.FlowTable()
        t0 = time.perf_counter()
        res = pipeline.process_trace(data, args.d, port_filter=args.port_filter,
                                     table=table, on_ready=on_ready)
        stream_secs = time.perf_counter() - t0
        t0 = time.perf_counter()
        batch = fastpath.run_batch(data, args.d, port_filter=args.port_filter, model=tree)
        batch_secs = time.perf_counter() - t0
        n = len(latencies)
        mean = statistics.fmean(latencies) if n else 0.0
        std = statistics.stdev(latencies) if n > 1 else 0.0
        reports.append(dict(
            repeat=r + 1, flows=n, latency_ms_mean=mean, latency_ms_std=std,
            latency_samples=n, stream_flows_per_sec=n / stream_secs if stream_secs else 0.0,
            batch_flows=len(batch), batch_flows_per_sec=len(batch) / batch_secs,
            batch_fallback_flows=batch.n_fallback, peak_flows=res.peak_flows,
            packets=res.packets))
    for rep in reports:
        print(f"repeat={rep['repeat']} flows={rep['flows']} "
              f"latency_ms={rep['latency_ms_mean']:.4f}±{rep['latency_ms_std']:.4f} "
              f"samples={rep['latency_samples']} "
              f"stream_flows_per_sec={rep['stream_flows_per_sec']:.0f} "
              f"batch_flows_per_sec={rep['batch_flows_per_sec']:.0f} "
              f"batch_fallback_flows={rep['batch_fallback_flows']} "
              f"peak_flows={rep['peak_flows']} packets={rep['packets']}")
    if args.out:
        _write_text(args.out, json.dumps(reports, indent=2) + "\n")
    return EXIT_OK if reports and reports[0]["flows"] else EXIT_EMPTY


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="earlytls", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="JSON file with flag defaults")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def port(sp):
        sp.add_argument("--port-filter", type=_port_filter, default=443,
                        help="keep only segments to/from this port, or 'none' (default 443)")

    def tree_flags(sp):
        sp.add_argument("--min-leaf", type=_pos_int, default=2)
        sp.add_argument("--confidence", type=_confidence, default=0.25)
        sp.add_argument("--no-prune", action="store_true")
        sp.add_argument("--min-instances", type=_pos_int, default=14)

    sp = sub.add_parser("extract", help="pcap -> feature CSV")
    sp.add_argument("--pcap", required=True)
    sp.add_argument("--d", type=_nonneg_int, default=5)
    sp.add_argument("--labels", type=_labels, default="sni")
    port(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train", help="feature CSV -> model")
    sp.add_argument("--features", required=True)
    tree_flags(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="classify flows of a pcap or feature CSV")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--pcap")
    src.add_argument("--features")
    sp.add_argument("--model", required=True)
    sp.add_argument("--d", type=_nonneg_int, default=5)
    port(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="cross-validated experiments")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--pcap", action="append")
    src.add_argument("--features")
    sp.add_argument("--mode", choices=("sweep", "matrix", "generic"), default="sweep")
    sp.add_argument("--train-d", type=_int_list)
    sp.add_argument("--test-d", type=_int_list)
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--whole-set", action="store_true",
                    help="matrix mode: train and test on every flow")
    sp.add_argument("--labels", type=_labels, default="sni")
    sp.add_argument("--partitions", help="manifest mapping flows to partition names")
    port(sp)
    tree_flags(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("synth", help="write a synthetic HTTPS trace")
    sp.add_argument("--services", type=_pos_int, default=5)
    sp.add_argument("--flows-per-service", type=_pos_int, default=20)
    sp.add_argument("--archetypes", type=_pos_int, default=1)
    sp.add_argument("--difficulty", type=_difficulty, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--archetype-manifest")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("bench", help="latency and throughput")
    sp.add_argument("--pcap", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--d", type=_nonneg_int, default=5)
    sp.add_argument("--repeat", type=_pos_int, default=1)
    port(sp)
    sp.add_argument("--out", help="also write the reports as JSON")
    sp.set_defaults(func=cmd_bench)
    p.commands = dict(sub.choices)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    with open(known.config, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    command = next((a for a in rest if not a.startswith("-")), None)
    sub = parser.commands.get(command)
    if sub is None:
        return
    merged = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    merged.update(cfg.get(command, {}))
    dests = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in merged.items():
        dest = key.replace("-", "_")
        action = dests.get(dest)
        if action is None:
            raise UsageError(f"config key {key!r} is not a flag of {command!r}")
        if action.type is not None and value is not None and not isinstance(value, bool):
            value = action.type(value if isinstance(value, str) else str(value))
        defaults[dest] = value
        action.required = False
    sub.set_defaults(**defaults)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.command == "evaluate" and args.folds < 2:
            raise UsageError("--folds must be >= 2")
        for name in ("pcap", "features", "model"):
            value = getattr(args, name, None)
            if args.command == "evaluate" and name == "pcap" and value:
                missing = [p for p in value if not os.path.isfile(p)]
                if missing:
                    raise UsageError(f"no such file: {missing[0]}")
            elif isinstance(value, str) and not os.path.isfile(value):
                raise UsageError(f"no such file: {value}")
        if getattr(args, "labels", "sni").startswith("manifest:"):
            path = args.labels[len("manifest:"):]
            if not os.path.isfile(path):
                raise UsageError(f"no such manifest: {path}")
    except (UsageError, argparse.ArgumentTypeError, ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_ERROR
    try:
        return args.func(args)
    except evaluation.TooFewInstances as exc:
        _err(f"TooFewInstances: {exc}")
    except features.SchemaMismatch as exc:
        _err(f"SchemaMismatch: {exc}")
    except classifier.FormatError as exc:
        _err(f"model format error: {exc}")
    except (capture.CaptureError, evaluation.EvalError, synth.SpecInvalid,
            classifier.EmptyDataset, ValueError, OSError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
