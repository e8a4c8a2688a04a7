"""``adaptfec`` command line: traces, datasets, training, evaluation and simulation.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical failure.
Every command that takes ``--out`` writes ``resolved_config.json`` next to
its outputs; all files are written atomically and are byte-identical when a
command is repeated with the same arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import __version__
from .channel import (ChannelError, TraceFormatError, atomic_write, derive_ge_params, empirical_stats,
                      generate_trace, read_trace_file, write_trace_file)
from .dataset import (DatasetError, DatasetSplit, SampleSet, read_manifest, split_dataset, split_traces,
                      windowize_many, write_manifest)
from .experiments import (ModelCache, deeprs_from, derive_seed, grid_cells, merge_config,
                          sim_from, training_from, tradeoff, window_from)
from .lstm import (CheckpointError, ConstantPredictor, NumericalError, init_model, load_checkpoint,
                   save_checkpoint, train, zero_error_rate)
from .simulator import FixedRS, SimulationError, evaluate_grid, grid_csv, interval_csv, scatter_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("adaptfec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- config ----------------------------------------------------------------------------


def resolve_config(args) -> dict:
    overrides = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                overrides = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(overrides, dict):
            raise DatasetError(f"{args.config}: top level must be an object")
    cfg = merge_config(overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.block_size is not None:
        if args.block_size < 1:
            raise UsageError("--block-size must be >= 1")
        cfg["window"]["b"] = args.block_size
        cfg["window"]["stride"] = args.block_size
    if args.gap_blocks is not None:
        if args.gap_blocks < 0:
            raise UsageError("--gap-blocks must be >= 0")
        cfg["window"]["gap_blocks"] = args.gap_blocks
    if args.codec_mode is not None:
        cfg["sim"]["codec_mode"] = args.codec_mode
    if args.safety_margin is not None:
        cfg["sim"]["safety_margin"] = args.safety_margin
    return cfg


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_resolved(out, cfg, args) -> None:
    record = {"command": args.command, "arguments": _arg_record(args), "config": cfg}
    atomic_write(os.path.join(out, "resolved_config.json"), json.dumps(record, indent=2, sort_keys=True) + "\n")


def _arg_record(args) -> dict:
    # the output directory is left out so reruns elsewhere produce identical files
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command", "out")}


def _load_samples(manifest, cfg, split=None) -> SampleSet:
    recs = read_manifest(manifest)
    if split is not None:
        tagged = [r for r in recs if r.get("split") == split]
        recs = tagged if tagged else recs
    traces = [read_trace_file(r["resolved"]) for r in recs]
    samples = windowize_many(traces, window_from(cfg))
    if samples.short:
        warnings.warn("some traces were shorter than one window and were skipped")
    return samples


def _load_split(manifest, cfg) -> DatasetSplit:
    """Trace-level split when the manifest tags every split, else a shuffled window split."""
    recs = read_manifest(manifest)
    spec = window_from(cfg)
    tags = {r.get("split") for r in recs}
    if {"train", "validation", "test"} <= tags:
        sets = []
        for name in ("train", "validation", "test"):
            idx = [i for i, r in enumerate(recs) if r.get("split") == name]
            sets.append(windowize_many([read_trace_file(recs[i]["resolved"]) for i in idx], spec, trace_ids=idx))
        return DatasetSplit(*sets)
    samples = windowize_many([read_trace_file(r["resolved"]) for r in recs], spec)
    return split_dataset(samples, split_seed=derive_seed(cfg["seed"], "split"))


def _check_dims(model, cfg):
    w = cfg["window"]
    if model.b != w["b"] or model.input_dim != w["b"]:
        raise CheckpointError(f"checkpoint is for block size {model.b}, window spec uses {w['b']}")


# --- commands --------------------------------------------------------------------------


def cmd_gen_traces(args, cfg):
    params = derive_ge_params(args.loss_rate, args.burst_len)
    if args.n_traces < 1 or args.n_packets < 1:
        raise UsageError("--n-traces and --n-packets must be positive")
    out = _out_dir(args)
    if args.n_traces >= 3:
        assign = split_traces(args.n_traces, tuple(cfg["corpus"]["fractions"]),
                              derive_seed(cfg["seed"], "trace-split"))
        split_of = {i: name for name, ids in assign.items() for i in ids}
    else:
        split_of = {i: "all" for i in range(args.n_traces)}
    entries = []
    for i in range(args.n_traces):
        name = f"trace_{i:04d}.fectrace"
        tr = generate_trace(params, args.n_packets, seed=derive_seed(cfg["seed"], "gen-traces", i))
        write_trace_file(os.path.join(out, name), tr)
        st = empirical_stats(tr)
        entries.append({"path": name, "split": split_of[i], "loss_rate": st.loss_rate,
                        "mean_burst_len": st.mean_burst_len})
        print(f"{name}: loss rate {st.loss_rate:.4f}, mean burst {st.mean_burst_len:.3f}")
    write_manifest(os.path.join(out, "manifest.jsonl"), entries)
    cfg = dict(cfg, channel=params.to_dict())
    _write_resolved(out, cfg, args)


def cmd_stats(args, cfg):
    result = {}
    for path in args.traces:
        st = empirical_stats(read_trace_file(path))
        result[path] = {"loss_rate": st.loss_rate, "mean_burst_len": st.mean_burst_len,
                        "no_losses": st.no_losses,
                        "burst_histogram": {str(k): v for k, v in st.burst_histogram.items()}}
        flag = " (no losses)" if st.no_losses else ""
        print(f"{path}: loss rate {st.loss_rate:.6f}, mean burst {st.mean_burst_len:.4f}{flag}")
    if args.out:
        out = _out_dir(args)
        atomic_write(os.path.join(out, "stats.json"), json.dumps(result, indent=2, sort_keys=True) + "\n")
        _write_resolved(out, cfg, args)


def cmd_build_dataset(args, cfg):
    split = _load_split(args.manifest, cfg)
    out = _out_dir(args)
    summary = {}
    for name, s in zip(("train", "validation", "test"), (split.train, split.validation, split.test)):
        for field_name in ("history", "labels", "trace_ids"):
            path = os.path.join(out, f"{name}_{field_name}.npy")
            _atomic_npy(path, getattr(s, field_name))
        summary[name] = {"n_samples": len(s), "label_count_histogram":
                         {str(i): int(c) for i, c in enumerate(np.bincount(s.label_counts, minlength=1))}}
        print(f"{name}: {len(s)} windows")
    atomic_write(os.path.join(out, "dataset.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_resolved(out, cfg, args)


def _atomic_npy(path, arr):
    import io
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr))
    atomic_write(path, buf.getvalue())


def cmd_train(args, cfg):
    split = _load_split(args.manifest, cfg)
    if min(split.sizes()) == 0:
        raise DatasetError(f"a split is empty (sizes {split.sizes()})")
    tcfg = training_from(cfg)
    model = init_model(cfg["window"]["b"], tcfg.hidden_dim, tcfg.init_seed, tcfg.init_scale, tcfg.forget_bias)
    model, tlog = train(model, split, tcfg)
    out = _out_dir(args)
    save_checkpoint(os.path.join(out, "model.ckpt"), model)
    atomic_write(os.path.join(out, "train_log.csv"), tlog.to_csv())
    _write_resolved(out, cfg, args)
    val = zero_error_rate(model, split.validation).zero_error_rate
    print(f"epochs: {len(tlog.epochs)}")
    print(f"validation zero-error rate: {val:.4f}")


class _Oracle:
    def __init__(self, samples):
        self.counts = samples.label_counts

    def predict_counts(self, histories):
        return self.counts


def cmd_eval_prediction(args, cfg):
    samples = _load_samples(args.manifest, cfg, args.split)
    if args.predictor == "model":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required with --predictor model")
        predictor = load_checkpoint(args.checkpoint)
        _check_dims(predictor, cfg)
    elif args.predictor == "oracle":
        predictor = _Oracle(samples)
    else:
        predictor = ConstantPredictor(0)
    rep = zero_error_rate(predictor, samples)
    out = _out_dir(args)
    atomic_write(os.path.join(out, "error_distribution.csv"), rep.to_csv())
    _write_resolved(out, cfg, args)
    print(f"samples: {rep.n}")
    print(f"zero-error rate: {rep.zero_error_rate:.4f}")


def _fixed_schemes(cfg):
    return [FixedRS(r) for r in cfg["grid"]["fixed_ratios"]]


def cmd_simulate(args, cfg):
    """Grid sweep of fixed schemes plus DeepRS (one shared checkpoint, or per-cell training)."""
    cells = grid_cells(cfg)
    shared = None
    if args.checkpoint:
        shared = load_checkpoint(args.checkpoint)
        _check_dims(shared, cfg)
    cache = ModelCache(cfg)

    def schemes(params):
        out = _fixed_schemes(cfg)
        if not args.no_deeprs:
            model = shared if shared is not None else cache.get(params.p_loss_avg, params.avg_burst_len).model
            out.append(deeprs_from(cfg, model))
        return out

    rows = evaluate_grid(cells, schemes, sim_from(cfg), n_packets=cfg["grid"]["n_packets"],
                         seed=derive_seed(cfg["seed"], "grid-trace"))
    out = _out_dir(args)
    atomic_write(os.path.join(out, "grid.csv"), grid_csv(rows))
    _write_resolved(out, cfg, args)
    for r in rows:
        print(f"{r.scheme:>8} loss={r.loss_rate:<5g} burst={r.burst_len:<4g} "
              f"recovery={r.recovery_ratio:.4f} redundancy={r.redundancy_ratio:.4f} {r.status}")
    if all(r.status == "infeasible" for r in rows):
        raise ChannelError("every grid cell is infeasible")


def cmd_compare(args, cfg):
    """Per-trace tradeoff scatter and recovery intervals on held-out traces."""
    model = load_checkpoint(args.checkpoint)
    _check_dims(model, cfg)
    recs = read_manifest(args.manifest)
    tagged = [r for r in recs if r.get("split") == args.split]
    recs = tagged if tagged else recs
    traces = [read_trace_file(r["resolved"]) for r in recs]
    res = tradeoff(cfg, model, traces, [r["path"] for r in recs])
    out = _out_dir(args)
    atomic_write(os.path.join(out, "scatter.csv"), scatter_csv(res))
    atomic_write(os.path.join(out, "intervals.csv"), interval_csv(res))
    _write_resolved(out, cfg, args)
    if res.intervals_omitted:
        print("fewer than two traces: confidence intervals omitted")
    for name, m, lo, hi in res.intervals:
        print(f"{name:>8} mean recovery {m:.4f}  95% CI [{lo:.4f}, {hi:.4f}]")


# --- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default from config, 0)")
    common.add_argument("--config", help="JSON file overriding the default experiment config")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--codec-mode", choices=("counting", "full"), default=None)
    common.add_argument("--gap-blocks", type=int, default=None, help="feedback delay in blocks")
    common.add_argument("--block-size", type=int, default=None, help="source packets per block")
    common.add_argument("--safety-margin", type=int, default=None, help="extra parity added to predictions")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="adaptfec", description="Adaptive Reed-Solomon FEC with an LSTM loss predictor.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-traces", parents=[common], help="generate Gilbert-Elliott loss traces")
    s.add_argument("--loss-rate", type=float, required=True)
    s.add_argument("--burst-len", type=float, required=True)
    s.add_argument("--n-packets", type=int, default=10_000)
    s.add_argument("--n-traces", type=int, default=1)
    s.set_defaults(func=cmd_gen_traces)

    s = sub.add_parser("stats", parents=[common], help="empirical loss rate and burst statistics")
    s.add_argument("traces", nargs="+")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("build-dataset", parents=[common], help="window traces into train/validation/test arrays")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train", parents=[common], help="train the loss predictor")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-prediction", parents=[common], help="prediction error distribution")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--split", default="test", help="manifest split to score (all traces if none tagged)")
    s.add_argument("--predictor", choices=("model", "oracle", "zero"), default="model")
    s.set_defaults(func=cmd_eval_prediction)

    s = sub.add_parser("simulate", parents=[common], help="loss-rate / burst-length grid sweep")
    s.add_argument("--checkpoint", help="use one model on every cell instead of training per cell")
    s.add_argument("--no-deeprs", action="store_true", help="fixed schemes only")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("compare", parents=[common], help="redundancy/recovery tradeoff on held-out traces")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except UsageError as exc:
        print(f"adaptfec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ArithmeticError) as exc:
        print(f"adaptfec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ChannelError, TraceFormatError, DatasetError, CheckpointError, SimulationError,
            OSError, ValueError, TypeError, KeyError) as exc:
        print(f"adaptfec: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
