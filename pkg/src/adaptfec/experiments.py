"""End-to-end experiment pipelines shared by the CLI and the acceptance suite."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .channel import derive_ge_params, generate_trace
from .dataset import WindowSpec, split_by_trace, split_dataset, split_traces, windowize
from .lstm import ConstantPredictor, TrainingConfig, init_model, train, zero_error_rate
from .simulator import DeepRS, FixedRS, SimConfig, evaluate_grid, tradeoff_scatter

log = logging.getLogger(__name__)

LOSS_SWEEP = (0.01, 0.05, 0.10, 0.20, 0.30)
BURST_SWEEP = (1, 5, 10, 20, 30)

DEFAULT_CONFIG = {
    "seed": 0,
    "window": {"b": 6, "history_blocks": 5, "gap_blocks": 1, "label_blocks": 1, "stride": 6},
    "training": TrainingConfig().to_dict(),
    "train_samples": 10_000,
    "sim": {
        "codec_mode": "counting",
        "payload_size": 32,
        "safety_margin": 0,
        "warmup_ratio": 0.32,
        "exclude_warmup": False,
    },
    "grid": {
        "loss_rates": [0.01, 0.05, 0.10, 0.20, 0.30],
        "burst_lens": [10],
        "n_packets": 100_000,
        "fixed_ratios": [0.16, 0.32],
    },
    "corpus": {
        "n_traces": 300,
        "trace_len": 3000,
        "loss_rates": list(LOSS_SWEEP),
        "burst_lens": list(BURST_SWEEP),
        "fractions": [0.6, 0.2, 0.2],
        "batch_size": 64,
    },
    "tradeoff": {"fixed_k": [0, 1, 2, 3, 4, 5, 6]},
}


def derive_seed(seed: int, *keys) -> int:
    """Stable 32-bit sub-seed for a named purpose; identical on every platform."""
    h = hashlib.sha256(json.dumps([seed, *keys]).encode()).digest()
    return int.from_bytes(h[:4], "little")


def merge_config(overrides: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)

    def merge(dst, src):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(dst.get(k), dict):
                merge(dst[k], v)
            else:
                dst[k] = v
    merge(cfg, overrides or {})
    return cfg


def window_from(cfg: dict) -> WindowSpec:
    return WindowSpec(**cfg["window"])


def training_from(cfg: dict, **extra) -> TrainingConfig:
    t = dict(cfg["training"])
    t.update(extra)
    return TrainingConfig(**t)


def sim_from(cfg: dict) -> SimConfig:
    w, s = cfg["window"], cfg["sim"]
    return SimConfig(b=w["b"], gap_blocks=w["gap_blocks"], history_blocks=w["history_blocks"],
                     codec_mode=s["codec_mode"], seed=cfg["seed"], payload_size=s["payload_size"],
                     exclude_warmup=s["exclude_warmup"])


def deeprs_from(cfg: dict, model) -> DeepRS:
    s = cfg["sim"]
    return DeepRS(model, safety_margin=s["safety_margin"], warmup_ratio=s["warmup_ratio"])


@dataclass
class TrainedModel:
    model: object
    log: object
    split: object
    test_report: object
    params: object = None


def train_on_channel(loss_rate: float, burst_len: float, cfg: dict) -> TrainedModel:
    """Train a predictor on ``train_samples`` windows of one GE trace (shuffled 60/20/20)."""
    spec = window_from(cfg)
    params = derive_ge_params(loss_rate, burst_len)
    n = cfg["train_samples"]
    length = (n - 1) * spec.step + spec.length
    trace = generate_trace(params, length, seed=derive_seed(cfg["seed"], "train-trace", loss_rate, burst_len))
    split = split_dataset(windowize(trace, spec), split_seed=derive_seed(cfg["seed"], "split"))
    tcfg = training_from(cfg)
    model = init_model(spec.b, tcfg.hidden_dim, tcfg.init_seed, tcfg.init_scale, tcfg.forget_bias)
    model, tlog = train(model, split, tcfg)
    rep = zero_error_rate(model, split.test)
    log.info("trained on GE(%.2f, %g): %d epochs, test zero-error %.3f",
             loss_rate, burst_len, len(tlog.epochs), rep.zero_error_rate)
    return TrainedModel(model, tlog, split, rep, params)


class ModelCache:
    """Per-channel models trained on first use."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.models = {}

    def get(self, loss_rate, burst_len) -> TrainedModel:
        key = (float(loss_rate), float(burst_len))
        if key not in self.models:
            self.models[key] = train_on_channel(loss_rate, burst_len, self.cfg)
        return self.models[key]


def sweep(cfg: dict, cells, cache: Optional[ModelCache] = None, include_deeprs: bool = True) -> list:
    """Fixed-ratio baselines plus per-channel DeepRS on every (loss, burst) cell.

    All cells share one trace seed, so cells with the same burst length see
    identical bursts and differ only in the gaps between them.
    """
    cache = cache or ModelCache(cfg)
    fixed = [FixedRS(r) for r in cfg["grid"]["fixed_ratios"]]

    def schemes(params):
        out = list(fixed)
        if include_deeprs:
            out.append(deeprs_from(cfg, cache.get(params.p_loss_avg, params.avg_burst_len).model))
        return out

    return evaluate_grid(cells, schemes, sim_from(cfg), n_packets=cfg["grid"]["n_packets"],
                         seed=derive_seed(cfg["seed"], "grid-trace"))


def grid_cells(cfg: dict) -> list:
    g = cfg["grid"]
    return [(float(lr), float(bl)) for bl in g["burst_lens"] for lr in g["loss_rates"]]


@dataclass
class Corpus:
    traces: list
    cells: list  # (loss, burst) per trace
    assignment: dict = field(default_factory=dict)  # split name -> trace indices


def mixed_corpus(cfg: dict) -> Corpus:
    """Traces from randomly drawn GE cells, assigned to splits at the trace level."""
    c = cfg["corpus"]
    rng = np.random.default_rng(derive_seed(cfg["seed"], "corpus-cells"))
    combos = [(float(lr), float(bl)) for lr in c["loss_rates"] for bl in c["burst_lens"]]
    traces, cells = [], []
    for i in range(c["n_traces"]):
        lr, bl = combos[rng.integers(len(combos))]
        params = derive_ge_params(lr, bl)
        traces.append(generate_trace(params, c["trace_len"], seed=derive_seed(cfg["seed"], "corpus-trace", i)))
        cells.append((lr, bl))
    return Corpus(traces, cells)


@dataclass
class CorpusResult:
    corpus: Corpus
    trained: TrainedModel
    constant: ConstantPredictor
    constant_zero_error: float


def train_on_corpus(cfg: dict, corpus: Optional[Corpus] = None) -> CorpusResult:
    corpus = corpus or mixed_corpus(cfg)
    spec = window_from(cfg)
    fractions = tuple(cfg["corpus"]["fractions"])
    split_seed = derive_seed(cfg["seed"], "corpus-split")
    split = split_by_trace(corpus.traces, spec, fractions, split_seed)
    corpus.assignment = split_traces(len(corpus.traces), fractions, split_seed)
    tcfg = training_from(cfg, batch_size=cfg["corpus"]["batch_size"])
    model = init_model(spec.b, tcfg.hidden_dim, tcfg.init_seed, tcfg.init_scale, tcfg.forget_bias)
    model, tlog = train(model, split, tcfg)
    rep = zero_error_rate(model, split.test)
    const = ConstantPredictor.fit(split.train)
    const_rate = zero_error_rate(const, split.test).zero_error_rate
    log.info("corpus model: test zero-error %.3f, best constant (%d) %.3f",
             rep.zero_error_rate, const.count, const_rate)
    return CorpusResult(corpus, TrainedModel(model, tlog, split, rep), const, const_rate)


def tradeoff(cfg: dict, model, traces, trace_ids=None):
    b = cfg["window"]["b"]
    schemes = [deeprs_from(cfg, model)] + [FixedRS.from_k(k, b) for k in cfg["tradeoff"]["fixed_k"]]
    return tradeoff_scatter(schemes, traces, sim_from(cfg), trace_ids)
