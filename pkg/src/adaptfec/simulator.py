"""Closed-loop, trace-driven FEC simulation.

Each block of ``b`` source packets gets ``k`` parity packets chosen by a
scheme. Source packets are dropped according to the trace; parity packets
always arrive. The receiver reports each block's loss pattern and the
sender sees that report ``G`` blocks later, so an adaptive scheme deciding
block ``t`` only knows patterns of blocks ``<= t - G - 1``.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .channel import ChannelError, LossTrace, derive_ge_params, generate_trace
from .rs_codec import can_recover, decode_block, encode_block

GRID_COLUMNS = ("scheme", "loss_rate", "burst_len", "recovery_ratio", "redundancy_ratio", "n_blocks", "status")
SCATTER_COLUMNS = ("scheme", "trace_id", "redundancy_ratio", "recovery_ratio")
INTERVAL_COLUMNS = ("scheme", "mean_recovery", "ci_low", "ci_high")
Z_95 = 1.959963984540054


class SimulationError(RuntimeError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# --- schemes -------------------------------------------------------------------------


class FixedRS:
    """Static redundancy: k = round(ratio * b) on every block."""

    adaptive = False

    def __init__(self, ratio: float, name: Optional[str] = None):
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"redundancy ratio must be in [0, 1], got {ratio}")
        self.ratio = ratio
        self.name = name or f"Fix-{round(ratio * 100):d}%"

    def k_for(self, b: int) -> int:
        return min(round_half_up(self.ratio * b), b)

    def choose_k(self, block_id, history, b):
        return self.k_for(b), None

    @classmethod
    def from_k(cls, k: int, b: int) -> "FixedRS":
        return cls(k / b, name=f"Fix-{k}/{b}")


class ModelPredictor:
    """Adapts anything with ``predict_counts(histories)`` to the per-block interface."""

    def __init__(self, model):
        self.model = model

    def predict_block(self, history, block_id):
        return int(self.model.predict_counts(history[None])[0])


class OraclePredictor:
    """Cheats: reads the true loss count of the block being decided from the trace."""

    def __init__(self, trace, b: int):
        self.bits = trace.bits if isinstance(trace, LossTrace) else np.asarray(trace)
        self.b = b

    def predict_block(self, history, block_id):
        return int(self.bits[block_id * self.b:(block_id + 1) * self.b].sum())


class DeepRS:
    """Adaptive redundancy from a loss-count predictor fed with delayed feedback."""

    adaptive = True

    def __init__(self, predictor, safety_margin: int = 0, warmup_ratio: float = 0.32,
                 name: str = "DeepRS"):
        if not hasattr(predictor, "predict_block"):
            predictor = ModelPredictor(predictor)
        self.predictor = predictor
        self.safety_margin = safety_margin
        self.warmup_ratio = warmup_ratio
        self.name = name

    def choose_k(self, block_id, history, b):
        if history is None:
            return min(round_half_up(self.warmup_ratio * b), b), None
        count = int(np.clip(self.predictor.predict_block(history, block_id), 0, b))
        return int(min(max(count + self.safety_margin, 0), b)), count


# --- configuration and results -------------------------------------------------------


@dataclass
class SimConfig:
    b: int = 6
    gap_blocks: int = 1
    history_blocks: int = 5
    codec_mode: str = "counting"  # or "full"
    seed: int = 0
    payload_size: int = 32
    exclude_warmup: bool = False

    def __post_init__(self):
        if self.gap_blocks < 0:
            raise ValueError("gap_blocks must be >= 0")
        if self.codec_mode not in ("counting", "full"):
            raise ValueError(f"unknown codec mode {self.codec_mode!r}")

    @property
    def warmup_blocks(self) -> int:
        return self.history_blocks + self.gap_blocks


@dataclass
class BlockLog:
    block_id: int
    k_used: int
    lost_source_count: int
    recovered: bool
    predicted_count: Optional[int] = None
    warmup: bool = False
    history_last_block: Optional[int] = None  # newest block whose feedback was used


@dataclass
class SimReport:
    scheme: str
    recovery_ratio: float
    redundancy_ratio: float
    blocks: list
    zero_loss: bool = False
    b: int = 6
    discarded_packets: int = 0

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


def recovery_and_redundancy(blocks: Sequence[BlockLog], b: int) -> tuple:
    """(recovery_ratio, redundancy_ratio, zero_loss) over a block list."""
    lost = sum(x.lost_source_count for x in blocks)
    rec = sum(x.lost_source_count for x in blocks if x.recovered)
    red = sum(x.k_used for x in blocks) / (b * len(blocks)) if blocks else 0.0
    if lost == 0:
        return 1.0, red, True
    return rec / lost, red, False


def run_simulation(config: SimConfig, trace, scheme) -> SimReport:
    bits = trace.bits if isinstance(trace, LossTrace) else np.asarray(trace, dtype=np.uint8)
    b = config.b
    n_blocks = bits.size // b
    leftover = bits.size - n_blocks * b
    if leftover:
        warnings.warn(f"discarding final partial block of {leftover} packets")
    if scheme.adaptive and bits.size < (config.warmup_blocks + 1) * b:
        raise SimulationError(
            f"adaptive scheme needs at least {(config.warmup_blocks + 1) * b} packets, trace has {bits.size}")
    if n_blocks == 0:
        raise SimulationError("trace shorter than one block")

    patterns = bits[:n_blocks * b].reshape(n_blocks, b)
    rng = np.random.default_rng(config.seed)
    G, H = config.gap_blocks, config.history_blocks
    in_flight = deque()  # (arrival block, block id, pattern)
    known = []  # patterns the sender has received, in block order
    logs = []
    for t in range(n_blocks):
        while in_flight and in_flight[0][0] <= t:
            known.append(in_flight.popleft()[2])
        history = None
        last = None
        if scheme.adaptive and len(known) >= H:
            history = np.array(known[-H:], dtype=np.uint8)
            last = len(known) - 1
        k, predicted = scheme.choose_k(t, history, b)

        pattern = patterns[t]
        lost = int(pattern.sum())
        recovered = can_recover(b, lost, k)
        if config.codec_mode == "full":
            full_ok = _full_codec_block(rng, b, k, pattern, config.payload_size, t)
            if full_ok != recovered:
                raise SimulationError(f"codec modes disagree on block {t}")
        logs.append(BlockLog(t, k, lost, recovered, predicted,
                             warmup=scheme.adaptive and history is None, history_last_block=last))
        # report for block t reaches the sender before block t + G + 1 is encoded
        in_flight.append((t + G + 1, t, pattern.copy()))

    scored = [x for x in logs if not (config.exclude_warmup and x.warmup)]
    rec, red, zero = recovery_and_redundancy(scored, b)
    return SimReport(scheme.name, rec, red, logs, zero, b, leftover)


def _full_codec_block(rng, b, k, pattern, size, block_id) -> bool:
    src = [rng.integers(0, 256, size=size, dtype=np.uint8).tobytes() for _ in range(b)]
    blk = encode_block(src, k, block_id=block_id).with_losses(np.flatnonzero(pattern).tolist())
    out = decode_block(blk)
    if out is None:
        return False
    if out != src:
        raise SimulationError(f"decoder returned wrong payloads on block {block_id}")
    return True


# --- experiment drivers --------------------------------------------------------------


@dataclass
class GridRow:
    scheme: str
    loss_rate: float
    burst_len: float
    recovery_ratio: float
    redundancy_ratio: float
    n_blocks: int
    status: str = "ok"

    def as_list(self):
        return [self.scheme, repr(self.loss_rate), repr(self.burst_len),
                repr(self.recovery_ratio), repr(self.redundancy_ratio), self.n_blocks, self.status]


def evaluate_grid(cells: Sequence[tuple], schemes_for_cell: Callable, config: SimConfig = SimConfig(),
                  n_packets: int = 100_000, seed: int = 0) -> list:
    """Simulate every scheme on one trace per (loss_rate, burst_len) cell.

    ``schemes_for_cell(params)`` returns the schemes to compare on that cell,
    so adaptive schemes can be trained per channel if desired. Every cell's
    trace uses the same ``seed`` (common random numbers across the sweep).
    Infeasible channels produce a flagged row per cell and the sweep continues.
    """
    if not cells:
        raise ValueError("empty grid")
    rows = []
    for loss, burst in cells:
        try:
            params = derive_ge_params(loss, burst)
        except ChannelError:
            rows.append(GridRow("*", loss, burst, math.nan, math.nan, 0, "infeasible"))
            continue
        trace = generate_trace(params, n_packets, seed=seed)
        for scheme in schemes_for_cell(params):
            rep = run_simulation(config, trace, scheme)
            rows.append(GridRow(scheme.name, loss, burst, rep.recovery_ratio, rep.redundancy_ratio,
                                rep.n_blocks, "zero_loss" if rep.zero_loss else "ok"))
    return rows


@dataclass
class TradeoffResult:
    points: list  # (scheme, trace_id, redundancy, recovery)
    intervals: list  # (scheme, mean, lo, hi); lo/hi NaN when omitted
    intervals_omitted: bool = False


def mean_ci(values) -> tuple:
    v = np.asarray(values, dtype=float)
    m = float(v.mean())
    if v.size < 2:
        return m, math.nan, math.nan
    half = Z_95 * float(v.std(ddof=1)) / math.sqrt(v.size)
    return m, m - half, m + half


def tradeoff_scatter(schemes: Sequence, traces: Sequence, config: SimConfig = SimConfig(),
                     trace_ids: Optional[Sequence] = None) -> TradeoffResult:
    """Per-trace (redundancy, recovery) points and per-scheme 95% intervals of recovery."""
    ids = list(range(len(traces))) if trace_ids is None else list(trace_ids)
    points = []
    per_scheme = {}
    for scheme in schemes:
        recs = []
        for tid, tr in zip(ids, traces):
            rep = run_simulation(config, tr, scheme)
            points.append((scheme.name, tid, rep.redundancy_ratio, rep.recovery_ratio))
            recs.append(rep.recovery_ratio)
        per_scheme[scheme.name] = recs
    intervals = [(name, *mean_ci(r)) for name, r in per_scheme.items()]
    return TradeoffResult(points, intervals, intervals_omitted=len(traces) < 2)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def grid_csv(rows: Sequence[GridRow]) -> str:
    return _csv(GRID_COLUMNS, [r.as_list() for r in rows])


def scatter_csv(result: TradeoffResult) -> str:
    return _csv(SCATTER_COLUMNS, [[s, t, repr(r), repr(c)] for s, t, r, c in result.points])


def interval_csv(result: TradeoffResult) -> str:
    def fmt(x):
        return "" if math.isnan(x) else repr(x)
    return _csv(INTERVAL_COLUMNS, [[s, repr(m), fmt(lo), fmt(hi)] for s, m, lo, hi in result.intervals])
