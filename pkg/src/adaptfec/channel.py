"""Gilbert-Elliott two-state loss channel and the FECTRACE v1 trace file format."""

from __future__ import annotations

import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

TRACE_MAGIC = "FECTRACE v1"
LINE_WIDTH = 80


class ChannelError(ValueError):
    """Infeasible or out-of-range channel parameters."""


class TraceFormatError(ValueError):
    """A trace file that does not follow FECTRACE v1."""

    def __init__(self, msg, line=None, column=None):
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + msg)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class GEParams:
    p_loss_avg: float
    avg_burst_len: float
    p_gb: float
    p_bg: float
    loss_in_good: float = 0.0
    loss_in_bad: float = 1.0

    @property
    def stationary_bad(self) -> float:
        return self.p_gb / (self.p_gb + self.p_bg)

    def to_dict(self) -> dict:
        return {
            "p_loss_avg": self.p_loss_avg,
            "avg_burst_len": self.avg_burst_len,
            "p_gb": self.p_gb,
            "p_bg": self.p_bg,
            "loss_in_good": self.loss_in_good,
            "loss_in_bad": self.loss_in_bad,
        }


@dataclass
class LossTrace:
    bits: np.ndarray  # uint8, 1 = lost
    seed: Optional[int] = None
    params_origin: Union[GEParams, str] = "ingested"

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 1 or self.bits.size == 0:
            raise ValueError("a loss trace is a nonempty 1-D bit sequence")

    def __len__(self):
        return int(self.bits.size)


@dataclass
class TraceStats:
    loss_rate: float
    mean_burst_len: float
    burst_histogram: dict = field(default_factory=dict)
    no_losses: bool = False


def derive_ge_params(p_loss_avg: float, avg_burst_len: float) -> GEParams:
    """Gilbert parameters hitting a target average loss rate and mean burst length.

    The Bad state always loses, the Good state never does, so the mean burst
    is the mean Bad sojourn 1 / p_bg and the loss rate is the stationary Bad
    probability p_gb / (p_gb + p_bg).
    """
    if not 0.0 < p_loss_avg < 1.0:
        raise ChannelError(f"loss rate must be in (0, 1), got {p_loss_avg}")
    if avg_burst_len < 1.0:
        raise ChannelError(f"average burst length must be >= 1, got {avg_burst_len}")
    p_bg = 1.0 / avg_burst_len
    p_gb = p_bg * p_loss_avg / (1.0 - p_loss_avg)
    if p_gb >= 1.0:
        raise ChannelError(
            f"loss rate {p_loss_avg} with burst {avg_burst_len} needs p_gb = {p_gb:.4f} >= 1")
    return GEParams(p_loss_avg, avg_burst_len, p_gb, p_bg)


def _sojourns(rng, p, size):
    """Geometric run lengths on {1, 2, ...} by inversion.

    Inversion keeps runs monotone in ``p`` for a fixed uniform stream, so two
    channels sharing a seed are coupled (common random numbers).
    """
    if p >= 1.0:
        return np.ones(size, dtype=np.int64)
    u = rng.random(size)
    runs = np.ceil(np.log1p(-u) / np.log1p(-p))
    return np.maximum(runs, 1).astype(np.int64)


def generate_trace(params: GEParams, n_packets: int, seed: int, burn_in: bool = False) -> LossTrace:
    """Sample a loss trace of ``n_packets`` from the channel.

    The chain starts in Good (or in a stationary draw with ``burn_in``); each
    packet is lost with its state's loss probability, then the state moves.
    State runs are drawn as geometric sojourns, which is the same process as
    stepping the chain packet by packet. Good and Bad sojourns come from
    separate child streams of ``seed``.
    """
    if n_packets <= 0:
        raise ValueError("n_packets must be positive")
    if params.p_gb <= 0.0 or params.p_bg <= 0.0:
        raise ChannelError("transition probabilities must be positive")
    good_rng, bad_rng, aux_rng = np.random.default_rng(seed).spawn(3)
    bad = bool(burn_in and aux_rng.random() < params.stationary_bad)

    pieces = []
    total = 0
    # expected cycle length is 1/p_gb + 1/p_bg; draw sojourn pairs in chunks
    chunk = int(n_packets / (1.0 / params.p_gb + 1.0 / params.p_bg)) + 16
    while total < n_packets:
        good = _sojourns(good_rng, params.p_gb, chunk)
        badr = _sojourns(bad_rng, params.p_bg, chunk)
        first, second = (badr, good) if bad else (good, badr)
        runs = np.column_stack([first, second]).ravel()
        flags = np.tile([bad, not bad], chunk)
        pieces.append(np.repeat(flags, runs))
        total += int(runs.sum())
    states = np.concatenate(pieces)[:n_packets]

    if params.loss_in_good == 0.0 and params.loss_in_bad == 1.0:
        bits = states.astype(np.uint8)
    else:
        p = np.where(states, params.loss_in_bad, params.loss_in_good)
        bits = (aux_rng.random(n_packets) < p).astype(np.uint8)
    return LossTrace(bits, seed=seed, params_origin=params)


def run_lengths(bits) -> np.ndarray:
    """Lengths of the maximal runs of ones."""
    b = np.asarray(bits, dtype=np.int8)
    edges = np.diff(np.concatenate([[0], b, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return ends - starts


def empirical_stats(trace) -> TraceStats:
    bits = trace.bits if isinstance(trace, LossTrace) else np.asarray(trace, dtype=np.uint8)
    if bits.size == 0:
        raise ValueError("empty trace")
    ones = int(bits.sum())
    runs = run_lengths(bits)
    if ones == 0:
        return TraceStats(0.0, 0.0, {}, no_losses=True)
    hist = dict(sorted(Counter(runs.tolist()).items()))
    return TraceStats(ones / bits.size, ones / runs.size, hist)


def format_trace(bits) -> str:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size == 0:
        raise ValueError("cannot write an empty trace")
    text = "".join("1" if x else "0" for x in bits.tolist())
    lines = [f"{TRACE_MAGIC} n={bits.size}"]
    lines += [text[i:i + LINE_WIDTH] for i in range(0, len(text), LINE_WIDTH)]
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> np.ndarray:
    lines = text.split("\n")
    header = lines[0]
    prefix = TRACE_MAGIC + " n="
    if not header.startswith(prefix):
        raise TraceFormatError(f"expected header '{prefix}<count>'", line=1, column=1)
    try:
        n = int(header[len(prefix):])
    except ValueError:
        raise TraceFormatError("packet count is not an integer", line=1, column=len(prefix) + 1)
    if n <= 0:
        raise TraceFormatError("packet count must be positive", line=1, column=len(prefix) + 1)

    body = lines[1:]
    if body and body[-1] == "":
        body = body[:-1]
    out = bytearray()
    for ln, line in enumerate(body, start=2):
        if len(line) > LINE_WIDTH:
            raise TraceFormatError(f"line longer than {LINE_WIDTH} columns", line=ln, column=LINE_WIDTH + 1)
        for col, ch in enumerate(line, start=1):
            if ch not in "01":
                raise TraceFormatError(f"non-binary character {ch!r}", line=ln, column=col)
        out.extend(line.encode("ascii"))
    if len(out) != n:
        raise TraceFormatError(f"header says n={n} but body has {len(out)} bits", line=len(body) + 1)
    return (np.frombuffer(bytes(out), dtype=np.uint8) - ord("0")).astype(np.uint8)


def atomic_write(path, data: Union[str, bytes]) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace_file(path, trace) -> None:
    bits = trace.bits if isinstance(trace, LossTrace) else trace
    atomic_write(path, format_trace(bits))


def read_trace_file(path) -> LossTrace:
    with open(path, "r", encoding="ascii", newline="") as fh:
        try:
            text = fh.read()
        except UnicodeDecodeError as exc:
            raise TraceFormatError(f"non-ASCII content at byte {exc.start}") from None
    return LossTrace(parse_trace(text), params_origin="ingested")
