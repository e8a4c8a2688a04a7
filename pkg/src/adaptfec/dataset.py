"""Sliding-window training samples from loss traces, and train/validation/test splits.

A window covers ``history_blocks + gap_blocks + label_blocks`` blocks of
``b`` packets. The history becomes the model input, the gap blocks stand in
for feedback that has not arrived yet and are dropped, and the label block
is what the model must predict.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .channel import LossTrace, atomic_write, read_trace_file

DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)
SPLIT_NAMES = ("train", "validation", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    b: int = 6
    history_blocks: int = 5
    gap_blocks: int = 1
    label_blocks: int = 1
    stride: Optional[int] = None  # packets; None means b

    def __post_init__(self):
        if min(self.b, self.history_blocks, self.label_blocks) < 1 or self.gap_blocks < 0:
            raise DatasetError(f"invalid window spec {self}")
        if self.stride is not None and self.stride < 1:
            raise DatasetError("stride must be >= 1")

    @property
    def step(self) -> int:
        return self.b if self.stride is None else self.stride

    @property
    def length(self) -> int:
        return (self.history_blocks + self.gap_blocks + self.label_blocks) * self.b

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stride"] = self.step
        return d


@dataclass(frozen=True)
class TrainingSample:
    history: np.ndarray  # (history_blocks, b)
    label_pattern: np.ndarray  # (b,)

    @property
    def label_count(self) -> int:
        return int(self.label_pattern.sum())


@dataclass
class SampleSet:
    """A batch of windows stored as arrays.

    ``history`` is (N, history_blocks, b) and ``labels`` is (N, b); only the
    first label block is kept when ``label_blocks > 1``. ``trace_ids`` tags
    each window with the index of the trace it came from.
    """

    history: np.ndarray
    labels: np.ndarray
    trace_ids: np.ndarray = field(default=None)
    offsets: np.ndarray = field(default=None)
    short: bool = False  # set when some trace was too short for one window

    def __post_init__(self):
        n = len(self.history)
        if self.trace_ids is None:
            self.trace_ids = np.zeros(n, dtype=np.int64)
        if self.offsets is None:
            self.offsets = np.zeros(n, dtype=np.int64)

    def __len__(self):
        return int(self.history.shape[0])

    def __getitem__(self, i) -> TrainingSample:
        return TrainingSample(self.history[i], self.labels[i])

    @property
    def label_counts(self) -> np.ndarray:
        return self.labels.sum(axis=1).astype(np.int64)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.history[idx], self.labels[idx], self.trace_ids[idx], self.offsets[idx])

    @classmethod
    def concat(cls, parts: Sequence["SampleSet"]) -> "SampleSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise DatasetError("no samples")
        return cls(
            np.concatenate([p.history for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.trace_ids for p in parts]),
            np.concatenate([p.offsets for p in parts]),
        )


@dataclass
class DatasetSplit:
    train: SampleSet
    validation: SampleSet
    test: SampleSet
    fractions: tuple = DEFAULT_FRACTIONS
    split_seed: Optional[int] = None

    def sizes(self) -> tuple:
        return len(self.train), len(self.validation), len(self.test)


def _bits(trace) -> np.ndarray:
    return trace.bits if isinstance(trace, LossTrace) else np.asarray(trace, dtype=np.uint8)


def windowize(trace, spec: WindowSpec = WindowSpec(), trace_id: int = 0) -> SampleSet:
    bits = _bits(trace)
    b, h = spec.b, spec.history_blocks
    if bits.size < spec.length:
        warnings.warn(f"trace of {bits.size} packets is shorter than one {spec.length}-packet window")
        return SampleSet(np.zeros((0, h, b), np.uint8), np.zeros((0, b), np.uint8), short=True)
    starts = np.arange(0, bits.size - spec.length + 1, spec.step)
    hist_idx = starts[:, None] + np.arange(h * b)[None, :]
    label_start = starts + (h + spec.gap_blocks) * b
    label_idx = label_start[:, None] + np.arange(b)[None, :]
    return SampleSet(
        bits[hist_idx].reshape(-1, h, b),
        bits[label_idx],
        np.full(starts.size, trace_id, dtype=np.int64),
        starts.astype(np.int64),
    )


def windowize_many(traces: Iterable, spec: WindowSpec = WindowSpec(), trace_ids=None) -> SampleSet:
    """Window each trace separately; windows never straddle two traces."""
    traces = list(traces)
    ids = range(len(traces)) if trace_ids is None else trace_ids
    parts = []
    short = False
    for tid, tr in zip(ids, traces):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s = windowize(tr, spec, trace_id=tid)
        short |= s.short
        parts.append(s)
    out = SampleSet.concat(parts)
    out.short = short
    return out


def partition_sizes(n: int, fractions=DEFAULT_FRACTIONS) -> tuple:
    fr = np.asarray(fractions, dtype=float)
    if fr.size != 3 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    if n < 3:
        raise DatasetError(f"need at least 3 items to split, got {n}")
    n_train = int(np.floor(fr[0] * n + 0.5))
    n_val = int(np.floor(fr[1] * n + 0.5))
    n_train = min(max(n_train, 1), n - 2)
    n_val = min(max(n_val, 1), n - n_train - 1)
    return n_train, n_val, n - n_train - n_val


def split_dataset(samples: SampleSet, fractions=DEFAULT_FRACTIONS, split_seed: int = 0) -> DatasetSplit:
    """Shuffle windows of one trace with ``split_seed`` and cut into three parts."""
    n_train, n_val, _ = partition_sizes(len(samples), fractions)
    order = np.random.default_rng(split_seed).permutation(len(samples))
    return DatasetSplit(
        samples.subset(order[:n_train]),
        samples.subset(order[n_train:n_train + n_val]),
        samples.subset(order[n_train + n_val:]),
        tuple(fractions),
        split_seed,
    )


def split_traces(n_traces: int, fractions=DEFAULT_FRACTIONS, split_seed: int = 0) -> dict:
    """Assign trace indices to partitions; returns {name: sorted indices}."""
    n_train, n_val, _ = partition_sizes(n_traces, fractions)
    order = np.random.default_rng(split_seed).permutation(n_traces)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return {name: sorted(int(i) for i in p) for name, p in zip(SPLIT_NAMES, parts)}


def split_by_trace(traces: Sequence, spec: WindowSpec = WindowSpec(),
                   fractions=DEFAULT_FRACTIONS, split_seed: int = 0) -> DatasetSplit:
    """Split a multi-trace corpus at the trace level, then window each part."""
    assign = split_traces(len(traces), fractions, split_seed)
    sets = [windowize_many([traces[i] for i in assign[name]], spec, trace_ids=assign[name])
            for name in SPLIT_NAMES]
    return DatasetSplit(*sets, fractions=tuple(fractions), split_seed=split_seed)


def ingest_trace_file(path) -> LossTrace:
    return read_trace_file(path)


# manifest: one JSON object per line, {"path": ..., "split": ...}; relative paths
# resolve against the manifest's own directory


def write_manifest(path, entries: Sequence[dict]) -> None:
    lines = [json.dumps(e, sort_keys=True) for e in entries]
    atomic_write(path, "\n".join(lines) + "\n")


def read_manifest(path) -> list:
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{ln}: {exc.msg}") from None
            if "path" not in rec:
                raise DatasetError(f"{path}:{ln}: record has no 'path'")
            rec = dict(rec)
            rec["resolved"] = rec["path"] if os.path.isabs(rec["path"]) else os.path.join(base, rec["path"])
            out.append(rec)
    if not out:
        raise DatasetError(f"{path}: manifest lists no traces")
    return out


def load_manifest_traces(path, split: Optional[str] = None) -> list:
    recs = read_manifest(path)
    if split is not None:
        recs = [r for r in recs if r.get("split") == split]
    return [ingest_trace_file(r["resolved"]) for r in recs]
