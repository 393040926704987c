"""Feature pipeline: labeled trace records to normalized sequence samples.

Stages, in dataset-build order:

1. smoothing: trailing moving average over instantaneous throughput
   (prefix-partial windows, so output length equals input length);
2. balancing: every protocol's record pool truncated (tail drop) to the
   smallest pool, the way an early-finishing protocol bounds the others;
3. windowing: fixed-length sequences per flow, non-overlapping by default,
   trailing partial window discarded; the time column is never a feature;
4. split: seeded stratified shuffle into train/validation/test at 0.7:0.1:0.2;
5. normalization: per-feature z-score fitted on the train partition only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import container
from .protocols import LABEL_ORDER, ProtocolLabel
from .seeds import derive_rng
from .simulate import FeatureRecord, FlowTrace
from .traces import discover_traces, read_records

FEATURE_NAMES = ("size", "Max_Winc", "Mbps", "Smoothed", "rtt_ms")
SEQUENCE_LENGTH = 60
SMOOTH_WINDOW = 5
SPLIT_RATIOS = (0.7, 0.1, 0.2)
MIN_CLASS_SAMPLES = 10

DATASET_KIND = "dataset"
DATASET_VERSION = 1


class PipelineError(ValueError):
    pass


def smooth(values: Sequence[float], window: int) -> list[float]:
    """Trailing moving average; element i averages the last ``window`` values.

    The first ``window - 1`` outputs average the available prefix instead of
    being undefined. Each output is an independent direct mean, deliberately
    not an incremental running sum, so results match a brute-force oracle
    bit for bit.
    """
    if window < 1:
        raise PipelineError("smoothing window must be >= 1")
    out = []
    for i in range(len(values)):
        lo = i - window + 1
        if lo < 0:
            lo = 0
        total = 0.0
        for j in range(lo, i + 1):
            total += values[j]
        out.append(total / (i + 1 - lo))
    return out


def fill_smoothed(records: list[FeatureRecord], window: int = SMOOTH_WINDOW) -> list[FeatureRecord]:
    """Records with the smoothed-throughput column computed from Mbps."""
    smoothed = smooth([r.throughput_mbps for r in records], window)
    return [replace(r, smoothed_mbps=s) for r, s in zip(records, smoothed)]


def balance(counts: Mapping[ProtocolLabel, int]) -> dict[ProtocolLabel, int]:
    """Truncation plan equalizing record pools at the smallest one."""
    for label in LABEL_ORDER:
        if label not in counts:
            raise PipelineError(f"label {label.value!r} missing from pools")
        if counts[label] < 1:
            raise PipelineError(f"label {label.value!r} empty")
    floor = min(counts[label] for label in LABEL_ORDER)
    return {label: floor for label in LABEL_ORDER}


@dataclass(frozen=True)
class SequenceSample:
    """Fixed-length feature matrix (time steps x features) with its label."""

    features: np.ndarray
    label: ProtocolLabel
    source_id: str


def record_matrix(records: Sequence[FeatureRecord]) -> np.ndarray:
    """(n, 5) feature matrix in FEATURE_NAMES order; time is excluded."""
    return np.array(
        [
            [r.size_bytes, r.max_win_bytes, r.throughput_mbps, r.smoothed_mbps, r.rtt_ms]
            for r in records
        ],
        dtype=np.float64,
    ).reshape(len(records), len(FEATURE_NAMES))


def window_records(
    records: Sequence[FeatureRecord],
    label: ProtocolLabel,
    source_id: str,
    length: int = SEQUENCE_LENGTH,
    stride: int | None = None,
) -> list[SequenceSample]:
    if length < 1:
        raise PipelineError("window length must be >= 1")
    stride = length if stride is None else stride
    if stride < 1:
        raise PipelineError("window stride must be >= 1")
    matrix = record_matrix(records)
    samples = []
    start = 0
    while start + length <= len(records):
        samples.append(SequenceSample(matrix[start : start + length].copy(), label, source_id))
        start += stride
    return samples


def window_sequences(
    trace: FlowTrace, length: int = SEQUENCE_LENGTH, stride: int | None = None
) -> list[SequenceSample]:
    """Windows of a simulated flow; a trace shorter than ``length`` gives []."""
    source = f"{trace.label.value}_{trace.link.seed}"
    return window_records(trace.records, trace.label, source, length, stride)


Pools = dict[ProtocolLabel, list[tuple[str, list[FeatureRecord]]]]


def load_labeled_records(directory: str | Path, smooth_window: int = SMOOTH_WINDOW) -> Pools:
    """Read every trace CSV in ``directory`` and fill its smoothed column."""
    pools: Pools = {label: [] for label in LABEL_ORDER}
    for label, path in discover_traces(directory):
        records = fill_smoothed(read_records(path), smooth_window)
        pools[label].append((path.stem, records))
    return pools


def pool_counts(pools: Pools) -> dict[ProtocolLabel, int]:
    return {label: sum(len(recs) for _, recs in flows) for label, flows in pools.items()}


def truncate_pools(pools: Pools, plan: Mapping[ProtocolLabel, int]) -> Pools:
    """Drop tail records (walking flows in order) down to the plan's counts."""
    out: Pools = {}
    for label, flows in pools.items():
        budget = plan[label]
        kept = []
        for source_id, records in flows:
            if budget <= 0:
                break
            take = min(budget, len(records))
            kept.append((source_id, records[:take]))
            budget -= take
        out[label] = kept
    return out


def build_samples(
    pools: Pools, length: int = SEQUENCE_LENGTH, stride: int | None = None
) -> list[SequenceSample]:
    samples = []
    for label in LABEL_ORDER:
        for source_id, records in pools[label]:
            samples.extend(window_records(records, label, source_id, length, stride))
    return samples


@dataclass
class DatasetSplit:
    train: list[SequenceSample]
    validation: list[SequenceSample]
    test: list[SequenceSample]
    norm_mean: np.ndarray  # per-feature, fitted on train only
    norm_std: np.ndarray
    seed: int

    @property
    def splits(self) -> dict[str, list[SequenceSample]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


def normalize(sample: SequenceSample, mean: np.ndarray, std: np.ndarray) -> SequenceSample:
    """Z-score per feature column; zero-variance features are only centered."""
    safe = np.where(std > 0.0, std, 1.0)
    return replace(sample, features=(sample.features - mean) / safe)


def split(
    samples: Sequence[SequenceSample],
    ratios: tuple[float, float, float] = SPLIT_RATIOS,
    seed: int = 0,
    by_flow: bool = False,
) -> DatasetSplit:
    """Stratified seeded split plus train-fitted normalization.

    ``by_flow`` keeps all windows of one flow in the same partition, for
    leakage-averse evaluation.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise PipelineError(f"split ratios {ratios} do not sum to 1")
    by_label: dict[ProtocolLabel, list[SequenceSample]] = {l: [] for l in LABEL_ORDER}
    for s in samples:
        by_label[s.label].append(s)

    train: list[SequenceSample] = []
    val: list[SequenceSample] = []
    test: list[SequenceSample] = []
    for label in LABEL_ORDER:
        group = by_label[label]
        n = len(group)
        if n < MIN_CLASS_SAMPLES:
            raise PipelineError(
                f"class {label.value!r} has {n} samples; need >= {MIN_CLASS_SAMPLES} to split"
            )
        rng = derive_rng(seed, "split", label.value)
        n_train = round(ratios[0] * n)
        n_val = round(ratios[1] * n)
        if by_flow:
            flows: dict[str, list[SequenceSample]] = {}
            for s in group:
                flows.setdefault(s.source_id, []).append(s)
            flow_ids = sorted(flows)
            rng.shuffle(flow_ids)
            taken = 0
            for fid in flow_ids:
                part = train if taken < n_train else val if taken < n_train + n_val else test
                part.extend(flows[fid])
                taken += len(flows[fid])
        else:
            order = list(range(n))
            rng.shuffle(order)
            shuffled = [group[i] for i in order]
            train.extend(shuffled[:n_train])
            val.extend(shuffled[n_train : n_train + n_val])
            test.extend(shuffled[n_train + n_val :])

    stacked = np.stack([s.features for s in train])
    mean = stacked.reshape(-1, stacked.shape[-1]).mean(axis=0)
    std = stacked.reshape(-1, stacked.shape[-1]).std(axis=0)
    return DatasetSplit(
        train=[normalize(s, mean, std) for s in train],
        validation=[normalize(s, mean, std) for s in val],
        test=[normalize(s, mean, std) for s in test],
        norm_mean=mean,
        norm_std=std,
        seed=seed,
    )


def class_counts(samples: Sequence[SequenceSample]) -> dict[ProtocolLabel, int]:
    counts = {label: 0 for label in LABEL_ORDER}
    for s in samples:
        counts[s.label] += 1
    return counts


def save_dataset(split_data: DatasetSplit, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {
        "norm_mean": split_data.norm_mean,
        "norm_std": split_data.norm_std,
    }
    meta: dict = {
        "version": DATASET_VERSION,
        "seed": split_data.seed,
        "features": list(FEATURE_NAMES),
        "labels": [l.value for l in LABEL_ORDER],
        "source_ids": {},
    }
    for name, part in split_data.splits.items():
        if part:
            arrays[f"{name}_x"] = np.stack([s.features for s in part])
        else:
            seq = split_data.train[0].features.shape if split_data.train else (0, len(FEATURE_NAMES))
            arrays[f"{name}_x"] = np.zeros((0,) + tuple(seq))
        arrays[f"{name}_y"] = np.array([s.label.index for s in part], dtype=np.float64)
        meta["source_ids"][name] = [s.source_id for s in part]
    container.save(path, DATASET_KIND, meta, arrays)


def load_dataset(path: str | Path) -> DatasetSplit:
    meta, arrays = container.load(path, expect_kind=DATASET_KIND)
    parts = {}
    for name in ("train", "validation", "test"):
        x = arrays[f"{name}_x"]
        y = arrays[f"{name}_y"].astype(int)
        ids = meta["source_ids"][name]
        parts[name] = [
            SequenceSample(x[i].copy(), LABEL_ORDER[y[i]], ids[i]) for i in range(len(y))
        ]
    return DatasetSplit(
        train=parts["train"],
        validation=parts["validation"],
        test=parts["test"],
        norm_mean=arrays["norm_mean"],
        norm_std=arrays["norm_std"],
        seed=int(meta["seed"]),
    )
