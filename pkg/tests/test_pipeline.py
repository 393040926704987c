import random

import numpy as np
import pytest

from ccid.pipeline import (
    FEATURE_NAMES,
    DatasetSplit,
    PipelineError,
    SequenceSample,
    balance,
    build_samples,
    class_counts,
    fill_smoothed,
    load_dataset,
    normalize,
    pool_counts,
    save_dataset,
    smooth,
    split,
    truncate_pools,
    window_records,
    window_sequences,
)
from ccid.protocols import LABEL_ORDER, LinkConfig, ProtocolLabel
from ccid.simulate import FeatureRecord, simulate_flow


def brute_force_trailing_mean(values, window):
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1) : i + 1]
        out.append(sum(chunk) / len(chunk))
    return out


class TestSmooth:
    def test_window_one_is_identity(self):
        assert smooth([10.0, 20.0, 30.0], 1) == [10.0, 20.0, 30.0]

    def test_partial_prefix_windows(self):
        assert smooth([10.0, 20.0, 30.0, 40.0], 2) == [10.0, 15.0, 25.0, 35.0]

    def test_constant_series_unchanged(self):
        assert smooth([7.5] * 20, 5) == [7.5] * 20

    def test_empty_input(self):
        assert smooth([], 4) == []

    def test_matches_brute_force_oracle_exactly(self):
        rng = random.Random(77)
        for _ in range(200):
            n = rng.randint(1, 60)
            w = rng.randint(1, 12)
            xs = [rng.uniform(-100, 100) for _ in range(n)]
            assert smooth(xs, w) == brute_force_trailing_mean(xs, w)

    def test_bounded_by_input_range(self):
        rng = random.Random(5)
        xs = [rng.uniform(0, 50) for _ in range(100)]
        out = smooth(xs, 7)
        assert min(xs) <= min(out) and max(out) <= max(xs)

    def test_shift_equivariance(self):
        rng = random.Random(6)
        xs = [rng.uniform(0, 10) for _ in range(50)]
        shifted = smooth([x + 3.25 for x in xs], 4)
        base = smooth(xs, 4)
        for a, b in zip(shifted, base):
            assert a == pytest.approx(b + 3.25, abs=1e-9)

    def test_rejects_bad_window(self):
        with pytest.raises(PipelineError):
            smooth([1.0], 0)


class TestBalance:
    def test_table_counts_truncate_to_minimum(self):
        counts = {
            ProtocolLabel.VEGAS: 3221,
            ProtocolLabel.RENO: 1802,
            ProtocolLabel.CUBIC: 1777,
            ProtocolLabel.BBR: 1629,
        }
        plan = balance(counts)
        assert plan == {label: 1629 for label in LABEL_ORDER}

    def test_equal_counts_unchanged(self):
        counts = {label: 500 for label in LABEL_ORDER}
        assert balance(counts) == counts

    def test_missing_label_named(self):
        counts = {label: 5 for label in LABEL_ORDER if label is not ProtocolLabel.RENO}
        with pytest.raises(PipelineError, match="reno"):
            balance(counts)

    def test_empty_label_named(self):
        counts = {label: 5 for label in LABEL_ORDER}
        counts[ProtocolLabel.BBR] = 0
        with pytest.raises(PipelineError, match="bbr"):
            balance(counts)


def _records(n, start=0.0):
    return [
        FeatureRecord(
            time_s=start + 0.1 * i,
            size_bytes=1000 + i,
            max_win_bytes=2000,
            throughput_mbps=float(i),
            smoothed_mbps=0.0,
            rtt_ms=0.2,
        )
        for i in range(n)
    ]


class TestWindowing:
    def test_non_overlapping_counts(self):
        assert len(window_records(_records(120), ProtocolLabel.RENO, "f", 60)) == 2
        assert len(window_records(_records(179), ProtocolLabel.RENO, "f", 60)) == 2
        assert len(window_records(_records(59), ProtocolLabel.RENO, "f", 60)) == 0

    def test_stride_counts(self):
        samples = window_records(_records(120), ProtocolLabel.RENO, "f", 60, stride=30)
        assert len(samples) == 3

    def test_shapes_and_time_exclusion(self):
        samples = window_records(_records(60), ProtocolLabel.CUBIC, "f", 60)
        (sample,) = samples
        assert sample.features.shape == (60, len(FEATURE_NAMES))
        # column 0 is size, not time
        assert sample.features[0, 0] == 1000.0
        assert np.isfinite(sample.features).all()

    def test_window_sequences_from_flow_trace(self):
        trace = simulate_flow(ProtocolLabel.BBR, LinkConfig(seed=3), 900_000_000)
        samples = window_sequences(trace, 60)
        assert len(samples) == len(trace.records) // 60
        assert all(s.label is ProtocolLabel.BBR for s in samples)

    def test_rejects_bad_args(self):
        with pytest.raises(PipelineError):
            window_records(_records(10), ProtocolLabel.RENO, "f", 0)
        with pytest.raises(PipelineError):
            window_records(_records(10), ProtocolLabel.RENO, "f", 5, stride=0)


class TestTruncation:
    def test_tail_records_dropped_walking_flows(self):
        pools = {
            label: [("a", _records(30)), ("b", _records(30, start=5.0))]
            for label in LABEL_ORDER
        }
        pools[ProtocolLabel.BBR] = [("c", _records(40))]
        plan = balance(pool_counts(pools))
        assert plan[ProtocolLabel.VEGAS] == 40
        cut = truncate_pools(pools, plan)
        assert [(fid, len(r)) for fid, r in cut[ProtocolLabel.VEGAS]] == [("a", 30), ("b", 10)]
        assert pool_counts(cut) == plan


def _mk_samples(per_class, seq_len=10, n_features=5, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for label in LABEL_ORDER:
        for i in range(per_class):
            feats = rng.normal(loc=label.index, scale=1.0, size=(seq_len, n_features))
            samples.append(SequenceSample(feats, label, f"{label.value}_{i // 3}"))
    return samples


class TestSplit:
    def test_ratio_100_per_class(self):
        ds = split(_mk_samples(100), seed=4)
        for part, want in ((ds.train, 70), (ds.validation, 10), (ds.test, 20)):
            counts = class_counts(part)
            assert all(c == want for c in counts.values())

    def test_ratio_1000_per_class(self):
        ds = split(_mk_samples(250), seed=4)
        for part, want in ((ds.train, 175), (ds.validation, 25), (ds.test, 50)):
            counts = class_counts(part)
            assert all(abs(c - want) <= 1 for c in counts.values())

    def test_same_seed_identical_membership(self):
        samples = _mk_samples(40)
        a = split(samples, seed=9)
        b = split(samples, seed=9)
        for pa, pb in zip(a.splits.values(), b.splits.values()):
            assert [s.source_id for s in pa] == [s.source_id for s in pb]
            assert all(np.array_equal(x.features, y.features) for x, y in zip(pa, pb))

    def test_partitions_disjoint_and_complete(self):
        samples = _mk_samples(25)
        tagged = [
            SequenceSample(s.features, s.label, f"id{i}") for i, s in enumerate(samples)
        ]
        ds = split(tagged, seed=2)
        ids = [s.source_id for part in ds.splits.values() for s in part]
        assert len(ids) == len(tagged)
        assert len(set(ids)) == len(ids)

    def test_train_normalized_to_unit_stats(self):
        ds = split(_mk_samples(50), seed=3)
        stacked = np.stack([s.features for s in ds.train]).reshape(-1, 5)
        assert np.abs(stacked.mean(axis=0)).max() < 1e-6
        assert np.abs(stacked.std(axis=0) - 1.0).max() < 1e-6

    def test_too_few_samples_rejected(self):
        with pytest.raises(PipelineError, match="vegas"):
            split(_mk_samples(9), seed=0)

    def test_bad_ratios_rejected(self):
        with pytest.raises(PipelineError):
            split(_mk_samples(20), ratios=(0.5, 0.2, 0.2), seed=0)

    def test_by_flow_keeps_flows_whole(self):
        ds = split(_mk_samples(60), seed=1, by_flow=True)
        membership = {}
        for name, part in ds.splits.items():
            for s in part:
                assert membership.setdefault(s.source_id, name) == name


class TestNormalize:
    def test_column_at_mean_becomes_zero(self):
        feats = np.full((4, 5), 3.0)
        s = SequenceSample(feats, ProtocolLabel.RENO, "f")
        out = normalize(s, mean=np.full(5, 3.0), std=np.ones(5))
        assert np.all(out.features == 0.0)

    def test_identity_stats(self):
        feats = np.arange(20, dtype=float).reshape(4, 5)
        s = SequenceSample(feats, ProtocolLabel.RENO, "f")
        out = normalize(s, mean=np.zeros(5), std=np.ones(5))
        assert np.array_equal(out.features, feats)

    def test_two_point_column(self):
        feats = np.array([[0.0], [10.0]])
        s = SequenceSample(feats, ProtocolLabel.RENO, "f")
        out = normalize(s, mean=np.array([5.0]), std=np.array([5.0]))
        assert np.array_equal(out.features[:, 0], np.array([-1.0, 1.0]))

    def test_zero_std_centers_only(self):
        feats = np.array([[2.0], [4.0]])
        s = SequenceSample(feats, ProtocolLabel.RENO, "f")
        out = normalize(s, mean=np.array([3.0]), std=np.array([0.0]))
        assert np.array_equal(out.features[:, 0], np.array([-1.0, 1.0]))


class TestSmoothedFill:
    def test_fills_from_throughput(self):
        records = _records(6)
        filled = fill_smoothed(records, window=2)
        mbps = [r.throughput_mbps for r in records]
        want = brute_force_trailing_mean(mbps, 2)
        assert [r.smoothed_mbps for r in filled] == want
        # other fields untouched
        assert [r.size_bytes for r in filled] == [r.size_bytes for r in records]


class TestDatasetContainer:
    def test_save_load_save_bit_identical(self, tmp_path):
        ds = split(_mk_samples(20), seed=8)
        p1 = tmp_path / "a.ccid"
        p2 = tmp_path / "b.ccid"
        save_dataset(ds, p1)
        loaded = load_dataset(p1)
        save_dataset(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_content(self, tmp_path):
        ds = split(_mk_samples(20), seed=8)
        path = tmp_path / "a.ccid"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert isinstance(loaded, DatasetSplit)
        assert loaded.seed == ds.seed
        assert np.array_equal(loaded.norm_mean, ds.norm_mean)
        assert np.array_equal(loaded.norm_std, ds.norm_std)
        for name in ("train", "validation", "test"):
            a, b = ds.splits[name], loaded.splits[name]
            assert len(a) == len(b)
            for x, y in zip(a, b):
                assert x.label is y.label
                assert x.source_id == y.source_id
                assert np.array_equal(x.features, y.features)


def test_build_samples_orders_by_label():
    pools = {label: [(f"{label.value}_0", _records(25))] for label in LABEL_ORDER}
    samples = build_samples(pools, length=10)
    assert class_counts(samples) == {label: 2 for label in LABEL_ORDER}
