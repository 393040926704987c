import math

import numpy as np
import pytest

from ccid.model import (
    CheckpointError,
    ModelConfig,
    ModelError,
    forward,
    forward_batch,
    gru_cell,
    init_params,
    load_checkpoint,
    loss_and_grads,
    predict,
    save_checkpoint,
    softmax,
)
from ccid.protocols import ProtocolLabel


def tiny_params(hidden=2, input_size=2, layers=1, dropout=0.0, seed=1, head_scale=0.3):
    cfg = ModelConfig(
        input_size=input_size, hidden_size=hidden, num_layers=layers, dropout=dropout
    )
    params = init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    params.tensors["head.weight"] = rng.normal(0, head_scale, params.tensors["head.weight"].shape)
    params.tensors["head.bias"] = rng.normal(0, head_scale / 3, params.tensors["head.bias"].shape)
    return params


class TestGruCell:
    def test_zero_weights_zero_state(self):
        h = np.zeros(3)
        out = gru_cell(np.array([1.0, -2.0]), h, np.zeros((9, 2)), np.zeros((9, 3)), np.zeros(9))
        # z = r = 0.5, candidate = 0, so the new state stays 0
        assert np.array_equal(out, np.zeros(3))

    def test_scalar_hand_computation(self):
        out = gru_cell(
            np.array([1.0]), np.array([0.0]), np.ones((3, 1)), np.ones((3, 1)), np.zeros(3)
        )
        sig1 = 1.0 / (1.0 + math.exp(-1.0))
        expected = sig1 * math.tanh(1.0)
        assert out[0] == pytest.approx(expected, rel=1e-12)
        assert out[0] == pytest.approx(0.55677, abs=1e-5)

    def test_closed_update_gate_carries_state(self):
        h = np.array([0.37, -0.8])
        bias = np.zeros(6)
        bias[:2] = -50.0  # update gate pinned to 0
        rng = np.random.default_rng(0)
        out = gru_cell(rng.normal(size=3), h, rng.normal(size=(6, 3)), rng.normal(size=(6, 2)), bias)
        assert out == pytest.approx(h, abs=1e-12)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ModelError, match="mismatch"):
            gru_cell(np.zeros(2), np.zeros(3), np.zeros((9, 5)), np.zeros((9, 3)), np.zeros(9))

    def test_gate_ranges_bound_hidden_state(self):
        rng = np.random.default_rng(42)
        h = np.zeros(4)
        for _ in range(200):
            h = gru_cell(
                rng.normal(size=3),
                h,
                rng.normal(size=(12, 3)),
                rng.normal(size=(12, 4)),
                rng.normal(size=12),
            )
            assert np.abs(h).max() < 1.0


def naive_forward(x, params):
    """Independent step-by-step oracle built from gru_cell and explicit math."""
    cfg = params.config
    t = params.tensors
    steps = x.shape[0]
    inp = x
    for i in range(cfg.num_layers):
        h = np.zeros(cfg.hidden_size)
        fwd = []
        for s in range(steps):
            h = gru_cell(
                inp[s], h, t[f"layer{i}.fwd.w_in"], t[f"layer{i}.fwd.w_rec"], t[f"layer{i}.fwd.bias"]
            )
            fwd.append(h)
        h = np.zeros(cfg.hidden_size)
        bwd = [None] * steps
        for s in range(steps - 1, -1, -1):
            h = gru_cell(
                inp[s], h, t[f"layer{i}.bwd.w_in"], t[f"layer{i}.bwd.w_rec"], t[f"layer{i}.bwd.bias"]
            )
            bwd[s] = h
        inp = np.stack([np.concatenate([f, b]) for f, b in zip(fwd, bwd)])
    scores = np.array([t["attention.score"] @ np.tanh(t["attention.proj"] @ a) for a in inp])
    e = np.exp(scores - scores.max())
    w = e / e.sum()
    context = (w[:, None] * inp).sum(axis=0)
    return t["head.weight"] @ context + t["head.bias"], w


class TestForward:
    def test_matches_naive_oracle(self):
        params = tiny_params(hidden=2, input_size=2, layers=1)
        x = np.random.default_rng(7).normal(size=(3, 2))
        logits, _ = forward(x, params)
        want, _ = naive_forward(x, params)
        assert logits == pytest.approx(want, abs=1e-12)

    def test_matches_naive_oracle_stacked(self):
        params = tiny_params(hidden=3, input_size=4, layers=2)
        x = np.random.default_rng(8).normal(size=(6, 4))
        logits, _ = forward(x, params)
        want, _ = naive_forward(x, params)
        assert logits == pytest.approx(want, abs=1e-12)

    def test_zero_head_gives_uniform_distribution(self):
        params = tiny_params()
        params.tensors["head.weight"][:] = 0.0
        params.tensors["head.bias"][:] = 0.0
        logits, _ = forward(np.ones((4, 2)), params)
        assert np.array_equal(logits, np.zeros(4))
        assert softmax(logits) == pytest.approx(np.full(4, 0.25), abs=1e-15)

    def test_single_step_attention_weight_is_one(self):
        params = tiny_params()
        _, trace = forward(np.ones((1, 2)), params)
        assert trace.attention_weights[0] == pytest.approx([1.0], abs=1e-15)

    def test_attention_weights_sum_to_one(self):
        params = tiny_params(hidden=4, input_size=3)
        x = np.random.default_rng(3).normal(size=(2, 9, 3))
        _, trace = forward_batch(x, params)
        sums = trace.attention_weights.sum(axis=1)
        assert sums == pytest.approx(np.ones(2), abs=1e-9)
        assert (trace.attention_weights >= 0).all()

    def test_attention_shift_invariance(self):
        # adding a constant to every score leaves softmax weights unchanged
        scores = np.random.default_rng(0).normal(size=(1, 8))
        assert softmax(scores + 5.0) == pytest.approx(softmax(scores), abs=1e-12)

    def test_deterministic_given_dropout_seed(self):
        params = tiny_params(hidden=3, input_size=2, layers=2, dropout=0.5)
        x = np.random.default_rng(1).normal(size=(2, 5, 2))
        a, _ = forward_batch(x, params, training=True, dropout_seed=9)
        b, _ = forward_batch(x, params, training=True, dropout_seed=9)
        assert np.array_equal(a, b)
        c, _ = forward_batch(x, params, training=True, dropout_seed=10)
        assert not np.array_equal(a, c)

    def test_eval_mode_ignores_dropout_seed(self):
        params = tiny_params(hidden=3, input_size=2, layers=2, dropout=0.5)
        x = np.random.default_rng(1).normal(size=(2, 5, 2))
        a, _ = forward_batch(x, params, training=False, dropout_seed=1)
        b, _ = forward_batch(x, params, training=False, dropout_seed=2)
        assert np.array_equal(a, b)

    def test_reversal_symmetry(self):
        # swapping direction blocks and reversing time swaps the output halves
        params = tiny_params(hidden=3, input_size=2, layers=1)
        swapped = params.clone()
        for part in ("w_in", "w_rec", "bias"):
            swapped.tensors[f"layer0.fwd.{part}"] = params.tensors[f"layer0.bwd.{part}"].copy()
            swapped.tensors[f"layer0.bwd.{part}"] = params.tensors[f"layer0.fwd.{part}"].copy()
        x = np.random.default_rng(11).normal(size=(1, 7, 2))
        _, tr = forward_batch(x, params)
        _, tr_rev = forward_batch(x[:, ::-1, :].copy(), swapped)
        h = 3
        out, out_rev = tr.last_output, tr_rev.last_output
        assert out_rev[:, ::-1, :h] == pytest.approx(out[:, :, h:], abs=1e-12)
        assert out_rev[:, ::-1, h:] == pytest.approx(out[:, :, :h], abs=1e-12)

    def test_shape_mismatch_rejected(self):
        params = tiny_params()
        with pytest.raises(ModelError, match="input_size"):
            forward(np.ones((4, 3)), params)

    def test_non_finite_activation_identifies_layer(self):
        params = tiny_params()
        params.tensors["layer0.fwd.w_in"][0, 0] = np.nan
        with pytest.raises(ModelError, match="layer 0"):
            forward(np.ones((4, 2)), params)


class TestLossAndGrads:
    def test_zero_head_loss_is_ln4(self):
        params = tiny_params()
        params.tensors["head.weight"][:] = 0.0
        params.tensors["head.bias"][:] = 0.0
        x = np.random.default_rng(0).normal(size=(8, 5, 2))
        y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        loss, _ = loss_and_grads(x, y, params, training=False)
        assert loss == pytest.approx(math.log(4.0), abs=1e-12)

    def test_batch_duplication_invariance(self):
        params = tiny_params(hidden=3, input_size=2)
        x = np.random.default_rng(2).normal(size=(3, 4, 2))
        y = np.array([0, 2, 1])
        loss1, grads1 = loss_and_grads(x, y, params, training=False)
        loss2, grads2 = loss_and_grads(
            np.concatenate([x, x]), np.concatenate([y, y]), params, training=False
        )
        assert loss2 == pytest.approx(loss1, abs=1e-12)
        for k in grads1:
            assert grads2[k] == pytest.approx(grads1[k], abs=1e-12)

    def test_label_out_of_range_rejected(self):
        params = tiny_params()
        x = np.ones((2, 3, 2))
        with pytest.raises(ModelError, match="label"):
            loss_and_grads(x, np.array([0, 4]), params)

    def test_empty_batch_rejected(self):
        params = tiny_params()
        with pytest.raises(ModelError, match="empty"):
            loss_and_grads(np.ones((0, 3, 2)), np.array([], dtype=int), params)

    def test_gradients_match_finite_differences_spot(self):
        # full sweep lives in the acceptance suite; spot-check two tensors here
        params = tiny_params(hidden=3, input_size=2)
        x = np.random.default_rng(4).normal(size=(2, 4, 2))
        y = np.array([1, 3])
        _, grads = loss_and_grads(x, y, params, training=False)
        eps = 1e-5
        for name in ("layer0.fwd.w_rec", "attention.proj"):
            tensor = params.tensors[name]
            idx = (1, 1)
            orig = tensor[idx]
            tensor[idx] = orig + eps
            lp, _ = loss_and_grads(x, y, params, training=False)
            tensor[idx] = orig - eps
            lm, _ = loss_and_grads(x, y, params, training=False)
            tensor[idx] = orig
            num = (lp - lm) / (2 * eps)
            assert grads[name][idx] == pytest.approx(num, rel=1e-5, abs=1e-9)


class TestPredict:
    def test_probabilities_sum_to_one(self):
        params = tiny_params(hidden=4, input_size=3, head_scale=1.0)
        label, probs = predict(np.random.default_rng(1).normal(size=(6, 3)), params)
        assert isinstance(label, ProtocolLabel)
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert ((probs > 0) & (probs < 1)).all()

    def test_dominant_logit_wins(self):
        params = tiny_params()
        params.tensors["head.weight"][:] = 0.0
        params.tensors["head.bias"] = np.array([5.0, 0.0, 0.0, 0.0])
        label, probs = predict(np.ones((3, 2)), params)
        assert label.index == 0
        assert probs[0] > 0.97
        assert probs[0] == pytest.approx(math.exp(5) / (math.exp(5) + 3), rel=1e-9)

    def test_tie_breaks_to_lowest_index(self):
        params = tiny_params()
        params.tensors["head.weight"][:] = 0.0
        params.tensors["head.bias"][:] = 0.0
        label, _ = predict(np.ones((3, 2)), params)
        assert label.index == 0


class TestInit:
    def test_head_zero_other_weights_bounded(self):
        cfg = ModelConfig(input_size=5, hidden_size=16, num_layers=2, dropout=0.4)
        params = init_params(cfg, seed=0)
        assert np.all(params.tensors["head.weight"] == 0.0)
        assert np.all(params.tensors["head.bias"] == 0.0)
        bound = 1.0 / math.sqrt(16)
        for name, tensor in params.items():
            if not name.startswith("head."):
                assert np.abs(tensor).max() <= bound

    def test_seeded_init_reproducible(self):
        cfg = ModelConfig(input_size=2, hidden_size=4, num_layers=1)
        a = init_params(cfg, seed=5)
        b = init_params(cfg, seed=5)
        for k in a.tensors:
            assert np.array_equal(a.tensors[k], b.tensors[k])


class TestCheckpoint:
    def _save(self, tmp_path, params, name="ck.ccid", **kw):
        path = tmp_path / name
        save_checkpoint(
            path,
            params,
            norm_mean=np.arange(5.0),
            norm_std=np.ones(5),
            seed=3,
            **kw,
        )
        return path

    def test_write_read_write_bit_identical(self, tmp_path):
        params = tiny_params(hidden=3, input_size=5)
        p1 = self._save(tmp_path, params, "a.ccid")
        ck = load_checkpoint(p1)
        p2 = tmp_path / "b.ccid"
        save_checkpoint(p2, ck.params, norm_mean=ck.norm_mean, norm_std=ck.norm_std, seed=ck.seed)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_with_optimizer(self, tmp_path):
        params = tiny_params(hidden=3, input_size=5)
        opt = {
            "m": {k: np.full_like(v, 0.5) for k, v in params.tensors.items()},
            "v": {k: np.full_like(v, 0.25) for k, v in params.tensors.items()},
            "t": 17,
            "lr": 3.75e-5,
        }
        path = self._save(tmp_path, params, optimizer=opt, epoch=4)
        ck = load_checkpoint(path)
        assert ck.epoch == 4
        assert ck.optimizer["t"] == 17
        assert ck.optimizer["lr"] == 3.75e-5
        assert np.array_equal(ck.optimizer["m"]["head.weight"], opt["m"]["head.weight"])
        for k in params.tensors:
            assert np.array_equal(ck.params.tensors[k], params.tensors[k])

    def test_config_mismatch_rejected(self, tmp_path):
        params = tiny_params(hidden=3, input_size=5)
        path = self._save(tmp_path, params)
        other = ModelConfig(input_size=5, hidden_size=8, num_layers=1)
        with pytest.raises(CheckpointError, match="does not match"):
            load_checkpoint(path, expect_config=other)

    def test_corrupt_file_rejected(self, tmp_path):
        bad = tmp_path / "bad.ccid"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
