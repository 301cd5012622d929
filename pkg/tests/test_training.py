"""Optimizer semantics and the integrated training loop."""

import numpy as np
import pytest

from blockrnn import data
from blockrnn.config import parse_config
from blockrnn.formats import block_sparsity
from blockrnn.model import evaluate
from blockrnn.training import (clip_global_norm, load_report_csv,
                               model_from_checkpoint, nesterov_step, train)


class TestNesterovStep:
    def test_zero_momentum_is_plain_sgd(self):
        w = np.array([1.0, 2.0])
        v = np.array([0.5, -0.5])
        g = np.array([0.2, 0.4])
        w2, v2 = nesterov_step(w, v, g, lr=0.1, momentum=0.0)
        np.testing.assert_allclose(w2, w - 0.1 * g, rtol=1e-15)

    def test_zero_gradient_coasts(self):
        w = np.array([1.0])
        v = np.array([0.3])
        w2, v2 = nesterov_step(w, v, np.zeros(1), lr=0.1, momentum=0.9)
        assert v2[0] == pytest.approx(0.27, rel=1e-15)
        assert w2[0] == pytest.approx(1.27, rel=1e-15)

    def test_quadratic_bowl_strictly_decreases(self):
        # f(w) = w^2 / 2, gradient at the lookahead point
        w, v = np.array([1.0]), np.array([0.0])
        losses = [0.5 * w[0] ** 2]
        for _ in range(10):
            g = w + 0.5 * v  # gradient of f at (w + mu v)
            w, v = nesterov_step(w, v, g, lr=0.05, momentum=0.5)
            losses.append(0.5 * w[0] ** 2)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_dict_form_matches_array_form(self):
        rng = np.random.default_rng(0)
        w, v, g = (rng.normal(size=(3, 3)) for _ in range(3))
        w_d, v_d = nesterov_step({"a": w}, {"a": v}, {"a": g}, 0.1, 0.9)
        w_a, v_a = nesterov_step(w, v, g, 0.1, 0.9)
        assert np.array_equal(w_d["a"], w_a)
        assert np.array_equal(v_d["a"], v_a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            nesterov_step({"a": np.zeros(2)}, {"a": np.zeros(2)},
                          {"a": np.zeros(3)}, 0.1, 0.9)


class TestClipGlobalNorm:
    def test_noop_below_threshold(self):
        g = {"a": np.array([0.3, 0.4])}
        norm = clip_global_norm(g, 5.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_allclose(g["a"], [0.3, 0.4])

    def test_scales_to_threshold(self):
        g = {"a": np.array([3.0, 4.0])}
        clip_global_norm(g, 1.0)
        assert np.linalg.norm(g["a"]) == pytest.approx(1.0, rel=1e-12)

    def test_disabled_when_nonpositive(self):
        g = {"a": np.array([30.0, 40.0])}
        clip_global_norm(g, 0.0)
        np.testing.assert_allclose(g["a"], [30.0, 40.0])


SMALL_CFG = """
model.kind=gru
model.hidden=16
model.layers=1
train.epochs=5
train.lr=0.5
train.momentum=0.9
train.batch=8
train.seq_len=32
train.seed=7
block.h=4
block.w=4
"""


@pytest.fixture(scope="module")
def tokens():
    return data.encode(data.synth_corpus(60_000, seed=5))


class TestTrainLoop:
    def test_no_pruning_keeps_dense(self, tokens):
        cfg = parse_config(SMALL_CFG)
        rep = train(cfg, tokens=tokens)
        assert rep.final_block_sparsity == 0.0
        assert all(r.block_sparsity == 0.0 for r in rep.records)
        assert all(s[0] < 0.01 for s in rep.layer_sparsity.values())

    def test_determinism_bitwise(self, tokens):
        cfg = parse_config(SMALL_CFG + "prune.enabled=true\nprune.freq=10\n")
        a = train(cfg, tokens=tokens).to_csv()
        b = train(cfg, tokens=tokens).to_csv()
        assert a == b

    def test_loss_improves_and_validation_runs(self, tokens):
        cfg = parse_config(SMALL_CFG)
        rep = train(cfg, tokens=tokens)
        assert len(rep.epochs) == 5
        assert rep.epochs[-1].val_loss < np.log(256)
        head = np.mean([r.loss for r in rep.records[:10]])
        tail = np.mean([r.loss for r in rep.records[-10:]])
        assert tail < head

    def test_sparsity_trajectory_monotone_then_frozen(self, tokens):
        cfg = parse_config(SMALL_CFG + "prune.enabled=true\nprune.freq=10\n")
        rep = train(cfg, tokens=tokens)
        spars = [r.block_sparsity for r in rep.records]
        assert all(b >= a for a, b in zip(spars, spars[1:]))
        assert rep.final_block_sparsity > 0.3
        # frozen after the end iteration
        end = 2 * len(rep.records) // 5
        assert len(set(spars[end + 1:])) == 1

    def test_mask_monotone_and_weights_zeroed(self, tokens):
        cfg = parse_config(SMALL_CFG + "prune.enabled=true\nprune.freq=10\n")
        seen = []

        def watch(iteration, eps, params, masks):
            dead = {n: frozenset(map(tuple, np.argwhere(~m.kept)))
                    for n, m in masks.items()}
            seen.append((iteration, dead))

        rep = train(cfg, tokens=tokens, on_mask_update=watch)
        assert seen, "no mask updates fired"
        for (_, d1), (_, d2) in zip(seen, seen[1:]):
            for name in d1:
                assert d1[name] <= d2[name]
        assert rep.final_block_sparsity > 0.0

    def test_checkpoint_roundtrip_and_masked_zeros(self, tokens, tmp_path):
        ck = tmp_path / "model.bsnn"
        cfg = parse_config(SMALL_CFG + "prune.enabled=true\nprune.freq=10\n")
        rep = train(cfg, tokens=tokens, checkpoint_path=str(ck))
        model, masks, meta = model_from_checkpoint(ck)
        assert meta["model"] == "gru"
        for name, grid in masks.items():
            w = model.params[name]
            em = np.repeat(np.repeat(grid, 4, 0), 4, 1)
            assert np.array_equal(w[~em], np.zeros((~em).sum()))
            assert block_sparsity(w, 4, 4) >= (~grid).mean()
        # report sparsity figures match a recomputation from the checkpoint
        for name, (elem, blk) in rep.layer_sparsity.items():
            from blockrnn.formats import sparsity
            assert sparsity(model.params[name]) == elem
            assert block_sparsity(model.params[name], 4, 4) == blk

    def test_report_csv_roundtrip(self, tokens, tmp_path):
        cfg = parse_config(SMALL_CFG + "prune.enabled=true\nprune.freq=10\n")
        path = tmp_path / "report.csv"
        rep = train(cfg, tokens=tokens, report_path=str(path))
        loaded = load_report_csv(path)
        assert len(loaded.records) == len(rep.records)
        assert loaded.records[-1].block_sparsity == rep.final_block_sparsity
        assert [e.val_loss for e in loaded.epochs] == [e.val_loss for e in rep.epochs]

    def test_divergence_aborts_with_flag(self, tokens):
        # an overflowing penalty drives the total loss to +inf immediately
        cfg = parse_config(SMALL_CFG + "reg.kind=l_half\nreg.lambda=1e308\n")
        rep = train(cfg, tokens=tokens)
        assert rep.diverged
        assert rep.records == []

    def test_trained_beats_untrained(self, tokens):
        cfg = parse_config(SMALL_CFG)
        rep = train(cfg, tokens=tokens)
        from blockrnn.model import RecurrentModel
        untrained = RecurrentModel("gru", 256, 16, 1, seed=7)
        val = tokens[-3000:]
        assert evaluate(untrained, val, 8, 32) > rep.epochs[-1].val_loss


class TestWarmCheckpointQ:
    def test_warm_quantile_is_used(self, tokens, tmp_path):
        ck = tmp_path / "warm.bsnn"
        dense_cfg = parse_config(SMALL_CFG)
        train(dense_cfg, tokens=tokens, checkpoint_path=str(ck))
        cfg = parse_config(SMALL_CFG + "prune.enabled=true\nprune.freq=10\n"
                           + f"prune.warm_checkpoint={ck}\n")
        rep = train(cfg, tokens=tokens)
        assert rep.final_block_sparsity > 0.3  # pruning actually engaged
