import csv

import numpy as np
import pytest
import torch

from densformer import training
from densformer.checkpoint import load_checkpoint
from densformer.compute import grad
from densformer.gmm import BatchConfig, make_training_batch
from densformer.model import DensityScoreEstimate, ModelConfig, forward, init_weights, perturb_heads
from densformer.training import TrainConfig, TrainingError, loss, train

TINY = ModelConfig(width=16, heads=2, layers=1, decoder_layers=1)


def tiny_train_config(**kw):
    kw.setdefault("batch", BatchConfig(B=2, d=1, n_x=32, n_y=8, k_min=1, k_max=3))
    kw.setdefault("lr", 1e-3)
    return TrainConfig(**kw)


def est(logf, s):
    return DensityScoreEstimate(torch.tensor(logf, dtype=torch.float64), torch.tensor(s, dtype=torch.float64))


class TestLoss:
    def test_zero_at_target(self):
        f, s = np.array([0.2, 0.5]), np.array([[1.0], [-2.0]])
        total, _, _ = loss(est(np.log(f), s), f, s, 0.5)
        assert float(total) == 0.0

    def test_alpha_selects_term(self):
        f, s = np.array([0.2, 0.5]), np.array([[1.0], [-2.0]])
        pred = est(np.log(f) + 1.0, s + 3.0)
        assert float(loss(pred, f, s, 1.0)[0]) == pytest.approx(1.0)
        assert float(loss(pred, f, s, 0.0)[0]) == pytest.approx(9.0)

    def test_hand_computed_two_points(self):
        f = np.array([0.25, 0.5])
        s = np.array([[0.5], [-1.0]])
        pred = est([np.log(0.5), np.log(0.25)], [[1.5], [0.0]])
        # log space: (log 2)^2 for both points; scores: 1 and 1
        expect = 0.3 * np.log(2.0) ** 2 + 0.7 * 1.0
        assert float(loss(pred, f, s, 0.3)[0]) == pytest.approx(expect, abs=1e-12)
        # raw density space: ((0.25)^2 + (0.25)^2) / 2
        expect_raw = 0.3 * 0.0625 + 0.7 * 1.0
        assert float(loss(pred, f, s, 0.3, log_space=False)[0]) == pytest.approx(expect_raw, abs=1e-12)

    def test_permutation_invariant(self, rng):
        f = rng.uniform(0.1, 1, 6)
        s = rng.normal(size=(6, 2))
        pred_l, pred_s = rng.normal(size=6), rng.normal(size=(6, 2))
        p = rng.permutation(6)
        a = loss(est(pred_l, pred_s), f, s, 0.4)[0]
        b = loss(est(pred_l[p], pred_s[p]), f[p], s[p], 0.4)[0]
        assert float(a) == pytest.approx(float(b), abs=1e-14)

    def test_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            loss(est([0.0], [[0.0]]), [1.0], [[0.0]], 1.5)
        with pytest.raises(ValueError):
            TrainConfig(alpha=-0.1)

    def test_rejects_nonpositive_density(self):
        with pytest.raises(ValueError):
            loss(est([0.0], [[0.0]]), [0.0], [[0.0]], 0.5)

    @pytest.mark.parametrize("alpha,silent", [(0.0, "head_density"), (1.0, "head_score")])
    def test_head_gradients_vanish(self, alpha, silent):
        w = perturb_heads(init_weights(TINY, seed=0), scale=0.3)
        b = make_training_batch(BatchConfig(B=2, d=2, n_x=20, n_y=5), np.random.default_rng(0))
        pred = forward(w, b.X, b.Y)
        names = [n for n in w.tensors if n.startswith(silent)]
        total = loss(pred, b.densities, b.scores, alpha)[0]
        for g in grad(total + 0 * sum(w[n].sum() for n in names), [w[n] for n in names]):
            assert float(g.abs().max()) == 0.0


def test_learning_rate_defaults():
    assert TrainConfig(batch=BatchConfig(d=2)).learning_rate == 1e-4
    assert TrainConfig(batch=BatchConfig(d=(1, 3))).learning_rate == 1e-3
    assert TrainConfig(lr=5e-4).learning_rate == 5e-4


def test_deterministic_runs():
    a = train(TINY, tiny_train_config(steps=6, seed=3))
    b = train(TINY, tiny_train_config(steps=6, seed=3))
    assert [h[3] for h in a.history] == [h[3] for h in b.history]
    c = train(TINY, tiny_train_config(steps=6, seed=4))
    assert [h[3] for h in a.history] != [h[3] for h in c.history]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full = train(TINY, tiny_train_config(steps=8, checkpoint_every=4), out_dir=tmp_path / "full")
    part = train(TINY, tiny_train_config(steps=8, checkpoint_every=4), out_dir=tmp_path / "part", stop_after=4)
    assert part.history[-1][0] == 4
    rest = train(TINY, tiny_train_config(steps=8, checkpoint_every=4), out_dir=tmp_path / "part", resume=part.checkpoints[-1])
    assert [h[3] for h in rest.history] == [h[3] for h in full.history[4:]]
    w_full, _, _ = load_checkpoint(full.checkpoints[-1])
    for name, t in rest.weights.tensors.items():
        assert torch.equal(t.detach(), w_full[name])


def test_telemetry_and_checkpoints(tmp_path):
    res = train(TINY, tiny_train_config(steps=5, checkpoint_every=2), out_dir=tmp_path, evaluate=lambda w: 1.0)
    with open(tmp_path / "telemetry.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "L_T", "L_S", "L", "wall_time"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 5]
    assert [p.split("_")[-1] for p in map(str, res.checkpoints)] == ["0000002.bin", "0000004.bin", "0000005.bin"]
    _, meta, extra = load_checkpoint(res.checkpoints[-1])
    assert meta["step"] == 5 and meta["seed"] == 0 and "loss" in meta
    assert any(k.startswith("adam/v/") for k in extra)
    assert (tmp_path / "evaluations.csv").exists()


def test_resume_rejects_other_config(tmp_path):
    res = train(TINY, tiny_train_config(steps=2, checkpoint_every=2), out_dir=tmp_path)
    with pytest.raises(ValueError):
        train(ModelConfig(width=16, heads=4, layers=1, decoder_layers=1), tiny_train_config(steps=4), resume=res.checkpoints[-1])


def test_non_finite_loss_aborts(monkeypatch):
    def bad_loss(*args, **kwargs):
        v = torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True)
        return v, v, v

    monkeypatch.setattr(training, "loss", bad_loss)
    with pytest.raises(TrainingError) as info:
        train(TINY, tiny_train_config(steps=3, seed=11))
    assert info.value.step == 1 and info.value.seed == 11


def test_mixed_dimension_training():
    res = train(TINY, tiny_train_config(steps=3, batch=BatchConfig(B=2, d=(1, 2, 3), n_x=16, n_y=4)))
    assert len(res.history) == 3


def test_raw_density_mode():
    res = train(TINY, tiny_train_config(steps=3, log_space=False))
    assert all(np.isfinite(h[3]) for h in res.history)


def test_unimodal_score_loss_drops():
    # without the Gaussian baseline the untrained score head outputs zero
    cfg = ModelConfig(width=16, heads=2, layers=1, decoder_layers=1, gaussian_baseline=False)
    res = train(cfg, TrainConfig(steps=500, lr=1e-3, batch=BatchConfig(B=4, d=1, n_x=64, k_min=1, k_max=1)))
    l_s = np.array([h[2] for h in res.history])
    assert l_s[:50].mean() > 5 * l_s[-50:].mean()
