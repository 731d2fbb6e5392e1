import numpy as np
import pytest
import torch

from densformer.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from densformer.model import (
    ModelConfig,
    WhiteningError,
    count_parameters,
    embed_pad,
    export_attention,
    forward,
    init_weights,
    kde_attention_head,
    normalized_gaussian_kernel,
    perturb_heads,
    predict,
    whiten,
)

SMALL = ModelConfig(width=32, heads=4, layers=2, decoder_layers=1, dropout=0.1)


@pytest.fixture(scope="module")
def weights():
    return perturb_heads(init_weights(SMALL, seed=3), scale=0.2)


def test_default_parameter_count():
    n = count_parameters(ModelConfig())
    assert 7e5 < n < 9e5
    assert init_weights(ModelConfig()).num_parameters() == n


def test_width_must_divide_heads():
    with pytest.raises(ValueError):
        ModelConfig(width=30, heads=4)


class TestWhiten:
    def test_identity_case(self, rng):
        Q, _ = np.linalg.qr(rng.normal(size=(20, 3)))
        X = Q - Q.mean(0)
        # re-orthonormalise after centring
        U, _, Vt = np.linalg.svd(X, full_matrices=False)
        X = U @ Vt
        Xw, _, T = whiten(X, X[:2])
        np.testing.assert_allclose(T.matrix, np.eye(3), atol=1e-8)
        np.testing.assert_allclose(Xw, X, atol=1e-8)

    def test_scale_and_shift_give_same_whitened_points(self, rng):
        X, Y = rng.normal(size=(30, 2)), rng.normal(size=(5, 2))
        a = whiten(X, Y)
        b = whiten(2.5 * X + 7.0, 2.5 * Y + 7.0)
        np.testing.assert_allclose(a[0], b[0], atol=1e-10)
        np.testing.assert_allclose(a[1], b[1], atol=1e-10)

    def test_gram_is_identity(self, rng):
        X = rng.normal(size=(64, 3)) @ rng.normal(size=(3, 3))
        Xw, _, T = whiten(X, X)
        np.testing.assert_allclose(Xw.T @ Xw, np.eye(3), atol=1e-8)
        assert np.abs(Xw.mean(0)).max() < 1e-10
        np.testing.assert_allclose(T.matrix, T.matrix.T, atol=0)
        assert np.linalg.eigvalsh(T.matrix).min() > 0

    def test_singular_gram_names_eigenvalue(self, rng):
        x = rng.normal(size=(50, 1))
        with pytest.raises(WhiteningError, match="smallest eigenvalue"):
            whiten(np.hstack([x, 2 * x]), x.repeat(2, 1))

    def test_too_few_points(self):
        with pytest.raises(WhiteningError):
            whiten(np.eye(3)[:3], np.zeros((1, 3)))


class TestEmbedPad:
    def test_full_dimension(self, rng):
        P = rng.normal(size=(4, 5))
        out = embed_pad(P, 5).numpy()
        np.testing.assert_array_equal(out[:, :5], P)
        np.testing.assert_array_equal(out[:, 5:], 1.0)

    def test_one_dimension(self):
        out = embed_pad(np.array([[2.5]]), 5).numpy()
        np.testing.assert_array_equal(out, [[2.5, 0, 0, 0, 0, 1, 0, 0, 0, 0]])

    def test_too_many_dimensions(self):
        with pytest.raises(ValueError):
            embed_pad(np.zeros((2, 6)), 5)


class TestForward:
    def test_score_shape_is_truncated(self, weights, rng):
        est = predict(weights, rng.normal(size=(40, 2)), rng.normal(size=(7, 2)))
        assert est.scores.shape == (7, 2) and est.log_densities.shape == (7,)

    def test_context_permutation(self, weights, rng):
        X, Y = rng.normal(size=(50, 3)), rng.normal(size=(9, 3))
        a = predict(weights, X, Y)
        b = predict(weights, X[rng.permutation(50)], Y)
        np.testing.assert_allclose(a.log_densities, b.log_densities, atol=1e-10, rtol=0)
        np.testing.assert_allclose(a.scores, b.scores, atol=1e-10, rtol=0)

    def test_query_permutation_and_independence(self, weights, rng):
        X, Y = rng.normal(size=(50, 2)), rng.normal(size=(9, 2))
        p = rng.permutation(9)
        a = predict(weights, X, Y)
        b = predict(weights, X, Y[p])
        c = predict(weights, X, Y[:1])
        np.testing.assert_allclose(b.scores, a.scores[p], atol=1e-10, rtol=0)
        np.testing.assert_allclose(c.log_densities, a.log_densities[:1], atol=1e-10, rtol=0)

    def test_translation(self, weights, rng):
        X, Y = rng.normal(size=(60, 2)), rng.normal(size=(8, 2))
        mu = np.array([3.0, -40.0])
        a, b = predict(weights, X, Y), predict(weights, X + mu, Y + mu)
        np.testing.assert_allclose(a.log_densities, b.log_densities, atol=1e-6, rtol=0)
        np.testing.assert_allclose(a.scores, b.scores, atol=1e-6, rtol=0)

    @pytest.mark.parametrize("c", [0.1, 3.0])
    def test_isotropic_scaling(self, weights, rng, c):
        X, Y = rng.normal(size=(60, 3)), rng.normal(size=(8, 3))
        a, b = predict(weights, X, Y), predict(weights, c * X, c * Y)
        np.testing.assert_allclose(b.densities, a.densities * c**-3, rtol=1e-6)
        np.testing.assert_allclose(b.scores, a.scores / c, rtol=1e-6, atol=1e-9)

    def test_duplicated_context(self, weights, rng):
        X, Y = rng.normal(size=(30, 2)), rng.normal(size=(6, 2))
        a, b = predict(weights, X, Y), predict(weights, np.vstack([X, X]), Y)
        np.testing.assert_allclose(a.log_densities, b.log_densities, atol=1e-10, rtol=0)
        np.testing.assert_allclose(a.scores, b.scores, atol=1e-10, rtol=0)

    def test_query_on_context_point(self, weights, rng):
        X = rng.normal(size=(20, 1))
        est = predict(weights, X, X[3:4])
        assert est.densities[0] > 0 and np.all(np.isfinite(est.scores))

    def test_empty_queries(self, weights, rng):
        est = predict(weights, rng.normal(size=(20, 2)), np.zeros((0, 2)))
        assert est.log_densities.shape == (0,) and est.scores.shape == (0, 2)

    def test_dimension_above_max(self, weights, rng):
        with pytest.raises(ValueError):
            predict(weights, rng.normal(size=(20, 6)))

    def test_untrained_model_is_gaussian_fit(self, rng):
        w = init_weights(SMALL, seed=0)
        X = rng.normal(size=(200, 2)) * [1.0, 3.0] + 1.0
        Y = rng.normal(size=(5, 2))
        est = predict(w, X, Y)
        m, C = X.mean(0), np.cov(X.T, bias=True)
        Ci = np.linalg.inv(C)
        np.testing.assert_allclose(est.scores, -(Y - m) @ Ci, atol=1e-10)

    def test_batched_matches_single(self, weights, rng):
        X, Y = rng.normal(size=(2, 25, 2)), rng.normal(size=(2, 4, 2))
        est = forward(weights, X, Y)
        for b in range(2):
            one = predict(weights, X[b], Y[b])
            np.testing.assert_allclose(est.scores[b].detach().numpy(), one.scores, atol=1e-12)

    def test_dropout_only_in_training(self, weights, rng):
        X, Y = rng.normal(size=(25, 1)), rng.normal(size=(4, 1))
        with torch.no_grad():
            a = forward(weights, X, Y, training=True, seed=0, step=1).scores
            b = forward(weights, X, Y, training=True, seed=0, step=1).scores
            c = forward(weights, X, Y, training=True, seed=0, step=2).scores
        assert torch.equal(a, b) and not torch.equal(a, c)

    def test_autograd_head_mode(self, rng):
        cfg = ModelConfig(width=16, heads=2, layers=1, decoder_layers=1, head_mode="autograd")
        w = perturb_heads(init_weights(cfg, seed=1), scale=0.3)
        X, Y = rng.normal(size=(30, 2)), rng.normal(size=(5, 2))
        est = predict(w, X, Y)
        eps = 1e-6
        fd = np.empty_like(Y)
        for i in range(2):
            e = np.zeros(2)
            e[i] = eps
            fd[:, i] = (predict(w, X, Y + e).log_densities - predict(w, X, Y - e).log_densities) / (2 * eps)
        np.testing.assert_allclose(est.scores, fd, rtol=1e-5, atol=1e-6)


class TestKdeHead:
    def test_two_orthogonal_points(self):
        A = kde_attention_head(np.eye(2), 1.0)
        off = np.exp(-1) / (1 + np.exp(-1))
        np.testing.assert_allclose(A, [[1 - off, off], [off, 1 - off]], atol=1e-15)
        assert off == pytest.approx(0.26894, abs=1e-5)

    def test_identical_rows(self):
        X = np.tile([[0.6, 0.8]], (7, 1))
        np.testing.assert_allclose(kde_attention_head(X, 0.3), 1 / 7, atol=1e-15)

    def test_matches_normalized_kernel(self, rng):
        X = rng.normal(size=(50, 4))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        np.testing.assert_allclose(kde_attention_head(X, 0.7), normalized_gaussian_kernel(X, X, 0.7), atol=1e-12, rtol=0)

    def test_rejects_non_unit_rows(self):
        with pytest.raises(ValueError):
            kde_attention_head(np.array([[1.0, 1.0]]), 1.0)


class TestExportAttention:
    def test_rows_are_stochastic(self, weights, rng):
        X, Y = rng.normal(size=(40, 2)), rng.normal(size=(6, 2))
        for layer in range(SMALL.layers + SMALL.decoder_layers):
            res = export_attention(weights, X, Y, layer=layer)
            assert res["heads"].shape[0] == SMALL.heads
            np.testing.assert_allclose(res["heads"].sum(-1), 1.0, atol=1e-6)
            np.testing.assert_allclose(res["kde"].sum(-1), 1.0, atol=1e-12)
            assert -1.0 <= res["correlation"] <= 1.0
        assert res["heads"].shape[1:] == (6, 40)

    def test_coincident_points_give_uniform_kernel(self):
        D = normalized_gaussian_kernel(np.zeros((2, 1)), np.zeros((2, 1)))
        np.testing.assert_allclose(D, 0.5)

    def test_layer_out_of_range(self, weights, rng):
        with pytest.raises(IndexError):
            export_attention(weights, rng.normal(size=(10, 1)), layer=3)


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
    def test_bit_exact_round_trip(self, tmp_path, dtype):
        w = init_weights(SMALL, seed=9, dtype=dtype)
        extra = {"adam/m/embed/w": torch.randn(w["embed/w"].shape, dtype=dtype)}
        path = tmp_path / "c.bin"
        save_checkpoint(path, w, {"step": 12, "seed": 9, "loss": 0.5}, extra)
        back, meta, back_extra = load_checkpoint(path)
        assert back.config == SMALL and meta["step"] == 12
        for name, t in w.tensors.items():
            assert back[name].dtype == dtype
            assert torch.equal(back[name], t.detach())
        assert torch.equal(back_extra["adam/m/embed/w"], extra["adam/m/embed/w"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.bin")

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(path, init_weights(SMALL), {})
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 100])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
