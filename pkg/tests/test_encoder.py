import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from milab import encoder as enc
from milab import numcore as nc
from milab.errors import ConfigError, DegenerateInputError, FormatError, ShapeError


def test_init_is_deterministic_per_seed():
    a = enc.init_params((16, 8, 4), (32,), seed=3)
    b = enc.init_params((16, 8, 4), (32,), seed=3)
    c = enc.init_params((16, 8, 4), (32,), seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a.flat(), b.flat()))
    assert any(not np.array_equal(x, y) for x, y in zip(a.flat(), c.flat()))


def test_layer_shapes_follow_dims():
    p = enc.init_params((16, 8, 4), (32,), seed=0)
    assert [w.shape for w, _ in p.feature_layers] == [(16, 32), (32, 8)]
    assert [w.shape for w, _ in p.projection_layers] == [(8, 4)]
    assert all(np.all(b == 0) for _, b in p.feature_layers + p.projection_layers)


def test_zero_width_is_config_error():
    with pytest.raises(ConfigError):
        enc.init_params((16, 8, 4), (0,))


def naive_forward(p, x):
    h = x
    for i, (w, b) in enumerate(p.feature_layers):
        out = np.zeros((h.shape[0], w.shape[1]))
        for r in range(h.shape[0]):
            for j in range(w.shape[1]):
                out[r, j] = sum(h[r, k] * w[k, j] for k in range(w.shape[0])) + b[j]
        h = np.maximum(out, 0) if i < len(p.feature_layers) - 1 else out
    return h


def test_forward_matches_layer_by_layer_oracle():
    rng = np.random.default_rng(0)
    p = enc.init_params((5, 3, 2), (4,), seed=1)
    p.feature_layers = [(w, rng.normal(size=b.shape)) for w, b in p.feature_layers]
    x = rng.normal(size=(4, 5))
    np.testing.assert_allclose(enc.forward_features(p, x), naive_forward(p, x), atol=1e-12)


def test_zero_network_gives_zero_embeddings():
    p = enc.init_params((5, 3, 2), (4,), seed=1)
    p.feature_layers = [(np.zeros_like(w), np.zeros_like(b)) for w, b in p.feature_layers]
    assert np.all(enc.forward_features(p, np.ones((2, 5))) == 0)


def test_batch_consistency():
    p = enc.init_params((5, 3, 2), (4,), seed=1)
    x = np.random.default_rng(2).normal(size=(2, 5))
    both = enc.forward_features(p, x)
    # BLAS may pick a different kernel for a single row, so compare to rounding error
    np.testing.assert_allclose(both[0], enc.forward_features(p, x[:1])[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(both[1], enc.forward_features(p, x[1:])[0], rtol=0, atol=1e-12)


def test_shape_errors():
    p = enc.init_params((5, 3, 2), (4,), seed=1)
    with pytest.raises(ShapeError):
        enc.forward_features(p, np.ones((2, 4)))
    with pytest.raises(ShapeError):
        enc.forward_projection(p, np.ones((2, 4)))


def test_projection_identity_and_scale_invariance():
    p = enc.EncoderParams([(np.eye(2), np.zeros(2))], [(np.eye(2), np.zeros(2))], (2, 2, 2))
    np.testing.assert_allclose(enc.forward_projection(p, np.array([[3.0, 4.0]])), [[0.6, 0.8]], atol=1e-15)
    q = enc.init_params((4, 3, 2), (), seed=0)
    h = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_allclose(enc.forward_projection(q, 5 * h), enc.forward_projection(q, h), atol=1e-12)


def test_projection_of_zero_is_degenerate():
    p = enc.EncoderParams([(np.eye(2), np.zeros(2))], [(np.zeros((2, 2)), np.zeros(2))], (2, 2, 2))
    with pytest.raises(DegenerateInputError):
        enc.forward_projection(p, np.ones((1, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_projection_rows_unit_norm(seed, n):
    p = enc.init_params((6, 4, 3), (5,), seed=seed)
    x = np.random.default_rng(seed).normal(size=(n, 6))
    h = enc.forward_features(p, x)
    # an all-dead ReLU layer can map a row to psi(h) = 0, which is the degenerate case
    raw = h @ p.projection_layers[0][0] + p.projection_layers[0][1]
    assume(np.all(np.linalg.norm(raw, axis=1) >= 1e-12))
    z = enc.forward_projection(p, h)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)


def test_sgd_fixed_point_and_closed_form():
    x = [np.array([1.0, -2.0])]
    enc.sgd_step(x, [np.zeros(2)], enc.SgdState(0.1, 0.9, 0.0))
    np.testing.assert_array_equal(x[0], [1.0, -2.0])
    x = [np.array([1.0])]
    enc.sgd_step(x, [x[0].copy()], enc.SgdState(0.1, 0.0, 0.0))
    assert x[0][0] == pytest.approx(0.9, abs=1e-15)


def test_sgd_decreases_convex_quadratic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    q = a @ a.T + np.eye(4)
    lr = 0.5 / np.linalg.eigvalsh(q).max()
    x = [rng.normal(size=4)]
    st_ = enc.SgdState(lr, 0.0, 0.0)
    prev = 0.5 * x[0] @ q @ x[0]
    for _ in range(100):
        enc.sgd_step(x, [q @ x[0]], st_)
        cur = 0.5 * x[0] @ q @ x[0]
        assert cur < prev
        prev = cur


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        enc.sgd_step([np.zeros(2)], [np.zeros(3)], enc.SgdState())


def test_cosine_lr():
    assert enc.cosine_lr(0, 10, 0.03) == 0.03
    assert enc.cosine_lr(10, 10, 0.03) == pytest.approx(0.0, abs=1e-18)
    assert enc.cosine_lr(5, 10, 0.03) == pytest.approx(0.015, abs=1e-15)
    with pytest.raises(ConfigError):
        enc.cosine_lr(11, 10, 0.03)


def test_checkpoint_round_trip_and_errors(tmp_path):
    p = enc.init_params((5, 3, 2), (4, 4), seed=1, projection_hidden=(3,))
    blob = enc.to_bytes(p)
    q = enc.from_bytes(blob)
    assert enc.to_bytes(q) == blob
    assert q.dims == p.dims and len(q.feature_layers) == 3 and len(q.projection_layers) == 2
    enc.save_checkpoint(p, tmp_path / "e.mile")
    assert enc.to_bytes(enc.load_checkpoint(tmp_path / "e.mile")) == blob
    with pytest.raises(FormatError):
        enc.from_bytes(b"XXXXXX" + blob[6:])
    with pytest.raises(FormatError):
        enc.from_bytes(blob[:-3])


@pytest.mark.parametrize("seed", range(3))
def test_infonce_pretrain_step_passes_grad_check(seed):
    from milab import losses

    rng = np.random.default_rng(seed)
    p = enc.init_params((8, 8, 4), (16,), seed=seed)
    x = rng.normal(size=(4, 8))
    x2 = x + 0.1 * rng.normal(size=x.shape)
    nf = len(p.feature_layers)

    def f(arrs):
        q = enc.EncoderParams.from_flat(arrs, nf, p.dims)
        z1 = enc.forward_projection(p, enc.forward_features(p, x, q.feature_layers), q.projection_layers)
        z2 = enc.forward_projection(p, enc.forward_features(p, x2, q.feature_layers), q.projection_layers)
        return losses.info_nce_batch(z1, z2, 0.5)

    assert nc.grad_check(f, p.flat()) <= 1e-6


def test_sgd_keeps_identical_results_for_identical_inputs():
    p1 = enc.init_params((3, 2, 2), (), seed=0)
    p2 = enc.init_params((3, 2, 2), (), seed=0)
    g = [np.full_like(a, 0.1) for a in p1.flat()]
    f1, f2 = p1.flat(), p2.flat()
    enc.sgd_step(f1, g, enc.SgdState())
    enc.sgd_step(f2, g, enc.SgdState())
    assert enc.to_bytes(p1) == enc.to_bytes(p2)
    assert math.isfinite(float(np.sum(f1[0])))
