import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milab import losses
from milab import numcore as nc
from milab.errors import ConfigError, ContractError

CFG1 = losses.SimilarityConfig(1.0)
CFG5 = losses.SimilarityConfig(0.5)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def rand_units(rng, n, d):
    return [unit(rng.normal(size=d)) for _ in range(n)]


def test_similarity_cases():
    assert losses.similarity([1, 0], [1, 0], CFG1) == pytest.approx(math.e, abs=1e-15)
    assert losses.similarity([1, 0], [0, 1], CFG1) == 1.0
    assert losses.similarity([1, 0], [0.6, 0.8], CFG5) == pytest.approx(math.exp(1.2), abs=1e-12)
    assert math.exp(1.2) == pytest.approx(3.32012, abs=1e-5)
    with pytest.raises(ContractError):
        losses.similarity([1, 0.1], [1, 0], CFG1)
    with pytest.raises(ConfigError):
        losses.SimilarityConfig(0.0)


def test_info_nce_cases():
    z = unit([1, 0])
    assert losses.info_nce(z, z, [], CFG1)[0] == pytest.approx(0.0, abs=1e-15)
    loss, _ = losses.info_nce([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], CFG1)
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.313262, abs=1e-6)


@pytest.mark.parametrize("n", [1, 3, 10])
def test_info_nce_equal_similarities(n):
    z = [1.0, 0.0]
    loss, _ = losses.info_nce(z, z, [z] * n, CFG5)
    assert abs(loss - math.log(1 + n)) <= 1e-12


def test_sup_con_cases():
    z = [1.0, 0.0]
    assert abs(losses.sup_con(z, [z], [], CFG5)[0]) <= 1e-12
    loss, _ = losses.sup_con([1.0, 0.0], [[1.0, 0.0]], [[0.0, 1.0]], CFG5)
    assert loss == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    assert loss == pytest.approx(0.126928, abs=1e-6)
    with pytest.raises(ContractError):
        losses.sup_con(z, [], [z], CFG5)


@pytest.mark.parametrize("a,b", [(1, 1), (2, 5), (8, 8), (3, 0)])
def test_sup_con_equal_similarities(a, b):
    z = [0.0, 1.0]
    loss, _ = losses.sup_con(z, [z] * a, [z] * b, CFG5)
    assert abs(loss - math.log(a + b)) <= 1e-12


def test_bce_instance():
    assert losses.bce_instance(0.5, 1)[0] == pytest.approx(math.log(2), abs=1e-15)
    assert losses.bce_instance(0.9, 0)[0] == pytest.approx(-math.log(0.1), abs=1e-12)
    assert losses.bce_instance(1.0, 1)[0] == pytest.approx(0.0, abs=1e-11)
    assert math.isfinite(losses.bce_instance(0.0, 1)[0])


def test_sup_con_reduces_to_info_nce():
    rng = np.random.default_rng(0)
    a, aug = rand_units(rng, 2, 4)
    diffs = rand_units(rng, 5, 4)
    l1, g1 = losses.info_nce(a, aug, diffs, CFG5)
    l2, g2 = losses.sup_con(a, [aug], diffs, CFG5)
    assert l1 == pytest.approx(l2, abs=1e-14)
    np.testing.assert_allclose(g1[0], g2[0], atol=1e-14)


def _rotation(rng, d):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 5), st.integers(0, 5))
def test_rotation_invariance(seed, n_same, n_diff):
    rng = np.random.default_rng(seed)
    d = 4
    a = unit(rng.normal(size=d))
    same = rand_units(rng, n_same, d)
    diff = rand_units(rng, n_diff, d)
    r = _rotation(rng, d)
    base = losses.sup_con(a, same, diff, CFG5)[0]
    rot = losses.sup_con(r @ a, [r @ s for s in same], [r @ x for x in diff], CFG5)[0]
    assert abs(base - rot) <= 1e-10
    b1 = losses.info_nce(a, same[0], diff, CFG5)[0]
    b2 = losses.info_nce(r @ a, r @ same[0], [r @ x for x in diff], CFG5)[0]
    assert abs(b1 - b2) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_losses_decrease_in_anchor_positive_similarity(seed):
    rng = np.random.default_rng(seed)
    diffs = rand_units(rng, 3, 3)
    a = np.array([1.0, 0.0, 0.0])
    prev_i = prev_s = None
    for angle in np.linspace(math.pi, 0.0, 9):
        pos = np.array([math.cos(angle), math.sin(angle), 0.0])
        li = losses.info_nce(a, pos, diffs, CFG5)[0]
        ls = losses.sup_con(a, [pos], diffs, CFG5)[0]
        if prev_i is not None:
            assert li < prev_i and ls < prev_s
        prev_i, prev_s = li, ls


@pytest.mark.parametrize("seed", range(5))
def test_adjoints_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d = 4
    a = unit(rng.normal(size=d))
    same = np.array(rand_units(rng, 3, d))
    diff = np.array(rand_units(rng, 4, d))
    _, (ga, gs, gd) = losses.sup_con(a, same, diff, CFG5)
    eps = 1e-6

    def f(a_, s_, d_):
        ls = s_ @ a_ / 0.5
        allv = np.concatenate([ls, d_ @ a_ / 0.5])
        return np.log(np.sum(np.exp(allv))) - ls.mean()

    for arr, g in ((a, ga), (same, gs), (diff, gd)):
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + eps
            fp = f(a, same, diff)
            arr[i] = old - eps
            fm = f(a, same, diff)
            arr[i] = old
            num[i] = (fp - fm) / (2 * eps)
        np.testing.assert_allclose(g, num, atol=1e-8)


def test_batch_forms_match_single_anchor_forms():
    rng = np.random.default_rng(3)
    n, k, s, d = 4, 5, 2, 3
    za = np.array(rand_units(rng, n, d))
    zm = np.array(rand_units(rng, n * k, d)).reshape(n, k, d)
    batch = float(losses.sup_con_batch(za, zm, s, 0.5))
    single = np.mean([losses.sup_con(za[i], zm[i, :s], zm[i, s:], CFG5)[0] for i in range(n)])
    assert batch == pytest.approx(single, abs=1e-13)
    z2 = np.array(rand_units(rng, n, d))
    batch = float(losses.info_nce_batch(za, z2, 0.5))
    single = np.mean([losses.info_nce(za[i], z2[i], [z2[j] for j in range(n) if j != i], CFG5)[0] for i in range(n)])
    assert batch == pytest.approx(single, abs=1e-13)


def test_batch_losses_pass_grad_check():
    rng = np.random.default_rng(0)
    za = rng.normal(size=(3, 4))
    zm = rng.normal(size=(3, 5, 4))
    err = nc.grad_check(
        lambda p: losses.sup_con_batch(nc.l2_normalize(p[0]), nc.reshape(nc.l2_normalize(nc.reshape(p[1], (15, 4))), (3, 5, 4)), 2, 0.5),
        [za, zm])
    assert err <= 1e-6
