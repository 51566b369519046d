import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milab import aggregators as ag
from milab import numcore as nc
from milab.errors import CapabilityError, ConfigError, DataError, FormatError, ShapeError

D = 8


def model(kind, seed=0, **kw):
    return ag.init_model(kind, D, ag.AggConfig(kind=kind, **kw), seed)


def bag(seed, k=6, d=D):
    return np.random.default_rng(seed).normal(size=(k, d))


def fixed_phi(scores):
    """A max/topk model whose phi maps row j of eye(K) to scores[j]."""
    k = len(scores)
    logits = np.log(np.asarray(scores) / (1 - np.asarray(scores)))
    return ag.AggregatorModel("max", {"phi_w": logits[:, None], "phi_b": np.zeros(1)}), np.eye(k)


# ---------------------------------------------------------------- pooling

def test_max_pool_cases():
    m, h = fixed_phi([0.2, 0.7])
    p = ag.max_pool(h, m)
    assert p.bag_score == pytest.approx(0.7, abs=1e-12)
    np.testing.assert_allclose(p.instance_scores, [0.2, 0.7], atol=1e-12)
    m, h = fixed_phi([0.3])
    assert ag.max_pool(h, m).bag_score == pytest.approx(0.3, abs=1e-12)


def test_topk_pool_cases():
    m, h = fixed_phi([0.9, 0.1, 0.8])
    assert ag.topk_pool(h, m, ratio=0.5).bag_score == pytest.approx(0.85, abs=1e-12)
    assert ag.topk_pool(h, m, ratio=1.0).bag_score == pytest.approx(0.6, abs=1e-12)
    assert ag.TOPK_GRID == (0.001, 0.01, 0.03, 0.1, 0.2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_topk_with_one_member_equals_max(seed, k):
    m = model("max", seed)
    h = bag(seed, k)
    assert ag.topk_pool(h, m, ratio=0.001).bag_score == ag.max_pool(h, m).bag_score


def test_empty_bag_is_shape_error():
    for kind in ag.KINDS:
        with pytest.raises(ShapeError):
            ag.predict(model(kind), np.zeros((0, D)))
    with pytest.raises(ShapeError):
        ag.predict(model("max"), np.zeros((3, D + 1)))


def test_attention_identical_instances_get_uniform_weights():
    m = model("attention")
    h = np.tile(bag(0, 1), (5, 1))
    np.testing.assert_allclose(ag.attention_mil(h, m).attention_weights, 0.2, atol=1e-15)
    one = ag.attention_mil(h[:1], m)
    assert one.attention_weights.tolist() == [1.0]
    z = h[0] @ m.params["cls_w"][:, 0] + m.params["cls_b"][0]
    assert one.bag_score == pytest.approx(1 / (1 + math.exp(-z)), abs=1e-12)


def test_attention_instance_mode_with_uniform_weights_is_mean():
    m = model("attention", attention_mode="instance")
    m.params["att_w"] = np.zeros_like(m.params["att_w"])
    h = bag(1, 7)
    p = ag.attention_mil(h, m)
    assert p.bag_score == pytest.approx(float(np.mean(p.instance_scores)), abs=1e-12)


def test_dsmil_single_instance_and_duplicated_critical():
    m = model("ds_mil", stream_weight=2.0)
    h = bag(2, 1)
    p = ag.ds_mil(h, m)
    s_inst = p.instance_scores[0]
    z_bag = h[0] @ m.params["cls_w"][:, 0] + m.params["cls_b"][0]
    expect = (2.0 * s_inst + 1 / (1 + math.exp(-z_bag))) / 3.0
    assert p.bag_score == pytest.approx(expect, abs=1e-12)
    h = bag(3, 6)
    p = ag.ds_mil(h, m)
    c = int(np.argmax(p.instance_scores))
    p2 = ag.ds_mil(np.vstack([h, h[c]]), m)
    assert np.allclose(p2.instance_scores.max(), p.instance_scores.max())
    assert np.argmax(p2.instance_scores[:6]) == c


def test_dsmil_instance_scores_are_phi():
    m = model("ds_mil")
    h = bag(4)
    z = h @ m.params["phi_w"][:, 0] + m.params["phi_b"][0]
    np.testing.assert_allclose(ag.instance_scores(m, h), 1 / (1 + np.exp(-z)), atol=1e-14)
    np.testing.assert_allclose(ag.ds_mil(h, m).instance_scores, 1 / (1 + np.exp(-z)), atol=1e-14)


def zero_blocks(m):
    for k in m.params:
        if k.startswith("l") and "_" in k:
            m.params[k] = np.zeros_like(m.params[k])
    return m


@pytest.mark.parametrize("seed", range(5))
def test_transformer_with_zero_blocks_equals_attention(seed):
    t = zero_blocks(model("transformer", seed))
    a = ag.AggregatorModel("attention", {k: t.params[k] for k in ("att_v", "att_w", "cls_w", "cls_b")})
    h = bag(seed, 9)
    pt, pa = ag.transformer_agg(h, t), ag.attention_mil(h, a)
    assert abs(pt.bag_score - pa.bag_score) <= 1e-12
    np.testing.assert_allclose(pt.attention_weights, pa.attention_weights, atol=1e-12)


def test_transformer_singleton_is_residual_mlp():
    t = model("transformer", 1)
    h = bag(5, 1)
    x = h.copy()
    for i in range(2):
        x = x + (x @ t.params[f"l{i}_wv"]) @ t.params[f"l{i}_wo"]  # softmax over one key is 1
        x = x + np.maximum(x @ t.params[f"l{i}_mlp1_w"] + t.params[f"l{i}_mlp1_b"], 0) @ t.params[f"l{i}_mlp2_w"] + t.params[f"l{i}_mlp2_b"]
    z = x[0] @ t.params["cls_w"][:, 0] + t.params["cls_b"][0]
    assert ag.transformer_agg(h, t).bag_score == pytest.approx(1 / (1 + math.exp(-z)), abs=1e-12)


def test_transformer_width_must_split_into_heads():
    with pytest.raises(ConfigError):
        ag.init_model("transformer", 6, ag.AggConfig(kind="transformer", n_heads=4))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(ag.KINDS), st.integers(0, 10_000), st.integers(1, 12))
def test_permutation_invariance(kind, seed, k):
    m = model(kind, seed % 7, attention_mode="instance" if seed % 2 else "embedding")
    h = bag(seed, k)
    perm = np.random.default_rng(seed + 1).permutation(k)
    p, q = ag.predict(m, h), ag.predict(m, h[perm])
    assert p.bag_score == q.bag_score
    if p.instance_scores is not None:
        assert np.array_equal(p.instance_scores[perm], q.instance_scores)
    if p.attention_weights is not None:
        assert np.array_equal(p.attention_weights[perm], q.attention_weights)
        assert abs(p.attention_weights.sum() - 1) <= 1e-9 and np.all(p.attention_weights >= 0)
    assert 0 <= p.bag_score <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_instance_scores_range_and_monotone_in_bias(seed, shift):
    m = model("max", seed)
    h = bag(seed, 5)
    s = ag.instance_scores(m, h)
    assert np.all((s >= 0) & (s <= 1))
    m.params["phi_b"] = m.params["phi_b"] + abs(shift) + 0.1
    assert np.all(ag.instance_scores(m, h) >= s)


def test_instance_scores_capability():
    for kind, mode in (("attention", "embedding"), ("transformer", "embedding")):
        with pytest.raises(CapabilityError):
            ag.instance_scores(model(kind, attention_mode=mode), bag(0))
    m = model("attention")
    bags = [bag(i, 5) for i in range(4)]
    labels = [np.array([1, 0, 0, 0, 0]) for _ in bags]
    ag.attach_linear_probe(m, bags, labels, epochs=20)
    assert ag.instance_scores(m, bags[0]).shape == (5,)


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("kind", ag.KINDS)
def test_bag_loss_gradients_match_finite_differences(kind):
    m = model(kind, 2, attention_mode="instance" if kind == "attention" else "embedding", topk_ratio=0.5)
    h = bag(7, 5)
    h = h[ag._canonical_order(h)]
    names = list(m.params)

    def f(p):
        return ag._forward(m, dict(zip(names, p)), h, y=1.0)[3]

    assert nc.grad_check(f, [m.params[n] for n in names]) <= 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_fast_dsmil_step_matches_tape(seed):
    m = model("ds_mil", seed, stream_weight=[0.5, 1.0, 3.0][seed % 3])
    h = bag(seed + 100, 1 + seed % 7)
    h = h[ag._canonical_order(h)]
    y = float(seed % 2)
    bag_s, loss, grads = ag.dsmil_step(m.params, h, y, m.stream_weight)
    ref_loss, ref = ag.bag_loss_and_grads(m, h, y)
    assert abs(loss - ref_loss) <= 1e-12
    assert abs(bag_s - ag.predict(m, h).bag_score) <= 1e-12
    for name, g in zip(m.params, ref):
        np.testing.assert_allclose(grads[name], g, atol=1e-12)


# ---------------------------------------------------------------- training

def toy_bags(seed=0, n=20, k=8):
    rng = np.random.default_rng(seed)
    bags, labels = [], []
    for i in range(n):
        h = rng.normal(size=(k, D))
        y = i % 2
        if y:
            h[0, 0] += 6.0
        bags.append(h)
        labels.append(y)
    return bags, np.array(labels)


@pytest.mark.parametrize("kind", ["max", "ds_mil", "attention"])
def test_separable_toy_reaches_full_training_auc(kind):
    from milab.metrics import roc_auc

    bags, labels = toy_bags()
    cfg = ag.AggConfig(kind=kind, lr=5e-3, max_epochs=200, step_size=100)
    m = ag.train_aggregator(bags, labels, config=cfg, seed=0)
    assert roc_auc(labels, ag.bag_scores(m, bags)) == 1.0


def test_training_is_deterministic_and_restarts_never_hurt():
    from milab.metrics import roc_auc

    bags, labels = toy_bags(1)
    vb, vl = toy_bags(2, n=10)
    cfg = ag.AggConfig(kind="ds_mil", lr=1e-3, max_epochs=5)
    m1 = ag.train_aggregator(bags, labels, config=cfg, seed=3, val_bags=vb, val_labels=vl)
    m2 = ag.train_aggregator(bags, labels, config=cfg, seed=3, val_bags=vb, val_labels=vl)
    assert ag.to_bytes(m1) == ag.to_bytes(m2)
    cfg3 = ag.AggConfig(kind="ds_mil", lr=1e-3, max_epochs=5, n_restarts=3)
    m3 = ag.train_aggregator(bags, labels, config=cfg3, seed=3, val_bags=vb, val_labels=vl)
    assert roc_auc(vl, ag.bag_scores(m3, vb)) >= roc_auc(vl, ag.bag_scores(m1, vb))


def test_single_class_training_is_data_error():
    bags, _ = toy_bags()
    with pytest.raises(DataError):
        ag.train_aggregator(bags, np.zeros(len(bags), int))


def test_default_schedule_values():
    c = ag.AggConfig()
    assert (c.lr, c.step_size, c.gamma, c.max_epochs) == (2e-4, 75, 0.5, 350)
    assert c.betas == (0.9, 0.999) and c.eps == 1e-8
    with pytest.raises(ConfigError):
        ag.AggConfig(kind="clam")
    with pytest.raises(ConfigError):
        ag.AggConfig.from_dict({"kind": "max", "bogus": 1})


def test_adam_first_step_moves_by_lr():
    x = [np.array([1.0, -1.0])]
    ag.Adam(x, 0.1).step(x, [np.array([0.5, -2.0])])
    np.testing.assert_allclose(x[0], [0.9, -0.9], atol=1e-7)


def test_fit_logistic_separates():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 3))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(float)
    w, b = ag.fit_logistic(x, y, epochs=300)
    acc = np.mean(((x @ w)[:, 0] + b[0] > 0) == (y == 1))
    assert acc > 0.95


# ---------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("kind", ag.KINDS)
def test_checkpoint_round_trip(kind, tmp_path):
    m = model(kind, 4)
    blob = ag.to_bytes(m)
    assert blob[:6] == b"MILA1\0"
    ag.save_checkpoint(m, tmp_path / "a.mila")
    m2 = ag.load_checkpoint(tmp_path / "a.mila")
    assert ag.to_bytes(m2) == blob
    h = bag(0)
    assert ag.predict(m, h).bag_score == ag.predict(m2, h).bag_score


def test_checkpoint_format_errors():
    blob = ag.to_bytes(model("max"))
    for bad in (b"XXXXXX" + blob[6:], blob[:-4], blob + b"\0"):
        with pytest.raises(FormatError):
            ag.from_bytes(bad)
