import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf, softmax as sp_softmax

from pmoe.dispatch import (
    DispatchTrace,
    DispatcherLayer,
    MoeDispatcher,
    TokenMLP,
    dispatch_weights,
    fuse_tokens,
    moe_dispatch,
    record_trace,
)
from pmoe.numerics import Rng, ShapeError, Tensor, cross_entropy, grad_check


def random_mlp(d, k, rng, std=0.5):
    return TokenMLP(rng.child(0).normal((d, d), std), rng.child(1).normal(d, std), rng.child(2).normal((d, k), std), rng.child(3).normal(k, std))


def np_mlp(mlp, x):
    h = x @ mlp.fc1_w.data + mlp.fc1_b.data
    h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
    return h @ mlp.fc2_w.data + mlp.fc2_b.data


def np_weights(mlp, e, p, z):
    logits = np_mlp(mlp, e) + (0 if p is None else np_mlp(mlp, p)) + np_mlp(mlp, z).mean(axis=0)
    return sp_softmax(logits, axis=-1)


def inputs(rng, n_p, d, n_z=5):
    return rng.child(10).normal((n_p, d)), rng.child(11).normal((n_p, d)), rng.child(12).normal((n_z, d))


def test_zero_mlp_gives_uniform():
    layer = DispatcherLayer(TokenMLP(np.zeros((8, 8)), np.zeros(8), np.zeros((8, 3)), np.zeros(3)))
    e, p, z = inputs(Rng(0), 4, 8)
    assert np.array_equal(dispatch_weights(layer, e, p, z).data, np.full((4, 3), 1 / 3))


def test_default_init_is_uniform():
    layer = DispatcherLayer.init(8, 4, Rng(0))
    e, p, z = inputs(Rng(1), 4, 8)
    assert np.array_equal(dispatch_weights(layer, e, p, z).data, np.full((4, 4), 0.25))


def test_single_expert_rows_are_one():
    layer = DispatcherLayer(random_mlp(8, 1, Rng(2)))
    e, p, z = inputs(Rng(3), 4, 8)
    assert np.array_equal(dispatch_weights(layer, e, p, z).data, np.ones((4, 1)))


def test_hand_ln2_logits():
    # fc1 = 0 so every token yields gelu(0) = 0 hidden; the bias alone sets the logits.
    # Three groups each contribute the bias: 3 * b = [ln 2, 0].
    b = np.array([np.log(2.0) / 3, 0.0])
    layer = DispatcherLayer(TokenMLP(np.zeros((4, 4)), np.zeros(4), np.zeros((4, 2)), b))
    e, p, z = inputs(Rng(4), 2, 4)
    assert np.allclose(dispatch_weights(layer, e, p, z).data, [[2 / 3, 1 / 3]] * 2, rtol=0, atol=1e-15)
    # first prompted layer: no accumulated term, so logits are 2b
    w = dispatch_weights(layer, e, None, z).data
    q = np.exp(2 * b) / np.exp(2 * b).sum()
    assert np.allclose(w, [q, q], rtol=0, atol=1e-15)


@pytest.mark.parametrize("with_accum", [True, False])
def test_matches_numpy_oracle(with_accum):
    rng = Rng(5)
    mlp = random_mlp(6, 3, rng)
    e, p, z = inputs(rng, 4, 6, n_z=9)
    p = p if with_accum else None
    ours = dispatch_weights(DispatcherLayer(mlp), e, p, z).data
    assert np.allclose(ours, np_weights(mlp, e, p, z), rtol=0, atol=1e-14)


def test_batched_matches_per_sample():
    rng = Rng(6)
    layer = DispatcherLayer(random_mlp(6, 2, rng))
    e = rng.normal((3, 6))
    p, z = rng.normal((4, 3, 6)), rng.normal((4, 7, 6))
    batch = dispatch_weights(layer, e, p, z).data
    for i in range(4):
        assert np.allclose(batch[i], dispatch_weights(layer, e, p[i], z[i]).data, rtol=0, atol=1e-14)


def test_shape_errors():
    layer = DispatcherLayer.init(8, 2, Rng(0))
    with pytest.raises(ShapeError):
        dispatch_weights(layer, np.zeros((4, 7)), None, np.zeros((5, 8)))
    with pytest.raises(ShapeError):
        dispatch_weights(layer, np.zeros((4, 8)), np.zeros((3, 8)), np.zeros((5, 8)))
    with pytest.raises(ShapeError):
        fuse_tokens(np.zeros((4, 2)), np.zeros((3, 4, 8)))


class TestFuse:
    def test_one_hot_selects(self):
        epts = Rng(0).normal((3, 4, 5))
        w = np.zeros((4, 3))
        w[np.arange(4), [2, 0, 1, 2]] = 1.0
        out = fuse_tokens(w, epts).data
        for n, j in enumerate([2, 0, 1, 2]):
            assert np.array_equal(out[n], epts[j, n])

    def test_identical_experts(self):
        shared = Rng(1).normal((4, 5))
        w = sp_softmax(Rng(2).normal((4, 3)), axis=-1)
        assert np.allclose(fuse_tokens(w, np.stack([shared] * 3)).data, shared, rtol=0, atol=1e-15)

    def test_hand_weighted_sum(self):
        epts = np.array([[[1.0, 0.0]], [[0.0, 2.0]]])
        assert np.allclose(fuse_tokens(np.array([[0.25, 0.75]]), epts).data, [[0.25, 1.5]], rtol=0, atol=0)

    def test_batched(self):
        rng = Rng(3)
        epts = rng.normal((2, 3, 4))
        w = sp_softmax(rng.normal((5, 3, 2)), axis=-1)
        ref = np.einsum("bnk,knd->bnd", w, epts)
        assert np.allclose(fuse_tokens(w, epts).data, ref, rtol=0, atol=1e-14)


class TestMoe:
    def test_single_dispatch_expert_equals_plain(self):
        rng = Rng(7)
        mlp = random_mlp(6, 3, rng)
        moe = MoeDispatcher([mlp], rng.normal((6, 1)), rng.normal(1))
        e, p, z = inputs(rng, 4, 6)
        plain = dispatch_weights(DispatcherLayer(mlp), e, p, z).data
        assert np.allclose(moe_dispatch(moe, e, p, z).data, plain, rtol=0, atol=1e-12)

    def test_forced_router_uses_only_selected(self):
        rng = Rng(8)
        mlps = [random_mlp(6, 2, rng.child(i)) for i in range(3)]
        router_b = np.array([-50.0, 50.0, -50.0])
        moe = MoeDispatcher(mlps, np.zeros((6, 3)), router_b)
        e, p, z = inputs(rng, 4, 6)
        gate = sp_softmax(router_b)[1]
        x = np.concatenate([e, p, z])
        logits = gate * np_mlp(mlps[1], x)
        ref = sp_softmax(logits[:4] + logits[4:8] + logits[8:].mean(0), axis=-1)
        assert np.allclose(moe_dispatch(moe, e, p, z).data, ref, rtol=0, atol=1e-14)
        assert np.all(moe.last_routing.expert == 1)

    def test_top1_matches_oracle(self):
        rng = Rng(9)
        moe = MoeDispatcher([random_mlp(6, 2, rng.child(i)) for i in range(4)], rng.normal((6, 4)), rng.normal(4))
        x = rng.normal((30, 6))
        out = moe.token_logits(x).data
        probs = sp_softmax(x @ moe.router_w.data + moe.router_b.data, axis=-1)
        sel = probs.argmax(-1)
        assert len(set(sel)) > 1
        for i in range(30):
            assert np.allclose(out[i], probs[i, sel[i]] * np_mlp(moe.mlps[sel[i]], x[i]), rtol=0, atol=1e-14)

    def test_router_tie_goes_low(self):
        moe = MoeDispatcher([random_mlp(4, 2, Rng(i)) for i in range(3)], np.zeros((4, 3)), np.zeros(3))
        moe.token_logits(Rng(0).normal((5, 4)))
        assert np.all(moe.last_routing.expert == 0)
        assert np.allclose(moe.last_routing.gate, 1 / 3)

    def test_type_check(self):
        with pytest.raises(TypeError):
            moe_dispatch(DispatcherLayer.init(4, 2, Rng(0)), np.zeros((1, 4)), None, np.zeros((2, 4)))

    def test_gradients_through_gate_and_selected_path(self):
        rng = Rng(10)
        moe = MoeDispatcher([random_mlp(4, 2, rng.child(i)) for i in range(3)], rng.normal((4, 3)), rng.normal(3))
        e, p, z = inputs(rng, 3, 4)
        epts = Tensor(rng.normal((2, 3, 4)), requires_grad=True)
        params = [t for _, t in moe.named_parameters()] + [epts]
        f = lambda: cross_entropy(fuse_tokens(moe_dispatch(moe, e, p, z), epts).reshape(3, 4), np.array([0, 1, 2]))
        rep = grad_check(f, params, tol=1e-4)
        assert rep.passed, rep


def test_plain_dispatch_gradient():
    rng = Rng(11)
    layer = DispatcherLayer(random_mlp(4, 3, rng))
    e = Tensor(rng.normal((2, 4)), requires_grad=True)
    p = Tensor(rng.normal((2, 4)), requires_grad=True)
    z = Tensor(rng.normal((5, 4)), requires_grad=True)
    epts = Tensor(rng.normal((3, 2, 4)), requires_grad=True)
    f = lambda: cross_entropy(fuse_tokens(dispatch_weights(layer, e, p, z), epts), np.array([0, 3]))
    assert grad_check(f, [t for _, t in layer.named_parameters()] + [e, p, z, epts], tol=1e-4).passed


class TestTrace:
    def test_tie_goes_to_lowest_index(self):
        t = DispatchTrace()
        record_trace(t, np.full((3, 2), 0.5), layer=0, expert=1)
        assert [r.argmax for r in t.records] == [0, 0, 0]

    def test_one_hot(self):
        t = DispatchTrace()
        record_trace(t, np.eye(3), 2, 0)
        assert [r.argmax for r in t.records] == [0, 1, 2]
        assert [r.token for r in t.records] == [0, 1, 2]

    def test_batched_counts_and_histogram(self):
        t = DispatchTrace()
        w = np.zeros((5, 4, 2))
        w[..., 1] = 1.0
        for l in range(4):
            for k in range(2):
                record_trace(t, w, l, k)
        assert len(t) == 5 * 4 * 2 * 4
        assert {l: h.tolist() for l, h in t.histogram().items()} == {l: [0, 40] for l in range(4)}

    def test_csv(self):
        t = DispatchTrace()
        record_trace(t, np.array([[0.25, 0.75]]), 3, 1)
        text = t.to_csv()
        assert text == "layer,expert,token,argmax,w0,w1\n3,1,0,1,0.250000,0.750000\n"
        buf = io.StringIO()
        t.to_csv(buf)
        assert buf.getvalue() == text


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 2, 4]), st.sampled_from([1, 4, 8]))
def test_rows_stochastic_property(seed, k, n_p):
    rng = Rng(seed)
    layer = DispatcherLayer(random_mlp(8, k, rng, std=2.0))
    e, p, z = inputs(rng, n_p, 8)
    w = dispatch_weights(layer, e, p, z).data
    assert np.all((w >= 0) & (w <= 1)) and np.allclose(w.sum(-1), 1, atol=1e-6, rtol=0)
