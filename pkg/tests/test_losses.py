import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ce_loop, mlp, probs, softmax
from redlab import autodiff as ad
from redlab.autodiff import Tape, Tensor
from redlab.losses import (estimate_transition, loss_adversarial, loss_disentangle, loss_source,
                           loss_target_selftrain, loss_trace, pseudo_labels, red_losses,
                           trace_soft_inner, transition_from_probs)
from redlab.nets import ModelDims, RedModel

C = 3


def make(seed=0, mode="conditional"):
    return RedModel.init(ModelDims(6, C, feat_dim=5, hidden_dim=8, disc_hidden=8, disc_mode=mode), seed)


def batch(seed=0, n=10):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 6)), rng.integers(0, C, size=n), rng.standard_normal((n, 6)) + 0.5


def zero_net(net):
    for w, b, _ in net.layers:
        w.data[:] = 0.0
        b.data[:] = 0.0


def boost_head(m, factor):
    for w, b, _ in m.h.layers:
        w.data *= factor


# source loss

def test_source_loss_uniform_is_log_c():
    m = make()
    zero_net(m.h)
    xs, ys, _ = batch()
    assert loss_source(m, xs, ys).item() == pytest.approx(math.log(C), abs=1e-12)


def test_source_loss_separable_is_tiny():
    m = make()
    zero_net(m.h)
    xs, ys, _ = batch()
    m.h.layers[0][1].data[:] = np.array([100.0, 0.0, 0.0])
    assert loss_source(m, xs, np.zeros_like(ys)).item() < 1e-6


def test_source_loss_matches_scalar_loop():
    m = make(4)
    xs, ys, _ = batch(4)
    oracle = ce_loop(probs(m, xs, m.g_es, lam=0.5), ys)
    assert loss_source(m, xs, ys).item() == pytest.approx(oracle, abs=1e-12)


def test_empty_batch_rejected():
    m = make()
    with pytest.raises(ValueError):
        loss_source(m, np.zeros((0, 6)), np.zeros(0, dtype=int))


# self-training

def test_selftrain_tau_one_accepts_nothing():
    m = make()
    _, _, xt = batch()
    loss, count = loss_target_selftrain(m, xt, 1.0)
    assert count == 0 and loss.item() == 0.0


def test_selftrain_single_confident_sample():
    m = make(2)
    boost_head(m, 60.0)
    _, _, xt = batch(2, n=40)
    p = probs(m, xt, m.g_et, lam=0.5)
    i = int(np.argmax(p.max(axis=1)))
    assert p[i].max() > 0.95
    loss, count = loss_target_selftrain(m, xt[i:i + 1], 0.95)
    assert count == 1
    assert loss.item() == pytest.approx(-math.log(p[i].max()), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_selftrain_mask_matches_brute_force(seed):
    m = make(seed)
    boost_head(m, 8.0)
    _, _, xt = batch(seed, n=30)
    p = probs(m, xt, m.g_et, lam=0.5)
    mask = [i for i in range(len(xt)) if max(p[i]) > 0.6]
    accepted, labels = pseudo_labels(Tensor(p), 0.6)
    assert accepted.tolist() == mask
    assert labels.tolist() == [int(np.argmax(p[i])) for i in mask]
    loss, count = loss_target_selftrain(m, xt, 0.6)
    assert count == len(mask)
    if mask:
        assert loss.item() == pytest.approx(ce_loop(p[mask], labels), abs=1e-12)


def test_pseudo_labels_carry_no_gradient():
    m = make(1)
    boost_head(m, 20.0)
    _, _, xt = batch(1)
    with Tape() as tape:
        loss, count = loss_target_selftrain(m, xt, 0.5)
    assert count > 0
    tape.backward(loss)
    # the fused prediction is trained; the labels came from a detached copy
    assert m.h.layers[0][0].grad is not None


# adversarial

def test_adversarial_zero_disc_is_two_log_two():
    m = make()
    zero_net(m.d)
    xs, _, xt = batch()
    assert loss_adversarial(m, xs, xt).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_adversarial_perfect_disc_near_zero():
    m = make(mode="plain")
    zero_net(m.d)
    xs, _, xt = batch()
    # planted feature: g_es adds +1, g_et adds -1 on one coordinate; disc reads it
    m.g_es.layers[-1][1].data[0] += 50.0
    w_last = m.d.layers[-1]
    for w, b, _ in m.d.layers[:-1]:
        w.data[:] = 0.0
    m.d.layers[0][0].data[0, 0] = 1.0
    m.d.layers[1][0].data[0, 0] = 1.0
    w_last[0].data[0, 0] = 10.0
    w_last[1].data[:] = -100.0
    val = loss_adversarial(m, xs, xt).item()
    assert 0.0 <= val < 1e-6


def test_adversarial_gradient_signs_oppose():
    m = make(0)
    xs, _, xt = batch(0)
    # the same GRL graph yields d's gradient and the extractor gradient
    with Tape() as tape:
        loss = loss_adversarial(m, xs, xt, reversal=1.0)
    tape.backward(loss)
    rev_ext = m.g_c.layers[0][0].grad.copy()
    d_grad_rev = m.d.layers[0][0].grad.copy()
    m.zero_grad()
    with Tape() as tape:
        loss = loss_adversarial(m, xs, xt)
    tape.backward(loss)
    plain_ext = m.g_c.layers[0][0].grad.copy()
    np.testing.assert_allclose(rev_ext, -plain_ext, atol=1e-15)
    np.testing.assert_allclose(d_grad_rev, m.d.layers[0][0].grad, atol=1e-15)
    assert np.sum(rev_ext * plain_ext) < 0


def test_adversarial_nonnegative_on_random_models():
    for seed in range(5):
        m = make(seed)
        xs, _, xt = batch(seed)
        assert loss_adversarial(m, xs, xt).item() >= 0


# disentanglement

def test_disentangle_identical_env_extractors_equals_unswapped_losses():
    m = make(3)
    m.g_et.copy_from(m.g_es)
    boost_head(m, 10.0)
    xs, ys, xt = batch(3)
    l_dt, _ = loss_disentangle(m, xs, ys, xt, 0.9)
    l_s = loss_source(m, xs, ys)
    pc = probs(m, xt, m.g_c)
    acc, lab = pseudo_labels(Tensor(pc), 0.9)
    pt = probs(m, xt, m.g_es, lam=0.5)
    l_t = ce_loop(pt[acc], lab) if acc.size else 0.0
    assert l_dt.item() == pytest.approx(l_s.item() + l_t, abs=1e-12)


def test_disentangle_tau_one_leaves_source_term():
    m = make(5)
    xs, ys, xt = batch(5)
    l_dt, count = loss_disentangle(m, xs, ys, xt, 1.0)
    assert count == 0
    assert l_dt.item() == pytest.approx(ce_loop(probs(m, xs, m.g_et, lam=0.5), ys), abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_disentangle_per_sample_oracle(seed):
    m = make(seed)
    boost_head(m, 6.0)
    xs, ys, xt = batch(seed, n=25)
    l_dt, _ = loss_disentangle(m, xs, ys, xt, 0.7)
    src = ce_loop(probs(m, xs, m.g_et, lam=0.5), ys)
    pc = probs(m, xt, m.g_c)
    keep = [i for i in range(len(xt)) if pc[i].max() > 0.7]
    tgt = ce_loop(probs(m, xt[keep], m.g_es, lam=0.5), pc[keep].argmax(axis=1)) if keep else 0.0
    assert l_dt.item() == pytest.approx(src + tgt, abs=1e-12)


def test_disentangle_swap_symmetry():
    m = make(6)
    xs, ys, xt = batch(6)
    before, _ = loss_disentangle(m, xs, ys, xt, 0.4)
    w_es = [p.data.copy() for p in m.g_es.parameters()]
    w_et = [p.data.copy() for p in m.g_et.parameters()]
    for p, v in zip(m.g_es.parameters(), w_et):
        p.data = v
    for p, v in zip(m.g_et.parameters(), w_es):
        p.data = v
    # swap domain roles: source rows now go through what was g_es, and vice versa
    after = ad.add(
        ad.cross_entropy(ad.softmax_rows(m.h(m.mix(m.g_c(Tensor(xs)), m.g_es(Tensor(xs))))), ys),
        loss_target_part(m, xt, 0.4))
    assert after.item() == pytest.approx(before.item(), abs=1e-12)


def loss_target_part(m, xt, tau):
    pc = m.predict_causal(Tensor(xt)).data
    acc, lab = pseudo_labels(Tensor(pc), tau)
    if acc.size == 0:
        return Tensor(0.0)
    z = m.mix(m.g_c(Tensor(xt[acc])), m.g_et(Tensor(xt[acc])))
    return ad.cross_entropy(ad.softmax_rows(m.h(z)), lab)


# transition matrix and trace

def test_transition_hand_example():
    p_es = np.array([[0.8, 0.2], [0.3, 0.7]])
    p_et = np.array([[0.6, 0.4], [0.5, 0.5]])
    oracle = (np.outer(p_es[0], p_et[0]) + np.outer(p_es[1], p_et[1])) / 2
    tm = transition_from_probs(p_es, p_et)
    np.testing.assert_allclose(tm.m, oracle, atol=1e-15)
    assert tm.trace == pytest.approx(((0.8 * 0.6 + 0.2 * 0.4) + (0.3 * 0.5 + 0.7 * 0.5)) / 2, abs=1e-15)
    assert tm.trace == pytest.approx(0.53, abs=1e-12)


def test_transition_identical_one_hots_and_uniform():
    oh = np.eye(4)[[0, 2, 3, 1, 1]]
    tm = transition_from_probs(oh, oh)
    assert tm.trace == 1.0 and np.all(tm.m[~np.eye(4, dtype=bool)] == 0)
    u = np.full((5, 4), 0.25)
    tm = transition_from_probs(u, u)
    np.testing.assert_allclose(tm.m, 1 / 16, atol=1e-15)
    assert tm.trace == pytest.approx(0.25, abs=1e-15)


def test_estimate_transition_uniform_model():
    m = make()
    zero_net(m.h)
    _, _, xt = batch()
    tm = estimate_transition(m, xt)
    np.testing.assert_allclose(tm.m, 1 / C**2, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_transition_invariants_and_soft_trace_identity(seed, n):
    m = make(seed % 7)
    boost_head(m, 1 + seed % 5)
    xt = np.random.default_rng(seed).standard_normal((n, 6))
    for hard in (False, True):
        estimate_transition(m, xt, hard=hard).check(1e-9)
    tm = estimate_transition(m, xt)
    assert abs(trace_soft_inner(m, xt).item() - tm.trace) <= 1e-12
    # independent loop oracle for the soft estimate
    pe, pt = probs(m, xt, m.g_es), probs(m, xt, m.g_et)
    loop = sum(np.outer(a, b) for a, b in zip(pe, pt)) / n
    np.testing.assert_allclose(tm.m, loop, atol=1e-12)


def test_soft_trace_one_hot_rows():
    oh = np.eye(3)[[0, 1, 2]]
    assert transition_from_probs(oh, oh).trace == 1.0
    assert transition_from_probs(oh, oh[[1, 2, 0]]).trace == 0.0


def test_loss_trace_examples():
    m = make()
    _, _, xt = batch()
    assert loss_trace(m, xt, trace_value=Tensor(1.0)).item() == 0.0
    assert loss_trace(m, xt, trace_value=Tensor(0.25)).item() == pytest.approx(0.375, abs=1e-15)


@pytest.mark.parametrize("seed", range(8))
def test_loss_trace_lambda_derivative_sign_and_value(seed):
    m = make(seed)
    m.theta_lambda.data = np.array(np.random.default_rng(seed).normal())
    _, _, xt = batch(seed)
    with Tape() as tape:
        loss = loss_trace(m, xt)
    tape.backward(loss)
    g = m.theta_lambda.grad.item()
    th = m.theta_lambda.data.item()
    tr = trace_soft_inner(m, xt).item()
    sig = 1 / (1 + math.exp(-th))
    assert g == pytest.approx(-sig * (1 - sig) * (1 - tr), abs=1e-12)
    eps = 1e-5
    m.theta_lambda.data = np.array(th + eps)
    up = loss_trace(m, xt).item()
    m.theta_lambda.data = np.array(th - eps)
    down = loss_trace(m, xt).item()
    fd = (up - down) / (2 * eps)
    assert fd <= 0 and g <= 0
    assert abs(fd - g) < 1e-4 * max(abs(g), 1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_trace_loss_gradient_only_reaches_head_and_lambda(seed):
    m = make(seed)
    _, _, xt = batch(seed)
    with Tape() as tape:
        loss = loss_trace(m, xt)
    tape.backward(loss)
    for name in ("g_c", "g_es", "g_et", "d"):
        for p in getattr(m, name).parameters():
            assert p.grad is None or np.all(p.grad == 0)
    assert m.theta_lambda.grad is not None
    assert any(p.grad is not None and np.any(p.grad != 0) for p in m.h.parameters())


def test_all_losses_nonnegative_and_finite():
    for seed in range(4):
        m = make(seed)
        xs, ys, xt = batch(seed)
        b = red_losses(m, xs, ys, xt, tau=0.5)
        assert b.finite()
        assert all(v >= 0 for v in b.values().values())
        b.transition.check()
