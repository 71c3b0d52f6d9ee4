import math

import numpy as np
import pytest

from rmoe import layers
from rmoe.layers import (bce_loss, bptt_backward, embed_backward, embed_forward, grad_check,
                         gru_cell_backward, gru_cell_forward, gru_forward, head_backward,
                         head_forward, init_gru, init_head, sequence_bce)
from rmoe.tensor import Rng

SEEDS = range(20)


def random_gru(k, d, seed, scale=0.7, stack=None):
    rng = Rng(seed)
    p = init_gru(k, d, rng, stack)
    for key in p:
        p[key] = scale * rng.normal(p[key].shape)
    return p


def scalar_cell(h, v, p):
    """GRU step written with explicit loops and math.exp."""
    d, k = p["W_r"].shape
    sig = lambda x: 1.0 / (1.0 + math.exp(-x))
    r = [sig(sum(p["W_r"][i][j] * v[j] for j in range(k))
             + sum(p["U_r"][i][j] * h[j] for j in range(d)) + p["b_r"][i]) for i in range(d)]
    z = [sig(sum(p["W_z"][i][j] * v[j] for j in range(k))
             + sum(p["U_z"][i][j] * h[j] for j in range(d)) + p["b_z"][i]) for i in range(d)]
    c = [math.tanh(sum(p["W_c"][i][j] * v[j] for j in range(k))
                   + sum(p["U_c"][i][j] * r[j] * h[j] for j in range(d)) + p["b_c"][i])
         for i in range(d)]
    return [(1 - z[i]) * h[i] + z[i] * c[i] for i in range(d)]


# -- embedding -------------------------------------------------------------

def test_embedding_examples():
    W = Rng(1).normal((6, 4))
    for j in range(6):
        y = np.zeros(6)
        y[j] = 1
        assert np.array_equal(embed_forward(y, W), W[j])
    assert np.array_equal(embed_forward(np.zeros(6), W), np.zeros(4))
    y = np.zeros(6)
    y[[2, 5]] = 1
    assert np.max(np.abs(embed_forward(y, W) - (W[2] + W[5]))) < 1e-15


def test_embedding_rejects_non_binary():
    with pytest.raises(ValueError):
        embed_forward(np.array([0, 2, 0.0]), np.ones((3, 2)))
    with pytest.raises(ValueError):
        embed_forward(np.zeros(4), np.ones((3, 2)))


def test_embedding_linear_in_disjoint_superpositions():
    rng = Rng(3)
    W = rng.normal((10, 3))
    a = (rng.random(10) < 0.4).astype(float)
    b = (1 - a) * (rng.random(10) < 0.5)
    assert np.allclose(embed_forward(a + b, W), embed_forward(a, W) + embed_forward(b, W),
                       atol=1e-14)


# -- GRU forward -----------------------------------------------------------

def test_gru_cell_zero_params():
    p = {k: np.zeros_like(v) for k, v in init_gru(3, 2, Rng(0)).items()}
    h, _ = gru_cell_forward(np.ones(2), np.ones(3), p)
    assert np.array_equal(h, [0.5, 0.5])
    h, _ = gru_cell_forward(np.zeros(2), np.ones(3), p)
    assert np.array_equal(h, [0.0, 0.0])


@pytest.mark.parametrize("seed", range(5))
def test_gru_cell_matches_scalar_loop(seed):
    p = random_gru(4, 3, seed)
    rng = Rng(100 + seed)
    h, v = rng.uniform(-1, 1, 3), rng.normal(4)
    got, _ = gru_cell_forward(h, v, p)
    assert np.max(np.abs(got - scalar_cell(h, v, p))) < 1e-12


def test_gru_cell_dimension_error():
    p = init_gru(3, 2, Rng(0))
    with pytest.raises(ValueError):
        gru_cell_forward(np.zeros(3), np.zeros(3), p)


def test_gru_forward_equals_repeated_cells_and_stays_in_range():
    p = random_gru(3, 4, 1, scale=2.0)
    V = Rng(2).normal((6, 2, 3)) * 3
    H, tape = gru_forward(V, p)
    assert len(tape) == 6
    h = np.zeros((2, 4))
    for t in range(6):
        h_new, (_, _, _, z, c, _) = gru_cell_forward(h, V[t], p)
        lo, hi = np.minimum(h, c), np.maximum(h, c)
        assert np.all((h_new >= lo - 1e-15) & (h_new <= hi + 1e-15))
        h = h_new
        assert np.allclose(H[t], h, atol=1e-14)
    assert np.all(np.abs(H) < 1)


def test_stacked_gru_equals_independent_networks():
    S = 3
    ps = random_gru(3, 2, 4, stack=S)
    V = Rng(5).normal((4, 2, 3))
    H, _ = gru_forward(V, ps)
    assert H.shape == (4, S, 2, 2)
    for s in range(S):
        single = {k: v[s] for k, v in ps.items()}
        Hs, _ = gru_forward(V, single)
        assert np.allclose(H[:, s], Hs, atol=1e-14)


# -- BPTT ------------------------------------------------------------------

def test_bptt_zero_output_gradient():
    p = random_gru(3, 2, 0)
    V = Rng(1).normal((4, 1, 3))
    H, tape = gru_forward(V, p)
    grads, dV = bptt_backward(tape, np.zeros_like(H), p)
    assert all(not np.any(g) for g in grads.values()) and not np.any(dV)


def test_bptt_length_mismatch():
    p = random_gru(3, 2, 0)
    H, tape = gru_forward(Rng(1).normal((4, 1, 3)), p)
    with pytest.raises(ValueError):
        bptt_backward(tape, np.zeros((3, 1, 2)), p)


def test_single_step_hand_derived_two_unit_cell():
    """Loss = g . h for one step, gradient written out per scalar."""
    p = random_gru(2, 2, 7)
    hp, v, g = np.array([0.3, -0.6]), np.array([0.5, -1.2]), np.array([1.5, -0.7])
    sig = lambda x: 1 / (1 + math.exp(-x))
    r = [sig(p["W_r"][i] @ v + p["U_r"][i] @ hp + p["b_r"][i]) for i in range(2)]
    z = [sig(p["W_z"][i] @ v + p["U_z"][i] @ hp + p["b_z"][i]) for i in range(2)]
    c = [math.tanh(p["W_c"][i] @ v + sum(p["U_c"][i][j] * r[j] * hp[j] for j in range(2))
                   + p["b_c"][i]) for i in range(2)]
    ac = [g[i] * z[i] * (1 - c[i] ** 2) for i in range(2)]          # dL/d(pre-tanh)
    az = [g[i] * (c[i] - hp[i]) * z[i] * (1 - z[i]) for i in range(2)]
    ar = [sum(ac[i] * p["U_c"][i][j] for i in range(2)) * hp[j] * r[j] * (1 - r[j])
          for j in range(2)]
    hand = {"b_c": ac, "b_z": az, "b_r": ar,
            "W_c": [[ac[i] * v[k] for k in range(2)] for i in range(2)],
            "W_z": [[az[i] * v[k] for k in range(2)] for i in range(2)],
            "W_r": [[ar[i] * v[k] for k in range(2)] for i in range(2)],
            "U_c": [[ac[i] * r[j] * hp[j] for j in range(2)] for i in range(2)],
            "U_z": [[az[i] * hp[j] for j in range(2)] for i in range(2)],
            "U_r": [[ar[i] * hp[j] for j in range(2)] for i in range(2)]}
    dh_prev_hand = [g[j] * (1 - z[j]) + sum(ac[i] * p["U_c"][i][j] for i in range(2)) * r[j]
                    + sum(az[i] * p["U_z"][i][j] + ar[i] * p["U_r"][i][j] for i in range(2))
                    for j in range(2)]
    h, cache = gru_cell_forward(hp, v, p)
    grads = {k: np.zeros_like(x) for k, x in p.items()}
    dh_prev, _ = gru_cell_backward(g, cache, p, grads)
    for k in hand:
        assert np.allclose(grads[k], hand[k], atol=1e-14), k
    assert np.allclose(dh_prev, dh_prev_hand, atol=1e-14)
    # the sequence routine gives the same answer for T = 1, h0 = 0
    H, tape = gru_forward(v[None, None], p)
    g_seq, _ = bptt_backward(tape, g[None, None], p)
    ref = {k: np.zeros_like(x) for k, x in p.items()}
    gru_cell_backward(g, gru_cell_forward(np.zeros(2), v, p)[1], p, ref)
    for k in p:
        assert np.allclose(g_seq[k], ref[k], atol=1e-14)


def _gru_loss_setup(seed, T, d, k, B=2, stack=None):
    p = random_gru(k, d, seed, stack=stack)
    rng = Rng(1000 + seed)
    V = rng.normal((T, B, k))
    shape = (T, B, d) if stack is None else (T, stack, B, d)
    C = rng.normal(shape)
    def loss():
        H, _ = gru_forward(V, p)
        return float(np.sum(C * np.sin(H)))
    H, tape = gru_forward(V, p)
    grads, dV = bptt_backward(tape, C * np.cos(H), p)
    return p, V, C, loss, grads, dV


@pytest.mark.parametrize("seed", SEEDS)
def test_bptt_finite_differences(seed):
    T, d = 1 + seed % 4, 1 + seed % 3
    p, V, C, loss, grads, dV = _gru_loss_setup(seed, T, d, 3)
    assert grad_check(loss, p, grads) < 1e-4
    assert grad_check(loss, {"V": V}, {"V": dV}) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_stacked_bptt_finite_differences(seed):
    p, V, C, loss, grads, dV = _gru_loss_setup(seed, 3, 2, 3, stack=3)
    assert grad_check(loss, p, grads) < 1e-4
    assert grad_check(loss, {"V": V}, {"V": dV}) < 1e-4


def test_bptt_decouples_when_recurrence_is_zero():
    p = random_gru(3, 2, 9)
    for g in "rzc":
        p[f"U_{g}"][:] = 0
    V = Rng(3).normal((4, 1, 3))
    H, tape = gru_forward(V, p)
    dH = Rng(4).normal(H.shape)
    full, _ = bptt_backward(tape, dH, p)
    # each step's gates see only its own input; steps are linked solely by
    # the (1 - z) carry, so per-step gradients plus that carry give the total
    total = {k: np.zeros_like(v) for k, v in p.items()}
    carry = np.zeros((1, 2))
    for t in reversed(range(4)):
        h_prev = H[t - 1] if t else np.zeros((1, 2))
        _, cache = gru_cell_forward(h_prev, V[t], p)
        carry, _ = gru_cell_backward(dH[t] + carry, cache, p, total)
    for k in p:
        assert np.allclose(full[k], total[k], atol=1e-13)
    # with U = 0 the state gradient handed back is just the (1 - z) carry
    _, cache = gru_cell_forward(H[2], V[3], p)
    dprev, _ = gru_cell_backward(dH[3], cache, p, {k: np.zeros_like(v) for k, v in p.items()})
    assert np.allclose(dprev, dH[3] * (1 - cache[3]), atol=1e-15)


# -- head and loss ---------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_head_finite_differences(seed):
    rng = Rng(seed)
    p = init_head(3, 4, rng)
    p["b"] = rng.normal(4)
    H, C = rng.normal((2, 3, 3)), rng.normal((2, 3, 4))
    loss = lambda: float(np.sum(C * np.tanh(head_forward(H, p))))
    g, dH = head_backward(H, C / np.cosh(head_forward(H, p)) ** 2, p)
    assert grad_check(loss, p, g) < 1e-7
    assert grad_check(loss, {"H": H}, {"H": dH}) < 1e-7


def test_stacked_head_matches_loop():
    rng = Rng(2)
    p = init_head(3, 4, rng, stack=2)
    p["b"] = rng.normal((2, 4))
    H = rng.normal((5, 2, 3, 3))
    Z = head_forward(H, p)
    for s in range(2):
        assert np.allclose(Z[:, s], H[:, s] @ p["W"][s].T + p["b"][s], atol=1e-14)


def test_bce_examples():
    for y in ([0, 0], [0, 1], [1, 1]):
        assert bce_loss(np.array([0.5, 0.5]), np.array(y))[0] == pytest.approx(math.log(2),
                                                                             abs=1e-15)
    assert bce_loss(np.array([0.8]), np.array([1]))[0] == pytest.approx(0.223144, abs=1e-6)
    with pytest.raises(ValueError):
        bce_loss(np.array([0.5]), np.array([1, 0]))


@pytest.mark.parametrize("seed", range(5))
def test_bce_gradient(seed):
    rng = Rng(seed)
    pred = rng.uniform(0.05, 0.95, 7)
    y = (rng.random(7) < 0.5).astype(float)
    _, g = bce_loss(pred, y)
    num = np.zeros(7)
    for i in range(7):
        e = np.zeros(7)
        e[i] = 1e-6
        num[i] = (bce_loss(pred + e, y)[0] - bce_loss(pred - e, y)[0]) / 2e-6
    assert np.max(np.abs(g - num)) < 1e-6


def test_sequence_bce_is_weighted_mean_of_step_losses():
    rng = Rng(1)
    P = rng.uniform(0.1, 0.9, (3, 2, 4))
    Y = (rng.random((3, 2, 4)) < 0.5).astype(float)
    w = np.array([[0.5, 0.25], [0.5, 0.25], [0.0, 0.25]])
    loss, grad = sequence_bce(P, Y, w)
    ref = sum(w[t, b] * bce_loss(P[t, b], Y[t, b])[0] for t in range(3) for b in range(2))
    assert loss == pytest.approx(ref, abs=1e-14)
    assert np.allclose(grad[2, 0], 0)


def test_grad_check_catches_mutation():
    p, V, C, loss, grads, dV = _gru_loss_setup(3, 3, 3, 3)
    assert grad_check(loss, p, grads) < 1e-4
    bad = {k: v.copy() for k, v in grads.items()}
    i = np.unravel_index(np.argmax(np.abs(bad["W_z"])), bad["W_z"].shape)
    bad["W_z"][i] *= 1.01
    assert grad_check(loss, p, bad) > 1e-4


def test_embedding_backward_finite_differences():
    rng = Rng(6)
    W = rng.normal((5, 3))
    y = (rng.random((4, 2, 5)) < 0.5).astype(float)
    C = rng.normal((4, 2, 3))
    loss = lambda: float(np.sum(C * embed_forward(y, W) ** 2))
    g = embed_backward(y, 2 * C * embed_forward(y, W))
    assert grad_check(loss, {"W": W}, {"W": g}) < 1e-7
