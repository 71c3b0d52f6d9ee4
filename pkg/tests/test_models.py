import math

import numpy as np
import pytest

from rmoe.data import WindowedSequence, make_batch
from rmoe.layers import grad_check
from rmoe.models import (CLAMP, BaseModel, LrModel, MoeModel, PlainMoeModel, RmoeModel,
                         base_forward, freeze_base, gating_weights, load_checkpoint,
                         lr_forward, moe_forward, param_hash, rmoe_predict, save_checkpoint)
from rmoe.tensor import Rng, affine, sigmoid_vec, softmax_vec

E, L = 5, 4   # inputs, targets (targets are the first L inputs)


def windows(T, seed=0, p=0.4):
    return (Rng(seed).random((T, E)) < p).astype(np.uint8)


def jitter(model, seed, scale=0.5):
    rng = Rng(seed)
    for k, v in model.params.items():
        v += scale * rng.normal(v.shape)
    return model


def tiny_base(seed=0):
    return jitter(BaseModel.init(E, L, emb_dim=3, hidden=3, seed=seed), seed + 50)


def scalar_base(windows_, m):
    """Base model written with explicit loops over scalars."""
    p = m.params
    sig = lambda x: 1 / (1 + math.exp(-x))
    d, k = p["gru.W_r"].shape
    h, out = [0.0] * d, []
    for y in windows_[:-1]:
        v = [sum(p["emb.W"][e][j] * y[e] for e in range(E)) for j in range(k)]
        pre = lambda g, i, hin: (sum(p[f"gru.W_{g}"][i][j] * v[j] for j in range(k))
                                 + sum(p[f"gru.U_{g}"][i][j] * hin[j] for j in range(d))
                                 + p[f"gru.b_{g}"][i])
        r = [sig(pre("r", i, h)) for i in range(d)]
        z = [sig(pre("z", i, h)) for i in range(d)]
        rh = [r[j] * h[j] for j in range(d)]
        c = [math.tanh(pre("c", i, rh)) for i in range(d)]
        h = [(1 - z[i]) * h[i] + z[i] * c[i] for i in range(d)]
        out.append([sig(sum(p["head.W"][o][j] * h[j] for j in range(d)) + p["head.b"][o])
                    for o in range(L)])
    return np.array(out)


# -- base ------------------------------------------------------------------

def test_base_zero_params_predict_half():
    m = BaseModel.init(E, L, 3, 3)
    for v in m.params.values():
        v[:] = 0
    assert np.array_equal(base_forward(windows(6), m), np.full((5, L), 0.5))


def test_base_needs_two_windows():
    with pytest.raises(ValueError):
        base_forward(windows(1), tiny_base())


def test_base_prefix_causality():
    m, w = tiny_base(1), windows(8, 3)
    full = base_forward(w, m)
    for t in range(2, 8):
        assert np.array_equal(base_forward(w[:t], m), full[:t - 1])


@pytest.mark.parametrize("seed", range(3))
def test_base_matches_scalar_reference(seed):
    m, w = tiny_base(seed), windows(6, seed)
    assert np.max(np.abs(base_forward(w, m) - scalar_base(w, m))) < 1e-12


def test_batched_prediction_matches_single_sequences():
    m = tiny_base(2)
    seqs = [WindowedSequence(str(i), windows(3 + i, i)) for i in range(4)]
    b = make_batch(seqs, list(range(L)))
    P = m.predict(b.X)
    for i, s in enumerate(seqs):
        assert np.allclose(P[:len(s) - 1, i], base_forward(s.windows, m), atol=1e-14)


# -- mixture ---------------------------------------------------------------

def tiny_moe(n, seed=0):
    return jitter(MoeModel.init(3, L, n, 2, seed), seed + 70)


def test_moe_single_expert_is_that_expert():
    m = tiny_moe(1)
    V = Rng(1).normal((5, 3))
    out, cache = m.mix(V[:, None], "prob")
    assert np.array_equal(out, cache[3][:, 0])
    assert np.array_equal(gating_weights(V, m), np.ones((5, 1)))


def test_moe_identical_experts():
    m = tiny_moe(2, 1)
    for k, v in m.params.items():
        if k.startswith("experts."):
            v[1] = v[0]
    V = Rng(2).normal((5, 3))
    single = MoeModel({k: (v[:1] if k.startswith("experts.") else v)
                       for k, v in m.params.items()}, {})
    alone = single.mix(V[:, None], "prob")[1][3][:, 0, 0]
    assert np.allclose(moe_forward(V, m), alone, atol=1e-15)


def test_moe_three_experts_direct_sum_and_convexity():
    m = tiny_moe(3, 2)
    V = Rng(3).normal((6, 3))
    out = moe_forward(V, m)
    G = gating_weights(V, m)
    experts = []
    for i in range(3):
        one = MoeModel({k: (v[i:i + 1] if k.startswith("experts.") else v)
                        for k, v in m.params.items()}, {})
        experts.append(one.mix(V[:, None], "prob")[1][3][:, 0, 0])
    direct = sum(G[:, i:i + 1] * experts[i] for i in range(3))
    assert np.max(np.abs(out - direct)) < 1e-12
    stack = np.stack(experts)
    assert np.all(out >= stack.min(0) - 1e-15) and np.all(out <= stack.max(0) + 1e-15)


def test_gating_examples():
    m = MoeModel.init(3, L, 4, 2)
    for v in m.params.values():
        v[:] = 0
    V = Rng(4).normal((3, 3))
    assert np.allclose(gating_weights(V, m), 0.25, atol=1e-15)
    m = tiny_moe(4, 3)
    G = gating_weights(V, m)
    assert np.allclose(G.sum(axis=1), 1, atol=1e-12) and np.all(G > 0)
    m.params["gate.head.b"] += 2.5
    assert np.allclose(gating_weights(V, m), G, atol=1e-15)


def test_gating_matches_composition():
    m = tiny_moe(4, 5)
    V = Rng(6).normal((3, 3))
    Hg, _ = m.gate_forward(V[:, None])[1]
    ref = [softmax_vec(affine(m.params["gate.head.W"], Hg[t, 0], m.params["gate.head.b"]))
           for t in range(3)]
    assert np.max(np.abs(gating_weights(V, m) - np.array(ref))) < 1e-15


def test_expert_permutation_invariance():
    m = tiny_moe(3, 6)
    V = Rng(7).normal((5, 3))
    before = moe_forward(V, m)
    perm = [2, 0, 1]
    for k, v in m.params.items():
        if k.startswith("experts."):
            v[:] = v[perm]
    m.params["gate.head.W"][:] = m.params["gate.head.W"][perm]
    m.params["gate.head.b"][:] = m.params["gate.head.b"][perm]
    assert np.max(np.abs(moe_forward(V, m) - before)) < 1e-12


# -- residual combination ---------------------------------------------------

def _rmoe_with_outputs(ob, om):
    """R-MoE whose base and mixture emit constant probabilities ``ob``, ``om``."""
    base = BaseModel.init(E, 1, 3, 2)
    moe = MoeModel.init(3, 1, 1, 2)
    for m in (base, moe):
        for v in m.params.values():
            v[:] = 0
    logit = lambda p: math.log(p / (1 - p))
    base.params["head.b"][:] = logit(ob)
    moe.params["experts.head.b"][:] = logit(om)
    return RmoeModel(base, moe)


def test_rmoe_sum_and_clamp():
    w = windows(3)
    assert np.allclose(rmoe_predict(w, _rmoe_with_outputs(0.3, 0.2)), 0.5, atol=1e-15)
    assert np.all(rmoe_predict(w, _rmoe_with_outputs(0.9, 0.8)) == 1 - CLAMP)


def test_rmoe_saturated_experts_reduce_to_base():
    base = tiny_base(3)
    m = RmoeModel.init(base, 3, 2, seed=1)
    m.params["moe.experts.head.W"][:] = 0
    m.params["moe.experts.head.b"][:] = -30
    w = windows(7, 5)
    assert np.max(np.abs(rmoe_predict(w, m) - base_forward(w, base))) < 1e-3


def test_rmoe_predictions_stay_in_clamp_range():
    m = jitter(RmoeModel.init(tiny_base(4), 3, 2), 9, scale=3.0)
    P = rmoe_predict(windows(10, 1), m)
    assert np.all(P >= CLAMP) and np.all(P <= 1 - CLAMP)


def test_rmoe_shares_base_embedding_and_logit_mode():
    base = tiny_base(5)
    m = RmoeModel.init(base, 2, 2, combine="logit_sum")
    assert m.params["base.emb.W"] is base.params["emb.W"]
    m.params["moe.experts.head.W"][:] = 0
    m.params["moe.experts.head.b"][:] = 0
    w = windows(5, 2)
    assert np.allclose(rmoe_predict(w, m), base_forward(w, base), atol=1e-15)
    with pytest.raises(ValueError):
        RmoeModel(base, m.moe, combine="mean")


def test_freeze_excludes_base_from_trainable():
    m = RmoeModel.init(tiny_base(), 2, 2)
    assert m.frozen and all(n.startswith("moe.") for n in m.trainable())
    freeze_base(m)
    freeze_base(m)
    assert m.frozen
    m.unfreeze_base()
    assert any(n.startswith("base.") for n in m.trainable())


# -- gradients of full models ----------------------------------------------

def _batch(seed):
    seqs = [WindowedSequence(str(i), windows(2 + (i + seed) % 3, seed * 10 + i))
            for i in range(3)]
    return make_batch(seqs, list(range(L)))


@pytest.mark.parametrize("model_fn", [
    lambda: tiny_base(1),
    lambda: jitter(PlainMoeModel.init(E, L, 2, 3, emb_dim=3, seed=2), 3),
    lambda: jitter(RmoeModel.init(tiny_base(4), 2, 3, seed=4), 5, 0.3),
    lambda: jitter(RmoeModel.init(tiny_base(4), 2, 3, seed=4, combine="logit_sum"), 5, 0.3),
    lambda: jitter(LrModel.init(E, L), 6),
], ids=["base", "moe", "rmoe-prob", "rmoe-logit", "lr"])
def test_model_gradients(model_fn):
    m, batch = model_fn(), _batch(1)
    loss, grads = m.loss_and_grads(batch)
    names = m.trainable()
    assert set(grads) >= set(names)
    assert grad_check(lambda: m.loss(batch), m.params, grads, names=names) < 1e-4


def test_unfrozen_rmoe_gradients_reach_base():
    m = jitter(RmoeModel.init(tiny_base(2), 2, 2, seed=3), 4, 0.3)
    m.unfreeze_base()
    batch = _batch(2)
    _, grads = m.loss_and_grads(batch)
    assert "base.emb.W" in grads
    assert grad_check(lambda: m.loss(batch), m.params, grads, names=m.trainable()) < 1e-4


# -- logistic regression ---------------------------------------------------

def test_lr_examples():
    m = LrModel.init(E, L)
    w = windows(6, 2)
    assert np.array_equal(lr_forward(w, m, 3), np.full(L, 0.5))
    m = jitter(m, 1)
    hist = np.zeros((4, E), dtype=np.uint8)
    hist[:, 0] = 1
    hist[1, 2] = 1
    before = lr_forward(hist, m, 4)
    m.params["W"][:, 4] += 10.0          # event 4 never occurs
    assert np.array_equal(lr_forward(hist, m, 4), before)
    once = hist.copy()
    once[1:, 0] = 0                       # event 0 seen once instead of four times
    assert np.array_equal(lr_forward(once, m, 4), before)
    with pytest.raises(ValueError):
        lr_forward(hist, m, 0)


# -- checkpoints -----------------------------------------------------------

@pytest.mark.parametrize("model_fn", [
    lambda: tiny_base(1), lambda: LrModel.init(E, L),
    lambda: PlainMoeModel.init(E, L, 2, 3, emb_dim=3),
    lambda: RmoeModel.init(tiny_base(2), 3, 2, combine="logit_sum")])
def test_checkpoint_roundtrip_bit_exact(tmp_path, model_fn):
    m = model_fn()
    save_checkpoint(tmp_path / "c.json", m, "abc", {"epoch": 3})
    back, vh, extra = load_checkpoint(tmp_path / "c.json")
    assert vh == "abc" and extra == {"epoch": 3} and back.kind == m.kind
    assert param_hash(back.params) == param_hash(m.params)
    assert back.state() == m.state()
    w = windows(5, 4)
    assert np.array_equal(back.predict_sequence(w), m.predict_sequence(w))
    save_checkpoint(tmp_path / "d.json", back, "abc", {"epoch": 3})
    assert (tmp_path / "c.json").read_bytes() == (tmp_path / "d.json").read_bytes()


def test_checkpoint_rejects_foreign_json(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.json")
