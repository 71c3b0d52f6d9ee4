"""Predictors built from :mod:`rmoe.layers`.

Every model keeps its learnable tensors in one flat ``params`` dict with
dotted names (``"gru.W_r"``, ``"moe.experts.head.W"``, ...). ``forward``
takes the padded input tensor ``X`` of shape ``(T, B, |E|)`` and returns
probabilities ``(T, B, |E'|)`` plus a cache; ``backward`` maps the loss
gradient with respect to those probabilities to a gradient dict over the
trainable names.
"""
from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

from . import layers
from .tensor import Rng, glorot_init, seed_split, sigmoid, softmax

CLAMP = 1e-6
CHECKPOINT_FORMAT = "rmoe-checkpoint"
CHECKPOINT_VERSION = 1


def sub(params: dict, prefix: str) -> dict:
    """View of the entries under ``prefix.`` with the prefix stripped."""
    pre = prefix + "."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in d.items()}


def clamp(P: np.ndarray, eps: float = CLAMP):
    """Clip into ``[eps, 1 - eps]``; also returns the pass-through mask."""
    inside = (P > eps) & (P < 1.0 - eps)
    return np.clip(P, eps, 1.0 - eps), inside


def param_hash(params: dict, prefix: str | None = None) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        if prefix is not None and not name.startswith(prefix + "."):
            continue
        a = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _as_input(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, None, :]
    return X


class Model:
    kind = "model"

    def __init__(self, params: dict, hyper: dict):
        self.params = params
        self.hyper = dict(hyper)

    def trainable(self) -> list:
        return sorted(self.params)

    def predict(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def predict_sequence(self, windows) -> np.ndarray:
        """Predictions for steps ``1..T-1`` of one sequence, ``(T-1, |E'|)``."""
        windows = np.asarray(windows)
        if len(windows) < 2:
            raise ValueError("a sequence needs at least two windows to predict anything")
        return self.predict(windows[:-1])[:, 0]

    def loss_and_grads(self, batch):
        P, cache = self.forward(batch.X)
        loss, dP = layers.sequence_bce(P, batch.Y, batch.weights)
        return loss, self.backward(cache, dP)

    def loss(self, batch) -> float:
        P, _ = self.forward(batch.X)
        return layers.sequence_bce(P, batch.Y, batch.weights)[0]

    def state(self) -> dict:
        return {}


# -- base GRU --------------------------------------------------------------

class BaseModel(Model):
    """Embedding -> GRU -> sigmoid head."""

    kind = "base"

    @classmethod
    def init(cls, n_inputs: int, n_targets: int, emb_dim: int = 64, hidden: int = 512,
             seed: int = 0) -> "BaseModel":
        rng = Rng(seed_split(seed, 1))
        p = {"emb.W": glorot_init(n_inputs, emb_dim, rng)}
        p.update(prefixed("gru", layers.init_gru(emb_dim, hidden, rng)))
        p.update(prefixed("head", layers.init_head(hidden, n_targets, rng)))
        return cls(p, {"n_inputs": n_inputs, "n_targets": n_targets,
                       "emb_dim": emb_dim, "hidden": hidden})

    def embed(self, X) -> np.ndarray:
        return layers.embed_forward(X, self.params["emb.W"])

    def logits(self, X):
        X = _as_input(X)
        if X.shape[0] < 1:
            raise ValueError("need at least one input window")
        V = self.embed(X)
        H, tape = layers.gru_forward(V, sub(self.params, "gru"))
        Z = layers.head_forward(H, sub(self.params, "head"))
        return Z, (X, V, H, tape)

    def forward(self, X):
        Z, inner = self.logits(X)
        O = sigmoid(Z)
        P, inside = clamp(O)
        return P, (inner, O, inside)

    def backward_logits(self, inner, dZ, dV_extra=None) -> dict:
        X, V, H, tape = inner
        gh, dH = layers.head_backward(H, dZ, sub(self.params, "head"))
        gg, dV = layers.bptt_backward(tape, dH, sub(self.params, "gru"))
        if dV_extra is not None:
            dV = dV + dV_extra
        g = {"emb.W": layers.embed_backward(X, dV)}
        g.update(prefixed("gru", gg))
        g.update(prefixed("head", gh))
        return g

    def backward(self, cache, dP) -> dict:
        inner, O, inside = cache
        return self.backward_logits(inner, dP * inside * O * (1.0 - O))


# -- mixture of experts ----------------------------------------------------

class MoeModel(Model):
    """``n`` GRU experts and a GRU gate over an already-embedded input.

    With ``space="prob"`` the output is ``sum_i g_i * sigmoid(z_i)``; with
    ``space="logit"`` it is the gate-weighted sum of expert logits.
    """

    kind = "moe-core"

    @classmethod
    def init(cls, emb_dim: int, n_targets: int, n_experts: int, hidden: int,
             seed: int = 0) -> "MoeModel":
        if n_experts < 1:
            raise ValueError("a mixture needs at least one expert")
        rng = Rng(seed_split(seed, 2))
        p = {}
        p.update(prefixed("experts.gru", layers.init_gru(emb_dim, hidden, rng, stack=n_experts)))
        p.update(prefixed("experts.head",
                          layers.init_head(hidden, n_targets, rng, stack=n_experts)))
        p.update(prefixed("gate.gru", layers.init_gru(emb_dim, hidden, rng)))
        p.update(prefixed("gate.head", layers.init_head(hidden, n_experts, rng)))
        return cls(p, {"emb_dim": emb_dim, "n_targets": n_targets,
                       "n_experts": n_experts, "hidden": hidden})

    @property
    def n_experts(self) -> int:
        return self.params["experts.head.W"].shape[0]

    def gate_forward(self, V):
        Hg, tape = layers.gru_forward(V, sub(self.params, "gate.gru"))
        G = softmax(layers.head_forward(Hg, sub(self.params, "gate.head")))
        return G, (Hg, tape)

    def mix(self, V, space: str = "prob"):
        He, tape_e = layers.gru_forward(V, sub(self.params, "experts.gru"))
        Ze = layers.head_forward(He, sub(self.params, "experts.head"))  # (T,n,B,L)
        Oe = sigmoid(Ze) if space == "prob" else Ze
        G, gcache = self.gate_forward(V)                                # (T,B,n)
        Gt = G.transpose(0, 2, 1)[..., None]                           # (T,n,B,1)
        out = (Oe * Gt).sum(axis=1)
        return out, (V, He, tape_e, Oe, G, gcache, space)

    def mix_backward(self, cache, dOut):
        V, He, tape_e, Oe, G, (Hg, tape_g), space = cache
        dOe = dOut[:, None] * G.transpose(0, 2, 1)[..., None]
        dG = (dOut[:, None] * Oe).sum(axis=-1).transpose(0, 2, 1)
        dZe = dOe * Oe * (1.0 - Oe) if space == "prob" else dOe
        dZg = G * (dG - np.sum(G * dG, axis=-1, keepdims=True))
        g_eh, dHe = layers.head_backward(He, dZe, sub(self.params, "experts.head"))
        g_eg, dV_e = layers.bptt_backward(tape_e, dHe, sub(self.params, "experts.gru"))
        g_gh, dHg = layers.head_backward(Hg, dZg, sub(self.params, "gate.head"))
        g_gg, dV_g = layers.bptt_backward(tape_g, dHg, sub(self.params, "gate.gru"))
        g = {}
        g.update(prefixed("experts.head", g_eh))
        g.update(prefixed("experts.gru", g_eg))
        g.update(prefixed("gate.head", g_gh))
        g.update(prefixed("gate.gru", g_gg))
        return g, dV_e + dV_g

    def forward(self, V):
        return self.mix(V, "prob")

    def backward(self, cache, dOut):
        return self.mix_backward(cache, dOut)[0]


# -- residual mixture ------------------------------------------------------

class RmoeModel(Model):
    """Frozen base plus a mixture fitted to what the base leaves over.

    ``combine="prob_sum"`` returns ``clamp(o_base + o_moe)``;
    ``combine="logit_sum"`` returns ``clamp(sigmoid(z_base + sum_i g_i z_i))``.
    Experts and gate read the base model's embedding.
    """

    kind = "rmoe"

    def __init__(self, base: BaseModel, moe: MoeModel, combine: str = "prob_sum",
                 frozen: bool = True):
        if combine not in ("prob_sum", "logit_sum"):
            raise ValueError(f"unknown combine mode {combine!r}")
        if moe.hyper["emb_dim"] != base.hyper["emb_dim"] or \
                moe.hyper["n_targets"] != base.hyper["n_targets"]:
            raise ValueError("base and mixture dimensions disagree")
        self.base, self.moe = base, moe
        self.combine = combine
        self.frozen = frozen
        params = prefixed("base", base.params)
        params.update(prefixed("moe", moe.params))
        hyper = {"base": base.hyper, "moe": moe.hyper, "combine": combine}
        super().__init__(params, hyper)

    @classmethod
    def init(cls, base: BaseModel, n_experts: int, hidden: int, seed: int = 0,
             combine: str = "prob_sum") -> "RmoeModel":
        moe = MoeModel.init(base.hyper["emb_dim"], base.hyper["n_targets"], n_experts,
                            hidden, seed)
        model = cls(base, moe, combine, frozen=False)
        model.freeze_base()
        return model

    def freeze_base(self) -> None:
        self.frozen = True

    def unfreeze_base(self) -> None:
        self.frozen = False

    def trainable(self) -> list:
        names = sorted(self.params)
        return [n for n in names if n.startswith("moe.")] if self.frozen else names

    def base_hash(self) -> str:
        return param_hash(self.base.params)

    def forward(self, X):
        Zb, inner = self.base.logits(X)
        V = inner[1]
        if self.combine == "prob_sum":
            Ob = sigmoid(Zb)
            Om, mcache = self.moe.mix(V, "prob")
            S = Ob + Om
            P, inside = clamp(S)
            return P, (inner, Ob, mcache, S, inside)
        Sm, mcache = self.moe.mix(V, "logit")
        S = sigmoid(Zb + Sm)
        P, inside = clamp(S)
        return P, (inner, S, mcache, S, inside)

    def backward(self, cache, dP):
        inner, Ob, mcache, S, inside = cache
        dS = dP * inside
        if self.combine == "prob_sum":
            dMix, dZb = dS, dS * Ob * (1.0 - Ob)
        else:
            dMix = dZb = dS * S * (1.0 - S)
        gm, dV = self.moe.mix_backward(mcache, dMix)
        g = prefixed("moe", gm)
        if not self.frozen:
            g.update(prefixed("base", self.base.backward_logits(inner, dZb, dV)))
        return g

    def state(self) -> dict:
        return {"frozen": self.frozen, "combine": self.combine}


class PlainMoeModel(Model):
    """The mixture alone, with its own trainable embedding (ablation)."""

    kind = "moe"

    def __init__(self, params: dict, hyper: dict):
        super().__init__(params, hyper)
        self.moe = MoeModel(sub(params, "moe"), {k: hyper[k] for k in
                                                 ("emb_dim", "n_targets", "n_experts", "hidden")})

    @classmethod
    def init(cls, n_inputs: int, n_targets: int, n_experts: int, hidden: int,
             emb_dim: int = 64, seed: int = 0) -> "PlainMoeModel":
        rng = Rng(seed_split(seed, 3))
        p = {"emb.W": glorot_init(n_inputs, emb_dim, rng)}
        core = MoeModel.init(emb_dim, n_targets, n_experts, hidden, seed)
        p.update(prefixed("moe", core.params))
        return cls(p, {"n_inputs": n_inputs, **core.hyper})

    def forward(self, X):
        X = _as_input(X)
        V = layers.embed_forward(X, self.params["emb.W"])
        O, mcache = self.moe.mix(V, "prob")
        P, inside = clamp(O)
        return P, (X, mcache, inside)

    def backward(self, cache, dP):
        X, mcache, inside = cache
        gm, dV = self.moe.mix_backward(mcache, dP * inside)
        g = prefixed("moe", gm)
        g["emb.W"] = layers.embed_backward(X, dV)
        return g


class LrModel(Model):
    """Logistic regression on the OR of every window seen so far."""

    kind = "lr"

    @classmethod
    def init(cls, n_inputs: int, n_targets: int, seed: int = 0) -> "LrModel":
        return cls({"W": np.zeros((n_targets, n_inputs)), "b": np.zeros(n_targets)},
                   {"n_inputs": n_inputs, "n_targets": n_targets})

    def forward(self, X):
        X = _as_input(X)
        layers.check_binary(X)
        A = np.maximum.accumulate(X, axis=0)
        O = sigmoid(A @ self.params["W"].T + self.params["b"])
        P, inside = clamp(O)
        return P, (A, O, inside)

    def backward(self, cache, dP):
        A, O, inside = cache
        dZ = dP * inside * O * (1.0 - O)
        L, E = dZ.shape[-1], A.shape[-1]
        return {"W": dZ.reshape(-1, L).T @ A.reshape(-1, E), "b": dZ.reshape(-1, L).sum(axis=0)}


# -- operation-level helpers -----------------------------------------------

def base_forward(windows, m: BaseModel) -> np.ndarray:
    return m.predict_sequence(windows)


def moe_forward(V, m: MoeModel) -> np.ndarray:
    """Mixture output for embedded inputs ``V`` of shape ``(T, |emb|)`` or ``(T, B, |emb|)``."""
    V = np.asarray(V, dtype=np.float64)
    squeeze = V.ndim == 2
    out = m.mix(V[:, None] if squeeze else V, "prob")[0]
    return out[:, 0] if squeeze else out


def gating_weights(V, m: MoeModel) -> np.ndarray:
    """Gate distribution at every step of ``V`` (``(T, |emb|)`` -> ``(T, n)``)."""
    V = np.asarray(V, dtype=np.float64)
    squeeze = V.ndim == 2
    G = m.gate_forward(V[:, None] if squeeze else V)[0]
    return G[:, 0] if squeeze else G


def rmoe_predict(windows, m: RmoeModel) -> np.ndarray:
    return m.predict_sequence(windows)


def lr_forward(windows, m: LrModel, t: int) -> np.ndarray:
    """Prediction for window ``t + 1`` given windows ``1..t`` (1-based ``t``)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    return m.predict(np.asarray(windows)[:t])[t - 1, 0]


def freeze_base(m: RmoeModel) -> None:
    m.freeze_base()


# -- checkpoints -----------------------------------------------------------

def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8",
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=obj.get("dtype", "<f8")).astype(np.float64).reshape(obj["shape"])


def save_checkpoint(path, model: Model, vocab_hash: str, extra: dict | None = None) -> None:
    """Write one JSON document: kind, hyperparameters, state flags and tensors.

    Tensors are little-endian float64 bytes in base64, so loading is bit-exact.
    """
    doc = {"format": CHECKPOINT_FORMAT, "format_version": CHECKPOINT_VERSION,
           "kind": model.kind, "vocab_hash": vocab_hash, "hyper": model.hyper,
           "state": model.state(), "extra": extra or {},
           "tensors": {k: _encode(v) for k, v in sorted(model.params.items())}}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path):
    """Returns ``(model, vocab_hash, extra)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")
    params = {k: _decode(v) for k, v in doc["tensors"].items()}
    kind, hyper, state = doc["kind"], doc["hyper"], doc.get("state", {})
    if kind == "base":
        model = BaseModel(params, hyper)
    elif kind == "lr":
        model = LrModel(params, hyper)
    elif kind == "moe":
        model = PlainMoeModel(params, hyper)
    elif kind == "rmoe":
        base = BaseModel(sub(params, "base"), hyper["base"])
        moe = MoeModel(sub(params, "moe"), hyper["moe"])
        model = RmoeModel(base, moe, state.get("combine", hyper.get("combine", "prob_sum")),
                          state.get("frozen", True))
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    return model, doc["vocab_hash"], doc.get("extra", {})
