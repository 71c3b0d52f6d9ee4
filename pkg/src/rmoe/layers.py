"""Differentiable building blocks with hand-written gradients.

Shapes used throughout (``T`` time steps, ``B`` sequences, ``S`` stacked
networks sharing one input, ``E`` input events, ``L`` target events)::

    embedded inputs  V : (T, B, emb)
    GRU states       H : (T, B, d)          single network
                         (T, S, B, d)       S networks run side by side

A GRU parameter dict holds ``W_r, W_z, W_c`` (d x emb), ``U_r, U_z, U_c``
(d x d) and ``b_r, b_z, b_c`` (d). A stacked dict prepends an ``S`` axis to
every entry. The cell follows the original Cho et al. form::

    r = sigmoid(W_r v + U_r h + b_r)
    z = sigmoid(W_z v + U_z h + b_z)
    c = tanh(W_c v + U_c (r * h) + b_c)
    h' = (1 - z) * h + z * c
"""
from __future__ import annotations

import numpy as np

from .tensor import Rng, glorot_init, sigmoid

GATES = ("r", "z", "c")
GRU_KEYS = tuple(f"{k}_{g}" for k in ("W", "U", "b") for g in GATES)


def check_binary(y: np.ndarray) -> None:
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("event vectors must be binary (entries in {0, 1})")


# -- embedding -------------------------------------------------------------

def embed_forward(y: np.ndarray, W_emb: np.ndarray) -> np.ndarray:
    """Sum of the embedding rows selected by the set bits of ``y``.

    ``W_emb`` is ``|E| x emb``; ``y`` may carry leading batch axes.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != W_emb.shape[0]:
        raise ValueError(f"embedding expects {W_emb.shape[0]} events, got {y.shape}")
    check_binary(y)
    return y @ W_emb


def embed_backward(y: np.ndarray, dV: np.ndarray) -> np.ndarray:
    E, k = y.shape[-1], dV.shape[-1]
    return y.reshape(-1, E).T @ dV.reshape(-1, k)


# -- GRU -------------------------------------------------------------------

def init_gru(input_dim: int, hidden: int, rng: Rng, stack: int | None = None) -> dict:
    """Glorot weights, zero biases; ``stack`` builds that many independent cells."""
    def mat(rows, cols):
        if stack is None:
            return glorot_init(rows, cols, rng)
        return np.stack([glorot_init(rows, cols, rng) for _ in range(stack)])

    bias_shape = (hidden,) if stack is None else (stack, hidden)
    p = {}
    for g in GATES:
        p[f"W_{g}"] = mat(hidden, input_dim)
    for g in GATES:
        p[f"U_{g}"] = mat(hidden, hidden)
    for g in GATES:
        p[f"b_{g}"] = np.zeros(bias_shape)
    return p


def gru_dims(p: dict) -> tuple[int | None, int, int]:
    """Return ``(stack, hidden, input_dim)`` of a GRU dict, checking consistency."""
    W = p["W_r"]
    stack = W.shape[0] if W.ndim == 3 else None
    d, k = W.shape[-2:]
    lead = () if stack is None else (stack,)
    for g in GATES:
        for key, shape in ((f"W_{g}", (d, k)), (f"U_{g}", (d, d)), (f"b_{g}", (d,))):
            if p[key].shape != lead + shape:
                raise ValueError(f"GRU parameter {key} has shape {p[key].shape}, "
                                 f"expected {lead + shape}")
    return stack, d, k


def gru_cell_forward(h_prev: np.ndarray, v: np.ndarray, p: dict):
    """One unstacked GRU step. Returns ``(h, cache)``."""
    _, d, k = gru_dims(p)
    if h_prev.shape[-1] != d or v.shape[-1] != k:
        raise ValueError(f"GRU cell expects h{(d,)} and v{(k,)}, got h{h_prev.shape} v{v.shape}")
    r = sigmoid(v @ p["W_r"].T + h_prev @ p["U_r"].T + p["b_r"])
    z = sigmoid(v @ p["W_z"].T + h_prev @ p["U_z"].T + p["b_z"])
    rh = r * h_prev
    c = np.tanh(v @ p["W_c"].T + rh @ p["U_c"].T + p["b_c"])
    h = (1.0 - z) * h_prev + z * c
    return h, (v, h_prev, r, z, c, rh)


def gru_cell_backward(dh: np.ndarray, cache, p: dict, grads: dict):
    """Backprop one unstacked step, accumulating into ``grads``.

    Returns ``(dh_prev, dv)``.
    """
    v, h_prev, r, z, c, rh = cache
    dac = dh * z * (1.0 - c * c)
    daz = dh * (c - h_prev) * z * (1.0 - z)
    drh = dac @ p["U_c"]
    dar = drh * h_prev * r * (1.0 - r)
    dh_prev = dh * (1.0 - z) + drh * r + daz @ p["U_z"] + dar @ p["U_r"]
    dv = dac @ p["W_c"] + daz @ p["W_z"] + dar @ p["W_r"]
    v2, h2, rh2 = np.atleast_2d(v), np.atleast_2d(h_prev), np.atleast_2d(rh)
    for g, da, hin in (("r", dar, h2), ("z", daz, h2), ("c", dac, rh2)):
        da2 = np.atleast_2d(da)
        grads[f"W_{g}"] += da2.T @ v2
        grads[f"U_{g}"] += da2.T @ hin
        grads[f"b_{g}"] += da2.sum(axis=0)
    return dh_prev, dv


class GruTape:
    """Activations stored by :func:`gru_forward` for the backward pass."""

    __slots__ = ("V", "H_prev", "R", "Z", "C", "RH", "stacked")

    def __init__(self, V, H_prev, R, Z, C, RH, stacked):
        self.V, self.H_prev, self.R, self.Z, self.C, self.RH = V, H_prev, R, Z, C, RH
        self.stacked = stacked

    def __len__(self):
        return self.V.shape[0]


def _as_stack(p: dict):
    """View any GRU dict as stacked: W (S,d,k), U (S,d,d), b (S,1,d)."""
    stack, _, _ = gru_dims(p)
    out = {}
    for key in GRU_KEYS:
        a = p[key]
        if stack is None:
            a = a[None]
        if key.startswith("b"):
            a = a[:, None, :]
        out[key] = a
    return out, stack is not None


def gru_forward(V: np.ndarray, p: dict):
    """Run a GRU (or a stack of GRUs) over ``V`` of shape ``(T, B, k)``.

    The initial state is zero. Returns the states ``H`` of shape
    ``(T, B, d)`` or ``(T, S, B, d)`` and a :class:`GruTape`.
    """
    q, stacked = _as_stack(p)
    T, B, k = V.shape
    S, d, k2 = q["W_r"].shape
    if k != k2:
        raise ValueError(f"GRU input width {k2}, got inputs of shape {V.shape}")
    Vx = V[:, None]                      # (T,1,B,k)
    XR = Vx @ q["W_r"].transpose(0, 2, 1) + q["b_r"]
    XZ = Vx @ q["W_z"].transpose(0, 2, 1) + q["b_z"]
    XC = Vx @ q["W_c"].transpose(0, 2, 1) + q["b_c"]
    UrT = q["U_r"].transpose(0, 2, 1)
    UzT = q["U_z"].transpose(0, 2, 1)
    UcT = q["U_c"].transpose(0, 2, 1)
    shape = (T, S, B, d)
    H_prev, R, Z, C, RH, H = (np.empty(shape) for _ in range(6))
    h = np.zeros((S, B, d))
    for t in range(T):
        H_prev[t] = h
        r = sigmoid(XR[t] + h @ UrT)
        z = sigmoid(XZ[t] + h @ UzT)
        rh = r * h
        c = np.tanh(XC[t] + rh @ UcT)
        h = h + z * (c - h)
        R[t], Z[t], C[t], RH[t], H[t] = r, z, c, rh, h
    tape = GruTape(V, H_prev, R, Z, C, RH, stacked)
    return (H if stacked else H[:, 0]), tape


def bptt_backward(tape: GruTape, dH: np.ndarray, p: dict):
    """Exact gradients of a loss through the whole sequence.

    ``dH`` is the loss gradient with respect to every state returned by
    :func:`gru_forward`. Returns ``(grads, dV)`` where ``grads`` has the
    same keys and shapes as ``p``.
    """
    q, stacked = _as_stack(p)
    if len(dH) != len(tape):
        raise ValueError(f"tape has {len(tape)} steps but {len(dH)} output gradients given")
    if not stacked:
        dH = dH[:, None]
    if dH.shape != tape.H_prev.shape:
        raise ValueError(f"output gradient shape {dH.shape} != state shape {tape.H_prev.shape}")
    T = len(tape)
    dAR, dAZ, dAC = (np.empty_like(dH) for _ in range(3))
    Ur, Uz, Uc = q["U_r"], q["U_z"], q["U_c"]
    dh = np.zeros_like(dH[0])
    for t in range(T - 1, -1, -1):
        dh = dh + dH[t]
        hp, r, z, c = tape.H_prev[t], tape.R[t], tape.Z[t], tape.C[t]
        dac = dh * z * (1.0 - c * c)
        daz = dh * (c - hp) * z * (1.0 - z)
        drh = dac @ Uc
        dar = drh * hp * r * (1.0 - r)
        dh = dh * (1.0 - z) + drh * r + daz @ Uz + dar @ Ur
        dAR[t], dAZ[t], dAC[t] = dar, daz, dac

    S, d = dH.shape[1], dH.shape[3]
    V2 = tape.V.reshape(-1, tape.V.shape[-1])                      # (T*B, k)

    def flat(A):                                                   # (S, d, T*B)
        return A.transpose(1, 3, 0, 2).reshape(S, A.shape[3], -1)

    def rows(A):                                                   # (S, T*B, d)
        return A.transpose(1, 0, 2, 3).reshape(S, -1, A.shape[3])

    g = {}
    dV = 0.0
    for gate, dA, Hin in (("r", dAR, tape.H_prev), ("z", dAZ, tape.H_prev), ("c", dAC, tape.RH)):
        fA = flat(dA)
        g[f"W_{gate}"] = fA @ V2
        g[f"U_{gate}"] = fA @ rows(Hin)
        g[f"b_{gate}"] = fA.sum(axis=2)
        dV = dV + (rows(dA) @ q[f"W_{gate}"]).sum(axis=0)
    dV = dV.reshape(tape.V.shape)
    if not stacked:
        g = {k: v[0] for k, v in g.items()}
    return g, dV


# -- output head -----------------------------------------------------------

def init_head(hidden: int, out: int, rng: Rng, stack: int | None = None) -> dict:
    if stack is None:
        return {"W": glorot_init(out, hidden, rng), "b": np.zeros(out)}
    return {"W": np.stack([glorot_init(out, hidden, rng) for _ in range(stack)]),
            "b": np.zeros((stack, out))}


def head_forward(H: np.ndarray, p: dict) -> np.ndarray:
    """Affine readout ``W h + b`` (pre-activation) at every step."""
    W, b = p["W"], p["b"]
    if H.shape[-1] != W.shape[-1]:
        raise ValueError(f"head expects width {W.shape[-1]}, got states {H.shape}")
    if W.ndim == 2:
        return H @ W.T + b
    return H @ W.transpose(0, 2, 1) + b[:, None, :]


def head_backward(H: np.ndarray, dZ: np.ndarray, p: dict):
    W = p["W"]
    if W.ndim == 2:
        d, L = H.shape[-1], dZ.shape[-1]
        g = {"W": dZ.reshape(-1, L).T @ H.reshape(-1, d), "b": dZ.reshape(-1, L).sum(axis=0)}
        return g, dZ @ W
    S, L, d = W.shape
    fZ = dZ.transpose(1, 3, 0, 2).reshape(S, L, -1)
    g = {"W": fZ @ H.transpose(1, 0, 2, 3).reshape(S, -1, d), "b": fZ.sum(axis=2)}
    return g, dZ @ W


# -- loss ------------------------------------------------------------------

def bce_loss(pred: np.ndarray, target: np.ndarray):
    """Mean binary cross entropy over one prediction vector and its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"bce_loss: pred {pred.shape} vs target {target.shape}")
    L = pred.shape[-1]
    loss = -np.mean(target * np.log(pred) + (1.0 - target) * np.log1p(-pred))
    grad = (pred - target) / (pred * (1.0 - pred)) / L
    return float(loss), grad


def sequence_bce(P: np.ndarray, Y: np.ndarray, weights: np.ndarray):
    """Weighted sum over steps of per-step mean BCE.

    ``P`` and ``Y`` are ``(T, B, L)``; ``weights`` is ``(T, B)`` and is zero
    on padded steps.
    """
    L = P.shape[-1]
    ce = -(Y * np.log(P) + (1.0 - Y) * np.log1p(-P))
    loss = float(np.sum(weights * ce.mean(axis=-1)))
    grad = (weights[..., None] / L) * (P - Y) / (P * (1.0 - P))
    return loss, grad


# -- gradient checking -----------------------------------------------------

def grad_errors(loss_fn, params: dict, grads: dict, h: float = 1e-5,
                names=None) -> dict:
    """Central-difference check of ``grads`` against ``loss_fn()``.

    ``loss_fn`` must read the arrays in ``params`` in place. For each tensor
    the error is ``max|a - n| / max(max|a|, max|n|, 1e-8)``.
    """
    errors = {}
    for name in names if names is not None else params:
        theta = params[name]
        num = np.zeros_like(theta)
        flat, nflat = theta.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            nflat[i] = (up - down) / (2.0 * h)
        a = np.asarray(grads[name], dtype=np.float64)
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(num), initial=0.0), 1e-8)
        errors[name] = float(np.max(np.abs(a - num), initial=0.0) / scale)
    return errors


def grad_check(loss_fn, params: dict, grads: dict, h: float = 1e-5, names=None) -> float:
    """Worst relative error over all checked tensors (see :func:`grad_errors`)."""
    return max(grad_errors(loss_fn, params, grads, h, names).values(), default=0.0)


__all__ = [
    "embed_forward", "embed_backward", "init_gru", "gru_dims", "gru_cell_forward",
    "gru_cell_backward", "gru_forward", "bptt_backward", "GruTape", "init_head",
    "head_forward", "head_backward", "bce_loss", "sequence_bce", "grad_check",
    "grad_errors",
]
