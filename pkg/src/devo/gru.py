"""Single-layer GRU sequence classifier: forward pass and exact BPTT.

Parameters live in one flat float64 vector laid out as the blocks in
:func:`param_shapes`. The input at each step is the scalar signed length,
gates are ordered (update, reset, candidate) and the reset gate is applied
to the previous state before the recurrent matmul.
"""

from __future__ import annotations

import numpy as np

BLOCKS = ("w_in", "w_rec", "b_gate", "w_out", "b_out")


def param_shapes(hidden_dim: int, num_classes: int) -> dict[str, tuple[int, ...]]:
    h = hidden_dim
    return {
        "w_in": (1, 3 * h),
        "w_rec": (h, 3 * h),
        "b_gate": (3 * h,),
        "w_out": (h, num_classes),
        "b_out": (num_classes,),
    }


def param_count(hidden_dim: int, num_classes: int) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(hidden_dim, num_classes).values())


def unpack(flat: np.ndarray, hidden_dim: int, num_classes: int) -> dict[str, np.ndarray]:
    """Views into ``flat``; writing through them updates ``flat``."""
    out, pos = {}, 0
    for name, shape in param_shapes(hidden_dim, num_classes).items():
        n = int(np.prod(shape))
        out[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    if pos != flat.shape[0]:
        raise ValueError(f"expected {pos} parameters, got {flat.shape[0]}")
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(flat, X, hidden_dim, num_classes, keep_cache=False):
    p = unpack(flat, hidden_dim, num_classes)
    X = np.asarray(X, dtype=flat.dtype)
    n, steps = X.shape
    h_dim = hidden_dim
    w_in, w_rec, b = p["w_in"][0], p["w_rec"], p["b_gate"]
    u_zr, u_n = w_rec[:, :2 * h_dim], w_rec[:, 2 * h_dim:]
    h = np.zeros((n, h_dim), dtype=flat.dtype)
    cache = []
    for t in range(steps):
        a = X[:, t:t + 1] * w_in + b
        zr = _sigmoid(a[:, :2 * h_dim] + h @ u_zr)
        z, r = zr[:, :h_dim], zr[:, h_dim:]
        rh = r * h
        cand = np.tanh(a[:, 2 * h_dim:] + rh @ u_n)
        h_next = cand + z * (h - cand)
        if keep_cache:
            cache.append((h, z, r, rh, cand))
        h = h_next
    logits = h @ p["w_out"] + p["b_out"]
    return logits, (X, cache, h)


def loss_and_grad(flat, X, y, hidden_dim, num_classes):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``flat``."""
    logits, (X, cache, h_last) = forward(flat, X, hidden_dim, num_classes, keep_cache=True)
    n = X.shape[0]
    probs = softmax(logits)
    idx = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(probs[idx, y], np.finfo(probs.dtype).tiny))))

    p = unpack(flat, hidden_dim, num_classes)
    grad = np.zeros_like(flat)
    g = unpack(grad, hidden_dim, num_classes)
    h_dim = hidden_dim
    u_z = p["w_rec"][:, :h_dim]
    u_r = p["w_rec"][:, h_dim:2 * h_dim]
    u_n = p["w_rec"][:, 2 * h_dim:]
    d_logits = probs
    d_logits[idx, y] -= 1.0
    d_logits /= n
    g["w_out"][...] = h_last.T @ d_logits
    g["b_out"][...] = d_logits.sum(axis=0)
    dh = d_logits @ p["w_out"].T

    d_in = np.zeros((n, 3 * h_dim), dtype=flat.dtype)
    for t in range(len(cache) - 1, -1, -1):
        h_prev, z, r, rh, cand = cache[t]
        d_cand = dh * (1.0 - z)
        dz = dh * (h_prev - cand)
        dh_prev = dh * z
        da_n = d_cand * (1.0 - cand * cand)
        d_rh = da_n @ u_n.T
        dr = d_rh * h_prev
        dh_prev += d_rh * r
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        d_in[:, :h_dim] = da_z
        d_in[:, h_dim:2 * h_dim] = da_r
        d_in[:, 2 * h_dim:] = da_n
        g["w_rec"][:, :2 * h_dim] += h_prev.T @ d_in[:, :2 * h_dim]
        g["w_rec"][:, 2 * h_dim:] += rh.T @ da_n
        g["w_in"][0] += X[:, t] @ d_in
        g["b_gate"] += d_in.sum(axis=0)
        dh_prev += da_z @ u_z.T + da_r @ u_r.T
        dh = dh_prev
    return loss, grad
