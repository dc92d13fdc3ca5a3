"""Layers used by the scene model, written as functions over a parameter registry."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .params import ModelParams


def conv_gn_relu(x: Tensor, p: ModelParams, prefix: str, groups: int) -> Tensor:
    y = ag.conv2d(x, p[f"{prefix}.w"], p[f"{prefix}.b"])
    y = ag.group_norm(y, groups, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])
    return ag.relu(y)


def lstm_gates(gates: Tensor, c_prev: Tensor | None) -> tuple[Tensor, Tensor]:
    """Standard LSTM update from pre-activation gates ordered (input, forget, output, candidate)."""
    i, f, o, g = ag.split(gates, 4, axis=1)
    c = ag.sigmoid(i) * ag.tanh(g)
    if c_prev is not None:
        c = ag.sigmoid(f) * c_prev + c
    h = ag.sigmoid(o) * ag.tanh(c)
    return h, c


def conv_lstm_cell(x_gates: Tensor, h_prev: Tensor | None, c_prev: Tensor | None,
                   w_h: Tensor) -> tuple[Tensor, Tensor]:
    """One ConvLSTM layer given the input contribution ``W_x * x + b`` to its gates.

    ``None`` states stand for the zero initial state and skip the recurrent convolution.
    """
    gates = x_gates if h_prev is None else x_gates + ag.conv2d(h_prev, w_h)
    return lstm_gates(gates, c_prev)


def conv_lstm_step(x: Tensor, state, p: ModelParams):
    """Two stacked ConvLSTM layers on a full input image ``x`` of shape (N, C, H, W).

    ``state`` is ``[(h0, c0), (h1, c1)]`` (entries may be ``None`` at the first step).
    Layer 0's input kernel is stored split into map and actor parts; here they are
    concatenated so ``x`` is the composed map-then-actor image.
    """
    w0 = ag.concat([p["lstm0.w_map"], p["lstm0.w_actor"]], axis=1)
    (h0, c0), (h1, c1) = state
    h0, c0 = conv_lstm_cell(ag.conv2d(x, w0, p["lstm0.b"]), h0, c0, p["lstm0.w_h"])
    h1, c1 = conv_lstm_cell(ag.conv2d(h0, p["lstm1.w_x"], p["lstm1.b"]), h1, c1, p["lstm1.w_h"])
    return h1, [(h0, c0), (h1, c1)]


def linear(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return x @ p[f"{prefix}.w"] + p[f"{prefix}.b"]


def mlp3(x: Tensor, p: ModelParams, prefix: str, activation: str | None = None) -> Tensor:
    """Three linear layers with ReLU between them; optional output transform.

    ``activation`` is one of ``None`` (raw), ``"softmax"``, ``"log_softmax"``, ``"tanh"``
    or ``"biternion"`` (normalize consecutive pairs to unit length).
    """
    h = ag.relu(linear(x, p, f"{prefix}.0"))
    h = ag.relu(linear(h, p, f"{prefix}.1"))
    out = linear(h, p, f"{prefix}.2")
    if activation is None:
        return out
    if activation == "log_softmax":
        return ag.log_softmax(out, axis=-1)
    if activation == "softmax":
        return ag.exp(ag.log_softmax(out, axis=-1))
    if activation == "tanh":
        return ag.tanh(out)
    if activation == "biternion":
        pairs = out.reshape(out.shape[:-1] + (out.shape[-1] // 2, 2))
        norm = ag.exp(0.5 * ag.log((pairs * pairs).sum(axis=-1, keepdims=True)))
        return (pairs / norm).reshape(out.shape)
    raise ValueError(f"unknown activation {activation!r}")


def avg_pool_spatial(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    return ag.mean(x, axis=(2, 3))


def index_spatial(f: Tensor, rows, cols, steps=None) -> Tensor:
    """Feature vectors at given bins: (N, C, H, W) -> (B, C).

    ``steps`` selects the batch entry for each bin (default: entry 0 for all).
    Each (step, row, col) triple must be distinct.
    """
    n, c, h, w = f.shape
    rows = np.atleast_1d(np.asarray(rows, dtype=int))
    cols = np.atleast_1d(np.asarray(cols, dtype=int))
    steps = np.zeros_like(rows) if steps is None else np.atleast_1d(np.asarray(steps, dtype=int))
    if np.any((rows < 0) | (rows >= h) | (cols < 0) | (cols >= w) | (steps < 0) | (steps >= n)):
        raise ValueError("spatial index out of range")
    out = f.data[steps, :, rows, cols]

    def back(g):
        full = np.zeros_like(f.data)
        np.add.at(full, (steps, slice(None), rows, cols), g)
        f._accum(full)
    return Tensor._make(out, (f,), back)


def take_rows(x: Tensor, idx) -> Tensor:
    """``x[idx]`` along axis 0 for distinct indices (cheaper backward than generic indexing)."""
    idx = np.asarray(idx, dtype=int)

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accum(full)
    return Tensor._make(x.data[idx], (x,), back)


def unbind(x: Tensor) -> list[Tensor]:
    """Split along axis 0 into views whose gradients are gathered into one buffer."""
    n = x.shape[0]
    if not x.requires_grad or not ag._grad_enabled:
        return [Tensor(x.data[i:i + 1]) for i in range(n)]
    hub = Tensor(x.data)
    hub.requires_grad = True
    hub._parents = (x,)
    hub._backward = lambda g: x._accum(g)
    parts = []
    for i in range(n):
        def back(g, i=i):
            if hub.grad is None:
                hub.grad = np.zeros_like(x.data)
            hub.grad[i:i + 1] += g
        part = Tensor(x.data[i:i + 1])
        part.requires_grad = True
        part._parents = (hub,)
        part._backward = back
        parts.append(part)
    return parts
