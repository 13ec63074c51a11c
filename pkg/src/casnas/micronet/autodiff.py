"""Tape-based reverse-mode differentiation over numpy arrays.

Each op computes its output eagerly and records a closure mapping the output
gradient to input gradients. ``Tape.backward`` replays the record in reverse;
because ops are appended in execution order the tape is already topologically
sorted. Activations use channels-last layout ``(batch, h, w, c)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class Var:
    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    def __init__(self):
        self._ops: list[tuple[Var, tuple[Var, ...], Callable]] = []

    def _record(self, out: np.ndarray, inputs: tuple[Var, ...], backward: Callable) -> Var:
        v = Var(out)
        self._ops.append((v, inputs, backward))
        return v

    def backward(self, loss: Var, seed: float = 1.0) -> None:
        loss.grad = np.full_like(loss.data, seed)
        for out, inputs, fn in reversed(self._ops):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for v, g in zip(inputs, grads):
                if g is None:
                    continue
                if v.grad is None:
                    v.grad = g
                else:
                    v.grad = v.grad + g

    # ------------------------------------------------------------------ #
    # parameter access

    def take(self, param: Var, index: tuple, scale: float = 1.0) -> Var:
        """Sub-tensor of a full-size parameter, optionally times a constant.

        The gradient is scattered back into a zero tensor of the full shape.
        """
        shape = param.data.shape
        sub = param.data[index]
        if scale != 1.0:
            sub = sub * sub.dtype.type(scale)

        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[index] = g if scale == 1.0 else g * g.dtype.type(scale)
            return (full,)

        return self._record(sub, (param,), bw)

    # ------------------------------------------------------------------ #
    # elementwise

    def add(self, a: Var, b: Var) -> Var:
        return self._record(a.data + b.data, (a, b), lambda g: (g, g))

    def affine(self, x: Var, scale: Var, bias: Var) -> Var:
        """Per-channel ``x * scale + bias`` over the last axis."""
        axes = tuple(range(x.data.ndim - 1))

        def bw(g):
            return g * scale.data, (g * x.data).sum(axis=axes), g.sum(axis=axes)

        return self._record(x.data * scale.data + bias.data, (x, scale, bias), bw)

    def hswish(self, x: Var) -> Var:
        """``x * relu6(x + 3) / 6``; derivative at the knots takes the right limit."""
        d = x.data
        out = d * np.clip(d + 3.0, 0.0, 6.0) / 6.0

        def bw(g):
            deriv = np.where(d < -3.0, 0.0, np.where(d < 3.0, (2.0 * d + 3.0) / 6.0, 1.0))
            return (g * deriv.astype(d.dtype),)

        return self._record(out, (x,), bw)

    def relu(self, x: Var) -> Var:
        mask = x.data >= 0
        return self._record(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,),
                            lambda g: (g * mask,))

    def hsigmoid(self, x: Var) -> Var:
        d = x.data
        mask = (d >= -3.0) & (d < 3.0)
        return self._record(np.clip(d + 3.0, 0.0, 6.0) / 6.0, (x,), lambda g: (g * mask / 6.0,))

    def channel_gate(self, x: Var, s: Var) -> Var:
        """Scale an NHWC map by per-sample channel weights ``s`` of shape (B, C)."""
        sb = s.data[:, None, None, :]

        def bw(g):
            return g * sb, (g * x.data).sum(axis=(1, 2))

        return self._record(x.data * sb, (x, s), bw)

    # ------------------------------------------------------------------ #
    # reductions and reshapes

    def spatial_mean(self, x: Var) -> Var:
        """Mean over the spatial (or token) axes, keeping batch and channels."""
        axes = tuple(range(1, x.data.ndim - 1))
        n = int(np.prod([x.data.shape[a] for a in axes]))
        shape = x.data.shape

        def bw(g):
            return (np.broadcast_to(g.reshape(g.shape[0], *([1] * len(axes)), g.shape[-1]) / n,
                                    shape).copy(),)

        return self._record(x.data.mean(axis=axes), (x,), bw)

    def reshape(self, x: Var, shape: tuple) -> Var:
        old = x.data.shape
        return self._record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))

    # ------------------------------------------------------------------ #
    # linear algebra

    def linear(self, x: Var, w: Var, b: Var | None = None) -> Var:
        """``x @ w.T (+ b)`` over the last axis; ``w`` has shape (out, in)."""
        x2 = x.data.reshape(-1, x.data.shape[-1])
        out = x2 @ w.data.T
        if b is not None:
            out = out + b.data
        out = out.reshape(*x.data.shape[:-1], w.data.shape[0])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            gx = (g2 @ w.data).reshape(x.data.shape)
            gw = g2.T @ x2
            if b is None:
                return gx, gw
            return gx, gw, g2.sum(axis=0)

        inputs = (x, w) if b is None else (x, w, b)
        return self._record(out, inputs, bw)

    def conv2d(self, x: Var, w: Var, stride: int) -> Var:
        """Dense 'same' convolution. ``x``: (B,H,W,Cin); ``w``: (Cout,Cin,k,k)."""
        k = w.data.shape[-1]
        pad = k // 2
        xb, h, wd, cin = x.data.shape
        ho, wo = -(-h // stride), -(-wd // stride)
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        cols = np.empty((xb, ho, wo, k, k, cin), dtype=x.data.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
        wmat = w.data.transpose(0, 2, 3, 1).reshape(w.data.shape[0], -1)
        cols2 = cols.reshape(xb * ho * wo, -1)
        out = (cols2 @ wmat.T).reshape(xb, ho, wo, -1)

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            gw = (g2.T @ cols2).reshape(w.data.shape[0], k, k, cin).transpose(0, 3, 1, 2)
            gcols = (g2 @ wmat).reshape(xb, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            return gxp[:, pad:pad + h, pad:pad + wd, :], gw

        return self._record(out, (x, w), bw)

    def depthwise(self, x: Var, w: Var, stride: int) -> Var:
        """Depthwise 'same' convolution. ``x``: (B,H,W,C); ``w``: (C,k,k)."""
        k = w.data.shape[-1]
        pad = k // 2
        xb, h, wd, c = x.data.shape
        ho, wo = -(-h // stride), -(-wd // stride)
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        out = np.zeros((xb, ho, wo, c), dtype=x.data.dtype)
        tmp = np.empty_like(out)
        wins = [[xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for j in range(k)]
                for i in range(k)]
        for i in range(k):
            for j in range(k):
                np.multiply(wins[i][j], w.data[:, i, j], out=tmp)
                out += tmp

        def bw(g):
            gxp = np.zeros_like(xp)
            g2 = g.reshape(-1, c)
            gw = np.empty_like(w.data)
            for i in range(k):
                for j in range(k):
                    gw[:, i, j] = np.einsum("nc,nc->c", g2, wins[i][j].reshape(-1, c))
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g * w.data[:, i, j]
            return gxp[:, pad:pad + h, pad:pad + wd, :], gw

        return self._record(out, (x, w), bw)

    def attention(self, q: Var, k: Var, v: Var, scale: float) -> Var:
        """Per-head softmax attention.

        ``q``, ``k``: (B, T, H, dq); ``v``: (B, T, H, dv). Returns (B, T, H*dv).
        """
        qd, kd, vd = q.data, k.data, v.data
        scores = np.einsum("bthd,bshd->bhts", qd, kd) * scale
        scores = scores - scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        ctx = np.einsum("bhts,bshd->bthd", p, vd)
        b, t, nh, dv = ctx.shape

        def bw(g):
            g4 = g.reshape(b, t, nh, dv)
            gp = np.einsum("bthd,bshd->bhts", g4, vd)
            gv = np.einsum("bhts,bthd->bshd", p, g4)
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
            gq = np.einsum("bhts,bshd->bthd", gs, kd)
            gk = np.einsum("bhts,bthd->bshd", gs, qd)
            return gq, gk, gv

        return self._record(ctx.reshape(b, t, nh * dv), (q, k, v), bw)

    def cross_entropy(self, logits: Var, labels: np.ndarray) -> Var:
        """Mean cross-entropy over the batch with a max-shifted log-softmax."""
        z = logits.data
        shifted = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logsum
        n = z.shape[0]
        loss = -logp[np.arange(n), labels].mean()

        def bw(g):
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            return (p * (g / n),)

        return self._record(np.asarray(loss, dtype=z.dtype), (logits,), bw)
