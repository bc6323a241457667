"""Reverse-mode automatic differentiation on dense float64 arrays.

The engine is a Wengert list: every differentiable operation executed while a
:class:`Tape` is active appends one node, and ``backward`` replays the nodes
in reverse construction order. Operations accept either unbatched arrays
(``H x W x C`` maps, ``D`` vectors) or the same shapes with one leading batch
axis; gradients follow whichever rank was given.

Everything is 64-bit. There is no broadcasting beyond the channel-gating rule
of :func:`scale_channels`, no views into tensors, and no in-place mutation of
tensor data outside :class:`Optimizer.step`.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import _kernels

DTYPE = np.float64


class Tensor:
    """A float64 array plus gradient bookkeeping.

    ``grad`` is populated by ``backward`` for every tensor with
    ``requires_grad`` that the loss reaches; ``node_id`` is the position of
    the producing node on the active tape (None for leaves).
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path for op outputs; skips the finiteness scan.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node_id = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Node:
    """One recorded operation: output, grad-receiving parents, pullback."""

    __slots__ = ("op", "output", "parents", "backward")

    def __init__(self, op: str, output: Tensor, parents: tuple[Tensor, ...],
                 backward: Callable[[np.ndarray], tuple]):
        self.op = op
        self.output = output
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of operations; topological by construction.

    One tape (and the tensors flowing through it) belongs to a single thread
    of control for the duration of a forward/backward pair.
    """

    _current: "Tape | None" = None

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if Tape._current is not None:
            raise RuntimeError("a tape is already active")
        Tape._current = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._current = None

    def backward(self, loss: Tensor) -> None:
        """Accumulate dloss/dx into ``x.grad`` for every requires_grad tensor.

        Visits every node exactly once, in reverse construction order.
        """
        if loss.data.shape != ():
            raise ValueError("backward requires a scalar loss")
        pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
        leaves: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            leaves.pop(id(node.output), None)
            if g is None:
                continue
            if node.output.requires_grad:
                out = node.output
                out.grad = g if out.grad is None else out.grad + g
            for parent, gin in zip(node.parents, node.backward(g)):
                if gin is None or not parent.requires_grad:
                    continue
                acc = pending.get(id(parent))
                pending[id(parent)] = gin if acc is None else acc + gin
                leaves[id(parent)] = parent
        for t in leaves.values():
            g = pending.get(id(t))
            if g is not None and t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Run the active tape's backward pass from a scalar loss."""
    if Tape._current is None:
        raise RuntimeError("backward requires an active tape")
    Tape._current.backward(loss)


def _push(op: str, out: Tensor, parents: tuple[Tensor, ...], bwd) -> None:
    tape = Tape._current
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        tape.nodes.append(Node(op, out, parents, bwd))


# ---------------------------------------------------------------------------
# initialization


def xavier_init(shape: Sequence[int], fan_in: int, fan_out: int, seed: int) -> Tensor:
    """Uniform init on [-b, b] with b = sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"extents must be positive, got {shape}")
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    out = Tensor._wrap(y, x.requires_grad)
    if Tape._current is not None and x.requires_grad:
        mask = x.data > 0.0  # subgradient at 0 is 0
        _push("relu", out, (x,), lambda g: (g * mask,))
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor._wrap(y, x.requires_grad)
    _push("sigmoid", out, (x,), lambda g: (g * y * (1.0 - y),))
    return out


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply an ``... x H x W x C`` map by a per-channel ``... x C`` gate.

    This is the only broadcast the engine performs: the gate is expanded over
    the two spatial axes. Any other shape combination is rejected.
    """
    xd, gd = x.data, gate.data
    if xd.ndim < 3 or gd.shape != xd.shape[:-3] + xd.shape[-1:]:
        raise ValueError(
            f"cannot gate map of shape {xd.shape} with vector of shape {gd.shape}")
    gexp = gd[..., None, None, :]
    out = Tensor._wrap(xd * gexp, x.requires_grad or gate.requires_grad)

    def bwd(g):
        gx = g * gexp if x.requires_grad else None
        gg = (g * xd).sum(axis=(-3, -2)) if gate.requires_grad else None
        return gx, gg

    _push("scale_channels", out, (x, gate), bwd)
    return out


# ---------------------------------------------------------------------------
# linear layers


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``y = x @ W + b`` for a length-D vector or a batch of them."""
    xd, wd, bd = x.data, weights.data, bias.data
    if xd.ndim not in (1, 2) or wd.ndim != 2 or bd.ndim != 1:
        raise ValueError("fully_connected expects (B,)D input, DxM weights, M bias")
    if xd.shape[-1] != wd.shape[0] or wd.shape[1] != bd.shape[0]:
        raise ValueError(
            f"dimension mismatch: input {xd.shape}, weights {wd.shape}, bias {bd.shape}")
    out = Tensor._wrap(xd @ wd + bd, x.requires_grad or weights.requires_grad
                       or bias.requires_grad)

    def bwd(g):
        gx = g @ wd.T if x.requires_grad else None
        if weights.requires_grad:
            gw = np.outer(xd, g) if xd.ndim == 1 else xd.T @ g
        else:
            gw = None
        gb = (g if g.ndim == 1 else g.sum(axis=0)) if bias.requires_grad else None
        return gx, gw, gb

    _push("fully_connected", out, (x, weights, bias), bwd)
    return out


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an ``(B,)H x W x Cin`` map with k x k x Cin x Cout kernels.

    Output extent is floor((H + 2*padding - k) / stride) + 1 per spatial axis.
    The forward pass and the kernel gradient run as compiled direct loops;
    the input gradient is one GEMM folded back with a compiled scatter-add.
    """
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    xd = x.data
    batched = xd.ndim == 4
    if not batched:
        if xd.ndim != 3:
            raise ValueError(f"conv2d input must be 3- or 4-dimensional, got {xd.shape}")
        xd = xd[None]
    kd, bd = kernels.data, bias.data
    if kd.ndim != 4 or kd.shape[0] != kd.shape[1]:
        raise ValueError(f"kernels must be k x k x Cin x Cout, got {kd.shape}")
    k, _, cin, cout = kd.shape
    B, H, W, c = xd.shape
    if c != cin:
        raise ValueError(f"input has {c} channels but kernels expect {cin}")
    if bd.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bd.shape}")
    if k > H + 2 * padding or k > W + 2 * padding:
        raise ValueError("kernel does not fit inside the padded input")

    ho = (H + 2 * padding - k) // stride + 1
    wo = (W + 2 * padding - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) \
        if padding else xd
    xp = np.ascontiguousarray(xp)
    y = _kernels.conv_forward(xp, np.ascontiguousarray(kd),
                              np.ascontiguousarray(bd), stride, ho, wo)
    out = Tensor._wrap(y if batched else y[0],
                       x.requires_grad or kernels.requires_grad or bias.requires_grad)

    def bwd(g):
        g4 = np.ascontiguousarray(g if batched else g[None])
        gk = _kernels.conv_kernel_grad(xp, g4, k, stride) \
            if kernels.requires_grad else None
        gb = g4.sum(axis=(0, 1, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gm = g4.reshape(B * ho * wo, cout)
            wm = kd.reshape(k * k * cin, cout)
            gcol = (gm @ wm.T).reshape(B, ho, wo, k, k, cin)
            gxp = _kernels.col2im_add(gcol, stride, H + 2 * padding, W + 2 * padding)
            gx = gxp[:, padding:padding + H, padding:padding + W, :] if padding else gxp
            if not batched:
                gx = gx[0]
        return gx, gk, gb

    _push("conv2d", out, (x, kernels, bias), bwd)
    return out


# ---------------------------------------------------------------------------
# pooling and reshaping


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling; ties route the gradient to the first window position
    in row-major order."""
    xd = x.data
    batched = xd.ndim == 4
    if not batched:
        if xd.ndim != 3:
            raise ValueError(f"maxpool2 input must be 3- or 4-dimensional, got {xd.shape}")
        xd = xd[None]
    B, H, W, C = xd.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 requires even spatial extents, got {H}x{W}")
    # Window cells in row-major order; strided views avoid any transpose.
    cells = (xd[:, 0::2, 0::2, :], xd[:, 0::2, 1::2, :],
             xd[:, 1::2, 0::2, :], xd[:, 1::2, 1::2, :])
    y = np.maximum(np.maximum(cells[0], cells[1]),
                   np.maximum(cells[2], cells[3]))
    out = Tensor._wrap(y if batched else y[0], x.requires_grad)

    def bwd(g):
        g4 = g if batched else g[None]
        # The four phase-views partition gx, so each cell is written exactly
        # once: the winning phase gets g, the others 0.
        gx = np.empty((B, H, W, C), dtype=DTYPE)
        taken = np.zeros(y.shape, dtype=bool)
        views = (gx[:, 0::2, 0::2, :], gx[:, 0::2, 1::2, :],
                 gx[:, 1::2, 0::2, :], gx[:, 1::2, 1::2, :])
        for cell, view in zip(cells, views):
            hit = cell == y
            hit &= ~taken
            np.multiply(g4, hit, out=view)
            taken |= hit
        return (gx if batched else gx[0],)

    _push("maxpool2", out, (x,), bwd)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes: ``... x H x W x C -> ... x C``."""
    xd = x.data
    if xd.ndim < 3:
        raise ValueError(f"global_avg_pool input must have spatial axes, got {xd.shape}")
    H, W = xd.shape[-3], xd.shape[-2]
    out = Tensor._wrap(xd.mean(axis=(-3, -2)), x.requires_grad)

    def bwd(g):
        gx = np.broadcast_to(g[..., None, None, :] / (H * W), xd.shape)
        return (np.ascontiguousarray(gx),)

    _push("global_avg_pool", out, (x,), bwd)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two maps along the channel axis."""
    ad, bd = a.data, b.data
    if ad.shape[:-1] != bd.shape[:-1]:
        raise ValueError(
            f"spatial extents differ: {ad.shape} vs {bd.shape}")
    c1 = ad.shape[-1]
    out = Tensor._wrap(np.concatenate([ad, bd], axis=-1),
                       a.requires_grad or b.requires_grad)

    def bwd(g):
        ga = np.ascontiguousarray(g[..., :c1]) if a.requires_grad else None
        gb = np.ascontiguousarray(g[..., c1:]) if b.requires_grad else None
        return ga, gb

    _push("concat_channels", out, (a, b), bwd)
    return out


def concat_batch(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate batched tensors along the leading axis; gradient splits."""
    if not parts:
        raise ValueError("concat_batch needs at least one tensor")
    base = parts[0].data.shape[1:]
    if any(p.data.shape[1:] != base for p in parts):
        raise ValueError("concat_batch requires identical trailing shapes")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=0),
                       any(p.requires_grad for p in parts))
    sizes = [p.data.shape[0] for p in parts]

    def bwd(g):
        grads = []
        offset = 0
        for p, n in zip(parts, sizes):
            grads.append(np.ascontiguousarray(g[offset:offset + n])
                         if p.requires_grad else None)
            offset += n
        return tuple(grads)

    _push("concat_batch", out, tuple(parts), bwd)
    return out


def flatten_map(x: Tensor) -> Tensor:
    """Row-major flatten of a map to a vector (batch axis preserved)."""
    xd = x.data
    if xd.ndim == 4:
        flat = xd.reshape(xd.shape[0], -1)
    else:
        flat = xd.reshape(-1)
    out = Tensor._wrap(flat, x.requires_grad)
    _push("flatten_map", out, (x,), lambda g: (g.reshape(xd.shape),))
    return out


def tile_vector(x: Tensor, n: int) -> Tensor:
    """Tile a length-C (batch of) vector(s) n times along the channel axis.

    ``out[..., i] = x[..., i mod C]``; the pullback sums the n copies.
    """
    if n < 1:
        raise ValueError("tile count must be >= 1")
    xd = x.data
    if xd.ndim == 1:
        y = np.tile(xd, n)
    elif xd.ndim == 2:
        y = np.tile(xd, (1, n))
    else:
        raise ValueError(f"tile_vector expects a vector or batch of vectors, got {xd.shape}")
    c = xd.shape[-1]
    out = Tensor._wrap(y, x.requires_grad)

    def bwd(g):
        return (g.reshape(g.shape[:-1] + (n, c)).sum(axis=-2),)

    _push("tile_vector", out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# stochastic and loss ops


def dropout(x: Tensor, rate: float, mode: str, seed: int) -> Tensor:
    """Inverted dropout: train-time zeroing with 1/(1-rate) rescale, eval identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    scale = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = Tensor._wrap(x.data * scale, x.requires_grad)
    _push("dropout", out, (x,), lambda g: (g * scale,))
    return out


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean negative log softmax probability of the labelled class.

    Accepts a length-P vector with an integer label or a B x P batch with a
    length-B label array; either way the result is a scalar (the batch mean).
    Uses max-subtraction so finite logits can never produce NaN/Inf.
    """
    zd = logits.data
    batched = zd.ndim == 2
    if not batched:
        if zd.ndim != 1:
            raise ValueError(f"logits must be 1- or 2-dimensional, got {zd.shape}")
        zd = zd[None]
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    B, P = zd.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= P):
        raise ValueError(f"labels must lie in [0, {P})")
    m = zd.max(axis=1, keepdims=True)
    e = np.exp(zd - m)
    s = e.sum(axis=1, keepdims=True)
    logp = (zd - m) - np.log(s)
    loss = -logp[np.arange(B), labels].mean()
    out = Tensor._wrap(np.asarray(loss), logits.requires_grad)

    def bwd(g):
        gz = e / s
        gz[np.arange(B), labels] -= 1.0
        gz *= float(g) / B
        return (gz if batched else gz[0],)

    _push("softmax_cross_entropy", out, (logits,), bwd)
    return out


def weighted_sum(x: Tensor, coeffs: np.ndarray) -> Tensor:
    """Fixed linear functional <coeffs, x> -> scalar; probe for gradient checks."""
    cd = np.asarray(coeffs, dtype=DTYPE)
    if cd.shape != x.data.shape:
        raise ValueError(f"coefficient shape {cd.shape} != tensor shape {x.data.shape}")
    out = Tensor._wrap(np.asarray((x.data * cd).sum()), x.requires_grad)
    _push("weighted_sum", out, (x,), lambda g: (float(g) * cd,))
    return out


# ---------------------------------------------------------------------------
# optimization


class Optimizer:
    """Adaptive-moment (default) or momentum-SGD updates over named parameters.

    A parameter whose grad is None (or all zeros) is left unchanged by step().
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 mode: str = "adam", beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, momentum: float = 0.9):
        if lr < 0:
            # lr 0 is allowed: steps become exact no-ops on the parameters.
            raise ValueError("learning rate must be non-negative")
        if mode not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.params = dict(params)
        self.lr = lr
        self.mode = mode
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.momentum = momentum
        self.step_count = 0
        if mode == "adam":
            self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
            self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
            self._scratch = {k: np.empty_like(p.data) for k, p in self.params.items()}
        else:
            self._vel = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.mode == "adam":
                # Bias correction folded into the step size:
                # lr * mhat / (sqrt(vhat) + eps)
                #   == [lr * s2 / (1 - b1^t)] * m / (sqrt(v) + eps * s2)
                # with s2 = sqrt(1 - b2^t). Scratch keeps this allocation-free.
                m, v, buf = self._m[name], self._v[name], self._scratch[name]
                np.multiply(g, 1.0 - self.beta1, out=buf)
                m *= self.beta1
                m += buf
                np.multiply(g, g, out=buf)
                buf *= 1.0 - self.beta2
                v *= self.beta2
                v += buf
                s2 = math.sqrt(1.0 - self.beta2 ** t)
                alpha = self.lr * s2 / (1.0 - self.beta1 ** t)
                np.sqrt(v, out=buf)
                buf += self.eps * s2
                np.divide(m, buf, out=buf)
                buf *= alpha
                p.data -= buf
            else:
                vel = self._vel[name]
                vel *= self.momentum
                vel += g
                p.data -= self.lr * vel


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(f: Callable[[Tensor], Tensor], point: np.ndarray,
                            eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of f and central differences.

    f must map a tensor to a scalar tensor. The relative error denominator is
    max(1, |analytic|, |numeric|) per coordinate.
    """
    point = np.asarray(point, dtype=DTYPE)
    x = Tensor(point.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
    analytic = x.grad
    if analytic is None:
        raise RuntimeError("loss does not depend on the checked point")
    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor._wrap(point.copy(), False)).data)
        flat[i] = orig - eps
        lo = float(f(Tensor._wrap(point.copy(), False)).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())
