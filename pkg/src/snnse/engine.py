"""A small reverse-mode differentiation engine for the spiking U-Net.

Only the primitives the network needs are provided.  Recurrent neuron
layers are single tape nodes covering a whole sequence: the forward pass
loops over timesteps with :func:`snnse.neuron.lif_step` and the backward
pass runs the adjoint recurrence in reverse time (BPTT), using the ArcTan
surrogate in place of the derivative of the spike threshold.

Usage::

    with Tape() as tape:
        out = conv1d(x, w, b, stride=2, pad=2)
        loss = lsd_loss(out, ref)
    grads = tape.backward(loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .neuron import (
    LifParams,
    LifState,
    SurrogateConfig,
    arctan_sigmoid,
    arctan_surrogate_grad,
    heaviside,
    lif_step,
)

LSD_EPS = 1e-12

# cap on im2col buffer size per chunk, in elements
_COL_BUDGET = 16 * 1024 * 1024

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An ndarray plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name", "saved", "_index")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.name = name
        self.saved = {}
        self._index = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive ops; creation order is a topological order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out: Tensor):
        out._index = len(self.nodes)
        self.nodes.append(out)

    def backward(self, loss: Tensor, seed=None) -> dict:
        """Propagate adjoints from ``loss`` to every leaf with ``requires_grad``.

        Returns ``{leaf tensor: gradient}``; gradients are also accumulated
        into ``leaf.grad``.
        """
        if loss._index < 0 or self.nodes[loss._index] is not loss:
            raise RuntimeError("loss was not recorded on this tape")
        adj = {id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: loss._index + 1]):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._index >= 0:
                    if p._index >= node._index:
                        raise RuntimeError("internal error: cycle in tape")
                else:
                    leaves[id(p)] = p
                key = id(p)
                adj[key] = pg if key not in adj else adj[key] + pg
        out = {}
        for key, leaf in leaves.items():
            g = adj[key].astype(leaf.data.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        return out


def _node(data, parents, backward_fn, **saved) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.saved = saved
        tape.record(out)
    return out


def _needs(*ts):
    return _active_tape() is not None and any(t.requires_grad for t in ts)


# ---------------------------------------------------------------------------
# convolution kernels (numpy, no tape)
# ---------------------------------------------------------------------------


def conv_out_len(L: int, k: int, stride: int, pad: int) -> int:
    return (L + 2 * pad - k) // stride + 1


def _check_conv(x, w, b, stride, pad):
    if x.ndim != 3:
        raise ValueError(f"conv1d input must be (N, C_in, L), got {x.shape}")
    c_out, c_in, k = w.shape
    if x.shape[1] != c_in:
        raise ValueError(f"conv1d channel mismatch: input has {x.shape[1]}, weight expects {c_in}")
    if b is not None and b.shape != (c_out,):
        raise ValueError(f"conv1d bias must be ({c_out},), got {b.shape}")
    if k % 2 == 0 or pad != (k - 1) // 2:
        raise ValueError(f"conv1d needs odd kernel with pad=(k-1)/2, got k={k}, pad={pad}")
    if stride not in (1, 2):
        raise ValueError(f"conv1d stride must be 1 or 2, got {stride}")
    L_out = conv_out_len(x.shape[2], k, stride, pad)
    if L_out < 1:
        raise ValueError(f"conv1d input length {x.shape[2]} too short")
    return c_out, c_in, k, L_out


def _chunks(n, per_item):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    return [(a, min(n, a + step)) for a in range(0, n, step)]


def _cols(xp, k, stride, L_out):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, k, axis=2)[:, :, : stride * L_out : stride]
    return win.transpose(0, 2, 1, 3).reshape(n * L_out, c * k)


def conv1d_forward(x, w, b=None, stride=1, pad=None):
    """Zero-padded 1-D cross-correlation of ``x`` (N, C_in, L) with ``w`` (C_out, C_in, k)."""
    x = np.asarray(x)
    w = np.asarray(w)
    if pad is None:
        pad = (w.shape[2] - 1) // 2
    c_out, c_in, k, L_out = _check_conv(x, w, b, stride, pad)
    n = x.shape[0]
    wm = w.reshape(c_out, c_in * k).T
    y = np.empty((n, c_out, L_out), dtype=np.result_type(x, w))
    for a, z in _chunks(n, L_out * c_in * k):
        xp = np.pad(x[a:z], ((0, 0), (0, 0), (pad, pad)))
        y[a:z] = (_cols(xp, k, stride, L_out) @ wm).reshape(z - a, L_out, c_out).transpose(0, 2, 1)
    if b is not None:
        y += b[:, None]
    return y


def conv1d_backward(g, x, w, stride=1, pad=None, need_x=True):
    """Adjoints of :func:`conv1d_forward`; returns ``(dx, dw, db)``."""
    x = np.asarray(x)
    w = np.asarray(w)
    if pad is None:
        pad = (w.shape[2] - 1) // 2
    c_out, c_in, k, L_out = _check_conv(x, w, None, stride, pad)
    n, _, L = x.shape
    if g.shape != (n, c_out, L_out):
        raise ValueError(f"upstream shape {g.shape} != {(n, c_out, L_out)}")
    wm = w.reshape(c_out, c_in * k)
    dw = np.zeros((c_out, c_in * k), dtype=np.float64)
    dx = np.zeros_like(x, dtype=np.result_type(g, w)) if need_x else None
    for a, z in _chunks(n, L_out * c_in * k):
        gm = g[a:z].transpose(0, 2, 1).reshape((z - a) * L_out, c_out)
        xp = np.pad(x[a:z], ((0, 0), (0, 0), (pad, pad)))
        dw += gm.T @ _cols(xp, k, stride, L_out)
        if need_x:
            dcols = (gm @ wm).reshape(z - a, L_out, c_in, k)
            dxp = np.zeros((z - a, c_in, L + 2 * pad), dtype=dx.dtype)
            for j in range(k):
                dxp[:, :, j : j + stride * L_out : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
            dx[a:z] = dxp[:, :, pad : pad + L]
    db = g.sum(axis=(0, 2), dtype=np.float64)
    return dx, dw.reshape(w.shape).astype(w.dtype), db.astype(w.dtype)


# ---------------------------------------------------------------------------
# differentiable primitives
# ---------------------------------------------------------------------------


def conv1d(x, w: Tensor, b: Tensor | None = None, stride=1, pad=None) -> Tensor:
    x = as_tensor(x)
    w = as_tensor(w)
    if pad is None:
        pad = (w.shape[2] - 1) // 2
    y = conv1d_forward(x.data, w.data, None if b is None else b.data, stride, pad)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        dx, dw, db = conv1d_backward(g, x.data, w.data, stride, pad, need_x=x.requires_grad)
        return (dx, dw) if b is None else (dx, dw, db)

    return _node(y, parents, backward)


def upsample2(x) -> Tensor:
    """Nearest-neighbour x2 along the last axis: [a, b] -> [a, a, b, b]."""
    x = as_tensor(x)
    y = np.repeat(x.data, 2, axis=-1)

    def backward(g):
        return (g[..., 0::2] + g[..., 1::2],)

    return _node(y, (x,), backward)


def crop(x, length: int) -> Tensor:
    """Keep the first ``length`` positions of the last axis."""
    x = as_tensor(x)
    L = x.shape[-1]
    if not 0 < length <= L:
        raise ValueError(f"cannot crop length {L} to {length}")
    y = x.data[..., :length]

    def backward(g):
        pad = [(0, 0)] * (g.ndim - 1) + [(0, L - length)]
        return (np.pad(g, pad),)

    return _node(y, (x,), backward)


def concat(xs, axis=1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    y = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(y, xs, backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    y = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(y, (x,), backward)


def affine(x, scale: float, shift: float) -> Tensor:
    """``x * scale + shift`` with constant scalars (LPS (de)normalisation)."""
    x = as_tensor(x)
    y = x.data * x.data.dtype.type(scale) + x.data.dtype.type(shift)

    def backward(g):
        return (g * scale,)

    return _node(y, (x,), backward)


def _channel_sum(g, ndim):
    """Reduce an array shaped (..., C, L) to (C,) in float64."""
    axes = tuple(i for i in range(ndim) if i != ndim - 2)
    return g.sum(axis=axes, dtype=np.float64)


@dataclass(frozen=True)
class SpikeConfig:
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    detach_reset: bool = True
    relax: bool = False  # smooth forward (arctan sigmoid) for gradient checks


def lif(drive, alpha: Tensor, beta: Tensor, u_th: Tensor, cfg: SpikeConfig = SpikeConfig()) -> Tensor:
    """Run LIF neurons over a whole sequence.

    ``drive`` is shaped ``(T, ..., C, L)`` with time first; the result holds
    the spikes ``S(t)`` for every step.  Membrane potentials are saved for
    the backward pass, which never reads the forward spike values.
    """
    drive = as_tensor(drive)
    alpha, beta, u_th = as_tensor(alpha), as_tensor(beta), as_tensor(u_th)
    d = drive.data
    T = d.shape[0]
    p = LifParams(alpha.data, beta.data, u_th.data)
    state = LifState.zeros(d.shape[1:], dtype=d.dtype)
    relax = cfg.surrogate if cfg.relax else None
    keep = _needs(drive, alpha, beta, u_th)
    spikes = np.empty_like(d)
    U_all = np.empty_like(d) if keep else None
    I_all = np.empty_like(d) if keep else None
    for t in range(T):
        if keep:
            U_all[t] = state.U
            I_all[t] = state.I
        state, spikes[t] = lif_step(state, p, d[t], relax=relax)

    def backward(gS):
        return _lif_backward(gS, U_all, I_all, p, cfg)

    out = _node(spikes, (drive, alpha, beta, u_th), backward, U=U_all)
    return out


def _lif_backward(gS, U_all, I_all, p: LifParams, cfg: SpikeConfig):
    T = gS.shape[0]
    nd = gS.ndim - 1
    a, b, th = p.channel_view(nd)
    dtype = np.result_type(gS, U_all)
    lamI = np.zeros(gS.shape[1:], dtype=dtype)
    lamU = np.zeros(gS.shape[1:], dtype=dtype)
    d_drive = np.empty(gS.shape, dtype=dtype)
    d_alpha = np.zeros(p.alpha.shape)
    d_beta = np.zeros(p.beta.shape)
    d_th = np.zeros(p.u_th.shape)
    for t in range(T - 1, -1, -1):
        x = U_all[t] - th
        sg = arctan_surrogate_grad(x, cfg.surrogate).astype(dtype, copy=False)
        s = arctan_sigmoid(x, cfg.surrogate) if cfg.relax else heaviside(x)
        d_drive[t] = lamI
        d_alpha += _channel_sum(lamI * I_all[t], nd)
        d_beta += _channel_sum(lamU * U_all[t], nd)
        # direct -u_th * S(t) term of the reset, and the threshold inside S(t)
        th_grad = -gS[t] * sg - lamU * s
        dU = gS[t] * sg + b * lamU
        if not cfg.detach_reset:
            dU = dU - th * lamU * sg
            th_grad = th_grad + th * lamU * sg
        d_th += _channel_sum(th_grad, nd)
        lamI, lamU = a * lamI + lamU, dU
    return (
        d_drive,
        d_alpha.astype(p.alpha.dtype),
        d_beta.astype(p.beta.dtype),
        d_th.astype(p.u_th.dtype),
    )


def leaky_integrator(drive, beta: Tensor) -> Tensor:
    """Non-spiking readout membrane: ``O(t) = beta * O(t-1) + drive(t)``, ``O(-1) = 0``.

    ``drive`` is ``(T, ..., C, L)``; ``beta`` is per channel.
    """
    drive = as_tensor(drive)
    beta = as_tensor(beta)
    d = drive.data
    bt = beta.data[:, None] if d.ndim >= 3 else beta.data
    out = np.empty_like(d)
    u = np.zeros(d.shape[1:], dtype=d.dtype)
    for t in range(d.shape[0]):
        u = bt * u + d[t]
        out[t] = u

    def backward(g):
        mu = np.zeros(g.shape[1:], dtype=g.dtype)
        dd = np.empty_like(g)
        db = np.zeros(beta.shape)
        nd = g.ndim - 1
        for t in range(g.shape[0] - 1, -1, -1):
            mu = g[t] + bt * mu
            dd[t] = mu
            if t > 0:
                db += _channel_sum(mu * out[t - 1], nd) if nd >= 2 else float(np.sum(mu * out[t - 1]))
        return dd, db.astype(beta.dtype)

    return _node(out, (drive, beta), backward)


def lsd_value(est: np.ndarray, ref: np.ndarray, eps: float = LSD_EPS):
    """Mean over frames of per-frame RMS log-spectral difference; last axis is bins."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"LSD shape mismatch: {est.shape} vs {ref.shape}")
    if est.ndim < 2 or est.shape[-1] < 1 or est.size == 0:
        raise ValueError(f"LSD needs at least one frame and one bin, got {est.shape}")
    diff = (est - ref).reshape(-1, est.shape[-1])
    per_frame = np.sqrt(np.mean(diff * diff, axis=1) + eps)
    return float(np.mean(per_frame)), diff, per_frame


def lsd_loss(est, ref, eps: float = LSD_EPS) -> Tensor:
    """Log-spectral distance between estimated and reference LPS."""
    est = as_tensor(est)
    value, diff, per_frame = lsd_value(est.data, ref, eps)
    M, K = diff.shape

    def backward(g):
        grad = diff / (M * K * per_frame[:, None]) * float(g)
        return (grad.reshape(est.shape).astype(est.dtype),)

    return _node(np.asarray(value), (est,), backward)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

DECAY_MAX = 0.999
THRESHOLD_MIN = 0.01


def clamp_neuron_params(p: LifParams) -> LifParams:
    return LifParams(
        np.clip(p.alpha, 0.0, DECAY_MAX).astype(p.alpha.dtype),
        np.clip(p.beta, 0.0, DECAY_MAX).astype(p.beta.dtype),
        np.maximum(p.u_th, THRESHOLD_MIN).astype(p.u_th.dtype),
    )


def clamp_named(params: dict) -> None:
    """Clamp neuron parameters in place, recognised by name suffix."""
    for name, arr in params.items():
        if name.endswith(".alpha") or name.endswith(".beta"):
            np.clip(arr, 0.0, DECAY_MAX, out=arr)
        elif name.endswith(".u_th"):
            np.maximum(arr, THRESHOLD_MIN, out=arr)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr=0.002, beta1=0.5, beta2=0.9,
              eps=1e-8, clamp=True) -> dict:
    """One bias-corrected Adam update of ``params`` (name -> ndarray) in place.

    Raises ``FloatingPointError`` without touching anything if a gradient is
    not finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p = params[name]
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p[...] = (p.astype(np.float64) - upd).astype(p.dtype)
    if clamp:
        clamp_named(params)
    return params
