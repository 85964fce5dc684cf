"""Minimal 1-D conv/dense layer library with hand-written gradients.

Networks are described by an ordered list of :class:`LayerSpec`; parameters
live in a flat ``{name: ndarray}`` dict so they can be checkpointed, finite-
difference checked, and updated functionally.  Activations are ``(batch,
channels, length)`` for conv stages and ``(batch, features)`` for dense
stages.

Convolutions use symmetric padding ``(kernel_len - 1) // 2`` (odd kernels
only), so a stride-``s`` conv maps length ``L`` to ``ceil(L / s)`` and the
transposed conv maps ``L`` to ``s * L`` exactly.  The transposed conv is
implemented as the exact adjoint of the conv, which makes the pair testable
via the inner-product identity ``<conv(x), y> = <x, conv_T(y)>``.

Besides plain backprop, the module exposes the second-order pass needed by a
gradient penalty: :func:`input_gradient` records the backward chain, and
:func:`penalty_param_grads` differentiates a function of that input gradient
with respect to the parameters (activation masks held fixed, as usual).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class LayerError(ValueError):
    """Ill-formed layer or network specification."""


class ShapeMismatchError(LayerError):
    """Input does not match the declared network input shape."""


class NonFiniteError(FloatingPointError):
    """A layer produced NaN/Inf activations or gradients."""


ACTIVATIONS = ("relu", "leaky_relu", "tanh")
KINDS = ("dense", "conv1d", "conv1d_transposed", "reshape", "phase_shuffle") + ACTIVATIONS


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_len: int = 0
    stride: int = 1
    in_channels: int = 0
    out_channels: int = 0
    shuffle_radius: int = 0
    slope: float = 0.2           # leaky_relu only
    shape: tuple = ()            # reshape target, excluding batch
    init_gain: float = math.sqrt(2.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LayerError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv1d", "conv1d_transposed"):
            if self.kernel_len < 1 or self.kernel_len % 2 == 0:
                raise LayerError(f"{self.kind} needs an odd kernel_len, got {self.kernel_len}")
            if self.stride < 1 or self.in_channels < 1 or self.out_channels < 1:
                raise LayerError(f"bad {self.kind} geometry: {self}")
        if self.kind == "phase_shuffle" and self.shuffle_radius < 0:
            raise LayerError("shuffle_radius must be >= 0")


def dense(n_in, n_out, gain=math.sqrt(2.0)):
    return LayerSpec("dense", in_channels=n_in, out_channels=n_out, init_gain=gain)


def conv1d(c_in, c_out, kernel_len, stride, gain=math.sqrt(2.0)):
    return LayerSpec("conv1d", kernel_len=kernel_len, stride=stride,
                     in_channels=c_in, out_channels=c_out, init_gain=gain)


def conv1d_transposed(c_in, c_out, kernel_len, stride, gain=math.sqrt(2.0)):
    return LayerSpec("conv1d_transposed", kernel_len=kernel_len, stride=stride,
                     in_channels=c_in, out_channels=c_out, init_gain=gain)


def relu():
    return LayerSpec("relu")


def leaky_relu(slope=0.2):
    return LayerSpec("leaky_relu", slope=slope)


def tanh():
    return LayerSpec("tanh")


def reshape(shape):
    return LayerSpec("reshape", shape=tuple(shape))


def phase_shuffle(radius):
    return LayerSpec("phase_shuffle", shuffle_radius=radius)


def _conv_out_len(length, kernel_len, stride):
    pad = (kernel_len - 1) // 2
    out = (length + 2 * pad - kernel_len) // stride + 1
    if out < 1:
        raise LayerError(f"conv over length {length} with kernel {kernel_len} is empty")
    return out


def _layer_out_shape(layer: LayerSpec, shape: tuple) -> tuple:
    kind = layer.kind
    if kind == "dense":
        if len(shape) != 1 or shape[0] != layer.in_channels:
            raise LayerError(f"dense expects ({layer.in_channels},), got {shape}")
        return (layer.out_channels,)
    if kind == "conv1d":
        if len(shape) != 2 or shape[0] != layer.in_channels:
            raise LayerError(f"conv1d expects ({layer.in_channels}, L), got {shape}")
        return (layer.out_channels, _conv_out_len(shape[1], layer.kernel_len, layer.stride))
    if kind == "conv1d_transposed":
        if len(shape) != 2 or shape[0] != layer.in_channels:
            raise LayerError(f"conv1d_transposed expects ({layer.in_channels}, L), got {shape}")
        # Consistency: the adjoint conv must map the output length back.
        out_len = layer.stride * shape[1]
        if _conv_out_len(out_len, layer.kernel_len, layer.stride) != shape[1]:
            raise LayerError(f"inconsistent transposed-conv geometry at {shape}")
        return (layer.out_channels, out_len)
    if kind == "reshape":
        if int(np.prod(shape)) != int(np.prod(layer.shape)):
            raise LayerError(f"cannot reshape {shape} to {layer.shape}")
        return layer.shape
    if kind == "phase_shuffle":
        if len(shape) != 2:
            raise LayerError(f"phase_shuffle expects (C, L), got {shape}")
        if layer.shuffle_radius >= shape[1]:
            raise LayerError(f"shuffle radius {layer.shuffle_radius} >= length {shape[1]}")
        return shape
    return shape  # activations


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    output_shape: tuple = field(default=())

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = _layer_out_shape(layer, shape)
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "output_shape", shape)

    def param_names(self):
        names = []
        for i, layer in enumerate(self.layers):
            if layer.kind in ("dense", "conv1d", "conv1d_transposed"):
                names += [f"l{i}.W", f"l{i}.b"]
        return names


def init_params(spec: NetworkSpec, seed, dtype=np.float32) -> dict:
    """Centered-uniform init scaled by fan-in; biases start at zero."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            fan_in = layer.in_channels
            w_shape = (layer.in_channels, layer.out_channels)
        elif layer.kind == "conv1d":
            fan_in = layer.in_channels * layer.kernel_len
            w_shape = (layer.out_channels, layer.in_channels, layer.kernel_len)
        elif layer.kind == "conv1d_transposed":
            fan_in = layer.in_channels * layer.kernel_len // layer.stride
            w_shape = (layer.in_channels, layer.out_channels, layer.kernel_len)
        else:
            continue
        limit = layer.init_gain * math.sqrt(3.0 / max(1, fan_in))
        params[f"l{i}.W"] = rng.uniform(-limit, limit, size=w_shape).astype(dtype)
        params[f"l{i}.b"] = np.zeros(layer.out_channels, dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# conv primitives (shared by conv1d, conv1d_transposed, and both backwards)

def _im2col(x, kernel_len, stride):
    """(B, C, L) -> (B, L_out, C * kernel_len) patch matrix."""
    b, c, length = x.shape
    pad = (kernel_len - 1) // 2
    out_len = (length + 2 * pad - kernel_len) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, out_len, kernel_len), strides=(s0, s1, s2 * stride, s2))
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b, out_len, c * kernel_len)


def _col2im(cols, length, channels, kernel_len, stride):
    """Adjoint of :func:`_im2col`: scatter-add patches back to (B, C, length).

    Accumulates into a phase-major buffer (position = slot * stride + phase)
    so every tap lands in a contiguous slice, then reorders once.
    """
    b, out_len, _ = cols.shape
    pad = (kernel_len - 1) // 2
    padded_len = length + 2 * pad
    cols = cols.reshape(b, out_len, channels, kernel_len).transpose(0, 2, 1, 3)
    nslots = max(out_len + (kernel_len - 1) // stride + 1, -(-padded_len // stride))
    buf = np.zeros((b, channels, stride, nslots), dtype=cols.dtype)
    for t in range(kernel_len):
        d = t // stride
        buf[:, :, t % stride, d:d + out_len] += cols[:, :, :, t]
    xp = buf.transpose(0, 1, 3, 2).reshape(b, channels, nslots * stride)
    return xp[:, :, pad:pad + length]


def _conv_fwd(x, w, stride):
    """Correlation with weight (O, C, k); no bias."""
    o, c, k = w.shape
    b = x.shape[0]
    cols = _im2col(x, k, stride)
    y = cols.reshape(-1, c * k) @ w.reshape(o, c * k).T
    return y.reshape(b, -1, o).transpose(0, 2, 1)


def _conv_bwd_input(gy, w, stride, in_len):
    o, c, k = w.shape
    b, _, out_len = gy.shape
    g2 = gy.transpose(0, 2, 1).reshape(-1, o)
    cols = (g2 @ w.reshape(o, c * k)).reshape(b, out_len, c * k)
    return _col2im(cols, in_len, c, k, stride)


def _conv_bwd_weight(x, gy, kernel_len, stride):
    b, c, _ = x.shape
    o = gy.shape[1]
    cols = _im2col(x, kernel_len, stride).reshape(-1, c * kernel_len)
    g2 = gy.transpose(0, 2, 1).reshape(-1, o)
    return (g2.T @ cols).reshape(o, c, kernel_len)


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values after {where}")


def _reflect_indices(length, shifts):
    """Gather indices for a per-row shift with reflection padding (no edge repeat)."""
    idx = np.arange(length)[None, :] + shifts.reshape(-1, 1)
    idx = np.abs(idx)
    over = idx > length - 1
    idx[over] = 2 * (length - 1) - idx[over]
    return idx


# ---------------------------------------------------------------------------
# forward / backward

def forward(spec: NetworkSpec, params: dict, x: np.ndarray, rng=None, check_finite=True):
    """Run the network; returns (output, caches) with caches fit for backward."""
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeMismatchError(f"input shape {x.shape[1:]} != spec {spec.input_shape}")
    b = x.shape[0]
    caches = []
    a = x
    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "dense":
            w, bias = params[f"l{i}.W"], params[f"l{i}.b"]
            y = a @ w + bias
            caches.append(("dense", a))
        elif kind == "conv1d":
            w, bias = params[f"l{i}.W"], params[f"l{i}.b"]
            y = _conv_fwd(a, w, layer.stride) + bias[None, :, None]
            caches.append(("conv1d", a))
        elif kind == "conv1d_transposed":
            w, bias = params[f"l{i}.W"], params[f"l{i}.b"]
            c_in, c_out, k = w.shape
            out_len = layer.stride * a.shape[2]
            cols = (a.transpose(0, 2, 1).reshape(-1, c_in)
                    @ w.reshape(c_in, c_out * k)).reshape(b, a.shape[2], c_out * k)
            y = _col2im(cols, out_len, c_out, k, layer.stride) + bias[None, :, None]
            caches.append(("conv1d_transposed", a))
        elif kind == "relu":
            mask = a > 0
            y = np.where(mask, a, 0)
            caches.append(("mask", mask.astype(a.dtype)))
        elif kind == "leaky_relu":
            mask = np.where(a > 0, np.asarray(1, a.dtype), np.asarray(layer.slope, a.dtype))
            y = a * mask
            caches.append(("mask", mask))
        elif kind == "tanh":
            y = np.tanh(a)
            caches.append(("tanh", y))
        elif kind == "reshape":
            caches.append(("reshape", a.shape))
            y = a.reshape((b,) + layer.shape)
        elif kind == "phase_shuffle":
            radius = layer.shuffle_radius
            if radius == 0:
                caches.append(("identity", None))
                y = a
            else:
                if rng is None:
                    raise LayerError("phase_shuffle with radius > 0 needs an rng")
                nch = a.shape[1]
                shifts = rng.integers(-radius, radius + 1, size=b * nch)
                idx = _reflect_indices(a.shape[2], shifts).reshape(b, nch, -1)
                y = np.take_along_axis(a, idx, axis=2)
                caches.append(("gather", idx))
        else:  # pragma: no cover
            raise LayerError(kind)
        if check_finite:
            _check_finite(y, f"layer {i} ({kind})")
        a = y
    return a, caches


def _layer_adjoint(layer, cache, g, batch, input_shape):
    """Propagate a gradient signal backwards through one non-parametric op."""
    tag, payload = cache
    if tag == "mask":
        return g * payload
    if tag == "tanh":
        return g * (1 - payload * payload)
    if tag == "reshape":
        return g.reshape(payload)
    if tag == "identity":
        return g
    if tag == "gather":
        # Scatter-add along time; reflection can map two sources to one index,
        # so accumulate with bincount (deterministic, much faster than add.at).
        idx = payload
        b_, c_, l_ = g.shape
        flat = (idx + np.arange(b_ * c_).reshape(b_, c_, 1) * l_).reshape(-1)
        acc = np.bincount(flat, weights=g.reshape(-1), minlength=b_ * c_ * l_)
        return acc.reshape(b_, c_, l_).astype(g.dtype)
    raise LayerError(tag)  # pragma: no cover


def backward(spec: NetworkSpec, params: dict, caches, gy: np.ndarray, check_finite=True):
    """Gradients of sum(gy * output) w.r.t. params and input."""
    if len(caches) != len(spec.layers):
        raise LayerError("stale cache: layer count mismatch")
    grads = {}
    g = gy
    b = gy.shape[0]
    for i in reversed(range(len(spec.layers))):
        layer = spec.layers[i]
        tag, payload = caches[i]
        if tag == "dense":
            a = payload
            grads[f"l{i}.W"] = a.T @ g
            grads[f"l{i}.b"] = g.sum(axis=0)
            g = g @ params[f"l{i}.W"].T
        elif tag == "conv1d":
            a = payload
            w = params[f"l{i}.W"]
            grads[f"l{i}.W"] = _conv_bwd_weight(a, g, layer.kernel_len, layer.stride)
            grads[f"l{i}.b"] = g.sum(axis=(0, 2))
            g = _conv_bwd_input(g, w, layer.stride, a.shape[2])
        elif tag == "conv1d_transposed":
            a = payload
            w = params[f"l{i}.W"]  # (C_in, C_out, k), conv orientation
            grads[f"l{i}.b"] = g.sum(axis=(0, 2))
            cols = _im2col(g, layer.kernel_len, layer.stride)
            c_in = a.shape[1]
            a2 = a.transpose(0, 2, 1).reshape(-1, c_in)
            grads[f"l{i}.W"] = (a2.T @ cols.reshape(a2.shape[0], -1)).reshape(w.shape)
            g = (cols.reshape(a2.shape[0], -1) @ w.reshape(c_in, -1).T
                 ).reshape(b, a.shape[2], c_in).transpose(0, 2, 1)
        else:
            # Shape-preserving ops: the input shape equals the grad's shape.
            g = _layer_adjoint(layer, caches[i], g, b, g.shape[1:])
        if check_finite:
            _check_finite(g, f"backward through layer {i}")
    return grads, g


def input_gradient(spec: NetworkSpec, params: dict, caches, gy: np.ndarray):
    """Like backward but skips parameter gradients and records the chain.

    Returns ``(gx, chain)`` where ``chain[i]`` is the gradient signal entering
    layer ``i``'s adjoint (needed by :func:`penalty_param_grads`).
    """
    chain = [None] * len(spec.layers)
    g = gy
    b = gy.shape[0]
    for i in reversed(range(len(spec.layers))):
        layer = spec.layers[i]
        tag, payload = caches[i]
        chain[i] = g
        if tag == "dense":
            g = g @ params[f"l{i}.W"].T
        elif tag == "conv1d":
            g = _conv_bwd_input(g, params[f"l{i}.W"], layer.stride, payload.shape[2])
        elif tag == "conv1d_transposed":
            w = params[f"l{i}.W"]
            c_in = payload.shape[1]
            cols = _im2col(g, layer.kernel_len, layer.stride)
            g = (cols.reshape(-1, cols.shape[2]) @ w.reshape(c_in, -1).T
                 ).reshape(b, payload.shape[2], c_in).transpose(0, 2, 1)
        else:
            g = _layer_adjoint(layer, caches[i], g, b, g.shape[1:])
    return g, chain


def penalty_param_grads(spec: NetworkSpec, params: dict, caches, chain, r: np.ndarray):
    """Parameter gradients of a scalar P that depends on the input gradient.

    ``r`` is dP/d(input gradient).  The input-gradient map is linear in the
    backward signal, so dP flows forward through the same masks and gather
    indices; each weight picks up the bilinear pairing of the forward-flowing
    ``r`` with the recorded backward chain.  Activation masks are treated as
    constants (their contribution vanishes almost everywhere), and biases get
    no gradient for the same reason.
    """
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    b = r.shape[0]
    for i, layer in enumerate(spec.layers):
        tag, payload = caches[i]
        if tag == "dense":
            grads[f"l{i}.W"] += r.T @ chain[i]
            r = r @ params[f"l{i}.W"]
        elif tag == "conv1d":
            grads[f"l{i}.W"] += _conv_bwd_weight(r, chain[i], layer.kernel_len, layer.stride)
            r = _conv_fwd(r, params[f"l{i}.W"], layer.stride)
        elif tag == "conv1d_transposed":
            w = params[f"l{i}.W"]
            c_in, c_out, k = w.shape
            cols = _im2col(chain[i], k, layer.stride)
            r2 = r.transpose(0, 2, 1).reshape(-1, c_in)
            grads[f"l{i}.W"] += (r2.T @ cols.reshape(r2.shape[0], -1)).reshape(w.shape)
            out_len = layer.stride * r.shape[2]
            cols_r = (r2 @ w.reshape(c_in, -1)).reshape(b, r.shape[2], c_out * k)
            r = _col2im(cols_r, out_len, c_out, k, layer.stride)
        elif tag == "mask":
            r = r * payload
        elif tag == "tanh":
            r = r * (1 - payload * payload)
        elif tag == "reshape":
            r = r.reshape((b,) + layer.shape)
        elif tag == "identity":
            pass
        elif tag == "gather":
            r = np.take_along_axis(r, payload, axis=2)
        else:  # pragma: no cover
            raise LayerError(tag)
    return grads


def apply_phase_shuffle(x, radius, rng):
    """Standalone phase shuffle (per-channel shift, reflection padding)."""
    if radius < 0:
        raise LayerError("radius must be >= 0")
    if radius == 0:
        return x.copy()
    if radius >= x.shape[2]:
        raise LayerError(f"shuffle radius {radius} >= length {x.shape[2]}")
    spec = NetworkSpec((phase_shuffle(radius),), x.shape[1:])
    y, _ = forward(spec, {}, x, rng=rng, check_finite=False)
    return y
