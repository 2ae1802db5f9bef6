"""Minimal differentiable layer substrate for the two-branch network.

Implements exactly the layer set the architecture needs (conv2d, dense,
relu, avgpool2d, dropout, flatten, concat) with hand-written reverse-mode
gradients of the Gaussian negative log-likelihood. Activations follow the
dtype of the weights; loss reductions always accumulate in 64-bit.

Forward and backward are pure functions of (weights, mask, inputs) and are
safe to run concurrently on disjoint batches. A DropoutMask is one sampled
realisation of the network: per-unit Bernoulli keep decisions, shared
across the batch, with surviving activations scaled by 1/keep_prob
(inverted dropout), so keep_prob = 1 is exactly the deterministic network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError

__all__ = [
    "VAR_FLOOR",
    "Conv2d",
    "Dense",
    "Relu",
    "AvgPool2d",
    "Dropout",
    "Flatten",
    "Concat",
    "LayerSpec",
    "NetworkSpec",
    "WeightSet",
    "DropoutMask",
    "GaussianPrediction",
    "init_weights",
    "sample_mask",
    "forward",
    "backward",
    "loss_and_grad",
    "nll_loss",
    "param_count",
    "branch_traces",
    "dropout_unit_counts",
]

# Variance floor added to exp(log_var); keeps the likelihood finite.
VAR_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# Layer specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class AvgPool2d:
    pool: int = 3
    stride: int = 1


@dataclass(frozen=True)
class Dropout:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Concat:
    """Marker for the branch join; only valid as the first head layer."""


LayerSpec = Union[Conv2d, Dense, Relu, AvgPool2d, Dropout, Flatten, Concat]


@dataclass(frozen=True)
class NetworkSpec:
    """Two input branches joined into a head that emits (mu, log_var)."""

    patch_layers: tuple
    loc_layers: tuple
    head_layers: tuple
    patch_size: int = 32
    in_channels: int = 1
    loc_features: int = 3
    dropout_rate: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        branch_traces(self)  # validates shapes eagerly

    def all_layers(self):
        yield from self.patch_layers
        yield from self.loc_layers
        yield from self.head_layers


# ---------------------------------------------------------------------------
# Shape inference
# ---------------------------------------------------------------------------


def _conv_out(n: int, k: int, stride: int) -> int:
    out = (n - k) // stride + 1
    if out < 1 or n < k:
        raise ValueError(f"window {k} with stride {stride} does not fit extent {n}")
    return out


def _trace(layers, shape, head=False):
    """Walk a layer list computing activation shapes (batch axis omitted)."""
    trace = []
    for pos, layer in enumerate(layers):
        in_shape = shape
        if isinstance(layer, Conv2d):
            h, w, c = shape
            if c != layer.in_channels:
                raise ValueError(f"conv2d expects {layer.in_channels} channels, activation has {c}")
            shape = (_conv_out(h, layer.kernel, layer.stride),
                     _conv_out(w, layer.kernel, layer.stride),
                     layer.out_channels)
        elif isinstance(layer, Dense):
            (f,) = shape
            if f != layer.in_features:
                raise ValueError(f"dense expects {layer.in_features} features, activation has {f}")
            shape = (layer.out_features,)
        elif isinstance(layer, AvgPool2d):
            h, w, c = shape
            shape = (_conv_out(h, layer.pool, layer.stride),
                     _conv_out(w, layer.pool, layer.stride), c)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, (Relu, Dropout)):
            pass
        elif isinstance(layer, Concat):
            if not (head and pos == 0):
                raise ValueError("concat is only valid as the first head layer")
        else:
            raise ValueError(f"unknown layer kind: {layer!r}")
        trace.append((layer, in_shape, shape))
    return trace, shape


def branch_traces(spec: NetworkSpec):
    """Per-branch (layer, in_shape, out_shape) traces; validates the spec."""
    patch_in = (spec.patch_size, spec.patch_size, spec.in_channels)
    patch_trace, patch_out = _trace(spec.patch_layers, patch_in)
    loc_trace, loc_out = _trace(spec.loc_layers, (spec.loc_features,))
    if len(patch_out) != 1 or len(loc_out) != 1:
        raise ValueError("both branches must end in a flat feature vector")
    joined = (patch_out[0] + loc_out[0],)
    head_trace, head_out = _trace(spec.head_layers, joined, head=True)
    if head_out != (2,):
        raise ValueError(f"head must emit (mu, log_var); got shape {head_out}")
    return {"patch": patch_trace, "loc": loc_trace, "head": head_trace}


def param_count(spec: NetworkSpec) -> int:
    """Total trainable parameters (kernels/weights plus biases)."""
    total = 0
    for layer in spec.all_layers():
        if isinstance(layer, Conv2d):
            total += layer.kernel * layer.kernel * layer.in_channels * layer.out_channels
            total += layer.out_channels
        elif isinstance(layer, Dense):
            total += layer.in_features * layer.out_features + layer.out_features
    return total


def dropout_unit_counts(spec: NetworkSpec) -> list[int]:
    """Number of units at each dropout site, in patch -> loc -> head order."""
    traces = branch_traces(spec)
    counts = []
    for branch in ("patch", "loc", "head"):
        for layer, in_shape, _ in traces[branch]:
            if isinstance(layer, Dropout):
                counts.append(int(np.prod(in_shape)))
    return counts


# ---------------------------------------------------------------------------
# Weights and masks
# ---------------------------------------------------------------------------


@dataclass
class WeightSet:
    """Trainable parameter arrays in canonical layer order (W then b)."""

    arrays: list

    @property
    def dtype(self):
        return self.arrays[0].dtype

    def copy(self) -> "WeightSet":
        return WeightSet([a.copy() for a in self.arrays])

    def astype(self, dtype) -> "WeightSet":
        return WeightSet([np.ascontiguousarray(a, dtype=dtype) for a in self.arrays])

    def size(self) -> int:
        return int(sum(a.size for a in self.arrays))

    def allclose(self, other: "WeightSet", **kw) -> bool:
        return len(self.arrays) == len(other.arrays) and all(
            np.allclose(a, b, **kw) for a, b in zip(self.arrays, other.arrays)
        )


def init_weights(spec: NetworkSpec, rng: np.random.Generator,
                 dtype=np.float32) -> WeightSet:
    """Fan-in-scaled uniform initialisation; biases start at zero."""
    arrays = []
    for layer in spec.all_layers():
        if isinstance(layer, Conv2d):
            fan_in = layer.kernel * layer.kernel * layer.in_channels
            limit = math.sqrt(6.0 / fan_in)
            shape = (layer.kernel, layer.kernel, layer.in_channels, layer.out_channels)
            arrays.append(rng.uniform(-limit, limit, size=shape).astype(dtype))
            arrays.append(np.zeros(layer.out_channels, dtype=dtype))
        elif isinstance(layer, Dense):
            limit = math.sqrt(6.0 / layer.in_features)
            arrays.append(rng.uniform(-limit, limit,
                                      size=(layer.in_features, layer.out_features)).astype(dtype))
            arrays.append(np.zeros(layer.out_features, dtype=dtype))
    return WeightSet(arrays)


@dataclass(frozen=True)
class DropoutMask:
    """One sampled network realisation: per-unit keep indicators (0/1)."""

    vectors: tuple
    keep_prob: float


def sample_mask(spec: NetworkSpec, rate: float, rng: np.random.Generator) -> DropoutMask:
    """Draw i.i.d. Bernoulli(1 - rate) keep decisions for every dropout site."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    keep = 1.0 - rate
    vectors = tuple(
        (rng.random(n) < keep).astype(np.float64) for n in dropout_unit_counts(spec)
    )
    return DropoutMask(vectors=vectors, keep_prob=keep)


# ---------------------------------------------------------------------------
# Predictions and loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPrediction:
    """Per-sample (mu, log_var) head output; sigma2 = exp(log_var) + floor."""

    mu: np.ndarray
    log_var: np.ndarray
    sigma2: np.ndarray

    @classmethod
    def from_params(cls, mu, log_var) -> "GaussianPrediction":
        mu = np.asarray(mu, dtype=np.float64)
        log_var = np.asarray(log_var, dtype=np.float64)
        return cls(mu=mu, log_var=log_var, sigma2=np.exp(log_var) + VAR_FLOOR)

    @classmethod
    def from_moments(cls, mu, sigma2) -> "GaussianPrediction":
        sigma2 = np.asarray(sigma2, dtype=np.float64)
        if np.any(sigma2 <= VAR_FLOOR):
            raise ValueError(f"sigma2 must exceed the variance floor {VAR_FLOOR}")
        return cls(
            mu=np.asarray(mu, dtype=np.float64),
            log_var=np.log(sigma2 - VAR_FLOOR),
            sigma2=sigma2,
        )


def nll_loss(pred: GaussianPrediction, y) -> float:
    """Mean Gaussian negative log-likelihood over the batch."""
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("nll_loss needs a nonempty batch")
    mu = np.asarray(pred.mu, dtype=np.float64)
    s2 = np.asarray(pred.sigma2, dtype=np.float64)
    per = 0.5 * np.log(2.0 * np.pi * s2) + (y - mu) ** 2 / (2.0 * s2)
    return float(np.mean(per, dtype=np.float64))


# ---------------------------------------------------------------------------
# Forward / backward engine
# ---------------------------------------------------------------------------


def _conv_forward(x, W, b, stride):
    n, h, w, cin = x.shape
    k = W.shape[0]
    oh = _conv_out(h, k, stride)
    ow = _conv_out(w, k, stride)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # window axes arrive as (n, oh, ow, cin, kh, kw); reorder to match W
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, k * k * cin)
    out = cols @ W.reshape(k * k * cin, -1) + b
    return out.reshape(n, oh, ow, -1), (cols, x.shape)


def _conv_backward(gout, cache, W, stride):
    cols, x_shape = cache
    n, h, w, cin = x_shape
    k = W.shape[0]
    _, oh, ow, cout = gout.shape
    g2 = gout.reshape(n * oh * ow, cout)
    dW = (cols.T @ g2).reshape(W.shape)
    db = g2.sum(axis=0)
    dcols = g2 @ W.reshape(k * k * cin, cout).T
    d6 = dcols.reshape(n, oh, ow, k, k, cin)
    dx = np.zeros(x_shape, dtype=gout.dtype)
    for kh in range(k):
        for kw in range(k):
            dx[:, kh:kh + oh * stride:stride, kw:kw + ow * stride:stride, :] += d6[:, :, :, kh, kw, :]
    return dx, dW, db


def _pool_forward(x, pool, stride):
    win = sliding_window_view(x, (pool, pool), axis=(1, 2))[:, ::stride, ::stride]
    return win.mean(axis=(-2, -1)), x.shape


def _pool_backward(gout, x_shape, pool, stride):
    _, oh, ow, _ = gout.shape
    g = gout / (pool * pool)
    dx = np.zeros(x_shape, dtype=gout.dtype)
    for ph in range(pool):
        for pw in range(pool):
            dx[:, ph:ph + oh * stride:stride, pw:pw + ow * stride:stride, :] += g
    return dx


def _run_layers(layers, x, arrays, w_pos, mask, m_pos, tape):
    """Forward through one layer list, recording caches on the tape."""
    for layer in layers:
        if isinstance(layer, Conv2d):
            out, cache = _conv_forward(x, arrays[w_pos], arrays[w_pos + 1], layer.stride)
            tape.append((layer, w_pos, cache))
            w_pos += 2
            x = out
        elif isinstance(layer, Dense):
            tape.append((layer, w_pos, x))
            x = x @ arrays[w_pos] + arrays[w_pos + 1]
            w_pos += 2
        elif isinstance(layer, Relu):
            tape.append((layer, None, x > 0))
            x = np.maximum(x, 0)   # np.maximum propagates NaN to the output check
        elif isinstance(layer, AvgPool2d):
            x, x_shape = _pool_forward(x, layer.pool, layer.stride)
            tape.append((layer, None, x_shape))
        elif isinstance(layer, Flatten):
            tape.append((layer, None, x.shape))
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dropout):
            if mask is None:
                tape.append((layer, None, None))
            else:
                vec = mask.vectors[m_pos]
                scaled = (vec / mask.keep_prob).astype(x.dtype).reshape((1,) + x.shape[1:])
                tape.append((layer, None, scaled))
                x = x * scaled
            m_pos += 1
        elif isinstance(layer, Concat):
            tape.append((layer, None, None))
        else:  # pragma: no cover - spec validated at construction
            raise ValueError(f"unknown layer kind: {layer!r}")
    return x, w_pos, m_pos


def _backprop_layers(tape, gout, arrays, grads):
    """Reverse pass through one branch tape; fills `grads` in place."""
    for layer, w_pos, cache in reversed(tape):
        if isinstance(layer, Conv2d):
            gout, dW, db = _conv_backward(gout, cache, arrays[w_pos], layer.stride)
            grads[w_pos] += dW
            grads[w_pos + 1] += db
        elif isinstance(layer, Dense):
            x = cache
            grads[w_pos] += x.T @ gout
            grads[w_pos + 1] += gout.sum(axis=0)
            gout = gout @ arrays[w_pos].T
        elif isinstance(layer, Relu):
            gout = np.where(cache, gout, 0)
        elif isinstance(layer, AvgPool2d):
            gout = _pool_backward(gout, cache, layer.pool, layer.stride)
        elif isinstance(layer, Flatten):
            gout = gout.reshape(cache)
        elif isinstance(layer, Dropout):
            if cache is not None:
                gout = gout * cache
        elif isinstance(layer, Concat):
            pass
    return gout


def _prepare_inputs(spec, weights, patches, locs):
    dtype = weights.dtype
    p = np.asarray(patches)
    if p.ndim == 3:
        p = p[..., None]
    if p.ndim != 4 or p.shape[1:] != (spec.patch_size, spec.patch_size, spec.in_channels):
        raise ValueError(
            f"patch input shape {np.shape(patches)} does not match "
            f"({spec.patch_size}, {spec.patch_size}, {spec.in_channels})"
        )
    l = np.asarray(locs)
    if l.ndim != 2 or l.shape[1] != spec.loc_features:
        raise ValueError(f"location input shape {l.shape} does not match (n, {spec.loc_features})")
    if p.shape[0] != l.shape[0]:
        raise ValueError("patch and location batches differ in length")
    return p.astype(dtype, copy=False), l.astype(dtype, copy=False)


def _forward_with_tape(spec, weights, mask, patches, locs):
    if mask is not None and len(mask.vectors) != len(dropout_unit_counts(spec)):
        raise ValueError("mask does not match the network's dropout sites")
    x, l = _prepare_inputs(spec, weights, patches, locs)
    arrays = weights.arrays
    tape_p, tape_l, tape_h = [], [], []
    a, w_pos, m_pos = _run_layers(spec.patch_layers, x, arrays, 0, mask, 0, tape_p)
    b, w_pos, m_pos = _run_layers(spec.loc_layers, l, arrays, w_pos, mask, m_pos, tape_l)
    joined = np.concatenate([a, b], axis=1)
    out, w_pos, m_pos = _run_layers(spec.head_layers, joined, arrays, w_pos, mask, m_pos, tape_h)
    if w_pos != len(arrays):
        raise ValueError(f"weight set has {len(arrays)} arrays, spec consumes {w_pos}")
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite activation in forward pass")
    split = a.shape[1]
    return out, (tape_p, tape_l, tape_h, split)


def forward(spec: NetworkSpec, weights: WeightSet, mask: DropoutMask | None,
            patches, locs) -> GaussianPrediction:
    """Run the network; with mask=None dropout layers are the identity."""
    out, _ = _forward_with_tape(spec, weights, mask, patches, locs)
    return GaussianPrediction.from_params(out[:, 0], out[:, 1])


def _loss_gradients(out, y, freeze_log_var):
    """d(mean NLL)/d(mu, log_var), computed in 64-bit."""
    mu = out[:, 0].astype(np.float64)
    log_var = out[:, 1].astype(np.float64)
    if freeze_log_var:
        log_var = np.zeros_like(log_var)
    with np.errstate(over="ignore"):
        sigma2 = np.exp(log_var) + VAR_FLOOR
    if not np.all(np.isfinite(sigma2)):
        raise NumericError("variance overflow in loss")
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    resid = y - mu
    loss = float(np.mean(0.5 * np.log(2.0 * np.pi * sigma2) + resid ** 2 / (2.0 * sigma2)))
    dmu = (mu - y) / sigma2 / n
    if freeze_log_var:
        dlv = np.zeros_like(dmu)
    else:
        # exp(log_var)/sigma2 written as 1 - floor/sigma2: bounded in [0, 1)
        dlv = 0.5 * (1.0 - VAR_FLOOR / sigma2) * (1.0 - resid ** 2 / sigma2) / n
    return loss, dmu, dlv


def loss_and_grad(spec: NetworkSpec, weights: WeightSet, mask: DropoutMask | None,
                  patches, locs, y, freeze_log_var: bool = False):
    """Mean NLL and its exact gradient with respect to every weight array."""
    out, (tape_p, tape_l, tape_h, split) = _forward_with_tape(spec, weights, mask, patches, locs)
    loss, dmu, dlv = _loss_gradients(out, y, freeze_log_var)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    gout = np.stack([dmu, dlv], axis=1).astype(weights.dtype)

    arrays = weights.arrays
    grads = [np.zeros_like(a) for a in arrays]
    ghead = _backprop_layers(tape_h, gout, arrays, grads)
    _backprop_layers(tape_p, ghead[:, :split], arrays, grads)
    _backprop_layers(tape_l, ghead[:, split:], arrays, grads)
    return loss, WeightSet(grads)


def backward(spec: NetworkSpec, weights: WeightSet, mask: DropoutMask | None,
             patches, locs, y, freeze_log_var: bool = False) -> WeightSet:
    """Gradient of the mean NLL; see loss_and_grad."""
    return loss_and_grad(spec, weights, mask, patches, locs, y, freeze_log_var)[1]
