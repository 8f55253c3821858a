"""Dense layer primitives with hand-written gradients.

Every op comes as a ``*_forward`` / ``*_backward`` pair. Forward returns
``(out, cache)``; backward takes the upstream gradient and the cache and
returns the input gradient (plus a dict of parameter gradients where the op
has parameters). Arrays may carry arbitrary leading batch axes; the feature
axis is always last.

The ``Layer`` classes wrap these pairs with recorded state so they can be
composed, finite-difference checked, and driven through ``backward``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DegenerateInputError, DimensionError, StateError

NORM_EPS = 1e-12
LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_normalize(v, eps=NORM_EPS):
    """Scale ``v`` to unit L2 norm along the last axis."""
    v = np.asarray(v)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= eps):
        raise DegenerateInputError("cannot normalize a (near-)zero vector")
    return v / norm


def l2_normalize_forward(x, eps=NORM_EPS):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm <= eps):
        raise DegenerateInputError("cannot normalize a (near-)zero vector")
    y = x / norm
    return y, (y, norm)


def l2_normalize_backward(dy, cache):
    y, norm = cache
    return (dy - y * np.sum(dy * y, axis=-1, keepdims=True)) / norm


def linear_forward(x, w, b=None):
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not match weight rows {w.shape[0]}")
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_backward(dout, cache):
    x, w, has_bias = cache
    dx = dout @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    grads = {"w": x2.T @ d2}
    if has_bias:
        grads["b"] = d2.sum(axis=0)
    return dx, grads


def layer_norm_forward(x, gain, bias, eps=LN_EPS):
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError("layer-norm gain/bias width must match the input width")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dout, cache):
    xhat, inv, gain = cache
    width = xhat.shape[-1]
    d2 = dout.reshape(-1, width)
    grads = {
        "gain": np.sum(d2 * xhat.reshape(-1, width), axis=0),
        "bias": d2.sum(axis=0),
    }
    dxhat = dout * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, grads


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(dout, cache):
    x, cdf = cache
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dout * (cdf + x * pdf)


def gelu(x):
    return gelu_forward(np.asarray(x))[0]


def softmax_rows(x):
    x = np.asarray(x)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_forward(x):
    y = softmax_rows(x)
    return y, y


def softmax_backward(dy, y):
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def layer_norm(x, gain, bias, eps=LN_EPS):
    return layer_norm_forward(np.asarray(x), np.asarray(gain), np.asarray(bias), eps)[0]


ATTENTION_KEYS = ("wq", "wk", "wv", "wo")


def _split_heads(t, heads):
    b, n, d = t.shape
    return t.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(t):
    b, h, n, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def mhsa_forward(x, params, heads):
    """Multi-head self-attention over the token axis (second to last).

    ``x`` is ``(T, d)`` or ``(B, T, d)``; no positional information is added,
    so the op is equivariant to token permutations.
    """
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    squeeze = x.ndim == 2
    x3 = x[None] if squeeze else x
    scale = 1.0 / np.sqrt(d // heads)
    q = _split_heads(x3 @ params["wq"], heads)
    k = _split_heads(x3 @ params["wk"], heads)
    v = _split_heads(x3 @ params["wv"], heads)
    att = softmax_rows((q @ k.transpose(0, 1, 3, 2)) * scale)
    merged = _merge_heads(att @ v)
    out = merged @ params["wo"]
    cache = (x3, q, k, v, att, merged, params, heads, scale, squeeze)
    return (out[0] if squeeze else out), cache


def mhsa_backward(dout, cache):
    x3, q, k, v, att, merged, params, heads, scale, squeeze = cache
    d3 = dout[None] if squeeze else dout
    width = x3.shape[-1]
    flat_x = x3.reshape(-1, width)
    grads = {"wo": merged.reshape(-1, width).T @ d3.reshape(-1, width)}
    dctx = _split_heads(d3 @ params["wo"].T, heads)
    datt = dctx @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ dctx
    dscores = softmax_backward(datt, att) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dx = np.zeros_like(x3)
    for key, dpart in (("wq", dq), ("wk", dk), ("wv", dv)):
        dm = _merge_heads(dpart)
        grads[key] = flat_x.T @ dm.reshape(-1, width)
        dx += dm @ params[key].T
    return (dx[0] if squeeze else dx), grads


def mhsa(x, params, heads):
    return mhsa_forward(np.asarray(x), params, heads)[0]


TRANSFORMER_KEYS = ATTENTION_KEYS + ("ln1_g", "ln1_b", "w1", "w2", "ln2_g", "ln2_b")


def transformer_layer_forward(z, params, heads, eps=LN_EPS):
    """Post-norm layer: LN(z + MHSA(z)) followed by LN(zb + GeLU(zb W1) W2)."""
    att, c_att = mhsa_forward(z, params, heads)
    zb, c_ln1 = layer_norm_forward(z + att, params["ln1_g"], params["ln1_b"], eps)
    hidden, c_w1 = linear_forward(zb, params["w1"])
    act, c_act = gelu_forward(hidden)
    mlp, c_w2 = linear_forward(act, params["w2"])
    out, c_ln2 = layer_norm_forward(zb + mlp, params["ln2_g"], params["ln2_b"], eps)
    return out, (c_att, c_ln1, c_w1, c_act, c_w2, c_ln2)


def transformer_layer_backward(dout, cache):
    c_att, c_ln1, c_w1, c_act, c_w2, c_ln2 = cache
    d_res2, g_ln2 = layer_norm_backward(dout, c_ln2)
    d_act, g_w2 = linear_backward(d_res2, c_w2)
    d_hidden = gelu_backward(d_act, c_act)
    d_zb, g_w1 = linear_backward(d_hidden, c_w1)
    d_zb = d_zb + d_res2
    d_res1, g_ln1 = layer_norm_backward(d_zb, c_ln1)
    dz, grads = mhsa_backward(d_res1, c_att)
    dz = dz + d_res1
    grads.update(
        ln1_g=g_ln1["gain"], ln1_b=g_ln1["bias"], w1=g_w1["w"], w2=g_w2["w"],
        ln2_g=g_ln2["gain"], ln2_b=g_ln2["bias"],
    )
    return dz, grads


# --------------------------------------------------------------------------
# Stateful layer wrappers


@dataclass
class LayerGrads:
    params: dict = field(default_factory=dict)
    input: np.ndarray | None = None


class Layer:
    """Base wrapper: ``forward`` records a cache, ``backward`` consumes it."""

    def __init__(self):
        self.params = {}
        self._cache = None

    def forward(self, x):
        out, self._cache = self._forward(x)
        return out

    def backward(self, dout):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        dx, grads = self._backward(np.asarray(dout), self._cache)
        full = {k: grads.get(k, np.zeros_like(v)) for k, v in self.params.items()}
        return LayerGrads(params=full, input=dx)

    def sample_input(self, rng):
        raise NotImplementedError

    def _forward(self, x):
        raise NotImplementedError

    def _backward(self, dout, cache):
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, n_in, n_out, bias=True, rng=None, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.params["w"] = (rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(dtype)
        if bias:
            self.params["b"] = np.zeros(n_out, dtype=dtype)

    def _forward(self, x):
        return linear_forward(x, self.params["w"], self.params.get("b"))

    def _backward(self, dout, cache):
        return linear_backward(dout, cache)

    def sample_input(self, rng):
        return rng.standard_normal((3, self.params["w"].shape[0]))


class LayerNorm(Layer):
    def __init__(self, width, eps=LN_EPS, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.params["gain"] = np.ones(width, dtype=dtype)
        self.params["bias"] = np.zeros(width, dtype=dtype)

    def _forward(self, x):
        return layer_norm_forward(x, self.params["gain"], self.params["bias"], self.eps)

    def _backward(self, dout, cache):
        return layer_norm_backward(dout, cache)

    def sample_input(self, rng):
        return rng.standard_normal((4, self.params["gain"].shape[0]))


class GELU(Layer):
    def __init__(self, width=6):
        super().__init__()
        self.width = width

    def _forward(self, x):
        return gelu_forward(x)

    def _backward(self, dout, cache):
        return gelu_backward(dout, cache), {}

    def sample_input(self, rng):
        return 2.0 * rng.standard_normal((3, self.width))


class Softmax(Layer):
    def __init__(self, width=5):
        super().__init__()
        self.width = width

    def _forward(self, x):
        return softmax_forward(x)

    def _backward(self, dout, cache):
        return softmax_backward(dout, cache), {}

    def sample_input(self, rng):
        return rng.standard_normal((3, self.width))


class MultiHeadSelfAttention(Layer):
    def __init__(self, width, heads, rng=None, dtype=np.float64):
        super().__init__()
        if heads < 1 or width % heads:
            raise ConfigError(f"width {width} is not divisible by {heads} heads")
        rng = np.random.default_rng(rng)
        self.heads = heads
        for key in ATTENTION_KEYS:
            self.params[key] = (rng.standard_normal((width, width)) / np.sqrt(width)).astype(dtype)

    def _forward(self, x):
        return mhsa_forward(x, self.params, self.heads)

    def _backward(self, dout, cache):
        return mhsa_backward(dout, cache)

    def sample_input(self, rng):
        return rng.standard_normal((2, 4, self.params["wq"].shape[0]))


def init_transformer_params(width, hidden, rng, dtype=np.float64):
    rng = np.random.default_rng(rng)
    p = {k: rng.standard_normal((width, width)) / np.sqrt(width) for k in ATTENTION_KEYS}
    p["ln1_g"] = np.ones(width)
    p["ln1_b"] = np.zeros(width)
    p["w1"] = rng.standard_normal((width, hidden)) / np.sqrt(width)
    p["w2"] = rng.standard_normal((hidden, width)) / np.sqrt(hidden)
    p["ln2_g"] = np.ones(width)
    p["ln2_b"] = np.zeros(width)
    return {k: np.asarray(v, dtype=dtype) for k, v in p.items()}


class TransformerLayer(Layer):
    def __init__(self, width, hidden, heads, rng=None, dtype=np.float64, eps=LN_EPS):
        super().__init__()
        if heads < 1 or width % heads:
            raise ConfigError(f"width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.eps = eps
        self.params = init_transformer_params(width, hidden, rng, dtype)

    def _forward(self, x):
        return transformer_layer_forward(x, self.params, self.heads, self.eps)

    def _backward(self, dout, cache):
        return transformer_layer_backward(dout, cache)

    def sample_input(self, rng):
        return rng.standard_normal((2, 3, self.params["wq"].shape[0]))


class Sequential(Layer):
    """A chain of layers; parameters are namespaced ``"<index>.<name>"``."""

    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                self.params[f"{i}.{name}"] = value

    def _sync(self):
        for key, value in self.params.items():
            i, name = key.split(".", 1)
            self.layers[int(i)].params[name] = value

    def _forward(self, x):
        self._sync()
        for layer in self.layers:
            x = layer.forward(x)
        return x, True

    def _backward(self, dout, cache):
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            g = self.layers[i].backward(dout)
            dout = g.input
            grads.update({f"{i}.{k}": v for k, v in g.params.items()})
        return dout, grads

    def sample_input(self, rng):
        return self.layers[0].sample_input(rng)


class SumLoss(Layer):
    """Scalar ``sum(x)``."""

    def _forward(self, x):
        return np.sum(x), x.shape

    def _backward(self, dout, shape):
        return np.full(shape, float(dout)), {}


class HalfSquaredNorm(Layer):
    """Scalar ``||x||^2 / 2``."""

    def _forward(self, x):
        return 0.5 * np.sum(x * x), x

    def _backward(self, dout, x):
        return float(dout) * x, {}


# --------------------------------------------------------------------------
# Finite-difference checking


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numerical_gradient(fn, array, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. ``array``, perturbed in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        g[i] = (up - down) / (2.0 * h)
    return grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    trials: int

    def passed(self, tol=1e-5):
        return self.max_rel_error <= tol


def grad_check(layer, trials=10, seed=0, h=1e-5):
    """Compare analytic and central-difference gradients over random trials.

    Each trial redraws the layer's parameters and input from ``seed`` and
    checks ``sum(u * layer(x))`` for a random upstream ``u``.
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(trials):
        for key, value in layer.params.items():
            layer.params[key] = value.astype(np.float64) + 0.5 * rng.standard_normal(value.shape)
        if isinstance(layer, Sequential):
            layer._sync()
        x = np.asarray(layer.sample_input(rng), dtype=np.float64)
        out = layer.forward(x)
        upstream = rng.standard_normal(np.shape(out))

        def loss():
            return float(np.sum(upstream * layer.forward(x)))

        layer.forward(x)
        analytic = layer.backward(upstream)
        targets = [("input", x, analytic.input)]
        targets += [(k, layer.params[k], analytic.params[k]) for k in layer.params]
        for name, array, grad in targets:
            numeric = numerical_gradient(loss, array, h)
            worst[name] = max(worst.get(name, 0.0), relative_error(grad, numeric))
    return GradCheckReport(max(worst.values()), worst, trials)
