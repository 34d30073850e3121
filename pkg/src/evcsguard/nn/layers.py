"""Layers with explicit forward/backward passes (float64 numpy).

Every layer keeps its trainable tensors in ``params`` and the matching
gradients in ``grads``; non-trainable state (batch-norm running moments)
lives in ``state``.  ``forward`` caches what ``backward`` needs only when
``train=True``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, NumericalFault

INIT_STD = 0.05
LEAKY_SLOPE = 0.01


def truncated_normal(rng, shape, std=None):
    """Normal(0, std) redrawn outside +/- 2 std."""
    std = INIT_STD if std is None else std
    out = rng.normal(0.0, std, shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def sigmoid(z):
    # tanh form: overflow-free for any z
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.state = {}
        self._cache = None

    def build(self, in_shape, rng):
        """Create parameters for per-sample input shape; return output shape."""
        return in_shape

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _need_cache(self):
        if self._cache is None:
            raise NumericalFault(f"{self.kind}: backward without a cached training forward pass")
        return self._cache


class Dense(Layer):
    """Affine map on the last axis (time-distributed for 3-D/5-D input)."""

    kind = "dense"

    def __init__(self, units):
        super().__init__()
        self.units = int(units)

    def build(self, in_shape, rng):
        d = in_shape[-1]
        self.params = {"W": truncated_normal(rng, (d, self.units)), "b": np.zeros(self.units)}
        return in_shape[:-1] + (self.units,)

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self._need_cache()
        d = x.shape[-1]
        self.grads["W"] = x.reshape(-1, d).T @ dout.reshape(-1, self.units)
        self.grads["b"] = dout.reshape(-1, self.units).sum(axis=0)
        return dout @ self.params["W"].T


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope=LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x > 0
        return np.where(x > 0, x, self.slope * x)

    def backward(self, dout):
        mask = self._need_cache()
        return np.where(mask, dout, self.slope * dout)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False, rng=None):
        p = sigmoid(x)
        if train:
            self._cache = p
        return p

    def backward(self, dout):
        p = self._need_cache()
        return dout * p * (1.0 - p)


class Dropout(Layer):
    """Inverted dropout; identity at inference."""

    kind = "dropout"

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError("dropout rate must be in [0, 1)")
        self.rate = float(rate)

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._cache = 1.0 if train else None
            return x
        if rng is None:
            raise ConfigError("training-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._need_cache()


class BatchNorm(Layer):
    """Normalises over every axis except the last (features / channels)."""

    kind = "batchnorm"

    def __init__(self, momentum=0.9, eps=1e-7):
        super().__init__()
        self.momentum = momentum
        self.eps = eps

    def build(self, in_shape, rng):
        c = in_shape[-1]
        self.params = {"gamma": np.ones(c), "beta": np.zeros(c)}
        self.state = {"running_mean": np.zeros(c), "running_var": np.ones(c)}
        return in_shape

    def forward(self, x, train=False, rng=None):
        c = x.shape[-1]
        if train:
            flat = x.reshape(-1, c)
            mu = flat.mean(axis=0)
            var = flat.var(axis=0)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu) * inv
            self._cache = (xhat, inv)
            m = self.momentum
            self.state["running_mean"] = m * self.state["running_mean"] + (1 - m) * mu
            self.state["running_var"] = m * self.state["running_var"] + (1 - m) * var
        else:
            xhat = (x - self.state["running_mean"]) / np.sqrt(self.state["running_var"] + self.eps)
        self.last_xhat = xhat if train else None
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dout):
        xhat, inv = self._need_cache()
        c = dout.shape[-1]
        d = dout.reshape(-1, c)
        xh = xhat.reshape(-1, c)
        n = d.shape[0]
        self.grads["gamma"] = (d * xh).sum(axis=0)
        self.grads["beta"] = d.sum(axis=0)
        dxh = d * self.params["gamma"]
        dx = (inv / n) * (n * dxh - dxh.sum(axis=0) - xh * (dxh * xh).sum(axis=0))
        return dx.reshape(dout.shape)


class Flatten(Layer):
    kind = "flatten"

    def build(self, in_shape, rng):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._need_cache())


class Reshape(Layer):
    """Per-sample reshape, e.g. (240, 2) -> (12, 20, 2, 1) frames."""

    kind = "reshape"

    def __init__(self, target):
        super().__init__()
        self.target = tuple(int(t) for t in target)

    def build(self, in_shape, rng):
        if int(np.prod(in_shape)) != int(np.prod(self.target)):
            raise ConfigError(f"cannot reshape {in_shape} to {self.target}")
        return self.target

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x.shape
        return x.reshape((x.shape[0],) + self.target)

    def backward(self, dout):
        return dout.reshape(self._need_cache())


def _gates(z, n):
    i = sigmoid(z[..., :n])
    f = sigmoid(z[..., n:2 * n])
    g = np.tanh(z[..., 2 * n:3 * n])
    o = sigmoid(z[..., 3 * n:])
    return i, f, g, o


def _gate_grads(dh, dc_next, i, f, g, o, c_prev, tc):
    """Back through one cell update; returns (dz, dc_prev)."""
    do = dh * tc
    dc = dh * o * (1.0 - tc * tc) + dc_next
    dz = np.concatenate([dc * g * i * (1.0 - i),
                         dc * c_prev * f * (1.0 - f),
                         dc * i * (1.0 - g * g),
                         do * o * (1.0 - o)], axis=-1)
    return dz, dc * f


class LSTM(Layer):
    """Gate order i, f, g (cell candidate), o; forget-gate bias starts at 1."""

    kind = "lstm"

    def __init__(self, units, return_sequences=True):
        super().__init__()
        self.units = int(units)
        self.return_sequences = return_sequences

    def build(self, in_shape, rng):
        T, d = in_shape
        u = self.units
        b = np.zeros(4 * u)
        b[u:2 * u] = 1.0
        self.params = {"Wx": truncated_normal(rng, (d, 4 * u)), "Wh": truncated_normal(rng, (u, 4 * u)), "b": b}
        return (T, u) if self.return_sequences else (u,)

    def forward(self, x, train=False, rng=None):
        N, T, d = x.shape
        u = self.units
        Wh = self.params["Wh"]
        zx = x @ self.params["Wx"] + self.params["b"]
        h = np.zeros((N, u))
        c = np.zeros((N, u))
        H = np.empty((N, T, u))
        if train:
            gates = np.empty((T, 4, N, u))
            cs = np.empty((T + 1, N, u))
            tcs = np.empty((T, N, u))
            cs[0] = c
        for t in range(T):
            i, f, g, o = _gates(zx[:, t] + h @ Wh, u)
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            H[:, t] = h
            if train:
                gates[t] = (i, f, g, o)
                cs[t + 1] = c
                tcs[t] = tc
        if train:
            self._cache = (x, H, gates, cs, tcs)
        return H if self.return_sequences else h

    def backward(self, dout):
        x, H, gates, cs, tcs = self._need_cache()
        N, T, d = x.shape
        u = self.units
        Wh = self.params["Wh"]
        if self.return_sequences:
            dH = dout
        else:
            dH = np.zeros((N, T, u))
            dH[:, -1] = dout
        dZ = np.empty((N, T, 4 * u))
        dWh = np.zeros_like(Wh)
        dh_next = np.zeros((N, u))
        dc_next = np.zeros((N, u))
        for t in range(T - 1, -1, -1):
            i, f, g, o = gates[t]
            dz, dc_next = _gate_grads(dH[:, t] + dh_next, dc_next, i, f, g, o, cs[t], tcs[t])
            h_prev = H[:, t - 1] if t > 0 else np.zeros((N, u))
            dWh += h_prev.T @ dz
            dh_next = dz @ Wh.T
            dZ[:, t] = dz
        flat = dZ.reshape(-1, 4 * u)
        self.grads["Wx"] = x.reshape(-1, d).T @ flat
        self.grads["Wh"] = dWh
        self.grads["b"] = flat.sum(axis=0)
        return dZ @ self.params["Wx"].T


def _same_pad(k):
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def im2col(x, kh, kw):
    """(N, H, W, C) -> (N, H, W, kh*kw*C) patches with zero 'same' padding."""
    (pt, pb), (pl, pr) = _same_pad(kh), _same_pad(kw)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))        # N, H, W, C, kh, kw
    N, H, W, C = x.shape
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(N, H, W, kh * kw * C)


def col2im(cols, shape, kh, kw):
    """Adjoint of im2col: scatter-add patch gradients back to (N, H, W, C)."""
    N, H, W, C = shape
    (pt, pb), (pl, pr) = _same_pad(kh), _same_pad(kw)
    dxp = np.zeros((N, H + pt + pb, W + pl + pr, C))
    c6 = cols.reshape(N, H, W, kh, kw, C)
    for a in range(kh):
        for b in range(kw):
            dxp[:, a:a + H, b:b + W] += c6[:, :, :, a, b]
    return dxp[:, pt:pt + H, pl:pl + W]


class ConvLSTM2D(Layer):
    """LSTM cell whose input and recurrent maps are 'same'-padded convolutions.

    Input (N, T, H, W, C); output (N, T, H, W, F) or the last frame (N, H, W, F).
    """

    kind = "convlstm2d"

    def __init__(self, filters, kernel, return_sequences=True):
        super().__init__()
        self.filters = int(filters)
        self.kernel = (int(kernel[0]), int(kernel[1])) if np.ndim(kernel) else (int(kernel), int(kernel))
        self.return_sequences = return_sequences

    def build(self, in_shape, rng):
        T, H, W, C = in_shape
        kh, kw = self.kernel
        F = self.filters
        b = np.zeros(4 * F)
        b[F:2 * F] = 1.0
        self.params = {"Wx": truncated_normal(rng, (kh * kw * C, 4 * F)),
                       "Wh": truncated_normal(rng, (kh * kw * F, 4 * F)), "b": b}
        return (T, H, W, F) if self.return_sequences else (H, W, F)

    def forward(self, x, train=False, rng=None):
        N, T, H, W, C = x.shape
        kh, kw = self.kernel
        F = self.filters
        cols_x = im2col(x.reshape(N * T, H, W, C), kh, kw)
        zx = (cols_x @ self.params["Wx"] + self.params["b"]).reshape(N, T, H, W, 4 * F)
        Wh = self.params["Wh"]
        h = np.zeros((N, H, W, F))
        c = np.zeros((N, H, W, F))
        out = np.empty((N, T, H, W, F))
        if train:
            gates = np.empty((T, 4, N, H, W, F))
            cs = np.empty((T + 1, N, H, W, F))
            tcs = np.empty((T, N, H, W, F))
            cols_h = np.empty((T, N, H, W, kh * kw * F))
            cs[0] = c
        for t in range(T):
            ch = im2col(h, kh, kw)
            i, f, g, o = _gates(zx[:, t] + ch @ Wh, F)
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            out[:, t] = h
            if train:
                gates[t] = (i, f, g, o)
                cs[t + 1] = c
                tcs[t] = tc
                cols_h[t] = ch
        if train:
            self._cache = (x.shape, cols_x, gates, cs, tcs, cols_h)
        return out if self.return_sequences else h

    def backward(self, dout):
        shape, cols_x, gates, cs, tcs, cols_h = self._need_cache()
        N, T, H, W, C = shape
        kh, kw = self.kernel
        F = self.filters
        Wh = self.params["Wh"]
        if self.return_sequences:
            dO = dout
        else:
            dO = np.zeros((N, T, H, W, F))
            dO[:, -1] = dout
        dZ = np.empty((N, T, H, W, 4 * F))
        dWh = np.zeros_like(Wh)
        dh_next = np.zeros((N, H, W, F))
        dc_next = np.zeros((N, H, W, F))
        for t in range(T - 1, -1, -1):
            i, f, g, o = gates[t]
            dz, dc_next = _gate_grads(dO[:, t] + dh_next, dc_next, i, f, g, o, cs[t], tcs[t])
            dWh += cols_h[t].reshape(-1, kh * kw * F).T @ dz.reshape(-1, 4 * F)
            dh_next = col2im(dz @ Wh.T, (N, H, W, F), kh, kw)
            dZ[:, t] = dz
        flat = dZ.reshape(-1, 4 * F)
        self.grads["Wx"] = cols_x.reshape(-1, kh * kw * C).T @ flat
        self.grads["Wh"] = dWh
        self.grads["b"] = flat.sum(axis=0)
        dcols = (flat @ self.params["Wx"].T).reshape(N * T, H, W, kh * kw * C)
        return col2im(dcols, (N * T, H, W, C), kh, kw).reshape(shape)


LAYER_TYPES = {cls.kind: cls for cls in (Dense, LeakyReLU, Sigmoid, Dropout, BatchNorm, Flatten, Reshape,
                                         LSTM, ConvLSTM2D)}
