"""Layer descriptors with forward, backward and R-operator passes.

Every layer works on per-sample batches of float64 arrays. R-operator passes
(directional derivatives of the forward and backward passes) carry a leading
axis of K directions so that several Hessian-vector products can share one
tape. ``None`` stands for an all-zero R quantity and lets layers skip work.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = True
    kind = "dense"

    def param_shapes(self):
        shapes = {"weight": (self.out_features, self.in_features)}
        if self.bias:
            shapes["bias"] = (self.out_features,)
        return shapes

    def output_shape(self, in_shape, layer_id):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(layer_id, (self.in_features,), in_shape)
        return (self.out_features,)

    def forward(self, x, p, q=None):
        y = x @ p["weight"].T
        if self.bias:
            y = y + p["bias"]
        return y, x

    def backward(self, dy, x, p):
        grads = {"weight": dy.T @ x}
        if self.bias:
            grads["bias"] = dy.sum(axis=0)
        return dy @ p["weight"], grads

    def rforward(self, Rx, x, p, Rp):
        Ry = None
        if Rx is not None:
            Ry = Rx @ p["weight"].T
        if Rp.get("weight") is not None:
            Ry = _add(Ry, np.matmul(x, Rp["weight"].transpose(0, 2, 1)))
        if self.bias and Rp.get("bias") is not None:
            Ry = _add(Ry, Rp["bias"][:, None, :])
        return Ry

    def rbackward(self, dy, Rdy, x, p, Rp, Rx):
        RW = Rp.get("weight")
        Rgrads = {}
        Rdx = None
        gw = None
        if Rdy is not None:
            gw = np.matmul(Rdy.transpose(0, 2, 1), x)
            Rdx = Rdy @ p["weight"]
            if self.bias:
                Rgrads["bias"] = Rdy.sum(axis=1)
        if Rx is not None:
            gw = _add(gw, np.matmul(dy.T, Rx))
        if RW is not None:
            Rdx = _add(Rdx, np.matmul(dy, RW))
        Rgrads["weight"] = gw
        return Rdx, Rgrads


def _im2col(x, kh, kw, pad):
    """(B, C, H, W) -> (B*Ho*Wo, C*kh*kw) patch matrix, stride 1."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # B, C, Ho, Wo, kh, kw
    B, C, Ho, Wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)


def _col2im(cols, x_shape, kh, kw, pad):
    B, C, H, W = x_shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    cols = cols.reshape(B, Ho, Wo, C, kh, kw)
    out = np.zeros((B, C, Hp, Wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + Ho, j:j + Wo] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return out


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kh: int = 3
    kw: int = 3
    padding: int = 1
    bias: bool = True
    kind = "conv2d"

    def param_shapes(self):
        shapes = {"weight": (self.out_channels, self.in_channels, self.kh, self.kw)}
        if self.bias:
            shapes["bias"] = (self.out_channels,)
        return shapes

    def output_shape(self, in_shape, layer_id):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(layer_id, (self.in_channels, "H", "W"), in_shape)
        _, H, W = in_shape
        Ho = H + 2 * self.padding - self.kh + 1
        Wo = W + 2 * self.padding - self.kw + 1
        if Ho < 1 or Wo < 1:
            raise ShapeError(layer_id, (self.in_channels, self.kh, self.kw), in_shape)
        return (self.out_channels, Ho, Wo)

    def _out_hw(self, x_shape):
        return (x_shape[-2] + 2 * self.padding - self.kh + 1,
                x_shape[-1] + 2 * self.padding - self.kw + 1)

    def _to_nchw(self, flat, lead, Ho, Wo):
        # flat: (*lead, B*Ho*Wo, O) -> (*lead, B, O, Ho, Wo)
        *pre, _, O = flat.shape
        out = flat.reshape(*pre, -1, Ho, Wo, O)
        return np.moveaxis(out, -1, -3)

    def _to_rows(self, t):
        # (..., B, O, Ho, Wo) -> (..., B*Ho*Wo, O)
        t = np.moveaxis(t, -3, -1)
        *pre, B, Ho, Wo, O = t.shape
        return t.reshape(*pre, B * Ho * Wo, O)

    def forward(self, x, p, q=None):
        cols = _im2col(x, self.kh, self.kw, self.padding)
        Wm = p["weight"].reshape(self.out_channels, -1)
        y = cols @ Wm.T
        if self.bias:
            y = y + p["bias"]
        Ho, Wo = self._out_hw(x.shape)
        return self._to_nchw(y, (), Ho, Wo), (x.shape, cols)

    def backward(self, dy, cache, p):
        x_shape, cols = cache
        dyr = self._to_rows(dy)
        Wm = p["weight"].reshape(self.out_channels, -1)
        grads = {"weight": (dyr.T @ cols).reshape(p["weight"].shape)}
        if self.bias:
            grads["bias"] = dyr.sum(axis=0)
        dx = _col2im(dyr @ Wm, x_shape, self.kh, self.kw, self.padding)
        return dx, grads

    def rforward(self, Rx, cache, p, Rp):
        x_shape, cols = cache
        Ho, Wo = self._out_hw(x_shape)
        Wm = p["weight"].reshape(self.out_channels, -1)
        Ry = None
        if Rx is not None:
            K = Rx.shape[0]
            Rcols = _im2col(Rx.reshape(-1, *Rx.shape[2:]), self.kh, self.kw, self.padding)
            Ry = (Rcols @ Wm.T).reshape(K, -1, self.out_channels)
        RW = Rp.get("weight")
        if RW is not None:
            RWm = RW.reshape(RW.shape[0], self.out_channels, -1)
            Ry = _add(Ry, np.matmul(cols, RWm.transpose(0, 2, 1)))
        if self.bias and Rp.get("bias") is not None:
            Ry = _add(Ry, Rp["bias"][:, None, :])
        if Ry is None:
            return None
        return self._to_nchw(Ry, None, Ho, Wo)

    def rbackward(self, dy, Rdy, cache, p, Rp, Rx):
        x_shape, cols = cache
        Wm = p["weight"].reshape(self.out_channels, -1)
        wshape = p["weight"].shape
        Rgrads = {}
        gw = None
        dcols = None
        if Rdy is not None:
            K = Rdy.shape[0]
            Rdyr = self._to_rows(Rdy)  # K, N, O
            gw = np.matmul(Rdyr.transpose(0, 2, 1), cols)
            dcols = Rdyr @ Wm
            if self.bias:
                Rgrads["bias"] = Rdyr.sum(axis=1)
        dyr = None
        if Rx is not None:
            K = Rx.shape[0]
            dyr = self._to_rows(dy)
            Rcols = _im2col(Rx.reshape(-1, *Rx.shape[2:]), self.kh, self.kw, self.padding)
            Rcols = Rcols.reshape(K, -1, Rcols.shape[-1])
            gw = _add(gw, np.matmul(dyr.T, Rcols))
        RW = Rp.get("weight")
        if RW is not None:
            if dyr is None:
                dyr = self._to_rows(dy)
            RWm = RW.reshape(RW.shape[0], self.out_channels, -1)
            dcols = _add(dcols, np.matmul(dyr, RWm))
        if gw is not None:
            gw = gw.reshape(gw.shape[0], *wshape)
        Rgrads["weight"] = gw
        Rdx = None
        if dcols is not None:
            K = dcols.shape[0]
            Rdx = _col2im(dcols.reshape(-1, dcols.shape[-1]), (K * x_shape[0], *x_shape[1:]),
                          self.kh, self.kw, self.padding).reshape(K, *x_shape)
        return Rdx, Rgrads


def act_channel_count(shape):
    """Activation channels of a per-sample shape: feature maps for (C, H, W), one otherwise."""
    return shape[0] if len(shape) == 3 else 1


def _per_channel(v, ndim):
    """Broadcast a per-channel vector against a batched activation of ``ndim`` dims."""
    if ndim == 4:
        return v[:, None, None]
    return v[0]


@dataclass(frozen=True)
class ReLU:
    """ReLU, optionally followed by PACT clipping and uniform quantization.

    Quantization is active when the layer's parameters carry ``alpha`` (one
    clip threshold per activation channel) and ``q`` gives bits per channel.
    """

    kind = "relu"

    def param_shapes(self):
        return {}

    def output_shape(self, in_shape, layer_id):
        return tuple(in_shape)

    def forward(self, x, p, q=None):
        pos = x > 0
        y = np.where(pos, x, 0.0)
        alpha = p.get("alpha")
        if alpha is None:
            return y, (pos, None)
        a = _per_channel(alpha, x.ndim)
        sat = y >= a
        inside = pos & ~sat
        y = np.minimum(y, a)
        levels = 2.0 ** _per_channel(np.asarray(q, dtype=np.float64), x.ndim) - 1.0
        step = a / levels
        y = np.floor(y / step + 0.5) * step
        return y, (inside, sat)

    def _reduce_alpha(self, g, ndim):
        # g: (..., B, C, H, W) or (..., B, F)
        if ndim == 4:
            return g.sum(axis=(-4, -2, -1))
        return g.sum(axis=(-2, -1))[..., None]

    def backward(self, dy, cache, p):
        inside, sat = cache
        grads = {}
        if sat is not None:
            grads["alpha"] = self._reduce_alpha(np.where(sat, dy, 0.0), dy.ndim)
        return np.where(inside, dy, 0.0), grads

    def rforward(self, Rx, cache, p, Rp):
        inside, sat = cache
        Ry = None if Rx is None else np.where(inside, Rx, 0.0)
        Ra = Rp.get("alpha")
        if sat is not None and Ra is not None:
            if inside.ndim == 4:
                Ra_b = Ra[:, None, :, None, None]
            else:
                Ra_b = Ra[:, 0][:, None, None]
            Ry = _add(Ry, np.where(sat, Ra_b, 0.0))
        return Ry

    def rbackward(self, dy, Rdy, cache, p, Rp, Rx):
        inside, sat = cache
        if Rdy is None:
            return None, {}
        Rgrads = {}
        if sat is not None:
            Rgrads["alpha"] = self._reduce_alpha(np.where(sat, Rdy, 0.0), inside.ndim)
        return np.where(inside, Rdy, 0.0), Rgrads


@dataclass(frozen=True)
class Sigmoid:
    kind = "sigmoid"

    def param_shapes(self):
        return {}

    def output_shape(self, in_shape, layer_id):
        return tuple(in_shape)

    def forward(self, x, p, q=None):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y

    def backward(self, dy, y, p):
        return dy * y * (1.0 - y), {}

    def rforward(self, Rx, y, p, Rp):
        return None if Rx is None else Rx * (y * (1.0 - y))

    def rbackward(self, dy, Rdy, y, p, Rp, Rx):
        d1 = y * (1.0 - y)
        out = None if Rdy is None else Rdy * d1
        if Rx is not None:
            # d/dx of y(1-y) = y(1-y)(1-2y)
            out = _add(out, dy * d1 * (1.0 - 2.0 * y) * Rx)
        return out, {}


@dataclass(frozen=True)
class MaxPool2x2:
    kind = "maxpool2x2"

    def param_shapes(self):
        return {}

    def output_shape(self, in_shape, layer_id):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise ShapeError(layer_id, ("C", "even H", "even W"), in_shape)
        C, H, W = in_shape
        return (C, H // 2, W // 2)

    @staticmethod
    def _windows(x):
        *lead, C, H, W = x.shape
        w = x.reshape(*lead, C, H // 2, 2, W // 2, 2)
        w = np.moveaxis(w, -3, -2)  # ..., C, H/2, W/2, 2, 2
        return w.reshape(*lead, C, H // 2, W // 2, 4)

    @staticmethod
    def _unwindows(w, shape):
        *lead, C, H2, W2, _ = w.shape
        w = w.reshape(*lead, C, H2, W2, 2, 2)
        w = np.moveaxis(w, -2, -3)
        return w.reshape(*lead, C, H2 * 2, W2 * 2)

    def forward(self, x, p, q=None):
        w = self._windows(x)
        idx = np.argmax(w, axis=-1)  # first maximum on ties
        y = np.take_along_axis(w, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, cache, p):
        idx, shape = cache
        onehot = idx[..., None] == np.arange(4)
        return self._unwindows(np.where(onehot, dy[..., None], 0.0), shape), {}

    def rforward(self, Rx, cache, p, Rp):
        if Rx is None:
            return None
        idx, _ = cache
        w = self._windows(Rx)
        return np.take_along_axis(w, np.broadcast_to(idx, w.shape[:-1])[..., None], axis=-1)[..., 0]

    def rbackward(self, dy, Rdy, cache, p, Rp, Rx):
        if Rdy is None:
            return None, {}
        idx, shape = cache
        onehot = idx[..., None] == np.arange(4)
        return self._unwindows(np.where(onehot, Rdy[..., None], 0.0), shape), {}


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def param_shapes(self):
        return {}

    def output_shape(self, in_shape, layer_id):
        return (int(np.prod(in_shape)),)

    def forward(self, x, p, q=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape, p):
        return dy.reshape(shape), {}

    def rforward(self, Rx, shape, p, Rp):
        return None if Rx is None else Rx.reshape(Rx.shape[0], shape[0], -1)

    def rbackward(self, dy, Rdy, shape, p, Rp, Rx):
        return (None if Rdy is None else Rdy.reshape(Rdy.shape[0], *shape)), {}


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, Sigmoid, MaxPool2x2, Flatten)}


def layer_to_dict(layer):
    d = {"kind": layer.kind}
    for name in getattr(layer, "__dataclass_fields__", {}):
        d[name] = getattr(layer, name)
    return d


def layer_from_dict(d):
    d = dict(d)
    cls = LAYER_TYPES[d.pop("kind")]
    return cls(**d)
