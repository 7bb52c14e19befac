"""Layered feed-forward model, loss heads, gradients and Hessian-vector products."""

import itertools
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, StaleCacheError
from .layers import Conv2d, Dense, Flatten, act_channel_count, layer_from_dict, layer_to_dict

_version_counter = itertools.count(1)


# -- loss heads --------------------------------------------------------------

@dataclass(frozen=True)
class SoftmaxCE:
    """Mean softmax cross-entropy over the batch."""

    kind = "softmax_ce"

    def loss(self, z, labels):
        zmax = z.max(axis=1, keepdims=True)
        shifted = z - zmax
        logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logsum
        B = z.shape[0]
        loss = -logp[np.arange(B), labels].mean()
        return loss, (np.exp(logp), labels)

    def grad(self, cache):
        p, labels = cache
        g = p.copy()
        g[np.arange(len(labels)), labels] -= 1.0
        return g / len(labels)

    def rgrad(self, cache, Rz):
        # softmax Jacobian (diag(p) - p p^T) applied per sample
        p, labels = cache
        inner = (Rz * p).sum(axis=-1, keepdims=True)
        return p * (Rz - inner) / len(labels)

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True, eq=False)
class QuadraticHead:
    """Loss = mean over samples of 0.5 * z^T A z, labels ignored.

    Used to build models whose Hessian is known in closed form.
    """

    matrix: np.ndarray
    kind = "quadratic"

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", 0.5 * (A + A.T))

    def loss(self, z, labels):
        zf = z.reshape(z.shape[0], -1)
        return 0.5 * np.einsum("bi,ij,bj->", zf, self.matrix, zf) / z.shape[0], z

    def grad(self, z):
        zf = z.reshape(z.shape[0], -1)
        return (zf @ self.matrix).reshape(z.shape) / z.shape[0]

    def rgrad(self, z, Rz):
        K = Rz.shape[0]
        Rf = Rz.reshape(K, z.shape[0], -1)
        return (Rf @ self.matrix).reshape(Rz.shape) / z.shape[0]

    def to_dict(self):
        return {"kind": self.kind, "matrix": self.matrix.tolist()}


def head_from_dict(d):
    if d["kind"] == "softmax_ce":
        return SoftmaxCE()
    if d["kind"] == "quadratic":
        return QuadraticHead(np.asarray(d["matrix"]))
    raise ValueError(f"unknown head {d['kind']!r}")


# -- model -------------------------------------------------------------------

@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) < 1:
            raise ValueError("batch must hold at least one sample")
        if len(self.labels) != len(self.inputs):
            raise ValueError("inputs and labels differ in length")

    def __len__(self):
        return len(self.inputs)


@dataclass
class Model:
    layers: tuple
    params: dict
    input_shape: tuple
    head: object = field(default_factory=SoftmaxCE)
    # layer id -> object with .apply(W) -> (W_eff, ste_mask); see quantize.WeightQuantizer
    weight_quant: dict = field(default_factory=dict)
    # relu layer id -> bits per activation channel (alpha lives in params)
    act_bits: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self._shapes = self._infer_shapes()
        for i, layer in enumerate(self.layers):
            expected = layer.param_shapes()
            got = self.params.get(i, {})
            for name, shape in expected.items():
                if name not in got or tuple(got[name].shape) != tuple(shape):
                    actual = got[name].shape if name in got else ()
                    raise ShapeError(i, shape, actual)
        self.touch()

    def _infer_shapes(self):
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(layer.output_shape(shapes[-1], i))
        return shapes

    def touch(self):
        """Mark the model as mutated; caches from earlier forwards become stale."""
        self._version = next(_version_counter)

    # shapes and layout

    def out_shape(self, layer_id):
        """Per-sample output shape of layer ``layer_id``."""
        return self._shapes[layer_id + 1]

    @property
    def num_classes(self):
        return self._shapes[-1][0]

    def weight_layers(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Dense, Conv2d))]

    def activation_layers(self):
        return [i for i, l in enumerate(self.layers) if l.kind == "relu"]

    def weight_channels(self, layer_id):
        return self.params[layer_id]["weight"].shape[0]

    def act_channels(self, layer_id):
        return act_channel_count(self.out_shape(layer_id))

    def param_layout(self):
        """(layer id, name, shape, offset) for every tensor in flat order."""
        out = []
        offset = 0
        for i in sorted(self.params):
            for name in sorted(self.params[i], key=_param_order):
                shape = self.params[i][name].shape
                out.append((i, name, shape, offset))
                offset += int(np.prod(shape))
        return out

    @property
    def num_params(self):
        return sum(int(np.prod(s)) for _, _, s, _ in self.param_layout())

    def weight_slice(self, layer_id):
        for i, name, shape, off in self.param_layout():
            if i == layer_id and name == "weight":
                return slice(off, off + int(np.prod(shape)))
        raise KeyError(layer_id)

    def flat_params(self):
        return np.concatenate([self.params[i][n].ravel() for i, n, _, _ in self.param_layout()])

    def with_flat_params(self, vec):
        m = self.copy()
        for i, name, shape, off in m.param_layout():
            m.params[i][name] = np.array(vec[off:off + int(np.prod(shape))]).reshape(shape)
        m.touch()
        return m

    def copy(self):
        return Model(
            layers=self.layers,
            params={i: {n: t.copy() for n, t in d.items()} for i, d in self.params.items()},
            input_shape=self.input_shape,
            head=self.head,
            weight_quant=dict(self.weight_quant),
            act_bits={i: b.copy() for i, b in self.act_bits.items()},
            name=self.name,
        )

    def descriptor(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer_to_dict(l) for l in self.layers],
            "head": self.head.to_dict(),
        }

    @classmethod
    def from_descriptor(cls, desc, params):
        return cls(
            layers=[layer_from_dict(d) for d in desc["layers"]],
            params=params,
            input_shape=desc["input_shape"],
            head=head_from_dict(desc["head"]),
            name=desc.get("name", ""),
        )

    # passes

    def effective_params(self):
        """Parameters as seen by the forward pass, plus straight-through masks."""
        eff, masks = {}, {}
        for i, layer in enumerate(self.layers):
            p = self.params.get(i, {})
            wq = self.weight_quant.get(i)
            if wq is not None:
                w_q, mask = wq.apply(p["weight"])
                p = dict(p, weight=w_q)
                masks[i] = mask
            eff[i] = p
        return eff, masks

    def check_inputs(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(0, self.input_shape, x.shape[1:])

    def forward_tape(self, x, stop=None):
        """Run layers 0..stop-1 (all by default), recording caches."""
        x = np.asarray(x, dtype=np.float64)
        self.check_inputs(x)
        eff, masks = self.effective_params()
        caches, acts = [], [x]
        n = len(self.layers) if stop is None else stop
        for i in range(n):
            x, c = self.layers[i].forward(x, eff[i], self.act_bits.get(i))
            caches.append(c)
            acts.append(x)
        return Tape(self._version, id(self), eff, masks, caches, acts)

    def predict(self, x, chunk=1000):
        out = []
        for s in range(0, len(x), chunk):
            out.append(self.forward_tape(x[s:s + chunk]).acts[-1])
        return np.concatenate(out)

    def backward_tape(self, tape, dout, stop=0):
        """Backpropagate ``dout`` from the output down to layer ``stop``."""
        grads = {}
        dy = dout
        for i in range(len(self.layers) - 1, stop - 1, -1):
            dy, g = self.layers[i].backward(dy, tape.caches[i], tape.eff[i])
            if i in tape.masks and "weight" in g:
                g["weight"] = g["weight"] * tape.masks[i]
            grads[i] = g
        return dy, grads


@dataclass
class Tape:
    version: int
    model_id: int
    eff: dict
    masks: dict
    caches: list
    acts: list


def _param_order(name):
    return {"weight": 0, "bias": 1, "alpha": 2}.get(name, 3)


@dataclass
class Gradient:
    """Per-parameter gradient tensors mirroring ``Model.params``."""

    tensors: dict

    def flatten(self, model):
        parts = []
        for i, name, shape, _ in model.param_layout():
            g = self.tensors.get(i, {}).get(name)
            parts.append(np.zeros(int(np.prod(shape))) if g is None else np.ravel(g))
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, model, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (model.num_params,):
            raise ValueError(f"expected flat vector of length {model.num_params}, got {vec.shape}")
        tensors = {}
        for i, name, shape, off in model.param_layout():
            tensors.setdefault(i, {})[name] = vec[off:off + int(np.prod(shape))].reshape(shape).copy()
        return cls(tensors)


@dataclass
class ForwardCache:
    tape: Tape
    head_cache: object
    loss: float


def forward_loss(model, batch):
    """Mean loss of ``model`` on ``batch`` and the cache needed by backward/hvp."""
    tape = model.forward_tape(batch.inputs)
    z = tape.acts[-1]
    if isinstance(model.head, SoftmaxCE) and np.any(batch.labels >= model.num_classes):
        raise ValueError(f"labels must be < {model.num_classes}")
    loss, hc = model.head.loss(z, batch.labels)
    return float(loss), ForwardCache(tape, hc, float(loss))


def _check_fresh(model, cache):
    if cache.tape.version != model._version or cache.tape.model_id != id(model):
        raise StaleCacheError("cache was produced by a different model state")


def backward(model, cache):
    """Exact gradient of the cached loss with respect to every parameter."""
    _check_fresh(model, cache)
    dz = model.head.grad(cache.head_cache)
    _, grads = model.backward_tape(cache.tape, dz)
    return Gradient(grads)


def loss_and_grad(model, batch):
    loss, cache = forward_loss(model, batch)
    return loss, backward(model, cache)


def hvp(model, batch, v, target="weights", layer=None, cache=None, lowest=0):
    """Hessian-vector product(s) of the batch loss, computed analytically.

    ``v`` is a flat vector or a (K, n) stack of them. For ``target="weights"``
    n is the model's parameter count. For ``target="activations"`` n is the
    element count of the output of ``layer`` over the whole batch and the
    Hessian is taken with respect to those activation values.

    Uses the R-operator: a directional derivative of the forward pass followed
    by a directional derivative of the backward pass on the same tape.
    ``lowest`` stops the weight pass early; entries for layers below it are
    then left at zero, which is enough when only a diagonal block is needed.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    V = v[None] if single else v
    K = V.shape[0]
    if cache is None:
        _, cache = forward_loss(model, batch)
    else:
        _check_fresh(model, cache)
    tape = cache.tape
    B = tape.acts[0].shape[0]
    layers = model.layers

    if target == "weights":
        if V.shape[1] != model.num_params:
            raise ValueError(f"direction length {V.shape[1]} != parameter count {model.num_params}")
        Rp = {i: {} for i in range(len(layers))}
        for i, name, shape, off in model.param_layout():
            t = V[:, off:off + int(np.prod(shape))].reshape(K, *shape)
            if not np.any(t):
                continue
            if name == "weight" and i in tape.masks:
                t = t * tape.masks[i]
            Rp[i][name] = t
        start = 0
        Rx = None
    elif target == "activations":
        if layer is None or not 0 <= layer < len(layers):
            raise ValueError("activations target needs a valid layer id")
        if isinstance(layers[layer], Flatten):
            raise ValueError(f"layer {layer} ({layers[layer].kind}) has no activations of its own")
        shape = model.out_shape(layer)
        n = B * int(np.prod(shape))
        if V.shape[1] != n:
            raise ValueError(f"direction length {V.shape[1]} != activation count {n}")
        Rp = {i: {} for i in range(len(layers))}
        start = layer + 1
        Rx = V.reshape(K, B, *shape)
    else:
        raise ValueError(f"unknown target {target!r}")

    R_in = [None] * len(layers)
    for i in range(start, len(layers)):
        R_in[i] = Rx
        Rx = layers[i].rforward(Rx, tape.caches[i], tape.eff[i], Rp[i])
    Rz = Rx if Rx is not None else np.zeros((K, *tape.acts[-1].shape))

    dy = model.head.grad(cache.head_cache)
    Rdy = model.head.rgrad(cache.head_cache, Rz)
    out_grads = {}
    for i in range(len(layers) - 1, max(start, lowest) - 1, -1):
        cache_i, p_i = tape.caches[i], tape.eff[i]
        Rdx, Rg = layers[i].rbackward(dy, Rdy, cache_i, p_i, Rp[i], R_in[i])
        dy, _ = layers[i].backward(dy, cache_i, p_i)
        if "weight" in Rg and Rg["weight"] is not None and i in tape.masks:
            Rg["weight"] = Rg["weight"] * tape.masks[i]
        out_grads[i] = Rg
        Rdy = Rdx

    if target == "activations":
        out = np.zeros((K, V.shape[1])) if Rdy is None else Rdy.reshape(K, -1)
    else:
        out = np.zeros((K, model.num_params))
        for i, name, shape, off in model.param_layout():
            g = out_grads.get(i, {}).get(name)
            if g is not None:
                out[:, off:off + int(np.prod(shape))] = g.reshape(K, -1)
    return out[0] if single else out


def activation_count(model, layer, batch_size):
    return batch_size * int(np.prod(model.out_shape(layer)))


