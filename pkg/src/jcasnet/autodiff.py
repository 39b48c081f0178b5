"""Tape-based reverse-mode differentiation for small dense networks.

Usage::

    with Tape() as tape:
        loss = loss_mse(net(x), y)
    grads = tape.backward(loss)        # {Parameter: ndarray}
    opt.step(grads)

Operations only record while a tape is active; outside a tape the same code
runs as plain numpy evaluation.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

PROB_CLAMP = 1e-12


class StateError(RuntimeError):
    """Tape used out of order (e.g. backward without a recorded forward)."""


class Tape:
    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: "Tensor", seed: float = 1.0) -> dict:
        """Gradients of ``seed * loss`` for every parameter reached.

        Nodes are visited once each in reverse recording order, which is a
        reverse topological order. Parameters not connected to ``loss`` are
        absent from the result.
        """
        if self.consumed:
            raise StateError("tape already consumed by a previous backward pass")
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise StateError("backward called before forward: loss not recorded on this tape")
        self.consumed = True
        pending = {id(loss): np.full_like(loss.data, seed)}
        grads: dict[Parameter, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if isinstance(parent, Parameter):
                    grads[parent] = grads[parent] + pg if parent in grads else pg
                else:
                    key = id(parent)
                    pending[key] = pending[key] + pg if key in pending else pg
        return grads


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor({self.data!r})"

    def __len__(self):
        return len(self.data)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(as_tensor(other)))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)

    __hash__ = object.__hash__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    tape = Tape.active()
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.parents = parents
        out.backward_fn = backward_fn
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(out)
    return out


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _node(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = sigmoid_np(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def elu(a: Tensor) -> Tensor:
    ad = a.data
    pos = ad >= 0
    out = np.where(pos, ad, np.expm1(np.minimum(ad, 0.0)))
    return _node(out, (a,), lambda g: (g * np.where(pos, 1.0, out + 1.0),))


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = softmax_np(a.data, axis)
    return _node(
        out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _node(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), lambda g: (g.T,))


def take(a: Tensor, idx) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate gradient."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), back)


def take_along(a: Tensor, idx: np.ndarray, axis: int = -1) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, _along_index(idx, axis, shape), g)
        return (full,)

    return _node(np.take_along_axis(a.data, idx, axis), (a,), back)


def _along_index(idx, axis, shape):
    axis = axis % len(shape)
    grids = list(np.indices(idx.shape, sparse=True))
    grids[axis] = idx
    return tuple(grids)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * mask, sa), _unbroadcast(g * ~mask, sb)),
    )


# ------------------------------------------------------------ complex pairs


class Cplx:
    """Complex tensor held as separate real and imaginary real Tensors."""

    __slots__ = ("re", "im")

    def __init__(self, re, im):
        self.re = as_tensor(re)
        self.im = as_tensor(im)

    @classmethod
    def const(cls, z) -> "Cplx":
        z = np.asarray(z)
        return cls(Tensor(z.real), Tensor(z.imag))

    @property
    def shape(self):
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    def __getitem__(self, idx):
        return Cplx(self.re[idx], self.im[idx])

    def __add__(self, other):
        other = other if isinstance(other, Cplx) else Cplx.const(other)
        return Cplx(self.re + other.re, self.im + other.im)

    def __mul__(self, other):
        if isinstance(other, Cplx):
            return Cplx(
                self.re * other.re - self.im * other.im,
                self.re * other.im + self.im * other.re,
            )
        other = np.asarray(other)
        if np.iscomplexobj(other):
            return Cplx(
                self.re * other.real - self.im * other.imag,
                self.re * other.imag + self.im * other.real,
            )
        return Cplx(self.re * other, self.im * other)

    __rmul__ = __mul__

    def conj(self) -> "Cplx":
        return Cplx(self.re, -self.im)

    def abs2(self) -> Tensor:
        return self.re * self.re + self.im * self.im

    def inv(self) -> "Cplx":
        d = self.abs2()
        return Cplx(self.re / d, -self.im / d)

    def rmatvec(self, m: np.ndarray) -> "Cplx":
        """``m @ self`` for a constant complex matrix ``m`` and column data."""
        mr, mi = np.real(m), np.imag(m)
        return Cplx(mr @ self.re - mi @ self.im, mr @ self.im + mi @ self.re)

    def to_real(self) -> Tensor:
        """Concatenate ``[re, im]`` along the last axis."""
        return concat([self.re, self.im], axis=-1)


def complex_to_real(z: np.ndarray) -> np.ndarray:
    return np.concatenate([np.real(z), np.imag(z)], axis=-1)


# ------------------------------------------------------------------ network

TRANSFORMS = ("linear", "mean_power_norm", "power_norm", "softmax", "sigmoid", "scaled_tanh")


def _output_transform(x: Tensor, kind: str) -> Tensor:
    if kind == "linear":
        return x
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis=-1)
    if kind == "scaled_tanh":
        # tanh rounds to exactly 1 in float64 for large inputs; keep the range open
        edge = np.nextafter(np.pi / 2, 0.0)
        return clip(tanh(x) * (np.pi / 2), -edge, edge)
    if kind == "power_norm":
        # each row is one complex vector [re..., im...] scaled to unit energy
        return x / sqrt((x * x).sum(axis=-1, keepdims=True))
    if kind == "mean_power_norm":
        # rows are constellation points; unit average energy over the batch
        return x / sqrt((x * x).sum(axis=-1, keepdims=True).mean(axis=0, keepdims=True))
    raise ValueError(f"unknown output transform {kind!r}")


class Mlp:
    """Fully connected net, ELU on hidden layers, fixed output transform."""

    def __init__(self, widths, transform="linear", rng: np.random.Generator | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        if transform not in TRANSFORMS:
            raise ValueError(f"unknown output transform {transform!r}")
        self.widths = widths
        self.transform = transform
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[Parameter] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
            self.params.append(Parameter(np.zeros(fan_out)))

    @property
    def n_params(self) -> int:
        return sum(p.data.size for p in self.params)

    def pre_activation(self, x) -> Tensor:
        """Output of the last affine layer, before the output transform."""
        x = as_tensor(x)
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {x.shape[-1]} != net input width {self.widths[0]}")
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            x = x @ w + b
            if i < n_layers - 1:
                x = elu(x)
        return x

    def __call__(self, x) -> Tensor:
        return _output_transform(self.pre_activation(x), self.transform)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {flat.size}")
        pos = 0
        for p in self.params:
            p.data = flat[pos : pos + p.data.size].reshape(p.data.shape).copy()
            pos += p.data.size


def forward(net: Mlp, x, tape: Tape | None = None) -> Tensor:
    if tape is None:
        return net(x)
    with tape:
        return net(x)


# ------------------------------------------------------------------- losses


def loss_bce(pred, target) -> Tensor:
    p = clip(as_tensor(pred), PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    ll = log(p) * t + log(1.0 - p) * (1.0 - t)
    return -ll.mean()


def loss_bce_logits(logits, target) -> Tensor:
    """BCE of ``sigmoid(logits)`` against ``target``, evaluated from the logits.

    Same value as :func:`loss_bce` on the sigmoid output, but the gradient
    ``sigmoid(l) - t`` stays informative where the sigmoid saturates.
    """
    a = as_tensor(logits)
    t = np.asarray(target, dtype=np.float64)
    x = a.data
    sp = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = np.asarray(np.mean(sp - t * x))
    return _node(out, (a,), lambda g: (g * (sigmoid_np(x) - t) / n,))


def loss_ce(pred, target) -> Tensor:
    """Cross entropy of probability rows against integer class labels."""
    p = as_tensor(pred)
    target = np.asarray(target, dtype=np.intp)
    picked = take(p, (np.arange(len(target)), target))
    return -log(clip(picked, PROB_CLAMP, 1.0)).mean()


def loss_mse(pred, target, mask=None) -> Tensor:
    """Mean squared error; with ``mask`` only entries with mask 1 count."""
    p = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    d = p - t
    if mask is None:
        return (d * d).mean()
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        return (d * 0.0).sum()
    return (d * d * mask).sum() * (1.0 / count)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction.

    Parameters that receive no gradient in a step are left untouched and do
    not advance their own step counter.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {p: np.zeros_like(p.data) for p in self.params}
        self.v = {p: np.zeros_like(p.data) for p in self.params}
        self.steps = {p: 0 for p in self.params}

    def step(self, grads: dict) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            self.steps[p] += 1
            t = self.steps[p]
            m = self.m[p] = self.beta1 * self.m[p] + (1 - self.beta1) * g
            v = self.v[p] = self.beta2 * self.v[p] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params, grads, state: Adam) -> list:
    state.step(dict(zip(params, grads)) if not isinstance(grads, dict) else grads)
    return params


# --------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"JCASCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, nets: dict, meta: dict) -> None:
    """Write nets and metadata.

    Layout: 8-byte magic, u32 version, u32 header length (little endian),
    UTF-8 JSON header, then every net's flat parameters as little-endian
    float64 in header order.
    """
    entries, blobs, offset = [], [], 0
    for name, net in nets.items():
        flat = net.get_flat().astype("<f8")
        entries.append(
            {"name": name, "widths": net.widths, "transform": net.transform,
             "offset": offset, "count": int(flat.size)}
        )
        offset += flat.size
        blobs.append(flat.tobytes())
    header = json.dumps({"nets": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    values = np.frombuffer(raw[16 + hlen :], dtype="<f8")
    nets = {}
    for e in header["nets"]:
        net = Mlp(e["widths"], e["transform"])
        net.set_flat(values[e["offset"] : e["offset"] + e["count"]])
        nets[e["name"]] = net
    return nets, header["meta"]
