"""Minimal reverse-mode layers, parameter store and Adam for fixed layer stacks.

Tensors are float64 arrays of shape ``(batch, width)``. A :class:`Sequential`
caches what it needs on the forward pass and pushes gradients into its
:class:`ParamStore` on the backward pass.
"""
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LEAKY_SLOPE = 0.01
SOFTPLUS_SHIFT = float(np.log(np.expm1(1.0)))  # softplus(0 + shift) == 1

KINDS = ("dense", "leaky-relu", "tanh", "batch-norm", "dropout", "clip-floor",
         "multiply-scalar", "softplus")


class DimensionError(ValueError):
    pass


class NNStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int | None = None
    rate: float = 0.0
    floor: float = -1.0
    scalar: float = 1.0
    l1: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and (self.width is None or self.width < 1):
            raise ValueError("dense layer needs a positive width")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("penalty coefficients must be non-negative")


@dataclass
class ParamStore:
    """Named parameters with gradients, Adam moments and non-trainable buffers."""

    params: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    penalties: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name, value, l1=0.0, l2=0.0):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.penalties[name] = (float(l1), float(l2))

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def reset_optimizer(self):
        for k in self.params:
            self.m[k].fill(0.0)
            self.v[k].fill(0.0)
        self.step = 0

    def copy(self) -> "ParamStore":
        dup = lambda d: {k: np.array(a, copy=True) for k, a in d.items()}
        return ParamStore(dup(self.params), dup(self.grads), dup(self.m), dup(self.v),
                          dict(self.penalties), dup(self.buffers), self.step)

    def load_state(self, other: "ParamStore"):
        """Copy parameter values and buffers from ``other`` in place."""
        for k, a in other.params.items():
            self.params[k][...] = a
        for k, a in other.buffers.items():
            self.buffers[k][...] = a

    def penalty_value(self):
        total = 0.0
        for k, (l1, l2) in self.penalties.items():
            w = self.params[k]
            if l1:
                total += l1 * np.abs(w).sum()
            if l2:
                total += l2 * np.square(w).sum()
        return total

    def save(self, path):
        arrays = {"__version__": np.array(CHECKPOINT_VERSION),
                  "__step__": np.array(self.step)}
        for k in self.params:
            arrays[f"param/{k}"] = self.params[k]
            arrays[f"adam_m/{k}"] = self.m[k]
            arrays[f"adam_v/{k}"] = self.v[k]
            arrays[f"penalty/{k}"] = np.array(self.penalties[k])
        for k, a in self.buffers.items():
            arrays[f"buffer/{k}"] = a
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ParamStore":
        with np.load(path) as z:
            version = int(z["__version__"])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            store = cls(step=int(z["__step__"]))
            for key in z.files:
                kind, _, name = key.partition("/")
                if kind == "param":
                    store.params[name] = z[key].copy()
                    store.grads[name] = np.zeros_like(z[key])
                elif kind == "adam_m":
                    store.m[name] = z[key].copy()
                elif kind == "adam_v":
                    store.v[name] = z[key].copy()
                elif kind == "penalty":
                    store.penalties[name] = tuple(float(p) for p in z[key])
                elif kind == "buffer":
                    store.buffers[name] = z[key].copy()
        return store


def adam_step(store: ParamStore, lr=3e-4, betas=(0.9, 0.999), eps=1e-8,
              penalties=True):
    """One bias-corrected Adam update; L1/L2 pulls are added to the gradients first."""
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1**store.step
    c2 = 1.0 - b2**store.step
    for k, w in store.params.items():
        g = store.grads[k]
        if penalties:
            l1, l2 = store.penalties[k]
            if l1:
                g = g + l1 * np.sign(w)
            if l2:
                g = g + 2.0 * l2 * w
        m = store.m[k]
        v = store.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --------------------------------------------------------------------------
# layers


class _Layer:
    params = ()

    def forward(self, x, train, rng):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Dense(_Layer):
    def __init__(self, store, name, n_in, n_out, rng, l1=0.0, l2=0.0):
        self.store, self.w, self.b = store, f"{name}.W", f"{name}.b"
        if self.w not in store.params:
            bound = np.sqrt(6.0 / n_in)
            store.add(self.w, rng.uniform(-bound, bound, (n_in, n_out)), l1=l1, l2=l2)
            store.add(self.b, np.zeros(n_out))
        self.n_in, self.n_out = n_in, n_out
        self.params = (self.w, self.b)

    def forward(self, x, train, rng):
        if x.shape[1] != self.n_in:
            raise DimensionError(f"{self.w}: expected {self.n_in} columns, got {x.shape[1]}")
        self.x = x
        return x @ self.store.params[self.w] + self.store.params[self.b]

    def backward(self, dy):
        self.store.grads[self.w] += self.x.T @ dy
        self.store.grads[self.b] += dy.sum(axis=0)
        return dy @ self.store.params[self.w].T


class LeakyReLU(_Layer):
    def __init__(self, slope=LEAKY_SLOPE):
        self.slope = slope

    def forward(self, x, train, rng):
        self.pos = x >= 0.0
        return np.where(self.pos, x, self.slope * x)

    def backward(self, dy):
        return np.where(self.pos, dy, self.slope * dy)


class Tanh(_Layer):
    def forward(self, x, train, rng):
        self.y = np.tanh(x)
        return self.y

    def backward(self, dy):
        return dy * (1.0 - self.y**2)


class Softplus(_Layer):
    """``softplus(x + shift)``; the shift makes a zero input map to 1."""

    def __init__(self, shift=SOFTPLUS_SHIFT):
        self.shift = shift

    def forward(self, x, train, rng):
        self.u = x + self.shift
        return np.logaddexp(0.0, self.u)

    def backward(self, dy):
        return dy / (1.0 + np.exp(-self.u))


class BatchNorm(_Layer):
    def __init__(self, store, name, width):
        self.store, self.g, self.b = store, f"{name}.gamma", f"{name}.beta"
        self.rm, self.rv = f"{name}.running_mean", f"{name}.running_var"
        if self.g not in store.params:
            store.add(self.g, np.ones(width))
            store.add(self.b, np.zeros(width))
            store.buffers[self.rm] = np.zeros(width)
            store.buffers[self.rv] = np.ones(width)
        self.params = (self.g, self.b)

    def forward(self, x, train, rng):
        p, buf = self.store.params, self.store.buffers
        if train:
            n = x.shape[0]
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            self.inv = 1.0 / np.sqrt(var + BN_EPS)
            self.xhat = (x - mu) * self.inv
            unbiased = var * n / (n - 1) if n > 1 else var
            buf[self.rm] *= 1.0 - BN_MOMENTUM
            buf[self.rm] += BN_MOMENTUM * mu
            buf[self.rv] *= 1.0 - BN_MOMENTUM
            buf[self.rv] += BN_MOMENTUM * unbiased
            return p[self.g] * self.xhat + p[self.b]
        self.xhat = None
        return p[self.g] * (x - buf[self.rm]) / np.sqrt(buf[self.rv] + BN_EPS) + p[self.b]

    def backward(self, dy):
        if self.xhat is None:
            raise NNStateError("batch-norm backward needs a train-mode forward")
        p, gr = self.store.params, self.store.grads
        gr[self.g] += (dy * self.xhat).sum(axis=0)
        gr[self.b] += dy.sum(axis=0)
        dxhat = dy * p[self.g]
        n = dy.shape[0]
        return (self.inv / n) * (n * dxhat - dxhat.sum(axis=0)
                                 - self.xhat * (dxhat * self.xhat).sum(axis=0))


class Dropout(_Layer):
    def __init__(self, rate):
        self.rate = rate

    def forward(self, x, train, rng):
        if not train or self.rate == 0.0:
            self.mask = None
            return x
        keep = 1.0 - self.rate
        self.mask = (rng.random(x.shape) < keep) / keep
        return x * self.mask

    def backward(self, dy):
        return dy if self.mask is None else dy * self.mask


class ClipFloor(_Layer):
    def __init__(self, floor):
        self.floor = floor

    def forward(self, x, train, rng):
        self.live = x >= self.floor
        return np.where(self.live, x, self.floor)

    def backward(self, dy):
        return np.where(self.live, dy, 0.0)


class MultiplyScalar(_Layer):
    def __init__(self, value):
        self.value = value

    def forward(self, x, train, rng):
        return x * self.value

    def backward(self, dy):
        return dy * self.value


class Sequential:
    """A fixed stack of layers sharing one :class:`ParamStore`."""

    def __init__(self, specs, n_in, store=None, prefix="net", seed=0):
        self.store = store if store is not None else ParamStore()
        self.specs = tuple(specs)
        self.n_in = n_in
        rng = np.random.default_rng(seed)
        self.layers = []
        width = n_in
        for i, spec in enumerate(self.specs):
            name = f"{prefix}.{i}"
            if spec.kind == "dense":
                self.layers.append(Dense(self.store, name, width, spec.width, rng,
                                         l1=spec.l1, l2=spec.l2))
                width = spec.width
            elif spec.kind == "batch-norm":
                self.layers.append(BatchNorm(self.store, name, width))
            elif spec.kind == "leaky-relu":
                self.layers.append(LeakyReLU())
            elif spec.kind == "tanh":
                self.layers.append(Tanh())
            elif spec.kind == "softplus":
                self.layers.append(Softplus())
            elif spec.kind == "dropout":
                self.layers.append(Dropout(spec.rate))
            elif spec.kind == "clip-floor":
                self.layers.append(ClipFloor(spec.floor))
            elif spec.kind == "multiply-scalar":
                self.layers.append(MultiplyScalar(spec.scalar))
        self.n_out = width
        self._ready = False

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"expected (batch, {self.n_in}) input, got {x.shape}")
        if train and rng is None:
            rng = np.random.default_rng(0)
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        self._ready = train
        return x

    def backward(self, dy):
        if not self._ready:
            raise NNStateError("backward requires a preceding train-mode forward")
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        self._ready = False
        return dy


def hidden_block(width, dropout=0.0, batch_norm=True, l1=0.0, l2=0.0):
    """Dense -> batch-norm -> leaky ReLU -> dropout."""
    block = [LayerSpec("dense", width, l1=l1, l2=l2)]
    if batch_norm:
        block.append(LayerSpec("batch-norm"))
    block.append(LayerSpec("leaky-relu"))
    if dropout:
        block.append(LayerSpec("dropout", rate=dropout))
    return block
