"""Dense arithmetic, MLP forward/backward with exact adjoints, optimizers, RNG streams.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch of row vectors
``x`` maps to ``x @ W + b``.  Every weight may carry leading "stack" axes
(e.g. one slice per ensemble particle or per sampled hypermodel index); the
forward and backward passes broadcast over them with ``np.matmul``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Dimension mismatch; the message names the offending layer or view."""


class NonFiniteError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# architecture + parameter storage


@dataclass(frozen=True)
class MlpArch:
    input_dim: int
    hidden_widths: tuple = ()
    output_dim: int = 1
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        dims = (self.input_dim, *self.hidden_widths, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all MLP dimensions must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self):
        dims = (self.input_dim, *self.hidden_widths, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_layers(self):
        return len(self.hidden_widths) + 1

    @property
    def num_params(self):
        return sum((fi + 1) * fo for fi, fo in self.layer_dims)

    def flops(self):
        """Multiply-adds of one forward pass for a single input."""
        return sum(fi * fo for fi, fo in self.layer_dims)

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_dim"], tuple(d["hidden_widths"]), d["output_dim"], d.get("activation", "relu"))


@dataclass(frozen=True)
class ParamView:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self):
        return math.prod(self.shape)


class Layout:
    """Ordered, gap-free partition of a flat parameter vector into named views."""

    def __init__(self, views=()):
        self._views = []
        self._by_name = {}
        self._slices = {}
        self.size = 0
        for name, shape in views:
            self.add(name, shape)

    def add(self, name, shape):
        if name in self._by_name:
            raise ValueError(f"duplicate parameter view {name!r}")
        shape = tuple(int(s) for s in shape)
        view = ParamView(name, self.size, shape)
        self._views.append(view)
        self._by_name[name] = view
        self.size += view.size
        self._slices[name] = (view.offset, view.offset + view.size, shape)
        return view

    def __iter__(self):
        return iter(self._views)

    def __len__(self):
        return len(self._views)

    def __contains__(self, name):
        return name in self._by_name

    def __getitem__(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no parameter view named {name!r}") from None

    def __eq__(self, other):
        return isinstance(other, Layout) and self._views == other._views

    def names(self, prefix=""):
        return [v.name for v in self._views if v.name.startswith(prefix)]

    def span(self, prefix):
        """(start, stop) of the contiguous block of views sharing ``prefix``."""
        views = [v for v in self._views if v.name.startswith(prefix)]
        if not views:
            raise KeyError(f"no parameter views with prefix {prefix!r}")
        start, stop = views[0].offset, views[-1].offset + views[-1].size
        if stop - start != sum(v.size for v in views):
            raise ValueError(f"views with prefix {prefix!r} are not contiguous")
        return start, stop

    def mask(self, prefixes):
        m = np.zeros(self.size, dtype=bool)
        for v in self._views:
            if any(v.name.startswith(p) for p in prefixes):
                m[v.offset : v.offset + v.size] = True
        return m

    def to_list(self):
        return [[v.name, list(v.shape)] for v in self._views]

    @classmethod
    def from_list(cls, items):
        return cls((name, tuple(shape)) for name, shape in items)


class ParamStore:
    """Flat float64 vector plus a layout of named, reshaped views into it."""

    def __init__(self, layout, flat=None):
        self.layout = layout
        if flat is None:
            flat = np.zeros(layout.size, dtype=DTYPE)
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.shape != (layout.size,):
            raise ShapeError(f"flat vector has shape {flat.shape}, layout needs ({layout.size},)")
        self.flat = flat

    def view(self, name):
        try:
            start, stop, shape = self.layout._slices[name]
        except KeyError:
            raise KeyError(f"no parameter view named {name!r}") from None
        return self.flat[start:stop].reshape(shape)

    def __getitem__(self, name):
        return self.view(name)

    def __setitem__(self, name, value):
        self.view(name)[...] = value

    def block(self, prefix):
        start, stop = self.layout.span(prefix)
        return self.flat[start:stop]

    def copy(self):
        return ParamStore(self.layout, self.flat.copy())

    def zeros_like(self):
        return ParamStore(self.layout)

    def unpack(self):
        return {v.name: self.view(v.name).copy() for v in self.layout}

    @classmethod
    def pack(cls, layout, arrays):
        store = cls(layout)
        for v in layout:
            store[v.name] = np.asarray(arrays[v.name], dtype=DTYPE).reshape(v.shape)
        return store

    def __len__(self):
        return self.layout.size


def mlp_layout(arch, prefix="", stack=(), layout=None):
    """Append the views of an MLP (``w0, b0, w1, b1, ...``) to ``layout``."""
    layout = Layout() if layout is None else layout
    stack = tuple(stack)
    for i, (fi, fo) in enumerate(arch.layer_dims):
        layout.add(f"{prefix}w{i}", stack + (fi, fo))
        layout.add(f"{prefix}b{i}", stack + (fo,))
    return layout


def mlp_weights(arch, params, prefix=""):
    return [(params.view(f"{prefix}w{i}"), params.view(f"{prefix}b{i}")) for i in range(arch.num_layers)]


def glorot_uniform(rng, fan_in, fan_out, stack=()):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(stack) + (fan_in, fan_out))


def init_mlp(arch, params, rng, prefix="", stack=()):
    """Glorot-uniform weights, zero biases."""
    for i, (fi, fo) in enumerate(arch.layer_dims):
        params[f"{prefix}w{i}"] = glorot_uniform(rng, fi, fo, stack)
        params[f"{prefix}b{i}"] = 0.0


def unflatten_mlp(arch, flat):
    """Split ``flat[..., P]`` (one MLP per leading index) into a weight list."""
    weights, k = [], 0
    lead = flat.shape[:-1]
    for fi, fo in arch.layer_dims:
        w = flat[..., k : k + fi * fo].reshape(lead + (fi, fo))
        k += fi * fo
        b = flat[..., k : k + fo]
        k += fo
        weights.append((w, b))
    if k != flat.shape[-1]:
        raise ShapeError(f"flat parameter length {flat.shape[-1]} != arch size {k}")
    return weights


def flatten_grads(grads):
    lead = grads[0][0].shape[:-2]
    parts = []
    for dw, db in grads:
        parts.append(dw.reshape(lead + (-1,)))
        parts.append(db.reshape(lead + (-1,)))
    return np.concatenate(parts, axis=-1)


# --------------------------------------------------------------------------
# forward / backward


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class MlpTape:
    """Activation cache of one forward pass."""

    arch: MlpArch
    prefix: str
    inputs: list  # input to each affine layer
    preacts: list  # hidden pre-activations
    masks: list  # per-hidden-layer multiplicative masks (or None)
    out_shape: tuple
    weight_shapes: list = field(default_factory=list)


def _sum_to_shape(a, shape):
    """Sum leading broadcast axes of ``a`` so the result has ``shape``."""
    extra = a.ndim - len(shape)
    if extra > 0:
        a = a.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a


def mlp_apply(weights, x, masks=None, arch=None, prefix=""):
    """Forward pass on explicit weights.  Returns ``(output, tape)``.

    ``masks[l]`` multiplies the post-activation of hidden layer ``l``; it is
    how dropout indices enter.  ReLU'(0) is taken to be 0.
    """
    n_layers = len(weights)
    if masks is None:
        masks = [None] * (n_layers - 1)
    a = np.asarray(x, dtype=DTYPE)
    inputs, preacts = [], []
    for i, (w, b) in enumerate(weights):
        if a.shape[-1] != w.shape[-2]:
            raise ShapeError(
                f"layer {prefix}w{i}: input has {a.shape[-1]} features, weight expects {w.shape[-2]}"
            )
        inputs.append(a)
        h = np.matmul(a, w)
        h += b[..., None, :]
        if i < n_layers - 1:
            preacts.append(h)
            a = relu(h)
            if masks[i] is not None:
                a = a * masks[i]
        else:
            a = h
    tape = MlpTape(arch, prefix, inputs, preacts, list(masks), a.shape, [w.shape for w, _ in weights])
    return a, tape


def mlp_backprop(tape, weights, upstream, need_input_grad=False):
    """Reverse pass.  Returns ``(grads, dx)`` with ``grads = [(dW, db), ...]``."""
    g = np.asarray(upstream, dtype=DTYPE)
    if g.shape != tape.out_shape:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match output shape {tape.out_shape}")
    if [w.shape for w, _ in weights] != tape.weight_shapes:
        raise ShapeError("tape was recorded with different weight shapes")
    grads = [None] * len(weights)
    dx = None
    for i in range(len(weights) - 1, -1, -1):
        w, b = weights[i]
        a = tape.inputs[i]
        fi, fo = w.shape[-2:]
        if w.ndim == 2 and a.ndim == 2:
            dw = a.T @ (g if g.ndim == 2 else g.reshape((-1,) + g.shape[-2:]).sum(axis=0))
        elif w.ndim == 2:
            a_b = np.broadcast_to(a, g.shape[:-1] + (fi,))
            dw = a_b.reshape(-1, fi).T @ g.reshape(-1, fo)
        else:
            dw = _sum_to_shape(np.matmul(np.swapaxes(a, -1, -2), g), w.shape)
        grads[i] = (dw, _sum_to_shape(g.sum(axis=-2), b.shape))
        if i == 0 and not need_input_grad:
            break
        da = np.matmul(g, np.swapaxes(w, -1, -2))
        if i == 0:
            dx = da
            break
        if tape.masks[i - 1] is not None:
            da = da * tape.masks[i - 1]
        g = da * (tape.preacts[i - 1] > 0)
    return grads, dx


def mlp_forward(arch, params, x, prefix="", masks=None):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != arch.input_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, {prefix or 'mlp'} expects {arch.input_dim}")
    return mlp_apply(mlp_weights(arch, params, prefix), x, masks=masks, arch=arch, prefix=prefix)


def mlp_backward(tape, upstream, params, grad=None):
    """Accumulate the parameter gradient of ``<upstream, output>`` into ``grad``.

    ``params`` supplies the weights used in the forward pass; ``grad`` must share
    its layout and is created when omitted.
    """
    arch, prefix = tape.arch, tape.prefix
    if arch is None:
        raise ValueError("tape has no architecture; use mlp_backprop for raw weights")
    weights = mlp_weights(arch, params, prefix)
    if grad is None:
        grad = params.zeros_like()
    elif grad.layout != params.layout:
        raise ShapeError("gradient store layout does not match parameter layout")
    grads, _ = mlp_backprop(tape, weights, upstream)
    for i, (dw, db) in enumerate(grads):
        grad.view(f"{prefix}w{i}")[...] += dw
        grad.view(f"{prefix}b{i}")[...] += db
    return grad


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.kind not in ("sgd", "sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def make_optimizer(kind, size, lr=1e-3, **hyper):
    state = OptimizerState(kind=kind, lr=lr, **hyper)
    state.m = np.zeros(size, dtype=DTYPE)
    if kind == "adam":
        state.v = np.zeros(size, dtype=DTYPE)
    return state


def optimizer_step(state, params, grad, trainable=None):
    """In-place update of ``params``; entries outside ``trainable`` are never touched."""
    p = params.flat if isinstance(params, ParamStore) else params
    g = grad.flat if isinstance(grad, ParamStore) else np.asarray(grad)
    if g.shape != p.shape or state.m.shape != p.shape:
        raise ShapeError(f"gradient/optimizer size mismatch: params {p.shape}, grad {g.shape}, state {state.m.shape}")
    spans = [(0, len(p))] if trainable is None else _true_runs(trainable)
    for lo, hi in spans:
        if not np.isfinite(g[lo:hi]).all():
            bad = lo + np.flatnonzero(~np.isfinite(g[lo:hi]))
            raise NonFiniteError(f"non-finite gradient entries at {bad[:10].tolist()} (step {state.step_count + 1})")
    state.step_count += 1
    # the update is elementwise, so it is applied run by run over the trainable
    # coordinates only; frozen blocks (prior networks) cost nothing
    for lo, hi in spans:
        gs, ps, m = g[lo:hi], p[lo:hi], state.m[lo:hi]
        if state.kind == "adam":
            v = state.v[lo:hi]
            m *= state.beta1
            m += (1.0 - state.beta1) * gs
            v *= state.beta2
            v += (1.0 - state.beta2) * (gs * gs)
            denom = np.sqrt(v / (1.0 - state.beta2**state.step_count))
            denom += state.eps
            delta = m * (state.lr / (1.0 - state.beta1**state.step_count))
            delta /= denom
        elif state.momentum:
            m *= state.momentum
            m += gs
            delta = state.lr * m
        else:
            delta = state.lr * gs
        ps -= delta
    return params


def _true_runs(mask):
    """``[(start, stop), ...]`` of the maximal runs of True in a boolean vector."""
    key = (id(mask), mask.shape)
    hit = _RUN_CACHE.get(key)
    if hit is not None and hit[0] is mask:
        return hit[1]
    edges = np.flatnonzero(np.diff(np.concatenate(([0], mask.astype(np.int8), [0]))))
    runs = list(zip(edges[::2].tolist(), edges[1::2].tolist()))
    if not mask.flags.writeable:  # only frozen masks are safe to remember
        _RUN_CACHE[key] = (mask, runs)
    return runs


_RUN_CACHE = {}


# --------------------------------------------------------------------------
# random streams


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def rng_split(seed, *keys):
    """Independent generator for ``(seed, *keys)``; string keys are hashed stably."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed, *keys):
    """A 63-bit integer seed derived from ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 2**31], dtype=np.uint64))


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr
