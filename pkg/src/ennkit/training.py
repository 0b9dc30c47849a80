"""Index-integrated losses and the stochastic training loop.

The objective for a dataset ``D`` is

    E_z [ sum_{(x,y) in D} loss(theta, x, y, z) + l2 * ||theta||^2 ]

and one stochastic gradient sample uses a data minibatch (rescaled by
``|D| / |batch|``) and an average over a minibatch of indices.  The ridge term
covers every trainable parameter with the same coefficient; frozen prior
parameters are excluded.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ennkit.numerics import DTYPE, NonFiniteError, make_optimizer, optimizer_step, rng_split


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite training loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int = None  # None for regression targets

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=DTYPE)
        if self.inputs.ndim != 2 or len(self.inputs) < 1:
            raise ValueError("inputs must be a non-empty (T, D) matrix")
        if self.num_classes is None:
            self.labels = np.asarray(self.labels, dtype=DTYPE)
        else:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if len(self.labels) != len(self.inputs):
            raise ValueError("inputs and labels differ in length")

    def __len__(self):
        return len(self.inputs)


@dataclass
class LossSpec:
    data_loss: str = "xent"
    l2: float = 0.0
    bootstrap_scale: float = 0.0
    signatures: np.ndarray = None  # (T, D_Z) unit vectors, one per training example

    def __post_init__(self):
        if self.data_loss not in ("xent", "mse"):
            raise ValueError(f"unknown data loss {self.data_loss!r}")
        if self.l2 < 0:
            raise ValueError("l2 coefficient must be >= 0")
        if self.signatures is not None:
            s = np.asarray(self.signatures, dtype=DTYPE)
            if not np.allclose(np.linalg.norm(s, axis=1), 1.0, atol=1e-12):
                raise ValueError("bootstrap signatures must have unit Euclidean norm")
            self.signatures = s

    @property
    def bootstrapped(self):
        return self.bootstrap_scale != 0.0 and self.signatures is not None


def unit_sphere_signatures(rng, count, dim):
    c = rng.standard_normal((count, dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


@dataclass
class TrainConfig:
    batch_size: int = 100
    index_batch: int = None  # defaults to the index dimension
    steps: int = 1000
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    seed: int = 0
    exact_indices: bool = None  # enumerate a discrete reference; default: yes for uniform, unless index_batch is set

    def __post_init__(self):
        if self.batch_size < 1 or (self.index_batch is not None and self.index_batch < 1):
            raise ValueError("batch sizes must be >= 1")


def default_index_batch(model):
    """Index dimension for Gaussian references, all particles for ensembles, 4 dropout masks."""
    ref = model.ref
    if ref.kind == "bernoulli":
        return 4
    return ref.dim


def loss_and_dlogits(logits, y, zs, spec, signatures=None):
    """Per-(index, example) data loss and its gradient wrt the logits.

    ``logits`` is (M, N, C).  Returns ``(loss (M, N), dlogits (M, N, C))``.
    """
    if spec.data_loss == "xent":
        y = np.asarray(y)
        c = logits.shape[-1]
        if y.size and (y.min() < 0 or y.max() >= c):
            raise ValueError(f"label out of range [0, {c})")
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - logz
        n = np.arange(logits.shape[1])
        loss = -logp[:, n, y]
        d = np.exp(logp)
        d[:, n, y] -= 1.0
        return loss, d
    # squared error on a scalar output
    r = logits[..., 0] - np.asarray(y, dtype=DTYPE)[None, :]
    if spec.bootstrapped:
        if signatures is None:
            raise ValueError("bootstrap loss needs the batch's signatures")
        zs = np.asarray(zs)
        if zs.ndim == 1:  # particle indices: particle k perturbs along basis vector e_k
            zs = np.eye(signatures.shape[1])[zs]
        r = r + spec.bootstrap_scale * (zs @ signatures.T)
    d = np.zeros_like(logits)
    d[..., 0] = 2.0 * r
    return r * r, d


def data_loss(model, params, x, y, z, spec, signatures=None):
    """Summed data loss of a batch at a single index ``z``."""
    zs = np.asarray([z]) if model.ref.discrete else np.asarray(z, dtype=DTYPE)[None, :]
    logits = model.logits(params, np.atleast_2d(x), zs)
    sig = None if signatures is None else np.atleast_2d(signatures)
    loss, _ = loss_and_dlogits(logits, np.atleast_1d(y), zs, spec, sig)
    return float(loss.sum())


def regularizer(model, params, spec):
    th = params.flat[model.trainable]
    return spec.l2 * float(th @ th)


def minibatch_gradient(model, params, x, y, zs, spec, total_size, signatures=None):
    """One stochastic gradient sample.  Returns ``(objective estimate, grad)``."""
    x = np.asarray(x, dtype=DTYPE)
    if len(x) == 0:
        raise ValueError("empty minibatch")
    zs = model.ref.check(zs)
    if len(zs) == 0:
        raise ValueError("empty index batch")
    scale = total_size / len(x)
    logits, cache = model.forward_batch(params, x, zs)
    loss, dlog = loss_and_dlogits(logits, y, zs, spec, signatures)
    m = len(zs)
    grad = model.backward(params, cache, dlog * (scale / m))
    objective = scale * loss.sum() / m
    if spec.l2:
        grad.flat[model.trainable] += 2.0 * spec.l2 * params.flat[model.trainable]
        objective += regularizer(model, params, spec)
    return float(objective), grad


@dataclass
class TrainResult:
    params: object
    losses: np.ndarray
    wall_ms: np.ndarray = field(default=None)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("step,loss,wall_ms\n")
            for i, (l, w) in enumerate(zip(self.losses, self.wall_ms), start=1):
                fh.write(f"{i},{float(l)!r},{w:.3f}\n")


def train(model, dataset, spec, config, params=None):
    """Adapt ``params`` (default: a copy of the model's initial parameters)."""
    params = model.params.copy() if params is None else params.copy()
    rng = rng_split(config.seed, "train")
    opt_hyper = {"momentum": config.momentum} if config.optimizer != "adam" else {}
    opt = make_optimizer(config.optimizer, len(params.flat), lr=config.lr, **opt_hyper)
    t = len(dataset)
    b = min(config.batch_size, t)
    m = config.index_batch or default_index_batch(model)
    exact = config.exact_indices
    if exact is None:
        exact = model.ref.kind == "uniform" and config.index_batch is None
    if exact:
        all_z, _ = model.ref.enumerate()
    losses = np.empty(config.steps)
    wall = np.empty(config.steps)
    t0 = time.perf_counter()
    for step in range(config.steps):
        idx = rng.choice(t, size=b, replace=False) if b < t else np.arange(t)
        zs = all_z if exact else model.sample_indices(rng, m)
        sig = spec.signatures[idx] if spec.bootstrapped else None
        loss, grad = minibatch_gradient(model, params, dataset.inputs[idx], dataset.labels[idx], zs, spec, t, sig)
        if not np.isfinite(loss):
            raise TrainingDiverged(step + 1, loss)
        try:
            optimizer_step(opt, params, grad, model.trainable)
        except NonFiniteError as err:
            raise TrainingDiverged(step + 1, loss) from err
        losses[step] = loss
        wall[step] = (time.perf_counter() - t0) * 1e3
    return TrainResult(params, losses, wall)
