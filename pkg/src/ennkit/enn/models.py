"""Concrete epistemic neural networks.

Every model maps a batch of inputs ``x`` of shape ``(N, D)`` and a batch of
epistemic indices ``zs`` (``M`` of them) to logits of shape ``(M, N, C)``.
``backward`` returns the parameter gradient of ``sum(upstream * logits)``.

Frozen components (prior networks and their normalisation) live in the same
ParamStore as the trainable weights, under the ``prior/`` prefix, and are
excluded by ``model.trainable``.
"""
from __future__ import annotations

import numpy as np

from ennkit.numerics import (
    DTYPE,
    Layout,
    MlpArch,
    ParamStore,
    ShapeError,
    flatten_grads,
    glorot_uniform,
    init_mlp,
    mlp_apply,
    mlp_backprop,
    mlp_backward,
    mlp_forward,
    mlp_layout,
    mlp_weights,
    relu,
    rng_split,
    unflatten_mlp,
)
from ennkit.enn import reference as refs

FROZEN_PREFIX = "prior/"


class EnnModel:
    family = "base"

    def __init__(self, ref, layout, input_dim, num_classes):
        self.ref = ref
        self.layout = layout
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.params = ParamStore(layout)
        self.trainable = ~layout.mask([FROZEN_PREFIX])
        self.trainable.flags.writeable = False

    # subclasses implement these two
    def forward_batch(self, params, x, zs):
        raise NotImplementedError

    def backward(self, params, cache, upstream, grad=None):
        raise NotImplementedError

    def _check_x(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"{self.family}: expected inputs of shape (N, {self.input_dim}), got {x.shape}")
        return x

    def logits(self, params, x, zs):
        return self.forward_batch(params, x, zs)[0]

    def forward(self, params, x, z):
        """Logits ``(N, C)`` for a single index ``z``."""
        zs = np.asarray([z]) if self.ref.discrete else np.asarray(z, dtype=DTYPE)[None, :]
        return self.logits(params, x, zs)[0]

    def sample_indices(self, rng, m):
        return self.ref.sample(rng, m)

    @property
    def num_params(self):
        """Trainable parameter count."""
        return int(self.trainable.sum())

    def flops(self):
        return 0

    def descriptor(self):
        raise NotImplementedError


# --------------------------------------------------------------------------
# frozen prior functions


class IndexedPrior:
    """``K`` frozen MLPs ``x -> R^C`` stacked into one block of views.

    Outputs pass through a per-coordinate affine map ``scale * (p + shift)``
    (identity until ``normalize_prior_scale`` sets it).
    """

    def __init__(self, arch, count, prefix=FROZEN_PREFIX):
        self.arch = arch
        self.count = int(count)
        self.prefix = prefix

    def add_views(self, layout):
        mlp_layout(self.arch, self.prefix, stack=(self.count,), layout=layout)
        layout.add(self.prefix + "shift", (self.arch.output_dim,))
        layout.add(self.prefix + "scale", (self.arch.output_dim,))

    def init(self, params, rng):
        init_mlp(self.arch, params, rng, self.prefix, stack=(self.count,))
        params[self.prefix + "shift"] = 0.0
        params[self.prefix + "scale"] = 1.0

    def raw(self, params, x):
        out, _ = mlp_forward(self.arch, params, x, prefix=self.prefix)
        return out  # (K, N, C)

    def __call__(self, params, x):
        return params[self.prefix + "scale"] * (self.raw(params, x) + params[self.prefix + "shift"])

    def flops(self):
        return self.count * self.arch.flops()


# --------------------------------------------------------------------------


class MlpEnn(EnnModel):
    """Plain network; the index is ignored (single-particle reference)."""

    family = "mlp"

    def __init__(self, arch, seed=0):
        layout = mlp_layout(arch, "base/")
        super().__init__(refs.uniform(1), layout, arch.input_dim, arch.output_dim)
        self.arch = arch
        self.seed = seed
        init_mlp(arch, self.params, rng_split(seed, "mlp-init"), "base/")

    def forward_batch(self, params, x, zs):
        x = self._check_x(x)
        zs = self.ref.check(zs)
        out, tape = mlp_forward(self.arch, params, x, "base/")
        return np.broadcast_to(out, (len(zs),) + out.shape), tape

    def backward(self, params, cache, upstream, grad=None):
        return mlp_backward(cache, np.asarray(upstream).sum(axis=0), params, grad)

    def flops(self):
        return self.arch.flops()

    def descriptor(self):
        return {"family": self.family, "arch": self.arch.to_dict(), "seed": self.seed}


class EnsembleEnn(EnnModel):
    """``K`` particles selected by a uniform particle id, optionally each with an
    additive frozen prior ``alpha * p_k(x)`` (ensemble+)."""

    family = "ensemble"

    def __init__(self, num_particles, arch, seed=0, prior_arch=None, prior_scale=0.0):
        if int(num_particles) < 1:
            raise ValueError("ensemble needs at least one particle")
        self.k = int(num_particles)
        layout = mlp_layout(arch, "particles/", stack=(self.k,))
        self.prior = None
        if prior_arch is not None:
            if prior_arch.input_dim != arch.input_dim or prior_arch.output_dim != arch.output_dim:
                raise ShapeError("prior network must map the same input space to the same outputs")
            self.prior = IndexedPrior(prior_arch, self.k)
            self.prior.add_views(layout)
        super().__init__(refs.uniform(self.k), layout, arch.input_dim, arch.output_dim)
        self.arch = arch
        self.prior_arch = prior_arch
        self.prior_scale = float(prior_scale)
        self.seed = seed
        init_mlp(arch, self.params, rng_split(seed, "particles-init"), "particles/", stack=(self.k,))
        if self.prior is not None:
            self.prior.init(self.params, rng_split(seed, "prior-init"))
            self.family = "ensemble+"

    def particle_outputs(self, params, x):
        out, tape = mlp_forward(self.arch, params, x, "particles/")
        if self.prior is not None:
            out = out + self.prior_scale * self.prior(params, x)
        return out, tape

    def forward_batch(self, params, x, zs):
        x = self._check_x(x)
        zs = self.ref.check(zs)
        out, tape = self.particle_outputs(params, x)
        return out[zs], (tape, zs)

    def backward(self, params, cache, upstream, grad=None):
        tape, zs = cache
        g = np.zeros(tape.out_shape)
        np.add.at(g, zs, upstream)
        return mlp_backward(tape, g, params, grad)

    def flops(self):
        f = self.arch.flops()
        return f + (self.prior_arch.flops() if self.prior is not None else 0)

    def descriptor(self):
        return {
            "family": self.family,
            "num_particles": self.k,
            "arch": self.arch.to_dict(),
            "prior_arch": self.prior_arch.to_dict() if self.prior_arch else None,
            "prior_scale": self.prior_scale,
            "seed": self.seed,
        }


class DropoutEnn(EnnModel):
    """Index = Bernoulli keep-mask over every hidden unit (inverted dropout)."""

    family = "dropout"

    def __init__(self, arch, rate, seed=0):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        n_hidden = sum(arch.hidden_widths)
        layout = mlp_layout(arch, "base/")
        super().__init__(refs.bernoulli(max(n_hidden, 1), 1.0 - rate), layout, arch.input_dim, arch.output_dim)
        self.arch = arch
        self.rate = float(rate)
        self.seed = seed
        init_mlp(arch, self.params, rng_split(seed, "dropout-init"), "base/")

    def masks(self, zs):
        zs = self.ref.check(zs)
        out, k = [], 0
        for w in self.arch.hidden_widths:
            out.append(zs[:, None, k : k + w] / (1.0 - self.rate))
            k += w
        return out

    def forward_batch(self, params, x, zs):
        x = self._check_x(x)
        zs = self.ref.check(zs)
        out, tape = mlp_forward(self.arch, params, x, "base/", masks=self.masks(zs))
        return np.broadcast_to(out, (len(zs),) + out.shape[-2:]), tape

    def backward(self, params, cache, upstream, grad=None):
        upstream = np.asarray(upstream)
        if len(cache.out_shape) == 2:
            upstream = upstream.sum(axis=0)
        return mlp_backward(cache, upstream, params, grad)

    def flops(self):
        return self.arch.flops()

    def descriptor(self):
        return {"family": self.family, "arch": self.arch.to_dict(), "rate": self.rate, "seed": self.seed}


def _stacked_forward(arch, theta, x):
    """Forward with one parameter vector per index: ``theta`` is ``(M, P)``."""
    out, tape = mlp_apply(unflatten_mlp(arch, theta), x, arch=arch)
    return out, tape


def _stacked_backward(arch, theta, tape, upstream):
    grads, _ = mlp_backprop(tape, unflatten_mlp(arch, theta), upstream)
    return flatten_grads(grads)  # (M, P)


class HypermodelEnn(EnnModel):
    """Linear hypermodel: effective parameters ``zeta + eta^T z``.

    Optionally adds a frozen index-weighted prior ``alpha * sum_i z_i p_i(x)``.
    ``eta`` starts at zero so all initial index variation comes from the prior.
    """

    family = "hypermodel"

    def __init__(self, arch, index_dim, seed=0, prior_arch=None, prior_scale=0.0):
        if int(index_dim) < 1:
            raise ValueError("index_dim must be >= 1")
        self.index_dim = int(index_dim)
        layout = Layout([("base/theta", (arch.num_params,)), ("hyper/eta", (self.index_dim, arch.num_params))])
        self.prior = None
        if prior_arch is not None:
            self.prior = IndexedPrior(prior_arch, self.index_dim)
            self.prior.add_views(layout)
        super().__init__(refs.gaussian(self.index_dim), layout, arch.input_dim, arch.output_dim)
        self.arch = arch
        self.prior_arch = prior_arch
        self.prior_scale = float(prior_scale)
        self.seed = seed
        tmp = ParamStore(mlp_layout(arch))
        init_mlp(arch, tmp, rng_split(seed, "hyper-init"))
        self.params["base/theta"] = tmp.flat
        if self.prior is not None:
            self.prior.init(self.params, rng_split(seed, "prior-init"))

    def effective_params(self, params, zs):
        return params["base/theta"][None, :] + zs @ params["hyper/eta"]

    def forward_batch(self, params, x, zs):
        x = self._check_x(x)
        zs = self.ref.check(zs)
        theta = self.effective_params(params, zs)
        out, tape = _stacked_forward(self.arch, theta, x)
        if self.prior is not None:
            out = out + self.prior_scale * np.einsum("md,dnc->mnc", zs, self.prior(params, x))
        return out, (tape, theta, zs)

    def backward(self, params, cache, upstream, grad=None):
        tape, theta, zs = cache
        g_theta = _stacked_backward(self.arch, theta, tape, upstream)
        grad = params.zeros_like() if grad is None else grad
        grad["base/theta"] += g_theta.sum(axis=0)
        grad["hyper/eta"] += zs.T @ g_theta
        return grad

    def flops(self):
        f = self.arch.flops() + self.index_dim * self.arch.num_params
        return f + (self.prior.flops() if self.prior is not None else 0)

    def descriptor(self):
        return {
            "family": self.family,
            "arch": self.arch.to_dict(),
            "index_dim": self.index_dim,
            "prior_arch": self.prior_arch.to_dict() if self.prior_arch else None,
            "prior_scale": self.prior_scale,
            "seed": self.seed,
        }


class BbbCastEnn(EnnModel):
    """Mean-field Gaussian weights as an ENN: ``f_{mu + sigma * z}(x)``."""

    family = "bbb"

    def __init__(self, arch, mu=None, sigma=None, seed=0):
        p = arch.num_params
        layout = Layout([("bbb/mu", (p,)), ("bbb/sigma", (p,))])
        super().__init__(refs.gaussian(p), layout, arch.input_dim, arch.output_dim)
        self.arch = arch
        self.seed = seed
        if mu is None:
            tmp = ParamStore(mlp_layout(arch))
            init_mlp(arch, tmp, rng_split(seed, "bbb-init"))
            mu = tmp.flat
        sigma = np.full(p, 0.0) if sigma is None else np.broadcast_to(np.asarray(sigma, dtype=DTYPE), (p,))
        if np.any(sigma < 0):
            raise ValueError("sigma must be non-negative elementwise")
        self.params["bbb/mu"] = mu
        self.params["bbb/sigma"] = sigma
        self.init_sigma = float(sigma[0]) if np.all(sigma == sigma[0]) else sigma.tolist()

    def forward_batch(self, params, x, zs):
        x = self._check_x(x)
        zs = self.ref.check(zs)
        theta = params["bbb/mu"][None, :] + params["bbb/sigma"][None, :] * zs
        out, tape = _stacked_forward(self.arch, theta, x)
        return out, (tape, theta, zs)

    def backward(self, params, cache, upstream, grad=None):
        tape, theta, zs = cache
        g_theta = _stacked_backward(self.arch, theta, tape, upstream)
        grad = params.zeros_like() if grad is None else grad
        grad["bbb/mu"] += g_theta.sum(axis=0)
        grad["bbb/sigma"] += (zs * g_theta).sum(axis=0)
        return grad

    def flops(self):
        return self.arch.flops()

    def descriptor(self):
        return {"family": self.family, "arch": self.arch.to_dict(), "sigma": self.init_sigma, "seed": self.seed}


class EpinetEnn(EnnModel):
    """Base MLP plus an epinet acting on stop-gradient features.

    ``f(x, z) = mu(x) + g([phi(x), z])^T z + alpha * sum_i z_i p_i(x)`` where
    ``phi(x) = [x, last hidden activations of mu]`` and ``g`` outputs a
    ``D_Z x C`` matrix.  The final layer of ``g`` starts at zero, so at
    initialisation the output is exactly base plus prior.
    """

    family = "epinet"

    def __init__(self, base_arch, epinet_hidden, index_dim, prior_arch=None, prior_scale=1.0, seed=0, index_input=True):
        self.index_dim = int(index_dim)
        self.index_input = bool(index_input)
        if self.index_dim < 1:
            raise ValueError("index_dim must be >= 1")
        c = base_arch.output_dim
        last_hidden = base_arch.hidden_widths[-1] if base_arch.hidden_widths else 0
        self.feature_dim = base_arch.input_dim + last_hidden
        g_in = self.feature_dim + (self.index_dim if self.index_input else 0)
        self.g_arch = MlpArch(g_in, tuple(epinet_hidden), self.index_dim * c)
        layout = mlp_layout(base_arch, "base/")
        mlp_layout(self.g_arch, "epinet/", layout=layout)
        self.prior = None
        if prior_arch is not None:
            if prior_arch.input_dim != base_arch.input_dim or prior_arch.output_dim != c:
                raise ShapeError("epinet prior networks must map x to R^C")
            self.prior = IndexedPrior(prior_arch, self.index_dim)
            self.prior.add_views(layout)
        super().__init__(refs.gaussian(self.index_dim), layout, base_arch.input_dim, c)
        self.base_arch = base_arch
        self.epinet_hidden = tuple(epinet_hidden)
        self.prior_arch = prior_arch
        self.prior_scale = float(prior_scale)
        self.seed = seed
        init_mlp(base_arch, self.params, rng_split(seed, "base-init"), "base/")
        init_mlp(self.g_arch, self.params, rng_split(seed, "epinet-init"), "epinet/")
        last = self.g_arch.num_layers - 1
        self.params[f"epinet/w{last}"] = 0.0
        self.params[f"epinet/b{last}"] = 0.0
        if self.prior is not None:
            self.prior.init(self.params, rng_split(seed, "prior-init"))

    def features(self, x, base_tape):
        """phi(x): the input concatenated with the base net's last hidden layer."""
        if not self.base_arch.hidden_widths:
            return x
        return np.concatenate([x, base_tape.inputs[-1]], axis=-1)

    def epinet_output(self, params, phi, zs):
        """Learnable part ``g([phi, z])^T z`` for features ``phi`` (N, F); returns (out, cache)."""
        weights = mlp_weights(self.g_arch, params, "epinet/")
        w0, b0 = weights[0]
        f = self.feature_dim
        pre0 = (phi @ w0[:f])[None, :, :] + b0
        if self.index_input:
            pre0 = pre0 + (zs @ w0[f:])[:, None, :]
        if len(weights) > 1:
            rest_out, rest_tape = mlp_apply(weights[1:], relu(pre0))
        else:
            rest_out, rest_tape = pre0, None
        # without the index input g is shared by every z (leading axis 1)
        g = rest_out.reshape(pre0.shape[0], phi.shape[0], self.index_dim, self.num_classes)
        out = np.matmul(zs[:, None, None, :], g)[:, :, 0, :]
        return out, (phi, zs, pre0, rest_tape)

    def epinet_backward(self, params, cache, upstream, grad):
        phi, zs, pre0, rest_tape = cache
        weights = mlp_weights(self.g_arch, params, "epinet/")
        m, n = len(zs), phi.shape[0]
        dg = (upstream[:, :, None, :] * zs[:, None, :, None]).reshape(m, n, self.index_dim * self.num_classes)
        if not self.index_input:
            dg = dg.sum(axis=0, keepdims=True)
        if rest_tape is not None:
            grads, da = mlp_backprop(rest_tape, weights[1:], dg, need_input_grad=True)
            for i, (dw, db) in enumerate(grads, start=1):
                grad[f"epinet/w{i}"] += dw
                grad[f"epinet/b{i}"] += db
            dpre0 = da * (pre0 > 0)
        else:
            dpre0 = dg
        f = self.feature_dim
        w0 = grad["epinet/w0"]
        w0[:f] += phi.T @ dpre0.sum(axis=0)
        if self.index_input:
            w0[f:] += zs.T @ dpre0.sum(axis=1)
        grad["epinet/b0"] += dpre0.sum(axis=(0, 1))
        return grad

    def prior_output(self, params, x, zs):
        if self.prior is None:
            return 0.0
        p = self.prior(params, x)  # (D_Z, N, C)
        return self.prior_scale * (zs @ p.reshape(self.index_dim, -1)).reshape((len(zs),) + p.shape[1:])

    def forward_batch(self, params, x, zs):
        x = self._check_x(x)
        zs = self.ref.check(zs)
        mu, base_tape = mlp_forward(self.base_arch, params, x, "base/")
        phi = self.features(x, base_tape)  # stop-gradient: treated as a constant below
        sig_l, ep_cache = self.epinet_output(params, phi, zs)
        out = mu[None] + sig_l + self.prior_output(params, x, zs)
        return out, (base_tape, ep_cache)

    def backward(self, params, cache, upstream, grad=None):
        base_tape, ep_cache = cache
        upstream = np.asarray(upstream, dtype=DTYPE)
        grad = mlp_backward(base_tape, upstream.sum(axis=0), params, grad)
        return self.epinet_backward(params, ep_cache, upstream, grad)

    @property
    def num_base_params(self):
        return self.base_arch.num_params

    def flops(self):
        f = self.base_arch.flops() + self.g_arch.flops() + self.index_dim * self.num_classes
        return f + (self.prior.flops() if self.prior is not None else 0)

    def descriptor(self):
        return {
            "family": self.family,
            "base_arch": self.base_arch.to_dict(),
            "epinet_hidden": list(self.epinet_hidden),
            "index_dim": self.index_dim,
            "prior_arch": self.prior_arch.to_dict() if self.prior_arch else None,
            "prior_scale": self.prior_scale,
            "index_input": self.index_input,
            "seed": self.seed,
        }


# --------------------------------------------------------------------------
# factories


def make_mlp(arch, seed=0):
    return MlpEnn(arch, seed)


def make_ensemble(num_particles, arch, seed=0):
    return EnsembleEnn(num_particles, arch, seed)


def make_ensemble_plus(num_particles, arch, prior_arch, prior_scale, seed=0):
    return EnsembleEnn(num_particles, arch, seed, prior_arch=prior_arch, prior_scale=prior_scale)


def make_dropout(arch, rate, seed=0):
    return DropoutEnn(arch, rate, seed)


def make_hypermodel(arch, index_dim, seed=0, prior_arch=None, prior_scale=0.0):
    return HypermodelEnn(arch, index_dim, seed, prior_arch=prior_arch, prior_scale=prior_scale)


def make_bbb_cast(arch, mu=None, sigma=None, seed=0):
    return BbbCastEnn(arch, mu, sigma, seed)


def make_epinet(base_arch, epinet_hidden, index_dim, prior_arch=None, prior_scale=1.0, seed=0, index_input=True):
    return EpinetEnn(base_arch, epinet_hidden, index_dim, prior_arch, prior_scale, seed, index_input)


def _arch(d):
    return MlpArch.from_dict(d) if d is not None else None


def build_model(desc):
    """Rebuild a model (with fresh initial parameters) from ``descriptor()``."""
    fam = desc["family"]
    seed = desc.get("seed", 0)
    if fam == "mlp":
        return MlpEnn(_arch(desc["arch"]), seed)
    if fam in ("ensemble", "ensemble+"):
        return EnsembleEnn(desc["num_particles"], _arch(desc["arch"]), seed, _arch(desc.get("prior_arch")), desc.get("prior_scale", 0.0))
    if fam == "dropout":
        return DropoutEnn(_arch(desc["arch"]), desc["rate"], seed)
    if fam == "hypermodel":
        return HypermodelEnn(_arch(desc["arch"]), desc["index_dim"], seed, _arch(desc.get("prior_arch")), desc.get("prior_scale", 0.0))
    if fam == "bbb":
        return BbbCastEnn(_arch(desc["arch"]), sigma=desc.get("sigma"), seed=seed)
    if fam == "epinet":
        return EpinetEnn(
            _arch(desc["base_arch"]),
            tuple(desc["epinet_hidden"]),
            desc["index_dim"],
            _arch(desc.get("prior_arch")),
            desc.get("prior_scale", 1.0),
            seed,
            desc.get("index_input", True),
        )
    raise ValueError(f"unknown model family {fam!r}")


def enn_forward(model, params, x, z):
    return model.forward(params, x, z)


def enn_backward(model, params, x, z, upstream):
    """Gradient of ``<upstream, f(x, z)>`` for a single index ``z``; upstream is (N, C)."""
    zs = np.asarray([z]) if model.ref.discrete else np.asarray(z, dtype=DTYPE)[None, :]
    _, cache = model.forward_batch(params, x, zs)
    return model.backward(params, cache, np.asarray(upstream, dtype=DTYPE)[None])


__all__ = [
    "EnnModel",
    "IndexedPrior",
    "MlpEnn",
    "EnsembleEnn",
    "DropoutEnn",
    "HypermodelEnn",
    "BbbCastEnn",
    "EpinetEnn",
    "make_mlp",
    "make_ensemble",
    "make_ensemble_plus",
    "make_dropout",
    "make_hypermodel",
    "make_bbb_cast",
    "make_epinet",
    "build_model",
    "enn_forward",
    "enn_backward",
    "glorot_uniform",
]
