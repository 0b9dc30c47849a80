"""Marginal and joint predictive quality.

Joint log-loss integrates the product of per-input class probabilities over
epistemic indices::

    -log (1/M) sum_m prod_t softmax(f(x_t, z_m))_{y_t}

and is computed entirely in log space.  The product-of-marginals variant
averages over indices *per input* first, so it cannot express correlation
between labels.  For discrete references with at most ``M`` particles the
index integral is enumerated exactly instead of sampled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ennkit.enn import reference as refs
from ennkit.enn.models import EnnModel
from ennkit.numerics import DTYPE, Layout, rng_split

DEFAULT_EVAL_INDICES = 1000
_ROWS_PER_CHUNK = 200_000


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class IndexDraws:
    zs: np.ndarray
    weights: np.ndarray = None  # None means equal weights

    def __len__(self):
        return len(self.zs)


def index_draws(model, m=DEFAULT_EVAL_INDICES, seed=0, exact=None):
    """Indices for integrating over the reference distribution.

    ``exact=None`` enumerates discrete references whenever they have at most
    ``m`` particles.  Uniform references keep equal weights (``None``) so
    the log-mean is computed as a plain mean.
    """
    if m < 1:
        raise ValueError("need at least one index draw")
    ref = model.ref
    if exact is None:
        exact = ref.discrete and ref.dim <= m
    if exact:
        zs, w = ref.enumerate()
        return IndexDraws(zs, None if ref.kind == "uniform" else w)
    return IndexDraws(ref.sample(rng_split(seed, "eval-indices"), m))


class _LogMeanExp:
    """Streaming log of the (weighted) mean of exp over the index axis."""

    def __init__(self, shape, total, weighted):
        self.mx = np.full(shape, -np.inf)
        self.acc = np.zeros(shape)
        self.total = total
        self.weighted = weighted

    def add(self, v, w=None):
        new_mx = np.maximum(self.mx, v.max(axis=0))
        safe = np.where(np.isfinite(new_mx), new_mx, 0.0)
        e = np.exp(v - safe)
        part = e.sum(axis=0) if w is None else np.tensordot(w, e, axes=(0, 0))
        self.acc = self.acc * np.exp(np.where(np.isfinite(self.mx), self.mx - safe, -np.inf)) + part
        self.mx = new_mx

    def result(self):
        mean = self.acc if self.weighted else self.acc / self.total
        safe = np.where(np.isfinite(self.mx), self.mx, 0.0)
        return np.where(np.isfinite(self.mx), safe + np.log(mean), -np.inf)


def _chunks(draws, rows):
    step = max(1, _ROWS_PER_CHUNK // max(rows, 1))
    for start in range(0, len(draws), step):
        w = None if draws.weights is None else draws.weights[start : start + step]
        yield draws.zs[start : start + step], w


def _label_logprobs(model, params, x, zs):
    return log_softmax(model.logits(params, x, zs))


def marginal_log_probs(model, params, x, draws):
    """``log (1/M) sum_m softmax(f(x, z_m))`` for every input and class, (N, C)."""
    x = np.asarray(x, dtype=DTYPE)
    lme = _LogMeanExp((len(x), model.num_classes), len(draws), draws.weights is not None)
    for zs, w in _chunks(draws, len(x)):
        lme.add(_label_logprobs(model, params, x, zs), w)
    return lme.result()


def marginal_probs(model, params, x, m=DEFAULT_EVAL_INDICES, seed=0, exact=None):
    draws = index_draws(model, m, seed, exact)
    return np.exp(marginal_log_probs(model, params, np.atleast_2d(x), draws))


@dataclass
class JointBatch:
    inputs: np.ndarray  # (tau, D)
    labels: np.ndarray  # (tau,)
    anchor_ids: np.ndarray = None  # (tau,) which anchor each element copies; default: each input its own
    anchors: np.ndarray = None  # (2, D)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) < 1 or len(self.labels) != len(self.inputs):
            raise ValueError("a joint batch needs tau >= 1 inputs with one label each")
        if self.anchor_ids is None:
            self.anchor_ids = np.arange(len(self.inputs))
            self.anchors = self.inputs
        if self.anchors is None:
            self.anchors = self.inputs
        self.anchor_ids = np.asarray(self.anchor_ids, dtype=np.int64)

    @property
    def tau(self):
        return len(self.labels)


def dyadic_batches(input_sampler, tau, count, seed, label_fn):
    """Basic dyadic sampling.

    ``input_sampler(rng, n)`` returns ``n`` inputs; ``label_fn(rng, x)`` samples
    one label per row of ``x``.  Each batch draws two anchors and then ``tau``
    elements, each copying anchor 0 or 1 with equal probability; labels are
    sampled independently per element.
    """
    if tau < 2:
        raise ValueError("dyadic sampling needs tau >= 2")
    rng = rng_split(seed, "dyadic")
    out = []
    for _ in range(count):
        anchors = np.asarray(input_sampler(rng, 2), dtype=DTYPE)
        ids = rng.integers(0, 2, size=tau)
        x = anchors[ids]
        y = label_fn(rng, x)
        out.append(JointBatch(x, y, ids, anchors))
    return out


def _batch_logprob_tables(model, params, batches, draws):
    """Yields ``(elem_logp (m, B, tau), w)`` per chunk of indices."""
    anchors = np.concatenate([b.anchors for b in batches], axis=0)
    offsets = np.cumsum([0] + [len(b.anchors) for b in batches[:-1]])
    rows = np.stack([o + b.anchor_ids for o, b in zip(offsets, batches)])  # (B, tau)
    labels = np.stack([b.labels for b in batches])
    for zs, w in _chunks(draws, len(anchors)):
        lp = _label_logprobs(model, params, anchors, zs)  # (m, R, C)
        # fancy indexing leaves the index axis innermost; a C-ordered copy keeps
        # the sum over tau in the same order as the product-of-marginals path
        yield np.ascontiguousarray(lp[:, rows, labels]), w


def joint_nll_many(model, params, batches, m=DEFAULT_EVAL_INDICES, seed=0, exact=None, draws=None):
    """Joint NLL for each batch (same index draws shared across batches)."""
    taus = {b.tau for b in batches}
    if len(taus) != 1:
        raise ValueError("all batches must share tau")
    draws = index_draws(model, m, seed, exact) if draws is None else draws
    lme = _LogMeanExp((len(batches),), len(draws), draws.weights is not None)
    for elem, w in _batch_logprob_tables(model, params, batches, draws):
        lme.add(elem.sum(axis=2), w)
    return -lme.result()


def product_marginal_nll_many(model, params, batches, m=DEFAULT_EVAL_INDICES, seed=0, exact=None, draws=None):
    draws = index_draws(model, m, seed, exact) if draws is None else draws
    tau = batches[0].tau
    lme = _LogMeanExp((len(batches), tau), len(draws), draws.weights is not None)
    for elem, w in _batch_logprob_tables(model, params, batches, draws):
        lme.add(elem, w)
    return -lme.result().sum(axis=1)


def joint_nll(model, params, batch, m=DEFAULT_EVAL_INDICES, seed=0, exact=None):
    return float(joint_nll_many(model, params, [batch], m, seed, exact)[0])


def product_marginal_joint_nll(model, params, batch, m=DEFAULT_EVAL_INDICES, seed=0, exact=None):
    return float(product_marginal_nll_many(model, params, [batch], m, seed, exact)[0])


def classification_error(model, params, x, y, m=DEFAULT_EVAL_INDICES, seed=0, exact=None):
    """Error of the argmax of the marginal prediction; ties go to the lowest class."""
    lp = marginal_log_probs(model, params, np.atleast_2d(x), index_draws(model, m, seed, exact))
    return float(np.mean(np.argmax(lp, axis=1) != np.asarray(y)))


def evaluate(model, params, test_x, test_y, batches, m=DEFAULT_EVAL_INDICES, seed=0):
    """Error, marginal NLL and mean joint NLL (with its standard error) of one agent."""
    draws = index_draws(model, m, seed)
    lp = marginal_log_probs(model, params, test_x, draws)
    test_y = np.asarray(test_y)
    marg = -lp[np.arange(len(test_y)), test_y]
    joint = joint_nll_many(model, params, batches, draws=draws)
    return {
        "error": float(np.mean(np.argmax(lp, axis=1) != test_y)),
        "marginal_nll": float(marg.mean()),
        "joint_nll": float(joint.mean()),
        "joint_nll_se": float(joint.std(ddof=1) / np.sqrt(len(joint))) if len(joint) > 1 else 0.0,
    }


# --------------------------------------------------------------------------
# exact Bayes reference over a finite hypothesis set


class PosteriorMassError(ValueError):
    pass


def _logsumexp(a, axis=0):
    mx = np.max(a, axis=axis, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise PosteriorMassError("zero total posterior mass")
    return np.squeeze(mx, axis=axis) + np.log(np.exp(a - mx).sum(axis=axis))


class BayesOracle:
    """Posterior over finitely many hypotheses ``h``, each a function ``x -> logits``.

    Class probabilities under ``h`` are ``softmax(h(x))``.
    """

    def __init__(self, hypotheses, observed_x=None, observed_y=None, prior=None):
        self.hypotheses = list(hypotheses)
        k = len(self.hypotheses)
        if k < 1:
            raise ValueError("need at least one hypothesis")
        prior = np.full(k, 1.0 / k) if prior is None else np.asarray(prior, dtype=DTYPE)
        if prior.shape != (k,) or np.any(prior < 0):
            raise ValueError("prior must be a non-negative length-|H| vector")
        with np.errstate(divide="ignore"):
            log_post = np.log(prior)
        if observed_x is not None and len(observed_x):
            ll = np.stack([self.log_probs(i, observed_x, observed_y) for i in range(k)])
            log_post = log_post + ll.sum(axis=1)
        self.log_posterior = log_post - _logsumexp(log_post)

    @property
    def posterior(self):
        return np.exp(self.log_posterior)

    def log_probs(self, h, x, y):
        lp = log_softmax(np.asarray(self.hypotheses[h](np.atleast_2d(x)), dtype=DTYPE))
        return lp[np.arange(len(lp)), np.asarray(y)]


def bayes_joint_nll(oracle, batch):
    """``-log sum_h posterior(h) prod_t P_h(y_t | x_t)``."""
    per_h = np.array([oracle.log_probs(h, batch.inputs, batch.labels).sum() for h in range(len(oracle.hypotheses))])
    return float(-_logsumexp(oracle.log_posterior + per_h))


class PosteriorMixtureEnn(EnnModel):
    """ENN whose index picks a hypothesis with its posterior probability."""

    family = "posterior-mixture"

    def __init__(self, oracle, input_dim, num_classes):
        super().__init__(refs.categorical(oracle.posterior), Layout(), input_dim, num_classes)
        self.oracle = oracle

    def forward_batch(self, params, x, zs):
        x = self._check_x(x)
        zs = self.ref.check(zs)
        table = {h: np.asarray(self.oracle.hypotheses[h](x), dtype=DTYPE) for h in np.unique(zs)}
        return np.stack([table[h] for h in zs]), None

    def backward(self, params, cache, upstream, grad=None):
        raise TypeError("the posterior mixture has no trainable parameters")


def make_posterior_mixture(oracle, input_dim, num_classes):
    return PosteriorMixtureEnn(oracle, input_dim, num_classes)
