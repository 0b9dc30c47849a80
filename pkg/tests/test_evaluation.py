import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ennkit import evaluation as ev
from ennkit.enn import make_ensemble, make_mlp
from ennkit.numerics import MlpArch
from families import perturbed_params, small_model
from oracles import brute_force_joint_nll, softmax_list

LN2 = math.log(2)


def opposite_particles(margin=50.0):
    """Two particles that deterministically predict class 0 and class 1."""
    model = make_ensemble(2, MlpArch(1, (), 2), seed=0)
    params = model.params.zeros_like()
    params["particles/b0"] = np.array([[margin, -margin], [-margin, margin]])
    return model, params


def random_ensemble(k, c=2, d=2, seed=0):
    model = make_ensemble(k, MlpArch(d, (4,), c), seed=seed)
    return model, perturbed_params(model, seed, scale=1.0)


def particle_tables(model, params, x):
    """Per-particle softmax tables, one Python list per input."""
    out = []
    for k in range(model.ref.dim):
        logits = model.logits(params, x, np.array([k]))[0]
        out.append([softmax_list(list(row)) for row in logits])
    return out


# -- marginals -----------------------------------------------------------------------


def test_z_independent_marginal_ignores_m_and_seed(rng):
    model = small_model("mlp")
    x = rng.normal(size=(5, 3))
    a = ev.marginal_probs(model, model.params, x, m=1, seed=0)
    b = ev.marginal_probs(model, model.params, x, m=37, seed=9)
    assert np.allclose(a, b, atol=1e-15, rtol=0)


def test_opposite_particles_marginal_is_half():
    model, params = opposite_particles()
    p = ev.marginal_probs(model, params, np.zeros((1, 1)), exact=True)
    assert np.array_equal(p, [[0.5, 0.5]])


def test_mc_marginal_approaches_enumeration(rng):
    model, params = random_ensemble(5)
    x = rng.normal(size=(4, 2))
    exact = ev.marginal_probs(model, params, x, exact=True)
    direct = np.mean([[softmax_list(list(r)) for r in model.logits(params, x, np.array([k]))[0]] for k in range(5)], axis=0)
    assert np.abs(exact - direct).max() < 1e-14
    devs = [np.abs(ev.marginal_probs(model, params, x, m=m, seed=3, exact=False) - exact).max() for m in (10, 1000, 100_000)]
    assert devs[2] < devs[0] and devs[2] < 0.01


@given(st.integers(0, 10_000))
def test_marginal_rows_are_distributions(seed):
    model, params = random_ensemble(3, c=4, seed=seed % 50)
    x = np.random.default_rng(seed).normal(0, 3, size=(6, 2))
    p = ev.marginal_probs(model, params, x, m=7, seed=seed, exact=False)
    assert np.all((p >= 0) & (p <= 1))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


# -- joint NLL ---------------------------------------------------------------


def test_uniform_predictor_joint_nll():
    model = make_mlp(MlpArch(2, (), 2))
    batch = ev.JointBatch(np.random.default_rng(0).normal(size=(10, 2)), np.arange(10) % 2)
    assert abs(ev.joint_nll(model, model.params.zeros_like(), batch) - 10 * LN2) <= 1e-12


def test_opposite_particles_joint_vs_product():
    model, params = opposite_particles()
    batch = ev.JointBatch(np.zeros((2, 1)), np.array([1, 1]))
    assert ev.joint_nll(model, params, batch) == LN2
    assert ev.product_marginal_joint_nll(model, params, batch) == 2 * LN2


@pytest.mark.parametrize("family", ["mlp", "ensemble"])
def test_z_independent_joint_equals_product_bitwise(family, rng):
    if family == "mlp":
        model, params = small_model("mlp"), None
        params = perturbed_params(model, 3)
        m = 20
    else:  # three identical particles
        model, params = random_ensemble(3, d=3)
        for name in ("particles/w0", "particles/b0", "particles/w1", "particles/b1"):
            params[name] = np.broadcast_to(params[name][0], params[name].shape).copy()
        m = 3
    batches = ev.dyadic_batches(lambda r, n: r.normal(size=(n, 3)), 10, 50, 1, lambda r, x: r.integers(0, 2, len(x)))
    j = ev.joint_nll_many(model, params, batches, m=m)
    p = ev.product_marginal_nll_many(model, params, batches, m=m)
    assert np.array_equal(j, p)


def test_k3_tau4_matches_brute_force(rng):
    model, params = random_ensemble(3)
    x = rng.normal(size=(4, 2))
    y = np.array([0, 1, 1, 0])
    tables = particle_tables(model, params, x)
    got = ev.joint_nll(model, params, ev.JointBatch(x, y), m=3)
    assert abs(got - brute_force_joint_nll(tables, y)) < 1e-10


@pytest.mark.parametrize("k", [1, 2, 3, 4])
@pytest.mark.parametrize("tau", [1, 2, 3, 4, 5])
def test_enumeration_equals_brute_force_for_every_label_tuple(k, tau):
    model, params = random_ensemble(k, seed=k * 10 + tau)
    x = np.random.default_rng(tau).normal(size=(tau, 2))
    tables = particle_tables(model, params, x)
    total = 0.0
    for y in itertools.product(range(2), repeat=tau):
        got = ev.joint_nll(model, params, ev.JointBatch(x, np.array(y)), exact=True)
        ref = brute_force_joint_nll(tables, y)
        assert abs(got - ref) < 1e-10
        total += math.exp(-got)
    assert abs(total - 1.0) < 1e-10


def test_joint_nll_is_log_space_safe():
    # every element has probability ~1e-300 under each particle; the plain
    # product over tau = 10 would underflow to zero
    c = 1000
    model = make_ensemble(2, MlpArch(1, (), c), seed=0)
    params = model.params.zeros_like()
    b = np.zeros((2, c))
    b[:, 0] = 690.0  # class 0 soaks up the mass; every other class ~ e^-690
    params["particles/b0"] = b
    batch = ev.JointBatch(np.zeros((10, 1)), np.arange(1, 11))
    logp = 0.0 - 690.0 - math.log1p((c - 1) * math.exp(-690.0))
    got = ev.joint_nll(model, params, batch)
    assert np.isfinite(got) and abs(got + 10 * logp) < 1e-9


def test_mc_error_shrinks_like_inverse_sqrt_m():
    model, params = random_ensemble(40, seed=2)
    batches = ev.dyadic_batches(lambda r, n: r.normal(size=(n, 2)), 10, 5, 0, lambda r, x: r.integers(0, 2, len(x)))
    spread = {}
    for m in (10, 160):
        est = [ev.joint_nll_many(model, params, batches, m=m, seed=s, exact=False).mean() for s in range(60)]
        spread[m] = np.std(est)
    ratio = spread[10] / spread[160]
    assert 2.5 < ratio < 6.5  # sqrt(16) = 4


def test_joint_nll_non_negative_on_random_batches(rng):
    model = small_model("epinet")
    batches = ev.dyadic_batches(lambda r, n: r.normal(size=(n, 3)), 10, 20, 3, lambda r, x: r.integers(0, 2, len(x)))
    assert np.all(ev.joint_nll_many(model, perturbed_params(model, 1), batches, m=50) >= 0)


def test_batches_must_share_tau():
    model = small_model("mlp")
    batches = [ev.JointBatch(np.zeros((2, 3)), [0, 1]), ev.JointBatch(np.zeros((3, 3)), [0, 1, 1])]
    with pytest.raises(ValueError):
        ev.joint_nll_many(model, model.params, batches)


# -- dyadic sampling ----------------------------------------------------------------


def sampler(rng, n):
    return rng.normal(size=(n, 2))


def coin(rng, x):
    return rng.integers(0, 2, size=len(x))


def test_dyadic_batches_reproducible():
    a = ev.dyadic_batches(sampler, 10, 20, 5, coin)
    b = ev.dyadic_batches(sampler, 10, 20, 5, coin)
    for u, v in zip(a, b):
        assert np.array_equal(u.inputs, v.inputs) and np.array_equal(u.labels, v.labels)


def test_every_element_copies_an_anchor():
    for batch in ev.dyadic_batches(sampler, 10, 50, 1, coin):
        assert np.array_equal(batch.inputs, batch.anchors[batch.anchor_ids])


def test_anchor_counts_are_binomial():
    tau, count = 10, 10_000
    ones = np.array([b.anchor_ids.sum() for b in ev.dyadic_batches(sampler, tau, count, 2, coin)])
    se = math.sqrt(tau * 0.25 / count)
    assert abs(ones.mean() - tau / 2) < 3 * se


def test_anchor_collision_gives_identical_inputs():
    batches = ev.dyadic_batches(lambda rng, n: np.ones((n, 2)), 10, 3, 0, coin)
    for b in batches:
        assert np.all(b.inputs == 1.0)


def test_dyadic_needs_tau_two():
    with pytest.raises(ValueError):
        ev.dyadic_batches(sampler, 1, 1, 0, coin)


# -- classification error --------------------------------------------------------


def test_perfect_predictor_has_zero_error():
    model = make_mlp(MlpArch(1, (), 2))
    params = model.params.zeros_like()
    params["base/w0"] = np.array([[-1.0, 1.0]])
    x = np.array([[-2.0], [-1.0], [1.0], [3.0]])
    assert ev.classification_error(model, params, x, [0, 0, 1, 1]) == 0.0


def test_constant_predictor_on_balanced_set():
    model = make_mlp(MlpArch(1, (), 2))
    x = np.arange(10.0)[:, None]
    # zero logits tie, and ties go to class 0
    assert ev.classification_error(model, model.params.zeros_like(), x, np.arange(10) % 2) == 0.5


def test_error_matches_hand_count():
    model = make_mlp(MlpArch(1, (), 3))
    params = model.params.zeros_like()
    params["base/w0"] = np.array([[-1.0, 0.0, 1.0]])
    x = np.array([-3, -2, -1, 0, 1, 2, 3, -0.5, 0.5, 0.0])[:, None]
    # predictions:  0   0   0  0  2  2  2   0    2    0  (x=0 is a three-way tie)
    y = np.array([0, 1, 0, 1, 2, 2, 0, 0, 1, 0])
    # wrong at positions 1, 3, 6, 8
    assert ev.classification_error(model, params, x, y) == 0.4


# -- Bayes oracle --------------------------------------------------------------------


def const_hypothesis(p1):
    logit = math.log(p1 / (1 - p1))
    return lambda x: np.tile([0.0, logit], (len(x), 1))


def test_single_hypothesis_oracle_is_its_joint_nll(rng):
    w = rng.normal(size=(2, 3))
    oracle = ev.BayesOracle([lambda x: x @ w])
    x = rng.normal(size=(5, 2))
    y = np.array([0, 2, 1, 1, 0])
    ref = -sum(math.log(softmax_list(list(row))[t]) for row, t in zip(x @ w, y))
    assert abs(ev.bayes_joint_nll(oracle, ev.JointBatch(x, y)) - ref) < 1e-12


def test_two_coin_posterior_arithmetic():
    # coins with P(heads) 0.8 and 0.2, uniform prior, observe H H T
    oracle = ev.BayesOracle([const_hypothesis(0.8), const_hypothesis(0.2)], np.zeros((3, 1)), [1, 1, 0])
    post_a = 0.8**2 * 0.2 / (0.8**2 * 0.2 + 0.2**2 * 0.8)
    assert oracle.posterior == pytest.approx([post_a, 1 - post_a], abs=1e-14)
    batch = ev.JointBatch(np.zeros((2, 1)), [1, 1])
    expected = -math.log(post_a * 0.64 + (1 - post_a) * 0.04)
    assert ev.bayes_joint_nll(oracle, batch) == pytest.approx(expected, abs=1e-12)


def test_zero_posterior_mass_is_an_error():
    certain = lambda x: np.tile([0.0, -np.inf], (len(x), 1))  # noqa: E731
    with pytest.raises(ev.PosteriorMassError):
        ev.BayesOracle([certain, certain], np.zeros((1, 1)), [1])


def test_posterior_mixture_enn_matches_oracle(rng):
    ws = [rng.normal(size=(2, 2)) for _ in range(4)]
    x_obs = rng.normal(size=(6, 2))
    y_obs = rng.integers(0, 2, size=6)
    oracle = ev.BayesOracle([lambda x, w=w: x @ w for w in ws], x_obs, y_obs)
    mix = ev.make_posterior_mixture(oracle, 2, 2)
    batches = ev.dyadic_batches(sampler, 10, 200, 4, coin)
    got = ev.joint_nll_many(mix, mix.params, batches)
    ref = [ev.bayes_joint_nll(oracle, b) for b in batches]
    assert np.abs(got - ref).max() < 1e-9


def test_evaluate_reports_all_metrics(rng):
    model = small_model("ensemble")
    x = rng.normal(size=(20, 3))
    y = rng.integers(0, 2, 20)
    batches = ev.dyadic_batches(lambda r, n: r.normal(size=(n, 3)), 10, 10, 0, coin)
    out = ev.evaluate(model, model.params, x, y, batches, m=3)
    assert set(out) == {"error", "marginal_nll", "joint_nll", "joint_nll_se"}
    assert out["joint_nll"] == pytest.approx(ev.joint_nll_many(model, model.params, batches, m=3).mean(), abs=1e-12)
