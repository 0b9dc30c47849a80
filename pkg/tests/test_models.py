import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ennkit import evaluation as ev
from ennkit.enn import (
    IndexMismatchError,
    build_model,
    checkpoint,
    enn_backward,
    enn_forward,
    gaussian,
    make_bbb_cast,
    make_dropout,
    make_ensemble,
    make_ensemble_plus,
    make_epinet,
    make_hypermodel,
    uniform,
)
from ennkit.numerics import MlpArch, ShapeError, mlp_apply, mlp_backward, mlp_forward, mlp_weights, unflatten_mlp
from ennkit.training import LabeledDataset, LossSpec, TrainConfig, train
from families import FAMILIES, finite_difference, perturbed_params, sg_logits, small_model
from oracles import relative_error, softmax_list, straight_line_epinet, straight_line_mlp

ARCH = MlpArch(3, (5, 4), 2)
PRIOR = MlpArch(3, (3,), 2)


def member_weights(params, prefix, k, arch):
    return [(params[f"{prefix}w{i}"][k], params[f"{prefix}b{i}"][k]) for i in range(arch.num_layers)]


# -- reference distributions ----------------------------------------------------


def test_reference_sampling_shapes(rng):
    assert gaussian(4).sample(rng, 7).shape == (7, 4)
    zs = uniform(5).sample(rng, 100)
    assert zs.dtype.kind == "i" and zs.min() >= 0 and zs.max() < 5
    idx, w = uniform(3).enumerate()
    assert list(idx) == [0, 1, 2]


def test_index_mismatch_is_an_error(rng):
    model = small_model("epinet")
    x = rng.normal(size=(2, 3))
    with pytest.raises(IndexMismatchError):
        model.logits(model.params, x, np.zeros((1, 5)))
    ens = small_model("ensemble")
    with pytest.raises(IndexMismatchError):
        ens.logits(ens.params, x, np.array([3]))
    with pytest.raises(IndexMismatchError):
        ens.logits(ens.params, x, np.zeros((1, 3)))


def test_wrong_input_width_is_a_shape_error():
    model = small_model("mlp")
    with pytest.raises(ShapeError):
        model.logits(model.params, np.ones((2, 4)), np.array([0]))


# -- epinet ------------------------------------------------------------------


def test_zero_epinet_and_zero_alpha_is_base_net(rng):
    model = make_epinet(ARCH, (6,), 3, PRIOR, 0.0, seed=2)
    params = perturbed_params(model, 1)
    params.block("epinet/")[:] = 0.0
    x = rng.normal(size=(4, 3))
    mu, _ = mlp_forward(ARCH, params, x, "base/")
    for z in rng.normal(size=(5, 3)):
        assert np.array_equal(enn_forward(model, params, x, z), mu)


def test_prior_term_on_basis_vector(rng):
    alpha = 0.7
    model = make_epinet(ARCH, (6,), 3, PRIOR, alpha, seed=2)
    x = rng.normal(size=(4, 3))
    raw, _ = mlp_forward(PRIOR, model.params, x, "prior/")
    for i in range(3):
        z = np.eye(3)[i][None]
        assert np.allclose(model.prior_output(model.params, x, z)[0], alpha * raw[i], atol=1e-14, rtol=0)


def test_epinet_matches_straight_line_evaluator(rng):
    model = make_epinet(ARCH, (6,), 3, PRIOR, 0.8, seed=5)
    params = perturbed_params(model, 3)
    x = rng.normal(size=(2, 3))
    zs = rng.normal(size=(3, 3))
    out = model.logits(params, x, zs)
    base = mlp_weights(ARCH, params, "base/")
    g = mlp_weights(model.g_arch, params, "epinet/")
    priors = [member_weights(params, "prior/", i, PRIOR) for i in range(3)]
    for m in range(3):
        for n in range(2):
            ref = straight_line_epinet(base, g, priors, 0.8, x[n], zs[m], 2)
            assert np.max(np.abs(out[m, n] - ref)) < 1e-12


def test_epinet_initial_output_is_base_plus_prior(rng):
    model = make_epinet(ARCH, (6,), 3, PRIOR, 0.8, seed=5)
    x, zs = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    mu, _ = mlp_forward(ARCH, model.params, x, "base/")
    expected = mu[None] + model.prior_output(model.params, x, zs)
    assert np.array_equal(model.logits(model.params, x, zs), expected)


def test_epinet_initial_variation_is_positive(rng):
    model = make_epinet(ARCH, (6,), 3, PRIOR, 1.0, seed=5)
    out = model.logits(model.params, rng.normal(size=(3, 3)), model.sample_indices(rng, 1000))
    assert np.all(out.var(axis=0) > 0)


@pytest.mark.parametrize("index_input", [True, False])
def test_epinet_stop_gradient_block_structure(rng, index_input):
    model = make_epinet(ARCH, (6,), 3, PRIOR, 0.8, seed=4, index_input=index_input)
    params = perturbed_params(model, 8)
    x, z = rng.normal(size=(5, 3)), rng.normal(size=3)
    up = rng.normal(size=(5, 2))
    grad = enn_backward(model, params, x, z, up)
    _, tape = mlp_forward(ARCH, params, x, "base/")
    base_only = mlp_backward(tape, up, params)
    lo, hi = model.layout.span("base/")
    assert np.max(np.abs(grad.flat[lo:hi] - base_only.flat[lo:hi])) <= 1e-12
    assert not grad.block("prior/").any()


@pytest.mark.parametrize("index_input", [True, False])
def test_epinet_gradient_with_stop_gradient_fd(rng, index_input):
    model = make_epinet(ARCH, (6,), 3, PRIOR, 0.8, seed=4, index_input=index_input)
    params = perturbed_params(model, 9)
    x, zs = rng.normal(size=(4, 3)), rng.normal(size=(3, 3))
    up = rng.normal(size=(3, 4, 2))
    _, cache = model.forward_batch(params, x, zs)
    grad = model.backward(params, cache, up).flat

    def objective(q):
        return float(np.sum(up * sg_logits(model, q, params, x, zs)))

    coords = np.flatnonzero(model.trainable)
    fd = finite_difference(objective, params, coords)
    assert relative_error(grad[coords], fd).max() < 1e-5


# -- ensembles ---------------------------------------------------------------


def test_single_particle_ensemble_ignores_index(rng):
    model = make_ensemble(1, ARCH, seed=0)
    x = rng.normal(size=(3, 3))
    out = model.logits(model.params, x, np.zeros(4, dtype=int))
    assert np.array_equal(out[0], out[3])


def test_ensemble_particles_are_independent_mlps(rng):
    model = make_ensemble(3, ARCH, seed=1)
    x = rng.normal(size=(2, 3))
    for k in range(3):
        w = member_weights(model.params, "particles/", k, ARCH)
        out = enn_forward(model, model.params, x, k)
        for n in range(2):
            assert np.max(np.abs(out[n] - straight_line_mlp(w, x[n]))) < 1e-12
    w0 = model.params["particles/w0"]
    assert not np.array_equal(w0[0], w0[1])


def test_ensemble_average_prediction_is_mean_softmax(rng):
    model = make_ensemble(3, ARCH, seed=1)
    x = rng.normal(size=(4, 3))
    probs = ev.marginal_probs(model, model.params, x, m=3, exact=True)
    for n in range(4):
        direct = np.mean([softmax_list(list(enn_forward(model, model.params, x[n : n + 1], k)[0])) for k in range(3)], axis=0)
        assert np.max(np.abs(probs[n] - direct)) < 1e-12


def test_ensemble_plus_with_zero_scale_is_ensemble(rng):
    a = make_ensemble_plus(3, ARCH, PRIOR, 0.0, seed=6)
    b = make_ensemble(3, ARCH, seed=6)
    x = rng.normal(size=(4, 3))
    ks = np.arange(3)
    assert np.array_equal(a.logits(a.params, x, ks), b.logits(b.params, x, ks))


def test_ensemble_plus_zeroed_weights_gives_scaled_prior(rng):
    model = make_ensemble_plus(3, ARCH, PRIOR, 0.6, seed=6)
    params = model.params.copy()
    params.block("particles/")[:] = 0.0
    x = rng.normal(size=(4, 3))
    raw, _ = mlp_forward(PRIOR, params, x, "prior/")
    assert np.allclose(model.logits(params, x, np.arange(3)), 0.6 * raw, atol=1e-15, rtol=0)


def test_ensemble_zero_particles_rejected():
    with pytest.raises(ValueError):
        make_ensemble(0, ARCH)


# -- dropout -------------------------------------------------------------------


def test_dropout_rate_zero_is_plain_mlp(rng):
    model = make_dropout(ARCH, 0.0, seed=3)
    x = rng.normal(size=(4, 3))
    zs = model.sample_indices(rng, 5)
    assert zs.all()
    plain, _ = mlp_forward(ARCH, model.params, x, "base/")
    assert np.array_equal(model.logits(model.params, x, zs)[2], plain)


def test_dropout_mask_killing_layer_propagates_biases(rng):
    model = make_dropout(ARCH, 0.5, seed=3)
    params = perturbed_params(model, 2)
    z = np.ones(9)
    z[5:] = 0  # second hidden layer (width 4) fully dropped
    out = enn_forward(model, params, rng.normal(size=(3, 3)), z)
    assert np.allclose(out, np.broadcast_to(params["base/b2"], out.shape), atol=0, rtol=0)


def test_dropout_expectation_on_linear_regime(rng):
    arch = MlpArch(2, (6,), 1)
    model = make_dropout(arch, 0.4, seed=0)
    params = model.params.copy()
    params["base/w0"] = np.abs(params["base/w0"]) + 0.1  # positive inputs keep every unit active
    x = np.array([[0.5, 1.5]])
    zs = model.sample_indices(rng, 10_000)
    outs = model.logits(params, x, zs)[:, 0, 0]
    det, _ = mlp_forward(arch, params, x, "base/")
    se = outs.std() / np.sqrt(len(outs))
    assert abs(outs.mean() - det[0, 0]) < 4 * se


def test_dropout_rate_one_rejected():
    with pytest.raises(ValueError):
        make_dropout(ARCH, 1.0)


# -- hypermodel --------------------------------------------------------------


def test_hypermodel_zero_eta_ignores_index(rng):
    model = make_hypermodel(ARCH, 4, seed=0)
    x = rng.normal(size=(3, 3))
    out = model.logits(model.params, x, rng.normal(size=(5, 4)))
    assert np.all(out == out[0])


def test_hypermodel_linear_arithmetic():
    arch = MlpArch(2, (), 1)  # theta = (w1, w2, b)
    model = make_hypermodel(arch, 2, seed=0)
    params = model.params.copy()
    zeta = np.array([0.5, -1.0, 0.25])
    eta = np.array([[1.0, 2.0, 0.0], [0.0, -1.0, 3.0]])
    params["base/theta"] = zeta
    params["hyper/eta"] = eta
    z = np.array([2.0, -1.0])
    x = np.array([[3.0, 4.0]])
    theta = zeta + eta.T @ z  # (2.5, 4.0, -2.75)
    expected = theta[0] * 3.0 + theta[1] * 4.0 + theta[2]
    assert enn_forward(model, params, x, z)[0, 0] == pytest.approx(expected, abs=1e-14)


# -- bbb cast --------------------------------------------------------------------


def test_bbb_zero_sigma_is_deterministic(rng):
    model = make_bbb_cast(ARCH, sigma=0.0, seed=1)
    x = rng.normal(size=(3, 3))
    out = model.logits(model.params, x, model.sample_indices(rng, 4))
    assert np.all(out == out[0])


def test_bbb_zero_index_uses_mean(rng):
    model = make_bbb_cast(ARCH, sigma=0.5, seed=1)
    x = rng.normal(size=(3, 3))
    mean_out, _ = mlp_apply(unflatten_mlp(ARCH, model.params["bbb/mu"]), x)
    assert np.allclose(enn_forward(model, model.params, x, np.zeros(ARCH.num_params)), mean_out, atol=1e-14, rtol=0)


def test_bbb_variance_closed_form(rng):
    arch = MlpArch(3, (), 1)
    sigma = np.array([0.2, 0.5, 0.1, 0.3])  # three weights then the bias
    model = make_bbb_cast(arch, sigma=sigma, seed=0)
    x = np.array([[1.0, -2.0, 0.5]])
    out = model.logits(model.params, x, model.sample_indices(rng, 100_000))[:, 0, 0]
    expected = np.sum(sigma[:3] ** 2 * x[0] ** 2) + sigma[3] ** 2
    assert abs(out.var() / expected - 1.0) < 5 * np.sqrt(2.0 / len(out))


def test_bbb_negative_sigma_rejected():
    with pytest.raises(ValueError):
        make_bbb_cast(ARCH, sigma=-0.1)


# -- shared properties ------------------------------------------------------------


@pytest.mark.parametrize("family", FAMILIES)
def test_gradients_match_finite_differences(family, rng):
    model = small_model(family, seed=3)
    params = perturbed_params(model, 4)
    x = rng.normal(size=(4, 3))
    zs = model.sample_indices(rng, 3)
    up = rng.normal(size=(3, 4, 2))
    _, cache = model.forward_batch(params, x, zs)
    grad = model.backward(params, cache, up).flat
    coords = np.flatnonzero(model.trainable)
    fd = finite_difference(lambda q: float(np.sum(up * sg_logits(model, q, params, x, zs))), params, coords)
    assert relative_error(grad[coords], fd).max() < 1e-5
    assert not grad[~model.trainable].any()


@pytest.mark.parametrize("family", FAMILIES)
def test_forward_is_pure(family, rng):
    model = small_model(family)
    x = rng.normal(size=(3, 3))
    zs = model.sample_indices(rng, 4)
    assert np.array_equal(model.logits(model.params, x, zs), model.logits(model.params, x, zs))


@pytest.mark.parametrize("family", ["epinet", "ensemble+", "hypermodel"])
def test_prior_frozen_through_training(family, rng):
    model = small_model(family)
    data = LabeledDataset(rng.normal(size=(20, 3)), rng.integers(0, 2, size=20), 2)
    result = train(model, data, LossSpec("xent", l2=1e6), TrainConfig(batch_size=10, index_batch=2, steps=30, lr=1e-2))
    assert np.array_equal(result.params.block("prior/"), model.params.block("prior/"))
    assert np.abs(result.params.flat[model.trainable]).max() < np.abs(model.params.flat[model.trainable]).max()


@pytest.mark.parametrize("family", FAMILIES)
def test_checkpoint_round_trip_is_bit_exact(family, tmp_path, rng):
    model = small_model(family, seed=2)
    params = perturbed_params(model, 5)
    path = tmp_path / "model.ckpt"
    checkpoint.save(path, model, params)
    loaded, lp = checkpoint.load(path)
    assert loaded.family == model.family
    assert np.array_equal(lp.flat, params.flat)
    x, zs = rng.normal(size=(3, 3)), model.sample_indices(rng, 2)
    assert np.array_equal(loaded.logits(lp, x, zs), model.logits(params, x, zs))


def test_checkpoint_rejects_garbage(tmp_path):
    blob = checkpoint.dumps(small_model("mlp"))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOTACKPT" + blob[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-5])


@given(st.sampled_from(FAMILIES), st.integers(0, 1000))
def test_descriptor_rebuild_reproduces_initial_params(family, seed):
    model = small_model(family, seed=seed)
    again = build_model(model.descriptor())
    assert np.array_equal(again.params.flat, model.params.flat)
