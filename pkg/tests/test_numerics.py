import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ennkit.numerics import (
    Layout,
    MlpArch,
    NonFiniteError,
    ParamStore,
    ShapeError,
    init_mlp,
    make_optimizer,
    mlp_backward,
    mlp_forward,
    mlp_layout,
    mlp_weights,
    optimizer_step,
    relu,
    rng_split,
)
from oracles import adam_trace, relative_error, straight_line_mlp


def random_mlp(arch, seed):
    params = ParamStore(mlp_layout(arch))
    init_mlp(arch, params, rng_split(seed, "init"))
    params.flat[:] += np.random.default_rng(seed).normal(0, 0.1, len(params))  # non-zero biases too
    return params


# -- architecture ---------------------------------------------------------------


def test_param_count_formula():
    arch = MlpArch(4, (8, 8), 3)
    assert arch.num_params == (4 + 1) * 8 + (8 + 1) * 8 + (8 + 1) * 3
    assert len(ParamStore(mlp_layout(arch))) == arch.num_params


def test_arch_rejects_zero_width():
    with pytest.raises(ValueError):
        MlpArch(3, (0,), 2)


@given(st.integers(1, 5), st.lists(st.integers(1, 6), max_size=3), st.integers(1, 4))
def test_views_partition_flat_vector(d, hidden, c):
    arch = MlpArch(d, tuple(hidden), c)
    layout = mlp_layout(arch, "net/", stack=(2,))
    offsets = sorted((v.offset, v.size) for v in layout)
    pos = 0
    for off, size in offsets:
        assert off == pos
        pos += size
    assert pos == layout.size == 2 * arch.num_params


@given(st.integers(0, 2**31 - 1))
def test_pack_unpack_round_trip(seed):
    arch = MlpArch(3, (4,), 2)
    store = ParamStore(mlp_layout(arch))
    store.flat[:] = np.random.default_rng(seed).normal(size=len(store))
    again = ParamStore.pack(store.layout, store.unpack())
    assert np.array_equal(again.flat, store.flat)


def test_layout_serialization_round_trip():
    layout = mlp_layout(MlpArch(2, (3,), 1), "a/")
    layout.add("extra", (4,))
    assert Layout.from_list(layout.to_list()) == layout


# -- forward ---------------------------------------------------------------------


def test_zero_weights_give_zero_output():
    arch = MlpArch(3, (5, 4), 2)
    out, _ = mlp_forward(arch, ParamStore(mlp_layout(arch)), np.array([[1.0, -2.0, 3.0]]))
    assert np.array_equal(out, np.zeros((1, 2)))


def test_identity_linear_layer():
    arch = MlpArch(2, (), 2)
    params = ParamStore(mlp_layout(arch))
    params["w0"] = np.eye(2)
    out, _ = mlp_forward(arch, params, np.array([[1.0, 2.0]]))
    assert np.array_equal(out, np.array([[1.0, 2.0]]))


def test_forward_matches_straight_line_evaluator():
    arch = MlpArch(2, (3,), 2)
    params = random_mlp(arch, 7)
    x = np.random.default_rng(3).normal(size=(5, 2))
    out, _ = mlp_forward(arch, params, x)
    weights = [(w, b) for w, b in mlp_weights(arch, params)]
    for i in range(5):
        assert np.max(np.abs(out[i] - straight_line_mlp(weights, x[i]))) < 1e-12


def test_forward_is_deterministic():
    arch = MlpArch(4, (8, 8), 3)
    params = random_mlp(arch, 1)
    x = np.random.default_rng(0).normal(size=(6, 4))
    a, _ = mlp_forward(arch, params, x)
    b, _ = mlp_forward(arch, params, x)
    assert np.array_equal(a, b)


def test_dimension_mismatch_names_layer():
    arch = MlpArch(3, (4,), 2)
    with pytest.raises(ShapeError, match="input"):
        mlp_forward(arch, random_mlp(arch, 0), np.ones((1, 5)))


def test_relu_derivative_at_zero_is_zero():
    arch = MlpArch(1, (1,), 1)
    params = ParamStore(mlp_layout(arch))
    params["w0"] = np.array([[1.0]])
    params["w1"] = np.array([[1.0]])
    _, tape = mlp_forward(arch, params, np.array([[0.0]]))  # hidden pre-activation exactly 0
    grad = mlp_backward(tape, np.ones((1, 1)), params)
    assert grad["w0"][0, 0] == 0.0 and grad["b0"][0] == 0.0
    assert relu(np.array([0.0]))[0] == 0.0


# -- backward ------------------------------------------------------------------


def test_zero_upstream_gives_zero_gradient():
    arch = MlpArch(4, (8, 8), 3)
    params = random_mlp(arch, 2)
    _, tape = mlp_forward(arch, params, np.ones((3, 4)))
    assert not mlp_backward(tape, np.zeros((3, 3)), params).flat.any()


def test_last_bias_gradient_is_one_for_scalar_output():
    arch = MlpArch(3, (5,), 1)
    params = random_mlp(arch, 4)
    _, tape = mlp_forward(arch, params, np.ones((1, 3)))
    assert mlp_backward(tape, np.ones((1, 1)), params)["b1"][0] == 1.0


def test_backward_matches_finite_differences_4_8_8_3():
    arch = MlpArch(4, (8, 8), 3)
    params = random_mlp(arch, 11)
    rng = np.random.default_rng(5)
    x, up = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))

    def objective(p):
        return float(np.sum(up * mlp_forward(arch, p, x)[0]))

    _, tape = mlp_forward(arch, params, x)
    grad = mlp_backward(tape, up, params).flat
    fd = np.empty_like(grad)
    h = 1e-5
    for i in range(len(fd)):
        q = params.copy()
        q.flat[i] += h
        a = objective(q)
        q.flat[i] -= 2 * h
        fd[i] = (a - objective(q)) / (2 * h)
    assert relative_error(grad, fd).max() < 1e-5


def test_stale_tape_is_rejected():
    arch = MlpArch(3, (4,), 2)
    other = MlpArch(3, (5,), 2)
    _, tape = mlp_forward(arch, random_mlp(arch, 0), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        mlp_backward(tape, np.ones((2, 2)), random_mlp(other, 0))
    with pytest.raises(ShapeError):
        mlp_backward(tape, np.ones((2, 3)), random_mlp(arch, 0))


def test_stacked_forward_equals_per_member_forward():
    arch = MlpArch(3, (4,), 2)
    layout = mlp_layout(arch, "s/", stack=(3,))
    stacked = ParamStore(layout)
    init_mlp(arch, stacked, rng_split(0, "s"), "s/", stack=(3,))
    x = np.random.default_rng(1).normal(size=(5, 3))
    out, _ = mlp_forward(arch, stacked, x, "s/")
    for k in range(3):
        weights = [(stacked[f"s/w{i}"][k], stacked[f"s/b{i}"][k]) for i in range(2)]
        for n in range(5):
            assert np.allclose(out[k, n], straight_line_mlp(weights, x[n]), atol=1e-12)


# -- optimizers ------------------------------------------------------------------


def test_sgd_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    state = make_optimizer("sgd", 2, lr=0.5)
    optimizer_step(state, p, np.zeros(2))
    assert np.array_equal(p, [1.0, -2.0])


def test_sgd_one_step_arithmetic():
    p = np.array([1.0])
    optimizer_step(make_optimizer("sgd", 1, lr=0.1), p, np.array([2.0]))
    assert p[0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_momentum_accumulates():
    p = np.array([0.0])
    state = make_optimizer("sgd_momentum", 1, lr=1.0, momentum=0.5)
    optimizer_step(state, p, np.array([1.0]))
    optimizer_step(state, p, np.array([1.0]))
    assert p[0] == -2.5  # -1, then -(0.5*1 + 1)


def test_adam_matches_hand_trace():
    p = np.array([0.5])
    grads = [0.3, -1.2, 2.0]
    state = make_optimizer("adam", 1, lr=1e-2)
    expected = adam_trace(0.5, grads, 1e-2)
    for g, e in zip(grads, expected):
        optimizer_step(state, p, np.array([g]))
        assert abs(p[0] - e) < 1e-12
    assert state.step_count == 3


def test_non_finite_gradient_fails_fast():
    p = np.zeros(3)
    state = make_optimizer("adam", 3)
    with pytest.raises(NonFiniteError):
        optimizer_step(state, p, np.array([0.0, np.nan, 1.0]))
    assert state.step_count == 0 and not p.any()


def test_frozen_entries_untouched():
    p = np.array([1.0, 2.0, 3.0])
    mask = np.array([True, False, True])
    optimizer_step(make_optimizer("adam", 3, lr=0.1), p, np.ones(3), trainable=mask)
    assert p[1] == 2.0 and p[0] != 1.0


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", 2)


# -- random streams ----------------------------------------------------------------


def test_same_seed_same_draws():
    assert np.array_equal(rng_split(5, "a").normal(size=100), rng_split(5, "a").normal(size=100))


def test_split_streams_do_not_collide():
    a = rng_split(5, "a").integers(0, 2**62, size=10_000)
    b = rng_split(5, "b").integers(0, 2**62, size=10_000)
    assert np.sum(a == b) == 0  # chance of any positional match ~ 1e4 / 4.6e18


def test_gaussian_sampler_mean():
    n = 10**6
    x = rng_split(0, "lln").standard_normal(n)
    assert abs(x.mean()) < 4.0 / np.sqrt(n)
