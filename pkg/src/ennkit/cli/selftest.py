"""A few seconds of numerical sanity checks, runnable from an installed package."""
from __future__ import annotations

import math

import numpy as np

from ennkit import evaluation as ev
from ennkit.enn import models as enn
from ennkit.numerics import MlpArch
from ennkit.training import LossSpec, minibatch_gradient


def _fd_gradient_check():
    rng = np.random.default_rng(0)
    model = enn.make_epinet(MlpArch(3, (6,), 2), (5,), 3, MlpArch(3, (4,), 2), 1.0, seed=1)
    params = model.params.copy()
    params.flat[model.trainable] += rng.normal(0.0, 0.3, model.num_params)
    x, y = rng.normal(size=(4, 3)), rng.integers(0, 2, size=4)
    zs = model.sample_indices(rng, 3)
    spec = LossSpec("xent", l2=0.1)
    _, grad = minibatch_gradient(model, params, x, y, zs, spec, 4)
    # the epinet's stop-gradient makes the naive objective differ on base
    # weights, so compare on the epinet block where both agree
    lo, hi = model.layout.span("epinet/")
    worst = 0.0
    for i in range(lo, hi, 7):
        q = params.copy()
        q.flat[i] += 1e-6
        up, _ = minibatch_gradient(model, q, x, y, zs, spec, 4)
        q.flat[i] -= 2e-6
        dn, _ = minibatch_gradient(model, q, x, y, zs, spec, 4)
        fd = (up - dn) / 2e-6
        worst = max(worst, abs(fd - grad.flat[i]) / max(1e-8, abs(fd) + abs(grad.flat[i])))
    return worst < 1e-5, f"max relative error {worst:.2e}"


def _uniform_joint():
    model = enn.make_mlp(MlpArch(2, (), 2), seed=0)
    params = model.params.zeros_like()
    batch = ev.JointBatch(np.zeros((10, 2)), np.zeros(10, dtype=int))
    nll = ev.joint_nll(model, params, batch)
    return abs(nll - 10 * math.log(2)) < 1e-12, f"joint NLL {nll:.15f}"


def _two_particle_joint():
    model = enn.make_ensemble(2, MlpArch(1, (), 2), seed=0)
    params = model.params.zeros_like()
    params["particles/b0"] = np.array([[50.0, -50.0], [-50.0, 50.0]])
    batch = ev.JointBatch(np.zeros((2, 1)), np.array([0, 0]))
    j = ev.joint_nll(model, params, batch)
    p = ev.product_marginal_joint_nll(model, params, batch)
    ok = abs(j - math.log(2)) < 1e-12 and abs(p - 2 * math.log(2)) < 1e-12
    return ok, f"joint {j:.12f}, product of marginals {p:.12f}"


CHECKS = [
    ("epinet gradient vs finite differences", _fd_gradient_check),
    ("uniform predictor joint NLL = 10 ln 2", _uniform_joint),
    ("two opposite particles: joint ln 2, marginal 2 ln 2", _two_particle_joint),
]


def run_selftest(verbose=False):
    all_ok = True
    for name, fn in CHECKS:
        ok, detail = fn()
        all_ok &= ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
