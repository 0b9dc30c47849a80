"""Synthetic classification problems from random MLP generators, and the
benchmark harness that trains agents on them and scores marginal and joint
predictions."""
from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ennkit import evaluation as ev
from ennkit.enn import models as enn
from ennkit.numerics import MlpArch, ParamStore, derive_seed, init_mlp, mlp_forward, mlp_layout, rng_split
from ennkit.training import LabeledDataset, LossSpec, TrainConfig, train


@dataclass
class GenerativeModel:
    """Random 2-hidden-layer ReLU MLP; labels ~ Categorical(softmax(logits / temperature))."""

    input_dim: int
    temperature: float
    width: int = 50
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        self.arch = MlpArch(self.input_dim, (self.width, self.width), self.num_classes)
        self.params = ParamStore(mlp_layout(self.arch))
        init_mlp(self.arch, self.params, rng_split(self.seed, "generator"))
        self.params.flat.setflags(write=False)

    def logits(self, x):
        out, _ = mlp_forward(self.arch, self.params, np.atleast_2d(x))
        return out / self.temperature

    def probs(self, x):
        return np.exp(ev.log_softmax(self.logits(x)))

    def sample_labels(self, rng, x):
        p = self.probs(x)
        u = rng.random(len(p))
        return (u[:, None] > np.cumsum(p, axis=1)).sum(axis=1).clip(max=self.num_classes - 1)


def sample_inputs(rng, n, dim):
    return rng.standard_normal((n, dim))


@dataclass(frozen=True)
class ProblemSpec:
    input_dim: int
    data_ratio: float
    temperature: float
    generator_width: int = 50
    num_classes: int = 2
    num_test: int = 1000
    num_batches: int = 1000
    tau: int = 10

    @property
    def num_train(self):
        return max(1, int(round(self.data_ratio * self.input_dim)))

    @property
    def key(self):
        return f"D{self.input_dim}_lam{self.data_ratio:g}_rho{self.temperature:g}"


@dataclass
class Problem:
    spec: ProblemSpec
    generator: GenerativeModel
    train: LabeledDataset
    test_x: np.ndarray
    test_y: np.ndarray
    batches: list
    seed: int

    def input_sampler(self, rng, n):
        return sample_inputs(rng, n, self.spec.input_dim)


def generate_problem(spec, seed):
    """Training data, a marginal test set and dyadic joint batches, all from one generator."""
    gen = GenerativeModel(spec.input_dim, spec.temperature, spec.generator_width, spec.num_classes, seed=seed)
    rng = rng_split(seed, "problem-data", spec.key)
    x = sample_inputs(rng, spec.num_train, spec.input_dim)
    y = gen.sample_labels(rng, x)
    tx = sample_inputs(rng, spec.num_test, spec.input_dim)
    ty = gen.sample_labels(rng, tx)
    batches = ev.dyadic_batches(
        lambda r, n: sample_inputs(r, n, spec.input_dim),
        spec.tau,
        spec.num_batches,
        derive_seed(seed, "dyadic", spec.key),
        gen.sample_labels,
    )
    return Problem(spec, gen, LabeledDataset(x, y, spec.num_classes), tx, ty, batches, seed)


# --------------------------------------------------------------------------
# agents

AGENT_DEFAULTS = {
    "mlp": {"hidden": (50, 50), "l2": 1.0},
    "ensemble": {"hidden": (50, 50), "num_particles": 10, "l2": 1.0},
    "ensemble+": {"hidden": (50, 50), "num_particles": 10, "l2": 1.0, "prior_scale": 1.0, "prior_hidden": (50, 50)},
    "dropout": {"hidden": (50, 50), "rate": 0.1, "l2": 1.0},
    "hypermodel": {"hidden": (10, 10), "index_dim": 8, "l2": 1.0, "prior_scale": 1.0, "prior_hidden": (5, 5)},
    "epinet": {
        "hidden": (50, 50),
        "epinet_hidden": (15, 15),
        "index_dim": 8,
        "prior_hidden": (5, 5),
        "prior_scale": 1.0,
        "l2": 1.0,
    },
}

# Table-1 style hyperparameter sweeps (desk scale)
AGENT_SWEEPS = {
    "mlp": {"l2": [0.1, 1.0, 10.0]},
    "ensemble": {"l2": [0.1, 1.0, 10.0]},
    "ensemble+": {"l2": [0.1, 1.0, 10.0], "prior_scale": [0.3, 1.0]},
    "dropout": {"l2": [0.1, 1.0, 10.0], "rate": [0.05, 0.2]},
    "hypermodel": {"l2": [0.1, 1.0, 10.0], "prior_scale": [0.3, 1.0]},
    "epinet": {"l2": [0.1, 1.0, 10.0], "prior_scale": [0.3, 1.0]},
}

TRAIN_DEFAULTS = {"steps": 1000, "batch_size": 100, "lr": 1e-3}


def _tuple(v):
    return tuple(int(a) for a in v)


def width_for_budget(input_dim, output_dim, depth, particles, budget):
    """Largest hidden width ``w`` with ``particles * params(w) <= budget``."""
    w = 1
    while particles * MlpArch(input_dim, (w + 1,) * depth, output_dim).num_params <= budget:
        w += 1
    return w


@dataclass
class Agent:
    name: str
    family: str
    hyper: dict
    model: object
    loss: LossSpec
    train_config: TrainConfig


def build_agent(family, hyper, input_dim, num_classes, seed, name=None):
    """Model + loss + train config for a testbed agent family with hyper overrides."""
    if family not in AGENT_DEFAULTS:
        raise KeyError(f"unknown agent {family!r}; valid agents: {sorted(AGENT_DEFAULTS)}")
    h = dict(AGENT_DEFAULTS[family])
    h.update(hyper or {})
    budget = h.pop("param_budget", None)
    if budget is not None and family in ("mlp", "ensemble", "ensemble+"):
        depth = len(h["hidden"])
        mlp_params = MlpArch(input_dim, (50,) * depth, num_classes).num_params
        k = h.get("num_particles", 1)
        h["hidden"] = (width_for_budget(input_dim, num_classes, depth, k, budget * mlp_params),) * depth
    arch = MlpArch(input_dim, _tuple(h["hidden"]), num_classes)
    if family == "mlp":
        model = enn.make_mlp(arch, seed)
    elif family == "ensemble":
        model = enn.make_ensemble(int(h["num_particles"]), arch, seed)
    elif family == "ensemble+":
        prior = MlpArch(input_dim, _tuple(h["prior_hidden"]), num_classes)
        model = enn.make_ensemble_plus(int(h["num_particles"]), arch, prior, float(h["prior_scale"]), seed)
    elif family == "dropout":
        model = enn.make_dropout(arch, float(h["rate"]), seed)
    elif family == "hypermodel":
        prior = MlpArch(input_dim, _tuple(h["prior_hidden"]), num_classes)
        model = enn.make_hypermodel(arch, int(h["index_dim"]), seed, prior, float(h["prior_scale"]))
    else:
        prior = MlpArch(input_dim, _tuple(h["prior_hidden"]), num_classes)
        model = enn.make_epinet(arch, _tuple(h["epinet_hidden"]), int(h["index_dim"]), prior, float(h["prior_scale"]), seed)
    tc = dict(TRAIN_DEFAULTS)
    tc.update({k: h[k] for k in ("steps", "batch_size", "lr", "index_batch") if k in h})
    config = TrainConfig(seed=derive_seed(seed, "train"), **tc)
    return Agent(name or family, family, h, model, LossSpec("xent", l2=float(h["l2"])), config)


def sweep_variants(family, sweep=None):
    """Expand a hyperparameter sweep into ``(variant_name, overrides)`` pairs."""
    sweep = AGENT_SWEEPS.get(family, {}) if sweep is None else sweep
    keys = sorted(sweep)
    out = []
    for values in itertools.product(*(sweep[k] for k in keys)):
        over = dict(zip(keys, values))
        tag = ",".join(f"{k}={v}" for k, v in over.items())
        out.append((f"{family}[{tag}]" if tag else family, over))
    return out


# --------------------------------------------------------------------------
# harness

METRIC_FIELDS = [
    "agent",
    "family",
    "seed",
    "input_dim",
    "data_ratio",
    "temperature",
    "error",
    "marginal_nll",
    "joint_nll_tau10",
    "joint_nll_se",
    "params",
    "flops_estimate",
]


@dataclass
class MetricRecord:
    agent: str
    family: str
    seed: int
    input_dim: int
    data_ratio: float
    temperature: float
    error: float
    marginal_nll: float
    joint_nll_tau10: float
    joint_nll_se: float
    params: int
    flops_estimate: int
    wall_ms: float = field(default=0.0, compare=False)

    def row(self):
        d = asdict(self)
        d.pop("wall_ms")
        return d


def run_cell(family, hyper, spec, seed, name=None, eval_indices=ev.DEFAULT_EVAL_INDICES, problem=None):
    """Train and evaluate one agent on one problem instance."""
    t0 = time.perf_counter()
    problem = generate_problem(spec, seed) if problem is None else problem
    agent = build_agent(family, hyper, spec.input_dim, spec.num_classes, derive_seed(seed, "agent", name or family), name)
    result = train(agent.model, problem.train, agent.loss, agent.train_config)
    metrics = ev.evaluate(
        agent.model, result.params, problem.test_x, problem.test_y, problem.batches, eval_indices, derive_seed(seed, "eval")
    )
    return MetricRecord(
        agent=agent.name,
        family=family,
        seed=seed,
        input_dim=spec.input_dim,
        data_ratio=spec.data_ratio,
        temperature=spec.temperature,
        error=metrics["error"],
        marginal_nll=metrics["marginal_nll"],
        joint_nll_tau10=metrics["joint_nll"],
        joint_nll_se=metrics["joint_nll_se"],
        params=agent.model.num_params,
        flops_estimate=agent.model.flops(),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def problem_grid(input_dims=(2, 10), data_ratios=(1, 10, 100), temperatures=(0.1, 0.5), **kw):
    return [ProblemSpec(d, r, t, **kw) for d in input_dims for r in data_ratios for t in temperatures]


def run_benchmark(roster, grid, seeds, tau=10, on_error=None):
    """One MetricRecord per (agent, problem, seed).

    ``roster`` maps agent names to ``(family, overrides)``.  A failing cell is
    passed to ``on_error(key, exc)`` and skipped; the run continues.
    """
    rows = []
    for spec in grid:
        if spec.tau != tau:
            spec = ProblemSpec(**{**asdict(spec), "tau": tau})
        for seed in seeds:
            problem = generate_problem(spec, seed)
            for name, (family, hyper) in roster.items():
                try:
                    rows.append(run_cell(family, hyper, spec, seed, name=name, problem=problem))
                except Exception as exc:  # noqa: BLE001 - recorded, run continues
                    if on_error is None:
                        raise
                    on_error((name, spec.key, seed), exc)
    return rows


def aggregate(rows, by=("agent",), metric="joint_nll_tau10"):
    """Mean and standard error of ``metric`` over rows grouped by ``by``."""
    groups = {}
    for r in rows:
        d = r.row() if isinstance(r, MetricRecord) else r
        groups.setdefault(tuple(d[k] for k in by), []).append(float(d[metric]))
    out = {}
    for k, vals in sorted(groups.items()):
        v = np.asarray(vals)
        out[k] = (float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0, len(v))
    return out


# --------------------------------------------------------------------------
# finite-hypothesis variant


def finite_hypothesis_problem(spec, num_hypotheses, seed):
    """Generators ``h_1..h_K`` with a uniform prior; the truth is drawn from that prior."""
    rng = rng_split(seed, "finite-hypothesis", spec.key)
    gens = [
        GenerativeModel(spec.input_dim, spec.temperature, spec.generator_width, spec.num_classes, seed=derive_seed(seed, "h", i))
        for i in range(num_hypotheses)
    ]
    truth = int(rng.integers(num_hypotheses))
    problem = generate_problem(spec, seed)
    # regenerate everything from the drawn true generator
    gen = gens[truth]
    x = problem.train.inputs
    y = gen.sample_labels(rng, x)
    ty = gen.sample_labels(rng, problem.test_x)
    batches = ev.dyadic_batches(
        lambda r, n: sample_inputs(r, n, spec.input_dim), spec.tau, spec.num_batches, derive_seed(seed, "fh-dyadic"), gen.sample_labels
    )
    prob = Problem(spec, gen, LabeledDataset(x, y, spec.num_classes), problem.test_x, ty, batches, seed)
    oracle = ev.BayesOracle([g.logits for g in gens], x, y)
    return prob, oracle, truth
