"""ENN-DQN with approximate Thompson sampling, plus reference agents."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ennkit.enn import models as enn
from ennkit.numerics import DTYPE, MlpArch, NonFiniteError, make_optimizer, optimizer_step, rng_split
from ennkit.rl.replay import ReplayBuffer

# Value-network settings per family for episodic RL (2-layer 50-unit bases).
RL_AGENT_DEFAULTS = {
    "mlp": {"hidden": (50, 50)},
    "ensemble": {"hidden": (50, 50), "num_particles": 10},
    "ensemble+": {"hidden": (50, 50), "num_particles": 10, "prior_hidden": (50, 50), "prior_scale": 1.0},
    "dropout": {"hidden": (50, 50), "rate": 0.1},
    "hypermodel": {"hidden": (10, 10), "index_dim": 8, "prior_hidden": (5, 5), "prior_scale": 1.0},
    "epinet": {"hidden": (50, 50), "epinet_hidden": (50,), "index_dim": 2, "prior_hidden": (50, 50), "prior_scale": 1.0},
}

# Neural-bandit value networks predict one number: the expected reward of an action feature vector.
BANDIT_AGENT_DEFAULTS = {
    "mlp": {"hidden": (50, 50)},
    "ensemble": {"hidden": (50, 50), "num_particles": 10},
    "ensemble+": {"hidden": (50, 50), "num_particles": 10, "prior_hidden": (50, 50), "prior_scale": 1.0},
    "dropout": {"hidden": (50, 50), "rate": 0.1},
    "hypermodel": {"hidden": (10, 10), "index_dim": 8, "prior_hidden": (5, 5), "prior_scale": 1.0},
    "epinet": {"hidden": (50, 50), "epinet_hidden": (15, 15), "index_dim": 5, "prior_hidden": (5, 5), "prior_scale": 0.3},
}


class NonFiniteQ(NonFiniteError):
    pass


@dataclass
class AgentConfig:
    enn: str = "epinet"
    enn_hyper: dict = field(default_factory=dict)
    gamma: float = 0.99
    batch_size: int = 128
    index_batch: int = 20
    target_period: int = 100
    optimizer: str = "adam"
    lr: float = 1e-3
    l2: float = 0.0
    buffer_capacity: int = 10_000
    normalize_prior: bool = True
    probe_steps: int = 100

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.target_period < 1:
            raise ValueError("target_period must be >= 1")
        if self.batch_size < 1 or self.index_batch < 1:
            raise ValueError("batch_size and index_batch must be >= 1")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.buffer_capacity < 1 or self.probe_steps < 1:
            raise ValueError("buffer_capacity and probe_steps must be >= 1")
        if self.enn not in RL_AGENT_DEFAULTS:
            raise KeyError(f"unknown agent {self.enn!r}; valid agents: {sorted(RL_AGENT_DEFAULTS)}")

    def to_dict(self):
        return asdict(self)


def _t(v):
    return tuple(int(a) for a in v)


def build_value_net(kind, hyper, input_dim, num_outputs, seed, defaults=RL_AGENT_DEFAULTS):
    h = dict(defaults[kind])
    h.update(hyper or {})
    arch = MlpArch(input_dim, _t(h["hidden"]), num_outputs)
    prior = MlpArch(input_dim, _t(h["prior_hidden"]), num_outputs) if "prior_hidden" in h else None
    if kind == "mlp":
        return enn.make_mlp(arch, seed)
    if kind == "ensemble":
        return enn.make_ensemble(int(h["num_particles"]), arch, seed)
    if kind == "ensemble+":
        return enn.make_ensemble_plus(int(h["num_particles"]), arch, prior, float(h["prior_scale"]), seed)
    if kind == "dropout":
        return enn.make_dropout(arch, float(h["rate"]), seed)
    if kind == "hypermodel":
        return enn.make_hypermodel(arch, int(h["index_dim"]), seed, prior, float(h["prior_scale"]))
    if kind == "epinet":
        return enn.make_epinet(arch, _t(h["epinet_hidden"]), int(h["index_dim"]), prior, float(h["prior_scale"]), seed)
    raise KeyError(kind)


# --------------------------------------------------------------------------
# TD objective


def td_targets(model, target_params, r, s_next, done, zs, gamma):
    """``r + gamma * max_a' f_target(s', z)_a'`` per index; terminal rows get ``r``."""
    r = np.asarray(r, dtype=DTYPE)
    if gamma == 0.0:
        return np.broadcast_to(r, (len(zs), len(r)))
    q_next = model.logits(target_params, s_next, zs)  # (M, B, A)
    return r + gamma * (1.0 - np.asarray(done, dtype=DTYPE)) * q_next.max(axis=-1)


def dqn_loss(model, params, target_params, batch, zs, gamma, l2=0.0):
    s, a, r, s_next, done = batch
    q = model.logits(params, s, zs)
    y = td_targets(model, target_params, r, s_next, done, zs, gamma)
    delta = q[:, np.arange(len(a)), a] - y
    theta = params.flat[model.trainable]
    return float(np.mean(delta**2) + l2 * theta @ theta)


def dqn_gradient(model, params, target_params, batch, zs, gamma, l2=0.0):
    """Semi-gradient of the TD objective w.r.t. the online parameters only.

    ``L = mean_{z, i} (f(s_i, z)_{a_i} - y_i(z))^2 + l2 * |theta|^2`` where the
    targets ``y`` are constants computed from ``target_params``.
    Returns ``(loss, grad)`` with ``grad`` a ParamStore over the online layout.
    """
    s, a, r, s_next, done = batch
    a = np.asarray(a, dtype=np.int64)
    q, cache = model.forward_batch(params, s, zs)
    y = td_targets(model, target_params, r, s_next, done, zs, gamma)
    rows = np.arange(len(a))
    delta = q[:, rows, a] - y
    m, b = delta.shape
    upstream = np.zeros_like(q)
    upstream[:, rows, a] = 2.0 * delta / (m * b)
    grad = model.backward(params, cache, upstream)
    loss = float(np.mean(delta**2))
    if l2:
        theta = params.flat * model.trainable
        grad.flat += 2.0 * l2 * theta
        loss += float(l2 * theta @ theta)
    return loss, grad


def target_sync(params, target_params, period, step):
    """Hard copy ``params`` into ``target_params`` whenever ``step`` is a multiple of ``period``."""
    if period < 1:
        raise ValueError("period must be >= 1")
    if step > 0 and step % period == 0:
        target_params.flat[:] = params.flat
    return target_params


# --------------------------------------------------------------------------
# agents


def _argmax_random(rng, q):
    best = np.flatnonzero(q == q.max())
    return int(best[0]) if len(best) == 1 else int(rng.choice(best))


class EnnDqnAgent:
    """Samples one index per episode and acts greedily w.r.t. ``f(s, z)``.

    Every observed transition is stored and followed by one gradient step on a
    minibatch of transitions and a fresh batch of indices.
    """

    def __init__(self, model, config, seed=0):
        self.model = model
        self.config = config
        self.params = model.params.copy()
        self.target_params = self.params.copy()
        self.opt = make_optimizer(config.optimizer, len(self.params), lr=config.lr)
        self.buffer = ReplayBuffer(config.buffer_capacity, model.input_dim, num_actions=model.num_classes)
        self.index_rng = rng_split(seed, "acting-index")
        self.tie_rng = rng_split(seed, "tie-break")
        self.update_rng = rng_split(seed, "update")
        self.z = None
        self.index_draws = 0
        self.updates = 0
        self.syncs = 0
        self.last_loss = None

    @property
    def name(self):
        return self.config.enn

    def begin_episode(self):
        self.z = self.model.sample_indices(self.index_rng, 1)[0]
        self.index_draws += 1

    def q_values(self, states):
        if self.z is None:
            self.begin_episode()
        q = self.model.forward(self.params, np.atleast_2d(states), self.z)
        if not np.all(np.isfinite(q)):
            raise NonFiniteQ(f"non-finite Q-values {q.tolist()} after {self.updates} updates")
        return q

    def act(self, state):
        return _argmax_random(self.tie_rng, self.q_values(state)[0])

    def select_arm(self, features):
        """Bandit choice: index the value net over all action feature vectors."""
        return _argmax_random(self.tie_rng, self.q_values(features)[:, 0])

    def observe(self, transition):
        self.buffer.add(transition)
        self.update()

    def update(self):
        if len(self.buffer) == 0:
            return None
        c = self.config
        batch = self.buffer.sample(self.update_rng, c.batch_size)
        zs = self.model.sample_indices(self.update_rng, c.index_batch)
        loss, grad = dqn_gradient(self.model, self.params, self.target_params, batch, zs, c.gamma, c.l2)
        optimizer_step(self.opt, self.params, grad, self.model.trainable)
        self.updates += 1
        if self.updates % c.target_period == 0:
            target_sync(self.params, self.target_params, c.target_period, self.updates)
            self.syncs += 1
        self.last_loss = loss
        return loss


class UniformAgent:
    name = "uniform"

    def __init__(self, num_actions, seed=0):
        self.num_actions = num_actions
        self.rng = rng_split(seed, "uniform-agent")

    def begin_episode(self):
        pass

    def act(self, state):
        return int(self.rng.integers(self.num_actions))

    def select_arm(self, features):
        return int(self.rng.integers(len(features)))

    def observe(self, transition):
        pass


class FixedQAgent:
    """Greedy w.r.t. an injected Q function (e.g. an oracle table); never learns."""

    name = "fixed-q"

    def __init__(self, q_fn, seed=0):
        self.q_fn = q_fn
        self.rng = rng_split(seed, "tie-break")

    def begin_episode(self):
        pass

    def act(self, state):
        return _argmax_random(self.rng, np.asarray(self.q_fn(state), dtype=DTYPE))

    def select_arm(self, features):
        return _argmax_random(self.rng, np.asarray([self.q_fn(f) for f in features], dtype=DTYPE))

    def observe(self, transition):
        pass


# --------------------------------------------------------------------------
# prior-scale normalization


def _variance_floor(mean):
    return (1e-12 * max(1.0, abs(mean))) ** 2


def probe_states(env, steps, seed):
    """States visited (or actions offered) by a uniform random policy for ``steps`` steps."""
    rng = rng_split(seed, "probe")
    if hasattr(env, "actions"):  # bandit: the probe set is the features of the random arms
        return env.actions[rng.integers(0, env.num_actions, size=steps)]
    states = []
    s = env.reset()
    for _ in range(steps):
        states.append(s)
        s, _, done = env.step(int(rng.integers(env.num_actions)))
        if done:
            s = env.reset()
    env.reset()
    return np.asarray(states)


def prior_affine(raw):
    """``(shift, scale)`` making ``raw`` (``(..., C)``) mean 0 / variance 1 per coordinate."""
    flat = raw.reshape(-1, raw.shape[-1])
    mean = flat.mean(axis=0)
    var = flat.var(axis=0)
    scale = np.ones_like(mean)
    for c in range(len(mean)):
        if var[c] > _variance_floor(mean[c]):
            scale[c] = 1.0 / np.sqrt(var[c])
    return -mean, scale


def normalize_prior_scale(agent, env, probe_steps=100, seed=0):
    """Fit and freeze the prior output affine map on a uniform-policy probe set.

    Statistics pool all prior members and probe states per output coordinate.
    A coordinate with (numerically) zero variance keeps scale 1 and only shifts.
    """
    prior = getattr(agent.model, "prior", None)
    if prior is None:
        raise ValueError(f"agent {agent.name!r} has no prior functions to normalize")
    states = probe_states(env, probe_steps, seed)
    shift, scale = prior_affine(prior.raw(agent.params, states))
    for store in (agent.params, agent.target_params, agent.model.params):
        store[prior.prefix + "shift"] = shift
        store[prior.prefix + "scale"] = scale
    agent.probe = states
    return shift, scale


def make_agent(kind, obs_dim, num_actions, seed, config=None, env=None, bandit=False):
    """Build an agent by name; prior-function agents are normalized on ``env`` when given."""
    if kind == "uniform":
        return UniformAgent(num_actions, seed)
    config = config or AgentConfig(enn=kind)
    defaults = BANDIT_AGENT_DEFAULTS if bandit else RL_AGENT_DEFAULTS
    model = build_value_net(kind, config.enn_hyper, obs_dim, 1 if bandit else num_actions, seed, defaults)
    agent = EnnDqnAgent(model, config, seed)
    if env is not None and config.normalize_prior and getattr(model, "prior", None) is not None:
        normalize_prior_scale(agent, env, config.probe_steps, seed)
    return agent
