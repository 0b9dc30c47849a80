"""Sequential decision making with ENN value functions."""
from ennkit.rl.agents import (
    AgentConfig,
    BANDIT_AGENT_DEFAULTS,
    EnnDqnAgent,
    FixedQAgent,
    NonFiniteQ,
    RL_AGENT_DEFAULTS,
    UniformAgent,
    build_value_net,
    dqn_gradient,
    dqn_loss,
    make_agent,
    normalize_prior_scale,
    prior_affine,
    probe_states,
    target_sync,
)
from ennkit.rl.envs import BanditEnv, DeepSeaEnv
from ennkit.rl.loops import RlTrace, bandit_loop, episodes_to_learn, episodic_rl_loop
from ennkit.rl.replay import ReplayBuffer, Transition

__all__ = [
    "AgentConfig",
    "BANDIT_AGENT_DEFAULTS",
    "BanditEnv",
    "DeepSeaEnv",
    "EnnDqnAgent",
    "FixedQAgent",
    "NonFiniteQ",
    "RL_AGENT_DEFAULTS",
    "ReplayBuffer",
    "RlTrace",
    "Transition",
    "UniformAgent",
    "bandit_loop",
    "build_value_net",
    "dqn_gradient",
    "dqn_loss",
    "episodes_to_learn",
    "episodic_rl_loop",
    "make_agent",
    "normalize_prior_scale",
    "prior_affine",
    "probe_states",
    "target_sync",
]
