from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ennkit.rl.replay import Transition


def bandit_loop(env, agent, steps, seed):
    """Run ``steps`` rounds; returns the per-step regret trace (exact env means)."""
    env.reseed(seed)
    regret = np.zeros(steps)
    blank = np.zeros(env.input_dim)
    for t in range(steps):
        agent.begin_episode()  # a fresh index every round
        a = agent.select_arm(env.actions)
        r = env.step(a)
        regret[t] = env.regret(a)
        agent.observe(Transition(env.actions[a], 0, r, blank, True))
    return regret


@dataclass
class RlTrace:
    returns: np.ndarray
    learned_at: int | None
    optimal_return: float


def episodes_to_learn(returns, optimal_return, window=100, fraction=0.9):
    """First episode count after which the trailing ``window`` mean return reaches
    ``fraction * optimal_return``; ``None`` if never."""
    returns = np.asarray(returns, dtype=float)
    if len(returns) < window:
        return None
    means = np.convolve(returns, np.ones(window) / window, mode="valid")
    hit = np.flatnonzero(means >= fraction * optimal_return - 1e-12)
    return int(hit[0] + window) if len(hit) else None


def episodic_rl_loop(env, agent, episodes, seed, stop_when_learned=False, window=100, fraction=0.9):
    """Alg.-1 style loop: one index per episode, store every transition, one update per step."""
    env.reseed(seed)
    returns = []
    learned_at = None
    for ep in range(episodes):
        agent.begin_episode()
        s = env.reset()
        total, done = 0.0, False
        while not done:
            a = agent.act(s)
            s_next, r, done = env.step(a)
            agent.observe(Transition(s, a, r, s_next, done))
            total += r
            s = s_next
        returns.append(total)
        if learned_at is None and ep + 1 >= window:
            recent = np.mean(returns[-window:])
            if recent >= fraction * env.optimal_return - 1e-12:
                learned_at = ep + 1
                if stop_when_learned:
                    break
    return RlTrace(np.asarray(returns), learned_at, env.optimal_return)
