"""Environments: the neural bandit and a DeepSea exploration gridworld."""
from __future__ import annotations

import numpy as np

from ennkit.numerics import derive_seed, rng_split
from ennkit.testbed import GenerativeModel


class BanditEnv:
    """Fixed action set of standard-normal feature vectors; Bernoulli rewards
    whose means come from a random MLP generator (class-1 probability)."""

    def __init__(self, num_actions=100, input_dim=10, temperature=1.0, width=50, seed=0):
        self.num_actions = int(num_actions)
        self.input_dim = int(input_dim)
        self.seed = seed
        self.actions = rng_split(seed, "bandit-actions").standard_normal((self.num_actions, self.input_dim))
        self.generator = GenerativeModel(self.input_dim, temperature, width, 2, seed=derive_seed(seed, "bandit-generator"))
        self.means = self.generator.probs(self.actions)[:, 1]
        self.best_mean = float(self.means.max())
        self.reseed(seed)

    def reseed(self, seed):
        self._rng = rng_split(seed, "bandit-rewards")

    def step(self, action):
        return float(self._rng.random() < self.means[action])

    def regret(self, action):
        return self.best_mean - float(self.means[action])


class DeepSeaEnv:
    """``N x N`` grid; the agent descends one row per step and moves left or right.

    Moving right costs ``0.01 / N``; moving right out of the bottom-right cell
    pays 1, so the only rewarding episode is N right moves (return 0.99).
    With ``randomize_actions`` the meaning of action ids is flipped per cell by
    a fixed random map, so no single action id is "always right".
    """

    num_actions = 2

    def __init__(self, size, randomize_actions=True, seed=0):
        if size < 1:
            raise ValueError("size must be >= 1")
        self.size = int(size)
        self.move_cost = 0.01 / self.size
        if randomize_actions:
            self.right_action = rng_split(seed, "deep-sea-actions").integers(0, 2, size=(self.size, self.size))
        else:
            self.right_action = np.ones((self.size, self.size), dtype=np.int64)
        self.reset()

    @property
    def obs_dim(self):
        return self.size * self.size

    @property
    def optimal_return(self):
        return 1.0 - 0.01

    def reseed(self, seed):
        pass  # deterministic dynamics

    def _obs(self):
        obs = np.zeros(self.obs_dim)
        if self.row < self.size:
            obs[self.row * self.size + self.col] = 1.0
        return obs

    def reset(self):
        self.row, self.col = 0, 0
        return self._obs()

    def step(self, action):
        if self.row >= self.size:
            raise RuntimeError("episode has ended; call reset()")
        reward = 0.0
        right = action == self.right_action[self.row, self.col]
        # the treasure sits beyond the bottom-right cell, so only a path of N
        # right moves collects it (a free bump against the left wall cannot help)
        if right and self.row == self.size - 1 and self.col == self.size - 1:
            reward += 1.0
        if right:
            self.col = min(self.col + 1, self.size - 1)
            reward -= self.move_cost
        else:
            self.col = max(self.col - 1, 0)
        self.row += 1
        return self._obs(), reward, self.row == self.size

    def optimal_q(self, obs):
        """Q-values favouring the right move everywhere (an oracle for tests)."""
        idx = int(np.argmax(obs))
        r, c = divmod(idx, self.size)
        q = np.zeros(2)
        q[self.right_action[r, c]] = 1.0
        return q
