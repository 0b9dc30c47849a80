"""Reference distributions for the epistemic index."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class IndexMismatchError(ValueError):
    """An index batch does not match the model's reference distribution."""


KINDS = ("gaussian", "uniform", "bernoulli", "categorical")


@dataclass(frozen=True)
class ReferenceDistribution:
    """``gaussian(dim)`` and ``bernoulli(dim, keep_prob)`` produce vectors;
    ``uniform(K)`` and ``categorical(weights)`` produce integer particle ids."""

    kind: str
    dim: int
    keep_prob: float = 1.0
    weights: tuple = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown reference kind {self.kind!r}; expected one of {KINDS}")
        if int(self.dim) < 1:
            raise ValueError(f"reference dimension / particle count must be >= 1, got {self.dim}")
        if self.kind == "bernoulli" and not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep probability must lie in (0, 1], got {self.keep_prob}")
        if self.kind == "categorical":
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.dim,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-12):
                raise ValueError("categorical weights must be a length-dim probability vector")

    @property
    def discrete(self):
        return self.kind in ("uniform", "categorical")

    @property
    def vector_dim(self):
        return None if self.discrete else self.dim

    def sample(self, rng, m):
        if self.kind == "gaussian":
            return rng.standard_normal((m, self.dim))
        if self.kind == "uniform":
            return rng.integers(0, self.dim, size=m)
        if self.kind == "categorical":
            return rng.choice(self.dim, size=m, p=np.asarray(self.weights))
        return (rng.random((m, self.dim)) < self.keep_prob).astype(np.float64)

    def enumerate(self):
        """All indices with their probabilities (discrete kinds only)."""
        if self.kind == "uniform":
            return np.arange(self.dim), np.full(self.dim, 1.0 / self.dim)
        if self.kind == "categorical":
            return np.arange(self.dim), np.asarray(self.weights, dtype=float)
        raise ValueError(f"{self.kind} reference distribution cannot be enumerated")

    def check(self, zs):
        """Validate a batch of indices; returns it as an array."""
        zs = np.asarray(zs)
        if self.discrete:
            if zs.ndim != 1 or not np.issubdtype(zs.dtype, np.integer):
                raise IndexMismatchError(f"{self.kind} reference expects a 1-d integer index batch, got shape {zs.shape}")
            if zs.size and (zs.min() < 0 or zs.max() >= self.dim):
                raise IndexMismatchError(f"particle index out of range [0, {self.dim})")
        else:
            if zs.ndim != 2 or zs.shape[1] != self.dim:
                raise IndexMismatchError(f"{self.kind} reference expects index batch of shape (M, {self.dim}), got {zs.shape}")
        return zs

    def to_dict(self):
        d = {"kind": self.kind, "dim": int(self.dim)}
        if self.kind == "bernoulli":
            d["keep_prob"] = float(self.keep_prob)
        if self.kind == "categorical":
            d["weights"] = [float(w) for w in self.weights]
        return d

    @classmethod
    def from_dict(cls, d):
        w = d.get("weights")
        return cls(d["kind"], int(d["dim"]), float(d.get("keep_prob", 1.0)), tuple(w) if w is not None else None)


def gaussian(dim):
    return ReferenceDistribution("gaussian", dim)


def uniform(k):
    return ReferenceDistribution("uniform", k)


def categorical(weights):
    w = tuple(float(x) for x in weights)
    return ReferenceDistribution("categorical", len(w), weights=w)


def bernoulli(dim, keep_prob):
    return ReferenceDistribution("bernoulli", dim, keep_prob=keep_prob)
