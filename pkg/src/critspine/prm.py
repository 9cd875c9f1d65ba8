"""Poisson random measures on finite atom spaces.

Exact evaluators (Campbell formula, brute-force enumeration of the count
lattice) sit next to samplers so every sampling identity can be checked
against an exact value.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Hashable, Mapping

import numpy as np
from scipy.stats import poisson

__all__ = [
    "FiniteMeasure",
    "PrmSample",
    "sample_prm",
    "sample_prm_counts",
    "laplace_exact",
    "sample_size_biased",
    "sample_size_biased_counts",
    "brute_force_expectation",
    "brute_force_law",
    "size_biased_law",
    "tv_distance",
    "INF_CAP",
]

INF_CAP = 1e9
BRUTE_CAP = 30


@dataclass(frozen=True)
class FiniteMeasure:
    """Weighted atoms ``sum_i w_i delta_{a_i}`` on a finite point set."""

    atoms: tuple[tuple[Hashable, float], ...]

    def __post_init__(self):
        atoms = tuple((a, float(w)) for a, w in self.atoms)
        ids = [a for a, _ in atoms]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate atom ids")
        for a, w in atoms:
            if not math.isfinite(w) or w < 0:
                raise ValueError(f"weight of atom {a!r} must be finite and nonnegative, got {w}")
        object.__setattr__(self, "atoms", atoms)

    @classmethod
    def from_dict(cls, d: Mapping[Hashable, float]) -> "FiniteMeasure":
        return cls(tuple(d.items()))

    @property
    def ids(self) -> list:
        return [a for a, _ in self.atoms]

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.atoms])

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def values(self, F) -> np.ndarray:
        """Align a function given as dict or sequence with the atom order."""
        if isinstance(F, Mapping):
            F = [F[a] for a in self.ids]
        F = np.asarray(F, dtype=float)
        if F.shape != (len(self.atoms),):
            raise ValueError(f"expected {len(self.atoms)} values, got shape {F.shape}")
        return F

    def integrate(self, F) -> float:
        return float(math.fsum(self.weights * self.values(F)))

    def transform(self, F) -> "FiniteMeasure":
        """The ``F``-transform ``(F / N(F)) N``: a probability measure."""
        F = self.values(F)
        if np.any(F < 0):
            raise ValueError("transform function must be nonnegative")
        NF = self.integrate(F)
        if not NF > 0:
            raise ValueError("N(F) must be positive for the F-transform")
        w = self.weights * F / NF
        return FiniteMeasure(tuple(zip(self.ids, w)))


@dataclass(frozen=True)
class PrmSample:
    counts: Mapping[Hashable, int]

    def integrate(self, F: Mapping[Hashable, float]) -> float:
        return float(sum(c * F[a] for a, c in self.counts.items()))


def sample_prm_counts(N: FiniteMeasure, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` independent samples as a ``(size, k)`` count array."""
    return rng.poisson(N.weights, size=(size, len(N.atoms)))


def sample_prm(N: FiniteMeasure, rng: np.random.Generator) -> PrmSample:
    counts = sample_prm_counts(N, 1, rng)[0]
    return PrmSample({a: int(c) for a, c in zip(N.ids, counts) if c})


def laplace_exact(N: FiniteMeasure, f) -> float:
    """Campbell formula ``exp(-N(1 - e^{-f}))``; ``f = inf`` is capped at 1e9."""
    f = N.values(f)
    if np.any(f < 0) or np.any(np.isnan(f)):
        raise ValueError("f must be nonnegative")
    f = np.minimum(f, INF_CAP)
    return math.exp(-math.fsum(N.weights * -np.expm1(-f)))


def sample_size_biased_counts(N: FiniteMeasure, F, size: int, rng: np.random.Generator):
    """Counts of ``N' + delta_theta`` where ``theta ~ F``-transform of ``N``.

    Returns ``(counts, theta_index)``.
    """
    law = N.transform(F).weights
    counts = sample_prm_counts(N, size, rng)
    theta = rng.choice(len(law), size=size, p=law)
    counts[np.arange(size), theta] += 1
    return counts, theta


def sample_size_biased(N: FiniteMeasure, F, rng: np.random.Generator) -> PrmSample:
    counts, _ = sample_size_biased_counts(N, F, 1, rng)
    return PrmSample({a: int(c) for a, c in zip(N.ids, counts[0]) if c})


def brute_force_law(N: FiniteMeasure, cap: int = BRUTE_CAP) -> tuple[np.ndarray, np.ndarray]:
    """All count vectors with entries ``<= cap`` and their Poisson probabilities."""
    k = len(N.atoms)
    grid = np.array(list(itertools.product(range(cap + 1), repeat=k)), dtype=float).reshape(-1, k)
    probs = np.prod(poisson.pmf(grid, N.weights[None, :]), axis=1)
    return grid, probs


def brute_force_expectation(N: FiniteMeasure, func: Callable[[np.ndarray], np.ndarray],
                            cap: int = BRUTE_CAP) -> float:
    """``E[func(counts)]`` by summation over the truncated count lattice.

    ``func`` maps a ``(m, k)`` array of count vectors to ``m`` values.
    """
    grid, probs = brute_force_law(N, cap)
    return math.fsum(probs * func(grid))


def size_biased_law(N: FiniteMeasure, F, cap: int = BRUTE_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Law of the counts under ``P^{N(F)}``, i.e. reweighted by ``counts . F / N(F)``."""
    F = N.values(F)
    grid, probs = brute_force_law(N, cap)
    return grid, probs * (grid @ F) / N.integrate(F)


def tv_distance(samples: np.ndarray, grid: np.ndarray, probs: np.ndarray, cap: int = BRUTE_CAP) -> float:
    """Total variation between the empirical law of ``samples`` and ``probs`` on ``grid``.

    Sample counts above ``cap`` are clipped to ``cap``; the missing target mass
    beyond the lattice is attributed to those clipped cells.
    """
    k = grid.shape[1]
    base = cap + 1
    weights = base ** np.arange(k)[::-1]
    keys = np.minimum(samples, cap).astype(np.int64) @ weights
    emp = np.bincount(keys, minlength=base ** k) / samples.shape[0]
    target = np.zeros(base ** k)
    target[grid.astype(np.int64) @ weights] = probs
    return 0.5 * float(np.abs(emp - target).sum() + max(0.0, 1.0 - probs.sum()))
