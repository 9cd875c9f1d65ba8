"""Monte Carlo paths of the superprocess on a finite state space.

Each time step applies the linear drift of the mean generator (with the jump
compensator) and Poisson jump counts for the Levy atoms.  The quadratic
branching part is handled in one of two ways:

``"split"`` (default)
    an exact Feller transition over the step, drawn as a Poisson number of
    exponentials.  It keeps masses nonnegative and the step mean exact, so
    paths started from tiny masses carry no boundary bias.
``"euler"``
    square-root Gaussian noise with the result clamped at 0.  Clamping adds
    a positive bias of order ``alpha dt`` per path that hits zero, which is
    large relative to small starting masses.

Paths are simulated in vectorised batches; extinct paths are compacted out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .model import Model, as_vector

__all__ = [
    "PathSample",
    "SimConfig",
    "BatchResult",
    "simulate_batch",
    "simulate_superprocess",
    "sample_feller_exact",
    "sample_ptilde",
    "ptilde_start_masses",
    "sample_excursion_approx",
    "EXTINCT_MASS",
]

EXTINCT_MASS = 1e-12


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    eps_excursion: float = 1e-2
    seed: int = 0
    batch: int = 1
    scheme: str = "split"

    def __post_init__(self):
        if self.scheme not in ("split", "euler"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not 0 < self.eps_excursion <= 0.1:
            raise ValueError(f"eps_excursion must lie in (0, 0.1], got {self.eps_excursion}")
        if self.batch < 1:
            raise ValueError("batch must be a positive integer")

    def steps(self, T: float) -> int:
        if not T > 0:
            raise ValueError(f"horizon must be positive, got {T}")
        k = int(round(T / self.dt))
        if k < 100:
            raise ValueError(f"dt = {self.dt} is too coarse for T = {T} (need dt <= T/100)")
        return k


@dataclass
class PathSample:
    grid: np.ndarray
    mass: np.ndarray  # (len(grid), n)
    extinct_at: float | None = None

    @property
    def terminal(self) -> np.ndarray:
        return self.mass[-1]


@dataclass
class BatchResult:
    """Batch of paths: terminal masses and masses at the recorded grid times."""

    grid: np.ndarray  # recorded times
    mass: np.ndarray  # (B, len(grid), n)
    extinct_at: np.ndarray  # (B,), nan for paths alive at T

    @property
    def terminal(self) -> np.ndarray:
        return self.mass[:, -1, :]


class Source(Protocol):
    """Immigration added to a batch during one Euler step."""

    def __call__(self, t: float, dt: float, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        ...


def simulate_batch(model: Model, mu, T: float, cfg: SimConfig, rng: np.random.Generator,
                   size: int | None = None, record=None, source: Source | None = None) -> BatchResult:
    """Simulate ``size`` independent paths on ``[0, T]``.

    ``mu`` is one initial mass vector or a ``(size, n)`` array.  ``record``
    lists times (rounded to the step grid) at which masses are stored; ``T``
    is always recorded.  ``source(t, dt, idx, rng)`` returns masses added at
    the end of the step ``[t, t + dt]`` to the paths with indices ``idx``.
    """
    n = model.n
    K = cfg.steps(T)
    dt = T / K
    mu = np.asarray(mu, dtype=float)
    if mu.ndim == 1:
        mu = as_vector(model, mu, "mu")
        if np.any(mu < 0):
            raise ValueError("initial mass must be nonnegative")
        size = 1 if size is None else size
        X = np.repeat(mu[None, :], size, axis=0)
    else:
        if mu.shape[1] != n or np.any(mu < 0):
            raise ValueError("initial masses must be a nonnegative (size, n) array")
        X = mu.copy()
        size = X.shape[0]

    rec_steps = sorted({K} | {int(round(t / dt)) for t in (() if record is None else record)})
    if rec_steps[0] < 0 or rec_steps[-1] > K:
        raise ValueError("record times must lie in [0, T]")
    rec_pos = {k: i for i, k in enumerate(rec_steps)}
    out = np.zeros((size, len(rec_steps), n))
    extinct_at = np.full(size, np.nan)

    L = model.L
    mech = model.mech
    comp = mech.jump_mean  # sum_i y_i p_i per site
    sig = np.sqrt(2.0 * mech.alpha * dt)
    split = cfg.scheme == "split"
    noisy = mech.alpha > 0
    gscale = mech.alpha[noisy] * dt
    atoms = [(mech.y[:, k], mech.p[:, k] * dt) for k in range(mech.y.shape[1]) if np.any(mech.p[:, k] > 0)]
    drift = L - np.diag(comp)

    idx = np.arange(size)
    if 0 in rec_pos:
        out[:, rec_pos[0], :] = X
    for k in range(K):
        if idx.size == 0:
            break
        if split:
            Xn = X + (X @ drift) * dt
            for y, pdt in atoms:
                Xn += y * rng.poisson(X * pdt)
            np.maximum(Xn, 0.0, out=Xn)
            cells = Xn[:, noisy]
            Xn[:, noisy] = rng.gamma(rng.poisson(cells / gscale), gscale)
            if source is not None:
                Xn += source(k * dt, dt, idx, rng)
        else:
            noise = rng.standard_normal(X.shape)
            Xn = X + (X @ drift) * dt + sig * np.sqrt(X) * noise
            for y, pdt in atoms:
                Xn += y * rng.poisson(X * pdt)
            if source is not None:
                Xn += source(k * dt, dt, idx, rng)
            np.maximum(Xn, 0.0, out=Xn)
        X = Xn
        step = k + 1
        if step in rec_pos:
            out[idx, rec_pos[step], :] = X
        if source is None:
            dead = X.sum(axis=1) < EXTINCT_MASS
            if np.any(dead):
                extinct_at[idx[dead]] = step * dt
                keep = ~dead
                idx = idx[keep]
                X = X[keep]
    return BatchResult(grid=np.array(rec_steps) * dt, mass=out, extinct_at=extinct_at)


def simulate_superprocess(model: Model, mu, T: float, cfg: SimConfig, rng: np.random.Generator,
                          record_every: int = 1) -> PathSample:
    """One path, recorded every ``record_every`` Euler steps."""
    K = cfg.steps(T)
    dt = T / K
    rec = np.arange(0, K + 1, record_every) * dt
    res = simulate_batch(model, mu, T, cfg, rng, size=1, record=rec)
    ext = res.extinct_at[0]
    return PathSample(grid=res.grid, mass=res.mass[0], extinct_at=None if np.isnan(ext) else float(ext))


def sample_feller_exact(alpha: float, x0: float, t: float, rng: np.random.Generator, size=None):
    """Exact draw of the critical one-site process with ``Psi0(z) = alpha z^2``.

    ``X_t`` is a Poisson(``x0/(alpha t)``) sum of exponentials with mean
    ``alpha t``; the empty sum is extinction.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if x0 < 0 or not t > 0:
        raise ValueError("need x0 >= 0 and t > 0")
    scale = alpha * t
    N = rng.poisson(x0 / scale, size=size)
    X = rng.gamma(shape=N, scale=scale)  # shape 0 yields 0
    return X if size is not None else float(X)


def ptilde_start_masses(model: Model, sites: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Initial mass drawn from the split law at each site: 0 or an atom size ``y_i``."""
    mech = model.mech
    sites = np.asarray(sites, dtype=int)
    A = mech.A[sites]
    w = mech.p[sites] * mech.y[sites] ** 2  # (B, k)
    start = np.zeros(sites.size)
    u = rng.random(sites.size) * A
    # [0, 2 alpha) selects the null path; then the atoms in order.
    edges = 2.0 * mech.alpha[sites]
    for k in range(w.shape[1]):
        hit = (u >= edges) & (u < edges + w[:, k]) & (A > 0)
        start[hit] = mech.y[sites[hit], k]
        edges = edges + w[:, k]
    return start


def sample_ptilde(model: Model, x: int, T: float, cfg: SimConfig, rng: np.random.Generator) -> PathSample:
    """Path under the split law at site ``x`` (0-based)."""
    y0 = ptilde_start_masses(model, np.array([x]), rng)[0]
    mu = np.zeros(model.n)
    mu[x] = y0
    if y0 == 0:
        K = cfg.steps(T)
        grid = np.linspace(0.0, T, K + 1)
        return PathSample(grid=grid, mass=np.zeros((K + 1, model.n)), extinct_at=0.0)
    return simulate_superprocess(model, mu, T, cfg, rng)


def sample_excursion_approx(model: Model, x: int, eps: float, T: float, cfg: SimConfig,
                            rng: np.random.Generator) -> PathSample:
    """Path from ``eps * delta_x``; weighted by ``1/eps`` it approximates the excursion law."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    mu = np.zeros(model.n)
    mu[x] = eps
    return simulate_superprocess(model, mu, T, cfg, rng)
