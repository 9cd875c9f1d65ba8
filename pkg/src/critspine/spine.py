"""Spine samplers and semi-analytic conditional Laplace evaluators.

Spines are piecewise-constant paths on the sites.  They are sampled in
vectorised batches and stored as padded arrays (``SpineBatch``); a single
path is available as a ``SpinePath``.

Conditional Laplace functionals given a spine only need integrals of
``Psi0'(u_s)`` along the path.  The backward solver already carries the
running integral ``int_s^T Psi0'(u_r) dr`` per site, so each spine segment
costs two evaluations of that tail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .cumulant import CumulantSolution, TestFunctional
from .model import Model, as_vector
from .pathsim import SimConfig, ptilde_start_masses, simulate_batch
from .spectral import _require_critical, spine_generator

__all__ = [
    "SpinePath",
    "SpineBatch",
    "SkeletonSample",
    "SkeletonBatch",
    "sample_spine_gT",
    "sample_phi_chain",
    "spine_conditional_laplace",
    "sample_spine_immigration",
    "SpineImmigration",
    "sample_two_spine",
    "two_spine_conditional_laplace",
    "sample_two_spine_paths",
    "immigration_bias_laplace",
]

HAZARD_GRID = 2 ** 14
MAX_REJECTION_ROUNDS = 10 ** 6


@dataclass(frozen=True)
class SpinePath:
    T: float
    t0: float
    start: int
    jump_times: np.ndarray
    states: np.ndarray  # states[0] = start, states[j] after j-th jump

    def state_at(self, s):
        return self.states[np.searchsorted(self.jump_times, s, side="right")]


@dataclass
class SpineBatch:
    """``B`` spines on ``[t0, T]``; ``times`` is padded with ``inf``."""

    T: float
    t0: np.ndarray  # (B,)
    times: np.ndarray  # (B, J)
    states: np.ndarray  # (B, J + 1)

    def __len__(self):
        return self.states.shape[0]

    def state_at(self, s) -> np.ndarray:
        """States at time ``s`` (scalar or per-spine array)."""
        s = np.broadcast_to(np.asarray(s, dtype=float), (len(self),))
        k = np.sum(self.times <= s[:, None], axis=1)
        return self.states[np.arange(len(self)), k]

    def path(self, i: int) -> SpinePath:
        jt = self.times[i][np.isfinite(self.times[i])]
        return SpinePath(T=self.T, t0=float(self.t0[i]), start=int(self.states[i, 0]),
                         jump_times=jt, states=self.states[i, :jt.size + 1].copy())

    def segments(self):
        """Segment start/end times ``(B, J+1)`` clipped to ``[t0, T]``."""
        B = len(self)
        lo = np.concatenate([self.t0[:, None], np.minimum(self.times, self.T)], axis=1)
        hi = np.concatenate([np.minimum(self.times, self.T), np.full((B, 1), self.T)], axis=1)
        return lo, hi

    def integrate_tail(self, tail) -> np.ndarray:
        """``int_{t0}^T F(s, xi_s) ds`` given ``tail(s) = int_s^T F(r, .) dr``."""
        lo, hi = self.segments()
        live = hi > lo
        out = np.zeros(len(self))
        if not np.any(live):
            return out
        rows, cols = np.nonzero(live)
        st = self.states[rows, cols]
        a = tail(lo[rows, cols])[np.arange(rows.size), st]
        b = tail(hi[rows, cols])[np.arange(rows.size), st]
        np.add.at(out, rows, a - b)
        return out

    def integrate_site(self, F: np.ndarray) -> np.ndarray:
        """``int_{t0}^T F(xi_s) ds`` for a function of the site only."""
        lo, hi = self.segments()
        return np.sum((hi - lo) * F[self.states], axis=1)


def _pad(lists_t, lists_s, B):
    J = max((len(t) for t in lists_t), default=0)
    times = np.full((B, J), np.inf)
    states = np.zeros((B, J + 1), dtype=int)
    for i in range(B):
        k = len(lists_t[i])
        times[i, :k] = lists_t[i]
        states[i, :k + 1] = lists_s[i]
        states[i, k + 1:] = lists_s[i][-1]
    return times, states


def sample_phi_chain(model: Model, start: np.ndarray, t0: np.ndarray, T: float,
                     rng: np.random.Generator) -> SpineBatch:
    """Time-homogeneous phi-spine chains from ``(t0_i, start_i)`` up to ``T``."""
    Qd = spine_generator(model)
    rate = -np.diag(Qd)
    jump = Qd.copy()
    np.fill_diagonal(jump, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        jump = np.where(rate[:, None] > 0, jump / rate[:, None], 0.0)
    cum = np.cumsum(jump, axis=1)
    B = start.size
    t = np.asarray(t0, dtype=float).copy()
    x = np.asarray(start, dtype=int).copy()
    lt = [[] for _ in range(B)]
    ls = [[int(v)] for v in x]
    active = np.arange(B)
    while active.size:
        r = rate[x[active]]
        hold = np.where(r > 0, rng.exponential(size=active.size) / np.where(r > 0, r, 1.0), np.inf)
        tn = t[active] + hold
        go = tn < T
        active = active[go]
        tn = tn[go]
        u = rng.random(active.size)
        nxt = np.array([np.searchsorted(cum[xi], ui * cum[xi, -1], side="right")
                        for xi, ui in zip(x[active], u)], dtype=int)
        t[active] = tn
        x[active] = nxt
        for i, ti, xi in zip(active, tn, nxt):
            lt[i].append(ti)
            ls[i].append(int(xi))
    times, states = _pad(lt, ls, B)
    return SpineBatch(T=T, t0=np.asarray(t0, dtype=float).copy(), times=times, states=states)


def sample_spine_gT(model: Model, mu, g, T: float, rng: np.random.Generator, size: int = 1,
                    grid_points: int = HAZARD_GRID) -> SpineBatch:
    """``(g, T)``-spines started from the ``mu S_T g``-mixture.

    The chain jumps ``x -> y`` at rate ``Q[x, y] h_s(y) / h_s(x)`` with
    ``h_s = S_{T-s} g``.  Since ``(d/ds + L) h = 0``, the integrated hazard
    out of ``x`` is ``a_x(s) - a_x(s0)`` with ``a_x(s) = -L[x, x] s - log h_s(x)``;
    jump times are drawn by inverting ``a_x`` on a fine grid.
    """
    _require_critical(model)
    mu = as_vector(model, mu, "mu")
    g = as_vector(model, g, "g")
    if np.any(g < 0) or not np.sum(g * model.m) > 0:
        raise ValueError("g must be nonnegative with m(g) > 0")
    n = model.n
    L = model.L
    Q = model.motion.q.copy()
    np.fill_diagonal(Q, 0.0)
    M = grid_points
    s = np.linspace(0.0, T, M + 1)
    step = expm((T / M) * L)
    H = np.empty((M + 1, n))
    H[M] = g
    for k in range(M - 1, -1, -1):
        H[k] = step @ H[k + 1]
    with np.errstate(divide="ignore"):
        a = -np.diag(L)[None, :] * s[:, None] - np.log(H)
    a = np.maximum.accumulate(a, axis=0)
    # h vanishes at T only where g does; the chain must leave such sites before T.
    top = ~np.isfinite(a[M])
    a[M, top] = a[M - 1, top] + 50.0

    w0 = mu * H[0]
    if not w0.sum() > 0:
        raise ValueError("mu S_T g vanishes")
    x = rng.choice(n, size=size, p=w0 / w0.sum())
    t = np.zeros(size)
    lt = [[] for _ in range(size)]
    ls = [[int(v)] for v in x]
    active = np.arange(size)
    while active.size:
        keep = []
        current = x[active].copy()
        for site in np.unique(current):
            sel = active[current == site]
            col = a[:, site]
            target = np.interp(t[sel], s, col) + rng.exponential(size=sel.size)
            go = target < col[M]
            sel, target = sel[go], target[go]
            k = np.clip(np.searchsorted(col, target, side="left"), 1, M)
            lo, hi = col[k - 1], col[k]
            frac = np.where(hi > lo, (target - lo) / np.where(hi > lo, hi - lo, 1.0), 1.0)
            tj = s[k - 1] + frac * (s[k] - s[k - 1])
            tj = np.maximum(tj, t[sel])
            hj = np.array([np.interp(tj, s, H[:, y]) for y in range(n)]).T  # (len, n)
            w = Q[site][None, :] * hj
            w /= w.sum(axis=1, keepdims=True)
            u = rng.random(sel.size)
            nxt = np.minimum((np.cumsum(w, axis=1) < u[:, None]).sum(axis=1), n - 1)
            t[sel] = tj
            x[sel] = nxt
            for i, ti, xi in zip(sel, tj, nxt):
                lt[i].append(ti)
                ls[i].append(int(xi))
            keep.append(sel)
        active = np.concatenate(keep) if keep else np.array([], dtype=int)
    times, states = _pad(lt, ls, size)
    return SpineBatch(T=T, t0=np.zeros(size), times=times, states=states)


def _check_horizon(T: float, kf: TestFunctional, sol: CumulantSolution):
    if abs(kf.T - T) > 1e-12 * T or abs(sol.T - T) > 1e-12 * T:
        raise ValueError(f"horizon mismatch: spine T = {T}, test functional T = {kf.T}, solution T = {sol.T}")


def spine_conditional_laplace(model: Model, spine: SpineBatch, kf: TestFunctional,
                              sol: CumulantSolution) -> np.ndarray:
    """``exp(-int_{t0}^T Psi0'(u_s)(xi_s) ds)`` for every spine in the batch."""
    _check_horizon(spine.T, kf, sol)
    return np.exp(-spine.integrate_tail(sol.psi0p_tail))


@dataclass
class SkeletonBatch:
    main: SpineBatch
    kappa: np.ndarray
    aux: SpineBatch
    weight: np.ndarray

    def __len__(self):
        return self.kappa.size


@dataclass(frozen=True)
class SkeletonSample:
    main: SpinePath
    kappa: float
    aux: SpinePath
    weight: float = 1.0


def _expected_W(model: Model, mu, T: float) -> float:
    # E[int_0^T (A phi)(xi_s) ds] for the phi-spine from mu*phi, by one block exponential.
    sd = _require_critical(model)
    Qd = spine_generator(model)
    n = model.n
    blk = np.zeros((2 * n, 2 * n))
    blk[:n, :n] = Qd
    blk[:n, n:] = np.eye(n)
    integral = expm(T * blk)[:n, n:]
    start = mu * sd.phi
    return float(start @ integral @ (model.mech.A * sd.phi) / start.sum())


def sample_two_spine(model: Model, mu, T: float, rng: np.random.Generator, size: int = 1,
                     importance: bool = False) -> SkeletonBatch:
    """Main spine, splitting time and auxiliary spine.

    By default the main spine is drawn by rejection from the phi-spine with
    acceptance ``W / (T max(A phi))``, ``W = int_0^T (A phi)(xi_s) ds``.  With
    ``importance=True`` every phi-spine is kept with weight ``W / E[W]``.
    """
    sd = _require_critical(model)
    mu = as_vector(model, mu, "mu")
    Aphi = model.mech.A * sd.phi
    if not np.any(Aphi > 0):
        raise ValueError("A phi vanishes identically; no two-spine construction")
    start_law = mu * sd.phi / np.sum(mu * sd.phi)
    top = T * Aphi.max()

    if importance:
        x0 = rng.choice(model.n, size=size, p=start_law)
        main = sample_phi_chain(model, x0, np.zeros(size), T, rng)
        W = main.integrate_site(Aphi)
        weight = W / _expected_W(model, mu, T)
    else:
        parts = []
        have = 0
        rounds = 0
        while have < size:
            rounds += 1
            if rounds > MAX_REJECTION_ROUNDS:
                raise RuntimeError("two-spine rejection sampler exceeded its iteration cap")
            m = max(64, int(1.3 * (size - have)))
            x0 = rng.choice(model.n, size=m, p=start_law)
            cand = sample_phi_chain(model, x0, np.zeros(m), T, rng)
            W = cand.integrate_site(Aphi)
            ok = rng.random(m) * top < W
            if np.any(ok):
                parts.append((cand, ok))
                have += int(ok.sum())
        main = _concat([_select(c, ok) for c, ok in parts], T)
        main = _select(main, np.arange(size))
        W = main.integrate_site(Aphi)
        weight = np.ones(size)

    # kappa by inverse CDF of the piecewise-constant density A phi(xi_s).
    lo, hi = main.segments()
    mass = (hi - lo) * Aphi[main.states]
    cum = np.cumsum(mass, axis=1)
    target = rng.random(size) * W
    seg = np.minimum((cum < target[:, None]).sum(axis=1), cum.shape[1] - 1)
    # skip zero-mass segments that the count may land on
    r = np.arange(size)
    before = np.where(seg > 0, cum[r, np.maximum(seg - 1, 0)], 0.0)
    dens = Aphi[main.states[r, seg]]
    kappa = lo[r, seg] + (target - before) / np.where(dens > 0, dens, np.inf)
    kappa = np.clip(kappa, lo[r, seg], hi[r, seg])
    aux = sample_phi_chain(model, main.states[r, seg], kappa, T, rng)
    return SkeletonBatch(main=main, kappa=kappa, aux=aux, weight=weight)


def _select(b: SpineBatch, sel) -> SpineBatch:
    return SpineBatch(T=b.T, t0=b.t0[sel], times=b.times[sel], states=b.states[sel])


def _concat(batches: list[SpineBatch], T: float) -> SpineBatch:
    J = max(b.times.shape[1] for b in batches)
    times, states, t0 = [], [], []
    for b in batches:
        pad = J - b.times.shape[1]
        times.append(np.pad(b.times, ((0, 0), (0, pad)), constant_values=np.inf))
        states.append(np.pad(b.states, ((0, 0), (0, pad)), mode="edge"))
        t0.append(b.t0)
    return SpineBatch(T=T, t0=np.concatenate(t0), times=np.vstack(times), states=np.vstack(states))


def two_spine_conditional_laplace(model: Model, skel: SkeletonBatch, kf: TestFunctional,
                                  sol: CumulantSolution) -> np.ndarray:
    """Product of the main-spine, auxiliary-spine and split factors per skeleton."""
    _check_horizon(skel.main.T, kf, sol)
    mech = model.mech
    main = skel.main.integrate_tail(sol.psi0p_tail)
    aux = skel.aux.integrate_tail(sol.psi0p_tail)
    x = skel.main.state_at(skel.kappa)
    u = sol.u_at(skel.kappa)[np.arange(len(skel)), x]
    A = mech.A[x]
    jumps = np.sum(mech.p[x] * mech.y[x] ** 2 * np.exp(-mech.y[x] * u[:, None]), axis=1)
    split = np.where(A > 0, (2.0 * mech.alpha[x] + jumps) / np.where(A > 0, A, 1.0), 1.0)
    return np.exp(-(main + aux)) * split


# Full immigration along spines


class SpineImmigration:
    """Euler source term for Poisson immigration along one or two spines.

    Continuum immigration arrives at rate ``2 alpha(xi_s) / eps`` with mass
    ``eps``; jump immigration for atom ``i`` arrives at rate ``y_i p_i`` with
    mass ``y_i``.  Descendants of all immigrants share the mass vector of the
    path, which the branching property allows.  An optional split injection
    adds a draw from the split law at ``(kappa, xi_kappa)``.
    """

    def __init__(self, model: Model, spines: list[SpineBatch], eps: float,
                 kappa: np.ndarray | None = None, split_sites: np.ndarray | None = None,
                 split_rng: np.random.Generator | None = None):
        self.model = model
        self.spines = spines
        self.eps = eps
        self.kappa = kappa
        self.split_mass = None
        if kappa is not None:
            self.split_mass = ptilde_start_masses(model, split_sites, split_rng)
            self.split_sites = split_sites
            self.split_done = np.zeros(kappa.size, dtype=bool)

    def __call__(self, t, dt, idx, rng):
        mech = self.model.mech
        n = self.model.n
        out = np.zeros((idx.size, n))
        rows = np.arange(idx.size)
        for sp in self.spines:
            on = sp.t0[idx] <= t
            x = sp.state_at(t)[idx]
            for site in range(n):
                members = np.nonzero(on & (x == site))[0]
                if members.size == 0:
                    continue
                # Arrivals at one site share a rate: draw the total, then scatter uniformly.
                streams = [(2.0 * mech.alpha[site] / self.eps, self.eps)]
                streams += [(mech.y[site, k] * mech.p[site, k], mech.y[site, k])
                            for k in range(mech.y.shape[1]) if mech.p[site, k] > 0]
                for rate, mass in streams:
                    if rate <= 0:
                        continue
                    cnt = rng.poisson(rate * dt * members.size)
                    if cnt:
                        hit = members[rng.integers(members.size, size=cnt)]
                        np.add.at(out[:, site], hit, mass)
        if self.kappa is not None:
            fire = (~self.split_done[idx]) & (self.kappa[idx] < t + dt)
            if np.any(fire):
                j = idx[fire]
                out[rows[fire], self.split_sites[j]] += self.split_mass[j]
                self.split_done[j] = True
        return out


def sample_spine_immigration(model: Model, spine: SpineBatch, cfg: SimConfig, rng: np.random.Generator,
                             record=None):
    """Immigration ``Y`` along each spine of the batch, on ``[0, T]``."""
    src = SpineImmigration(model, [spine], cfg.eps_excursion)
    return simulate_batch(model, np.zeros((len(spine), model.n)), spine.T, cfg, rng, record=record, source=src)


def sample_two_spine_paths(model: Model, skel: SkeletonBatch, cfg: SimConfig, rng: np.random.Generator,
                           record=None):
    """Total immigration ``Z = Y + Y' + X'`` for each skeleton."""
    x = skel.main.state_at(skel.kappa)
    src = SpineImmigration(model, [skel.main, skel.aux], cfg.eps_excursion,
                           kappa=skel.kappa, split_sites=x, split_rng=rng)
    return simulate_batch(model, np.zeros((len(skel), model.n)), skel.main.T, cfg, rng,
                          record=record, source=src)


def immigration_bias_laplace(model: Model, spine: SpineBatch, sol: CumulantSolution, eps: float,
                             points: int = 4001) -> np.ndarray:
    """Conditional Laplace functional of the eps-device immigration, by quadrature.

    Continuum arrivals at rate ``2 alpha / eps`` launching mass ``eps``
    contribute ``2 alpha (1 - e^{-eps u_s}) / eps`` to the exponent; jump
    arrivals contribute ``sum_i y_i p_i (1 - e^{-y_i u_s})``.  As ``eps -> 0``
    this tends to :func:`spine_conditional_laplace`.
    """
    mech = model.mech
    T = spine.T
    s = np.linspace(0.0, T, points)
    u = sol.u_at(s)  # (P, n)
    rate = 2.0 * mech.alpha[None, :] * -np.expm1(-eps * u) / eps
    rate += np.sum(mech.p[None] * mech.y[None] * -np.expm1(-mech.y[None] * u[:, :, None]), axis=2)
    states = np.array([spine.path(i).state_at(s) for i in range(len(spine))])  # (B, P)
    vals = rate[np.arange(points)[None, :], states]
    out = np.trapezoid(vals, s, axis=1)
    return np.exp(-out)
