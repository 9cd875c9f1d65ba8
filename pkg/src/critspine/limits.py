"""Large-time checks: survival asymptotics, conditional limit laws and the
ergodic average along the spine.

Deterministic checks evaluate ODE oracles on a time grid and compare with
their limits; :func:`yaglom_mc_ks` is the Monte Carlo counterpart for the
conditional exponential law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.stats import kstest

from .cumulant import (TestFunctional, cumulant_Vt, extinction_path, extinction_v,
                       first_variation, moment_second, survival_prob)
from .model import Model, as_vector
from .pathsim import SimConfig, sample_feller_exact, simulate_batch
from .spectral import _require_critical, spine_generator

__all__ = [
    "LimitReport",
    "DEFAULT_T_GRID",
    "kolmogorov_check",
    "uniform_ratio_check",
    "bt_slope_check",
    "derivative_identity",
    "yaglom_laplace_check",
    "spine_w_check",
    "centered_vanish_check",
    "ergodic_check",
    "ergodic_l2_error",
    "yaglom_mc_ks",
    "ks_threshold",
]

DEFAULT_T_GRID = (10.0, 10 ** 1.5, 100.0, 10 ** 2.5, 1000.0, 2000.0)


@dataclass
class LimitReport:
    name: str
    t: np.ndarray
    values: np.ndarray
    limit: np.ndarray
    tol: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.values - self.limit)

    @property
    def rel_error(self) -> np.ndarray:
        lim = np.abs(self.limit)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(lim > 0, self.abs_error / np.where(lim > 0, lim, 1.0), self.abs_error)

    def monotone(self, slack: float = 1e-4) -> bool:
        """``|value - limit|`` decreases along the grid, allowing one step up below ``slack``."""
        err = self.abs_error
        ups = [i for i in range(1, err.size) if err[i] > err[i - 1]]
        return len(ups) == 0 or (len(ups) == 1 and err[ups[0]] < slack)

    @property
    def passed(self) -> bool | None:
        if self.tol is None:
            return None
        return bool(self.rel_error[-1] <= self.tol)

    def rows(self):
        lim = np.broadcast_to(self.limit, self.values.shape)
        for t, v, l, e in zip(self.t, self.values, lim, self.rel_error):
            yield {"check": self.name, "t": float(t), "value": float(v), "target": float(l),
                   "error": float(e), "pass": None if self.tol is None else bool(e <= self.tol)}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "t": self.t.tolist(),
            "values": self.values.tolist(),
            "limit": np.broadcast_to(self.limit, self.values.shape).tolist(),
            "rel_error": self.rel_error.tolist(),
            "monotone": self.monotone(),
            "tol": self.tol,
            "pass": self.passed,
            **self.extra,
        }


def _grid(t_grid) -> np.ndarray:
    t = np.asarray(t_grid if t_grid is not None else DEFAULT_T_GRID, dtype=float)
    if np.any(np.diff(t) <= 0):
        raise ValueError("t-grid must be increasing")
    return t


def _b(model: Model, v: np.ndarray, phi_star: np.ndarray) -> np.ndarray:
    return v @ (phi_star * model.m)


def kolmogorov_check(model: Model, mu, t_grid=None, tol: float = 0.02) -> LimitReport:
    """``t P_mu(X_t != 0)`` against ``<mu, phi> / c0``."""
    sd = _require_critical(model)
    mu = as_vector(model, mu, "mu")
    t = _grid(t_grid)
    v = extinction_path(model, t)
    values = t * -np.expm1(-(v @ mu))
    limit = float(mu @ sd.phi) / sd.c0
    return LimitReport("kolmogorov", t, values, np.full(t.size, limit), tol)


def uniform_ratio_check(model: Model, t_grid=None, tol: float = 1e-2) -> LimitReport:
    """``sup_x |v_t(x) / (b(t) phi(x)) - 1|`` with ``b(t) = <v_t, phi*>_m``."""
    sd = _require_critical(model)
    t = _grid(t_grid)
    v = extinction_path(model, t)
    b = _b(model, v, sd.phi_star)
    values = np.max(np.abs(v / (b[:, None] * sd.phi[None, :]) - 1.0), axis=1)
    rep = LimitReport("uniform_ratio", t, values, np.zeros(t.size), None)
    rep.extra["tol_abs"] = tol
    rep.extra["pass"] = bool(values[-1] <= tol)
    return rep


def derivative_identity(model: Model, t: float, h: float = 1e-3) -> tuple[float, float]:
    """Forward difference of ``b`` at ``t`` and ``-<Psi0(v_t), phi*>_m``."""
    sd = _require_critical(model)
    v = extinction_path(model, [t, t + h], tol=1e-11)
    b = _b(model, v, sd.phi_star)
    fd = (b[1] - b[0]) / h
    exact = -float(model.mech.psi0(v[0]) @ (sd.phi_star * model.m))
    return fd, exact


def bt_slope_check(model: Model, t_grid=None, tol: float = 0.02, h: float = 1e-3,
                   deriv_times=(5.0, 50.0)) -> LimitReport:
    """``1/(t b(t))`` against ``c0``, plus the derivative identity for ``b``."""
    sd = _require_critical(model)
    t = _grid(t_grid)
    v = extinction_path(model, t)
    values = 1.0 / (t * _b(model, v, sd.phi_star))
    rep = LimitReport("bt_slope", t, values, np.full(t.size, sd.c0), tol)
    deriv = []
    for s in deriv_times:
        fd, exact = derivative_identity(model, s, h)
        deriv.append({"t": s, "finite_difference": fd, "identity": exact,
                      "rel_error": abs(fd - exact) / abs(exact)})
    rep.extra["derivative"] = deriv
    return rep


def _cond_laplace(a: np.ndarray, b: float) -> np.ndarray:
    # (e^{-a} - e^{-b}) / (1 - e^{-b}) without cancellation
    return (np.expm1(-a) - math.expm1(-b)) / -math.expm1(-b)


def yaglom_laplace_check(model: Model, mu, f, t: float, theta_grid=(0.25, 0.5, 1.0, 2.0, 4.0),
                         tol: float = 0.02) -> LimitReport:
    """``P_mu[exp(-theta X_t(f)/t) | X_t != 0]`` against ``1/(1 + m0 theta)``."""
    sd = _require_critical(model)
    mu = as_vector(model, mu, "mu")
    f = as_vector(model, f, "f")
    m0 = sd.c0 * float(f @ (sd.phi_star * model.m))
    theta = np.asarray(theta_grid, dtype=float)
    b = float(mu @ extinction_v(model, t))
    a = np.array([mu @ cumulant_Vt(model, th * f / t, t) for th in theta])
    values = _cond_laplace(a, b)
    rep = LimitReport("yaglom_laplace", theta, values, 1.0 / (1.0 + m0 * theta), tol)
    rep.extra.update({"horizon": t, "m0": m0, "max_rel_error": float(rep.rel_error.max())})
    return rep


def spine_w_check(model: Model, mu, t: float, theta_grid=(0.5, 1.0, 2.0), tol: float = 0.02) -> LimitReport:
    """``N_mu[w_t(phi) exp(-theta w_t(phi)/t)] / <mu, phi>`` against ``(1 + c0 theta)^-2``."""
    sd = _require_critical(model)
    mu = as_vector(model, mu, "mu")
    theta = np.asarray(theta_grid, dtype=float)
    values = []
    for th in theta:
        if th == 0:
            kf = TestFunctional(t, ())
        else:
            kf = TestFunctional.single(t, th * sd.phi / t)
        _, val = first_variation(model, kf, sd.phi, mu=mu)
        values.append(val / float(mu @ sd.phi))
    values = np.array(values)
    rep = LimitReport("spine_w", theta, values, (1.0 + sd.c0 * theta) ** -2, tol)
    rep.extra.update({"horizon": t, "max_rel_error": float(rep.rel_error.max())})
    return rep


def centered_vanish_check(model: Model, mu, f, t_grid=None) -> LimitReport:
    """``P_mu[(X_t(f~)/t)^2 | X_t != 0]`` with ``f~ = f - <phi*, f>_m phi``."""
    sd = _require_critical(model)
    mu = as_vector(model, mu, "mu")
    f = as_vector(model, f, "f")
    ft = f - float(f @ (sd.phi_star * model.m)) * sd.phi
    t = _grid(t_grid)
    values = np.array([moment_second(model, mu, s, ft, ft) / (s * s * survival_prob(model, mu, s))
                       for s in t])
    rep = LimitReport("centered_vanish", t, values, np.zeros(t.size), None)
    rep.extra["f_centered"] = ft.tolist()
    return rep


def ergodic_l2_error(model: Model, F: Callable[[np.ndarray, float], np.ndarray], t: float,
                     rtol: float = 1e-10, atol: float = 1e-14) -> np.ndarray:
    """``E_x[(int_0^1 F(xi_{ut}, u) du - c_F)^2]`` for every start site ``x``.

    ``F(sites, u)`` returns the values at all sites.  With the backward
    potential ``w_u = E[int_u^1 F(xi_{vt}, v) dv | xi_{ut}]`` the second
    moment is ``2 int_0^1 E[F(xi_{ut}, u) w_u(xi_{ut})] du``; both parts are
    linear ODEs in ``u``, which replaces the double time integral over the
    transition kernel.
    """
    sd = _require_critical(model)
    Qd = spine_generator(model)
    n = model.n
    sites = np.arange(n)
    pi = sd.phi * sd.phi_star * model.m
    tQ = t * Qd

    def back(u, w):  # in r = 1 - u
        return tQ @ w + F(sites, 1.0 - u)

    wsol = solve_ivp(back, (0.0, 1.0), np.zeros(n), method="Radau", rtol=rtol, atol=atol, dense_output=True)
    w_at = lambda u: wsol.sol(1.0 - u)
    # Forward: P_u rows are the laws from each start; z accumulates the second moment.
    def fwd(u, y):
        P = y[:n * n].reshape(n, n)
        dP = P @ tQ
        dz = 2.0 * P @ (F(sites, u) * w_at(u))
        cF = F(sites, u) @ pi
        return np.concatenate([dP.ravel(), dz, [cF]])

    y0 = np.concatenate([np.eye(n).ravel(), np.zeros(n), [0.0]])
    fsol = solve_ivp(fwd, (0.0, 1.0), y0, method="Radau", rtol=rtol, atol=atol)
    y1 = fsol.y[:, -1]
    second = y1[n * n:n * n + n]
    c = y1[-1]
    first = w_at(0.0)
    return np.maximum(second - 2.0 * c * first + c * c, 0.0)


def ergodic_check(model: Model, F, t_grid=None) -> LimitReport:
    t = _grid(t_grid)
    values = np.array([ergodic_l2_error(model, F, s).max() for s in t])
    return LimitReport("ergodic", t, values, np.zeros(t.size), None)


def ks_threshold(n_survivors: int, bias: float) -> float:
    return 1.63 / math.sqrt(n_survivors) + bias


def yaglom_mc_ks(model: Model, mu, f, t: float, n_sims: int, cfg: SimConfig | None,
                 rng: np.random.Generator, exact: bool | None = None, min_survivors: int = 500) -> dict:
    """KS distance of ``X_t(f)/(t m0)`` given survival from the unit exponential.

    The bias allowance is the largest gap between the conditional Laplace
    curve at ``t`` and its limit over a fixed theta grid.
    """
    sd = _require_critical(model)
    mu = as_vector(model, mu, "mu")
    f = as_vector(model, f, "f")
    m0 = sd.c0 * float(f @ (sd.phi_star * model.m))
    one_site_feller = model.n == 1 and not np.any(model.mech.p > 0) and abs(model.mech.beta[0]) < 1e-12 \
        and model.motion.kill[0] == 0
    if exact is None:
        exact = one_site_feller
    if exact:
        if not one_site_feller:
            raise ValueError("the exact sampler needs a one-site critical quadratic model")
        X = sample_feller_exact(float(model.mech.alpha[0]), float(mu[0]), t, rng, size=n_sims)
        vals = X * f[0]
        alive = X > 0
    else:
        res = simulate_batch(model, mu, t, cfg or SimConfig(dt=1e-2), rng, size=n_sims)
        term = res.terminal
        alive = term.sum(axis=1) > 0
        vals = term @ f
    z = vals[alive] / (t * m0)
    bias = float(np.max(np.abs(yaglom_laplace_check(model, mu, f, t).abs_error)))
    out = {"n_sims": int(n_sims), "n_survivors": int(z.size), "m0": m0, "bias_allowance": bias,
           "conditional_mean": float(z.mean()) if z.size else None,
           "conditional_mean_se": float(z.std(ddof=1) / math.sqrt(z.size)) if z.size > 1 else None}
    if z.size < min_survivors:
        out.update({"ks_statistic": None, "threshold": None, "pass": None, "inconclusive": True})
        return out
    ks = float(kstest(z, "expon").statistic)
    thr = ks_threshold(z.size, bias)
    out.update({"ks_statistic": ks, "threshold": thr, "pass": bool(ks <= thr), "inconclusive": False})
    return out
