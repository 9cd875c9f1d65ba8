"""Mean semigroup, principal eigen-triple and the Doob-transformed spine motion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .model import Model, ModelError, as_vector

__all__ = [
    "SpectralData",
    "mean_semigroup_apply",
    "semigroup_matrix",
    "kernel",
    "principal_triple",
    "calibrate_critical",
    "spine_generator",
    "spine_transition",
    "iu_gap",
]

IU_GRID = np.arange(1.0, 10.0 + 1e-9, 0.5)


@dataclass(frozen=True)
class SpectralData:
    lam: float
    phi: np.ndarray
    phi_star: np.ndarray
    gap_c: float
    gap_gamma: float
    c0: float

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "phi": self.phi.tolist(),
            "phi_star": self.phi_star.tolist(),
            "c0": self.c0,
            "gap_c": self.gap_c,
            "gap_gamma": None if math.isinf(self.gap_gamma) else self.gap_gamma,
        }


def semigroup_matrix(model: Model, t: float) -> np.ndarray:
    """Matrix of ``S_t``: ``(S_t f)(x) = sum_y M[x, y] f(y)``."""
    if not t >= 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    return expm(t * model.L)


def mean_semigroup_apply(model: Model, t: float, f) -> np.ndarray:
    f = as_vector(model, f)
    return semigroup_matrix(model, t) @ f


def kernel(model: Model, t: float) -> np.ndarray:
    """Density ``q(t, x, y)`` of ``S_t`` with respect to ``m``."""
    return semigroup_matrix(model, t) / model.m[None, :]


def _positive_eigvec(M: np.ndarray) -> tuple[float, np.ndarray]:
    w, V = np.linalg.eig(M)
    k = int(np.argmax(w.real))
    lam = w[k]
    if abs(lam.imag) > 1e-10:
        raise ModelError("principal eigenvalue is not real", "motion.q")
    v = V[:, k].real
    v = v * np.sign(v[np.argmax(np.abs(v))])
    if np.any(v <= 0):
        raise ModelError("principal eigenvector is not strictly positive", "motion.q")
    return float(lam.real), v, w


def _power_check(M: np.ndarray, lam: float, v: np.ndarray) -> None:
    # Power iteration on exp(M): its dominant eigenvector is the principal one.
    n = M.shape[0]
    if n == 1:
        return
    E = expm(M - lam * np.eye(n))
    x = np.ones(n)
    for _ in range(200):
        x_new = E @ x
        x_new /= np.linalg.norm(x_new)
        if np.linalg.norm(x_new - x) < 1e-14:
            x = x_new
            break
        x = x_new
    vn = v / np.linalg.norm(v)
    if np.linalg.norm(x - vn) > 1e-6:
        raise ModelError("eigen-solver and power iteration disagree on the principal eigenvector", "motion.q")


def principal_triple(model: Model) -> SpectralData:
    if not model.motion.irreducible():
        raise ModelError("motion is not irreducible", "motion.q")
    L = model.L
    m = model.m
    lam, phi, w = _positive_eigvec(L)
    # Left eigenvector of L, i.e. eigenvector of L^T; phi* is its density w.r.t. m.
    lam_l, left, _ = _positive_eigvec(L.T)
    _power_check(L, lam, phi)
    _power_check(L.T, lam_l, left)
    phi_star = left / m

    phi = phi / math.sqrt(np.sum(phi * phi * m))
    phi_star = phi_star / np.sum(phi * phi_star * m)

    others = np.delete(w, int(np.argmax(w.real)))
    gamma = float(lam - np.max(others.real)) if others.size else math.inf
    A = model.mech.A
    c0 = 0.5 * float(np.sum(A * phi * phi * phi_star * m))
    gap_c = _iu_constant(model, lam, phi, phi_star, gamma)
    return SpectralData(lam=lam, phi=phi, phi_star=phi_star, gap_c=gap_c, gap_gamma=gamma, c0=c0)


def _iu_ratio(model: Model, t: float, lam: float, phi, phi_star) -> float:
    q = kernel(model, t) * math.exp(-lam * t)
    return float(np.max(np.abs(q / np.outer(phi, phi_star) - 1.0)))


def _iu_constant(model: Model, lam, phi, phi_star, gamma) -> float:
    if math.isinf(gamma):
        return 0.0
    return max(_iu_ratio(model, t, lam, phi, phi_star) * math.exp(gamma * t) for t in IU_GRID)


def iu_gap(model: Model) -> tuple[float, float]:
    _require_critical(model)
    sd = principal_triple(model)
    return sd.gap_c, sd.gap_gamma


def iu_ratio(model: Model, t: float) -> float:
    """``sup_{x,y} |q(t,x,y) / (phi(x) phi*(y)) - 1|``."""
    sd = principal_triple(model)
    return _iu_ratio(model, t, sd.lam, sd.phi, sd.phi_star)


def calibrate_critical(model: Model) -> Model:
    """Shift ``beta`` by the principal eigenvalue so that it becomes 0."""
    lam = principal_triple(model).lam
    return model.with_beta(model.mech.beta - lam, critical=True)


def _require_critical(model: Model, tol: float = 1e-8) -> SpectralData:
    sd = principal_triple(model)
    if abs(sd.lam) > tol:
        raise ModelError(f"model is not critical (lambda = {sd.lam:.3e}); calibrate first", "mechanism.beta")
    return sd


def spine_generator(model: Model) -> np.ndarray:
    """Conservative generator of the phi-Doob transform of the motion."""
    sd = _require_critical(model)
    phi = sd.phi
    Q = model.motion.q
    Qd = Q * phi[None, :] / phi[:, None]
    np.fill_diagonal(Qd, 0.0)
    Qd[np.diag_indices(model.n)] = -Qd.sum(axis=1)
    return Qd


def spine_transition(model: Model, t: float) -> np.ndarray:
    """Transition matrix of the phi-spine over time ``t``."""
    return expm(t * spine_generator(model))
