"""ODE oracles for Laplace functionals of the superprocess.

On a finite state space the mild equations reduce to ODE systems driven by
the generator ``L = Q + diag(beta)`` of the mean semigroup:

* forward cumulant flow ``dV/dt = L V - Psi0(V)``, ``V_0 = f``;
* backward occupation equation ``-du/ds = L u - Psi0(u)`` between atom times
  of a test functional, with jumps ``u_{t-} = u_{t+} + f_t``;
* its first and second variations in the direction of ``w_T(g)``.

Backward equations are integrated in reversed time ``tau = T - s`` with the
Dormand-Prince pair from :func:`scipy.integrate.solve_ivp`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import quad_vec, solve_ivp
from scipy.linalg import expm

from .model import Model, as_vector
from .spectral import principal_triple, semigroup_matrix, spine_generator

__all__ = [
    "IntegrationError",
    "ExtinctionError",
    "TestFunctional",
    "CumulantSolution",
    "cumulant_Vt",
    "extinction_v",
    "extinction_path",
    "occupation_u",
    "first_variation",
    "second_variation",
    "moment_second",
    "moment_second_spine_form",
    "survival_prob",
]

RTOL = 1e-10
ATOL = 1e-12


class IntegrationError(RuntimeError):
    def __init__(self, message: str, time: float):
        super().__init__(f"{message} (at t = {time:.6g})")
        self.time = time


class ExtinctionError(RuntimeError):
    """The extinction function did not converge: the Grey-type condition fails."""


@dataclass(frozen=True)
class TestFunctional:
    """Atomic measure ``K = sum_i delta_{t_i}`` with test functions ``f_i``."""

    __test__ = False  # keep pytest from collecting this class

    T: float
    atoms: tuple[tuple[float, np.ndarray], ...] = ()

    def __post_init__(self):
        T = float(self.T)
        if not T > 0:
            raise ValueError(f"horizon T must be positive, got {T}")
        atoms = []
        prev = 0.0
        for t, f in self.atoms:
            t = float(t)
            if not (0 < t <= T * (1 + 1e-14)):
                raise ValueError(f"atom time {t} outside (0, {T}]")
            if atoms and t <= prev:
                raise ValueError("atom times must be strictly increasing")
            f = np.array(f, dtype=float)
            f.setflags(write=False)
            if not np.all(np.isfinite(f)) or np.any(f < 0):
                raise ValueError("atom test functions must be finite and nonnegative")
            atoms.append((min(t, T), f))
            prev = t
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "atoms", tuple(atoms))

    @classmethod
    def single(cls, T: float, f) -> "TestFunctional":
        return cls(T, ((T, f),))

    def scaled(self, theta: float) -> "TestFunctional":
        return TestFunctional(self.T, tuple((t, theta * f) for t, f in self.atoms))

    def plus_terminal(self, g) -> "TestFunctional":
        """Add ``g`` to the test function at time ``T``."""
        g = np.asarray(g, dtype=float)
        atoms = [(t, f) for t, f in self.atoms if t < self.T]
        last = [f for t, f in self.atoms if t >= self.T]
        terminal = (last[0] if last else 0.0) + g
        return TestFunctional(self.T, tuple(atoms) + ((self.T, terminal),))

    def evaluate(self, path_times: np.ndarray, masses: np.ndarray) -> np.ndarray:
        """``K^f(Y) = sum_i Y_{t_i}(f_i)`` for paths stored on a time grid.

        ``masses`` has shape ``(..., len(path_times), n)``; atom times must lie
        on the grid (to within 1e-9 relative).
        """
        total = 0.0
        for t, f in self.atoms:
            k = int(np.argmin(np.abs(path_times - t)))
            if abs(path_times[k] - t) > 1e-9 * max(1.0, t):
                raise ValueError(f"atom time {t} is not on the path grid")
            total = total + masses[..., k, :] @ f
        return np.asarray(total)


@dataclass
class CumulantSolution:
    """Backward solution on ``[0, T]`` with dense interpolants.

    ``u``, ``u_dot`` and ``u_ddot`` are sampled on ``grid``; at atom times the
    stored value is the right limit.  Arbitrary times are served by the
    integrator's dense output through :meth:`u_at` and :meth:`psi0p_tail`.
    """

    T: float
    grid: np.ndarray
    u: np.ndarray
    u_dot: np.ndarray | None = None
    u_ddot: np.ndarray | None = None
    _breaks: np.ndarray = field(default=None, repr=False)
    _segments: list = field(default=None, repr=False)
    _slots: dict = field(default=None, repr=False)

    def _eval(self, s, slot: str) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        tau = np.clip(self.T - s, 0.0, self.T)
        idx = np.clip(np.searchsorted(self._breaks, tau, side="left") - 1, 0, len(self._segments) - 1)
        lo, hi = self._slots[slot]
        out = np.empty((s.size, hi - lo))
        for k in np.unique(idx):
            sel = idx == k
            out[sel] = self._segments[k](tau[sel]).T[:, lo:hi]
        return out

    def u_at(self, s) -> np.ndarray:
        return self._eval(s, "u")

    def psi0p_tail(self, s) -> np.ndarray:
        """``int_s^T Psi0'(u_r)(x) dr`` for every site ``x``; shape ``(len(s), n)``."""
        return self._eval(s, "D")

    @property
    def u0(self) -> np.ndarray:
        return self.u[0]


def _rhs_factory(model: Model, order: int, track: bool):
    L = model.L
    mech = model.mech
    n = model.n

    def rhs(tau, y):
        u = y[:n]
        out = [L @ u - mech.psi0(u)]
        if order >= 1 or track:
            d1 = mech.psi0_prime(u)
        if order >= 1:
            ud = y[n:2 * n]
            out.append(L @ ud - d1 * ud)
        if order >= 2:
            udd = y[2 * n:3 * n]
            out.append(L @ udd - d1 * udd - mech.psi0_second(u) * ud * ud)
        if track:
            out.append(d1)
        return np.concatenate(out)

    return rhs


def _solve_ivp(rhs, span, y0, rtol, atol, dense=True, t_eval=None):
    sol = solve_ivp(rhs, span, y0, method="RK45", rtol=rtol, atol=atol,
                    dense_output=dense, t_eval=t_eval)
    if sol.status != 0:
        raise IntegrationError(f"integrator failed: {sol.message}", float(sol.t[-1]))
    return sol


def _backward(model: Model, kf: TestFunctional, g=None, order: int = 0,
              grid_step: float | None = None, rtol: float = RTOL, atol: float = ATOL) -> CumulantSolution:
    n = model.n
    T = kf.T
    for _, f in kf.atoms:
        if f.shape != (n,):
            raise ValueError(f"atom test function has shape {f.shape}, expected ({n},)")
    g = np.zeros(n) if g is None else as_vector(model, g, "g")

    terminal = np.zeros(n)
    jumps = []  # (tau, f) for atoms strictly before T
    for t, f in kf.atoms:
        if t >= T:
            terminal = terminal + f
        else:
            jumps.append((T - t, f))
    jumps.sort(key=lambda a: a[0])
    breaks = np.array([0.0] + [tau for tau, _ in jumps] + [T])

    slots = {"u": (0, n)}
    y0 = [terminal]
    if order >= 1:
        slots["u_dot"] = (n, 2 * n)
        y0.append(g)
    if order >= 2:
        slots["u_ddot"] = (2 * n, 3 * n)
        y0.append(np.zeros(n))
    k = len(y0) * n
    slots["D"] = (k, k + n)
    y0.append(np.zeros(n))
    y = np.concatenate(y0)

    rhs = _rhs_factory(model, order, track=True)
    segments = []
    for i in range(len(breaks) - 1):
        a, b = breaks[i], breaks[i + 1]
        if b > a:
            sol = _solve_ivp(rhs, (a, b), y, rtol, atol)
            segments.append(sol.sol)
            y = sol.y[:, -1].copy()
        else:
            segments.append(_constant(y))
        if i < len(jumps):
            y[:n] += jumps[i][1]

    step = grid_step if grid_step is not None else 1e-3 * T
    grid = np.union1d(np.linspace(0.0, T, int(round(T / step)) + 1), [t for t, _ in kf.atoms])
    out = CumulantSolution(T=T, grid=grid, u=None, _breaks=breaks, _segments=segments, _slots=slots)
    out.u = out._eval(grid, "u")
    if order >= 1:
        out.u_dot = out._eval(grid, "u_dot")
    if order >= 2:
        out.u_ddot = out._eval(grid, "u_ddot")
    # s = 0 must carry every atom: take the end state directly.
    out.u[0] = y[:n]
    if order >= 1:
        out.u_dot[0] = y[slots["u_dot"][0]:slots["u_dot"][1]]
    if order >= 2:
        out.u_ddot[0] = y[slots["u_ddot"][0]:slots["u_ddot"][1]]
    return out


def _constant(y):
    y = y.copy()

    def f(tau):
        tau = np.atleast_1d(tau)
        return np.repeat(y[:, None], tau.size, axis=1)

    return f


# Forward cumulant semigroup


def cumulant_Vt(model: Model, f, t: float, tol: float = RTOL) -> np.ndarray:
    """``V_t f``: solution of ``dV/dt = L V - Psi0(V)`` from ``V_0 = f``."""
    f = as_vector(model, f)
    if np.any(f < 0):
        raise ValueError("f must be nonnegative")
    if not t > 0:
        if t == 0:
            return f
        raise ValueError(f"t must be nonnegative, got {t}")
    rhs = _rhs_factory(model, 0, track=False)
    sol = _solve_ivp(rhs, (0.0, t), f, rtol=tol, atol=tol * 1e-2, dense=False)
    return np.maximum(sol.y[:, -1], 0.0)


def _reciprocal_rhs(model: Model):
    # w = 1/V turns the singular initial layer of V_t(theta 1) into a regular flow.
    L = model.L
    mech = model.mech
    Ld = np.diag(L).copy()
    Loff = L - np.diag(Ld)
    y = mech.y
    p = mech.p
    alpha = mech.alpha

    def rhs(t, w):
        cross = (Loff @ (1.0 / w)) * w * w
        x = y / w[:, None]
        jumps = np.sum(p * (w[:, None] ** 2 * np.expm1(-x) + y * w[:, None]), axis=1)
        return -Ld * w - cross + alpha + jumps

    return rhs


def extinction_path(model: Model, times: Sequence[float], tol: float = 1e-8,
                    theta0: float = 64.0, max_doublings: int = 40) -> np.ndarray:
    """``v_t`` on several times; shape ``(len(times), n)``.

    ``V_t(theta 1)`` is computed for doubling ``theta``.  Since it approaches
    the limit at rate ``O(1/theta)``, successive pairs are Richardson
    extrapolated; iteration stops once the sup-norm relative change of the
    extrapolated values drops below ``tol``.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times <= 0):
        raise ValueError("extinction times must be positive")
    order = np.argsort(times)
    ts = times[order]
    rhs = _reciprocal_rhs(model)
    n = model.n
    prev = None
    prev_rich = None
    theta = theta0
    for _ in range(max_doublings + 1):
        w0 = np.full(n, 1.0 / theta)
        sol = solve_ivp(rhs, (0.0, ts[-1]), w0, method="RK45", rtol=min(tol, 1e-8) * 1e-2,
                        atol=1e-300, t_eval=ts)
        if sol.status != 0 or np.any(sol.y <= 0) or not np.all(np.isfinite(sol.y)):
            raise ExtinctionError(f"reciprocal extinction flow failed at theta = {theta:.3g}")
        v = 1.0 / sol.y.T
        if prev is not None:
            rich = 2.0 * v - prev
            if prev_rich is not None and np.max(np.abs(rich - prev_rich) / np.abs(rich)) < tol:
                out = np.empty_like(rich)
                out[order] = rich
                return out
            prev_rich = rich
        prev = v
        theta *= 2.0
    raise ExtinctionError(
        f"v_t did not converge after {max_doublings} doublings of theta; extinction condition fails"
    )


def extinction_v(model: Model, t: float, tol: float = 1e-8) -> np.ndarray:
    """``v_t(x) = -log P_{delta_x}(X_t = 0)``."""
    return extinction_path(model, [t], tol=tol)[0]


def survival_prob(model: Model, mu, t: float) -> float:
    mu = as_vector(model, mu, "mu")
    return float(-np.expm1(-mu @ extinction_v(model, t)))


# Occupation equation and its variations


def occupation_u(model: Model, kf: TestFunctional, grid_step: float | None = None,
                 rtol: float = RTOL, atol: float = ATOL) -> CumulantSolution:
    """Solve for ``u_s`` with ``N_mu[1 - exp(-K^f)] = <mu, u_0>``."""
    return _backward(model, kf, order=0, grid_step=grid_step, rtol=rtol, atol=atol)


def _check_sol(sol: CumulantSolution | None, kf: TestFunctional):
    if sol is not None and abs(sol.T - kf.T) > 1e-12 * kf.T:
        raise ValueError(f"solution horizon {sol.T} does not match test functional horizon {kf.T}")


def first_variation(model: Model, kf: TestFunctional, g, sol: CumulantSolution | None = None,
                    mu=None, rtol: float = RTOL, atol: float = ATOL):
    """``u_dot`` and ``N_mu[w_T(g) exp(-K^f)] = <mu, u_dot_0>``.

    Returns ``(solution, value)``; ``value`` is the per-site vector when ``mu``
    is None.
    """
    _check_sol(sol, kf)
    step = None if sol is None else _grid_step(sol)
    out = _backward(model, kf, g=g, order=1, grid_step=step, rtol=rtol, atol=atol)
    if sol is not None and out.grid.shape != sol.grid.shape:
        raise ValueError("grid mismatch with supplied solution")
    value = out.u_dot[0] if mu is None else float(as_vector(model, mu, "mu") @ out.u_dot[0])
    return out, value


def second_variation(model: Model, kf: TestFunctional, g, sol: CumulantSolution | None = None,
                     mu=None, rtol: float = RTOL, atol: float = ATOL):
    """``N_mu[w_T(g)**2 exp(-K^f)] = -<mu, u_ddot_0>``."""
    _check_sol(sol, kf)
    if sol is not None and sol.u_dot is None:
        raise ValueError("second_variation needs a solution with u_dot (run first_variation)")
    step = None if sol is None else _grid_step(sol)
    out = _backward(model, kf, g=g, order=2, grid_step=step, rtol=rtol, atol=atol)
    vec = -out.u_ddot[0]
    return vec if mu is None else float(as_vector(model, mu, "mu") @ vec)


def _grid_step(sol: CumulantSolution) -> float:
    return float(np.max(np.diff(sol.grid))) if sol.grid.size > 1 else sol.T


# Second moments


def _diag_selector(n: int) -> np.ndarray:
    P = np.zeros((n, n * n))
    for i in range(n):
        P[i, i * n + i] = 1.0
    return P


def moment_second(model: Model, mu, t: float, g, f) -> float:
    """``P_mu[X_t(g) X_t(f)]``.

    The variance term ``int_0^t <mu S_s, A (S_{t-s} g)(S_{t-s} f)> ds`` is
    evaluated exactly as a block of one matrix exponential (Van Loan), with
    the product of two semigroups carried by the Kronecker sum ``L (+) L``.
    """
    mu = as_vector(model, mu, "mu")
    g = as_vector(model, g, "g")
    f = as_vector(model, f, "f")
    if not t >= 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    n = model.n
    L = model.L
    I = np.eye(n)
    K = np.kron(L, I) + np.kron(I, L)
    M = np.zeros((n + n * n, n + n * n))
    M[:n, :n] = L
    M[:n, n:] = np.diag(model.mech.A) @ _diag_selector(n)
    M[n:, n:] = K
    E = expm(t * M)
    S = E[:n, :n]
    var = E[:n, n:] @ np.kron(g, f)
    return float((mu @ S @ g) * (mu @ S @ f) + mu @ var)


def moment_second_spine_form(model: Model, mu, t: float, g, f, epsrel: float = 1e-12) -> float:
    """Same moment through the phi-spine representation, by adaptive quadrature.

    ``<mu,S_t g><mu,S_t f> + <mu,phi> E^{spine}_{mu phi}[(g/phi)(xi_t) int_0^t (A S_{t-s} f)(xi_s) ds]``
    """
    mu = as_vector(model, mu, "mu")
    g = as_vector(model, g, "g")
    f = as_vector(model, f, "f")
    sd = principal_triple(model)
    phi = sd.phi
    A = model.mech.A
    start = mu * phi  # unnormalised <mu, phi> * initial law of the spine
    Qd = spine_generator(model)
    L = model.L

    def integrand(s):
        inner = A * (expm((t - s) * L) @ f)
        tail = expm((t - s) * Qd) @ (g / phi)
        return start @ expm(s * Qd) @ (inner * tail)

    if t == 0:
        var = 0.0
    else:
        var, _ = quad_vec(integrand, 0.0, t, epsabs=0.0, epsrel=epsrel, limit=20000)
    S = semigroup_matrix(model, t)
    return float((mu @ S @ g) * (mu @ S @ f) + var)
