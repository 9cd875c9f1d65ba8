"""Finite-space superprocess models.

A model is a spatial motion (an irreducible rate matrix with optional killing)
on ``n`` labelled sites, a reference measure ``m`` and a branching mechanism

    Psi(x, z) = -beta(x) z + alpha(x) z**2 + sum_i p_i(x) (exp(-z y_i) - 1 + z y_i)

with finitely many jump atoms per site.  All mechanism functionals are
vectorised over sites: a ``z`` array whose last axis has length ``n``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

__all__ = [
    "ModelError",
    "StateSpace",
    "RateMatrix",
    "BranchingMechanism",
    "Model",
    "Check",
    "ValidationReport",
    "MechanismValues",
    "validate_model",
    "mechanism_eval",
    "load_model",
    "model_from_dict",
    "model_to_dict",
    "fixture",
]


class ModelError(ValueError):
    """Raised for structurally invalid models; ``field`` names the offender."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StateSpace:
    labels: tuple[str, ...]
    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))
        object.__setattr__(self, "m", _frozen(self.m))
        if len(self.labels) == 0:
            raise ModelError("state space is empty", "space.labels")
        if self.m.shape != (len(self.labels),):
            raise ModelError(
                f"space.m has shape {self.m.shape}, expected ({len(self.labels)},)",
                "space.m",
            )
        for i, w in enumerate(self.m):
            if not (np.isfinite(w) and w > 0):
                raise ModelError(f"space.m[{i}] = {w} must be positive and finite", f"space.m[{i}]")

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class RateMatrix:
    """Off-diagonal rates ``q`` plus killing; the diagonal is recomputed."""

    q: np.ndarray
    kill: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ModelError(f"motion.q must be square, got shape {q.shape}", "motion.q")
        n = q.shape[0]
        kill = np.zeros(n) if self.kill is None else np.array(self.kill, dtype=float)
        if kill.shape != (n,):
            raise ModelError(f"motion.kill has shape {kill.shape}, expected ({n},)", "motion.kill")
        for i in range(n):
            if not (np.isfinite(kill[i]) and kill[i] >= 0):
                raise ModelError(f"motion.kill[{i}] = {kill[i]} must be nonnegative", f"motion.kill[{i}]")
            for j in range(n):
                if i != j and not (np.isfinite(q[i, j]) and q[i, j] >= 0):
                    raise ModelError(
                        f"motion.q[{i}][{j}] = {q[i, j]} is a negative or non-finite rate",
                        f"motion.q[{i}][{j}]",
                    )
        np.fill_diagonal(q, 0.0)
        q[np.diag_indices(n)] = -(q.sum(axis=1) + kill)
        object.__setattr__(self, "q", _frozen(q))
        object.__setattr__(self, "kill", _frozen(kill))

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def irreducible(self) -> bool:
        n = self.n
        adj = (self.q > 0) & ~np.eye(n, dtype=bool)
        reach = np.eye(n, dtype=bool) | adj
        for _ in range(n):
            reach = reach | ((reach.astype(int) @ reach.astype(int)) > 0)
        return bool(reach.all())


@dataclass(frozen=True)
class BranchingMechanism:
    """Per-site ``beta``, ``alpha`` and jump atoms ``pi[x] = [(y, p), ...]``.

    Atoms are also kept as padded ``(n, k)`` arrays ``y`` and ``p`` (padding has
    ``p = 0``) so every functional is a vectorised sum.
    """

    beta: np.ndarray
    alpha: np.ndarray
    pi: tuple[tuple[tuple[float, float], ...], ...]
    y: np.ndarray = field(init=False, repr=False, compare=False)
    p: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        beta = _frozen(self.beta)
        alpha = _frozen(self.alpha)
        n = beta.shape[0]
        if beta.ndim != 1 or alpha.shape != (n,):
            raise ModelError("mechanism.beta and mechanism.alpha must be length-n vectors", "mechanism.alpha")
        if not np.all(np.isfinite(beta)):
            raise ModelError("mechanism.beta must be finite", "mechanism.beta")
        for i, a in enumerate(alpha):
            if not (np.isfinite(a) and a >= 0):
                raise ModelError(f"mechanism.alpha[{i}] = {a} must be nonnegative", f"mechanism.alpha[{i}]")
        pi = self.pi if self.pi is not None else [[] for _ in range(n)]
        if len(pi) != n:
            raise ModelError(f"mechanism.pi has {len(pi)} sites, expected {n}", "mechanism.pi")
        atoms: list[tuple[tuple[float, float], ...]] = []
        for i, site in enumerate(pi):
            row = []
            for k, atom in enumerate(site):
                if isinstance(atom, dict):
                    yk, pk = float(atom["y"]), float(atom["p"])
                else:
                    yk, pk = float(atom[0]), float(atom[1])
                if not (np.isfinite(yk) and yk > 0):
                    raise ModelError(f"mechanism.pi[{i}][{k}].y = {yk} must be positive", f"mechanism.pi[{i}][{k}].y")
                if not (np.isfinite(pk) and pk >= 0):
                    raise ModelError(f"mechanism.pi[{i}][{k}].p = {pk} must be nonnegative", f"mechanism.pi[{i}][{k}].p")
                row.append((yk, pk))
            atoms.append(tuple(row))
        k = max([len(r) for r in atoms] + [1])
        y = np.ones((n, k))
        p = np.zeros((n, k))
        for i, row in enumerate(atoms):
            for j, (yk, pk) in enumerate(row):
                y[i, j], p[i, j] = yk, pk
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "pi", tuple(atoms))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "p", _frozen(p))

    @property
    def n(self) -> int:
        return self.beta.shape[0]

    @property
    def A(self) -> np.ndarray:
        """Local second-moment rate ``2 alpha + sum y**2 p``."""
        return 2.0 * self.alpha + np.sum(self.y**2 * self.p, axis=1)

    @property
    def jump_mean(self) -> np.ndarray:
        """``sum y p`` per site, the compensator rate of the jump part."""
        return np.sum(self.y * self.p, axis=1)

    def nondegenerate(self) -> bool:
        return bool(np.any(self.alpha > 0) or np.any(self.p > 0))

    # Vectorised functionals.  ``z`` has trailing axis of length n.

    def psi0(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        x = z[..., None] * self.y
        return self.alpha * z**2 + np.sum(self.p * _compensated_exp(x), axis=-1)

    def psi0_prime(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        x = z[..., None] * self.y
        return 2.0 * self.alpha * z + np.sum(self.p * self.y * -np.expm1(-x), axis=-1)

    def psi0_second(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        x = z[..., None] * self.y
        return 2.0 * self.alpha + np.sum(self.p * self.y**2 * np.exp(-x), axis=-1)

    def psi(self, z) -> np.ndarray:
        return -self.beta * np.asarray(z, dtype=float) + self.psi0(z)

    def psi_prime(self, z) -> np.ndarray:
        return -self.beta + self.psi0_prime(z)

    def remainder(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return self.psi0(z) - 0.5 * self.A * z**2

    def e_bound(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        cap = np.minimum(1.0, self.y * z[..., None] / 6.0)
        return np.sum(self.y**2 * cap * self.p, axis=-1)


def _compensated_exp(x: np.ndarray) -> np.ndarray:
    """``exp(-x) - 1 + x`` without cancellation for small ``x``."""
    x = np.asarray(x, dtype=float)
    out = np.expm1(-x) + x
    small = np.abs(x) < 1e-3
    if np.any(small):
        xs = x[small]
        out[small] = xs**2 * (0.5 - xs * (1.0 / 6.0 - xs * (1.0 / 24.0 - xs / 120.0)))
    return out


@dataclass(frozen=True)
class Model:
    space: StateSpace
    motion: RateMatrix
    mech: BranchingMechanism
    critical: bool = False
    name: str = ""

    def __post_init__(self):
        n = self.space.n
        if self.motion.n != n:
            raise ModelError(f"motion has {self.motion.n} sites, space has {n}", "motion.q")
        if self.mech.n != n:
            raise ModelError(f"mechanism has {self.mech.n} sites, space has {n}", "mechanism.beta")

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def m(self) -> np.ndarray:
        return self.space.m

    @property
    def L(self) -> np.ndarray:
        """Generator ``Q + diag(beta)`` of the mean semigroup."""
        return self.motion.q + np.diag(self.mech.beta)

    def with_beta(self, beta, critical: bool | None = None) -> "Model":
        mech = BranchingMechanism(beta=beta, alpha=self.mech.alpha, pi=self.mech.pi)
        return replace(self, mech=mech, critical=self.critical if critical is None else critical)


@dataclass
class Check:
    name: str
    passed: bool
    value: Any = None
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "value": c.value, "detail": c.detail}
                for c in self.checks
            ],
        }


GREY_BLOWUP = 1e12


def validate_model(model: Model, criticality_tol: float = 1e-10) -> ValidationReport:
    """Check the standing assumptions in their finite-space form."""
    from .spectral import principal_triple  # cyclic at import time
    from .cumulant import ExtinctionError, extinction_v

    checks = [
        Check("irreducible_motion", model.motion.irreducible()),
        Check("psi0_nondegenerate", model.mech.nondegenerate()),
    ]

    if np.all(model.mech.alpha > 0):
        checks.append(Check("extinction_grey", True, None, "alpha > 0 at every site"))
    else:
        try:
            v1 = extinction_v(model, 1.0)
            ok = bool(np.all(np.isfinite(v1)) and np.max(v1) < GREY_BLOWUP)
            checks.append(Check("extinction_grey", ok, float(np.max(v1)), "max v_1 (numeric)"))
        except ExtinctionError as exc:
            checks.append(Check("extinction_grey", False, None, str(exc)))

    if checks[0].passed:
        sd = principal_triple(model)
        a_phi = model.mech.A * sd.phi
        checks.append(Check("A_phi_bounded", bool(np.all(np.isfinite(a_phi))), float(np.max(a_phi))))
        crit_ok = abs(sd.lam) <= criticality_tol if model.critical else True
        checks.append(
            Check("criticality", crit_ok, abs(sd.lam),
                  "|lambda| (flagged critical)" if model.critical else "|lambda| (not flagged critical)")
        )
    return ValidationReport(checks)


@dataclass(frozen=True)
class MechanismValues:
    psi: float
    psi0: float
    psi_prime: float
    psi0_prime: float
    psi0_second: float
    A: float
    R: float
    e_bound: float


def mechanism_eval(model: Model, x: int, z: float) -> MechanismValues:
    """All mechanism scalars at site index ``x`` (0-based) and ``z >= 0``."""
    if not z >= 0:
        raise ValueError(f"z must be nonnegative, got {z}")
    mech = model.mech
    zz = np.full(model.n, float(z))
    return MechanismValues(
        psi=float(mech.psi(zz)[x]),
        psi0=float(mech.psi0(zz)[x]),
        psi_prime=float(mech.psi_prime(zz)[x]),
        psi0_prime=float(mech.psi0_prime(zz)[x]),
        psi0_second=float(mech.psi0_second(zz)[x]),
        A=float(mech.A[x]),
        R=float(mech.remainder(zz)[x]),
        e_bound=float(mech.e_bound(zz)[x]),
    )


# JSON I/O


def model_from_dict(d: dict, name: str = "") -> Model:
    try:
        space = d["space"]
        motion = d["motion"]
        mech = d["mechanism"]
    except KeyError as exc:
        raise ModelError(f"missing top-level key {exc.args[0]!r}", str(exc.args[0])) from None
    m = space.get("m")
    labels = space.get("labels") or [str(i + 1) for i in range(len(m or []))]
    n = len(labels)
    model = Model(
        space=StateSpace(labels=labels, m=m if m is not None else []),
        motion=RateMatrix(q=motion["q"], kill=motion.get("kill", [0.0] * n)),
        mech=BranchingMechanism(
            beta=mech.get("beta", [0.0] * n),
            alpha=mech.get("alpha", [0.0] * n),
            pi=mech.get("pi", [[] for _ in range(n)]),
        ),
        critical=bool(d.get("critical", False)),
        name=name or d.get("name", ""),
    )
    if d.get("calibrate", False):
        from .spectral import calibrate_critical

        model = calibrate_critical(model)
    return model


def model_to_dict(model: Model) -> dict:
    return {
        "name": model.name,
        "space": {"labels": list(model.space.labels), "m": model.m.tolist()},
        "motion": {"q": model.motion.q.tolist(), "kill": model.motion.kill.tolist()},
        "mechanism": {
            "beta": model.mech.beta.tolist(),
            "alpha": model.mech.alpha.tolist(),
            "pi": [[{"y": y, "p": p} for (y, p) in site] for site in model.mech.pi],
        },
        "critical": model.critical,
    }


def load_model(path: str | Path) -> Model:
    path = Path(path)
    with open(path) as fh:
        return model_from_dict(json.load(fh), name=path.stem)


def fixture(name: str) -> Model:
    """Shipped test models ``"M1"``, ``"M2"`` and ``"M3"`` (M3 is calibrated)."""
    fname = f"{name.lower()}.json"
    with resources.files("critspine.data").joinpath(fname).open() as fh:
        return model_from_dict(json.load(fh), name=name.upper())


def site_index(model: Model, site: int | str) -> int:
    """Resolve a label or 0-based index."""
    if isinstance(site, str):
        if site in model.space.labels:
            return model.space.labels.index(site)
        raise KeyError(f"unknown site label {site!r}")
    if not 0 <= site < model.n:
        raise IndexError(f"site index {site} out of range")
    return int(site)


def as_vector(model: Model, f: Sequence[float] | float, name: str = "f") -> np.ndarray:
    arr = np.broadcast_to(np.asarray(f, dtype=float), (model.n,)).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def inner_m(model: Model, f, g) -> float:
    """``<f, g>_m``."""
    return float(math.fsum(np.asarray(f) * np.asarray(g) * model.m))
