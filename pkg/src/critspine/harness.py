"""Experiment runner: configuration, seeded block-parallel Monte Carlo, reports.

Monte Carlo work is cut into fixed-size blocks.  Block ``b`` of stream ``s``
draws from a Philox generator keyed by ``(seed, s, b)``, so the samples do not
depend on how many workers run the blocks.  Per-block sufficient statistics
are merged in block order with compensated summation.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import kstest

from . import __version__
from . import cumulant as cm
from . import limits as lm
from . import prm
from .model import Model, ModelError, fixture, load_model, validate_model
from .pathsim import SimConfig, simulate_batch
from .spectral import principal_triple, semigroup_matrix
from .spine import (immigration_bias_laplace, sample_phi_chain, sample_spine_gT, sample_two_spine,
                    spine_conditional_laplace, two_spine_conditional_laplace, SpineImmigration)

__all__ = [
    "KINDS",
    "ConfigError",
    "Experiment",
    "RunReport",
    "Moments",
    "block_rng",
    "run_blocks",
    "run_experiment",
    "emit_report",
    "EXIT_PASS",
    "EXIT_FAIL",
    "EXIT_INCONCLUSIVE",
    "EXIT_CONFIG",
]

KINDS = ("validate", "spectral", "oracle", "simulate", "prm-check", "spine-check", "two-spine-check", "limits")
EXIT_PASS, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_CONFIG = 0, 1, 2, 3
BLOCK = 1000


class ConfigError(ValueError):
    pass


# Random streams and merging


def block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, block])))


@dataclass(frozen=True)
class Moments:
    count: int
    total: float
    total_sq: float

    @classmethod
    def of(cls, values) -> "Moments":
        v = np.asarray(values, dtype=float).ravel()
        return cls(v.size, math.fsum(v), math.fsum(v * v))

    @classmethod
    def merge(cls, parts) -> "Moments":
        parts = list(parts)
        return cls(sum(p.count for p in parts), math.fsum(p.total for p in parts),
                   math.fsum(p.total_sq for p in parts))

    @property
    def mean(self) -> float:
        return self.total / self.count

    @property
    def var(self) -> float:
        if self.count < 2:
            return float("nan")
        return max(self.total_sq - self.total * self.total / self.count, 0.0) / (self.count - 1)

    @property
    def se(self) -> float:
        return math.sqrt(self.var / self.count)


def _run_block(task, seed, stream, n, block, b):
    size = min(block, n - b * block)
    out = task(block_rng(seed, stream, b), size)
    return {k: np.asarray(v) for k, v in out.items()}


def run_blocks(task: Callable[[np.random.Generator, int], dict], n: int, seed: int, stream: int = 0,
               batch: int = 1, block: int = BLOCK) -> list[dict]:
    """Run ``task(rng, size)`` over ``ceil(n / block)`` blocks; results in block order."""
    nb = -(-n // block)
    job = partial(_run_block, task, seed, stream, n, block)
    if batch > 1 and nb > 1:
        with ProcessPoolExecutor(max_workers=batch) as ex:
            return list(ex.map(job, range(nb)))
    return [job(b) for b in range(nb)]


def moments(blocks: list[dict], key: str) -> Moments:
    return Moments.merge(Moments.of(b[key]) for b in blocks)


def concat(blocks: list[dict], key: str) -> np.ndarray:
    return np.concatenate([b[key] for b in blocks])


# Experiment and report


@dataclass
class Experiment:
    kind: str
    model: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    batch: int = 1
    out: str | None = None
    base: Path | None = None  # directory for relative model paths

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "Experiment":
        try:
            return cls(kind=d["kind"], model=d["model"], params=d.get("params", {}),
                       seed=int(d.get("seed", 0)), batch=int(d.get("batch", 1)), out=d.get("out"), base=base)
        except KeyError as exc:
            raise ConfigError(f"experiment is missing {exc.args[0]!r}") from None

    @classmethod
    def from_file(cls, path) -> "Experiment":
        path = Path(path)
        with open(path) as fh:
            return cls.from_dict(json.load(fh), base=path.parent)

    def echo(self) -> dict:
        return {"kind": self.kind, "model": self.model, "params": self.params,
                "seed": self.seed, "batch": self.batch, "out": self.out}


@dataclass
class RunReport:
    experiment: dict
    model_hash: str
    results: list
    status: str
    wall_time: float
    seed: int
    version: str = __version__
    paths: list | None = None

    def to_dict(self) -> dict:
        d = {"experiment": self.experiment, "model_hash": self.model_hash, "status": self.status,
             "results": self.results, "wall_time": self.wall_time, "seed": self.seed, "version": self.version}
        if self.paths is not None:
            d["paths"] = self.paths
        return d

    @property
    def exit_code(self) -> int:
        return {"pass": EXIT_PASS, "fail": EXIT_FAIL, "inconclusive": EXIT_INCONCLUSIVE}[self.status]


def _git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def resolve_model(ref: str, base: Path | None = None) -> tuple[Model, str]:
    """Load ``fixture:NAME`` or a JSON path; returns the model and its content hash."""
    if ref.startswith("fixture:"):
        from importlib import resources

        name = ref.split(":", 1)[1]
        res = resources.files("critspine.data").joinpath(f"{name.lower()}.json")
        if not res.is_file():
            raise ConfigError(f"unknown fixture {name!r}")
        return fixture(name), _git_blob_hash(res.read_bytes())
    path = Path(ref)
    if not path.is_absolute() and base is not None and not path.exists():
        path = base / path
    if not path.exists():
        raise ConfigError(f"model file {ref!r} not found")
    return load_model(path), _git_blob_hash(path.read_bytes())


def _vec(model: Model, v, name="vector") -> np.ndarray:
    if isinstance(v, str):
        if v == "phi":
            return principal_triple(model).phi
        if v == "ones":
            return np.ones(model.n)
        raise ConfigError(f"unknown vector shorthand {v!r} for {name}")
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = np.full(model.n, float(arr))
    if arr.shape != (model.n,):
        raise ConfigError(f"{name} must have {model.n} entries")
    return arr


def _kf(model: Model, T: float, atoms) -> cm.TestFunctional:
    return cm.TestFunctional(float(T), tuple((float(a["t"]), _vec(model, a["f"], "atom f")) for a in atoms or []))


def _close(value, expected, rtol=0.0, atol=0.0) -> bool:
    value = np.asarray(value, dtype=float)
    expected = np.asarray(expected, dtype=float)
    return bool(np.all(np.abs(value - expected) <= atol + rtol * np.abs(expected)))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


# Handlers: each returns a list of result dicts with a "pass" entry (True, False or None).


def _h_validate(model, exp, ctx):
    rep = validate_model(model)
    return [{"check": c.name, "value": c.value, "detail": c.detail, "pass": c.passed} for c in rep.checks]


def _h_spectral(model, exp, ctx):
    sd = principal_triple(model)
    return [{"check": "spectral", **sd.to_dict(), "pass": None}]


def _oracle_value(model: Model, case: dict):
    q = case["quantity"]
    if q == "V":
        return cm.cumulant_Vt(model, _vec(model, case["f"]), float(case["t"]))
    if q == "v":
        return cm.extinction_path(model, np.atleast_1d(case["t"]))
    if q == "survival":
        return cm.survival_prob(model, _vec(model, case["mu"]), float(case["t"]))
    if q == "u0":
        sol = cm.occupation_u(model, _kf(model, case["T"], case.get("atoms")))
        return float(_vec(model, case["mu"]) @ sol.u0)
    if q == "first_variation":
        kf = _kf(model, case["T"], case.get("atoms"))
        return cm.first_variation(model, kf, _vec(model, case["g"]), mu=_vec(model, case["mu"]))[1]
    if q == "second_variation":
        kf = _kf(model, case["T"], case.get("atoms"))
        return cm.second_variation(model, kf, _vec(model, case["g"]), mu=_vec(model, case["mu"]))
    if q == "moment_second":
        return cm.moment_second(model, _vec(model, case["mu"]), float(case["t"]),
                                _vec(model, case["g"]), _vec(model, case["f"]))
    if q == "moment_second_forms":
        args = (model, _vec(model, case["mu"]), float(case["t"]), _vec(model, case["g"]), _vec(model, case["f"]))
        return np.array([cm.moment_second(*args), cm.moment_second_spine_form(*args)])
    raise ConfigError(f"unknown oracle quantity {q!r}")


def _h_oracle(model, exp, ctx):
    out = []
    for case in ctx.cases:
        m = ctx.case_model(case)
        t0 = time.perf_counter()
        value = _oracle_value(m, case)
        elapsed = time.perf_counter() - t0
        res = {"check": case.get("name", case["quantity"]), "value": value, "wall_time": elapsed}
        ok = None
        if case["quantity"] == "moment_second_forms":
            rel = abs(value[0] - value[1]) / abs(value[0])
            res.update({"rel_error": rel})
            ok = rel <= case.get("rtol", 1e-8)
        elif "expected" in case:
            res["target"] = case["expected"]
            res["error"] = np.abs(np.asarray(value, dtype=float) - np.asarray(case["expected"], dtype=float))
            ok = _close(value, case["expected"], case.get("rtol", 0.0), case.get("atol", 0.0))
        if "max_wall_time" in case:
            ok = (ok is not False) and elapsed < case["max_wall_time"]
        res["pass"] = ok
        out.append(res)
    return out


def _task_second_moment(model, mu, T, cfg, g, f, rng, size):
    res = simulate_batch(model, mu, T, cfg, rng, size=size)
    term = res.terminal
    return {"prod": (term @ g) * (term @ f), "mean_g": term @ g, "extinct": (term.sum(axis=1) == 0).astype(float)}


def _task_paths(model, mu, T, cfg, rng, size):
    res = simulate_batch(model, mu, T, cfg, rng, size=size)
    return {"terminal": res.terminal, "extinct_at": res.extinct_at}


def _h_simulate(model, exp, ctx):
    out = []
    for i, case in enumerate(ctx.cases):
        m = ctx.case_model(case)
        mu = _vec(m, case["mu"], "mu")
        T = float(case["T"])
        dt = float(case.get("dt", 1e-3))
        n = int(case["n_paths"])
        scheme = case.get("scheme", "split")
        try:
            cfg = SimConfig(dt=dt, scheme=scheme)
            coarse_cfg = SimConfig(dt=2 * dt, scheme=scheme)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        mode = case.get("mode", "paths")
        if mode == "paths":
            blocks = run_blocks(partial(_task_paths, m, mu, T, cfg), n, exp.seed, stream=i, batch=exp.batch)
            term = concat(blocks, "terminal")
            ext = concat(blocks, "extinct_at")
            ctx.paths = [{"path_id": k, "extinct_at": None if np.isnan(e) else float(e),
                          **{f"mass_{j + 1}": float(x) for j, x in enumerate(row)}}
                         for k, (row, e) in enumerate(zip(term, ext))]
            out.append({"check": "paths", "n_paths": n, "mean_terminal": term.mean(axis=0),
                        "extinct_fraction": float(np.mean(~np.isnan(ext))), "pass": None})
        elif mode == "second_moment":
            g = _vec(m, case.get("g", "phi"))
            f = _vec(m, case.get("f", "phi"))
            fine = run_blocks(partial(_task_second_moment, m, mu, T, cfg, g, f), n, exp.seed, stream=2 * i,
                              batch=exp.batch)
            coarse = run_blocks(partial(_task_second_moment, m, mu, T, coarse_cfg, g, f), n, exp.seed,
                                stream=2 * i + 1, batch=exp.batch)
            a, b = moments(fine, "prod"), moments(coarse, "prod")
            oracle = cm.moment_second(m, mu, T, g, f)
            # Weak error is O(dt): the dt-halving difference estimates the bias at dt, counted
            # only where it is resolved above the Monte Carlo noise of the difference.
            diff_se = math.hypot(a.se, b.se)
            budget = max(0.0, abs(a.mean - b.mean) - 3.0 * diff_se)
            z = (a.mean - oracle) / a.se
            ok = abs(a.mean - oracle) <= 3.0 * a.se + budget
            out.append({"check": case.get("name", "second_moment"), "value": a.mean, "se": a.se,
                        "target": oracle, "error": abs(a.mean - oracle), "z": z, "coarse_value": b.mean,
                        "coarse_se": b.se, "bias_budget": budget, "n_paths": n, "dt": dt, "scheme": scheme, "pass": ok})
        else:
            raise ConfigError(f"unknown simulate mode {mode!r}")
    return out


def _task_prm_tv(N, F, rng, size):
    counts, _ = prm.sample_size_biased_counts(N, F, size, rng)
    return {"counts": counts}


def _h_prm(model, exp, ctx):
    p = exp.params
    N = prm.FiniteMeasure.from_dict(p.get("weights", {"a": 2.0, "b": 3.0}))
    F = N.values(p.get("F", [1.0, 2.0]))
    f = N.values(p.get("f", [1.0, 0.5]))
    g = N.values(p.get("g", [0.3, 1.7]))
    rtol = p.get("rtol", 1e-10)
    out = []
    t0 = time.perf_counter()
    lhs = prm.brute_force_expectation(N, lambda c: (c @ F) * np.exp(-(c @ f)))
    rhs = prm.laplace_exact(N, f) * N.integrate(F * np.exp(-f))
    out.append({"check": "size_biased_identity", "value": lhs, "target": rhs,
                "error": abs(lhs - rhs) / abs(rhs), "pass": abs(lhs - rhs) <= rtol * abs(rhs)})
    lhs = prm.brute_force_expectation(N, lambda c: (c @ g) * (c @ f))
    rhs = N.integrate(g) * N.integrate(f) + N.integrate(g * f)
    out.append({"check": "second_moment_identity", "value": lhs, "target": rhs,
                "error": abs(lhs - rhs) / abs(rhs), "pass": abs(lhs - rhs) <= rtol * abs(rhs)})
    lhs = prm.brute_force_expectation(N, lambda c: np.exp(-(c @ f)))
    rhs = prm.laplace_exact(N, f)
    out.append({"check": "campbell", "value": lhs, "target": rhs,
                "error": abs(lhs - rhs) / abs(rhs), "pass": abs(lhs - rhs) <= rtol * abs(rhs)})
    n = int(p.get("n_samples", 100000))
    blocks = run_blocks(partial(_task_prm_tv, N, F), n, exp.seed, stream=0, batch=exp.batch, block=10000)
    counts = concat(blocks, "counts")
    grid, law = prm.size_biased_law(N, F)
    tv = prm.tv_distance(counts, grid, law)
    tv_max = p.get("tv_max", 0.01)
    elapsed = time.perf_counter() - t0
    out.append({"check": "size_biased_tv", "value": tv, "target": 0.0, "error": tv, "n_samples": n,
                "tv_max": tv_max, "pass": tv <= tv_max})
    if "max_wall_time" in p:
        out.append({"check": "runtime", "value": elapsed, "target": p["max_wall_time"],
                    "pass": elapsed < p["max_wall_time"]})
    return out


def _within_3se(est: Moments, oracle: float) -> bool:
    # A degenerate estimator (one-site spines) has zero spread and must then be exact.
    return abs(est.mean - oracle) <= 3.0 * est.se + 1e-9 * abs(oracle)


def _z(est: Moments, oracle: float):
    return (est.mean - oracle) / est.se if est.se > 0 else None


def _task_spine(model, mu, g, kf, rng, size):
    sol = cm.occupation_u(model, kf)
    sp = sample_spine_gT(model, mu, g, kf.T, rng, size=size)
    return {"value": spine_conditional_laplace(model, sp, kf, sol)}


def _task_full_path(model, mu, kf, eps, dt, rng, size):
    sd = principal_triple(model)
    phi = sd.phi
    T = kf.T
    record = [t for t, _ in kf.atoms]
    cfg = SimConfig(dt=dt, eps_excursion=eps)
    start = rng.choice(model.n, size=size, p=mu * phi / np.sum(mu * phi))
    sp = sample_phi_chain(model, start, np.zeros(size), T, rng)
    src = SpineImmigration(model, [sp], eps)
    Z = simulate_batch(model, mu, T, cfg, rng, size=size, record=record, source=src)
    X = simulate_batch(model, mu, T, cfg, rng, size=size, record=record)
    weight = X.terminal @ phi / float(mu @ phi)
    return {"spine": np.exp(-kf.evaluate(Z.grid, Z.mass)),
            "weighted": weight * np.exp(-kf.evaluate(X.grid, X.mass))}


def _h_spine(model, exp, ctx):
    out = []
    for i, case in enumerate(ctx.cases):
        m = ctx.case_model(case)
        mu = _vec(m, case["mu"], "mu")
        kf = _kf(m, case["T"], case.get("atoms"))
        t0 = time.perf_counter()
        if case.get("mode", "semi_analytic") == "full_path":
            out.append(_full_path_case(m, mu, kf, case, exp, i))
            continue
        g = _vec(m, case.get("g", "phi"), "g")
        n = int(case.get("n_spines", 10000))
        blocks = run_blocks(partial(_task_spine, m, mu, g, kf), n, exp.seed, stream=i, batch=exp.batch)
        est = moments(blocks, "value")
        fv = cm.first_variation(m, kf, g, mu=mu)[1]
        oracle = fv / float(mu @ semigroup_matrix(m, kf.T) @ g)
        elapsed = time.perf_counter() - t0
        ok = _within_3se(est, oracle)
        if "max_wall_time" in case:
            ok = ok and elapsed < case["max_wall_time"]
        out.append({"check": case.get("name", f"spine_{i}"), "model": m.name, "value": est.mean, "se": est.se,
                    "target": oracle, "error": abs(est.mean - oracle), "z": _z(est, oracle),
                    "n": n, "wall_time": elapsed, "pass": ok})
    return out


def _full_path_case(m, mu, kf, case, exp, i):
    eps_list = case.get("eps", [1e-2, 5e-3])
    dt = float(case.get("dt", 1e-3))
    n = int(case.get("n_paths", 100000))
    rows = []
    for j, eps in enumerate(eps_list):
        blocks = run_blocks(partial(_task_full_path, m, mu, kf, eps, dt), n, exp.seed, stream=100 * i + j,
                            batch=exp.batch)
        a, b = moments(blocks, "spine"), moments(blocks, "weighted")
        se = math.hypot(a.se, b.se)
        rows.append({"eps": eps, "spine_side": a.mean, "weighted_side": b.mean,
                     "discrepancy": a.mean - b.mean, "se": se, "z": (a.mean - b.mean) / se})
    # Bias of the eps device for the immigration, exact given the spine (quadrature).
    sol = cm.occupation_u(m, kf)
    rng = block_rng(exp.seed, 100 * i + 99, 0)
    phi = principal_triple(m).phi
    start = rng.choice(m.n, size=200, p=mu * phi / np.sum(mu * phi))
    sp = sample_phi_chain(m, start, np.zeros(200), kf.T, rng)
    exact = spine_conditional_laplace(m, sp, kf, sol).mean()
    for r in rows:
        r["device_bias"] = float(abs(immigration_bias_laplace(m, sp, sol, r["eps"]).mean() - exact))
    within = all(abs(r["z"]) <= 3.0 for r in rows)
    shrinking = all(rows[k + 1]["device_bias"] < rows[k]["device_bias"] for k in range(len(rows) - 1))
    return {"check": case.get("name", "full_path"), "model": m.name, "value": rows[0]["discrepancy"],
            "se": rows[0]["se"], "target": 0.0, "error": abs(rows[0]["discrepancy"]), "eps_runs": rows,
            "within_3se": within, "device_bias_shrinking": shrinking, "n_paths": n, "dt": dt,
            "pass": within and shrinking}


def _task_two_spine(model, mu, kf, importance, rng, size):
    sol = cm.occupation_u(model, kf)
    sk = sample_two_spine(model, mu, kf.T, rng, size=size, importance=importance)
    return {"value": two_spine_conditional_laplace(model, sk, kf, sol) * sk.weight, "kappa": sk.kappa}


def _h_two_spine(model, exp, ctx):
    out = []
    for i, case in enumerate(ctx.cases):
        m = ctx.case_model(case)
        mu = _vec(m, case["mu"], "mu")
        kf = _kf(m, case["T"], case.get("atoms"))
        n = int(case.get("n", 10000))
        t0 = time.perf_counter()
        blocks = run_blocks(partial(_task_two_spine, m, mu, kf, bool(case.get("importance", False))), n,
                            exp.seed, stream=i, batch=exp.batch)
        est = moments(blocks, "value")
        phi = principal_triple(m).phi
        oracle = cm.second_variation(m, kf, phi, mu=mu) / cm.second_variation(m, cm.TestFunctional(kf.T), phi, mu=mu)
        elapsed = time.perf_counter() - t0
        ok = _within_3se(est, oracle)
        res = {"check": case.get("name", f"two_spine_{i}"), "model": m.name, "value": est.mean, "se": est.se,
               "target": oracle, "error": abs(est.mean - oracle), "z": _z(est, oracle),
               "n": n, "wall_time": elapsed}
        if case.get("ks_kappa", False):
            p = float(kstest(concat(blocks, "kappa") / kf.T, "uniform").pvalue)
            res["kappa_ks_pvalue"] = p
            ok = ok and p >= 0.01
        if "max_wall_time" in case:
            ok = ok and elapsed < case["max_wall_time"]
        res["pass"] = ok
        out.append(res)
    return out


def _limit_result(rep: lm.LimitReport, case: dict) -> dict:
    d = rep.to_dict()
    ok = rep.passed
    if "tol_abs" in case:
        ok = bool(np.all(rep.abs_error <= case["tol_abs"])) if case.get("all_t") else bool(
            rep.abs_error[-1] <= case["tol_abs"])
    if case.get("require_monotone"):
        ok = (ok is not False) and rep.monotone()
    if "derivative" in d:
        dtol = case.get("derivative_rtol", 1e-3)
        dok = all(x["rel_error"] <= dtol for x in d["derivative"])
        ok = (ok is not False) and dok
    if "expected" in case:
        idx = case.get("expected_index", -1)
        val = rep.values[idx]
        d["expected"] = case["expected"]
        d["expected_error"] = abs(val - case["expected"])
        ok = (ok is not False) and d["expected_error"] <= case.get("expected_atol", 0.0)
    return {"check": case.get("name", rep.name), "rows": list(rep.rows()), **d, "pass": ok}


def _h_limits(model, exp, ctx):
    out = []
    for i, case in enumerate(ctx.cases):
        m = ctx.case_model(case)
        check = case["check"]
        t0 = time.perf_counter()
        if check == "kolmogorov":
            rep = lm.kolmogorov_check(m, _vec(m, case["mu"]), case.get("t_grid"), tol=case.get("tol", 0.02))
        elif check == "uniform_ratio":
            rep = lm.uniform_ratio_check(m, case.get("t_grid"))
        elif check == "bt_slope":
            rep = lm.bt_slope_check(m, case.get("t_grid"), tol=case.get("tol", 0.02),
                                    deriv_times=case.get("deriv_times", (5.0, 50.0)))
        elif check == "yaglom_laplace":
            rep = lm.yaglom_laplace_check(m, _vec(m, case["mu"]), _vec(m, case.get("f", "phi")), float(case["t"]),
                                          case.get("theta_grid", (0.25, 0.5, 1.0, 2.0, 4.0)), tol=case.get("tol", 0.02))
        elif check == "spine_w":
            rep = lm.spine_w_check(m, _vec(m, case["mu"]), float(case["t"]),
                                   case.get("theta_grid", (0.5, 1.0, 2.0)), tol=case.get("tol", 0.02))
        elif check == "centered_vanish":
            rep = lm.centered_vanish_check(m, _vec(m, case["mu"]), _vec(m, case["f"]), case.get("t_grid"))
        elif check == "ergodic":
            Fv = _vec(m, case.get("F_site", "ones"))
            rep = lm.ergodic_check(m, lambda x, u: Fv[x] * u ** case.get("power", 1), case.get("t_grid"))
        elif check == "yaglom_mc_ks":
            rng = block_rng(exp.seed, i, 0)
            rec = lm.yaglom_mc_ks(m, _vec(m, case["mu"]), _vec(m, case.get("f", "ones")), float(case["t"]),
                                  int(case["n_sims"]), SimConfig(dt=case.get("dt", 1e-2)), rng,
                                  exact=case.get("exact"))
            elapsed = time.perf_counter() - t0
            ok = rec["pass"]
            if ok is not None and "ks_max" in case:
                ok = rec["ks_statistic"] <= case["ks_max"]
            if ok is not None and "max_wall_time" in case:
                ok = ok and elapsed < case["max_wall_time"]
            out.append({"check": case.get("name", check), "model": m.name, **rec, "wall_time": elapsed,
                        "value": rec["ks_statistic"], "target": case.get("ks_max", rec["threshold"]),
                        "pass": ok, "inconclusive": rec["inconclusive"]})
            continue
        else:
            raise ConfigError(f"unknown limits check {check!r}")
        res = _limit_result(rep, case)
        elapsed = time.perf_counter() - t0
        res["model"] = m.name
        res["wall_time"] = elapsed
        if "max_wall_time" in case:
            res["pass"] = (res["pass"] is not False) and elapsed < case["max_wall_time"]
        out.append(res)
    return out


HANDLERS = {
    "validate": _h_validate,
    "spectral": _h_spectral,
    "oracle": _h_oracle,
    "simulate": _h_simulate,
    "prm-check": _h_prm,
    "spine-check": _h_spine,
    "two-spine-check": _h_two_spine,
    "limits": _h_limits,
}


class _Context:
    def __init__(self, exp: Experiment, model: Model):
        self.exp = exp
        self.model = model
        self.paths = None
        p = exp.params
        self.cases = p.get("cases", [p])
        self._models = {}

    def case_model(self, case: dict) -> Model:
        ref = case.get("model")
        if ref is None:
            return self.model
        if ref not in self._models:
            self._models[ref] = resolve_model(ref, self.exp.base)[0]
        return self._models[ref]


def run_experiment(exp: Experiment) -> RunReport:
    if exp.kind not in KINDS:
        raise ConfigError(f"unknown kind {exp.kind!r}; expected one of {', '.join(KINDS)}")
    if exp.batch < 1:
        raise ConfigError("batch must be a positive integer")
    try:
        model, mhash = resolve_model(exp.model, exp.base)
    except ModelError as exc:
        raise ConfigError(f"model failed to load: {exc}") from exc
    if exp.kind != "validate":
        rep = validate_model(model)
        if not rep.passed:
            bad = [c.name for c in rep.checks if not c.passed]
            raise ConfigError(f"model validation failed: {', '.join(bad)}")
    ctx = _Context(exp, model)
    t0 = time.perf_counter()
    try:
        results = HANDLERS[exp.kind](model, exp, ctx)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad parameters for {exp.kind}: {exc!r}") from exc
    wall = time.perf_counter() - t0
    limit = exp.params.get("max_wall_time") if "cases" in exp.params else None
    if limit is not None:
        results.append({"check": "runtime", "value": wall, "target": limit, "pass": wall < limit})
    flags = [None if r.get("pass") is None else bool(r.get("pass")) for r in results]
    if any(f is False for f in flags):
        status = "fail"
    elif any(r.get("inconclusive") for r in results):
        status = "inconclusive"
    else:
        status = "pass"
    return RunReport(experiment=exp.echo(), model_hash=mhash, results=_jsonable(results), status=status,
                     wall_time=wall, seed=exp.seed, paths=ctx.paths)


CSV_COLUMNS = ["check", "t", "value", "target", "error", "pass"]


def report_rows(report: RunReport):
    for r in report.results:
        if r.get("rows"):
            for row in r["rows"]:
                yield {**row, "check": r.get("check", row["check"])}
        else:
            yield {"check": r.get("check"), "t": r.get("t") if not isinstance(r.get("t"), list) else None,
                   "value": r.get("value") if not isinstance(r.get("value"), list) else json.dumps(r.get("value")),
                   "target": r.get("target") if not isinstance(r.get("target"), list) else json.dumps(r.get("target")),
                   "error": r.get("error") if not isinstance(r.get("error"), list) else json.dumps(r.get("error")),
                   "pass": r.get("pass")}


def emit_report(report: RunReport, fmt: str = "json", out=None) -> str:
    """Serialise a report; written to ``out`` when given, returned either way."""
    if fmt == "json":
        text = json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        if report.paths is not None:
            cols = ["path_id", "extinct_at"] + [k for k in report.paths[0] if k.startswith("mass_")] if report.paths \
                else ["path_id", "extinct_at"]
            w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in report.paths:
                w.writerow({k: ("" if row[k] is None else row[k]) for k in cols})
        else:
            w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in report_rows(report):
                w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in CSV_COLUMNS})
        text = buf.getvalue()
    else:
        raise ConfigError(f"unknown format {fmt!r}")
    if out is not None:
        try:
            Path(out).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write report to {out}: {exc}") from exc
    return text
