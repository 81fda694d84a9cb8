"""Simulation designs, pseudo-true values, and the repeated-sampling harness."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from joblib import Parallel, delayed
from scipy.special import ndtr

from .basis import BasisSpec, ColumnPlan, build_basis, conditioning_plans, k_rule
from .data import Dataset
from .etel import log_etel_and_grad
from .marglik import MlConfig, compare_models
from .model import MomentModel, iv_model, linear_regression_model
from .posterior import LogPosterior, McmcConfig, StudentTPrior, maximize, moment_start, run_one_block

log = logging.getLogger(__name__)

DGP_KINDS = ("hetero_skew_normal", "iv_copula", "iv_copula_highdim_z", "iv_highdim_theta")

COPULA_CORR = np.array([[1.0, 0.7, 0.7],
                        [0.7, 1.0, 0.0],
                        [0.7, 0.0, 1.0]])
MIXTURE = ((0.5, 0.5, 0.5), (0.5, -0.5, 1.118))  # (weight, mean, sd)


# ------------------------------------------------------------ generators ---

def skew_normal_errors(x, rng) -> np.ndarray:
    """Mean-zero skew-normal errors with scale h(x) and shape s(x)."""
    h = np.sqrt(np.exp(1.0 + 0.7 * x + 0.2 * x ** 2))
    s = 1.0 + x ** 2
    delta = s / np.sqrt(1.0 + s ** 2)
    m = -h * np.sqrt(2.0 / np.pi) * delta
    u0 = rng.standard_normal(x.size)
    u1 = rng.standard_normal(x.size)
    return m + h * (delta * np.abs(u0) + np.sqrt(1.0 - delta ** 2) * u1)


def gen_example1(n: int, theta=(1.0, 1.0), seed: int = 0) -> Dataset:
    """Linear model with heteroskedastic skew-normal errors, X ~ U(-1, 2.5)."""
    if n < 10:
        raise ValueError("example 1 needs n >= 10")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 2.5, n)
    eps = skew_normal_errors(x, rng)
    y = theta[0] + theta[1] * x + eps
    return Dataset({"y": y, "x": x, "eps": eps},
                   {"outcome": ["y"], "exogenous": ["x"], "conditioning": ["x"]})


def mixture_cdf(e) -> np.ndarray:
    out = np.zeros_like(np.asarray(e, float))
    for w, mu, sd in MIXTURE:
        out = out + w * ndtr((e - mu) / sd)
    return out


def mixture_ppf(u, tol: float = 1e-12) -> np.ndarray:
    """Inverse CDF of the two-component normal mixture by vectorised bisection."""
    u = np.asarray(u, float)
    lo = np.full(u.shape, -12.0)
    hi = np.full(u.shape, 12.0)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def iv_first_stage(z1, z2, z3) -> np.ndarray:
    a = np.sqrt(0.3) * z1 + np.sqrt(0.7) * z2
    return 6.0 * a ** 3 * (1.0 - a) * z3 + z1 * z2 * (1.0 - z3)


def gen_example2(n: int, seed: int = 0) -> Dataset:
    """IV design with a Gaussian copula over (e1, e2, Z1); Z1 is an invalid instrument."""
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(COPULA_CORR)
    v = rng.standard_normal((n, 3)) @ L.T
    u = ndtr(v)
    e1 = mixture_ppf(u[:, 0])
    e2 = v[:, 1]
    z1 = u[:, 2]
    z2 = rng.uniform(0.0, 1.0, n)
    z3 = (rng.uniform(0.0, 1.0, n) < 0.4).astype(float)
    x = iv_first_stage(z1, z2, z3) + e2
    y = 1.0 + x + e1
    return Dataset({"y": y, "x": x, "z1": z1, "z2": z2, "z3": z3, "e1": e1, "e2": e2},
                   {"outcome": ["y"], "endogenous": ["x"], "conditioning": ["z1", "z2", "z3"]})


def gen_example3_redundant(data: Dataset, seed: int = 0) -> Dataset:
    """Append nine noisy copies Z4..Z12 of the invalid instrument Z1."""
    rng = np.random.default_rng(seed)
    extra = {f"z{j}": 0.9 * data["z1"] + 0.1 * rng.uniform(0.0, 1.0, data.n) for j in range(4, 13)}
    out = data.with_columns(**extra)
    out.roles["conditioning"] = [f"z{j}" for j in range(1, 13)]
    return out


def gen_example4(n: int, seed: int = 0, rho: float = 0.97) -> Dataset:
    """IV design plus 18 exogenous regressors in three equicorrelated groups of six."""
    base = gen_example2(n, seed)
    rng = np.random.default_rng([seed, 4])
    S = np.full((6, 6), rho)
    np.fill_diagonal(S, 1.0)
    L = np.linalg.cholesky(S)
    W = np.hstack([rng.standard_normal((n, 6)) @ L.T for _ in range(3)])
    cols = {f"w{j + 1}": W[:, j] for j in range(18)}
    out = base.with_columns(y=base["y"] + W.sum(axis=1), **cols)
    out.roles["exogenous"] = list(cols)
    return out


def generate(kind: str, n: int, seed: int = 0, **params) -> Dataset:
    """Dispatch on a DGP kind name."""
    if kind in ("hetero_skew_normal", "example1"):
        return gen_example1(n, tuple(params.get("theta", (1.0, 1.0))), seed)
    if kind in ("iv_copula", "example2"):
        return gen_example2(n, seed)
    if kind in ("iv_copula_highdim_z", "example3"):
        return gen_example3_redundant(gen_example2(n, seed), seed + 1_000_003)
    if kind in ("iv_highdim_theta", "example4"):
        return gen_example4(n, seed, params.get("rho", 0.97))
    raise ValueError(f"unknown DGP kind {kind!r}; expected one of {DGP_KINDS}")


# ------------------------------------------------------- model templates ---

def example1_model(data: Dataset, K: int, fixed_intercept: float | None = None):
    """Linear model conditioned on X with a K-knot natural spline basis.

    With ``fixed_intercept`` only the slope is free.
    """
    basis = build_basis(data, BasisSpec(K, [ColumnPlan(("x",), "spline")]))
    model = linear_regression_model(data, "y", ["x"], basis)
    if fixed_intercept is not None:
        model = model.restrict({"theta0": fixed_intercept})
    return model


EXAMPLE2_CONDITIONING = {"M1": (["z1", "z2"], ["z3"]),
                         "M2": (["z1"], ["z3"]),
                         "M3": (["z2"], ["z3"])}


def iv_conditioning_model(data: Dataset, continuous, binary, K: int, exogenous=()):
    plans = conditioning_plans(continuous, binary) + [ColumnPlan((w,), "passthrough") for w in exogenous]
    basis = build_basis(data, BasisSpec(K, plans))
    return iv_model(data, "y", "x", basis, exogenous)


def example2_models(data: Dataset, K: int | None = None) -> dict:
    K = k_rule(data.n) if K is None else K
    return {name: iv_conditioning_model(data, c, b, K) for name, (c, b) in EXAMPLE2_CONDITIONING.items()}


def example4_model(data: Dataset, K: int = 6):
    return iv_conditioning_model(data, ["z2"], ["z3"], K, exogenous=[f"w{j + 1}" for j in range(18)])


MODEL_TEMPLATES = ("example1", "example2", "example4")


def template_models(name: str, data: Dataset, K: int | None = None, **params) -> dict:
    """Models of a named template as an ordered ``{id: MomentModel}`` mapping."""
    K = k_rule(data.n) if K is None else K
    if name == "example1":
        fixed = params.get("fixed_intercept")
        return {"model": example1_model(data, K, fixed)}
    if name == "example2":
        models = example2_models(data, K)
        keep = params.get("models")
        return {m: models[m] for m in keep} if keep else models
    if name == "example4":
        return {"model": example4_model(data, K)}
    raise ValueError(f"unknown model template {name!r}; expected one of {MODEL_TEMPLATES}")


# ----------------------------------------------------------- pseudo-truth ---

@dataclass
class PseudoTrueResult:
    theta: np.ndarray
    param_names: list
    log_etel: float
    starts: list
    optima: list
    N: int
    K: int
    seed: int

    def to_dict(self) -> dict:
        return {"theta": dict(zip(self.param_names, self.theta.tolist())), "log_etel": self.log_etel,
                "starts": [np.asarray(s).tolist() for s in self.starts],
                "optima": [np.asarray(o).tolist() for o in self.optima], "N": self.N, "K": self.K,
                "seed": self.seed}


def maximize_log_etel(model: MomentModel, starts) -> tuple[np.ndarray, float, list]:
    """Best local maximiser of the (prior-free) log ETEL over several starts."""
    def fg(theta):
        return log_etel_and_grad(model, theta)

    best, optima = None, []
    for s in starts:
        s = np.asarray(s, float)
        f0, _ = fg(s)
        if not np.isfinite(f0):
            optima.append(None)
            continue
        x, f, _ = maximize(fg, s)
        optima.append(x)
        if best is None or f > best[1]:
            best = (x, f)
    if best is None:
        raise RuntimeError("no start has a finite log ETEL; optimizer trace: " + repr(optima))
    return best[0], float(best[1]), optima


def pseudo_true_value(N: int = 500_000, K: int = 26, fixed_intercept: float | None = 0.5, seed: int = 0,
                      restarts: int = 5, theta=(1.0, 1.0)) -> PseudoTrueResult:
    """Large-sample maximiser of the log ETEL for Example 1.

    ``N`` observations are drawn from the true design; the intercept is
    held at ``fixed_intercept`` (``None`` keeps both parameters free) and
    the remaining parameters maximise the log ETEL with ``K`` knots.
    """
    if N < 100_000:
        raise ValueError("pseudo-true value needs N >= 1e5")
    data = gen_example1(N, theta, seed)
    model = example1_model(data, K, fixed_intercept)
    s0 = moment_start(model)
    offsets = np.linspace(-0.1, 0.1, restarts) if restarts > 1 else np.zeros(1)
    starts = [s0 + off * (1.0 + np.abs(s0)) for off in offsets]
    x, f, optima = maximize_log_etel(model, starts)
    return PseudoTrueResult(x, list(model.param_names), f, starts, optima, N, K, seed)


# -------------------------------------------------------------- harness ---

@dataclass
class ExperimentSpec:
    """One repeated-sampling experiment.

    ``task`` is ``"estimate"`` (posterior summaries and credible-interval
    coverage of ``truth``) or ``"compare"`` (marginal-likelihood model
    selection among the template's models).
    """

    dgp: str
    n: int
    template: str
    task: str = "estimate"
    K: int | None = None
    repetitions: int = 50
    template_params: dict = field(default_factory=dict)
    dgp_params: dict = field(default_factory=dict)
    truth: dict = field(default_factory=dict)
    credible_level: float = 0.9
    draws: int = 5000
    burn_in: int = 500
    seed_base: int = 0
    prior_location: float = 0.0
    prior_scale: float = 5.0
    prior_dof: float = 2.5

    def __post_init__(self):
        if self.task not in ("estimate", "compare"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.repetitions < 10:
            raise ValueError("repeated-sampling experiments need at least 10 repetitions")
        if not 0.0 < self.credible_level < 1.0:
            raise ValueError("credible_level must lie in (0, 1)")
        if self.dgp not in DGP_KINDS and self.dgp not in ("example1", "example2", "example3", "example4"):
            raise ValueError(f"unknown DGP kind {self.dgp!r}")

    @property
    def effective_K(self) -> int:
        return k_rule(self.n) if self.K is None else self.K

    @classmethod
    def from_dict(cls, cfg: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(cfg) - known
        if extra:
            raise ValueError(f"unknown experiment fields {sorted(extra)}")
        return cls(**cfg)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    records: list
    aggregates: dict
    failures: int
    elapsed: float = 0.0

    def meta(self) -> dict:
        return {"spec": asdict(self.spec), "K": self.spec.effective_K, "n": self.spec.n,
                "repetitions": self.spec.repetitions, "failures": self.failures,
                "seeds": [self.spec.seed_base + r for r in range(self.spec.repetitions)],
                "elapsed_seconds": self.elapsed}

    def to_dict(self) -> dict:
        return {"aggregates": self.aggregates, "meta": self.meta()}

    def write(self, out_dir, prefix: str = "experiment") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{prefix}.json").write_text(json.dumps(self.to_dict(), indent=2))
        keys = sorted({k for r in self.records for k in r})
        with open(out_dir / f"{prefix}_records.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.records)


def _prior_for(spec: ExperimentSpec, model: MomentModel):
    return StudentTPrior.default(model.p, spec.prior_location, spec.prior_scale, spec.prior_dof,
                                 names=model.param_names)


def run_replication(spec: ExperimentSpec, rep: int) -> dict:
    """One replication; failures are returned as a record with ``status`` set."""
    seed = spec.seed_base + rep
    rec = {"rep": rep, "seed": seed, "status": "ok"}
    try:
        data = generate(spec.dgp, spec.n, seed, **spec.dgp_params)
        models = template_models(spec.template, data, spec.K, **spec.template_params)
        if spec.task == "estimate":
            (_, model), = models.items()
            lp = LogPosterior(model, _prior_for(spec, model))
            out = run_one_block(lp, McmcConfig("one_block", spec.draws, spec.burn_in, seed=seed))
            tail = (1.0 - spec.credible_level) / 2.0
            rec["acceptance"] = out.acceptance_rate
            for j, nm in enumerate(model.param_names):
                x = out.draws[:, j]
                lo, hi = np.quantile(x, [tail, 1.0 - tail])
                rec[f"{nm}_mean"] = float(x.mean())
                rec[f"{nm}_sd"] = float(x.std())
                rec[f"{nm}_lower"] = float(lo)
                rec[f"{nm}_upper"] = float(hi)
                if nm in spec.truth:
                    rec[f"{nm}_covered"] = int(lo <= spec.truth[nm] <= hi)
        else:
            entries = [(m, LogPosterior(mod, _prior_for(spec, mod))) for m, mod in models.items()]
            comp = compare_models(entries, MlConfig(draws=spec.draws, burn_in=spec.burn_in, seed=seed))
            for m, v in zip(comp.model_ids, comp.log_ml):
                rec[f"log_ml_{m}"] = float(v)
            if comp.failures:
                rec["status"] = "failed: " + "; ".join(f"{k}: {v}" for k, v in comp.failures.items())
            else:
                rec["selected"] = comp.best
    except Exception as exc:  # recorded and excluded from the aggregates
        log.warning("replication %d failed: %s", rep, exc)
        rec["status"] = f"failed: {type(exc).__name__}: {exc}"
    return rec


def aggregate(spec: ExperimentSpec, records: list) -> dict:
    """Summary statistics recomputable from the per-replication records."""
    ok = [r for r in records if r["status"] == "ok"]
    out: dict = {"completed": len(ok)}
    if not ok:
        return out
    if spec.task == "estimate":
        names = [k[:-5] for k in ok[0] if k.endswith("_mean")]
        for nm in names:
            means = np.array([r[f"{nm}_mean"] for r in ok])
            stats = {"mean_of_means": float(means.mean()),
                     "posterior_sd": float(np.mean([r[f"{nm}_sd"] for r in ok]))}
            if nm in spec.truth:
                stats["abs_bias"] = float(abs(means.mean() - spec.truth[nm]))
                stats["coverage"] = float(np.mean([r[f"{nm}_covered"] for r in ok]))
            out[nm] = stats
        out["acceptance"] = float(np.mean([r["acceptance"] for r in ok]))
    else:
        ids = [k[len("log_ml_"):] for k in ok[0] if k.startswith("log_ml_")]
        out["selection_frequency"] = {m: float(np.mean([r["selected"] == m for r in ok])) for m in ids}
    return out


def run_repeated(spec: ExperimentSpec, jobs: int = 1, progress: Callable | None = None) -> ExperimentResult:
    """Run ``spec.repetitions`` independent replications with seeds ``seed_base + r``."""
    t0 = time.time()
    if jobs == 1:
        records = []
        for r in range(spec.repetitions):
            records.append(run_replication(spec, r))
            if progress is not None:
                progress(r, records[-1])
    else:
        records = Parallel(n_jobs=jobs)(delayed(run_replication)(spec, r) for r in range(spec.repetitions))
    failures = sum(r["status"] != "ok" for r in records)
    if failures:
        log.warning("%d of %d replications failed and were excluded", failures, spec.repetitions)
    return ExperimentResult(spec, records, aggregate(spec, records), failures, time.time() - t0)
