"""Marginal likelihoods, hull volume, model comparison and sparsity search.

The log marginal likelihood of a model uses the basic marginal likelihood
identity at a single support point ``t``::

    log m = log pi(t) + log ETEL(t) - log pi(t | data)

with the posterior ordinate estimated from the output of the tailored
one-block M-H sampler: the ratio of an average acceptance probability
times the proposal density over posterior draws to an average acceptance
probability over fresh proposal draws.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logsumexp

from .etel import INTERIOR, hull_check
from .model import MomentModel, NonFiniteMomentError
from .posterior import LogPosterior, McmcConfig, McmcOutput, Proposal, run_one_block

log = logging.getLogger(__name__)

MAX_SUBSETS = 10_000


class OrdinateError(RuntimeError):
    """The ordinate denominator is too small to trust."""


# ----------------------------------------------------------------- volume ---

@dataclass
class VolumeEstimate:
    volume: float
    draws: int
    standard_error: float = field(init=False)

    def __post_init__(self):
        v = self.volume
        self.standard_error = math.sqrt(v * (1.0 - v) / self.draws)

    def to_dict(self) -> dict:
        return {"volume": self.volume, "draws": self.draws, "standard_error": self.standard_error}


def is_interior(model: MomentModel, theta) -> bool:
    """LP-certified membership of ``theta`` in the hull set."""
    try:
        G = model.expand(theta)
    except NonFiniteMomentError:
        return False
    # a moment column of one sign settles the question without the LP
    if np.any(G.max(axis=0) <= 0.0) or np.any(G.min(axis=0) >= 0.0):
        return False
    return hull_check(G).status == INTERIOR


def hull_volume(model: MomentModel, prior, n_draws: int = 2000, seed: int = 0, jobs: int = 1) -> VolumeEstimate:
    """Prior probability content of the hull set.

    Draws ``n_draws`` parameter values from the untruncated prior and
    reports the share certified interior by the LP, with the binomial
    standard error.
    """
    if n_draws < 1000:
        raise ValueError("hull volume needs at least 1000 prior draws")
    rng = np.random.default_rng(seed)
    thetas = np.asarray(prior.sample(rng, n_draws), float)
    if not np.all(np.isfinite(thetas)):
        raise ValueError("prior sampling produced non-finite draws")
    # repeated draws (e.g. a point-mass prior) need only one LP each
    uniq, inverse = np.unique(thetas, axis=0, return_inverse=True)
    if jobs == 1:
        inside = np.array([is_interior(model, t) for t in uniq])
    else:
        inside = np.array(Parallel(n_jobs=jobs)(delayed(is_interior)(model, t) for t in uniq))
    hits = inside[np.asarray(inverse).reshape(-1)]
    return VolumeEstimate(float(hits.mean()), n_draws)


# -------------------------------------------------------------- ordinate ---

@dataclass
class Ordinate:
    log_value: float
    standard_error: float
    numerator: float
    denominator: float


def _batch_log_se(terms, batches: int) -> float:
    """Delta-method SE of ``log mean(terms)`` from batch means."""
    terms = np.asarray(terms, float)
    mean = terms.mean()
    if terms.size < 2 * batches or mean <= 0.0:
        return float("nan")
    bm = terms[: terms.size // batches * batches].reshape(batches, -1).mean(axis=1)
    return float(bm.std(ddof=1) / math.sqrt(batches) / mean)


def posterior_ordinate(logpost: LogPosterior, output: McmcOutput, theta, ordinate_draws: int | None = None,
                       seed: int = 0, batches: int = 20) -> Ordinate:
    """M-H output estimate of the posterior density at ``theta``.

    ``output`` must come from the independence sampler with proposal
    ``output.proposal``; its stored log-posterior trace supplies the
    numerator terms without re-evaluating the posterior.
    """
    q: Proposal = output.proposal
    if q is None:
        raise ValueError("MCMC output carries no proposal; run the one-block sampler")
    theta = np.asarray(theta, float)
    lp_t = logpost(theta)
    if not np.isfinite(lp_t):
        raise OrdinateError("evaluation point lies outside the hull set")
    lq_t = q.logpdf(theta)
    # numerator: E_post[alpha(theta_g, theta) q(theta)]
    lq_g = q.logpdf(output.draws)
    log_alpha_num = np.minimum(0.0, (lp_t - output.log_posterior) + (lq_g - lq_t))
    # denominator: E_q[alpha(theta, theta_j)]
    J = output.draws.shape[0] if ordinate_draws is None else int(ordinate_draws)
    rng = np.random.default_rng([seed, 7919])
    cand = q.sample(rng, J)
    lq_j = q.logpdf(cand)
    lp_j = np.array([logpost(c) for c in cand])
    with np.errstate(invalid="ignore"):
        log_alpha_den = np.where(np.isfinite(lp_j), np.minimum(0.0, (lp_j - lp_t) + (lq_t - lq_j)), -np.inf)
    log_num = float(logsumexp(log_alpha_num) - math.log(log_alpha_num.size) + lq_t)
    log_den = float(logsumexp(log_alpha_den) - math.log(J))
    if not log_den > math.log(1e-12):
        raise OrdinateError("ordinate denominator below 1e-12; choose an evaluation point nearer the mode")
    se = math.hypot(_batch_log_se(np.exp(log_alpha_num), batches), _batch_log_se(np.exp(log_alpha_den), batches))
    return Ordinate(log_num - log_den, se, log_num, log_den)


# ---------------------------------------------------- marginal likelihood ---

@dataclass
class MlConfig:
    """Settings for one marginal-likelihood computation."""

    draws: int = 20000
    burn_in: int = 1000
    ordinate_draws: int | None = None
    proposal_dof: float = 15.0
    seed: int = 0
    volume_correction: bool = False
    volume_draws: int = 2000
    batches: int = 20

    def mcmc(self) -> McmcConfig:
        return McmcConfig("one_block", self.draws, self.burn_in, proposal_dof=self.proposal_dof, seed=self.seed)


@dataclass
class MarginalLikelihood:
    log_prior: float
    log_etel: float
    log_posterior_ordinate: float
    theta_tilde: np.ndarray
    standard_error: float
    volume_correction: float = 0.0
    volume: VolumeEstimate | None = None
    log_ml: float = field(init=False)

    def __post_init__(self):
        self.log_ml = self.log_prior + self.volume_correction + self.log_etel - self.log_posterior_ordinate

    def to_dict(self) -> dict:
        return {"log_ml": self.log_ml, "standard_error": self.standard_error,
                "log_prior": self.log_prior, "log_etel": self.log_etel,
                "log_posterior_ordinate": self.log_posterior_ordinate,
                "volume_correction": self.volume_correction,
                "volume": None if self.volume is None else self.volume.to_dict(),
                "theta_tilde": self.theta_tilde.tolist()}


def evaluation_point(logpost: LogPosterior, output: McmcOutput) -> np.ndarray:
    """Posterior mean when it lies in the hull set, else the best stored draw."""
    mean = output.draws.mean(axis=0)
    if np.isfinite(logpost(mean)):
        return mean
    return output.draws[int(np.argmax(output.log_posterior))].copy()


def marginal_likelihood(logpost: LogPosterior, config: MlConfig | None = None,
                        output: McmcOutput | None = None) -> MarginalLikelihood:
    """Log marginal likelihood of one model.

    Output from the randomized-block sampler is not usable for the
    ordinate; in that case the one-block sampler is re-run at the same
    draw budget.
    """
    config = MlConfig() if config is None else config
    if output is None or output.proposal is None or output.config.sampler != "one_block":
        if output is not None:
            config = MlConfig(**{**config.__dict__, "draws": output.config.draws})
        output = run_one_block(logpost, config.mcmc())
    theta = evaluation_point(logpost, output)
    ordinate = posterior_ordinate(logpost, output, theta, config.ordinate_draws, config.seed, config.batches)
    log_prior = logpost.prior.logpdf(theta)
    log_etel = logpost.log_etel(theta)
    correction, vol = 0.0, None
    if config.volume_correction:
        vol = hull_volume(logpost.model, logpost.prior, config.volume_draws, config.seed)
        if vol.volume == 0.0:
            raise OrdinateError("estimated hull volume is zero; increase volume_draws")
        correction = -math.log(vol.volume)
    return MarginalLikelihood(log_prior, log_etel, ordinate.log_value, theta, ordinate.standard_error,
                              correction, vol)


# ------------------------------------------------------------ comparison ---

@dataclass
class ModelComparison:
    """Log marginal likelihoods and posterior model probabilities under a uniform model prior.

    Failed models carry ``nan`` and receive probability zero.
    """

    model_ids: list
    log_ml: np.ndarray
    standard_errors: np.ndarray
    results: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.log_ml = np.asarray(self.log_ml, float)
        self.standard_errors = np.asarray(self.standard_errors, float)

    @property
    def probabilities(self) -> np.ndarray:
        ok = np.isfinite(self.log_ml)
        out = np.zeros(self.log_ml.size)
        if ok.any():
            z = self.log_ml[ok] - self.log_ml[ok].max()
            w = np.exp(z)
            out[ok] = w / w.sum()
        return out

    @property
    def ranking(self) -> list:
        """Model ids from best to worst; failed models last in input order."""
        key = np.where(np.isfinite(self.log_ml), -self.log_ml, np.inf)
        return [self.model_ids[i] for i in np.argsort(key, kind="stable")]

    @property
    def best(self):
        return self.ranking[0]

    def rank_of(self, model_id) -> int:
        return self.ranking.index(model_id) + 1

    def rows(self) -> list[dict]:
        probs = self.probabilities
        idx = {m: i for i, m in enumerate(self.model_ids)}
        out = []
        for r, m in enumerate(self.ranking, start=1):
            i = idx[m]
            out.append({"model": m, "log_ml": float(self.log_ml[i]), "se": float(self.standard_errors[i]),
                        "probability": float(probs[i]), "rank": r})
        return out

    def to_dict(self) -> dict:
        return {"models": self.rows(), "failures": dict(self.failures),
                "details": {m: r.to_dict() for m, r in self.results.items()}, "meta": self.meta}

    def write(self, out_dir, prefix: str = "comparison") -> None:
        """JSON report plus a CSV with model, log_ml, se, probability, rank."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{prefix}.json").write_text(json.dumps(self.to_dict(), indent=2, default=_json_default))
        with open(out_dir / f"{prefix}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["model", "log_ml", "se", "probability", "rank"])
            w.writeheader()
            w.writerows(self.rows())


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _one_ml(model_id, logpost, config):
    try:
        return model_id, marginal_likelihood(logpost, config), None
    except Exception as exc:  # one failed model must not abort the comparison
        log.warning("marginal likelihood failed for %s: %s", model_id, exc)
        return model_id, None, f"{type(exc).__name__}: {exc}"


def compare_models(entries: Sequence, config: MlConfig | None = None, jobs: int = 1) -> ModelComparison:
    """Marginal likelihood of each ``(model_id, LogPosterior)`` entry.

    The same sampler seed is used for every model so that differences in
    log marginal likelihood are not driven by seed choice.
    """
    config = MlConfig() if config is None else config
    entries = list(entries)
    if not entries:
        raise ValueError("no models to compare")
    ids = [e[0] for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("model ids must be unique")
    if jobs == 1:
        done = [_one_ml(m, lp, config) for m, lp in entries]
    else:
        done = Parallel(n_jobs=jobs)(delayed(_one_ml)(m, lp, config) for m, lp in entries)
    results, failures = {}, {}
    log_ml, ses = [], []
    for m, res, err in done:
        if res is None:
            failures[m] = err
            log_ml.append(np.nan)
            ses.append(np.nan)
        else:
            results[m] = res
            log_ml.append(res.log_ml)
            ses.append(res.standard_error)
    return ModelComparison(ids, np.array(log_ml), np.array(ses), results, failures,
                           meta={"draws": config.draws, "burn_in": config.burn_in, "seed": config.seed,
                                 "volume_correction": config.volume_correction})


# --------------------------------------------------------------- search ---

def enumerate_subsets(candidates: Sequence[str], forced: Sequence[str] = (), max_size: int = 3,
                      include_forced_only: bool = True) -> list[tuple]:
    """Conditioning sets of at most ``max_size`` variables, each containing ``forced``.

    Sets are returned as ``extras + forced`` tuples, extras in candidate
    order. ``include_forced_only=False`` drops the set with no extras.
    """
    candidates = list(candidates)
    forced = tuple(forced)
    if not candidates:
        raise ValueError("candidate list is empty")
    if set(candidates) & set(forced):
        raise ValueError("a forced column cannot also be a candidate")
    if max_size not in (1, 2, 3):
        raise ValueError("max_size must be 1, 2 or 3")
    free = max_size - len(forced)
    if free < 0:
        raise ValueError("more forced columns than max_size allows")
    total = sum(math.comb(len(candidates), r) for r in range(0 if include_forced_only else 1, free + 1))
    if total > MAX_SUBSETS:
        raise ValueError(f"{total} subsets exceed the limit of {MAX_SUBSETS}")
    out = []
    for r in range(0 if include_forced_only else 1, free + 1):
        if r == 0 and not forced:
            continue
        out.extend(tuple(c) + forced for c in itertools.combinations(candidates, r))
    return out


def subset_id(subset) -> str:
    return "(" + ",".join(subset) + ")"


def sparsity_search(data, candidates: Sequence[str], forced: Sequence[str],
                    build: Callable[..., LogPosterior], max_size: int = 3, config: MlConfig | None = None,
                    expected_count: int | None = None, include_forced_only: bool = True,
                    jobs: int = 1) -> ModelComparison:
    """Rank every admissible conditioning set by its log marginal likelihood.

    ``build(data, subset)`` returns the log posterior for the model that
    conditions on the columns in ``subset``.
    """
    subsets = enumerate_subsets(candidates, forced, max_size, include_forced_only)
    if expected_count is not None and len(subsets) != expected_count:
        raise ValueError(f"enumerated {len(subsets)} models, configuration expects {expected_count}")
    entries = [(subset_id(s), build(data, s)) for s in subsets]
    comp = compare_models(entries, config, jobs)
    comp.meta.update({"candidates": list(candidates), "forced": list(forced), "max_size": max_size,
                      "model_count": len(subsets)})
    return comp


def write_search_series(comparison: ModelComparison, path) -> None:
    """Log marginal likelihoods sorted from best to worst, one row per model."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "model", "log_ml", "probability"])
        for row in comparison.rows():
            w.writerow([row["rank"], row["model"], row["log_ml"], row["probability"]])
