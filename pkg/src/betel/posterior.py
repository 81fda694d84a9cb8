"""Priors, the hull-truncated ETEL posterior, and tailored M-H samplers."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import gammaln

from .etel import etel_gradient, evaluate
from .model import MomentModel, NonFiniteMomentError

log = logging.getLogger(__name__)


class TailoringError(RuntimeError):
    pass


class MixingWarning(RuntimeWarning):
    pass


# ----------------------------------------------------------------- priors ---

class StudentTPrior:
    """Independent Student-t prior with per-parameter location, scale and dof."""

    def __init__(self, location, scale, dof, names=None):
        self.location = np.atleast_1d(np.asarray(location, float))
        p = self.location.size
        self.scale = np.broadcast_to(np.asarray(scale, float), (p,)).copy()
        self.dof = np.broadcast_to(np.asarray(dof, float), (p,)).copy()
        if np.any(self.scale <= 0) or np.any(self.dof <= 0):
            raise ValueError("prior scale and degrees of freedom must be positive")
        self.names = list(names) if names is not None else None
        nu = self.dof
        self._const = float(np.sum(gammaln((nu + 1) / 2) - gammaln(nu / 2)
                                   - 0.5 * np.log(nu * np.pi) - np.log(self.scale)))

    @classmethod
    def default(cls, p, location=0.0, scale=5.0, dof=2.5, names=None):
        return cls(np.full(p, location, float), scale, dof, names)

    @property
    def p(self) -> int:
        return self.location.size

    def logpdf(self, theta) -> float:
        u = (np.asarray(theta, float) - self.location) / self.scale
        return self._const - float(np.sum((self.dof + 1) / 2 * np.log1p(u * u / self.dof)))

    def grad(self, theta) -> np.ndarray:
        r = np.asarray(theta, float) - self.location
        return -(self.dof + 1) * r / (self.dof * self.scale ** 2 + r * r)

    def sample(self, rng, size: int) -> np.ndarray:
        return self.location + self.scale * rng.standard_t(self.dof, size=(size, self.p))

    def to_dict(self) -> dict:
        return {"location": self.location.tolist(), "scale": self.scale.tolist(), "dof": self.dof.tolist()}


class PointMassPrior:
    """Degenerate prior used for volume checks; has no density."""

    def __init__(self, location):
        self.location = np.atleast_1d(np.asarray(location, float))

    @property
    def p(self) -> int:
        return self.location.size

    def sample(self, rng, size: int) -> np.ndarray:
        return np.tile(self.location, (size, 1))


# --------------------------------------------------- classical estimators ---

def moment_start(model: MomentModel, theta0=None, iters: int = 20) -> np.ndarray:
    """Gauss-Newton minimiser of the squared mean moment; exact in one step for affine residuals."""
    theta = np.zeros(model.p) if theta0 is None else np.asarray(theta0, float).copy()
    for _ in range(iters):
        gbar = model.expand(theta).mean(axis=0)
        D = model.expand_jacobian(theta).mean(axis=0)
        step = np.linalg.lstsq(D, -gbar, rcond=None)[0]
        theta = theta + step
        if model.linear or np.max(np.abs(step)) < 1e-10 * (1 + np.max(np.abs(theta))):
            break
    return theta


def gmm_estimate(model: MomentModel, theta0=None, weight: str = "two_step", iters: int = 50):
    """GMM point estimate and heteroskedasticity-robust standard errors.

    ``weight`` is ``"two_step"`` (efficient two-step GMM) or ``"2sls"``
    (weight ``(Q'Q)^{-1}`` on a single-residual, single-block model, which
    reproduces two-stage least squares with the basis as instruments).
    """
    n = model.n

    def solve(W, theta):
        for _ in range(iters):
            gbar = model.expand(theta).mean(axis=0)
            D = model.expand_jacobian(theta).mean(axis=0)
            step = -np.linalg.solve(D.T @ W @ D, D.T @ W @ gbar)
            theta = theta + step
            if model.linear or np.max(np.abs(step)) < 1e-10 * (1 + np.max(np.abs(theta))):
                break
        return theta

    theta = moment_start(model, theta0)
    if weight == "2sls":
        if len(model.blocks) != 1 or model.blocks[0].basis is None or model.residual_dim != 1:
            raise ValueError("2SLS weighting needs a single-residual model with one basis block")
        Q = model.blocks[0].basis
        W = np.linalg.pinv(Q.T @ Q / n)
        theta = solve(W, theta)
    elif weight == "two_step":
        theta = solve(np.eye(model.moment_dim), theta)
        G = model.expand(theta)
        Gc = G - G.mean(axis=0)
        W = np.linalg.pinv(Gc.T @ Gc / n)
        theta = solve(W, theta)
    else:
        raise ValueError(f"unknown GMM weighting {weight!r}")
    G = model.expand(theta)
    D = model.expand_jacobian(theta).mean(axis=0)
    S = G.T @ G / n
    bread = np.linalg.pinv(D.T @ W @ D)
    cov = bread @ (D.T @ W @ S @ W @ D) @ bread / n
    return theta, np.sqrt(np.maximum(np.diag(cov), 0.0))


def training_sample_prior(train_model: MomentModel, estimator: str = "gmm", multiplier: float = 2.0,
                          dof: float = 2.5, dispersion: float = 5.0) -> StudentTPrior:
    """Student-t prior centred on a training-sample estimate.

    ``gmm`` and ``2sls`` set the scale to ``multiplier`` standard errors;
    ``sample_mean`` centres the intercept on the training mean of the
    outcome, slopes on zero, with a fixed ``dispersion``.
    """
    names = train_model.param_names
    if estimator in ("gmm", "2sls"):
        est, se = gmm_estimate(train_model, weight="two_step" if estimator == "gmm" else "2sls")
        se = np.where(se > 0, se, 1e-8)
        return StudentTPrior(est, multiplier * se, dof, names)
    if estimator == "sample_mean":
        loc = np.zeros(train_model.p)
        loc[0] = float(np.mean(train_model.meta["y"]))
        return StudentTPrior(loc, dispersion, dof, names)
    raise ValueError(f"unknown training-sample estimator {estimator!r}")


# -------------------------------------------------------------- posterior ---

class LogPosterior:
    """``log prior + log ETEL`` with the hull indicator folded in as ``-inf``."""

    def __init__(self, model: MomentModel, prior: StudentTPrior):
        if prior.p != model.p:
            raise ValueError(f"prior has {prior.p} parameters, model has {model.p}")
        self.model = model
        self.prior = prior
        self.evaluations = 0

    @property
    def p(self) -> int:
        return self.model.p

    def log_etel(self, theta) -> float:
        self.evaluations += 1
        try:
            G = self.model.expand(theta)
        except NonFiniteMomentError:
            return -np.inf
        return evaluate(G).log_etel

    def __call__(self, theta) -> float:
        le = self.log_etel(theta)
        return -np.inf if le == -np.inf else le + self.prior.logpdf(theta)

    def value_and_grad(self, theta, params=None):
        self.evaluations += 1
        theta = np.asarray(theta, float)
        try:
            G = self.model.expand(theta)
        except NonFiniteMomentError:
            return -np.inf, None
        ev = evaluate(G)
        if not ev.interior:
            return -np.inf, None
        grad = etel_gradient(self.model, theta, ev, G, params)
        pg = self.prior.grad(theta)
        grad = grad + (pg if params is None else pg[params])
        return ev.log_etel + self.prior.logpdf(theta), grad


def log_posterior(model: MomentModel, prior: StudentTPrior, theta) -> float:
    return LogPosterior(model, prior)(theta)


# ------------------------------------------------------------ optimisation ---

def maximize(fg, x0, hinv0=None, max_iter: int = 200, dtol: float = 1e-10):
    """BFGS ascent with backtracking that treats ``-inf`` as a failed trial.

    ``fg(x)`` returns ``(value, gradient)``. Returns ``(x, value, grad)``.
    """
    x = np.asarray(x0, float).copy()
    f, g = fg(x)
    if not np.isfinite(f):
        return x, f, g
    k = x.size
    if hinv0 is None:
        Hinv = np.eye(k) / max(1.0, float(np.linalg.norm(g)))
        scaled = False
    else:
        Hinv = np.array(hinv0, float)
        scaled = True
    for _ in range(max_iter):
        d = Hinv @ g
        slope = float(g @ d)
        if slope <= 0:
            Hinv = np.eye(k) / max(1.0, float(np.linalg.norm(g)))
            d = Hinv @ g
            slope = float(g @ d)
        # predicted gain of the quasi-Newton step
        if slope <= dtol:
            break
        t = 1.0
        while True:
            xn = x + t * d
            fn, gn = fg(xn)
            if np.isfinite(fn) and fn >= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                return x, f, g
        s = xn - x
        y = g - gn  # gradient change of -f
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            if not scaled:
                Hinv = np.eye(k) * sy / float(y @ y)
                scaled = True
            rho = 1.0 / sy
            V = np.eye(k) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        converged = abs(fn - f) <= 1e-12 * (1.0 + abs(f)) and np.linalg.norm(s) <= 1e-10 * (1 + np.linalg.norm(x))
        x, f, g = xn, fn, gn
        if converged:
            break
    return x, f, g


def fd_hessian(fg, x, params=None) -> np.ndarray:
    """Symmetric central-difference Hessian from gradients, step ``1e-4 (1 + |x_j|)``."""
    x = np.asarray(x, float)
    k = x.size
    H = np.empty((k, k))
    for j in range(k):
        h = 1e-4 * (1.0 + abs(x[j]))
        up, dn = x.copy(), x.copy()
        up[j] += h
        dn[j] -= h
        fu, gu = fg(up)
        fd, gd = fg(dn)
        if gu is None or gd is None:
            # step left the hull: one-sided difference from the centre
            f0, g0 = fg(x)
            if gu is not None:
                H[:, j] = (gu - g0) / h
            elif gd is not None:
                H[:, j] = (g0 - gd) / h
            else:
                raise TailoringError("Hessian stencil leaves the hull set in both directions")
        else:
            H[:, j] = (gu - gd) / (2 * h)
    return 0.5 * (H + H.T)


def repair_precision(P, floor: float = 1e-8) -> np.ndarray:
    """Shift a symmetric matrix so its smallest eigenvalue is at least ``floor``."""
    P = 0.5 * (P + P.T)
    emin = float(np.linalg.eigvalsh(P)[0])
    if emin < floor:
        P = P + (floor - emin) * np.eye(P.shape[0])
    return P


# ------------------------------------------------------------- proposals ---

@dataclass
class Proposal:
    """Multivariate Student-t with location ``mode``, scale matrix ``scale``."""

    mode: np.ndarray
    scale: np.ndarray
    dof: float = 15.0

    def __post_init__(self):
        self.mode = np.atleast_1d(np.asarray(self.mode, float))
        self.scale = np.atleast_2d(np.asarray(self.scale, float))
        self._chol = np.linalg.cholesky(self.scale)
        k = self.mode.size
        nu = self.dof
        self._const = (gammaln((nu + k) / 2) - gammaln(nu / 2) - 0.5 * k * np.log(nu * np.pi)
                       - np.sum(np.log(np.diag(self._chol))))

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        r = np.atleast_2d(x - self.mode)
        u = np.linalg.solve(self._chol, r.T)
        q = np.sum(u * u, axis=0)
        out = self._const - (self.dof + self.mode.size) / 2 * np.log1p(q / self.dof)
        return out if x.ndim > 1 else float(out[0])

    def sample(self, rng, size: int) -> np.ndarray:
        k = self.mode.size
        z = rng.standard_normal((size, k))
        w = rng.chisquare(self.dof, size) / self.dof
        return self.mode + (z @ self._chol.T) / np.sqrt(w)[:, None]


def tailor_proposal(logpost, starts, dof: float = 15.0) -> Proposal:
    """Mode and curvature of the log posterior from several starting points.

    The best local maximiser is the location; the scale matrix is the
    inverse of the (ridge-repaired) negative finite-difference Hessian.
    """
    best = None
    for s in starts:
        if s is None:
            continue
        s = np.asarray(s, float)
        if not np.isfinite(logpost(s)):
            continue
        x, f, _ = maximize(logpost.value_and_grad, s)
        if best is None or f > best[1]:
            best = (x, f)
    if best is None:
        raise TailoringError("no starting point has a finite log posterior; check the prior and the hull set")
    x = best[0]
    # Newton polish
    for _ in range(3):
        f, g = logpost.value_and_grad(x)
        P = repair_precision(-fd_hessian(logpost.value_and_grad, x))
        step = np.linalg.solve(P, g)
        xn = x + step
        fn = logpost(xn)
        if not (np.isfinite(fn) and fn >= f):
            break
        x = xn
        if np.linalg.norm(step) < 1e-9 * (1 + np.linalg.norm(x)):
            break
    P = repair_precision(-fd_hessian(logpost.value_and_grad, x))
    return Proposal(x, np.linalg.inv(P), dof)


def default_starts(logpost: LogPosterior, extra=()) -> list:
    starts = [logpost.prior.location]
    try:
        starts.append(moment_start(logpost.model))
    except (np.linalg.LinAlgError, NonFiniteMomentError):
        pass
    starts.extend(extra)
    return starts


# ----------------------------------------------------------------- MCMC ---

@dataclass
class McmcConfig:
    sampler: str = "one_block"
    draws: int = 20000
    burn_in: int = 1000
    new_block_probability: float = 0.3
    proposal_dof: float = 15.0
    seed: int = 0
    mixing_window: int = 1000

    def __post_init__(self):
        if self.sampler not in ("one_block", "tarb"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.draws <= 0 or self.burn_in < 0:
            raise ValueError("draws must be positive and burn-in non-negative")
        if not 0.0 < self.new_block_probability < 1.0:
            raise ValueError("new_block_probability must lie in (0, 1)")


def _autocorr(x):
    n = x.size
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    return acov / acov[0]


def inefficiency_factor(chain) -> float:
    """``1 + 2 sum rho_l`` truncated by Geyer's initial positive sequence."""
    x = np.asarray(chain, float)
    if x.size < 100:
        raise ValueError("inefficiency factor needs at least 100 draws")
    if np.ptp(x) == 0.0:
        warnings.warn("constant chain: inefficiency factor undefined", RuntimeWarning, stacklevel=2)
        return float("nan")
    rho = _autocorr(x)
    m = (rho.size - 1) // 2
    pairs = rho[0:2 * m:2] + rho[1:2 * m + 1:2]
    neg = np.flatnonzero(pairs <= 0.0)
    stop = neg[0] if neg.size else pairs.size
    return float(-1.0 + 2.0 * np.sum(pairs[:stop]))


def summarize(draws, names) -> dict:
    draws = np.asarray(draws, float)
    out = {}
    for j, nm in enumerate(names):
        x = draws[:, j]
        q05, med, q95 = np.quantile(x, [0.05, 0.5, 0.95])
        out[nm] = {"mean": float(x.mean()), "sd": float(x.std()), "median": float(med),
                   "q05": float(q05), "q95": float(q95),
                   "ineff": inefficiency_factor(x) if x.size >= 100 else float("nan")}
    return out


@dataclass
class McmcOutput:
    draws: np.ndarray
    param_names: list
    acceptance_rate: float
    log_posterior: np.ndarray
    config: McmcConfig
    proposal: Proposal | None = None
    block_acceptance: np.ndarray | None = None
    evaluations: int = 0
    summaries: dict = field(init=False)

    def __post_init__(self):
        self.summaries = summarize(self.draws, self.param_names)

    @property
    def inefficiency(self) -> np.ndarray:
        return np.array([self.summaries[nm]["ineff"] for nm in self.param_names])

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        return self.draws.std(axis=0)

    def mc_standard_error(self) -> np.ndarray:
        return self.sd * np.sqrt(self.inefficiency / self.draws.shape[0])

    def summary_dict(self) -> dict:
        return {"parameters": self.summaries, "acceptance_rate": self.acceptance_rate,
                "draws": int(self.draws.shape[0]), "burn_in": self.config.burn_in,
                "sampler": self.config.sampler, "seed": self.config.seed}

    def to_csv(self, path) -> None:
        np.savetxt(path, self.draws, delimiter=",", header=",".join(self.param_names), comments="")


def _warn_if_stuck(accepted_flags, window):
    if accepted_flags.size >= window:
        run = np.convolve(accepted_flags.astype(float), np.ones(window), mode="valid")
        if np.any(run == 0):
            warnings.warn(f"no proposal accepted over a window of {window} iterations", MixingWarning,
                          stacklevel=3)


def run_one_block(logpost: LogPosterior, config: McmcConfig, proposal: Proposal | None = None,
                  starts=()) -> McmcOutput:
    """Independence M-H with a tailored multivariate-t proposal."""
    rng = np.random.default_rng(config.seed)
    if proposal is None:
        proposal = tailor_proposal(logpost, default_starts(logpost, starts), config.proposal_dof)
    total = config.burn_in + config.draws
    cand = proposal.sample(rng, total)
    lq = proposal.logpdf(cand)
    logu = np.log(rng.uniform(size=total))
    x = proposal.mode.copy()
    lp = logpost(x)
    if not np.isfinite(lp):
        raise TailoringError("proposal mode lies outside the support of the posterior")
    lqx = proposal.logpdf(x)
    draws = np.empty((config.draws, x.size))
    trace = np.empty(config.draws)
    flags = np.zeros(total, dtype=bool)
    for t in range(total):
        lpc = logpost(cand[t])
        if lpc > -np.inf and logu[t] <= (lpc - lp) + (lqx - lq[t]):
            x, lp, lqx = cand[t], lpc, lq[t]
            flags[t] = True
        if t >= config.burn_in:
            draws[t - config.burn_in] = x
            trace[t - config.burn_in] = lp
    _warn_if_stuck(flags, config.mixing_window)
    return McmcOutput(draws, list(logpost.model.param_names), float(flags[config.burn_in:].mean()), trace,
                      config, proposal, evaluations=logpost.evaluations)


def random_blocks(rng, p: int, new_block_probability: float) -> list:
    """Permute indices and cut into blocks, opening a new block with the given probability."""
    perm = rng.permutation(p)
    cuts = rng.uniform(size=p - 1) < new_block_probability
    blocks, cur = [], [perm[0]]
    for idx, cut in zip(perm[1:], cuts):
        if cut:
            blocks.append(np.array(cur))
            cur = [idx]
        else:
            cur.append(idx)
    blocks.append(np.array(cur))
    return blocks


def _conditional_fg(logpost, theta, block):
    def fg(xb):
        t = theta.copy()
        t[block] = xb
        return logpost.value_and_grad(t, block)
    return fg


def run_tarb(logpost: LogPosterior, config: McmcConfig, starts=(), global_proposal: Proposal | None = None) -> McmcOutput:
    """Tailored randomized-block M-H.

    Each iteration draws a random blocking; every block gets a Student-t
    proposal centred at the conditional mode of the log posterior in that
    block (others held fixed) with the inverse negative Hessian there as
    scale, followed by one M-H step.
    """
    if logpost.p < 2:
        raise ValueError("TaRB needs at least two parameters")
    rng = np.random.default_rng(config.seed)
    if global_proposal is None:
        global_proposal = tailor_proposal(logpost, default_starts(logpost, starts), config.proposal_dof)
    m = global_proposal.mode
    P = np.linalg.inv(global_proposal.scale)
    x = m.copy()
    lp = logpost(x)
    total = config.burn_in + config.draws
    draws = np.empty((config.draws, x.size))
    trace = np.empty(config.draws)
    acc_rates = np.empty(total)
    flags = np.zeros(total, dtype=bool)
    for t in range(total):
        blocks = random_blocks(rng, x.size, config.new_block_probability)
        n_acc = 0
        for b in blocks:
            rest = np.setdiff1d(np.arange(x.size), b)
            Pbb = P[np.ix_(b, b)]
            Pbb_inv = np.linalg.inv(Pbb)
            start = m[b] - Pbb_inv @ (P[np.ix_(b, rest)] @ (x[rest] - m[rest]))
            fg = _conditional_fg(logpost, x, b)
            if not np.isfinite(fg(start)[0]):
                start = x[b]
            mode_b, _, _ = maximize(fg, start, hinv0=Pbb_inv, max_iter=50)
            try:
                Hb = fd_hessian(fg, mode_b)
                prop = Proposal(mode_b, np.linalg.inv(repair_precision(-Hb)), config.proposal_dof)
            except (TailoringError, LinAlgError, np.linalg.LinAlgError):
                prop = Proposal(mode_b, Pbb_inv, config.proposal_dof)
            cand = x.copy()
            cand[b] = prop.sample(rng, 1)[0]
            lpc = logpost(cand)
            if lpc > -np.inf and np.log(rng.uniform()) <= (lpc - lp) + prop.logpdf(x[b]) - prop.logpdf(cand[b]):
                x, lp = cand, lpc
                n_acc += 1
        acc_rates[t] = n_acc / len(blocks)
        flags[t] = n_acc > 0
        if t >= config.burn_in:
            draws[t - config.burn_in] = x
            trace[t - config.burn_in] = lp
    _warn_if_stuck(flags, config.mixing_window)
    return McmcOutput(draws, list(logpost.model.param_names), float(acc_rates[config.burn_in:].mean()), trace,
                      config, global_proposal, block_acceptance=acc_rates[config.burn_in:],
                      evaluations=logpost.evaluations)


def run_mcmc(logpost: LogPosterior, config: McmcConfig, starts=()) -> McmcOutput:
    if config.sampler == "tarb":
        return run_tarb(logpost, config, starts)
    return run_one_block(logpost, config, starts=starts)
