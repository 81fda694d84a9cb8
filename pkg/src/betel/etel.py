"""Exponentially tilted empirical likelihood at a fixed parameter value.

The tilting parameter solves the convex dual ``min_l (1/n) sum exp(l'g_i)``
by damped Newton from zero. The solver either converges (0 is interior to
the convex hull of the rows of G), returns a certificate that 0 is not
interior (a direction ``u`` with ``u'g_i <= 0`` for all i), or reports the
case as indeterminate; the linear program in :func:`hull_check` settles the
latter.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import linprog

from .model import MomentModel, NonFiniteMomentError

log = logging.getLogger(__name__)

INTERIOR = "interior"
EXTERIOR = "exterior"
INDETERMINATE = "indeterminate"

HULL_MARGIN = 1e-8
GRAD_TOL = 1e-10
LAMBDA_CAP = 1e4
MAX_ITER = 100
ARMIJO_C = 1e-4
# converged solutions whose smallest weight n*p_i falls below exp(-this)
# sit close to the hull boundary and are re-checked by the LP
BOUNDARY_LOG_WEIGHT = 20.0


@dataclass
class EtelEvaluation:
    lam: np.ndarray
    probabilities: np.ndarray | None
    log_etel: float
    hull_status: str
    solver_iterations: int
    grad_norm: float = np.nan
    reason: str = ""

    @property
    def interior(self) -> bool:
        return self.hull_status == INTERIOR


@dataclass
class HullCertificate:
    status: str
    margin: float
    weights: np.ndarray | None = None
    reason: str = ""


def _scale(G):
    return 1.0 + np.sqrt(np.max(np.einsum("ij,ij->i", G, G)))


def _exterior(G, lam, it, reason):
    return EtelEvaluation(lam, None, -np.inf, EXTERIOR, it, reason=reason)


def _polish(G, lam, p, zmax, s, passes=3, tol=1e-20, etel_tol=1e-12):
    """Extra Newton steps once the gradient-norm test has passed.

    The gradient-norm test depends on how the moment columns are scaled.
    The Newton decrement ``-grad'd`` does not, and neither does the first-order
    change ``(sum_i g_i)'d`` of the log ETEL itself, which matters near the
    hull boundary where tiny weights make ``sum log p_i`` sensitive to lambda.
    Steps are taken until both are negligible or the dual stops decreasing.
    Returns ``(lam, z, zmax, w, s)`` or None when no step was taken.
    """
    out = None
    gsum = G.sum(axis=0)
    for _ in range(passes):
        grad = G.T @ p
        H = (G * p[:, None]).T @ G
        try:
            d = -cho_solve(cho_factor(H, check_finite=False), grad, check_finite=False)
        except (LinAlgError, ValueError):
            break
        if -(grad @ d) <= tol and abs(gsum @ d) <= etel_tol:
            break
        lam_new = lam + d
        z = G @ lam_new
        zmax_new = z.max()
        w = np.exp(z - zmax_new)
        s_new = w.sum()
        logF = zmax + np.log(s)
        if not zmax_new + np.log(s_new) <= logF + 1e-15 * max(1.0, abs(logF)):
            break
        lam, zmax, s, p = lam_new, zmax_new, s_new, w / s_new
        out = (lam, z, zmax, w, s)
    return out


def solve_tilting(G, tol: float = GRAD_TOL, max_iter: int = MAX_ITER, lambda_cap: float | None = LAMBDA_CAP,
                  accept_tol: float | None = None) -> EtelEvaluation:
    """Solve the ETEL dual for the n x m moment matrix ``G``.

    Newton directions use the normalised gradient ``sum p_i g_i`` and
    Hessian ``sum p_i g_i g_i'`` with ``p`` the current tilted weights
    (the common factor ``(1/n) sum exp(l'g_i)`` cancels). Step lengths are
    halved until the Armijo condition (c = 1e-4) holds on the log of the
    dual objective.

    ``accept_tol``, when given, is a looser gradient tolerance at which a
    run that fails to reach ``tol`` is still reported as converged.
    """
    G = np.asarray(G, dtype=float)
    n, m = G.shape
    lam = np.zeros(m)
    if m >= n:
        return _exterior(G, lam, 0, "moment dimension not below sample size")
    # a moment column of one strict sign puts 0 outside the hull
    colmax = G.max(axis=0)
    colmin = G.min(axis=0)
    if np.any(colmax <= 0.0) or np.any(colmin >= 0.0):
        k = int(np.flatnonzero((colmax <= 0.0) | (colmin >= 0.0))[0])
        lam[k] = 1.0 if colmax[k] <= 0.0 else -1.0
        return _exterior(G, lam, 0, "moment column of constant sign")
    scale = _scale(G)
    z = np.zeros(n)
    zmax = 0.0
    w = np.ones(n)
    s = float(n)
    it = 0
    gnorm = np.inf
    reason = ""
    for it in range(1, max_iter + 1):
        p = w / s
        grad = G.T @ p
        gnorm = float(np.sqrt(grad @ grad))
        if gnorm <= tol * scale:
            out = _polish(G, lam, p, zmax, s)
            if out is not None:
                lam, z, zmax, w, s = out
                gnorm = float(np.linalg.norm(G.T @ (w / s)))
            break
        Gp = G * p[:, None]
        H = Gp.T @ G
        try:
            d = -cho_solve(cho_factor(H, check_finite=False), grad, check_finite=False)
        except (LinAlgError, ValueError):
            ridge = 1e-10 * np.trace(H) / m
            try:
                d = -cho_solve(cho_factor(H + ridge * np.eye(m), check_finite=False), grad, check_finite=False)
            except (LinAlgError, ValueError):
                reason = "singular dual Hessian"
                break
        slope = float(grad @ d)
        if not slope < 0.0:
            reason = "non-descent Newton direction"
            break
        logF = zmax + np.log(s)
        # below this predicted relative decrease the Armijo test is rounding noise
        full_step = -slope < 1e-12
        t = 1.0
        while True:
            z_new = G @ (lam + t * d)
            zmax_new = z_new.max()
            w_new = np.exp(z_new - zmax_new)
            s_new = w_new.sum()
            if full_step:
                break
            arg = 1.0 + ARMIJO_C * t * slope
            if arg > 0.0 and zmax_new + np.log(s_new) <= logF + np.log(arg):
                break
            t *= 0.5
            if t < 1e-14:
                break
        if t < 1e-14:
            reason = "line search failed"
            break
        lam = lam + t * d
        z, zmax, w, s = z_new, zmax_new, w_new, s_new
        if zmax <= 0.0:
            # every point on one side of the hyperplane orthogonal to lam
            return _exterior(G, lam, it, "separating direction found")
        if lambda_cap is not None and max(zmax, -z.min()) > lambda_cap:
            reason = "tilting exponents exceeded cap"
            break
        if it % 10 == 0:
            # the tilted mean is a hull point; if it separates, 0 is exterior
            gbar = G.T @ (w / s)
            if np.min(G @ gbar) > 0.0:
                return _exterior(G, -gbar, it, "tilted mean separates the hull from 0")
    else:
        reason = "iteration limit"
    converged = gnorm <= tol * scale or (accept_tol is not None and gnorm <= accept_tol * scale)
    if not converged:
        return EtelEvaluation(lam, None, -np.inf, INDETERMINATE, it, gnorm, reason or "not converged")
    p = w / s
    with np.errstate(divide="ignore"):
        logp = (z - zmax) - np.log(s)
    return EtelEvaluation(lam, p, float(logp.sum()), INTERIOR, it, gnorm)


def hull_check(G, margin: float = HULL_MARGIN) -> HullCertificate:
    """LP certificate for 0 lying in the interior of the convex hull of rows of G.

    Maximises ``delta`` subject to ``sum p_i g_i = 0``, ``sum p_i = 1`` and
    ``p_i >= delta``. Interior iff the optimum exceeds ``margin``.
    """
    G = np.asarray(G, dtype=float)
    n, m = G.shape
    if m >= n:
        return HullCertificate(EXTERIOR, -np.inf, reason="moment dimension not below sample size")
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_eq = np.zeros((m + 1, n + 1))
    A_eq[:m, :n] = G.T
    A_eq[m, :n] = 1.0
    b_eq = np.zeros(m + 1)
    b_eq[m] = 1.0
    A_ub = np.hstack([-np.eye(n), np.ones((n, 1))])
    b_ub = np.zeros(n)
    bounds = [(None, None)] * n + [(None, 1.0 / n)]
    try:
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    except (ValueError, RuntimeError) as exc:  # pragma: no cover - solver internals
        return HullCertificate(INDETERMINATE, np.nan, reason=f"LP failure: {exc}")
    if res.status == 2:
        return HullCertificate(EXTERIOR, -np.inf, reason="0 outside the affine hull")
    if res.status != 0:
        return HullCertificate(INDETERMINATE, np.nan, reason=f"LP status {res.status}: {res.message}")
    delta = float(res.x[-1])
    if delta > margin:
        return HullCertificate(INTERIOR, delta, res.x[:n])
    return HullCertificate(EXTERIOR, delta)


def evaluate(G, use_lp: bool = True) -> EtelEvaluation:
    """Newton fast path with the LP consulted only when Newton is ambiguous."""
    ev = solve_tilting(G)
    if not use_lp or ev.hull_status == EXTERIOR:
        return ev
    if ev.interior:
        n = G.shape[0]
        with np.errstate(divide="ignore"):
            if np.log(n * ev.probabilities.min()) > -BOUNDARY_LOG_WEIGHT:
                return ev
        cert = hull_check(G)
        if cert.status == INTERIOR:
            return ev
        return EtelEvaluation(ev.lam, None, -np.inf, EXTERIOR, ev.solver_iterations, ev.grad_norm,
                              reason=f"LP: boundary point (delta={cert.margin:.3g})")
    cert = hull_check(G)
    if cert.status != INTERIOR:
        status = EXTERIOR if cert.status == EXTERIOR else INDETERMINATE
        return EtelEvaluation(ev.lam, None, -np.inf, status, ev.solver_iterations, ev.grad_norm,
                              reason=f"LP: {cert.reason or cert.status}")
    retry = solve_tilting(G, max_iter=500, lambda_cap=None, accept_tol=1e-7)
    if not retry.interior:
        log.debug("LP reports interior (delta=%.3g) but Newton failed: %s", cert.margin, retry.reason)
    return retry


def log_etel_at(model: MomentModel, theta) -> float:
    """Log ETEL at ``theta``; ``-inf`` when theta lies outside the hull set."""
    try:
        G = model.expand(theta)
    except NonFiniteMomentError:
        return -np.inf
    return evaluate(G).log_etel


def etel_gradient(model: MomentModel, theta, ev: EtelEvaluation, G=None, params=None) -> np.ndarray:
    """Gradient of the log ETEL with respect to theta (or a subset ``params``).

    Differentiates ``sum_i log p_i(theta)`` through the implicit tilting
    parameter: ``dl/dtheta = -A^{-1} sum_j p_j (I + g_j l') D_j`` with
    ``A = sum_j p_j g_j g_j'`` and ``D_j = dg_j/dtheta``.
    """
    if G is None:
        G = model.expand(theta)
    p = ev.probabilities
    lam = ev.lam
    n = G.shape[0]
    D = model.expand_jacobian(theta, params)
    lamD = np.einsum("m,nmq->nq", lam, D)
    Gp = G * p[:, None]
    A = Gp.T @ G
    B = np.einsum("n,nmq->mq", p, D) + Gp.T @ lamD
    try:
        dlam = -cho_solve(cho_factor(A, check_finite=False), B, check_finite=False)
    except (LinAlgError, ValueError):
        dlam = -np.linalg.lstsq(A, B, rcond=None)[0]
    return dlam.T @ G.sum(axis=0) + (1.0 - n * p) @ lamD


def log_etel_and_grad(model: MomentModel, theta, params=None):
    try:
        G = model.expand(theta)
    except NonFiniteMomentError:
        return -np.inf, None
    ev = evaluate(G)
    if not ev.interior:
        return -np.inf, None
    return ev.log_etel, etel_gradient(model, theta, ev, G, params)


def dump_evaluation(path, ev: EtelEvaluation, cert: HullCertificate | None = None) -> None:
    """Write lambda, the tilted probabilities and the LP margin to CSV."""
    with open(path, "w") as fh:
        fh.write("kind,index,value\n")
        for j, v in enumerate(ev.lam):
            fh.write(f"lambda,{j},{v!r}\n")
        if ev.probabilities is not None:
            for i, v in enumerate(ev.probabilities):
                fh.write(f"p,{i},{v!r}\n")
        fh.write(f"log_etel,0,{ev.log_etel!r}\n")
        if cert is not None:
            fh.write(f"delta,0,{cert.margin!r}\n")
