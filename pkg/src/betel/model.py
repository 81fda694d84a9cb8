"""Conditional moment models and their expansion into unconditional moments.

A model carries a vectorised residual map ``rho(theta) -> (n, d)`` over the
whole sample, its Jacobian ``(n, d, p)``, and a list of expansion blocks.
Each block tensors a subset of residuals with a basis matrix (or passes the
residuals through unchanged), so that row ``i`` of the expanded matrix is
``rho_block(x_i, theta) (x) q(z_i)`` concatenated over blocks, residual-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .basis import (
    BasisMatrix,
    BasisSpec,
    ColumnPlan,
    build_basis,
    differenced_basis,
    k_rule,
    knots_from_quantiles,
    natural_cubic_basis,
)


class ModelError(ValueError):
    pass


class NonFiniteMomentError(FloatingPointError):
    def __init__(self, index: int):
        super().__init__(f"non-finite expanded moment at observation {index}")
        self.index = index


@dataclass
class ExpansionBlock:
    residual_index: tuple[int, ...]
    basis: np.ndarray | None = None  # None: identity passthrough
    labels: list[str] = field(default_factory=list)

    @property
    def width(self) -> int:
        return 1 if self.basis is None else self.basis.shape[1]


def _as_basis_array(basis) -> tuple[np.ndarray, list[str]]:
    if isinstance(basis, BasisMatrix):
        return np.asarray(basis.values, float), list(basis.column_labels)
    arr = np.asarray(basis, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr, [f"q{j + 1}" for j in range(arr.shape[1])]


def _fd_jacobian(residual, theta, n, d):
    theta = np.asarray(theta, float)
    p = theta.size
    J = np.empty((n, d, p))
    for j in range(p):
        h = 1e-6 * (1.0 + abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        J[:, :, j] = (residual(up) - residual(dn)) / (2.0 * h)
    return J


class MomentModel:
    """Residual map plus expansion plan, bound to one sample.

    Parameters
    ----------
    param_names : sequence of str
    residual : callable
        ``theta -> (n, d)`` array of residuals for every observation.
    blocks : list of ExpansionBlock
    jacobian : callable, optional
        ``theta -> (n, d, p)``. Central differences with step
        ``1e-6 (1 + |theta_j|)`` are used when omitted.
    linear : bool
        Declares the residual affine in theta, so the Jacobian is cached.
    """

    def __init__(self, param_names, residual: Callable, blocks, jacobian: Callable | None = None,
                 linear: bool = False, meta: dict | None = None):
        self.param_names = list(param_names)
        self._residual = residual
        self._jacobian = jacobian
        self.blocks = list(blocks)
        self.linear = linear
        self.meta = dict(meta or {})
        probe = np.asarray(residual(np.zeros(self.p)), float)
        if probe.ndim == 1:
            probe = probe[:, None]
        self.n, self.residual_dim = probe.shape
        for b in self.blocks:
            if b.basis is not None and b.basis.shape[0] != self.n:
                raise ModelError("basis rows do not match the number of observations")
            if any(not 0 <= i < self.residual_dim for i in b.residual_index):
                raise ModelError(f"block references residual outside 0..{self.residual_dim - 1}")
        self._jac_cache = None

    @property
    def p(self) -> int:
        return len(self.param_names)

    @property
    def moment_dim(self) -> int:
        return sum(len(b.residual_index) * b.width for b in self.blocks)

    @property
    def moment_labels(self) -> list[str]:
        out = []
        for b in self.blocks:
            for i in b.residual_index:
                if b.basis is None:
                    out.append(f"rho{i + 1}")
                else:
                    out.extend(f"rho{i + 1}*{lab}" for lab in b.labels)
        return out

    def residuals(self, theta) -> np.ndarray:
        r = np.asarray(self._residual(np.asarray(theta, float)), float)
        return r[:, None] if r.ndim == 1 else r

    def jacobian(self, theta) -> np.ndarray:
        if self.linear and self._jac_cache is not None:
            return self._jac_cache
        theta = np.asarray(theta, float)
        if self._jacobian is None:
            J = _fd_jacobian(self.residuals, theta, self.n, self.residual_dim)
        else:
            J = np.asarray(self._jacobian(theta), float)
            if J.ndim == 2:
                J = J[:, None, :]
        if self.linear:
            self._jac_cache = J
        return J

    def expand(self, theta) -> np.ndarray:
        """The n x m_g matrix of expanded moments at ``theta``."""
        R = self.residuals(theta)
        parts = []
        for b in self.blocks:
            r = R[:, b.residual_index]
            if b.basis is None:
                parts.append(r)
            elif r.shape[1] == 1:
                parts.append(r * b.basis)
            else:
                parts.append((r[:, :, None] * b.basis[:, None, :]).reshape(self.n, -1))
        G = parts[0] if len(parts) == 1 else np.hstack(parts)
        if not np.all(np.isfinite(G)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(G), axis=1))[0])
            raise NonFiniteMomentError(bad)
        return G

    def expand_jacobian(self, theta, params=None) -> np.ndarray:
        """Derivative of the expanded moments, shape (n, m_g, len(params))."""
        J = self.jacobian(theta)
        if params is not None:
            J = J[:, :, params]
        parts = []
        for b in self.blocks:
            Jb = J[:, b.residual_index, :]
            if b.basis is None:
                parts.append(Jb)
            else:
                parts.append((Jb[:, :, None, :] * b.basis[:, None, :, None]).reshape(self.n, -1, J.shape[2]))
        return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)

    def restrict(self, fixed: dict) -> "MomentModel":
        """Hold some parameters at given values and keep the rest free."""
        unknown = set(fixed) - set(self.param_names)
        if unknown:
            raise ModelError(f"cannot fix unknown parameters {sorted(unknown)}")
        free = [j for j, nm in enumerate(self.param_names) if nm not in fixed]
        full = np.zeros(self.p)
        for nm, v in fixed.items():
            full[self.param_names.index(nm)] = v

        def embed(theta):
            t = full.copy()
            t[free] = theta
            return t

        parent = self
        jac = lambda theta: parent.jacobian(embed(theta))[:, :, free]  # noqa: E731
        meta = dict(self.meta, fixed={**self.meta.get("fixed", {}), **fixed})
        return MomentModel([self.param_names[j] for j in free], lambda th: parent.residuals(embed(th)),
                           self.blocks, jacobian=jac, linear=self.linear, meta=meta)


def _single_block(basis, residual_dim=1):
    arr, labels = _as_basis_array(basis)
    return [ExpansionBlock(tuple(range(residual_dim)), arr, labels)]


def _columns(data, names, what):
    missing = [c for c in names if c not in data]
    if missing:
        raise ModelError(f"{what}: missing columns {missing}")
    return np.column_stack([np.asarray(data[c], float) for c in names]) if names else None


def _design(data, x, intercept, n):
    X = _columns(data, list(x), "regressors")
    if X is None:
        X = np.empty((n, 0))
    if intercept:
        X = np.column_stack([np.ones(n), X])
    return X


def linear_regression_model(data, y: str, x: Sequence[str], basis, intercept: bool = True,
                            names: Sequence[str] | None = None) -> MomentModel:
    """``rho = y - x'theta`` with a single residual tensored with ``basis``."""
    yv = _columns(data, [y], "outcome")[:, 0]
    n = yv.size
    X = _design(data, x, intercept, n)
    if n < X.shape[1]:
        raise ModelError("fewer observations than parameters")
    if names is None:
        names = [f"theta{j}" for j in range(X.shape[1])]
    J = -X[:, None, :]
    return MomentModel(names, lambda th: yv - X @ th, _single_block(basis),
                       jacobian=lambda th: J, linear=True,
                       meta={"kind": "linear", "design": X, "y": yv})


def symmetric_error_model(data, y: str, x: Sequence[str], basis, intercept: bool = True) -> MomentModel:
    """Residual vector ``(e, e^3)`` for a conditionally symmetric error."""
    yv = _columns(data, [y], "outcome")[:, 0]
    n = yv.size
    X = _design(data, x, intercept, n)
    names = [f"theta{j}" for j in range(X.shape[1])]

    def residual(th):
        e = yv - X @ th
        return np.column_stack([e, e ** 3])

    def jacobian(th):
        e = yv - X @ th
        return np.stack([-X, -3.0 * (e ** 2)[:, None] * X], axis=1)

    return MomentModel(names, residual, _single_block(basis, 2), jacobian=jacobian,
                       meta={"kind": "symmetric", "design": X, "y": yv})


def iv_model(data, y: str, endogenous: str, basis, exogenous: Sequence[str] = (),
             intercept: bool = True) -> MomentModel:
    """``rho = y - theta0 - theta1 x - w'gamma``; the basis carries the instruments."""
    names = (["theta0"] if intercept else []) + ["theta1"] + [f"gamma{j + 1}" for j in range(len(exogenous))]
    model = linear_regression_model(data, y, [endogenous, *exogenous], basis, intercept, names=names)
    model.meta["kind"] = "iv"
    return model


def sdf_model(panel, market: int = 0, K: int = 3) -> MomentModel:
    """Stochastic-discount-factor pricing model with a lag-conditioned mean.

    ``panel`` is a (T, k_f) array of factor returns. Observations are the
    pairs (f_t, f_{t-1}), t = 2..T. Moments: the pricing restrictions
    ``(1 - b (x_t - mu)) f_t`` passed through unexpanded, and ``x_t - mu``
    tensored with splines of the lagged factors (full spline for the first
    factor, differenced splines for the rest).
    """
    F = np.asarray(panel, float)
    if F.ndim != 2 or F.shape[0] < K + 2:
        raise ModelError("factor panel too short to build lagged observations")
    f_now, f_lag = F[1:], F[:-1]
    x = f_now[:, market]
    n, kf = f_now.shape
    blocks_q, labels = [], []
    for j in range(kf):
        B = natural_cubic_basis(f_lag[:, j], knots_from_quantiles(f_lag[:, j], K, name=f"f{j + 1}_lag"))
        if j == 0:
            blocks_q.append(B)
            labels += [f"f{j + 1}_lag:ns{k + 1}" for k in range(K)]
        else:
            blocks_q.append(differenced_basis(B))
            labels += [f"f{j + 1}_lag:dns{k + 1}" for k in range(K - 1)]
    Q = np.hstack(blocks_q)

    def residual(th):
        b, mu = th
        m = 1.0 - b * (x - mu)
        return np.column_stack([m[:, None] * f_now, x - mu])

    def jacobian(th):
        b, mu = th
        J = np.zeros((n, kf + 1, 2))
        J[:, :kf, 0] = -(x - mu)[:, None] * f_now
        J[:, :kf, 1] = b * f_now
        J[:, kf, 1] = -1.0
        return J

    blocks = [ExpansionBlock(tuple(range(kf)), None),
              ExpansionBlock((kf,), Q, labels)]
    return MomentModel(["b", "mu_x"], residual, blocks, jacobian=jacobian,
                       meta={"kind": "sdf", "market": market})


def spline_terms(z, knots) -> np.ndarray:
    """Natural spline columns without the constant (K - 1 of them)."""
    return natural_cubic_basis(z, knots)[:, 1:]


def partially_linear_model(data, y: str, linear: Sequence[str], splines: Sequence[str], knots: int, basis,
                           intercept: bool = True) -> MomentModel:
    """``rho = y - b0 - z_lin'b - sum_j h_j(z_j)`` with spline-modelled ``h_j``."""
    yv = _columns(data, [y], "outcome")[:, 0]
    n = yv.size
    X = _design(data, linear, intercept, n)
    names = (["beta0"] if intercept else []) + [f"beta_{c}" for c in linear]
    knot_map = {}
    for c in splines:
        z = _columns(data, [c], "spline")[:, 0]
        t = knots_from_quantiles(z, knots, name=c)
        knot_map[c] = t
        S = spline_terms(z, t)
        X = np.column_stack([X, S])
        names += [f"h_{c}_{k + 1}" for k in range(S.shape[1])]
    J = -X[:, None, :]
    meta = {"kind": "partially_linear", "linear": list(linear), "splines": list(splines),
            "knots": knot_map, "intercept": intercept, "design": X, "y": yv}
    return MomentModel(names, lambda th: yv - X @ th, _single_block(basis),
                       jacobian=lambda th: J, linear=True, meta=meta)


def partially_linear_design(model: MomentModel, data) -> np.ndarray:
    """Regressor matrix of a partially linear model evaluated on ``data``."""
    meta = model.meta
    n = np.asarray(data[meta["linear"][0] if meta["linear"] else meta["splines"][0]]).size
    X = _design(data, meta["linear"], meta["intercept"], n)
    for c in meta["splines"]:
        X = np.column_stack([X, spline_terms(np.asarray(data[c], float), meta["knots"][c])])
    return X


def average_treatment_effect(control: MomentModel, control_draws, treated: MomentModel, treated_draws,
                             data) -> np.ndarray:
    """Posterior draws of the sample ATE from paired potential-outcome draws."""
    X0 = partially_linear_design(control, data)
    X1 = partially_linear_design(treated, data)
    m = min(len(control_draws), len(treated_draws))
    d0 = np.asarray(control_draws)[:m]
    d1 = np.asarray(treated_draws)[:m]
    return (d1 @ X1.mean(axis=0)) - (d0 @ X0.mean(axis=0))


# ---------------------------------------------------------------- config ---

def basis_spec_from_config(cfg: dict, n: int) -> BasisSpec:
    K = cfg.get("K", "auto")
    K = k_rule(n) if K in (None, "auto") else int(K)
    plans = [ColumnPlan(tuple(p["columns"]) if not isinstance(p["columns"], str) else (p["columns"],),
                        p.get("kind", "spline")) for p in cfg["plans"]]
    return BasisSpec(K, plans, cfg.get("reduction"))


def build_model(data, cfg: dict) -> MomentModel:
    """Construct a model from a JSON-style description.

    Recognised ``kind`` values: linear, symmetric, iv, partially_linear, sdf.
    ``fixed`` (optional) holds parameters at given values.
    """
    kind = cfg.get("kind")
    try:
        if kind == "sdf":
            cols = cfg["factors"]
            model = sdf_model(np.column_stack([data[c] for c in cols]), cfg.get("market", 0), cfg.get("K", 3))
        else:
            basis = build_basis(data, basis_spec_from_config(cfg["basis"], len(data[cfg["y"]])))
            if kind == "linear":
                model = linear_regression_model(data, cfg["y"], cfg.get("x", []), basis, cfg.get("intercept", True))
            elif kind == "symmetric":
                model = symmetric_error_model(data, cfg["y"], cfg.get("x", []), basis, cfg.get("intercept", True))
            elif kind == "iv":
                model = iv_model(data, cfg["y"], cfg["endogenous"], basis, cfg.get("exogenous", []),
                                 cfg.get("intercept", True))
            elif kind == "partially_linear":
                model = partially_linear_model(data, cfg["y"], cfg.get("linear", []), cfg.get("splines", []),
                                               cfg.get("knots", 5), basis, cfg.get("intercept", True))
            else:
                raise ModelError(f"unknown model kind {kind!r}")
    except KeyError as exc:
        raise ModelError(f"model config missing field {exc.args[0]!r}") from None
    if cfg.get("fixed"):
        model = model.restrict(cfg["fixed"])
    return model
