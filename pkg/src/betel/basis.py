"""Approximating-function matrices for expanding conditional moments.

Natural cubic splines per conditioning column, differenced spline blocks,
binary passthrough columns, and an optional SVD rotation that drops
near-null directions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_SVD_THRESHOLD = 1e-10

PLAN_KINDS = ("spline", "spline_differenced", "passthrough")


class BasisError(ValueError):
    """Invalid basis specification or degenerate input column."""


@dataclass(frozen=True)
class ColumnPlan:
    """One block of the basis matrix.

    ``columns`` holds one or more source column names; with more than one,
    their elementwise product is formed first and then treated as a single
    column (interaction-then-spline).
    """

    columns: tuple[str, ...]
    kind: str = "spline"

    def __post_init__(self):
        if isinstance(self.columns, str):
            object.__setattr__(self, "columns", (self.columns,))
        else:
            object.__setattr__(self, "columns", tuple(self.columns))
        if not self.columns:
            raise BasisError("column plan needs at least one source column")
        if self.kind not in PLAN_KINDS:
            raise BasisError(f"unknown plan kind {self.kind!r}; expected one of {PLAN_KINDS}")

    @property
    def label(self) -> str:
        return "*".join(self.columns)


@dataclass(frozen=True)
class BasisSpec:
    knot_count: int
    column_plans: tuple[ColumnPlan, ...]
    reduction: float | None = None  # relative SVD threshold, None = keep all columns

    def __post_init__(self):
        object.__setattr__(self, "column_plans", tuple(self.column_plans))
        if int(self.knot_count) != self.knot_count or self.knot_count < 2:
            raise BasisError(f"knot_count must be an integer >= 2, got {self.knot_count}")
        if self.reduction is not None and not 0.0 < self.reduction < 1.0:
            raise BasisError(f"SVD threshold must lie in (0, 1), got {self.reduction}")
        if not self.column_plans:
            raise BasisError("basis spec has no column plans")

    def column_count(self) -> int:
        """Number of columns before any SVD reduction."""
        k = self.knot_count
        sizes = {"spline": k, "spline_differenced": k - 1, "passthrough": 1}
        return sum(sizes[plan.kind] for plan in self.column_plans)


@dataclass
class BasisMatrix:
    values: np.ndarray
    column_labels: list[str] = field(default_factory=list)

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def to_csv(self, path) -> None:
        header = ",".join(self.column_labels)
        np.savetxt(path, self.values, delimiter=",", header=header, comments="")


def knots_from_quantiles(column, K: int, name: str = "column") -> np.ndarray:
    """Place ``K`` knots at the empirical quantiles j/(K+1), j = 1..K.

    Quantiles use linear interpolation between order statistics. When mass
    points make the knots tie (e.g. an interaction with a binary column that
    is zero for most rows) the quantiles are taken over the distinct values
    instead.
    """
    x = np.asarray(column, dtype=float)
    distinct = np.unique(x)
    if distinct.size < K:
        raise BasisError(
            f"degenerate column {name!r}: {distinct.size} distinct values, need at least {K}"
        )
    ranks = np.arange(1, K + 1) / (K + 1)
    knots = np.quantile(x, ranks)
    if np.any(np.diff(knots) <= 0):
        knots = np.quantile(distinct, ranks)
    if np.any(np.diff(knots) <= 0):
        raise BasisError(f"could not place {K} strictly increasing knots for {name!r}")
    return knots


def natural_cubic_basis(column, knots) -> np.ndarray:
    """Natural cubic spline basis with the truncated-power construction.

    Columns are ``1, x, d_1 - d_{K-1}, ..., d_{K-2} - d_{K-1}`` with
    ``d_k(x) = ((x - t_k)_+^3 - (x - t_K)_+^3) / (t_K - t_k)``.
    """
    x = np.asarray(column, dtype=float)
    t = np.asarray(knots, dtype=float)
    K = t.size
    if K < 2 or np.any(np.diff(t) <= 0):
        raise BasisError("knots must be strictly increasing with at least two entries")
    out = np.empty((x.size, K))
    out[:, 0] = 1.0
    out[:, 1] = x
    if K > 2:
        tail = np.maximum(x - t[-1], 0.0) ** 3

        def d(k):
            return (np.maximum(x - t[k], 0.0) ** 3 - tail) / (t[-1] - t[k])

        last = d(K - 2)
        for k in range(K - 2):
            out[:, k + 2] = d(k) - last
    return out


def differenced_basis(B) -> np.ndarray:
    """Subtract every column from the first, then drop the first."""
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[1] < 2:
        raise BasisError("differenced basis needs at least two columns")
    return B[:, :1] - B[:, 1:]


def reduce_by_svd(basis: BasisMatrix, threshold: float = DEFAULT_SVD_THRESHOLD) -> BasisMatrix:
    """Rotate by the right singular vectors and drop low-singular-value columns."""
    if not 0.0 < threshold < 1.0:
        raise BasisError(f"SVD threshold must lie in (0, 1), got {threshold}")
    B = np.asarray(basis.values, dtype=float)
    if B.size == 0:
        raise BasisError("cannot reduce an empty basis")
    _, s, vt = np.linalg.svd(B, full_matrices=False)
    if s[0] <= 0.0:
        raise BasisError("basis matrix has rank zero")
    keep = s >= threshold * s[0]
    rotated = B @ vt[keep].T
    labels = [f"rot{j + 1}" for j in np.flatnonzero(keep)]
    return BasisMatrix(rotated, labels)


def _is_binary(x) -> bool:
    return np.all((x == 0.0) | (x == 1.0))


def build_basis(data, spec: BasisSpec) -> BasisMatrix:
    """Assemble the basis matrix block by block in plan order.

    ``data`` is anything indexable by column name (a ``Dataset`` or a dict of
    arrays).
    """
    blocks, labels = [], []
    for plan in spec.column_plans:
        try:
            cols = [np.asarray(data[c], dtype=float) for c in plan.columns]
        except KeyError as exc:
            raise BasisError(f"basis references missing column {exc.args[0]!r}") from None
        x = cols[0].copy()
        for c in cols[1:]:
            x = x * c
        if plan.kind == "passthrough":
            blocks.append(x[:, None])
            labels.append(plan.label)
            continue
        if _is_binary(x):
            raise BasisError(f"binary column {plan.label!r} can only be passed through")
        knots = knots_from_quantiles(x, spec.knot_count, name=plan.label)
        B = natural_cubic_basis(x, knots)
        if plan.kind == "spline":
            blocks.append(B)
            labels.extend(f"{plan.label}:ns{j + 1}" for j in range(B.shape[1]))
        else:
            Bd = differenced_basis(B)
            blocks.append(Bd)
            labels.extend(f"{plan.label}:dns{j + 1}" for j in range(Bd.shape[1]))
    out = BasisMatrix(np.hstack(blocks), labels)
    if spec.reduction is not None:
        out = reduce_by_svd(out, spec.reduction)
    zero = ~np.any(out.values != 0.0, axis=0)
    if np.any(zero):
        bad = [out.column_labels[j] for j in np.flatnonzero(zero)]
        raise BasisError(f"basis columns identically zero: {bad}")
    return out


def conditioning_plans(continuous: Sequence[str], binary: Sequence[str] = ()) -> list[ColumnPlan]:
    """Plans for a set of conditioning variables, laid out as in the IV examples.

    The first continuous variable gets a full spline block. The remaining
    continuous variables, pairwise products of continuous variables, and
    products of each continuous variable with each binary variable get
    differenced spline blocks. Binary variables are appended as is.
    """
    continuous = list(continuous)
    binary = list(binary)
    if not continuous:
        return [ColumnPlan((b,), "passthrough") for b in binary]
    plans = [ColumnPlan((continuous[0],), "spline")]
    plans += [ColumnPlan((c,), "spline_differenced") for c in continuous[1:]]
    for i in range(len(continuous)):
        for j in range(i + 1, len(continuous)):
            plans.append(ColumnPlan((continuous[i], continuous[j]), "spline_differenced"))
    for c in continuous:
        for b in binary:
            plans.append(ColumnPlan((c, b), "spline_differenced"))
    plans += [ColumnPlan((b,), "passthrough") for b in binary]
    return plans


def k_rule(n: int) -> int:
    """Knots per conditioning block: ``max(2, floor(2 n^(1/6)))``."""
    return max(2, int(np.floor(2.0 * n ** (1.0 / 6.0) + 1e-12)))
