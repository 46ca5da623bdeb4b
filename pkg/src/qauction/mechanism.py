"""Core auction accounting: allocations, payments, feasibility, welfare.

Allocation matrices are plain (n, M) float arrays where entry (i, S) is the
probability of assigning bundle S to host i; payment vectors are (n,) float
arrays. Shared by the exact baselines and the learned mechanism.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .valuation import BundleIndex

FEASIBILITY_TOL = 1e-6
IR_TOL = 1e-9


@dataclass(frozen=True)
class FeasibilityReport:
    """Worst constraint violations of an allocation matrix."""

    ok: bool
    max_row_excess: float
    max_action_excess: float
    tol: float = FEASIBILITY_TOL


def check_feasibility(x, index: BundleIndex, tol: float = FEASIBILITY_TOL) -> FeasibilityReport:
    """Check the two feasibility constraints of the allocation polytope.

    Every host receives at most one bundle (row sums <= 1) and every action is
    assigned at most once across all bundles (per-action loads <= 1), both up
    to ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != index.num_bundles:
        raise InvalidInputError(f"allocation must be (n, {index.num_bundles}), got {x.shape}")
    if x.min() < -tol or x.max() > 1.0 + tol:
        raise InvalidInputError("allocation entries must lie in [0, 1]")
    row_excess = float(max(0.0, x.sum(axis=1).max(initial=0.0) - 1.0))
    member = index.membership_matrix().astype(np.float64)  # |A| x M
    loads = x @ member.T  # (n, |A|) per-host action mass
    action_excess = float(max(0.0, loads.sum(axis=0).max(initial=0.0) - 1.0))
    ok = row_excess <= tol and action_excess <= tol
    return FeasibilityReport(ok=ok, max_row_excess=row_excess, max_action_excess=action_excess, tol=tol)


def welfare(x, values) -> float:
    """Expected total value of an allocation: sum_i sum_S x[i,S] * v[i,S]."""
    x = np.asarray(x, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if x.shape != values.shape:
        raise InvalidInputError(f"allocation shape {x.shape} != values shape {values.shape}")
    return float((x * values).sum())


def utility(i: int, x, payments, true_values) -> float:
    """Agent i's expected value under its true valuations, minus its payment."""
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(payments, dtype=np.float64)
    v = np.asarray(true_values, dtype=np.float64)
    if not (0 <= i < x.shape[0]):
        raise InvalidInputError(f"agent index {i} out of range for n={x.shape[0]}")
    return float(x[i] @ v[i] - p[i])


@dataclass(frozen=True)
class MechanismOutcome:
    """Allocation plus payments, with derived revenue and welfare."""

    allocation: np.ndarray
    payments: np.ndarray
    revenue: float
    welfare: float

    @classmethod
    def from_parts(cls, allocation, payments, reported_values) -> "MechanismOutcome":
        allocation = np.asarray(allocation, dtype=np.float64)
        payments = np.asarray(payments, dtype=np.float64)
        return cls(
            allocation=allocation,
            payments=payments,
            revenue=float(payments.sum()),
            welfare=welfare(allocation, reported_values),
        )


def ir_check(outcome: MechanismOutcome, true_values, tol: float = IR_TOL) -> np.ndarray:
    """Per-agent individual rationality: utility >= -tol under true values."""
    n = outcome.allocation.shape[0]
    return np.array(
        [utility(i, outcome.allocation, outcome.payments, true_values) >= -tol for i in range(n)],
        dtype=bool,
    )


def allocation_to_csv(x, index: BundleIndex) -> str:
    """Serialize an allocation matrix: n rows x M bundle-labelled columns."""
    x = np.asarray(x, dtype=np.float64)
    buf = io.StringIO()
    buf.write(",".join(index.labels()) + "\n")
    for row in x:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def outcome_to_json(outcome: MechanismOutcome, index: BundleIndex) -> dict:
    """JSON-ready view of an outcome, bundle columns labelled."""
    return {
        "bundles": index.labels(),
        "allocation": [[float(v) for v in row] for row in outcome.allocation],
        "payments": [float(p) for p in outcome.payments],
        "revenue": float(outcome.revenue),
        "welfare": float(outcome.welfare),
    }
