"""Exact and heuristic reference mechanisms.

Winner determination by dynamic programming over action subsets, an
exhaustive cross-check solver, VCG payments via the Clarke pivot rule, the
per-agent greedy heuristic, and a black-box misreport search used to probe
any mechanism's strategyproofness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import UnsupportedSizeError
from .mechanism import MechanismOutcome
from .valuation import BundleIndex

MAX_DP_ACTIONS = 16
MAX_BRUTE_FORCE_AGENTS = 6


@dataclass(frozen=True)
class WdSolution:
    """A welfare-maximizing, action-disjoint assignment of bundles to agents.

    ``assignment[i]`` is the bundle index allocated to agent i, or None for
    the null outcome. Ties are broken deterministically: prefer null, then
    the lowest bundle index, resolving at the lowest agent index first.
    """

    assignment: tuple[Optional[int], ...]
    welfare: float
    used_actions: int

    def allocation_matrix(self, num_bundles: int) -> np.ndarray:
        x = np.zeros((len(self.assignment), num_bundles), dtype=np.float64)
        for i, j in enumerate(self.assignment):
            if j is not None:
                x[i, j] = 1.0
        return x


def solve_wd(values, index: BundleIndex) -> WdSolution:
    """Exact winner determination by DP over (agent, remaining action set).

    O(n * 2^|A| * M); exactness is what makes the VCG payments meaningful.
    """
    if index.num_actions > MAX_DP_ACTIONS:
        raise UnsupportedSizeError(f"subset DP supports at most {MAX_DP_ACTIONS} actions")
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    full = (1 << index.num_actions) - 1
    masks = [b.mask for b in index.bundles]
    rows = values.tolist()

    # dp[i][mask]: best welfare for agents i.. with `mask` actions still free.
    dp = [[0.0] * (full + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row = rows[i]
        nxt = dp[i + 1]
        cur = dp[i]
        for mask in range(full + 1):
            best = nxt[mask]
            for j, bm in enumerate(masks):
                if bm & mask == bm:
                    cand = row[j] + nxt[mask & ~bm]
                    if cand > best:
                        best = cand
            cur[mask] = best

    assignment: list[Optional[int]] = []
    used = 0
    mask = full
    total = dp[0][full]
    for i in range(n):
        row = rows[i]
        nxt = dp[i + 1]
        target = dp[i][mask]
        if nxt[mask] == target:  # null preferred on ties
            assignment.append(None)
            continue
        for j, bm in enumerate(masks):
            if bm & mask == bm and row[j] + nxt[mask & ~bm] == target:
                assignment.append(j)
                used |= bm
                mask &= ~bm
                break
    return WdSolution(assignment=tuple(assignment), welfare=float(total), used_actions=used)


def brute_force_wd(values, index: BundleIndex) -> WdSolution:
    """Exhaustive enumeration of all feasible joint assignments (test oracle).

    Enumerates in the same lexicographic order as solve_wd's tie-break (null
    before bundles, ascending bundle index, agent 0 outermost) and keeps the
    first strictly better assignment, so solutions match solve_wd exactly.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if n > MAX_BRUTE_FORCE_AGENTS:
        raise UnsupportedSizeError(f"brute force supports at most {MAX_BRUTE_FORCE_AGENTS} agents")
    masks = [b.mask for b in index.bundles]
    rows = values.tolist()

    best_assignment: list[Optional[int]] = [None] * n
    best_welfare = 0.0
    current: list[Optional[int]] = [None] * n

    def suffix_welfare(i: int) -> float:
        # Right-associated sum in agent order, matching the DP's additions.
        w = 0.0
        for k in range(n - 1, i - 1, -1):
            j = current[k]
            if j is not None:
                w = rows[k][j] + w
        return w

    def rec(i: int, free: int):
        nonlocal best_welfare, best_assignment
        if i == n:
            w = suffix_welfare(0)
            if w > best_welfare:
                best_welfare = w
                best_assignment = current.copy()
            return
        current[i] = None
        rec(i + 1, free)
        for j, bm in enumerate(masks):
            if bm & free == bm:
                current[i] = j
                rec(i + 1, free & ~bm)
        current[i] = None

    if n == 0:
        return WdSolution(assignment=(), welfare=0.0, used_actions=0)
    rec(0, (1 << index.num_actions) - 1)
    used = 0
    for j in best_assignment:
        if j is not None:
            used |= masks[j]
    return WdSolution(assignment=tuple(best_assignment), welfare=float(best_welfare), used_actions=used)


def vcg_payments(values, index: BundleIndex) -> MechanismOutcome:
    """Welfare-maximizing allocation with Clarke-pivot payments.

    p_i = W(-i) - (W* - v_i(S_i*)): the externality agent i imposes on the
    rest, clamped at zero. Unassigned agents pay nothing.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    sol = solve_wd(values, index)
    payments = np.zeros(n, dtype=np.float64)
    for i, j in enumerate(sol.assignment):
        if j is None:
            continue
        others = np.delete(values, i, axis=0)
        w_without = solve_wd(others, index).welfare if n > 1 else 0.0
        payments[i] = max(0.0, w_without - (sol.welfare - values[i, j]))
    x = sol.allocation_matrix(index.num_bundles)
    return MechanismOutcome.from_parts(x, payments, values)


def greedy_allocate(values, index: BundleIndex) -> np.ndarray:
    """Each agent gets an indicator at its own argmax bundle.

    Deliberately ignores global feasibility: two agents may both claim the
    same actions. Ties go to the lowest bundle index.
    """
    values = np.asarray(values, dtype=np.float64)
    n, m = values.shape
    x = np.zeros((n, m), dtype=np.float64)
    x[np.arange(n), values.argmax(axis=1)] = 1.0
    return x


@dataclass(frozen=True)
class MisreportSearchBudget:
    """Search effort for the black-box misreport probe."""

    grid_step: float = 0.05
    refine_steps: int = 50
    max_grid_points: int = 20_000
    coordinate_passes: int = 2
    improve_tol: float = 1e-12
    min_refine_step: float = 1e-7


def measured_regret(
    mechanism: Callable[[np.ndarray], MechanismOutcome],
    values,
    i: int,
    budget: MisreportSearchBudget = MisreportSearchBudget(),
) -> float:
    """Best utility gain agent i can obtain by misreporting, found by search.

    The mechanism is any deterministic map from a reported profile to an
    outcome. The search scans a grid over [0,1]^M (full Cartesian product when
    small enough, coordinate-ascent passes otherwise) and then refines the
    best point by pattern search with a shrinking step. The truthful report is
    always a candidate, so the result is floored at zero.
    """
    values = np.asarray(values, dtype=np.float64)
    true_row = values[i].copy()
    m = true_row.shape[0]

    def agent_utility(report_row: np.ndarray) -> float:
        reported = values.copy()
        reported[i] = report_row
        out = mechanism(reported)
        return float(out.allocation[i] @ true_row - out.payments[i])

    u_truth = agent_utility(true_row)
    best_row = true_row.copy()
    best_u = u_truth

    n_pts = int(round(1.0 / budget.grid_step)) + 1
    grid = np.linspace(0.0, 1.0, n_pts)

    if n_pts**m <= budget.max_grid_points:
        for flat in np.ndindex(*([n_pts] * m)):
            cand = grid[list(flat)]
            u = agent_utility(cand)
            if u > best_u + budget.improve_tol:
                best_u, best_row = u, cand.copy()
    else:
        for _ in range(budget.coordinate_passes):
            improved = False
            for d in range(m):
                for g in grid:
                    cand = best_row.copy()
                    cand[d] = g
                    u = agent_utility(cand)
                    if u > best_u + budget.improve_tol:
                        best_u, best_row = u, cand
                        improved = True
            if not improved:
                break

    delta = budget.grid_step / 2.0
    for _ in range(budget.refine_steps):
        improved = False
        for d in range(m):
            for sign in (1.0, -1.0):
                cand = best_row.copy()
                cand[d] = min(1.0, max(0.0, cand[d] + sign * delta))
                u = agent_utility(cand)
                if u > best_u + budget.improve_tol:
                    best_u, best_row = u, cand
                    improved = True
        if not improved:
            delta /= 2.0
            if delta < budget.min_refine_step:
                break

    return max(0.0, best_u - u_truth)
