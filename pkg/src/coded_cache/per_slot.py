"""Per-slot placement problem: predicted delay + replacement cost, as an LP.

The max over partial-download delays becomes epigraph rows
``u[k, f] >= D_k^{f, j}(lambda)`` for every reachable node rank ``j``, and the
positive part of each cache increment becomes ``v >= lambda - lambda_prev``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .net_model import CAPACITY_EPS, Topology, delay_matrix, replacement_cost

log = logging.getLogger(__name__)


def allocation_weights(prev_user_demand: np.ndarray) -> np.ndarray:
    """Per-file user shares from last slot's ``(K, F)`` counts; uniform if a file had none."""
    d = np.asarray(prev_user_demand, dtype=float)
    K = d.shape[0]
    tot = d.sum(axis=0)
    w = np.full(d.shape, 1.0 / K)
    nz = tot > 0
    w[:, nz] = d[:, nz] / tot[nz]
    return w


@dataclass
class PerSlotProblem:
    topology: Topology
    prev_cache: np.ndarray  # (N, F)
    predicted: np.ndarray  # (F,)
    weights: np.ndarray  # (K, F), columns sum to 1
    beta: float
    capacity: float
    file_size: float = 1.0

    def __post_init__(self):
        self.prev_cache = np.asarray(self.prev_cache, dtype=float)
        self.predicted = np.asarray(self.predicted, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if not (np.all(np.isfinite(self.predicted)) and np.all(np.isfinite(self.prev_cache))):
            raise ValueError("problem inputs must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.prev_cache.shape

    def demand_weights(self) -> np.ndarray:
        """``(K, F)`` effective request counts ``w[k, f] * predicted[f]``."""
        return self.weights * self.predicted[None, :]


def predicted_delay_cost(problem: PerSlotProblem, cache: np.ndarray) -> float:
    D = delay_matrix(problem.topology, cache, problem.file_size)
    return float(np.sum(problem.demand_weights() * D))


def objective(problem: PerSlotProblem, cache: np.ndarray) -> float:
    return predicted_delay_cost(problem, cache) + problem.beta * replacement_cost(problem.prev_cache, cache)


@dataclass
class EpigraphLP:
    c: np.ndarray
    A_ub: sparse.csr_matrix
    b_ub: np.ndarray
    bounds: list[tuple[float | None, float | None]]
    n_lambda: int
    n_epigraph: int
    n_replacement: int
    n_epigraph_rows: int
    n_replacement_rows: int
    n_capacity_rows: int
    scale: float  # objective units per LP unit
    names: list[str]

    @property
    def n_vars(self) -> int:
        return len(self.c)


def build_epigraph_lp(problem: PerSlotProblem, include_replacement: bool | None = None) -> EpigraphLP:
    """Assemble the LP. Variable order: lambda (node-major), u (user-major), v.

    Delay coefficients are divided by ``B * max delay`` so the LP works in
    O(1) units; ``EpigraphLP.scale`` converts back.
    """
    topo = problem.topology
    N, F = problem.shape
    K = topo.n_users
    if include_replacement is None:
        include_replacement = problem.beta > 0
    scale = problem.file_size * float(topo.per_bit_delay.max())
    wd = problem.demand_weights()

    n_lam, n_u = N * F, K * F
    n_v = N * F if include_replacement else 0
    lam_idx = lambda n, f: n * F + f  # noqa: E731  (n is the 0-based cache row)
    u_idx = lambda k, f: n_lam + k * F + f  # noqa: E731

    c = np.zeros(n_lam + n_u + n_v)
    for k in range(K):
        for f in range(F):
            c[u_idx(k, f)] = wd[k, f]
    if include_replacement:
        c[n_lam + n_u :] = problem.beta / scale

    rows, cols, vals, rhs = [], [], [], []
    r = 0
    for k, reach in enumerate(topo.reachable_sets):
        delta = topo.per_bit_delay[k, reach] * problem.file_size / scale
        for f in range(F):
            for j in range(len(reach)):
                # B * [delta_j + sum_{i<j} lam_i (delta_i - delta_j)] - u <= 0
                for i in range(j):
                    rows.append(r)
                    cols.append(lam_idx(reach[i] - 1, f))
                    vals.append(delta[i] - delta[j])
                rows.append(r)
                cols.append(u_idx(k, f))
                vals.append(-1.0)
                rhs.append(-delta[j])
                r += 1
    n_epi_rows = r
    if include_replacement:
        for n in range(N):
            for f in range(F):
                rows += [r, r]
                cols += [lam_idx(n, f), n_lam + n_u + lam_idx(n, f)]
                vals += [1.0, -1.0]
                rhs.append(problem.prev_cache[n, f])
                r += 1
    n_rep_rows = r - n_epi_rows
    for n in range(N):
        for f in range(F):
            rows.append(r)
            cols.append(lam_idx(n, f))
            vals.append(1.0)
        rhs.append(problem.capacity)
        r += 1
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(r, len(c)))
    bounds = [(0.0, 1.0)] * n_lam + [(None, None)] * n_u + [(0.0, None)] * n_v
    names = (
        [f"lam_{n + 1}_{f}" for n in range(N) for f in range(F)]
        + [f"u_{k}_{f}" for k in range(K) for f in range(F)]
        + [f"v_{n + 1}_{f}" for n in range(N) for f in range(F)][:n_v]
    )
    return EpigraphLP(c, A, np.asarray(rhs), bounds, n_lam, n_u, n_v, n_epi_rows, n_rep_rows, N, scale, names)


@dataclass
class PlacementSolution:
    cache: np.ndarray
    objective: float
    status: str
    success: bool


def _repair(cache: np.ndarray, capacity: float) -> np.ndarray:
    cache = np.clip(cache, 0.0, 1.0)
    sums = cache.sum(axis=1)
    over = sums > capacity
    if np.any(over):
        cache[over] *= (capacity / sums[over])[:, None]
        cache = np.minimum(cache, 1.0)
    return cache


def solve_per_slot(problem: PerSlotProblem) -> PlacementSolution:
    """Solve the per-slot LP with HiGHS; keeps the previous cache on failure."""
    N, F = problem.shape
    if problem.capacity <= 0:
        cache = np.zeros((N, F))
        return PlacementSolution(cache, objective(problem, cache), "zero capacity", True)
    lp = build_epigraph_lp(problem)
    res = linprog(lp.c, A_ub=lp.A_ub, b_ub=lp.b_ub, bounds=lp.bounds, method="highs")
    if res.status != 0:
        log.warning("per-slot LP failed (%s); keeping previous cache", res.message)
        prev = _repair(problem.prev_cache.copy(), problem.capacity)
        return PlacementSolution(prev, objective(problem, prev), res.message, False)
    cache = _repair(res.x[: lp.n_lambda].reshape(N, F), problem.capacity)
    return PlacementSolution(cache, objective(problem, cache), "optimal", True)


def write_lp(lp: EpigraphLP, path: str | Path) -> None:
    """Dump the LP in CPLEX LP text format (minimisation, scaled units)."""

    def term(coef: float, name: str, first: bool) -> str:
        sign = "-" if coef < 0 else ("" if first else "+")
        return f"{sign} {abs(coef):.17g} {name}".strip()

    lines = ["\\ per-slot coded cache placement", "Minimize", " obj:"]
    nz = np.flatnonzero(lp.c)
    obj = [term(lp.c[i], lp.names[i], p == 0) for p, i in enumerate(nz)]
    lines[-1] += " " + (" ".join(obj) if obj else "0 " + lp.names[0])
    lines.append("Subject To")
    A = lp.A_ub.tocsr()
    for r in range(A.shape[0]):
        lo, hi = A.indptr[r], A.indptr[r + 1]
        terms = [term(A.data[p], lp.names[A.indices[p]], p == lo) for p in range(lo, hi)]
        lines.append(f" c{r}: {' '.join(terms)} <= {lp.b_ub[r]:.17g}")
    lines.append("Bounds")
    for name, (lo, hi) in zip(lp.names, lp.bounds):
        if lo is None and hi is None:
            lines.append(f" {name} free")
        else:
            lo_s = "-inf" if lo is None else f"{lo:.17g}"
            hi_s = "+inf" if hi is None else f"{hi:.17g}"
            lines.append(f" {lo_s} <= {name} <= {hi_s}")
    lines.append("End")
    Path(path).write_text("\n".join(lines) + "\n")


MAX_ORACLE_VARS = 6
MAX_ORACLE_COLUMN = 250_000


def _greedy_delays(delays: np.ndarray, fracs: np.ndarray, file_size: float) -> np.ndarray:
    """Sequential download: take each node's fraction in order, MBS covers the rest."""
    remaining = np.ones(fracs.shape[0])
    total = np.zeros(fracs.shape[0])
    for j in range(fracs.shape[1]):
        take = np.minimum(fracs[:, j], remaining)
        total += take * delays[j]
        remaining -= take
    return file_size * (total + remaining * delays[-1])


def brute_force_oracle(problem: PerSlotProblem, grid_step: float = 0.05) -> PlacementSolution:
    """Exact minimum over placements with every fraction on the ``grid_step`` grid.

    Files only interact through the node capacities, so each file's column is
    enumerated over the full grid and columns are combined by a dynamic
    programme over used capacity; the result equals full enumeration.
    """
    N, F = problem.shape
    if N * F > MAX_ORACLE_VARS:
        raise ValueError(f"oracle limited to {MAX_ORACLE_VARS} variables, got {N * F}")
    units = int(round(1.0 / grid_step))
    if abs(units * grid_step - 1.0) > 1e-12:
        raise ValueError("grid_step must divide 1")
    if (units + 1) ** N > MAX_ORACLE_COLUMN:
        raise ValueError("per-file grid too large for the oracle")
    cap = int(np.floor(problem.capacity / grid_step + 1e-9)) if problem.capacity > 0 else 0
    cap = max(0, min(cap, units * F))
    opts = np.array(list(itertools.product(range(units + 1), repeat=N)), dtype=np.int64)
    lam = opts * grid_step
    feasible = np.all(opts <= cap, axis=1)

    topo = problem.topology
    wd = problem.demand_weights()
    col_cost = np.empty((F, len(opts)))
    for f in range(F):
        cost = problem.beta * np.maximum(lam - problem.prev_cache[:, f], 0.0).sum(axis=1)
        for k, reach in enumerate(topo.reachable_sets):
            if wd[k, f] == 0:
                continue
            delays = topo.per_bit_delay[k, reach]
            fr = lam[:, np.asarray(reach[:-1], dtype=int) - 1]
            cost = cost + wd[k, f] * _greedy_delays(delays, fr, problem.file_size)
        col_cost[f] = np.where(feasible, cost, np.inf)

    shape = (cap + 1,) * N
    fopts = opts[feasible]
    fcost = col_cost[:, feasible]
    # V[s]: cheapest cost of the files so far using exactly s grid units per node
    V = np.full(shape, np.inf)
    V[tuple(fopts.T)] = fcost[0]
    choice = [None]
    for f in range(1, F - 1):
        new = np.full(shape, np.inf)
        arg = np.full(shape, -1, dtype=np.int64)
        for o_i, o in enumerate(fopts):
            dst = tuple(slice(int(a), None) for a in o)
            src = tuple(slice(0, cap + 1 - int(a)) for a in o)
            cand = V[src] + fcost[f, o_i]
            better = cand < new[dst]
            if np.any(better):
                new[dst] = np.where(better, cand, new[dst])
                arg[dst] = np.where(better, o_i, arg[dst])
        V = new
        choice.append(arg)

    cache = np.zeros((N, F))
    if F == 1:
        o_i = int(np.argmin(fcost[0]))
        cache[:, 0] = fopts[o_i] * grid_step
        return PlacementSolution(cache, float(fcost[0, o_i]), "grid optimum", True)
    # last file: cheapest earlier usage inside the remaining capacity box
    box_min = V
    for ax in range(N):
        box_min = np.minimum.accumulate(box_min, axis=ax)
    total = box_min[tuple((cap - fopts).T)] + fcost[F - 1]
    o_i = int(np.argmin(total))
    best = float(total[o_i])
    cache[:, F - 1] = fopts[o_i] * grid_step
    rest = cap - fopts[o_i]
    sub = V[tuple(slice(0, int(r) + 1) for r in rest)]
    state = np.array(np.unravel_index(int(np.argmin(sub)), sub.shape))
    for f in reversed(range(1, F - 1)):
        o = fopts[choice[f][tuple(state)]]
        cache[:, f] = o * grid_step
        state = state - o
    cache[:, 0] = state * grid_step
    return PlacementSolution(cache, best, "grid optimum", True)


def grid_resolution(problem: PerSlotProblem, grid_step: float) -> float:
    """Bound on how much snapping a placement onto the grid can change the objective.

    Each fraction moves by at most one step and the objective's slope in any
    single fraction is at most ``sum_k w d B delta_max + beta``.
    """
    N, F = problem.shape
    slope = problem.demand_weights().sum(axis=0) * problem.file_size * problem.topology.per_bit_delay.max()
    return float(grid_step * N * np.sum(slope + problem.beta))


def capacity_ok(cache: np.ndarray, capacity: float) -> bool:
    return bool(np.all(cache >= 0) and np.all(cache <= 1) and np.all(cache.sum(axis=1) <= capacity + CAPACITY_EPS))
