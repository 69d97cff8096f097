"""Sample-allocation optimization over model groups.

Three modes, all built on the same semidefinite reformulation of the
variance constraint: ``budget`` minimizes the worst per-output estimator
variance subject to a cost budget; ``tolerance`` minimizes cost subject to
per-output variance bounds; ``pareto`` minimizes variance + tau * cost,
tracing the cost/accuracy frontier as tau varies.

The variance of the high-fidelity mean for output s is eligible to be at
most t exactly when the bordered matrix [[Psi_s(n), e1], [e1', t]] is PSD,
which is linear in (n, t), so each output contributes one PSD block. Rows
and columns of models that no usable group covers are dropped from the
block (they are identically zero, and keeping them would leave the SDP
without a strictly feasible point); the estimator-side matrices keep full
size.

Solutions are reported in natural units. Internally costs are normalized
by max|c|, the group allocation is expressed in units of a mode-specific
magnitude guess, and each PSD block is congruence-scaled by a scalar so
that its entries are O(1) near the solution; all three transformations are
exact reparameterizations and are undone on the way out.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .covariance import CovarianceStore
from .estimator import BlueSystem, IllPosedError, assemble_psi, blue_variance
from .models import GroupSet
from .sdp import PsdBlock, SdpProblem, SdpSettings, SdpSolution, solve_sdp

__all__ = [
    "MosapSpec",
    "Allocation",
    "systems_from_store",
    "build_budget_sdp",
    "build_tolerance_sdp",
    "build_pareto_sdp",
    "solve_mosap",
    "integer_projection",
    "pareto_sweep",
]

# allocation entries below this fraction of the largest are treated as zero
_PRUNE_REL = 1e-9
# tau = 0 would leave pareto mode unbounded; cap the cost instead
_PARETO_COST_CAP = 1e12


def systems_from_store(groups: GroupSet, store: CovarianceStore, floor: float = 1e-10):
    """One BlueSystem per output, honoring the store's known-entry masks."""
    return [
        BlueSystem.from_covariance(groups, store, output=s, floor=floor)
        for s in range(1, store.num_outputs + 1)
    ]


@dataclass(frozen=True)
class MosapSpec:
    """A fully specified allocation problem.

    ``extra_linear`` rows are (coefficients over groups, upper bound) pairs
    a'n <= u, used e.g. to cap how often expensive models may be sampled.
    """

    mode: str  # 'budget' | 'tolerance' | 'pareto'
    groups: GroupSet
    systems: tuple  # one BlueSystem per output, in output order
    budget: float | None = None
    tolerances: np.ndarray | None = None  # per-output variance bounds
    tau: float | None = None
    extra_linear: tuple = ()

    def __post_init__(self):
        if self.mode not in ("budget", "tolerance", "pareto"):
            raise ValueError(f"unknown mode {self.mode!r}")
        systems = tuple(self.systems)
        object.__setattr__(self, "systems", systems)
        if not systems:
            raise ValueError("at least one output system is required")
        for s, system in enumerate(systems, start=1):
            if system.output != s:
                raise ValueError("systems must be ordered by output id")
            if system.num_groups != self.groups.num_groups:
                raise ValueError("system group count does not match group set")
        if self.mode == "budget":
            if self.budget is None or not self.budget > 0:
                raise ValueError("budget mode needs a positive budget")
        if self.mode == "tolerance":
            tol = np.asarray(self.tolerances, dtype=float).reshape(-1)
            if tol.size != len(systems) or np.any(tol <= 0):
                raise ValueError("need one positive variance bound per output")
            object.__setattr__(self, "tolerances", tol)
        if self.mode == "pareto":
            if self.tau is None or self.tau < 0:
                raise ValueError("pareto mode needs tau >= 0")
        extra = []
        for coeffs, bound in self.extra_linear:
            coeffs = np.asarray(coeffs, dtype=float).reshape(-1)
            if coeffs.size != self.groups.num_groups:
                raise ValueError("extra_linear row length must match group count")
            extra.append((coeffs, float(bound)))
        object.__setattr__(self, "extra_linear", tuple(extra))

    @property
    def num_outputs(self) -> int:
        return len(self.systems)

    @property
    def group_costs(self) -> np.ndarray:
        return self.groups.group_costs


@dataclass
class Allocation:
    """Solved allocation in natural units."""

    mode: str
    n: np.ndarray  # per-group sample counts (fractional unless projected)
    per_output_variance: np.ndarray
    total_cost: float
    is_integer: bool
    selected_groups: tuple[int, ...]  # indices with n > 0
    objective_value: float
    solver_status: str = "optimal"
    solver_iterations: int = 0
    solver_gap: float = float("nan")
    fallback: bool = False  # integer projection had to use its fallback rule
    projection_ratio: float = float("nan")  # integer / continuous objective

    @property
    def max_variance(self) -> float:
        return float(np.max(self.per_output_variance))


@dataclass(frozen=True)
class _Scaling:
    """Exact reparameterization applied before handing the SDP over."""

    cost_scale: float  # costs divided by this
    alloc_scale: np.ndarray  # per group, n = alloc_scale * x
    block_scales: np.ndarray  # per output
    var_scale: float  # t = x_t / var_scale
    has_t: bool


def _feasibility_check(spec: MosapSpec) -> None:
    if spec.mode != "budget":
        return
    for system in spec.systems:
        mask = system.highfi_group_mask()
        cheapest = np.min(spec.group_costs[mask])
        if spec.budget < cheapest:
            raise ValueError(
                f"budget {spec.budget} cannot buy any group containing model 1 "
                f"for output {system.output} (cheapest costs {cheapest})"
            )


def _magnitude_guess(spec: MosapSpec, costs_n: np.ndarray) -> float:
    """Rough size of the allocation entries at the optimum, in solver units."""
    num_groups = spec.groups.num_groups
    mean_cost = float(np.mean(costs_n))
    v1 = max(s.highfi_variance for s in spec.systems)
    if spec.mode == "budget":
        return max(spec.budget / (num_groups * mean_cost), 1e-6)
    if spec.mode == "tolerance":
        eps = float(np.min(spec.tolerances))
        return max(v1 / (eps * num_groups), 1e-6)
    # pareto: variance ~ v1 * c_anchor / cost, optimum balances t against tau*cost
    anchor = min(
        float(np.min(costs_n[s.highfi_group_mask()])) for s in spec.systems
    )
    tau = max(spec.tau, 1.0 / (_PARETO_COST_CAP * np.min(costs_n)))
    return max(math.sqrt(v1 * anchor / tau) / (num_groups * mean_cost), 1e-6)


def _build(spec: MosapSpec, corner_values=None):
    """Assemble the scaled SdpProblem for any mode.

    corner_values: per-output constants put in the block corner (tolerance
    mode); None means the corner holds the shared variance variable t.
    """
    groups = spec.groups
    num_groups = groups.num_groups
    cost_scale = float(np.max(groups.group_costs))
    costs_n = groups.group_costs / cost_scale
    has_t = corner_values is None
    dim = num_groups + 1 if has_t else num_groups

    guess = _magnitude_guess(spec, costs_n)
    # per-group variable scale: groups capped by a linear row live at the
    # bound's magnitude, not the global guess, otherwise their solver
    # variables sit many decades below the rest and the primal residual
    # drowns in cancellation noise before feas_tol is reachable
    alloc_scale = np.full(num_groups, guess)
    for coeffs_row, bound in spec.extra_linear:
        pos = np.flatnonzero(coeffs_row > 0.0)
        implied = np.maximum(bound / coeffs_row[pos], 1e-12 * guess)
        alloc_scale[pos] = np.minimum(alloc_scale[pos], implied)

    # solver-side information blocks: eigenvalues of each group covariance
    # below 1e-6 of the block's largest are lifted before inverting. A
    # store with a clipped (|rho| = 1) pair otherwise claims ~1e10 units of
    # information per sample, and the Newton systems lose those directions
    # in double precision. The handle only steers the search; reported
    # variances are always recomputed from the unmodified blocks.
    solver_inverses = []
    for system in spec.systems:
        inverses = {}
        for term in system.terms:
            w, v = np.linalg.eigh(term.covariance)
            lifted = np.maximum(w, 1e-6 * w[-1])
            inv = (v / lifted) @ v.T
            inverses[term.group_index] = 0.5 * (inv + inv.T)
        solver_inverses.append(inverses)

    # per-output congruence scalar: the size of the information matrix at a
    # uniform allocation of the guessed magnitude
    block_scales = []
    uniform = alloc_scale / num_groups
    for system, inverses in zip(spec.systems, solver_inverses):
        psi = np.zeros((groups.num_models, groups.num_models))
        for term in system.terms:
            idx = np.ix_(term.model_indices, term.model_indices)
            psi[idx] += uniform[term.group_index] * inverses[term.group_index]
        scale = float(np.linalg.norm(psi, 2))
        block_scales.append(max(scale, 1e-300))
    block_scales = np.asarray(block_scales)
    var_scale = float(np.max(block_scales))

    blocks = []
    for system, inverses, bscale, s in zip(
        spec.systems, solver_inverses, block_scales, range(len(spec.systems))
    ):
        active = system.active_models()
        pos = {model: i for i, model in enumerate(active)}
        p = len(active) + 1
        constant = np.zeros((p, p))
        constant[pos[0], p - 1] = constant[p - 1, pos[0]] = 1.0
        var_indices = []
        coeffs = []
        for term in system.terms:
            mat = np.zeros((p, p))
            loc = [pos[i] for i in term.model_indices]
            mat[np.ix_(loc, loc)] = inverses[term.group_index] * (
                alloc_scale[term.group_index] / bscale
            )
            var_indices.append(term.group_index)
            coeffs.append(mat)
        if has_t:
            mat = np.zeros((p, p))
            mat[p - 1, p - 1] = bscale / var_scale
            var_indices.append(num_groups)
            coeffs.append(mat)
        else:
            constant[p - 1, p - 1] = corner_values[s] * bscale
        blocks.append(PsdBlock(constant, np.array(var_indices), np.array(coeffs)))

    rows = []
    rhs = []
    if spec.mode == "budget":
        row = np.zeros(dim)
        row[:num_groups] = costs_n * (alloc_scale / (spec.budget / cost_scale))
        rows.append(row)
        rhs.append(1.0)
    if spec.mode == "pareto":
        cap = _PARETO_COST_CAP * float(np.min(costs_n))
        row = np.zeros(dim)
        row[:num_groups] = costs_n * (alloc_scale / cap)
        rows.append(row)
        rhs.append(1.0)
    for system in spec.systems:
        mask = system.highfi_group_mask()
        mask_scale = float(np.max(alloc_scale[mask]))
        row = np.zeros(dim)
        row[:num_groups][mask] = -alloc_scale[mask] / mask_scale
        rows.append(row)
        rhs.append(-1.0 / mask_scale)
    for coeffs_row, bound in spec.extra_linear:
        scaled = coeffs_row * alloc_scale
        row_scale = max(np.abs(scaled).max(), 1e-300)
        row = np.zeros(dim)
        row[:num_groups] = scaled / row_scale
        rows.append(row)
        rhs.append(bound / row_scale)

    objective = np.zeros(dim)
    if spec.mode == "budget":
        objective[num_groups] = 1.0
    elif spec.mode == "tolerance":
        objective[:num_groups] = costs_n * alloc_scale
    else:  # pareto
        objective[num_groups] = 1.0
        objective[:num_groups] = spec.tau * cost_scale * costs_n * alloc_scale * var_scale

    problem = SdpProblem(
        objective=objective,
        blocks=blocks,
        ineq_matrix=np.array(rows).reshape(len(rows), dim),
        ineq_rhs=np.array(rhs),
    )
    scaling = _Scaling(cost_scale, alloc_scale, block_scales, var_scale, has_t)
    return problem, scaling


def build_budget_sdp(spec: MosapSpec) -> SdpProblem:
    """Budget mode: minimize the worst-output variance under a cost cap."""
    if spec.mode != "budget":
        raise ValueError("spec mode must be 'budget'")
    _feasibility_check(spec)
    return _build(spec)[0]


def build_tolerance_sdp(spec: MosapSpec) -> SdpProblem:
    """Tolerance mode: minimize cost under per-output variance bounds."""
    if spec.mode != "tolerance":
        raise ValueError("spec mode must be 'tolerance'")
    return _build(spec, corner_values=spec.tolerances)[0]


def build_pareto_sdp(spec: MosapSpec) -> SdpProblem:
    """Pareto mode: minimize variance + tau * cost (cost capped when tau=0)."""
    if spec.mode != "pareto":
        raise ValueError("spec mode must be 'pareto'")
    return _build(spec)[0]


def _sanitize(spec: MosapSpec, x: np.ndarray, scaling: _Scaling) -> np.ndarray:
    n = scaling.alloc_scale * np.maximum(x[: spec.groups.num_groups], 0.0)
    top = n.max(initial=0.0)
    n[n < _PRUNE_REL * top] = 0.0
    return n


def _variances(spec: MosapSpec, n: np.ndarray) -> np.ndarray:
    return np.array([blue_variance(system, n) for system in spec.systems])


def _objective_of(spec: MosapSpec, n: np.ndarray, variances: np.ndarray) -> float:
    cost = float(spec.group_costs @ n)
    if spec.mode == "budget":
        return float(np.max(variances))
    if spec.mode == "tolerance":
        return cost
    return float(np.max(variances)) + spec.tau * cost


def solve_mosap(spec: MosapSpec, settings: SdpSettings | None = None) -> Allocation:
    """Solve the allocation SDP and report everything in natural units.

    The per-output variances on the result are recomputed from the
    estimator-side matrices at the returned allocation; the SDP's own
    variance variable is only used as the optimization handle.
    """
    _feasibility_check(spec)
    corners = spec.tolerances if spec.mode == "tolerance" else None
    problem, scaling = _build(spec, corner_values=corners)
    sol = solve_sdp(problem, settings)
    if sol.status == "infeasible":
        raise RuntimeError("allocation SDP is infeasible")
    n = _sanitize(spec, sol.x, scaling)
    variances = _variances(spec, n)
    return Allocation(
        mode=spec.mode,
        n=n,
        per_output_variance=variances,
        total_cost=float(spec.group_costs @ n),
        is_integer=False,
        selected_groups=tuple(int(k) for k in np.flatnonzero(n > 0)),
        objective_value=_objective_of(spec, n, variances),
        solver_status=sol.status,
        solver_iterations=sol.iterations,
        solver_gap=sol.residuals.get("gap", float("nan")),
    )


def _integer_feasible(spec: MosapSpec, n: np.ndarray):
    """(feasible, variances) under integer-count semantics."""
    for system in spec.systems:
        mask = system.highfi_group_mask()
        if n[mask].sum() < 1.0 - 1e-9:
            return False, None
    for coeffs, bound in spec.extra_linear:
        if coeffs @ n > bound * (1.0 + 1e-12) + 1e-12:
            return False, None
    if spec.mode == "budget":
        if spec.group_costs @ n > spec.budget * (1.0 + 1e-12) + 1e-12:
            return False, None
    try:
        variances = _variances(spec, n)
    except IllPosedError:
        return False, None
    if spec.mode == "tolerance":
        if np.any(variances > spec.tolerances * (1.0 + 1e-12)):
            return False, None
    return True, variances


def integer_projection(
    spec: MosapSpec, allocation: Allocation, enumeration_cap: int = 20
) -> Allocation:
    """Round a continuous allocation to integers, preserving feasibility.

    Entries within 1e-6 of an integer are snapped. The floor/ceiling
    combinations of the remaining fractional entries are enumerated (up to
    ``enumeration_cap`` entries; beyond that, the entries whose rounding
    matters least by cost-weighted ambiguity are rounded up greedily) and
    the feasible combination with the best mode objective wins. Ties go to
    the cheaper allocation, then to the lexicographically smaller one.

    Fallbacks when no combination is feasible: tolerance mode takes the
    ceiling everywhere; budget mode scales the allocation down onto the
    budget and floors. Both are flagged on the result.
    """
    n0 = np.asarray(allocation.n, dtype=float).copy()
    snapped = np.rint(n0)
    near = np.abs(n0 - snapped) <= 1e-6
    base = np.where(near, snapped, np.floor(n0))
    frac_idx = np.flatnonzero(~near)

    if frac_idx.size > enumeration_cap:
        ambiguity = spec.group_costs[frac_idx] * np.minimum(
            n0[frac_idx] - np.floor(n0[frac_idx]),
            np.ceil(n0[frac_idx]) - n0[frac_idx],
        )
        order = np.argsort(-ambiguity, kind="stable")
        enumerate_idx = np.sort(frac_idx[order[:enumeration_cap]])
        for k in frac_idx[order[enumeration_cap:]]:
            base[k] = np.ceil(n0[k])
    else:
        enumerate_idx = frac_idx

    best = None
    for bits in itertools.product((0.0, 1.0), repeat=enumerate_idx.size):
        cand = base.copy()
        cand[enumerate_idx] += np.asarray(bits)
        ok, variances = _integer_feasible(spec, cand)
        if not ok:
            continue
        obj = _objective_of(spec, cand, variances)
        cost = float(spec.group_costs @ cand)
        key = (obj, cost, tuple(cand))
        if best is None or key < best[0]:
            best = (key, cand, variances)

    fallback = best is None
    if fallback:
        if spec.mode == "budget":
            total = float(spec.group_costs @ np.ceil(n0))
            shrink = spec.budget / total if total > 0 else 1.0
            cand = np.floor(n0 * min(shrink, 1.0))
        else:
            cand = np.ceil(n0)
        try:
            variances = _variances(spec, cand)
        except IllPosedError:
            variances = np.full(spec.num_outputs, np.inf)
        best = (None, cand, variances)

    _, n_int, variances = best
    obj = (
        _objective_of(spec, n_int, variances)
        if np.all(np.isfinite(variances))
        else float("inf")
    )
    ratio = obj / allocation.objective_value if allocation.objective_value > 0 else float("nan")
    return replace(
        allocation,
        n=n_int,
        per_output_variance=variances,
        total_cost=float(spec.group_costs @ n_int),
        is_integer=True,
        selected_groups=tuple(int(k) for k in np.flatnonzero(n_int > 0)),
        objective_value=obj,
        fallback=fallback,
        projection_ratio=ratio,
    )


def pareto_sweep(
    spec: MosapSpec, tau_tilde_values, settings: SdpSettings | None = None
):
    """Trace the cost/accuracy frontier over a grid of scale-free tau values.

    Each tau_tilde is divided by the 2-norm of the group cost vector to get
    the tau actually used. Returns one record per grid point, ascending in
    tau_tilde, with the allocation, cost, worst variance, and the
    normalized error max_s sqrt(V_s / V[model 1, output s]). Solver
    failures are recorded on the affected record and the sweep continues.
    """
    if spec.mode != "pareto":
        raise ValueError("pareto_sweep needs a pareto-mode spec")
    cost_norm = float(np.linalg.norm(spec.group_costs))
    records = []
    for tau_tilde in sorted(float(t) for t in tau_tilde_values):
        point_spec = replace(spec, tau=tau_tilde / cost_norm)
        record = {"tau_tilde": tau_tilde, "tau": tau_tilde / cost_norm}
        try:
            alloc = solve_mosap(point_spec, settings)
            v1 = np.array([s.highfi_variance for s in spec.systems])
            record.update(
                allocation=alloc,
                cost=alloc.total_cost,
                variance=alloc.max_variance,
                normalized_error=float(
                    np.max(np.sqrt(alloc.per_output_variance / v1))
                ),
                status=alloc.solver_status,
            )
        except (RuntimeError, ValueError, IllPosedError) as exc:
            record.update(status="failed", error=str(exc))
        records.append(record)
    return records
