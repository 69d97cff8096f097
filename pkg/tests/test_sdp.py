import io

import numpy as np
import pytest
from scipy.optimize import linprog

from mlblue.covariance import CovarianceStore
from mlblue.estimator import BlueSystem, blue_variance
from mlblue.models import enumerate_groups
from mlblue.sdp import (
    PsdBlock,
    SdpProblem,
    SdpSettings,
    dump_problem,
    solve_sdp,
    verify_schur_feasibility,
)

from conftest import all_output_modelset


def corner_problem():
    # min t with [[1, 1], [1, t]] >= 0; Schur complement forces t >= 1
    f0 = np.array([[1.0, 1.0], [1.0, 0.0]])
    coeff = np.zeros((1, 2, 2))
    coeff[0, 1, 1] = 1.0
    return SdpProblem(
        objective=np.array([1.0]),
        blocks=(PsdBlock(f0, np.array([0]), coeff),),
    )


def test_schur_corner_minimum():
    sol = solve_sdp(corner_problem())
    assert sol.status == "optimal"
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)
    assert sol.objective_value == pytest.approx(1.0, abs=1e-6)


def test_diagonal_block_lp():
    # min x with diag(x-1, x-2) >= 0 and x >= 0: binding at x = 2
    f0 = np.diag([-1.0, -2.0])
    coeff = np.eye(2)[None]
    prob = SdpProblem(
        objective=np.array([1.0]),
        blocks=(PsdBlock(f0, np.array([0]), coeff),),
    )
    sol = solve_sdp(prob)
    assert sol.status == "optimal"
    assert sol.x[0] == pytest.approx(2.0, abs=1e-6)


def test_optimal_certificates_hold():
    sol = solve_sdp(corner_problem())
    st = SdpSettings()
    assert sol.residuals["gap"] <= st.gap_tol
    assert sol.residuals["primal"] <= st.feas_tol
    assert sol.residuals["dual"] <= st.feas_tol
    # the PSD block at the solution is nearly feasible
    f = np.array([[1.0, 1.0], [1.0, sol.x[0]]])
    assert np.linalg.eigvalsh(f)[0] >= -st.feas_tol * (1 + np.linalg.norm(f))


def test_objective_scaling_leaves_argmin():
    base = solve_sdp(corner_problem())
    for alpha in (1e-3, 1e3):
        prob = corner_problem()
        scaled = SdpProblem(
            objective=alpha * prob.objective,
            blocks=prob.blocks,
        )
        sol = solve_sdp(scaled)
        assert sol.status == "optimal"
        assert sol.x[0] == pytest.approx(base.x[0], abs=1e-6)
        assert sol.objective_value == pytest.approx(
            alpha * base.objective_value, rel=1e-6
        )


def _random_lp(rng, nvar, nrow):
    g_mat = rng.uniform(0.2, 2.0, (nrow, nvar))
    g_rhs = rng.uniform(1.0, 4.0, nrow)
    q = rng.uniform(-1.0, 2.0, nvar)
    return q, g_mat, g_rhs


def test_diagonal_sdp_matches_simplex_oracle():
    # LP encoded as a diagonal PSD block must agree with scipy's LP solver
    rng = np.random.default_rng(20)
    for _ in range(10):
        nvar, nrow = 4, 6
        q, g_mat, g_rhs = _random_lp(rng, nvar, nrow)
        coeff = np.zeros((nvar, nrow, nrow))
        for i in range(nvar):
            coeff[i][np.diag_indices(nrow)] = -g_mat[:, i]
        prob = SdpProblem(
            objective=q,
            blocks=(PsdBlock(np.diag(g_rhs), np.arange(nvar), coeff),),
        )
        sol = solve_sdp(prob)
        ref = linprog(q, A_ub=g_mat, b_ub=g_rhs, bounds=(0, None))
        assert sol.status == "optimal" and ref.status == 0
        scale = max(1.0, abs(ref.fun))
        assert abs(sol.objective_value - ref.fun) <= 1e-6 * scale


def test_linear_rows_match_simplex_oracle():
    # same LPs through the dedicated inequality interface
    rng = np.random.default_rng(21)
    for _ in range(10):
        q, g_mat, g_rhs = _random_lp(rng, 5, 3)
        prob = SdpProblem(objective=q, ineq_matrix=g_mat, ineq_rhs=g_rhs)
        sol = solve_sdp(prob)
        ref = linprog(q, A_ub=g_mat, b_ub=g_rhs, bounds=(0, None))
        assert sol.status == "optimal" and ref.status == 0
        scale = max(1.0, abs(ref.fun))
        assert abs(sol.objective_value - ref.fun) <= 1e-6 * scale


def test_infeasible_problem_detected():
    # x >= 0 conflicts with x <= -1
    prob = SdpProblem(
        objective=np.array([1.0]),
        ineq_matrix=np.array([[1.0]]),
        ineq_rhs=np.array([-1.0]),
    )
    sol = solve_sdp(prob)
    assert sol.status in ("infeasible", "max_iter")
    assert sol.status == "infeasible"


def test_max_iter_reports_best_iterate():
    sol = solve_sdp(corner_problem(), SdpSettings(max_iter=2))
    assert sol.status == "max_iter"
    assert sol.iterations == 2
    assert np.isfinite(sol.x).all()


def test_mosap_objective_matches_grid_oracle():
    # 2-model budget instance: exhaustive grid over allocations that spend
    # the whole budget across the three groups
    c = np.array([[1.0, 0.9], [0.9, 1.0]])
    costs = np.array([1.0, 0.01])
    budget = 10.0
    models = all_output_modelset(costs)
    gs = enumerate_groups(models, kappa=2)
    system = BlueSystem.from_covariance(gs, CovarianceStore(c[None]))

    from mlblue.allocate import MosapSpec, solve_mosap

    spec = MosapSpec(mode="budget", groups=gs, systems=(system,), budget=budget)
    alloc = solve_mosap(spec)
    assert alloc.solver_status == "optimal"

    best = np.inf
    grid = np.linspace(0.0, 1.0, 141)
    for f1 in grid:
        for f2 in np.linspace(0.0, 1.0 - f1, 141):
            f = np.array([f1, f2, 1.0 - f1 - f2])
            n = f * budget / gs.group_costs
            if n[0] + n[2] <= 1e-12:
                continue  # model 1 unsampled
            best = min(best, blue_variance(system, n))
    assert alloc.max_variance == pytest.approx(best, rel=1e-3)
    assert alloc.max_variance <= best * (1 + 1e-9)  # grid is only an upper bound


def test_verify_schur_examples():
    assert verify_schur_feasibility(1.0, np.eye(2))
    assert not verify_schur_feasibility(0.999999, np.eye(2), rtol=1e-8)
    assert not verify_schur_feasibility(5.0, np.diag([0.0, 1.0]))


def test_verify_schur_matches_eigenvalue_oracle():
    rng = np.random.default_rng(22)
    for _ in range(40):
        k = int(rng.integers(1, 4))
        b = rng.standard_normal((3, k))
        psi = b @ b.T
        pinv = np.linalg.pinv(psi)
        t_star = pinv[0, 0]
        e1 = np.eye(3)[:, 0]
        wellposed = np.linalg.norm(psi @ pinv @ e1 - e1) < 1e-8
        for t, expect in ((t_star * 1.5 + 0.1, wellposed), (t_star * 0.5 - 0.1, False)):
            got = verify_schur_feasibility(t, psi)
            phi = np.zeros((4, 4))
            phi[:3, :3] = psi
            phi[3, :3] = phi[:3, 3] = e1
            phi[3, 3] = t
            eig_ok = np.linalg.eigvalsh(phi)[0] >= -1e-8 * max(
                1.0, np.abs(phi).max()
            )
            assert got == expect
            if t >= 0:
                assert got == eig_ok


def test_dump_problem_triplet_format():
    prob = corner_problem()
    buf = io.StringIO()
    dump_problem(prob, buf)
    lines = buf.getvalue().strip().splitlines()
    rows = [ln.split() for ln in lines]
    assert all(len(r) == 5 for r in rows)
    # objective row: block 0, variable 1 (1-based), value 1
    assert ["0", "0", "0", "1", "1"] in rows
    # constant part of the PSD block uses variable tag 0
    consts = [r for r in rows if r[0] == "1" and r[3] == "0"]
    got = {(r[1], r[2]): float(r[4]) for r in consts}
    assert got == {("0", "0"): 1.0, ("0", "1"): 1.0, ("1", "0"): 1.0}
    # t's coefficient on the (1,1) entry
    assert ["1", "1", "1", "1", "1"] in rows


def test_symmetry_validation_rejects_bad_blocks():
    f0 = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        SdpProblem(
            objective=np.array([1.0]),
            blocks=(PsdBlock(f0, np.array([0]), np.zeros((1, 2, 2))),),
        )
