import cvxpy as cp
import numpy as np
import pytest

from dilo.dual import solve_dual_exact
from dilo.mdp import ModelError, verify_flow_constraints
from dilo.primal import (ContractError, certify, chain_instance, duality_gap, grid_search_primal, instance_problem,
                         random_instance, realizable_instance, solve_primal)


def _cvxpy_optimum(inst, mode):
    """Independent QP solve of the chi-square matching program."""
    mdp, b = inst.mdp, inst.beta
    S, A = mdp.n_states, mdp.n_actions
    P, g = mdp.transition, mdp.gamma
    q = b * inst.d_expert.tensor + (1 - b) * inst.rho.tensor
    rho = inst.rho.tensor
    d = cp.Variable((S * S, A))
    m = b * d + (1 - b) * rho.reshape(S * S, A)
    cons = [d >= 0] if mode == "occupancy" else [m >= 0]
    for t in range(S):
        for u in range(S):
            # mass entering pair (t, u): initial plus every (s, t, a') continuing to u
            inflow = sum(d[s * S + t, a] * P[t, a, u] for s in range(S) for a in range(A))
            cons.append(cp.sum(d[t * S + u, :]) == (1 - g) * inst.d0_joint.matrix[t, u] + g * inflow)
    qf = q.reshape(S * S, A)
    pos = qf > 0
    cons.append(m[~pos] == 0) if (~pos).any() else None
    obj = -cp.sum(cp.multiply(1.0 / qf[pos], cp.square(m[pos] - qf[pos])))
    prob = cp.Problem(cp.Maximize(obj), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("mode", ["mixture", "occupancy"])
def test_frank_wolfe_matches_cvxpy(seed, mode):
    inst = random_instance(seed)
    sol = solve_primal(inst.mdp, inst.d0_joint, inst.d_expert, inst.rho, inst.beta, tol=1e-8, mode=mode)
    assert sol.objective_value == pytest.approx(_cvxpy_optimum(inst, mode), abs=1e-6)
    assert sol.feasibility_residual <= 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_occupancy_never_above_mixture(seed):
    inst = random_instance(seed)
    args = (inst.mdp, inst.d0_joint, inst.d_expert, inst.rho, inst.beta)
    assert solve_primal(*args, mode="occupancy").objective_value <= solve_primal(*args).objective_value + 1e-7


@pytest.mark.parametrize("inst", [random_instance(0), random_instance(1), random_instance(2), chain_instance()],
                         ids=lambda i: i.name)
def test_strong_duality(inst):
    c = certify(inst, tol=1e-6)
    assert c.gap <= 2e-3
    assert np.isfinite(c.primal) and np.isfinite(c.dual)


def test_realizable_optimum_is_zero():
    inst = realizable_instance(0)
    sol = solve_primal(inst.mdp, inst.d0_joint, inst.d_expert, inst.rho, inst.beta, tol=1e-9)
    assert sol.objective_value == pytest.approx(0.0, abs=1e-8)
    assert np.allclose(sol.d_star.tensor, inst.d_expert.tensor, atol=1e-4)


def test_primal_visitation_is_feasible():
    inst = random_instance(4)
    sol = solve_primal(inst.mdp, inst.d0_joint, inst.d_expert, inst.rho, inst.beta, mode="occupancy")
    assert verify_flow_constraints(sol.d_star, inst.d0_joint, inst.mdp) <= 1e-8
    assert np.all(sol.d_star.tensor >= -1e-12)


def test_grid_search_agrees():
    inst = random_instance(0, n_states=2)
    args = (inst.mdp, inst.d0_joint, inst.d_expert, inst.rho, inst.beta)
    best, _ = grid_search_primal(*args, resolution=11)
    assert best == pytest.approx(solve_primal(*args, tol=1e-9).objective_value, abs=1e-6)


def test_open_loop_step_converges_slower_but_close():
    inst = random_instance(1)
    args = (inst.mdp, inst.d0_joint, inst.d_expert, inst.rho, inst.beta)
    exact = solve_primal(*args, tol=1e-8).objective_value
    loose = solve_primal(*args, tol=1e-4, step="open_loop").objective_value
    assert loose <= exact + 1e-9 and loose == pytest.approx(exact, abs=1e-3)


def test_gap_rejects_mismatched_smoothing():
    inst = random_instance(0)
    sol = solve_primal(inst.mdp, inst.d0_joint, inst.d_expert, inst.rho, inst.beta)
    dual = solve_dual_exact(instance_problem(inst))
    assert duality_gap(sol, dual.objective_value, dual.smoothing) < 1e-6
    with pytest.raises(ContractError):
        duality_gap(sol, dual.objective_value, 0.5)


def test_infeasible_initial_distribution():
    inst = chain_instance()
    bad = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ModelError):
        solve_primal(inst.mdp, bad, inst.d_expert, inst.rho, inst.beta)
