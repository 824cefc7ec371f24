"""Exact primal solver for mixture occupancy matching on small tabular MDPs.

The program is

    max  -D_f(Mix_beta(d, rho) || Mix_beta(d_E, rho))
    s.t. d satisfies the pair-level flow equations from d0_joint.

Two feasible sets are supported:

``mode="mixture"`` (default)
    Nonnegativity is imposed on ``m = Mix_beta(d, rho)`` rather than on
    ``d``. Because ``rho`` is itself a joint visitation, ``m`` then ranges
    over the occupancy polytope of the pair-state MDP started from
    ``beta * d0_joint + (1 - beta) * d0_rho``. This is the program whose
    Lagrangian dual is the unconstrained objective minimized in ``dual``, so
    the two optima coincide.
``mode="occupancy"``
    ``d >= 0``: ``d`` ranges over the occupancy polytope started from
    ``d0_joint``. Its optimum is never above the mixture one.

Both are solved by Frank-Wolfe with away steps and exact line search. The
linear oracle is policy optimization on the pair-state MDP.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .divergence import CHI2, FGenerator, Kind
from .dual import TabularDualProblem, solve_dual_exact
from .mdp import (JointInitialDist, JointVisitation, ModelError, TabularMDP, augmented_mdp,
                  implied_joint_initial, joint_visitation, on_policy_joint_initial, random_mdp,
                  random_policy, two_state_chain, verify_flow_constraints)


class ContractError(ValueError):
    pass


@dataclass
class PrimalSolution:
    d_star: JointVisitation
    objective_value: float
    feasibility_residual: float
    iterations: int
    fw_gap: float
    mixture: np.ndarray
    smoothing: float
    beta: float
    mode: str
    history: list = field(default_factory=list, repr=False)


class _PairPolytope:
    """Occupancies x(s, s', a) of the pair-state MDP from initial matrix ``mu0``."""

    def __init__(self, transition, gamma, mu0):
        self.P = transition
        self.gamma = gamma
        self.mu0 = mu0
        self.S, self.A = transition.shape[:2]

    def _pair_matrix(self, actions):
        """Transition matrix over flattened pair states under deterministic ``actions`` (S, S)."""
        S = self.S
        M = np.zeros((S, S, S, S))
        for t in range(S):
            M[:, t, t, :] = self.P[t, actions[:, t], :]
        return M.reshape(S * S, S * S)

    def vertex(self, actions):
        S = self.S
        M = self._pair_matrix(actions)
        dx = (1 - self.gamma) * np.linalg.solve(np.eye(S * S) - self.gamma * M.T, self.mu0.ravel())
        x = np.zeros((S, S, self.A))
        x[np.arange(S)[:, None], np.arange(S)[None, :], actions] = dx.reshape(S, S)
        return x

    def _q_values(self, actions, reward):
        S = self.S
        M = self._pair_matrix(actions)
        r_pi = reward[np.arange(S)[:, None], np.arange(S)[None, :], actions].ravel()
        V = np.linalg.solve(np.eye(S * S) - self.gamma * M, r_pi).reshape(S, S)
        return reward + self.gamma * np.einsum("tau,tu->ta", self.P, V)[None, :, :]

    def argmax(self, reward):
        """Vertex maximizing <reward, x>: value iteration, then exact policy iteration."""
        _, actions, _ = kernels.pair_value_iteration(self.P, reward, self.gamma, tol=1e-13, max_iter=100_000)
        for _ in range(100):
            Q = self._q_values(actions, reward)
            cur = np.take_along_axis(Q, actions[..., None], axis=2)[..., 0]
            best = Q.max(axis=2)
            improve = best > cur + 1e-12 * (1 + np.abs(cur))
            if not improve.any():
                break
            actions = np.where(improve, np.argmax(Q, axis=2), actions)
        return actions, self.vertex(actions)


def _ratio(m, q):
    # entries with q == 0 are one-step infeasible and carry no mass
    return np.divide(m, q, out=np.ones_like(m), where=q > 0)


def _objective(gen, m, q):
    return -float(np.sum(np.where(q > 0, q * gen.f(_ratio(m, q)), 0.0)))


def solve_primal(mdp: TabularMDP, d0_joint, d_expert, rho, beta, gen: FGenerator = CHI2, tol=1e-6,
                 mode="mixture", max_iter=200_000, step="line_search", smoothing=0.0):
    """Solve the matching program to Frank-Wolfe gap ``tol``.

    ``step`` is ``"line_search"`` (exact, with away steps; objective is
    monotone) or ``"open_loop"`` (plain Frank-Wolfe with step 2 / (k + 2)).
    """
    d0 = d0_joint if isinstance(d0_joint, JointInitialDist) else JointInitialDist(d0_joint)
    augmented_mdp(mdp, d0)  # raises ModelError on infeasible d0_joint
    prob = TabularDualProblem.from_mdp(mdp, d0, d_expert, rho, beta, gen, smoothing)
    q, rho_t = prob.q, prob.rho
    if mode == "mixture":
        d0_rho = implied_joint_initial(rho_t, mdp)
        if np.min(d0_rho) < -1e-9:
            raise ModelError("rho is not a joint visitation of this MDP (implied initial mass is negative)")
        mu0 = beta * d0.matrix + (1 - beta) * np.clip(d0_rho, 0.0, None)
        scale, shift = 1.0, np.zeros_like(q)
    elif mode == "occupancy":
        mu0 = d0.matrix
        scale, shift = beta, (1 - beta) * rho_t
    else:
        raise ValueError(f"unknown mode {mode!r}")
    poly = _PairPolytope(mdp.transition, mdp.gamma, mu0 / mu0.sum())

    def mix(x):
        return scale * x + shift

    def grad(x):
        return -scale * gen.f_prime(_ratio(mix(x), q))

    def line_search(x, direction, t_max):
        if gen.kind is Kind.PEARSON_CHI2:
            qs = np.where(q > 0, q, np.inf)
            num = -float(np.sum((mix(x) - q) * direction / qs))
            den = scale * float(np.sum(direction ** 2 / qs))
            t = num / den if den > 0 else t_max
            return float(np.clip(t, 0.0, t_max))
        from scipy.optimize import minimize_scalar  # pragma: no cover

        res = minimize_scalar(lambda t: -_objective(gen, mix(x + t * direction), q),  # pragma: no cover
                              bounds=(0.0, t_max), method="bounded")
        return float(res.x)  # pragma: no cover

    actions, x = poly.argmax(grad(np.zeros_like(q)))
    active = {actions.tobytes(): [1.0, x, actions]}
    history = [_objective(gen, mix(x), q)]
    gap = np.inf
    k = 0
    for k in range(1, max_iter + 1):
        g = grad(x)
        s_act, s = poly.argmax(g)
        gap = float(np.sum(g * (s - x)))
        if gap <= tol:
            break
        if step == "open_loop":
            x = x + 2.0 / (k + 2) * (s - x)
        else:
            away_key = min(active, key=lambda key: float(np.sum(g * active[key][1])))
            a_w, v, _ = active[away_key]
            away_gap = float(np.sum(g * (x - v)))
            if gap >= away_gap or len(active) == 1:
                direction, t_max = s - x, 1.0
                t = line_search(x, direction, t_max)
                for item in active.values():
                    item[0] *= 1 - t
                key = s_act.tobytes()
                if key in active:
                    active[key][0] += t
                else:
                    active[key] = [t, s, s_act]
                if t == 1.0:
                    active = {key: [1.0, s, s_act]}
            else:
                direction, t_max = x - v, a_w / (1 - a_w)
                t = line_search(x, direction, t_max)
                for item in active.values():
                    item[0] *= 1 + t
                active[away_key][0] -= t
                if t >= t_max * (1 - 1e-12):
                    del active[away_key]
            x = x + t * direction
            # rebuild from weights to stop drift
            total = sum(item[0] for item in active.values())
            x = sum(item[0] / total * item[1] for item in active.values())
        history.append(_objective(gen, mix(x), q))
    m = mix(x)
    d = (m - (1 - beta) * rho_t) / beta
    return PrimalSolution(
        d_star=JointVisitation(d), objective_value=_objective(gen, m, q),
        feasibility_residual=verify_flow_constraints(d, d0, mdp), iterations=k, fw_gap=gap,
        mixture=m, smoothing=prob.smoothing, beta=beta, mode=mode, history=history,
    )


def duality_gap(primal: PrimalSolution, dual_optimum: float, dual_smoothing=None) -> float:
    """|primal maximum - dual minimum|.

    The unconstrained objective's minimum equals the primal maximum directly
    (both are -D_f at the optimum); there is no sign flip.
    """
    if dual_smoothing is not None and not np.isclose(dual_smoothing, primal.smoothing, rtol=0, atol=1e-15):
        raise ContractError(f"primal smoothing {primal.smoothing:g} != dual smoothing {dual_smoothing:g}")
    return abs(primal.objective_value - float(dual_optimum))


def grid_search_primal(mdp: TabularMDP, d0_joint, d_expert, rho, beta, gen=CHI2, resolution=21,
                       mode="mixture", smoothing=0.0, refine=True):
    """Brute-force check: search stochastic pair-state policies on a grid, then refine locally.

    Only meant for 2-action MDPs with a handful of pair states; cost is
    ``resolution ** (#reachable pair states)``.
    """
    from scipy.optimize import minimize

    if mdp.n_actions != 2:
        raise ValueError("grid search supports 2-action MDPs only")
    d0 = d0_joint if isinstance(d0_joint, JointInitialDist) else JointInitialDist(d0_joint)
    prob = TabularDualProblem.from_mdp(mdp, d0, d_expert, rho, beta, gen, smoothing)
    q = prob.q
    S = mdp.n_states
    if mode == "mixture":
        mu0 = beta * d0.matrix + (1 - beta) * np.clip(implied_joint_initial(prob.rho, mdp), 0, None)
        scale, shift = 1.0, np.zeros_like(q)
    else:
        mu0, scale, shift = d0.matrix, beta, (1 - beta) * prob.rho
    aug = augmented_mdp(mdp, JointInitialDist(mu0 / mu0.sum()))
    reach = _reachable(aug)
    free = np.flatnonzero(reach)

    def value(p):
        probs = np.full((S * S, 2), 0.5)
        probs[free, 0] = p
        probs[free, 1] = 1 - p
        P_pi = np.einsum("xa,xay->xy", probs, aug.transition)
        dx = (1 - aug.gamma) * np.linalg.solve(np.eye(S * S) - aug.gamma * P_pi.T, aug.initial_dist)
        x = (dx[:, None] * probs).reshape(S, S, 2)
        return _objective(gen, scale * x + shift, q), x

    grid = np.linspace(0.0, 1.0, resolution)
    best, best_p = -np.inf, None
    for p in itertools.product(grid, repeat=free.size):
        val, _ = value(np.array(p))
        if val > best:
            best, best_p = val, np.array(p)
    if refine and free.size:
        res = minimize(lambda p: -value(p)[0], best_p, method="L-BFGS-B", bounds=[(0, 1)] * free.size,
                       options={"ftol": 1e-15, "gtol": 1e-12})
        if -res.fun > best:
            best, best_p = -res.fun, res.x
    return best, value(best_p)[1]


def _reachable(aug: TabularMDP):
    seen = aug.initial_dist > 0
    frontier = seen.copy()
    step = aug.transition.sum(axis=1) > 0
    while frontier.any():
        nxt = step[frontier].any(axis=0) & ~seen
        seen |= nxt
        frontier = nxt
    return seen


# -- problem instances ----------------------------------------------------------------


@dataclass
class OracleInstance:
    mdp: TabularMDP
    d0_joint: JointInitialDist
    d_expert: JointVisitation
    rho: JointVisitation
    beta: float
    name: str = ""


def random_instance(seed, n_states=3, n_actions=2, gamma=0.9, beta=0.5) -> OracleInstance:
    """Random MDP, peaked expert, diffuse behavior; d0_joint uniform over replay pairs."""
    rng = np.random.default_rng(seed)
    mdp = random_mdp(n_states, n_actions, gamma, rng)
    expert = random_policy(n_states, n_actions, rng, concentration=0.3)
    behavior = random_policy(n_states, n_actions, rng, concentration=1.0)
    dE, rho = joint_visitation(mdp, expert), joint_visitation(mdp, behavior)
    support = (dE.pairs + rho.pairs) > 0
    return OracleInstance(mdp, JointInitialDist.uniform_over(support), dE, rho, beta, f"random-{seed}")


def chain_instance(gamma=0.5, beta=0.5) -> OracleInstance:
    from .mdp import TabularPolicy

    mdp = two_state_chain(gamma)
    pi = TabularPolicy.uniform(2, 1)
    dE = joint_visitation(mdp, pi)
    return OracleInstance(mdp, on_policy_joint_initial(mdp, pi), dE, dE, beta, "chain")


def realizable_instance(seed, n_states=3, n_actions=2, gamma=0.9, beta=0.5) -> OracleInstance:
    """rho equals the expert visitation and d0_joint is the expert's own: optimum is exact matching."""
    rng = np.random.default_rng(seed)
    mdp = random_mdp(n_states, n_actions, gamma, rng)
    expert = random_policy(n_states, n_actions, rng, concentration=1.0)
    dE = joint_visitation(mdp, expert)
    return OracleInstance(mdp, on_policy_joint_initial(mdp, expert), dE, dE, beta, f"realizable-{seed}")


def instance_problem(inst: OracleInstance, gen=CHI2, smoothing=0.0) -> TabularDualProblem:
    return TabularDualProblem.from_mdp(inst.mdp, inst.d0_joint, inst.d_expert, inst.rho, inst.beta, gen, smoothing)


@dataclass
class Certificate:
    name: str
    primal: float
    dual: float
    gap: float
    primal_seconds: float
    dual_seconds: float
    fw_gap: float
    feasibility_residual: float


def certify(inst: OracleInstance, tol=1e-6) -> Certificate:
    """Solve both sides of one instance and report the duality gap."""
    t0 = time.perf_counter()
    primal = solve_primal(inst.mdp, inst.d0_joint, inst.d_expert, inst.rho, inst.beta, tol=tol)
    t1 = time.perf_counter()
    dual = solve_dual_exact(instance_problem(inst), tol=tol)
    t2 = time.perf_counter()
    return Certificate(inst.name, primal.objective_value, dual.objective_value,
                       duality_gap(primal, dual.objective_value), t1 - t0, t2 - t1,
                       primal.fw_gap, primal.feasibility_residual)
