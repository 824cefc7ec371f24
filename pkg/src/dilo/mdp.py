"""Exact visitation algebra for finite MDPs.

Tensors are indexed ``(s, a, s')`` for dynamics and ``(s, s', a')`` for joint
visitations, where ``a'`` is the action taken at ``s'``. Absorbing states are
ordinary states whose every action self-loops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ATOL = 1e-9


class NumericError(ArithmeticError):
    pass


class ModelError(ValueError):
    pass


def _check_simplex(x, axis, what, atol=ATOL):
    if np.any(x < -atol):
        raise ModelError(f"{what} has negative entries")
    sums = x.sum(axis=axis)
    if not np.allclose(sums, 1.0, atol=atol, rtol=0.0):
        raise ModelError(f"{what} does not sum to 1 (max error {np.max(np.abs(sums - 1.0)):.3g})")


@dataclass(frozen=True)
class TabularMDP:
    transition: np.ndarray  # (S, A, S)
    initial_dist: np.ndarray  # (S,)
    gamma: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        d0 = np.asarray(self.initial_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ModelError(f"transition must have shape (S, A, S), got {P.shape}")
        if d0.shape != (P.shape[0],):
            raise ModelError("initial_dist length must equal n_states")
        _check_simplex(P, 2, "transition rows")
        _check_simplex(d0, 0, "initial_dist")
        if not 0.0 < self.gamma < 1.0:
            raise ModelError("gamma must lie strictly inside (0, 1)")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "initial_dist", d0)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ModelError("policy probs must be a matrix (S, A)")
        _check_simplex(probs, 1, "policy rows")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions):
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)


@dataclass(frozen=True)
class JointVisitation:
    """Discounted visitation over (s, s', a')."""

    tensor: np.ndarray

    @property
    def pairs(self) -> np.ndarray:
        return self.tensor.sum(axis=2)

    @property
    def states(self) -> np.ndarray:
        return self.tensor.sum(axis=(1, 2))

    def total(self) -> float:
        return float(self.tensor.sum())


@dataclass(frozen=True)
class JointInitialDist:
    matrix: np.ndarray  # (S, S)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ModelError("joint initial distribution must be square")
        _check_simplex(m.ravel(), 0, "joint initial distribution")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def uniform_over(cls, mask):
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ModelError("empty support for joint initial distribution")
        return cls(mask / mask.sum())


def state_visitation(mdp: TabularMDP, pi: TabularPolicy) -> np.ndarray:
    P_pi = np.einsum("sa,sat->st", pi.probs, mdp.transition)
    A = np.eye(mdp.n_states) - mdp.gamma * P_pi.T
    try:
        ds = np.linalg.solve(A, (1.0 - mdp.gamma) * mdp.initial_dist)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"flow system is singular: {exc}") from exc
    # solve() can leave -1e-17 entries on unreachable states
    return np.clip(ds, 0.0, None)


def state_action_visitation(mdp: TabularMDP, pi: TabularPolicy) -> np.ndarray:
    """d(s, a) = (1 - gamma) pi(a|s) sum_t gamma^t P(s_t = s)."""
    return state_visitation(mdp, pi)[:, None] * pi.probs


def joint_visitation(mdp: TabularMDP, pi: TabularPolicy) -> JointVisitation:
    dsa = state_action_visitation(mdp, pi)
    pair = np.einsum("sa,sat->st", dsa, mdp.transition)
    return JointVisitation(pair[:, :, None] * pi.probs[None, :, :])


def on_policy_joint_initial(mdp: TabularMDP, pi: TabularPolicy) -> JointInitialDist:
    step = np.einsum("sa,sat->st", pi.probs, mdp.transition)
    return JointInitialDist(mdp.initial_dist[:, None] * step)


def flow_residuals(d, d0_joint, mdp: TabularMDP) -> np.ndarray:
    """LHS - RHS of the pair-level flow equations, one entry per (s', s'')."""
    tensor = d.tensor if isinstance(d, JointVisitation) else np.asarray(d)
    d0 = d0_joint.matrix if isinstance(d0_joint, JointInitialDist) else np.asarray(d0_joint)
    if tensor.shape != (mdp.n_states, mdp.n_states, mdp.n_actions) or d0.shape != tensor.shape[:2]:
        raise ModelError("shape mismatch between visitation, initial distribution and MDP")
    lhs = tensor.sum(axis=2)
    inflow = tensor.sum(axis=0)  # (s', a')
    rhs = (1.0 - mdp.gamma) * d0 + mdp.gamma * np.einsum("ta,tau->tu", inflow, mdp.transition)
    return lhs - rhs


def verify_flow_constraints(d, d0_joint, mdp: TabularMDP) -> float:
    return float(np.max(np.abs(flow_residuals(d, d0_joint, mdp))))


def implied_joint_initial(d, mdp: TabularMDP) -> np.ndarray:
    """The d0 (over pairs) for which ``d`` satisfies the flow equations exactly."""
    tensor = d.tensor if isinstance(d, JointVisitation) else np.asarray(d)
    inflow = tensor.sum(axis=0)
    out = tensor.sum(axis=2) - mdp.gamma * np.einsum("ta,tau->tu", inflow, mdp.transition)
    return out / (1.0 - mdp.gamma)


def augmented_mdp(mdp: TabularMDP, d0_joint: JointInitialDist) -> TabularMDP:
    """MDP over pair states ``x = s * S + s'``; action a'' at (s, s') moves to (s', s'')."""
    S, A = mdp.n_states, mdp.n_actions
    d0 = d0_joint.matrix
    feasible = mdp.transition.sum(axis=1) > 0  # (s, s') reachable in one step
    if np.any(d0[~feasible] > ATOL):
        raise ModelError("joint initial distribution puts mass on pairs with zero transition probability")
    T = np.zeros((S, S, A, S, S))
    for t in range(S):
        T[:, t, :, t, :] = mdp.transition[t][None, :, :]
    return TabularMDP(T.reshape(S * S, A, S * S), d0.ravel(), mdp.gamma)


def reachable_states(mdp: TabularMDP) -> np.ndarray:
    """States reachable from the initial distribution under some action sequence."""
    seen = mdp.initial_dist > 0
    frontier = seen.copy()
    step = mdp.transition.sum(axis=1) > 0  # (s, s')
    while frontier.any():
        nxt = step[frontier].any(axis=0) & ~seen
        seen |= nxt
        frontier = nxt
    return seen


# -- small fixtures used by oracles, tests and the CLI ------------------------


def two_state_chain(gamma=0.5, n_actions=1) -> TabularMDP:
    """0 -> 1, 1 absorbing, start in 0."""
    P = np.zeros((2, n_actions, 2))
    P[:, :, 1] = 1.0
    return TabularMDP(P, np.array([1.0, 0.0]), gamma)


def self_loop(gamma=0.5) -> TabularMDP:
    return TabularMDP(np.ones((1, 1, 1)), np.ones(1), gamma)


def deterministic_cycle(n_states, gamma=0.9) -> TabularMDP:
    P = np.zeros((n_states, 1, n_states))
    P[np.arange(n_states), 0, (np.arange(n_states) + 1) % n_states] = 1.0
    return TabularMDP(P, np.full(n_states, 1.0 / n_states), gamma)


def random_mdp(n_states, n_actions, gamma, rng, concentration=1.0) -> TabularMDP:
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    d0 = rng.dirichlet(np.ones(n_states))
    return TabularMDP(P, d0, gamma)


def random_policy(n_states, n_actions, rng, concentration=1.0) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.full(n_actions, concentration), size=n_states))
