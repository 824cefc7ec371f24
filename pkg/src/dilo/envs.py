"""Toy environments and scripted experts.

Environments expose ``reset() -> obs`` and ``step(action) -> (obs, terminal)``.
Reward is never returned by ``step``; evaluation reads it through
``episode_return`` so that no learner sees it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Trajectory
from .mdp import TabularMDP, TabularPolicy

# up, right, down, left as (d_row, d_col)
MOVES = np.array([[-1, 0], [0, 1], [1, 0], [0, -1]])


def value_iteration(mdp: TabularMDP, reward, tol=1e-10, max_iter=1_000_000):
    """Optimal values and the greedy policy for a state or state-action reward.

    A state reward ``r(s)`` is collected on being in ``s``:
    ``V(s) = r(s) + gamma * max_a sum_s' p(s'|s,a) V(s')``. Ties go to the
    lowest action index.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    r = np.asarray(reward, dtype=float)
    if r.shape == (mdp.n_states,):
        r = np.repeat(r[:, None], mdp.n_actions, axis=1)
    if r.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"reward shape {r.shape} does not match the MDP")
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = r + mdp.gamma * mdp.transition @ V
        V_new = Q.max(axis=1)
        done = np.max(np.abs(V_new - V)) <= tol
        V = V_new
        if done:
            break
    Q = r + mdp.gamma * mdp.transition @ V
    return V, TabularPolicy.deterministic(np.argmax(Q, axis=1), mdp.n_actions)


class Gridworld:
    """Stochastic gridworld with an absorbing goal and impassable obstacles.

    Observations are ``[row, col]`` as floats. With probability ``slip_prob``
    the chosen move is replaced by one of the other three, uniformly.
    """

    n_actions = 4
    obs_dim = 2
    act_dim = 1
    name = "gridworld"

    def __init__(self, width=5, height=5, slip_prob=0.1, goal=(4, 4),
                 obstacles=((1, 1), (2, 3), (3, 1)), start=(0, 0), seed=0):
        goal = tuple(goal)
        obstacles = tuple(tuple(o) for o in obstacles)
        if goal in obstacles or tuple(start) in obstacles:
            raise ValueError("goal and start must not be obstacles")
        if not 0.0 <= slip_prob <= 0.5:
            raise ValueError("slip_prob must lie in [0, 0.5]")
        self.width, self.height = int(width), int(height)
        self.slip_prob = float(slip_prob)
        self.goal = goal
        self.obstacles = obstacles
        self.start = tuple(start)
        self.rng = np.random.default_rng(seed)
        self._state = self.index_of(self.start)
        self._P = self._build_transition()

    @property
    def n_states(self):
        return self.width * self.height

    @property
    def goal_index(self):
        return self.index_of(self.goal)

    def index_of(self, obs):
        row, col = np.asarray(obs, dtype=float).reshape(-1)[:2]
        return int(round(row)) * self.width + int(round(col))

    def indices_of(self, obs):
        obs = np.asarray(obs, dtype=float)
        return (np.rint(obs[..., 0]) * self.width + np.rint(obs[..., 1])).astype(np.int64)

    def obs_of(self, index):
        return np.array(divmod(int(index), self.width), dtype=float)

    def _move(self, index, action):
        if index == self.goal_index:
            return index
        row, col = divmod(index, self.width)
        r, c = row + MOVES[action][0], col + MOVES[action][1]
        if not (0 <= r < self.height and 0 <= c < self.width) or (r, c) in self.obstacles:
            return index
        return r * self.width + c

    def _build_transition(self):
        S = self.n_states
        P = np.zeros((S, 4, S))
        for s in range(S):
            for a in range(4):
                P[s, a, self._move(s, a)] += 1.0 - self.slip_prob
                for b in range(4):
                    if b != a:
                        P[s, a, self._move(s, b)] += self.slip_prob / 3.0
        return P

    def tabular_mdp(self, gamma=0.99) -> TabularMDP:
        d0 = np.zeros(self.n_states)
        d0[self.index_of(self.start)] = 1.0
        return TabularMDP(self._P.copy(), d0, gamma)

    def hidden_reward(self):
        """State reward: 1 at the goal. Used for expert construction only."""
        r = np.zeros(self.n_states)
        r[self.goal_index] = 1.0
        return r

    def transition(self, index, action, u):
        """Successor of ``index`` under ``action`` given a uniform draw ``u``."""
        probs = self._P[index, int(action)]
        return int(min(np.searchsorted(np.cumsum(probs), u, side="right"), self.n_states - 1))

    def reset(self):
        self._state = self.index_of(self.start)
        return self.obs_of(self._state)

    def step(self, action):
        a = int(np.asarray(action).reshape(-1)[0])
        self._state = self.transition(self._state, a, self.rng.random())
        return self.obs_of(self._state), self._state == self.goal_index

    def episode_return(self, traj: Trajectory) -> float:
        return float(self.index_of(traj.observations[-1]) == self.goal_index)

    def success(self, traj: Trajectory) -> bool:
        return self.episode_return(traj) > 0


def expert_policy(env: Gridworld, gamma=0.99) -> TabularPolicy:
    _, pi = value_iteration(env.tabular_mdp(gamma), env.hidden_reward())
    return pi


@dataclass
class Disc:
    center: tuple
    radius: float

    def distance_to_segment(self, a, b):
        a, b, c = np.asarray(a, float), np.asarray(b, float), np.asarray(self.center, float)
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom == 0.0 else float(np.clip((c - a) @ ab / denom, 0.0, 1.0))
        return float(np.linalg.norm(a + t * ab - c))

    def contains(self, p):
        return float(np.linalg.norm(np.asarray(p, float) - self.center)) <= self.radius


def _default_obstacles():
    return [Disc((0.35, 0.3), 0.07), Disc((0.3, 0.6), 0.07),
            Disc((0.6, 0.45), 0.07), Disc((0.62, 0.75), 0.07)]


@dataclass
class PointMassEnv:
    """Point mass in the unit square: ``s' = clip(s + a * dt)``.

    Reaching the goal disc is absorbing; crossing an obstacle disc counts as
    a contact but does not stop the episode.
    """

    dt: float = 0.05
    max_action: float = 1.0
    obstacles: list = field(default_factory=_default_obstacles)
    goal: Disc = field(default_factory=lambda: Disc((0.85, 0.85), 0.06))
    start_low: tuple = (0.05, 0.05)
    start_high: tuple = (0.15, 0.15)
    seed: int = 0

    obs_dim = 2
    act_dim = 2
    name = "pointmass"

    def __post_init__(self):
        for disc in [*self.obstacles, self.goal]:
            c = np.asarray(disc.center)
            if np.any(c - disc.radius < 0) or np.any(c + disc.radius > 1):
                raise ValueError("obstacles and goal must lie inside the unit square")
        self.rng = np.random.default_rng(self.seed)
        self._state = np.asarray(self.start_low, float)

    def clip_action(self, action):
        return np.clip(np.asarray(action, float).reshape(2), -self.max_action, self.max_action)

    def dynamics(self, state, action):
        return np.clip(np.asarray(state, float) + self.clip_action(action) * self.dt, 0.0, 1.0)

    def contact(self, s, s_next):
        return any(o.distance_to_segment(s, s_next) < o.radius for o in self.obstacles)

    def reset(self):
        self._state = self.rng.uniform(self.start_low, self.start_high)
        return self._state.copy()

    def step(self, action):
        self._state = self.dynamics(self._state, action)
        return self._state.copy(), self.goal.contains(self._state)

    def n_contacts(self, traj: Trajectory) -> int:
        obs = traj.observations
        return sum(self.contact(obs[t], obs[t + 1]) for t in range(len(obs) - 1))

    def success(self, traj: Trajectory) -> bool:
        return self.goal.contains(traj.observations[-1]) and self.n_contacts(traj) == 0

    def episode_return(self, traj: Trajectory) -> float:
        return float(self.success(traj))


def scripted_pointmass_expert(env: PointMassEnv, state, gain=1.0, repulse=3.0, reach=2.5, deadband=1e-3):
    """Potential-field controller: attraction to the goal, repulsion near obstacles.

    Repulsion acts within ``reach`` times an obstacle's radius and carries a tangential
    part so that an obstacle sitting on the goal line is circumvented.
    """
    s = np.asarray(state, float)
    to_goal = np.asarray(env.goal.center) - s
    dist = float(np.linalg.norm(to_goal))
    if dist < deadband:
        return np.zeros(2)
    # cap attraction at the action bound so repulsion can dominate near obstacles
    a = to_goal / dist * min(env.max_action, gain * dist / env.dt)
    for o in env.obstacles:
        away = s - np.asarray(o.center)
        r = float(np.linalg.norm(away))
        if r >= reach * o.radius or r == 0.0:
            continue
        n = away / r
        tangent = np.array([-n[1], n[0]])
        if tangent @ to_goal < 0:
            tangent = -tangent
        strength = repulse * (reach * o.radius - r) / ((reach - 1.0) * o.radius) * env.max_action
        a = a + strength * (n + tangent)
    scale = np.max(np.abs(a))
    if scale > env.max_action:
        a = a * (env.max_action / scale)
    return a


class TabularActor:
    """Callable ``(obs, rng) -> action`` for a tabular policy on an indexed env."""

    def __init__(self, probs, index_fn, greedy=False):
        self.probs = np.asarray(probs, float)
        self.index_fn = index_fn
        self.greedy = greedy

    def __call__(self, obs, rng):
        p = self.probs[self.index_fn(obs)]
        if self.greedy:
            return np.array([float(np.argmax(p))])
        return np.array([float(rng.choice(p.size, p=p))])


class UniformActor:
    def __init__(self, n_actions=None, low=None, high=None):
        self.n_actions, self.low, self.high = n_actions, low, high

    def __call__(self, obs, rng):
        if self.n_actions is not None:
            return np.array([float(rng.integers(self.n_actions))])
        return rng.uniform(self.low, self.high)


class PointMassExpert:
    def __init__(self, env, noise=0.0):
        self.env, self.noise = env, noise

    def __call__(self, obs, rng):
        a = scripted_pointmass_expert(self.env, obs)
        if self.noise:
            a = self.env.clip_action(a + self.noise * rng.standard_normal(2))
        return a


def rollout(env, policy, horizon, seed) -> Trajectory:
    """Run one episode of at most ``horizon`` transitions.

    The action stored on the final observation is what the policy would do
    there; it is never executed. ``terminal`` marks absorbing termination,
    a horizon cut leaves it False.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = np.random.default_rng(seed)
    env.rng = np.random.default_rng(rng.integers(2**63))
    obs = [env.reset()]
    acts = []
    terminal = False
    for _ in range(horizon):
        a = np.asarray(policy(obs[-1], rng), float).reshape(-1)
        acts.append(a)
        nxt, terminal = env.step(a)
        obs.append(nxt)
        if terminal:
            break
    acts.append(np.asarray(policy(obs[-1], rng), float).reshape(-1))
    return Trajectory(np.array(obs), np.array(acts), terminal)


def make_env(name, **params):
    if name == "gridworld":
        return Gridworld(**params)
    if name == "pointmass":
        params = dict(params)
        if "obstacles" in params:
            params["obstacles"] = [Disc(tuple(c), float(r)) for c, r in params["obstacles"]]
        if "goal" in params:
            c, r = params["goal"]
            params["goal"] = Disc(tuple(c), float(r))
        return PointMassEnv(**params)
    raise ValueError(f"unknown environment {name!r}")


def default_policies(env, gamma=0.99):
    """(expert actor, suboptimal behavior actor) for an environment."""
    if isinstance(env, Gridworld):
        pi = expert_policy(env, gamma)
        return TabularActor(pi.probs, env.index_of), UniformActor(n_actions=env.n_actions)
    return PointMassExpert(env), UniformActor(low=[-env.max_action] * 2, high=[env.max_action] * 2)

