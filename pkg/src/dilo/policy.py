"""Policy extraction from a trained V, the BC and BCO baselines, and evaluation.

Extraction is value-weighted regression on the offline data: each observed
``(s, a, s')`` is weighted by ``min(exp(tau * V(s, s')), clip_max)``. Tabular
policies are solved in closed form; continuous ones are fit by weighted
maximum likelihood.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import data as D
from .approx import MLP, Adam, GaussianPolicy, SoftmaxTablePolicy
from .dual import DiloConfig
from .envs import Gridworld, TabularActor, UniformActor, expert_policy, rollout

# -- weights -------------------------------------------------------------------


def log_weights(v, s, s_next, cfg: DiloConfig):
    """log of the clipped weight, clipped before exponentiating."""
    return np.minimum(cfg.tau * np.asarray(v(s, s_next), float), math.log(cfg.clip_max))


def extraction_weights(v, s, s_next, cfg: DiloConfig):
    lw = log_weights(v, s, s_next, cfg)
    # exp(log(c)) can round away from c; clipped rows get clip_max exactly
    return np.where(lw >= math.log(cfg.clip_max), cfg.clip_max, np.exp(lw))


# -- tabular helpers -----------------------------------------------------------------


def _normalize_rows(counts):
    """Row-normalize; rows without mass become uniform. Returns (probs, uncovered)."""
    tot = counts.sum(axis=1, keepdims=True)
    uncovered = tot[:, 0] <= 0
    probs = np.where(uncovered[:, None], 1.0 / counts.shape[1], counts / np.where(tot > 0, tot, 1.0))
    return probs, np.flatnonzero(uncovered)


def _table_policy(counts, strides):
    probs, uncovered = _normalize_rows(counts)
    pol = SoftmaxTablePolicy.from_probs(probs, strides)
    pol.uncovered = uncovered
    return pol


def _tabular_extract(v, offline, cfg, n_actions):
    b = D.all_offline_sas(offline)
    si = v.index(b.s)
    a = b.a.reshape(-1).astype(np.int64)
    lw = log_weights(v, b.s, b.s_next, cfg)
    # weights only matter up to a per-state factor, so shift by the state max;
    # this keeps every visited state finite even when all its weights underflow
    top = np.full(v.n_states, -np.inf)
    np.maximum.at(top, si, lw)
    counts = np.zeros((v.n_states, n_actions))
    np.add.at(counts, (si, a), np.exp(lw - top[si]))
    return _table_policy(counts, v.strides)


def _fit_gaussian(obs, actions, weights, cfg: DiloConfig, rng):
    scale = float(np.max(np.abs(actions))) if actions.size else 1.0
    pol = GaussianPolicy(obs.shape[1], actions.shape[1], cfg.hidden, rng,
                         obs.mean(axis=0), obs.std(axis=0) + 1e-6, action_scale=max(scale, 1e-6))
    opt = Adam(pol.params, cfg.policy_lr)
    n = len(obs)
    for _ in range(cfg.policy_steps):
        idx = rng.integers(n, size=min(cfg.batch_size, n))
        _, grads = pol.weighted_nll_grad(obs[idx], actions[idx], weights[idx] / len(idx))
        opt.step(grads)
    return pol


def extract_policy(v, offline, cfg: DiloConfig, rng=None, n_actions=None):
    """Value-weighted regression of the offline actions.

    A table value gives a ``SoftmaxTablePolicy`` whose ``uncovered`` attribute
    lists the states with no offline transitions (their rows are uniform).
    Any other value gives a ``GaussianPolicy`` trained for ``cfg.policy_steps``.
    """
    if not offline.has_actions:
        raise D.MissingActionsError("policy extraction needs an offline dataset with actions")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if v.kind == "table":
        if n_actions is None:
            n_actions = int(offline.actions.max()) + 1
        return _tabular_extract(v, offline, cfg, n_actions)
    b = D.all_offline_sas(offline)
    w = extraction_weights(v, b.s, b.s_next, cfg)
    return _fit_gaussian(b.s, b.a, w, cfg, rng)


# -- baselines ------------------------------------------------------------------------


def _is_tabular(env):
    return isinstance(env, Gridworld)


def _state_counts(env, obs, actions):
    counts = np.zeros((env.n_states, env.n_actions))
    np.add.at(counts, (env.indices_of(obs), actions.reshape(-1).astype(np.int64)), 1.0)
    return counts


def train_bc(dataset, env, cfg: DiloConfig | None = None, rng=None):
    """Behavior cloning: empirical action frequencies, or Gaussian maximum likelihood."""
    if not dataset.has_actions:
        raise D.MissingActionsError("behavior cloning needs actions")
    cfg = cfg or DiloConfig()
    b = D.all_offline_sas(dataset)
    if _is_tabular(env):
        return _table_policy(_state_counts(env, b.s, b.a), (env.width, 1))
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return _fit_gaussian(b.s, b.a, np.ones(len(b)), cfg, rng)


class TabularIDM:
    """Maximum-likelihood inverse dynamics by lookup.

    A pair never seen in the offline data gets the most frequent offline
    action at ``s``; a state never seen gets action 0. Nothing is rejected.
    """

    def __init__(self, env, offline):
        b = D.all_offline_sas(offline)
        S, A = env.n_states, env.n_actions
        self.env = env
        self.counts = np.zeros((S, S, A))
        a = b.a.reshape(-1).astype(np.int64)
        np.add.at(self.counts, (env.indices_of(b.s), env.indices_of(b.s_next), a), 1.0)
        self.marginal = self.counts.sum(axis=1)

    def __call__(self, s, s_next):
        i, j = self.env.indices_of(s), self.env.indices_of(s_next)
        c = self.counts[i, j]
        seen = c.sum(axis=1) > 0
        return np.where(seen, c.argmax(axis=1), self.marginal[i].argmax(axis=1)).astype(float)[:, None]


class NetworkIDM:
    """Least-squares regressor ``a = net(s, s')``."""

    def __init__(self, offline, cfg: DiloConfig, rng, steps=2_000, lr=1e-3):
        b = D.all_offline_sas(offline)
        x = np.concatenate([b.s, b.s_next], axis=1)
        self.mean, self.std = x.mean(axis=0), x.std(axis=0) + 1e-6
        self.net = MLP((x.shape[1], *cfg.hidden, b.a.shape[1]), rng)
        opt = Adam(self.net.params, lr)
        x = (x - self.mean) / self.std
        for _ in range(steps):
            idx = rng.integers(len(x), size=min(cfg.batch_size, len(x)))
            out, acts = self.net.forward(x[idx])
            grads, _ = self.net.backward(acts, 2.0 * (out - b.a[idx]) / len(idx))
            opt.step(grads)

    def __call__(self, s, s_next):
        return self.net((np.concatenate([s, s_next], axis=1) - self.mean) / self.std)


def train_bco(expert_obs, offline, env, cfg: DiloConfig | None = None, rng=None, idm_steps=2_000):
    """Behavior cloning from observation: label expert pairs with an inverse
    dynamics model fit on the offline data, then clone the labels."""
    if not offline.has_actions:
        raise D.MissingActionsError("BCO needs an offline dataset with actions")
    cfg = cfg or DiloConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    obs, pairs = expert_obs.observations, expert_obs.pair_index
    s, s_next = obs[pairs[:, 0]], obs[pairs[:, 1]]
    if _is_tabular(env):
        labels = TabularIDM(env, offline)(s, s_next)
        return _table_policy(_state_counts(env, s, labels), (env.width, 1))
    idm = NetworkIDM(offline, cfg, rng, steps=idm_steps)
    labels = np.clip(idm(s, s_next), -env.max_action, env.max_action)
    return _fit_gaussian(s, labels, np.ones(len(s)), cfg, rng)


# -- evaluation ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    mean_return: float
    normalized_score: float
    success_rate: float
    n_episodes: int
    seed: int
    return_stderr: float
    normalized_stderr: float

    @staticmethod
    def csv_header():
        return ",".join(EvalReport.__dataclass_fields__)

    def csv_row(self):
        return ",".join(repr(x) for x in asdict(self).values())


@dataclass(frozen=True)
class References:
    random_return: float
    expert_return: float

    def normalize(self, ret):
        return 100.0 * (ret - self.random_return) / (self.expert_return - self.random_return)


class PolicyActor:
    """Adapts a parametric policy to the ``(obs, rng) -> action`` interface."""

    def __init__(self, policy, greedy=True):
        self.policy, self.greedy = policy, greedy

    def __call__(self, obs, rng):
        return self.policy.act(obs, rng, greedy=self.greedy)


def episode_seeds(seed, n_episodes):
    return [int(x) for x in np.random.SeedSequence(seed).generate_state(n_episodes, np.uint64)]


def run_episodes(env, actor, n_episodes, seed, horizon):
    """(returns, successes) over ``n_episodes`` seeded rollouts."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    trajs = [rollout(env, actor, horizon, s) for s in episode_seeds(seed, n_episodes)]
    return (np.array([env.episode_return(t) for t in trajs]),
            np.array([float(env.success(t)) for t in trajs]))


def reference_returns(env, n_episodes, seed, horizon, expert_actor=None):
    """Mean returns of the uniform-random and expert policies on the same seeds."""
    if expert_actor is None:
        expert_actor = default_expert(env)
    rand = UniformActor(n_actions=env.n_actions) if _is_tabular(env) else \
        UniformActor(low=[-env.max_action] * 2, high=[env.max_action] * 2)
    r_rand, _ = run_episodes(env, rand, n_episodes, seed, horizon)
    r_exp, _ = run_episodes(env, expert_actor, n_episodes, seed, horizon)
    return References(float(r_rand.mean()), float(r_exp.mean()))


def default_expert(env):
    from .envs import default_policies

    return default_policies(env)[0]


def evaluate_policy(env, policy, n_episodes, seed, references: References | None = None,
                    horizon=20, greedy=True) -> EvalReport:
    """Roll out ``policy`` on per-episode seeds derived from ``seed``.

    ``policy`` is either an actor ``(obs, rng) -> action`` or a parametric
    policy with ``act(obs, rng, greedy)``. Without references the
    normalized score is NaN.
    """
    actor = PolicyActor(policy, greedy) if hasattr(policy, "act") else policy
    returns, successes = run_episodes(env, actor, n_episodes, seed, horizon)
    mean = float(returns.mean())
    stderr = float(returns.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    if references is None:
        norm = norm_err = float("nan")
    else:
        norm = references.normalize(mean)
        norm_err = 100.0 * stderr / abs(references.expert_return - references.random_return)
    return EvalReport(mean, float(norm), float(successes.mean()), int(n_episodes), int(seed),
                      stderr, float(norm_err))


# -- the partial-action-coverage instance ------------------------------------------------

FORK = (0, 3)
DOWN = 2


def partial_coverage_instance(seed=0, n_expert=5, n_offline=50, noise=0.5, horizon=20):
    """Deterministic gridworld where the offline data never takes the expert's
    action at one fork cell.

    Offline behavior follows the expert with probability ``1 - noise`` and acts
    uniformly otherwise, except at ``FORK`` where it always moves down. The
    expert pair leaving ``FORK`` is therefore unseen by any inverse dynamics
    model, which labels it "down". Returns ``(env, expert_obs, offline)``.
    """
    env = Gridworld(slip_prob=0.0)
    pi = expert_policy(env).probs
    behavior = (1.0 - noise) * pi + noise / env.n_actions
    behavior[env.index_of(FORK)] = np.eye(env.n_actions)[DOWN]
    expert_actor = TabularActor(pi, env.index_of)
    beh_actor = TabularActor(behavior, env.index_of)
    ss = np.random.SeedSequence(seed).generate_state(2)
    offline = D.compose_mixture_dataset(env, expert_actor, beh_actor, 0, n_offline, horizon, int(ss[0]))
    expert = D.compose_mixture_dataset(env, expert_actor, beh_actor, n_expert, 0, horizon, int(ss[1]))
    return env, D.strip_actions(expert), offline
