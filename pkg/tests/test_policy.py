import math

import numpy as np
import pytest

from dilo import data as D
from dilo.approx import GaussianPolicy, SoftmaxTablePolicy, TableValue
from dilo.dual import DiloConfig, train_value
from dilo.envs import (Gridworld, PointMassExpert, UniformActor, default_policies, expert_policy,
                       make_env, rollout)
from dilo.policy import (DOWN, FORK, EvalReport, References, TabularIDM, evaluate_policy, extract_policy,
                         extraction_weights, log_weights, partial_coverage_instance, reference_returns, train_bc,
                         train_bco)


def _tiny_offline():
    """One state-0 visit per action, with distinct successors."""
    obs = [np.array([[0.0], [a + 1.0]]) for a in range(3)]
    trajs = tuple(D.Trajectory(o, np.array([[float(a)], [0.0]])) for a, o in enumerate(obs))
    return D.TrajectoryDataset(trajs, "toy", 1, 1, True)


def test_small_tau_gives_behavior_cloning(grid, grid_data):
    offline, _ = grid_data
    v = TableValue(25, (5, 1))
    v.table[...] = np.random.default_rng(0).normal(size=(25, 25))
    pol = extract_policy(v, offline, DiloConfig(tau=1e-12), n_actions=4)
    bc = train_bc(offline, grid)
    assert np.allclose(pol.probs, bc.probs, atol=1e-9)


def test_clipped_single_row_dominates():
    v = TableValue(4)
    v.table[0, 2] = 10.0  # weight clipped to 100
    v.table[0, 1] = v.table[0, 3] = -10.0
    pol = extract_policy(v, _tiny_offline(), DiloConfig(), n_actions=3)
    assert pol.probs[0, 1] >= 0.99


def test_clip_before_exponentiate():
    v = TableValue(2)
    v.table[0, 1] = 20.0 / 3.0  # tau * V = 20
    s, s1 = np.array([[0.0]]), np.array([[1.0]])
    with np.errstate(over="raise"):
        assert extraction_weights(v, s, s1, DiloConfig())[0] == 100.0
        assert log_weights(v, s, s1, DiloConfig())[0] == math.log(100.0)


def test_argmax_invariance_and_clip_identity(grid_data, rng):
    offline, _ = grid_data
    v = TableValue(25, (5, 1))
    v.table[...] = rng.normal(size=(25, 25))
    cfg = DiloConfig()
    base = extract_policy(v, offline, cfg, n_actions=4).probs
    shifted = TableValue(25, (5, 1))
    shifted.table[...] = v.table - 7.0  # scales every weight by exp(-21)
    pre = TableValue(25, (5, 1))
    pre.table[...] = np.minimum(v.table, math.log(cfg.clip_max) / cfg.tau)
    shifted_cfg = DiloConfig(clip_max=cfg.clip_max * math.exp(-21.0))
    assert np.allclose(extract_policy(shifted, offline, shifted_cfg, n_actions=4).probs, base)
    assert np.allclose(extract_policy(pre, offline, cfg, n_actions=4).probs, base)


def test_underflowing_weights_stay_finite(grid_data):
    offline, _ = grid_data
    v = TableValue(25, (5, 1))
    v.table[...] = -500.0
    pol = extract_policy(v, offline, DiloConfig(), n_actions=4)
    assert np.all(np.isfinite(pol.probs)) and np.allclose(pol.probs.sum(axis=1), 1.0)


def test_uncovered_states_uniform_and_recorded(grid_data):
    offline, _ = grid_data
    pol = extract_policy(TableValue(25, (5, 1)), offline, DiloConfig(), n_actions=4)
    seen = set(Gridworld().indices_of(offline.observations[offline.pair_index[:, 0]]).tolist())
    assert set(pol.uncovered.tolist()) == set(range(25)) - seen
    assert np.allclose(pol.probs[pol.uncovered], 0.25)


def test_extraction_needs_actions(grid_data):
    _, expert = grid_data
    with pytest.raises(D.MissingActionsError):
        extract_policy(TableValue(25, (5, 1)), expert, DiloConfig())


def test_continuous_extraction_prefers_high_value_actions(rng):
    # actions +1 lead to high V, actions -1 to low V
    obs = rng.uniform(0, 1, size=(200, 2))
    acts = np.where(rng.random((200, 1)) < 0.5, 1.0, -1.0) * np.ones((1, 2))
    trajs = tuple(D.Trajectory(np.stack([o, o + 0.05 * a]), np.stack([a, a])) for o, a in zip(obs, acts))
    ds = D.TrajectoryDataset(trajs, "pointmass", 2, 2, True)

    class Toy:
        kind = "mlp"

        def __call__(self, s, s_next):
            return 10.0 * np.sign((s_next - s)[:, 0])

    cfg = DiloConfig(policy_steps=400, batch_size=64, policy_lr=3e-3, hidden=(16,))
    pol = extract_policy(Toy(), ds, cfg, rng)
    assert isinstance(pol, GaussianPolicy)
    assert np.mean(pol.net(pol._x(obs))[:, 0]) > 0.8


def test_bc_expert_ceiling(grid):
    expert, behavior = default_policies(grid)
    demos = D.compose_mixture_dataset(grid, expert, behavior, 20, 0, 20, 99)
    rep = evaluate_policy(grid, train_bc(demos, grid), 100, 1)
    assert rep.success_rate >= 0.95


def test_bco_recovers_expert_in_deterministic_grid():
    env = Gridworld(slip_prob=0.0)
    expert, behavior = default_policies(env)
    offline = D.compose_mixture_dataset(env, expert, behavior, 0, 300, 20, 0)
    demos = D.strip_actions(D.compose_mixture_dataset(env, expert, behavior, 3, 0, 20, 1))
    pol = train_bco(demos, offline, env)
    pi = expert_policy(env).probs
    visited = np.unique(env.indices_of(demos.observations[demos.pair_index[:, 0]]))
    assert np.array_equal(pol.probs[visited].argmax(1), pi[visited].argmax(1))


def test_idm_labels_unseen_pairs_with_marginal():
    env, demos, offline = partial_coverage_instance(0)
    idm = TabularIDM(env, offline)
    fork = np.array([FORK], float)
    right = fork + [0.0, 1.0]
    assert idm(fork, right)[0, 0] == DOWN  # the expert went right; no offline row says so


def test_bco_network_runs():
    env = make_env("pointmass")
    offline = D.compose_mixture_dataset(env, PointMassExpert(env, 0.3), UniformActor(low=[-1, -1], high=[1, 1]),
                                        5, 5, 40, 0)
    demos = D.strip_actions(D.compose_mixture_dataset(env, PointMassExpert(env), None, 2, 0, 40, 1))
    cfg = DiloConfig(policy_steps=50, hidden=(16,))
    pol = train_bco(demos, offline, env, cfg, idm_steps=50)
    assert pol.act(demos.observations[:1], np.random.default_rng(0)).shape == (2,)


# -- evaluation -------------------------------------------------------------------------


def test_expert_against_itself_scores_100(grid):
    expert, _ = default_policies(grid)
    refs = reference_returns(grid, 50, 3, 20)
    assert evaluate_policy(grid, expert, 50, 3, refs).normalized_score == pytest.approx(100.0, abs=1e-9)


def test_random_policy_scores_zero(grid):
    refs = reference_returns(grid, 100, 3, 20)
    rep = evaluate_policy(grid, UniformActor(n_actions=4), 100, 3, refs)
    assert rep.normalized_score == pytest.approx(0.0, abs=1e-9)
    other = evaluate_policy(grid, UniformActor(n_actions=4), 100, 4, refs)
    assert abs(other.normalized_score) <= 3 * other.normalized_stderr + 1e-9


def test_evaluation_deterministic(grid):
    pol = SoftmaxTablePolicy.from_probs(np.full((25, 4), 0.25), (5, 1))
    a = evaluate_policy(grid, pol, 20, 9, greedy=False)
    b = evaluate_policy(grid, pol, 20, 9, greedy=False)
    assert a.csv_row() == b.csv_row() and math.isnan(a.normalized_score)


def test_report_csv_row():
    rep = EvalReport(0.5, 50.0, 0.5, 10, 0, 0.1, 10.0)
    assert EvalReport.csv_header().split(",")[:3] == ["mean_return", "normalized_score", "success_rate"]
    assert rep.csv_row() == "0.5,50.0,0.5,10,0,0.1,10.0"
    assert References(0.0, 2.0).normalize(1.0) == 50.0


def test_pointmass_success_predicate():
    env = make_env("pointmass")
    tr = rollout(env, PointMassExpert(env), 150, 0)
    rep = evaluate_policy(env, PointMassExpert(env), 5, 0, horizon=150)
    assert env.success(tr) and rep.success_rate == 1.0


def test_evaluate_rejects_zero_episodes(grid):
    with pytest.raises(ValueError):
        evaluate_policy(grid, UniformActor(n_actions=4), 0, 0)


@pytest.mark.slow
def test_dilo_beats_bco_on_partial_coverage():
    env, demos, offline = partial_coverage_instance(0)
    cfg = DiloConfig(steps=5000, seed=0, log_every=10_000)
    v, _ = train_value(TableValue(25, (5, 1)), demos, offline, cfg)
    dilo = evaluate_policy(env, extract_policy(v, offline, cfg, n_actions=4), 100, 1)
    bco = evaluate_policy(env, train_bco(demos, offline, env), 100, 1)
    assert dilo.success_rate > bco.success_rate
