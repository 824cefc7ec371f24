import numpy as np
import pytest

from dilo import data as D
from dilo.approx import MLPValue, TableValue, flatten, unflatten_into
from dilo.divergence import CHI2
from dilo.dual import (DiloConfig, DivergenceError, TabularDualProblem, _batches, combine_gradients, dilo_loss,
                       dilo_loss_and_grads, exact_dual_objective, full_gradient_norm, implied_reward,
                       orthogonal_gradient, primal_from_dual, recover_ratio, residuals, solve_dual_exact,
                       train_value)
from dilo.mdp import verify_flow_constraints
from dilo.primal import instance_problem, random_instance, realizable_instance


def test_config_validation_and_roundtrip():
    cfg = DiloConfig(steps=3)
    d = cfg.to_dict()
    assert d["lambda"] == 0.5 and "lam" not in d
    assert DiloConfig.from_dict(d) == cfg
    with pytest.raises(ValueError, match="unknown"):
        DiloConfig.from_dict({"stepz": 1})
    for bad in ({"gamma": 1.0}, {"beta": 0.0}, {"grad_mode": "x"}, {"divergence": "kl"}, {"tau": 0}):
        with pytest.raises(ValueError):
            DiloConfig(**bad)


def test_defaults_match_reference_hyperparameters():
    cfg = DiloConfig()
    assert (cfg.beta, cfg.eta, cfg.tau, cfg.value_lr, cfg.clip_max) == (0.5, 0.5, 3.0, 3e-4, 100.0)


def test_loss_terms_at_zero_value(grid_data):
    offline, expert = grid_data
    cfg = DiloConfig(full_batch=True)
    br = dilo_loss(TableValue(25, (5, 1)), *_batches(expert, offline, cfg, None), cfg)
    # V = 0: residuals vanish, f*(0) = 0
    assert br.total == 0.0 and br.term_conjugate == 0.0 and br.mean_w_expert == 1.0


def test_loss_matches_hand_computation(rng):
    v = TableValue(3)
    v.table[...] = rng.normal(size=(3, 3))
    cfg = DiloConfig(gamma=0.9)
    col = lambda *x: np.array(x, float)[:, None]  # noqa: E731
    d0 = D.PairBatch(col(0, 1), col(1, 2))
    mix = D.TripleBatch(col(0, 2), col(1, 1), col(2, 0), np.array([1, 0], np.int8))
    off = D.TripleBatch(col(1), col(2), col(2), np.array([0], np.int8))
    V = v.table
    y = np.array([0.9 * V[1, 2] - V[0, 1], 0.9 * V[1, 0] - V[2, 1]])
    w = np.maximum(0, y / 2 + 1)
    fstar = w * y - (w - 1) ** 2
    y_off = 0.9 * V[2, 2] - V[1, 2]
    expect = 0.5 * 0.5 * 0.1 * np.mean([V[0, 1], V[1, 2]]) + 0.5 * (fstar.mean() - 0.5 * y_off)
    assert dilo_loss(v, d0, mix, off, cfg).total == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_full_gradient_matches_finite_differences(grid_data, seed):
    offline, expert = grid_data
    rng = np.random.default_rng(seed)
    v = MLPValue.for_dataset(offline, (8, 8), rng)
    v.net.params[-2][...] = rng.normal(scale=0.5, size=v.net.params[-2].shape)
    cfg = DiloConfig(batch_size=16, seed=seed)
    batches = _batches(expert, offline, cfg, rng)
    _, gf, gb = dilo_loss_and_grads(v, *batches, cfg)
    flat = flatten(v.params)
    fd = np.zeros_like(flat)
    h = 1e-6
    for k in range(flat.size):
        for sign in (1, -1):
            x = flat.copy()
            x[k] += sign * h
            unflatten_into(v.params, x)
            fd[k] += sign * dilo_loss(v, *batches, cfg).total / (2 * h)
    unflatten_into(v.params, flat)
    g = gf + gb
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-4


def test_orthogonal_component(rng):
    gf, gb = rng.normal(size=20), rng.normal(size=20)
    g = orthogonal_gradient(gf, gb, 0.7)
    assert abs((g - gf) @ gf) <= 1e-9 * (gf @ gf)
    assert np.array_equal(combine_gradients(gf, gb, "orthogonal", 0.0), gf)
    assert np.array_equal(combine_gradients(gf, gb, "semi", 0.7), gf)
    assert np.array_equal(combine_gradients(gf, gb, "full", 0.7), gf + gb)
    assert np.array_equal(orthogonal_gradient(np.zeros(3), np.ones(3), 0.5), 0.5 * np.ones(3))


def test_training_is_action_free(grid_data):
    offline, expert = grid_data
    cfg = DiloConfig(steps=50, batch_size=32, seed=3)
    _, h1 = train_value(TableValue(25, (5, 1)), expert, offline, cfg)
    _, h2 = train_value(TableValue(25, (5, 1)), expert, D.strip_actions(offline), cfg)
    assert h1 == h2


def test_full_batch_semi_loss_monotone(grid_data):
    offline, expert = grid_data
    cfg = DiloConfig(steps=200, full_batch=True, grad_mode="orthogonal", value_lr=1e-3, optimizer="sgd")
    _, hist = train_value(TableValue(25, (5, 1)), expert, offline, cfg)
    loss = np.array([h["total"] for h in hist])
    assert np.all(np.diff(loss) <= 1e-10)


def test_training_reduces_gradient(grid_data):
    offline, expert = grid_data
    cfg = DiloConfig(steps=300, full_batch=True, grad_mode="full", value_lr=1e-2)
    v = TableValue(25, (5, 1))
    g0 = full_gradient_norm(v, expert, offline, cfg)
    train_value(v, expert, offline, cfg)
    assert full_gradient_norm(v, expert, offline, cfg) < g0


def test_divergence_abort(grid_data):
    offline, expert = grid_data
    cfg = DiloConfig(steps=50, approximator="mlp", value_lr=1.0, batch_size=64)
    v = MLPValue.for_dataset(offline, (64, 64), np.random.default_rng(0))
    with pytest.raises(DivergenceError):
        train_value(v, expert, offline, cfg)


def test_on_log_and_history_cadence(grid_data):
    offline, expert = grid_data
    seen = []
    cfg = DiloConfig(steps=25, batch_size=8, log_every=10)
    _, hist = train_value(TableValue(25, (5, 1)), expert, offline, cfg, on_log=seen.append)
    assert [h["step"] for h in hist] == [0, 10, 20, 24] and seen == hist


def test_diagnostics_relations(grid_data, rng):
    offline, expert = grid_data
    v = TableValue(25, (5, 1))
    v.table[...] = rng.normal(size=(25, 25))
    t = D.all_offline_triples(offline)
    cfg = DiloConfig()
    y = residuals(v, t, cfg.gamma)
    assert np.allclose(implied_reward(v, t.s, t.s_next, t.s_next2, cfg.gamma), -y)
    assert np.allclose(recover_ratio(v, t, cfg), np.maximum(0, y / 2 + 1))


# -- exact tabular dual -------------------------------------------------------------


def test_exact_gradient_finite_differences(rng):
    prob = instance_problem(random_instance(0))
    V = rng.normal(size=(3, 3))
    for lam in (None, 0.3):
        _, g = exact_dual_objective(V, prob, lam)
        fd = np.zeros(9)
        for k in range(9):
            e = np.zeros(9)
            e[k] = 1e-6
            fd[k] = (exact_dual_objective(V.ravel() + e, prob, lam)[0]
                     - exact_dual_objective(V.ravel() - e, prob, lam)[0]) / 2e-6
        assert np.allclose(g.ravel(), fd, atol=1e-7)


@pytest.mark.parametrize("seed", range(3))
def test_kkt_ratio_recovery(seed):
    inst = realizable_instance(seed)
    prob = instance_problem(inst)
    sol = solve_dual_exact(prob, tol=1e-10)
    w = np.maximum(0, prob.residual(sol.V) / 2 + 1)
    support = prob.q > 0
    assert np.max(np.abs(w[support] - 1)) <= 1e-2
    d = primal_from_dual(sol.V, prob)
    assert verify_flow_constraints(d, inst.d0_joint, inst.mdp) <= 1e-2


@pytest.mark.parametrize("seed", range(3))
def test_implied_reward_identity(seed):
    prob = instance_problem(random_instance(seed))
    sol = solve_dual_exact(prob, tol=1e-10)
    y = prob.residual(sol.V)
    w = np.maximum(0, y / 2 + 1)
    on = (prob.q > 0) & (w > 0)
    assert np.max(np.abs(-y[on] + CHI2.f_prime(w[on]))) <= 1e-3


def test_problem_shape_validation():
    with pytest.raises(ValueError):
        TabularDualProblem(np.ones((2, 1, 2)) / 2, 0.9, np.ones((2, 2)) / 4, np.zeros((3, 3, 1)),
                           np.zeros((2, 2, 1)), 0.5)
