"""The action-free dual occupancy-matching objective and its training loop.

With residual ``y = gamma * V(s', s'') - V(s, s')`` the loss is

    (1 - lam) * beta * (1 - gamma) * E_d0[V(s, s')]
      + lam * E_mix[f*_p(y)]
      - lam * (1 - beta) * E_offline[y]

where ``mix`` draws triples from the expert data with probability ``beta``
and from the offline data otherwise. ``lam = 0.5`` is the unweighted
objective scaled by one half.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import optimize

from . import data as D
from .approx import NumericError, flatten, loss_gradient, make_optimizer
from .divergence import CHI2, FGenerator, conjugate_p_with_derivative, ratio_from_residual

FORWARD = ("d0", "mix_cur", "off_cur")
BACKWARD = ("mix_next", "off_next")
GRAD_MODES = ("orthogonal", "full", "semi")


class DivergenceError(RuntimeError):
    """Training produced values beyond the divergence threshold."""


@dataclass
class DiloConfig:
    gamma: float = 0.99
    beta: float = 0.5
    eta: float = 0.5
    lam: float = 0.5
    tau: float = 3.0
    value_lr: float = 3e-4
    policy_lr: float = 3e-4
    clip_max: float = 100.0
    batch_size: int = 1024
    steps: int = 20_000
    grad_mode: str = "orthogonal"
    optimizer: str = "adam"
    approximator: str = "table"
    hidden: tuple = (64, 64)
    divergence: str = "chi2"
    d0_include_expert: bool = True
    full_batch: bool = False
    policy_steps: int = 5_000
    log_every: int = 1
    divergence_threshold: float = 1e6
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        checks = [
            (0.0 < self.gamma < 1.0, "gamma must lie in (0, 1)"),
            (0.0 < self.beta <= 1.0, "beta must lie in (0, 1]"),
            (self.eta >= 0.0, "eta must be nonnegative"),
            (0.0 < self.lam < 1.0, "lambda must lie in (0, 1)"),
            (self.tau > 0.0, "tau must be positive"),
            (self.value_lr > 0.0 and self.policy_lr > 0.0, "learning rates must be positive"),
            (self.clip_max > 0.0, "clip_max must be positive"),
            (self.batch_size >= 1 and self.steps >= 0, "batch_size >= 1 and steps >= 0 required"),
            (self.grad_mode in GRAD_MODES, f"grad_mode must be one of {GRAD_MODES}"),
            (self.optimizer in ("adam", "sgd"), "optimizer must be adam or sgd"),
            (self.approximator in ("table", "mlp"), "approximator must be table or mlp"),
            (self.log_every >= 1, "log_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        FGenerator.from_name(self.divergence)

    @property
    def generator(self) -> FGenerator:
        return FGenerator.from_name(self.divergence)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dilo keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DiloLossBreakdown:
    total: float
    term_initial: float
    term_conjugate: float
    term_linear: float
    mean_residual_expert: float
    mean_residual_offline: float
    mean_w_expert: float = float("nan")
    mean_w_offline: float = float("nan")
    grad_norm_forward: float = float("nan")
    grad_norm_backward: float = float("nan")
    grad_norm: float = float("nan")
    extra: dict = field(default_factory=dict, repr=False)


def _weights(batch):
    n = len(batch)
    return np.full(n, 1.0 / n) if batch.weights is None else np.asarray(batch.weights, float)


def _groups(d0_batch, mix_batch, offline_batch):
    g = {"d0": (d0_batch.s, d0_batch.s_next),
         "mix_cur": (mix_batch.s, mix_batch.s_next),
         "mix_next": (mix_batch.s_next, mix_batch.s_next2)}
    if offline_batch is not None:
        g["off_cur"] = (offline_batch.s, offline_batch.s_next)
        g["off_next"] = (offline_batch.s_next, offline_batch.s_next2)
    return g


def _masked_mean(x, mask):
    return float(x[mask].mean()) if mask.any() else float("nan")


def _make_loss_fn(d0_batch, mix_batch, offline_batch, cfg: DiloConfig):
    g, b, lam = cfg.gamma, cfg.beta, cfg.lam
    gen = cfg.generator
    w0, wm = _weights(d0_batch), _weights(mix_batch)
    wo = _weights(offline_batch) if offline_batch is not None else None
    expert_rows = mix_batch.source == D.EXPERT

    def loss_fn(v):
        term_initial = b * (1 - g) * float(w0 @ v["d0"])
        y_mix = g * v["mix_next"] - v["mix_cur"]
        fstar, ratio = conjugate_p_with_derivative(gen, y_mix)
        term_conj = float(wm @ fstar)
        dv = {"d0": (1 - lam) * b * (1 - g) * w0,
              "mix_cur": -lam * wm * ratio,
              "mix_next": lam * g * wm * ratio}
        y_off = None
        term_lin = 0.0
        if wo is not None:
            y_off = g * v["off_next"] - v["off_cur"]
            term_lin = -(1 - b) * float(wo @ y_off)
            dv["off_cur"] = lam * (1 - b) * wo
            dv["off_next"] = -lam * (1 - b) * g * wo
        total = (1 - lam) * term_initial + lam * (term_conj + term_lin)
        aux = DiloLossBreakdown(
            total=total, term_initial=term_initial, term_conjugate=term_conj, term_linear=term_lin,
            mean_residual_expert=_masked_mean(y_mix, expert_rows),
            mean_residual_offline=(float(np.mean(y_off)) if y_off is not None else float("nan")),
            mean_w_expert=_masked_mean(ratio, expert_rows),
            mean_w_offline=_masked_mean(ratio, ~expert_rows),
        )
        return total, dv, aux

    return loss_fn


def dilo_loss(v, d0_batch, mix_batch, offline_batch, cfg: DiloConfig) -> DiloLossBreakdown:
    """Evaluate the objective on one set of batches (no gradient).

    ``offline_batch`` may be None only when ``beta == 1``.
    """
    _check_batches(d0_batch, mix_batch, offline_batch, cfg)
    groups = _groups(d0_batch, mix_batch, offline_batch)
    values = {}
    for name, (s, s1) in groups.items():
        values[name] = v(s, s1)
        if not np.all(np.isfinite(values[name])):
            raise NumericError(f"non-finite V in term {name!r}")
    total, _, aux = _make_loss_fn(d0_batch, mix_batch, offline_batch, cfg)(values)
    if not np.isfinite(total):
        raise NumericError("non-finite loss")
    return aux


def dilo_loss_and_grads(v, d0_batch, mix_batch, offline_batch, cfg: DiloConfig):
    """Loss breakdown plus the forward (V(s, s')) and backward (V(s', s'')) gradients."""
    _check_batches(d0_batch, mix_batch, offline_batch, cfg)
    groups = _groups(d0_batch, mix_batch, offline_batch)
    part = {"forward": [n for n in FORWARD if n in groups], "backward": [n for n in BACKWARD if n in groups]}
    _, grads, aux = loss_gradient(v, _make_loss_fn(d0_batch, mix_batch, offline_batch, cfg), groups, part)
    return aux, grads["forward"], grads["backward"]


def _check_batches(d0_batch, mix_batch, offline_batch, cfg):
    if len(d0_batch) == 0 or len(mix_batch) == 0:
        raise ValueError("batches must be nonempty")
    if offline_batch is None and cfg.beta < 1.0:
        raise ValueError("an offline batch is required when beta < 1")
    if offline_batch is not None and len(offline_batch) == 0:
        raise ValueError("batches must be nonempty")


def orthogonal_gradient(g_forward, g_backward, eta):
    """g_f + eta * (component of g_b orthogonal to g_f)."""
    gf = np.asarray(g_forward, float)
    gb = np.asarray(g_backward, float)
    nf = float(gf @ gf)
    if np.sqrt(nf) <= 1e-12:
        return gf + eta * gb
    return gf + eta * (gb - (float(gb @ gf) / nf) * gf)


def combine_gradients(g_forward, g_backward, mode, eta):
    if mode == "full":
        return g_forward + g_backward
    if mode == "semi":
        return np.array(g_forward, copy=True)
    if mode == "orthogonal":
        return orthogonal_gradient(g_forward, g_backward, eta)
    raise ValueError(f"unknown grad_mode {mode!r}")


METRIC_FIELDS = ("step", "total", "term_initial", "term_conjugate", "term_linear",
                 "mean_residual_expert", "mean_residual_offline", "mean_w_expert", "mean_w_offline",
                 "grad_norm_forward", "grad_norm_backward", "grad_norm")


def _batches(expert, offline, cfg, rng):
    if cfg.full_batch:
        off = D.all_offline_triples(offline) if cfg.beta < 1 else None
        return D.all_d0_pairs(expert, offline, cfg.d0_include_expert), D.all_mixture_triples(expert, offline, cfg.beta), off
    d0 = D.sample_d0_pairs(expert, offline, cfg.batch_size, rng, cfg.d0_include_expert)
    mix = D.sample_mixture_triples(expert, offline, cfg.beta, cfg.batch_size, rng)
    off = D.sample_offline_triples(offline, cfg.batch_size, rng) if cfg.beta < 1 else None
    return d0, mix, off


def train_value(v, expert, offline, cfg: DiloConfig, rng=None, on_log=None):
    """Minimize the objective over ``v`` in place; returns ``(v, history)``.

    ``history`` holds one dict per logged step with the keys in
    ``METRIC_FIELDS``; the loss is measured on the batch used for that step,
    before its update. Only observations are read from the datasets.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, v.params, cfg.value_lr)
    history = []
    fixed = _batches(expert, offline, cfg, rng) if cfg.full_batch else None
    for step in range(cfg.steps):
        d0, mix, off = fixed if fixed is not None else _batches(expert, offline, cfg, rng)
        br, gf, gb = dilo_loss_and_grads(v, d0, mix, off, cfg)
        g = combine_gradients(gf, gb, cfg.grad_mode, cfg.eta)
        opt.step(g)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {k: getattr(br, k) for k in METRIC_FIELDS if hasattr(br, k)}
            row.update(step=step, grad_norm_forward=float(np.linalg.norm(gf)),
                       grad_norm_backward=float(np.linalg.norm(gb)), grad_norm=float(np.linalg.norm(g)))
            history.append(row)
            if on_log is not None:
                on_log(row)
        peak = float(np.max(np.abs(flatten(v.params)))) if v.kind == "table" else None
        if peak is None:
            peak = float(np.max(np.abs(v(mix.s, mix.s_next))))
        if not np.isfinite(peak) or peak > cfg.divergence_threshold:
            raise DivergenceError(f"|V| reached {peak:.3g} at step {step} (threshold {cfg.divergence_threshold:g})")
    return v, history


def full_gradient_norm(v, expert, offline, cfg: DiloConfig):
    """Norm of the true (full-mode) gradient of the full-batch empirical objective."""
    full = DiloConfig(**{**asdict(cfg), "full_batch": True})
    _, gf, gb = dilo_loss_and_grads(v, *_batches(expert, offline, full, None), full)
    return float(np.linalg.norm(gf + gb))


# -- diagnostics -------------------------------------------------------------------


def residuals(v, triples, gamma):
    return gamma * v(triples.s_next, triples.s_next2) - v(triples.s, triples.s_next)


def recover_ratio(v, triples, cfg: DiloConfig):
    """Per-row visitation ratio max(0, f'^{-1}(y)) implied by the learned V."""
    return ratio_from_residual(cfg.generator, residuals(v, triples, cfg.gamma))


def implied_reward(v, s, s_next, s_next2, gamma):
    """V(s, s') - gamma * V(s', s''), the negated residual."""
    s, s_next, s_next2 = (np.atleast_2d(np.asarray(x, float)) for x in (s, s_next, s_next2))
    out = v(s, s_next) - gamma * v(s_next, s_next2)
    return float(out[0]) if out.size == 1 else out


# -- exact tabular dual ------------------------------------------------------------


@dataclass
class TabularDualProblem:
    """Problem data shared by the exact dual and the primal oracle.

    ``q`` is the denominator mixture beta * d_E + (1 - beta) * rho, smoothed
    by ``smoothing`` over one-step-feasible entries when its support misses
    any of them.
    """

    transition: np.ndarray  # (S, A, S)
    gamma: float
    d0_joint: np.ndarray  # (S, S)
    d_expert: np.ndarray  # (S, S, A)
    rho: np.ndarray  # (S, S, A)
    beta: float
    gen: FGenerator = CHI2
    smoothing: float = 0.0
    q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        S, A = self.transition.shape[:2]
        self.d0_joint = np.asarray(self.d0_joint, float)
        self.d_expert = np.asarray(self.d_expert, float)
        self.rho = np.asarray(self.rho, float)
        if self.d_expert.shape != (S, S, A) or self.rho.shape != (S, S, A) or self.d0_joint.shape != (S, S):
            raise ValueError("problem arrays do not match the transition tensor")
        q = self.beta * self.d_expert + (1 - self.beta) * self.rho
        feasible = np.broadcast_to((self.transition.sum(axis=1) > 0)[:, :, None], q.shape)
        if self.smoothing == 0.0 and np.any(q[feasible] <= 0):
            self.smoothing = 1e-8
        if self.smoothing > 0:
            q = (q + self.smoothing * feasible) / (1.0 + self.smoothing * feasible.sum())
        self.q = q

    @classmethod
    def from_mdp(cls, mdp, d0_joint, d_expert, rho, beta, gen=CHI2, smoothing=0.0):
        t = lambda x: x.tensor if hasattr(x, "tensor") else x  # noqa: E731
        m = d0_joint.matrix if hasattr(d0_joint, "matrix") else d0_joint
        return cls(mdp.transition, mdp.gamma, m, t(d_expert), t(rho), beta, gen, smoothing)

    @property
    def n_states(self):
        return self.transition.shape[0]

    def residual(self, V):
        cont = np.einsum("tau,tu->ta", self.transition, V)
        return self.gamma * cont[None, :, :] - V[:, :, None]


def exact_dual_objective(V, problem: TabularDualProblem, lam=None):
    """Objective and gradient with the exact successor expectation.

    ``lam=None`` gives the unweighted objective whose minimum equals the
    primal maximum; a number applies the (1 - lam, lam) weighting.
    """
    p = problem
    V = np.asarray(V, float).reshape(p.n_states, p.n_states)
    y = p.residual(V)
    fstar, w = conjugate_p_with_derivative(p.gen, y)
    init = p.beta * (1 - p.gamma) * float(np.sum(p.d0_joint * V))
    rest = float(np.sum(p.q * fstar)) - (1 - p.beta) * float(np.sum(p.rho * y))
    a, c = (1.0, 1.0) if lam is None else (1 - lam, lam)
    G = c * (p.q * w - (1 - p.beta) * p.rho)  # d objective / d y
    grad = a * p.beta * (1 - p.gamma) * p.d0_joint - G.sum(axis=2)
    H = p.gamma * G.sum(axis=0)  # (s', a')
    grad += np.einsum("ta,tau->tu", H, p.transition)
    return a * init + c * rest, grad


@dataclass
class DualSolution:
    V: np.ndarray
    objective_value: float
    grad_norm: float
    iterations: int
    smoothing: float


def solve_dual_exact(problem: TabularDualProblem, tol=1e-10, max_iter=100_000, V0=None):
    """Minimize the exact tabular objective with L-BFGS."""
    S = problem.n_states
    x0 = np.zeros(S * S) if V0 is None else np.asarray(V0, float).ravel()

    def fun(x):
        f, g = exact_dual_objective(x, problem)
        return f, g.ravel()

    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "maxfun": 10 * max_iter, "gtol": tol, "ftol": 1e-16,
                                     "maxcor": 50})
    f, g = exact_dual_objective(res.x, problem)
    return DualSolution(res.x.reshape(S, S), float(f), float(np.max(np.abs(g))), int(res.nit), problem.smoothing)


def primal_from_dual(V, problem: TabularDualProblem):
    """Visitation implied by V: (w * q - (1 - beta) * rho) / beta, w the KKT ratio."""
    w = ratio_from_residual(problem.gen, problem.residual(np.asarray(V, float)))
    return (w * problem.q - (1 - problem.beta) * problem.rho) / problem.beta
