"""Parametric value functions V(s, s'), policies, and the optimizer.

Every parametric object exposes ``params`` (a list of float64 arrays updated
in place by the optimizer), ``forward`` returning outputs plus a cache, and
``backward(cache, dout)`` returning one gradient array per parameter.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import kernels

CKPT_VERSION = 1
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


class NumericError(ArithmeticError):
    pass


def flatten(arrays):
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten_into(arrays, flat):
    k = 0
    for a in arrays:
        a[...] = flat[k:k + a.size].reshape(a.shape)
        k += a.size
    if k != flat.size:
        raise ValueError("flat parameter vector has the wrong length")


class MLP:
    """Fully connected network, rectifier hidden layers, linear output."""

    def __init__(self, sizes, rng=None, zero_last=True):
        self.sizes = tuple(int(n) for n in sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = []
        for k, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = k == len(self.sizes) - 2
            bound = 1.0 / np.sqrt(n_in)
            W = np.zeros((n_in, n_out)) if last and zero_last else rng.uniform(-bound, bound, (n_in, n_out))
            self.params += [W, np.zeros(n_out)]

    @property
    def n_layers(self):
        return len(self.params) // 2

    def forward(self, x):
        acts = [x]
        h = x
        for k in range(self.n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            z = h @ W + b
            h = z if k == self.n_layers - 1 else np.maximum(z, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout):
        grads = [None] * len(self.params)
        g = dout
        for k in reversed(range(self.n_layers)):
            W = self.params[2 * k]
            if k < self.n_layers - 1:
                g = g * (acts[k + 1] > 0)
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ W.T
        return grads, g

    def __call__(self, x):
        return self.forward(x)[0]


# -- value functions -----------------------------------------------------------


class TableValue:
    """Exact table over (s_index, s'_index); ``index = round(obs @ strides)``."""

    kind = "table"

    def __init__(self, n_states, strides=(1,)):
        self.n_states = int(n_states)
        self.strides = np.asarray(strides, dtype=float)
        self.params = [np.zeros((self.n_states, self.n_states))]

    @property
    def table(self):
        return self.params[0]

    def index(self, obs):
        obs = np.asarray(obs, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.shape[1] != self.strides.size:
            raise ValueError(f"observation dim {obs.shape[1]} does not match table strides {self.strides.size}")
        return np.rint(obs @ self.strides).astype(np.int64)

    def forward(self, s, s_next):
        i, j = self.index(s), self.index(s_next)
        return kernels.gather_pairs(self.table, i, j), (i, j)

    def backward(self, cache, dout):
        i, j = cache
        g = np.zeros_like(self.table)
        kernels.scatter_add_pairs(g, i, j, np.asarray(dout, float).ravel())
        return [g]

    def __call__(self, s, s_next):
        return self.forward(s, s_next)[0]


class MLPValue:
    """V(s, s') = net(normalize(concat(s, s')))."""

    kind = "mlp"

    def __init__(self, obs_dim, hidden=(64, 64), rng=None, mean=None, std=None):
        self.obs_dim = int(obs_dim)
        self.net = MLP((2 * self.obs_dim, *hidden, 1), rng)
        self.mean = np.zeros(2 * self.obs_dim) if mean is None else np.asarray(mean, float)
        self.std = np.ones(2 * self.obs_dim) if std is None else np.asarray(std, float)

    @classmethod
    def for_dataset(cls, ds, hidden=(64, 64), rng=None):
        obs = ds.observations
        mean, std = obs.mean(axis=0), obs.std(axis=0) + 1e-6
        return cls(ds.obs_dim, hidden, rng, np.tile(mean, 2), np.tile(std, 2))

    @property
    def params(self):
        return self.net.params

    def _inputs(self, s, s_next):
        s, s_next = np.atleast_2d(s), np.atleast_2d(s_next)
        if s.shape[1] != self.obs_dim or s_next.shape[1] != self.obs_dim:
            raise ValueError(f"expected observations of dimension {self.obs_dim}")
        return (np.concatenate([s, s_next], axis=1) - self.mean) / self.std

    def forward(self, s, s_next):
        out, acts = self.net.forward(self._inputs(s, s_next))
        return out[:, 0], acts

    def backward(self, cache, dout):
        return self.net.backward(cache, np.asarray(dout, float).reshape(-1, 1))[0]

    def __call__(self, s, s_next):
        return self.forward(s, s_next)[0]


def evaluate(v, s, s_next) -> float:
    """Scalar V(s, s') for a single pair of observations."""
    out = v(np.atleast_2d(np.asarray(s, float)), np.atleast_2d(np.asarray(s_next, float)))
    val = float(out[0])
    if not np.isfinite(val):
        raise NumericError("value is not finite")
    return val


def loss_gradient(v, loss_fn, groups, partition=None):
    """Reverse-mode gradient of a loss built from V evaluations.

    ``groups`` maps a name to an ``(s, s')`` batch. All groups go through one
    forward pass; ``loss_fn(values)`` receives ``{name: V(s, s')}`` and returns
    ``(loss, dvalues, aux)`` with ``dvalues`` holding dLoss/dV per group. With
    ``partition`` (a mapping part -> group names) the gradient is returned per
    part, else as a single ``"all"`` part. Gradients are flat vectors.
    """
    names = list(groups)
    sizes = [len(groups[n][0]) for n in names]
    s = np.concatenate([np.atleast_2d(groups[n][0]) for n in names])
    s1 = np.concatenate([np.atleast_2d(groups[n][1]) for n in names])
    out, cache = v.forward(s, s1)
    bounds = np.cumsum([0, *sizes])
    values = {n: out[bounds[k]:bounds[k + 1]] for k, n in enumerate(names)}
    for n in names:
        if not np.all(np.isfinite(values[n])):
            raise NumericError(f"non-finite V in term {n!r}")
    loss, dvalues, aux = loss_fn(values)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    partition = partition or {"all": names}
    grads = {}
    for part, members in partition.items():
        dout = np.zeros(out.shape[0])
        for k, n in enumerate(names):
            if n in members:
                dout[bounds[k]:bounds[k + 1]] = dvalues[n]
        grads[part] = flatten(v.backward(cache, dout))
    return loss, grads, aux


# -- policies ------------------------------------------------------------------


class SoftmaxTablePolicy:
    kind = "softmax_table"

    def __init__(self, n_states, n_actions, strides=(1,)):
        self.n_states, self.n_actions = int(n_states), int(n_actions)
        self.strides = np.asarray(strides, dtype=float)
        self.params = [np.zeros((self.n_states, self.n_actions))]

    @classmethod
    def from_probs(cls, probs, strides=(1,)):
        probs = np.asarray(probs, float)
        pol = cls(*probs.shape, strides)
        with np.errstate(divide="ignore"):
            pol.params[0][...] = np.maximum(np.log(probs), -1e3)
        return pol

    @property
    def logits(self):
        return self.params[0]

    @property
    def probs(self):
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def index(self, obs):
        obs = np.atleast_2d(np.asarray(obs, float))
        return np.rint(obs @ self.strides).astype(np.int64)

    def log_prob(self, obs, actions):
        i = self.index(obs)
        a = np.asarray(actions).reshape(-1).astype(np.int64)
        z = self.logits[i]
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        return z[np.arange(len(a)), a] - lse

    def act(self, obs, rng, greedy=False):
        p = self.probs[self.index(obs)[0]]
        a = int(np.argmax(p)) if greedy else int(rng.choice(self.n_actions, p=p))
        return np.array([float(a)])

    def __call__(self, obs, rng):
        return self.act(obs, rng)


class GaussianPolicy:
    """Diagonal Gaussian with a network mean and a state-independent log-std."""

    kind = "gaussian"

    def __init__(self, obs_dim, act_dim, hidden=(64, 64), rng=None, mean=None, std=None,
                 action_scale=1.0, deterministic=True):
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.net = MLP((self.obs_dim, *hidden, self.act_dim), rng)
        self.log_std = np.zeros(self.act_dim)
        self.mean = np.zeros(self.obs_dim) if mean is None else np.asarray(mean, float)
        self.std = np.ones(self.obs_dim) if std is None else np.asarray(std, float)
        self.action_scale = float(action_scale)
        self.deterministic = deterministic

    @property
    def params(self):
        return [*self.net.params, self.log_std]

    def _x(self, obs):
        return (np.atleast_2d(np.asarray(obs, float)) - self.mean) / self.std

    def clamped_log_std(self):
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def log_prob(self, obs, actions):
        mu = self.net(self._x(obs))
        ls = self.clamped_log_std()
        z = (np.atleast_2d(actions) - mu) / np.exp(ls)
        return np.sum(-0.5 * z ** 2 - ls - 0.5 * np.log(2 * np.pi), axis=1)

    def weighted_nll_grad(self, obs, actions, weights):
        """Loss -sum_i weights_i log pi(a_i|s_i) and its gradient."""
        mu, acts = self.net.forward(self._x(obs))
        ls = self.clamped_log_std()
        inv_var = np.exp(-2 * ls)
        diff = np.atleast_2d(actions) - mu
        w = np.asarray(weights, float)[:, None]
        logp = -0.5 * diff ** 2 * inv_var - ls - 0.5 * np.log(2 * np.pi)
        loss = -float(np.sum(w * logp))
        dmu = -w * diff * inv_var
        grads, _ = self.net.backward(acts, dmu)
        inside = (self.log_std > LOG_STD_MIN) & (self.log_std < LOG_STD_MAX)
        dls = np.sum(w * (1.0 - diff ** 2 * inv_var), axis=0) * inside
        return loss, [*grads, dls]

    def act(self, obs, rng, greedy=None):
        mu = self.net(self._x(obs))[0]
        greedy = self.deterministic if greedy is None else greedy
        a = mu if greedy else mu + np.exp(self.clamped_log_std()) * rng.standard_normal(self.act_dim)
        return np.clip(a, -self.action_scale, self.action_scale)

    def __call__(self, obs, rng):
        return self.act(obs, rng)


# -- optimizers -----------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = float(lr), betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        """Apply one update; ``grads`` is a list matching ``params`` or one flat vector."""
        grads = _as_list(grads, self.params)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-3):
        self.params, self.lr = params, float(lr)

    def step(self, grads):
        for p, g in zip(self.params, _as_list(grads, self.params)):
            p -= self.lr * g


def _as_list(grads, params):
    if isinstance(grads, np.ndarray):
        return _split(grads.ravel(), params)
    return grads


def _split(flat, like):
    out, k = [], 0
    for p in like:
        out.append(flat[k:k + p.size].reshape(p.shape))
        k += p.size
    return out


def make_optimizer(name, params, lr):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


# -- checkpoints ----------------------------------------------------------------


def _model_arrays(prefix, model):
    d = {f"{prefix}/kind": np.array(model.kind)}
    if model.kind == "table":
        d[f"{prefix}/n_states"] = np.array(model.n_states)
        d[f"{prefix}/strides"] = model.strides
    elif model.kind == "mlp":
        d[f"{prefix}/layer_sizes"] = np.array(model.net.sizes)
        d[f"{prefix}/norm_mean"], d[f"{prefix}/norm_std"] = model.mean, model.std
    elif model.kind == "softmax_table":
        d[f"{prefix}/shape"] = np.array([model.n_states, model.n_actions])
        d[f"{prefix}/strides"] = model.strides
    elif model.kind == "gaussian":
        d[f"{prefix}/layer_sizes"] = np.array(model.net.sizes)
        d[f"{prefix}/norm_mean"], d[f"{prefix}/norm_std"] = model.mean, model.std
        d[f"{prefix}/action_scale"] = np.array(model.action_scale)
    else:  # pragma: no cover
        raise ValueError(f"cannot serialize {model.kind!r}")
    d[f"{prefix}/params"] = flatten(model.params)
    return d


def _model_from(prefix, z):
    kind = str(z[f"{prefix}/kind"])
    if kind == "table":
        m = TableValue(int(z[f"{prefix}/n_states"]), z[f"{prefix}/strides"])
    elif kind == "mlp":
        sizes = z[f"{prefix}/layer_sizes"]
        m = MLPValue(int(sizes[0]) // 2, tuple(int(n) for n in sizes[1:-1]),
                     mean=z[f"{prefix}/norm_mean"], std=z[f"{prefix}/norm_std"])
    elif kind == "softmax_table":
        S, A = (int(n) for n in z[f"{prefix}/shape"])
        m = SoftmaxTablePolicy(S, A, z[f"{prefix}/strides"])
    elif kind == "gaussian":
        sizes = z[f"{prefix}/layer_sizes"]
        m = GaussianPolicy(int(sizes[0]), int(sizes[-1]), tuple(int(n) for n in sizes[1:-1]),
                           mean=z[f"{prefix}/norm_mean"], std=z[f"{prefix}/norm_std"],
                           action_scale=float(z[f"{prefix}/action_scale"]))
    else:
        raise ValueError(f"unknown model kind {kind!r} in checkpoint")
    unflatten_into(m.params, z[f"{prefix}/params"])
    return m


def save_checkpoint(path, value, policy=None, meta=None):
    """Write an ``.npz`` checkpoint (no pickled objects); layout in the README."""
    arrays = {"format_version": np.array(CKPT_VERSION), "meta": np.array(json.dumps(meta or {}, sort_keys=True))}
    arrays.update(_model_arrays("value", value))
    if policy is not None:
        arrays.update(_model_arrays("policy", policy))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(Path(path), allow_pickle=False) as z:
        if int(z["format_version"]) != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(z['format_version'])}")
        value = _model_from("value", z)
        policy = _model_from("policy", z) if "policy/kind" in z.files else None
        meta = json.loads(str(z["meta"]))
    return value, policy, meta
