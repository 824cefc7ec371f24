"""Trajectory datasets, their on-disk format, and the batch samplers.

File format (UTF-8, one JSON object per line)::

    {"env": "gridworld", "obs_dim": 2, "act_dim": 1, "has_actions": true, "seed": 0}
    {"traj": 0, "t": 0, "obs": [0.0, 0.0], "act": [1.0], "term": false}
    ...

The first line is the header; every following line is one step. ``act`` is
``null`` throughout when ``has_actions`` is false, and ``term`` may only be
true on the last step of a trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

HEADER_KEYS = ("env", "obs_dim", "act_dim", "has_actions", "seed")
STEP_KEYS = ("traj", "t", "obs", "act", "term")

EXPERT, OFFLINE = 1, 0


class DataError(ValueError):
    pass


class MissingActionsError(DataError):
    """A sampler that needs actions was given an observation-only dataset."""


@dataclass(frozen=True)
class Trajectory:
    observations: np.ndarray  # (n, obs_dim)
    actions: np.ndarray | None  # (n, act_dim) or None
    terminal: bool = False

    def __post_init__(self):
        obs = np.array(self.observations, dtype=float, ndmin=2)
        if obs.shape[0] < 2:
            raise DataError("a trajectory needs at least 2 steps")
        obs.flags.writeable = False
        object.__setattr__(self, "observations", obs)
        if self.actions is not None:
            act = np.array(self.actions, dtype=float)
            if act.ndim == 1:
                act = act[:, None]
            if act.shape[0] != obs.shape[0]:
                raise DataError("actions must be present on every step or on none")
            act.flags.writeable = False
            object.__setattr__(self, "actions", act)
        object.__setattr__(self, "terminal", bool(self.terminal))

    def __len__(self):
        return self.observations.shape[0]


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    trajectories: tuple
    env: str
    obs_dim: int
    act_dim: int
    has_actions: bool
    seed: int | None = None
    generator: str = ""

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        for k, tr in enumerate(self.trajectories):
            if tr.observations.shape[1] != self.obs_dim:
                raise DataError(f"trajectory {k}: observation dim {tr.observations.shape[1]} != {self.obs_dim}")
            if (tr.actions is not None) != self.has_actions:
                raise DataError(f"trajectory {k}: action presence disagrees with has_actions={self.has_actions}")
            if self.has_actions and tr.actions.shape[1] != self.act_dim:
                raise DataError(f"trajectory {k}: action dim {tr.actions.shape[1]} != {self.act_dim}")

    def __len__(self):
        return len(self.trajectories)

    def __eq__(self, other):
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        return self.to_jsonl() == other.to_jsonl()

    @property
    def metadata(self):
        return {"env": self.env, "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "has_actions": self.has_actions, "seed": self.seed, "generator": self.generator}

    # -- flattened views used by the samplers --------------------------------

    @cached_property
    def observations(self) -> np.ndarray:
        out = np.concatenate([tr.observations for tr in self.trajectories])
        out.flags.writeable = False
        return out

    @cached_property
    def actions(self) -> np.ndarray:
        if not self.has_actions:
            raise MissingActionsError("dataset has no actions")
        out = np.concatenate([tr.actions for tr in self.trajectories])
        out.flags.writeable = False
        return out

    def _offsets(self):
        lengths = [len(tr) for tr in self.trajectories]
        return np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64), lengths

    @cached_property
    def triple_index(self) -> np.ndarray:
        """Rows (i, j, k) of flat observation indices for steps (t, t+1, t+2).

        An absorbing last step adds the self-loop triple (T-1, T, T); a
        horizon cut adds nothing past the last step.
        """
        rows = []
        for off, n, tr in zip(*self._offsets(), self.trajectories):
            t = np.arange(n - 2, dtype=np.int64)
            rows.append(np.stack([off + t, off + t + 1, off + t + 2], axis=1))
            if tr.terminal:
                rows.append(np.array([[off + n - 2, off + n - 1, off + n - 1]], dtype=np.int64))
        return np.concatenate(rows) if rows else np.zeros((0, 3), np.int64)

    @cached_property
    def pair_index(self) -> np.ndarray:
        rows = []
        for off, n in zip(*self._offsets()):
            t = np.arange(n - 1, dtype=np.int64)
            rows.append(np.stack([off + t, off + t + 1], axis=1))
        return np.concatenate(rows) if rows else np.zeros((0, 2), np.int64)

    # -- serialization --------------------------------------------------------

    def to_jsonl(self) -> str:
        lines = [json.dumps({k: getattr(self, k) for k in HEADER_KEYS})]
        for i, tr in enumerate(self.trajectories):
            n = len(tr)
            for t in range(n):
                act = tr.actions[t].tolist() if tr.actions is not None else None
                lines.append(json.dumps({"traj": i, "t": t, "obs": tr.observations[t].tolist(),
                                         "act": act, "term": bool(tr.terminal and t == n - 1)}))
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str, source="<string>") -> "TrajectoryDataset":
        lines = text.splitlines()
        if not lines:
            raise DataError(f"{source}: empty dataset file")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise DataError(f"{source}:1: malformed header: {exc}") from None
        if not isinstance(header, dict) or set(header) != set(HEADER_KEYS):
            raise DataError(f"{source}:1: header must have exactly the keys {list(HEADER_KEYS)}")
        obs_dim, act_dim, has_actions = int(header["obs_dim"]), int(header["act_dim"]), bool(header["has_actions"])
        trajs, cur, cur_id = [], None, None

        def close():
            if cur is not None:
                acts = np.array(cur["act"]) if has_actions else None
                trajs.append(Trajectory(np.array(cur["obs"]), acts, cur["term"]))

        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            where = f"{source}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: malformed record: {exc}") from None
            if not isinstance(rec, dict) or set(rec) != set(STEP_KEYS):
                raise DataError(f"{where}: step record must have exactly the keys {list(STEP_KEYS)}")
            if len(rec["obs"]) != obs_dim:
                raise DataError(f"{where}: obs has dimension {len(rec['obs'])}, header says {obs_dim}")
            if has_actions:
                if rec["act"] is None or len(rec["act"]) != act_dim:
                    got = None if rec["act"] is None else len(rec["act"])
                    raise DataError(f"{where}: act has dimension {got}, header says {act_dim}")
            elif rec["act"] is not None:
                raise DataError(f"{where}: act present but header says has_actions=false")
            if rec["traj"] != cur_id:
                close()
                if rec["t"] != 0:
                    raise DataError(f"{where}: trajectory {rec['traj']} does not start at t=0")
                cur, cur_id = {"obs": [], "act": [], "term": False}, rec["traj"]
            elif rec["t"] != len(cur["obs"]):
                raise DataError(f"{where}: expected t={len(cur['obs'])}, got {rec['t']}")
            if cur["term"]:
                raise DataError(f"{where}: step after a terminal step")
            cur["obs"].append(rec["obs"])
            cur["act"].append(rec["act"])
            cur["term"] = bool(rec["term"])
        close()
        return cls(tuple(trajs), header["env"], obs_dim, act_dim, has_actions, header["seed"])

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        path = Path(path)
        return cls.from_jsonl(path.read_text(), source=str(path))


def strip_actions(ds: TrajectoryDataset) -> TrajectoryDataset:
    if not ds.has_actions:
        raise MissingActionsError("dataset is already observation-only")
    trajs = tuple(Trajectory(tr.observations, None, tr.terminal) for tr in ds.trajectories)
    return replace(ds, trajectories=trajs, has_actions=False)


def compose_mixture_dataset(env, expert_policy, behavior_policy, n_expert_traj, n_subopt_traj,
                            horizon, seed) -> TrajectoryDataset:
    """Expert and suboptimal rollouts, shuffled together, with actions."""
    from .envs import rollout

    if n_expert_traj < 0 or n_subopt_traj < 0 or n_expert_traj + n_subopt_traj == 0:
        raise ValueError("trajectory counts must be nonnegative and not both zero")
    seeds = np.random.SeedSequence(seed).generate_state(n_expert_traj + n_subopt_traj + 1)
    trajs = [rollout(env, expert_policy, horizon, int(seeds[k])) for k in range(n_expert_traj)]
    trajs += [rollout(env, behavior_policy, horizon, int(seeds[n_expert_traj + k]))
              for k in range(n_subopt_traj)]
    order = np.random.default_rng(int(seeds[-1])).permutation(len(trajs))
    return TrajectoryDataset(
        tuple(trajs[k] for k in order), env.name, env.obs_dim, env.act_dim, True, int(seed),
        generator=f"mixture expert={n_expert_traj} subopt={n_subopt_traj} horizon={horizon}",
    )


# -- batches ------------------------------------------------------------------


@dataclass(frozen=True)
class TripleBatch:
    s: np.ndarray
    s_next: np.ndarray
    s_next2: np.ndarray
    source: np.ndarray
    weights: np.ndarray | None = field(default=None)

    def __len__(self):
        return self.s.shape[0]


@dataclass(frozen=True)
class PairBatch:
    s: np.ndarray
    s_next: np.ndarray
    a: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __len__(self):
        return self.s.shape[0]


def _triples(ds, rows, source):
    obs = ds.observations
    idx = ds.triple_index[rows]
    return obs[idx[:, 0]], obs[idx[:, 1]], obs[idx[:, 2]], np.full(len(rows), source, np.int8)


def _require_triples(ds, name):
    if len(ds.triple_index) == 0:
        raise DataError(f"{name} dataset has no trajectory of length >= 3")


def sample_mixture_triples(expert, offline, beta, batch, rng) -> TripleBatch:
    """Rows drawn from the expert data with probability ``beta``, else offline."""
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    _require_triples(expert, "expert")
    is_exp = rng.random(batch) < beta
    n_e = int(is_exp.sum())
    if n_e < batch:
        _require_triples(offline, "offline")
    e = _triples(expert, rng.integers(len(expert.triple_index), size=n_e), EXPERT)
    o = _triples(offline, rng.integers(max(len(offline.triple_index), 1), size=batch - n_e), OFFLINE)
    parts = []
    for k in range(4):
        arr = np.empty((batch,) + e[k].shape[1:], dtype=e[k].dtype)
        arr[is_exp] = e[k]
        arr[~is_exp] = o[k]
        parts.append(arr)
    return TripleBatch(*parts)


def sample_offline_triples(offline, batch, rng) -> TripleBatch:
    _require_triples(offline, "offline")
    return TripleBatch(*_triples(offline, rng.integers(len(offline.triple_index), size=batch), OFFLINE))


def sample_d0_pairs(expert, offline, batch, rng, include_expert=True) -> PairBatch:
    """Uniform over every consecutive (s, s') pair in the replay buffer."""
    sources = [offline, expert] if include_expert else [offline]
    counts = np.array([len(ds.pair_index) for ds in sources])
    if counts.sum() == 0:
        raise DataError("replay buffer has no (s, s') pairs")
    flat = rng.integers(counts.sum(), size=batch)
    s = np.empty((batch, offline.obs_dim))
    s1 = np.empty_like(s)
    lo = 0
    for ds, n in zip(sources, counts):
        sel = (flat >= lo) & (flat < lo + n)
        idx = ds.pair_index[flat[sel] - lo]
        s[sel], s1[sel] = ds.observations[idx[:, 0]], ds.observations[idx[:, 1]]
        lo += n
    return PairBatch(s, s1)


def sample_offline_sas(offline, batch, rng) -> PairBatch:
    if not offline.has_actions:
        raise MissingActionsError("policy extraction needs an offline dataset with actions")
    if len(offline.pair_index) == 0:
        raise DataError("offline dataset has no transitions")
    idx = offline.pair_index[rng.integers(len(offline.pair_index), size=batch)]
    obs = offline.observations
    return PairBatch(obs[idx[:, 0]], obs[idx[:, 1]], offline.actions[idx[:, 0]])


# -- full-batch views (deterministic, exact empirical expectations) ------------


def all_mixture_triples(expert, offline, beta) -> TripleBatch:
    """Every triple of both datasets, weighted to the mixture beta * E + (1 - beta) * O."""
    _require_triples(expert, "expert")
    parts = [_triples(expert, np.arange(len(expert.triple_index)), EXPERT)]
    w = [np.full(len(expert.triple_index), beta / len(expert.triple_index))]
    if beta < 1.0:
        _require_triples(offline, "offline")
        parts.append(_triples(offline, np.arange(len(offline.triple_index)), OFFLINE))
        w.append(np.full(len(offline.triple_index), (1.0 - beta) / len(offline.triple_index)))
    cols = [np.concatenate([p[k] for p in parts]) for k in range(4)]
    return TripleBatch(*cols, weights=np.concatenate(w))


def all_offline_triples(offline) -> TripleBatch:
    _require_triples(offline, "offline")
    n = len(offline.triple_index)
    return TripleBatch(*_triples(offline, np.arange(n), OFFLINE), weights=np.full(n, 1.0 / n))


def all_d0_pairs(expert, offline, include_expert=True) -> PairBatch:
    sources = [offline, expert] if include_expert else [offline]
    s = np.concatenate([ds.observations[ds.pair_index[:, 0]] for ds in sources])
    s1 = np.concatenate([ds.observations[ds.pair_index[:, 1]] for ds in sources])
    return PairBatch(s, s1, weights=np.full(len(s), 1.0 / len(s)))


def all_offline_sas(offline) -> PairBatch:
    if not offline.has_actions:
        raise MissingActionsError("policy extraction needs an offline dataset with actions")
    idx = offline.pair_index
    obs = offline.observations
    return PairBatch(obs[idx[:, 0]], obs[idx[:, 1]], offline.actions[idx[:, 0]])
