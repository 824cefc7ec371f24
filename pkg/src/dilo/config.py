"""Run configuration: a YAML (or JSON) document with fixed sections.

Every key has a default, unknown keys are rejected, and ``resolve`` returns
the fully expanded document that is frozen next to each run's outputs.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dual import DiloConfig

OUTPUT_ROOT_ENV = "DILO_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "env": {"name": "gridworld", "params": {}},
    "data": {
        "n_expert_offline": 10,   # expert rollouts mixed into the offline data, actions kept
        "n_subopt_offline": 40,   # uniform-random rollouts in the offline data
        "n_expert_obs": 5,        # observation-only expert rollouts
        "horizon": 20,
        "seed": 0,
        "offline_path": None,
        "expert_path": None,
    },
    "dilo": {**DiloConfig(steps=8_000).to_dict(), "log_every": 100},
    "eval": {"n_episodes": 100, "seed": 1, "horizon": 20, "greedy": True, "reference_episodes": 100},
    "oracle": {"instances": 3, "n_states": 3, "n_actions": 2, "gamma": 0.9, "beta": 0.5, "seed": 0,
               "tol": 1e-6, "chain": False},
    "output_dir": "runs/default",
}

# sections whose own keys are free-form
_OPEN = {("env", "params")}


def _merge(base, override, path=()):
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = ".".join((*path, str(k)))
        if k not in base:
            raise ConfigError(f"unknown key {where!r}")
        if isinstance(base[k], dict) and (*path, k) not in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[k] = _merge(base[k], v, (*path, k))
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    env: dict
    data: dict
    dilo: DiloConfig
    eval: dict
    oracle: dict
    output_dir: Path
    raw: dict = field(repr=False, default_factory=dict)

    @classmethod
    def from_dict(cls, doc):
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping at the top level")
        full = _merge(DEFAULTS, doc)
        try:
            dilo = DiloConfig.from_dict(full["dilo"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dilo: {exc}") from exc
        full["dilo"] = dilo.to_dict()
        out = Path(full["output_dir"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        d = full["data"]
        for k in ("n_expert_offline", "n_subopt_offline", "n_expert_obs", "horizon"):
            if not isinstance(d[k], int) or d[k] < 0:
                raise ConfigError(f"data.{k} must be a nonnegative integer")
        if d["horizon"] < 1 or d["n_expert_obs"] < 1 or d["n_expert_offline"] + d["n_subopt_offline"] < 1:
            raise ConfigError("data needs horizon >= 1, n_expert_obs >= 1 and a nonempty offline set")
        if not isinstance(full["eval"]["n_episodes"], int) or full["eval"]["n_episodes"] < 1:
            raise ConfigError("eval.n_episodes must be a positive integer")
        return cls(full["env"], d, dilo, full["eval"], full["oracle"], out, full)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}".replace("\n", " ")) from exc
        return cls.from_dict(doc)

    def resolved(self):
        doc = copy.deepcopy(self.raw)
        doc["output_dir"] = str(self.output_dir)
        return doc

    def offline_path(self):
        return Path(self.data["offline_path"] or self.output_dir / "data" / "offline.jsonl")

    def expert_path(self):
        return Path(self.data["expert_path"] or self.output_dir / "data" / "expert.jsonl")

    def freeze(self, name="config.resolved.yaml"):
        """Write the resolved config into the output directory."""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / name
        path.write_text(yaml.safe_dump(self.resolved(), sort_keys=True))
        return path
