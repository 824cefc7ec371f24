"""Command-line entry point: ``dilo <command> [flags]``."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .approx import MLPValue, TableValue, load_checkpoint, save_checkpoint
from .config import OUTPUT_ROOT_ENV, ConfigError, RunConfig
from .dual import DiloConfig, DivergenceError, recover_ratio, residuals, train_value
from .envs import Gridworld, default_policies, make_env
from .policy import EvalReport, evaluate_policy, extract_policy, reference_returns
from .primal import certify, chain_instance, random_instance

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED, EXIT_DATA = 0, 1, 2, 3, 4, 5

EPILOG = f"""\
exit codes:
  0  success
  1  any other error
  2  bad command line or config (parse error, unknown key, invalid value)
  3  a required file (config, dataset, checkpoint) does not exist
  4  training diverged (|V| beyond dilo.divergence_threshold or non-finite)
  5  dataset is malformed or unusable for the command

on failure a single line is written to stderr:
  dilo-error code=<exit code> kind=<error class> message=<text>

environment:
  {OUTPUT_ROOT_ENV}  prefix for relative output_dir values in configs
"""


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows, append=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


# -- pipeline pieces ----------------------------------------------------------------


def build_env(cfg: RunConfig):
    try:
        return make_env(cfg.env["name"], **cfg.env["params"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"env: {exc}") from exc


def build_datasets(env, data_cfg):
    """(offline with actions, observation-only expert) as described by the data section."""
    expert, behavior = default_policies(env)
    seed = int(data_cfg["seed"])
    offline = D.compose_mixture_dataset(env, expert, behavior, data_cfg["n_expert_offline"],
                                        data_cfg["n_subopt_offline"], data_cfg["horizon"], seed)
    demos = D.compose_mixture_dataset(env, expert, behavior, data_cfg["n_expert_obs"], 0,
                                      data_cfg["horizon"], seed + 1000)
    return offline, D.strip_actions(demos)


def build_value(env, offline, dilo: DiloConfig):
    if dilo.approximator == "table":
        if not isinstance(env, Gridworld):
            raise ConfigError("dilo.approximator=table needs a discrete environment")
        return TableValue(env.n_states, (env.width, 1))
    return MLPValue.for_dataset(offline, dilo.hidden, np.random.default_rng(dilo.seed))


def _load_dataset(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path} (run gen-data first)")
    return D.TrajectoryDataset.load(path)


def train_pipeline(cfg: RunConfig, offline, expert, env, on_log=None):
    """Train V, extract the policy; returns (value, policy, history)."""
    v = build_value(env, offline, cfg.dilo)
    v, history = train_value(v, expert, offline, cfg.dilo, on_log=on_log)
    n_actions = getattr(env, "n_actions", None)
    policy = extract_policy(v, offline, cfg.dilo, np.random.default_rng(cfg.dilo.seed + 1), n_actions=n_actions)
    return v, policy, history


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = RunConfig.load(args.config)
    env = build_env(cfg)
    offline, expert = build_datasets(env, cfg.data)
    cfg.freeze()
    for ds, path in ((offline, cfg.offline_path()), (expert, cfg.expert_path())):
        path.parent.mkdir(parents=True, exist_ok=True)
        ds.save(path)
        print(f"wrote {path} ({len(ds)} trajectories)")
    return EXIT_OK


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    env = build_env(cfg)
    offline, expert = _load_dataset(cfg.offline_path()), _load_dataset(cfg.expert_path())
    cfg.freeze()
    v, policy, history = train_pipeline(cfg, offline, expert, env)
    cols = ["step", *[k for k in history[0] if k != "step"]] if history else ["step"]
    metrics = write_csv(cfg.output_dir / "train_metrics.csv", cols, [[h[k] for k in cols] for h in history])
    ckpt = cfg.output_dir / "checkpoint.npz"
    meta = {"dilo": cfg.dilo.to_dict(), "env": cfg.env,
            "uncovered_states": [int(s) for s in getattr(policy, "uncovered", [])]}
    save_checkpoint(ckpt, v, policy, meta)
    print(f"wrote {ckpt}")
    print(f"wrote {metrics}")
    return EXIT_OK


def cmd_eval(args):
    cfg = RunConfig.load(args.config)
    env = build_env(cfg)
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    _, policy, _ = load_checkpoint(ckpt)
    if policy is None:
        raise D.DataError("checkpoint holds no policy")
    e = cfg.eval
    refs = reference_returns(env, e["reference_episodes"], e["seed"], e["horizon"])
    report = evaluate_policy(env, policy, e["n_episodes"], e["seed"], refs, e["horizon"], e["greedy"])
    cfg.freeze()
    write_csv(cfg.output_dir / "results.csv", EvalReport.csv_header().split(","),
              [report.csv_row().split(",")], append=True)
    print(EvalReport.csv_header())
    print(report.csv_row())
    return EXIT_OK


def cmd_oracle_check(args):
    cfg = RunConfig.load(args.config)
    o = cfg.oracle
    insts = [random_instance(int(o["seed"]) + k, o["n_states"], o["n_actions"], o["gamma"], o["beta"])
             for k in range(int(o["instances"]))]
    if o["chain"]:
        insts.append(chain_instance(beta=o["beta"]))
    header = ["instance", "primal", "dual", "gap", "fw_gap", "feasibility_residual"]
    rows = []
    for inst in insts:
        c = certify(inst, o["tol"])
        rows.append([c.name, c.primal, c.dual, c.gap, c.fw_gap, c.feasibility_residual])
    cfg.freeze()
    out = write_csv(cfg.output_dir / "oracle.csv", header, rows)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header, *[[_fmt(x) for x in r] for r in rows]])
    sys.stdout.write(buf.getvalue())
    print(f"wrote {out}")
    return EXIT_OK


def cmd_diagnose(args):
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    v, _, meta = load_checkpoint(ckpt)
    ds = _load_dataset(args.data)
    dilo = DiloConfig.from_dict(meta.get("dilo", {}))
    t = D.all_offline_triples(ds)
    y = residuals(v, t, dilo.gamma)
    w = recover_ratio(v, t, dilo)
    rows = [[k, w[k], -y[k], y[k]] for k in range(len(y))]
    out = write_csv(args.out or ckpt.with_name("diagnose.csv"), ["triple", "w", "implied_reward", "residual"], rows)
    print(f"wrote {out} ({len(rows)} triples)")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dilo", description="Offline imitation from observation-only demonstrations.",
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("gen-data", help="generate offline and expert datasets", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_gen_data)
    s = sub.add_parser("train", help="train V and extract a policy", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_train)
    s = sub.add_parser("eval", help="evaluate a checkpoint's policy", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.set_defaults(fn=cmd_eval)
    s = sub.add_parser("oracle-check", help="duality gap of the exact primal and dual solvers", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_oracle_check)
    s = sub.add_parser("diagnose", help="per-triple ratio, implied reward and residual", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default=None, help="CSV path (default: diagnose.csv next to the checkpoint)")
    s.set_defaults(fn=cmd_diagnose)
    return p


def _classify(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGED
    if isinstance(exc, D.DataError):
        return EXIT_DATA
    return EXIT_OTHER


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one stderr line
        code = _classify(exc)
        msg = " ".join(str(exc).split())
        print(f"dilo-error code={code} kind={type(exc).__name__} message={msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
