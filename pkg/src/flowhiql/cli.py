"""Command-line entry points: gen-data, train, eval, verify and report.

Exit codes: 0 success, 2 bad arguments or configuration, 3 unreadable or
corrupted files, 4 numerical failure, 5 failed verification.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor_nn as tn
from .config import config_to_string, load_config
from .dataset import generate_dataset, load_dataset
from .envs import ENVS, evaluate, make_env
from .errors import ArgumentError, CheckpointError, ConfigError, FlowHiqlError, VerificationError
from .hier_policy import EVAL_TAG, METRIC_FIELDS, POLICY_FAMILIES, Agent, HierarchicalActor, TrainConfig, train
from .theory_checks import CSV_FIELDS, UniformBallBehavior, check_lower_bound, kl_cap_check

log = logging.getLogger("flowhiql")

OUT_ROOT_VAR = "FLOWHIQL_OUT"
MANIFEST = "manifest.json"
DATASET_FILE = "dataset.fhd"
CONFIG_FILE = "config.ini"
METRICS_FILE = "metrics.csv"
FINAL_CKPT = "final.ckpt"
CKPT_DIR = "checkpoints"


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    dataset_checksum: str | None
    seed: int
    code_version: str
    duration_s: float
    final_metrics: dict
    files: dict = dataclasses.field(default_factory=dict)

    def write(self, out_dir):
        out_dir = Path(out_dir)
        self.files = {
            p.relative_to(out_dir).as_posix(): sha256_file(p)
            for p in sorted(out_dir.rglob("*"))
            if p.is_file() and p.name != MANIFEST
        }
        (out_dir / MANIFEST).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise CheckpointError(f"cannot read manifest {path}: {exc}") from exc


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def default_out(name):
    return Path(os.environ.get(OUT_ROOT_VAR, "runs")) / name


def _out_dir(args, name):
    out = Path(args.out) if args.out else default_out(name)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, fields, rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, restval="", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip().lower() for h in next(reader)]
            return [dict(zip(header, (c.strip() for c in row))) for row in reader if row]
    except (OSError, StopIteration) as exc:
        raise CheckpointError(f"cannot read CSV {path}: {exc}") from exc


def _find_config(ckpt):
    for d in (Path(ckpt).parent, Path(ckpt).parent.parent):
        if (d / CONFIG_FILE).exists():
            return d / CONFIG_FILE
    return None


def load_agent(ckpt, config: TrainConfig, env):
    agent = Agent.from_params(config, tn.load_params(ckpt))
    if (agent.state_dim, agent.action_dim) != (env.state_dim, env.action_dim):
        raise ConfigError(f"checkpoint dimensions do not match environment {env.name!r}")
    return agent


def _config_for(args, **extra):
    overrides = dict(
        seed=getattr(args, "train_seed", None),
        dataset_fraction=getattr(args, "dataset_fraction", None),
        policy_family=getattr(args, "policy_family", None),
        total_steps=getattr(args, "steps", None),
        **extra,
    )
    if getattr(args, "config", None):
        return load_config(args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    if args.n_traj < 1:
        raise ArgumentError(f"--n-traj must be at least 1, got {args.n_traj}")
    start = time.perf_counter()
    env = make_env(args.env)
    out = _out_dir(args, f"data-{args.env}-n{args.n_traj}-s{args.seed}")
    ds = generate_dataset(env, args.n_traj, args.seed)
    path = out / DATASET_FILE
    try:
        ds.save(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write dataset {path}: {exc}") from exc
    checksum = sha256_file(path)
    info = {"env": args.env, "n_traj": args.n_traj, "n_transitions": ds.n_transitions}
    RunManifest("gen-data", info, checksum, args.seed, __version__, time.perf_counter() - start, {}).write(out)
    print(f"wrote {len(ds)} trajectories ({ds.n_transitions} transitions) to {path}")
    return 0


def cmd_train(args):
    start = time.perf_counter()
    config = _config_for(args)
    full = load_dataset(args.data, expect_env=args.env)
    data_checksum = sha256_file(args.data)
    ds = full.subset(config.dataset_fraction) if config.dataset_fraction < 1 else full
    env = ds.env
    name = f"train-{env.name}-{config.policy_family}-f{config.dataset_fraction:g}-s{config.seed}"
    out = _out_dir(args, name)
    agent = None
    rows = []
    if args.resume:
        agent = load_agent(args.resume, config, env)
        if agent.step > config.total_steps:
            raise ConfigError(f"checkpoint step {agent.step} exceeds total_steps {config.total_steps}")
        if (out / METRICS_FILE).exists():
            # drop rows the interrupted run wrote only because it ended there
            rows = [
                r for r in read_csv(out / METRICS_FILE)
                if int(r["step"]) <= agent.step
                and (int(r["step"]) % config.eval_interval == 0 or int(r["step"]) == config.total_steps)
            ]
    (out / CONFIG_FILE).write_text(config_to_string(config))
    ckpt_dir = out / CKPT_DIR
    if config.checkpoint_interval:
        ckpt_dir.mkdir(exist_ok=True)

    def flush():
        write_csv(out / METRICS_FILE, METRIC_FIELDS, rows)

    def on_metrics(row):
        rows.append(row)
        flush()

    def on_checkpoint(a):
        tn.save_params(a.to_params(), ckpt_dir / f"step_{a.step:08d}.ckpt")

    flush()
    metrics, agent = train(config, ds, agent, on_metrics=on_metrics, on_checkpoint=on_checkpoint,
                           evaluate_success=not args.no_eval)
    tn.save_params(agent.to_params(), out / FINAL_CKPT)
    final = {k: _fmt(v) for k, v in rows[-1].items()} if rows else {}
    snapshot = {"env": env.name, "dataset_trajectories": len(ds), **dataclasses.asdict(config)}
    RunManifest("train", snapshot, data_checksum, config.seed, __version__, time.perf_counter() - start, final).write(out)
    print(f"trained to step {agent.step}; artifacts in {out}")
    if rows:
        print("final " + " ".join(f"{k}={v}" for k, v in final.items()))
    return 0


def read_goals(path, env):
    """One task per line: ``state_dim`` numbers (start at the goal) or a start then a goal."""
    tasks = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read goals file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals = np.array([float(v) for v in line.replace(",", " ").split()])
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        if len(vals) == env.state_dim:
            tasks.append(vals)
        elif len(vals) == 2 * env.state_dim:
            tasks.append((vals[: env.state_dim], vals[env.state_dim :]))
        else:
            raise ConfigError(f"{path}:{lineno}: expected {env.state_dim} or {2 * env.state_dim} values, got {len(vals)}")
    if not tasks:
        raise ConfigError(f"goals file {path} has no tasks")
    return tasks


def cmd_eval(args):
    start = time.perf_counter()
    if args.episodes < 1:
        raise ArgumentError("--episodes must be at least 1")
    env = make_env(args.env)
    cfg_path = args.config or _find_config(args.checkpoint)
    config = load_config(cfg_path) if cfg_path else TrainConfig()
    agent = load_agent(args.checkpoint, config, env)
    tasks = read_goals(args.goals, env) if args.goals else env.eval_tasks()
    per_seed = []
    for seed in args.seed:
        actor = HierarchicalActor(agent, env, high_noise=config.eval_high_noise, low_noise=config.eval_low_noise)
        per_seed.append(evaluate(actor, env, tasks, args.episodes, np.random.default_rng([seed, EVAL_TAG])))
    succ = np.stack([r.successes for r in per_seed])  # (seeds, tasks, episodes)
    seed_means = succ.mean(axis=(1, 2))
    mean = float(seed_means.mean())
    if len(args.seed) > 1:
        std_err = float(seed_means.std(ddof=1) / math.sqrt(len(args.seed)))
    else:
        std_err = per_seed[0].std_err
    rows = []
    for i, task in enumerate(tasks):
        goal = task[1] if isinstance(task, tuple) else task
        rows.append({
            "task": i, "goal": " ".join(_fmt(float(v)) for v in goal),
            "episodes": succ.shape[0] * succ.shape[2], "success_rate": float(succ[:, i].mean()),
        })
    rows.append({"task": "all", "goal": "", "episodes": int(succ[:, 0].size * len(tasks)), "success_rate": mean})
    out = _out_dir(args, f"eval-{env.name}-s{'_'.join(map(str, args.seed))}")
    write_csv(out / "eval.csv", ["task", "goal", "episodes", "success_rate"], rows)
    text = "\n".join(
        [f"environment {env.name}, checkpoint step {agent.step}, seeds {args.seed}, episodes/goal {args.episodes}"]
        + [f"  task {r['task']}: {r['success_rate']:.3f}" for r in rows[:-1]]
        + [f"success rate {mean:.4f} +/- {std_err:.4f} (std err)"]
    ) + "\n"
    (out / "eval.txt").write_text(text)
    RunManifest(
        "eval", {"env": env.name, "checkpoint": str(args.checkpoint), "episodes": args.episodes, "seeds": args.seed},
        None, args.seed[0], __version__, time.perf_counter() - start,
        {"success_rate": _fmt(mean), "std_err": _fmt(std_err)},
    ).write(out)
    sys.stdout.write(text)
    return 0


def cmd_verify(args):
    start = time.perf_counter()
    env = make_env(args.env)
    if args.checkpoint:
        cfg_path = args.config or _find_config(args.checkpoint)
        config = load_config(cfg_path) if cfg_path else TrainConfig()
        agent = load_agent(args.checkpoint, config, env)
    else:
        config = _config_for(args)
        agent = Agent.create(config, env.state_dim, env.action_dim)
    rng = np.random.default_rng([args.seed, 3])
    ctx = rng.standard_normal((args.contexts, 2 * env.state_dim))
    a_max_low = args.a_max if args.a_max is not None else math.sqrt(env.action_dim)
    rows, texts, ok = [], [], True
    for head_name, head, a_max in (("low", agent.low, a_max_low), ("high", agent.high, env.state_radius)):
        report = check_lower_bound(head.flow, head.params, ctx, args.samples, rng, A_max=a_max)
        ok &= report.valid
        rows.append({"head": head_name, **report.csv_row()})
        texts.append(f"[{head_name}] " + report.text())
    kl = kl_cap_check(UniformBallBehavior(env.action_dim, a_max_low), agent.low.flow, agent.low.params, ctx[0], args.samples, rng)
    ok &= kl.valid
    rows.append({"head": "low", "d": env.action_dim, "A_max": repr(a_max_low), **kl.csv_row()})
    texts.append("[low] " + kl.text())
    out = _out_dir(args, f"verify-{env.name}-s{args.seed}")
    write_csv(out / "verify.csv", ["head", *CSV_FIELDS], rows)
    text = "\n".join(texts) + f"\noverall: {'PASS' if ok else 'FAIL'}\n"
    (out / "verify.txt").write_text(text)
    RunManifest(
        "verify", {"env": env.name, "checkpoint": str(args.checkpoint or ""), "samples": args.samples},
        None, args.seed, __version__, time.perf_counter() - start, {"passed": int(ok)},
    ).write(out)
    sys.stdout.write(text)
    if not ok:
        raise VerificationError("at least one certified check failed")
    return 0


GROUP_FIELDS = ["env", "method", "fraction", "seed"]


def _rows_with_meta(path, index):
    rows = read_csv(path)
    if rows and "env" in rows[0]:
        return rows
    manifest = Path(path).parent / MANIFEST
    meta = {"env": "unknown", "method": "unknown", "fraction": "1.0", "seed": str(index)}
    if manifest.exists():
        cfg = RunManifest.read(manifest).config
        meta = {
            "env": cfg.get("env", "unknown"), "method": cfg.get("policy_family", "unknown"),
            "fraction": repr(float(cfg.get("dataset_fraction", 1.0))), "seed": str(cfg.get("seed", index)),
        }
    return [{**meta, **r} for r in rows]


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def cmd_report(args):
    start = time.perf_counter()
    merged = []
    for i, path in enumerate(args.inputs):
        merged.extend(_rows_with_meta(path, i))
    if not merged:
        raise ArgumentError("report inputs contain no rows")
    metric_cols = [c for c in METRIC_FIELDS if c != "step"]
    groups = {}
    for r in merged:
        key = (r["env"], r["method"], r["fraction"], int(float(r["step"])))
        groups.setdefault(key, []).append(r)
    summary = []
    for (env, method, fraction, step), rs in sorted(groups.items()):
        row = {"env": env, "method": method, "fraction": fraction, "step": step, "n_seeds": len(rs)}
        for c in metric_cols:
            vals = np.array([_num(r.get(c)) for r in rs])
            row[f"{c}_mean"] = float(vals.mean())
            row[f"{c}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else math.nan
        summary.append(row)
    out = _out_dir(args, "report")
    write_csv(out / "merged.csv", GROUP_FIELDS + list(METRIC_FIELDS), merged)
    summary_fields = ["env", "method", "fraction", "step", "n_seeds"]
    summary_fields += [f"{c}_{s}" for c in metric_cols for s in ("mean", "std")]
    write_csv(out / "summary.csv", summary_fields, summary)
    final = {}
    for row in summary:
        final[(row["env"], row["method"], row["fraction"])] = row
    lines = [f"{'env':<12} {'method':<9} {'fraction':>8} {'step':>7} {'seeds':>5}  success (mean +/- std)"]
    for (env, method, fraction), row in sorted(final.items()):
        lines.append(
            f"{env:<12} {method:<9} {fraction:>8} {row['step']:>7} {row['n_seeds']:>5}  "
            f"{100 * row['success_rate_mean']:6.1f} +/- {100 * row['success_rate_std']:.1f}"
        )
    drops = []
    for (env, method, fraction), row in sorted(final.items()):
        half = final.get((env, method, repr(0.5)))
        if _num(fraction) == 1.0 and half is not None:
            drops.append(f"{env:<12} {method:<9} drop 1.0 -> 0.5: "
                         f"{100 * (row['success_rate_mean'] - half['success_rate_mean']):+.1f} points")
    if drops:
        lines += ["", "degradation from full to half data:"] + drops
    text = "\n".join(lines) + "\n"
    (out / "table.txt").write_text(text)
    RunManifest("report", {"inputs": [str(p) for p in args.inputs]}, None, 0, __version__,
                time.perf_counter() - start, {"groups": len(final)}).write(out)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="flowhiql", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    envs = sorted(ENVS)
    out_help = f"output directory (default: ${OUT_ROOT_VAR} or ./runs, plus a run name)"

    g = sub.add_parser("gen-data", help="generate an offline dataset with the scripted behavior policy")
    g.add_argument("--env", required=True, choices=envs)
    g.add_argument("--n-traj", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help=out_help)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a hierarchical agent on a dataset")
    t.add_argument("--data", required=True, help="dataset file written by gen-data")
    t.add_argument("--config", help="INI config; flags below override it")
    t.add_argument("--env", choices=envs, help="fail unless the dataset belongs to this environment")
    t.add_argument("--dataset-fraction", type=float)
    t.add_argument("--policy-family", choices=POLICY_FAMILIES)
    t.add_argument("--seed", dest="train_seed", type=int)
    t.add_argument("--steps", type=int, help="total training steps")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--no-eval", action="store_true", help="skip success-rate evaluation (written as nan)")
    t.add_argument("--out", help=out_help)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="success rate of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", required=True, choices=envs)
    e.add_argument("--config", help="config of the run (default: config.ini next to the checkpoint)")
    e.add_argument("--goals", help="goal file, one task per line")
    e.add_argument("--episodes", type=int, default=1, help="episodes per goal")
    e.add_argument("--seed", type=int, nargs="+", default=[0])
    e.add_argument("--out", help=out_help)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="audit the log-density floor and the KL cap")
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--fresh-init", action="store_true", help="audit a freshly initialised agent")
    v.add_argument("--env", required=True, choices=envs)
    v.add_argument("--config")
    v.add_argument("--policy-family", choices=POLICY_FAMILIES)
    v.add_argument("--samples", type=int, default=10_000)
    v.add_argument("--contexts", type=int, default=4)
    v.add_argument("--a-max", type=float, help="action radius (default: sqrt(action_dim))")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help=out_help)
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="aggregate metrics CSVs across seeds")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out", help=out_help)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FlowHiqlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CheckpointError.exit_code


if __name__ == "__main__":
    sys.exit(main())
