"""Command-line entry point: gen-robots, train, eval, inspect-robot.

Exit codes: 0 success, 1 runtime failure (missing files, generation
failure, interrupted run), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import eval as evalmod
from .morphology import (GenerationExhausted, RobotSet, UnsupportedReference, generate_robot_set,
                         load_reference, parse_ids, reference_robot, reference_set)
from .ppo import PpoConfig, Trainer, load_policy

log = logging.getLogger("pal_loco")

METRICS_ENV = "PAL_LOCO_METRICS_DIR"
REF_NAMES = {"a1_ref": 1, "aliengo_ref": 2, "anymal_b_ref": 4, "anymal_c_ref": 5}

SMOKE_PPO = {"n_env": 16, "steps_per_iter": 64, "iterations": 300, "iterations_per_round": 100,
             "dim_transitions": 4096, "dim_epochs": 5, "learn_std": True,
             "std_lr": 1e-3}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    robots: str | None = None  # robots.json; None trains on the reference stand-ins
    out_dir: str = "runs/default"
    variant: str = "pal"
    ids: list[int] = field(default_factory=lambda: [1])
    ppo: dict = field(default_factory=dict)
    sweeps: list[dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise UsageError(f"unknown config keys: {bad}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.variant not in ("pal", "moral"):
            raise UsageError(f"variant must be pal or moral, got {self.variant!r}")
        try:
            self.ids = parse_ids(self.ids)
            PpoConfig.from_dict({**self.ppo, "seed": self.seed})
            for s in self.sweeps:
                evalmod.RobustnessSweepSpec(**s)
        except (ValueError, TypeError) as e:
            raise UsageError(str(e)) from e

    def ppo_config(self) -> PpoConfig:
        return PpoConfig.from_dict({**self.ppo, "seed": self.seed})

    def effective(self) -> dict:
        d = asdict(self)
        d["ppo"] = self.ppo_config().to_dict()
        return d


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    return RunConfig.from_dict(doc)


def metrics_dir(default: str) -> Path:
    return Path(os.environ.get(METRICS_ENV) or default)


def write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def resolve_robot(name: str):
    """Reference stand-in by name (``a1_ref`` ...) or numeric id."""
    if name in REF_NAMES:
        return reference_robot(REF_NAMES[name])
    try:
        return reference_robot(int(name))
    except ValueError:
        raise UsageError(f"unknown robot {name!r}; choose from {sorted(REF_NAMES)}") from None


# ----------------------------------------------------------------------------
# Subcommands


def cmd_gen_robots(args) -> int:
    ids = parse_ids(args.refs)
    for i in ids:
        load_reference(i)
    try:
        rs = generate_robot_set(ids, args.count, args.seed, args.max_attempts)
    except GenerationExhausted as e:
        log.error("%s", e)
        return 1
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rs.to_json() + "\n")
    report = {"ref_ids": ids, "count": args.count, "seed": args.seed, "robots": len(rs),
              "attempts": rs.attempts, "acceptance_rate": len(rs) / max(rs.attempts, 1)}
    write_json(out.with_name(out.stem + "_report.json"), report)
    print(f"wrote {len(rs)} robots to {out} (acceptance {report['acceptance_rate']:.3f})")
    return 0


def _robot_set_for(cfg: RunConfig) -> RobotSet:
    if cfg.robots is None:
        return reference_set(cfg.ids, cfg.seed)
    rs = RobotSet.from_json(Path(cfg.robots).read_text())
    keep = tuple(r for r in rs.robots if r.params.ref_id in cfg.ids)
    if not keep:
        raise UsageError(f"robots file has no members with ids {cfg.ids}")
    return RobotSet(keep, rs.per_reference_count, rs.seed)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.variant:
        cfg.variant = args.variant
    if args.ids:
        cfg.ids = parse_ids(args.ids)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.robots:
        cfg.robots = args.robots
    if args.iterations is not None:
        cfg.ppo = {**cfg.ppo, "iterations": args.iterations}
    if args.smoke:
        cfg.ppo = {**SMOKE_PPO, **cfg.ppo}
    cfg.validate()
    out = metrics_dir(args.out_dir or cfg.out_dir)
    pcfg = cfg.ppo_config()
    if args.resume:
        if not (out / "checkpoints" / "trainer_state.pkl").exists():
            log.error("no checkpoint to resume in %s", out)
            return 1
        trainer = Trainer.resume(out)
        if trainer.variant != cfg.variant:
            raise UsageError(f"checkpoint variant {trainer.variant} != {cfg.variant}")
    else:
        if cfg.robots is not None and not Path(cfg.robots).exists():
            log.error("robots file %s not found", cfg.robots)
            return 1
        trainer = Trainer(pcfg, _robot_set_for(cfg), cfg.variant, out)
    write_json(out / "config.json", cfg.effective())

    def progress(row):
        if not args.quiet:
            print(f"iter {row['iteration']:5d}  reward {row['mean_reward']:+.4f}  "
                  f"ep_len {row['mean_episode_length']:6.1f}  kl {row['kl']:.4f}  "
                  f"lr {row['lr']:.2e}", flush=True)

    try:
        trainer.run_schedule(pcfg.iterations, progress)
    except KeyboardInterrupt:
        trainer.save(out / "checkpoints")
        log.error("interrupted at iteration %d; checkpoint written", trainer.iteration)
        return 1
    print(f"finished {trainer.iteration} iterations; outputs in {out}")
    return 0


def _load_bundle(path: str):
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoints" / "policy.npz" if (p / "checkpoints").exists() else p / "policy.npz"
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found")
    return load_policy(p), p


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = metrics_dir(args.out_dir or os.path.join(cfg.out_dir, "eval"))
    try:
        loaded = [_load_bundle(c) for c in args.checkpoint]
    except FileNotFoundError as e:
        log.error("%s", e)
        return 1
    robots = args.robot or ["a1_ref"]
    models = {name: resolve_robot(name) for name in robots}
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {"checkpoints": [str(p) for _, p in loaded], "seed": seed,
                                     "robots": robots, "n_rollouts": args.n_rollouts,
                                     "sweep": args.sweep, "grid": args.grid,
                                     "tracking": args.tracking, "zero_shot": args.zero_shot})
    bundle = loaded[0][0]
    did = False
    specs = [evalmod.RobustnessSweepSpec(**s) for s in cfg.sweeps]
    if args.sweep:
        grid = evalmod.parse_grid(args.grid) if args.grid else evalmod.DEFAULT_GRIDS[args.sweep]
        specs.append(evalmod.RobustnessSweepSpec(args.sweep, grid, args.n_rollouts, seed=seed))
    if specs:
        evalmod.write_schema(out / "schema.json")
        first = True
        for name, model in models.items():
            for spec in specs:
                res = evalmod.robustness_sweep(
                    bundle, model, spec,
                    lambda p: print(f"{spec.kind}={p.value:g}  SR {p.sr:.3f}", flush=True))
                res.write_csv(out / "sweep.csv", append=not first)
                first = False
        did = True
    if args.tracking:
        model_name = robots[0]
        tlog, _ = evalmod.tracking_run(bundle, models[model_name], seed, args.n_rollouts)
        tlog.write_csv(out / "tracking.csv")
        rx, ry, rw = evalmod.tracking_rmse(tlog)
        ex, ey, ez = evalmod.estimator_rmse(tlog)
        with open(out / "estimator.csv", "w") as f:
            f.write("axis,rmse\n")
            for ax, v in zip("xyz", (ex, ey, ez)):
                f.write(f"{ax},{v!r}\n")
        evalmod.write_schema(out / "schema.json")
        print(f"tracking RMSE ({model_name}): x {rx:.4f}  y {ry:.4f}  yaw {rw:.4f}")
        print(f"estimator RMSE: x {ex:.4f}  y {ey:.4f}  z {ez:.4f}")
        did = True
    if args.zero_shot:
        bundles = {}
        for b, p in loaded:
            from .nn import load_checkpoint

            _, meta, _ = load_checkpoint(p)
            ids = "+".join(str(i) for i in meta.get("ref_ids", []))
            bundles[(b.variant, ids)] = b
        rows = evalmod.zero_shot_eval(bundles, models, args.n_rollouts, seed)
        evalmod.write_report_csv(rows, out / "report.csv")
        evalmod.write_schema(out / "schema.json")
        for r in rows:
            print(f"{r.variant:6s} {r.id_set:10s} {r.eval_model:14s} SR {r.SR:.3f}  "
                  f"rmse ({r.rmse_vx:.3f}, {r.rmse_vy:.3f}, {r.rmse_wz:.3f})")
        did = True
    if not did:
        raise UsageError("nothing to evaluate: pass --sweep, --tracking or --zero-shot")
    return 0


def cmd_inspect_robot(args) -> int:
    if args.robots:
        rs = RobotSet.from_json(Path(args.robots).read_text())
        if not 0 <= args.index < len(rs):
            raise UsageError(f"index {args.index} outside 0..{len(rs) - 1}")
        model = rs.robots[args.index].build()
    else:
        model = resolve_robot(args.robot)
    p = model.params
    np.set_printoptions(precision=4, suppress=True)
    print(f"robot: {model.name} (reference id {p.ref_id}, configuration {p.leg_configuration})")
    print(f"total mass: {model.total_mass:.4f} kg  (base {p.m_base:.4f} kg)")
    print(f"link masses per leg (hip, thigh, shank): {p.link_masses.reshape(4, 3)[0]}")
    print(f"joint offsets (leg FL, rows c_q1..c_q3):\n{p.joint_offsets[0]}")
    print(f"foot offsets c_f,z: {p.foot_offsets}")
    print(f"Kp {p.kp:.3f}  Kd {p.kd:.3f}  tau_max {p.tau_max:.3f}  latency {p.latency * 1e3:.2f} ms")
    print(f"friction: {p.mu_f}")
    print(f"nominal joints: {model.nominal}")
    print(f"nominal base height r_n: {model.nominal_base_height:.4f} m")
    return 0


# ----------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pal-loco", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-robots", help="sample viable robots around reference models")
    g.add_argument("--refs", required=True, help="comma list of reference ids (1,2,4,5)")
    g.add_argument("--count", type=int, default=50, help="robots per reference (default 50)")
    g.add_argument("--seed", type=int, default=0, help="generation seed")
    g.add_argument("--out", default="robots.json", help="output JSON path")
    g.add_argument("--max-attempts", type=int, default=None,
                   help="sampling attempts per robot before giving up (default 1000 x count)")
    g.set_defaults(func=cmd_gen_robots)

    t = sub.add_parser("train", help="train a controller (PAL or MorAL)")
    t.add_argument("--config", help="JSON run config (keys: seed, robots, out_dir, variant, ids, "
                                    "ppo, sweeps)")
    t.add_argument("--variant", choices=("pal", "moral"), help="controller variant")
    t.add_argument("--ids", help="comma list of reference ids to train on")
    t.add_argument("--robots", help="robots.json from gen-robots (default: reference stand-ins)")
    t.add_argument("--seed", type=int, help="run seed")
    t.add_argument("--iterations", type=int, help="override the PPO iteration count")
    t.add_argument("--out-dir", help=f"output directory (env {METRICS_ENV} overrides)")
    t.add_argument("--smoke", action="store_true",
                   help="desk-scale defaults (16 envs x 64 steps, 300 iterations)")
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    t.add_argument("--quiet", action="store_true", help="no per-iteration progress lines")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="robustness sweeps, tracking RMSE, zero-shot report")
    e.add_argument("--checkpoint", action="append", required=True,
                   help="policy.npz or run directory; repeat for zero-shot comparisons")
    e.add_argument("--config", help="JSON run config (seed and sweep specs are used)")
    e.add_argument("--sweep", choices=evalmod.SWEEP_KINDS, help="perturbation to sweep")
    e.add_argument("--grid", help="sweep grid as lo:hi:n or a comma list")
    e.add_argument("--tracking", action="store_true", help="record tracking/estimator logs")
    e.add_argument("--zero-shot", action="store_true",
                   help="report SR and RMSE for every checkpoint on every --robot")
    e.add_argument("--robot", action="append",
                   help=f"evaluation robot ({', '.join(sorted(REF_NAMES))}); repeatable")
    e.add_argument("--n-rollouts", type=int, default=100, help="rollouts per point (default 100)")
    e.add_argument("--seed", type=int, help="evaluation seed")
    e.add_argument("--out-dir", help=f"output directory (env {METRICS_ENV} overrides)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-robot", help="print mass, offsets and nominal height")
    i.add_argument("--robot", default="a1_ref", help="reference stand-in name or id")
    i.add_argument("--robots", help="robots.json to read instead of a stand-in")
    i.add_argument("--index", type=int, default=0, help="member index in --robots")
    i.set_defaults(func=cmd_inspect_robot)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, UnsupportedReference) as e:
        print(f"pal-loco {args.command}: error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"pal-loco {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
