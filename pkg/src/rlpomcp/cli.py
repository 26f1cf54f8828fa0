"""Command line entry point: ``python -m rlpomcp {train,eval,episode,plot}``.

Failures exit nonzero after printing one JSON line on stderr::

    {"error": "ConfigError", "message": "..."}
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .agent import TRAIN_LOG_FIELDS, ConfigError, train
from .config import dump_config, load_config
from .harness import (
    ExperimentMatrix,
    NoData,
    PolicySpec,
    cell_seeds,
    emit_outputs,
    load_logs,
    run_episode,
    run_experiment,
    shared_norms,
    write_plots,
)
from .nn import CheckpointError
from .world import WorldError, world_id

log = logging.getLogger("rlpomcp")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat YAML file of dotted keys (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=0, help="master seed; all randomness derives from it")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rlpomcp", description="Learned parameter selection for POMCP path planning")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a parameter-selection policy with PPO")
    _common(p)

    p = sub.add_parser("eval", help="run the harness.* evaluation matrix")
    _common(p)
    p.add_argument("--checkpoint", help="overrides harness.checkpoint")

    p = sub.add_parser("episode", help="run and log a single episode")
    _common(p)
    p.add_argument("--policy", default="naive", help="naive | random | learned_metadata | learned_fixed_length")
    p.add_argument("--objective", default=None, help="entropy | ei | pi (default: first of harness.objectives)")
    p.add_argument("--checkpoint", help="overrides harness.checkpoint")

    p = sub.add_parser("plot", help="redraw SVG plots from episode CSVs")
    p.add_argument("--config", help="accepted for symmetry; unused")
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; unused")
    p.add_argument("--out", required=True, help="directory holding episodes/*.csv; plots are written here")
    p.add_argument("--logs", help="read episode CSVs from this directory instead of --out")
    return ap


def _write_train_log(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_LOG_FIELDS)
        for r in rows:
            w.writerow([r["update"], *(repr(float(r[k])) for k in TRAIN_LOG_FIELDS[1:])])


def cmd_train(args) -> int:
    rc = load_config(args.config)
    cfg = rc.train_config(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(rc), encoding="utf-8")
    log_path = out / "train_log.csv"

    def progress(row):
        log.info("update %d/%d  shaped %.3f  env %.3f", row["update"] + 1, cfg.n_updates,
                 row["mean_shaped_return"], row["mean_env_return"])

    result = train(cfg, progress)
    _write_train_log(log_path, result.log)
    result.save(out / "policy.ckpt")
    print(json.dumps({"checkpoint": str(out / "policy.ckpt"), "train_log": str(log_path), "updates": len(result.log)}))
    return 0


def _policies(rc, names, checkpoint):
    ckpt = checkpoint or rc["harness.checkpoint"]
    return tuple(PolicySpec.parse(n, ckpt, rc.naive_params()) for n in names)


def cmd_eval(args) -> int:
    rc = load_config(args.config)
    env_spec = rc.train_config(args.seed)
    matrix = ExperimentMatrix((rc["world.kind"],), tuple(rc["harness.objectives"]),
                              _policies(rc, rc["harness.policies"], args.checkpoint), rc["harness.n_seeds"])
    result = run_experiment(matrix, env_spec, args.seed, n_jobs=rc["harness.n_jobs"])
    report = emit_outputs(result.logs, result, args.out)
    if report.notice:
        print(json.dumps({"notice": report.notice}))
    for a in result.aggregates:
        print(f"{a['objective']:8s} {a['policy']:22s} n={a['n']:3d} mean={a['mean']:.4f} std={a['std']:.4f}")
    for t in result.sign_tests:
        print(f"sign test {t['objective']}: {t['policy']} vs {t['baseline']}: "
              f"{t['wins']} wins, {t['losses']} losses, {t['ties']} ties, p={t['p_value']:.4g}")
    failed = [r for r in result.rows if r["status"] != "ok"]
    if failed:
        print(json.dumps({"error": "CellFailures", "message": f"{len(failed)} of {len(result.rows)} cells failed"}),
              file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def cmd_episode(args) -> int:
    rc = load_config(args.config)
    env_spec = rc.train_config(args.seed)
    spec = _policies(rc, [args.policy], args.checkpoint)[0]
    objective = args.objective or rc["harness.objectives"][0]
    kind = rc["world.kind"]
    world_seed, env_seed = cell_seeds(args.seed, 0, 0)
    try:
        ep_cfg = env_spec.episode_config(env_seed, objective)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ep = run_episode(env_spec.make_world(world_seed, kind), spec, ep_cfg, env_spec,
                     world_name=world_id(kind), world_seed=world_seed, label=args.seed,
                     norm=shared_norms([spec]).get(objective))
    emit_outputs([ep], None, args.out)
    print(json.dumps({"episode": str(Path(args.out) / "episodes" / f"{ep.file_stem}.csv"),
                      "final_cumulative_reward": ep.final_reward,
                      "generator_calls": ep.total_generator_calls}))
    return 0


def cmd_plot(args) -> int:
    logs = load_logs(args.logs or args.out)
    files = write_plots(logs, args.out)
    print(json.dumps({"plots": [str(f) for f in files]}))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "episode": cmd_episode, "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, WorldError) as exc:
        code = EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_RUNTIME
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return code
    except NoData as exc:
        print(json.dumps({"error": "NoData", "message": str(exc)}), file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(json.dumps({"error": "IoError", "message": str(exc)}), file=sys.stderr)
        return EXIT_RUNTIME
