"""Episodes, evaluation matrices, baselines and their CSV/SVG outputs.

Everything written to disk is a pure function of the configuration and the
master seed. Wall-clock timings are kept in their own file so the results
tables stay byte-for-byte reproducible.
"""
from __future__ import annotations

import csv
import enum
import io
import itertools
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .agent import (
    N_PARAMS,
    ActorCritic,
    ConfigError,
    FeatureVariant,
    TrainConfig,
    _seed_int,
    decode_params,
    env_features,
)
from .env import IppEnv, RewardNorm
from .nn import CheckpointError
from .pomcp import SenseLattice, SolverParams
from .world import EpisodeConfig, SensingConfig, WorldField, world_id

log = logging.getLogger(__name__)


class PolicyKind(enum.Enum):
    NAIVE_FIXED = "naive"
    RANDOM_PARAMS = "random"
    LEARNED_METADATA = "learned_metadata"
    LEARNED_FIXED_LENGTH = "learned_fixed_length"

    @property
    def learned(self) -> bool:
        return self in (PolicyKind.LEARNED_METADATA, PolicyKind.LEARNED_FIXED_LENGTH)


_VARIANT_OF = {
    PolicyKind.LEARNED_METADATA: FeatureVariant.METADATA,
    PolicyKind.LEARNED_FIXED_LENGTH: FeatureVariant.FIXED_LENGTH,
}


@dataclass(frozen=True)
class PolicySpec:
    kind: PolicyKind
    checkpoint: str | None = None
    fixed: SolverParams = field(default_factory=SolverParams)

    @classmethod
    def parse(cls, name: str, checkpoint: str | None = None, fixed: SolverParams | None = None) -> "PolicySpec":
        try:
            kind = PolicyKind(name)
        except ValueError:
            raise ConfigError(f"unknown policy {name!r}; expected one of {[k.value for k in PolicyKind]}") from None
        if kind.learned and not checkpoint:
            raise ConfigError(f"policy {name!r} needs a checkpoint")
        return cls(kind, checkpoint if kind.learned else None, fixed or SolverParams())

    @property
    def policy_id(self) -> str:
        return self.kind.value

    def resolve(self) -> "Controller":
        if self.kind is PolicyKind.NAIVE_FIXED:
            return FixedController(self.fixed)
        if self.kind is PolicyKind.RANDOM_PARAMS:
            return RandomController()
        ac, meta = ActorCritic.load(self.checkpoint)
        variant = _VARIANT_OF[self.kind]
        if meta.get("variant", variant.value) != variant.value or ac.n_features != variant.n_features:
            raise CheckpointError(
                f"{self.checkpoint}: trained as {meta.get('variant')!r} with {ac.n_features} features, "
                f"cannot serve {self.kind.value}"
            )
        norms = {tag: RewardNorm(mu, sd) for tag, (mu, sd) in meta.get("norms", {}).items()}
        return LearnedController(ac, variant, norms)


class Controller:
    """Chooses solver parameters once per planning decision."""

    norms: dict[str, RewardNorm] = {}

    def start(self, env_seed: int) -> None:
        pass

    def choose(self, env: IppEnv) -> SolverParams:
        raise NotImplementedError


class FixedController(Controller):
    def __init__(self, params: SolverParams):
        self.params = params

    def choose(self, env):
        return self.params


class RandomController(Controller):
    """Uniform raw actions pushed through the same decoder as the learned policy."""

    def start(self, env_seed):
        self.rng = np.random.default_rng(_seed_int(env_seed, 7))

    def choose(self, env):
        return decode_params(self.rng.uniform(-1.0, 1.0, N_PARAMS))


class LearnedController(Controller):
    """Deterministic: decodes the policy mean, no sampling at evaluation time."""

    def __init__(self, ac: ActorCritic, variant: FeatureVariant, norms: dict[str, RewardNorm]):
        self.ac, self.variant, self.norms = ac, variant, norms

    def choose(self, env):
        return decode_params(self.ac.mean_action(env_features(env, self.variant)))


# -- episode logs ----------------------------------------------------------------

LOG_COLUMNS = (
    "step", "decision", "head", "ix", "iy", "iz", "rollouts", "gamma", "ttest", "depth", "chain_length",
    "samples_added", "env_reward", "shaped_reward", "cumulative_env_reward", "generator_calls",
)
HEADER_KEYS = ("seed", "env_seed", "world_seed", "objective", "z_mode", "world", "policy", "budget_steps", "gc_budget",
               "mu_obj", "sigma_obj")
_INT_COLS = {"step", "decision", "head", "ix", "iy", "iz", "rollouts", "depth", "chain_length", "samples_added",
             "generator_calls"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class EpisodeLog:
    """Header plus one row per environment step.

    ``shaped_reward`` is set only on the first (head) row of each decision's
    chain; ``generator_calls`` is likewise charged once per plan.
    """

    header: dict
    rows: list[dict]

    @property
    def final_reward(self) -> float:
        return self.rows[-1]["cumulative_env_reward"] if self.rows else 0.0

    @property
    def total_generator_calls(self) -> int:
        return int(sum(r["generator_calls"] for r in self.rows))

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k in HEADER_KEYS:
            buf.write(f"# {k}={_fmt(self.header[k])}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in LOG_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EpisodeLog":
        lines = text.splitlines()
        header, body = {}, []
        for ln in lines:
            if ln.startswith("# "):
                k, _, v = ln[2:].partition("=")
                header[k] = v
            else:
                body.append(ln)
        for k in ("seed", "env_seed", "world_seed", "budget_steps", "gc_budget"):
            header[k] = int(header[k])
        for k in ("mu_obj", "sigma_obj"):
            header[k] = float(header[k])
        rows = []
        for rec in csv.DictReader(body):
            row = {}
            for c in LOG_COLUMNS:
                v = rec[c]
                row[c] = None if v == "" else int(v) if c in _INT_COLS else float(v)
            rows.append(row)
        return cls(header, rows)

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "EpisodeLog":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))

    @property
    def file_stem(self) -> str:
        h = self.header
        return f"{h['world']}_{h['objective']}_{h['policy']}_s{h['seed']}"


def run_episode(
    world: WorldField,
    spec: PolicySpec,
    cfg: EpisodeConfig,
    env_spec: TrainConfig = TrainConfig(),
    *,
    world_name: str = "synthetic",
    world_seed: int = 0,
    label: int | None = None,
    controller: Controller | None = None,
    norm: RewardNorm | None = None,
) -> EpisodeLog:
    """Run one full episode; deterministic in ``(cfg.rng_seed, spec, world)``.

    The reward normalization comes from ``norm``, else from the learned
    checkpoint's stored statistics for this objective, else identity.
    """
    ctl = controller if controller is not None else spec.resolve()
    tag = cfg.objective.tag.value
    if norm is None:
        norm = ctl.norms.get(tag, RewardNorm())
    sensing = SensingConfig(env_spec.samples_per_edge)
    env = IppEnv(world, cfg, env_spec.kernel_hyper(world), sensing, norm, lattice=SenseLattice.cached(world, sensing))
    ctl.start(cfg.rng_seed)
    rows = []
    while not env.done:
        params = ctl.choose(env)
        res = env.step(params)
        for rec in res.steps:
            rows.append(dict(
                step=rec.step, decision=rec.decision, head=int(rec.head),
                ix=rec.cell[0], iy=rec.cell[1], iz=rec.cell[2],
                rollouts=rec.params.num_rollouts, gamma=float(rec.params.gamma),
                ttest=float(rec.params.ttest_value), depth=rec.params.max_depth,
                chain_length=rec.chain_length, samples_added=rec.samples_added,
                env_reward=float(rec.env_reward),
                shaped_reward=float(rec.shaped_reward) if rec.head else None,
                cumulative_env_reward=float(rec.cumulative_env_reward),
                generator_calls=int(rec.generator_calls),
            ))
    header = dict(
        seed=cfg.rng_seed if label is None else label, env_seed=cfg.rng_seed, world_seed=world_seed, objective=tag, z_mode=cfg.objective.z_mode.value,
        world=world_name, policy=spec.policy_id, budget_steps=cfg.budget_steps, gc_budget=env.gc_budget,
        mu_obj=float(norm.mu_obj), sigma_obj=float(norm.sigma_obj),
    )
    return EpisodeLog(header, rows)


# -- experiment matrices --------------------------------------------------------


@dataclass(frozen=True)
class ExperimentMatrix:
    worlds: tuple[str, ...]
    objectives: tuple[str, ...]
    policies: tuple[PolicySpec, ...]
    n_seeds: int

    def __post_init__(self):
        if not (self.worlds and self.objectives and self.policies) or self.n_seeds < 1:
            raise ConfigError("experiment matrix must be non-empty")
        ids = [p.policy_id for p in self.policies]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate policies in matrix: {ids}")

    def cells(self):
        return list(itertools.product(range(len(self.worlds)), self.objectives, range(len(self.policies)),
                                      range(self.n_seeds)))


def cell_seeds(master_seed: int, world_index: int, seed_index: int) -> tuple[int, int]:
    """(world seed, episode seed); disjoint from the streams training draws from."""
    return _seed_int(master_seed, 31, world_index, seed_index), _seed_int(master_seed, 32, world_index, seed_index)


RESULT_COLUMNS = ("world", "objective", "policy", "seed", "final_cumulative_reward", "total_generator_calls",
                  "steps", "status", "error")
AGGREGATE_COLUMNS = ("world", "objective", "policy", "n", "mean", "std", "min", "max")
SIGN_COLUMNS = ("world", "objective", "policy", "baseline", "wins", "losses", "ties", "p_value")
TIMING_COLUMNS = ("world", "objective", "policy", "seed", "wall_seconds")


@dataclass
class ExperimentResult:
    rows: list[dict]
    logs: list[EpisodeLog]
    timings: list[dict]
    aggregates: list[dict] = field(default_factory=list)
    sign_tests: list[dict] = field(default_factory=list)


def _run_cell(args):
    matrix, env_spec, master_seed, cell, norms = args
    wi, objective, pi, si = cell
    spec = matrix.policies[pi]
    kind = matrix.worlds[wi]
    name = world_id(kind)
    world_seed, env_seed = cell_seeds(master_seed, wi, si)
    key = dict(world=name, objective=objective, policy=spec.policy_id, seed=si)
    t0 = time.perf_counter()
    try:
        world = env_spec.make_world(world_seed, kind)
        ep = run_episode(world, spec, env_spec.episode_config(env_seed, objective), env_spec,
                         world_name=name, world_seed=world_seed, label=si, norm=norms.get(objective))
        row = dict(key, final_cumulative_reward=float(ep.final_reward), total_generator_calls=ep.total_generator_calls,
                   steps=len(ep.rows), status="ok", error="")
    except Exception as exc:  # keep going; the failing cell is reported in its row
        log.error("cell %s failed: %s", key, exc)
        log.debug("%s", traceback.format_exc())
        ep = None
        row = dict(key, final_cumulative_reward=None, total_generator_calls=None, steps=0, status="error",
                   error=f"{type(exc).__name__}: {exc}".replace("\n", " "))
    return row, ep, dict(key, wall_seconds=time.perf_counter() - t0)


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean, sample std, min and max of the final reward per (world, objective, policy)."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault((r["world"], r["objective"], r["policy"]), []).append(r["final_cumulative_reward"])
    out = []
    for (w, o, p), vals in groups.items():
        v = np.array(vals)
        out.append(dict(world=w, objective=o, policy=p, n=len(v), mean=float(v.mean()),
                        std=float(v.std(ddof=1)) if len(v) > 1 else 0.0, min=float(v.min()), max=float(v.max())))
    return out


def sign_test(rows: list[dict], policy: str, baseline: str, world: str | None = None,
              objective: str | None = None) -> dict:
    """One-sided paired sign test that ``policy`` beats ``baseline`` per seed (ties dropped)."""
    def finals(p):
        return {(r["world"], r["objective"], r["seed"]): r["final_cumulative_reward"] for r in rows
                if r["policy"] == p and r["status"] == "ok"
                and (world is None or r["world"] == world) and (objective is None or r["objective"] == objective)}

    a, b = finals(policy), finals(baseline)
    keys = sorted(set(a) & set(b))
    wins = sum(a[k] > b[k] for k in keys)
    losses = sum(a[k] < b[k] for k in keys)
    ties = len(keys) - wins - losses
    p = float(binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue) if wins + losses else 1.0
    return dict(world=world or "*", objective=objective or "*", policy=policy, baseline=baseline,
                wins=wins, losses=losses, ties=ties, p_value=p)


def shared_norms(policies) -> dict[str, RewardNorm]:
    """Reward normalization every policy is logged under: the first learned checkpoint's, if any."""
    for spec in policies:
        if spec.kind.learned:
            return spec.resolve().norms
    return {}


def run_experiment(matrix: ExperimentMatrix, env_spec: TrainConfig = TrainConfig(), master_seed: int = 0,
                   n_jobs: int = 1, baseline: str = "random") -> ExperimentResult:
    """Run every cell (failures are recorded, not raised), then aggregate and sign-test against ``baseline``."""
    cells = matrix.cells()
    norms = shared_norms(matrix.policies)
    jobs = [(matrix, env_spec, master_seed, c, norms) for c in cells]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            out = list(pool.map(_run_cell, jobs))
    else:
        out = [_run_cell(j) for j in jobs]
    rows = [o[0] for o in out]
    result = ExperimentResult(rows, [o[1] for o in out if o[1] is not None], [o[2] for o in out])
    result.aggregates = aggregate(rows)
    ids = [p.policy_id for p in matrix.policies]
    base = baseline if baseline in ids else ids[0]
    for kind in matrix.worlds:
        for obj in matrix.objectives:
            for pid in ids:
                if pid != base:
                    result.sign_tests.append(sign_test(rows, pid, base, world_id(kind), obj))
    return result


# -- outputs ---------------------------------------------------------------------


class NoData(Exception):
    pass


def _write_table(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_table(path) -> list[dict]:
    """Inverse of the CSV writers: numbers come back as int/float, blanks as None."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if v == "":
                    row[k] = "" if k == "error" else None
                    continue
                try:
                    row[k] = int(v)
                except ValueError:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = v
            out.append(row)
    return out


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "rlpomcp"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_cumulative(logs: list[EpisodeLog], path) -> None:
    """Mean cumulative reward per policy with a min/max band, one panel per objective."""
    plt = _pyplot()
    objectives = sorted({lg.header["objective"] for lg in logs})
    fig, axes = plt.subplots(1, len(objectives), figsize=(5 * len(objectives), 3.6), squeeze=False)
    for ax, obj in zip(axes[0], objectives):
        by_policy: dict[str, list[np.ndarray]] = {}
        for lg in logs:
            if lg.header["objective"] == obj:
                by_policy.setdefault(lg.header["policy"], []).append(lg.column("cumulative_env_reward"))
        for pol in sorted(by_policy):
            curves = by_policy[pol]
            n = min(len(c) for c in curves)
            stack = np.array([c[:n] for c in curves])
            steps = np.arange(1, n + 1)
            line, = ax.plot(steps, stack.mean(axis=0), label=f"{pol} (n={len(curves)})")
            ax.fill_between(steps, stack.min(axis=0), stack.max(axis=0), alpha=0.2, color=line.get_color())
        ax.set_title(obj)
        ax.set_xlabel("environment step")
        ax.set_ylabel("cumulative reward")
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save_svg(fig, Path(path))
    plt.close(fig)


def plot_parameters(logs: list[EpisodeLog], path) -> None:
    """Per-step solver parameters, averaged over episodes, for each policy."""
    plt = _pyplot()
    names = (("rollouts", "rollouts"), ("gamma", "gamma"), ("ttest", "t-test threshold"), ("depth", "depth"))
    fig, axes = plt.subplots(1, 4, figsize=(16, 3.4))
    policies = sorted({lg.header["policy"] for lg in logs})
    for ax, (col, label) in zip(axes, names):
        for pol in policies:
            curves = [lg.column(col) for lg in logs if lg.header["policy"] == pol]
            n = min(len(c) for c in curves)
            ax.plot(np.arange(1, n + 1), np.mean([c[:n] for c in curves], axis=0), label=pol)
        if col == "ttest":
            ax.set_yscale("log")
        ax.set_title(label)
        ax.set_xlabel("environment step")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    _save_svg(fig, Path(path))
    plt.close(fig)


@dataclass
class EmitReport:
    files: list[Path]
    notice: str = ""


def emit_outputs(logs: list[EpisodeLog], result: ExperimentResult | None, out_dir) -> EmitReport:
    """Write episode CSVs, results/aggregate/sign-test/timing tables and both plots.

    Nothing is written when there are no episodes; the report then carries a
    ``NoData`` notice instead.
    """
    if not logs:
        msg = "NoData: no episode logs to write"
        log.warning(msg)
        return EmitReport([], msg)
    out = Path(out_dir)
    ep_dir = out / "episodes"
    ep_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for lg in logs:
        p = ep_dir / f"{lg.file_stem}.csv"
        lg.write(p)
        files.append(p)
    if result is not None:
        for name, cols, rows in (
            ("results.csv", RESULT_COLUMNS, result.rows),
            ("aggregate.csv", AGGREGATE_COLUMNS, result.aggregates),
            ("sign_tests.csv", SIGN_COLUMNS, result.sign_tests),
            ("timing.csv", TIMING_COLUMNS, result.timings),
        ):
            _write_table(out / name, cols, rows)
            files.append(out / name)
    files += write_plots(logs, out)
    return EmitReport(files)


def write_plots(logs: list[EpisodeLog], out_dir) -> list[Path]:
    if not logs:
        raise NoData("no episode logs to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plot_cumulative(logs, out / "cumulative_reward.svg")
    plot_parameters(logs, out / "parameters.svg")
    return [out / "cumulative_reward.svg", out / "parameters.svg"]


def load_logs(directory) -> list[EpisodeLog]:
    d = Path(directory)
    ep_dir = d / "episodes" if (d / "episodes").is_dir() else d
    return [EpisodeLog.read(p) for p in sorted(ep_dir.glob("*.csv"))]


def shaped_reward_check(lg: EpisodeLog) -> float:
    """Largest deviation between logged shaped rewards and the formula recomputed from the log."""
    h = lg.header
    norm = RewardNorm(h["mu_obj"], h["sigma_obj"])
    worst = 0.0
    by_decision: dict[int, float] = {}
    for r in lg.rows:
        by_decision[r["decision"]] = by_decision.get(r["decision"], 0.0) + r["env_reward"]
    for r in lg.rows:
        if r["head"]:
            z = (by_decision[r["decision"]] - norm.mu_obj) / norm.sigma_obj
            expect = min(max(z, -norm.clip), norm.clip) + norm.b_survival - norm.p_gen * r["generator_calls"]
            worst = max(worst, abs(expect - r["shaped_reward"]))
    return worst if math.isfinite(worst) else math.inf
