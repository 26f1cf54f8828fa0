"""The parameter-selection MDP environment.

One :meth:`IppEnv.step` is one agent decision: plan with the given solver
parameters, execute the resulting action chain in the world (truncated at
the step budget), sense, and condition the GP on the real measurements.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gp import GpModel, KernelHyper
from .objective import ImprovementState, ObjectiveKind, score_many
from .pomcp import IppSimulator, PosteriorTable, SenseLattice, SolverParams, plan
from .world import (
    EpisodeConfig,
    IllegalMove,
    RobotPose,
    SensingConfig,
    WorldField,
    apply_action,
    observe,
    random_pose,
    sense_path,
)

B_SURVIVAL = 1.0
P_GEN = 1e-5
REWARD_CLIP = 3.0
# remaining-generator-call budget: this fraction of budget_steps * max rollouts * max depth
GC_BUDGET_FRACTION = 0.3


@dataclass(frozen=True)
class RewardNorm:
    mu_obj: float = 0.0
    sigma_obj: float = 1.0
    b_survival: float = B_SURVIVAL
    p_gen: float = P_GEN
    clip: float = REWARD_CLIP

    def __post_init__(self):
        if not self.sigma_obj > 0:
            raise ValueError(f"sigma_obj must be positive, got {self.sigma_obj}")


def shape_reward(r_env: float, gc: int, norm: RewardNorm = RewardNorm()) -> float:
    z = (r_env - norm.mu_obj) / norm.sigma_obj
    return float(np.clip(z, -norm.clip, norm.clip)) + norm.b_survival - norm.p_gen * gc


def env_reward(kind: ObjectiveKind, model: GpModel, state: ImprovementState, xs, ys) -> float:
    """Objective summed over a batch, using the measured values in place of the GP mean."""
    if len(xs) == 0:
        return 0.0
    _, var = model.predict_many(xs)
    return float(np.sum(score_many(kind, np.asarray(ys, dtype=float), var, state.best_mean)))


def default_gc_budget(budget_steps: int) -> int:
    return int(round(GC_BUDGET_FRACTION * budget_steps * 300 * 15))


@dataclass
class StepRecord:
    step: int
    decision: int
    head: bool
    cell: tuple[int, int, int]
    params: SolverParams
    chain_length: int
    samples_added: int
    env_reward: float
    cumulative_env_reward: float
    decision_env_reward: float = 0.0
    shaped_reward: float = 0.0
    generator_calls: int = 0


@dataclass
class DecisionResult:
    shaped_reward: float
    env_reward: float
    generator_calls: int
    steps: list[StepRecord] = field(default_factory=list)
    done: bool = False


class IppEnv:
    """Episode state: world, pose, GP belief, improvement state and budgets."""

    def __init__(
        self,
        world: WorldField,
        cfg: EpisodeConfig,
        hyper: KernelHyper | None = None,
        sensing: SensingConfig = SensingConfig(),
        norm: RewardNorm = RewardNorm(),
        gc_budget: int | None = None,
        lattice: SenseLattice | None = None,
    ):
        self.world = world
        self.cfg = cfg
        self.kind = cfg.objective
        self.hyper = hyper if hyper is not None else KernelHyper.for_extent(world.longest_axis)
        self.sensing = sensing
        self.norm = norm
        self.gc_budget = gc_budget if gc_budget is not None else default_gc_budget(cfg.budget_steps)
        self.lattice = lattice if lattice is not None else SenseLattice(world, sensing)
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.reset()

    def reset(self) -> None:
        rng = self.rng
        self.pose: RobotPose = random_pose(self.world, rng)
        model = GpModel.for_bounds(self.hyper, self.world.lo, self.world.hi)
        seeds = np.array([self.world.random_point(rng) for _ in range(self.cfg.seed_samples)]).reshape(-1, 3)
        obs = observe(self.world, seeds, self.cfg.observation_noise, rng)
        self.model = model.condition(obs)
        if len(seeds):
            self.state = ImprovementState().update(self.model.predict_many(seeds)[0])
        else:
            self.state = ImprovementState(self.hyper.prior_mean)
        self.table = PosteriorTable(self.model, self.lattice, capacity=self.cfg.seed_samples + self.cfg.budget_steps * self.sensing.samples_per_edge)
        self.samples: list[tuple[np.ndarray, float]] = list(obs)
        self.steps_taken = 0
        self.decisions = 0
        self.gc_used = 0
        self.cumulative_env_reward = 0.0
        self._value_stats = [0, 0.0, 0.0]  # Welford over observed values
        for _, y in obs:
            self._track_value(y)

    def _track_value(self, y: float) -> None:
        st = self._value_stats
        st[0] += 1
        d = y - st[1]
        st[1] += d / st[0]
        st[2] += d * (y - st[1])

    @property
    def value_mean_std(self) -> tuple[float, float]:
        n, mean, m2 = self._value_stats
        std = (m2 / n) ** 0.5 if n > 1 else 0.0
        return mean, (std if std > 1e-12 else 1.0)

    @property
    def remaining_steps(self) -> int:
        return self.cfg.budget_steps - self.steps_taken

    @property
    def remaining_gc(self) -> int:
        return max(self.gc_budget - self.gc_used, 0)

    @property
    def done(self) -> bool:
        return self.remaining_steps <= 0

    def step(self, params: SolverParams) -> DecisionResult:
        if self.done:
            raise RuntimeError("episode is over")
        sim = IppSimulator(self.table, self.kind)
        result = plan(sim, sim.root_belief(self.pose, self.state), params, self.rng)
        chain = result.actions[: self.remaining_steps]
        gc = result.generator_calls
        self.gc_used += gc

        records = []
        decision_reward = 0.0
        for a in chain:
            try:
                nxt = apply_action(self.pose, a, self.world)
            except IllegalMove:
                # planner bug guard: a no-op step with no samples
                nxt = None
            if nxt is None:
                r, n_new = 0.0, 0
            else:
                xs = sense_path(self.sensing, self.pose, nxt, self.world)
                obs = observe(self.world, xs, self.cfg.observation_noise, self.rng)
                ys = [y for _, y in obs]
                r = env_reward(self.kind, self.model, self.state, xs, ys)
                self.model = self.model.condition(obs)
                self.state = self.state.update(self.model.predict_many(xs)[0])
                self.samples.extend(obs)
                for y in ys:
                    self._track_value(y)
                self.pose = nxt
                n_new = len(obs)
            self.cumulative_env_reward += r
            decision_reward += r
            records.append(
                StepRecord(
                    step=self.steps_taken,
                    decision=self.decisions,
                    head=not records,
                    cell=self.pose.cell,
                    params=params,
                    chain_length=len(chain),
                    samples_added=n_new,
                    env_reward=r,
                    cumulative_env_reward=self.cumulative_env_reward,
                )
            )
            self.steps_taken += 1
        self.table = self.table.update(self.model)
        shaped = shape_reward(decision_reward, gc, self.norm)
        head = records[0]
        head.decision_env_reward = decision_reward
        head.shaped_reward = shaped
        head.generator_calls = gc
        self.decisions += 1
        return DecisionResult(shaped, decision_reward, gc, records, self.done)
