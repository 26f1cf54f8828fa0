"""Parameter-selection agent: features, parameter decoding, PPO training.

The learned network only ever chooses :class:`~rlpomcp.pomcp.SolverParams`;
environment actions always come from the planner's action chain.
"""
from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import IppEnv, RewardNorm, shape_reward  # noqa: F401  (re-exported)
from .gp import KernelHyper
from .nn import (
    LOG_STD_BOUNDS,
    Adam,
    Mlp,
    gaussian_entropy,
    gaussian_log_prob,
    gaussian_policy,
    load_checkpoint,
    save_checkpoint,
    squash_correction,
)
from .objective import Objective, ObjectiveKind, ZMode
from .pomcp import DEPTH_RANGE, GAMMA_RANGE, ROLLOUT_RANGE, TTEST_RANGE, SenseLattice, SolverParams
from .world import BlobSpec, EpisodeConfig, SensingConfig, build_world

log = logging.getLogger(__name__)

HISTORY_LEN = 10
N_PARAMS = 4


class ConfigError(ValueError):
    pass


class FeatureVariant(enum.Enum):
    METADATA = "metadata"
    FIXED_LENGTH = "fixed_length"

    @property
    def n_features(self) -> int:
        return 7 if self is FeatureVariant.METADATA else 7 + 4 * HISTORY_LEN


@dataclass(frozen=True)
class Metadata:
    remaining_gc: int
    remaining_gc_frac: float
    remaining_steps: int
    remaining_steps_frac: float
    objective_onehot: tuple[float, float, float]
    initial_gc: int = 1
    initial_steps: int = 1

    @classmethod
    def from_env(cls, env: IppEnv) -> "Metadata":
        return cls(
            remaining_gc=env.remaining_gc,
            remaining_gc_frac=env.remaining_gc / env.gc_budget,
            remaining_steps=env.remaining_steps,
            remaining_steps_frac=env.remaining_steps / env.cfg.budget_steps,
            objective_onehot=tuple(env.kind.tag.onehot()),
            initial_gc=env.gc_budget,
            initial_steps=env.cfg.budget_steps,
        )


def featurize(meta: Metadata, history=(), variant: FeatureVariant = FeatureVariant.METADATA,
              lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), value_stats=(0.0, 1.0)) -> np.ndarray:
    """Metadata (7) or metadata plus the last ``HISTORY_LEN`` samples (47).

    History rows are ``(x, y, z, value)``: coordinates scaled into the unit
    cube, values standardized with ``value_stats = (mean, std)``. Missing
    rows are zero and come first.
    """
    base = [
        meta.remaining_gc / max(meta.initial_gc, 1),
        meta.remaining_gc_frac,
        meta.remaining_steps / max(meta.initial_steps, 1),
        meta.remaining_steps_frac,
        *meta.objective_onehot,
    ]
    if variant is FeatureVariant.METADATA:
        return np.array(base, dtype=float)
    lo = np.asarray(lo, dtype=float)
    extent = np.asarray(hi, dtype=float) - lo
    extent = np.where(extent > 0, extent, 1.0)
    rows = np.zeros((HISTORY_LEN, 4))
    recent = list(history)[-HISTORY_LEN:]
    mean, std = value_stats
    for i, (x, y) in enumerate(recent):
        rows[HISTORY_LEN - len(recent) + i, :3] = (np.asarray(x, dtype=float) - lo) / extent
        rows[HISTORY_LEN - len(recent) + i, 3] = (y - mean) / std
    return np.concatenate([base, rows.ravel()])


def env_features(env: IppEnv, variant: FeatureVariant) -> np.ndarray:
    return featurize(
        Metadata.from_env(env), env.samples[-HISTORY_LEN:], variant,
        env.world.lo, env.world.hi, env.value_mean_std,
    )


def decode_params(raw) -> SolverParams:
    """Map a raw action in [-1, 1]^4 onto the solver parameter ranges.

    Rollouts, gamma and depth are affine; the t-test threshold is log-uniform.
    """
    r = (np.clip(np.asarray(raw, dtype=float), -1.0, 1.0) + 1.0) / 2.0
    rollouts = int(math.floor(ROLLOUT_RANGE[0] + r[0] * (ROLLOUT_RANGE[1] - ROLLOUT_RANGE[0]) + 0.5))
    gamma = GAMMA_RANGE[0] + r[1] * (GAMMA_RANGE[1] - GAMMA_RANGE[0])
    log_lo, log_hi = math.log(TTEST_RANGE[0]), math.log(TTEST_RANGE[1])
    ttest = math.exp(log_lo + r[2] * (log_hi - log_lo))
    depth = int(math.floor(DEPTH_RANGE[0] + r[3] * (DEPTH_RANGE[1] - DEPTH_RANGE[0]) + 0.5))
    return SolverParams(
        num_rollouts=rollouts,
        gamma=float(min(max(gamma, GAMMA_RANGE[0]), GAMMA_RANGE[1])),
        ttest_value=min(max(ttest, TTEST_RANGE[0]), TTEST_RANGE[1]),
        max_depth=depth,
    )


# -- policy ------------------------------------------------------------------------


class ActorCritic:
    """Tanh-MLP policy mean with a state-independent log std, plus a separate value MLP."""

    def __init__(self, n_features: int, rng: np.random.Generator | None = None, hidden: int = 64,
                 init_log_std: float = -0.5):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_features = n_features
        self.pi = Mlp([n_features, hidden, hidden, N_PARAMS], rng, output_gain=0.01)
        self.log_std = np.full(N_PARAMS, float(init_log_std))
        self.vf = Mlp([n_features, hidden, hidden, 1], rng, output_gain=1.0)

    @property
    def policy_params(self) -> list[np.ndarray]:
        return self.pi.params + [self.log_std]

    def copy(self) -> "ActorCritic":
        out = ActorCritic.__new__(ActorCritic)
        out.n_features = self.n_features
        out.pi = self.pi.copy()
        out.log_std = self.log_std.copy()
        out.vf = self.vf.copy()
        return out

    def act(self, features, rng: np.random.Generator | None = None, deterministic: bool = False):
        """Returns ``(raw_action, pre_squash, log_prob, value)``."""
        mean, _ = self.pi.forward(features)
        value = float(self.vf.forward(features)[0][0])
        if deterministic or rng is None:
            u = mean.copy()
            a = np.tanh(u)
            logp = float(gaussian_log_prob(u, mean, self.log_std) - squash_correction(a))
            return a, u, logp, value
        a, u, logp, _ = gaussian_policy(mean, self.log_std, rng)
        return a, u, logp, value

    def mean_action(self, features) -> np.ndarray:
        return np.tanh(self.pi.forward(features)[0])

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"pi.{i}": p for i, p in enumerate(self.pi.params)}
        out["log_std"] = self.log_std
        out.update({f"vf.{i}": p for i, p in enumerate(self.vf.params)})
        return out

    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["pi_layers"] = self.pi.layer_sizes
        meta["vf_layers"] = self.vf.layer_sizes
        save_checkpoint(path, self.arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["ActorCritic", dict]:
        arrays, meta = load_checkpoint(path)
        out = cls.__new__(cls)
        out.pi = Mlp.__new__(Mlp)
        out.pi.layer_sizes = list(meta["pi_layers"])
        out.pi.params = [arrays[f"pi.{i}"] for i in range(2 * (len(out.pi.layer_sizes) - 1))]
        out.vf = Mlp.__new__(Mlp)
        out.vf.layer_sizes = list(meta["vf_layers"])
        out.vf.params = [arrays[f"vf.{i}"] for i in range(2 * (len(out.vf.layer_sizes) - 1))]
        out.log_std = arrays["log_std"]
        out.n_features = out.pi.layer_sizes[0]
        return out, meta


@dataclass
class Transition:
    features: np.ndarray
    raw_action: np.ndarray
    pre_squash: np.ndarray
    log_prob: float
    shaped_reward: float
    value_estimate: float
    done: bool
    env_reward: float = 0.0


def gae_advantages(trajectory, gamma_rl: float = 0.99, lam: float = 0.95, normalize: bool = True,
                   last_value: float = 0.0):
    """Generalized advantage estimates and value targets for concatenated episodes."""
    n = len(trajectory)
    adv = np.zeros(n)
    gae = 0.0
    next_value = last_value
    for t in range(n - 1, -1, -1):
        tr = trajectory[t]
        if tr.done:
            next_value, gae = 0.0, 0.0
        delta = tr.shaped_reward + gamma_rl * next_value - tr.value_estimate
        gae = delta + gamma_rl * lam * gae
        adv[t] = gae
        next_value = tr.value_estimate
    returns = adv + np.array([tr.value_estimate for tr in trajectory])
    if normalize and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


@dataclass(frozen=True)
class PpoHyper:
    clip_ratio: float = 0.2
    epochs: int = 4
    minibatch: int = 64
    lr: float = 3e-4
    entropy_coef: float = 0.0
    vf_coef: float = 1.0


@dataclass
class Batch:
    features: np.ndarray
    raw_action: np.ndarray
    pre_squash: np.ndarray
    log_prob: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.log_prob)

    def subset(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @classmethod
    def from_transitions(cls, trs, advantages, returns) -> "Batch":
        return cls(
            np.array([t.features for t in trs]),
            np.array([t.raw_action for t in trs]),
            np.array([t.pre_squash for t in trs]),
            np.array([t.log_prob for t in trs]),
            np.asarray(advantages, dtype=float),
            np.asarray(returns, dtype=float),
        )


def ppo_loss(ac: ActorCritic, batch: Batch, hyper: PpoHyper = PpoHyper(), surrogate: bool = True):
    """Loss and gradients for policy (incl. log std) and value parameters.

    With ``surrogate=False`` the policy term is the plain ``-mean(log_prob * advantage)``.
    """
    B = len(batch)
    mean, pi_cache = ac.pi.forward(batch.features)
    ls = ac.log_std
    inv_var = np.exp(-2.0 * ls)
    diff = batch.pre_squash - mean
    logp = gaussian_log_prob(batch.pre_squash, mean, ls) - squash_correction(batch.raw_action)
    A = batch.advantages
    if surrogate:
        ratio = np.exp(logp - batch.log_prob)
        clipped = np.clip(ratio, 1.0 - hyper.clip_ratio, 1.0 + hyper.clip_ratio)
        s1, s2 = ratio * A, clipped * A
        pi_loss = -np.mean(np.minimum(s1, s2))
        g_logp = -(A * ratio * (s1 <= s2)) / B
        clip_frac = float(np.mean(np.abs(ratio - 1.0) > hyper.clip_ratio))
    else:
        ratio = np.ones(B)
        pi_loss = -np.mean(logp * A)
        g_logp = -A / B
        clip_frac = 0.0
    entropy = gaussian_entropy(ls)
    pi_loss -= hyper.entropy_coef * entropy
    g_mean = g_logp[:, None] * diff * inv_var
    g_ls = (g_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) - hyper.entropy_coef
    pi_grads, _ = ac.pi.backward(pi_cache, g_mean)

    v, vf_cache = ac.vf.forward(batch.features)
    err = v[:, 0] - batch.returns
    vf_loss = 0.5 * hyper.vf_coef * float(np.mean(err * err))
    vf_grads, _ = ac.vf.backward(vf_cache, (hyper.vf_coef * err / B)[:, None])
    stats = dict(policy_loss=float(pi_loss), value_loss=vf_loss, ratio_mean=float(ratio.mean()),
                 clip_frac=clip_frac, entropy=entropy)
    return float(pi_loss) + vf_loss, pi_grads + [g_ls], vf_grads, stats


class PpoTrainer:
    def __init__(self, ac: ActorCritic, hyper: PpoHyper = PpoHyper()):
        self.ac = ac
        self.hyper = hyper
        self.pi_opt = Adam(ac.policy_params, lr=hyper.lr)
        self.vf_opt = Adam(ac.vf.params, lr=hyper.lr)

    def update(self, batch: Batch, rng: np.random.Generator) -> dict:
        h = self.hyper
        _, _, _, first = ppo_loss(self.ac, batch, h)
        sums = dict(policy_loss=0.0, value_loss=0.0, clip_frac=0.0, ratio_mean=0.0)
        n_mb = 0
        for _ in range(h.epochs):
            order = rng.permutation(len(batch))
            for start in range(0, len(batch), h.minibatch):
                mb = batch.subset(order[start : start + h.minibatch])
                _, pg, vg, st = ppo_loss(self.ac, mb, h)
                self.pi_opt.step(self.ac.policy_params, pg)
                np.clip(self.ac.log_std, *LOG_STD_BOUNDS, out=self.ac.log_std)
                self.vf_opt.step(self.ac.vf.params, vg)
                for key in sums:
                    sums[key] += st[key]
                n_mb += 1
        out = {k: v / max(n_mb, 1) for k, v in sums.items()}
        out["initial_ratio_mean"] = first["ratio_mean"]
        out["initial_clip_frac"] = first["clip_frac"]
        out["entropy"] = gaussian_entropy(self.ac.log_std)
        return out


def ppo_update(ac: ActorCritic, batch: Batch, hyper: PpoHyper = PpoHyper(), rng=None, trainer=None):
    """Functional wrapper: one PPO update; returns ``(ac, stats)``."""
    trainer = trainer if trainer is not None else PpoTrainer(ac, hyper)
    stats = trainer.update(batch, rng if rng is not None else np.random.default_rng(0))
    return trainer.ac, stats


# -- training ------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    n_workers: int = 8
    steps_per_worker: int = 50
    n_updates: int = 60
    variant: str = "metadata"
    objectives: tuple[str, ...] = ("ei",)
    z_mode: str = "variance"
    world_kind: str = "synthetic"
    dims: tuple[int, int, int] = (16, 16, 8)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    blob_count: tuple[int, int] = BlobSpec().count
    blob_amplitude: tuple[float, float] = BlobSpec().amplitude
    blob_width: tuple[float, float] = BlobSpec().width
    seed_samples: int = 5
    samples_per_edge: int = 4
    lengthscale_fraction: float = 0.12
    noise_variance: float = 1e-4
    signal_variance: float = 1.0
    prior_mean: float = 0.0
    observation_noise: float = 0.0
    warmup_episodes: int = 20
    gamma_rl: float = 0.99
    lam: float = 0.95
    ppo: PpoHyper = field(default_factory=PpoHyper)
    hidden: int = 64
    init_log_std: float = -0.5
    seed: int = 0
    n_jobs: int = 1

    def validate(self) -> None:
        if self.n_workers < 1 or self.steps_per_worker < 1 or self.n_updates < 0:
            raise ConfigError("n_workers and steps_per_worker must be >= 1, n_updates >= 0")
        if self.warmup_episodes < 0 or self.seed_samples < 0 or self.samples_per_edge < 1:
            raise ConfigError("invalid episode sizes")
        if not (0 < self.gamma_rl <= 1 and 0 <= self.lam <= 1):
            raise ConfigError("gamma_rl must be in (0, 1] and lam in [0, 1]")
        if not self.objectives:
            raise ConfigError("at least one objective is required")
        if len(self.dims) != 3 or min(self.dims) < 1 or len(self.spacing) != 3:
            raise ConfigError("dims and spacing need three entries")
        try:
            FeatureVariant(self.variant)
            for tag in self.objectives:
                ObjectiveKind.parse(tag, self.z_mode)
            KernelHyper(self.lengthscale_fraction, self.signal_variance, self.noise_variance, self.prior_mean)
            self.blob_spec
            if self.observation_noise < 0:
                raise ValueError("observation_noise must be >= 0")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @property
    def blob_spec(self) -> BlobSpec:
        return BlobSpec(tuple(self.blob_count), tuple(self.blob_amplitude), tuple(self.blob_width))

    def make_world(self, world_seed: int, kind: str | None = None):
        return build_world(kind or self.world_kind, world_seed, self.blob_spec, self.dims, self.spacing)

    def kernel_hyper(self, world) -> KernelHyper:
        return KernelHyper.for_extent(
            world.longest_axis, self.lengthscale_fraction,
            signal_variance=self.signal_variance, noise_variance=self.noise_variance, prior_mean=self.prior_mean,
        )

    def episode_config(self, env_seed: int, objective: str) -> EpisodeConfig:
        return EpisodeConfig(
            budget_steps=self.steps_per_worker,
            seed_samples=self.seed_samples,
            objective=ObjectiveKind.parse(objective, self.z_mode),
            rng_seed=env_seed,
            observation_noise=self.observation_noise,
        )

    def env_for(self, world, env_seed: int, objective: str, norm: RewardNorm = RewardNorm()) -> IppEnv:
        sensing = SensingConfig(self.samples_per_edge)
        return IppEnv(world, self.episode_config(env_seed, objective), self.kernel_hyper(world), sensing, norm,
                      lattice=SenseLattice.cached(world, sensing))

    def make_env(self, world_seed: int, env_seed: int, objective: str, norm: RewardNorm = RewardNorm()) -> IppEnv:
        return self.env_for(self.make_world(world_seed), env_seed, objective, norm)


def _seed_int(*words: int) -> int:
    return int(np.random.SeedSequence(list(words)).generate_state(1, np.uint64)[0] >> np.uint64(1))


def run_random_episode(cfg: TrainConfig, world_seed: int, env_seed: int, objective: str) -> list[float]:
    """Per-decision env rewards under uniformly random solver parameters."""
    env = cfg.make_env(world_seed, env_seed, objective)
    rng = np.random.default_rng(_seed_int(env_seed, 7))
    out = []
    while not env.done:
        out.append(env.step(decode_params(rng.uniform(-1.0, 1.0, N_PARAMS))).env_reward)
    return out


def estimate_reward_norms(cfg: TrainConfig) -> dict[str, RewardNorm]:
    norms = {}
    for oi, tag in enumerate(cfg.objectives):
        rewards = []
        for e in range(cfg.warmup_episodes):
            rewards += run_random_episode(cfg, _seed_int(cfg.seed, 3, oi, e), _seed_int(cfg.seed, 4, oi, e), tag)
        if rewards:
            sd = float(np.std(rewards))
            norms[tag] = RewardNorm(float(np.mean(rewards)), sd if sd > 1e-8 else 1.0)
        else:
            norms[tag] = RewardNorm()
    return norms


def collect_episode(args):
    """One worker episode with a stochastic policy snapshot; returns (transitions, env return)."""
    cfg, ac, norm, world_seed, env_seed, objective = args
    variant = FeatureVariant(cfg.variant)
    env = cfg.make_env(world_seed, env_seed, objective, norm)
    rng = np.random.default_rng(_seed_int(env_seed, 11))
    trs = []
    while not env.done:
        feats = env_features(env, variant)
        a, u, logp, value = ac.act(feats, rng)
        res = env.step(decode_params(a))
        trs.append(Transition(feats, a, u, logp, res.shaped_reward, value, res.done, res.env_reward))
    return trs, env.cumulative_env_reward


TRAIN_LOG_FIELDS = ("update", "mean_shaped_return", "mean_env_return", "policy_loss", "value_loss", "clip_frac", "entropy")


@dataclass
class TrainResult:
    policy: ActorCritic
    log: list[dict]
    norms: dict[str, RewardNorm]
    config: TrainConfig

    def checkpoint_meta(self) -> dict:
        return {
            "variant": self.config.variant,
            "objectives": list(self.config.objectives),
            "z_mode": self.config.z_mode,
            "norms": {k: [v.mu_obj, v.sigma_obj] for k, v in self.norms.items()},
            "seed": self.config.seed,
        }

    def save(self, path) -> None:
        self.policy.save(path, self.checkpoint_meta())


def train(cfg: TrainConfig, progress=None) -> TrainResult:
    """Warm up reward normalization, then alternate episode collection and PPO updates."""
    cfg.validate()
    variant = FeatureVariant(cfg.variant)
    norms = estimate_reward_norms(cfg) if cfg.n_updates > 0 else {t: RewardNorm() for t in cfg.objectives}
    ac = ActorCritic(variant.n_features, np.random.default_rng(_seed_int(cfg.seed, 5)), cfg.hidden, cfg.init_log_std)
    trainer = PpoTrainer(ac, cfg.ppo)
    shuffle_rng = np.random.default_rng(_seed_int(cfg.seed, 6))
    log_rows = []
    pool = ProcessPoolExecutor(cfg.n_jobs) if cfg.n_jobs > 1 else None
    try:
        for update in range(cfg.n_updates):
            jobs = []
            for w in range(cfg.n_workers):
                tag = cfg.objectives[(update * cfg.n_workers + w) % len(cfg.objectives)]
                jobs.append((cfg, ac, norms[tag], _seed_int(cfg.seed, 1, update, w), _seed_int(cfg.seed, 2, update, w), tag))
            results = list(pool.map(collect_episode, jobs)) if pool else [collect_episode(j) for j in jobs]
            trs, advs, rets = [], [], []
            for ep, _ in results:
                a, r = gae_advantages(ep, cfg.gamma_rl, cfg.lam, normalize=False)
                trs += ep
                advs.append(a)
                rets.append(r)
            adv = np.concatenate(advs)
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            batch = Batch.from_transitions(trs, adv, np.concatenate(rets))
            stats = trainer.update(batch, shuffle_rng)
            row = dict(
                update=update,
                mean_shaped_return=float(np.mean([sum(t.shaped_reward for t in ep) for ep, _ in results])),
                mean_env_return=float(np.mean([ret for _, ret in results])),
                policy_loss=stats["policy_loss"],
                value_loss=stats["value_loss"],
                clip_frac=stats["clip_frac"],
                entropy=stats["entropy"],
            )
            log_rows.append(row)
            log.info("update %d: shaped %.3f env %.3f", update, row["mean_shaped_return"], row["mean_env_return"])
            if progress:
                progress(row)
    finally:
        if pool:
            pool.shutdown()
    return TrainResult(ac, log_rows, norms, cfg)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
