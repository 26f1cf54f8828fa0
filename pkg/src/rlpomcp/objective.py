"""Per-location rewards computed from GP predictions.

Entropy rewards coverage; expected and probability of improvement reward
finding values above the best posterior mean seen so far.

The improvement Z-score has two conventions. ``ZMode.PAPER_VARIANCE``
divides the improvement by the predictive variance, ``ZMode.STANDARD_DEVIATION``
by the standard deviation (the usual Bayesian-optimization form). They agree
exactly when the variance is 1.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

VAR_FLOOR = 1e-12
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LOG_2PIE = math.log(2.0 * math.pi * math.e)


class Objective(enum.Enum):
    # member order is the one-hot order used by the agent features
    ENTROPY = "entropy"
    EXPECTED_IMPROVEMENT = "ei"
    PROBABILITY_OF_IMPROVEMENT = "pi"

    def onehot(self) -> np.ndarray:
        v = np.zeros(len(Objective))
        v[list(Objective).index(self)] = 1.0
        return v


class ZMode(enum.Enum):
    PAPER_VARIANCE = "variance"
    STANDARD_DEVIATION = "std"


@dataclass(frozen=True)
class ObjectiveKind:
    tag: Objective = Objective.EXPECTED_IMPROVEMENT
    z_mode: ZMode = ZMode.PAPER_VARIANCE

    @classmethod
    def parse(cls, tag: str, z_mode: str = "variance") -> "ObjectiveKind":
        return cls(Objective(tag), ZMode(z_mode))


@dataclass(frozen=True)
class ImprovementState:
    """Running maximum of posterior means at sensed locations."""

    best_mean: float = -math.inf

    def update(self, means) -> "ImprovementState":
        means = np.asarray(means, dtype=float)
        if means.size == 0:
            return self
        return ImprovementState(max(self.best_mean, float(means.max())))


def std_normal(z: float) -> tuple[float, float]:
    """Standard normal (cdf, pdf) at ``z``."""
    return 0.5 * math.erfc(-z / _SQRT2), _INV_SQRT_2PI * math.exp(-0.5 * z * z)


def improvement_z(pred, state: ImprovementState, mode: ZMode = ZMode.PAPER_VARIANCE) -> tuple[float, float]:
    improvement = pred.mean - state.best_mean
    if mode is ZMode.PAPER_VARIANCE:
        return improvement, improvement / pred.variance
    return improvement, improvement / math.sqrt(pred.variance)


def entropy_score(pred) -> float:
    return 0.5 * (_LOG_2PIE + math.log(max(pred.variance, VAR_FLOOR)))


def prob_improvement(pred, state: ImprovementState, mode: ZMode = ZMode.PAPER_VARIANCE) -> float:
    if pred.variance <= VAR_FLOOR:
        return 1.0 if pred.mean - state.best_mean > 0 else 0.0
    _, z = improvement_z(pred, state, mode)
    return std_normal(z)[0]


def expected_improvement(pred, state: ImprovementState, mode: ZMode = ZMode.PAPER_VARIANCE) -> float:
    if pred.variance <= VAR_FLOOR:
        return max(pred.mean - state.best_mean, 0.0)
    improvement, z = improvement_z(pred, state, mode)
    cdf, pdf = std_normal(z)
    # I*cdf + sigma*pdf can round to a hair below zero deep in the left tail
    return max(improvement * cdf + math.sqrt(pred.variance) * pdf, 0.0)


def score(kind: ObjectiveKind, pred, state: ImprovementState) -> float:
    if kind.tag is Objective.ENTROPY:
        return entropy_score(pred)
    if kind.tag is Objective.EXPECTED_IMPROVEMENT:
        return expected_improvement(pred, state, kind.z_mode)
    return prob_improvement(pred, state, kind.z_mode)


def score_many(kind: ObjectiveKind, means, variances, best_mean: float) -> np.ndarray:
    """Vectorized :func:`score` over arrays of predictions sharing one state."""
    means = np.asarray(means, dtype=float)
    var = np.asarray(variances, dtype=float)
    if kind.tag is Objective.ENTROPY:
        return 0.5 * (_LOG_2PIE + np.log(np.maximum(var, VAR_FLOOR)))
    improvement = means - best_mean
    degenerate = var <= VAR_FLOOR
    safe_var = np.where(degenerate, 1.0, var)
    sd = np.sqrt(safe_var)
    z = improvement / (safe_var if kind.z_mode is ZMode.PAPER_VARIANCE else sd)
    cdf = 0.5 * erfc(-z / _SQRT2)
    if kind.tag is Objective.PROBABILITY_OF_IMPROVEMENT:
        return np.where(degenerate, (improvement > 0).astype(float), cdf)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    ei = np.maximum(improvement * cdf + sd * pdf, 0.0)
    return np.where(degenerate, np.maximum(improvement, 0.0), ei)


def aggregate_path(kind: ObjectiveKind, model, state: ImprovementState, points) -> float:
    """Sum of per-point scores, all evaluated against the same (pre-batch) model."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return 0.0
    means, var = model.predict_many(pts)
    return float(np.sum(score_many(kind, means, var, state.best_mean)))
