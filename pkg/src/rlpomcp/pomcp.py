"""POMCP over the GP belief, with a t-test rule for multi-step plans.

Observations inside the tree are the GP posterior mean, so every simulated
transition is deterministic given the action sequence. Conditioning a GP on
its own mean leaves the mean unchanged everywhere; only the variance moves.
:class:`IppSimulator` exploits this: it keeps the base posterior over every
lattice sense point in a :class:`PosteriorTable` and carries a small
path-local Cholesky factor in each :class:`Belief`.

The planner itself only needs an object with ``legal_actions(belief)``,
``step(belief, action)`` and a ``generator_calls`` counter, so toy
simulators work too.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Any, Hashable, Sequence

import numpy as np
from numba import njit
from scipy.linalg import solve_triangular
from scipy.special import betainc

from .gp import GpModel, NumericalFailure
from .objective import VAR_FLOOR, ImprovementState, Objective, ObjectiveKind, ZMode
from .world import Action, IllegalMove, RobotPose, SensingConfig, WorldField

ROLLOUT_RANGE = (10, 300)
GAMMA_RANGE = (0.1, 0.99)
TTEST_RANGE = (1e-3, 0.4)
DEPTH_RANGE = (3, 15)


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True)
class SolverParams:
    """Planner settings.

    ``bounded=False`` lifts the learned-parameter ranges (keeping only basic
    sanity limits) for solver studies such as large-rollout oracle runs.
    """

    num_rollouts: int = 100
    gamma: float = 0.9
    ttest_value: float = 0.05
    max_depth: int = 8
    bounded: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        if self.bounded:
            ranges = (ROLLOUT_RANGE, GAMMA_RANGE, TTEST_RANGE, DEPTH_RANGE)
        else:
            ranges = ((1, math.inf), (0.0, 1.0), (0.0, 1.0), (1, math.inf))
        checks = zip(("num_rollouts", "gamma", "ttest_value", "max_depth"),
                     (self.num_rollouts, self.gamma, self.ttest_value, self.max_depth), ranges)
        for name, val, (lo, hi) in checks:
            if not lo <= val <= hi:
                raise ValueError(f"{name}={val} outside [{lo}, {hi}]")


# -- tree ---------------------------------------------------------------------


class Welford:
    __slots__ = ("count", "mean", "m2")

    def __init__(self, count: int = 0, mean: float = 0.0, m2: float = 0.0):
        self.count = count
        self.mean = mean
        self.m2 = m2

    def add(self, x: float) -> None:
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self.m2 += d * (x - self.mean)

    def as_tuple(self) -> tuple[int, float, float]:
        return self.count, self.mean, self.m2


class TreeNode:
    """History node; ``stats`` are the discounted returns credited to reaching it.

    ``belief`` and ``reward`` memoize the deterministic transition from the
    parent, so revisits skip the simulator (they still count as generator
    calls).
    """

    __slots__ = ("stats", "children", "belief", "reward")

    def __init__(self, belief: Any = None, reward: float = 0.0):
        self.stats = Welford()
        self.children: dict[Hashable, TreeNode] = {}
        self.belief = belief
        self.reward = reward

    @property
    def visit_count(self) -> int:
        return self.stats.count


@dataclass
class PlanResult:
    actions: list
    generator_calls: int
    root_values: dict = field(default_factory=dict)
    root: TreeNode | None = None


# -- statistics ---------------------------------------------------------------


def welch_p_value(stats_a, stats_b) -> float:
    """Two-sided Welch t-test p-value from ``(count, mean, M2)`` summaries."""
    na, ma, m2a = stats_a
    nb, mb, m2b = stats_b
    if na < 2 or nb < 2:
        raise InsufficientSamples(f"need >= 2 samples per arm, got {na} and {nb}")
    sa = max(m2a, 0.0) / (na - 1) / na
    sb = max(m2b, 0.0) / (nb - 1) / nb
    se2 = sa + sb
    diff = ma - mb
    scale = max(abs(ma), abs(mb), 1.0)
    if se2 <= (1e-15 * scale) ** 2:
        return 1.0 if abs(diff) <= 1e-12 * scale else 0.0
    t2 = diff * diff / se2
    df = se2 * se2 / (sa * sa / (na - 1) + sb * sb / (nb - 1))
    return float(betainc(0.5 * df, 0.5, df / (df + t2)))


def extract_action_chain(root: TreeNode, ttest_value: float, max_depth: int) -> list:
    """Descend best-mean children while the best beats the runner-up at level ``ttest_value``.

    The root's best action is always returned.
    """
    chain: list = []
    node = root
    while len(chain) < max_depth and node.children:
        # stable sort keeps expansion (= canonical) order among equal means
        ranked = sorted(
            ((a, c) for a, c in node.children.items() if c.visit_count > 0),
            key=lambda ac: -ac[1].stats.mean,
        )
        if not ranked:
            break
        best_action, best = ranked[0]
        confident = (
            best.visit_count >= 2
            and len(ranked) > 1
            and ranked[1][1].visit_count >= 2
            and welch_p_value(best.stats.as_tuple(), ranked[1][1].stats.as_tuple()) <= ttest_value
        )
        if not confident:
            if not chain:
                chain.append(best_action)
            break
        chain.append(best_action)
        node = best
    return chain


# -- search -------------------------------------------------------------------


def ucb1_select(node: TreeNode, exploration_c: float, actions: Sequence) -> Hashable:
    """UCB1 over ``actions``; unvisited actions first, ties to the earliest action."""
    children = node.children
    for a in actions:
        child = children.get(a)
        if child is None or child.stats.count == 0:
            return a
    log_n = math.log(max(node.stats.count, 1))
    best_a, best_v = None, -math.inf
    for a in actions:
        st = children[a].stats
        v = st.mean + exploration_c * math.sqrt(log_n / st.count)
        if v > best_v:
            best_a, best_v = a, v
    return best_a


def rollout(sim, belief, depth_remaining: int, gamma: float, rng: random.Random) -> float:
    """Uniform-random legal actions for ``depth_remaining`` steps; discounted return."""
    total, discount = 0.0, 1.0
    for _ in range(depth_remaining):
        actions = sim.legal_actions(belief)
        if not actions:
            break
        a = actions[int(rng.random() * len(actions))]
        belief, _, r = sim.step(belief, a)
        total += discount * r
        discount *= gamma
    return total


def plan(sim, belief, params: SolverParams, rng: np.random.Generator, exploration_scale: float = 1.0,
         trace: list | None = None) -> PlanResult:
    """Run ``params.num_rollouts`` simulations from ``belief`` and extract an action chain.

    If ``trace`` is a list, every backed-up ``(node, discounted_return)`` pair is appended to it.
    """
    fast_rng = random.Random(int(rng.integers(2**63)))
    root = TreeNode(belief)
    start_calls = sim.generator_calls
    gamma, horizon = params.gamma, params.max_depth
    ret_lo, ret_hi = math.inf, -math.inf

    for _ in range(params.num_rollouts):
        c = exploration_scale * (ret_hi - ret_lo) if ret_hi > ret_lo else 0.0
        node, b = root, belief
        visited = [root]
        rewards = []
        tail = 0.0
        for depth in range(horizon):
            actions = sim.legal_actions(b)
            if not actions:
                break
            a = ucb1_select(node, c, actions)
            child = node.children.get(a)
            if child is None:
                b2, _, r = sim.step(b, a)
                child = TreeNode(b2, r)
                node.children[a] = child
                visited.append(child)
                rewards.append(r)
                tail = rollout(sim, b2, horizon - depth - 1, gamma, fast_rng)
                break
            sim.generator_calls += 1
            visited.append(child)
            rewards.append(child.reward)
            node, b = child, child.belief
        ret = tail
        for i in range(len(rewards) - 1, -1, -1):
            ret = rewards[i] + gamma * ret
            visited[i + 1].stats.add(ret)
            if trace is not None:
                trace.append((visited[i + 1], ret))
        root.stats.add(ret)
        if trace is not None:
            trace.append((root, ret))
        ret_lo = min(ret_lo, ret)
        ret_hi = max(ret_hi, ret)

    chain = extract_action_chain(root, params.ttest_value, params.max_depth)
    if not chain:
        actions = sim.legal_actions(belief)
        chain = list(actions[:1])
    return PlanResult(
        actions=chain,
        generator_calls=sim.generator_calls - start_calls,
        root_values={a: (c.stats.mean, c.visit_count) for a, c in root.children.items()},
        root=root,
    )


# -- IPP generator --------------------------------------------------------------


_LATTICE_CACHE: dict = {}


class SenseLattice:
    """Every location the robot can sense on a lattice, deduplicated.

    Points are indexed by integer coordinates in units of ``spacing / k``, so
    an edge traversed in either direction maps to the same point indices.
    """

    def __init__(self, fld: WorldField, sensing: SensingConfig = SensingConfig()):
        self.k = k = sensing.samples_per_edge
        self.actions: tuple[Action, ...] = fld.actions
        nx, ny, nz = self.dims = fld.dims
        n_cells = nx * ny * nz
        cells = np.stack(np.unravel_index(np.arange(n_cells), self.dims), axis=1)
        n_act = len(self.actions)

        sub = [cells * k]  # node points first so node i <-> cell i before dedupe
        self.neighbor = np.full((n_cells, n_act), -1, dtype=np.int64)
        owners = []
        for ai, a in enumerate(self.actions):
            dest = cells + np.array(a.value)
            ok = np.all((dest >= 0) & (dest < np.array(self.dims)), axis=1)
            self.neighbor[ok, ai] = np.ravel_multi_index(dest[ok].T, self.dims)
            for j in range(1, k + 1):
                sub.append(cells[ok] * k + j * np.array(a.value))
            owners.append(ok)
        sub_all = np.concatenate(sub)
        uniq, inverse = np.unique(sub_all, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        self.points = fld.lo + uniq / k * np.array(fld.spacing)
        self.node_point = inverse[:n_cells]
        self.edge_points = np.full((n_cells, n_act, k), -1, dtype=np.int64)
        pos = n_cells
        for ai, ok in enumerate(owners):
            cnt = int(ok.sum())
            block = inverse[pos : pos + cnt * k].reshape(k, cnt).T
            self.edge_points[ok, ai, :] = block
            pos += cnt * k
        self.legal = [tuple(self.actions[ai] for ai in range(n_act) if self.neighbor[c, ai] >= 0) for c in range(n_cells)]
        self._action_index = {a: i for i, a in enumerate(self.actions)}

    @classmethod
    def cached(cls, fld: WorldField, sensing: SensingConfig = SensingConfig()) -> "SenseLattice":
        """Shared instance per geometry; the lattice never looks at field values."""
        key = (fld.dims, tuple(fld.spacing), tuple(np.asarray(fld.lo).tolist()), sensing.samples_per_edge)
        hit = _LATTICE_CACHE.get(key)
        if hit is None:
            if len(_LATTICE_CACHE) >= 8:
                _LATTICE_CACHE.pop(next(iter(_LATTICE_CACHE)))
            hit = _LATTICE_CACHE[key] = cls(fld, sensing)
        return hit

    def cell_index(self, pose: RobotPose) -> int:
        return int(np.ravel_multi_index(pose.cell, self.dims))

    def pose(self, cell: int) -> RobotPose:
        return RobotPose(tuple(int(c) for c in np.unravel_index(cell, self.dims)))

    def action_index(self, a: Action) -> int:
        return self._action_index[a]


class PosteriorTable:
    """Base GP posterior (mean, latent variance, whitened cross-covariance) at every lattice point.

    ``Vt[p, :n]`` holds ``L^{-1} k(X, q_p)`` for lattice point ``p``. Rows live
    in an over-allocated buffer that later tables extend in place; a table
    only reads its first ``n`` columns, so older tables stay valid.
    """

    def __init__(self, model: GpModel, lattice: SenseLattice, capacity: int = 0):
        self.model = model
        self.lattice = lattice
        self.points_norm = np.ascontiguousarray(model.normalize(lattice.points))
        n = len(model)
        self._buf = np.zeros((len(self.points_norm), max(capacity, n, 8)))
        self._owner = [n]  # shared fill level of the buffer
        if n:
            K = model.kernel(model._X, self.points_norm)
            self._buf[:, :n] = solve_triangular(model._L, K, lower=True).T
        h = model.hyper
        Vt = self._buf[:, :n]
        self.mean = h.prior_mean + Vt @ model._beta
        self.var = np.maximum(h.signal_variance - np.einsum("ij,ij->i", Vt, Vt), 0.0)

    @property
    def n(self) -> int:
        return len(self.model)

    @property
    def Vt(self) -> np.ndarray:
        return self._buf[:, : self.n]

    def update(self, model: GpModel) -> "PosteriorTable":
        """Extend to ``model``, which must be this table's model conditioned on more samples."""
        n, n2 = self.n, len(model)
        if n2 < n or not np.array_equal(model._X[:n], self.model._X[:n]):
            return PosteriorTable(model, self.lattice)
        if n2 == n:
            return self
        out = PosteriorTable.__new__(PosteriorTable)
        out.model = model
        out.lattice = self.lattice
        out.points_norm = self.points_norm
        if self._owner[0] != n or n2 > self._buf.shape[1]:
            cap = max(2 * self._buf.shape[1], n2)
            out._buf = np.zeros((len(self.points_norm), cap))
            out._buf[:, :n] = self._buf[:, :n]
            out._owner = [n]
        else:
            out._buf = self._buf
            out._owner = self._owner
        L = model._L
        rhs = model.kernel(model._X[n:], self.points_norm) - L[n:, :n] @ self._buf[:, :n].T
        new_rows = solve_triangular(L[n:, n:], rhs, lower=True)  # (n2-n) x M
        out._buf[:, n:n2] = new_rows.T
        out._owner[0] = n2
        out.mean = self.mean + new_rows.T @ model._beta[n:]
        out.var = np.maximum(self.var - np.einsum("ij,ij->j", new_rows, new_rows), 0.0)
        return out


class Belief:
    """Planning belief: pose, improvement state, and hypothetical samples along the simulated path.

    ``L`` is the Cholesky factor of the base-posterior covariance of the path
    points plus observation noise.
    """

    __slots__ = ("cell", "best_mean", "path", "L")

    def __init__(self, cell: int, best_mean: float, path=None, L=None):
        self.cell = cell
        self.best_mean = best_mean
        self.path = np.zeros(0, dtype=np.int64) if path is None else path
        self.L = np.zeros((0, 0)) if L is None else L


_TAG_CODES = {Objective.ENTROPY: 0, Objective.EXPECTED_IMPROVEMENT: 1, Objective.PROBABILITY_OF_IMPROVEMENT: 2}


class IppSimulator:
    """Generator for the IPP POMDP: observations are GP means, rewards are objective sums."""

    def __init__(self, table: PosteriorTable, kind: ObjectiveKind):
        self.table = table
        self.lattice = table.lattice
        self.kind = kind
        self.hyper = table.model.hyper
        self._ls = table.model._ls
        self._tag = _TAG_CODES[kind.tag]
        self._zmode = 0 if kind.z_mode is ZMode.PAPER_VARIANCE else 1
        self.generator_calls = 0

    def root_belief(self, pose: RobotPose, state: ImprovementState) -> Belief:
        return Belief(self.lattice.cell_index(pose), state.best_mean)

    def legal_actions(self, belief: Belief):
        return self.lattice.legal[belief.cell]

    def posterior_at(self, belief: Belief, idx) -> tuple[np.ndarray, np.ndarray]:
        """Mean and latent variance at lattice points ``idx`` given the belief's path (numpy reference)."""
        t = self.table
        idx = np.asarray(idx, dtype=np.int64)
        if len(belief.path) == 0:
            return t.mean[idx], t.var[idx]
        QJ, QP = t.points_norm[idx], t.points_norm[belief.path]
        d2 = ((QP[:, None, :] - QJ[None, :, :]) ** 2).sum(-1)
        CPJ = self.hyper.signal_variance * np.exp(-d2 / (2 * self._ls**2)) - t.Vt[belief.path] @ t.Vt[idx].T
        W = solve_triangular(belief.L, CPJ, lower=True)
        return t.mean[idx], np.maximum(t.var[idx] - (W * W).sum(0), 0.0)

    def step(self, belief: Belief, action: Action):
        """One generator call: move, score the sensed points, condition on their predicted means."""
        lat = self.lattice
        ai = lat.action_index(action)
        nxt = int(lat.neighbor[belief.cell, ai])
        if nxt < 0:
            raise IllegalMove(f"{action.name} leaves the grid from cell {lat.pose(belief.cell).cell}")
        self.generator_calls += 1
        t = self.table
        h = self.hyper
        idx = lat.edge_points[belief.cell, ai]
        L, path, means, reward, best, ok = _extend_path(
            t._buf, t.n, t.points_norm, t.mean, t.var, belief.path, belief.L, idx,
            self._ls * self._ls, h.signal_variance, h.noise_variance, belief.best_mean,
            self._tag, self._zmode,
        )
        if not ok:
            raise NumericalFailure("path covariance extension is not positive definite")
        return Belief(nxt, best, path, L), means, reward

    def materialize(self, belief: Belief) -> GpModel:
        """Full GP model equivalent to ``belief`` (reference path, used in tests)."""
        pts = self.lattice.points[belief.path]
        means = self.table.mean[belief.path]
        return self.table.model.condition(list(zip(pts, means)))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LOG_2PIE = math.log(2.0 * math.pi * math.e)


@njit(cache=True)
def _score(mean, var, best, tag, zmode):
    if tag == 0:
        return 0.5 * (_LOG_2PIE + math.log(max(var, VAR_FLOOR)))
    improvement = mean - best
    if var <= VAR_FLOOR:
        if tag == 2:
            return 1.0 if improvement > 0 else 0.0
        return max(improvement, 0.0)
    sd = math.sqrt(var)
    z = improvement / var if zmode == 0 else improvement / sd
    cdf = 0.5 * math.erfc(-z / _SQRT2)
    if tag == 2:
        return cdf
    return max(improvement * cdf + sd * _INV_SQRT_2PI * math.exp(-0.5 * z * z), 0.0)


@njit(cache=True, fastmath=True)
def _extend_path(buf, n, Q, mean_b, var_b, path, L, idx, ls2, sv, noise, best, tag, zmode):
    m = path.shape[0]
    k = idx.shape[0]
    # whitened base-posterior cross covariance between path and new points
    W = np.empty((m, k))
    for j in range(k):
        q = idx[j]
        for p in range(m):
            pp = path[p]
            d = 0.0
            for c in range(3):
                t = Q[pp, c] - Q[q, c]
                d += t * t
            dot = 0.0
            for r in range(n):
                dot += buf[pp, r] * buf[q, r]
            W[p, j] = sv * math.exp(-d / (2.0 * ls2)) - dot
        for p in range(m):
            s = W[p, j]
            for r in range(p):
                s -= L[p, r] * W[r, j]
            W[p, j] = s / L[p, p]

    means = np.empty(k)
    reward = 0.0
    new_best = best
    for j in range(k):
        q = idx[j]
        v = var_b[q]
        for p in range(m):
            v -= W[p, j] * W[p, j]
        v = max(v, 0.0)
        means[j] = mean_b[q]
        reward += _score(means[j], v, best, tag, zmode)
        new_best = max(new_best, means[j])

    S = np.empty((k, k))
    for i in range(k):
        qi = idx[i]
        for j in range(i + 1):
            qj = idx[j]
            d = 0.0
            for c in range(3):
                t = Q[qi, c] - Q[qj, c]
                d += t * t
            s = sv * math.exp(-d / (2.0 * ls2))
            for r in range(n):
                s -= buf[qi, r] * buf[qj, r]
            for p in range(m):
                s -= W[p, i] * W[p, j]
            S[i, j] = s
            S[j, i] = s
        S[i, i] += noise

    L22 = np.zeros((k, k))
    ok = False
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        ok = True
        for i in range(k):
            for j in range(i + 1):
                s = S[i, j] + (jitter if i == j else 0.0)
                for r in range(j):
                    s -= L22[i, r] * L22[j, r]
                if i == j:
                    if s <= 0.0:
                        ok = False
                        break
                    L22[i, i] = math.sqrt(s)
                else:
                    L22[i, j] = s / L22[j, j]
            if not ok:
                break
        if ok:
            break

    newL = np.zeros((m + k, m + k))
    newL[:m, :m] = L
    for i in range(k):
        for p in range(m):
            newL[m + i, p] = W[p, i]
        for j in range(i + 1):
            newL[m + i, m + j] = L22[i, j]
    new_path = np.empty(m + k, dtype=np.int64)
    new_path[:m] = path
    new_path[m:] = idx
    return newL, new_path, means, reward, new_best, ok


def generator(sim, belief, action):
    return sim.step(belief, action)
