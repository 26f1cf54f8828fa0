"""Simulated ground truth, lattice kinematics and the sensing function.

A :class:`WorldField` is a dense scalar grid interpolated trilinearly
(bilinearly for planar worlds with ``nz == 1``). The robot lives on the grid
nodes and moves one cell per action, sampling ``k`` points along each edge.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .objective import ObjectiveKind

_BOUNDS_TOL = 1e-9


class WorldError(Exception):
    pass


class ParseError(WorldError):
    pass


class ShapeError(WorldError):
    pass


class OutOfBounds(WorldError):
    pass


class IllegalMove(WorldError):
    pass


class Action(enum.Enum):
    """Lattice moves; declaration order is the canonical tie-break order."""

    RIGHT = (1, 0, 0)
    LEFT = (-1, 0, 0)
    FORWARD = (0, 1, 0)
    BACK = (0, -1, 0)
    UP = (0, 0, 1)
    DOWN = (0, 0, -1)

    @property
    def delta(self) -> np.ndarray:
        return np.array(self.value)

    @property
    def inverse(self) -> "Action":
        return Action(tuple(-d for d in self.value))


PLANAR_ACTIONS = (Action.RIGHT, Action.LEFT, Action.FORWARD, Action.BACK)
SPATIAL_ACTIONS = tuple(Action)


@dataclass(frozen=True)
class WorldField:
    values: np.ndarray  # shape (nx, ny, nz)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ShapeError(f"values must be 3-D, got shape {v.shape}")
        nx, ny, nz = v.shape
        if nx < 2 or ny < 2 or nz < 1:
            raise ShapeError(f"grid must be at least 2x2x1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(s) for s in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def planar(self) -> bool:
        return self.dims[2] == 1

    @property
    def actions(self) -> tuple[Action, ...]:
        return PLANAR_ACTIONS if self.planar else SPATIAL_ACTIONS

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.origin)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + (np.array(self.dims) - 1) * np.array(self.spacing)

    @property
    def longest_axis(self) -> float:
        return float(np.max(self.hi - self.lo))

    def position(self, cell) -> np.ndarray:
        return self.lo + np.asarray(cell, dtype=float) * np.array(self.spacing)

    def random_point(self, rng: np.random.Generator) -> np.ndarray:
        return self.lo + rng.random(3) * (self.hi - self.lo)


@dataclass(frozen=True)
class RobotPose:
    cell: tuple[int, int, int]


@dataclass(frozen=True)
class SensingConfig:
    samples_per_edge: int = 4

    def __post_init__(self):
        if self.samples_per_edge < 1:
            raise ValueError("samples_per_edge must be >= 1")


@dataclass(frozen=True)
class EpisodeConfig:
    budget_steps: int = 50
    seed_samples: int = 5
    objective: ObjectiveKind = field(default_factory=ObjectiveKind)
    rng_seed: int = 0
    observation_noise: float = 0.0

    def __post_init__(self):
        if self.budget_steps < 1:
            raise ValueError("budget_steps must be >= 1")
        if self.seed_samples < 0:
            raise ValueError("seed_samples must be >= 0")


# -- field construction ------------------------------------------------------


@dataclass(frozen=True)
class BlobSpec:
    """Ranges for random Gaussian blobs; widths are fractions of each axis extent."""

    count: tuple[int, int] = (3, 6)
    amplitude: tuple[float, float] = (0.5, 2.0)
    width: tuple[float, float] = (0.08, 0.25)

    def __post_init__(self):
        (c0, c1), (a0, a1), (w0, w1) = self.count, self.amplitude, self.width
        if not (0 <= c0 <= c1):
            raise ValueError(f"blob count range {self.count} is invalid")
        if not a0 <= a1:
            raise ValueError(f"blob amplitude range {self.amplitude} is invalid")
        if not (0 < w0 <= w1):
            raise ValueError(f"blob width range {self.width} is invalid")


def make_synthetic_field(seed: int, spec: BlobSpec = BlobSpec(), dims=(16, 16, 8), spacing=(1.0, 1.0, 1.0)) -> WorldField:
    """Sum of axis-aligned Gaussian blobs centred on random grid nodes."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    spacing = np.asarray(spacing, dtype=float)
    axes = [np.arange(n) * s for n, s in zip(dims, spacing)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    extent = np.maximum((np.array(dims) - 1) * spacing, spacing)
    values = np.zeros(dims)
    n_blobs = int(rng.integers(spec.count[0], spec.count[1] + 1))
    for _ in range(n_blobs):
        center = np.array([rng.integers(n) for n in dims]) * spacing
        width = rng.uniform(*spec.width, size=3) * extent
        amp = rng.uniform(*spec.amplitude)
        r2 = ((gx - center[0]) / width[0]) ** 2 + ((gy - center[1]) / width[1]) ** 2 + ((gz - center[2]) / width[2]) ** 2
        values += amp * np.exp(-0.5 * r2)
    return WorldField(values, tuple(spacing))


PRESETS = {
    "desk": dict(dims=(16, 16, 8), spacing=(1.0, 1.0, 1.0)),
    "field15": dict(dims=(15, 15, 1), spacing=(0.5, 0.5, 0.5)),
}


def save_grid_csv(fld: WorldField, path) -> None:
    nx, ny, nz = fld.dims
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([nx, ny, nz, *(repr(s) for s in fld.spacing)])
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    w.writerow([ix, iy, iz, repr(float(fld.values[ix, iy, iz]))])


def load_grid_csv(path) -> WorldField:
    """Read the ``nx,ny,nz,sx,sy,sz`` header + ``ix,iy,iz,value`` row format."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    try:
        head = lines[0].split(",")
        nx, ny, nz = (int(t) for t in head[:3])
        spacing = tuple(float(t) for t in head[3:6])
        if len(head) != 6:
            raise ValueError
    except ValueError:
        raise ParseError(f"{path}:1: bad header {lines[0]!r}") from None
    rows = [(i + 1, ln) for i, ln in enumerate(lines) if i > 0 and ln.strip()]
    if len(rows) != nx * ny * nz:
        raise ShapeError(f"{path}: expected {nx * ny * nz} data rows, found {len(rows)}")
    values = np.full((nx, ny, nz), np.nan)
    for lineno, ln in rows:
        parts = ln.split(",")
        try:
            if len(parts) != 4:
                raise ValueError
            ix, iy, iz = (int(t) for t in parts[:3])
            val = float(parts[3])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: malformed row {ln!r}") from None
        if not (0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz):
            raise ShapeError(f"{path}:{lineno}: index ({ix},{iy},{iz}) outside {nx}x{ny}x{nz}")
        values[ix, iy, iz] = val
    if np.isnan(values).any():
        raise ShapeError(f"{path}: duplicate rows leave grid nodes undefined")
    return WorldField(values, spacing)


_CSV_CACHE: dict[str, WorldField] = {}


def build_world(kind: str, seed: int, spec: BlobSpec = BlobSpec(), dims=(16, 16, 8), spacing=(1.0, 1.0, 1.0)) -> WorldField:
    """World for one episode.

    ``kind`` is ``"synthetic"`` (blobs on ``dims``/``spacing``), a preset
    name (blobs on the preset geometry) or a grid CSV path, which ignores
    ``seed``.
    """
    if kind == "synthetic":
        return make_synthetic_field(seed, spec, dims, spacing)
    if kind in PRESETS:
        return make_synthetic_field(seed, spec, **PRESETS[kind])
    key = str(Path(kind).resolve())
    if key not in _CSV_CACHE:
        if not Path(kind).is_file():
            raise WorldError(f"unknown world kind {kind!r}: not a preset and no such file")
        _CSV_CACHE[key] = load_grid_csv(kind)
    return _CSV_CACHE[key]


def world_id(kind: str) -> str:
    return kind if kind == "synthetic" or kind in PRESETS else Path(kind).stem


# -- interpolation and sensing ----------------------------------------------


def _check_bounds(fld: WorldField, pts: np.ndarray) -> None:
    if np.any(pts < fld.lo - _BOUNDS_TOL) or np.any(pts > fld.hi + _BOUNDS_TOL):
        bad = pts[np.any((pts < fld.lo - _BOUNDS_TOL) | (pts > fld.hi + _BOUNDS_TOL), axis=1)][0]
        raise OutOfBounds(f"point {bad.tolist()} outside [{fld.lo.tolist()}, {fld.hi.tolist()}]")


def values_at(fld: WorldField, pts) -> np.ndarray:
    """Trilinear interpolation at each row of ``pts``."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    _check_bounds(fld, pts)
    dims = np.array(fld.dims)
    g = (pts - fld.lo) / np.array(fld.spacing)
    g = np.clip(g, 0.0, dims - 1)
    i0 = np.minimum(np.floor(g).astype(int), np.maximum(dims - 2, 0))
    t = g - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    v = fld.values
    out = np.zeros(len(pts))
    for cx in (0, 1):
        wx = t[:, 0] if cx else 1 - t[:, 0]
        ix = i1[:, 0] if cx else i0[:, 0]
        for cy in (0, 1):
            wy = t[:, 1] if cy else 1 - t[:, 1]
            iy = i1[:, 1] if cy else i0[:, 1]
            for cz in (0, 1):
                wz = t[:, 2] if cz else 1 - t[:, 2]
                iz = i1[:, 2] if cz else i0[:, 2]
                out += wx * wy * wz * v[ix, iy, iz]
    return out


def value_at(fld: WorldField, x) -> float:
    return float(values_at(fld, x)[0])


def apply_action(pose: RobotPose, action: Action, fld: WorldField) -> RobotPose:
    if action not in fld.actions:
        raise IllegalMove(f"{action.name} is not available in a planar world")
    cell = tuple(int(c + d) for c, d in zip(pose.cell, action.value))
    if not all(0 <= c < n for c, n in zip(cell, fld.dims)):
        raise IllegalMove(f"{action.name} from {pose.cell} leaves the {fld.dims} grid")
    return RobotPose(cell)


def legal_actions(pose: RobotPose, fld: WorldField) -> list[Action]:
    out = []
    for a in fld.actions:
        cell = [c + d for c, d in zip(pose.cell, a.value)]
        if all(0 <= c < n for c, n in zip(cell, fld.dims)):
            out.append(a)
    return out


def sense_path(cfg: SensingConfig, g_prev: RobotPose, g_next: RobotPose, fld: WorldField) -> np.ndarray:
    """``k`` points from ``g_prev`` (exclusive) to ``g_next`` (inclusive)."""
    a = fld.position(g_prev.cell)
    b = fld.position(g_next.cell)
    if g_prev == g_next:
        return b.reshape(1, 3)
    if grid_distance(g_prev, g_next) != 1:
        raise ValueError(f"sense_path needs adjacent poses, got {g_prev.cell} -> {g_next.cell}")
    k = cfg.samples_per_edge
    frac = np.arange(1, k + 1) / k
    return a + frac[:, None] * (b - a)


def observe(fld: WorldField, xs, noise_std: float = 0.0, rng: np.random.Generator | None = None):
    pts = np.asarray(xs, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return []
    vals = values_at(fld, pts)
    if noise_std > 0:
        if rng is None:
            raise ValueError("observation noise requires an rng")
        vals = vals + rng.normal(0.0, noise_std, size=len(vals))
    return [(p, float(v)) for p, v in zip(pts, vals)]


def random_pose(fld: WorldField, rng: np.random.Generator) -> RobotPose:
    return RobotPose(tuple(int(rng.integers(n)) for n in fld.dims))


def grid_distance(a: RobotPose, b: RobotPose) -> int:
    return int(sum(abs(x - y) for x, y in zip(a.cell, b.cell)))
