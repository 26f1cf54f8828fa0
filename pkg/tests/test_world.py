import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlpomcp.world import (
    PRESETS,
    Action,
    BlobSpec,
    IllegalMove,
    OutOfBounds,
    ParseError,
    RobotPose,
    SensingConfig,
    ShapeError,
    WorldError,
    WorldField,
    apply_action,
    build_world,
    legal_actions,
    load_grid_csv,
    make_synthetic_field,
    observe,
    save_grid_csv,
    sense_path,
    value_at,
    values_at,
    world_id,
)


def corner_oracle(values, spacing, x):
    """Explicit weighted sum over the 8 surrounding nodes."""
    g = np.asarray(x) / np.asarray(spacing)
    dims = values.shape
    total = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        w = 1.0
        idx = []
        for ax in range(3):
            base = min(int(np.floor(g[ax])), max(dims[ax] - 2, 0))
            frac = g[ax] - base
            i = base + corner[ax]
            if dims[ax] == 1:
                if corner[ax]:
                    w = 0.0
                i = 0
                frac = 0.0
            w *= frac if corner[ax] else 1 - frac
            idx.append(min(i, dims[ax] - 1))
        total += w * values[tuple(idx)]
    return total


def test_field_validation():
    with pytest.raises(ShapeError):
        WorldField(np.zeros((1, 4, 2)))
    with pytest.raises(ValueError):
        WorldField(np.array([[0.0, np.nan], [0, 0]]))
    f = WorldField(np.zeros((3, 4)))
    assert f.dims == (3, 4, 1) and f.planar and len(f.actions) == 4


def test_synthetic_single_blob_peak():
    spec = BlobSpec(count=(1, 1), amplitude=(1.7, 1.7), width=(0.1, 0.1))
    f = make_synthetic_field(3, spec, dims=(9, 9, 5))
    assert f.values.max() == pytest.approx(1.7, abs=1e-9)
    assert np.array_equal(make_synthetic_field(3, spec, dims=(9, 9, 5)).values, f.values)
    zero = make_synthetic_field(3, BlobSpec(count=(0, 0)), dims=(4, 4, 2))
    assert not zero.values.any()


def test_csv_roundtrip(tmp_path):
    f = make_synthetic_field(1, dims=(5, 4, 3), spacing=(0.5, 1.0, 2.0))
    p = tmp_path / "g.csv"
    save_grid_csv(f, p)
    g = load_grid_csv(p)
    assert np.array_equal(g.values, f.values) and g.spacing == f.spacing


def test_csv_rows_in_any_order(tmp_path):
    rows = [f"{i},{j},0,{10 * i + j}" for i in range(2) for j in range(3)]
    (tmp_path / "g.csv").write_text("2,3,1,1,1,1\n" + "\n".join(reversed(rows)) + "\n")
    g = load_grid_csv(tmp_path / "g.csv")
    assert g.values[1, 2, 0] == 12


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("2,2,1,1,1,1\n0,0,0,1\n0,1,0,1\n1,0,0,1\n")
    with pytest.raises(ShapeError):
        load_grid_csv(p)
    p.write_text("2,2,1,1,1,1\n0,0,0,1\n0,1,0,x\n1,0,0,1\n1,1,0,1\n")
    with pytest.raises(ParseError, match=":3:"):
        load_grid_csv(p)
    p.write_text("2,2,1\n")
    with pytest.raises(ParseError, match=":1:"):
        load_grid_csv(p)
    p.write_text("2,2,1,1,1,1\n0,0,0,1\n0,1,0,1\n1,0,0,1\n5,1,0,1\n")
    with pytest.raises(ShapeError):
        load_grid_csv(p)


def test_interpolation_examples():
    v = np.zeros((2, 2, 2))
    v[1] = 2.0
    f = WorldField(v)
    assert value_at(f, [0.5, 0.3, 0.9]) == pytest.approx(1.0)
    g = make_synthetic_field(0, dims=(5, 6, 4))
    assert value_at(g, g.position((2, 3, 1))) == g.values[2, 3, 1]
    with pytest.raises(OutOfBounds):
        value_at(g, [-0.1, 0, 0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1000), st.booleans())
def test_interpolation_matches_corner_oracle(seed, planar):
    rng = np.random.default_rng(seed)
    dims = (4, 5, 1 if planar else 3)
    spacing = (0.5, 1.5, 2.0)
    vals = rng.normal(size=dims)
    f = WorldField(vals, spacing)
    x = rng.random(3) * (f.hi - f.lo)
    assert value_at(f, x) == pytest.approx(corner_oracle(vals, spacing, x), abs=1e-9)


def test_interpolation_continuity():
    f = make_synthetic_field(4, dims=(6, 6, 4))
    span = np.ptp(f.values)
    for ax in range(3):
        x = np.array([2.3, 1.7, 1.2])
        x[ax] = 2.0
        lo, hi = x.copy(), x.copy()
        lo[ax] -= 1e-9
        hi[ax] += 1e-9
        assert abs(value_at(f, lo) - value_at(f, hi)) < 1e-6 * span


def test_actions_and_inverse():
    f = WorldField(np.zeros((4, 4, 4)))
    p = RobotPose((1, 2, 1))
    assert apply_action(p, Action.UP, f).cell == (1, 2, 2)
    for a in Action:
        assert apply_action(apply_action(p, a, f), a.inverse, f) == p
    with pytest.raises(IllegalMove):
        apply_action(RobotPose((3, 0, 0)), Action.RIGHT, f)
    planar = WorldField(np.zeros((4, 4)))
    with pytest.raises(IllegalMove):
        apply_action(RobotPose((1, 1, 0)), Action.UP, planar)
    assert legal_actions(RobotPose((0, 0, 0)), planar) == [Action.RIGHT, Action.FORWARD]


def test_sense_path():
    f = WorldField(np.zeros((3, 3, 3)), spacing=(2.0, 1.0, 1.0))
    a, b = RobotPose((0, 1, 1)), RobotPose((1, 1, 1))
    assert sense_path(SensingConfig(1), a, b, f).tolist() == [[2.0, 1.0, 1.0]]
    pts = sense_path(SensingConfig(5), a, b, f)
    np.testing.assert_allclose(pts[:, 0], [0.4, 0.8, 1.2, 1.6, 2.0])
    assert sense_path(SensingConfig(5), a, a, f).tolist() == [[0.0, 1.0, 1.0]]
    with pytest.raises(ValueError):
        sense_path(SensingConfig(2), a, RobotPose((2, 2, 1)), f)
    with pytest.raises(ValueError):
        SensingConfig(0)


def test_observe():
    f = make_synthetic_field(2, dims=(4, 4, 3))
    assert observe(f, []) == []
    (x, y), = observe(f, [f.position((1, 2, 0))])
    assert y == f.values[1, 2, 0]
    pts = np.array([[0.5, 0.5, 0.5], [1.0, 2.0, 1.5]])
    a = observe(f, pts, 0.1, np.random.default_rng(3))
    b = observe(f, pts, 0.1, np.random.default_rng(3))
    assert [v for _, v in a] == [v for _, v in b]
    assert [v for _, v in a] != [v for _, v in observe(f, pts)]


def test_build_world_kinds(tmp_path):
    f = build_world("synthetic", 5, dims=(4, 4, 2))
    assert f.dims == (4, 4, 2)
    assert build_world("field15", 5).dims == PRESETS["field15"]["dims"]
    p = tmp_path / "lake.csv"
    save_grid_csv(f, p)
    assert np.array_equal(build_world(str(p), 99).values, f.values)
    assert world_id(str(p)) == "lake"
    with pytest.raises(WorldError):
        build_world("nowhere", 0)
