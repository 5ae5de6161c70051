import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenecast.grid_scene import (
    ACTION_NAMES,
    ACTION_OFFSETS,
    N_ACTIONS,
    STAY,
    Cell,
    GridSpec,
    build_grid,
    cell_to_world,
    transition,
    transition_table,
    world_to_cell,
)
from scenecast.ppm import read_ppm, write_ppm


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(rows=1, cols=4)
    with pytest.raises(ValueError):
        GridSpec(rows=4, cols=4, cell_size=0.0)


# ---------------------------------------------------------------------------
# build_grid


def test_build_grid_uniform_gray():
    spec = GridSpec(rows=4, cols=4)
    raster = np.full((16, 16, 3), 0.5)
    scene = build_grid(raster, spec)
    # own-cell means are exactly 0.5 everywhere
    assert np.allclose(scene.features[:, :, :3], 0.5, atol=1e-15)
    # interior cells have full 3x3 coverage -> neighborhood mean exactly 0.5
    assert np.allclose(scene.features[1:-1, 1:-1, 3:], 0.5, atol=1e-15)
    # corner cells only cover 4 of 9 neighbors
    assert np.allclose(scene.features[0, 0, 3:], 0.5 * 4 / 9, atol=1e-15)


def test_build_grid_piecewise_halves():
    spec = GridSpec(rows=2, cols=2)
    raster = np.zeros((8, 8, 1))
    raster[:, 4:] = 1.0
    scene = build_grid(raster, spec)
    assert np.allclose(scene.features[:, 0, 0], 0.0)
    assert np.allclose(scene.features[:, 1, 0], 1.0)


def test_build_grid_matches_pixel_loop_oracle(rng):
    raster = rng.uniform(size=(64, 64, 3))
    spec = GridSpec(rows=16, cols=16)
    scene = build_grid(raster, spec)
    # independent brute-force pixel loop
    for r in range(0, 16, 5):
        for c in range(0, 16, 3):
            block = raster[r * 4:(r + 1) * 4, c * 4:(c + 1) * 4]
            expect = block.reshape(-1, 3).mean(axis=0)
            assert np.max(np.abs(scene.features[r, c, :3] - expect)) < 1e-12
            acc = np.zeros(3)
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < 16 and 0 <= cc < 16:
                        blk = raster[rr * 4:(rr + 1) * 4, cc * 4:(cc + 1) * 4]
                        acc += blk.reshape(-1, 3).mean(axis=0)
            assert np.max(np.abs(scene.features[r, c, 3:] - acc / 9)) < 1e-12


def test_build_grid_uneven_pixel_blocks(rng):
    # raster not an exact multiple of the grid; means still exact
    raster = rng.uniform(size=(10, 7, 2))
    spec = GridSpec(rows=3, cols=3)
    scene = build_grid(raster, spec)
    row_edges = [(i * 10) // 3 for i in range(4)]
    col_edges = [(j * 7) // 3 for j in range(4)]
    for r in range(3):
        for c in range(3):
            block = raster[row_edges[r]:row_edges[r + 1], col_edges[c]:col_edges[c + 1]]
            assert np.allclose(scene.features[r, c, :2], block.reshape(-1, 2).mean(axis=0))


def test_build_grid_raster_too_small():
    with pytest.raises(ValueError):
        build_grid(np.zeros((3, 8, 3)), GridSpec(rows=4, cols=4))


def test_build_grid_channel_permutation_invariance(rng):
    raster = rng.uniform(size=(12, 12, 3))
    spec = GridSpec(rows=4, cols=4)
    base = build_grid(raster, spec).features
    perm = [2, 0, 1]
    permuted = build_grid(raster[:, :, perm], spec).features
    assert np.allclose(permuted[:, :, :3], base[:, :, perm])
    assert np.allclose(permuted[:, :, 3:], base[:, :, [p + 3 for p in perm]])


# ---------------------------------------------------------------------------
# coordinate transforms


def test_world_to_cell_origin_maps_to_first_cell():
    spec = GridSpec(rows=4, cols=4, cell_size=2.0, origin=(3.0, 5.0))
    cell, clamped = world_to_cell((3.0, 5.0), spec)
    assert cell == Cell(0, 0) and not clamped


def test_world_to_cell_floor_arithmetic():
    spec = GridSpec(rows=4, cols=4, cell_size=2.0, origin=(0.0, 0.0))
    cell, clamped = world_to_cell((1.5 * 2.0, 2.5 * 2.0), spec)
    assert cell == Cell(2, 1) and not clamped


def test_world_to_cell_clamps_and_flags():
    spec = GridSpec(rows=4, cols=4)
    cell, clamped = world_to_cell((-100.0, 7.5), spec)
    assert clamped and cell == Cell(3, 0)
    cell, clamped = world_to_cell((1e9, -1e9), spec)
    assert clamped and cell == Cell(0, 3)


def test_cell_to_world_center():
    spec = GridSpec(rows=4, cols=4, cell_size=1.0, origin=(0.0, 0.0))
    assert np.allclose(cell_to_world(Cell(0, 0), spec), [0.5, 0.5])
    spec2 = GridSpec(rows=8, cols=8, cell_size=2.0, origin=(10.0, 20.0))
    assert np.allclose(cell_to_world(Cell(3, 7), spec2), [25.0, 27.0])


@settings(max_examples=60, deadline=None)
@given(row=st.integers(0, 9), col=st.integers(0, 7),
       cs=st.floats(0.1, 50.0),
       ox=st.floats(-100, 100), oy=st.floats(-100, 100))
def test_round_trip_identity(row, col, cs, ox, oy):
    spec = GridSpec(rows=10, cols=8, cell_size=cs, origin=(ox, oy))
    cell, clamped = world_to_cell(cell_to_world(Cell(row, col), spec), spec)
    assert cell == Cell(row, col) and not clamped


# ---------------------------------------------------------------------------
# transitions


def test_transition_wall_clamps_to_self():
    spec = GridSpec(rows=4, cols=4)
    assert transition(Cell(0, 0), ACTION_NAMES.index("N"), spec) == Cell(0, 0)


def test_transition_unit_offsets():
    spec = GridSpec(rows=5, cols=5)
    assert transition(Cell(2, 2), ACTION_NAMES.index("SE"), spec) == Cell(3, 3)


@settings(max_examples=40, deadline=None)
@given(row=st.integers(0, 5), col=st.integers(0, 6), action=st.integers(0, 8))
def test_transition_total(row, col, action):
    spec = GridSpec(rows=6, cols=7)
    dest = transition(Cell(row, col), action, spec)
    assert 0 <= dest.row < 6 and 0 <= dest.col < 7
    if action == STAY:
        assert dest == Cell(row, col)


def test_transition_table_matches_scalar():
    spec = GridSpec(rows=3, cols=4)
    table = transition_table(3, 4)
    for a in range(N_ACTIONS):
        for r in range(3):
            for c in range(4):
                dest = transition(Cell(r, c), a, spec)
                assert table[a, r * 4 + c] == dest.row * 4 + dest.col


def test_action_set_shape():
    assert len(ACTION_NAMES) == 9 and len(ACTION_OFFSETS) == 9
    assert ACTION_NAMES[STAY] == "STAY" and ACTION_OFFSETS[STAY] == (0, 0)


# ---------------------------------------------------------------------------
# PPM io


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(6, 5, 3)).astype(np.uint8)
    path = tmp_path / "x.ppm"
    write_ppm(path, img)
    back = read_ppm(path)
    assert back.shape == (6, 5, 3)
    assert np.array_equal(np.rint(back * 255).astype(np.uint8), img)
