import numpy as np
import pytest

from scenecast.grid_scene import GridSpec, build_grid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_scene(rows=6, cols=6, cell_px=2, seed=0, cell_size=1.0, origin=(0.0, 0.0)):
    """Small random scene for model-level tests."""
    rng = np.random.default_rng(seed)
    spec = GridSpec(rows=rows, cols=cols, cell_size=cell_size, origin=origin)
    raster = rng.uniform(0.0, 1.0, size=(rows * cell_px, cols * cell_px, 3))
    return build_grid(raster, spec)


def straight_past(n=8, start=(1.0, 1.0), step=(1.0, 0.0)):
    start = np.asarray(start, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    return start + np.arange(n)[:, None] * step
