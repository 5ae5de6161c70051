"""Scene-conditioned multimodal trajectory forecasting toolkit.

Three-stage pipeline: grid goal prediction, max-ent deep IRL path
planning, and waypoint-attention trajectory generation, plus a
synthetic-scene harness, metrics, and a CLI.
"""

__version__ = "0.1.0"

from scenecast.grid_scene import GridSpec, GridScene, Cell, build_grid
from scenecast.pipeline import PipelineHandle, forecast

__all__ = [
    "GridSpec",
    "GridScene",
    "Cell",
    "build_grid",
    "PipelineHandle",
    "forecast",
]
