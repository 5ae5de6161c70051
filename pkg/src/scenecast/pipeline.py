"""Composition layer: the canonical three-stage inference procedure.

This is the single source of truth for stage ordering and for propagating
stage failures with the stage name attached; the CLI and tests both call
through here.
"""

from __future__ import annotations

from dataclasses import dataclass

from scenecast import traj_gen
from scenecast.goal_model import GoalModel
from scenecast.grid_scene import GridScene
from scenecast.irl import RewardModel
from scenecast.traj_gen import PredictionSet, TrajGenModel


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineHandle:
    goal_model: GoalModel
    reward_model: RewardModel
    traj_model: TrajGenModel
    vi_tol: float = 1e-9
    vi_max_sweeps: int | None = None

    def __post_init__(self):
        gc = getattr(self.goal_model, "extra_config", {}) or {}
        tc = getattr(self.traj_model, "extra_config", {}) or {}
        g_pred = gc.get("t_pred")
        t_pred = tc.get("t_pred", self.traj_model.t_pred)
        if g_pred is not None and g_pred != t_pred:
            raise PipelineError(
                "config", f"t_pred mismatch: goal checkpoint has {g_pred}, "
                          f"trajectory checkpoint has {t_pred}")
        g_obs = gc.get("t_obs")
        t_obs = tc.get("t_obs", self.traj_model.t_obs)
        if g_obs is not None and g_obs != t_obs:
            raise PipelineError(
                "config", f"t_obs mismatch: goal checkpoint has {g_obs}, "
                          f"trajectory checkpoint has {t_obs}")

    @classmethod
    def load(cls, goal_path, reward_path, traj_path, vi_tol: float = 1e-9,
             vi_max_sweeps=None) -> "PipelineHandle":
        return cls(
            goal_model=GoalModel.load(goal_path),
            reward_model=RewardModel.load(reward_path),
            traj_model=TrajGenModel.load(traj_path),
            vi_tol=vi_tol,
            vi_max_sweeps=vi_max_sweeps,
        )


def forecast(handle: PipelineHandle, scene: GridScene, past, K: int,
             seed: int) -> PredictionSet:
    """Goal sampling, per-goal IRL planning, trajectory decoding."""
    try:
        return traj_gen.predict(
            scene, past, handle.goal_model, handle.reward_model,
            handle.traj_model, K=K, seed=seed, vi_tol=handle.vi_tol,
            vi_max_sweeps=handle.vi_max_sweeps)
    except PipelineError:
        raise
    except Exception as exc:  # attach the stage name for operability
        raise PipelineError("forecast", str(exc)) from exc
