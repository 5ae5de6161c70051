"""Goal prediction: a probability distribution over grid cells for the
agent's goal, from scene features plus past motion, and K-goal sampling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from scenecast import nn
from scenecast.backbone import (
    AgentFrame,
    TwoBranchConfig,
    agent_frame,
    default_bins,
    init_two_branch_params,
    polar_to_grid,
    scene_branch_forward,
    two_branch_backward,
    two_branch_forward,
)
from scenecast.grid_scene import Cell, GridScene, GridSpec, world_to_cell

__all__ = [
    "GoalDistribution",
    "GoalModel",
    "agent_frame",
    "polar_to_grid",
    "scene_goal_logits",
    "sample_goals",
    "train_goal_model",
]

log = logging.getLogger(__name__)

CHECKPOINT_COMPONENT = "goal_model"


@dataclass(frozen=True)
class GoalDistribution:
    probs: np.ndarray  # rows x cols, sums to 1
    frame: AgentFrame

    def __post_init__(self):
        total = float(self.probs.sum())
        if not np.isclose(total, 1.0, atol=1e-9):
            raise ValueError(f"goal probabilities sum to {total}, not 1")


class GoalModel:
    """Two-branch goal predictor with softmax output over all cells."""

    def __init__(self, cfg: TwoBranchConfig, ps: nn.ParamSet):
        self.cfg = cfg
        self.ps = ps

    @classmethod
    def create(cls, spec: GridSpec, c_f: int, seed: int = 0,
               n_distance=None, n_orientation=None) -> "GoalModel":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
        kw = {}
        if n_distance is not None:
            kw["n_distance"] = n_distance
        if n_orientation is not None:
            kw["n_orientation"] = n_orientation
        distance, orientation = default_bins(spec, **kw)
        cfg = TwoBranchConfig(c_f=c_f, distance_centers=distance,
                              orientation_centers=orientation)
        return cls(cfg, init_two_branch_params(rng, cfg))

    def distribution(self, scene: GridScene, past: np.ndarray) -> GoalDistribution:
        scene_grid, motion_grid, frame, _ = two_branch_forward(
            scene, past, self.cfg, self.ps)
        logits = (scene_grid + motion_grid).reshape(-1)
        m = logits.max()
        ex = np.exp(logits - m)
        probs = (ex / ex.sum()).reshape(scene.spec.rows, scene.spec.cols)
        return GoalDistribution(probs=probs, frame=frame)

    def loss_and_grads(self, scene: GridScene, past: np.ndarray,
                       label: Cell, accumulate: bool = True) -> float:
        """Cross-entropy against the true goal cell; accumulates gradients."""
        scene_grid, motion_grid, frame, cache = two_branch_forward(
            scene, past, self.cfg, self.ps)
        logits = (scene_grid + motion_grid).reshape(-1)
        loss, probs = nn.softmax_xent(logits, label.flat(scene.spec))
        if accumulate:
            dlogits = nn.softmax_xent_backward(probs, label.flat(scene.spec))
            dgrid = dlogits.reshape(scene.spec.rows, scene.spec.cols)
            two_branch_backward(dgrid, dgrid, cache, self.cfg, self.ps)
        return loss

    def loss(self, scene: GridScene, past: np.ndarray, label: Cell) -> float:
        return self.loss_and_grads(scene, past, label, accumulate=False)

    def save(self, path, extra_config: dict | None = None) -> None:
        config = self.cfg.to_json()
        if extra_config:
            config.update(extra_config)
        nn.save_checkpoint(path, CHECKPOINT_COMPONENT, self.ps, config)

    @classmethod
    def load(cls, path) -> "GoalModel":
        component, ps, config = nn.load_checkpoint(path)
        if component != CHECKPOINT_COMPONENT:
            raise ValueError(f"checkpoint is {component!r}, expected goal_model")
        model = cls(TwoBranchConfig.from_json(config), ps)
        model.extra_config = config
        return model


def scene_goal_logits(scene: GridScene, model: GoalModel) -> np.ndarray:
    """Scene-branch-only logits: one per cell."""
    grid, _ = scene_branch_forward(scene, model.cfg, model.ps)
    return grid


def goal_distribution(scene: GridScene, past: np.ndarray,
                      model: GoalModel) -> GoalDistribution:
    return model.distribution(scene, past)


def true_goal_cell(instance, spec: GridSpec) -> Cell:
    """Training label: the grid cell of the final future point."""
    cell, _ = world_to_cell(instance.future[-1], spec)
    return cell


def train_goal_model(train, val, scenes: dict, model: GoalModel,
                     epochs: int = 30, lr: float = 1e-2, seed: int = 0):
    """Full-batch Adam on mean cross-entropy; returns (model, log).

    ``train`` / ``val`` are TrajectoryInstance lists; ``scenes`` maps
    scene_ref -> GridScene. The returned model carries the parameters with
    the lowest validation loss seen during training.
    """
    if not train:
        raise ValueError("empty training set")
    labels = {id(inst): true_goal_cell(inst, scenes[inst.scene_ref].spec)
              for inst in list(train) + list(val)}

    def mean_loss(instances):
        if not instances:
            return float("nan")
        return float(np.mean([
            model.loss(scenes[i.scene_ref], i.past, labels[id(i)]) for i in instances
        ]))

    opt = nn.OptimizerState(lr=lr)
    history = {"train_loss": [], "val_loss": [], "best_epoch": None,
               "init_val_loss": mean_loss(val)}
    best_val = np.inf
    best_params = {k: v.copy() for k, v in model.ps.params.items()}
    for epoch in range(epochs):
        model.ps.zero_grads()
        total = 0.0
        for inst in train:
            total += model.loss_and_grads(scenes[inst.scene_ref], inst.past,
                                          labels[id(inst)])
        model.ps.scale_grads(1.0 / len(train))
        nn.adam_update(model.ps, opt)
        train_loss = total / len(train)
        val_loss = mean_loss(val) if val else train_loss
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in model.ps.params.items()}
            history["best_epoch"] = epoch
    for name, value in best_params.items():
        model.ps.params[name][...] = value
    return model, history


def sample_goals(dist: GoalDistribution, K: int, seed: int) -> list[Cell]:
    """Sample up to K distinct cells without replacement, proportional to
    the goal probabilities; deterministic given the seed.

    Sequential renormalized draws, so the K=1 sample is always a prefix of
    the K=20 sample under the same seed (nested sampling).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rows, cols = dist.probs.shape
    p = dist.probs.reshape(-1).astype(np.float64).copy()
    rng = np.random.default_rng(seed)
    chosen = []
    for _ in range(K):
        total = p.sum()
        if total <= 0.0:
            break
        cum = np.cumsum(p)
        u = rng.random() * cum[-1]
        idx = int(np.searchsorted(cum, u, side="right"))
        idx = min(idx, p.size - 1)
        while p[idx] == 0.0:  # guard against float edge at segment boundaries
            idx = (idx + 1) % p.size
        chosen.append(Cell(idx // cols, idx % cols))
        p[idx] = 0.0
    return chosen
