"""Waypoint-conditioned trajectory generation.

A GRU encodes past displacements, a bidirectional GRU encodes the planned
waypoints, and a GRU decoder with additive attention over the waypoint
encodings emits future displacements that integrate to a continuous
trajectory. All coordinates are normalized to the agent frame (translated
by the last observed position, scaled by the grid diagonal), which makes
prediction translation-equivariant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from scenecast import nn
from scenecast.goal_model import GoalModel, sample_goals
from scenecast.grid_scene import Cell, GridScene, GridSpec, cell_to_world, world_to_cell
from scenecast.irl import RewardModel, rollout_paths, soft_value_iteration

log = logging.getLogger(__name__)

CHECKPOINT_COMPONENT = "traj_gen"

PAST_HIDDEN = 32
ENC_HIDDEN = 32  # per direction; keys are 2 * ENC_HIDDEN wide
DEC_HIDDEN = 64
ATT_HIDDEN = 64


@dataclass(frozen=True)
class PredictionEntry:
    goal: Cell
    waypoints: np.ndarray  # (M, 2) world coordinates (cell centers)
    trajectory: np.ndarray  # (T_pred, 2) world coordinates


@dataclass
class PredictionSet:
    entries: list[PredictionEntry]
    k_requested: int
    seed: int

    def __len__(self):
        return len(self.entries)

    def trajectories(self) -> np.ndarray:
        return np.stack([e.trajectory for e in self.entries])

    def to_json(self) -> dict:
        return {
            "k_requested": self.k_requested,
            "seed": self.seed,
            "entries": [
                {
                    "goal": [e.goal.row, e.goal.col],
                    "waypoints": e.waypoints.tolist(),
                    "trajectory": e.trajectory.tolist(),
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PredictionSet":
        entries = [
            PredictionEntry(
                goal=Cell(*e["goal"]),
                waypoints=np.array(e["waypoints"], dtype=np.float64),
                trajectory=np.array(e["trajectory"], dtype=np.float64),
            )
            for e in doc["entries"]
        ]
        return cls(entries=entries, k_requested=doc["k_requested"], seed=doc["seed"])


class TrajGenModel:
    """Past encoder + bidirectional waypoint encoder + attention decoder."""

    def __init__(self, ps: nn.ParamSet, t_obs: int, t_pred: int):
        self.ps = ps
        self.t_obs = t_obs
        self.t_pred = t_pred

    @classmethod
    def create(cls, t_obs: int = 8, t_pred: int = 12, seed: int = 0) -> "TrajGenModel":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 303)))
        ps = nn.ParamSet()
        for name, value in nn.init_gru_params(rng, 2, PAST_HIDDEN).items():
            ps.add(f"past.{name}", value)
        ps.add("init.W", nn.uniform_init(rng, (DEC_HIDDEN, PAST_HIDDEN), PAST_HIDDEN))
        ps.add("init.b", np.zeros(DEC_HIDDEN))
        for name, value in nn.init_gru_params(rng, 2, ENC_HIDDEN).items():
            ps.add(f"wpf.{name}", value)
        for name, value in nn.init_gru_params(rng, 2, ENC_HIDDEN).items():
            ps.add(f"wpb.{name}", value)
        for name, value in nn.init_attention_params(
                rng, DEC_HIDDEN, 2 * ENC_HIDDEN, ATT_HIDDEN).items():
            ps.add(f"att.{name}", value)
        for name, value in nn.init_gru_params(rng, 2 + 2 * ENC_HIDDEN, DEC_HIDDEN).items():
            ps.add(f"dec.{name}", value)
        ps.add("out.W", nn.uniform_init(rng, (2, DEC_HIDDEN), DEC_HIDDEN))
        ps.add("out.b", np.zeros(2))
        return cls(ps, t_obs=t_obs, t_pred=t_pred)

    def _gru(self, prefix: str) -> dict:
        return {name: self.ps[f"{prefix}.{name}"] for name in nn.GRU_PARAM_NAMES}

    def _att(self) -> dict:
        return {name: self.ps[f"att.{name}"] for name in ("W_q", "W_k", "b", "v")}

    # -- encoders ----------------------------------------------------------

    def encode_past(self, past: np.ndarray, spec: GridSpec):
        """GRU over normalized past displacements -> decoder initial hidden."""
        disps = np.diff(np.asarray(past, dtype=np.float64), axis=0) / spec.diagonal
        gp = self._gru("past")
        h = np.zeros(PAST_HIDDEN)
        caches = []
        for t in range(disps.shape[0]):
            h, c = nn.gru_step(disps[t], h, gp)
            caches.append(c)
        h0 = nn.dense_forward(h, self.ps["init.W"], self.ps["init.b"])
        return h0, (disps, caches, h)

    def _encode_past_backward(self, dh0, cache):
        disps, caches, h_last = cache
        dh, dW, db = nn.dense_backward(dh0, h_last, self.ps["init.W"])
        self.ps.grads["init.W"] += dW
        self.ps.grads["init.b"] += db
        gp = self._gru("past")
        for t in range(len(caches) - 1, -1, -1):
            _, dh, grads = nn.gru_step_backward(dh, caches[t], gp)
            for name, g in grads.items():
                self.ps.grads[f"past.{name}"] += g

    def encode_waypoints(self, waypoints_norm: np.ndarray):
        """Bidirectional GRU keys; key_i = concat(forward_i, backward_i)."""
        w = np.asarray(waypoints_norm, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ValueError("need at least one waypoint")
        m = w.shape[0]
        gf, gb = self._gru("wpf"), self._gru("wpb")
        fwd = np.zeros((m, ENC_HIDDEN))
        bwd = np.zeros((m, ENC_HIDDEN))
        fcaches, bcaches = [], []
        h = np.zeros(ENC_HIDDEN)
        for i in range(m):
            h, c = nn.gru_step(w[i], h, gf)
            fwd[i] = h
            fcaches.append(c)
        h = np.zeros(ENC_HIDDEN)
        for i in range(m - 1, -1, -1):
            h, c = nn.gru_step(w[i], h, gb)
            bwd[i] = h
            bcaches.append(c)  # order m-1 .. 0
        keys = np.concatenate([fwd, bwd], axis=1)
        return keys, (w, fcaches, bcaches)

    def _encode_waypoints_backward(self, dkeys, cache):
        w, fcaches, bcaches = cache
        m = w.shape[0]
        gf, gb = self._gru("wpf"), self._gru("wpb")
        dh = np.zeros(ENC_HIDDEN)
        for i in range(m - 1, -1, -1):
            dh = dh + dkeys[i, :ENC_HIDDEN]
            _, dh, grads = nn.gru_step_backward(dh, fcaches[i], gf)
            for name, g in grads.items():
                self.ps.grads[f"wpf.{name}"] += g
        dh = np.zeros(ENC_HIDDEN)
        # bcaches[p] holds input index m-1-p; the backward GRU's latest step
        # is input 0, so reverse-time BPTT walks p = m-1 .. 0.
        for p in range(m - 1, -1, -1):
            i = m - 1 - p
            dh = dh + dkeys[i, ENC_HIDDEN:]
            _, dh, grads = nn.gru_step_backward(dh, bcaches[p], gb)
            for name, g in grads.items():
                self.ps.grads[f"wpb.{name}"] += g

    # -- decoder -----------------------------------------------------------

    def decode(self, h0: np.ndarray, keys: np.ndarray, first_disp: np.ndarray):
        """Roll the attention decoder; returns (deltas, weights, cache).

        deltas: (t_pred, 2) normalized displacements; weights: (t_pred, M)
        attention weights per step.
        """
        ap = self._att()
        gd = self._gru("dec")
        h = h0
        prev = np.asarray(first_disp, dtype=np.float64)
        deltas = np.zeros((self.t_pred, 2))
        weights = np.zeros((self.t_pred, keys.shape[0]))
        steps = []
        for t in range(self.t_pred):
            context, w_t, att_cache = nn.additive_attention(h, keys, ap)
            x = np.concatenate([prev, context])
            h_new, gru_cache = nn.gru_step(x, h, gd)
            delta = nn.dense_forward(h_new, self.ps["out.W"], self.ps["out.b"])
            steps.append((att_cache, gru_cache, h_new))
            deltas[t] = delta
            weights[t] = w_t
            prev = delta
            h = h_new
        return deltas, weights, steps

    def _decode_backward(self, ddeltas, steps, keys):
        ap = self._att()
        gd = self._gru("dec")
        dkeys = np.zeros_like(keys)
        dh = np.zeros(DEC_HIDDEN)
        dprev = np.zeros(2)
        for t in range(len(steps) - 1, -1, -1):
            att_cache, gru_cache, h_new = steps[t]
            ddelta = ddeltas[t] + dprev  # loss gradient + feedback into step t+1
            dh_new, dW, db = nn.dense_backward(ddelta, h_new, self.ps["out.W"])
            self.ps.grads["out.W"] += dW
            self.ps.grads["out.b"] += db
            dh_new = dh_new + dh
            dx, dh, grads = nn.gru_step_backward(dh_new, gru_cache, gd)
            for name, g in grads.items():
                self.ps.grads[f"dec.{name}"] += g
            dprev = dx[:2]
            dcontext = dx[2:]
            dquery, dk, agrads = nn.additive_attention_backward(
                dcontext, None, att_cache, ap)
            for name, g in agrads.items():
                self.ps.grads[f"att.{name}"] += g
            dkeys += dk
            dh = dh + dquery
        return dkeys, dh  # dh flows into h0

    # -- end to end --------------------------------------------------------

    def _normalize(self, past, waypoints_world, spec: GridSpec):
        origin = np.asarray(past, dtype=np.float64)[-1]
        scale = spec.diagonal
        wp = (np.asarray(waypoints_world, dtype=np.float64) - origin) / scale
        return origin, scale, wp

    def generate(self, past: np.ndarray, waypoints_world: np.ndarray,
                 spec: GridSpec, return_weights: bool = False):
        """Predict t_pred world points along the waypoint path."""
        origin, scale, wp = self._normalize(past, waypoints_world, spec)
        h0, _ = self.encode_past(past, spec)
        keys, _ = self.encode_waypoints(wp)
        first = (past[-1] - past[-2]) / scale
        deltas, weights, _ = self.decode(h0, keys, first)
        points = origin[None, :] + np.cumsum(deltas, axis=0) * scale
        if return_weights:
            return points, weights
        return points

    def loss_and_grads(self, past, waypoints_world, future, spec: GridSpec,
                       accumulate: bool = True) -> float:
        """MSE between predicted and true future points (normalized units)."""
        origin, scale, wp = self._normalize(past, waypoints_world, spec)
        h0, past_cache = self.encode_past(past, spec)
        keys, wp_cache = self.encode_waypoints(wp)
        first = (past[-1] - past[-2]) / scale
        deltas, _, steps = self.decode(h0, keys, first)
        points = np.cumsum(deltas, axis=0)
        target = (np.asarray(future, dtype=np.float64) - origin) / scale
        diff = points - target
        loss = float(np.mean(np.sum(diff * diff, axis=1)))
        if accumulate:
            dpoints = 2.0 * diff / diff.shape[0]
            ddeltas = np.cumsum(dpoints[::-1], axis=0)[::-1]  # reverse cumsum
            dkeys, dh0 = self._decode_backward(ddeltas, steps, keys)
            self._encode_waypoints_backward(dkeys, wp_cache)
            self._encode_past_backward(dh0, past_cache)
        return loss

    def save(self, path, extra_config: dict | None = None) -> None:
        config = {"t_obs": self.t_obs, "t_pred": self.t_pred,
                  "past_hidden": PAST_HIDDEN, "enc_hidden": ENC_HIDDEN,
                  "dec_hidden": DEC_HIDDEN, "att_hidden": ATT_HIDDEN}
        if extra_config:
            config.update(extra_config)
        nn.save_checkpoint(path, CHECKPOINT_COMPONENT, self.ps, config)

    @classmethod
    def load(cls, path) -> "TrajGenModel":
        component, ps, config = nn.load_checkpoint(path)
        if component != CHECKPOINT_COMPONENT:
            raise ValueError(f"checkpoint is {component!r}, expected traj_gen")
        model = cls(ps, t_obs=config["t_obs"], t_pred=config["t_pred"])
        model.extra_config = config
        return model


# ---------------------------------------------------------------------------
# training


def teacher_waypoints(reward_model: RewardModel, scene: GridScene,
                      past: np.ndarray, goal: Cell,
                      vi_tol: float = 1e-9, vi_max_sweeps=None) -> np.ndarray | None:
    """Waypoints from rolling the learned policy out to the true goal."""
    rmap = reward_model.reward(scene, past)
    solution = soft_value_iteration(rmap, goal, max_sweeps=vi_max_sweeps, tol=vi_tol)
    if not solution.converged:
        return None
    start, _ = world_to_cell(past[-1], scene.spec)
    path = rollout_paths(solution, start, n=1, mode="most_likely")[0]
    return np.array([cell_to_world(Cell(int(r), int(c)), scene.spec)
                     for r, c in path.cells])


def train_traj_gen(train, val, scenes: dict, model: TrajGenModel,
                   epochs: int = 40, lr: float = 5e-3, seed: int = 0):
    """Full-batch Adam on mean trajectory MSE; returns (model, log).

    ``train`` / ``val`` are lists of (TrajectoryInstance, waypoints) pairs,
    the waypoints being the teacher path toward the instance's true goal.
    """
    if not train:
        raise ValueError("empty training set")

    def mean_loss(items, accumulate):
        total = 0.0
        for inst, wps in items:
            spec = scenes[inst.scene_ref].spec
            total += model.loss_and_grads(inst.past, wps, inst.future, spec,
                                          accumulate=accumulate)
        return total / len(items)

    opt = nn.OptimizerState(lr=lr)
    history = {"train_mse": [], "val_mse": [], "best_epoch": None,
               "init_val_mse": mean_loss(val, False) if val else float("nan")}
    best_val = np.inf
    best_params = {k: v.copy() for k, v in model.ps.params.items()}
    for epoch in range(epochs):
        model.ps.zero_grads()
        train_mse = mean_loss(train, accumulate=True)
        model.ps.scale_grads(1.0 / len(train))
        nn.adam_update(model.ps, opt)
        val_mse = mean_loss(val, False) if val else train_mse
        history["train_mse"].append(train_mse)
        history["val_mse"].append(val_mse)
        if val_mse < best_val:
            best_val = val_mse
            best_params = {k: v.copy() for k, v in model.ps.params.items()}
            history["best_epoch"] = epoch
    for name, value in best_params.items():
        model.ps.params[name][...] = value
    return model, history


# ---------------------------------------------------------------------------
# full three-stage prediction


def predict(scene: GridScene, past: np.ndarray, goal_model: GoalModel,
            reward_model: RewardModel, traj_model: TrajGenModel,
            K: int, seed: int, vi_tol: float = 1e-9,
            vi_max_sweeps=None) -> PredictionSet:
    """Goal sampling -> per-goal soft-optimal rollout -> trajectory decode.

    Unconverged policies drop their goal with a warning; if every goal
    drops, prediction fails.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    dist = goal_model.distribution(scene, past)
    goals = sample_goals(dist, K, seed)
    rmap = reward_model.reward(scene, past)
    start, _ = world_to_cell(past[-1], scene.spec)
    entries = []
    for goal in goals:
        solution = soft_value_iteration(rmap, goal, max_sweeps=vi_max_sweeps,
                                        tol=vi_tol)
        if not solution.converged:
            log.warning("dropping goal %s: soft VI did not converge", goal)
            continue
        path = rollout_paths(solution, start, n=1, mode="most_likely")[0]
        waypoints = np.array([cell_to_world(Cell(int(r), int(c)), scene.spec)
                              for r, c in path.cells])
        trajectory = traj_model.generate(past, waypoints, scene.spec)
        entries.append(PredictionEntry(goal=goal, waypoints=waypoints,
                                       trajectory=trajectory))
    if not entries:
        raise RuntimeError("all sampled goals produced unconverged policies")
    return PredictionSet(entries=entries, k_requested=K, seed=seed)
