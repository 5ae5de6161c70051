"""Shared two-branch network: scene FCN + past-motion GRU with a polar head.

The goal and reward models share this architecture (with independent
weights): a small fully convolutional stack maps per-cell scene features to
one value per cell, while a GRU over past displacements emits activations
on a distance x orientation polar grid that are splatted onto the cell grid
by bilinear interpolation in (distance, orientation) space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scenecast import nn
from scenecast.grid_scene import GridScene, GridSpec

DEFAULT_CONV_CHANNELS = (8, 16, 1)
DEFAULT_GRU_HIDDEN = 32
DEFAULT_N_DISTANCE_BINS = 8
DEFAULT_N_ORIENTATION_BINS = 8


@dataclass(frozen=True)
class AgentFrame:
    """Reference frame for the polar head: last position plus heading."""

    position: np.ndarray
    heading: float
    stationary: bool = False


@dataclass
class TwoBranchConfig:
    c_f: int
    conv_channels: tuple = DEFAULT_CONV_CHANNELS
    gru_hidden: int = DEFAULT_GRU_HIDDEN
    distance_centers: np.ndarray = None
    orientation_centers: np.ndarray = None

    def __post_init__(self):
        self.distance_centers = np.asarray(self.distance_centers, dtype=np.float64)
        self.orientation_centers = np.asarray(self.orientation_centers, dtype=np.float64)
        if self.distance_centers.size < 2 or self.orientation_centers.size < 2:
            raise ValueError("need at least 2 distance and 2 orientation bins")
        if np.any(np.diff(self.distance_centers) <= 0):
            raise ValueError("distance centers must be strictly increasing")
        gaps = np.diff(self.orientation_centers)
        if not np.allclose(gaps, gaps[0]):
            raise ValueError("orientation centers must be equally spaced")

    @property
    def n_distance(self) -> int:
        return self.distance_centers.size

    @property
    def n_orientation(self) -> int:
        return self.orientation_centers.size

    def to_json(self) -> dict:
        return {
            "c_f": self.c_f,
            "conv_channels": list(self.conv_channels),
            "gru_hidden": self.gru_hidden,
            "distance_centers": self.distance_centers.tolist(),
            "orientation_centers": self.orientation_centers.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TwoBranchConfig":
        return cls(
            c_f=doc["c_f"],
            conv_channels=tuple(doc["conv_channels"]),
            gru_hidden=doc["gru_hidden"],
            distance_centers=np.array(doc["distance_centers"]),
            orientation_centers=np.array(doc["orientation_centers"]),
        )


def default_bins(spec: GridSpec, n_distance=DEFAULT_N_DISTANCE_BINS,
                 n_orientation=DEFAULT_N_ORIENTATION_BINS):
    """Distance bins span [0, half grid diagonal]; orientations cover the circle."""
    distance = np.linspace(0.0, spec.diagonal / 2.0, n_distance)
    orientation = np.arange(n_orientation) * (2.0 * np.pi / n_orientation)
    return distance, orientation


def init_two_branch_params(rng: np.random.Generator, cfg: TwoBranchConfig) -> nn.ParamSet:
    ps = nn.ParamSet()
    chans = (cfg.c_f,) + tuple(cfg.conv_channels)
    for i in range(len(cfg.conv_channels)):
        fan_in = chans[i] * 9
        ps.add(f"conv{i}.W", nn.uniform_init(rng, (chans[i + 1], chans[i], 3, 3), fan_in))
        ps.add(f"conv{i}.b", np.zeros(chans[i + 1]))
    for name, value in nn.init_gru_params(rng, 2, cfg.gru_hidden).items():
        ps.add(f"gru.{name}", value)
    head_in = cfg.gru_hidden + 1  # +1 for the stationary flag
    head_out = cfg.n_distance * cfg.n_orientation
    ps.add("head.W", nn.uniform_init(rng, (head_out, head_in), head_in))
    ps.add("head.b", np.zeros(head_out))
    return ps


def gru_view(ps: nn.ParamSet, prefix: str = "gru.") -> dict:
    return {name: ps[prefix + name] for name in nn.GRU_PARAM_NAMES}


def agent_frame(past: np.ndarray) -> AgentFrame:
    """Last observed position and the heading of the last nonzero step.

    Scans displacement pairs backwards; a fully stationary track gets
    heading 0 and the stationary flag.
    """
    past = np.asarray(past, dtype=np.float64)
    if past.shape[0] < 2:
        raise ValueError("need at least 2 past points")
    position = past[-1].copy()
    for i in range(past.shape[0] - 1, 0, -1):
        d = past[i] - past[i - 1]
        if d[0] != 0.0 or d[1] != 0.0:
            return AgentFrame(position=position, heading=float(np.arctan2(d[1], d[0])))
    return AgentFrame(position=position, heading=0.0, stationary=True)


def polar_cell_weights(frame: AgentFrame, spec: GridSpec, distance_centers,
                       orientation_centers):
    """Per-cell bilinear interpolation indices/weights in polar bin space.

    Distances beyond the last bin center clamp to the outermost bin;
    orientation interpolation wraps circularly.
    """
    rows, cols = spec.rows, spec.cols
    cx = spec.origin[0] + (np.arange(cols) + 0.5) * spec.cell_size
    cy = spec.origin[1] + (np.arange(rows) + 0.5) * spec.cell_size
    dx = cx[None, :] - frame.position[0]
    dy = cy[:, None] - frame.position[1]
    dist = np.hypot(dx, dy).ravel()
    theta = np.arctan2(dy, dx).ravel() - frame.heading
    theta = np.mod(theta - orientation_centers[0], 2.0 * np.pi)

    dc = distance_centers
    j0 = np.clip(np.searchsorted(dc, dist, side="right") - 1, 0, dc.size - 1)
    j1 = np.minimum(j0 + 1, dc.size - 1)
    span = dc[j1] - dc[j0]
    with np.errstate(invalid="ignore", divide="ignore"):
        wd = np.where(span > 0, (dist - dc[j0]) / np.where(span > 0, span, 1.0), 0.0)
    wd = np.clip(wd, 0.0, 1.0)  # clamp beyond the outermost center

    n_o = orientation_centers.size
    gap = 2.0 * np.pi / n_o
    k0 = np.floor(theta / gap).astype(np.int64) % n_o
    k1 = (k0 + 1) % n_o
    wo = theta / gap - np.floor(theta / gap)
    return j0, j1, wd, k0, k1, wo


def polar_to_grid(activations: np.ndarray, frame: AgentFrame, spec: GridSpec,
                  distance_centers, orientation_centers, cache=None):
    """Splat D x O activations onto the cell grid; returns (grid, cache)."""
    if cache is None:
        cache = polar_cell_weights(frame, spec, distance_centers, orientation_centers)
    j0, j1, wd, k0, k1, wo = cache
    a = activations
    flat = (
        (1.0 - wd) * (1.0 - wo) * a[j0, k0]
        + (1.0 - wd) * wo * a[j0, k1]
        + wd * (1.0 - wo) * a[j1, k0]
        + wd * wo * a[j1, k1]
    )
    return flat.reshape(spec.rows, spec.cols), cache


def polar_to_grid_backward(dgrid, cache, n_distance: int, n_orientation: int):
    j0, j1, wd, k0, k1, wo = cache
    up = dgrid.ravel()
    dacts = np.zeros((n_distance, n_orientation))
    np.add.at(dacts, (j0, k0), (1.0 - wd) * (1.0 - wo) * up)
    np.add.at(dacts, (j0, k1), (1.0 - wd) * wo * up)
    np.add.at(dacts, (j1, k0), wd * (1.0 - wo) * up)
    np.add.at(dacts, (j1, k1), wd * wo * up)
    return dacts


def scene_branch_forward(scene: GridScene, cfg: TwoBranchConfig, ps: nn.ParamSet):
    """Conv stack over per-cell features; one logit per cell."""
    x = np.ascontiguousarray(scene.features.transpose(2, 0, 1))
    caches = []
    h = x
    last = len(cfg.conv_channels) - 1
    for i in range(len(cfg.conv_channels)):
        a, conv_cache = nn.conv3x3_forward(h, ps[f"conv{i}.W"], ps[f"conv{i}.b"])
        if i < last:
            h, mask = nn.relu_forward(a)
        else:
            h, mask = a, None
        caches.append((conv_cache, mask))
    return h[0], caches


def scene_branch_backward(dgrid, caches, cfg: TwoBranchConfig, ps: nn.ParamSet):
    upstream = dgrid[None, :, :]
    for i in range(len(cfg.conv_channels) - 1, -1, -1):
        conv_cache, mask = caches[i]
        if mask is not None:
            upstream = nn.relu_backward(upstream, mask)
        upstream, dK, db = nn.conv3x3_backward(upstream, conv_cache)
        ps.grads[f"conv{i}.W"] += dK
        ps.grads[f"conv{i}.b"] += db


def motion_branch_forward(past: np.ndarray, spec: GridSpec, cfg: TwoBranchConfig,
                          ps: nn.ParamSet):
    """GRU over normalized past displacements, polar head, grid splat."""
    past = np.asarray(past, dtype=np.float64)
    frame = agent_frame(past)
    disps = np.diff(past, axis=0) / spec.diagonal
    gp = gru_view(ps)
    h = np.zeros(cfg.gru_hidden)
    step_caches = []
    for t in range(disps.shape[0]):
        h, c = nn.gru_step(disps[t], h, gp)
        step_caches.append(c)
    head_in = np.concatenate([h, [1.0 if frame.stationary else 0.0]])
    acts = nn.dense_forward(head_in, ps["head.W"], ps["head.b"])
    acts = acts.reshape(cfg.n_distance, cfg.n_orientation)
    grid, pcache = polar_to_grid(acts, frame, spec, cfg.distance_centers,
                                 cfg.orientation_centers)
    cache = (frame, disps, step_caches, head_in, acts, pcache)
    return grid, frame, cache


def motion_branch_backward(dgrid, cache, cfg: TwoBranchConfig, ps: nn.ParamSet):
    frame, disps, step_caches, head_in, acts, pcache = cache
    dacts = polar_to_grid_backward(dgrid, pcache, cfg.n_distance, cfg.n_orientation)
    dhead_in, dW, db = nn.dense_backward(dacts.reshape(-1), head_in, ps["head.W"])
    ps.grads["head.W"] += dW
    ps.grads["head.b"] += db
    dh = dhead_in[: cfg.gru_hidden]
    gp = gru_view(ps)
    for t in range(len(step_caches) - 1, -1, -1):
        _, dh, grads = nn.gru_step_backward(dh, step_caches[t], gp)
        for name, g in grads.items():
            ps.grads[f"gru.{name}"] += g


def two_branch_forward(scene: GridScene, past: np.ndarray, cfg: TwoBranchConfig,
                       ps: nn.ParamSet):
    """Returns (scene_grid, motion_grid, frame, cache)."""
    scene_grid, conv_caches = scene_branch_forward(scene, cfg, ps)
    motion_grid, frame, motion_cache = motion_branch_forward(past, scene.spec, cfg, ps)
    return scene_grid, motion_grid, frame, (conv_caches, motion_cache)


def two_branch_backward(dscene_grid, dmotion_grid, cache, cfg: TwoBranchConfig,
                        ps: nn.ParamSet):
    conv_caches, motion_cache = cache
    scene_branch_backward(dscene_grid, conv_caches, cfg, ps)
    motion_branch_backward(dmotion_grid, motion_cache, cfg, ps)
