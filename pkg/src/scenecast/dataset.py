"""Trajectory ingestion, windowing, and the synthetic-scene harness.

Tracks come from a canonical CSV (header scene_id,agent_id,frame,x,y) with
a sidecar JSON per scene describing the raster, fps and grid geometry.
Synthetic worlds (corridor / junction / obstacle_field) carry ground-truth
rewards and softmax-optimal demonstrations, which is what makes the IRL
recovery tests oracle-grade: the demonstrator model is exactly the model
the learner assumes.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from scenecast import ppm
from scenecast.grid_scene import Cell, GridScene, GridSpec, build_grid, cell_to_world
from scenecast.irl import RewardMap, rollout_paths, soft_value_iteration

# Synthetic true rewards. Obstacles cost R_MAX; free cells cost a per-step
# penalty. The step cost must exceed ln(9) ~ 2.2 or the soft Bellman path
# sum over the 9-action grid diverges and no directed demonstrator exists;
# -3 keeps soft VI contracting fast while obstacles stay 7 units worse.
# Corridors use a steeper cost so that sampled demos are strictly monotone
# along the corridor axis (backward-step odds ~ e^-10 per step).
FREE_REWARD = -3.0
OBSTACLE_REWARD = -10.0
KIND_FREE_REWARD = {"corridor": -6.0, "junction": -3.0, "obstacle_field": -3.0}

LABEL_FREE = 0
LABEL_OBSTACLE = 1
LABEL_GOAL = 2

SYNTH_KINDS = ("corridor", "junction", "obstacle_field")


class TrackParseError(ValueError):
    pass


@dataclass(frozen=True)
class Track:
    scene_id: str
    agent_id: str
    samples: np.ndarray  # (n, 3): frame, x, y; frames strictly increasing

    def __post_init__(self):
        if self.samples.shape[0] < 2:
            raise ValueError("track needs at least 2 samples")
        if np.any(np.diff(self.samples[:, 0]) <= 0):
            raise ValueError("frames must be strictly increasing")


@dataclass(frozen=True)
class TrajectoryInstance:
    scene_ref: str
    past: np.ndarray  # (T_obs, 2)
    future: np.ndarray  # (T_pred, 2)
    t0_frame: int
    agent_id: str = ""
    index: int = 0

    @property
    def instance_id(self) -> str:
        return f"{self.scene_ref}:{self.agent_id}:{self.index}"


@dataclass
class DemoInstance:
    """IRL training item: past motion plus a demonstration cell path."""

    scene_ref: str
    past: np.ndarray  # (>=2, 2) world points
    cells: np.ndarray  # (L, 2) int cell path ending at the demo goal


@dataclass
class SyntheticWorld:
    scene: GridScene
    true_reward: np.ndarray
    goal_cells: list[Cell]
    demos: list[np.ndarray] = field(default_factory=list)

    @property
    def free_mask(self) -> np.ndarray:
        return self.scene.semantic_labels != LABEL_OBSTACLE


# ---------------------------------------------------------------------------
# canonical CSV


def load_tracks(path) -> list[Track]:
    """Parse the canonical CSV into per-(scene, agent) tracks.

    Rows are grouped by (scene_id, agent_id) and sorted by frame. All
    malformed rows are collected and reported with their line numbers.
    """
    groups: dict[tuple[str, str], list[tuple[int, float, float]]] = {}
    errors: list[str] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["scene_id", "agent_id", "frame", "x", "y"]:
            raise TrackParseError(f"{path}: bad or missing header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                errors.append(f"line {lineno}: expected 5 columns, got {len(row)}")
                continue
            scene_id, agent_id, frame_s, x_s, y_s = row
            try:
                frame = int(frame_s)
                x = float(x_s)
                y = float(y_s)
            except ValueError:
                errors.append(f"line {lineno}: non-numeric frame/x/y {row[2:]!r}")
                continue
            if not (np.isfinite(x) and np.isfinite(y)):
                errors.append(f"line {lineno}: non-finite coordinates")
                continue
            groups.setdefault((scene_id, agent_id), []).append((frame, x, y))
    if errors:
        raise TrackParseError(f"{path}: " + "; ".join(errors))

    tracks = []
    for (scene_id, agent_id), rows in groups.items():
        rows.sort(key=lambda r: r[0])
        frames = [r[0] for r in rows]
        dupes = {f for a, b in zip(frames, frames[1:]) if a == b for f in (a,)}
        if dupes:
            raise TrackParseError(
                f"{path}: duplicate (agent {agent_id!r}, frame) pairs at frames {sorted(dupes)}")
        if len(rows) >= 2:
            tracks.append(Track(scene_id=scene_id, agent_id=agent_id,
                                samples=np.array(rows, dtype=np.float64)))
    tracks.sort(key=lambda t: (t.scene_id, t.agent_id))
    return tracks


def resample_track(track: Track, fps: float, rate_hz: float) -> np.ndarray:
    """Linear interpolation of the track at rate_hz; returns (m, 2) points."""
    t = track.samples[:, 0] / fps
    n = int(np.floor((t[-1] - t[0]) * rate_hz + 1e-9)) + 1
    times = t[0] + np.arange(n) / rate_hz
    x = np.interp(times, t, track.samples[:, 1])
    y = np.interp(times, t, track.samples[:, 2])
    return np.column_stack([x, y])


def window_instances(track: Track, fps: float, rate_hz: float = 2.5,
                     t_obs: int = 8, t_pred: int = 12,
                     stride: int = 1) -> list[TrajectoryInstance]:
    """Sliding past/future windows over the resampled track.

    The defaults (2.5 Hz, 8 past, 12 future points) give a 3.2 s history
    and a 4.8 s prediction horizon. Tracks shorter than one window yield
    an empty list.
    """
    if t_obs < 1 or t_pred < 1:
        raise ValueError("t_obs and t_pred must be >= 1")
    pts = resample_track(track, fps, rate_hz)
    window = t_obs + t_pred
    out = []
    frames_per_sample = fps / rate_hz
    for k, start in enumerate(range(0, pts.shape[0] - window + 1, stride)):
        t0 = int(round(track.samples[0, 0] + start * frames_per_sample))
        out.append(TrajectoryInstance(
            scene_ref=track.scene_id,
            past=pts[start:start + t_obs].copy(),
            future=pts[start + t_obs:start + window].copy(),
            t0_frame=t0,
            agent_id=track.agent_id,
            index=k,
        ))
    return out


# ---------------------------------------------------------------------------
# synthetic worlds


def _paint_raster(labels: np.ndarray, cell_px: int, rng: np.random.Generator) -> np.ndarray:
    rows, cols = labels.shape
    base = np.empty((rows, cols, 3))
    base[labels == LABEL_FREE] = (0.84, 0.84, 0.78)
    base[labels == LABEL_OBSTACLE] = (0.22, 0.18, 0.18)
    base[labels == LABEL_GOAL] = (0.20, 0.78, 0.25)
    img = np.repeat(np.repeat(base, cell_px, axis=0), cell_px, axis=1)
    img += rng.uniform(-0.03, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_scene(seed: int, kind: str, rows: int = 64, cols: int = 64,
                cell_px: int = 4) -> SyntheticWorld:
    """Deterministic synthetic world of the given kind (no demos yet).

    The raster encodes semantics by color (free / obstacle / goal), the
    label grid mirrors it, and true_reward is FREE_REWARD on free cells
    and OBSTACLE_REWARD on obstacles.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, hash_kind(kind))))
    labels = np.full((rows, cols), LABEL_OBSTACLE, dtype=np.int64)
    goals: list[Cell] = []

    if kind == "corridor":
        width = int(rng.integers(3, 6))
        horizontal = bool(rng.integers(0, 2))
        if horizontal:
            r0 = int(rng.integers(1, rows - width - 1))
            labels[r0:r0 + width, :] = LABEL_FREE
            mid = r0 + width // 2
            goals = [Cell(mid, 1), Cell(mid, cols - 2)]
        else:
            c0 = int(rng.integers(1, cols - width - 1))
            labels[:, c0:c0 + width] = LABEL_FREE
            mid = c0 + width // 2
            goals = [Cell(1, mid), Cell(rows - 2, mid)]
    elif kind == "junction":
        width = int(rng.integers(3, max(4, min(6, rows // 4 + 1, cols // 4 + 1))))
        rc = int(rng.integers(rows // 3, max(rows // 3 + 1, 2 * rows // 3 - width)))
        cc = int(rng.integers(cols // 3, max(cols // 3 + 1, 2 * cols // 3 - width)))
        labels[rc:rc + width, :] = LABEL_FREE
        labels[:, cc:cc + width] = LABEL_FREE
        rmid, cmid = rc + width // 2, cc + width // 2
        goals = [Cell(rmid, 1), Cell(rmid, cols - 2), Cell(1, cmid), Cell(rows - 2, cmid)]
        if rng.integers(0, 4) == 0:  # sometimes a T junction: drop one arm
            drop = int(rng.integers(0, 4))
            if drop == 0:
                labels[rc:rc + width, :cc] = LABEL_OBSTACLE
            elif drop == 1:
                labels[rc:rc + width, cc + width:] = LABEL_OBSTACLE
            elif drop == 2:
                labels[:rc, cc:cc + width] = LABEL_OBSTACLE
            else:
                labels[rc + width:, cc:cc + width] = LABEL_OBSTACLE
            goals.pop(drop)
    else:  # obstacle_field
        # ~35% obstacle coverage: a rank metric between a two-valued truth
        # and any score saturates at sqrt(3 p (1-p)), so sparse fields make
        # reward-recovery checks insensitive no matter how good the reward.
        labels[:, :] = LABEL_FREE
        n_blobs = int(rng.integers(rows * cols // 11, rows * cols // 8))
        for _ in range(n_blobs):
            br = int(rng.integers(1, rows - 3))
            bc = int(rng.integers(1, cols - 3))
            h = int(rng.integers(1, 4))
            w = int(rng.integers(1, 4))
            labels[br:br + h, bc:bc + w] = LABEL_OBSTACLE
        free_r, free_c = np.nonzero(labels == LABEL_FREE)
        n_goals = 3
        pick = rng.choice(free_r.size, size=n_goals, replace=False)
        goals = [Cell(int(free_r[i]), int(free_c[i])) for i in pick]

    for g in goals:
        labels[g.row, g.col] = LABEL_GOAL

    true_reward = np.where(labels == LABEL_OBSTACLE, OBSTACLE_REWARD,
                           KIND_FREE_REWARD[kind])
    raster = _paint_raster(labels, cell_px, rng)
    spec = GridSpec(rows=rows, cols=cols, cell_size=float(cell_px), origin=(0.0, 0.0))
    scene = build_grid(raster, spec, semantic_labels=labels)
    return SyntheticWorld(scene=scene, true_reward=true_reward.astype(np.float64),
                          goal_cells=goals)


def hash_kind(kind: str) -> int:
    return {"corridor": 11, "junction": 23, "obstacle_field": 37}[kind]


def true_reward_map(world: SyntheticWorld) -> RewardMap:
    return RewardMap.from_total(world.true_reward)


def solve_true_policies(world: SyntheticWorld, tol: float = 1e-9):
    """Soft-optimal policy on the true reward, one per goal cell."""
    rmap = true_reward_map(world)
    return {g: soft_value_iteration(rmap, g, tol=tol) for g in world.goal_cells}


def synth_demos(world: SyntheticWorld, n: int, seed: int,
                max_attempts: int = 50) -> list[np.ndarray]:
    """Sample n demonstrations from the softmax-optimal agent.

    Start cells and goals are drawn uniformly; each demo follows the
    stochastic soft-optimal policy until absorption (step cap
    4*(rows+cols); failures are resampled). Demo i depends only on
    (seed, i), so generation is schedule-independent.
    """
    if not world.goal_cells:
        raise ValueError("world has no goal cells")
    labels = world.scene.semantic_labels
    free_r, free_c = np.nonzero(labels != LABEL_OBSTACLE)
    if free_r.size == 0:
        raise ValueError("world has no free start cells")
    policies = solve_true_policies(world)
    demos = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        path = None
        for _ in range(max_attempts):
            j = int(rng.integers(free_r.size))
            start = Cell(int(free_r[j]), int(free_c[j]))
            goal = world.goal_cells[int(rng.integers(len(world.goal_cells)))]
            if start == goal:
                path = np.array([[start.row, start.col]], dtype=np.int64)
                break
            rollout = rollout_paths(policies[goal], start, n=1, mode="sampled",
                                    seed=int(rng.integers(2**63)))[0]
            if rollout.reached_goal:
                path = rollout.cells
                break
        if path is None:
            raise RuntimeError(f"demo {i}: no absorbing rollout in {max_attempts} attempts")
        demos.append(path)
    return demos


def demo_to_track(world: SyntheticWorld, demo: np.ndarray, scene_id: str,
                  agent_id: str) -> Track:
    """World-coordinate track through the demo's cell centers (fps 2.5)."""
    spec = world.scene.spec
    pts = np.array([cell_to_world(Cell(int(r), int(c)), spec) for r, c in demo])
    frames = np.arange(len(demo), dtype=np.float64)
    samples = np.column_stack([frames, pts])
    return Track(scene_id=scene_id, agent_id=agent_id, samples=samples)


def junction_heading_instances(world: SyntheticWorld, scene_ref: str,
                               t_obs: int = 8, t_pred: int = 12
                               ) -> list[TrajectoryInstance]:
    """Instances on a junction world whose past heading determines the arm.

    For every arm, agents march straight from the junction center toward
    the arm's goal tip at one cell per step, entering at every possible
    offset; once at the tip they dwell, so the future always ends exactly
    on the goal cell. Heading is therefore a sufficient statistic for the
    goal label, which is what the goal-accuracy oracle tests require.
    """
    spec = world.scene.spec
    labels = world.scene.semantic_labels
    horiz = [g for g in world.goal_cells if g.col in (1, spec.cols - 2)]
    vert = [g for g in world.goal_cells if g.row in (1, spec.rows - 2)]
    if not horiz or not vert:
        raise ValueError("not a junction world")
    center = Cell(horiz[0].row, vert[0].col)
    out = []
    idx = 0
    for g in world.goal_cells:
        dr = int(np.sign(g.row - center.row))
        dc = int(np.sign(g.col - center.col))
        arm_len = max(abs(g.row - center.row), abs(g.col - center.col))
        window = t_obs + t_pred
        for s in range(max(0, arm_len - window + 1), arm_len):
            steps = np.minimum(s + np.arange(window), arm_len)
            cells = [Cell(center.row + int(t) * dr, center.col + int(t) * dc)
                     for t in steps]
            if any(labels[c.row, c.col] == LABEL_OBSTACLE for c in cells):
                continue
            pts = np.array([cell_to_world(c, spec) for c in cells])
            out.append(TrajectoryInstance(
                scene_ref=scene_ref, past=pts[:t_obs], future=pts[t_obs:],
                t0_frame=0, agent_id=f"arm{g.row}_{g.col}", index=idx))
            idx += 1
    return out


def demo_instances_from_world(world: SyntheticWorld, scene_ref: str,
                              t_obs: int = 8) -> list[DemoInstance]:
    """IRL items straight from synthetic demos: past = first cells' centers,
    demonstration = the remainder starting at the last observed cell."""
    spec = world.scene.spec
    out = []
    for demo in world.demos:
        if demo.shape[0] < t_obs + 2:
            continue
        past = np.array([cell_to_world(Cell(int(r), int(c)), spec)
                         for r, c in demo[:t_obs]])
        out.append(DemoInstance(scene_ref=scene_ref, past=past,
                                cells=demo[t_obs - 1:].copy()))
    return out


# ---------------------------------------------------------------------------
# dataset directory layout


def scene_dir(root, scene_id: str) -> str:
    return os.path.join(root, "scenes", scene_id)


def write_world(root, scene_id: str, world: SyntheticWorld, fps: float = 2.5) -> None:
    d = scene_dir(root, scene_id)
    os.makedirs(d, exist_ok=True)
    ppm.write_ppm(os.path.join(d, "scene.ppm"), world.scene.raster)
    spec = world.scene.spec
    sidecar = {
        "raster": "scene.ppm",
        "fps": fps,
        "cell_size": spec.cell_size,
        "origin": [spec.origin[0], spec.origin[1]],
        "rows": spec.rows,
        "cols": spec.cols,
    }
    _write_json(os.path.join(d, "scene.json"), sidecar)
    _write_json(os.path.join(d, "true_reward.json"), {
        "reward": world.true_reward.tolist(),
        "goal_cells": [[g.row, g.col] for g in world.goal_cells],
        "labels": world.scene.semantic_labels.tolist(),
    })
    rows = ["scene_id,agent_id,frame,x,y"]
    for k, demo in enumerate(world.demos):
        if demo.shape[0] < 2:  # start-at-goal demos have no track
            continue
        track = demo_to_track(world, demo, scene_id, f"agent{k:03d}")
        for frame, x, y in track.samples:
            rows.append(f"{scene_id},agent{k:03d},{int(frame)},{float(x)!r},{float(y)!r}")
    payload = ("\n".join(rows) + "\n").encode()
    ppm._atomic_write_bytes(os.path.join(d, "tracks.csv"), payload)


@dataclass
class SceneData:
    scene_id: str
    scene: GridScene
    fps: float
    tracks: list[Track]
    true_reward: np.ndarray | None = None
    goal_cells: list[Cell] | None = None


def load_scene_data(root, scene_id: str) -> SceneData:
    d = scene_dir(root, scene_id)
    with open(os.path.join(d, "scene.json"), encoding="utf-8") as f:
        sidecar = json.load(f)
    spec = GridSpec(rows=sidecar["rows"], cols=sidecar["cols"],
                    cell_size=sidecar["cell_size"],
                    origin=tuple(sidecar["origin"]))
    raster = ppm.read_ppm(os.path.join(d, sidecar["raster"]))
    reward_path = os.path.join(d, "true_reward.json")
    labels = None
    true_reward = None
    goal_cells = None
    if os.path.exists(reward_path):
        with open(reward_path, encoding="utf-8") as f:
            doc = json.load(f)
        true_reward = np.array(doc["reward"], dtype=np.float64)
        goal_cells = [Cell(r, c) for r, c in doc["goal_cells"]]
        labels = np.array(doc["labels"], dtype=np.int64)
    scene = build_grid(raster, spec, semantic_labels=labels)
    tracks = load_tracks(os.path.join(d, "tracks.csv"))
    return SceneData(scene_id=scene_id, scene=scene, fps=sidecar["fps"],
                     tracks=tracks, true_reward=true_reward, goal_cells=goal_cells)


def load_split(root) -> dict:
    with open(os.path.join(root, "split.json"), encoding="utf-8") as f:
        return json.load(f)


def load_manifest(root) -> dict:
    with open(os.path.join(root, "manifest.json"), encoding="utf-8") as f:
        return json.load(f)


def _write_json(path, doc) -> None:
    ppm._atomic_write_bytes(path, (json.dumps(doc, indent=1) + "\n").encode())
