"""Max-ent deep IRL: reward model, soft value iteration, state visitation
frequencies, the demo-likelihood gradient, and policy rollouts.

The reward model shares the two-branch architecture with the goal model but
its outputs are squashed into [-R_MAX, -EPSILON], which keeps the absorbing
soft-shortest-path problem bounded. Soft value iteration does a logsumexp
Bellman backup over the 9 clamped actions with the goal value pinned at 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from scenecast import nn
from scenecast.backbone import (
    TwoBranchConfig,
    default_bins,
    init_two_branch_params,
    two_branch_backward,
    two_branch_forward,
)
from scenecast.grid_scene import (
    ACTION_OFFSETS,
    N_ACTIONS,
    STAY,
    Cell,
    GridScene,
    GridSpec,
    transition_table,
    world_to_cell,
)

log = logging.getLogger(__name__)

EPSILON = 1e-3
R_MAX = 10.0

CHECKPOINT_COMPONENT = "reward_model"

_OFFSET_TO_ACTION = {off: a for a, off in enumerate(ACTION_OFFSETS)}


@dataclass(frozen=True)
class RewardMap:
    """Scene-based and motion-based per-cell rewards plus their squashed sum."""

    scene_reward: np.ndarray
    motion_reward: np.ndarray
    total: np.ndarray

    def __post_init__(self):
        t = self.total
        if np.any(t > -EPSILON + 1e-12) or np.any(t < -R_MAX - 1e-12):
            raise ValueError(
                f"total reward must lie in [{-R_MAX}, {-EPSILON}], "
                f"got range [{t.min()}, {t.max()}]"
            )

    @classmethod
    def from_total(cls, total: np.ndarray) -> "RewardMap":
        total = np.asarray(total, dtype=np.float64)
        zeros = np.zeros_like(total)
        return cls(scene_reward=zeros, motion_reward=zeros, total=total)


@dataclass
class PolicySolution:
    goal: Cell
    V: np.ndarray  # rows x cols, V[goal] = 0
    policy: np.ndarray  # rows x cols x 9 action probabilities
    converged: bool
    iterations: int


@dataclass
class SVFGrid:
    grid: np.ndarray  # rows x cols, nonnegative
    horizon: int
    absorbed: float = 0.0


@dataclass
class RolloutPath:
    cells: np.ndarray  # M x 2 int (row, col), consecutive duplicates collapsed
    truncated: bool
    reached_goal: bool


def squash_reward(raw: np.ndarray) -> np.ndarray:
    """Bounded-negative squash: -EPSILON - (R_MAX - EPSILON) * sigmoid(raw)."""
    return -EPSILON - (R_MAX - EPSILON) * nn.sigmoid(raw)


class RewardModel:
    """Two-branch reward network; structurally identical to the goal model."""

    def __init__(self, cfg: TwoBranchConfig, ps: nn.ParamSet):
        self.cfg = cfg
        self.ps = ps

    @classmethod
    def create(cls, spec: GridSpec, c_f: int, seed: int = 0,
               n_distance=None, n_orientation=None) -> "RewardModel":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 202)))
        kw = {}
        if n_distance is not None:
            kw["n_distance"] = n_distance
        if n_orientation is not None:
            kw["n_orientation"] = n_orientation
        distance, orientation = default_bins(spec, **kw)
        cfg = TwoBranchConfig(c_f=c_f, distance_centers=distance,
                              orientation_centers=orientation)
        return cls(cfg, init_two_branch_params(rng, cfg))

    def forward(self, scene: GridScene, past: np.ndarray):
        """Returns (RewardMap, cache); cache feeds backward_from_total."""
        scene_grid, motion_grid, _, cache = two_branch_forward(
            scene, past, self.cfg, self.ps)
        raw = scene_grid + motion_grid
        sig = nn.sigmoid(raw)
        total = -EPSILON - (R_MAX - EPSILON) * sig
        rmap = RewardMap(scene_reward=scene_grid, motion_reward=motion_grid,
                         total=total)
        return rmap, (cache, sig)

    def reward(self, scene: GridScene, past: np.ndarray) -> RewardMap:
        rmap, _ = self.forward(scene, past)
        return rmap

    def backward_from_total(self, dtotal: np.ndarray, cache) -> None:
        """Push an upstream gradient on the total reward into the parameters."""
        branch_cache, sig = cache
        draw = dtotal * (-(R_MAX - EPSILON)) * sig * (1.0 - sig)
        two_branch_backward(draw, draw, branch_cache, self.cfg, self.ps)

    def save(self, path, extra_config: dict | None = None) -> None:
        config = self.cfg.to_json()
        config["r_max"] = R_MAX
        config["epsilon"] = EPSILON
        if extra_config:
            config.update(extra_config)
        nn.save_checkpoint(path, CHECKPOINT_COMPONENT, self.ps, config)

    @classmethod
    def load(cls, path) -> "RewardModel":
        component, ps, config = nn.load_checkpoint(path)
        if component != CHECKPOINT_COMPONENT:
            raise ValueError(f"checkpoint is {component!r}, expected reward_model")
        model = cls(TwoBranchConfig.from_json(config), ps)
        model.extra_config = config
        return model


def reward_forward(scene: GridScene, past: np.ndarray,
                   model: RewardModel) -> RewardMap:
    return model.reward(scene, past)


# ---------------------------------------------------------------------------
# soft value iteration


def soft_value_iteration(reward: RewardMap, goal: Cell,
                         max_sweeps: int | None = None,
                         tol: float = 1e-9) -> PolicySolution:
    """Logsumexp Bellman backups with an absorbing goal.

    V starts at -inf everywhere except V[goal] = 0 (re-clamped every
    sweep). Each sweep sets V(s) = logsumexp_a [ r(T(s,a)) + V(T(s,a)) ]
    for s != goal; rewards attach to the destination cell. Stops when the
    sup-norm change drops below tol or after max_sweeps (default
    4*(rows+cols)). The policy is pi(a|s) proportional to
    exp(r(s') + V(s') - V(s)) with STAY pinned at the goal.
    """
    rows, cols = reward.total.shape
    if not (0 <= goal.row < rows and 0 <= goal.col < cols):
        raise ValueError(f"goal {goal} out of bounds for {rows}x{cols} grid")
    if max_sweeps is None:
        max_sweeps = 4 * (rows + cols)
    table = transition_table(rows, cols)
    r_flat = reward.total.reshape(-1)
    r_dest = r_flat[table]  # (9, N): reward for entering each destination
    goal_idx = goal.row * cols + goal.col

    V = np.full(rows * cols, -np.inf)
    V[goal_idx] = 0.0
    converged = False
    iterations = 0
    for sweep in range(1, max_sweeps + 1):
        V_new = nn.logsumexp_axis0(r_dest + V[table])
        V_new[goal_idx] = 0.0
        old_finite = np.isfinite(V)
        new_finite = np.isfinite(V_new)
        both = old_finite & new_finite
        residual = 0.0
        if np.any(both):
            residual = float(np.max(np.abs(V_new[both] - V[both])))
        if np.any(old_finite != new_finite):
            residual = np.inf
        V = V_new
        iterations = sweep
        if residual < tol:
            converged = True
            break

    logits = r_dest + V[table]  # (9, N)
    m = np.max(logits, axis=0)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    ex = np.exp(np.where(np.isfinite(logits), logits - safe_m, -np.inf))
    sums = ex.sum(axis=0)
    policy = np.zeros((rows * cols, N_ACTIONS))
    ok = sums > 0
    policy[ok] = (ex[:, ok] / sums[ok]).T
    policy[~ok, STAY] = 1.0
    policy[goal_idx] = 0.0
    policy[goal_idx, STAY] = 1.0

    return PolicySolution(goal=goal, V=V.reshape(rows, cols),
                          policy=policy.reshape(rows, cols, N_ACTIONS),
                          converged=converged, iterations=iterations)


# ---------------------------------------------------------------------------
# state visitation frequencies


def expected_svf(policy: PolicySolution, start: Cell, horizon: int) -> SVFGrid:
    """Forward DP of occupancy mass under the policy, goal absorbing.

    Returns the sum of D_t over t = 0..horizon on non-goal cells; mass that
    enters the goal is tallied separately in ``absorbed``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rows, cols, _ = policy.policy.shape
    n = rows * cols
    table = transition_table(rows, cols)
    pol = policy.policy.reshape(n, N_ACTIONS)
    goal_idx = policy.goal.row * cols + policy.goal.col
    start_idx = start.row * cols + start.col

    svf = np.zeros(n)
    D = np.zeros(n)
    absorbed = 0.0
    if start_idx == goal_idx:
        return SVFGrid(grid=svf.reshape(rows, cols), horizon=horizon, absorbed=1.0)
    D[start_idx] = 1.0
    for t in range(horizon + 1):
        svf += D
        if t == horizon:
            break
        flow = D[:, None] * pol
        D_new = np.zeros(n)
        for a in range(N_ACTIONS):
            D_new += np.bincount(table[a], weights=flow[:, a], minlength=n)
        absorbed += D_new[goal_idx]
        D_new[goal_idx] = 0.0
        D = D_new
    return SVFGrid(grid=svf.reshape(rows, cols), horizon=horizon, absorbed=float(absorbed))


def path_actions(cells: np.ndarray) -> np.ndarray:
    """Canonical action index for each step of a cell path."""
    diffs = np.diff(cells, axis=0)
    actions = np.empty(diffs.shape[0], dtype=np.int64)
    for i, (dr, dc) in enumerate(map(tuple, diffs)):
        a = _OFFSET_TO_ACTION.get((dr, dc))
        if a is None:
            raise ValueError(f"step {i}: ({dr},{dc}) is not an action offset")
        actions[i] = a
    return actions


def empirical_svf(demo: np.ndarray, shape: tuple[int, int]) -> SVFGrid:
    """Visit counts over the demo path, excluding the terminal goal occupancy."""
    demo = np.asarray(demo, dtype=np.int64)
    path_actions(demo)  # validates transition-validity
    rows, cols = shape
    counts = np.zeros(rows * cols)
    if demo.shape[0] > 1:
        idx = demo[:-1, 0] * cols + demo[:-1, 1]
        counts += np.bincount(idx, minlength=rows * cols)
    return SVFGrid(grid=counts.reshape(rows, cols), horizon=max(demo.shape[0] - 1, 0),
                   absorbed=1.0)


def demo_nll(policy: PolicySolution, demo: np.ndarray) -> float:
    """Negative log-likelihood of the demo under the policy's action dist."""
    actions = path_actions(demo)
    rows, cols, _ = policy.policy.shape
    nll = 0.0
    for t, a in enumerate(actions):
        p = policy.policy[demo[t, 0], demo[t, 1], a]
        nll -= np.log(max(p, 1e-300))
    return float(nll)


# ---------------------------------------------------------------------------
# demo rasterization


def bresenham(c0: tuple[int, int], c1: tuple[int, int]) -> list[tuple[int, int]]:
    """8-connected line between two cells, endpoints included."""
    r0, col0 = c0
    r1, col1 = c1
    dr = abs(r1 - r0)
    dc = abs(col1 - col0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if col1 >= col0 else -1
    err = dc - dr
    out = []
    r, c = r0, col0
    while True:
        out.append((r, c))
        if (r, c) == (r1, col1):
            return out
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def rasterize_demo(points: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Cell path for a world-coordinate polyline (Bresenham between points)."""
    cells = []
    for p in np.asarray(points, dtype=np.float64):
        cell, _ = world_to_cell(p, spec)
        cells.append((cell.row, cell.col))
    path = [cells[0]]
    for nxt in cells[1:]:
        seg = bresenham(path[-1], nxt)
        path.extend(seg[1:])
    return np.array(path, dtype=np.int64)


def demo_from_instance(instance, spec: GridSpec) -> np.ndarray:
    """Demonstration cells for a windowed instance: current cell + future."""
    pts = np.vstack([instance.past[-1][None, :], instance.future])
    demo = rasterize_demo(pts, spec)
    goal = tuple(demo[-1])
    hits = np.flatnonzero((demo[:, 0] == goal[0]) & (demo[:, 1] == goal[1]))
    # absorbing semantics: truncate at the first goal entry
    return demo[: hits[0] + 1] if hits.size else demo


# ---------------------------------------------------------------------------
# IRL gradient step and training


def irl_step(model: RewardModel, scene: GridScene, past: np.ndarray,
             demo: np.ndarray, vi_tol: float = 1e-9,
             vi_max_sweeps: int | None = None, horizon: int | None = None,
             accumulate: bool = True):
    """One max-ent IRL gradient accumulation for a single demo.

    Upstream per-cell gradient on the total reward is
    (expected - empirical) state visitation frequency, which is the exact
    gradient of the demo NLL at VI convergence. The SVF horizon defaults to
    4*(rows+cols), long enough for near-complete absorption: a horizon
    truncated at the demo length caps expected occupancy at the empirical
    total, leaving a net upward push on rewards that never equilibrates.
    Returns (nll, diagnostics); nll is None when soft VI failed to converge
    (step skipped).
    """
    demo = np.asarray(demo, dtype=np.int64)
    goal = Cell(int(demo[-1, 0]), int(demo[-1, 1]))
    rmap, cache = model.forward(scene, past)
    solution = soft_value_iteration(rmap, goal, max_sweeps=vi_max_sweeps, tol=vi_tol)
    diag = {"converged": solution.converged, "iterations": solution.iterations}
    if not solution.converged:
        log.warning("soft VI did not converge for goal %s; IRL step skipped", goal)
        return None, diag
    rows, cols = rmap.total.shape
    if horizon is None:
        horizon = 4 * (rows + cols)
    expected = expected_svf(solution, Cell(int(demo[0, 0]), int(demo[0, 1])), horizon)
    empirical = empirical_svf(demo, rmap.total.shape)
    if accumulate:
        g = expected.grid - empirical.grid
        model.backward_from_total(g, cache)
    nll = demo_nll(solution, demo)
    diag.update({"nll": nll, "absorbed": expected.absorbed})
    return nll, diag


def train_irl(train, val, scenes: dict, model: RewardModel,
              epochs: int = 50, lr: float = 1e-3, seed: int = 0,
              batch_size: int | None = 25,
              vi_tol: float = 1e-9, vi_max_sweeps: int | None = None):
    """Minibatch Adam on mean demo NLL; returns (model, log).

    Batches walk the training list in a fixed order (no shuffling), so runs
    are bit-reproducible. batch_size=None trains full-batch. The returned
    model carries the parameters with the lowest validation NLL.
    """
    if not train:
        raise ValueError("empty training set")
    if batch_size is None:
        batch_size = len(train)

    def step_batch(items, accumulate):
        total, used, skipped = 0.0, 0, 0
        for item in items:
            nll, _ = irl_step(model, scenes[item.scene_ref], item.past, item.cells,
                              vi_tol=vi_tol, vi_max_sweeps=vi_max_sweeps,
                              accumulate=accumulate)
            if nll is None:
                skipped += 1
            else:
                total += nll
                used += 1
        return total, used, skipped

    def mean_nll(items):
        total, used, _ = step_batch(items, accumulate=False)
        return total / used if used else float("nan")

    opt = nn.OptimizerState(lr=lr)
    init_val = mean_nll(val) if val else float("nan")
    history = {"train_nll": [], "val_nll": [], "skipped": [], "best_epoch": None,
               "init_val_nll": init_val}
    best_val = np.inf
    best_params = {k: v.copy() for k, v in model.ps.params.items()}
    for epoch in range(epochs):
        epoch_total, epoch_used, epoch_skipped = 0.0, 0, 0
        for lo in range(0, len(train), batch_size):
            model.ps.zero_grads()
            total, used, skipped = step_batch(train[lo:lo + batch_size], True)
            epoch_total += total
            epoch_used += used
            epoch_skipped += skipped
            if used:
                model.ps.scale_grads(1.0 / used)
                nn.adam_update(model.ps, opt)
        train_nll = epoch_total / epoch_used if epoch_used else float("nan")
        val_nll = mean_nll(val) if val else train_nll
        history["train_nll"].append(train_nll)
        history["val_nll"].append(val_nll)
        history["skipped"].append(epoch_skipped)
        if val_nll < best_val:
            best_val = val_nll
            best_params = {k: v.copy() for k, v in model.ps.params.items()}
            history["best_epoch"] = epoch
    for name, value in best_params.items():
        model.ps.params[name][...] = value
    return model, history


# ---------------------------------------------------------------------------
# rollouts


def rollout_paths(policy: PolicySolution, start: Cell, n: int = 1,
                  mode: str = "most_likely", seed: int = 0,
                  max_len: int | None = None) -> list[RolloutPath]:
    """Follow the policy from start until the goal or a step cap.

    most_likely takes argmax actions (ties resolved by the fixed action
    order); sampled draws from the policy. Consecutive duplicate cells are
    collapsed in the returned paths.
    """
    if mode not in ("most_likely", "sampled"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    rows, cols, _ = policy.policy.shape
    if max_len is None:
        max_len = 4 * (rows + cols)
    table = transition_table(rows, cols)
    pol = policy.policy.reshape(-1, N_ACTIONS)
    goal_idx = policy.goal.row * cols + policy.goal.col
    rng = np.random.default_rng(seed)

    paths = []
    for _ in range(n):
        s = start.row * cols + start.col
        visited = [s]
        for _ in range(max_len):
            if s == goal_idx:
                break
            if mode == "most_likely":
                a = int(np.argmax(pol[s]))
            else:
                cum = np.cumsum(pol[s])
                a = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
                a = min(a, N_ACTIONS - 1)
            s = int(table[a, s])
            visited.append(s)
        reached = s == goal_idx
        cells = [(visited[0] // cols, visited[0] % cols)]
        for v in visited[1:]:
            rc = (v // cols, v % cols)
            if rc != cells[-1]:
                cells.append(rc)
        paths.append(RolloutPath(cells=np.array(cells, dtype=np.int64),
                                 truncated=not reached, reached_goal=reached))
    return paths
