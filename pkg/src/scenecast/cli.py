"""Command-line entry point: synth / train / predict / eval / render.

Every command is deterministic given (config, seed), including output
bytes. Exit codes are a stable scripting contract: 0 success, 1 usage
error, 2 IO failure, 3 missing dependency, 4 bad selector or empty input.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import numpy as np

from scenecast import dataset as ds
from scenecast import metrics, ppm
from scenecast.goal_model import GoalModel, train_goal_model, true_goal_cell
from scenecast.grid_scene import Cell, GridScene, world_to_cell
from scenecast.irl import (
    RewardModel,
    demo_from_instance,
    expected_svf,
    soft_value_iteration,
    train_irl,
)
from scenecast.pipeline import PipelineHandle, forecast
from scenecast.traj_gen import TrajGenModel, teacher_waypoints, train_traj_gen

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_MISSING_DEP = 3
EXIT_BAD_SELECTOR = 4

DEFAULT_CONFIG = {
    "data_dir": "data",
    "checkpoint_dir": "checkpoints",
    "output_dir": "out",
    "rows": 64,
    "cols": 64,
    "cell_px": 4,
    "rate_hz": 2.5,
    "t_obs": 8,
    "t_pred": 12,
    "k": 20,
    "seed": 0,
    "vi_tol": 1e-9,
    "vi_max_sweeps": None,
    "synth": {"kind": "mixed", "count": 6, "demos_per_scene": 12},
    "goal": {"epochs": 30, "lr": 0.01},
    "irl": {"epochs": 30, "lr": 0.005},
    "traj": {"epochs": 40, "lr": 0.005},
}

CHECKPOINT_FILES = {
    "goal": "goal_model.json",
    "irl": "reward_model.json",
    "traj": "traj_gen.json",
}


class UsageError(Exception):
    pass


class MissingDependencyError(Exception):
    pass


class SelectorError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config handling


def _deep_merge(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def _apply_override(config: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def build_config(config_path, overrides) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        with open(config_path, encoding="utf-8") as f:
            _deep_merge(config, json.load(f))
    env_seed = os.environ.get("FORECAST_SEED")
    if env_seed is not None:
        config["seed"] = int(env_seed)
    for dotted, raw in overrides:
        _apply_override(config, dotted, raw)
    return config


def parse_overrides(leftover) -> list:
    out = []
    for token in leftover:
        if not token.startswith("--") or "=" not in token:
            raise UsageError(f"unrecognized argument {token!r} (expected --key=value)")
        dotted, raw = token[2:].split("=", 1)
        out.append((dotted, raw))
    return out


def echo_config(config: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = (json.dumps(config, indent=1, sort_keys=True) + "\n").encode()
    ppm._atomic_write_bytes(os.path.join(out_dir, "effective_config.json"), payload)


# ---------------------------------------------------------------------------
# rendering primitives


def render_grid(grid: np.ndarray, path) -> None:
    """Min-max normalized P5 PGM; constant grids render mid-gray (128)."""
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid contains non-finite values")
    lo, hi = float(grid.min()), float(grid.max())
    if hi - lo < 1e-300:
        img = np.full(grid.shape, 128, dtype=np.uint8)
    else:
        img = np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)
    ppm.write_pgm(path, img)


def _pixel_of(point, scene: GridScene):
    spec = scene.spec
    h, w, _ = scene.raster.shape
    px = (point[0] - spec.origin[0]) / spec.cell_size * (w / spec.cols)
    py = (point[1] - spec.origin[1]) / spec.cell_size * (h / spec.rows)
    return int(round(px)), int(round(py))


def _draw_polyline(img: np.ndarray, points, scene: GridScene, color) -> None:
    h, w, _ = img.shape
    pix = [_pixel_of(p, scene) for p in points]
    for (x0, y0), (x1, y1) in zip(pix, pix[1:]):
        n = max(abs(x1 - x0), abs(y1 - y0), 1)
        for k in range(n + 1):
            x = x0 + round((x1 - x0) * k / n)
            y = y0 + round((y1 - y0) * k / n)
            if 0 <= y < h and 0 <= x < w:
                img[y, x] = color
    if len(pix) == 1:
        x, y = pix[0]
        if 0 <= y < h and 0 <= x < w:
            img[y, x] = color


PAST_COLOR = (255, 40, 40)
TRUTH_COLOR = (255, 255, 255)
PREDICTION_COLOR = (60, 90, 255)


def render_overlay(scene: GridScene, past, truth, predictions, path) -> None:
    """Raster with 1-pixel polylines: past, ground truth, predicted futures."""
    img = np.clip(np.rint(scene.raster * 255.0), 0, 255).astype(np.uint8).copy()
    for traj in predictions:
        _draw_polyline(img, traj, scene, PREDICTION_COLOR)
    if truth is not None and len(truth):
        _draw_polyline(img, truth, scene, TRUTH_COLOR)
    if past is not None and len(past):
        _draw_polyline(img, past, scene, PAST_COLOR)
    ppm.write_ppm(path, img)


# ---------------------------------------------------------------------------
# dataset assembly helpers


def _load_scenes(data_dir, scene_ids):
    return {sid: ds.load_scene_data(data_dir, sid) for sid in scene_ids}


def _window_all(scene_data_map, config):
    instances = []
    for sid, sd in sorted(scene_data_map.items()):
        for track in sd.tracks:
            instances.extend(ds.window_instances(
                track, fps=sd.fps, rate_hz=config["rate_hz"],
                t_obs=config["t_obs"], t_pred=config["t_pred"]))
    return instances


def _scene_grids(scene_data_map):
    return {sid: sd.scene for sid, sd in scene_data_map.items()}


def _require_checkpoints(checkpoint_dir, names):
    for name in names:
        path = os.path.join(checkpoint_dir, CHECKPOINT_FILES[name])
        if not os.path.exists(path):
            raise MissingDependencyError(
                f"missing {name} checkpoint: {path} (run `scenecast train {name}` first)")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(config) -> int:
    data_dir = config["data_dir"]
    synth_cfg = config["synth"]
    count = int(synth_cfg["count"])
    kind = synth_cfg["kind"]
    seed = int(config["seed"])
    kinds = list(ds.SYNTH_KINDS) if kind == "mixed" else [kind]
    os.makedirs(os.path.join(data_dir, "scenes"), exist_ok=True)
    scene_ids = []
    split = {"train": [], "val": [], "test": []}
    for i in range(count):
        k = kinds[i % len(kinds)]
        world = ds.synth_scene(seed=seed + i, kind=k, rows=config["rows"],
                               cols=config["cols"], cell_px=config["cell_px"])
        world.demos = ds.synth_demos(world, n=int(synth_cfg["demos_per_scene"]),
                                     seed=seed + 10_000 + i)
        scene_id = f"{k}_{i:03d}"
        ds.write_world(data_dir, scene_id, world, fps=config["rate_hz"])
        scene_ids.append(scene_id)
        bucket = "train" if i % 5 < 3 else ("val" if i % 5 == 3 else "test")
        split[bucket].append(scene_id)
    ds._write_json(os.path.join(data_dir, "manifest.json"),
                   {"scenes": scene_ids, "count": count, "kind": kind})
    ds._write_json(os.path.join(data_dir, "split.json"), split)
    echo_config(config, data_dir)
    print(f"synth: wrote {count} scene(s) to {data_dir}")
    return EXIT_OK


def cmd_train(config, which: str) -> int:
    data_dir = config["data_dir"]
    ckpt_dir = config["checkpoint_dir"]
    os.makedirs(ckpt_dir, exist_ok=True)
    split = ds.load_split(data_dir)
    train_scenes = _load_scenes(data_dir, split["train"])
    val_scenes = _load_scenes(data_dir, split["val"])
    if not train_scenes:
        raise SelectorError("training split is empty")
    train_inst = _window_all(train_scenes, config)
    val_inst = _window_all(val_scenes, config)
    grids = _scene_grids({**train_scenes, **val_scenes})
    any_scene = next(iter(grids.values()))
    c_f = any_scene.features.shape[2]
    seed = int(config["seed"])
    shared_cfg = {"t_obs": config["t_obs"], "t_pred": config["t_pred"],
                  "rows": any_scene.spec.rows, "cols": any_scene.spec.cols}

    if which == "goal":
        model = GoalModel.create(any_scene.spec, c_f, seed=seed)
        model, history = train_goal_model(
            train_inst, val_inst, grids, model,
            epochs=int(config["goal"]["epochs"]), lr=float(config["goal"]["lr"]),
            seed=seed)
        model.save(os.path.join(ckpt_dir, CHECKPOINT_FILES["goal"]), shared_cfg)
    elif which == "irl":
        model = RewardModel.create(any_scene.spec, c_f, seed=seed)
        train_demos = [ds.DemoInstance(i.scene_ref, i.past,
                                       demo_from_instance(i, grids[i.scene_ref].spec))
                       for i in train_inst]
        val_demos = [ds.DemoInstance(i.scene_ref, i.past,
                                     demo_from_instance(i, grids[i.scene_ref].spec))
                     for i in val_inst]
        model, history = train_irl(
            train_demos, val_demos, grids, model,
            epochs=int(config["irl"]["epochs"]), lr=float(config["irl"]["lr"]),
            seed=seed, vi_tol=float(config["vi_tol"]),
            vi_max_sweeps=config["vi_max_sweeps"])
        model.save(os.path.join(ckpt_dir, CHECKPOINT_FILES["irl"]), shared_cfg)
    elif which == "traj":
        _require_checkpoints(ckpt_dir, ["goal", "irl"])
        reward_model = RewardModel.load(os.path.join(ckpt_dir, CHECKPOINT_FILES["irl"]))

        def with_teachers(instances):
            items = []
            for inst in instances:
                scene = grids[inst.scene_ref]
                wps = teacher_waypoints(reward_model, scene, inst.past,
                                        true_goal_cell(inst, scene.spec),
                                        vi_tol=float(config["vi_tol"]),
                                        vi_max_sweeps=config["vi_max_sweeps"])
                if wps is not None:
                    items.append((inst, wps))
            return items

        model = TrajGenModel.create(t_obs=config["t_obs"], t_pred=config["t_pred"],
                                    seed=seed)
        model, history = train_traj_gen(
            with_teachers(train_inst), with_teachers(val_inst), grids, model,
            epochs=int(config["traj"]["epochs"]), lr=float(config["traj"]["lr"]),
            seed=seed)
        model.save(os.path.join(ckpt_dir, CHECKPOINT_FILES["traj"]), shared_cfg)
    else:
        raise UsageError(f"unknown training stage {which!r}")

    log_path = os.path.join(ckpt_dir, CHECKPOINT_FILES[which] + ".log.json")
    ds._write_json(log_path, history)
    echo_config(config, ckpt_dir)
    print(f"train {which}: checkpoint written to "
          f"{os.path.join(ckpt_dir, CHECKPOINT_FILES[which])}")
    return EXIT_OK


def _find_instance(config, instance_id: str):
    data_dir = config["data_dir"]
    manifest = ds.load_manifest(data_dir)
    try:
        scene_id, agent_id, index_s = instance_id.split(":")
        index = int(index_s)
    except ValueError as exc:
        raise SelectorError(f"bad instance id {instance_id!r} "
                            "(expected scene:agent:index)") from exc
    if scene_id not in manifest["scenes"]:
        raise SelectorError(f"unknown scene {scene_id!r}")
    sd = ds.load_scene_data(data_dir, scene_id)
    for track in sd.tracks:
        if track.agent_id != agent_id:
            continue
        instances = ds.window_instances(track, fps=sd.fps, rate_hz=config["rate_hz"],
                                        t_obs=config["t_obs"], t_pred=config["t_pred"])
        for inst in instances:
            if inst.index == index:
                return sd, inst
    raise SelectorError(f"no instance {instance_id!r} in {data_dir}")


def _load_pipeline(config) -> PipelineHandle:
    ckpt_dir = config["checkpoint_dir"]
    _require_checkpoints(ckpt_dir, ["goal", "irl", "traj"])
    return PipelineHandle.load(
        os.path.join(ckpt_dir, CHECKPOINT_FILES["goal"]),
        os.path.join(ckpt_dir, CHECKPOINT_FILES["irl"]),
        os.path.join(ckpt_dir, CHECKPOINT_FILES["traj"]),
        vi_tol=float(config["vi_tol"]),
        vi_max_sweeps=config["vi_max_sweeps"],
    )


def cmd_predict(config, instance_id: str, render: bool) -> int:
    handle = _load_pipeline(config)
    sd, inst = _find_instance(config, instance_id)
    K = int(config["k"])
    seed = int(config["seed"])
    prediction = forecast(handle, sd.scene, inst.past, K=K, seed=seed)
    out_dir = config["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    doc = prediction.to_json()
    doc["instance_id"] = instance_id
    ds._write_json(os.path.join(out_dir, "prediction.json"), doc)
    if render:
        scene = sd.scene
        dist = handle.goal_model.distribution(scene, inst.past)
        rmap = handle.reward_model.reward(scene, inst.past)
        start, _ = world_to_cell(inst.past[-1], scene.spec)
        svf_total = np.zeros((scene.spec.rows, scene.spec.cols))
        for entry in prediction.entries:
            sol = soft_value_iteration(rmap, entry.goal, tol=float(config["vi_tol"]),
                                       max_sweeps=config["vi_max_sweeps"])
            svf_total += expected_svf(sol, start, horizon=int(config["t_pred"])).grid
        svf_total /= max(len(prediction.entries), 1)
        render_grid(dist.probs, os.path.join(out_dir, "goal_heat.pgm"))
        render_grid(rmap.scene_reward, os.path.join(out_dir, "reward_scene.pgm"))
        render_grid(rmap.motion_reward, os.path.join(out_dir, "reward_motion.pgm"))
        render_grid(rmap.total, os.path.join(out_dir, "reward_total.pgm"))
        render_grid(svf_total, os.path.join(out_dir, "svf.pgm"))
        render_overlay(scene, inst.past, inst.future,
                       [e.trajectory for e in prediction.entries],
                       os.path.join(out_dir, "overlay.ppm"))
    echo_config(config, out_dir)
    print(f"predict: {len(prediction)} trajectories for {instance_id}")
    return EXIT_OK


def cmd_eval(config, split_name: str) -> int:
    handle = _load_pipeline(config)
    data_dir = config["data_dir"]
    split = ds.load_split(data_dir)
    if split_name not in split:
        raise SelectorError(f"unknown split {split_name!r}")
    scene_ids = split[split_name]
    if not scene_ids:
        raise SelectorError(f"split {split_name!r} is empty")
    scenes = _load_scenes(data_dir, scene_ids)
    instances = _window_all(scenes, config)
    if not instances:
        raise SelectorError(f"split {split_name!r} has no instances")
    grids = _scene_grids(scenes)

    def predict_fn(inst, K, seed):
        pset = forecast(handle, grids[inst.scene_ref], inst.past, K=K, seed=seed)
        return [e.trajectory for e in pset.entries]

    report = metrics.evaluate(instances, predict_fn, K=int(config["k"]),
                              seed=int(config["seed"]), t_pred=int(config["t_pred"]))
    out_dir = config["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    metrics.write_report(report,
                         os.path.join(out_dir, f"eval_{split_name}.json"),
                         os.path.join(out_dir, f"eval_{split_name}.csv"))
    echo_config(config, out_dir)
    print(f"eval {split_name}: mADE={report.mADE:.4f} mFDE={report.mFDE:.4f} "
          f"(baseline ADE={report.baseline_mADE:.4f} FDE={report.baseline_mFDE:.4f}) "
          f"over {report.n_instances} instances at K={report.K}")
    return EXIT_OK


def cmd_render(config, scene_id: str) -> int:
    data_dir = config["data_dir"]
    manifest = ds.load_manifest(data_dir)
    if scene_id not in manifest["scenes"]:
        raise SelectorError(f"unknown scene {scene_id!r}")
    sd = ds.load_scene_data(data_dir, scene_id)
    out_dir = config["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    tracks = [t.samples[:, 1:3] for t in sd.tracks]
    render_overlay(sd.scene, None, None, tracks,
                   os.path.join(out_dir, f"{scene_id}_tracks.ppm"))
    if sd.true_reward is not None:
        render_grid(sd.true_reward, os.path.join(out_dir, f"{scene_id}_true_reward.pgm"))
    echo_config(config, out_dir)
    print(f"render: wrote {scene_id} panels to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> _Parser:
    parser = _Parser(prog="scenecast",
                     description="Scene-conditioned trajectory forecasting toolkit")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--data", default=None, help="dataset directory")
    parser.add_argument("--checkpoints", default=None, help="checkpoint directory")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", default=None, type=int)
    parser.add_argument("--k", default=None, type=int)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--kind", default=None,
                   choices=list(ds.SYNTH_KINDS) + ["mixed"])
    p.add_argument("--count", default=None, type=int)

    p = sub.add_parser("train", help="train one pipeline stage")
    p.add_argument("which", choices=["goal", "irl", "traj"])

    p = sub.add_parser("predict", help="forecast one instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--render", action="store_true")

    p = sub.add_parser("eval", help="evaluate a split")
    p.add_argument("--split", default="test")

    p = sub.add_parser("render", help="render dataset panels for one scene")
    p.add_argument("--scene", required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args, leftover = parser.parse_known_args(argv)
        overrides = parse_overrides(leftover)
        config = build_config(args.config, overrides)
        for flag, key in (("data", "data_dir"), ("checkpoints", "checkpoint_dir"),
                          ("out", "output_dir")):
            value = getattr(args, flag)
            if value is not None:
                config[key] = value
        if args.seed is not None:
            config["seed"] = args.seed
        if args.k is not None:
            config["k"] = args.k
        if args.command is None:
            raise UsageError("no command given (synth/train/predict/eval/render)")
        if args.command == "synth":
            if getattr(args, "kind", None) is not None:
                config["synth"]["kind"] = args.kind
            if getattr(args, "count", None) is not None:
                config["synth"]["count"] = args.count
            return cmd_synth(config)
        if args.command == "train":
            return cmd_train(config, args.which)
        if args.command == "predict":
            return cmd_predict(config, args.instance, args.render)
        if args.command == "eval":
            return cmd_eval(config, args.split)
        if args.command == "render":
            return cmd_render(config, args.scene)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingDependencyError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING_DEP
    except SelectorError as exc:
        print(f"selector error: {exc}", file=sys.stderr)
        return EXIT_BAD_SELECTOR
    except (OSError, IOError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
