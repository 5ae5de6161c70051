"""Minimum-over-K displacement metrics and the batch evaluation harness.

mADE is the minimum over the K candidates of the per-timestep mean
Euclidean error; mFDE is the minimum final-point error. A constant-velocity
extrapolation serves as the sanity baseline.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from scenecast.ppm import _atomic_write_bytes


def ade(truth: np.ndarray, candidate: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(truth - candidate, axis=1)))


def fde(truth: np.ndarray, candidate: np.ndarray) -> float:
    return float(np.linalg.norm(truth[-1] - candidate[-1]))


def _check_candidates(truth, candidates):
    truth = np.asarray(truth, dtype=np.float64)
    candidates = [np.asarray(c, dtype=np.float64) for c in candidates]
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    for i, c in enumerate(candidates):
        if c.shape != truth.shape:
            raise ValueError(f"candidate {i} shape {c.shape} != truth {truth.shape}")
    return truth, candidates


def made(truth, candidates) -> float:
    """Minimum average displacement error over the candidate set."""
    truth, candidates = _check_candidates(truth, candidates)
    return min(ade(truth, c) for c in candidates)


def mfde(truth, candidates) -> float:
    """Minimum final displacement error over the candidate set."""
    truth, candidates = _check_candidates(truth, candidates)
    return min(fde(truth, c) for c in candidates)


def argmin_ade(truth, candidates) -> int:
    truth, candidates = _check_candidates(truth, candidates)
    return int(np.argmin([ade(truth, c) for c in candidates]))


def argmin_fde(truth, candidates) -> int:
    truth, candidates = _check_candidates(truth, candidates)
    return int(np.argmin([fde(truth, c) for c in candidates]))


def constant_velocity_baseline(past: np.ndarray, t_pred: int) -> np.ndarray:
    """Extrapolate the mean velocity of the last two observed steps."""
    past = np.asarray(past, dtype=np.float64)
    if past.shape[0] < 2:
        raise ValueError("need at least 2 past points")
    if past.shape[0] >= 3:
        v = (past[-1] - past[-3]) / 2.0
    else:
        v = past[-1] - past[-2]
    steps = np.arange(1, t_pred + 1)[:, None]
    return past[-1][None, :] + steps * v[None, :]


@dataclass
class EvalReport:
    mADE: float
    mFDE: float
    baseline_mADE: float
    baseline_mFDE: float
    K: int
    n_instances: int
    records: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mADE": self.mADE,
            "mFDE": self.mFDE,
            "baseline_mADE": self.baseline_mADE,
            "baseline_mFDE": self.baseline_mFDE,
            "K": self.K,
            "n_instances": self.n_instances,
            "records": self.records,
        }


def evaluate(instances, predict_fn, K: int, seed: int,
             t_pred: int | None = None) -> EvalReport:
    """Run predictions over a test set and aggregate mADE / mFDE.

    ``predict_fn(instance, K, seed)`` returns the candidate trajectories
    (list of (T_pred, 2) arrays); when it returns fewer than K the metric
    minimizes over what exists and the shortfall is recorded. Per-instance
    seeds derive from (seed, index), so the report is deterministic.
    """
    instances = list(instances)
    if not instances:
        raise ValueError("empty test set")
    records = []
    ades, fdes, base_ades, base_fdes = [], [], [], []
    for idx, inst in enumerate(instances):
        inst_seed = int(np.random.SeedSequence((seed, idx)).generate_state(1)[0])
        candidates = predict_fn(inst, K, inst_seed)
        truth = inst.future
        m_ade = made(truth, candidates)
        m_fde = mfde(truth, candidates)
        horizon = t_pred if t_pred is not None else truth.shape[0]
        base = constant_velocity_baseline(inst.past, horizon)
        b_ade = ade(truth, base)
        b_fde = fde(truth, base)
        records.append({
            "instance_id": inst.instance_id,
            "ade_best": m_ade,
            "fde_best": m_fde,
            "k_ade": argmin_ade(truth, candidates),
            "k_fde": argmin_fde(truth, candidates),
            "k_returned": len(candidates),
        })
        ades.append(m_ade)
        fdes.append(m_fde)
        base_ades.append(b_ade)
        base_fdes.append(b_fde)
    return EvalReport(
        mADE=float(np.mean(ades)),
        mFDE=float(np.mean(fdes)),
        baseline_mADE=float(np.mean(base_ades)),
        baseline_mFDE=float(np.mean(base_fdes)),
        K=K,
        n_instances=len(instances),
        records=records,
    )


def write_report(report: EvalReport, json_path, csv_path) -> None:
    _atomic_write_bytes(json_path, (json.dumps(report.to_json(), indent=1) + "\n").encode())
    lines = ["instance_id,ade_best,fde_best,k_ade,k_fde"]
    for r in report.records:
        lines.append(f"{r['instance_id']},{r['ade_best']!r},{r['fde_best']!r},"
                     f"{r['k_ade']},{r['k_fde']}")
    _atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode())
