"""Displacement and feasibility metrics over prediction/ground-truth pairs.

minADE_K / minFDE_K take the best of the K most probable modes (credibility
ranking, ties broken by mode index); the off-road rate is the fraction of
predicted waypoints landing in blocked grid cells.  All functions are pure;
dataset aggregation averages per-instance values in a fixed order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import offroad_count
from .model import PredictionSet
from .scene import DrivableGrid

EVAL_KS = (1, 3, 6)


@dataclass
class EvalRecord:
    scene_id: str
    agent_id: str
    truth: np.ndarray               # (H, 2)
    prediction: PredictionSet
    grid: DrivableGrid | None = None

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.float64)
        if self.truth.shape != self.prediction.trajectories.shape[1:]:
            raise ValueError(f"EvalRecord {self.scene_id}/{self.agent_id}: horizon mismatch "
                             f"{self.truth.shape} vs {self.prediction.trajectories.shape[1:]}")


@dataclass
class MetricsTable:
    min_ade: dict[int, float] = field(default_factory=dict)
    min_fde: dict[int, float] = field(default_factory=dict)
    offroad_rate_3: float = 0.0
    instance_count: int = 0

    def to_record(self) -> dict:
        rec = {f"minADE_{k}": v for k, v in sorted(self.min_ade.items())}
        rec.update({f"minFDE_{k}": v for k, v in sorted(self.min_fde.items())})
        rec["offroad_rate_3"] = self.offroad_rate_3
        rec["instances"] = self.instance_count
        return rec

    @staticmethod
    def from_record(rec: dict) -> "MetricsTable":
        table = MetricsTable(offroad_rate_3=rec["offroad_rate_3"],
                             instance_count=rec["instances"])
        for key, val in rec.items():
            if key.startswith("minADE_"):
                table.min_ade[int(key.split("_")[1])] = val
            elif key.startswith("minFDE_"):
                table.min_fde[int(key.split("_")[1])] = val
        return table

    def to_text(self) -> str:
        lines = [f"{'metric':<16}{'value':>12}"]
        for key, val in self.to_record().items():
            if key == "instances":
                lines.append(f"{key:<16}{val:>12d}")
            else:
                lines.append(f"{key:<16}{val:>12.4f}")
        return "\n".join(lines) + "\n"


def _top_modes(prediction: PredictionSet, k_eval: int) -> np.ndarray:
    """Indices of the K most probable modes; stable ties by mode index."""
    if k_eval < 1 or k_eval > len(prediction.credibility):
        raise ValueError(f"k_eval {k_eval} out of range for {len(prediction.credibility)} modes")
    order = np.argsort(-prediction.credibility, kind="stable")
    return order[:k_eval]


def min_ade(truth: np.ndarray, prediction: PredictionSet, k_eval: int) -> float:
    """Minimum over top-k modes of the mean per-step Euclidean displacement."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != prediction.trajectories.shape[1:]:
        raise ValueError(f"min_ade: horizon mismatch {truth.shape} vs "
                         f"{prediction.trajectories.shape[1:]}")
    modes = prediction.trajectories[_top_modes(prediction, k_eval)]
    dists = np.linalg.norm(modes - truth[None], axis=2).mean(axis=1)
    return float(dists.min())


def min_fde(truth: np.ndarray, prediction: PredictionSet, k_eval: int) -> float:
    """Minimum over top-k modes of the final-step Euclidean displacement."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != prediction.trajectories.shape[1:]:
        raise ValueError(f"min_fde: horizon mismatch {truth.shape} vs "
                         f"{prediction.trajectories.shape[1:]}")
    modes = prediction.trajectories[_top_modes(prediction, k_eval)]
    return float(np.linalg.norm(modes[:, -1] - truth[-1], axis=1).min())


def offroad_rate(records: list[EvalRecord], k_eval: int = 3) -> float:
    """Fraction of off-road waypoints over the top-k modes of all records."""
    total = 0
    off = 0
    for rec in records:
        if rec.grid is None:
            continue
        modes = rec.prediction.trajectories[_top_modes(rec.prediction, k_eval)]
        off += offroad_count(modes, rec.grid)
        total += modes.shape[0] * modes.shape[1]
    return off / total if total else 0.0


def evaluate_dataset(records: list[EvalRecord]) -> MetricsTable:
    """Instance-averaged metrics table over a deterministic record order."""
    if not records:
        raise ValueError("evaluate_dataset: empty record list")
    ordered = sorted(records, key=lambda r: (r.scene_id, r.agent_id))
    table = MetricsTable(instance_count=len(ordered))
    n_modes = ordered[0].prediction.trajectories.shape[0]
    for k in EVAL_KS:
        k_used = min(k, n_modes)
        table.min_ade[k] = float(np.mean([min_ade(r.truth, r.prediction, k_used)
                                          for r in ordered]))
        table.min_fde[k] = float(np.mean([min_fde(r.truth, r.prediction, k_used)
                                          for r in ordered]))
    table.offroad_rate_3 = offroad_rate(ordered, k_eval=min(3, n_modes))
    return table


def write_metrics(table: MetricsTable, path) -> None:
    """Text table plus a machine-readable JSON record next to it."""
    path = Path(path)
    path.write_text(table.to_text(), encoding="utf-8")
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(table.to_record(), indent=2) + "\n", encoding="utf-8")


def read_metrics(path) -> MetricsTable:
    path = Path(path)
    rec = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    return MetricsTable.from_record(rec)
