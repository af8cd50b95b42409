"""Batched prediction, evaluation, and the prediction JSON-lines format."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .decoder import ModeSeqModel, to_global
from .encoder import collate
from .metrics import EvalRecord, MetricsReport, evaluate_records
from .scenario import AGENT_CLASSES, DatasetFormatError


@dataclass
class Prediction:
    scenario_id: int
    trajectories: np.ndarray  # [K, T, 2] global frame
    confidences: np.ndarray   # [K]
    agent_class: str = "vehicle"
    focal_speed: float = 0.0
    focal_heading: float = 0.0

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "trajectories": np.asarray(self.trajectories).tolist(),
            "confidences": np.asarray(self.confidences).tolist(),
            "agent_class": self.agent_class,
            "focal_speed": self.focal_speed,
            "focal_heading": self.focal_heading,
        }


@torch.no_grad()
def predict(model: ModeSeqModel, scenarios, num_modes: int, rearrange: bool = True,
            batch_size: int = 64, ids=None) -> list[Prediction]:
    if num_modes < 1:
        raise ValueError("num_modes must be >= 1")
    model.eval()
    ids = list(range(len(scenarios))) if ids is None else list(ids)
    out = []
    for start in range(0, len(scenarios), batch_size):
        chunk = scenarios[start : start + batch_size]
        batch = collate(chunk)
        final = model(batch, num_modes, rearrange_modes=rearrange).final
        trajs = to_global(batch, final)
        conf = final.confidences.double().numpy()
        for i, sc in enumerate(chunk):
            _, heading, speed = sc.focal_pose()
            out.append(Prediction(ids[start + i], trajs[i], conf[i], sc.agent_class, speed, heading))
    return out


def to_records(predictions, scenarios) -> list[EvalRecord]:
    records = []
    for p in predictions:
        sc = scenarios[p.scenario_id]
        _, heading, speed = sc.focal_pose()
        records.append(EvalRecord(p.scenario_id, p.trajectories, p.confidences, sc.future_array(),
                                  speed, heading, sc.agent_class))
    return records


def evaluate(model, scenarios, num_modes: int, rearrange: bool = True,
             family: str = "velocity_aware", step_duration: float = 0.5) -> tuple[list[Prediction], MetricsReport]:
    preds = predict(model, scenarios, num_modes, rearrange)
    return preds, evaluate_records(to_records(preds, scenarios), family, step_duration)


def write_predictions(predictions, path) -> None:
    with open(path, "w") as fh:
        for p in predictions:
            fh.write(json.dumps(p.to_dict(), separators=(",", ":")))
            fh.write("\n")


def read_predictions(path) -> list[Prediction]:
    out = []
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(lineno, "<json>", exc.msg) from None
            for key in ("scenario_id", "trajectories", "confidences"):
                if key not in rec:
                    raise DatasetFormatError(lineno, key, "missing")
            trajs = np.asarray(rec["trajectories"], dtype=float)
            conf = np.asarray(rec["confidences"], dtype=float)
            if trajs.ndim != 3 or trajs.shape[-1] != 2:
                raise DatasetFormatError(lineno, "trajectories", f"expected [K][T][2], got shape {trajs.shape}")
            if conf.shape != (trajs.shape[0],):
                raise DatasetFormatError(lineno, "confidences", "one confidence per trajectory expected")
            cls = rec.get("agent_class", "vehicle")
            if cls not in AGENT_CLASSES:
                raise DatasetFormatError(lineno, "agent_class", f"unknown class {cls!r}")
            out.append(Prediction(int(rec["scenario_id"]), trajs, conf, cls,
                                  float(rec.get("focal_speed", 0.0)), float(rec.get("focal_heading", 0.0))))
    return out
