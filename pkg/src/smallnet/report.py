"""Evaluation engines, confusion matrices and the JSON/CSV report schemas."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import hwsim
from . import netcore as nc
from .dataio import LabeledImageSet
from .trainer import EpochRecord, predict

ENGINES = ("float", "fixed", "pipeline")

_MATRIX = {
    "type": "array", "minItems": 10, "maxItems": 10,
    "items": {"type": "array", "minItems": 10, "maxItems": 10,
              "items": {"type": "integer", "minimum": 0}},
}
_RATE = {"type": "number", "minimum": 0.0, "maximum": 1.0}

EVALUATION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "smallnet evaluation report",
    "type": "object",
    "required": ["engine", "n_images", "accuracy", "confusion"],
    "properties": {
        "engine": {"enum": list(ENGINES)},
        "n_images": {"type": "integer", "minimum": 1},
        "accuracy": _RATE,
        "confusion": _MATRIX,
        "mean_cycles_per_image": {"type": "number", "minimum": 0},
    },
}

COMPARISON_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "smallnet comparison report",
    "type": "object",
    "required": ["n_images", "float_accuracy", "fixed_accuracy", "pipeline_accuracy",
                 "agreement_rate", "accuracy_gap_pp", "confusion",
                 "mean_cycles_per_image", "saturation_events", "quantization_saturations"],
    "properties": {
        "n_images": {"type": "integer", "minimum": 1},
        "float_accuracy": _RATE,
        "fixed_accuracy": _RATE,
        "pipeline_accuracy": _RATE,
        "agreement_rate": {"const": 1.0},
        "accuracy_gap_pp": {"type": "number"},
        "confusion": {"type": "object", "required": list(ENGINES),
                      "properties": {e: _MATRIX for e in ENGINES}},
        "mean_cycles_per_image": {"type": "number", "minimum": 0},
        "saturation_events": {"type": "integer", "minimum": 0},
        "quantization_saturations": {"type": "integer", "minimum": 0},
        "clock_hz": {"type": ["integer", "null"]},
        "latency_seconds": {"type": ["number", "null"]},
    },
}

HISTORY_COLUMNS = ("epoch", "loss", "val_accuracy")


def confusion_matrix(labels, predictions) -> np.ndarray:
    """Rows are true labels, columns predictions."""
    m = np.zeros((nc.CLASSES, nc.CLASSES), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return m


@dataclass
class PipelineRun:
    scores: np.ndarray  # (n, 10) raw
    classes: np.ndarray
    cycles: np.ndarray
    saturations: int
    reports: list = field(repr=False, default_factory=list)


def run_pipeline_engine(qparams, images) -> PipelineRun:
    sim = hwsim.PipelineSim(qparams)
    scores, classes, cycles, sats, reports = [], [], [], 0, []
    for img in images:
        res = sim.run(img)
        scores.append(res.scores)
        classes.append(res.class_code)
        cycles.append(res.report.cycles_total)
        sats += res.saturations
        reports.append(res.report)
    return PipelineRun(np.asarray(scores, dtype=np.int64).reshape(-1, nc.CLASSES),
                       np.asarray(classes, dtype=np.int64), np.asarray(cycles), sats, reports)


def evaluate_engine(engine: str, params, qparams, data: LabeledImageSet) -> dict:
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; choose from {', '.join(ENGINES)}")
    if data.count == 0:
        raise ValueError("evaluation needs at least one image")
    images = data.normalized()
    out: dict = {"engine": engine, "n_images": data.count}
    if engine == "pipeline":
        run = run_pipeline_engine(qparams, images)
        pred = run.classes
        out["mean_cycles_per_image"] = float(run.cycles.mean())
    else:
        pred = predict(params if engine == "float" else qparams, images)
    out["accuracy"] = float(np.mean(pred == data.labels))
    out["confusion"] = confusion_matrix(data.labels, pred).tolist()
    return out


@dataclass
class ComparisonReport:
    n_images: int
    float_accuracy: float
    fixed_accuracy: float
    pipeline_accuracy: float
    agreement_rate: float
    accuracy_gap_pp: float
    confusion: dict
    mean_cycles_per_image: float
    saturation_events: int
    quantization_saturations: int
    clock_hz: int | None = None
    latency_seconds: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def compare(params, qparams, data: LabeledImageSet, clock_hz: int | None = None) -> ComparisonReport:
    if data.count == 0:
        raise ValueError("comparison needs at least one image")
    images = data.normalized()
    labels = data.labels
    float_pred = predict(params, images)
    fixed_scores, fixed_pred = nc.forward_batch(images, qparams)
    run = run_pipeline_engine(qparams, images)
    agree = np.all(run.scores == fixed_scores, axis=1)
    acc = lambda p: float(np.mean(p == labels))
    latency = None
    if clock_hz is not None:
        latency = float(np.mean([hwsim.latency_at(r, clock_hz) for r in run.reports]))
    return ComparisonReport(
        n_images=data.count,
        float_accuracy=acc(float_pred),
        fixed_accuracy=acc(fixed_pred),
        pipeline_accuracy=acc(run.classes),
        agreement_rate=float(np.mean(agree)),
        accuracy_gap_pp=100.0 * (acc(float_pred) - acc(fixed_pred)),
        confusion={
            "float": confusion_matrix(labels, float_pred).tolist(),
            "fixed": confusion_matrix(labels, fixed_pred).tolist(),
            "pipeline": confusion_matrix(labels, run.classes).tolist(),
        },
        mean_cycles_per_image=float(run.cycles.mean()),
        saturation_events=int(run.saturations),
        quantization_saturations=int(qparams.saturated),
        clock_hz=clock_hz,
        latency_seconds=latency,
    )


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for rec in history:
        val = "" if np.isnan(rec.val_accuracy) else f"{rec.val_accuracy:.6f}"
        writer.writerow([rec.epoch, f"{rec.loss:.8f}", val])
    return buf.getvalue()
