"""Precision/success metrics and OPE/SRE/TRE run protocols."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Box, clip_box
from .tracker import TrackerConfig, init_tracker, step

PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
# k/20 rather than 0.05*k keeps every threshold exactly representable where it matters
SUCCESS_THRESHOLDS = np.arange(21, dtype=np.float64) / 20.0


def _as_box(b):
    return b if isinstance(b, Box) else Box(*b)


def center_error(pred, truth):
    (px, py), (tx, ty) = _as_box(pred).center, _as_box(truth).center
    return float(np.hypot(px - tx, py - ty))


def overlap_ratio(a, b):
    a, b = _as_box(a), _as_box(b)
    ax2, ay2, bx2, by2 = a.x + a.w, a.y + a.h, b.x + b.w, b.y + b.h
    iw = min(ax2, bx2) - max(a.x, b.x)
    ih = min(ay2, by2) - max(a.y, b.y)
    inter = max(iw, 0.0) * max(ih, 0.0)
    # areas from the same corner differences, so that overlap_ratio(a, a) is exactly 1
    union = (ax2 - a.x) * (ay2 - a.y) + (bx2 - b.x) * (by2 - b.y) - inter
    return float(min(inter / union, 1.0))


def precision_curve(errors, thresholds=PRECISION_THRESHOLDS):
    """Fraction of frames with centre error ``<= t``; returns ``(thresholds, points, precision@20)``."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors to score")
    points = (e[None, :] <= np.asarray(thresholds)[:, None]).mean(axis=1)
    return np.asarray(thresholds), points, float((e <= 20.0).mean())


def success_curve(ious, thresholds=SUCCESS_THRESHOLDS):
    """Fraction of frames with IoU ``> t``; returns ``(thresholds, points, auc)``, AUC = mean of points."""
    v = np.asarray(ious, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no overlaps to score")
    points = (v[None, :] > np.asarray(thresholds)[:, None]).mean(axis=1)
    return np.asarray(thresholds), points, float(points.mean())


@dataclass(frozen=True)
class ProtocolConfig:
    sre_shift: float = 0.1
    sre_scales: tuple = (0.8, 0.9, 1.1, 1.2)
    tre_segments: int = 20


@dataclass(frozen=True)
class RunSpec:
    sequence: str
    init_box: Box
    start: int
    end: int
    kind: str

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("run must have start < end")


SRE_SHIFTS = {
    "l": (-1, 0), "r": (1, 0), "u": (0, -1), "d": (0, 1),
    "ul": (-1, -1), "ur": (1, -1), "dl": (-1, 1), "dr": (1, 1),
}


def gen_runs(seq, kind, protocol=ProtocolConfig()):
    """Run specs for one sequence under ``kind`` in {"OPE", "SRE", "TRE"}."""
    n = len(seq)
    if n < 2:
        raise ValueError("a run needs at least 2 frames")
    truth = seq.boxes[0]
    kind = kind.upper()
    if kind == "OPE":
        return [RunSpec(seq.name, truth, 0, n, "OPE")]
    if kind == "SRE":
        runs = []
        for tag, (sx, sy) in SRE_SHIFTS.items():
            box = truth.shifted(sx * protocol.sre_shift * truth.w, sy * protocol.sre_shift * truth.h)
            runs.append(RunSpec(seq.name, box, 0, n, f"SRE-shift-{tag}"))
        for s in protocol.sre_scales:
            runs.append(RunSpec(seq.name, truth.scaled(s), 0, n, f"SRE-scale-{s:g}"))
        return runs
    if kind == "TRE":
        k = max(1, min(protocol.tre_segments, n // 2))
        starts = sorted({(i * n) // k for i in range(k)})
        return [RunSpec(seq.name, seq.boxes[s], s, n, f"TRE-{i}") for i, s in enumerate(starts)]
    raise ValueError(f"unknown protocol {kind!r}")


@dataclass
class RunResult:
    spec: RunSpec
    boxes: list
    errors: np.ndarray
    ious: np.ndarray
    fps: float | None = None

    @property
    def precision20(self):
        return precision_curve(self.errors)[2]

    @property
    def auc(self):
        return success_curve(self.ious)[2]


def score_run(spec, boxes, truth):
    truth = truth[spec.start:spec.end]
    if len(boxes) != len(truth):
        raise ValueError(f"{len(boxes)} predicted boxes for {len(truth)} ground-truth frames")
    errors = np.array([center_error(b, t) for b, t in zip(boxes, truth)])
    ious = np.array([overlap_ratio(b, t) for b, t in zip(boxes, truth)])
    return RunResult(spec, list(boxes), errors, ious)


def run_tracker(model, seq, spec, config=TrackerConfig(), seed=0):
    """Track ``seq`` over ``spec``; returns ``(boxes, results, seconds_in_steps)``."""
    frames = seq.frames[spec.start:spec.end]
    w, h = seq.frame_size
    state = init_tracker(model, frames[0], clip_box(spec.init_box, w, h), config, seed, frame_index=0)
    boxes = [state.box]
    results = []
    t0 = time.perf_counter()
    for frame in frames[1:]:
        r = step(state, frame)
        boxes.append(r.box)
        results.append(r)
    return boxes, results, time.perf_counter() - t0


@dataclass
class MetricsReport:
    kind: str
    runs: list = field(default_factory=list)
    fps: float | None = None

    def _mean_curve(self, fn, attr):
        if not self.runs:
            raise ValueError("report has no runs")
        curves = [fn(getattr(r, attr))[1] for r in sorted(self.runs, key=_run_key)]
        return np.mean(curves, axis=0)

    @property
    def precision_points(self):
        return self._mean_curve(precision_curve, "errors")

    @property
    def success_points(self):
        return self._mean_curve(success_curve, "ious")

    @property
    def precision20(self):
        return float(np.mean([r.precision20 for r in sorted(self.runs, key=_run_key)]))

    @property
    def auc(self):
        return float(np.mean([r.auc for r in sorted(self.runs, key=_run_key)]))

    def to_dict(self):
        return {
            "kind": self.kind,
            "precision20": self.precision20,
            "auc": self.auc,
            "fps": self.fps,
            "precision_curve": {"thresholds": PRECISION_THRESHOLDS.tolist(),
                                "points": self.precision_points.tolist()},
            "success_curve": {"thresholds": SUCCESS_THRESHOLDS.tolist(), "points": self.success_points.tolist()},
            "runs": [{"sequence": r.spec.sequence, "kind": r.spec.kind, "start": r.spec.start,
                      "end": r.spec.end, "init_box": list(r.spec.init_box.as_tuple()),
                      "precision20": r.precision20, "auc": r.auc,
                      "center_errors": r.errors.tolist(), "ious": r.ious.tolist()}
                     for r in sorted(self.runs, key=_run_key)],
        }

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        if csv_path:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["curve", "threshold", "value"])
                for t, v in zip(PRECISION_THRESHOLDS, self.precision_points):
                    w.writerow(["precision", f"{t:g}", repr(float(v))])
                for t, v in zip(SUCCESS_THRESHOLDS, self.success_points):
                    w.writerow(["success", f"{t:g}", repr(float(v))])


def _run_key(r):
    return (r.spec.sequence, r.spec.kind, r.spec.start)


def evaluate(model, sequences, kind, config=TrackerConfig(), protocol=ProtocolConfig(), seed=0, tags=None):
    """Track and score every run of ``kind`` over ``sequences``.

    ``tags``, when given, keeps only sequences carrying at least one of them.
    """
    report = MetricsReport(kind.upper())
    total_frames = 0
    total_time = 0.0
    for seq in sequences:
        if tags and not set(tags) & set(seq.tags):
            continue
        for spec in gen_runs(seq, kind, protocol):
            boxes, _, secs = run_tracker(model, seq, spec, config, seed)
            res = score_run(spec, boxes, seq.boxes)
            res.fps = (len(boxes) - 1) / secs if secs > 0 else None
            report.runs.append(res)
            total_frames += len(boxes) - 1
            total_time += secs
    report.fps = total_frames / total_time if total_time > 0 else None
    return report


def evaluate_boxes(kind, runs_with_boxes, truths):
    """Score precomputed tracks: ``runs_with_boxes`` is a list of ``(RunSpec, boxes)``."""
    report = MetricsReport(kind.upper())
    for spec, boxes in runs_with_boxes:
        report.runs.append(score_run(spec, boxes, truths[spec.sequence]))
    return report


def bench_fps(model, seq, config=TrackerConfig(), seed=0, warmup=2):
    """Frames per second of the tracking loop over ``seq`` (frames already in memory).

    Includes patch extraction, every scale and the fusion; excludes the
    initialisation frame and disk I/O.
    """
    w, h = seq.frame_size
    state = init_tracker(model, seq.frames[0], seq.boxes[0], config, seed)
    for frame in seq.frames[1:1 + warmup]:
        step(state, frame)
    state = init_tracker(model, seq.frames[0], clip_box(seq.boxes[0], w, h), config, seed)
    before = dict(nn.COUNTERS)
    t0 = time.perf_counter()
    for frame in seq.frames[1:]:
        step(state, frame)
    secs = time.perf_counter() - t0
    grad_calls = nn.COUNTERS["backward"] - before["backward"]
    writes = nn.COUNTERS["param_writes"] - before["param_writes"]
    return {"fps": (len(seq) - 1) / secs, "seconds": secs, "frames": len(seq) - 1,
            "backward_calls": grad_calls, "param_writes": writes}
