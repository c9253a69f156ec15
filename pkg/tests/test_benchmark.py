import csv
import json

import numpy as np
import pytest

from conftest import tiny_arch
from ycnn import nn
from ycnn.benchmark import (PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, MetricsReport, ProtocolConfig, RunSpec,
                            bench_fps, center_error, evaluate, evaluate_boxes, gen_runs, overlap_ratio,
                            precision_curve, score_run, success_curve)
from ycnn.data import Box, SynthSpec, gen_synthetic_sequence
from ycnn.model import build_model
from ycnn.tracker import TrackerConfig


@pytest.fixture(scope="module")
def seq200():
    return gen_synthetic_sequence(SynthSpec(n_frames=200, step=1.0), 1)


class TestBoxMetrics:
    def test_center_error(self):
        a = Box.from_center(0, 0, 4, 4)
        b = Box.from_center(3, 4, 10, 2)
        assert center_error(a, a) == 0.0
        assert center_error(a, b) == 5.0
        assert center_error(b, a) == 5.0

    def test_overlap(self):
        assert overlap_ratio((0, 0, 2, 2), (1, 0, 2, 2)) == 2 / 6
        assert overlap_ratio((0, 0, 2, 2), (5, 5, 1, 1)) == 0.0
        assert overlap_ratio((0, 0, 2, 2), (2, 0, 2, 2)) == 0.0

    def test_overlap_symmetric_and_self(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = Box(*rng.uniform(-10, 10, 2), *rng.uniform(0.1, 20, 2))
            b = Box(*rng.uniform(-10, 10, 2), *rng.uniform(0.1, 20, 2))
            assert overlap_ratio(a, b) == overlap_ratio(b, a)
            assert overlap_ratio(a, a) == pytest.approx(1.0, abs=1e-15)
            assert 0.0 <= overlap_ratio(a, b) <= 1.0


class TestCurves:
    def test_thresholds(self):
        assert PRECISION_THRESHOLDS.tolist() == list(range(51))
        assert len(SUCCESS_THRESHOLDS) == 21 and SUCCESS_THRESHOLDS[10] == 0.5 and SUCCESS_THRESHOLDS[-1] == 1.0

    def test_precision_zero_errors(self):
        _, pts, p20 = precision_curve([0.0, 0.0])
        assert np.all(pts == 1.0) and p20 == 1.0

    def test_precision_counting(self):
        _, pts, p20 = precision_curve([10.0, 30.0])
        assert p20 == 0.5 and pts[20] == 0.5 and pts[9] == 0.0 and pts[30] == 1.0

    def test_precision_monotone(self):
        _, pts, _ = precision_curve(np.random.default_rng(0).exponential(15, 100))
        assert np.all(np.diff(pts) >= 0)

    def test_success_zero(self):
        assert success_curve([0.0, 0.0])[2] == 0.0

    def test_success_half(self):
        _, pts, auc = success_curve([0.5])
        assert pts[:10].tolist() == [1.0] * 10 and pts[10:].tolist() == [0.0] * 11
        assert auc == 10 / 21

    def test_success_perfect(self):
        assert success_curve([1.0, 1.0])[2] == 20 / 21

    def test_success_monotone(self):
        _, pts, auc = success_curve(np.random.default_rng(1).uniform(0, 1, 100))
        assert np.all(np.diff(pts) <= 0) and 0 <= auc <= 1

    def test_empty(self):
        with pytest.raises(ValueError):
            precision_curve([])


class TestRuns:
    def test_ope(self, seq200):
        runs = gen_runs(seq200, "OPE")
        assert len(runs) == 1 and runs[0].init_box == seq200.boxes[0] and runs[0].start == 0

    def test_sre(self, seq200):
        runs = gen_runs(seq200, "SRE")
        assert len(runs) == 12
        assert all(r.init_box != seq200.boxes[0] for r in runs)
        assert len({r.init_box for r in runs}) == 12
        b = seq200.boxes[0]
        shifts = {(round((r.init_box.x - b.x) / b.w, 9), round((r.init_box.y - b.y) / b.h, 9))
                  for r in runs if r.kind.startswith("SRE-shift")}
        assert shifts == {(sx * 0.1, sy * 0.1) for sx in (-1, 0, 1) for sy in (-1, 0, 1)} - {(0, 0)}
        scales = sorted(round(r.init_box.w / b.w, 9) for r in runs if r.kind.startswith("SRE-scale"))
        assert scales == [0.8, 0.9, 1.1, 1.2]

    def test_tre(self, seq200):
        runs = gen_runs(seq200, "TRE")
        assert len(runs) == 20
        assert runs[0].start == 0 and [r.start for r in runs] == list(range(0, 200, 10))
        assert all(r.end == 200 and r.init_box == seq200.boxes[r.start] for r in runs)

    def test_tre_short(self):
        s = gen_synthetic_sequence(SynthSpec(n_frames=9, step=1.0), 0)
        runs = gen_runs(s, "TRE")
        assert len(runs) == 4 and all(r.end - r.start >= 2 for r in runs)

    def test_configurable(self, seq200):
        assert len(gen_runs(seq200, "TRE", ProtocolConfig(tre_segments=5))) == 5
        assert len(gen_runs(seq200, "SRE", ProtocolConfig(sre_scales=(0.5,)))) == 9

    def test_unknown(self, seq200):
        with pytest.raises(ValueError):
            gen_runs(seq200, "XYZ")


class TestScoring:
    def test_oracle(self, seq200):
        runs = [(spec, seq200.boxes[spec.start:spec.end]) for spec in gen_runs(seq200, "TRE")]
        rep = evaluate_boxes("TRE", runs, {seq200.name: seq200.boxes})
        assert rep.precision20 == 1.0 and rep.auc == 20 / 21

    def test_two_sequence_mean(self):
        # sequence A: 2 frames, errors (0, 30); sequence B: 4 frames, all exact
        ta = [Box(0, 0, 10, 10), Box(0, 0, 10, 10)]
        tb = [Box(0, 0, 10, 10)] * 4
        pa = [Box(0, 0, 10, 10), Box(30, 0, 10, 10)]
        ra = score_run(RunSpec("a", ta[0], 0, 2, "OPE"), pa, ta)
        rb = score_run(RunSpec("b", tb[0], 0, 4, "OPE"), tb, tb)
        rep = MetricsReport("OPE", [rb, ra])
        assert ra.precision20 == 0.5 and rb.precision20 == 1.0
        assert rep.precision20 == 0.75  # per-run mean, not the frame-weighted 5/6
        # A: one exact frame and one disjoint frame -> AUC (20/21 + 0) / 2; B: 20/21
        assert ra.auc == pytest.approx(10 / 21) and rb.auc == 20 / 21
        assert rep.auc == pytest.approx(15 / 21)

    def test_length_mismatch(self, seq200):
        spec = gen_runs(seq200, "OPE")[0]
        with pytest.raises(ValueError):
            score_run(spec, seq200.boxes[:5], seq200.boxes)

    def test_write(self, seq200, tmp_path):
        runs = [(spec, seq200.boxes) for spec in gen_runs(seq200, "OPE")]
        rep = evaluate_boxes("OPE", runs, {seq200.name: seq200.boxes})
        rep.write(tmp_path / "r.json", tmp_path / "r.csv")
        d = json.loads((tmp_path / "r.json").read_text())
        assert d["precision20"] == 1.0 and d["auc"] == 20 / 21 and len(d["runs"]) == 1
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["curve", "threshold", "value"] and len(rows) == 1 + 51 + 21

    def test_evaluate_tag_filter(self):
        s = gen_synthetic_sequence(SynthSpec(n_frames=6, step=1.0), 0)
        s.tags = ("OCC",)
        m = build_model(tiny_arch(channels=3), 0)
        assert evaluate(m, [s], "OPE", tags=["IV"]).runs == []
        rep = evaluate(m, [s], "OPE", tags=["OCC"])
        assert len(rep.runs) == 1 and rep.fps > 0


class TestBench:
    def test_counters_and_fps(self):
        s = gen_synthetic_sequence(SynthSpec(n_frames=8, step=1.0), 0)
        m = build_model(tiny_arch(channels=3), 0).freeze()
        out = bench_fps(m, s, TrackerConfig(n_templates=2))
        assert out["fps"] > 0 and out["frames"] == 7
        assert out["backward_calls"] == 0 and out["param_writes"] == 0
        assert nn.COUNTERS["backward"] == 0
