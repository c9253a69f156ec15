import json
import os

import numpy as np
import pytest

from ycnn import cli, config
from ycnn.data import read_sequence
from ycnn.model import load_checkpoint
from ycnn.tracker import read_track

TINY = ["model.object_side=12", "model.search_side=24", "model.conv1=3,3,1,2", "model.conv2=4,2,1,1",
        "model.conv3=5,2,1,1", "model.fc_hidden=7,6", "model.map_side=4", "model.shallow_pool=2",
        "synth.sequences=2", "synth.frames=12", "synth.stills=6", "synth.frame_w=96", "synth.frame_h=80",
        "train1.steps=4", "train1.batch_size=3", "train2.steps=3", "train2.batch_size=2",
        "eval.tre_segments=3"]


def run(capsys, *args, sets=TINY):
    argv = [a for s in sets for a in ("--set", s)] + list(args)
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    argv = [a for s in TINY for a in ("--set", s)]
    steps = [
        ["synth", "--out", str(root / "data")],
        ["train", "--stage", "1", "--corpus", str(root / "data"), "--out", str(root / "s1")],
        ["train", "--stage", "2", "--corpus", str(root / "data"), "--init", str(root / "s1" / "stage1.ycnn"),
         "--out", str(root / "s2")],
        ["track", "--checkpoint", str(root / "s2" / "stage2.ycnn"), "--sequence", str(root / "data"),
         "--out", str(root / "tracks")],
        ["eval", "--checkpoint", str(root / "s2" / "stage2.ycnn"), "--sequence", str(root / "data"),
         "--out", str(root / "eval")],
    ]
    for s in steps:
        assert cli.main(argv + s) == 0, s
    return root


class TestConfig:
    def test_defaults_and_overrides(self, tmp_path):
        cp = config.load(overrides=["track.n_templates=3", "new.key=1"])
        assert cp["track"].getint("n_templates") == 3 and cp["new"]["key"] == "1"
        assert config.arch_config(config.load()).param_count() == 13_858_020
        ini = tmp_path / "c.ini"
        ini.write_text("[train1]\nsteps = 7\n")
        assert config.stage_config(config.load(str(ini)), 1).steps == 7

    def test_bad_override(self):
        with pytest.raises(config.ConfigError):
            config.load(overrides=["novalue"])

    def test_dump_round_trip(self, tmp_path):
        cp = config.load(overrides=TINY)
        (tmp_path / "e.ini").write_text(config.dump(cp))
        assert config.dump(config.load(str(tmp_path / "e.ini"))) == config.dump(cp)

    def test_stage_configs(self):
        cp = config.load()
        s1, s2 = config.stage_config(cp, 1), config.stage_config(cp, 2)
        assert (s1.steps, s1.batch_size, s1.lr, s1.sampler) == (5000, 32, 1e-4, "image")
        assert (s2.steps, s2.batch_size, s2.lr, s2.sampler) == (2000, 16, 1e-5, "sequence")
        assert not (s2.aug.rotation or s2.aug.mosaic or s2.aug.illumination or s2.aug.salt_pepper)


class TestPipeline:
    def test_synth_layout(self, pipeline):
        names = sorted(os.listdir(pipeline / "data"))
        assert names == ["config.ini", "seq000", "seq001", "stills"]
        s = read_sequence(pipeline / "data" / "seq000")
        assert len(s) == 12 and s.frame_size == (96, 80)

    def test_config_echo_everywhere(self, pipeline):
        for d in ("data", "s1", "s2", "tracks", "eval"):
            assert (pipeline / d / "config.ini").exists()

    def test_train_outputs(self, pipeline):
        m = load_checkpoint(pipeline / "s1" / "stage1.ycnn")
        assert m.config.map_side == 4
        lines = (pipeline / "s1" / "stage1-report.jsonl").read_text().splitlines()
        assert len(lines) == 4
        assert len((pipeline / "s2" / "stage2-report.jsonl").read_text().splitlines()) == 3

    def test_track_output(self, pipeline):
        s = read_sequence(pipeline / "data" / "seq001")
        rows = read_track(pipeline / "tracks" / "seq001.txt")
        assert len(rows) == len(s)
        np.testing.assert_allclose(rows[0][1].as_tuple(), s.boxes[0].as_tuple(), atol=1e-4)
        counters = json.loads((pipeline / "tracks" / "counters.json").read_text())
        assert counters == {"backward": 0, "param_writes": 0}

    def test_eval_reports(self, pipeline):
        sre = json.loads((pipeline / "eval" / "sre.json").read_text())
        assert len(sre["runs"]) == 12 * 2
        tre = json.loads((pipeline / "eval" / "tre.json").read_text())
        assert len(tre["runs"]) == 3 * 2
        assert (pipeline / "eval" / "ope-curves.csv").exists()

    def test_eval_oracle_tracks(self, pipeline, tmp_path, capsys):
        from ycnn.tracker import FrameResult, write_track
        tracks = tmp_path / "oracle"
        tracks.mkdir()
        for name in ("seq000", "seq001"):
            s = read_sequence(pipeline / "data" / name)
            write_track([FrameResult(i, b, 1.0, 1.0) for i, b in enumerate(s.boxes)], tracks / f"{name}.txt")
        code, out, _ = run(capsys, "eval", "--tracks", str(tracks), "--kinds", "OPE", "--sequence",
                           str(pipeline / "data"), "--out", str(tmp_path / "ev"))
        assert code == 0
        d = json.loads((tmp_path / "ev" / "ope.json").read_text())
        assert d["precision20"] == 1.0 and d["auc"] == 20 / 21
        assert "OPE" in out and "fps" not in out

    def test_eval_bench_column(self, pipeline, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--checkpoint", str(pipeline / "s2" / "stage2.ycnn"), "--kinds", "OPE",
                           "--bench", "--sequence", str(pipeline / "data" / "seq000"), "--out", str(tmp_path))
        assert code == 0 and "fps" in out.splitlines()[0]

    def test_bench(self, pipeline, capsys):
        code, out, _ = run(capsys, "bench", "--checkpoint", str(pipeline / "s2" / "stage2.ycnn"), "--sequence",
                           str(pipeline / "data" / "seq000"))
        d = json.loads(out)
        assert code == 0 and d["N=1"]["fps"] > 0 and d["N=5"]["backward_calls"] == 0


class TestErrors:
    def _single_error_line(self, code, err):
        assert code != 0
        lines = err.strip().splitlines()
        assert len(lines) == 1 and lines[0].startswith("error: ")
        return lines[0]

    def test_stage2_needs_checkpoint(self, pipeline, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--stage", "2", "--corpus", str(pipeline / "data"),
                           "--out", str(tmp_path))
        assert "--init" in self._single_error_line(code, err)

    def test_stage2_override(self, pipeline, tmp_path, capsys):
        code, _, _ = run(capsys, "train", "--stage", "2", "--from-scratch", "--corpus", str(pipeline / "data"),
                         "--out", str(tmp_path))
        assert code == 0

    def test_missing_corpus(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--stage", "1", "--corpus", str(tmp_path / "nope"),
                           "--out", str(tmp_path / "o"))
        assert "nope" in self._single_error_line(code, err)

    def test_missing_checkpoint(self, pipeline, tmp_path, capsys):
        code, _, err = run(capsys, "track", "--checkpoint", str(tmp_path / "x.ycnn"), "--sequence",
                           str(pipeline / "data"), "--out", str(tmp_path))
        assert "x.ycnn" in self._single_error_line(code, err)

    def test_missing_ground_truth(self, pipeline, tmp_path, capsys):
        import shutil
        shutil.copytree(pipeline / "data" / "seq000", tmp_path / "s")
        (tmp_path / "s" / "groundtruth.txt").unlink()
        code, _, err = run(capsys, "eval", "--checkpoint", str(pipeline / "s2" / "stage2.ycnn"), "--sequence",
                           str(tmp_path / "s"), "--out", str(tmp_path / "o"))
        self._single_error_line(code, err)

    def test_object_larger_than_frame(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--out", str(tmp_path),
                           sets=TINY + ["synth.frame_w=30", "synth.frame_h=30"])
        assert "does not fit" in self._single_error_line(code, err)

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, err = run(capsys, "synth", "--out", str(blocker / "sub"))
        self._single_error_line(code, err)


class TestDeterminism:
    def test_synth_bytes(self, tmp_path, capsys):
        for d in ("a", "b"):
            assert run(capsys, "synth", "--out", str(tmp_path / d))[0] == 0
        for sub in ("seq000", "stills"):
            for f in sorted(os.listdir(tmp_path / "a" / sub)):
                assert (tmp_path / "a" / sub / f).read_bytes() == (tmp_path / "b" / sub / f).read_bytes()

    def test_output_root(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
        assert run(capsys, "synth", "--out", "rel")[0] == 0
        assert (tmp_path / "rel" / "seq000" / "groundtruth.txt").exists()

    def test_debug_frames(self, pipeline, tmp_path, capsys):
        code, _, _ = run(capsys, "track", "--checkpoint", str(pipeline / "s1" / "stage1.ycnn"), "--sequence",
                         str(pipeline / "data" / "seq000"), "--out", str(tmp_path), "--debug-frames")
        assert code == 0 and len(os.listdir(tmp_path / "seq000-frames")) == 12
