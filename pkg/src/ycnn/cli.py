"""``ycnn`` command line: synth, train, track, eval, bench."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import cv2
import numpy as np

from . import benchmark, config, nn
from .data import Sequence, gen_synthetic_image, gen_synthetic_sequence, random_sequence_spec, read_sequence, write_sequence
from .model import build_model, load_checkpoint, save_checkpoint
from .tracker import read_track, track, write_track
from .training import run_stage

log = logging.getLogger("ycnn")

OUTPUT_ROOT_ENV = "YCNN_OUTPUT_ROOT"


class CliError(RuntimeError):
    pass


def _out_dir(path):
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        path = os.path.join(root, path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise CliError(f"output directory not writable: {path}")
    return path


def _echo_config(cp, out):
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(config.dump(cp))


def _sequence_dirs(paths):
    dirs = []
    for p in paths:
        if not os.path.isdir(p):
            raise CliError(f"sequence directory not found: {p}")
        if os.path.exists(os.path.join(p, "groundtruth.txt")):
            dirs.append(p)
        else:
            subs = sorted(os.path.join(p, d) for d in os.listdir(p)
                          if os.path.exists(os.path.join(p, d, "groundtruth.txt")))
            if not subs:
                raise CliError(f"no sequences (missing groundtruth.txt) under {p}")
            dirs.extend(subs)
    return dirs


# --- synth ---------------------------------------------------------------------

def cmd_synth(cp, args):
    s = cp["synth"]
    out = _out_dir(args.out)
    seed = s.getint("seed")
    rng = np.random.default_rng(seed)
    w, h = s.getint("frame_w"), s.getint("frame_h")
    written = []
    for i in range(s.getint("sequences")):
        spec = random_sequence_spec(rng, n_frames=s.getint("frames"), occlusion=s.getboolean("occlusion"),
                                    frame_w=w, frame_h=h, occlusion_cover=s.getfloat("occlusion_cover"))
        name = f"seq{i:03d}"
        seq = gen_synthetic_sequence(spec, int(rng.integers(2**31)), name=name)
        write_sequence(seq, os.path.join(out, name))
        written.append(name)
    n_stills = s.getint("stills")
    if n_stills:
        stills = [gen_synthetic_image(int(rng.integers(2**31)), w, h) for _ in range(n_stills)]
        write_sequence(Sequence("stills", [im for im, _ in stills], [b for _, b in stills], tags=("stills",)),
                       os.path.join(out, "stills"))
        written.append("stills")
    _echo_config(cp, out)
    print(json.dumps({"command": "synth", "out": out, "written": written}))


# --- train ---------------------------------------------------------------------

def _stills(sequences):
    corpus = []
    for seq in sequences:
        for frame, box, occ in zip(seq.frames, seq.boxes, seq.occluded):
            if not occ:
                corpus.append((frame, box))
    return corpus


def cmd_train(cp, args):
    stage = args.stage
    if not args.corpus:
        raise CliError("missing training corpus (--corpus)")
    seqs = [read_sequence(d) for d in _sequence_dirs(args.corpus)]
    if stage == 2:
        seqs = [s for s in seqs if "stills" not in s.tags]
    if not seqs:
        raise CliError("training corpus is empty")
    if stage == 2 and not args.init and not args.from_scratch:
        raise CliError("stage 2 needs a stage-1 checkpoint (--init) or --from-scratch")
    arch = config.arch_config(cp)
    if args.init:
        if not os.path.exists(args.init):
            raise CliError(f"checkpoint not found: {args.init}")
        model = load_checkpoint(args.init)
    else:
        model = build_model(arch, cp["model"].getint("init_seed"))
    cfg = config.stage_config(cp, stage)
    out = _out_dir(args.out)
    corpus = _stills(seqs) if stage == 1 else seqs
    threads = 1 if cp["global"].getboolean("strict_deterministic") else cp["global"].getint("threads")
    model, _, report = run_stage(model, cfg, corpus, checkpoint_dir=out, prefix=f"stage{stage}", threads=threads)
    ckpt = os.path.join(out, f"stage{stage}.ycnn")
    save_checkpoint(model, ckpt)
    report.write_jsonl(os.path.join(out, f"stage{stage}-report.jsonl"))
    _echo_config(cp, out)
    last = report.records[-1] if report.records else {}
    print(json.dumps({"command": "train", "stage": stage, "checkpoint": ckpt, "steps": len(report.records),
                      "final_loss": last.get("loss")}))


# --- track ---------------------------------------------------------------------

def _load_model(path):
    if not path:
        raise CliError("missing checkpoint (--checkpoint)")
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}")
    return load_checkpoint(path).freeze()


def _draw(frame, box, path):
    img = cv2.cvtColor(frame, cv2.COLOR_RGB2BGR)
    p0 = (int(round(box.x)), int(round(box.y)))
    p1 = (int(round(box.x + box.w)), int(round(box.y + box.h)))
    cv2.rectangle(img, p0, p1, (0, 0, 255), 1)
    cv2.imwrite(path, img)


def cmd_track(cp, args):
    model = _load_model(args.checkpoint)
    tcfg = config.tracker_config(cp)
    seed = cp["track"].getint("seed")
    out = _out_dir(args.out)
    nn.reset_counters()
    summary = {}
    for d in _sequence_dirs(args.sequence):
        seq = read_sequence(d)
        if "stills" in seq.tags:
            continue
        results = track(model, seq.frames, seq.boxes[0], tcfg, seed)
        write_track(results, os.path.join(out, f"{seq.name}.txt"))
        if args.debug_frames:
            dbg = os.path.join(out, f"{seq.name}-frames")
            os.makedirs(dbg, exist_ok=True)
            for i, (frame, r) in enumerate(zip(seq.frames, results), 1):
                _draw(frame, r.box, os.path.join(dbg, f"{i:05d}.png"))
        summary[seq.name] = len(results)
    counters = dict(nn.COUNTERS)
    with open(os.path.join(out, "counters.json"), "w") as fh:
        json.dump(counters, fh, sort_keys=True)
    _echo_config(cp, out)
    print(json.dumps({"command": "track", "out": out, "frames": summary, "counters": counters}))


# --- eval ----------------------------------------------------------------------

def _protocol(cp):
    e = cp["eval"]
    return benchmark.ProtocolConfig(e.getfloat("sre_shift"), config._floats(e["sre_scales"]),
                                    e.getint("tre_segments"))


def cmd_eval(cp, args):
    dirs = _sequence_dirs(args.sequence)
    seqs = [s for s in (read_sequence(d) for d in dirs) if "stills" not in s.tags]
    for s in seqs:
        if not s.boxes:
            raise CliError(f"missing ground truth for {s.name}")
    kinds = [k.strip().upper() for k in (args.kinds or cp["eval"]["kinds"]).split(",") if k.strip()]
    out = _out_dir(args.out)
    protocol = _protocol(cp)
    tags = args.tags.split(",") if args.tags else None
    reports = {}
    if args.tracks:
        if kinds != ["OPE"]:
            raise CliError("precomputed tracks can only be scored as OPE (use --kinds OPE)")
        runs = []
        for s in seqs:
            path = os.path.join(args.tracks, f"{s.name}.txt")
            if not os.path.exists(path):
                raise CliError(f"missing track file {path}")
            boxes = [b for _, b, _, _ in read_track(path)]
            runs.append((benchmark.gen_runs(s, "OPE", protocol)[0], boxes))
        reports["OPE"] = benchmark.evaluate_boxes("OPE", runs, {s.name: s.boxes for s in seqs})
    else:
        model = _load_model(args.checkpoint)
        tcfg = config.tracker_config(cp)
        for kind in kinds:
            reports[kind] = benchmark.evaluate(model, seqs, kind, tcfg, protocol, cp["track"].getint("seed"), tags)
    bench = args.bench or cp["eval"].getboolean("bench")
    rows = []
    for kind, rep in reports.items():
        if not bench:
            rep.fps = None
        rep.write(os.path.join(out, f"{kind.lower()}.json"), os.path.join(out, f"{kind.lower()}-curves.csv"))
        rows.append((kind, len(rep.runs), rep.precision20, rep.auc, rep.fps))
    _echo_config(cp, out)
    header = f"{'protocol':<8} {'runs':>5} {'prec@20':>8} {'AUC':>7}" + (f" {'fps':>8}" if bench else "")
    print(header)
    for kind, n, p, a, fps in rows:
        line = f"{kind:<8} {n:>5} {p:>8.4f} {a:>7.4f}"
        if bench:
            line += f" {fps:>8.2f}" if fps else f" {'-':>8}"
        print(line)


# --- bench ---------------------------------------------------------------------

def cmd_bench(cp, args):
    model = _load_model(args.checkpoint)
    seq = read_sequence(_sequence_dirs(args.sequence)[0])
    tcfg = config.tracker_config(cp)
    results = {}
    for n in (1, tcfg.n_templates):
        cfg = type(tcfg)(n_templates=n, scales=tcfg.scales, max_templates=tcfg.max_templates)
        results[f"N={n}"] = benchmark.bench_fps(model, seq, cfg, cp["track"].getint("seed"))
    if tcfg.n_templates != 1:
        results["time_ratio"] = (results[f"N={tcfg.n_templates}"]["seconds"] / results["N=1"]["seconds"])
    if args.out:
        out = _out_dir(args.out)
        with open(os.path.join(out, "bench.json"), "w") as fh:
            json.dump(results, fh, indent=1, sort_keys=True)
        _echo_config(cp, out)
    print(json.dumps(results, sort_keys=True))


# --- entry point ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ycnn", description="Two-flow CNN tracker: data, training, tracking, evaluation.")
    p.add_argument("--config", help="INI config file; see ycnn.config.DEFAULTS for keys")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--seed", type=int, help="global seed (overrides global.seed)")
    p.add_argument("--threads", type=int, help="worker threads for batch preparation")
    p.add_argument("--strict-deterministic", action="store_true", help="serialize everything")
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic sequences and stills")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run training stage 1 or 2")
    t.add_argument("--stage", type=int, choices=[1, 2], required=True)
    t.add_argument("--corpus", nargs="+", help="sequence directories (or parents of them)")
    t.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    t.add_argument("--from-scratch", action="store_true", help="allow stage 2 without a stage-1 checkpoint")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", help="track sequences with a checkpoint")
    k.add_argument("--checkpoint")
    k.add_argument("--sequence", nargs="+", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--debug-frames", action="store_true", help="write box-annotated frames")
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="OPE/SRE/TRE evaluation")
    e.add_argument("--checkpoint")
    e.add_argument("--tracks", help="directory of precomputed <sequence>.txt tracks (OPE only)")
    e.add_argument("--sequence", nargs="+", required=True)
    e.add_argument("--kinds", help="comma list of OPE,SRE,TRE")
    e.add_argument("--tags", help="only sequences carrying one of these tags")
    e.add_argument("--bench", action="store_true", help="include fps in the summary")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="tracking speed for N=1 and N templates")
    b.add_argument("--checkpoint")
    b.add_argument("--sequence", nargs="+", required=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides += [f"global.seed={args.seed}"]
        if args.threads is not None:
            overrides += [f"global.threads={args.threads}"]
        if args.strict_deterministic:
            overrides += ["global.strict_deterministic=true"]
        if args.precision:
            overrides += [f"global.precision={args.precision}"]
        cp = config.load(args.config, overrides)
        nn.set_precision(cp["global"]["precision"])
        args.func(cp, args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        if args.verbose:
            log.exception("command failed")
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
