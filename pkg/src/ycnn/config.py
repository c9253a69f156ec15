"""INI-style run configuration with ``section.key=value`` overrides."""
from __future__ import annotations

import configparser
import io
import os

from .data import AugConfig
from .loss import LossConfig
from .model import ArchConfig, ConvSpec
from .tracker import TrackerConfig
from .training import StageConfig

DEFAULTS = {
    "global": {
        "seed": "0",
        "precision": "float32",
        "threads": "1",
        "strict_deterministic": "false",
    },
    "model": {
        "object_side": "48",
        "search_side": "96",
        "channels": "3",
        "conv1": "32,5,1,2",
        "conv2": "64,3,1,2",
        "conv3": "96,3,1,2",
        "reduce_filters": "4",
        "shallow_pool": "4",
        "fc_hidden": "1024,1024",
        "map_side": "24",
        "init_seed": "0",
    },
    "loss": {"a": "0.1", "b": "3.0", "th": "0.05", "sigma_frac": "0.1"},
    "synth": {
        "sequences": "5",
        "frames": "200",
        "stills": "200",
        "occlusion": "true",
        "occlusion_cover": "0.75",
        "frame_w": "192",
        "frame_h": "144",
        "seed": "0",
    },
    "train1": {"steps": "5000", "batch_size": "32", "lr": "1e-4", "loss": "masked", "checkpoint_every": "0",
               "seed": "1", "negative_frac": "0"},
    "train2": {"steps": "2000", "batch_size": "16", "lr": "1e-5", "loss": "masked", "checkpoint_every": "0",
               "seed": "2", "negative_frac": "0"},
    "track": {"n_templates": "5", "scales": "0.95,1.0,1.05", "seed": "0", "max_templates": "none"},
    "eval": {"kinds": "OPE,SRE,TRE", "sre_shift": "0.1", "sre_scales": "0.8,0.9,1.1,1.2",
             "tre_segments": "20", "bench": "false"},
}


class ConfigError(ValueError):
    pass


def load(path=None, overrides=()):
    """Defaults, then ``path`` (if any), then ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        cp.read(path)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value.strip())
    return cp


def dump(cp):
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def arch_config(cp):
    m = cp["model"]
    convs = tuple(ConvSpec(*_ints(m[f"conv{i}"])) for i in (1, 2, 3))
    return ArchConfig(object_side=m.getint("object_side"), search_side=m.getint("search_side"),
                      channels=m.getint("channels"), convs=convs, reduce_filters=m.getint("reduce_filters"),
                      shallow_pool=m.getint("shallow_pool"), fc_hidden=_ints(m["fc_hidden"]),
                      map_side=m.getint("map_side"))


def loss_config(cp):
    s = cp["loss"]
    return LossConfig(s.getfloat("a"), s.getfloat("b"), s.getfloat("th"), s.getfloat("sigma_frac"))


def stage_config(cp, stage):
    s = cp[f"train{stage}"]
    base = StageConfig.stage1 if stage == 1 else StageConfig.stage2
    aug = AugConfig() if stage == 1 else AugConfig.translation_only()
    return base(steps=s.getint("steps"), batch_size=s.getint("batch_size"), lr=s.getfloat("lr"),
                loss=loss_config(cp), loss_kind=s.get("loss"), aug=aug,
                checkpoint_every=s.getint("checkpoint_every"), seed=s.getint("seed"),
                negative_frac=s.getfloat("negative_frac", 0.0))


def tracker_config(cp):
    t = cp["track"]
    cap = t.get("max_templates", "none")
    return TrackerConfig(n_templates=t.getint("n_templates"), scales=_floats(t["scales"]),
                         max_templates=None if cap.lower() == "none" else int(cap))
