"""Tracking with a fixed, already-trained network.

Each frame, up to ``n_templates`` stored object patches are drawn at random
from those whose confidence clears the threshold (half the initial
confidence). Their response maps on the search patch are averaged with the
confidences as weights; the peak of the fused map gives the new position and
its height the new confidence. Nothing here computes gradients or writes
parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Box, clip_box, extract_patch, frame_mean, search_box, template_box
from .model import forward


@dataclass(frozen=True)
class TrackerConfig:
    n_templates: int = 5
    scales: tuple = (0.95, 1.0, 1.05)
    # cap on stored templates (random eviction, initial template kept); None = unbounded
    max_templates: int | None = None
    always_use_initial: bool = False

    def __post_init__(self):
        if self.n_templates < 1:
            raise ValueError("n_templates must be >= 1")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")


@dataclass
class Template:
    patch: np.ndarray
    confidence: float
    frame: int


@dataclass
class FrameResult:
    frame: int
    box: Box
    confidence: float
    scale: float
    response: np.ndarray | None = None
    templates: list = field(default_factory=list)
    stored: bool = False


@dataclass
class TrackerState:
    model: object
    config: TrackerConfig
    templates: list
    c1: float
    c_th: float
    box: Box
    rng: np.random.Generator
    frame: int = 0
    frame_size: tuple = (0, 0)


def _patches(model, frame, box, scale=1.0):
    cfg = model.config
    fill = frame_mean(frame, cfg.channels)
    obj = extract_patch(frame, template_box(box), cfg.object_side, cfg.channels, model.dtype, fill)
    sbox = search_box(box, scale)
    search = extract_patch(frame, sbox, cfg.search_side, cfg.channels, model.dtype, fill)
    return obj, search, sbox


def init_tracker(model, frame, box, config=TrackerConfig(), seed=0, frame_index=0):
    """Initial template from ``box``; its own peak response on its own search patch sets ``c1``."""
    h, w = np.asarray(frame).shape[:2]
    box = clip_box(box, w, h)
    obj, search, _ = _patches(model, frame, box)
    c1 = float(np.max(forward(model, obj, search).values))
    return TrackerState(model, config, [Template(obj, max(c1, 0.0), frame_index)], c1, c1 / 2.0, box,
                        np.random.default_rng(seed), frame_index, (w, h))


def eligible(state):
    ok = [t for t in state.templates if t.confidence >= state.c_th]
    # a negative c1 puts even the initial template under the threshold; fall back to it
    return ok or state.templates[:1]


def select_templates(state, rng=None):
    """Uniform random draw of ``min(N, #eligible)`` templates, in frame order."""
    rng = state.rng if rng is None else rng
    pool = eligible(state)
    n = state.config.n_templates
    if len(pool) <= n:
        return list(pool)
    if state.config.always_use_initial and pool[0] is state.templates[0]:
        rest = rng.choice(len(pool) - 1, size=n - 1, replace=False) + 1
        picks = [0, *sorted(int(i) for i in rest)]
    else:
        picks = sorted(int(i) for i in rng.choice(len(pool), size=n, replace=False))
    return [pool[i] for i in picks]


def fuse_maps(maps, confidences):
    """Confidence-weighted mean of response maps; plain mean if every weight is zero."""
    maps = np.asarray(maps)
    c = np.maximum(np.asarray(confidences, dtype=np.float64), 0.0)
    if c.sum() <= 0:
        fused = maps.mean(axis=0)
    else:
        fused = np.tensordot(c / c.sum(), maps, axes=1)
    return fused.astype(maps.dtype, copy=False)


def fuse_predict(model, templates, search_patch):
    """``(M_k, c_k)``: fused response of every template on one search patch, and its maximum."""
    if not templates:
        raise ValueError("need at least one template")
    maps = [forward(model, t.patch, search_patch).values for t in templates]
    fused = fuse_maps(maps, [t.confidence for t in templates])
    return fused, float(fused.max())


def locate(response, geometry, sbox):
    """Frame coordinates of the response peak; ties go to the lowest row-major index."""
    row, col = np.unravel_index(int(np.argmax(response)), response.shape)
    px, py = geometry.cell_center(row, col)
    k = sbox.w / geometry.patch_side
    return sbox.x + px * k, sbox.y + py * k


def _pick_scale(results):
    best = max(c for _, _, c in results)
    winners = [r for r in results if r[2] == best]
    return min(winners, key=lambda r: (abs(r[0] - 1.0), r[0]))


def step(state, frame):
    """Track one frame; mutates ``state`` (box, templates, frame counter) and returns a FrameResult."""
    model = state.model
    fill = frame_mean(frame, model.config.channels)
    chosen = select_templates(state)
    results = []
    for s in state.config.scales:
        sbox = search_box(state.box, s)
        search = extract_patch(frame, sbox, model.config.search_side, model.config.channels, model.dtype, fill)
        fused, c = fuse_predict(model, chosen, search)
        results.append((s, (fused, sbox), c))
    scale, (fused, sbox), c_k = _pick_scale(results)
    cx, cy = locate(fused, model.geometry, sbox)
    w, h = state.frame_size
    box = clip_box(Box.from_center(cx, cy, state.box.w * scale, state.box.h * scale), w, h)
    state.frame += 1
    state.box = box
    stored = c_k >= state.c_th
    if stored:
        obj = extract_patch(frame, template_box(box), model.config.object_side, model.config.channels,
                            model.dtype, fill)
        state.templates.append(Template(obj, max(c_k, 0.0), state.frame))
        cap = state.config.max_templates
        if cap is not None and len(state.templates) > cap:
            drop = 1 + int(state.rng.integers(len(state.templates) - 1))
            del state.templates[drop]
    return FrameResult(state.frame, box, c_k, scale, fused,
                       [(t.frame, t.confidence) for t in chosen], stored)


def track(model, frames, init_box, config=TrackerConfig(), seed=0, on_frame=None):
    """Run over ``frames`` (first one initialises); one FrameResult per frame."""
    it = iter(frames)
    first = next(it)
    state = init_tracker(model, first, init_box, config, seed)
    results = [FrameResult(0, state.box, state.c1, 1.0, None, [(0, state.c1)], True)]
    if on_frame is not None:
        on_frame(state, results[-1])
    for frame in it:
        results.append(step(state, frame))
        if on_frame is not None:
            on_frame(state, results[-1])
    return results


def write_track(results, path, first_index=1):
    """One ``frame_index,x,y,w,h,confidence,scale`` line per frame."""
    with open(path, "w") as fh:
        for r in results:
            b = r.box
            fh.write(f"{r.frame + first_index},{b.x:.4f},{b.y:.4f},{b.w:.4f},{b.h:.4f},"
                     f"{r.confidence:.6f},{r.scale:.4f}\n")


def read_track(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                f, x, y, w, h, c, s = line.strip().split(",")
                rows.append((int(f), Box(float(x), float(y), float(w), float(h)), float(c), float(s)))
    return rows
