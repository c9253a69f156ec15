"""Patches, augmentation, training-pair samplers and synthetic sequences."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import cv2
import numpy as np

from .loss import make_label_map
from .model import MapGeometry


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box {self}")

    @property
    def center(self):
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def scaled(self, factor):
        cx, cy = self.center
        return Box.from_center(cx, cy, self.w * factor, self.h * factor)

    def shifted(self, dx, dy):
        return Box(self.x + dx, self.y + dy, self.w, self.h)

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)


def template_box(box):
    """Square region of side ``max(w, h)`` around ``box``; what the object flow sees."""
    side = max(box.w, box.h)
    cx, cy = box.center
    return Box.from_center(cx, cy, side, side)


def search_box(box, scale=1.0):
    """Square region twice the template region, centred on ``box``."""
    side = 2.0 * max(box.w, box.h) * scale
    cx, cy = box.center
    return Box.from_center(cx, cy, side, side)


def clip_box(box, frame_w, frame_h, min_side=1.0):
    """Keep the centre inside the frame and the size within [min_side, frame size]."""
    w = float(np.clip(box.w, min_side, frame_w))
    h = float(np.clip(box.h, min_side, frame_h))
    cx, cy = box.center
    cx = float(np.clip(cx, 0, frame_w))
    cy = float(np.clip(cy, 0, frame_h))
    return Box.from_center(cx, cy, w, h)


def frame_mean(image, channels=None):
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if channels == 1 and img.shape[2] == 3:
        img = cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2GRAY)[:, :, None]
    return img.reshape(-1, img.shape[2]).mean(axis=0, dtype=np.float64)


def extract_patch(image, box, out_side, channels=None, dtype=np.float32, fill=None):
    """Crop ``box`` from an 8-bit ``H x W x C`` frame into a ``C x out x out`` patch in [-0.5, 0.5].

    Out-of-frame pixels take the frame's mean colour (or ``fill`` when the
    caller already has it); resampling is bilinear.
    """
    if not (box.w > 0 and box.h > 0):
        raise ValueError(f"degenerate box {box}")
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if channels == 1 and img.shape[2] == 3:
        img = cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2GRAY)[:, :, None]
    img = img.astype(np.float32)
    mean = img.reshape(-1, img.shape[2]).mean(axis=0) if fill is None else np.atleast_1d(fill)
    sx = box.w / out_side
    sy = box.h / out_side
    # output pixel centre u+0.5 maps to box.x + (u+0.5)*sx in continuous coords
    m = np.array([[sx, 0.0, box.x + 0.5 * sx - 0.5],
                  [0.0, sy, box.y + 0.5 * sy - 0.5]], dtype=np.float64)
    border = tuple(float(v) for v in mean) + (0.0,) * (4 - len(mean))
    out = cv2.warpAffine(img, m, (out_side, out_side),
                         flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=border)
    if out.ndim == 2:
        out = out[:, :, None]
    return (out.transpose(2, 0, 1) / 255.0 - 0.5).astype(dtype)


# --- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugConfig:
    rotation_deg: float = 30.0
    gain_range: tuple = (0.6, 1.4)
    mosaic_block: tuple = (4, 8)
    salt_pepper_max: float = 0.05
    # fraction of the search side the crop may shift, further limited by containment
    max_shift_frac: float = 0.25
    prob: float = 0.5
    rotation: bool = True
    translation: bool = True
    illumination: bool = True
    mosaic: bool = True
    salt_pepper: bool = True
    max_retries: int = 20

    def __post_init__(self):
        if not 0 <= self.salt_pepper_max <= 1:
            raise ValueError("salt-and-pepper density must lie in [0, 1]")
        if not 0 <= self.prob <= 1:
            raise ValueError("prob must lie in [0, 1]")

    @classmethod
    def disabled(cls):
        return cls(rotation=False, translation=False, illumination=False, mosaic=False, salt_pepper=False)

    @classmethod
    def translation_only(cls):
        return cls(rotation=False, illumination=False, mosaic=False, salt_pepper=False)


def _hwc(p):
    return np.ascontiguousarray(p.transpose(1, 2, 0))


def _chw(p, c):
    if p.ndim == 2:
        p = p[:, :, None]
    return np.ascontiguousarray(p.transpose(2, 0, 1)[:c])


def rotate(patch, degrees):
    c, h, w = patch.shape
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), degrees, 1.0)
    out = cv2.warpAffine(_hwc(patch), m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
    return _chw(out, c).astype(patch.dtype)


def shift(patch, dx, dy):
    """Move the crop window by ``(dx, dy)``: content moves by ``(-dx, -dy)``; borders reflect."""
    c, h, w = patch.shape
    m = np.array([[1.0, 0.0, -dx], [0.0, 1.0, -dy]])
    out = cv2.warpAffine(_hwc(patch), m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
    return _chw(out, c).astype(patch.dtype)


def illuminate(patch, gain):
    return np.clip((patch + 0.5) * gain - 0.5, -0.5, 0.5).astype(patch.dtype)


def mosaic(patch, block, rng):
    """Pixelate a random rectangle covering 30-60% of each side with ``block``-px cells."""
    c, h, w = patch.shape
    rh = int(rng.integers(int(0.3 * h), int(0.6 * h) + 1))
    rw = int(rng.integers(int(0.3 * w), int(0.6 * w) + 1))
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    out = patch.copy()
    region = _hwc(patch[:, y0:y0 + rh, x0:x0 + rw])
    small = cv2.resize(region, (max(1, rw // block), max(1, rh // block)), interpolation=cv2.INTER_AREA)
    big = cv2.resize(small, (rw, rh), interpolation=cv2.INTER_NEAREST)
    out[:, y0:y0 + rh, x0:x0 + rw] = _chw(big, c)
    return out


def salt_pepper(patch, density, rng):
    if density <= 0:
        return patch
    c, h, w = patch.shape
    hit = rng.random((h, w)) < density
    salt = rng.random((h, w)) < 0.5
    out = patch.copy()
    out[:, hit & salt] = 0.5
    out[:, hit & ~salt] = -0.5
    return out


def _photometric(patch, cfg, rng):
    if cfg.illumination and rng.random() < cfg.prob:
        patch = illuminate(patch, rng.uniform(*cfg.gain_range))
    if cfg.mosaic and rng.random() < cfg.prob:
        patch = mosaic(patch, int(rng.integers(cfg.mosaic_block[0], cfg.mosaic_block[1] + 1)), rng)
    if cfg.salt_pepper and rng.random() < cfg.prob:
        patch = salt_pepper(patch, rng.uniform(0, cfg.salt_pepper_max), rng)
    return patch


def augment_pair(obj, search, loc, cfg, rng, object_half=None, recrop=None):
    """Perturb a training pair; returns ``(obj', search', loc')`` plus a log dict.

    Rotation touches only the object patch and translation only the search
    patch; photometric changes hit both independently. ``loc`` is the object
    centre in search-patch pixels and ``object_half`` its half-extent there
    (default: a quarter of the search side). ``recrop(dx, dy)``, when given,
    re-extracts the search patch from its source with the window moved by
    ``(dx, dy)`` patch pixels, avoiding synthetic borders.
    """
    side = search.shape[-1]
    half = side / 4.0 if object_half is None else object_half
    x, y = loc
    if not (0 <= x <= side and 0 <= y <= side):
        raise ValueError(f"object location {loc} outside the search patch")
    log = {}
    if cfg.rotation and rng.random() < cfg.prob:
        deg = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        obj = rotate(obj, deg)
        log["rotation"] = deg
    if cfg.translation:
        limit = cfg.max_shift_frac * side
        for _ in range(cfg.max_retries):
            dx, dy = (float(v) for v in np.round(rng.uniform(-limit, limit, size=2)))
            nx, ny = x - dx, y - dy
            if half <= nx <= side - half and half <= ny <= side - half:
                break
        else:
            raise ValueError(f"no translation keeps the object inside the search patch after {cfg.max_retries} tries")
        search = recrop(dx, dy) if recrop is not None else shift(search, dx, dy)
        x, y = nx, ny
        log["translation"] = (dx, dy)
    obj = _photometric(obj, cfg, rng)
    search = _photometric(search, cfg, rng)
    return obj, search, (x, y), log


# --- training pairs -----------------------------------------------------------

@dataclass
class TrainPair:
    obj: np.ndarray
    search: np.ndarray
    label: np.ndarray
    peak: tuple
    provenance: dict = field(default_factory=dict)


def _make_pair(obj, search, loc, arch, sigma_frac, provenance):
    geom = MapGeometry(arch.map_side, arch.search_side)
    peak = geom.cell_of(*loc)
    label = make_label_map(peak, arch.map_side, sigma_frac, dtype=obj.dtype).values
    provenance = dict(provenance, loc=(float(loc[0]), float(loc[1])))
    return TrainPair(obj, search, label, peak, provenance)


def sample_image_pair(image, object_box, arch, rng, aug=AugConfig(), sigma_frac=0.1, source=None):
    """Object and search patch cut from the same still image around ``object_box``."""
    tbox = template_box(object_box)
    sbox = search_box(object_box)
    ch = arch.channels
    fill = frame_mean(image, ch)
    obj = extract_patch(image, tbox, arch.object_side, ch, fill=fill)
    search = extract_patch(image, sbox, arch.search_side, ch, fill=fill)
    px = sbox.w / arch.search_side

    def recrop(dx, dy):
        return extract_patch(image, sbox.shifted(dx * px, dy * px), arch.search_side, ch, fill=fill)

    c = arch.search_side / 2.0
    obj, search, loc, log = augment_pair(obj, search, (c, c), aug, rng, object_half=arch.search_side / 4.0,
                                         recrop=recrop)
    return _make_pair(obj, search, loc, arch, sigma_frac, {"source": source, "stage": 1, "aug": log})


def _clear_of(window, box):
    return (window.x >= box.x + box.w or window.x + window.w <= box.x
            or window.y >= box.y + box.h or window.y + window.h <= box.y)


def sample_negative_pair(image, object_box, arch, rng, aug=AugConfig(), source=None, max_tries=50):
    """Object patch paired with a search window that misses the object; the label is all zero.

    The window keeps the usual size and lies in the same frame (same
    background, same distractors), so the only missing cue is the object.
    """
    h, w = np.asarray(image).shape[:2]
    side = search_box(object_box).w
    ch = arch.channels
    fill = frame_mean(image, ch)
    obj = extract_patch(image, template_box(object_box), arch.object_side, ch, fill=fill)
    for _ in range(max_tries):
        window = Box.from_center(rng.uniform(0, w), rng.uniform(0, h), side, side)
        if _clear_of(window, object_box):
            break
    else:
        # step off the object towards the side of the frame with the most room
        cx, cy = object_box.center
        reach_x = (side + object_box.w) / 2 + 1
        reach_y = (side + object_box.h) / 2 + 1
        room = {(-reach_x, 0): cx, (reach_x, 0): w - cx, (0, -reach_y): cy, (0, reach_y): h - cy}
        dx, dy = max(room, key=room.get)
        window = Box.from_center(cx + dx, cy + dy, side, side)
    search = extract_patch(image, window, arch.search_side, ch, fill=fill)
    log = {}
    if aug.rotation and rng.random() < aug.prob:
        log["rotation"] = float(rng.uniform(-aug.rotation_deg, aug.rotation_deg))
        obj = rotate(obj, log["rotation"])
    obj = _photometric(obj, aug, rng)
    search = _photometric(search, aug, rng)
    label = np.zeros((arch.map_side, arch.map_side), dtype=obj.dtype)
    prov = {"source": source, "stage": 1, "negative": True, "window": window.as_tuple(), "aug": log}
    return TrainPair(obj, search, label, None, prov)


def frame_gap_limit(seq):
    return 10 if seq.elastic else 100


def admissible_pairs(seq):
    """All ``(f_obj, f_sec)`` with both frames visible and ``0 < f_sec - f_obj <= limit``."""
    gap = frame_gap_limit(seq)
    visible = [i for i in range(len(seq)) if not seq.occluded[i]]
    pairs = []
    for a_idx, a in enumerate(visible):
        for b in visible[a_idx + 1:]:
            if b - a > gap:
                break
            pairs.append((a, b))
    return pairs


def sample_sequence_pair(seq, arch, rng, sigma_frac=0.1, aug=None, pairs=None):
    """Pair from two frames of ``seq``; the object frame strictly precedes the search frame."""
    aug = AugConfig.translation_only() if aug is None else aug
    pairs = admissible_pairs(seq) if pairs is None else pairs
    if not pairs:
        raise ValueError(f"sequence {seq.name!r} has no admissible frame pair")
    f_obj, f_sec = pairs[int(rng.integers(len(pairs)))]
    ch = arch.channels
    obj = extract_patch(seq.frames[f_obj], template_box(seq.boxes[f_obj]), arch.object_side, ch)
    target = seq.boxes[f_sec]
    sbox = search_box(target)
    image = seq.frames[f_sec]
    fill = frame_mean(image, ch)
    search = extract_patch(image, sbox, arch.search_side, ch, fill=fill)
    px = sbox.w / arch.search_side

    def recrop(dx, dy):
        return extract_patch(image, sbox.shifted(dx * px, dy * px), arch.search_side, ch, fill=fill)

    c = arch.search_side / 2.0
    half = max(target.w, target.h) / 2.0 / px
    obj, search, loc, log = augment_pair(obj, search, (c, c), aug, rng, object_half=half, recrop=recrop)
    prov = {"source": seq.name, "stage": 2, "f_obj": f_obj, "f_sec": f_sec, "aug": log}
    return _make_pair(obj, search, loc, arch, sigma_frac, prov)


def stack_pairs(pairs):
    return (np.stack([p.obj for p in pairs]), np.stack([p.search for p in pairs]),
            np.stack([p.label for p in pairs]))


# --- sequences -----------------------------------------------------------------

@dataclass
class Sequence:
    name: str
    frames: list
    boxes: list
    elastic: bool = False
    occluded: list = None
    tags: tuple = ()

    def __post_init__(self):
        if self.occluded is None:
            self.occluded = [False] * len(self.frames)
        if not (len(self.frames) == len(self.boxes) == len(self.occluded)):
            raise ValueError("frames, boxes and occlusion flags must have equal length")
        if self.frames:
            shape = np.asarray(self.frames[0]).shape
            if any(np.asarray(f).shape != shape for f in self.frames):
                raise ValueError("frame sizes must be constant within a sequence")

    def __len__(self):
        return len(self.frames)

    @property
    def frame_size(self):
        h, w = np.asarray(self.frames[0]).shape[:2]
        return w, h


GT_FILE = "groundtruth.txt"
META_FILE = "meta.json"


def write_sequence(seq, directory):
    os.makedirs(directory, exist_ok=True)
    for i, frame in enumerate(seq.frames, 1):
        cv2.imwrite(os.path.join(directory, f"{i:05d}.png"), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    with open(os.path.join(directory, GT_FILE), "w") as fh:
        for b in seq.boxes:
            fh.write(",".join(_fmt(v) for v in b.as_tuple()) + "\n")
    meta = {"name": seq.name, "elastic": bool(seq.elastic),
            "occluded": [i + 1 for i, o in enumerate(seq.occluded) if o], "tags": list(seq.tags)}
    with open(os.path.join(directory, META_FILE), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _fmt(v):
    return repr(float(round(v, 6)))


def read_boxes(path):
    boxes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                boxes.append(Box(*(float(v) for v in line.replace("\t", ",").split(",")[:4])))
    return boxes


def read_sequence(directory):
    names = sorted(f for f in os.listdir(directory) if f.endswith((".png", ".jpg")))
    frames = [cv2.cvtColor(cv2.imread(os.path.join(directory, n), cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB)
              for n in names]
    gt_path = os.path.join(directory, GT_FILE)
    if not os.path.exists(gt_path):
        raise FileNotFoundError(f"missing ground truth {gt_path}")
    boxes = read_boxes(gt_path)
    meta = {}
    meta_path = os.path.join(directory, META_FILE)
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    occ = set(meta.get("occluded", []))
    return Sequence(meta.get("name", os.path.basename(os.path.normpath(directory))), frames, boxes,
                    bool(meta.get("elastic", False)), [i + 1 in occ for i in range(len(frames))],
                    tuple(meta.get("tags", ())))


# --- synthetic generator ---------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    frame_w: int = 192
    frame_h: int = 144
    n_frames: int = 100
    object_size: tuple = (32, 32)
    kind: str = "polygon"
    step: float = 2.0
    smooth: float = 0.7
    rotation_drift: float = 0.0
    scale_drift: float = 0.0
    distractors: int = 0
    occlusions: tuple = ()
    # share of the box hidden during an occlusion window (1.0 hides the object entirely)
    occlusion_cover: float = 0.75
    elastic: bool = False

    def to_dict(self):
        return asdict(self)


def _texture(rng, h, w, base_cells=None):
    """Smooth coloured noise plus fine grain, as float32 RGB in [0, 255]."""
    cells = base_cells or int(rng.integers(3, 9))
    coarse = rng.uniform(0, 255, size=(cells, cells, 3)).astype(np.float32)
    img = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    fine = rng.normal(0, 12, size=(h, w, 1)).astype(np.float32)
    return np.clip(img + fine, 0, 255)


def _object_sprite(rng, side, kind):
    """Textured sprite (RGB float) and alpha mask on a ``side x side`` canvas."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    c = (side - 1) / 2.0
    mask = np.zeros((side, side), np.float32)
    if kind == "blob":
        r = side / 2.0
        ang = np.arctan2(yy - c, xx - c)
        wob = 1 + 0.15 * np.sin(int(rng.integers(2, 5)) * ang + rng.uniform(0, 2 * np.pi))
        mask = (np.hypot(xx - c, yy - c) <= r * 0.95 * wob).astype(np.float32)
    else:
        n = int(rng.integers(5, 9))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radii = rng.uniform(0.75, 1.0, n) * side / 2.0
        pts = np.stack([c + radii * np.cos(angles), c + radii * np.sin(angles)], axis=1)
        cv2.fillPoly(mask, [np.round(pts).astype(np.int32)], 1.0)
    colors = rng.uniform(0, 255, size=(2, 3)).astype(np.float32)
    freq = rng.uniform(0.25, 0.6)
    theta = rng.uniform(0, np.pi)
    pattern = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta))) > 0
    if rng.random() < 0.5:
        pattern = pattern ^ ((xx // max(2, side // 5) + yy // max(2, side // 5)) % 2 == 0)
    tex = np.where(pattern[..., None], colors[0], colors[1])
    tex = np.clip(tex + rng.normal(0, 8, size=tex.shape), 0, 255).astype(np.float32)
    edge = cv2.morphologyEx(mask, cv2.MORPH_GRADIENT, np.ones((3, 3), np.uint8))
    tex[edge > 0] = tex[edge > 0] * 0.3
    return tex, mask


def _paste(frame, sprite, mask, cx, cy, scale, angle_deg, elastic_phase=None):
    side = sprite.shape[0]
    m = cv2.getRotationMatrix2D(((side - 1) / 2.0, (side - 1) / 2.0), angle_deg, scale)
    m[0, 2] += cx - (side - 1) / 2.0
    m[1, 2] += cy - (side - 1) / 2.0
    if elastic_phase is not None:
        # non-rigid squash/stretch with constant area
        k = 1.0 + 0.12 * math.sin(elastic_phase)
        sq = np.array([[k, 0, 0], [0, 1 / k, 0]], dtype=np.float64)
        a = m[:, :2] @ sq[:, :2]
        m = np.concatenate([a, m[:, 2:]], axis=1)
        m[:, 2] = [cx, cy] - a @ [(side - 1) / 2.0, (side - 1) / 2.0]
    h, w = frame.shape[:2]
    warped = cv2.warpAffine(sprite, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
    alpha = cv2.warpAffine(mask, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)[..., None]
    frame *= 1 - alpha
    frame += warped * alpha


def _cover(frame, background, box, band, cover):
    """Restore the background over ``cover`` of ``box`` from side ``band``, plus a margin for sprite overhang."""
    pad = 0.25 * max(box.w, box.h)
    x0, y0, x1, y1 = box.x - pad, box.y - pad, box.x + box.w + pad, box.y + box.h + pad
    if band == "left":
        x1 = box.x + cover * box.w
    elif band == "right":
        x0 = box.x + (1 - cover) * box.w
    elif band == "top":
        y1 = box.y + cover * box.h
    else:
        y0 = box.y + (1 - cover) * box.h
    h, w = frame.shape[:2]
    c0, c1 = max(0, int(round(x0))), min(w, int(round(x1)))
    r0, r1 = max(0, int(round(y0))), min(h, int(round(y1)))
    frame[r0:r1, c0:c1] = background[r0:r1, c0:c1]


def gen_synthetic_sequence(spec, seed, name=None):
    """Render a textured object moving over a textured background.

    Motion is a smoothed random walk whose per-axis step never exceeds
    ``spec.step``; the object bounces off the frame edges. Frames inside an
    ``occlusions`` window ``(start, end)`` (0-based, end exclusive) are flagged
    occluded: a background-textured band covers ``occlusion_cover`` of the box
    from one side (drawn per window), or the whole object when the cover is 1.
    """
    ow, oh = spec.object_size
    # the start position is drawn at least one object size away from every edge
    if 2 * ow > spec.frame_w or 2 * oh > spec.frame_h:
        raise ValueError(f"object {spec.object_size} does not fit in frame {spec.frame_w}x{spec.frame_h} "
                         f"(needs at least twice the object size)")
    rng = np.random.default_rng(seed)
    w, h = spec.frame_w, spec.frame_h
    background = _texture(rng, h, w)
    side = int(math.ceil(max(ow, oh) * 1.5))
    sprite, mask = _object_sprite(rng, side, spec.kind)
    # sprite is drawn so that its polygon spans the nominal object size
    base_scale = max(ow, oh) / side
    distractors = []
    for _ in range(spec.distractors):
        ds, dm = _object_sprite(rng, side, spec.kind)
        # keep distractors a sprite away from the edges where the frame allows it
        distractors.append([ds, dm, rng.uniform(min(side, w / 2), max(w - side, w / 2)),
                            rng.uniform(min(side, h / 2), max(h - side, h / 2)),
                            rng.uniform(0, 360)])
    cx = float(rng.uniform(ow, w - ow))
    cy = float(rng.uniform(oh, h - oh))
    vx = vy = 0.0
    scale = 1.0
    angle = 0.0
    phase = float(rng.uniform(0, 2 * np.pi))
    if not 0 < spec.occlusion_cover <= 1:
        raise ValueError("occlusion_cover must lie in (0, 1]")
    # own stream, so adding occlusions leaves the motion and textures unchanged
    side_rng = np.random.default_rng([seed, 1])
    occluded_frames = {}
    for start, end in spec.occlusions:
        band = ("left", "right", "top", "bottom")[int(side_rng.integers(4))]
        occluded_frames.update({t: band for t in range(start, min(end, spec.n_frames))})

    frames, boxes, occ = [], [], []
    for t in range(spec.n_frames):
        if t > 0 and spec.step > 0:
            vx = float(np.clip(spec.smooth * vx + rng.uniform(-spec.step, spec.step), -spec.step, spec.step))
            vy = float(np.clip(spec.smooth * vy + rng.uniform(-spec.step, spec.step), -spec.step, spec.step))
            bw, bh = ow * scale, oh * scale
            nx, ny = cx + vx, cy + vy
            if not bw / 2 <= nx <= w - bw / 2:
                vx = -vx
                nx = cx + vx
            if not bh / 2 <= ny <= h - bh / 2:
                vy = -vy
                ny = cy + vy
            cx, cy = nx, ny
        if t > 0 and spec.scale_drift > 0:
            scale = float(np.clip(scale * (1 + rng.uniform(-spec.scale_drift, spec.scale_drift)), 0.7, 1.4))
        if t > 0 and spec.rotation_drift > 0:
            angle += float(rng.uniform(-spec.rotation_drift, spec.rotation_drift))
        frame = background.copy()
        for d in distractors:
            _paste(frame, d[0], d[1], d[2], d[3], base_scale, d[4])
        box = Box.from_center(cx, cy, ow * scale, oh * scale)
        full = t in occluded_frames and spec.occlusion_cover >= 1
        if not full:
            phase_t = phase + 0.3 * t if spec.elastic else None
            _paste(frame, sprite, mask, cx, cy, base_scale * scale, angle, phase_t)
        if t in occluded_frames and not full:
            _cover(frame, background, box, occluded_frames[t], spec.occlusion_cover)
        occ.append(t in occluded_frames)
        frames.append(np.clip(np.round(frame), 0, 255).astype(np.uint8))
        boxes.append(box)
    return Sequence(name or f"synth-{seed}", frames, boxes, spec.elastic, occ)


def gen_synthetic_image(seed, frame_w=192, frame_h=144, size_range=(20, 40)):
    """A single still: random object at a random place. Returns ``(image, box)``."""
    rng = np.random.default_rng(seed)
    ow = int(rng.integers(size_range[0], size_range[1] + 1))
    oh = int(np.clip(round(ow * rng.uniform(0.8, 1.25)), size_range[0], size_range[1]))
    spec = SynthSpec(frame_w=frame_w, frame_h=frame_h, n_frames=1, object_size=(ow, oh),
                     kind="blob" if rng.random() < 0.3 else "polygon",
                     distractors=int(rng.integers(0, 2)))
    seq = gen_synthetic_sequence(spec, int(rng.integers(2**31)))
    return seq.frames[0], seq.boxes[0]


def random_sequence_spec(rng, n_frames=100, occlusion=False, **overrides):
    """Draw a moderate-motion spec: object 20-40 px, step <= 2.5 px, mild scale drift."""
    ow = int(rng.integers(20, 41))
    oh = int(np.clip(round(ow * rng.uniform(0.8, 1.25)), 20, 40))
    occl = ()
    if occlusion:
        start = int(rng.integers(n_frames // 3, 2 * n_frames // 3))
        occl = ((start, start + int(rng.integers(5, 11))),)
    fields = dict(n_frames=n_frames, object_size=(ow, oh), kind="blob" if rng.random() < 0.3 else "polygon",
                  step=float(rng.uniform(1.0, 2.5)), scale_drift=0.01, rotation_drift=float(rng.uniform(0, 2)),
                  elastic=bool(rng.random() < 0.5), occlusions=occl)
    fields.update(overrides)
    return SynthSpec(**fields)
