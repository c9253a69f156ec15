"""The two-flow similarity network.

Both the object patch and the search patch run through one shared conv stack.
Each flow yields a shallow block (conv1 features squeezed by a small 1x1 conv
and max-pooled) and a deep block (conv3 features). The four blocks are
flattened, concatenated and mapped by three fully-connected layers to a square
response map over the search patch.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: int
    stride: int = 1
    pool: int = 1


def _default_convs():
    return (ConvSpec(32, 5, 1, 2), ConvSpec(64, 3, 1, 2), ConvSpec(96, 3, 1, 2))


@dataclass(frozen=True)
class ArchConfig:
    object_side: int = 48
    search_side: int = 96
    channels: int = 3
    convs: tuple = field(default_factory=_default_convs)
    reduce_filters: int = 4
    shallow_pool: int = 4
    fc_hidden: tuple = (1024, 1024)
    map_side: int = 24

    def __post_init__(self):
        convs = tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.convs)
        object.__setattr__(self, "convs", convs)
        object.__setattr__(self, "fc_hidden", tuple(self.fc_hidden))
        if len(convs) != 3:
            raise ValueError("the network has exactly 3 conv layers")
        if len(self.fc_hidden) != 2:
            raise ValueError("the network has exactly 3 fully-connected layers (2 hidden + output)")
        if self.search_side != 2 * self.object_side:
            raise ValueError("search_side must be twice object_side")
        if min(self.reduce_filters, self.shallow_pool, self.map_side, self.channels, *self.fc_hidden) < 1:
            raise ValueError("all widths must be positive")
        # raises on an infeasible shape chain
        self.flow_shapes(self.object_side)
        self.flow_shapes(self.search_side)

    def flow_shapes(self, side):
        """Return ``(conv1_side, shallow_side, deep_side)`` for one flow of input ``side``."""
        sides = []
        n = side
        for i, c in enumerate(self.convs):
            if c.kernel > n:
                raise ValueError(f"conv{i + 1} kernel {c.kernel} exceeds input extent {n} (input side {side})")
            n = nn.conv_output_side(n, c.kernel, c.stride)
            n = -(-n // c.pool)
            if n <= 0:
                raise ValueError(f"conv{i + 1} produces an empty feature map for input side {side}")
            sides.append(n)
        shallow = -(-sides[0] // self.shallow_pool)
        return sides[0], shallow, sides[2]

    def flow_feature_size(self, side):
        _, shallow, deep = self.flow_shapes(side)
        return self.reduce_filters * shallow ** 2 + self.convs[2].filters * deep ** 2

    @property
    def feature_size(self):
        return self.flow_feature_size(self.object_side) + self.flow_feature_size(self.search_side)

    def param_shapes(self):
        shapes = {}
        cin = self.channels
        for i, c in enumerate(self.convs, 1):
            shapes[f"conv{i}.w"] = (c.filters, cin, c.kernel, c.kernel)
            shapes[f"conv{i}.b"] = (c.filters,)
            cin = c.filters
        shapes["reduce.w"] = (self.reduce_filters, self.convs[0].filters, 1, 1)
        shapes["reduce.b"] = (self.reduce_filters,)
        widths = [self.feature_size, *self.fc_hidden, self.map_side ** 2]
        for i in range(3):
            shapes[f"fc{i + 1}.w"] = (widths[i + 1], widths[i])
            shapes[f"fc{i + 1}.b"] = (widths[i + 1],)
        return shapes

    def param_count(self):
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def to_dict(self):
        d = asdict(self)
        d["convs"] = [asdict(c) for c in self.convs]
        d["fc_hidden"] = list(self.fc_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["convs"] = tuple(ConvSpec(**c) for c in d["convs"])
        return cls(**d)


@dataclass(frozen=True)
class MapGeometry:
    """Affine map between response-map cells and search-patch pixels.

    Cell ``j`` covers patch pixels ``[j * stride, (j + 1) * stride)`` and is
    represented by its centre.
    """
    map_side: int
    patch_side: int

    @property
    def stride(self):
        return self.patch_side / self.map_side

    def cell_center(self, row, col):
        s = self.stride
        return ((col + 0.5) * s, (row + 0.5) * s)

    def cell_of(self, x, y):
        s = self.stride
        col = int(np.clip(np.floor(x / s), 0, self.map_side - 1))
        row = int(np.clip(np.floor(y / s), 0, self.map_side - 1))
        return row, col


@dataclass
class PredictionMap:
    values: np.ndarray
    geometry: MapGeometry

    def peak(self):
        """Argmax cell as ``(row, col)``; ties go to the lowest row-major index."""
        return np.unravel_index(int(np.argmax(self.values)), self.values.shape)


@dataclass
class YcnnModel:
    config: ArchConfig
    params: dict

    @property
    def geometry(self):
        return MapGeometry(self.config.map_side, self.config.search_side)

    @property
    def dtype(self):
        return self.params["fc1.w"].dtype

    def copy(self):
        return YcnnModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def freeze(self):
        for p in self.params.values():
            p.flags.writeable = False
        return self


def build_model(config, seed=0, dtype=None):
    """Fan-in scaled Gaussian weights, zero biases; deterministic per seed."""
    dtype = dtype or nn.get_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return YcnnModel(config, params)


def _to_rows(a):
    # C x B x H x W -> B x (C*H*W), matching per-sample C,H,W flattening
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def _flow_forward(cfg, p, x, keep):
    cache = {}
    a = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    for i, spec in enumerate(cfg.convs, 1):
        z, cols = nn.conv2d_cbhw(a, p[f"conv{i}.w"], p[f"conv{i}.b"], spec.stride, keep_cols=True)
        # max-pool commutes with ReLU; pooling first halves the elementwise work
        zp, idx = nn.max_pool(z, spec.pool)
        if keep:
            cache[f"conv{i}"] = (a.shape, cols, z.shape, zp, idx)
        a = nn.relu(zp)
        if i == 1:
            conv1_out = a
    zr, cols = nn.conv2d_cbhw(conv1_out, p["reduce.w"], p["reduce.b"], 1, keep_cols=True)
    zrp, sidx = nn.max_pool(zr, cfg.shallow_pool)
    shallow = nn.relu(zrp)
    if keep:
        cache["reduce"] = (conv1_out.shape, cols, zr.shape, zrp, sidx)
    return np.concatenate([_to_rows(shallow), _to_rows(a)], axis=1), cache


def _shallow_len(cfg, side):
    _, shallow, _ = cfg.flow_shapes(side)
    return cfg.reduce_filters * shallow ** 2


def forward(model, object_patch, search_patch, keep_intermediates=False):
    """Response map(s) for one pair (C x H x W inputs) or a batch (B x C x H x W).

    Returns a :class:`PredictionMap` for a single pair, a ``B x m x m`` array for a
    batch, and additionally the cache needed by :func:`backward` when
    ``keep_intermediates`` is set.
    """
    cfg, p = model.config, model.params
    dtype = model.dtype
    obj = np.asarray(object_patch, dtype=dtype)
    sea = np.asarray(search_patch, dtype=dtype)
    single = obj.ndim == 3
    if single:
        obj, sea = obj[None], sea[None]
    want_o = (cfg.channels, cfg.object_side, cfg.object_side)
    want_s = (cfg.channels, cfg.search_side, cfg.search_side)
    if obj.shape[1:] != want_o or sea.shape[1:] != want_s or obj.shape[0] != sea.shape[0]:
        raise ValueError(f"patch shapes {obj.shape[1:]}/{sea.shape[1:]} do not match config {want_o}/{want_s}")
    fo, co = _flow_forward(cfg, p, obj, keep_intermediates)
    fs, cs = _flow_forward(cfg, p, sea, keep_intermediates)
    feat = np.concatenate([fo, fs], axis=1)
    h1 = nn.fully_connected(feat, p["fc1.w"], p["fc1.b"])
    r1 = nn.relu(h1)
    h2 = nn.fully_connected(r1, p["fc2.w"], p["fc2.b"])
    r2 = nn.relu(h2)
    out = nn.fully_connected(r2, p["fc3.w"], p["fc3.b"])
    nn.check_finite(out, "response map")
    maps = out.reshape(-1, cfg.map_side, cfg.map_side)
    result = PredictionMap(maps[0], model.geometry) if single else maps
    if not keep_intermediates:
        return result
    cache = {"object": co, "search": cs, "feat": feat, "h1": h1, "r1": r1, "h2": h2, "r2": r2,
             "split": fo.shape[1], "single": single}
    return result, cache


def backward(model, cache, grad_map):
    """Parameter gradients given d(loss)/d(map); shared conv weights collect both flows."""
    if cache is None or "feat" not in cache:
        raise ValueError("backward needs the intermediates from forward(..., keep_intermediates=True)")
    cfg, p = model.config, model.params
    g = np.asarray(grad_map, dtype=model.dtype).reshape(cache["feat"].shape[0], -1)
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    g, grads["fc3.w"], grads["fc3.b"] = nn.fully_connected_backward(cache["r2"], p["fc3.w"], g)
    g = nn.relu_backward(cache["h2"], g)
    g, grads["fc2.w"], grads["fc2.b"] = nn.fully_connected_backward(cache["r1"], p["fc2.w"], g)
    g = nn.relu_backward(cache["h1"], g)
    g, grads["fc1.w"], grads["fc1.b"] = nn.fully_connected_backward(cache["feat"], p["fc1.w"], g)
    split = cache["split"]
    for name, side, gf in (("object", cfg.object_side, g[:, :split]),
                           ("search", cfg.search_side, g[:, split:])):
        _flow_backward_side(cfg, p, cache[name], gf, grads, _shallow_len(cfg, side))
    return grads


def _from_rows(g, c, side):
    return np.ascontiguousarray(g.reshape(g.shape[0], c, side, side).transpose(1, 0, 2, 3))


def _flow_backward_side(cfg, p, cache, g_feat, grads, n_shallow):
    g_shallow = g_feat[:, :n_shallow]
    g = g_feat[:, n_shallow:]
    for i in (3, 2, 1):
        x_shape, cols, z_shape, zp, idx = cache[f"conv{i}"]
        spec = cfg.convs[i - 1]
        if i == 3:
            g = _from_rows(g, spec.filters, idx.shape[2])
        g = nn.relu_backward(zp, g)
        g = nn.max_pool_backward(g, idx, spec.pool, z_shape)
        gx, gw, gb = nn.conv2d_backward_cbhw(x_shape, cols, p[f"conv{i}.w"], g, spec.stride,
                                             need_input_grad=i > 1)
        grads[f"conv{i}.w"] += gw
        grads[f"conv{i}.b"] += gb
        if i == 2:
            # conv1's pooled output also feeds the shallow branch
            r_shape, r_cols, zr_shape, zrp, sidx = cache["reduce"]
            gs = _from_rows(g_shallow, cfg.reduce_filters, sidx.shape[2])
            gs = nn.relu_backward(zrp, gs)
            gs = nn.max_pool_backward(gs, sidx, cfg.shallow_pool, zr_shape)
            gxr, gwr, gbr = nn.conv2d_backward_cbhw(r_shape, r_cols, p["reduce.w"], gs, 1)
            grads["reduce.w"] += gwr
            grads["reduce.b"] += gbr
            gx += gxr
        g = gx


# --- checkpoint I/O -------------------------------------------------------

MAGIC = b"YCNN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def save_checkpoint(model, path):
    """Write ``model`` as: magic, version, config JSON, then (name, shape, float32 LE data) records.

    Parameters are stored as 32-bit floats; 64-bit models are narrowed.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    names = list(model.config.param_shapes())
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if len(r.data) < 4 or r.data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a YCNN checkpoint")
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    cfg = ArchConfig.from_dict(json.loads(r.take(r.u32()).decode()))
    expected = cfg.param_shapes()
    count = r.u32()
    if count != len(expected):
        raise ShapeMismatchError(f"{path}: {count} parameter records, config implies {len(expected)}")
    params = {}
    for _ in range(count):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = tuple(np.atleast_1d(r.u32(ndim))) if ndim else ()
        shape = tuple(int(s) for s in shape)
        if name not in expected or tuple(expected[name]) != shape:
            raise ShapeMismatchError(
                f"{path}: record {name!r} has shape {shape}, header implies {expected.get(name)}")
        n = int(np.prod(shape))
        params[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.data):
        raise ShapeMismatchError(f"{path}: {len(r.data) - r.pos} trailing bytes after last record")
    return YcnnModel(cfg, params)
