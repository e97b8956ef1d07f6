"""Detector graphs: a dense 3D fully convolutional detector and VoxelNet.

Both are described by a :class:`NetworkConfig` (an ordered list of
:class:`LayerSpec` per block) so that the same description drives the
forward graph, shape checking and the FLOP estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from focal3d.errors import StructuralError
from focal3d.geometry import Box3D
from focal3d.network import tensor as T
from focal3d.network.layers import VFE, Conv, ConvBlock, FCBlock, Module
from focal3d.voxel import GRID_PRESETS, DEFAULT_MAX_POINTS, VoxelGridSpec

LAYER_KINDS = ("conv3d", "conv2d", "deconv2d", "fc", "relu", "batchnorm", "sigmoid", "vfe")
NOMINAL_OCCUPANCY = 0.003


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int
    kernel: tuple = ()
    stride: tuple = ()
    padding: tuple | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise StructuralError(f"unknown layer kind {self.kind!r}")
        if self.filters < 1 or any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise StructuralError(f"layer {self.name or self.kind}: sizes must be >= 1")


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor box size (l, w, h), center height and the yaw set per cell."""

    size: tuple = (3.9, 1.6, 1.56)
    z_center: float = -1.0
    yaws: tuple = (0.0, math.pi / 2)

    @property
    def diagonal(self):
        return math.hypot(self.size[0], self.size[1])

    def box(self, x=0.0, y=0.0, yaw=0.0):
        return Box3D((x, y, self.z_center), self.size, yaw)


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    family: str
    blocks: dict
    grid: VoxelGridSpec
    anchor: AnchorSpec = field(default_factory=AnchorSpec)
    max_points: int = DEFAULT_MAX_POINTS
    head_prior: float = 0.01

    @property
    def n_anchors(self):
        return 1 if self.family == "3dfcn" else len(self.anchor.yaws)

    @property
    def residual_size(self):
        return 24 if self.family == "3dfcn" else 7

    def with_grid(self, grid):
        return replace(self, grid=grid)


def _c3(name, filters, k, s, p=None):
    return LayerSpec("conv3d", filters, k, s, p, name)


def _c2(name, filters, k, s, p=None):
    return LayerSpec("conv2d", filters, k, s, p, name)


def _dc(name, filters, k, s):
    return LayerSpec("deconv2d", filters, k, s, None, name)


def fcn_config(name, grid, widths=(32, 64, 96, 96)):
    body = [
        _c3("conv3d_1", widths[0], (5, 5, 5), (2, 2, 2)),
        _c3("conv3d_2", widths[1], (5, 5, 5), (2, 2, 2)),
        _c3("conv3d_3", widths[2], (3, 3, 3), (2, 2, 2)),
        _c3("conv3d_4", widths[3], (3, 3, 3), (1, 1, 1)),
    ]
    heads = {
        "pmap": [_c3("conv3d_obj", 1, (3, 3, 3), (1, 1, 1))],
        "rmap": [_c3("conv3d_cor", 24, (3, 3, 3), (1, 1, 1))],
    }
    return NetworkConfig(name, "3dfcn", {"body": body, **heads}, grid)


def voxelnet_config(name, grid, scale=1, middle_kernel=(3, 3, 3), max_points=DEFAULT_MAX_POINTS):
    """VoxelNet layer table; ``scale`` divides every width."""
    w = lambda n: max(1, n // scale)  # noqa: E731
    kz = middle_kernel[0]
    pxy = tuple(k // 2 for k in middle_kernel[1:])
    feature = [LayerSpec("vfe", w(32), name="vfe_1"), LayerSpec("vfe", w(128), name="vfe_2"),
               LayerSpec("fc", w(128), name="fc")]
    middle = [
        _c3("conv3d_1", w(64), middle_kernel, (2, 1, 1), (kz // 2,) + pxy),
        _c3("conv3d_2", w(64), middle_kernel, (1, 1, 1), (0,) + pxy),
        _c3("conv3d_3", w(64), middle_kernel, (2, 1, 1), (kz // 2,) + pxy),
    ]
    rpn1 = [_c2("rpn1_conv1", w(128), (3, 3), (2, 2))] + \
        [_c2(f"rpn1_conv{i}", w(128), (3, 3), (1, 1)) for i in range(2, 5)] + \
        [_dc("rpn1_deconv", w(256), (3, 3), (1, 1))]
    rpn2 = [_c2("rpn2_conv1", w(128), (3, 3), (2, 2))] + \
        [_c2(f"rpn2_conv{i}", w(128), (3, 3), (1, 1)) for i in range(2, 7)] + \
        [_dc("rpn2_deconv", w(256), (2, 2), (2, 2))]
    rpn3 = [_c2("rpn3_conv1", w(256), (3, 3), (2, 2))] + \
        [_c2(f"rpn3_conv{i}", w(256), (3, 3), (1, 1)) for i in range(2, 7)] + \
        [_dc("rpn3_deconv", w(256), (4, 4), (4, 4))]
    heads = {"pmap": [_c2("prob_map", 2, (1, 1), (1, 1))], "rmap": [_c2("reg_map", 14, (1, 1), (1, 1))]}
    blocks = {"featurenet": feature, "middle": middle, "rpn1": rpn1, "rpn2": rpn2, "rpn3": rpn3, **heads}
    return NetworkConfig(name, "voxelnet", blocks, grid, max_points=max_points)


def preset(name):
    """Named network configuration; ``*-mini`` variants are desk-scale."""
    if name in ("3dfcn-full", "3dfcn-car"):
        return fcn_config("3dfcn-full", GRID_PRESETS["3dfcn-car"])
    if name == "3dfcn-mini":
        return fcn_config(name, GRID_PRESETS["3dfcn-mini"], widths=(8, 16, 24, 24))
    if name in ("voxelnet-full", "voxelnet-car"):
        return voxelnet_config("voxelnet-full", GRID_PRESETS["voxelnet-car"])
    if name == "voxelnet-mini":
        return voxelnet_config(name, GRID_PRESETS["voxelnet-mini"], scale=4, middle_kernel=(3, 1, 1))
    raise StructuralError(f"unknown network preset {name!r}")


PRESET_NAMES = ("3dfcn-mini", "voxelnet-mini", "3dfcn-full", "voxelnet-full")


# shape tracing --------------------------------------------------------------

@dataclass(frozen=True)
class LayerTrace:
    block: str
    spec: LayerSpec
    c_in: int
    in_shape: tuple
    out_shape: tuple
    rows: int = 0


def _spatial_out(spec, in_size):
    pad = spec.padding
    if spec.kind == "deconv2d":
        pad = pad or tuple((k - s) // 2 for k, s in zip(spec.kernel, spec.stride))
        return tuple((i - 1) * s + k - 2 * p for i, s, k, p in zip(in_size, spec.stride, spec.kernel, pad))
    pad = pad if pad is not None else tuple(k // 2 for k in spec.kernel)
    return tuple((i + 2 * p - k) // s + 1 for i, k, s, p in zip(in_size, spec.kernel, spec.stride, pad))


def _trace_chain(block, specs, c, size, traces):
    for spec in specs:
        if len(spec.kernel) != len(size):
            raise StructuralError(f"layer {spec.name}: {len(spec.kernel)}-d kernel on {len(size)}-d input")
        out = _spatial_out(spec, size)
        if any(o < 1 for o in out):
            raise StructuralError(f"layer {spec.name}: input {size} too small for kernel {spec.kernel}")
        traces.append(LayerTrace(block, spec, c, size, out))
        c, size = spec.filters, out
    return c, size


def trace_shapes(config):
    """Propagate shapes through every layer; raises naming the first bad layer."""
    traces = []
    dims = config.grid.dims
    if config.family == "3dfcn":
        c, size = _trace_chain("body", config.blocks["body"], 1, dims, traces)
        for head in ("pmap", "rmap"):
            _trace_chain(head, config.blocks[head], c, size, traces)
        expected = {"pmap": 1, "rmap": 24}
    else:
        rows = int(round(NOMINAL_OCCUPANCY * config.grid.n_voxels)) * config.max_points
        c = 7
        for spec in config.blocks["featurenet"]:
            traces.append(LayerTrace("featurenet", spec, c, (rows,), (rows,), rows))
            c = spec.filters
        c, size = _trace_chain("middle", config.blocks["middle"], c, dims, traces)
        c, size = c * size[0], size[1:]
        branch_sizes, branch_c = [], 0
        for name in ("rpn1", "rpn2", "rpn3"):
            convs, deconv = config.blocks[name][:-1], config.blocks[name][-1:]
            c, size = _trace_chain(name, convs, c, size, traces)
            bc, bsize = _trace_chain(name, deconv, c, size, traces)
            branch_sizes.append(bsize)
            branch_c += bc
        if len(set(branch_sizes)) != 1:
            raise StructuralError(f"RPN branches upsample to different sizes {branch_sizes}")
        for head in ("pmap", "rmap"):
            _trace_chain(head, config.blocks[head], branch_c, branch_sizes[0], traces)
        expected = {"pmap": config.n_anchors, "rmap": 7 * config.n_anchors}
    for head, n in expected.items():
        got = config.blocks[head][-1].filters
        if got != n:
            raise StructuralError(f"head {config.blocks[head][-1].name} has {got} channels, target layout needs {n}")
    return traces


def output_shape(config):
    """Spatial shape of the probability/regression maps."""
    return [t for t in trace_shapes(config) if t.block == "pmap"][-1].out_shape


def head_grid(config):
    """Grid of the output maps.

    The 3D detector's maps coarsen the input grid; VoxelNet's bird's-eye
    maps get a single cell spanning the full height.
    """
    out = output_shape(config)
    grid = config.grid
    (x0, x1), (y0, y1), (z0, z1) = grid.extent
    if config.family == "3dfcn":
        dims = tuple(out)
    else:
        dims = (1,) + tuple(out)
    size = ((z1 - z0) / dims[0], (x1 - x0) / dims[1], (y1 - y0) / dims[2])
    return VoxelGridSpec(grid.origin, size, dims)


def make_anchors(config):
    """(H, W, A, 7) anchor boxes at the centers of the bird's-eye output cells."""
    g = head_grid(config)
    _, h, w = g.dims
    a = config.anchor
    idx = np.stack(np.meshgrid(np.zeros(1), np.arange(h), np.arange(w), indexing="ij"), axis=-1)[0]
    centers = g.voxel_center(idx)
    out = np.empty((h, w, len(a.yaws), 7))
    out[..., 0] = centers[..., 0, None]
    out[..., 1] = centers[..., 1, None]
    out[..., 2] = a.z_center
    out[..., 3:6] = a.size
    out[..., 6] = np.asarray(a.yaws)
    return out


def flops_estimate(config):
    """Multiply-add count per layer: 2 * kernel volume * C_in * C_out * output cells.

    Point-wise layers count their nominal point rows as output cells.
    """
    out = []
    for t in trace_shapes(config):
        k = int(np.prod(t.spec.kernel)) if t.spec.kernel else 1
        cells = t.rows if t.spec.kind in ("vfe", "fc") else int(np.prod(t.out_shape))
        c_out = t.spec.filters // 2 if t.spec.kind == "vfe" else t.spec.filters
        out.append((t.block, t.spec.name, 2 * k * t.c_in * c_out * cells))
    return out


# graphs ---------------------------------------------------------------------

class Detector(Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        trace_shapes(config)

    def zero_heads(self):
        for head in (self.pmap_head, self.rmap_head):
            head.weight.data[...] = 0.0
            head.bias.data[...] = 0.0

    def _init_heads(self):
        for head in (self.pmap_head, self.rmap_head):
            head.weight.data *= 0.01
        p = self.config.head_prior
        self.pmap_head.bias.data[...] = math.log(p / (1.0 - p))


class FCNDetector(Detector):
    """Dense 3D convolutional detector over a binary occupancy grid."""

    def __init__(self, config, rng):
        super().__init__(config)
        self.body = []
        c = 1
        for i, spec in enumerate(config.blocks["body"]):
            self.body.append(self.add(f"body{i}", ConvBlock(rng, 3, c, spec.filters, spec.kernel,
                                                            spec.stride, spec.padding, name=spec.name)))
            c = spec.filters
        ps, rs = config.blocks["pmap"][0], config.blocks["rmap"][0]
        self.pmap_head = self.add("pmap", Conv(rng, 3, c, ps.filters, ps.kernel, ps.stride, ps.padding, name=ps.name))
        self.rmap_head = self.add("rmap", Conv(rng, 3, c, rs.filters, rs.kernel, rs.stride, rs.padding, name=rs.name))
        self._init_heads()

    def forward(self, occupancy):
        x = T.as_tensor(occupancy)
        if x.ndim == 4:
            x = x.reshape((x.shape[0], 1) + x.shape[1:])
        if x.shape[1:] != (1,) + self.config.grid.dims:
            raise StructuralError(f"layer {self.config.blocks['body'][0].name}: expected input "
                                  f"(N, 1, {self.config.grid.dims}), got {x.shape}")
        for block in self.body:
            x = block(x)
        return self.pmap_head(x), self.rmap_head(x)


@dataclass
class SparseBatch:
    """Several frames' voxel rows stacked; ``voxel_flat`` includes the frame offset."""

    features: np.ndarray
    starts: np.ndarray
    voxel_flat: np.ndarray
    n_frames: int

    @classmethod
    def from_sets(cls, sets):
        feats, starts, flats = [], [], []
        offset = 0
        for i, s in enumerate(sets):
            feats.append(s.features)
            starts.append(s.starts + offset)
            flats.append(s.flat_coords + i * s.spec.n_voxels)
            offset += len(s.features)
        return cls(np.concatenate(feats) if feats else np.zeros((0, 7)),
                   np.concatenate(starts).astype(np.int64) if starts else np.zeros(0, np.int64),
                   np.concatenate(flats).astype(np.int64) if flats else np.zeros(0, np.int64),
                   len(sets))


class VoxelNetDetector(Detector):
    """VFE feature net, [d, *] 3D middle convolutions and a skip-connected 2D RPN."""

    def __init__(self, config, rng):
        super().__init__(config)
        fspecs = config.blocks["featurenet"]
        c = 7
        self.vfes = []
        for i, spec in enumerate(fspecs[:-1]):
            self.vfes.append(self.add(f"vfe{i}", VFE(rng, c, spec.filters)))
            c = spec.filters
        self.fc = self.add("fc", FCBlock(rng, c, fspecs[-1].filters))
        c = fspecs[-1].filters
        self.middle = []
        size = config.grid.dims
        for i, spec in enumerate(config.blocks["middle"]):
            blk = self.add(f"middle{i}", ConvBlock(rng, 3, c, spec.filters, spec.kernel, spec.stride,
                                                   spec.padding, name=spec.name))
            self.middle.append(blk)
            c, size = spec.filters, blk.out_size(size)
        c = c * size[0]
        self.branches = []
        total = 0
        for name in ("rpn1", "rpn2", "rpn3"):
            convs = []
            for j, spec in enumerate(config.blocks[name][:-1]):
                convs.append(self.add(f"{name}_{j}", ConvBlock(rng, 2, c, spec.filters, spec.kernel,
                                                                spec.stride, spec.padding, name=spec.name)))
                c = spec.filters
            ds = config.blocks[name][-1]
            deconv = self.add(f"{name}_up", ConvBlock(rng, 2, c, ds.filters, ds.kernel, ds.stride,
                                                       transposed=True, name=ds.name))
            self.branches.append((convs, deconv))
            total += ds.filters
        ps, rs = config.blocks["pmap"][0], config.blocks["rmap"][0]
        self.pmap_head = self.add("pmap", Conv(rng, 2, total, ps.filters, ps.kernel, ps.stride, name=ps.name))
        self.rmap_head = self.add("rmap", Conv(rng, 2, total, rs.filters, rs.kernel, rs.stride, name=rs.name))
        self._init_heads()

    def encode_voxels(self, rows, starts):
        """FeatureNet: point rows (P, 7) -> one feature vector per voxel."""
        x = T.as_tensor(rows)
        if x.shape[0] == 0:
            raise StructuralError("feature net received no points")
        for vfe in self.vfes:
            x = vfe(x, starts)
        return T.segment_max(self.fc(x), starts)

    def forward(self, batch):
        if not isinstance(batch, SparseBatch):
            batch = SparseBatch.from_sets([batch])
        dims = self.config.grid.dims
        if len(batch.features):
            voxels = self.encode_voxels(batch.features, batch.starts)
            dense = T.scatter_rows(voxels, batch.voxel_flat, (batch.n_frames,) + dims)
        else:
            width = self.config.blocks["featurenet"][-1].filters
            dense = T.Tensor(np.zeros((width, batch.n_frames) + dims))
        x = dense.transpose(1, 0, 2, 3, 4)
        for blk in self.middle:
            x = blk(x)
        n, c, d, h, w = x.shape
        x = x.reshape(n, c * d, h, w)
        ups = []
        for convs, deconv in self.branches:
            for blk in convs:
                x = blk(x)
            ups.append(deconv(x))
        feat = T.concat(ups, axis=1)
        return self.pmap_head(feat), self.rmap_head(feat)


def build_model(config, seed=0):
    """Instantiate a detector with He-uniform weights from a seeded generator."""
    rng = np.random.default_rng(seed)
    if config.family == "3dfcn":
        return FCNDetector(config, rng)
    if config.family == "voxelnet":
        return VoxelNetDetector(config, rng)
    raise StructuralError(f"unknown detector family {config.family!r}")


def forward(model, inputs):
    return model(inputs)


def to_anchor_layout(pmap, rmap, n_anchors, residual_size):
    """(N, A, *S) and (N, A*R, *S) maps -> (N, *S, A) and (N, *S, A, R)."""
    nd = pmap.ndim - 2
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,)
    p = pmap.transpose(perm)
    r = rmap.transpose(perm)
    r = r.reshape(r.shape[:-1] + (n_anchors, residual_size))
    return p, r
