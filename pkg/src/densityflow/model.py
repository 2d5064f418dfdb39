"""Three-branch counting network at configurable toy scale.

Layout, from input to output::

    frames -> shared stride-8 encoder -> F
    F -> depth decoder -> F_d -> depth head -> D
    (F, F_d) -> depth-enhanced encoder -> F_r
    F_r -> three dilated streams (d = 1, 2, 3) -> F_r1, F_r2, F_r3
    optical flow -> motion weight branch -> w1, w2, w3
    sum_i w_i * F_ri -> F_f -> density head -> 10-channel flow grid
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .density import GRID_STRIDE, DensityGrid
from .flow import FlowGrid, decode_density
from .tensor import Tensor

FUSION_MODES = ("adaptive", "fixed", "single1", "single2", "single3")
NORM_MODES = ("channel", "instance", "none")
STREAM_DILATIONS = (1, 2, 3)


@dataclass
class NetConfig:
    in_channels: int = 3
    base_channels: int = 16
    fused_channels: int = 32
    stream_channels: int = 16
    motion_channels: int = 8
    grid_stride: int = GRID_STRIDE
    precision: str = "float64"
    seed: int = 0
    # ablation switches
    fusion: str = "adaptive"
    depth_enhanced: bool = True
    # "instance" normalises each channel over the whole frame, which erases
    # the absolute magnitude a counter needs; "channel" normalises per position
    norm: str = "channel"
    # scale on the initial output-layer weights so the first predicted counts are small
    head_init_scale: float = 0.1

    def __post_init__(self):
        if self.grid_stride != GRID_STRIDE:
            raise ValueError(f"grid_stride is fixed at {GRID_STRIDE}, got {self.grid_stride}")
        for f in ("in_channels", "base_channels", "fused_channels", "stream_channels", "motion_channels"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}, got {self.norm!r}")
        if self.head_init_scale < 0:
            raise ValueError("head_init_scale must be >= 0")
        T.resolve_dtype(self.precision)

    @property
    def dtype(self) -> np.dtype:
        return T.resolve_dtype(self.precision)

    @property
    def streams(self) -> Tuple[int, ...]:
        """Indices (0-based) of the dilated streams this configuration builds."""
        if self.fusion.startswith("single"):
            return (int(self.fusion[-1]) - 1,)
        return (0, 1, 2)


class ModelParams:
    """Named parameter tensors; iteration order is the manifest order."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    @property
    def manifest(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, t.shape) for name, t in self.tensors.items()]

    @property
    def num_elements(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            OrderedDict((n, Tensor(t.data.copy(), requires_grad=t.requires_grad)) for n, t in self.items())
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()])


@dataclass
class MotionWeights:
    """Per-cell stream weights, shape (1, 3, H/8, W/8)."""

    weights: Tensor

    def __getitem__(self, i: int) -> Tensor:
        return self.weights[:, i:i + 1]

    @property
    def w1(self) -> Tensor:
        return self[0]

    @property
    def w2(self) -> Tensor:
        return self[1]

    @property
    def w3(self) -> Tensor:
        return self[2]


def receptive_fields(kernel: int, dilation: int, layers: int) -> List[int]:
    """Receptive-field width after each of ``layers`` stacked stride-1 convolutions."""
    out, width = [], 1
    for _ in range(layers):
        width += dilation * (kernel - 1)
        out.append(width)
    return out


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype: np.dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def conv(self, name: str, cin: int, cout: int, k: int, scale: float = 1.0) -> None:
        std = scale * np.sqrt(2.0 / (cin * k * k))
        w = self.rng.normal(0.0, std, size=(cout, cin, k, k))
        self.params[f"{name}.weight"] = Tensor(w.astype(self.dtype), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)

    def norm(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=self.dtype), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=self.dtype), requires_grad=True)


def init_params(cfg: NetConfig) -> ModelParams:
    """Kaiming fan-in normal conv weights, zero biases, unit/zero norm affine."""
    b = _Builder(np.random.default_rng(cfg.seed), cfg.dtype)
    cb, cf, cs, cm = cfg.base_channels, cfg.fused_channels, cfg.stream_channels, cfg.motion_channels
    widths = [cfg.in_channels, cb, 2 * cb, 4 * cb]
    for i in range(3):
        b.conv(f"backbone.stage{i + 1}.conv", widths[i], widths[i + 1], 4)
        b.norm(f"backbone.stage{i + 1}.norm", widths[i + 1])
    f_ch = 2 * widths[-1]

    if cfg.depth_enhanced:
        chans = [f_ch, cs, cs, cs, cs]
        for i in range(4):
            b.conv(f"depth.layer{i + 1}", chans[i], chans[i + 1], 3)
        b.conv("depth.head", cs, 1, 1)
    b.conv("dee.proj_feat", f_ch, cf, 3)
    if cfg.depth_enhanced:
        b.conv("dee.proj_depth", cs, cf, 3)
        b.conv("dee.fuse1", 2 * cf, cs, 3)
        b.conv("dee.fuse2", cs, 2, 3)

    for s in cfg.streams:
        chans = [cf, cs, cs, cs]
        for layer in range(3):
            b.conv(f"mem.stream{s + 1}.layer{layer + 1}.conv", chans[layer], chans[layer + 1], 3)
            b.norm(f"mem.stream{s + 1}.layer{layer + 1}.norm", chans[layer + 1])

    if cfg.fusion == "adaptive":
        b.conv("mwg.conv1", 2, cm, 3)
        b.conv("mwg.conv2", cm, cm, 3)
        b.conv("mwg.out", cm, 3, 1)

    b.conv("head.conv1", cs, cs, 3)
    b.conv("head.conv2", cs, cs, 3)
    b.conv("head.out", cs, 10, 1, scale=cfg.head_init_scale)
    return ModelParams(b.params)


@dataclass
class PairOutput:
    flow: FlowGrid
    density: DensityGrid
    depth: Optional[Tensor]
    weights: Optional[MotionWeights]


class CountingNet:
    def __init__(self, cfg: NetConfig, params: Optional[ModelParams] = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    def _conv(self, name: str, x: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
        w = self.params[f"{name}.weight"]
        k = w.shape[-1]
        if stride == 1:
            pad = dilation * (k - 1) // 2
        else:
            pad = (k - stride) // 2
        return T.conv2d(x, w, self.params[f"{name}.bias"], stride=stride, dilation=dilation, padding=pad)

    def _norm(self, name: str, x: Tensor) -> Tensor:
        gamma, beta = self.params[f"{name}.gamma"], self.params[f"{name}.beta"]
        if self.cfg.norm == "instance":
            return T.norm_affine(x, gamma, beta)
        if self.cfg.norm == "channel":
            return T.channel_norm_affine(x, gamma, beta)
        return T.add(T.mul(x, T.reshape(gamma, (1, -1, 1, 1))), T.reshape(beta, (1, -1, 1, 1)))

    def _cast(self, x) -> Tensor:
        # never narrows: extended-precision probes from grad_check pass through
        if isinstance(x, Tensor):
            if x.dtype == self.cfg.dtype or x.dtype.itemsize > self.cfg.dtype.itemsize:
                return x
            return Tensor(x.data, dtype=self.cfg.dtype)
        return Tensor(np.asarray(x), dtype=self.cfg.dtype)

    # -- branches -------------------------------------------------------------
    def encode(self, frame: Tensor) -> Tensor:
        x = self._cast(frame)
        n, c, h, w = x.shape
        # frames live in [0, 1]; centre them so zero padding reads as mid-grey
        x = T.sub(x, 0.5)
        if h % GRID_STRIDE or w % GRID_STRIDE:
            raise ValueError(f"frame size {h}x{w} is not divisible by {GRID_STRIDE}")
        for i in range(3):
            name = f"backbone.stage{i + 1}"
            x = T.relu(self._norm(f"{name}.norm", self._conv(f"{name}.conv", x, stride=2)))
        return x

    def backbone(self, prev: Tensor, cur: Tensor) -> Tensor:
        return T.concat([self.encode(prev), self.encode(cur)], axis=1)

    def depth_branch(self, feats: Tensor) -> Tuple[Tensor, Tensor]:
        x = feats
        for i in range(4):
            x = T.relu(self._conv(f"depth.layer{i + 1}", x))
        return x, T.relu(self._conv("depth.head", x))

    def fusion_masks(self, f_R: Tensor, f_D: Tensor) -> Tensor:
        """Softmax over two channels: (M1, M2) stacked on axis 1."""
        x = T.relu(self._conv("dee.fuse1", T.concat([f_R, f_D], axis=1)))
        x = T.relu(self._conv("dee.fuse2", x))
        return T.softmax(x, axis=1)

    def depth_enhanced_encoder(self, feats: Tensor, f_d: Optional[Tensor]) -> Tensor:
        f_R = T.relu(self._conv("dee.proj_feat", feats))
        if f_d is None:
            return f_R
        if f_d.shape[2:] != feats.shape[2:]:
            raise ValueError(f"spatial dims differ: F {feats.shape[2:]} vs F_d {f_d.shape[2:]}")
        f_D = T.relu(self._conv("dee.proj_depth", f_d))
        m = self.fusion_masks(f_R, f_D)
        return T.add(T.mul(m[:, 0:1], f_R), T.mul(m[:, 1:2], f_D))

    def stream_layers(self, s: int, x: Tensor, linear: bool = False) -> List[Tensor]:
        """Outputs of each of the three dilated 3x3 layers; ``linear`` skips norm and relu."""
        d = STREAM_DILATIONS[s]
        outs = []
        for layer in range(3):
            name = f"mem.stream{s + 1}.layer{layer + 1}"
            x = self._conv(f"{name}.conv", x, dilation=d)
            if not linear:
                x = T.relu(self._norm(f"{name}.norm", x))
            outs.append(x)
        return outs

    def stream(self, s: int, x: Tensor, linear: bool = False) -> Tensor:
        return self.stream_layers(s, x, linear)[-1]

    def motion_enhancement(self, f_r: Tensor, linear: bool = False) -> List[Tensor]:
        return [self.stream(s, f_r, linear) for s in self.cfg.streams]

    def motion_weight_branch(self, flow) -> MotionWeights:
        x = T.avg_pool2d(self._cast(flow), GRID_STRIDE)
        x = T.relu(self._conv("mwg.conv1", x))
        x = T.relu(self._conv("mwg.conv2", x))
        return MotionWeights(T.softmax(self._conv("mwg.out", x), axis=1))

    def density_head(self, f_f: Tensor) -> FlowGrid:
        x = T.relu(self._conv("head.conv1", f_f))
        x = T.relu(self._conv("head.conv2", x))
        return FlowGrid(T.relu(self._conv("head.out", x)), check=False)

    def fixed_weights(self, like: Tensor) -> MotionWeights:
        n, _, h, w = like.shape
        return MotionWeights(Tensor(np.full((n, 3, h, w), 1.0 / 3.0, dtype=like.dtype)))

    # -- full pass ------------------------------------------------------------
    def forward_pair(self, prev, cur, flow) -> PairOutput:
        prev, cur = self._cast(prev), self._cast(cur)
        if prev.shape != cur.shape:
            raise ValueError(f"frame shapes differ: {prev.shape} vs {cur.shape}")
        feats = self.backbone(prev, cur)
        f_d = depth = None
        if self.cfg.depth_enhanced:
            f_d, depth = self.depth_branch(feats)
        f_r = self.depth_enhanced_encoder(feats, f_d)
        streams = self.motion_enhancement(f_r)
        weights = None
        if self.cfg.fusion == "adaptive":
            weights = self.motion_weight_branch(flow)
        elif self.cfg.fusion == "fixed":
            weights = self.fixed_weights(f_r)
        if weights is None:
            fused = streams[0]
        else:
            fused = adaptive_flow_fusion(streams, weights)
        flow_grid = self.density_head(fused)
        return PairOutput(flow_grid, decode_density(flow_grid), depth, weights)


def adaptive_flow_fusion(streams, weights: MotionWeights) -> Tensor:
    if len(streams) != 3:
        raise ValueError(f"expected three streams, got {len(streams)}")
    out = None
    for i, s in enumerate(streams):
        if s.shape[2:] != weights.weights.shape[2:]:
            raise ValueError(f"stream {i} grid {s.shape[2:]} does not match weights {weights.weights.shape[2:]}")
        term = T.mul(weights[i], s)
        out = term if out is None else T.add(out, term)
    return out


# -- checkpoints -------------------------------------------------------------------

CHECKPOINT_MAGIC = b"VNCK"
_VERSION_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def save_checkpoint(path, entries: "OrderedDict[str, np.ndarray]", precision: str = "float32") -> Tuple[Path, Path]:
    """Write ``<path>`` (binary blob) and ``<path>.manifest`` (``name shape...`` lines).

    Version 1 blobs hold float32 values; version 2 holds float64 so that
    double-precision runs can resume bit-exactly.
    """
    path = Path(path)
    version = 2 if T.resolve_dtype(precision) == np.float64 else 1
    dtype = _VERSION_DTYPES[version]
    lines, chunks = [], []
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if any(ch.isspace() for ch in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        lines.append(" ".join([name] + [str(d) for d in arr.shape]))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = path.with_name(path.name + ".manifest")
    manifest.write_bytes(("\n".join(lines) + "\n").encode("ascii"))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + np.array([version], dtype="<u4").tobytes() + b"".join(chunks))
    return path, manifest


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    manifest = path.with_name(path.name + ".manifest")
    entries = []
    for line in manifest.read_text(encoding="ascii").split("\n"):
        if line.strip():
            name, *dims = line.split(" ")
            entries.append((name, tuple(int(d) for d in dims)))
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if version not in _VERSION_DTYPES:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dtype = _VERSION_DTYPES[version]
    total = sum(int(np.prod(s)) for _, s in entries)
    if len(raw) - 8 != total * dtype.itemsize:
        raise ValueError(
            f"{path}: manifest describes {total} values but blob holds {(len(raw) - 8) // dtype.itemsize}"
        )
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 8
    for name, shape in entries:
        n = int(np.prod(shape))
        out[name] = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).reshape(shape).copy()
        offset += n * dtype.itemsize
    return out


def params_from_entries(cfg: NetConfig, entries: Dict[str, np.ndarray]) -> ModelParams:
    """Fill a freshly laid-out parameter set from checkpoint entries, checking shapes."""
    params = init_params(cfg)
    for name, t in params.items():
        if name not in entries:
            raise ValueError(f"checkpoint is missing parameter {name}")
        arr = entries[name]
        if arr.shape != t.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: {arr.shape} vs expected {t.shape}")
        t.data = arr.astype(cfg.dtype)
    return params


def config_dict(cfg: NetConfig) -> Dict[str, object]:
    return asdict(cfg)


NET_CONFIG_FIELDS = tuple(f.name for f in fields(NetConfig))
