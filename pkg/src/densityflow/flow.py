"""Ten-channel density flow between consecutive frames.

``values[k, r, c]`` is the density arriving at cell (r, c) from the source
cell (r + dy, c + dx) with (dy, dx) = OFFSETS[k]; channel 9 is inflow from
outside the image and only counts at border cells.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .density import DensityGrid
from .tensor import Tensor

N_CHANNELS = 10
OUTSIDE = 9
OFFSETS: Tuple[Tuple[int, int], ...] = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


class FlowGrid:
    def __init__(self, values, check: bool = True):
        if not isinstance(values, Tensor):
            values = Tensor(np.asarray(values, dtype=np.float64))
        if values.ndim == 4 and values.shape[0] == 1:
            values = values.reshape(values.shape[1:])
        if values.ndim != 3 or values.shape[0] != N_CHANNELS:
            raise ValueError(f"FlowGrid needs shape ({N_CHANNELS}, H, W), got {values.shape}")
        if check and np.any(values.data < 0):
            k, r, c = np.argwhere(values.data < 0)[0]
            raise ValueError(f"flow must be nonnegative; channel {k} at cell ({r}, {c}) is {values.data[k, r, c]}")
        self.values = values

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    @property
    def height_cells(self) -> int:
        return self.values.shape[1]

    @property
    def width_cells(self) -> int:
        return self.values.shape[2]

    @property
    def channels(self) -> int:
        return N_CHANNELS

    def numpy(self) -> np.ndarray:
        return self.values.data


def opposite_channel(k: int) -> int:
    if not 0 <= k < N_CHANNELS:
        raise ValueError(f"channel {k} outside 0..{N_CHANNELS - 1}")
    return k if k == OUTSIDE else 8 - k


def neighbor_mask(height: int, width: int, offsets: Sequence[Tuple[int, int]] = OFFSETS) -> np.ndarray:
    """Boolean (9, H, W): whether each source offset stays inside the grid."""
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    mask = np.empty((len(offsets), height, width), dtype=bool)
    for k, (dy, dx) in enumerate(offsets):
        mask[k] = (rows + dy >= 0) & (rows + dy < height) & (cols + dx >= 0) & (cols + dx < width)
    return mask


def border_mask(height: int, width: int) -> np.ndarray:
    m = np.zeros((height, width), dtype=bool)
    m[0, :] = m[-1, :] = True
    m[:, 0] = m[:, -1] = True
    return m


def decode_mask(height: int, width: int, offsets: Sequence[Tuple[int, int]] = OFFSETS) -> np.ndarray:
    """Which of the 10 channels count toward the density of each cell."""
    mask = np.zeros((N_CHANNELS, height, width), dtype=bool)
    mask[:OUTSIDE] = neighbor_mask(height, width, offsets)
    mask[OUTSIDE] = border_mask(height, width)
    return mask


def decode_density(flow: FlowGrid, offsets: Sequence[Tuple[int, int]] = OFFSETS) -> DensityGrid:
    if np.any(flow.values.data < 0):
        raise ValueError("decode_density: flow has negative entries")
    mask = decode_mask(flow.height_cells, flow.width_cells, offsets).astype(flow.values.dtype)
    return DensityGrid(T.sum_(T.mul(flow.values, mask), axis=0))


def flow_mass(flow: FlowGrid) -> float:
    mask = decode_mask(flow.height_cells, flow.width_cells)
    return float(np.sum(np.where(mask, flow.values.data, 0.0)))


def _pairing(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Flat index into the reversed grid paired with every forward entry, plus its mask."""
    mask = decode_mask(height, width)
    idx = np.zeros((N_CHANNELS, height, width), dtype=np.intp)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    for k, (dy, dx) in enumerate(OFFSETS):
        src_r = np.clip(rows + dy, 0, height - 1)
        src_c = np.clip(cols + dx, 0, width - 1)
        idx[k] = (opposite_channel(k) * height + src_r) * width + src_c
    idx[OUTSIDE] = (OUTSIDE * height + rows) * width + cols
    return idx, mask


def reverse_flow(flow: FlowGrid) -> FlowGrid:
    """The time-reversed flow: every forward transfer with its direction negated."""
    h, w = flow.height_cells, flow.width_cells
    idx, mask = _pairing(h, w)
    out = np.zeros_like(flow.values.data)
    # forward entry (k, j) becomes the reversed entry at idx[k, j]
    out.reshape(-1)[idx[mask]] = flow.values.data[mask]
    return FlowGrid(out)


def cycle_residual(fwd: FlowGrid, bwd: FlowGrid) -> Tensor:
    """Sum of squared mismatches between forward flow and reversed-direction flow."""
    if fwd.values.shape != bwd.values.shape:
        raise ValueError(f"cycle_residual: shape mismatch {fwd.values.shape} vs {bwd.values.shape}")
    idx, mask = _pairing(fwd.height_cells, fwd.width_cells)
    paired = T.take(bwd.values, idx)
    diff = T.mul(T.sub(fwd.values, paired), mask.astype(fwd.values.dtype))
    return T.sum_(T.square(diff))


# -- binary file format ---------------------------------------------------------

FLOW_MAGIC = b"DFLW"


def write_flow_file(path, values: np.ndarray) -> None:
    """Write a (C, H, W) array: magic, u32 H, W, C, then cell-major float32 with channel fastest."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"flow array must be (C, H, W), got {values.shape}")
    c, h, w = values.shape
    header = FLOW_MAGIC + np.array([h, w, c], dtype="<u4").tobytes()
    body = np.ascontiguousarray(values.transpose(1, 2, 0), dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)


def read_flow_file(path, channels: Optional[int] = None) -> np.ndarray:
    raw = open(path, "rb").read()
    if raw[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {FLOW_MAGIC!r}")
    h, w, c = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=3, offset=4))
    if channels is not None and c != channels:
        raise ValueError(f"{path}: has {c} channels, expected {channels}")
    n = h * w * c
    if len(raw) != 16 + 4 * n:
        raise ValueError(f"{path}: expected {16 + 4 * n} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f4", count=n, offset=16)
    return body.reshape(h, w, c).transpose(2, 0, 1).copy()


def save_flow_grid(path, flow: FlowGrid) -> None:
    write_flow_file(path, flow.values.data)


def load_flow_grid(path) -> FlowGrid:
    return FlowGrid(read_flow_file(path, channels=N_CHANNELS).astype(np.float64))
