"""Point annotations to grid-resolution density maps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Union

import numpy as np

from .tensor import Tensor

GRID_STRIDE = 8


@dataclass(frozen=True)
class PointAnnotation:
    frame_index: int
    x: float
    y: float


class DensityGrid:
    """Expected object count per 8x8-pixel cell.

    ``values`` is a ``Tensor`` of shape (H/8, W/8); ground truth grids hold a
    constant tensor, decoded predictions hold one that is part of a graph.
    """

    def __init__(self, values: Union[Tensor, np.ndarray]):
        if not isinstance(values, Tensor):
            values = Tensor(np.asarray(values, dtype=np.float64))
        if values.ndim != 2:
            raise ValueError(f"DensityGrid needs a 2-D array of cells, got shape {values.shape}")
        self.values = values

    @property
    def height_cells(self) -> int:
        return self.values.shape[0]

    @property
    def width_cells(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values.data

    def __repr__(self) -> str:
        return f"DensityGrid({self.height_cells}x{self.width_cells}, count={count(self):.4f})"


def _axis_weights(center: float, extent: int, sigma: float, radius: int) -> tuple:
    """Truncated 1-D Gaussian over pixel coordinates, clipped to the frame."""
    lo = max(0, int(math.floor(center)) - radius)
    hi = min(extent - 1, int(math.ceil(center)) + radius)
    coords = np.arange(lo, hi + 1, dtype=np.float64)
    coords = coords[np.abs(coords - center) <= radius]
    w = np.exp(-0.5 * ((coords - center) / sigma) ** 2)
    return coords.astype(np.intp), w / w.sum()


def render_density(points: Sequence[PointAnnotation], H: int, W: int, sigma: float = 3.0) -> DensityGrid:
    """Stamp one unit-mass truncated Gaussian per point and block-sum to cells.

    Pixel (r, c) sits at coordinate (x=c, y=r). Each kernel is cut to the
    square window |dx|, |dy| <= ceil(4 sigma), clipped to the frame, and
    renormalised so every point contributes exactly 1 to the total.
    """
    if H % GRID_STRIDE or W % GRID_STRIDE:
        raise ValueError(f"frame size {H}x{W} is not divisible by {GRID_STRIDE}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    hc, wc = H // GRID_STRIDE, W // GRID_STRIDE
    grid = np.zeros((hc, wc), dtype=np.float64)
    radius = int(math.ceil(4 * sigma))
    for p in points:
        if not (0 <= p.x < W and 0 <= p.y < H):
            raise ValueError(f"point {p} lies outside the {W}x{H} frame")
        xs, wx = _axis_weights(p.x, W, sigma, radius)
        ys, wy = _axis_weights(p.y, H, sigma, radius)
        # separable kernel: block-sum each axis, then take the outer product
        cx = np.bincount(xs // GRID_STRIDE, weights=wx, minlength=wc)
        cy = np.bincount(ys // GRID_STRIDE, weights=wy, minlength=hc)
        grid += np.outer(cy, cx)
    return DensityGrid(grid)


def count(grid: DensityGrid) -> float:
    return float(grid.values.data.sum())


def read_points(path: Union[str, Path]) -> List[PointAnnotation]:
    points = []
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").split("\n"), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(" ")
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'frame_index x y', got {line!r}")
        points.append(PointAnnotation(int(fields[0]), float(fields[1]), float(fields[2])))
    return points


def write_points(path: Union[str, Path], points: Iterable[PointAnnotation]) -> None:
    lines = ["# frame_index x y"]
    lines += [f"{int(p.frame_index)} {float(p.x)!r} {float(p.y)!r}" for p in points]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))
