"""Synthetic low-contrast videos with exact flow, depth and point ground truth.

Objects are soft-edged discs on constant-velocity paths that bounce off the
frame edges. The background is a periodic value-noise texture translated by
the camera drift, so its flow is exactly the drift vector.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .density import GRID_STRIDE, PointAnnotation, read_points, write_points
from .flow import read_flow_file, write_flow_file
from .formats import read_dmap, read_ppm, write_dmap, write_ppm

TEXTURE_AMPLITUDE = 0.25
TEXTURE_PERIOD = 16  # lattice cells
CHANNEL_TINT = np.array([1.0, 0.95, 0.9])

DENSITY_BANDS: Dict[str, Tuple[int, int]] = {"0-50": (0, 50), "50-100": (50, 100), "100+": (100, 500)}
# video proportions per band in the reference collection: 30/15/5 of 50
DENSITY_MIX = (("0-50", 0.6), ("50-100", 0.3), ("100+", 0.1))
# 28 slow / 22 fast videos
SLOW_FRACTION = 28 / 50
SPEED_BANDS = ("slow", "fast")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    H: int = 64
    W: int = 64
    n_frames: int = 5
    n_objects: int = 10
    speed_scale: float = 1.0
    camera_drift: Tuple[float, float] = (0.0, 0.0)  # (dx, dy) pixels per frame
    blob_radius: Tuple[float, float] = (2.0, 3.5)
    contrast: float = 0.3
    background_texture_scale: float = 8.0
    scene_id: str = "000"
    density_band: str = ""
    speed_band: str = ""

    def validate(self) -> None:
        if self.H <= 0 or self.W <= 0 or self.H % GRID_STRIDE or self.W % GRID_STRIDE:
            raise ValueError(f"H and W must be positive multiples of {GRID_STRIDE}, got {self.H}x{self.W}")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        if self.speed_scale < 0:
            raise ValueError("speed_scale must be >= 0")
        lo, hi = self.blob_radius
        if not 0 < lo <= hi:
            raise ValueError(f"blob_radius range must satisfy 0 < lo <= hi, got {self.blob_radius}")
        if not 0.0 <= self.contrast <= 1.0:
            raise ValueError("contrast must lie in [0, 1]")
        if self.background_texture_scale <= 0:
            raise ValueError("background_texture_scale must be positive")


@dataclass
class Tracks:
    """Trajectory table: positions has n_frames + 1 rows so every frame has a successor."""

    positions: np.ndarray  # (n_frames + 1, n_objects, 2) as (x, y)
    radii: np.ndarray  # (n_objects,)
    inverse_depth: np.ndarray  # (n_objects,)

    def displacement(self, t: int) -> np.ndarray:
        return self.positions[t + 1] - self.positions[t]


@dataclass
class FrameBundle:
    frame: np.ndarray  # (3, H, W) in [0, 1]
    flow_to_next: np.ndarray  # (2, H, W) as (u, v)
    depth: np.ndarray  # (1, H, W) inverse depth
    points: List[PointAnnotation] = field(default_factory=list)


def _bounce(p: float, v: float, lo: float, hi: float) -> Tuple[float, float]:
    p += v
    for _ in range(8):
        if p < lo:
            p, v = 2 * lo - p, -v
        elif p > hi:
            p, v = 2 * hi - p, -v
        else:
            break
    return p, v


def simulate_tracks(spec: SceneSpec) -> Tracks:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.n_objects
    lo_x, hi_x = 0.5, spec.W - 0.5
    lo_y, hi_y = 0.5, spec.H - 0.5
    start = np.column_stack([rng.uniform(lo_x, hi_x, n), rng.uniform(lo_y, hi_y, n)])
    angle = rng.uniform(0.0, 2 * math.pi, n)
    vel = spec.speed_scale * np.column_stack([np.cos(angle), np.sin(angle)])
    radii = rng.uniform(spec.blob_radius[0], spec.blob_radius[1], n)
    inv_depth = rng.uniform(0.3, 1.0, n)

    pos = np.zeros((spec.n_frames + 1, n, 2))
    pos[0] = start
    for t in range(1, spec.n_frames + 1):
        for i in range(n):
            x, vx = _bounce(pos[t - 1, i, 0], vel[i, 0], lo_x, hi_x)
            y, vy = _bounce(pos[t - 1, i, 1], vel[i, 1], lo_y, hi_y)
            pos[t, i] = (x, y)
            vel[i] = (vx, vy)
    return Tracks(pos, radii, inv_depth)


def _value_noise(xs: np.ndarray, ys: np.ndarray, lattice: np.ndarray, scale: float) -> np.ndarray:
    """Periodic smooth value noise sampled at continuous coordinates."""
    p = lattice.shape[0]
    u, v = xs / scale, ys / scale
    iu, iv = np.floor(u), np.floor(v)
    fu, fv = u - iu, v - iv
    fu = fu * fu * (3 - 2 * fu)
    fv = fv * fv * (3 - 2 * fv)
    i0, j0 = iu.astype(np.int64) % p, iv.astype(np.int64) % p
    i1, j1 = (i0 + 1) % p, (j0 + 1) % p
    top = lattice[j0, i0] * (1 - fu) + lattice[j0, i1] * fu
    bot = lattice[j1, i0] * (1 - fu) + lattice[j1, i1] * fu
    return top * (1 - fv) + bot * fv


def background(spec: SceneSpec, t: int, lattice: Optional[np.ndarray] = None) -> np.ndarray:
    if lattice is None:
        lattice = np.random.default_rng([spec.seed, 2]).uniform(size=(TEXTURE_PERIOD, TEXTURE_PERIOD))
    ys, xs = np.mgrid[0:spec.H, 0:spec.W].astype(np.float64)
    dx, dy = spec.camera_drift
    noise = _value_noise(xs - dx * t, ys - dy * t, lattice, spec.background_texture_scale)
    lum = 0.5 + 2 * TEXTURE_AMPLITUDE * (noise - 0.5)
    return lum[None] * CHANNEL_TINT[:, None, None]


def coverage(spec: SceneSpec, tracks: Tracks, t: int) -> List[np.ndarray]:
    """Soft alpha of every object at frame t (pixel (r, c) sits at (x=c, y=r))."""
    ys, xs = np.mgrid[0:spec.H, 0:spec.W].astype(np.float64)
    alphas = []
    for i in range(tracks.radii.size):
        cx, cy = tracks.positions[t, i]
        dist = np.hypot(xs - cx, ys - cy)
        alphas.append(np.clip(tracks.radii[i] + 0.5 - dist, 0.0, 1.0))
    return alphas


def draw_order(tracks: Tracks) -> np.ndarray:
    """Far objects first so nearer ones (higher inverse depth) occlude them."""
    return np.argsort(tracks.inverse_depth, kind="stable")


def render_frame(spec: SceneSpec, tracks: Tracks, t: int, lattice: np.ndarray) -> FrameBundle:
    img = background(spec, t, lattice)
    blob_color = (0.5 + spec.contrast) * CHANNEL_TINT[:, None, None]
    flow = np.empty((2, spec.H, spec.W))
    flow[0], flow[1] = spec.camera_drift
    depth = np.zeros((1, spec.H, spec.W))
    alphas = coverage(spec, tracks, t)
    disp = tracks.displacement(t)
    for i in draw_order(tracks):
        a = alphas[i]
        img = img * (1 - a) + blob_color * a
        solid = a >= 0.5
        flow[0][solid], flow[1][solid] = disp[i]
        depth[0][solid] = tracks.inverse_depth[i]
    points = [PointAnnotation(t, float(x), float(y)) for x, y in tracks.positions[t]]
    return FrameBundle(np.clip(img, 0.0, 1.0), flow, depth, points)


def generate(spec: SceneSpec) -> List[FrameBundle]:
    tracks = simulate_tracks(spec)
    lattice = np.random.default_rng([spec.seed, 2]).uniform(size=(TEXTURE_PERIOD, TEXTURE_PERIOD))
    return [render_frame(spec, tracks, t, lattice) for t in range(spec.n_frames)]


# -- dataset sampling ----------------------------------------------------------------

@dataclass
class Fold:
    index: int
    train: List[SceneSpec]
    test: List[SceneSpec]


@dataclass
class Dataset:
    scenes: List[SceneSpec]
    folds: List[Fold]


def _speed_params(band: str, rng: np.random.Generator) -> Tuple[float, Tuple[float, float]]:
    if band == "slow":
        speed = rng.uniform(0.5, 3.0)
        drift_mag = rng.uniform(0.0, 6.0)
    elif band == "fast":
        speed = rng.uniform(2.0, 6.0)
        drift_mag = rng.uniform(24.0, 32.0)
    else:
        raise ValueError(f"unknown speed band {band!r}; expected one of {SPEED_BANDS}")
    angle = rng.uniform(0.0, 2 * math.pi)
    return float(speed), (float(drift_mag * math.cos(angle)), float(drift_mag * math.sin(angle)))


def scene_motion_rate(spec: SceneSpec) -> float:
    from .metrics import motion_rate

    return float(np.mean([motion_rate(b.flow_to_next) for b in generate(spec)]))


def sample_scene(
    scene_id: str,
    seed: int,
    density_band: str,
    speed_band: str,
    base: SceneSpec,
    objects: Optional[Tuple[int, int]] = None,
) -> SceneSpec:
    """Draw one scene in the requested bands; resampled until its measured rate matches."""
    from .metrics import classify_speed

    if density_band not in DENSITY_BANDS:
        raise ValueError(f"unknown density band {density_band!r}; expected one of {sorted(DENSITY_BANDS)}")
    lo, hi = DENSITY_BANDS[density_band]
    if objects is not None:
        lo, hi = max(lo, objects[0]), min(hi, objects[1])
        if lo > hi:
            raise ValueError(f"object range {objects} does not intersect band {density_band}")
    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt])
        speed, drift = _speed_params(speed_band, rng)
        spec = replace(
            base,
            seed=int(rng.integers(0, 2**31 - 1)),
            n_objects=int(rng.integers(lo, hi + 1)),
            speed_scale=speed,
            camera_drift=drift,
            scene_id=scene_id,
            density_band=density_band,
            speed_band=speed_band,
        )
        if classify_speed(scene_motion_rate(spec)) == speed_band:
            return spec
    raise RuntimeError(f"could not draw a {speed_band} scene for seed {seed}")


def make_dataset(
    n_scenes: int,
    density_band: str = "0-50",
    speed_band: str = "mixed",
    seed: int = 0,
    n_folds: int = 3,
    n_test: Optional[int] = None,
    base: SceneSpec = SceneSpec(),
    objects: Optional[Tuple[int, int]] = None,
) -> Dataset:
    """Seeded scenes plus ``n_folds`` train/test splits with pairwise-disjoint test sets.

    ``density_band`` / ``speed_band`` may name a single band or ``"mixed"``,
    which draws bands in the proportions of the reference video collection.
    """
    if n_scenes < 0:
        raise ValueError("n_scenes must be >= 0")
    if n_test is None:
        n_test = int(round(n_scenes * 15 / 50))
    if n_folds * n_test > n_scenes:
        raise ValueError(f"{n_folds} disjoint test sets of {n_test} need at least {n_folds * n_test} scenes")
    rng = np.random.default_rng([seed, 7])
    scenes = []
    for k in range(n_scenes):
        if density_band == "mixed":
            names, probs = zip(*DENSITY_MIX)
            dband = str(rng.choice(names, p=probs))
        else:
            dband = density_band
        if speed_band == "mixed":
            sband = "slow" if rng.uniform() < SLOW_FRACTION else "fast"
        else:
            sband = speed_band
        scenes.append(sample_scene(f"{k:03d}", int(rng.integers(0, 2**31 - 1)), dband, sband, base, objects))
    order = rng.permutation(n_scenes)
    folds = []
    for f in range(n_folds):
        test_idx = set(order[f * n_test:(f + 1) * n_test].tolist())
        folds.append(
            Fold(
                f,
                train=[s for i, s in enumerate(scenes) if i not in test_idx],
                test=[s for i, s in enumerate(scenes) if i in test_idx],
            )
        )
    return Dataset(scenes, folds)


# -- scene directories ---------------------------------------------------------------

_SPEC_FIELDS = {f: type(v) for f, v in asdict(SceneSpec()).items()}


def spec_to_text(spec: SceneSpec) -> str:
    lines = []
    for key, value in asdict(spec).items():
        if isinstance(value, (tuple, list)):
            value = ",".join(repr(float(v)) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> SceneSpec:
    kwargs = {}
    for line in text.split("\n"):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        if key not in _SPEC_FIELDS:
            raise ValueError(f"unknown scene key {key!r}")
        kind = _SPEC_FIELDS[key]
        if kind is tuple:
            kwargs[key] = tuple(float(v) for v in value.split(","))
        elif kind is str:
            kwargs[key] = value
        else:
            kwargs[key] = kind(value)
    return SceneSpec(**kwargs)


def write_scene(directory, spec: SceneSpec, bundles: Sequence[FrameBundle]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "scene.txt").write_bytes(spec_to_text(spec).encode("ascii"))
    points = []
    for k, b in enumerate(bundles):
        write_ppm(d / f"frame_{k}.ppm", b.frame)
        write_flow_file(d / f"flow_{k}.dflw", b.flow_to_next)
        write_dmap(d / f"depth_{k}.dmap", b.depth)
        points.extend(b.points)
    write_points(d / "points.txt", points)
    return d


def read_scene(directory) -> Tuple[SceneSpec, List[FrameBundle]]:
    d = Path(directory)
    spec = spec_from_text((d / "scene.txt").read_text(encoding="ascii"))
    by_frame: Dict[int, List[PointAnnotation]] = {}
    for p in read_points(d / "points.txt"):
        by_frame.setdefault(p.frame_index, []).append(p)
    bundles = []
    for k in range(spec.n_frames):
        bundles.append(
            FrameBundle(
                frame=read_ppm(d / f"frame_{k}.ppm"),
                flow_to_next=read_flow_file(d / f"flow_{k}.dflw", channels=2).astype(np.float64),
                depth=read_dmap(d / f"depth_{k}.dmap")[None].astype(np.float64),
                points=by_frame.get(k, []),
            )
        )
    return spec, bundles
