"""Frame-pair samples, the two-direction training step, and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .density import GRID_STRIDE, DensityGrid, count, render_density
from .losses import Adam, LossReport, cycle_loss, depth_loss, flow_loss, total_loss
from .metrics import EvalRecord, motion_rate
from .model import CountingNet
from .synth import FrameBundle
from .tensor import Tensor


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class PairSample:
    scene_id: str
    frame_index: int
    prev: np.ndarray  # (1, 3, H, W)
    cur: np.ndarray
    flow_fwd: np.ndarray  # (1, 2, H, W), displacement prev -> cur
    depth: np.ndarray  # (1, 1, H/8, W/8), pooled inverse depth of the current frame
    gt: DensityGrid
    true_count: float

    @property
    def flow_bwd(self) -> np.ndarray:
        return -self.flow_fwd


def pool_depth(depth: np.ndarray) -> np.ndarray:
    _, h, w = depth.shape
    s = GRID_STRIDE
    return depth.reshape(1, h // s, s, w // s, s).mean(axis=(2, 4))[None]


def pair_samples(scene_id: str, bundles: Sequence[FrameBundle], sigma: float = 3.0) -> List[PairSample]:
    """Every consecutive (t-1, t) pair of a scene."""
    out = []
    for t in range(1, len(bundles)):
        prev, cur = bundles[t - 1], bundles[t]
        _, h, w = cur.frame.shape
        out.append(
            PairSample(
                scene_id=scene_id,
                frame_index=t,
                prev=prev.frame[None],
                cur=cur.frame[None],
                flow_fwd=prev.flow_to_next[None],
                depth=pool_depth(cur.depth),
                gt=render_density(cur.points, h, w, sigma),
                true_count=float(len(cur.points)),
            )
        )
    return out


def _spatial(arr: np.ndarray, code: int) -> np.ndarray:
    if code & 4:
        arr = np.swapaxes(arr, -1, -2)
    if code & 1:
        arr = arr[..., ::-1]
    if code & 2:
        arr = arr[..., ::-1, :]
    return np.ascontiguousarray(arr)


def augment(sample: PairSample, code: int) -> PairSample:
    """Apply one of the eight flips/transposes of the square (four if not square).

    Bit 0 mirrors x, bit 1 mirrors y, bit 2 transposes first. Ground-truth
    grids transform exactly because cell boundaries mirror onto themselves.
    """
    if code == 0:
        return sample
    flow = sample.flow_fwd
    if code & 4:
        flow = flow[:, ::-1]
    flow = _spatial(flow, code).copy()
    if code & 1:
        flow[:, 0] *= -1
    if code & 2:
        flow[:, 1] *= -1
    return replace(
        sample,
        prev=_spatial(sample.prev, code),
        cur=_spatial(sample.cur, code),
        flow_fwd=flow,
        depth=_spatial(sample.depth, code),
        gt=DensityGrid(_spatial(sample.gt.values.data, code)),
    )


def augment_codes(sample: PairSample) -> int:
    h, w = sample.cur.shape[-2:]
    return 8 if h == w else 4


def scene_rate(bundles: Sequence[FrameBundle]) -> float:
    return float(np.mean([motion_rate(b.flow_to_next) for b in bundles]))


def pair_loss(net: CountingNet, sample: PairSample) -> LossReport:
    """Forward pass on (t-1, t), reversed pass on (t, t-1); parameters shared."""
    fwd = net.forward_pair(sample.prev, sample.cur, sample.flow_fwd)
    bwd = net.forward_pair(sample.cur, sample.prev, sample.flow_bwd)
    gt = DensityGrid(T.Tensor(sample.gt.values.data, dtype=net.cfg.dtype))
    l_flow = flow_loss(fwd.density, gt)
    l_cycle = cycle_loss(fwd.flow, bwd.flow)
    if fwd.depth is not None:
        l_depth = depth_loss(fwd.depth, sample.depth)
    else:
        l_depth = Tensor(np.zeros((), dtype=net.cfg.dtype))
    return total_loss(l_flow, l_cycle, l_depth)


def train_step(net: CountingNet, opt: Adam, sample: PairSample) -> LossReport:
    net.params.zero_grad()
    report = pair_loss(net, sample)
    total = float(report.total.data)
    if not math.isfinite(total):
        raise NonFiniteLoss(
            f"non-finite loss at scene {sample.scene_id} frame {sample.frame_index}: {report.values()}"
        )
    report.total.backward()
    opt.step()
    return report


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 11]).permutation(n)


def fit(
    net: CountingNet,
    samples: Sequence[PairSample],
    epochs: int,
    lr: float = 1e-4,
    weight_decay: float = 5e-4,
    seed: int = 0,
    opt: Optional[Adam] = None,
    start_epoch: int = 0,
    on_step: Optional[Callable[[int, LossReport], None]] = None,
    on_epoch: Optional[Callable[[int, Adam], None]] = None,
    augment_data: bool = True,
) -> Adam:
    """Batch-size-1 Adam over shuffled frame pairs, each under a random flip/transpose."""
    if opt is None:
        opt = Adam(net.params, lr=lr, weight_decay=weight_decay)
    step = opt.step_count
    for epoch in range(start_epoch, epochs):
        order = epoch_order(len(samples), seed, epoch)
        codes = np.random.default_rng([seed, epoch, 13]).integers(0, 8, size=len(order))
        for i, code in zip(order, codes):
            sample = samples[i]
            if augment_data:
                sample = augment(sample, int(code) % augment_codes(sample))
            report = train_step(net, opt, sample)
            step += 1
            if on_step is not None:
                on_step(step, report)
        if on_epoch is not None:
            on_epoch(epoch, opt)
    return opt


def predict(net: CountingNet, sample: PairSample) -> float:
    out = net.forward_pair(sample.prev, sample.cur, sample.flow_fwd)
    return count(out.density)


def evaluate(net: CountingNet, samples: Sequence[PairSample]) -> List[EvalRecord]:
    return [EvalRecord(s.scene_id, s.frame_index, s.true_count, predict(net, s)) for s in samples]
