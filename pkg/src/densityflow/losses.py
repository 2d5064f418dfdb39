"""Training objective and optimizer."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .density import DensityGrid
from .flow import FlowGrid, cycle_residual
from .tensor import Tensor


def flow_loss(pred: DensityGrid, gt: DensityGrid) -> Tensor:
    """Sum over cells of the squared density error (a sum, not a mean)."""
    if pred.shape != gt.shape:
        raise ValueError(f"flow_loss: grid shapes differ, {pred.shape} vs {gt.shape}")
    return T.sum_(T.square(T.sub(pred.values, gt.values)))


def cycle_loss(fwd: FlowGrid, bwd: FlowGrid) -> Tensor:
    return cycle_residual(fwd, bwd)


def depth_loss(pred: Tensor, gt) -> Tensor:
    gt = T.as_tensor(gt, like=pred)
    if pred.shape != gt.shape:
        raise ValueError(f"depth_loss: shapes differ, {pred.shape} vs {gt.shape}")
    return T.mse(pred, gt)


@dataclass
class LossReport:
    l_flow: Tensor
    l_cycle: Tensor
    l_depth: Tensor
    total: Tensor

    def values(self) -> Dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("l_flow", "l_cycle", "l_depth", "total")}


def total_loss(l_flow, l_cycle, l_depth) -> LossReport:
    """Unit-weight sum of the three terms; a missing term counts as zero."""
    parts = [T.as_tensor(v) if not isinstance(v, Tensor) else v for v in (l_flow, l_cycle, l_depth)]
    total = T.add(T.add(parts[0], parts[1]), parts[2])
    return LossReport(parts[0], parts[1], parts[2], total)


class Adam:
    """Adam with coupled L2 weight decay (decay added to the gradient)."""

    def __init__(self, params, lr: float = 1e-4, weight_decay: float = 5e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = OrderedDict((n, np.zeros_like(t.data)) for n, t in params.items())
        self.v = OrderedDict((n, np.zeros_like(t.data)) for n, t in params.items())

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        out["adam.step"] = np.array([self.step_count], dtype=np.float64)
        for n in self.m:
            out[f"adam.m.{n}"] = self.m[n]
        for n in self.v:
            out[f"adam.v.{n}"] = self.v[n]
        return out

    def load_state(self, entries) -> None:
        self.step_count = int(entries["adam.step"][0])
        for n in self.m:
            self.m[n] = np.array(entries[f"adam.m.{n}"], dtype=self.m[n].dtype)
            self.v[n] = np.array(entries[f"adam.v.{n}"], dtype=self.v[n].dtype)
