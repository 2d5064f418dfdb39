"""In-memory experiment driver: build a dataset, train one fold, score it."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .metrics import EvalRecord, FoldSummary, mae, summarize_fold
from .model import CountingNet
from .synth import Dataset, SceneSpec, generate, make_dataset
from .train import PairSample, evaluate, fit, pair_samples, scene_rate


def build_dataset(cfg: RunConfig) -> Dataset:
    return make_dataset(
        cfg.n_scenes,
        cfg.density_band,
        cfg.speed_band,
        seed=cfg.data_seed,
        n_folds=cfg.n_folds,
        n_test=cfg.test_size,
        base=cfg.scene_base(),
        objects=cfg.objects,
    )


def scene_samples(specs: Sequence[SceneSpec], sigma: float) -> Tuple[List[PairSample], Dict[str, float]]:
    samples, rates = [], {}
    for spec in specs:
        bundles = generate(spec)
        samples.extend(pair_samples(spec.scene_id, bundles, sigma))
        rates[spec.scene_id] = scene_rate(bundles)
    return samples, rates


def mean_count_baseline(train: Sequence[PairSample], test: Sequence[PairSample]) -> float:
    """MAE on ``test`` of always predicting the mean training count."""
    m = float(np.mean([s.true_count for s in train]))
    return float(np.mean([abs(s.true_count - m) for s in test]))


@dataclass
class FoldRun:
    records: List[EvalRecord]
    summary: FoldSummary
    baseline_mae: float
    seconds: float
    net: CountingNet

    @property
    def mae(self) -> float:
        return mae(self.records)


def run_fold(cfg: RunConfig, dataset: Dataset = None) -> FoldRun:
    dataset = dataset if dataset is not None else build_dataset(cfg)
    fold = dataset.folds[cfg.fold]
    train, _ = scene_samples(fold.train, cfg.sigma)
    test, rates = scene_samples(fold.test, cfg.sigma)
    net = CountingNet(cfg.net_config())
    start = time.perf_counter()
    fit(net, train, cfg.epochs, lr=cfg.lr, weight_decay=cfg.weight_decay, seed=cfg.seed, augment_data=cfg.augment)
    records = evaluate(net, test)
    seconds = time.perf_counter() - start
    return FoldRun(records, summarize_fold(records, rates, cfg.seed), mean_count_baseline(train, test), seconds, net)
