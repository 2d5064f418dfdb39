"""Command-line entry point: ``densityflow {synth,train,eval,render,motion-profile}``.

Failures print one line ``ERROR:<code>:<message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import sys
from collections import Counter, OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError, RunConfig, format_config, load_config
from .density import count
from .formats import heat_image, write_dmap, write_ppm
from .losses import Adam
from .metrics import aggregate_folds, classify_speed, format_table, motion_rate, summarize_fold, write_results
from .model import CountingNet, load_checkpoint, params_from_entries, save_checkpoint
from .runs import build_dataset
from .synth import read_scene, write_scene, generate
from .train import NonFiniteLoss, PairSample, evaluate, fit, pair_samples, scene_rate

SPLITS_FILE = "splits.txt"
CONFIG_FILE = "config.txt"
DATASET_FILE = "dataset.txt"
LOG_FILE = "log.tsv"
LOG_HEADER = "step\tl_flow\tl_cycle\tl_depth\ttotal\n"


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {text} is not an unsigned 64-bit integer")
    return value


# -- data directories -------------------------------------------------------------


def _read_splits(data: Path) -> Dict[int, Dict[str, List[str]]]:
    path = data / SPLITS_FILE
    if not path.is_file():
        raise CliError("data", f"{path} not found; run 'synth' first")
    folds: Dict[int, Dict[str, List[str]]] = {}
    for line in path.read_text(encoding="ascii").split("\n"):
        if not line.strip():
            continue
        _, k, part, *ids = line.split("\t")
        folds.setdefault(int(k), {"train": [], "test": []})[part] = [i for i in ids if i]
    return folds


def _load_split(data: Path, ids: Sequence[str], sigma: float) -> Tuple[List[PairSample], Dict[str, float]]:
    samples, rates = [], {}
    for scene_id in ids:
        directory = data / "scenes" / scene_id
        if not directory.is_dir():
            raise CliError("data", f"scene directory {directory} is missing")
        _, bundles = read_scene(directory)
        samples.extend(pair_samples(scene_id, bundles, sigma))
        rates[scene_id] = scene_rate(bundles)
    return samples, rates


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out"] = args.out
    return cfg.with_overrides(**overrides) if overrides else cfg


def _data_dir(args, cfg: RunConfig) -> Path:
    return Path(args.data) if args.data else Path(cfg.out)


# -- commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    if args.seed is not None:
        cfg = cfg.with_overrides(data_seed=args.seed)
    out = Path(cfg.out)
    dataset = build_dataset(cfg)
    scenes_dir = out / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    for spec in dataset.scenes:
        write_scene(scenes_dir / spec.scene_id, spec, generate(spec))
    lines = []
    for fold in dataset.folds:
        for part, specs in (("train", fold.train), ("test", fold.test)):
            lines.append("\t".join(["fold", str(fold.index), part] + [s.scene_id for s in specs]))
    (out / SPLITS_FILE).write_bytes(("\n".join(lines) + "\n" if lines else "").encode("ascii"))
    # the output location is left out so that identical datasets are byte-identical wherever they land
    manifest = [line for line in format_config(cfg).split("\n") if not line.startswith("out=")]
    (out / DATASET_FILE).write_bytes("\n".join(manifest).encode("ascii"))
    inventory = Counter((s.density_band, s.speed_band) for s in dataset.scenes)
    print(f"{len(dataset.scenes)} scenes written to {scenes_dir}")
    for (dband, sband), n in sorted(inventory.items()):
        print(f"  density {dband:>6}  speed {sband:>4}  {n}")
    for fold in dataset.folds:
        print(f"  fold {fold.index}: {len(fold.train)} train / {len(fold.test)} test")
    return 0


def _checkpoint_entries(net: CountingNet, opt: Adam, epoch: int, fold: int) -> "OrderedDict[str, np.ndarray]":
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict((n, t.data) for n, t in net.params.items())
    entries.update(opt.state())
    entries["train.epoch"] = np.array([epoch], dtype=np.float64)
    entries["train.fold"] = np.array([fold], dtype=np.float64)
    return entries


def _load_net(cfg: RunConfig, path) -> Tuple[CountingNet, "OrderedDict[str, np.ndarray]"]:
    try:
        entries = load_checkpoint(path)
        net_cfg = cfg.net_config()
        return CountingNet(net_cfg, params_from_entries(net_cfg, entries)), entries
    except FileNotFoundError as exc:
        raise CliError("checkpoint", f"cannot read {exc.filename}") from None
    except ValueError as exc:
        raise CliError("checkpoint", str(exc)) from None


def cmd_train(args) -> int:
    cfg = _run_config(args)
    data = _data_dir(args, cfg)
    splits = _read_splits(data)
    if cfg.fold not in splits:
        raise CliError("data", f"fold {cfg.fold} not present in {data / SPLITS_FILE}")
    samples, _ = _load_split(data, splits[cfg.fold]["train"], cfg.sigma)
    if not samples:
        raise CliError("data", f"fold {cfg.fold} has no training pairs")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_bytes(format_config(cfg).encode("ascii"))

    start_epoch = 0
    if args.checkpoint:
        net, entries = _load_net(cfg, args.checkpoint[0])
        opt = Adam(net.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        try:
            opt.load_state(entries)
            start_epoch = int(entries["train.epoch"][0]) + 1
        except KeyError as exc:
            raise CliError("checkpoint", f"checkpoint lacks optimizer state entry {exc}") from None
        log = open(out / LOG_FILE, "ab")
    else:
        net = CountingNet(cfg.net_config())
        opt = Adam(net.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        log = open(out / LOG_FILE, "wb")
        log.write(LOG_HEADER.encode("ascii"))

    def on_step(step, report):
        vals = report.values()
        row = [str(step)] + [repr(float(vals[k])) for k in ("l_flow", "l_cycle", "l_depth", "total")]
        log.write(("\t".join(row) + "\n").encode("ascii"))

    def on_epoch(epoch, opt_):
        log.flush()
        path = out / f"epoch_{epoch:03d}.ckpt"
        save_checkpoint(path, _checkpoint_entries(net, opt_, epoch, cfg.fold), cfg.precision)
        print(f"epoch {epoch}: wrote {path}")

    try:
        fit(net, samples, cfg.epochs, seed=cfg.seed, opt=opt, start_epoch=start_epoch,
            on_step=on_step, on_epoch=on_epoch, augment_data=cfg.augment)
    except NonFiniteLoss as exc:
        raise CliError("nonfinite_loss", str(exc)) from None
    finally:
        log.close()
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    if not args.checkpoint:
        raise CliError("usage", "eval needs at least one --checkpoint")
    data = _data_dir(args, cfg)
    splits = _read_splits(data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    for path in args.checkpoint:
        net, entries = _load_net(cfg, path)
        fold = int(entries["train.fold"][0]) if "train.fold" in entries else cfg.fold
        if fold not in splits:
            raise CliError("data", f"fold {fold} not present in {data / SPLITS_FILE}")
        samples, rates = _load_split(data, splits[fold]["test"], cfg.sigma)
        if not samples:
            raise CliError("data", f"fold {fold} has no test pairs")
        records = evaluate(net, samples)
        write_results(out / f"results_fold{fold}.tsv", records)
        summary = summarize_fold(records, rates, fold)
        summaries.append(summary)
        print(f"fold {fold} ({path})")
        print(format_table(summary))
    if len(summaries) > 1:
        print(f"mean ± std over {len(summaries)} folds")
        table = format_table(aggregate_folds(summaries))
        print(table)
    else:
        table = format_table(summaries[0])
    (out / "summary.txt").write_bytes((table + "\n").encode("utf-8"))
    return 0


def _scene_dir(args, cfg: RunConfig) -> Path:
    path = Path(args.scene)
    if not path.is_dir():
        path = _data_dir(args, cfg) / "scenes" / args.scene
    if not path.is_dir():
        raise CliError("data", f"scene {args.scene} not found")
    return path


def cmd_render(args) -> int:
    cfg = _run_config(args)
    scene_dir = _scene_dir(args, cfg)
    _, bundles = read_scene(scene_dir)
    if not 1 <= args.frame < len(bundles):
        raise CliError("usage", f"frame must be in 1..{len(bundles) - 1} (the pair needs a previous frame)")
    sample = pair_samples(scene_dir.name, bundles, cfg.sigma)[args.frame - 1]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    maps = {"gt": sample.gt.numpy()}
    if args.checkpoint:
        net, _ = _load_net(cfg, args.checkpoint[0])
        result = net.forward_pair(sample.prev, sample.cur, sample.flow_fwd)
        maps["pred"] = result.density.numpy()
        if result.depth is not None:
            maps["depth"] = result.depth.data[0, 0]
    for name, values in maps.items():
        write_dmap(out / f"{name}.dmap", values)
        write_ppm(out / f"{name}.ppm", heat_image(values))
    line = f"frame {args.frame}: true {sample.true_count:.0f}  gt mass {maps['gt'].sum():.3f}"
    if "pred" in maps:
        line += f"  predicted {maps['pred'].sum():.3f}"
    print(line)
    return 0


def cmd_motion_profile(args) -> int:
    cfg = _run_config(args)
    scene_dir = _scene_dir(args, cfg)
    _, bundles = read_scene(scene_dir)
    rows = []
    for k, b in enumerate(bundles):
        rate = motion_rate(b.flow_to_next)
        rows.append(f"{k}\t{rate:.4f}\t{classify_speed(rate)}")
    overall = scene_rate(bundles)
    print("frame\trate\tclass")
    print("\n".join(rows))
    print(f"scene\t{overall:.4f}\t{classify_speed(overall)}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
    "motion-profile": cmd_motion_profile,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="densityflow", description="Density-flow counting on synthetic video.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=_u64, help="overrides the configured seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", action="append", default=[],
                       help="checkpoint path; repeat for multi-fold eval")
        if name != "synth":
            p.add_argument("--data", help="directory written by synth (default: --out)")
        if name in ("render", "motion-profile"):
            p.add_argument("--scene", required=True, help="scene id or scene directory")
        if name == "render":
            p.add_argument("--frame", type=int, required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except CliError as exc:
        code, message = exc.code, str(exc)
    except ConfigError as exc:
        code, message = "config", str(exc)
    except OSError as exc:
        code, message = "io", f"{exc.filename}: {exc.strerror}" if exc.filename else str(exc)
    except ValueError as exc:
        code, message = "data", str(exc)
    print(f"ERROR:{code}:{' '.join(message.split())}", file=sys.stderr)
    return 2 if code == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
