"""Command-line entry point: ``cephreg <command> [options]``.

Every command writes into one run directory (``runs/<timestamp>-<config hash>``
unless ``--out`` is given) together with a ``manifest.json`` holding the
effective config, the seeds and sha256 checksums of inputs and outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, preset_names
from .dataset import (CephDataset, load_isbi, preprocess, scale_item, sha256_file, synth_generate,
                      write_annotation, write_dataset)
from .evaluation import EvalReport, crossval, evaluate, write_errors_csv, write_summary_csv
from .heatmap import Frame, LandmarkSet, save_heatmap
from .pipeline import infer, train_global, train_local
from .unet import UNet

log = logging.getLogger("cephreg")


class CliError(RuntimeError):
    pass


class Run:
    """Run directory plus the bookkeeping that ends up in its manifest."""

    def __init__(self, command: str, cfg: RunConfig, out: str | None, root: str = "runs"):
        self.command = command
        self.cfg = cfg
        if out is None:
            stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
            out = Path(root) / f"{stamp}-{cfg.digest()[:10]}"
        # created on first write so failed commands leave nothing behind
        self.dir = Path(out)
        self.inputs: dict[str, str] = {}
        self.seeds: dict[str, int] = {}

    def path(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add_input(self, role: str, path: Path) -> None:
        if not path.exists():
            raise CliError(f"{role}: {path} does not exist")
        self.inputs[role] = sha256_file(path)

    def finish(self) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        outputs = {}
        for p in sorted(self.dir.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                outputs[p.relative_to(self.dir).as_posix()] = sha256_file(p)
        manifest = {"command": self.command, "config": self.cfg.to_dict(), "config_sha256": self.cfg.digest(),
                    "seeds": self.seeds, "inputs": self.inputs, "outputs": outputs}
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


# ------------------------------------------------------------------ helpers


def _load_data(run: Run, data: str | None) -> CephDataset:
    if data is None:
        raise CliError("--data is required for this command")
    root = Path(data)
    if not root.exists():
        raise CliError(f"--data: {root} does not exist")
    cfg = run.cfg.data
    ds = load_isbi(root, cfg.annotators, cfg.num_landmarks)
    if (root / "manifest.json").exists():
        run.add_input("data", root / "manifest.json")
    if cfg.pixel_spacing is not None:
        ds.pixel_spacing = cfg.pixel_spacing
    if not ds.items:
        raise CliError(f"{root}: no usable items")
    return ds


def _split(ds: CephDataset, names: list[str], what: str) -> list:
    items = [it for it in ds.items if it.split in names]
    if not items:
        raise CliError(f"{what}: no items in splits {names}")
    return items


def _load_model(run: Run, role: str, path: str | None) -> UNet:
    if path is None:
        raise CliError(f"--{role} checkpoint is required")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"--{role}: checkpoint {p} not found")
    run.add_input(role, p)
    return UNet.load(p)


def _stage_items(items, cfg: RunConfig, scale: float, frame: Frame):
    spec = cfg.preprocess_spec()
    return [scale_item(preprocess(it, spec), scale, frame) for it in items]


def _write_predictions(path: Path, preds: dict[str, LandmarkSet]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "landmark", "x", "y", "valid"])
        for item_id in sorted(preds):
            s = preds[item_id]
            for k, ((x, y), v) in enumerate(zip(s.points, s.valid)):
                w.writerow([item_id, k, f"{x:.6f}", f"{y:.6f}", int(v)])


def read_predictions(path) -> dict[str, LandmarkSet]:
    path = Path(path)
    if path.is_dir():
        path = path / "predictions.csv"
    if not path.is_file():
        raise CliError(f"predictions file {path} not found")
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["item_id"], []).append(row)
    out = {}
    for item_id, rs in rows.items():
        rs.sort(key=lambda r: int(r["landmark"]))
        pts = np.array([[float(r["x"]), float(r["y"])] for r in rs])
        valid = np.array([r["valid"] == "1" for r in rs])
        out[item_id] = LandmarkSet(pts, Frame.RAW, valid)
    return out


def _predict_items(items, gmodel: UNet, lmodel: UNet | None, cfg: RunConfig, run: Run | None = None,
                   dump: bool = False) -> dict[str, LandmarkSet]:
    crop = cfg.preprocess.crop_top
    preds = {}
    for it in items:
        image = it.image[crop:, :]
        res = infer(image, gmodel, lmodel, cfg.global_config(), cfg.local_config(), crop_top=crop,
                    mode=cfg.infer.mode, threshold=cfg.infer.threshold, all_channels=cfg.infer.all_channels)
        preds[it.id] = res.landmarks
        if run is not None:
            write_annotation(run.path(f"predictions/{it.id}.txt"), res.landmarks)
            if dump:
                save_heatmap(run.path(f"heatmaps/{it.id}.global.hm"), res.global_heatmaps)
                if res.merged_heatmaps is not None:
                    save_heatmap(run.path(f"heatmaps/{it.id}.merged.hm"), res.merged_heatmaps)
    return preds


def _print_report(label: str, report: EvalReport) -> None:
    sdr = "  ".join(f"SDR@{t:g} {v:6.2f}%" for t, v in report.sdr.items())
    print(f"{label}: n={report.count} invalid={report.n_invalid} MRE {report.mre:.4f} +- {report.std:.4f}  {sdr}")


# ----------------------------------------------------------------- commands


def cmd_synth(run: Run, args) -> None:
    s = run.cfg.synth
    run.seeds["synth"] = run.cfg.seed
    ds = synth_generate(run.cfg.seed, s.count, s.canvas, s.num_landmarks, s.test_fraction)
    write_dataset(ds, run.dir / "dataset")
    print(f"wrote {len(ds)} synthetic items to {run.dir / 'dataset'}")


def cmd_train_global(run: Run, args) -> None:
    cfg = run.cfg
    ds = _load_data(run, args.data)
    items = _stage_items(_split(ds, cfg.data.train_splits, "train-global"), cfg,
                         cfg.preprocess.global_scale, Frame.GLOBAL)
    run.seeds["global"] = cfg.seed
    model, history = train_global(items, cfg.global_config(), cfg.seed, cfg.loss_config(), source=cfg.data.source)
    model.save(run.path("global.ckpt"), extra={"stage": "global", "seed": cfg.seed})
    history.to_csv(run.path("global_loss.csv"))
    print(f"global stage: loss {history.train_loss[0]:.4f} -> {history.train_loss[-1]:.4f}")


def cmd_train_local(run: Run, args) -> None:
    cfg = run.cfg
    ds = _load_data(run, args.data)
    items = _stage_items(_split(ds, cfg.data.train_splits, "train-local"), cfg,
                         cfg.preprocess.local_scale, Frame.LOCAL)
    run.seeds["local"] = cfg.seed + 1
    model, history = train_local(items, cfg.local_config(), cfg.seed + 1, cfg.loss_config(), source=cfg.data.source)
    model.save(run.path("local.ckpt"), extra={"stage": "local", "seed": cfg.seed + 1})
    history.to_csv(run.path("local_loss.csv"))
    print(f"local stage: loss {history.train_loss[0]:.4f} -> {history.train_loss[-1]:.4f}")


def cmd_infer(run: Run, args) -> None:
    cfg = run.cfg
    ds = _load_data(run, args.data)
    items = _split(ds, cfg.data.test_splits, "infer")
    gmodel = _load_model(run, "global", args.global_ckpt)
    lmodel = None if cfg.infer.mode == "stage1" else _load_model(run, "local", args.local_ckpt)
    preds = _predict_items(items, gmodel, lmodel, cfg, run, cfg.infer.dump_heatmaps)
    _write_predictions(run.path("predictions.csv"), preds)
    print(f"{cfg.infer.mode}: predicted {len(preds)} items")


def cmd_eval(run: Run, args) -> None:
    cfg = run.cfg
    ds = _load_data(run, args.data)
    if args.predictions is None:
        raise CliError("--predictions is required")
    pred_path = Path(args.predictions)
    if pred_path.is_dir():
        pred_path = pred_path / "predictions.csv"
    run.add_input("predictions", pred_path)
    preds = read_predictions(pred_path)
    truths = {it.id: it.ground_truth(cfg.eval.source) for it in ds.items if it.id in preds}
    if not truths:
        raise CliError("no predicted item matches the dataset")
    report = evaluate(preds, truths, ds.pixel_spacing, cfg.eval.thresholds)
    write_summary_csv(run.path("summary.csv"), [(cfg.infer.mode, report)])
    write_errors_csv(run.path("errors.csv"), report)
    _print_report("eval", report)


def cmd_crossval(run: Run, args) -> None:
    cfg = run.cfg
    ds = _load_data(run, args.data)
    gcfg, lcfg, loss_cfg = cfg.global_config(), cfg.local_config(), cfg.loss_config()
    src = cfg.crossval.source
    run.seeds.update({"folds": cfg.seed, "global": cfg.seed, "local": cfg.seed + 1})

    def train_fn(train_items, fold):
        g_items = _stage_items(train_items, cfg, cfg.preprocess.global_scale, Frame.GLOBAL)
        gm, glog = train_global(g_items, gcfg, cfg.seed, loss_cfg, source=src)
        glog.to_csv(run.path(f"fold{fold}/global_loss.csv"))
        gm.save(run.path(f"fold{fold}/global.ckpt"), extra={"stage": "global", "fold": fold})
        lm = None
        if cfg.infer.mode != "stage1":
            l_items = _stage_items(train_items, cfg, cfg.preprocess.local_scale, Frame.LOCAL)
            lm, llog = train_local(l_items, lcfg, cfg.seed + 1, loss_cfg, source=src)
            llog.to_csv(run.path(f"fold{fold}/local_loss.csv"))
            lm.save(run.path(f"fold{fold}/local.ckpt"), extra={"stage": "local", "fold": fold})
        return gm, lm

    def infer_fn(models, test_items):
        return _predict_items(test_items, models[0], models[1], cfg)

    result = crossval(ds.items, cfg.crossval.folds, train_fn, infer_fn, lambda it: it.ground_truth(src),
                      ds.pixel_spacing, cfg.seed, cfg.eval.thresholds)
    rows = [(f"fold{f}", r) for f, r in enumerate(result.reports)] + [("pooled", result.pooled)]
    write_summary_csv(run.path("summary.csv"), rows)
    write_errors_csv(run.path("errors.csv"), result.pooled)
    run.path("folds.json").write_text(json.dumps({"seed": cfg.seed, "folds": result.folds}, indent=2) + "\n")
    for label, r in rows:
        _print_report(label, r)


HANDLERS = {"synth": cmd_synth, "train-global": cmd_train_global, "train-local": cmd_train_local,
            "infer": cmd_infer, "eval": cmd_eval, "crossval": cmd_crossval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cephreg", description="Two-stage heatmap landmark detection.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--preset", help=f"built-in config preset ({', '.join(preset_names())})")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field by dotted path, e.g. global.epochs=5")
    common.add_argument("--seed", type=int, help="global seed (same as --set seed=N)")
    common.add_argument("--out", help="run directory (default runs/<timestamp>-<config hash>)")
    common.add_argument("--runs-root", default="runs", help="parent of generated run directories")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write a procedural dataset")
    for name in ("train-global", "train-local"):
        p = sub.add_parser(name, parents=[common], help=f"fit the {name[6:]} stage")
        p.add_argument("--data", help="dataset directory")
    p = sub.add_parser("infer", parents=[common], help="predict landmarks on the test splits")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--global", dest="global_ckpt", help="global-stage checkpoint")
    p.add_argument("--local", dest="local_ckpt", help="local-stage checkpoint")
    p.add_argument("--mode", choices=("full", "no-expand", "stage1"), help="inference mode")
    p.add_argument("--dump-heatmaps", action="store_true", help="also write global/merged heatmaps")
    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--predictions", help="predictions.csv or an infer run directory")
    p = sub.add_parser("crossval", parents=[common], help="k-fold cross-validation of both stages")
    p.add_argument("--data", help="dataset directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "mode", None):
        overrides.append(f"infer.mode={args.mode}")
    if getattr(args, "dump_heatmaps", False):
        overrides.append("infer.dump_heatmaps=true")
    try:
        cfg = load_config(args.config, args.preset, overrides)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run = Run(args.command, cfg, args.out, args.runs_root)
    try:
        HANDLERS[args.command](run, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    manifest = run.finish()
    print(f"run directory: {run.dir}  (manifest sha256 {hashlib.sha256(manifest.read_bytes()).hexdigest()[:12]})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
