"""Command-line entry point: ``woundstage <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import datapipe as D
from . import explain as E
from . import fiberquant as F
from . import network as N
from . import synth
from . import trainer as TR
from .config import RunConfig, load_config
from .errors import DataError, NumericError, UsageError, WoundStageError

log = logging.getLogger("woundstage")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "seed": getattr(args, "seed", None),
        "paths.out": args.out,
        "model.preset": getattr(args, "preset", None),
        "model.input_size": getattr(args, "input_size", None),
        "train.learning_rate": getattr(args, "lr", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.freeze_blocks": getattr(args, "freeze_blocks", None),
        "train.optimizer": getattr(args, "optimizer", None),
        "explain.layer_id": getattr(args, "layer_id", None),
        "explain.class_id": getattr(args, "class_id", None),
        "explain.alpha": getattr(args, "alpha", None),
    }
    for key in ("h_lo", "h_hi", "s_min", "v_min", "sigma"):
        overrides[f"fiberquant.{key}"] = getattr(args, key, None)
    return cfg.override(overrides)


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{what} not found: {path}")
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_model(path) -> N.ModelGraph:
    return N.load_checkpoint(_require_file(path, "checkpoint"))


# --------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    result = synth.generate(args.kind, args.n_per_class, cfg.seed, out, size=args.size)
    print(f"wrote {len(result.manifest)} images; manifest {result.manifest_path}")
    return 0


def cmd_prepare(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    manifest = D.load_manifest(_require_file(args.manifest, "manifest"))
    split = D.stratified_split(manifest, seed=cfg.seed)
    paths = D.write_split(split, out, seed=cfg.seed)
    size = cfg.model.input_size or N.PRESETS[cfg.model.preset][2]
    balanced = D.prepare_training_set(split, out, size, seed=cfg.seed)
    D.write_manifest(balanced, out / "balanced_train.csv")
    summary = D.split_summary(split, cfg.seed)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["class", "train", "validation", "test", "augmented_train", "balanced_train"])
    for name, row in summary.items():
        w.writerow([name] + [row[k] for k in ("train", "validation", "test", "augmented_train", "balanced_train")])
    log.info("split manifests: %s", ", ".join(str(p) for p in paths.values()))
    return 0


def _arrays(manifest_path, size: int):
    manifest = D.load_manifest(_require_file(manifest_path, "manifest"))
    try:
        return D.load_arrays(manifest, size)
    except FileNotFoundError as exc:
        raise DataError(f"image listed in {manifest_path} not found: {exc.filename}") from None


def cmd_train(args, cfg: RunConfig) -> int:
    from . import plots

    out = _out_dir(cfg)
    if args.pretrained:
        base = _load_model(args.pretrained)
        model = N.finetune_surgery(base, cfg.train.freeze_blocks, num_classes=len(D.CLASSES), seed=cfg.seed)
    else:
        model = N.build_model(N.ModelConfig(cfg.model.preset, cfg.model.input_size), seed=cfg.seed)
        if cfg.train.freeze_blocks is not None:
            model = N.finetune_surgery(model, cfg.train.freeze_blocks, len(D.CLASSES), seed=cfg.seed)
    size = model.input_size
    train_set = _arrays(args.train, size)
    val_set = _arrays(args.val, size) if args.val else None
    hp = TR.HyperParams(learning_rate=cfg.train.learning_rate, epochs=cfg.train.epochs,
                        batch_size=cfg.train.batch_size, seed=cfg.seed,
                        freeze_blocks=cfg.train.freeze_blocks, optimizer=cfg.train.optimizer)
    model, history = TR.train(model, train_set, val_set, hp)
    N.save_checkpoint(model, out / "model.ckpt")
    history.to_csv(out / "history.csv")
    cfg.to_ini(out / "config.ini")
    if len(history):
        plots.training_curves(history, out / "curves.png")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "val_auc"])
    for r in history.records:
        w.writerow([r.epoch] + [f"{v:.6g}" for v in (r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.val_auc)])
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from . import plots

    out = _out_dir(cfg)
    model = _load_model(args.checkpoint)
    X, y = _arrays(args.manifest, model.input_size)
    report = TR.evaluate(model, X, y, D.CLASSES)
    report.to_json(out / "eval_report.json")
    plots.confusion_matrix(report, out / "confusion_matrix.png")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["class", "accuracy"])
    for name, acc in zip(D.CLASSES, report.per_class_acc):
        w.writerow([name, "absent" if acc is None else f"{acc:.4f}"])
    w.writerow(["mean", f"{report.mean_acc:.4f}"])
    w.writerow(["macro_auc", f"{report.macro_auc:.4f}"])
    return 0


def cmd_explain(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg) / "explain"
    model = _load_model(args.checkpoint)
    model = model.copy()
    for spec in model.layers:
        spec.trainable = True
    model._sync_trainable()
    manifest = D.load_manifest(_require_file(args.manifest, "manifest"))
    samples = list(manifest)[:args.limit] if args.limit else list(manifest)
    size = model.input_size
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["image", "class_id", "layer_id", "overlay"])
    for s in samples:
        path = _require_file(manifest.resolve(s), "image")
        rgb = D.resize_bilinear(D.read_rgb(path), size, size)
        x = D.normalize(rgb)
        amap = E.layercam(model, x, cfg.explain.class_id, cfg.explain.layer_id)
        gbp = E.guided_backprop(model, x, amap.class_id)
        saliency = E.fuse(amap, gbp)
        paths = E.write_explanation(out, Path(s.image_path).stem, rgb, amap, saliency, cfg.explain.alpha)
        w.writerow([s.image_path, amap.class_id, amap.layer_id, paths["overlay_png"]])
    return 0


def cmd_coherency(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    manifest = D.load_manifest(_require_file(args.manifest, "manifest"))
    q = cfg.fiberquant
    rows = []
    for s in manifest:
        path = _require_file(manifest.resolve(s), "image")
        try:
            c, frac = F.image_coherency(D.read_rgb(path), q.sigma, h_lo=q.h_lo, h_hi=q.h_hi,
                                        s_min=q.s_min, v_min=q.v_min)
        except F.DegenerateInputError as exc:
            raise DataError(f"{s.image_path}: {exc}") from None
        rows.append([s.image_path, s.label, repr(c), repr(frac)])
    target = out / "coherency.csv"
    with target.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "coherency", "masked_fraction"])
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {target}")
    return 0


def read_coherency_csv(path) -> Dict[str, List[float]]:
    groups: Dict[str, List[float]] = {}
    with _require_file(path, "coherency table").open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"label", "coherency"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns 'label' and 'coherency'")
        for lineno, row in enumerate(reader, start=2):
            try:
                groups.setdefault(row["label"], []).append(float(row["coherency"]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad coherency value {row['coherency']!r}") from None
    order = [c for c in D.CLASSES if c in groups] + sorted(set(groups) - set(D.CLASSES))
    return {name: groups[name] for name in order}


def cmd_stats(args, cfg: RunConfig) -> int:
    from . import plots

    out = _out_dir(cfg)
    groups = read_coherency_csv(args.coherency)
    stats = {name: F.group_stats(v) for name, v in groups.items()}
    F.write_group_stats(stats, out / "group_stats.csv")
    matrix = F.pvalue_matrix(groups)
    matrix.to_csv(out / "pvalues.csv")
    F.write_boxplot_json(stats, groups, out / "boxplot.json")
    plots.coherency_boxplot(stats, groups, out / "boxplot.png")
    sys.stdout.write((out / "group_stats.csv").read_text())
    sys.stdout.write((out / "pvalues.csv").read_text())
    return 0


COMMANDS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
    "explain": cmd_explain, "coherency": cmd_coherency, "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="woundstage", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI run configuration; flags override it")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        return p

    p = add("synth", "generate a synthetic dataset (not real tissue)")
    p.add_argument("--kind", choices=("source", "target"), required=True)
    p.add_argument("--n-per-class", type=int, default=60)
    p.add_argument("--size", type=int, default=64)

    p = add("prepare", "stratified split, x12 augmentation and oversampling")
    p.add_argument("--manifest", required=True)
    p.add_argument("--preset", choices=sorted(N.PRESETS))
    p.add_argument("--input-size", type=int)

    p = add("train", "train or fine-tune a model")
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--val", help="validation manifest")
    p.add_argument("--pretrained", help="checkpoint to fine-tune (head replaced, blocks frozen)")
    p.add_argument("--preset", choices=sorted(N.PRESETS))
    p.add_argument("--input-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--freeze-blocks", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))

    p = add("eval", "confusion matrix, per-class accuracy and macro AUC")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)

    p = add("explain", "LayerCAM, guided backpropagation and fused overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer-id", type=int)
    p.add_argument("--class-id", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--limit", type=int, help="explain only the first N images")

    p = add("coherency", "collagen orientation coherency per image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--h-lo", dest="h_lo", type=float, help="lowest collagen hue, degrees")
    p.add_argument("--h-hi", dest="h_hi", type=float, help="highest collagen hue, degrees")
    p.add_argument("--s-min", dest="s_min", type=float, help="minimum saturation")
    p.add_argument("--v-min", dest="v_min", type=float, help="minimum value")
    p.add_argument("--sigma", type=float, help="structure-tensor smoothing, pixels")

    p = add("stats", "group statistics, Welch p-values and box plots")
    p.add_argument("--coherency", required=True, help="CSV written by the coherency command")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except WoundStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, FloatingPointError) as exc:
        code = NumericError.exit_code if isinstance(exc, FloatingPointError) else UsageError.exit_code
        print(f"error: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
