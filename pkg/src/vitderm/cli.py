"""Command-line entry point: ``vitderm <subcommand> ...``.

Exit codes: 0 success, 1 data/config/model errors, 2 usage errors.
Every subcommand writes one JSON run manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .attention import attention_rollout, render_heatmap, write_attention
from .augment import augment_class_balance
from .config import ResolvedConfig, format_model_config, parse_pairs, read_config_file, read_model_config
from .data import CLASSES, cleanse, load_metadata, split, stats_report
from .errors import ConfigurationError, DataError, VitDermError
from .evaluation import accuracy_percent, confusion_matrix, predict_classes, report, write_reports
from .imageio import IMAGE_EXTENSIONS, find_image, load_image
from .manifest import build_manifest, load_split, read_manifest, write_manifest
from .model import ViTConfig, ViTModel, init_weights
from .training import evaluate, train
from .weights import load_weights, save_weights

logger = logging.getLogger("vitderm")

SPLIT_FILE = "split.txt"


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict[str, object] = field(default_factory=dict)
    seed: Optional[int] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    version: str = __version__
    started: str = ""
    finished: str = ""
    details: Dict[str, object] = field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        self.finished = _now()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _abs(p) -> str:
    return str(Path(p).resolve())


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _resolve(args) -> ResolvedConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    cli = parse_pairs(getattr(args, "set", None) or [], "--set")
    for key in ("model", "seed", "epochs", "batch_size", "optimizer", "learning_rate"):
        value = getattr(args, key, None)
        if value is not None:
            cli[key] = str(value)
    return ResolvedConfig(file_values, cli)


def _sidecar(ckpt) -> Path:
    return Path(str(ckpt) + ".cfg")


def save_checkpoint(model: ViTModel, path) -> None:
    save_weights(model, path)
    _sidecar(path).write_text(format_model_config(model.config), encoding="utf-8")


def load_checkpoint(path, fallback: Optional[ResolvedConfig] = None) -> ViTModel:
    """Load weights using the ``<path>.cfg`` sidecar (or ``fallback`` when absent)."""
    side = _sidecar(path)
    if side.is_file():
        config = read_model_config(side)
    elif fallback is not None:
        config = fallback.model_config()
    else:
        raise ConfigurationError(f"no model config sidecar {side} for checkpoint {path}")
    return load_weights(path, config)


def _image_dir(args, manifest_path) -> Path:
    if getattr(args, "images", None):
        return Path(args.images)
    prep = Path(manifest_path).parent / "prepare.manifest.json"
    if prep.is_file():
        images = json.loads(prep.read_text(encoding="utf-8")).get("inputs", {}).get("images")
        if images:
            return Path(images)
    raise ConfigurationError("--images is required (no prepare manifest next to the split file)")


def _add_config_flags(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    if seed:
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_prepare(args, man: RunManifest) -> int:
    cfg = _resolve(args)
    seed = int(cfg.values["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = load_metadata(args.metadata)
    kept = cleanse(records, drop_unknown_localization=bool(cfg.values["drop_unknown_localization"]))
    parts = split(kept, cfg.split_ratios(), seed=seed)
    if args.images:
        missing = []
        for r in kept:
            try:
                find_image(args.images, r.image_id)
            except DataError:
                missing.append(r.image_id)
        if missing:
            raise DataError(f"{len(missing)} images missing from {args.images}, e.g. {missing[:3]}")
    synthetic = []
    if cfg.values["augment"]:
        synthetic = augment_class_balance(parts.train, cfg.values["augment_target"], seed=seed)
    entries = build_manifest(parts, synthetic)
    split_path = out / SPLIT_FILE
    write_manifest(split_path, entries)

    n_train, n_val, n_test = parts.sizes()
    print(f"records: {len(records)} read, {len(kept)} after cleansing")
    print(f"split: train={n_train} (+{len(synthetic)} synthetic) val={n_val} test={n_test}")
    print(f"wrote {split_path}")
    man.config, man.seed = cfg.snapshot(), seed
    man.inputs = {"metadata": _abs(args.metadata), **({"images": _abs(args.images)} if args.images else {})}
    man.outputs = {"split": _abs(split_path)}
    man.details = {"records": len(records), "cleansed": len(kept), "train": n_train, "val": n_val,
                   "test": n_test, "synthetic": len(synthetic)}
    man.write(out / "prepare.manifest.json")
    return 0


def cmd_stats(args, man: RunManifest) -> int:
    records = load_metadata(args.metadata)
    if not args.raw:
        records = cleanse(records, drop_unknown_localization=args.drop_unknown_localization)
    text = stats_report(records).to_text()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    man.inputs = {"metadata": _abs(args.metadata)}
    man.outputs = {"report": _abs(out)}
    man.details = {"records": len(records), "cleansed": not args.raw}
    man.write(str(out) + ".manifest.json")
    return 0


def _load_train_val(args, cfg: ViTConfig):
    entries = read_manifest(args.manifest)
    images = _image_dir(args, args.manifest)
    tr = load_split(entries, "train", images, cfg.image_size)
    va = load_split(entries, "val", images, cfg.image_size)
    return entries, images, argparse.Namespace(train=tr, val=va)


def _train_one(resolved: ResolvedConfig, data, out: Path, init=None, backbone_only=False, timing=False):
    model_cfg = resolved.model_config()
    train_cfg = resolved.train_config()
    if init:
        model = load_weights(init, model_cfg, backbone_only=backbone_only, seed=train_cfg.seed)
    else:
        model = init_weights(model_cfg, seed=train_cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    best = out / "best.vitw"
    model, best_path, history = train(model, data, train_cfg, checkpoint_path=best)
    if best_path is not None:
        _sidecar(best).write_text(format_model_config(model_cfg), encoding="utf-8")
    final = out / "final.vitw"
    save_checkpoint(model, final)
    history_path = out / "history.csv"
    history.to_csv(history_path, include_seconds=timing)
    return model, best_path, final, history_path, history


def cmd_train(args, man: RunManifest) -> int:
    resolved = _resolve(args)
    out = Path(args.out)
    _, images, data = _load_train_val(args, resolved.model_config())
    _, best, final, history_path, history = _train_one(resolved, data, out, args.init, args.backbone_only,
                                                       args.timing)
    last = history.epochs[-1]
    print(f"trained {len(history)} epochs; final val_acc={last.val_acc:.4f}; "
          f"best val_acc={history.best_val_acc} at epoch {history.best_epoch}")
    for w in history.warnings:
        print(f"warning: {w}", file=sys.stderr)
    man.config, man.seed = resolved.snapshot(), int(resolved.values["seed"])
    man.inputs = {"manifest": _abs(args.manifest), "images": _abs(images),
                  **({"init": _abs(args.init)} if args.init else {})}
    man.outputs = {"history": _abs(history_path), "final": _abs(final), **({"best": best} if best else {})}
    man.details = {"epoch_seconds": history.column("seconds"), "best_epoch": history.best_epoch,
                   "stopped_early": history.stopped_early, "warnings": history.warnings}
    man.write(out / "train.manifest.json")
    return 0


def cmd_eval(args, man: RunManifest) -> int:
    resolved = _resolve(args) if (args.config or args.set) else None
    model = load_checkpoint(args.model, resolved)
    entries = read_manifest(args.manifest)
    images = _image_dir(args, args.manifest)
    data = load_split(entries, args.split, images, model.config.image_size)
    if len(data) == 0:
        raise DataError(f"split {args.split!r} is empty in {args.manifest}")
    probs = model.predict_proba(data.images, args.batch_size)
    cm = confusion_matrix(predict_classes(probs), data.labels)
    text = report(cm, model_name=args.name or model.config.name)
    paths = write_reports(cm, args.out)
    sys.stdout.write(text)
    man.inputs = {"model": _abs(args.model), "manifest": _abs(args.manifest), "images": _abs(images)}
    man.outputs = {k: _abs(v) for k, v in paths.items()}
    man.details = {"split": args.split, "n": len(data), "accuracy": accuracy_percent(cm)}
    man.write(Path(args.out) / "eval.manifest.json")
    return 0


def _collect_images(paths: Sequence[str]) -> List[Path]:
    found: List[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            found += sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_EXTENSIONS)
        elif p.is_file():
            found.append(p)
        else:
            raise DataError(f"no such image or directory: {p}")
    if not found:
        raise DataError("no input images")
    return found


def cmd_predict(args, man: RunManifest) -> int:
    model = load_checkpoint(args.model)
    files = _collect_images(args.inputs)
    size = model.config.image_size
    images = np.stack([load_image(f, size) for f in files]).astype(np.float32)
    probs = model.predict_proba(images, args.batch_size)
    preds = predict_classes(probs)
    lines = ["image_id," + ",".join(CLASSES) + ",predicted"]
    for f, row, k in zip(files, probs, preds):
        lines.append(f.stem + "," + ",".join(f"{float(v):.6f}" for v in row) + "," + CLASSES[k])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(files)} predictions to {out}")
    man.inputs = {"model": _abs(args.model), "images": [_abs(f) for f in files]}  # type: ignore[dict-item]
    man.outputs = {"predictions": _abs(out)}
    man.write(str(out) + ".manifest.json")
    return 0


def cmd_attention(args, man: RunManifest) -> int:
    model = load_checkpoint(args.model)
    files = _collect_images(args.inputs)
    out = Path(args.out)
    written = {}
    for f in files:
        img = load_image(f, model.config.image_size)
        _, records = model.forward(img[None].astype(np.float32), capture_attention=True)
        amap = attention_rollout(records[0], mode=args.mode, layer=args.layer, head=args.head)
        overlay, raw = render_heatmap(amap, img, args.alpha)
        ppm, pgm = write_attention(out, f.stem, overlay, raw)
        written[f.stem] = [_abs(ppm), _abs(pgm)]
    print(f"wrote attention maps for {len(files)} images to {out}")
    man.inputs = {"model": _abs(args.model)}
    man.outputs = {k: ";".join(v) for k, v in written.items()}
    man.details = {"mode": args.mode, "layer": args.layer, "head": args.head, "alpha": args.alpha}
    man.write(out / "attention.manifest.json")
    return 0


ABLATION_COLUMNS = ("Config", "Batch Size", "Epochs", "Neurons", "Activation", "L2 Regularization",
                    "Dropout Layer", "LR Scheduler", "ReduceLR On Plateau", "Optimizer", "Accuracy")


def _ablation_row(name: str, resolved: ResolvedConfig, acc: str) -> List[str]:
    m, t = resolved.model_config(), resolved.train_config()
    yn = lambda flag: "yes" if flag else "x"  # noqa: E731
    return [name, str(t.batch_size), str(t.epochs), str(m.head_neurons), m.head_activation.upper(),
            yn(t.l2_lambda > 0 or m.l2_lambda > 0), yn(m.dropout_rate > 0), yn(t.lr_policy == "scheduler"),
            yn(t.lr_policy == "plateau"), t.optimizer.upper(), acc]


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = lambda r: "  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]) + "\n"


def cmd_ablate(args, man: RunManifest) -> int:
    out = Path(args.out)
    entries = read_manifest(args.manifest)
    images = _image_dir(args, args.manifest)
    cli = parse_pairs(args.set or [], "--set")
    if args.seed is not None:
        cli["seed"] = str(args.seed)
    rows, runs = [], {}
    for cfg_path in args.configs:
        name = Path(cfg_path).stem
        resolved = ResolvedConfig(read_config_file(cfg_path), cli)
        model_cfg = resolved.model_config()
        data = argparse.Namespace(train=load_split(entries, "train", images, model_cfg.image_size),
                                  val=load_split(entries, "val", images, model_cfg.image_size))
        model, best, *_ = _train_one(resolved, data, out / name)
        if best is not None:
            model = load_weights(best, model_cfg)
        evald = load_split(entries, args.split, images, model_cfg.image_size)
        _, acc, probs = evaluate(model, evald)
        cm = confusion_matrix(predict_classes(probs), evald.labels)
        rows.append(_ablation_row(name, resolved, accuracy_percent(cm)))
        runs[name] = {"config": resolved.snapshot(), "accuracy": acc}
        logger.info("ablate %s: %s", name, accuracy_percent(cm))
    table = format_table(ABLATION_COLUMNS, rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    (out / "ablation.csv").write_text("\n".join(",".join(r) for r in [list(ABLATION_COLUMNS)] + rows) + "\n",
                                      encoding="utf-8")
    sys.stdout.write(table)
    man.seed = args.seed
    man.inputs = {"manifest": _abs(args.manifest), "images": _abs(images),
                  **{Path(c).stem: _abs(c) for c in args.configs}}
    man.outputs = {"table": _abs(out / "ablation.txt"), "csv": _abs(out / "ablation.csv")}
    man.details = {"split": args.split, "runs": runs}
    man.write(out / "ablate.manifest.json")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitderm", description="Vision Transformer skin-lesion pipeline.")
    parser.add_argument("--version", action="version", version=f"vitderm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("prepare", help="cleanse, split and plan augmentation; writes split.txt")
    p.add_argument("--metadata", required=True)
    p.add_argument("--images", help="image directory (checked for completeness)")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("stats", help="exploratory statistics of the metadata")
    p.add_argument("--metadata", required=True)
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--raw", action="store_true", help="skip cleansing")
    p.add_argument("--drop-unknown-localization", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model; writes history.csv and checkpoints")
    p.add_argument("--manifest", required=True, help="split file from prepare")
    p.add_argument("--images", help="image directory (default: from the prepare manifest)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model", help="config preset (L16, L32, B16, B32, tiny)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--init", help="VITW weights to start from")
    p.add_argument("--backbone-only", action="store_true", help="with --init: fresh head")
    p.add_argument("--timing", action="store_true", help="add wall-clock seconds to history.csv")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confusion matrix and accuracy/recall report")
    p.add_argument("--model", required=True, help="checkpoint (.vitw with .cfg sidecar)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--images")
    p.add_argument("--out", default="eval_out", help="output directory")
    p.add_argument("--name", help="row label in the comparison table")
    p.add_argument("--batch-size", type=int, default=32)
    _add_config_flags(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="class probabilities for image files")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="CSV file")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attention", help="attention heatmaps (<id>.attn.ppm / .pgm)")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=("rollout", "last"), default="rollout")
    p.add_argument("--layer", type=int)
    p.add_argument("--head", type=int)
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("ablate", help="train each config and tabulate accuracies")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--images")
    p.add_argument("--split", default="test", choices=("val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


@contextlib.contextmanager
def _thread_limit():
    raw = os.environ.get("VITDERM_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigurationError(f"VITDERM_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    man = RunManifest(command=args.command, argv=argv, started=_now())
    try:
        with _thread_limit():
            return args.func(args, man)
    except (VitDermError, ValueError, OSError) as exc:
        print(f"vitderm {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
