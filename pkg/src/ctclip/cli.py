"""``ctclip`` command line: train, eval, predict, explain, ablate, gradcheck, synth.

Exit codes: 0 success, 1 usage or config error, 2 data / format / IO error
(and a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, SyntheticSpec, load_run_config
from .data import Dataset, generate_synthetic, load_image_folder, read_pnm, resize_bilinear
from .data import write_image_folder
from .errors import ConfigError, CTClipError, DataError, FormatError, StateError

log = logging.getLogger("ctclip")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; this CLI reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def threads() -> int:
    """Worker cap from ``CT_FUSION_THREADS`` (default 1)."""
    raw = os.environ.get("CT_FUSION_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CT_FUSION_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("CT_FUSION_THREADS must be >= 1")
    return n


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config, strict=not args.lenient)
    train = cfg.train
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("seed", "seed"),
                      ("batch_size", "batch_size"), ("precision", "precision")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(train, key, value)
    cfg.validate()
    return cfg


def _dataset(cfg: RunConfig, args) -> Dataset:
    size = cfg.model.image_size
    root = args.data or cfg.data
    if root:
        ds = load_image_folder(root, size, workers=threads())
        if ds.skipped:
            log.warning("%d unreadable file(s) skipped", ds.skipped)
        return ds
    spec = cfg.synthetic
    if args.synthetic or spec is not None:
        spec = spec or SyntheticSpec()
        return generate_synthetic(spec.classes, spec.per_class, size, spec.seed)
    raise UsageError("no data: pass --data ROOT, --synthetic, or set data/synthetic in the config")


def _print_row(cols):
    print("\t".join(str(c) for c in cols))


# -- subcommands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .report import export_metrics, plot_confusion, plot_history, write_json
    from .training import build_model, evaluate, split_dataset, train_loop

    cfg = _config(args)
    ds = _dataset(cfg, args)
    out = _out_dir(args.out or cfg.out_dir)
    train_ds, test_ds = split_dataset(ds, cfg.train.split_ratio, cfg.train.seed)
    model = build_model(cfg, ds.class_names)
    t0 = time.perf_counter()
    history, state = train_loop(
        model, train_ds, test_ds, cfg.train,
        progress=lambda r: print(f"epoch {r['epoch']} loss {r['train_loss']:.4f} "
                                 f"acc {r['test_acc']:.4f}", file=sys.stderr))
    save_checkpoint(model, out / "model.ctcp", cfg, state)
    export_metrics(history, out / "history.csv")
    plot_history(history, out / "history.png")
    if len(test_ds):
        rep = evaluate(model, test_ds)
        write_json(rep.to_dict(), out / "metrics.json")
        plot_confusion(rep, out / "confusion.png")
        print(f"test_acc\t{rep.accuracy:.6g}")
    print(f"train_seconds\t{time.perf_counter() - t0:.6g}")
    print(f"checkpoint\t{out / 'model.ctcp'}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .report import plot_confusion, write_json
    from .training import evaluate

    model, _, cfg = load_checkpoint(args.checkpoint)
    ds = load_image_folder(args.data, cfg.model.image_size, workers=threads())
    if ds.class_names != model.class_names:
        raise DataError(f"dataset classes {ds.class_names} differ from the checkpoint's "
                        f"{model.class_names}")
    rep = evaluate(model, ds)
    out = _out_dir(args.out)
    write_json(rep.to_dict(), out / "metrics.json")
    plot_confusion(rep, out / "confusion.png")
    _print_row(["class", "precision", "recall", "f1"])
    for name, p, r, f in zip(model.class_names, rep.precision, rep.recall, rep.f1):
        _print_row([name, f"{p:.6g}", f"{r:.6g}", f"{f:.6g}"])
    _print_row(["accuracy", f"{rep.accuracy:.6g}", "", ""])
    return 0


def _image_paths(items) -> list:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(f for f in p.rglob("*") if f.suffix.lower() in
                                (".ppm", ".pgm", ".pnm")))
        elif p.exists():
            paths.append(p)
        else:
            raise DataError(f"no such image: {p}")
    if not paths:
        raise DataError("no images given")
    return paths


def _load_image(path, size) -> np.ndarray:
    return resize_bilinear(read_pnm(path), size, size)


def cmd_predict(args) -> int:
    from .checkpoint import load_checkpoint

    model, _, cfg = load_checkpoint(args.checkpoint)
    size = cfg.model.image_size
    paths = _image_paths(args.images)
    images = np.stack([_load_image(p, size) for p in paths])
    probs = model.predict(images)
    _print_row(["path", "class", "probability"])
    for p, row in zip(paths, probs):
        k = int(row.argmax())
        _print_row([p, model.class_names[k], f"{row[k]:.6g}"])
    return 0


def cmd_explain(args) -> int:
    from .checkpoint import load_checkpoint
    from .explain import attention_heatmap, export_heatmap, gradcam_heatmap
    from .report import plot_heatmap

    model, _, cfg = load_checkpoint(args.checkpoint)
    size = cfg.model.image_size
    out = _out_dir(args.out)
    _print_row(["path", "method", "class", "heatmap", "overlay"])
    for path in _image_paths(args.images):
        image = _load_image(path, size)
        if args.method == "attention":
            h = attention_heatmap(model, image)
            label = "-"
        else:
            k = args.class_index
            if k is None:
                k = int(model.predict(image[None])[0].argmax())
            h = gradcam_heatmap(model, image, k)
            label = model.class_names[k]
        stem = out / f"{Path(path).stem}_{args.method}"
        heat, over = export_heatmap(h, image, stem)
        if args.figures:
            plot_heatmap(h, image, stem.with_suffix(".png"))
        _print_row([path, args.method, label, heat, over])
    return 0


def cmd_ablate(args) -> int:
    from .report import export_metrics, plot_ablation
    from .training import ABLATIONS, run_ablation, split_dataset

    cfg = _config(args)
    ds = _dataset(cfg, args)
    train_ds, test_ds = split_dataset(ds, cfg.train.split_ratio, cfg.train.seed)
    out = _out_dir(args.out or cfg.out_dir)
    tables = list(ABLATIONS) if args.table == "all" else [args.table]
    for name in tables:
        ABLATIONS[name].configurations(cfg.toggles)  # fail fast before any training
    for name in tables:
        rows = run_ablation(cfg, ABLATIONS[name], train_ds, test_ds)
        export_metrics(rows, out / f"ablation_{name}.csv")
        plot_ablation(rows, out / f"ablation_{name}.png", title=name)
        _print_row(["table", "name", "acc", "precision", "recall", "f1"])
        for r in rows:
            _print_row([name, r["name"]] + [f"{r[c]:.6g}" for c in
                                            ("acc", "precision", "recall", "f1")])
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    t0 = time.perf_counter()
    results = run_suite(seeds=args.seeds, model_coords=args.coords)
    _print_row(["check", "max_rel_err"])
    for name, err in results.items():
        _print_row([name, f"{err:.3e}"])
    worst = max(results.values())
    _print_row(["max", f"{worst:.3e}"])
    print(f"seconds\t{time.perf_counter() - t0:.3g}")
    if worst >= GRADCHECK_TOL:
        print(f"gradcheck failed: {worst:.3e} >= {GRADCHECK_TOL:g}", file=sys.stderr)
        return 2
    return 0


def cmd_synth(args) -> int:
    ds = generate_synthetic(args.classes, args.per_class, args.size, args.seed)
    write_image_folder(ds, args.out)
    print(f"wrote {len(ds)} images in {ds.num_classes} classes to {args.out}")
    return 0


# -- parser -----------------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--config", help="JSON run config (missing keys take defaults)")
    p.add_argument("--lenient", action="store_true", help="warn on unknown config keys")
    p.add_argument("--data", help="dataset root laid out as ROOT/<class>/*.ppm")
    p.add_argument("--synthetic", action="store_true", help="use the procedural dataset")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ctclip", description="Dual-branch vision/text leaf disease classifier")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train, checkpoint and export history")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset folder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+", help="image files or directories")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="write heatmap and overlay PPMs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=("attention", "gradcam"), default="gradcam")
    p.add_argument("--class", dest="class_index", type=int,
                   help="Grad-CAM target class (default: predicted)")
    p.add_argument("--out", default=".")
    p.add_argument("--figures", action="store_true", help="also render a PNG per image")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="run an ablation table")
    _train_flags(p)
    p.add_argument("--table", choices=("modules", "affm", "feb", "all"), default="modules")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--coords", type=int, default=3, help="coordinates per micro-model tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write the synthetic dataset as class folders")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command is None:
        ap.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FormatError, StateError, CTClipError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:  # bad argument values, e.g. a class index out of range
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
