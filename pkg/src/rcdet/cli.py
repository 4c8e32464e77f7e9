"""``rcdet`` command-line tool: gen, train, eval, ablate, detect, bench.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Every command that takes ``--out`` finishes by writing ``manifest.json``
there, listing each file the command created.
"""
import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .cafm import ConfigError
from .config import load_config
from .data import IMAGE_SUFFIXES, LabelError, image_to_tensor, load_dataset, read_split, synth_generate
from .detector import (
    CLASS_NAMES,
    VARIANTS,
    CheckpointError,
    build_model,
    count_params_flops,
    load_checkpoint,
    measure_fps,
)
from .training import TrainingError, evaluate_model, predict, seed_everything, train

log = logging.getLogger("rcdet")

ABLATION_COLUMNS = ["variant", "precision", "recall", "map50", "map50_95", "params", "gflops"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# helpers


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _resolve_seed(arg):
    if arg is not None:
        return arg
    env = os.environ.get("RCDET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"RCDET_SEED must be an integer, got {env!r}") from None
    return None


def _write_atomic(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_manifest(out_dir, command, started, outputs, config=None, seed=None, status="ok", extra=None):
    """Atomically write manifest.json; every listed path must exist."""
    out_dir = Path(out_dir)
    rel = sorted({str(Path(p).resolve().relative_to(out_dir.resolve())) for p in outputs})
    missing = [p for p in rel if not (out_dir / p).exists()]
    if missing:
        raise RuntimeError(f"manifest would name missing files: {missing}")
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "outputs": rel,
        "status": status,
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    _write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_config(args, variant=None):
    overrides = _overrides(getattr(args, "set", None))
    if variant is not None:
        cafm, rcm = VARIANTS[variant]
        overrides.update(use_cafm=cafm, use_rcm=rcm)
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    seed = _resolve_seed(getattr(args, "seed", None))
    if seed is not None:
        overrides["seed"] = seed
    return load_config(getattr(args, "config", None), overrides, getattr(args, "preset", None))


def _split_items(root, num_classes, val_root=None):
    """(train, val) items: explicit val dir, else split.txt sections, else everything trains."""
    items = load_dataset(root, num_classes)
    if not items:
        raise FileNotFoundError(f"no images found under {root}")
    if val_root is not None:
        return items, load_dataset(val_root, num_classes)
    split_file = Path(root) / "split.txt"
    if split_file.exists():
        sections = read_split(split_file)
        by_stem = {it.source_id: it for it in items}
        return [by_stem[s] for s in sections["train"] if s in by_stem], [by_stem[s] for s in sections["val"] if s in by_stem]
    return items, []


def _select(root, num_classes, split):
    items = load_dataset(root, num_classes)
    if split == "all":
        return items
    sections = read_split(Path(root) / "split.txt")
    keep = set(sections[split])
    return [it for it in items if it.source_id in keep]


def _train_one(rc, train_items, val_items, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(rc.train.seed)
    model = build_model(rc.model)
    (out_dir / "config.txt").write_text(rc.to_text())
    t0 = time.perf_counter()
    history = train(model, train_items, val_items, rc.train, out_dir)
    elapsed = time.perf_counter() - t0
    files = [out_dir / "config.txt", out_dir / "metrics.csv", out_dir / "last.pt", out_dir / "best.pt"]
    return model, history, elapsed, files


# --------------------------------------------------------------------------
# commands


def cmd_gen(args):
    started = _now()
    seed = _resolve_seed(args.seed)
    seed = 0 if seed is None else seed
    out = Path(args.out)
    stems = synth_generate(args.n, seed, out, size=args.size)
    files = [out / "images" / f"{s}.png" for s in stems] + [out / "labels" / f"{s}.txt" for s in stems]
    files.append(out / "split.txt")
    write_manifest(out, "gen", started, files, {"n": args.n, "size": args.size}, seed)
    print(f"wrote {len(stems)} images to {out}")
    return 0


def cmd_train(args):
    started = _now()
    rc = _run_config(args, args.variant)
    out = Path(args.out)
    train_items, val_items = _split_items(args.data, rc.model.num_classes, args.val_data)
    _, history, elapsed, files = _train_one(rc, train_items, val_items, out)
    last = history[-1]
    best = max((r["val_map50"] for r in history), default=float("nan"))
    print(
        f"trained {rc.model.variant} for {len(history)} epochs in {elapsed:.1f}s: "
        f"loss {last['loss_total']:.4f} val mAP50 {last['val_map50']:.4f} (best {best:.4f})"
    )
    write_manifest(out, "train", started, files, rc.to_dict(), rc.train.seed)
    return 0


def _evaluate_to(model, items, out, tcfg):
    from .plots import plot_confusion, plot_pr_curves

    report = evaluate_model(model, items, tcfg.eval_conf, tcfg.eval_nms_iou, tcfg.report_conf)
    files = report.write(out)
    files.append(plot_pr_curves(report, out / "pr_curve.png"))
    files.append(plot_confusion(report, out / "confusion.png"))
    return report, files


def cmd_eval(args):
    started = _now()
    rc = load_config(args.config) if args.config else None
    # with --config the checkpoint must have been trained with that model config
    model, extra = load_checkpoint(args.ckpt, rc.model if rc else None)
    tcfg = rc.train if rc else _train_cfg_from(extra)
    items = _select(args.data, model.cfg.num_classes, args.split)
    if not items:
        raise FileNotFoundError(f"no images selected under {args.data} (split {args.split})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, files = _evaluate_to(model, items, out, tcfg)
    print(
        f"{len(items)} images: P {report.precision:.4f} R {report.recall:.4f} "
        f"mAP50 {report.map50:.4f} mAP50-95 {report.map50_95:.4f}"
    )
    write_manifest(out, "eval", started, files, {"model": model.cfg.to_dict(), "split": args.split}, None)
    return 0


def _train_cfg_from(extra):
    from .training import TrainConfig

    return TrainConfig.from_dict(extra.get("train_config", {}))


def cmd_ablate(args):
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_rc = _run_config(args)
    train_items, val_items = _split_items(args.data, base_rc.model.num_classes, args.val_data)
    if not val_items:
        raise UsageError("ablation needs validation images (split.txt val section or --val-data)")
    csv_path = out / "ablation.csv"
    files, rows, failed, timings = [csv_path], [], [], {}

    def flush():
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
            w.writeheader()
            w.writerows(rows)

    flush()
    for variant in args.variants:
        rc = _run_config(args, variant)
        vdir = out / variant
        try:
            model, history, elapsed, tfiles = _train_one(rc, train_items, val_items, vdir)
            files += tfiles
            timings[variant] = round(elapsed, 3)
            report, efiles = _evaluate_to(model, val_items, vdir, rc.train)
            files += efiles
        except (TrainingError, RuntimeError, ValueError) as exc:
            log.error("variant %s failed: %s", variant, exc)
            failed.append(variant)
            files += [p for p in vdir.rglob("*") if p.is_file()]
            continue
        params, gflops = count_params_flops(model)
        rows.append(
            {
                "variant": variant,
                "precision": f"{report.precision:.6f}",
                "recall": f"{report.recall:.6f}",
                "map50": f"{report.map50:.6f}",
                "map50_95": f"{report.map50_95:.6f}",
                "params": params,
                "gflops": f"{gflops:.6f}",
            }
        )
        flush()
        print(f"{variant}: mAP50 {report.map50:.4f} mAP50-95 {report.map50_95:.4f} params {params} [{elapsed:.0f}s]")
    status = "ok" if not failed else f"failed: {','.join(failed)}"
    write_manifest(
        out, "ablate", started, files, base_rc.to_dict(), base_rc.train.seed, status, {"train_seconds": timings}
    )
    if failed:
        log.error("ablation incomplete; failed variants: %s", ", ".join(failed))
        return 1
    return 0


def _image_paths(spec):
    p = Path(spec)
    if p.is_dir():
        imgs = p / "images" if (p / "images").is_dir() else p
        return sorted(x for x in imgs.iterdir() if x.suffix.lower() in IMAGE_SUFFIXES)
    if p.is_file():
        return [p]
    raise FileNotFoundError(f"{spec} is neither an image nor a directory")


def _render_overlay(image, dets, path):
    from PIL import Image, ImageDraw

    colors = [(0, 200, 0), (255, 160, 0), (230, 0, 0)]
    img = Image.fromarray(image)
    scale = 3
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for d in dets:
        x1, y1, x2, y2 = (v * img.width if i % 2 == 0 else v * img.height for i, v in enumerate(d.box.xyxy()))
        color = colors[d.class_id % len(colors)]
        draw.rectangle([x1, y1, x2, y2], outline=color, width=2)
        name = CLASS_NAMES[d.class_id] if d.class_id < len(CLASS_NAMES) else str(d.class_id)
        draw.text((x1 + 2, y1 + 1), f"{name} {d.score:.2f}", fill=color)
    img.save(path)


def format_detections(dets):
    """Label-format lines with a trailing score: ``class cx cy w h score``."""
    return "".join(
        f"{d.class_id} {d.box.cx:.6f} {d.box.cy:.6f} {d.box.w:.6f} {d.box.h:.6f} {d.score:.6f}\n" for d in dets
    )


def cmd_detect(args):
    from PIL import Image

    from .data import AnnotatedImage

    started = _now()
    if not 0 < args.conf < 1 or not 0 < args.nms_iou < 1:
        raise UsageError("--conf and --nms-iou must lie in (0, 1)")
    model, _ = load_checkpoint(args.ckpt)
    size = model.cfg.input_size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files, total = [], 0
    for path in _image_paths(args.images):
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            if rgb.size != (size, size):
                rgb = rgb.resize((size, size), Image.BILINEAR)
        x = image_to_tensor(rgb)
        (dets,) = predict(model, [AnnotatedImage(x, np.zeros((0, 4)), np.zeros(0, np.int64), path.stem)], args.conf, args.nms_iou)
        txt = out / f"{path.stem}.txt"
        txt.write_text(format_detections(dets))
        files.append(txt)
        if args.overlays:
            png = out / f"{path.stem}_det.png"
            _render_overlay(np.asarray(rgb), dets, png)
            files.append(png)
        total += len(dets)
    print(f"{total} detections over {len(files) if not args.overlays else len(files) // 2} images")
    write_manifest(out, "detect", started, files, {"ckpt": str(args.ckpt), "conf": args.conf, "nms_iou": args.nms_iou}, None)
    return 0


def cmd_bench(args):
    started = _now()
    if args.ckpt:
        model, _ = load_checkpoint(args.ckpt)
    else:
        rc = _run_config(args, args.variant)
        model = build_model(rc.model)
    size = args.input_size or model.cfg.input_size
    if size % 32:
        raise UsageError(f"--input-size must be a multiple of 32, got {size}")
    params, gflops = count_params_flops(model, size)
    fps = measure_fps(model, size, iters=args.iters)
    line = f"variant={model.cfg.variant} input={size} params={params} gflops={gflops:.4f} fps={fps:.1f}"
    print(line)
    log.info(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "bench.json"
        path.write_text(json.dumps({"variant": model.cfg.variant, "input_size": size, "params": params, "gflops": gflops, "fps": fps}, indent=2, sort_keys=True) + "\n")
        write_manifest(out, "bench", started, [path], {"model": model.cfg.to_dict()}, None)
    return 0


# --------------------------------------------------------------------------
# parser


def _add_train_opts(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=["desk", "full", "smoke"], help="starting preset (default desk)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field; repeatable")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help="defaults to $RCDET_SEED, then the config")
    p.add_argument("--val-data", help="separate validation dataset directory")


def build_parser():
    parser = _Parser(prog="rcdet", description="Train and evaluate the CAFM/RCM detector.")
    parser.add_argument("--version", action="version", version=f"rcdet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, default=160)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS), default="cr")
    p.add_argument("--out", required=True)
    _add_train_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["all", "train", "val", "test"], default="all")
    p.add_argument("--config", help="expected run config; its model part must match the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare all four variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", nargs="+", choices=list(VARIANTS), default=list(VARIANTS))
    _add_train_opts(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("detect", help="run a checkpoint on images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--overlays", action="store_true", help="also write annotated PNGs")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="params, GFLOPs and FPS")
    p.add_argument("--ckpt")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="cr")
    p.add_argument("--input-size", type=int)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--preset", choices=["desk", "full", "smoke"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"rcdet {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, TrainingError, LabelError, OSError, RuntimeError, ValueError) as exc:
        print(f"rcdet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
