"""Command-line entry point: ``floodfuse synth | train | eval | infer | ablate``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .metrics import METRIC_KEYS, aggregate, external_perceptual, tile_record
from .tilestore import BundleError, SceneSpec, list_bundles, read_bundle, read_inputs, synth_scene, write_bundle
from .trainer import ABLATION_METRICS, TrainConfig, fit, load_model, predict, run_ablation

log = logging.getLogger("floodfuse")

_PRECISION = {"f32": torch.float32, "f64": torch.float64}
PER_TILE_FIELDS = ("id",) + METRIC_KEYS + ("lpips", "degenerate", "tp", "fp", "fn", "tn")


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], fieldnames) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})


def _write_planes(root: Path, prefix: str, arr: np.ndarray) -> None:
    for c in range(arr.shape[0]):
        (root / f"{prefix}_{c}.f32").write_bytes(np.ascontiguousarray(arr[c], dtype="<f4").tobytes())


# plotting -------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


_PNG_META = {"Software": None}


def save_png(path: Path, arr: np.ndarray) -> None:
    """Save a [C, H, W] array in [0, 1] as an RGB (C=3) or greyscale (C=1) PNG."""
    plt = _pyplot()
    img = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    if img.shape[0] == 1:
        plt.imsave(path, img[0], cmap="gray", vmin=0.0, vmax=1.0, metadata=_PNG_META)
    else:
        plt.imsave(path, img[:3].transpose(1, 2, 0), metadata=_PNG_META)


def plot_scores(per_tile_csv: Path, out_png: Path) -> None:
    """Per-tile score bars, drawn only from the CSV so the figure is reproducible."""
    plt = _pyplot()
    with open(per_tile_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["id"] for r in rows]
    x = np.arange(len(rows))
    fig, (ax_rec, ax_seg) = plt.subplots(1, 2, figsize=(10, 3.5))
    psnr = [min(float(r["psnr"]), 100.0) for r in rows]
    ax_rec.bar(x, psnr, color="tab:blue")
    ax_rec.set_ylabel("PSNR (dB)")
    width = 0.4
    ax_seg.bar(x - width / 2, [float(r["iou"]) for r in rows], width, label="IoU")
    ax_seg.bar(x + width / 2, [float(r["dice"]) for r in rows], width, label="Dice")
    ax_seg.set_ylim(0, 1)
    ax_seg.legend(loc="lower right")
    for ax in (ax_rec, ax_seg):
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=90, fontsize=6)
    fig.tight_layout()
    fig.savefig(out_png, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_confusion(confusion_csv: Path, out_png: Path) -> None:
    plt = _pyplot()
    with open(confusion_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    cols, body = rows[0][1:], rows[1:]
    counts = np.array([[int(v) for v in r[1:]] for r in body], dtype=float)
    frac = counts / max(counts.sum(), 1.0)
    fig, ax = plt.subplots(figsize=(3.5, 3.2))
    ax.imshow(frac, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, f"{int(counts[i, j])}\n{frac[i, j]:.3f}", ha="center", va="center", fontsize=8)
    ax.set_xticks(range(len(cols)))
    ax.set_xticklabels(cols, fontsize=7)
    ax.set_yticks(range(len(body)))
    ax.set_yticklabels([r[0] for r in body], fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curve(train_log: Path, out_png: Path) -> None:
    plt = _pyplot()
    records = [json.loads(line) for line in train_log.read_text().splitlines() if line.strip()]
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for key in ("total", "l_rgb", "l_seg", "distill"):
        ax.plot(steps, [r[key] for r in records], label=key, linewidth=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=100, metadata=_PNG_META)
    plt.close(fig)


# config ---------------------------------------------------------------------


def resolve_config(args) -> TrainConfig:
    """Config file first, then any flags given on the command line."""
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {}
    for flag in ("seed", "precision", "deterministic", "epochs", "batch", "lr0", "cosine_steps"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _require_out(args, parser) -> Path:
    if not args.out:
        parser.error(f"{args.command}: --out is required")
    return Path(args.out)


# commands -------------------------------------------------------------------


def cmd_synth(args, parser) -> int:
    out = _require_out(args, parser)
    spec = SceneSpec(
        seed=0,
        size=(args.size, args.size),
        water_fraction=args.water_fraction,
        speckle_strength=args.speckle,
        cloud_fraction=args.cloud_fraction,
        terrain_octaves=args.octaves,
        with_ndvi=not args.no_ndvi,
    )
    try:
        spec.validate()
    except ValueError as e:
        parser.error(str(e))
    if args.n < 0:
        parser.error("--n must be >= 0")
    out.mkdir(parents=True, exist_ok=True)
    base_seed = args.seed or 0
    tiles = []
    for i in range(args.n):
        seed = base_seed * 1_000_003 + i
        bundle = synth_scene(replace(spec, seed=seed))
        name = f"tile_{i:04d}"
        files = write_bundle(replace(bundle, meta={**bundle.meta, "id": name}), out / name)
        tiles.append({"id": name, "seed": seed, "files": files})
    manifest = {
        "version": __version__,
        "count": args.n,
        "spec": {k: v for k, v in vars(spec).items() if k != "seed"},
        "tiles": tiles,
    }
    _dump_json(out / "manifest.json", manifest)
    print(f"wrote {args.n} bundles to {out}")
    return 0


def cmd_train(args, parser) -> int:
    out = _require_out(args, parser)
    cfg = resolve_config(args)
    path, summary = fit(args.data, cfg, out, resume=args.resume)
    print(json.dumps(_jsonable({"checkpoint": str(path), **summary}), sort_keys=True))
    return 0


def _model_and_cfg(args):
    dtype = _PRECISION[args.precision] if args.precision else None
    return load_model(args.checkpoint, dtype)


def cmd_eval(args, parser) -> int:
    out = _require_out(args, parser)
    model, cfg = _model_and_cfg(args)
    paths = list_bundles(args.data)
    if not paths:
        raise FileNotFoundError(f"no tile bundles under {args.data}")
    bundles = [read_bundle(p) for p in paths]
    use_prior = cfg.use_teacher and not args.sar_only
    out.mkdir(parents=True, exist_ok=True)
    records = []
    with tempfile.TemporaryDirectory() as tmp:
        for i, (b, y_hat, m_hat) in enumerate(predict(model, bundles, use_prior)):
            rec = tile_record(y_hat, b.optical, m_hat, b.mask, args.threshold, str(b.meta.get("id", i)))
            if args.lpips_cmd:
                a_png, b_png = Path(tmp) / f"{i}_pred.png", Path(tmp) / f"{i}_ref.png"
                save_png(a_png, y_hat)
                save_png(b_png, b.optical)
                rec["lpips"] = external_perceptual(args.lpips_cmd, str(a_png), str(b_png))
            records.append(rec)
    summary = aggregate(records)
    summary.update(checkpoint=str(args.checkpoint), threshold=args.threshold, prior_path=not use_prior)
    _dump_json(out / "metrics.json", summary)
    _write_csv(out / "per_tile.csv", records, PER_TILE_FIELDS)
    pooled = summary["pooled"]
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["actual", "pred_flooded", "pred_dry"])
        w.writerow(["flooded", pooled["tp"], pooled["fn"]])
        w.writerow(["dry", pooled["fp"], pooled["tn"]])
    if not args.no_plots:
        plot_scores(out / "per_tile.csv", out / "scores.png")
        plot_confusion(out / "confusion.csv", out / "confusion.png")
        train_log = Path(args.checkpoint).parent / "train_log.jsonl"
        if train_log.exists():
            plot_loss_curve(train_log, out / "loss_curve.png")
    print(json.dumps(_jsonable({k: summary[k] for k in METRIC_KEYS}), sort_keys=True))
    return 0


def _input_dirs(path: Path) -> list[Path]:
    if (path / "meta.json").exists():
        return [path]
    dirs = sorted(p for p in path.iterdir() if (p / "meta.json").exists()) if path.is_dir() else []
    if not dirs:
        raise FileNotFoundError(f"no input tiles under {path}")
    return dirs


@torch.no_grad()
def cmd_infer(args, parser) -> int:
    src = Path(args.input)
    out = Path(args.out) if args.out else src.parent / f"{src.name}_pred"
    model, _ = _model_and_cfg(args)
    dtype = next(model.parameters()).dtype
    dirs = _input_dirs(src)
    for tile_dir in dirs:
        sar, prior, meta = read_inputs(tile_dir)
        if args.sar_only:
            prior = None
        as_t = lambda a: torch.from_numpy(a).to(dtype).unsqueeze(0)
        res = model(as_t(sar), None if prior is None else as_t(prior))
        y_hat = res.y_hat[0].cpu().numpy()
        m_hat = res.m_hat[0].cpu().numpy()
        binary = (m_hat >= args.threshold).astype(np.float32)
        dest = out / str(meta.get("id", tile_dir.name)) if len(dirs) > 1 else out
        dest.mkdir(parents=True, exist_ok=True)
        _write_planes(dest, "y_hat", y_hat)
        _write_planes(dest, "m_hat", m_hat)
        _write_planes(dest, "mask", binary)
        save_png(dest / "y_hat.png", y_hat)
        save_png(dest / "m_hat.png", m_hat)
        save_png(dest / "mask.png", binary)
        info = {
            "source": str(tile_dir),
            "H": int(sar.shape[1]),
            "W": int(sar.shape[2]),
            "path": "teacher" if res.used_teacher else "prior",
            "threshold": args.threshold,
        }
        _dump_json(dest / "meta.json", info)
        print(f"{tile_dir.name}: {info['path']} path -> {dest}")
    return 0


def cmd_ablate(args, parser) -> int:
    out = _require_out(args, parser)
    cfg = resolve_config(args)
    rows, runs = run_ablation(args.data, cfg, out, seeds=tuple(args.seeds))
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ablation.csv", rows, ("variant", "seeds", "psnr", "ssim", "iou", "dice", "f1", "full_wins"))
    _write_csv(out / "ablation_runs.csv", runs, ("variant", "seed", "psnr", "ssim", "iou", "dice", "f1"))
    for row in rows:
        print(row["variant"], " ".join(f"{k}={row[k]:.4f}" for k in ABLATION_METRICS), row["full_wins"])
    return 0


# parser ---------------------------------------------------------------------


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    kw = {"default": argparse.SUPPRESS} if suppress else {"default": None}
    p.add_argument("--seed", type=int, help="random seed (default: from config, else 0)", **kw)
    p.add_argument("--config", help="flat JSON training config", **kw)
    p.add_argument("--out", help="output directory", **kw)
    p.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        help="force deterministic kernels (default: on)",
        **kw,
    )
    p.add_argument("--precision", choices=sorted(_PRECISION), help="floating-point precision", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodfuse", description="SAR-to-optical reconstruction and flood mapping.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    _add_globals(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="write synthetic tile bundles")
    p.add_argument("--n", type=int, default=8, help="number of tiles")
    p.add_argument("--size", type=int, default=64, help="tile height and width")
    p.add_argument("--water-fraction", type=float, default=0.3)
    p.add_argument("--speckle", type=float, default=0.5, help="speckle strength (1/sqrt(looks))")
    p.add_argument("--cloud-fraction", type=float, default=0.1)
    p.add_argument("--octaves", type=int, default=4, help="terrain noise octaves")
    p.add_argument("--no-ndvi", action="store_true", help="RGB-only priors")
    p.set_defaults(func=cmd_synth)

    def training_flags(p):
        p.add_argument("--data", required=True, help="directory of tile bundles")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--lr0", type=float, default=None, help="peak learning rate")
        p.add_argument("--cosine-steps", type=int, default=None, help="cosine horizon in steps")

    p = sub.add_parser("train", parents=[common], help="train a model")
    training_flags(p)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on tile bundles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sar-only", action="store_true", help="ignore priors and use the prior predictor")
    p.add_argument("--lpips-cmd", default=None, help="external scorer: CMD PRED.png REF.png -> float")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="predict reconstruction and flood mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="bundle directory (prior optional) or a directory of them")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sar-only", action="store_true", help="ignore any prior planes")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", parents=[common], help="full model vs no_film / no_teacher / no_decouple")
    training_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, parser)
    except (FileNotFoundError, BundleError, ValueError) as e:
        print(f"floodfuse {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
