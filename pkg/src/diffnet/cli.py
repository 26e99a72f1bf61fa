"""Command-line front end: gen, train, predict, eval and render.

Every run writes a JSON manifest next to its outputs recording the
subcommand, resolved flag values and paths, so any output can be
reproduced bit-for-bit by re-running with the recorded values.

Exit codes: 0 success, 2 usage error, 3 data/parse error, 4 numeric
failure (non-finite loss).  ``DIFFNET_SEED`` overrides the default seed
when no ``--seed`` flag is given.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    NODATA,
    BitemporalTile,
    SceneParams,
    generate_scene,
    read_tile,
    write_tile,
)
from .errors import (
    CheckpointFormatError,
    ConfigError,
    ContractError,
    NonFiniteLossError,
    ShapeError,
    TileFormatError,
)
from .losses import LossConfig
from .metrics import METRIC_NAMES, aggregate, confusion_counts, metrics_from_counts
from .model import ModelConfig, init_model
from .train import (
    TrainConfig,
    load_checkpoint,
    model_from_checkpoint,
    predict,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

MASK_MAGIC = b"BTM1"

CONFUSION_COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (255, 0, 0),
    "fn": (0, 0, 255),
    "nodata": (128, 128, 128),
}


class UsageError(Exception):
    pass


def resolve_seed(flag_value: int | None, default: int = 0) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get("DIFFNET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"DIFFNET_SEED must be an integer, got {env!r}") from None
    return default


def write_manifest(path: Path, subcommand: str, args: dict, inputs: list, outputs: list) -> None:
    doc = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "args": args,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- mask files (BTM1) ---------------------------------------------------------


def write_mask(mask: np.ndarray, path) -> None:
    """Mask file: magic BTM1, uint32 H, uint32 W, then H*W bytes."""
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    h, w = m.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MASK_MAGIC + struct.pack("<II", h, w) + m.tobytes())
    os.replace(tmp, path)


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise TileFormatError(f"truncated mask header: file ends at byte {len(blob)}")
    if blob[:4] != MASK_MAGIC:
        raise TileFormatError(
            f"bad magic {blob[:4]!r} at byte 0, expected {MASK_MAGIC!r}"
        )
    h, w = struct.unpack_from("<II", blob, 4)
    if len(blob) != 12 + h * w:
        raise TileFormatError(
            f"truncated mask payload: file ends at byte {len(blob)}, "
            f"expected {12 + h * w} for {h}x{w}"
        )
    return np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=12).reshape(h, w).copy()


def _load_any_mask(path: Path) -> np.ndarray:
    if path.suffix == ".btt":
        return read_tile(path).mask
    return read_mask(path)


# -- confusion rendering --------------------------------------------------------


def render_confusion(pred: np.ndarray, truth: np.ndarray, out_path) -> None:
    """Binary PPM overlay: TP white, TN black, FP red, FN blue, nodata gray."""
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise UsageError(f"pred shape {p.shape} does not match truth shape {t.shape}")
    h, w = t.shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    valid = (t != NODATA) & (p != NODATA)
    pp = p == 1
    tt = t == 1
    img[valid & pp & tt] = CONFUSION_COLORS["tp"]
    img[valid & ~pp & ~tt] = CONFUSION_COLORS["tn"]
    img[valid & pp & ~tt] = CONFUSION_COLORS["fp"]
    img[valid & ~pp & tt] = CONFUSION_COLORS["fn"]
    img[~valid] = CONFUSION_COLORS["nodata"]
    with open(out_path, "wb") as f:
        f.write(b"P6\n" + f"{w} {h}\n255\n".encode() + img.tobytes())


# -- subcommands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    seed = resolve_seed(args.seed)
    params = SceneParams(
        channels=args.channels,
        size=(args.height, args.width),
        burn_fraction_target=args.burn_fraction,
        n_scar_blobs=args.scar_blobs,
        burn_offset_scale=args.burn_offset_scale,
        seasonal_drift_scale=args.seasonal_drift_scale,
        confuser_blobs=args.confuser_blobs,
        noise_sigma=args.noise_sigma,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i in range(args.count):
        tile = generate_scene(params, seed=seed + i)
        path = out_dir / f"tile_{i:05d}.btt"
        write_tile(tile, path)
        outputs.append(path)
    write_manifest(
        out_dir / "manifest.json",
        "gen",
        {
            "out-dir": str(out_dir),
            "count": args.count,
            "seed": seed,
            "channels": args.channels,
            "height": args.height,
            "width": args.width,
            "burn-fraction": args.burn_fraction,
            "scar-blobs": args.scar_blobs,
            "burn-offset-scale": args.burn_offset_scale,
            "seasonal-drift-scale": args.seasonal_drift_scale,
            "confuser-blobs": args.confuser_blobs,
            "noise-sigma": args.noise_sigma,
        },
        inputs=[],
        outputs=outputs,
    )
    return EXIT_OK


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    data_dir = Path(args.data_dir)
    tile_paths = sorted(data_dir.glob("*.btt"))
    if not tile_paths:
        raise UsageError(f"no .btt tiles found in {data_dir}")
    tiles = [read_tile(p) for p in tile_paths]

    pos_weight = None if args.pos_weight == "auto" else float(args.pos_weight)
    cfg = TrainConfig(
        lr=args.lr,
        steps=args.steps,
        batch_size=args.batch_size,
        patch_size=args.patch_size,
        seed=seed,
        loss=LossConfig(alpha=args.alpha, pos_weight=pos_weight, dice_eps=args.dice_eps),
        log_every=args.log_every,
    )
    model = init_model(
        ModelConfig(in_channels=tiles[0].channels, base_width=args.base_width),
        seed=args.model_seed,
    )
    ckpt, log = train(model, tiles, cfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    log_csv = Path(args.log_csv) if args.log_csv else Path(str(out) + ".log.csv")
    log.to_csv(log_csv)
    write_manifest(
        Path(str(out) + ".manifest.json"),
        "train",
        {
            "data-dir": str(data_dir),
            "out": str(out),
            "log-csv": str(log_csv),
            "base-width": args.base_width,
            "model-seed": args.model_seed,
            "lr": args.lr,
            "steps": args.steps,
            "batch-size": args.batch_size,
            "patch-size": args.patch_size,
            "seed": seed,
            "alpha": args.alpha,
            "pos-weight": args.pos_weight,
            "dice-eps": args.dice_eps,
            "log-every": args.log_every,
        },
        inputs=tile_paths,
        outputs=[out, log_csv],
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    tile = read_tile(args.tile)
    if tile.channels != ckpt.config.in_channels:
        raise ConfigError(
            f"channel mismatch: tile has {tile.channels} channels, "
            f"checkpoint expects {ckpt.config.in_channels}"
        )
    model = model_from_checkpoint(ckpt)
    mask = predict(model, tile, threshold=args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mask(mask, out)
    write_manifest(
        Path(str(out) + ".manifest.json"),
        "predict",
        {
            "checkpoint": str(args.checkpoint),
            "tile": str(args.tile),
            "threshold": args.threshold,
            "out": str(out),
        },
        inputs=[args.checkpoint, args.tile],
        outputs=[out],
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.truth):
        raise UsageError(
            f"site count mismatch: {len(args.pred)} predictions vs "
            f"{len(args.truth)} truth files"
        )
    rows = []
    for pred_path, truth_path in zip(args.pred, args.truth):
        pred = _load_any_mask(Path(pred_path))
        truth = _load_any_mask(Path(truth_path))
        counts = confusion_counts(pred, truth)
        rows.append((Path(pred_path).stem, metrics_from_counts(counts)))
    mean_set, std_set = aggregate([m for _, m in rows])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["site," + ",".join(METRIC_NAMES)]
    for site, m in rows + [("mean", mean_set), ("std", std_set)]:
        lines.append(site + "," + ",".join(f"{v:.6f}" for v in m.as_tuple()))
    out.write_text("\n".join(lines) + "\n")
    write_manifest(
        Path(str(out) + ".manifest.json"),
        "eval",
        {
            "pred": [str(p) for p in args.pred],
            "truth": [str(p) for p in args.truth],
            "out": str(out),
        },
        inputs=list(args.pred) + list(args.truth),
        outputs=[out],
    )
    return EXIT_OK


def cmd_render(args) -> int:
    pred = _load_any_mask(Path(args.pred))
    truth = _load_any_mask(Path(args.truth))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    render_confusion(pred, truth, out)
    write_manifest(
        Path(str(out) + ".manifest.json"),
        "render",
        {"pred": str(args.pred), "truth": str(args.truth), "out": str(out)},
        inputs=[args.pred, args.truth],
        outputs=[out],
    )
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffnet",
        description="Bitemporal burned-area change detection on synthetic embedding tiles",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("gen", help="generate synthetic bitemporal tiles")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--channels", type=int, default=64)
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--burn-fraction", type=float, default=0.15)
    g.add_argument("--scar-blobs", type=int, default=3)
    g.add_argument("--burn-offset-scale", type=float, default=1.0)
    g.add_argument("--seasonal-drift-scale", type=float, default=0.3)
    g.add_argument("--confuser-blobs", type=int, default=2)
    g.add_argument("--noise-sigma", type=float, default=0.05)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a directory of .btt tiles")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--log-csv", default=None)
    t.add_argument("--base-width", type=int, default=32)
    t.add_argument("--model-seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--steps", type=int, default=300)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--patch-size", type=int, default=64)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--pos-weight", default="auto")
    t.add_argument("--dice-eps", type=float, default=1.0)
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="binarized change mask for one tile")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tile", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="metric table over prediction/truth pairs")
    e.add_argument("--pred", nargs="+", required=True)
    e.add_argument("--truth", nargs="+", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="confusion overlay image (PPM)")
    r.add_argument("--pred", required=True)
    r.add_argument("--truth", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TileFormatError, CheckpointFormatError, ShapeError, ContractError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
