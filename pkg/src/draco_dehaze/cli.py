"""Command-line entry point: synth, train, dehaze, eval, profile.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file
format error, 3 numeric failure. Every command defaults to ``--seed 0``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .blocks import BLOCK_MODES, ArchConfig, draco_forward
from .haze import DEPTH_KINDS, HazeRecipe, make_pair_dataset, read_manifest, render_scene, sample_airlight
from .imageio import ImageFormatError, read_pgm_array, read_ppm_array, write_ppm_array
from .losses import LOSS_MODES
from .metrics import (
    FLOP_COMPONENTS,
    MetricsReport,
    PSNR_INF_SENTINEL,
    count_flops,
    count_params,
    evaluate_pair,
    extractor_flops,
    flops_breakdown,
)
from .tensor import ConfigurationError, Tensor, no_grad
from .train import (
    Checkpoint,
    CheckpointFormatError,
    NumericError,
    TrainConfig,
    fit,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("draco_dehaze")

DEFAULT_SEED = 0

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _images_in(path: Path) -> list[Path]:
    if path.is_dir():
        found = sorted(path.glob("*.ppm"))
        if not found:
            raise FileNotFoundError(f"no .ppm images in {path}")
        return found
    if not path.is_file():
        raise FileNotFoundError(f"no such file or directory: {path}")
    return [path]


# ----------------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    clear_dir, out_dir = Path(args.clear), Path(args.out)
    rng = np.random.default_rng(args.seed)
    if args.demo_scenes:
        clear_dir.mkdir(parents=True, exist_ok=True)
        for i in range(args.demo_scenes):
            write_ppm_array(clear_dir / f"scene{i:03d}.ppm", render_scene(args.size, args.size, rng))
    if args.depth == "file" and args.depth_map is None:
        raise UsageError("--depth file requires --depth-map")
    depth = read_pgm_array(args.depth_map) if args.depth == "file" else None
    recipes = []
    for beta in args.beta:
        airlight = tuple(args.airlight) if args.airlight else sample_airlight(rng)
        recipes.append(HazeRecipe(airlight, beta, args.depth, args.seed, depth))
    n = make_pair_dataset(clear_dir, recipes, out_dir)
    print(json.dumps({"pairs": n, "out": str(out_dir)}))
    return EXIT_OK


# ----------------------------------------------------------------------------
# train
# ----------------------------------------------------------------------------

def load_pairs(data_dir: Path) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for row in read_manifest(data_dir):
        pairs.append((read_ppm_array(data_dir / row["hazy"]).astype(np.float32),
                      read_ppm_array(data_dir / row["clear"]).astype(np.float32)))
    if not pairs:
        raise FileNotFoundError(f"manifest in {data_dir} lists no pairs")
    return pairs


def _train_config(args) -> TrainConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    overrides = {
        "lr": args.lr, "epochs": args.epochs, "batch": args.batch, "crop": args.crop,
        "seed": args.seed, "loss_mode": args.loss_mode, "max_steps": args.max_steps,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.freeze_extractor:
        base["train_extractor"] = False
    base.setdefault("seed", DEFAULT_SEED)
    arch = dict(base.get("arch", {}))
    if args.blocks is not None:
        arch["blocks"] = args.blocks
    if args.attention_kernel is not None:
        arch["attention_kernel"] = args.attention_kernel
    base["arch"] = arch
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    config = _train_config(args)
    pairs = load_pairs(Path(args.data))
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as fh:
        def on_epoch(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()

        result = fit(pairs, config, on_epoch=on_epoch)
    save_checkpoint(args.out, Checkpoint(result.weights, result.state, config.seed))
    last = result.history[-1] if result.history else {}
    print(json.dumps({"checkpoint": str(args.out), "steps": result.state.step, **last}))
    return EXIT_OK


# ----------------------------------------------------------------------------
# dehaze
# ----------------------------------------------------------------------------

def _dehaze(weights, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        inter, final = draco_forward(Tensor(img[None].astype(np.float32)), weights)
    return inter.data[0], final.data[0]


def cmd_dehaze(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in _images_in(Path(args.input)):
        inter, final = _dehaze(ckpt.weights, read_ppm_array(path))
        target = out_dir / path.name
        write_ppm_array(target, final)
        written.append(str(target))
        if args.intermediate:
            write_ppm_array(out_dir / f"{path.stem}_intermediate.ppm", inter)
    print(json.dumps({"written": written}))
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------------

def _aggregate(reports: list[MetricsReport]) -> dict:
    psnrs = [r.psnr_db for r in reports]
    mean_psnr = float(np.mean(psnrs))
    return {
        "count": len(reports),
        "psnr_db": PSNR_INF_SENTINEL if np.isinf(mean_psnr) else mean_psnr,
        "ssim": float(np.mean([r.ssim for r in reports])),
    }


def cmd_eval(args) -> int:
    reports = []
    if args.checkpoint:
        if not args.data:
            raise UsageError("eval --checkpoint needs --data")
        ckpt = load_checkpoint(args.checkpoint)
        data_dir = Path(args.data)
        for row in read_manifest(data_dir):
            hazy = read_ppm_array(data_dir / row["hazy"])
            clear = read_ppm_array(data_dir / row["clear"])
            _, final = _dehaze(ckpt.weights, hazy)
            reports.append(evaluate_pair(np.clip(final, 0, 1), clear, ckpt.config,
                                         Path(row["hazy"]).name, ckpt.weights))
    else:
        if not (args.pred and args.ref):
            raise UsageError("eval needs --pred and --ref, or --checkpoint and --data")
        pred_paths = _images_in(Path(args.pred))
        ref_root = Path(args.ref)
        for p in pred_paths:
            ref = ref_root / p.name if ref_root.is_dir() else ref_root
            if not ref.is_file():
                raise FileNotFoundError(f"no reference image for {p.name}: {ref}")
            reports.append(evaluate_pair(read_ppm_array(p), read_ppm_array(ref), name=p.name))
    doc = {"images": [r.to_dict() for r in reports], "aggregate": _aggregate(reports)}
    text = json.dumps(doc, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ----------------------------------------------------------------------------
# profile
# ----------------------------------------------------------------------------

def _arch_from_flag(value: str) -> ArchConfig:
    if value == "default":
        return ArchConfig()
    return ArchConfig.from_dict(json.loads(Path(value).read_text()))


def cmd_profile(args) -> int:
    arch = _arch_from_flag(args.arch)
    if args.attention_kernel is not None:
        arch = ArchConfig.from_dict({**arch.to_dict(), "attention_kernel": args.attention_kernel})
    blocks = {"full": "full", "ddirb_only": "ddirb", "attdrn_only": "attdrn"}[args.component]
    sized = arch.with_blocks(blocks)
    report = {
        "component": args.component,
        "height": args.height,
        "width": args.width,
        "params": count_params(sized),
        "params_with_extractor": count_params(sized, include_extractor=True),
        "flops": count_flops(arch, args.height, args.width, args.component),
        "extractor_flops": extractor_flops(arch, args.height, args.width),
        "breakdown": flops_breakdown(arch, args.height, args.width, args.component),
        "psnr_db": None,
        "ssim": None,
        "config_digest": sized.digest(),
    }
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="draco-dehaze", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate hazy/clear pairs")
    p.add_argument("--clear", required=True, help="directory of clear .ppm images")
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float, nargs="+", default=[1.0],
                   help="one recipe per value")
    p.add_argument("--airlight", type=float, nargs="+",
                   help="1 or 3 values in [0,1]; sampled per recipe when omitted")
    p.add_argument("--depth", choices=DEPTH_KINDS, default="linear_x")
    p.add_argument("--depth-map", help="PGM depth map for --depth file")
    p.add_argument("--demo-scenes", type=int, default=0,
                   help="first render this many synthetic clear scenes into --clear")
    p.add_argument("--size", type=int, default=64, help="side of rendered demo scenes")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a synth output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--loss-mode", choices=LOSS_MODES)
    p.add_argument("--blocks", choices=BLOCK_MODES)
    p.add_argument("--attention-kernel", type=int, choices=(1, 3))
    p.add_argument("--freeze-extractor", action="store_true")
    p.add_argument("--log", help="per-epoch JSON lines log (default <out>.log.jsonl)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dehaze", help="dehaze an image or a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--intermediate", action="store_true", help="also write the DDIRB-stage output")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_dehaze)

    p = sub.add_parser("eval", help="PSNR / SSIM reports")
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="parameter and FLOPs accounting")
    p.add_argument("--arch", default="default", help="'default' or an ArchConfig JSON file")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--component", choices=FLOP_COMPONENTS, default="full")
    p.add_argument("--attention-kernel", type=int, choices=(1, 3))
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageFormatError, CheckpointFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
