"""Command-line entry point: ``icm <subcommand> [flags]``.

Flags override values from ``--config`` (a flat JSON object keyed by flag
name with dashes replaced by underscores).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .errors import ConfigurationError

log = logging.getLogger("icm_codec")

# Defaults applied after the config file; flags always win.
DEFAULTS = {
    "profile": "tiny",
    "seed": 0,
    "patches": 3,
    "patch_size": 64,
    "w_adv": None,
    "lr": None,
    "li": False,
    "checkpoints": None,
    "steps_per_checkpoint": None,
    "images_per_checkpoint": None,
    "crop_size": None,
    "eval_every": None,
    "batch_size": 4,
    "extractor_seed": 0,
    "extractor": None,
    "label": None,
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icm", description="Image coding for machines codec with PatchGAN decoder finetuning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="index a directory of PNG/JPEG images")
    _common(p)
    p.add_argument("--dataset")

    p = sub.add_parser("train", help="train a base codec")
    _common(p)
    p.add_argument("--profile", choices=("paper", "tiny"))
    p.add_argument("--dataset")
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoints", type=int)
    p.add_argument("--images-per-checkpoint", type=int)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--extractor", help="exported feature extractor directory")

    p = sub.add_parser("finetune", help="PatchGAN finetuning of the decoder head")
    _common(p)
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--dataset")
    p.add_argument("--patches", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--w-adv", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--li", action="store_true", default=None, help="low adversarial impact preset")
    p.add_argument("--checkpoints", type=int)
    p.add_argument("--steps-per-checkpoint", type=int)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--extractor")

    p = sub.add_parser("encode", help="compress an image to a .icmb bitstream")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input")

    p = sub.add_parser("decode", help="decompress a .icmb bitstream to a PNG")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a directory of images")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--label")
    p.add_argument("--extractor")

    p = sub.add_parser("compare", help="zoomed base | finetuned | LI panels at the most artifacted region")
    _common(p)
    p.add_argument("--checkpoint", action="append", help="repeat: base, finetuned[, LI]")
    p.add_argument("--dataset")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (flags win)."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigurationError("config file must hold a flat JSON object")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    for k, v in vars(args).items():
        if v is not None:
            opts[k] = v
    return opts


def _require(opts: dict, *keys):
    missing = [k for k in keys if not opts.get(k)]
    if missing:
        raise ConfigurationError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _extractor(opts: dict):
    from .checkpoint import load_feature_extractor
    from .losses import FeatureExtractor

    if opts.get("extractor"):
        return load_feature_extractor(opts["extractor"])
    return FeatureExtractor(seed=int(opts.get("extractor_seed", 0)))


def _eval_images(root):
    from .data import ingest_dataset, load_image

    index = ingest_dataset(root)
    return [(e["path"], load_image(index.absolute(e))) for e in index.entries]


def cmd_ingest(opts):
    from .data import ingest_dataset

    _require(opts, "dataset")
    index = ingest_dataset(opts["dataset"])
    if opts.get("out"):
        index.save(opts["out"])
    print(json.dumps({"images": len(index), "skipped": len(index.skipped), "hash": index.index_hash()}))


def cmd_train(opts):
    from .training import RunConfig, train_base

    _require(opts, "dataset", "out")
    overrides = {
        "seed": opts["seed"],
        "learning_rate": opts.get("lr"),
        "checkpoints": opts.get("checkpoints"),
        "images_per_checkpoint": opts.get("images_per_checkpoint"),
        "crop_size": opts.get("crop_size"),
        "batch_size": opts.get("batch_size"),
        "extractor_seed": opts.get("extractor_seed"),
        "dataset": opts["dataset"],
        "out_dir": opts["out"],
    }
    for key in ("w_rate", "w_mse", "w_task"):
        if key in opts:
            overrides[key] = opts[key]
    cfg = RunConfig.from_profile(opts["profile"], **{k: v for k, v in overrides.items() if v is not None})
    paths = train_base(cfg, fe=_extractor(opts) if cfg.w_task > 0 else None, out_dir=opts["out"])
    print(json.dumps({"checkpoints": [str(p) for p in paths]}))


def cmd_finetune(opts):
    from .adversarial import FinetuneConfig, finetune_run
    from .data import CropSampler, ingest_dataset, load_image

    _require(opts, "checkpoint", "dataset", "out")
    kw = {
        "patch_size": opts["patch_size"],
        "patches_per_image": opts["patches"],
        "seed": opts["seed"],
        "batch_size": opts["batch_size"],
    }
    for flag, field_ in (
        ("checkpoints", "checkpoints"),
        ("steps_per_checkpoint", "steps_per_checkpoint"),
        ("crop_size", "crop_size"),
        ("eval_every", "eval_every"),
    ):
        if opts.get(flag) is not None:
            kw[field_] = opts[flag]
    if opts.get("li"):
        if opts.get("w_adv") is not None or opts.get("lr") is not None:
            raise ConfigurationError("--li fixes --w-adv and --lr; do not pass them together")
        cfg = FinetuneConfig.li_preset(**kw)
    else:
        if opts.get("w_adv") is not None:
            kw["w_adv"] = opts["w_adv"]
        if opts.get("lr") is not None:
            kw["learning_rate"] = opts["lr"]
        cfg = FinetuneConfig(**kw)
    index = ingest_dataset(opts["dataset"])
    sampler = CropSampler(index, cfg.crop_size)
    eval_images = [load_image(index.absolute(e)) for e in index.entries]
    paths = finetune_run(opts["checkpoint"], sampler, cfg, opts["out"], eval_images=eval_images, fe=_extractor(opts))
    print(json.dumps({"checkpoints": [str(p) for p in paths]}))


def _image_codec(path):
    from .checkpoint import load_codec
    from .pipeline import ImageCodec

    codec, manifest = load_codec(path)
    return ImageCodec(codec, manifest["content_hash"])


def cmd_encode(opts):
    from .data import load_image

    _require(opts, "checkpoint", "input", "out")
    runner = _image_codec(opts["checkpoint"])
    data = runner.compress(load_image(opts["input"])).to_bytes()
    Path(opts["out"]).write_bytes(data)
    print(json.dumps({"bytes": len(data), "out": opts["out"]}))


def cmd_decode(opts):
    from .data import save_image

    _require(opts, "checkpoint", "input", "out")
    runner = _image_codec(opts["checkpoint"])
    img = runner.decompress(Path(opts["input"]).read_bytes())
    save_image(opts["out"], img)
    print(json.dumps({"height": img.shape[0], "width": img.shape[1], "out": opts["out"]}))


def cmd_eval(opts):
    from .evaluation import evaluate_checkpoint

    _require(opts, "checkpoint", "dataset", "out")
    report = evaluate_checkpoint(opts["checkpoint"], _eval_images(opts["dataset"]), _extractor(opts), label=opts.get("label") or "")
    json_path, csv_path = report.write(opts["out"])
    print(json.dumps({"records": len(report.records), "failures": len(report.failures), "json": str(json_path), "csv": str(csv_path)}))


def cmd_compare(opts):
    from .data import save_image
    from .evaluation import comparison_grid

    _require(opts, "checkpoint", "dataset", "out")
    ckpts = opts["checkpoint"]
    if isinstance(ckpts, str):
        ckpts = [ckpts]
    if len(ckpts) < 2:
        raise ConfigurationError("compare needs at least a base and a finetuned checkpoint")
    runners = [_image_codec(c) for c in ckpts]
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for image_id, img in _eval_images(opts["dataset"]):
        decoded = [r.roundtrip(img)[0] for r in runners]
        grid, region = comparison_grid(img, decoded)
        path = out / (Path(image_id).stem + "_compare.png")
        save_image(path, grid)
        written.append({"image": image_id, "grid": str(path), "region": list(region)})
    (out / "compare.json").write_text(json.dumps({"panels": [str(c) for c in ckpts], "grids": written}, indent=2))
    print(json.dumps({"grids": len(written)}))


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        opts = resolve(args)
        COMMANDS[args.command](opts)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
