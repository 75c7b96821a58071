"""Command-line entry point: ``cutgan {train,translate,eval,viz}``.

Every command prints one JSON object on stdout. Exit status is 0 on
success, 2 for configuration errors and 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import resolve_config_verbose
from .errors import ConfigError, InvalidArgument
from .train import DEVICE_ENV

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("cutgan")


def _parse_loc(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W, got {text!r}") from None
    return h, w


def _parse_classes(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master random seed")
    common.add_argument("--device", default=argparse.SUPPRESS, help=f"torch device (default: ${DEVICE_ENV} or auto)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory or file")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="cutgan", parents=[common],
                                     description="Contrastive unpaired image-to-image translation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--preset", choices=("cut", "fastcut", "sincut"), default="cut")
    p.add_argument("--data", required=True, help="directory with trainA/ and trainB/")
    p.add_argument("--config", help="YAML file mirroring TrainConfig")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--force", action="store_true", help="write to a suffixed sibling if --out is not empty")
    p.add_argument("--resume", help="checkpoint to continue from (writes into --out)")
    p.add_argument("--max-iterations", type=int)

    p = sub.add_parser("translate", parents=[common], help="translate a directory of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input_dir", required=True)

    ev = sub.add_parser("eval", help="evaluation metrics").add_subparsers(dest="metric", required=True)
    p = ev.add_parser("fid", parents=[common], help="Fréchet distance between two image directories")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--embedder", default="fixed_random_projection",
                   choices=("fixed_random_projection", "identity_pool", "external_inception"))
    p.add_argument("--weights", help="Inception V3 state dict for external_inception")
    p = ev.add_parser("fraction", parents=[common], help="pixel fraction of given segmentation classes")
    p.add_argument("--dir", required=True)
    p.add_argument("--segmenter", required=True, help="Python file defining segment(image) -> labels")
    p.add_argument("--classes", required=True, type=_parse_classes)

    vz = sub.add_parser("viz", help="embedding visualizations").add_subparsers(dest="kind", required=True)
    p = vz.add_parser("similarity", parents=[common], help="patch similarity heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="translated image to take the query patch from")
    p.add_argument("--loc", required=True, type=_parse_loc)
    p.add_argument("--layer", default="res1")
    p = vz.add_parser("pca", parents=[common], help="PCA of patch embeddings as RGB")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, nargs="+")
    p.add_argument("--layer", default="res1")
    return parser


def _train(args) -> dict:
    from .data import SingleImagePair, UnpairedDataset
    from .train import fit

    overrides = list(args.override)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    cfg, changes = resolve_config_verbose(args.preset, args.config, overrides)
    out = getattr(args, "out", None)
    if out is None:
        raise ConfigError("out: train needs --out")
    data = Path(args.data)
    if not data.is_dir():
        raise ConfigError(f"data: {data} is not a directory")
    if cfg.generator == "singleimage":
        dataset = SingleImagePair.from_directory(data, iterations_per_epoch=cfg.iterations_per_epoch or 100)
    else:
        dataset = UnpairedDataset.from_directory(data, load_size=cfg.load_size, crop_size=cfg.crop_size)
    result = fit(cfg, dataset, out, resume=args.resume, max_iterations=args.max_iterations,
                 force=args.force, device=args.device, overrides=changes)
    return {"run_dir": str(result.layout.root), "checkpoint": str(result.checkpoint),
            "iterations": result.trainer.iteration}


def _translate(args) -> dict:
    from .train import translate_directory

    out = getattr(args, "out", None) or "translated"
    written = translate_directory(args.ckpt, args.input_dir, out, device=args.device)
    return {"out": str(out), "count": len(written)}


def _eval(args) -> dict:
    from .data import list_images
    from .evaluation import EmbedderSpec, class_pixel_fraction, fid, load_segmenter

    if args.metric == "fid":
        spec = EmbedderSpec(args.embedder, weights_path=args.weights)
        real, fake = list_images(args.real), list_images(args.fake)
        return {"metric": "fid", "embedder": args.embedder, "value": fid(real, fake, spec),
                "n_real": len(real), "n_fake": len(fake)}
    images = list_images(args.dir)
    value = class_pixel_fraction(images, load_segmenter(args.segmenter), args.classes)
    return {"metric": "fraction", "classes": args.classes, "value": value, "n_images": len(images)}


def _viz(args) -> dict:
    from .evaluation import pca_embedding_image, similarity_map
    from .train import load_model

    model, cfg = load_model(args.ckpt, args.device)
    model.eval()
    if args.kind == "similarity":
        out = Path(getattr(args, "out", None) or "similarity.png")
        result = similarity_map(model, args.input, args.output, args.loc, args.layer,
                                cfg.objective.temperature, out_path=out)
        return {"png": str(out), "layer": args.layer, "loc": list(args.loc),
                "layer_shape": list(result.layer_map.shape)}
    out = Path(getattr(args, "out", None) or "pca")
    pca_embedding_image(model, args.images, args.layer, out_dir=out)
    return {"out": str(out), "layer": args.layer, "count": len(args.images)}


COMMANDS = {"train": _train, "translate": _translate, "eval": _eval, "viz": _viz}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    args.device = getattr(args, "device", None) or os.environ.get(DEVICE_ENV)
    try:
        result = COMMANDS[args.command](args)
    except (ConfigError, FileExistsError) as exc:
        print(json.dumps({"error": "config", "message": str(exc)}))
        return EXIT_CONFIG
    except (InvalidArgument, FileNotFoundError, RuntimeError, OSError, ValueError) as exc:
        print(json.dumps({"error": "runtime", "type": type(exc).__name__, "message": str(exc)}))
        return EXIT_RUNTIME
    print(json.dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
