"""mf3d-adapter: turn rendered views into a proposal bundle, and prompts
into text-embedding files, for the mf3d segmentation engine.

    mf3d-adapter bundle --images <renders dir> --out <bundle dir> --mock [--gt gt.json]
    mf3d-adapter prompts --text "shirt,pants" --out <dir> --mock
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import mock, models
from .bundle_format import (AdapterError, load_point_index, load_rig, view_size,
                            write_bundle_dir, write_prompt_files)


@dataclass
class AdapterConfig:
    images_dir: Path
    out_dir: Path
    points_per_side: int = 64
    mask_model: str = "mock"
    embed_model: str = "mock"
    gt_path: Path | None = None
    dim: int = mock.MOCK_DIM


def _check_image_sizes(config: AdapterConfig, rig: dict) -> None:
    for view in rig["views"]:
        i = int(view["index"])
        png = config.images_dir / f"view{i}.png"
        if not png.exists():
            raise AdapterError(f"missing rendered view {png}")
        with Image.open(png) as im:
            w, h = im.size
        expected = view_size(rig, i)
        if (h, w) != expected:
            raise AdapterError(
                f"view {i}: image is {h}x{w} but the rig says {expected[0]}x{expected[1]}"
            )


def generate_bundle(config: AdapterConfig) -> dict:
    """Per view: masks from the mask generator, one embedding per mask from
    the region encoder; writes a bundle that the engine validates bit-exactly."""
    rig = load_rig(config.images_dir)
    _check_image_sizes(config, rig)

    mock_mode = config.mask_model == "mock"
    gt_labels = None
    num_classes = 0
    if mock_mode and config.gt_path is not None:
        gt_labels, prompts = mock.load_gt_labels(config.gt_path)
        num_classes = len(prompts)

    mask_gen = None
    encoder = None
    if not mock_mode:
        mask_gen = models.make_mask_generator(config.mask_model, config.points_per_side)
        encoder = models.make_region_encoder(config.embed_model)

    per_view_masks, per_view_embeddings = {}, {}
    dim = config.dim
    for view in rig["views"]:
        i = int(view["index"])
        if mock_mode:
            point_index = load_point_index(config.images_dir, i)
            if gt_labels is not None:
                masks, embeddings = mock.oracle_masks_for_view(
                    point_index, gt_labels, num_classes, dim
                )
            else:
                masks, embeddings = mock.tile_masks_for_view(
                    point_index, i, config.points_per_side, dim
                )
        else:
            image = np.asarray(Image.open(config.images_dir / f"view{i}.png").convert("RGB"))
            masks = mask_gen(image)
            embeddings = [encoder(image, m) for m in masks]
            if embeddings:
                dim = len(embeddings[0])
        per_view_masks[i] = masks
        per_view_embeddings[i] = embeddings

    source = "synthetic" if mock_mode else "model"
    return write_bundle_dir(config.out_dir, rig, per_view_masks, per_view_embeddings,
                            dim, source=source)


def encode_prompts(prompts, out_dir, model_id="mock", dim=mock.MOCK_DIM, style="hash"):
    if model_id == "mock":
        matrix = mock.encode_prompts_mock(prompts, dim=dim, style=style)
    else:
        matrix = models.make_text_encoder(model_id)(prompts)
    write_prompt_files(out_dir, prompts, matrix)
    return matrix.shape


def cmd_bundle(args) -> int:
    config = AdapterConfig(
        images_dir=Path(args.images),
        out_dir=Path(args.out),
        points_per_side=args.points_per_side,
        mask_model="mock" if args.mock else args.mask_model,
        embed_model="mock" if args.mock else args.embed_model,
        gt_path=Path(args.gt) if args.gt else None,
        dim=args.dim,
    )
    manifest = generate_bundle(config)
    n = manifest["embeddings"]["count"]
    print(f"wrote bundle with {n} masks (C={manifest['C']}) -> {config.out_dir}")
    return 0


def cmd_prompts(args) -> int:
    prompts = [p.strip() for p in args.text.split(",") if p.strip()]
    if not prompts:
        raise AdapterError("prompt list is empty")
    shape = encode_prompts(prompts, args.out,
                           model_id="mock" if args.mock else args.model,
                           dim=args.dim, style=args.style)
    print(f"wrote {shape[0]} prompt embeddings (C={shape[1]}) -> {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mf3d-adapter", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bundle", help="generate a proposal bundle from rendered views")
    p.add_argument("--images", required=True, help="renders dir (PNG + PIDX + rig.json)")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--mock", action="store_true", help="deterministic stub models")
    p.add_argument("--gt", help="gt.json: mock reproduces the oracle masks")
    p.add_argument("--points-per-side", dest="points_per_side", type=int, default=64,
                   help="mask-generator sampling density (default 64)")
    p.add_argument("--mask-model", default="mock", help="'<arch>:<checkpoint>' for SAM")
    p.add_argument("--embed-model", default="mock", help="region encoder checkpoint")
    p.add_argument("--dim", type=int, default=mock.MOCK_DIM,
                   help="embedding dim in mock mode (default 16)")
    p.set_defaults(func=cmd_bundle)

    p = sub.add_parser("prompts", help="encode text prompts to an embedding file")
    p.add_argument("--text", required=True, help="comma-separated prompt strings")
    p.add_argument("--out", required=True)
    p.add_argument("--mock", action="store_true")
    p.add_argument("--model", default="mock", help="text encoder model id")
    p.add_argument("--dim", type=int, default=mock.MOCK_DIM)
    p.add_argument("--style", choices=["hash", "onehot"], default="hash",
                   help="mock embedding style (onehot matches the fixture convention)")
    p.set_defaults(func=cmd_prompts)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
