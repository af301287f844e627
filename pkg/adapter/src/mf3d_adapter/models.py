"""Real-model backends: a segment-everything mask generator and a
region-aware (RGB + mask-as-alpha) image encoder, plus a text encoder.

These are optional extras; imports are deferred so that mock mode runs
with no weights, no GPU, and no network. The adapter only contracts on
the embedding dimension C of whatever checkpoint is configured.
"""

from __future__ import annotations

import numpy as np

from .bundle_format import AdapterError


def make_mask_generator(model_id: str, points_per_side: int = 64):
    """Returns image (H, W, 3 uint8) -> list of boolean masks."""
    try:
        import torch  # noqa: F401
        from segment_anything import SamAutomaticMaskGenerator, sam_model_registry
    except ImportError as exc:
        raise AdapterError(
            f"mask model '{model_id}' needs the optional [models] extra: {exc}"
        )
    arch, _, checkpoint = model_id.partition(":")
    if not checkpoint:
        raise AdapterError("mask model id must look like '<arch>:<checkpoint path>'")
    sam = sam_model_registry[arch](checkpoint=checkpoint)
    generator = SamAutomaticMaskGenerator(sam, points_per_side=points_per_side)

    def generate(image: np.ndarray):
        records = generator.generate(image)
        return [np.asarray(r["segmentation"], dtype=bool) for r in records]

    return generate


def make_region_encoder(model_id: str):
    """Returns (image, mask) -> C-dim embedding, using the mask as an
    alpha channel alongside the RGB input."""
    try:
        import torch
        from PIL import Image
    except ImportError as exc:
        raise AdapterError(
            f"embedding model '{model_id}' needs the optional [models] extra: {exc}"
        )

    model = torch.jit.load(model_id, map_location="cpu").eval()

    def encode(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        rgb = np.asarray(
            Image.fromarray(image).resize((224, 224), Image.BILINEAR), dtype=np.float32
        ) / 255.0
        alpha = np.asarray(
            Image.fromarray(mask.astype(np.uint8) * 255).resize((224, 224), Image.NEAREST),
            dtype=np.float32,
        ) / 255.0
        rgba = np.concatenate([rgb, alpha[..., None]], axis=-1).transpose(2, 0, 1)
        with torch.no_grad():
            out = model(torch.from_numpy(rgba)[None])
        return out[0].numpy().astype(np.float64)

    return encode


def make_text_encoder(model_id: str):
    """Returns list of prompts -> K x C embedding matrix."""
    try:
        import torch
        from transformers import AutoModel, AutoTokenizer
    except ImportError as exc:
        raise AdapterError(
            f"text model '{model_id}' needs the optional [models] extra: {exc}"
        )
    tokenizer = AutoTokenizer.from_pretrained(model_id)
    model = AutoModel.from_pretrained(model_id).eval()

    def encode(prompts):
        with torch.no_grad():
            tokens = tokenizer(list(prompts), padding=True, return_tensors="pt")
            out = model(**tokens)
        pooled = out.last_hidden_state.mean(dim=1)
        return pooled.numpy().astype(np.float64)

    return encode
