"""Adapter from pretrained mask/embedding models to the mf3d bundle format."""

from .bundle_format import AdapterError, rle_encode, write_bundle_dir, write_prompt_files
from .cli import AdapterConfig, encode_prompts, generate_bundle

__version__ = "0.1.0"

__all__ = [
    "AdapterError",
    "AdapterConfig",
    "encode_prompts",
    "generate_bundle",
    "rle_encode",
    "write_bundle_dir",
    "write_prompt_files",
    "__version__",
]
