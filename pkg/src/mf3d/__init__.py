"""Open-vocabulary 3D segmentation engine.

Renders a point-based model from a multi-view rig, lifts externally
produced 2D mask proposals into 3D through the per-pixel point-index map,
and fuses them into per-point labels by cosine classification against text
embeddings. All neural models live behind the proposal-bundle interchange
format, so this package is fully testable offline.
"""

from .camera import CameraPose, Intrinsics, fit_rig_to_model, make_ring_rig, project, unproject
from .errors import BundleError, FormatError, InvariantError, Mf3dError, PlyParseError, UsageError
from .fusion import (LabelField, LogitMatrix, SegmentConfig, TextEmbeddingSet, assign_labels,
                     classify, fuse, segment)
from .geom import (PointSet, RigidTransform, TriMesh, apply_transform, load_model,
                   mesh_vertices_as_points, save_model)
from .metrics import ConfusionMatrix, compute_metrics, confusion, views_ablation
from .proposal import (Mask2D, Mask3D, MaskEmbedding, ProposalBundle, lift_mask, read_bundle,
                       stack_masks, write_bundle)
from .render import RenderOutput, rasterize_mesh, rasterize_points, visible_points

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "Intrinsics", "fit_rig_to_model", "make_ring_rig", "project", "unproject",
    "BundleError", "FormatError", "InvariantError", "Mf3dError", "PlyParseError", "UsageError",
    "LabelField", "LogitMatrix", "SegmentConfig", "TextEmbeddingSet", "assign_labels",
    "classify", "fuse", "segment",
    "PointSet", "RigidTransform", "TriMesh", "apply_transform", "load_model",
    "mesh_vertices_as_points", "save_model",
    "ConfusionMatrix", "compute_metrics", "confusion", "views_ablation",
    "Mask2D", "Mask3D", "MaskEmbedding", "ProposalBundle", "lift_mask", "read_bundle",
    "stack_masks", "write_bundle",
    "RenderOutput", "rasterize_mesh", "rasterize_points", "visible_points",
    "__version__",
]
