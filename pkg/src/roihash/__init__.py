"""Dual-expert hashing for whole-image and region-of-interest retrieval.

Images are encoded to short binary codes by a small convolutional backbone
whose residual blocks mix a position-aware expert with a pooled
channel-attention expert under a retrieval-mode gate. Codes come from a
B-spline (Kolmogorov-Arnold) hash head trained with straight-through sign
binarization. Retrieval is hierarchical: packed-popcount Hamming search
over whole-image codes, then sliding-window rescoring of the candidates'
feature maps against a query bounding box.
"""

from .kanhash import HashCode, KanLayer, binarize_ste, bspline_basis, kan_forward
from .model import BackboneConfig, Model, RetrievalMode, load_checkpoint, save_checkpoint
from .retrieval import (
    BoundingBox,
    PackedCodeSet,
    RetrievalResult,
    WindowMatch,
    compute_map,
    hamming,
    load_codes,
    save_codes,
    top_k_global,
)
from .trainer import TrainConfig, train_all

__all__ = [
    "BackboneConfig",
    "BoundingBox",
    "HashCode",
    "KanLayer",
    "Model",
    "PackedCodeSet",
    "RetrievalMode",
    "RetrievalResult",
    "TrainConfig",
    "WindowMatch",
    "binarize_ste",
    "bspline_basis",
    "compute_map",
    "hamming",
    "kan_forward",
    "load_checkpoint",
    "load_codes",
    "save_checkpoint",
    "save_codes",
    "top_k_global",
    "train_all",
]

__version__ = "0.1.0"
