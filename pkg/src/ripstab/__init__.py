"""Temporal stabilization and evaluation of per-frame instance segmentation mask streams."""

__version__ = "0.1.0"

from .maskcore import BinaryMask, FrameGeometry, Polygon, iou, rasterize, rle_decode, rle_encode
from .tca import Stabilizer, TcaConfig, threshold_hysteresis
from .tracker import associate, hungarian
from .metrics import average_precision, cohen_kappa, evaluate_stream, f_beta, match_instances

__all__ = [
    "BinaryMask", "FrameGeometry", "Polygon", "iou", "rasterize", "rle_decode", "rle_encode",
    "Stabilizer", "TcaConfig", "threshold_hysteresis", "associate", "hungarian",
    "average_precision", "cohen_kappa", "evaluate_stream", "f_beta", "match_instances",
]
