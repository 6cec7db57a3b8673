"""Receptive-field-exact patch localization with multi-branch CNNs.

Modules: ``rf`` (geometry), ``autodiff`` (tape autodiff), ``model``
(AnchorNet-T), ``localize`` (LIP and branch decisions), ``flops`` (cost
model), ``pipeline``/``serialization``/``cli`` (tooling).
"""

from .errors import (AnchorNetError, CheckpointError, ChecksumError, GeometryUnderflow, InvalidArgument,
                     NumericalError, OutOfBounds, ParseError, TrainingDiverged, VersionMismatch, VocabMismatch)
from .rf import LayerGeom, PatchRect, RFSummary, compose, map_location, output_size, patch_grid
from .localize import Heatmap, LipParams, PatchSet, decide_class, iou, lip, select_branch, top1_text_patch
from .model import AnchorNetT, ModelConfig, class_activation_map, total_loss
from .textcnn import TextCNN, TextCNNConfig
from .flops import BranchStats, model_flops, pipeline_ratio
from .stack import StackConfig, builtin_stack, load_stack
from .corpus import Corpus, load_corpus, make_planted_corpus
from .training import Schedule, train
from .serialization import Checkpoint, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AnchorNetError", "CheckpointError", "ChecksumError", "GeometryUnderflow", "InvalidArgument",
    "NumericalError", "OutOfBounds", "ParseError", "TrainingDiverged", "VersionMismatch", "VocabMismatch",
    "LayerGeom", "PatchRect", "RFSummary", "compose", "map_location", "output_size", "patch_grid",
    "Heatmap", "LipParams", "PatchSet", "decide_class", "iou", "lip", "select_branch", "top1_text_patch",
    "AnchorNetT", "ModelConfig", "class_activation_map", "total_loss", "TextCNN", "TextCNNConfig",
    "BranchStats", "model_flops", "pipeline_ratio", "StackConfig", "builtin_stack", "load_stack",
    "Corpus", "load_corpus", "make_planted_corpus", "Schedule", "train",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
]
