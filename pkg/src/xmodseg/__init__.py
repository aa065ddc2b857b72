"""Translate-then-segment toolkit for unpaired cross-modality 3D segmentation."""

from .inference import InferenceConfig, finalize_labels, predict_volume, tile_positions
from .losses import ContrastConfig, PatchFeatureSet
from .metrics import RegionReport, assd, dsc, evaluate_case
from .phantom import PhantomConfig, generate_phantoms
from .preprocess import CropRecord, PreprocessConfig, invert_preprocess, preprocess_case
from .segmenter import SegConfig, SegSchedule, build_segmenter, split_folds, train_segmenter
from .self_training import generate_pseudo_labels, self_train
from .translators import (
    GeneratorSpec,
    TrainSchedule,
    TranslatorBundle,
    generate_multistyle_dataset,
    make_slice_dataset,
    train_translator,
    translate_volume,
)
from .volumes import LabelMap, Volume, load_labelmap, load_volume, reorient, save_volume

__version__ = "0.1.0"

__all__ = [
    "ContrastConfig",
    "CropRecord",
    "GeneratorSpec",
    "InferenceConfig",
    "LabelMap",
    "PatchFeatureSet",
    "PhantomConfig",
    "PreprocessConfig",
    "RegionReport",
    "SegConfig",
    "SegSchedule",
    "TrainSchedule",
    "TranslatorBundle",
    "Volume",
    "assd",
    "build_segmenter",
    "dsc",
    "evaluate_case",
    "finalize_labels",
    "generate_multistyle_dataset",
    "generate_phantoms",
    "generate_pseudo_labels",
    "invert_preprocess",
    "load_labelmap",
    "load_volume",
    "make_slice_dataset",
    "predict_volume",
    "preprocess_case",
    "reorient",
    "save_volume",
    "self_train",
    "split_folds",
    "tile_positions",
    "train_segmenter",
    "train_translator",
    "translate_volume",
]
