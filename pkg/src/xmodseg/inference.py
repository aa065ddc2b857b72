"""Sliding-window prediction, overlap blending, ensembling, and
inversion of predictions back to the original scan geometry."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch

from .preprocess import CropRecord, invert_preprocess
from .segmenter import SegModel
from .volumes import LabelMap, Volume


@dataclass(frozen=True)
class InferenceConfig:
    overlap: float = 0.5
    blend: str = "gaussian"
    flip_tta: bool = False
    pad_value: float = -1.0

    def __post_init__(self):
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.blend not in ("gaussian", "uniform"):
            raise ValueError(f"blend must be gaussian or uniform, got {self.blend!r}")


def _axis_origins(size: int, patch: int, overlap: float) -> list[int]:
    if size <= patch:
        return [0]
    stride = max(1, math.ceil(patch * (1.0 - overlap)))
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] != size - patch:
        origins.append(size - patch)
    return origins


def tile_positions(
    vol_shape: tuple[int, int, int],
    patch: tuple[int, int, int],
    overlap: float,
) -> list[tuple[int, int, int]]:
    """Window origins covering every voxel; the final window per axis is
    clamped flush to the boundary. Volumes smaller than the patch get a
    single origin at 0 (callers pad)."""
    per_axis = [
        _axis_origins(s, p, overlap) for s, p in zip(vol_shape, patch)
    ]
    return list(itertools.product(*per_axis))


def blend_weights(patch: tuple[int, int, int], blend: str) -> np.ndarray:
    """Per-voxel stitching weights for one window.

    Gaussian mode is center-heavy (sigma = patch/8 per axis); uniform is
    all ones. Weights are strictly positive, so constant predictions
    stitch exactly in both modes.
    """
    if blend == "uniform":
        return np.ones(patch, dtype=np.float32)
    axes = []
    for p in patch:
        x = np.arange(p, dtype=np.float64)
        center = (p - 1) / 2.0
        sigma = max(p / 8.0, 1e-3)
        axes.append(np.exp(-0.5 * ((x - center) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w = np.maximum(w, w.max() * 1e-6)
    return w.astype(np.float32)


_FLIP_SETS = [axes for r in range(4) for axes in itertools.combinations((0, 1, 2), r)]


@torch.no_grad()
def _predict_single(model: SegModel, data: np.ndarray, cfg: InferenceConfig,
                    device: str) -> np.ndarray:
    patch = model.config.patch_size
    shape = data.shape
    pads = [(0, max(0, p - s)) for s, p in zip(shape, patch)]
    padded = np.pad(data, pads, constant_values=cfg.pad_value) if any(h for _, h in pads) else data

    weights = blend_weights(patch, cfg.blend)
    n_classes = model.config.n_classes
    acc = np.zeros((n_classes, *padded.shape), dtype=np.float32)
    acc_w = np.zeros(padded.shape, dtype=np.float32)
    for origin in tile_positions(padded.shape, patch, cfg.overlap):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        x = torch.tensor(padded[sl][None, None], dtype=torch.float32, device=device)
        logits = model.predict_logits(x)
        probs = torch.softmax(logits, dim=1)[0].cpu().numpy()
        acc[(slice(None), *sl)] += probs * weights[None]
        acc_w[sl] += weights
    probs = acc / acc_w[None]
    return probs[:, : shape[0], : shape[1], : shape[2]]


def predict_volume(
    models: list[SegModel],
    vol: Volume,
    cfg: InferenceConfig,
    device: str = "cpu",
) -> np.ndarray:
    """Ensembled class probability map, shape (n_classes, *vol.shape).

    Per model, softmax patch outputs are accumulated with blend weights and
    normalized; the ensemble is the unweighted mean over models. Optional
    flip test-time augmentation averages all 8 axis-flip variants.
    """
    if not models:
        raise ValueError("need at least one model")
    n_classes = models[0].config.n_classes
    if any(m.config.n_classes != n_classes for m in models):
        raise ValueError("ensemble members disagree on the class count")

    per_model = []
    for model in models:
        if cfg.flip_tta:
            variants = []
            for axes in _FLIP_SETS:
                flipped = np.flip(vol.data, axes).copy() if axes else vol.data
                probs = _predict_single(model, flipped, cfg, device)
                if axes:
                    probs = np.flip(probs, tuple(a + 1 for a in axes))
                variants.append(probs)
            per_model.append(np.mean(variants, axis=0))
        else:
            per_model.append(_predict_single(model, vol.data, cfg, device))
    return np.mean(per_model, axis=0, dtype=np.float32)


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Voxelwise argmax; ties break toward the lower class index."""
    return np.argmax(probs, axis=0).astype(np.int16)


def finalize_labels(
    probs: np.ndarray,
    crop_record: CropRecord | None,
    classes: tuple[int, ...] = (0, 1, 2, 3),
) -> LabelMap:
    """Argmax, then undo the preprocessing geometry via the CropRecord."""
    if crop_record is None:
        raise ValueError("missing CropRecord: cannot restore original geometry")
    labels = argmax_labels(probs)
    pred = LabelMap(
        data=labels,
        spacing_mm=crop_record.target_spacing,
        orientation=crop_record.target_orientation,
        source_id=crop_record.source_id,
        classes=classes,
    )
    return invert_preprocess(pred, crop_record)
