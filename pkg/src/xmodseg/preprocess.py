"""Deterministic conversion of raw scans into fixed-geometry sub-volumes.

Pipeline per case: reorient -> resample -> min-max intensity scaling ->
content-adaptive center crop/pad to a fixed in-plane size. Every geometric
parameter is captured in a CropRecord so predictions can be written back
in the original scan geometry.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .volumes import LabelMap, Volume, reorient, require_aligned


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing_mm: tuple[float, float, float] = (1.5, 0.41, 0.41)
    target_orientation: str = "LPS"
    crop_hw: tuple[int, int] = (256, 256)
    percentile: float = 75.0
    intensity_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if any(c <= 0 or c % 2 for c in self.crop_hw):
            raise ValueError(f"crop_hw must be positive and even, got {self.crop_hw}")
        if not 0.0 < self.percentile < 100.0:
            raise ValueError(f"percentile must be in (0, 100), got {self.percentile}")
        lo, hi = self.intensity_range
        if not lo < hi:
            raise ValueError(f"intensity_range must satisfy min < max, got {self.intensity_range}")
        if any(s <= 0 for s in self.target_spacing_mm):
            raise ValueError(f"target spacing must be positive, got {self.target_spacing_mm}")


@dataclass(frozen=True)
class CropRecord:
    """Geometry bookkeeping for inverting preprocess_case.

    Serialized as a JSON sidecar with these keys:
      source_id            case identifier
      original_shape       shape as loaded, before reorientation
      original_spacing     spacing as loaded
      original_orientation axis code as loaded
      oriented_shape       shape after reorient, before resampling
      oriented_spacing     spacing after reorient
      resampled_shape      shape after resampling, before crop
      target_spacing       resampling target spacing
      target_orientation   working-space axis code
      crop_center          in-plane (row, col) crop window center
      crop_start           in-plane (row, col) of the window origin
      crop_hw              in-plane window size
    """

    source_id: str
    original_shape: tuple[int, int, int]
    original_spacing: tuple[float, float, float]
    original_orientation: str
    oriented_shape: tuple[int, int, int]
    oriented_spacing: tuple[float, float, float]
    resampled_shape: tuple[int, int, int]
    target_spacing: tuple[float, float, float]
    target_orientation: str
    crop_center: tuple[int, int]
    crop_start: tuple[int, int]
    crop_hw: tuple[int, int]

    @classmethod
    def identity(cls, shape, spacing, orientation, source_id="") -> "CropRecord":
        """Record describing a no-op preprocess (used to finalize in place)."""
        shape = tuple(int(n) for n in shape)
        spacing = tuple(float(s) for s in spacing)
        return cls(
            source_id=source_id,
            original_shape=shape,
            original_spacing=spacing,
            original_orientation=orientation,
            oriented_shape=shape,
            oriented_spacing=spacing,
            resampled_shape=shape,
            target_spacing=spacing,
            target_orientation=orientation,
            crop_center=(shape[1] // 2, shape[2] // 2),
            crop_start=(0, 0),
            crop_hw=(shape[1], shape[2]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CropRecord":
        raw = json.loads(Path(path).read_text())
        fields = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
        return cls(**fields)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _grid_resample(data: np.ndarray, out_shape, scale, order: int) -> np.ndarray:
    """Sample `data` on a new grid; output voxel centers map to input index
    (i + 0.5) * scale - 0.5 per axis, with edge clamping."""
    axes = [
        (np.arange(n, dtype=np.float64) + 0.5) * s - 0.5
        for n, s in zip(out_shape, scale)
    ]
    coords = np.meshgrid(*axes, indexing="ij", sparse=False)
    return map_coordinates(data, coords, order=order, mode="nearest")


def resample(vol, target_spacing, mode: str | None = None):
    """Resample a Volume (linear) or LabelMap (nearest) to a new spacing.

    Output shape per axis is round(n * spacing / target), at least 1.
    """
    target = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target):
        raise ValueError(f"target spacing must be positive, got {target}")
    if mode is None:
        mode = "nearest" if isinstance(vol, LabelMap) else "linear"
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if isinstance(vol, LabelMap) and mode == "linear":
        raise ValueError("label maps must be resampled with mode='nearest'")
    if target == tuple(vol.spacing_mm):
        return vol

    in_shape = vol.shape
    out_shape = tuple(
        max(1, _round_half_up(n * s / t))
        for n, s, t in zip(in_shape, vol.spacing_mm, target)
    )
    scale = tuple(t / s for s, t in zip(vol.spacing_mm, target))
    order = 1 if mode == "linear" else 0
    data = _grid_resample(vol.data.astype(np.float64), out_shape, scale, order)
    if isinstance(vol, LabelMap):
        data = np.rint(data).astype(np.int16)
    else:
        data = data.astype(np.float32)
    return replace(vol, data=data, spacing_mm=target)


def minmax_scale(vol: Volume, intensity_range=(-1.0, 1.0)) -> Volume:
    """Affinely map [min(v), max(v)] onto the requested range.

    A constant volume cannot be scaled; it comes back all zeros with a
    'constant-input' flag set.
    """
    lo, hi = (float(x) for x in intensity_range)
    if not lo < hi:
        raise ValueError(f"invalid intensity range {intensity_range}")
    vmin = float(vol.data.min())
    vmax = float(vol.data.max())
    if vmax == vmin:
        data = np.zeros_like(vol.data)
        return replace(vol, data=data, flags=vol.flags + ("constant-input",))
    data = lo + (vol.data - vmin) / (vmax - vmin) * (hi - lo)
    data = np.clip(data, lo, hi).astype(np.float32)
    return replace(vol, data=data)


def percentile_center(vol: Volume, percentile: float = 75.0) -> tuple[int, int]:
    """In-plane centroid (row, col) of voxels above the intensity percentile.

    Falls back to the geometric image center if nothing is suprathreshold.
    """
    threshold = float(np.percentile(vol.data, percentile))
    mask = vol.data > threshold
    if not mask.any():
        _, rows, cols = vol.shape
        return _round_half_up((rows - 1) / 2), _round_half_up((cols - 1) / 2)
    _, rr, cc = np.nonzero(mask)
    return _round_half_up(float(rr.mean())), _round_half_up(float(cc.mean()))


def window_start(center: tuple[int, int], crop_hw: tuple[int, int]) -> tuple[int, int]:
    return center[0] - crop_hw[0] // 2, center[1] - crop_hw[1] // 2


def center_crop_pad(vol, center: tuple[int, int], crop_hw: tuple[int, int], fill):
    """Crop/pad in-plane to crop_hw around `center`; the slice axis is untouched.

    Out-of-bounds regions are filled with `fill`.
    """
    n_slices, rows, cols = vol.shape
    h, w = crop_hw
    r0, c0 = window_start(center, crop_hw)
    if isinstance(vol, LabelMap):
        out = np.full((n_slices, h, w), int(fill), dtype=np.int16)
    else:
        out = np.full((n_slices, h, w), float(fill), dtype=np.float32)
    src_r = slice(max(r0, 0), min(r0 + h, rows))
    src_c = slice(max(c0, 0), min(c0 + w, cols))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        dst_r = slice(src_r.start - r0, src_r.stop - r0)
        dst_c = slice(src_c.start - c0, src_c.stop - c0)
        out[:, dst_r, dst_c] = vol.data[:, src_r, src_c]
    return replace(vol, data=out)


def preprocess_case(
    vol: Volume,
    label: LabelMap | None,
    cfg: PreprocessConfig,
) -> tuple[Volume, LabelMap | None, CropRecord]:
    """Reorient, resample, scale, and crop one case (and its label, if any)."""
    if label is not None:
        require_aligned(vol, label)

    oriented = reorient(vol, cfg.target_orientation)
    resampled = resample(oriented, cfg.target_spacing_mm, "linear")
    scaled = minmax_scale(resampled, cfg.intensity_range)
    center = percentile_center(scaled, cfg.percentile)
    cropped = center_crop_pad(scaled, center, cfg.crop_hw, fill=cfg.intensity_range[0])

    record = CropRecord(
        source_id=vol.source_id,
        original_shape=vol.shape,
        original_spacing=vol.spacing_mm,
        original_orientation=vol.orientation,
        oriented_shape=oriented.shape,
        oriented_spacing=oriented.spacing_mm,
        resampled_shape=resampled.shape,
        target_spacing=tuple(cfg.target_spacing_mm),
        target_orientation=cfg.target_orientation,
        crop_center=center,
        crop_start=window_start(center, cfg.crop_hw),
        crop_hw=tuple(cfg.crop_hw),
    )

    out_label = None
    if label is not None:
        lbl_oriented = reorient(label, cfg.target_orientation)
        lbl_resampled = resample(lbl_oriented, cfg.target_spacing_mm, "nearest")
        out_label = center_crop_pad(lbl_resampled, center, cfg.crop_hw, fill=0)
    return cropped, out_label, record


def invert_preprocess(label: LabelMap, record: CropRecord) -> LabelMap:
    """Map a label from preprocessed geometry back to the original scan grid.

    Inverse order: un-crop -> nearest resample to the pre-resampling shape ->
    reorient to the original axis code.
    """
    n_slices, h, w = label.shape
    exp = (record.resampled_shape[0], *record.crop_hw)
    if (n_slices, h, w) != exp:
        raise ValueError(f"label shape {label.shape} does not match crop record {exp}")

    # un-crop into the resampled grid
    full = np.zeros(record.resampled_shape, dtype=np.int16)
    r0, c0 = record.crop_start
    rows, cols = record.resampled_shape[1:]
    src_r = slice(max(r0, 0), min(r0 + h, rows))
    src_c = slice(max(c0, 0), min(c0 + w, cols))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        dst_r = slice(src_r.start - r0, src_r.stop - r0)
        dst_c = slice(src_c.start - c0, src_c.stop - c0)
        full[:, src_r, src_c] = label.data[:, dst_r, dst_c]

    # nearest resample back to the oriented (pre-resampling) grid
    scale = tuple(
        o / t for o, t in zip(record.oriented_spacing, record.target_spacing)
    )
    data = _grid_resample(full.astype(np.float64), record.oriented_shape, scale, order=0)
    restored = LabelMap(
        data=np.rint(data).astype(np.int16),
        spacing_mm=record.oriented_spacing,
        orientation=record.target_orientation,
        source_id=label.source_id,
        classes=label.classes,
    )
    return reorient(restored, record.original_orientation)
