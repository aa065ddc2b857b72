"""Volumes and label maps with anatomical orientation metadata.

Array layout is (slices, rows, cols). The orientation code assigns one
anatomical direction letter per array axis, in that order: the letter is
the direction the index increases toward ("LPS" means axis 0 grows toward
the patient's Left, axis 1 toward Posterior, axis 2 toward Superior).
Only orthogonal geometries are supported; oblique affines are rejected.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nifti
from .nifti import HeaderError, NonVolumetricError

LABEL_CLASSES = (0, 1, 2, 3)

# letter -> (world axis, sign toward which the index increases), RAS+ world
_LETTER_AXES = {
    "R": (0, 1), "L": (0, -1),
    "A": (1, 1), "P": (1, -1),
    "S": (2, 1), "I": (2, -1),
}

VALID_CODES = frozenset(
    "".join(letters)
    for letters in itertools.permutations("RLAPSI", 3)
    if len({_LETTER_AXES[c][0] for c in letters}) == 3
)


class OrientationError(ValueError):
    """Orientation code is not one of the 48 valid 3-letter axis codes."""


class ObliqueAffineError(ValueError):
    """Affine has off-axis components; only orthogonal geometry is supported."""


class NonFiniteDataError(ValueError):
    """Volume payload contains NaN or infinite values."""


def check_code(code: str) -> str:
    if code not in VALID_CODES:
        raise OrientationError(f"invalid orientation code {code!r}")
    return code


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 strictly positive values, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar image with spacing and orientation metadata."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    orientation: str
    source_id: str = ""
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data), dtype=np.float32)
        if arr.ndim != 3 or any(n < 1 for n in arr.shape):
            raise NonVolumetricError(f"not a 3D volume: shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteDataError(f"volume {self.source_id!r} contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))
        check_code(self.orientation)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """Integer class mask aligned to a Volume; classes 0..3."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    orientation: str
    source_id: str = ""
    classes: tuple[int, ...] = LABEL_CLASSES

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.equal(np.mod(arr, 1), 0).all():
                raise ValueError("label payload has non-integral values")
        arr = np.ascontiguousarray(arr, dtype=np.int16)
        if arr.ndim != 3 or any(n < 1 for n in arr.shape):
            raise NonVolumetricError(f"not a 3D label map: shape {arr.shape}")
        present = np.unique(arr)
        if not np.isin(present, self.classes).all():
            raise ValueError(f"label values {present} outside classes {self.classes}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))
        check_code(self.orientation)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def require_aligned(a: Volume | LabelMap, b: Volume | LabelMap) -> None:
    if a.shape != b.shape:
        raise ValueError(f"geometry mismatch: shapes {a.shape} vs {b.shape}")
    if not np.allclose(a.spacing_mm, b.spacing_mm, rtol=1e-5, atol=1e-6):
        raise ValueError(f"geometry mismatch: spacings {a.spacing_mm} vs {b.spacing_mm}")
    if a.orientation != b.orientation:
        raise ValueError(f"geometry mismatch: orientations {a.orientation} vs {b.orientation}")


def affine_from_code(code: str, spacing) -> np.ndarray:
    """Build the RAS+ voxel-to-world affine for an axis code and spacing."""
    check_code(code)
    spacing = _check_spacing(spacing)
    affine = np.zeros((4, 4))
    affine[3, 3] = 1.0
    for axis, letter in enumerate(code):
        world, sign = _LETTER_AXES[letter]
        affine[world, axis] = sign * spacing[axis]
    return affine


def code_from_affine(affine: np.ndarray) -> tuple[str, tuple[float, float, float]]:
    """Decode orientation letters and spacing from an orthogonal affine."""
    rot = np.asarray(affine, dtype=np.float64)[:3, :3]
    letters = []
    spacing = []
    used = set()
    for axis in range(3):
        col = rot[:, axis]
        norm = np.linalg.norm(col)
        if norm <= 0:
            raise ObliqueAffineError("affine column has zero length")
        world = int(np.argmax(np.abs(col)))
        off_axis = np.delete(np.abs(col), world)
        if off_axis.max() > 1e-4 * norm:
            raise ObliqueAffineError(
                f"oblique affine: column {axis} = {col} is not axis-aligned"
            )
        sign = 1 if col[world] > 0 else -1
        for letter, (w, s) in _LETTER_AXES.items():
            if (w, s) == (world, sign):
                letters.append(letter)
        used.add(world)
        # single-file headers store floats; round off float32 noise
        spacing.append(round(float(norm), 6))
    if len(used) != 3:
        raise ObliqueAffineError("affine does not span three distinct world axes")
    return "".join(letters), tuple(spacing)


def _axis_transform(source: str, target: str) -> tuple[tuple[int, ...], tuple[bool, ...]]:
    """Permutation and flips taking data in `source` orientation to `target`."""
    src = [_LETTER_AXES[c] for c in check_code(source)]
    tgt = [_LETTER_AXES[c] for c in check_code(target)]
    perm, flips = [], []
    for world, sign in tgt:
        axis = next(a for a, (w, _) in enumerate(src) if w == world)
        perm.append(axis)
        flips.append(src[axis][1] != sign)
    return tuple(perm), tuple(flips)


def reorient(vol, target: str):
    """Permute and flip axes so the voxel order matches `target`.

    Works on Volume and LabelMap; metadata is permuted consistently and
    the multiset of voxel values is preserved exactly.
    """
    check_code(target)
    if vol.orientation == target:
        return vol
    perm, flips = _axis_transform(vol.orientation, target)
    data = np.transpose(vol.data, perm)
    flip_axes = [i for i, f in enumerate(flips) if f]
    if flip_axes:
        data = np.flip(data, axis=flip_axes)
    spacing = tuple(vol.spacing_mm[p] for p in perm)
    return replace(vol, data=data.copy(), spacing_mm=spacing, orientation=target)


def load_volume(path: str | Path) -> Volume:
    """Load a volume; spacing and orientation come from the file's affine."""
    path = Path(path)
    data, affine = nifti.read(path)
    code, spacing = code_from_affine(affine)
    return Volume(
        data=np.asarray(data, dtype=np.float32),
        spacing_mm=spacing,
        orientation=code,
        source_id=stem(path),
    )


def load_labelmap(path: str | Path, classes: tuple[int, ...] = LABEL_CLASSES) -> LabelMap:
    """Load an integer label map; floating payloads must be integral."""
    path = Path(path)
    data, affine = nifti.read(path)
    code, spacing = code_from_affine(affine)
    return LabelMap(
        data=data,
        spacing_mm=spacing,
        orientation=code,
        source_id=stem(path),
        classes=classes,
    )


def save_volume(vol: Volume | LabelMap, path: str | Path) -> None:
    """Write a Volume (float32) or LabelMap (int16) plus its affine."""
    affine = affine_from_code(vol.orientation, vol.spacing_mm)
    if isinstance(vol, LabelMap):
        nifti.write(path, vol.data.astype(np.int16), affine)
    else:
        nifti.write(path, vol.data.astype(np.float32), affine)


def stem(path: str | Path) -> str:
    """Filename without .nii / .nii.gz extensions."""
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(name).stem
