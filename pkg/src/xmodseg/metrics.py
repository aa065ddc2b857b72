"""Overlap and surface-distance evaluation with challenge-style region semantics.

Regions: intra-meatal (class 1), extra-meatal (class 2), their union as the
full tumor, and cochlea (class 3). Surfaces use 6-connectivity with the
array border counting as background; distances are exact Euclidean in mm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from .volumes import LabelMap, require_aligned

REGIONS: dict[str, tuple[int, ...]] = {
    "intra": (1,),
    "extra": (2,),
    "vs_union": (1, 2),
    "cochlea": (3,),
}

_SIX_CONN = generate_binary_structure(3, 1)


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap 2|P&G| / (|P|+|G|); 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (p + g)


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one background 6-neighbor; the volume
    border counts as background."""
    mask = np.asarray(mask, dtype=bool)
    eroded = binary_erosion(mask, structure=_SIX_CONN, border_value=0)
    return mask & ~eroded


def assd(pred: np.ndarray, gt: np.ndarray, spacing_mm) -> float | None:
    """Average symmetric surface distance in mm; None if either mask is empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return None
    sp = surface_mask(pred)
    sg = surface_mask(gt)
    dist_to_g = distance_transform_edt(~sg, sampling=spacing_mm)
    dist_to_p = distance_transform_edt(~sp, sampling=spacing_mm)
    total = dist_to_g[sp].sum() + dist_to_p[sg].sum()
    return float(total / (sp.sum() + sg.sum()))


@dataclass(frozen=True)
class RegionScore:
    dsc: float
    assd_mm: float | None


@dataclass(frozen=True)
class RegionReport:
    scores: dict[str, RegionScore]

    def as_dict(self) -> dict:
        return {
            name: {"dsc": s.dsc, "assd_mm": s.assd_mm}
            for name, s in self.scores.items()
        }


def evaluate_case(pred: LabelMap, gt: LabelMap) -> RegionReport:
    """Per-region Dice and ASSD for one aligned prediction/label pair."""
    require_aligned(pred, gt)
    scores = {}
    for name, classes in REGIONS.items():
        p = np.isin(pred.data, classes)
        g = np.isin(gt.data, classes)
        scores[name] = RegionScore(dsc=dsc(p, g), assd_mm=assd(p, g, gt.spacing_mm))
    return RegionReport(scores=scores)


def summarize(reports: dict[str, RegionReport]) -> dict:
    """Mean and std per region; undefined ASSD values are excluded and counted."""
    summary: dict = {}
    for region in REGIONS:
        dscs = [r.scores[region].dsc for r in reports.values()]
        assds = [
            r.scores[region].assd_mm
            for r in reports.values()
            if r.scores[region].assd_mm is not None
        ]
        summary[region] = {
            "dsc_mean": float(np.mean(dscs)) if dscs else None,
            "dsc_std": float(np.std(dscs)) if dscs else None,
            "assd_mean": float(np.mean(assds)) if assds else None,
            "assd_std": float(np.std(assds)) if assds else None,
            "assd_undefined": len(reports) - len(assds),
        }
    return summary


def write_report(path: str | Path, reports: dict[str, RegionReport]) -> None:
    """Write a per-case table plus mean/std rows, and a JSON twin."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = summarize(reports)

    col = "{:<24}" + "{:>10}{:>10}" * len(REGIONS)
    header = ["case"]
    for region in REGIONS:
        header += [f"{region[:7]}", "assd"]
    lines = [col.format(*header)]

    def fmt(v, nd=4):
        return "n/a" if v is None else f"{v:.{nd}f}"

    for case in sorted(reports):
        row = [case]
        for region in REGIONS:
            s = reports[case].scores[region]
            row += [fmt(s.dsc), fmt(s.assd_mm, 3)]
        lines.append(col.format(*row))
    mean_row, std_row = ["mean"], ["std"]
    for region in REGIONS:
        s = summary[region]
        mean_row += [fmt(s["dsc_mean"]), fmt(s["assd_mean"], 3)]
        std_row += [fmt(s["dsc_std"]), fmt(s["assd_std"], 3)]
    lines.append(col.format(*mean_row))
    lines.append(col.format(*std_row))
    path.write_text("\n".join(lines) + "\n")

    payload = {
        "cases": {case: report.as_dict() for case, report in sorted(reports.items())},
        "summary": summary,
    }
    path.with_suffix(".json").write_text(json.dumps(payload, indent=2) + "\n")
