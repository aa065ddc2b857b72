"""Deterministic two-domain synthetic dataset for desk-scale runs.

Each case carries a two-lobed bright tumor (the lobes touch and are
labeled separately) plus a small distant sphere, on a noisy background.
The target domain inverts the contrast, uses a different noise scale, and
adds a mild linear bias field, so the source-to-target intensity
relationship is a known monotone map plus noise and translation quality
is measurable against ground truth. Labels are analytic, never derived
from thresholded noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volumes import LabelMap, Volume

DOMAINS = ("src", "tgt")

# per-domain base intensities: background, intra lobe, extra lobe, small sphere
_LEVELS = {
    "src": (-0.60, 0.70, 0.45, 0.85),
    "tgt": (0.35, -0.65, -0.40, -0.80),
}
_NOISE = {"src": 0.05, "tgt": 0.08}
MIN_SHAPE = (16, 32, 32)


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple[int, int, int] = (32, 64, 64)
    n_cases: int = 1
    seed: int = 0
    domain: str = "src"
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: str = "LPS"

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.n_cases < 1:
            raise ValueError("n_cases must be at least 1")
        if any(s < m for s, m in zip(self.shape, MIN_SHAPE)):
            raise ValueError(
                f"shape {self.shape} too small to place structures (min {MIN_SHAPE})"
            )


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def _make_case(shape, domain: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    ns, nr, nc = shape
    plane = min(nr, nc)

    # intra lobe: sphere-ish; extra lobe: larger ellipsoid offset along cols
    r_intra = rng.uniform(0.09, 0.12) * plane
    r_extra = rng.uniform(0.12, 0.16) * plane
    z_scale = rng.uniform(0.55, 0.75)  # flatter along the slice axis
    cz = ns / 2 + rng.uniform(-1.5, 1.5)
    cr = nr * rng.uniform(0.40, 0.55)
    cc = nc * rng.uniform(0.35, 0.45)
    offset = (r_intra + r_extra) * rng.uniform(0.55, 0.75)

    intra = _ellipsoid(shape, (cz, cr, cc), (r_intra * z_scale * 1.6, r_intra, r_intra))
    extra = _ellipsoid(
        shape, (cz, cr, cc + offset), (r_extra * z_scale * 1.6, r_extra, r_extra)
    )

    r_coch = rng.uniform(2.2, 3.2)
    tumor_extent = offset / 2 + max(r_intra, r_extra)
    for _ in range(200):
        pz = rng.uniform(ns * 0.3, ns * 0.7)
        pr = rng.uniform(nr * 0.15, nr * 0.85)
        pc = rng.uniform(nc * 0.6, nc * 0.9)
        if np.hypot(pr - cr, pc - (cc + offset / 2)) > tumor_extent + r_coch + 1.5:
            break
    else:
        raise RuntimeError("could not place the small structure away from the tumor")
    cochlea = _ellipsoid(shape, (pz, pr, pc), (r_coch * 0.9, r_coch, r_coch))

    label = np.zeros(shape, dtype=np.int16)
    label[extra] = 2
    label[intra] = 1  # intra wins where the touching lobes overlap
    label[cochlea] = 3
    if not all((label == c).any() for c in (1, 2, 3)):
        raise RuntimeError("degenerate phantom: a structure vanished")

    bg, v_intra, v_extra, v_coch = _LEVELS[domain]
    data = np.full(shape, bg, dtype=np.float64)
    data[label == 1] = v_intra
    data[label == 2] = v_extra
    data[label == 3] = v_coch
    data += rng.normal(0.0, _NOISE[domain], size=shape)
    if domain == "tgt":
        coeffs = rng.uniform(-0.12, 0.12, size=3)
        zz, rr, cc_ = np.meshgrid(
            np.linspace(-0.5, 0.5, ns),
            np.linspace(-0.5, 0.5, nr),
            np.linspace(-0.5, 0.5, nc),
            indexing="ij",
        )
        data += coeffs[0] * zz + coeffs[1] * rr + coeffs[2] * cc_
    return data.astype(np.float32), label


def generate_phantoms(cfg: PhantomConfig) -> list[tuple[Volume, LabelMap]]:
    """Seeded generation of n_cases (Volume, LabelMap) pairs.

    Target-domain label maps are returned too; callers decide whether to
    withhold them as held-out ground truth.
    """
    root = np.random.SeedSequence([cfg.seed, DOMAINS.index(cfg.domain)])
    cases = []
    for idx, child in enumerate(root.spawn(cfg.n_cases)):
        rng = np.random.default_rng(child)
        data, label = _make_case(cfg.shape, cfg.domain, rng)
        case_id = f"{cfg.domain}_{idx:03d}"
        vol = Volume(
            data=data,
            spacing_mm=cfg.spacing_mm,
            orientation=cfg.orientation,
            source_id=case_id,
        )
        lbl = LabelMap(
            data=label,
            spacing_mm=cfg.spacing_mm,
            orientation=cfg.orientation,
            source_id=case_id,
        )
        cases.append((vol, lbl))
    return cases
