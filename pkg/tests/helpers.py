"""Shared test oracles, independent of the library code they check."""

from __future__ import annotations

import gzip
import struct

import numpy as np
import torch


def finite_difference_gradients(fn, tensors, step=1e-3):
    """Central finite differences of scalar fn w.r.t. each float64 tensor."""
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat = t.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def relative_gradient_error(analytic, numeric) -> float:
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    denom = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / denom


def write_nifti_independent(path, data: np.ndarray, spacing, code: str):
    """Write a NIfTI-1 file from scratch with struct.pack, bypassing the library.

    The sform is built directly from the axis code: letter k of `code` names
    the RAS+ direction data axis k increases toward.
    """
    letter_axes = {
        "R": (0, 1), "L": (0, -1),
        "A": (1, 1), "P": (1, -1),
        "S": (2, 1), "I": (2, -1),
    }
    dtypes = {np.dtype(np.float32): 16, np.dtype(np.int16): 4, np.dtype(np.float64): 64}
    data = np.asarray(data)
    srow = np.zeros((3, 4))
    for axis, letter in enumerate(code):
        world, sign = letter_axes[letter]
        srow[world, axis] = sign * spacing[axis]

    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, dtypes[data.dtype], data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<2h", hdr, 252, 0, 2)
    struct.pack_into("<4f", hdr, 280, *srow[0])
    struct.pack_into("<4f", hdr, 296, *srow[1])
    struct.pack_into("<4f", hdr, 312, *srow[2])
    hdr[344:348] = b"n+1\x00"
    payload = bytes(hdr) + b"\x00" * 4 + data.tobytes(order="F")
    if str(path).endswith(".gz"):
        with gzip.open(path, "wb") as fh:
            fh.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)


def decode_axcodes_independent(affine: np.ndarray) -> str:
    """Independent affine -> axis-code decoder (per-column dominant world axis)."""
    names = np.array([["L", "R"], ["P", "A"], ["I", "S"]])
    letters = []
    for axis in range(3):
        col = affine[:3, axis]
        world = int(np.argmax(np.abs(col)))
        letters.append(names[world][1 if col[world] > 0 else 0])
    return "".join(letters)


def reorient_bruteforce(data: np.ndarray, src_code: str, dst_code: str) -> np.ndarray:
    """Voxel-by-voxel coordinate remap oracle for reorientation."""
    letter_axes = {
        "R": (0, 1), "L": (0, -1),
        "A": (1, 1), "P": (1, -1),
        "S": (2, 1), "I": (2, -1),
    }
    src = [letter_axes[c] for c in src_code]
    dst = [letter_axes[c] for c in dst_code]
    perm = []
    flip = []
    for world, sign in dst:
        a = next(i for i, (w, _) in enumerate(src) if w == world)
        perm.append(a)
        flip.append(src[a][1] != sign)
    out_shape = tuple(data.shape[p] for p in perm)
    out = np.empty(out_shape, dtype=data.dtype)
    for idx in np.ndindex(out_shape):
        src_idx = [0, 0, 0]
        for out_axis, (p, f) in enumerate(zip(perm, flip)):
            i = idx[out_axis]
            src_idx[p] = data.shape[p] - 1 - i if f else i
        out[idx] = data[tuple(src_idx)]
    return out


def trilinear_oracle(data: np.ndarray, coord) -> float:
    """Scalar trilinear interpolation with edge clamping."""
    out_val = 0.0
    base = []
    frac = []
    for x, n in zip(coord, data.shape):
        x = min(max(x, 0.0), n - 1.0)
        i0 = int(np.floor(x))
        i0 = min(i0, n - 1)
        base.append(i0)
        frac.append(x - i0)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                w = (
                    (frac[0] if dz else 1 - frac[0])
                    * (frac[1] if dy else 1 - frac[1])
                    * (frac[2] if dx else 1 - frac[2])
                )
                if w == 0.0:
                    continue
                i = min(base[0] + dz, data.shape[0] - 1)
                j = min(base[1] + dy, data.shape[1] - 1)
                k = min(base[2] + dx, data.shape[2] - 1)
                out_val += w * float(data[i, j, k])
    return out_val


def assd_bruteforce(pred: np.ndarray, gt: np.ndarray, spacing) -> float | None:
    """O(n^2) all-pairs surface distance oracle with 6-connectivity surfaces."""
    def surface(mask):
        mask = np.asarray(mask, dtype=bool)
        pts = []
        for idx in np.argwhere(mask):
            on_surface = False
            for axis in range(3):
                for d in (-1, 1):
                    n = idx.copy()
                    n[axis] += d
                    if (n < 0).any() or (n >= np.array(mask.shape)).any():
                        on_surface = True
                    elif not mask[tuple(n)]:
                        on_surface = True
            if on_surface:
                pts.append(idx)
        return np.array(pts, dtype=np.float64)

    if not np.asarray(pred, bool).any() or not np.asarray(gt, bool).any():
        return None
    sp = surface(pred) * np.asarray(spacing)
    sg = surface(gt) * np.asarray(spacing)
    d_pg = [np.sqrt(((sg - p) ** 2).sum(axis=1)).min() for p in sp]
    d_gp = [np.sqrt(((sp - g) ** 2).sum(axis=1)).min() for g in sg]
    return float((np.sum(d_pg) + np.sum(d_gp)) / (len(sp) + len(sg)))
