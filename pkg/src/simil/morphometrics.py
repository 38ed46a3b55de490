"""Per-nucleus morphometry and its per-type aggregation.

A nucleus is a set of pixels from the instance map.  Shape descriptors come
from continuous central moments (each pixel treated as a unit square, which
adds 1/12 to both axis-aligned second moments and keeps eccentricity inside
[0, 1) even for one-pixel-thick shapes).  Perimeter is the 4-connected crack
length calibrated by pi/4 (Cauchy-Crofton), which makes the isoperimetric
roundness of a rasterized disk come out at 1; roundness is clamped to (0, 1]
because axis-aligned rectangles would otherwise exceed 1.

Texture is a gray-level co-occurrence matrix over 256 levels restricted to
pixel pairs that both lie inside the mask, symmetric and normalized, averaged
over the offsets {(0,1),(1,0),(1,1),(1,-1)}.
"""

from __future__ import annotations

import numpy as np

from .featio import MORPH_PROPS, NucleusTypeSet

GLCM_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))
_LEVELS = 256

# cached (i - j) weight tables for the four texture properties
_I = np.arange(_LEVELS, dtype=np.float64)
_DIFF = _I[:, None] - _I[None, :]
_W_CONTRAST = _DIFF ** 2
_W_DISSIM = np.abs(_DIFF)
_W_HOMOG = 1.0 / (1.0 + _DIFF ** 2)


def shape_props(ys, xs):
    """(area, eccentricity, roundness, orientation) for one pixel set."""
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    area = ys.size
    if area == 0:
        raise ValueError("empty pixel set")
    if area == 1:
        return 1.0, 0.0, 1.0, 0.0
    # continuous central moments: point moments + unit-square self term
    mxx = xs.var() + 1.0 / 12.0
    myy = ys.var() + 1.0 / 12.0
    mxy = ((xs - xs.mean()) * (ys - ys.mean())).mean()
    common = np.sqrt(4.0 * mxy * mxy + (mxx - myy) ** 2)
    lam1 = 0.5 * (mxx + myy + common)
    lam2 = 0.5 * (mxx + myy - common)
    ecc = float(np.sqrt(max(0.0, 1.0 - lam2 / lam1)))
    orientation = 0.5 * np.arctan2(2.0 * mxy, mxx - myy)
    if orientation <= -np.pi / 2.0:
        orientation += np.pi
    perimeter = _crack_length(ys.astype(np.intp), xs.astype(np.intp)) * (np.pi / 4.0)
    roundness = min(1.0, 4.0 * np.pi * area / (perimeter * perimeter))
    return float(area), ecc, roundness, float(orientation)


def _crack_length(ys, xs):
    """Number of exposed 4-neighbor pixel sides (boundary transitions)."""
    y0, x0 = ys.min(), xs.min()
    h = ys.max() - y0 + 3
    w = xs.max() - x0 + 3
    mask = np.zeros((h, w), dtype=bool)
    mask[ys - y0 + 1, xs - x0 + 1] = True
    inside = (mask[:-1, :] & mask[1:, :]).sum() + (mask[:, :-1] & mask[:, 1:]).sum()
    return 4 * len(ys) - 2 * int(inside)


def intensity_texture(ys, xs, intensity, offsets=GLCM_OFFSETS):
    """(mean, std, contrast, dissimilarity, homogeneity, energy).

    Offsets with no in-mask pairs are skipped; a mask with no valid pairs at
    all (single pixel) degenerates to the constant-field values (0, 0, 1, 1)
    for the four texture numbers.
    """
    vals = intensity[ys, xs].astype(np.float64)
    mean = float(vals.mean())
    std = float(vals.std())
    glcm = _masked_glcm(ys, xs, intensity, offsets)
    if glcm is None:
        return mean, std, 0.0, 0.0, 1.0, 1.0
    contrast = float((glcm * _W_CONTRAST).sum())
    dissim = float((glcm * _W_DISSIM).sum())
    homog = float((glcm * _W_HOMOG).sum())
    energy = float(np.sqrt((glcm * glcm).sum()))
    return mean, std, contrast, dissim, homog, energy


def _masked_glcm(ys, xs, intensity, offsets):
    y0, x0 = ys.min(), xs.min()
    h = ys.max() - y0 + 1
    w = xs.max() - x0 + 1
    mask = np.zeros((h, w), dtype=bool)
    ly, lx = ys - y0, xs - x0
    mask[ly, lx] = True
    crop = np.zeros((h, w), dtype=np.int64)
    crop[ly, lx] = intensity[ys, xs]
    pooled = np.zeros((_LEVELS, _LEVELS), dtype=np.float64)
    used = 0
    for dy, dx in offsets:
        ny, nx = ly + dy, lx + dx
        ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        if ok.any():
            ok[ok] = mask[ny[ok], nx[ok]]
        if not ok.any():
            continue
        a = crop[ly[ok], lx[ok]]
        b = crop[ny[ok], nx[ok]]
        counts = np.zeros((_LEVELS, _LEVELS), dtype=np.float64)
        np.add.at(counts, (a, b), 1.0)
        counts += counts.T.copy()          # symmetric
        pooled += counts / counts.sum()    # normalized per offset
        used += 1
    if used == 0:
        return None
    return pooled / used


def nucleus_props(ys, xs, intensity):
    """All ten morphometric properties for one nucleus, in MORPH_PROPS order."""
    area, ecc, roundness, orientation = shape_props(ys, xs)
    mean, std, contrast, dissim, homog, energy = intensity_texture(ys, xs, intensity)
    return np.array([area, ecc, roundness, orientation, mean, std,
                     contrast, dissim, homog, energy])


def moment_stats(values, with_max=False):
    """Population mean/std/skewness/kurtosis (excess) with degenerate rules:
    fewer than 3 values -> skewness 0, fewer than 4 -> kurtosis 0, zero
    variance -> both 0."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n == 0:
        return np.zeros(5 if with_max else 4)
    mean = values.mean()
    centered = values - mean
    m2 = (centered ** 2).mean()
    std = np.sqrt(m2)
    if m2 > 0.0 and n >= 3:
        skew = (centered ** 3).mean() / m2 ** 1.5
    else:
        skew = 0.0
    if m2 > 0.0 and n >= 4:
        kurt = (centered ** 4).mean() / (m2 * m2) - 3.0
    else:
        kurt = 0.0
    if with_max:
        return np.array([mean, std, skew, kurt, values.max()])
    return np.array([mean, std, skew, kurt])


def instances_by_id(instance_map):
    """{instance_id: (ys, xs)} over the nonzero labels, ids ascending."""
    flat = instance_map.reshape(-1)
    order = np.argsort(flat, kind="stable")
    sorted_vals = flat[order]
    start = np.searchsorted(sorted_vals, 1)
    out = {}
    if start == flat.size:
        return out
    ids, first = np.unique(sorted_vals[start:], return_index=True)
    bounds = np.append(first + start, flat.size)
    w = instance_map.shape[1]
    for i, iid in enumerate(ids):
        pix = order[bounds[i]:bounds[i + 1]]
        out[int(iid)] = (pix // w, pix % w)
    return out


def aggregate_morphometrics(bundle):
    """41c-vector: the 40c per-type moment aggregates followed by c counts,
    aligned with the morph/count blocks of feature_columns.

    Types with zero nuclei contribute zeros everywhere (count included)."""
    ts = bundle.type_set
    pixels = instances_by_id(bundle.instances)
    per_type_props = {t: [] for t in range(ts.c)}
    for iid in sorted(pixels):
        ys, xs = pixels[iid]
        per_type_props[bundle.types[iid]].append(
            nucleus_props(ys, xs, bundle.intensity))
    morph = np.zeros(40 * ts.c)
    counts = np.zeros(ts.c)
    for t in range(ts.c):
        rows = per_type_props[t]
        counts[t] = len(rows)
        if not rows:
            continue
        mat = np.vstack(rows)               # (n_t, 10)
        block = np.empty((len(MORPH_PROPS), 4))
        for j in range(len(MORPH_PROPS)):
            block[j] = moment_stats(mat[:, j])
        morph[t * 40:(t + 1) * 40] = block.reshape(-1)
    return np.concatenate([morph, counts])
