"""Slice preprocessing: HU windowing, CLAHE, z-normalization, liver crop."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from .errors import ContractError, NoLiverError, ParameterError, ShapeError
from .volumes import Volume


def hu_window(volume, lo: float = -100.0, hi: float = 400.0):
    """Clamp to [lo, hi] and map affinely onto [0, 1].

    Accepts a :class:`Volume` (returns a new Volume) or a plain array.
    """
    if hi <= lo:
        raise ParameterError(f"HU window needs hi > lo, got [{lo}, {hi}]")
    if isinstance(volume, Volume):
        data = hu_window(volume.data, lo, hi)
        return volume.replace(data=data, intensity_unit="normalized")
    arr = np.asarray(volume, dtype=np.float64)
    return (np.clip(arr, lo, hi) - lo) / (hi - lo)


def _tile_lut(tile: np.ndarray, clip_value: float, bins: int) -> np.ndarray:
    """Clipped-histogram equalization map for one tile, indexed by bin."""
    idx = np.minimum((tile * bins).astype(np.int64), bins - 1).ravel()
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    if np.count_nonzero(hist) <= 1:
        # a single occupied bin: leave the tile's intensities as they are
        return None
    clipped = np.minimum(hist, clip_value)
    excess = hist.sum() - clipped.sum()
    clipped += excess / bins
    return np.cumsum(clipped) / hist.sum()


def clahe(image, clip_limit: float = 4.0, tiles: Tuple[int, int] = (8, 8), bins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of a [0, 1] image.

    Each tile's histogram is capped at ``clip_limit * tile_pixels / bins``
    with the excess spread uniformly over all bins in a single pass; the
    resulting per-tile maps are blended bilinearly between tile centres.
    Tiles whose pixels all fall in one bin keep the identity map.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError("clahe expects a 2-D image")
    ty, tx = tiles
    H, W = img.shape
    if H < ty or W < tx:
        raise ShapeError(f"image {H}x{W} smaller than tile grid {ty}x{tx}")
    if clip_limit <= 0 or bins < 2:
        raise ParameterError("clip_limit must be positive and bins >= 2")
    img = np.clip(img, 0.0, 1.0)
    ys = np.linspace(0, H, ty + 1).round().astype(int)
    xs = np.linspace(0, W, tx + 1).round().astype(int)
    bin_idx = np.minimum((img * bins).astype(np.int64), bins - 1)

    # mapped[t] holds every pixel pushed through tile t's map
    mapped = np.empty((ty, tx, H, W))
    for a in range(ty):
        for b in range(tx):
            tile = img[ys[a]:ys[a + 1], xs[b]:xs[b + 1]]
            clip_value = clip_limit * tile.size / bins
            lut = _tile_lut(tile, clip_value, bins)
            mapped[a, b] = img if lut is None else lut[bin_idx]

    cy = (ys[:-1] + ys[1:] - 1) / 2.0
    cx = (xs[:-1] + xs[1:] - 1) / 2.0
    r = np.arange(H, dtype=np.float64)
    c = np.arange(W, dtype=np.float64)
    ia, fa = _interp_index(r, cy)
    ib, fb = _interp_index(c, cx)
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    A0, A1 = ia[:, None], np.minimum(ia + 1, ty - 1)[:, None]
    B0, B1 = ib[None, :], np.minimum(ib + 1, tx - 1)[None, :]
    wa, wb = fa[:, None], fb[None, :]
    # nested lerps are exact wherever neighbouring maps agree
    m00, m01 = mapped[A0, B0, rows, cols], mapped[A0, B1, rows, cols]
    m10, m11 = mapped[A1, B0, rows, cols], mapped[A1, B1, rows, cols]
    top = m00 + wb * (m01 - m00)
    bot = m10 + wb * (m11 - m10)
    out = top + wa * (bot - top)
    return np.clip(out, 0.0, 1.0)


def _interp_index(pos: np.ndarray, centers: np.ndarray):
    """Lower tile index and blend fraction for each coordinate; clamps
    outside the first/last centre."""
    n = len(centers)
    if n == 1:
        return np.zeros(len(pos), dtype=int), np.zeros(len(pos))
    lo = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, n - 2)
    frac = (pos - centers[lo]) / (centers[lo + 1] - centers[lo])
    return lo, np.clip(frac, 0.0, 1.0)


def normalize(image) -> np.ndarray:
    """Zero-mean, unit-variance over the slice; a constant slice becomes zeros."""
    img = np.asarray(image, dtype=np.float64)
    sd = img.std()
    if sd < 1e-12:
        return np.zeros_like(img)
    return (img - img.mean()) / sd


def preprocess_slice(hu_slice, lo: float = -100.0, hi: float = 400.0, clip_limit: float = 4.0,
                     tiles: Tuple[int, int] = (8, 8)) -> np.ndarray:
    """Window -> CLAHE -> normalize, the full per-slice chain."""
    return normalize(clahe(hu_window(hu_slice, lo, hi), clip_limit, tiles))


# ---------------------------------------------------------------------------
# resizing helpers
# ---------------------------------------------------------------------------

def resize_bilinear(img, shape: Tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    h, w = shape

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(H, h)
    c0, c1, fc = axis(W, w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def resize_nearest(img, shape: Tuple[int, int]) -> np.ndarray:
    img = np.asarray(img)
    H, W = img.shape
    h, w = shape
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return img[rows][:, cols]


# ---------------------------------------------------------------------------
# liver crop / inverse mapping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropTransform:
    slice_index: int
    row0: int
    col0: int
    height: int
    width: int
    margin: int
    target: int
    source_shape: Tuple[int, int]

    def to_dict(self) -> dict:
        return asdict(self)


def scaled_margin(size: int, margin_at_64: int = 8) -> int:
    return max(1, int(round(margin_at_64 * size / 64)))


def liver_box(mask, margin: int) -> Tuple[int, int, int, int]:
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise NoLiverError("liver mask is empty")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    r0 = max(0, rows[0] - margin)
    r1 = min(m.shape[0], rows[-1] + 1 + margin)
    c0 = max(0, cols[0] - margin)
    c1 = min(m.shape[1], cols[-1] + 1 + margin)
    return r0, c0, r1 - r0, c1 - c0


def liver_crop(image, liver_mask, margin: int = None, target: int = None,
               slice_index: int = 0, zero_background: bool = True):
    """Crop the margin-dilated bounding box of the liver, resize to
    ``target``, z-normalize over liver pixels and zero everything else.

    Returns ``(crop, crop_mask, transform)``. Raises :class:`NoLiverError`
    for an empty mask.
    """
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    target = H if target is None else target
    margin = scaled_margin(H) if margin is None else margin
    r0, c0, h, w = liver_box(liver_mask, margin)
    box_img = img[r0:r0 + h, c0:c0 + w]
    box_mask = np.asarray(liver_mask, dtype=np.float64)[r0:r0 + h, c0:c0 + w]
    crop = resize_bilinear(box_img, (target, target))
    cmask = resize_bilinear(box_mask, (target, target)) >= 0.5
    if not cmask.any():
        cmask = resize_nearest(box_mask > 0, (target, target))
    vals = crop[cmask]
    sd = vals.std()
    crop = (crop - vals.mean()) / sd if sd > 1e-12 else crop - vals.mean()
    if zero_background:
        crop = np.where(cmask, crop, 0.0)
    tf = CropTransform(slice_index, int(r0), int(c0), int(h), int(w), int(margin), int(target), (H, W))
    return crop, cmask, tf


def crop_label(label, transform: CropTransform) -> np.ndarray:
    """Apply a crop transform to a label map (nearest neighbour)."""
    t = transform
    box = np.asarray(label)[t.row0:t.row0 + t.height, t.col0:t.col0 + t.width]
    return resize_nearest(box.astype(bool), (t.target, t.target))


def map_back(mask_in_crop, transform: CropTransform, source_shape=None) -> np.ndarray:
    """Nearest-neighbour inverse of the crop; everything outside the box is background."""
    t = transform
    m = np.asarray(mask_in_crop).astype(bool)
    if m.shape != (t.target, t.target):
        raise ShapeError(f"crop mask shape {m.shape} != transform target {(t.target, t.target)}")
    shape = tuple(source_shape) if source_shape is not None else t.source_shape
    if t.row0 + t.height > shape[0] or t.col0 + t.width > shape[1]:
        raise ContractError("transform box does not fit in the source shape")
    out = np.zeros(shape, dtype=bool)
    out[t.row0:t.row0 + t.height, t.col0:t.col0 + t.width] = resize_nearest(m, (t.height, t.width))
    return out
