"""Synthetic CT-like phantoms, sample records, splits and dataset persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from ..autodiff.serialization import decode_tsr, encode_tsr
from ..errors import ConfigError, FormatError, IntegrityError, ShapeError
from ..preprocess import preprocess_slice

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

# HU levels of the phantom; liver and distractors share the same plateau
AIR_HU = -1000.0
BODY_HU = 30.0
LIVER_HU = 110.0
TUMOR_HU = 45.0
NOISE_HU = 12.0
TEXTURE_HU = 8.0


@dataclass
class SampleRecord:
    image: np.ndarray
    liver: np.ndarray
    tumor: np.ndarray
    case_id: int
    slice_index: int

    def __post_init__(self):
        self.liver = np.asarray(self.liver).astype(bool)
        self.tumor = np.asarray(self.tumor).astype(bool)
        if self.image.shape != self.liver.shape or self.liver.shape != self.tumor.shape:
            raise ShapeError("image and masks must share one shape")
        if np.any(self.tumor & ~self.liver):
            raise ShapeError("tumor mask must lie inside the liver mask")


class Dataset:
    """Stacked slices: ``images`` (N, H, W) float, ``liver``/``tumor`` (N, H, W) bool."""

    def __init__(self, images, liver, tumor, case_ids, slice_indices, splits: Dict[str, List[int]],
                 meta: Optional[dict] = None):
        self.images = np.asarray(images, dtype=np.float64)
        self.liver = np.asarray(liver).astype(bool)
        self.tumor = np.asarray(tumor).astype(bool)
        self.case_ids = np.asarray(case_ids, dtype=np.int64)
        self.slice_indices = np.asarray(slice_indices, dtype=np.int64)
        self.splits = {k: sorted(int(c) for c in v) for k, v in splits.items()}
        self.meta = dict(meta or {})
        n = self.images.shape[0]
        if self.images.ndim != 3 or self.liver.shape != self.images.shape or self.tumor.shape != self.images.shape:
            raise ShapeError("images, liver and tumor must all be (N, H, W)")
        if self.case_ids.shape != (n,) or self.slice_indices.shape != (n,):
            raise ShapeError("case_ids and slice_indices must have one entry per slice")
        if np.any(self.tumor & ~self.liver):
            raise IntegrityError("tumor pixels outside the liver mask")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def size(self) -> int:
        return self.images.shape[1]

    def record(self, k: int) -> SampleRecord:
        return SampleRecord(self.images[k], self.liver[k], self.tumor[k],
                            int(self.case_ids[k]), int(self.slice_indices[k]))

    def indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(len(self))
        if split not in self.splits:
            raise ConfigError(f"unknown split {split!r}")
        return np.flatnonzero(np.isin(self.case_ids, self.splits[split]))

    def subset(self, split: str) -> "Dataset":
        idx = self.indices(split)
        splits = {split: self.splits[split]} if split != "all" else self.splits
        return Dataset(self.images[idx], self.liver[idx], self.tumor[idx], self.case_ids[idx],
                       self.slice_indices[idx], splits, self.meta)

    def keys(self) -> List[tuple]:
        return [(int(c), int(s)) for c, s in zip(self.case_ids, self.slice_indices)]


def split_cases(case_ids: Sequence[int], seed: int) -> Dict[str, List[int]]:
    """70/10/20 split by case id, from a seeded permutation."""
    ids = np.array(sorted(set(int(c) for c in case_ids)))
    perm = np.random.default_rng([seed, 7]).permutation(ids)
    n = len(ids)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = max(n_val, 1)
    return {
        "train": sorted(perm[:n_train].tolist()),
        "val": sorted(perm[n_train:n_train + n_val].tolist()),
        "test": sorted(perm[n_train + n_val:].tolist()),
    }


def _ellipse(shape, center, axes, angle, wobble=None) -> np.ndarray:
    H, W = shape
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = rr - center[0], cc - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / axes[1]
    v = (-sa * dx + ca * dy) / axes[0]
    r = np.sqrt(u * u + v * v)
    if wobble is not None:
        theta = np.arctan2(v, u)
        r = r / (1.0 + sum(a * np.cos(k * theta + p) for k, (a, p) in enumerate(wobble, start=2)))
    return r <= 1.0


def _case_params(rng: np.random.Generator, size: int) -> dict:
    s = float(size)
    p = {
        "liver_center": (s * rng.uniform(0.40, 0.52), s * rng.uniform(0.36, 0.48)),
        "liver_axes": (s * rng.uniform(0.22, 0.30), s * rng.uniform(0.25, 0.33)),
        "liver_angle": rng.uniform(-0.5, 0.5),
        "liver_wobble": [(rng.uniform(0.0, 0.06), rng.uniform(0, 2 * np.pi)) for _ in range(2)],
        "liver_hu": LIVER_HU + rng.uniform(-10, 10),
        "body_axes": (s * rng.uniform(0.44, 0.48), s * rng.uniform(0.46, 0.49)),
        "n_tumors": int(rng.integers(0, 4)),
        "n_distractors": int(rng.integers(1, 3)),
    }
    tumors = []
    for _ in range(p["n_tumors"]):
        ang, rad = rng.uniform(0, 2 * np.pi), rng.uniform(0.0, 0.55)
        off = (rad * p["liver_axes"][0] * np.sin(ang), rad * p["liver_axes"][1] * np.cos(ang))
        tumors.append({
            "offset": off,
            "radius": s * rng.uniform(0.035, 0.08),
            "hu": TUMOR_HU + rng.uniform(-15, 15),
        })
    p["tumors"] = tumors
    distractors = []
    for _ in range(p["n_distractors"]):
        distractors.append({
            "center": (s * rng.uniform(0.25, 0.75), s * rng.uniform(0.66, 0.8)),
            "axes": (s * rng.uniform(0.06, 0.10), s * rng.uniform(0.05, 0.09)),
            "angle": rng.uniform(0, np.pi),
            "hu": LIVER_HU + rng.uniform(-15, 15),
        })
    p["distractors"] = distractors
    return p


def _render_slice(p: dict, z: float, size: int, rng: np.random.Generator):
    """HU image plus masks for relative slice position ``z`` in [-1, 1]."""
    shape = (size, size)
    scale = np.sqrt(1.0 - 0.45 * z * z)
    body = _ellipse(shape, (size / 2, size / 2), p["body_axes"], 0.0)
    axes = (p["liver_axes"][0] * scale, p["liver_axes"][1] * scale)
    liver = _ellipse(shape, p["liver_center"], axes, p["liver_angle"], p["liver_wobble"]) & body

    hu = np.where(body, BODY_HU, AIR_HU)
    texture = gaussian_filter(rng.standard_normal(shape), 1.5) * TEXTURE_HU * 3.0
    hu = np.where(liver, p["liver_hu"] + texture, hu)

    tumor = np.zeros(shape, dtype=bool)
    for t in p["tumors"]:
        c = (p["liver_center"][0] + t["offset"][0] * scale, p["liver_center"][1] + t["offset"][1] * scale)
        r = t["radius"] * np.sqrt(max(0.0, 1.0 - 0.8 * z * z))
        if r < 1.0:
            continue
        blob = _ellipse(shape, c, (r, r * 1.15), 0.0) & liver
        tumor |= blob
        hu = np.where(blob, t["hu"] + texture, hu)

    grown = gaussian_filter(liver.astype(np.float64), 2.0) > 0.02
    for d in p["distractors"]:
        organ = _ellipse(shape, d["center"], d["axes"], d["angle"]) & body & ~grown
        hu = np.where(organ, d["hu"] + texture, hu)

    hu = hu + rng.standard_normal(shape) * NOISE_HU
    return hu, liver, tumor


def synth_dataset(seed: int, n_cases: int, slices_per_case: int = 4, size: int = 64,
                  preprocess: bool = True) -> Dataset:
    """Deterministic liver/tumor phantoms.

    Each case is an elliptical liver with a textured intensity plateau, 0-3
    darker tumors inside it and 1-2 distractor organs of liver-like intensity
    elsewhere in the body. Slices of a case shrink the organs towards the
    ends of the volume. Images go through windowing, CLAHE and normalization
    unless ``preprocess`` is false (then raw HU values are stored).
    """
    if size % 16 or size < 16:
        raise ConfigError(f"size must be a positive multiple of 16, got {size}")
    if n_cases < 1 or slices_per_case < 1:
        raise ConfigError("need at least one case and one slice per case")
    images, livers, tumors, cids, sids = [], [], [], [], []
    for case in range(n_cases):
        rng = np.random.default_rng([seed, case])
        params = _case_params(rng, size)
        zs = np.linspace(-0.8, 0.8, slices_per_case) if slices_per_case > 1 else [0.0]
        for k, z in enumerate(zs):
            hu, liver, tumor = _render_slice(params, float(z), size, rng)
            images.append(preprocess_slice(hu) if preprocess else hu)
            livers.append(liver)
            tumors.append(tumor)
            cids.append(case)
            sids.append(k)
    meta = {"seed": seed, "n_cases": n_cases, "slices_per_case": slices_per_case, "size": size,
            "preprocessed": bool(preprocess)}
    return Dataset(np.stack(images), np.stack(livers), np.stack(tumors), cids, sids,
                   split_cases(range(n_cases), seed), meta)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_ARRAYS = ("images", "liver", "tumor", "case_ids", "slice_indices")


def save_dataset(path, ds: Dataset) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for name in _ARRAYS:
        arr = getattr(ds, name)
        store = arr.astype(np.float64) if arr.dtype != np.float64 else arr
        (d / f"{name}.tsr").write_bytes(encode_tsr(store))
    manifest = {"format": "ESUPP-DATASET1", "n": len(ds), "size": ds.size, "splits": ds.splits, "meta": ds.meta}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(path) -> Dataset:
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read dataset manifest in {d}: {exc}") from exc
    if manifest.get("format") != "ESUPP-DATASET1":
        raise FormatError(f"{d} is not a dataset directory")
    try:
        arrays = {name: decode_tsr((d / f"{name}.tsr").read_bytes()) for name in _ARRAYS}
    except OSError as exc:
        raise FormatError(f"missing dataset payload: {exc}") from exc
    return Dataset(arrays["images"], arrays["liver"] > 0.5, arrays["tumor"] > 0.5,
                   arrays["case_ids"].astype(np.int64), arrays["slice_indices"].astype(np.int64),
                   manifest["splits"], manifest.get("meta", {}))
