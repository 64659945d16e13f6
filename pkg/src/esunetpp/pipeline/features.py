"""Frozen encoder features X^{1,0}..X^{depth,0} stored per sample."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..architectures import NetGraph, forward
from ..autodiff import Tensor, no_grad
from ..autodiff.serialization import decode_tsr, encode_tsr
from ..errors import ConfigError, FormatError, IntegrityError, ShapeError

FORMAT = "ESUPP-FEAT1"


@dataclass
class FeatureCache:
    """``levels[i]`` is an (N, C_i, H/2^i, W/2^i) array aligned with ``keys``."""

    levels: Dict[int, np.ndarray]
    keys: List[tuple]
    encoder_hash: str
    source: str = "label"

    def __post_init__(self):
        n = len(self.keys)
        for lvl, arr in self.levels.items():
            if arr.shape[0] != n:
                raise ShapeError(f"level {lvl} holds {arr.shape[0]} samples, expected {n}")
        self._index = {tuple(k): i for i, k in enumerate(self.keys)}

    def __len__(self) -> int:
        return len(self.keys)

    def rows(self, keys: Sequence[tuple]) -> np.ndarray:
        try:
            return np.array([self._index[tuple(k)] for k in keys], dtype=np.int64)
        except KeyError as exc:
            raise IntegrityError(f"sample {exc.args[0]} is not in the feature cache") from exc

    def batch(self, keys: Sequence[tuple]) -> Dict[int, np.ndarray]:
        r = self.rows(keys)
        return {lvl: arr[r] for lvl, arr in self.levels.items()}

    def require(self, encoder_hash: str) -> "FeatureCache":
        if encoder_hash != self.encoder_hash:
            raise IntegrityError("feature cache was produced by a different encoder checkpoint")
        return self

    def check_shapes(self, graph: NetGraph) -> None:
        cfg = graph.config
        for lvl, arr in self.levels.items():
            want = (cfg.channels(lvl), cfg.input_size >> lvl, cfg.input_size >> lvl)
            if arr.shape[1:] != want:
                raise ShapeError(f"cached level {lvl} has shape {arr.shape[1:]}, network produces {want}")


def encoder_inputs(labels: np.ndarray, images: Optional[np.ndarray], source: str) -> np.ndarray:
    """Inputs fed to the frozen encoder: the label map (default) or the image."""
    if source == "label":
        return np.asarray(labels, dtype=np.float64)[:, None]
    if source == "image":
        if images is None:
            raise ConfigError("image-sourced features need the images")
        return np.asarray(images, dtype=np.float64)[:, None]
    raise ConfigError(f"unknown feature source {source!r}")


def extract_features(encoder: NetGraph, encoder_hash: str, keys: Sequence[tuple], labels: np.ndarray,
                     images: Optional[np.ndarray] = None, source: str = "label",
                     batch_size: int = 16) -> FeatureCache:
    """Eval-mode forward of the frozen encoder over every sample."""
    x = encoder_inputs(labels, images, source).astype(encoder.config.dtype)
    parts: Dict[int, list] = {}
    with no_grad():
        for s in range(0, x.shape[0], batch_size):
            out = forward(encoder, Tensor(x[s:s + batch_size]), training=False)
            for lvl, t in out.features.items():
                parts.setdefault(lvl, []).append(t.data)
    levels = {lvl: np.concatenate(v, axis=0) for lvl, v in parts.items()}
    return FeatureCache(levels, [tuple(int(a) for a in k) for k in keys], encoder_hash, source)


def save_cache(path, cache: FeatureCache) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for lvl, arr in sorted(cache.levels.items()):
        blob = encode_tsr(np.ascontiguousarray(arr))
        (d / f"level_{lvl}.tsr").write_bytes(blob)
        files[str(lvl)] = hashlib.sha256(blob).hexdigest()
    manifest = {"format": FORMAT, "encoder_hash": cache.encoder_hash, "source": cache.source,
                "keys": [list(k) for k in cache.keys], "files": files}
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))


def load_cache(path, encoder_hash: Optional[str] = None) -> FeatureCache:
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt or missing feature-cache manifest in {d}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{d} is not a feature cache")
    levels = {}
    for lvl, digest in manifest["files"].items():
        try:
            blob = (d / f"level_{lvl}.tsr").read_bytes()
        except OSError as exc:
            raise IntegrityError(f"feature level {lvl} is missing") from exc
        if hashlib.sha256(blob).hexdigest() != digest:
            raise IntegrityError(f"feature level {lvl} fails its hash check")
        levels[int(lvl)] = decode_tsr(blob)
    cache = FeatureCache(levels, [tuple(k) for k in manifest["keys"]], manifest["encoder_hash"],
                         manifest.get("source", "label"))
    if encoder_hash is not None:
        cache.require(encoder_hash)
    return cache
