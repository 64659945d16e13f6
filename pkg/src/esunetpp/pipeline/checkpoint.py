"""Checkpoint directories: one TSR1 file per named array plus a hashed manifest."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from ..architectures import NetConfig, NetGraph, build
from ..autodiff.serialization import decode_tsr, encode_tsr
from ..errors import ConfigError, FormatError, IntegrityError

FORMAT = "ESUPP-CKPT1"


def _file_for(key: str) -> str:
    # "node_1_0/conv1_kernel" -> "node_1_0/conv1_kernel.tsr"
    if ".." in key or key.startswith("/"):
        raise FormatError(f"illegal array key {key!r}")
    return key + ".tsr"


def _digest(entries: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(entries):
        h.update(k.encode())
        h.update(entries[k].encode())
    return h.hexdigest()


def _blobs(graph: NetGraph) -> dict:
    return {key: encode_tsr(np.ascontiguousarray(arr)) for key, arr in sorted(graph.state_arrays().items())}


def state_hash(graph: NetGraph) -> str:
    """The hash :func:`save_checkpoint` would record for ``graph``."""
    return _digest({k: hashlib.sha256(b).hexdigest() for k, b in _blobs(graph).items()})


def save_checkpoint(path, graph: NetGraph, extra: Optional[dict] = None) -> str:
    """Write every parameter and running statistic; returns the checkpoint hash."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for key, blob in _blobs(graph).items():
        target = d / _file_for(key)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(blob)
        files[key] = hashlib.sha256(blob).hexdigest()
    cfg = graph.config
    manifest = {
        "format": FORMAT,
        "variant": cfg.variant,
        "depth": cfg.depth,
        "base_channels": cfg.base_channels,
        "in_channels": cfg.in_channels,
        "input_size": cfg.input_size,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "files": files,
        "hash": _digest(files),
        "extra": extra or {},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest["hash"]


def read_manifest(path) -> dict:
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt or missing checkpoint manifest in {d}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{d} is not a checkpoint directory")
    for field in ("config", "files", "hash"):
        if field not in manifest:
            raise FormatError(f"checkpoint manifest lacks {field!r}")
    if _digest(manifest["files"]) != manifest["hash"]:
        raise IntegrityError("checkpoint manifest hash does not match its file list")
    return manifest


def checkpoint_hash(path) -> str:
    return read_manifest(path)["hash"]


def load_checkpoint(path, expect_variant: Optional[str] = None) -> Tuple[NetGraph, dict]:
    """Validate every file before touching a graph, so failures leave no partial state."""
    d = Path(path)
    manifest = read_manifest(d)
    cfg = NetConfig.from_dict(manifest["config"])
    if expect_variant is not None and cfg.variant != expect_variant:
        raise ConfigError(f"checkpoint holds variant {cfg.variant!r}, expected {expect_variant!r}")
    arrays = {}
    for key, digest in manifest["files"].items():
        try:
            blob = (d / _file_for(key)).read_bytes()
        except OSError as exc:
            raise IntegrityError(f"checkpoint file for {key!r} is missing") from exc
        if hashlib.sha256(blob).hexdigest() != digest:
            raise IntegrityError(f"checkpoint file for {key!r} fails its hash check")
        arrays[key] = decode_tsr(blob)
    graph = build(cfg)
    graph.load_state_arrays(arrays)
    return graph, manifest
