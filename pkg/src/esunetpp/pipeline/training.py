"""Training loops for the label autoencoder and the segmentation networks.

The protocol has three steps: train an encoding network on label maps,
freeze it and cache its encoder features, then train the segmentation
network with those features as extra targets for its own encoder.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..architectures import NetConfig, NetGraph, build, forward, transfer_init
from ..autodiff import Adam, Tensor, backward, no_grad
from ..errors import ConfigError, ContractError, DivergenceError
from ..losses import (LossSpec, batch_weight_maps, dice_global, feature_levels, seg_loss, smooth_l1,
                      total_loss)
from ..preprocess import crop_label, liver_crop
from .data import Dataset
from .features import FeatureCache

PHASES = ("liver", "tumor", "direct")
MODES = {"un": "none", "bs": "BS", "es": "ES"}


@dataclass
class PhaseData:
    """Network inputs (N, 1, H, W), binary targets (N, H, W) and sample keys."""

    inputs: np.ndarray
    targets: np.ndarray
    keys: List[tuple]
    weight_maps: Optional[np.ndarray] = None
    images: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "PhaseData":
        idx = np.asarray(idx, dtype=np.int64)
        wm = None if self.weight_maps is None else self.weight_maps[idx]
        im = None if self.images is None else self.images[idx]
        return PhaseData(self.inputs[idx], self.targets[idx], [self.keys[i] for i in idx], wm, im)


def phase_data(ds: Dataset, phase: str, split: str = "train", with_weight_maps: bool = False,
               w: float = 0.05, sigma: float = 20.0) -> PhaseData:
    """Inputs and targets of one training phase.

    ``liver`` segments the liver from full slices, ``direct`` segments tumors
    from full slices, ``tumor`` segments tumors inside crops around the
    ground-truth liver (slices without liver are dropped).
    """
    sub = ds.subset(split)
    keys = sub.keys()
    if phase == "liver":
        x, y = sub.images, sub.liver
    elif phase == "direct":
        x, y = sub.images, sub.tumor
    elif phase == "tumor":
        xs, ys, ks = [], [], []
        for k in range(len(sub)):
            if not sub.liver[k].any():
                continue
            crop, _, tf = liver_crop(sub.images[k], sub.liver[k], target=sub.size, slice_index=int(sub.slice_indices[k]))
            xs.append(crop)
            ys.append(crop_label(sub.tumor[k], tf))
            ks.append(keys[k])
        size = sub.size
        x = np.stack(xs) if xs else np.zeros((0, size, size))
        y = np.stack(ys) if ys else np.zeros((0, size, size), dtype=bool)
        keys = ks
    else:
        raise ConfigError(f"unknown phase {phase!r}; expected one of {PHASES}")
    wm = batch_weight_maps(y[:, None], w, sigma)[:, 0] if with_weight_maps else None
    return PhaseData(x[:, None].astype(np.float64), y.astype(bool), keys, wm, x)


def label_data(pd: PhaseData) -> PhaseData:
    """Autoencoder view of a phase: the label map is both input and target."""
    return PhaseData(pd.targets[:, None].astype(np.float64), pd.targets, pd.keys, pd.weight_maps, pd.images)


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossSpec = field(default_factory=LossSpec.liver)
    mode: str = "un"
    phase: str = "liver"
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    feature_source: str = "label"
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.phase not in PHASES + ("encoder",):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs and batch_size must be >= 1 and lr > 0")
        if MODES[self.mode] != self.net.feature_supervision:
            self.net = self.net.with_(feature_supervision=MODES[self.mode])

    @property
    def supervision(self) -> str:
        return self.net.supervision

    @property
    def feature_supervision(self) -> str:
        return MODES[self.mode]

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "loss": self.loss.to_dict(), "mode": self.mode, "phase": self.phase,
                "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr, "seed": self.seed,
                "feature_source": self.feature_source, "lr_schedule": self.lr_schedule}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        net = NetConfig.from_dict(d.pop("net", {}))
        phase = d.get("phase", "liver")
        default_loss = LossSpec.tumor() if phase in ("tumor", "direct") else LossSpec.liver()
        loss = LossSpec.from_dict({**default_loss.to_dict(), **d.pop("loss", {})})
        return cls(net=net, loss=loss, **{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from exc


@dataclass
class History:
    """One row per epoch."""

    rows: List[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def fieldnames(self) -> List[str]:
        names: List[str] = []
        for r in self.rows:
            names += [k for k in r if k not in names]
        return names

    def write_csv(self, path) -> None:
        cols = self.fieldnames()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([_fmt(r.get(c, "")) for c in cols])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def read_history(path) -> History:
    with open(path, newline="") as fh:
        rows = [{k: (float(v) if k != "epoch" else int(v)) if v != "" else float("nan") for k, v in r.items()}
                for r in csv.DictReader(fh)]
    return History(rows)


def predict_probs(graph: NetGraph, inputs: np.ndarray, batch_size: int = 16) -> Dict[int, np.ndarray]:
    """Eval-mode head probabilities, (N, H, W) per head."""
    out: Dict[int, list] = {h: [] for h in graph.head_indices}
    x = np.asarray(inputs, dtype=graph.config.dtype)
    with no_grad():
        for s in range(0, x.shape[0], batch_size):
            res = forward(graph, Tensor(x[s:s + batch_size]), training=False)
            for h, t in res.heads.items():
                out[h].append(t.data[:, 0])
    size = graph.config.input_size
    return {h: (np.concatenate(v) if v else np.zeros((0, size, size))) for h, v in out.items()}


def head_dice(graph: NetGraph, data: PhaseData) -> Dict[int, float]:
    probs = predict_probs(graph, data.inputs)
    return {h: dice_global([(data.targets, p >= 0.5)]) for h, p in probs.items()}


def _head_loss_values(heads, gt, spec, wm) -> Dict[int, float]:
    with no_grad():
        return {h: float(seg_loss(gt, p, spec, wm).data) for h, p in heads.items()}


def epoch_lr(cfg: RunConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch; cosine decays to 5% of ``cfg.lr``."""
    if cfg.lr_schedule == "constant" or cfg.epochs == 1:
        return cfg.lr
    t = (epoch - 1) / (cfg.epochs - 1)
    return cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * t)))


def train_network(graph: NetGraph, train: PhaseData, cfg: RunConfig, val: Optional[PhaseData] = None,
                  cache: Optional[FeatureCache] = None, monitor_cache: Optional[FeatureCache] = None,
                  history_path=None) -> History:
    """Minibatch Adam on the total loss.

    ``cache`` supplies feature targets in BS/ES mode. ``monitor_cache``
    (UN mode only) is used to log the feature loss without optimizing it.
    Raises :class:`DivergenceError` on a non-finite loss.
    """
    fs = cfg.feature_supervision
    if fs != "none" and cache is None:
        raise ContractError(f"mode {cfg.mode!r} needs a feature cache")
    if fs == "none" and cache is not None:
        raise ContractError("UN mode does not take a feature cache; pass it as monitor_cache")
    if len(train) == 0:
        raise ContractError("empty training set")
    target_cache = cache if cache is not None else monitor_cache
    if target_cache is not None:
        target_cache.check_shapes(graph)
    depth = graph.config.depth
    monitor_levels = feature_levels(fs if fs != "none" else "ES", depth)
    spec = cfg.loss
    if spec.use_weighted_dice and train.weight_maps is None:
        raise ContractError("weighted Dice needs weight maps in the training data")

    opt = Adam(graph.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 11])
    dtype = graph.config.dtype
    history = History()
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        opt.state.lr = epoch_lr(cfg, epoch)
        order = rng.permutation(n)
        sums: Dict[str, float] = {}
        count = 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            b = train.take(idx)
            gt = b.targets[:, None].astype(dtype)
            wm = None if b.weight_maps is None else b.weight_maps[:, None]
            out = forward(graph, Tensor(b.inputs.astype(dtype)), training=True)
            enc = None
            if target_cache is not None:
                enc = {lvl: a.astype(dtype) for lvl, a in target_cache.batch(b.keys).items()}
            total, ds, sl1 = total_loss(out.heads, gt, out.features, enc if cache is not None else None,
                                        spec, cfg.supervision, fs, depth, wm)
            value = float(total.data)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, batch {s // cfg.batch_size}")
            opt.zero_grad()
            backward(total)
            # ReLU and the probability clamp can hide NaN activations from the loss
            if not all(p.grad is None or np.isfinite(p.grad).all() for p in opt.params):
                raise DivergenceError(f"non-finite gradient at epoch {epoch}, batch {s // cfg.batch_size}")
            opt.step()

            w = len(idx)
            row = {"total": value, "ds": float(ds.data)}
            for h, v in _head_loss_values(out.heads, gt, spec, wm).items():
                row[f"loss_head_{h}"] = v
            if sl1 is not None:
                row["sl1"] = float(sl1.data)
            elif enc is not None:
                with no_grad():
                    row["sl1"] = float(smooth_l1(out.features, enc, monitor_levels, spec.huber_beta,
                                                 spec.feature_reduction).data)
            for k, v in row.items():
                sums[k] = sums.get(k, 0.0) + v * w
            count += w
        rec = {"epoch": epoch}
        rec.update({k: v / count for k, v in sums.items()})
        if val is not None and len(val):
            for h, d in head_dice(graph, val).items():
                rec[f"val_dice_head_{h}"] = d
        history.rows.append(rec)
        if history_path is not None:
            history.write_csv(history_path)
    return history


def encoder_config(net: NetConfig, chain: bool = False) -> NetConfig:
    return net.with_(variant="encoding_unet" if chain else "encoding_unetpp", in_channels=1,
                     supervision="DS", feature_supervision="none")


def train_encoding_net(data: PhaseData, cfg: RunConfig, val: Optional[PhaseData] = None,
                       history_path=None):
    """Label autoencoder: the label map is both the input and the target,
    trained with deep supervision and the phase's seg loss."""
    net = cfg.net
    if net.variant not in ("encoding_unetpp", "encoding_unet"):
        net = encoder_config(net)
    if net.supervision != "DS":
        net = net.with_(supervision="DS")
    enc_cfg = RunConfig(net=net, loss=cfg.loss, mode="un", phase=cfg.phase, epochs=cfg.epochs,
                        batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed, lr_schedule=cfg.lr_schedule)
    graph = build(net)
    hist = train_network(graph, label_data(data), enc_cfg, None if val is None else label_data(val),
                         history_path=history_path)
    return graph, hist


def train_segmentation_net(data: PhaseData, cfg: RunConfig, val: Optional[PhaseData] = None,
                           cache: Optional[FeatureCache] = None, init_from: Optional[NetGraph] = None,
                           monitor_cache: Optional[FeatureCache] = None, history_path=None):
    fs = cfg.feature_supervision
    if fs != "none" and cache is None:
        raise ContractError(f"mode {cfg.mode!r} requires a feature cache")
    if fs == "none" and cache is not None:
        monitor_cache, cache = cache, None
    graph = build(cfg.net)
    if init_from is not None:
        transfer_init(graph, init_from)
    hist = train_network(graph, data, cfg, val, cache, monitor_cache, history_path)
    return graph, hist
