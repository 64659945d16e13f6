"""End-to-end runs: encoder, feature cache, the variant grid, tumor nets, cascade."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from ..architectures import NetConfig, NetGraph
from ..crf import CrfParams
from ..errors import ConfigError
from ..losses import LossSpec
from .cascade import cascade_predict_batch, direct_predict_batch
from .checkpoint import save_checkpoint, state_hash
from .data import Dataset
from .evaluate import GRID, EvalTable, case_scores, evaluate_net
from .features import FeatureCache, extract_features
from .training import History, PhaseData, RunConfig, phase_data, train_encoding_net, train_segmentation_net


def parse_variant(name: str) -> Tuple[str, str]:
    """"ES-DS" -> ("es", "DS")."""
    try:
        mode, sup = name.split("-")
    except ValueError as exc:
        raise ConfigError(f"bad variant name {name!r}") from exc
    mode, sup = mode.lower(), sup.upper()
    if mode not in ("un", "bs", "es") or sup not in ("NS", "DS"):
        raise ConfigError(f"bad variant name {name!r}")
    return mode, sup


@dataclass
class PipelineConfig:
    seed: int = 0
    size: int = 64
    depth: int = 4
    base_channels: int = 8
    batch_size: int = 8
    epochs: int = 20
    lr: float = 3e-3
    encoder_epochs: int = 30
    encoder_lr: float = 3e-3
    encoder_batch_size: int = 4
    tumor_epochs: int = 20
    lr_schedule: str = "cosine"
    liver_grid: Tuple[str, ...] = GRID
    tumor_grid: Tuple[str, ...] = GRID
    transfer_from: str = "ES-DS"
    cascade_tumor: str = "UN-DS"
    direct_baseline: bool = True
    feature_source: str = "label"
    crf: Optional[CrfParams] = None

    def __post_init__(self):
        self.liver_grid = tuple(self.liver_grid)
        self.tumor_grid = tuple(self.tumor_grid)
        for name in self.liver_grid + self.tumor_grid:
            parse_variant(name)
        if self.tumor_grid and self.transfer_from not in self.liver_grid:
            raise ConfigError("transfer_from must name a variant of the liver grid")
        if self.tumor_grid and self.cascade_tumor not in self.tumor_grid:
            raise ConfigError("cascade_tumor must name a variant of the tumor grid")
        if isinstance(self.crf, dict):
            self.crf = CrfParams.from_dict(self.crf)

    def with_(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["liver_grid"] = list(self.liver_grid)
        d["tumor_grid"] = list(self.tumor_grid)
        d["crf"] = None if self.crf is None else self.crf.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def net(self, variant: str = "unetpp", supervision: str = "DS") -> NetConfig:
        return NetConfig(variant=variant, depth=self.depth, base_channels=self.base_channels,
                         input_size=self.size, supervision=supervision, seed=self.seed)

    def run(self, mode: str, supervision: str, phase: str, epochs: int, lr: float) -> RunConfig:
        loss = LossSpec.tumor() if phase in ("tumor", "direct") else LossSpec.liver()
        return RunConfig(net=self.net("unetpp", supervision), loss=loss, mode=mode, phase=phase, epochs=epochs,
                         batch_size=self.batch_size, lr=lr, seed=self.seed, feature_source=self.feature_source,
                         lr_schedule=self.lr_schedule)


@dataclass
class PhaseRun:
    """Everything trained for one phase (liver or tumor)."""

    train: PhaseData
    val: PhaseData
    test: PhaseData
    encoder: Optional[NetGraph] = None
    encoder_hash: Optional[str] = None
    encoder_history: Optional[History] = None
    cache: Optional[FeatureCache] = None
    nets: Dict[str, NetGraph] = field(default_factory=dict)
    histories: Dict[str, History] = field(default_factory=dict)


@dataclass
class PipelineResult:
    config: PipelineConfig
    liver: PhaseRun
    tumor: Optional[PhaseRun]
    direct: Optional[NetGraph]
    direct_history: Optional[History]
    table: EvalTable
    cascade: Dict[str, float] = field(default_factory=dict)


def _train_encoder(pr: PhaseRun, cfg: PipelineConfig, phase: str) -> None:
    run = cfg.run("un", "DS", phase, cfg.encoder_epochs, cfg.encoder_lr)
    run = run.with_(net=run.net.with_(variant="encoding_unetpp"), batch_size=cfg.encoder_batch_size)
    pr.encoder, pr.encoder_history = train_encoding_net(pr.train, run, pr.val)
    pr.encoder_hash = state_hash(pr.encoder)
    pr.cache = extract_features(pr.encoder, pr.encoder_hash, pr.train.keys, pr.train.targets,
                                pr.train.images, cfg.feature_source)


def run_phase(ds: Dataset, cfg: PipelineConfig, phase: str, grid, epochs: int,
              init_from: Optional[NetGraph] = None, encoder: bool = True) -> PhaseRun:
    weighted = phase == "liver"
    pr = PhaseRun(phase_data(ds, phase, "train", weighted), phase_data(ds, phase, "val", weighted),
                  phase_data(ds, phase, "test", weighted))
    if encoder:
        _train_encoder(pr, cfg, phase)
    for name in grid:
        mode, sup = parse_variant(name)
        run = cfg.run(mode, sup, phase, epochs, cfg.lr)
        cache = pr.cache if mode != "un" else None
        monitor = pr.cache if mode == "un" else None
        pr.nets[name], pr.histories[name] = train_segmentation_net(
            pr.train, run, pr.val, cache=cache, init_from=init_from, monitor_cache=monitor)
    return pr


def run_pipeline(ds: Dataset, cfg: PipelineConfig, out_dir=None) -> PipelineResult:
    """Train and evaluate the configured grid; with ``out_dir`` every
    checkpoint, loss curve and table is written there."""
    if ds.size != cfg.size:
        raise ConfigError(f"dataset size {ds.size} != configured size {cfg.size}")
    liver = run_phase(ds, cfg, "liver", cfg.liver_grid, cfg.epochs)
    table = EvalTable()
    for name in cfg.liver_grid:
        table.add("liver", name, evaluate_net(liver.nets[name], liver.test))

    tumor = direct = direct_hist = None
    cascade: Dict[str, float] = {}
    if cfg.tumor_grid:
        source = liver.nets[cfg.transfer_from]
        needs_encoder = any(parse_variant(n)[0] != "un" for n in cfg.tumor_grid)
        tumor = run_phase(ds, cfg, "tumor", cfg.tumor_grid, cfg.tumor_epochs, source, needs_encoder)
        for name in cfg.tumor_grid:
            table.add("tumor", name, evaluate_net(tumor.nets[name], tumor.test))

        test = ds.subset("test")
        keys = test.keys()
        results = cascade_predict_batch(test.images, source, tumor.nets[cfg.cascade_tumor], cfg.crf)
        liver_pred = np.stack([r.liver for r in results])
        tumor_pred = np.stack([r.tumor for r in results])
        cas_l = case_scores(keys, test.liver, liver_pred)
        cas_t = case_scores(keys, test.tumor, tumor_pred)
        cascade = {"liver_dpc": cas_l["dpc"], "liver_dg": cas_l["dg"],
                   "tumor_dpc": cas_t["dpc"], "tumor_dg": cas_t["dg"],
                   "contained": bool(np.all(~tumor_pred | liver_pred))}
        depth = cfg.depth
        table.add("cascade_liver", cfg.transfer_from, {depth: cas_l})
        table.add("cascade_tumor", cfg.cascade_tumor, {depth: cas_t})
        if cfg.direct_baseline:
            run = cfg.run("un", "DS", "direct", cfg.tumor_epochs, cfg.lr)
            direct_train = phase_data(ds, "direct", "train")
            direct_val = phase_data(ds, "direct", "val")
            direct, direct_hist = train_segmentation_net(direct_train, run, direct_val, init_from=source)
            pred = np.stack(direct_predict_batch(test.images, direct, cfg.crf))
            d = case_scores(keys, test.tumor, pred)
            cascade["direct_tumor_dpc"], cascade["direct_tumor_dg"] = d["dpc"], d["dg"]
            table.add("direct_tumor", "UN-DS", {depth: d})

    result = PipelineResult(cfg, liver, tumor, direct, direct_hist, table, cascade)
    if out_dir is not None:
        write_result(result, out_dir)
    return result


def write_result(result: PipelineResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pipeline_config.json").write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True))
    for phase, pr in (("liver", result.liver), ("tumor", result.tumor)):
        if pr is None:
            continue
        if pr.encoder is not None:
            save_checkpoint(out / phase / "encoder", pr.encoder, {"phase": phase, "role": "encoder"})
            pr.encoder_history.write_csv(out / phase / "encoder_loss.csv")
        for name, graph in pr.nets.items():
            mode, sup = parse_variant(name)
            save_checkpoint(out / phase / name, graph,
                            {"phase": phase, "name": name, "mode": mode, "supervision": sup,
                             "encoder_hash": pr.encoder_hash if mode != "un" else None})
            pr.histories[name].write_csv(out / phase / f"{name}_loss.csv")
    if result.direct is not None:
        save_checkpoint(out / "direct" / "UN-DS", result.direct, {"phase": "direct", "name": "UN-DS"})
        result.direct_history.write_csv(out / "direct" / "UN-DS_loss.csv")
    result.table.write_csv(out / "eval_table.csv")
    (out / "eval_table.txt").write_text(result.table.to_text())
    (out / "cascade.json").write_text(json.dumps(result.cascade, indent=2, sort_keys=True))
