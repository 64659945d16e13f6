"""Command-line interface (``esupp``).

Exit codes: 0 on success, 2 on validation errors (bad arguments, configs,
files or shapes), 3 on runtime failures such as divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..errors import EsuppError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


def _thread_limit():
    raw = os.environ.get("ESUPP_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"ESUPP_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValidationError("ESUPP_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _read_json(path: Optional[str]) -> dict:
    if not path:
        return {}
    from ..errors import ConfigError
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read JSON config {path}: {exc}") from exc


def _run_config(args, phase: str, mode: str = "un", supervision: str = "DS"):
    from ..losses import LossSpec
    from .training import RunConfig
    d = _read_json(getattr(args, "config", None))
    d.setdefault("phase", phase)
    d["phase"] = phase
    d["mode"] = mode
    net = dict(d.get("net", {}))
    net["supervision"] = supervision
    d["net"] = net
    return RunConfig.from_dict(d)


def _fit_size(cfg, ds):
    if cfg.net.input_size != ds.size:
        cfg = cfg.with_(net=cfg.net.with_(input_size=ds.size))
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import save_dataset, synth_dataset
    ds = synth_dataset(args.seed, args.cases, args.slices, args.size)
    save_dataset(args.out, ds)
    print(f"wrote {len(ds)} slices from {args.cases} cases to {args.out}")
    return EXIT_OK


def cmd_train_encoder(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_dataset
    from .training import phase_data, train_encoding_net
    ds = load_dataset(args.data)
    cfg = _fit_size(_run_config(args, args.phase), ds)
    cfg = cfg.with_(net=cfg.net.with_(variant="encoding_unetpp"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weighted = cfg.loss.use_weighted_dice
    train = phase_data(ds, args.phase, "train", weighted)
    val = phase_data(ds, args.phase, "val", weighted)
    graph, hist = train_encoding_net(train, cfg, val, history_path=out / "loss.csv")
    h = save_checkpoint(out, graph, {"phase": args.phase, "role": "encoder", "run": cfg.to_dict()})
    print(f"encoder checkpoint {out} hash {h}")
    return EXIT_OK


def cmd_extract_features(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .features import extract_features, save_cache
    from .training import phase_data
    graph, manifest = load_checkpoint(args.encoder)
    ds = load_dataset(args.data)
    data = phase_data(ds, args.phase, args.split)
    cache = extract_features(graph, manifest["hash"], data.keys, data.targets, data.images, args.source)
    save_cache(args.out, cache)
    print(f"cached {len(cache)} samples x {len(cache.levels)} levels to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
    from .data import load_dataset
    from .features import load_cache
    from .training import phase_data, train_segmentation_net
    ds = load_dataset(args.data)
    cfg = _fit_size(_run_config(args, args.phase, args.mode, args.supervision.upper()), ds)
    cache = None
    if args.cache:
        expect = checkpoint_hash(args.encoder) if args.encoder else None
        cache = load_cache(args.cache, expect)
    elif args.mode != "un":
        from ..errors import ConfigError
        raise ConfigError(f"--mode {args.mode} needs --cache")
    init = load_checkpoint(args.init)[0] if args.init else None
    weighted = cfg.loss.use_weighted_dice
    train = phase_data(ds, args.phase, "train", weighted)
    val = phase_data(ds, args.phase, "val", weighted)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graph, _ = train_segmentation_net(train, cfg, val, cache=cache, init_from=init, history_path=out / "loss.csv")
    name = f"{args.mode.upper()}-{args.supervision.upper()}"
    h = save_checkpoint(out, graph, {"phase": args.phase, "name": name, "mode": args.mode,
                                     "supervision": args.supervision.upper(),
                                     "encoder_hash": None if cache is None else cache.encoder_hash,
                                     "run": cfg.to_dict()})
    print(f"{name} checkpoint {out} hash {h}")
    return EXIT_OK


def _load_images(path: str) -> np.ndarray:
    from ..autodiff.serialization import load_tsr
    from ..errors import FormatError
    from ..preprocess import preprocess_slice
    from ..volumes import import_nifti, load_vol1
    p = Path(path)
    if p.is_dir():
        vol = load_vol1(p)
        data = vol.data
        if vol.intensity_unit == "HU":
            data = np.stack([preprocess_slice(s) for s in data])
        return data
    if p.suffix in (".nii",):
        return np.stack([preprocess_slice(s) for s in import_nifti(p).data])
    if p.suffix == ".tsr":
        arr = load_tsr(p).astype(np.float64)
        return arr[None] if arr.ndim == 2 else arr
    raise FormatError(f"unsupported input {path}: expected a VOL1 directory, .nii or .tsr")


def cmd_predict(args) -> int:
    from ..autodiff.serialization import save_tsr
    from ..crf import CrfParams
    from .cascade import cascade_predict_batch
    from .checkpoint import load_checkpoint
    liver, _ = load_checkpoint(args.liver_net)
    tumor, _ = load_checkpoint(args.tumor_net)
    crf = CrfParams.from_dict(_read_json(args.crf_params)) if args.crf_params else None
    images = _load_images(args.input)
    results = cascade_predict_batch(images, liver, tumor, crf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tsr(out / "liver.tsr", np.stack([r.liver for r in results]).astype(np.float32))
    save_tsr(out / "tumor.tsr", np.stack([r.tumor for r in results]).astype(np.float32))
    print(f"wrote masks for {len(results)} slices to {out}")
    return EXIT_OK


def cmd_crf(args) -> int:
    from ..autodiff.serialization import load_tsr, save_tsr
    from ..crf import CrfParams, crf_refine_capped
    probs = load_tsr(args.probs).astype(np.float64)
    image = load_tsr(args.image).astype(np.float64)
    params = CrfParams.from_dict(_read_json(args.params)) if args.params else CrfParams()
    labels = crf_refine_capped(probs, image, params)
    save_tsr(args.out, labels.astype(np.float32))
    print(f"refined {labels.size} pixels, {int(labels.sum())} foreground")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from ..errors import IntegrityError
    from .checkpoint import load_checkpoint, read_manifest
    from .data import load_dataset
    from .evaluate import GRID, EvalTable, evaluate_net
    from .training import phase_data
    ds = load_dataset(args.data)
    root = Path(args.checkpoints_dir)
    table = EvalTable()
    found = 0
    for phase in ("liver", "tumor"):
        d = root / phase
        if not d.is_dir():
            continue
        names = sorted((p.name for p in d.iterdir() if (p / "manifest.json").exists() and p.name != "encoder"),
                       key=lambda n: (GRID.index(n) if n in GRID else len(GRID), n))
        data = phase_data(ds, phase, args.split)
        for name in names:
            read_manifest(d / name)
            graph, _ = load_checkpoint(d / name)
            table.add(phase, name, evaluate_net(graph, data))
            found += 1
    if not found:
        raise IntegrityError(f"no checkpoints found under {root}/liver or {root}/tumor")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "eval_table.csv")
    (out / "eval_table.txt").write_text(table.to_text())
    print(table.to_text(), end="")
    return EXIT_OK


def cmd_prune_bench(args) -> int:
    from ..errors import ParameterError
    from .checkpoint import load_checkpoint
    from .evaluate import prune_bench
    graph, _ = load_checkpoint(args.checkpoint)
    try:
        levels = [int(x) for x in args.levels.split(",") if x.strip()]
    except ValueError as exc:
        raise ParameterError(f"bad --levels {args.levels!r}") from exc
    report = prune_bench(graph, levels, args.n, seed=args.seed)
    print(report.to_text(), end="")
    return EXIT_OK if all(r["equivalent"] for r in report.rows) else EXIT_RUNTIME


def cmd_grad_check(args) -> int:
    from .selfcheck import gradient_suite
    rows = gradient_suite(repetitions=args.reps, seed=args.seed)
    worst = 0.0
    for name, err in rows:
        worst = max(worst, err)
        print(f"{name:<28} {err:.3e}")
    ok = worst <= args.tol
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'} at tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_run_pipeline(args) -> int:
    from .data import load_dataset
    from .grid import PipelineConfig, run_pipeline
    ds = load_dataset(args.data)
    cfg = PipelineConfig.from_dict(_read_json(args.config))
    if cfg.size != ds.size:
        cfg = cfg.with_(size=ds.size)
    result = run_pipeline(ds, cfg, args.out)
    print(result.table.to_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esupp", description="UNet++ with encoder feature supervision")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic liver/tumor dataset")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--cases", type=int, default=60)
    s.add_argument("--slices", type=int, default=4)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-encoder", help="train the label autoencoder")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--phase", choices=("liver", "tumor"), default="liver")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_encoder)

    s = sub.add_parser("extract-features", help="cache frozen encoder features")
    s.add_argument("--encoder", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--phase", choices=("liver", "tumor"), default="liver")
    s.add_argument("--split", default="train")
    s.add_argument("--source", choices=("label", "image"), default="label")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_features)

    s = sub.add_parser("train", help="train a segmentation network")
    s.add_argument("--mode", choices=("un", "bs", "es"), required=True)
    s.add_argument("--supervision", choices=("ns", "ds", "NS", "DS"), required=True)
    s.add_argument("--phase", choices=("liver", "tumor", "direct"), default="liver")
    s.add_argument("--data", required=True)
    s.add_argument("--cache")
    s.add_argument("--encoder", help="encoder checkpoint whose hash the cache must match")
    s.add_argument("--init", help="checkpoint to transfer-initialize from")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="cascaded liver -> tumor inference")
    s.add_argument("--liver-net", required=True)
    s.add_argument("--tumor-net", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--crf-params")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("crf", help="dense CRF refinement of a probability map")
    s.add_argument("--probs", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--params")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_crf)

    s = sub.add_parser("evaluate", help="DPC/DG table for every checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoints-dir", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("prune-bench", help="inference time per pruning level")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--levels", default="1,2,3,4")
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prune_bench)

    s = sub.add_parser("grad-check", help="finite-difference check of every primitive and loss")
    s.add_argument("--reps", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("run-pipeline", help="encoder, grid, tumor nets, cascade and tables in one go")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run_pipeline)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EsuppError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
