"""Per-variant, per-head Dice tables and pruning benchmarks."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from ..architectures import LATTICE_VARIANTS, NetGraph, forward, param_count, prune
from ..autodiff import Tensor, no_grad
from ..errors import ContractError
from ..losses import dice_global, dice_per_case
from .training import PhaseData, predict_probs

GRID = ("UN-NS", "UN-DS", "BS-NS", "BS-DS", "ES-NS", "ES-DS")


def variant_name(mode: str, supervision: str) -> str:
    return f"{mode.upper()}-{supervision.upper()}"


def _by_case(keys: Sequence[tuple], gt: np.ndarray, pred: np.ndarray):
    order: Dict[int, List[int]] = {}
    for k, (case, _) in enumerate(keys):
        order.setdefault(int(case), []).append(k)
    return [(gt[idx], pred[idx]) for _, idx in sorted(order.items())]


def case_scores(keys: Sequence[tuple], gt: np.ndarray, pred: np.ndarray) -> Dict[str, float]:
    """DPC averages per-case Dice over the case's slice stack; DG pools all pixels."""
    cases = _by_case(keys, gt, pred)
    return {"dpc": dice_per_case(cases), "dg": dice_global(cases)}


def head_predictions(graph: NetGraph, inputs: np.ndarray, via_pruning: bool = True) -> Dict[int, np.ndarray]:
    """Binary predictions per head. Lattice graphs evaluate head L on the
    pruned sub-network, which matches the full graph exactly."""
    if not via_pruning or graph.config.variant not in LATTICE_VARIANTS:
        return {h: p >= 0.5 for h, p in predict_probs(graph, inputs).items()}
    out = {}
    for h in graph.head_indices:
        out[h] = predict_probs(prune(graph, h), inputs)[h] >= 0.5
    return out


def evaluate_net(graph: NetGraph, data: PhaseData, via_pruning: bool = True) -> Dict[int, Dict[str, float]]:
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty split")
    preds = head_predictions(graph, data.inputs, via_pruning)
    return {h: case_scores(data.keys, data.targets, p) for h, p in preds.items()}


@dataclass
class EvalTable:
    """Rows of (phase, variant, head, dpc, dg)."""

    rows: List[dict] = field(default_factory=list)

    def add(self, phase: str, variant: str, scores: Mapping[int, Mapping[str, float]]) -> None:
        for h in sorted(scores):
            self.rows.append({"phase": phase, "variant": variant, "head": int(h),
                              "dpc": float(scores[h]["dpc"]), "dg": float(scores[h]["dg"])})

    def get(self, phase: str, variant: str, head: int, metric: str = "dpc") -> float:
        for r in self.rows:
            if r["phase"] == phase and r["variant"] == variant and r["head"] == head:
                return r[metric]
        raise KeyError((phase, variant, head))

    def cells(self, phase: str) -> List[dict]:
        return [r for r in self.rows if r["phase"] == phase]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "variant", "head", "dpc", "dg"])
        for r in self.rows:
            w.writerow([r["phase"], r["variant"], f"X0{r['head']}", f"{r['dpc']:.6f}", f"{r['dg']:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def to_text(self) -> str:
        """Aligned table: one line per (phase, variant), DPC/DG per head."""
        heads = sorted({r["head"] for r in self.rows})
        header = ["phase", "variant"] + [f"X0,{h} DPC/DG" for h in heads]
        lines = []
        groups: Dict[tuple, dict] = {}
        for r in self.rows:
            groups.setdefault((r["phase"], r["variant"]), {})[r["head"]] = r
        for (phase, variant), by_head in groups.items():
            cells = [phase, variant]
            for h in heads:
                r = by_head.get(h)
                cells.append("-" if r is None else f"{r['dpc']:.4f}/{r['dg']:.4f}")
            lines.append(cells)
        widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        return "\n".join([fmt.format(*header)] + [fmt.format(*c) for c in lines]) + "\n"


def evaluate_grid(nets: Mapping[str, NetGraph], data: PhaseData, phase: str,
                  table: Optional[EvalTable] = None) -> EvalTable:
    table = EvalTable() if table is None else table
    for name in sorted(nets, key=lambda n: (GRID.index(n) if n in GRID else len(GRID), n)):
        table.add(phase, name, evaluate_net(nets[name], data))
    return table


# ---------------------------------------------------------------------------
# pruning benchmark
# ---------------------------------------------------------------------------

@dataclass
class PruneReport:
    rows: List[dict]

    def median_times(self) -> Dict[int, float]:
        return {r["level"]: r["median_s"] for r in self.rows}

    def to_text(self) -> str:
        out = ["level  nodes  params  median_ms  equivalent"]
        for r in self.rows:
            out.append(f"{r['level']:<5}  {r['nodes']:<5}  {r['params']:<6}  {r['median_s'] * 1e3:9.3f}  {r['equivalent']}")
        return "\n".join(out) + "\n"


def prune_bench(graph: NetGraph, levels: Sequence[int] = (1, 2, 3, 4), n_images: int = 50,
                seed: int = 0, inputs: Optional[np.ndarray] = None, repeats: int = 1) -> PruneReport:
    """Median single-image inference time per pruning level, plus a bitwise
    check of each pruned head against the full graph."""
    cfg = graph.config
    size = cfg.input_size
    if inputs is None:
        inputs = np.random.default_rng(seed).standard_normal((n_images, cfg.in_channels, size, size))
    x = np.asarray(inputs, dtype=cfg.dtype)[:n_images]
    pruned = {L: prune(graph, L) for L in levels}
    times: Dict[int, List[float]] = {L: [] for L in levels}
    equivalent = {L: True for L in levels}
    with no_grad():
        for k in range(x.shape[0]):
            img = Tensor(x[k:k + 1])
            # same batch shape as the timed runs, so the comparison is bitwise
            full = forward(graph, img, training=False).heads
            # interleave levels so drifts in machine load hit all of them
            for L in levels:
                best = np.inf
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    out = forward(pruned[L], img, training=False).heads[L]
                    best = min(best, time.perf_counter() - t0)
                times[L].append(best)
                if not np.array_equal(out.data, full[L].data):
                    equivalent[L] = False
    rows = [{"level": L, "nodes": len(pruned[L].nodes), "params": param_count(pruned[L]),
             "median_s": float(np.median(times[L])), "equivalent": equivalent[L]} for L in levels]
    return PruneReport(rows)
