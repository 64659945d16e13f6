"""Segmentation losses, boundary weight maps, feature losses and Dice metrics.

Differentiable losses take a probability :class:`Tensor` and plain array
targets and return a scalar :class:`Tensor`. Metrics work on binary numpy
arrays.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, absolute, as_tensor, clip, log, power
from .errors import ContractError, DegenerateMapError, EmptyBoundaryError, ParameterError, ShapeError

DICE_SMOOTH = 1.0
PROB_CLAMP = 1e-7


@dataclass
class LossSpec:
    """Weights and hyperparameters for the segmentation objective.

    ``head_weights`` maps head index to weight; ``None`` means equal weights
    summing to one over the supervised heads.
    """

    dice_weight: float = 1.0
    ce_weight: float = 1.0
    head_weights: Optional[Dict[int, float]] = None
    ds_weight: float = 1.0
    sl1_weight: float = 1.0
    focal_gamma: float = 2.0
    huber_beta: float = 1.0
    map_w: float = 0.05
    map_sigma: float = 20.0
    use_weighted_dice: bool = False
    use_focal: bool = False
    feature_reduction: str = "mean"

    def __post_init__(self):
        weights = [self.dice_weight, self.ce_weight, self.ds_weight, self.sl1_weight, self.focal_gamma]
        if self.head_weights:
            weights += list(self.head_weights.values())
        if any(w < 0 for w in weights):
            raise ParameterError("loss weights must be non-negative")
        if self.huber_beta <= 0 or self.map_sigma <= 0:
            raise ParameterError("huber_beta and map_sigma must be positive")
        if self.feature_reduction not in ("mean", "sum"):
            raise ParameterError("feature_reduction must be 'mean' or 'sum'")

    @classmethod
    def liver(cls, **kw) -> "LossSpec":
        return cls(use_weighted_dice=True, use_focal=False, **kw)

    @classmethod
    def tumor(cls, **kw) -> "LossSpec":
        return cls(use_weighted_dice=False, use_focal=True, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["head_weights"] is not None:
            d["head_weights"] = {str(k): v for k, v in d["head_weights"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        d = dict(d)
        if d.get("head_weights") is not None:
            d["head_weights"] = {int(k): float(v) for k, v in d["head_weights"].items()}
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _target(gt, prob: Tensor) -> np.ndarray:
    g = np.asarray(gt, dtype=prob.dtype)
    if g.shape != prob.shape:
        raise ShapeError(f"target shape {g.shape} != prediction shape {prob.shape}")
    return g


def _check_prob(prob: Tensor) -> None:
    d = prob.data
    if d.size and (d.min() < 0 or d.max() > 1):
        raise ContractError("probabilities must lie in [0, 1]")


# ---------------------------------------------------------------------------
# overlap losses
# ---------------------------------------------------------------------------

def dice_loss(gt, prob: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice loss ``1 - (2 Σ g p + s) / (Σ g + Σ p + s)`` over all elements."""
    _check_prob(prob)
    g = _target(gt, prob)
    inter = (prob * g).sum()
    return 1.0 - (2.0 * inter + smooth) / (prob.sum() + float(g.sum()) + smooth)


def weighted_dice_loss(gt, prob: Tensor, weights, smooth: float = DICE_SMOOTH) -> Tensor:
    """Dice loss with per-pixel weights on both the overlap and the sizes."""
    _check_prob(prob)
    g = _target(gt, prob)
    try:
        w = np.broadcast_to(np.asarray(weights, dtype=prob.dtype), prob.shape)
    except ValueError as exc:
        raise ShapeError(f"weight map shape {np.shape(weights)} != prediction shape {prob.shape}") from exc
    wg = w * g
    inter = (prob * wg).sum()
    wp = (prob * w).sum()
    return 1.0 - (2.0 * inter + smooth) / (wp + float(wg.sum()) + smooth)


def cross_entropy(gt, prob: Tensor, eps: float = PROB_CLAMP) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    g = _target(gt, prob)
    p = clip(prob, eps, 1.0 - eps)
    per = -(log(p) * g + log(1.0 - p) * (1.0 - g))
    return per.mean()


def focal_loss(gt, prob: Tensor, gamma: float = 2.0, eps: float = PROB_CLAMP) -> Tensor:
    """Mean focal loss: ``-(1-p)^γ log p`` on positives, ``-p^γ log(1-p)`` on negatives."""
    g = _target(gt, prob)
    p = clip(prob, eps, 1.0 - eps)
    q = 1.0 - p
    pos = power(q, gamma) * log(p) * g
    neg = power(p, gamma) * log(q) * (1.0 - g)
    return (-(pos + neg)).mean()


def seg_loss(gt, prob: Tensor, spec: LossSpec, weight_map=None) -> Tensor:
    """``dice_weight * Dice + ce_weight * CE``, with the weighted-Dice and
    focal substitutions selected by ``spec``."""
    if spec.use_weighted_dice:
        if weight_map is None:
            raise ContractError("weighted Dice requested but no weight map given")
        d = weighted_dice_loss(gt, prob, weight_map)
    else:
        d = dice_loss(gt, prob)
    c = focal_loss(gt, prob, spec.focal_gamma) if spec.use_focal else cross_entropy(gt, prob)
    return d * spec.dice_weight + c * spec.ce_weight


def supervised_heads(available: Iterable[int], supervision: str) -> list:
    heads = sorted(available)
    return heads if supervision == "DS" else heads[-1:]


def head_weights(heads: Sequence[int], spec: LossSpec) -> Dict[int, float]:
    if spec.head_weights is not None:
        return {h: spec.head_weights.get(h, 0.0) for h in heads}
    return {h: 1.0 / len(heads) for h in heads}


def ds_loss(heads: Mapping[int, Tensor], gt, spec: LossSpec, supervision: str = "DS",
            depth: Optional[int] = None, weight_map=None) -> Tensor:
    """Weighted sum of per-head seg losses; NS uses only the deepest head."""
    depth = max(heads) if depth is None else depth
    wanted = list(range(1, depth + 1)) if supervision == "DS" else [depth]
    missing = [h for h in wanted if h not in heads]
    if missing:
        raise ContractError(f"missing head(s) {missing} for {supervision} supervision")
    if supervision == "NS":
        return seg_loss(gt, heads[depth], spec, weight_map)
    weights = head_weights(wanted, spec)
    total = None
    for h in wanted:
        term = seg_loss(gt, heads[h], spec, weight_map) * weights[h]
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# feature losses
# ---------------------------------------------------------------------------

def huber_elements(x: Tensor, y, beta: float = 1.0) -> Tensor:
    """Elementwise Huber: ``0.5 d²`` if ``|d| < β`` else ``β (|d| - 0.5 β)``.

    Written as ``0.5 m² + β (|d| - m)`` with ``m = min(|d|, β)``.
    """
    if beta <= 0:
        raise ParameterError("beta must be positive")
    y = y if isinstance(y, Tensor) else as_tensor(y, like=x)
    if x.shape != y.shape:
        raise ShapeError(f"feature shapes differ: {x.shape} vs {y.shape}")
    a = absolute(x - y)
    m = clip(a, None, beta)
    return m * m * 0.5 + (a - m) * beta


def smooth_l1(x: Mapping[int, Tensor], y: Mapping[int, object], levels: Optional[Sequence[int]] = None,
              beta: float = 1.0, reduction: str = "mean") -> Tensor:
    """Huber loss summed over feature levels; each level reduced by ``reduction``."""
    levels = sorted(x) if levels is None else list(levels)
    total = None
    for lvl in levels:
        if lvl not in x or lvl not in y:
            raise ContractError(f"feature level {lvl} missing")
        e = huber_elements(x[lvl], y[lvl], beta)
        term = e.mean() if reduction == "mean" else e.sum()
        total = term if total is None else total + term
    return total


def mse_loss(x: Tensor, y) -> Tensor:
    y = y if isinstance(y, Tensor) else as_tensor(y, like=x)
    if x.shape != y.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {y.shape}")
    d = x - y
    return (d * d).mean()


def feature_levels(mode: str, depth: int) -> list:
    if mode == "ES":
        return list(range(1, depth + 1))
    if mode == "BS":
        return [depth]
    return []


def total_loss(heads: Mapping[int, Tensor], gt, seg_features: Mapping[int, Tensor],
               enc_features: Optional[Mapping[int, object]], spec: LossSpec,
               supervision: str = "DS", feature_supervision: str = "none",
               depth: Optional[int] = None, weight_map=None) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    """``ds_weight * DS-Loss + sl1_weight * SL1-Loss``.

    Returns ``(total, ds, sl1)``; ``sl1`` is ``None`` without feature supervision.
    """
    depth = max(heads) if depth is None else depth
    ds = ds_loss(heads, gt, spec, supervision, depth, weight_map)
    if feature_supervision == "none":
        return ds * spec.ds_weight, ds, None
    if enc_features is None:
        raise ContractError(f"{feature_supervision} supervision needs cached encoder features")
    levels = feature_levels(feature_supervision, depth)
    sl1 = smooth_l1(seg_features, enc_features, levels, spec.huber_beta, spec.feature_reduction)
    return ds * spec.ds_weight + sl1 * spec.sl1_weight, ds, sl1


# ---------------------------------------------------------------------------
# boundary weight maps
# ---------------------------------------------------------------------------

@dataclass
class WeightMap:
    W: np.ndarray
    D: np.ndarray
    F: np.ndarray
    A: np.ndarray = field(repr=False, default=None)


def boundary_pixels(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour in the background.

    Pixels outside the image do not count as background.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ShapeError("boundary_pixels expects a 2-D mask")
    bg_nb = np.zeros_like(m)
    bg_nb[1:, :] |= ~m[:-1, :]
    bg_nb[:-1, :] |= ~m[1:, :]
    bg_nb[:, 1:] |= ~m[:, :-1]
    bg_nb[:, :-1] |= ~m[:, 1:]
    return m & bg_nb


def distance_map(mask) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest boundary pixel."""
    b = boundary_pixels(mask)
    if not b.any():
        raise EmptyBoundaryError("mask has no boundary pixels (all background or all foreground)")
    return ndimage.distance_transform_edt(~b)


def weight_map(mask, w: float = 0.05, sigma: float = 20.0) -> WeightMap:
    """``A = (w F + 1) exp(-D / (2 σ²))`` min-max normalized to [0, 1];
    ``F`` is the foreground mask itself."""
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    F = np.asarray(mask).astype(bool)
    D = distance_map(F)
    A = (w * F + 1.0) * np.exp(-D / (2.0 * sigma ** 2))
    lo, hi = A.min(), A.max()
    if hi == lo:
        raise DegenerateMapError("weight map has max A == min A")
    W = (A - lo) / (hi - lo)
    return WeightMap(W=W, D=D, F=F.astype(np.float64), A=A)


def batch_weight_maps(masks: np.ndarray, w: float = 0.05, sigma: float = 20.0) -> np.ndarray:
    """Weight maps for a (B, 1, H, W) stack; masks without a boundary get uniform weight 1."""
    out = np.ones(masks.shape, dtype=np.float64)
    for b in range(masks.shape[0]):
        try:
            out[b, 0] = weight_map(masks[b, 0], w, sigma).W
        except (EmptyBoundaryError, DegenerateMapError):
            pass
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _counts(gt, mp) -> Tuple[int, int, int]:
    g = np.asarray(gt).astype(bool)
    m = np.asarray(mp).astype(bool)
    if g.shape != m.shape:
        raise ShapeError(f"mask shapes differ: {g.shape} vs {m.shape}")
    return int(np.count_nonzero(g & m)), int(np.count_nonzero(g)), int(np.count_nonzero(m))


def _dice_from_counts(inter: int, ng: int, nm: int) -> float:
    if ng + nm == 0:
        return 1.0
    return 2.0 * inter / (ng + nm)


def dice_score(gt, mp) -> float:
    """Hard Dice; two empty masks score 1."""
    return _dice_from_counts(*_counts(gt, mp))


def dice_per_case(cases: Sequence[Tuple[np.ndarray, np.ndarray]]) -> float:
    if not cases:
        raise ContractError("dice_per_case needs at least one case")
    return float(np.mean([dice_score(g, m) for g, m in cases]))


def dice_global(cases: Sequence[Tuple[np.ndarray, np.ndarray]]) -> float:
    if not cases:
        raise ContractError("dice_global needs at least one case")
    inter = ng = nm = 0
    for g, m in cases:
        a, b, c = _counts(g, m)
        inter, ng, nm = inter + a, ng + b, nm + c
    return _dice_from_counts(inter, ng, nm)
