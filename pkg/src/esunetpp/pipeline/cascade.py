"""Two-stage inference: liver on the full slice, then tumors inside the liver crop."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..architectures import NetGraph
from ..crf import CrfParams, crf_refine_capped
from ..preprocess import liver_crop, map_back
from .training import predict_probs


def _labels(prob: np.ndarray, image: np.ndarray, crf: Optional[CrfParams]) -> np.ndarray:
    if crf is None:
        return prob >= 0.5
    return crf_refine_capped(prob, image, crf)


def _head(graph: NetGraph, head: Optional[int]) -> int:
    return graph.head_indices[-1] if head is None else head


@dataclass
class CascadeResult:
    liver: np.ndarray
    tumor: np.ndarray


def cascade_predict_batch(images: np.ndarray, liver_net: NetGraph, tumor_net: NetGraph,
                          crf: Optional[CrfParams] = None, liver_head: Optional[int] = None,
                          tumor_head: Optional[int] = None) -> List[CascadeResult]:
    """Cascade over a stack of (N, H, W) slices.

    Tumor masks are always intersected with the emitted liver mask; a slice
    with no predicted liver gets an empty tumor mask.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    p_liver = predict_probs(liver_net, images[:, None])[_head(liver_net, liver_head)]
    livers = [_labels(p_liver[k], images[k], crf) for k in range(len(images))]

    crops, transforms, owners = [], [], []
    for k, lv in enumerate(livers):
        if not lv.any():
            continue
        crop, _, tf = liver_crop(images[k], lv, target=tumor_net.config.input_size, slice_index=k)
        crops.append(crop)
        transforms.append(tf)
        owners.append(k)
    tumors = [np.zeros(images.shape[1:], dtype=bool) for _ in range(len(images))]
    if crops:
        stack = np.stack(crops)
        p_tumor = predict_probs(tumor_net, stack[:, None])[_head(tumor_net, tumor_head)]
        for c, (k, tf) in enumerate(zip(owners, transforms)):
            lab = _labels(p_tumor[c], stack[c], crf)
            tumors[k] = map_back(lab, tf, images.shape[1:]) & livers[k]
    return [CascadeResult(lv.astype(bool), tm) for lv, tm in zip(livers, tumors)]


def cascade_predict(image_slice, liver_net: NetGraph, tumor_net: NetGraph,
                    crf_params: Optional[CrfParams] = None) -> Tuple[np.ndarray, np.ndarray]:
    r = cascade_predict_batch(np.asarray(image_slice)[None], liver_net, tumor_net, crf_params)[0]
    return r.liver, r.tumor


def direct_predict_batch(images: np.ndarray, tumor_net: NetGraph, crf: Optional[CrfParams] = None,
                         head: Optional[int] = None) -> List[np.ndarray]:
    """Single-pass tumor segmentation from full slices (the baseline)."""
    images = np.asarray(images, dtype=np.float64)
    p = predict_probs(tumor_net, images[:, None])[_head(tumor_net, head)]
    return [_labels(p[k], images[k], crf) for k in range(len(images))]
