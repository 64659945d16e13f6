"""Fully-connected two-label CRF with dense mean-field inference.

The pairwise kernel between pixels i and j is

    k(i, j) = w1 exp(-|p_i - p_j|² / 2θα² - |I_i - I_j|² / 2θβ²)
            + w2 exp(-|p_i - p_j|² / 2θγ²)

and label compatibility is Potts, μ(a, b) = [a != b]. Messages are computed
exactly over all pixel pairs, so problems are capped at ``max_pixels``.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, ParameterError, ShapeError, SizeLimitError
from .preprocess import resize_bilinear, resize_nearest

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class CrfParams:
    w_appearance: float = 1.0
    w_smoothness: float = 1.0
    theta_alpha: float = 3.0
    theta_beta: float = 0.1
    theta_gamma: float = 3.0
    iterations: int = 5
    max_pixels: int = 4096

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ParameterError("CRF bandwidths must be positive")
        if self.iterations < 1:
            raise ParameterError("CRF needs at least one iteration")
        if self.w_appearance < 0 or self.w_smoothness < 0:
            raise ParameterError("CRF kernel weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CrfParams":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class CrfProblem:
    """Unaries (N, 2), positions (N, 2) and intensities (N,) of N pixels."""

    unary: np.ndarray
    positions: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        n = self.unary.shape[0]
        if self.unary.shape != (n, 2) or self.positions.shape[0] != n or self.intensities.shape[0] != n:
            raise ShapeError("unary, positions and intensities must describe the same pixels")
        if not np.all(np.isfinite(self.unary)):
            raise ContractError("unary potentials must be finite")

    @property
    def n(self) -> int:
        return self.unary.shape[0]

    @classmethod
    def from_image(cls, prob_map, intensity_image) -> "CrfProblem":
        p = np.asarray(prob_map, dtype=np.float64)
        img = np.asarray(intensity_image, dtype=np.float64)
        if p.shape != img.shape or p.ndim != 2:
            raise ShapeError(f"prob map {p.shape} and image {img.shape} must be equal 2-D shapes")
        rr, cc = np.mgrid[0:p.shape[0], 0:p.shape[1]]
        pos = np.stack([rr.ravel(), cc.ravel()], axis=1)
        return cls(unary_from_probs(p).reshape(-1, 2), pos, img.ravel())


POTTS = np.array([[0.0, 1.0], [1.0, 0.0]])


def unary_from_probs(prob_map) -> np.ndarray:
    """``ψ(x=l) = -log P(l)`` with P(1) = p, P(0) = 1 - p; last axis is the label."""
    p = np.clip(np.asarray(prob_map, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.stack([-np.log1p(-p), -np.log(p)], axis=-1)


def pairwise_kernel(i: int, j: int, problem: CrfProblem, params: CrfParams) -> float:
    dp2 = float(np.sum((problem.positions[i] - problem.positions[j]) ** 2))
    di2 = float((problem.intensities[i] - problem.intensities[j]) ** 2)
    return (params.w_appearance * np.exp(-dp2 / (2 * params.theta_alpha ** 2) - di2 / (2 * params.theta_beta ** 2))
            + params.w_smoothness * np.exp(-dp2 / (2 * params.theta_gamma ** 2)))


def kernel_matrix(problem: CrfProblem, params: CrfParams) -> np.ndarray:
    """Dense (N, N) kernel with a zero diagonal."""
    if problem.n > params.max_pixels:
        raise SizeLimitError(f"{problem.n} pixels exceeds the dense CRF cap of {params.max_pixels}")
    p = problem.positions
    sq = (p * p).sum(axis=1)
    dp2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (p @ p.T), 0.0)
    I = problem.intensities
    di2 = (I[:, None] - I[None, :]) ** 2
    K = params.w_appearance * np.exp(-dp2 / (2 * params.theta_alpha ** 2) - di2 / (2 * params.theta_beta ** 2))
    K += params.w_smoothness * np.exp(-dp2 / (2 * params.theta_gamma ** 2))
    np.fill_diagonal(K, 0.0)
    return K


def _softmax_neg(energy: np.ndarray) -> np.ndarray:
    e = -energy
    e = e - e.max(axis=1, keepdims=True)
    q = np.exp(e)
    return q / q.sum(axis=1, keepdims=True)


def mean_field_step(Q: np.ndarray, problem: CrfProblem, params: CrfParams,
                    K: Optional[np.ndarray] = None, compat: np.ndarray = POTTS) -> np.ndarray:
    """``Q'_i(l) ∝ exp(-ψ_i(l) - Σ_l' μ(l, l') Σ_{j≠i} k_ij Q_j(l'))``."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != problem.unary.shape:
        raise ShapeError(f"Q shape {Q.shape} != unary shape {problem.unary.shape}")
    if not np.allclose(Q.sum(axis=1), 1.0, atol=1e-9) or Q.min() < 0:
        raise ContractError("Q rows must be probability distributions")
    K = kernel_matrix(problem, params) if K is None else K
    message = (K @ Q) @ compat.T
    return _softmax_neg(problem.unary + message)


def mean_field(problem: CrfProblem, params: CrfParams, Q0: Optional[np.ndarray] = None,
               compat: np.ndarray = POTTS) -> np.ndarray:
    K = kernel_matrix(problem, params)
    Q = _softmax_neg(problem.unary) if Q0 is None else np.asarray(Q0, dtype=np.float64)
    for _ in range(params.iterations):
        Q = mean_field_step(Q, problem, params, K, compat)
    return Q


def crf_refine(prob_map, intensity_image, params: CrfParams = CrfParams()) -> np.ndarray:
    """Mean-field from the network probabilities, then per-pixel argmax.

    Returns a boolean foreground map with the input's shape.
    """
    p = np.asarray(prob_map, dtype=np.float64)
    problem = CrfProblem.from_image(p, intensity_image)
    if problem.n > params.max_pixels:
        raise SizeLimitError(f"{problem.n} pixels exceeds the dense CRF cap of {params.max_pixels}")
    q1 = np.clip(p.ravel(), 0.0, 1.0)
    Q = mean_field(problem, params, np.stack([1.0 - q1, q1], axis=1))
    return (Q[:, 1] > Q[:, 0]).reshape(p.shape)


def crf_refine_capped(prob_map, intensity_image, params: CrfParams = CrfParams()) -> np.ndarray:
    """:func:`crf_refine`, downscaling above the pixel cap and upscaling the labels back."""
    p = np.asarray(prob_map, dtype=np.float64)
    if p.size <= params.max_pixels:
        return crf_refine(p, intensity_image, params)
    factor = int(np.ceil(np.sqrt(p.size / params.max_pixels)))
    small = (max(1, p.shape[0] // factor), max(1, p.shape[1] // factor))
    scale = small[0] / p.shape[0]
    small_params = CrfParams(params.w_appearance, params.w_smoothness, params.theta_alpha * scale,
                             params.theta_beta, params.theta_gamma * scale, params.iterations, params.max_pixels)
    lab = crf_refine(resize_bilinear(p, small), resize_bilinear(intensity_image, small), small_params)
    return resize_nearest(lab, p.shape).astype(bool)


def gibbs_energy(labels, problem: CrfProblem, params: CrfParams, compat: np.ndarray = POTTS) -> float:
    """``Σ_i ψ_u(x_i) + Σ_{i<j} μ(x_i, x_j) k(i, j)``."""
    x = np.asarray(labels).astype(int).reshape(-1)
    if x.shape[0] != problem.n:
        raise ShapeError("labeling size does not match the problem")
    unary = problem.unary[np.arange(problem.n), x].sum()
    K = kernel_matrix(problem, params)
    mu = compat[x[:, None], x[None, :]]
    return float(unary + 0.5 * np.sum(mu * K))


def exhaustive_map(problem: CrfProblem, params: CrfParams, compat: np.ndarray = POTTS) -> np.ndarray:
    """Exact MAP labeling by enumerating all 2^N labelings (N <= 20).

    Ties resolve to the lexicographically smallest labeling.
    """
    n = problem.n
    if n > 20:
        raise SizeLimitError(f"exhaustive MAP is limited to 20 pixels, got {n}")
    K = kernel_matrix(problem, params)
    labels = np.array(list(itertools.product((0, 1), repeat=n)), dtype=int)  # lexicographic order
    unary = problem.unary[np.arange(n)[None, :], labels].sum(axis=1)
    # Potts: pairwise = Σ_{i<j} K_ij [x_i != x_j] = 0.5 Σ_ij K_ij (x_i + x_j - 2 x_i x_j)
    if np.array_equal(compat, POTTS):
        deg = K.sum(axis=1)
        pair = labels @ deg - np.einsum("bi,ij,bj->b", labels, K, labels)
    else:
        pair = np.array([0.5 * np.sum(compat[x[:, None], x[None, :]] * K) for x in labels])
    energy = unary + pair
    return labels[int(np.argmin(energy))]
