"""Convolution, down/up-sampling, skip-connection and head blocks."""
from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .autodiff import (
    RunningStats,
    Tensor,
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    relu,
    sigmoid,
)
from .errors import ParameterError, ShapeError


def bilinear_kernel(k: int = 4, factor: int = 2) -> np.ndarray:
    """2-D bilinear upsampling kernel ``h ⊗ h`` with
    ``h[i] = 1 - |(i + 0.5) / factor - k / (2 * factor)|``.

    For k=4, factor=2 the 1-D taps are [0.25, 0.75, 0.75, 0.25].
    """
    if factor <= 0 or k < factor:
        raise ParameterError(f"bilinear kernel needs k >= factor > 0, got k={k}, factor={factor}")
    i = np.arange(k, dtype=np.float64)
    h = 1.0 - np.abs((i + 0.5) / factor - k / (2.0 * factor))
    return np.outer(h, h)


def bilinear_init(in_channels: int, out_channels: int, k: int = 4, factor: int = 2) -> np.ndarray:
    """(in, out, k, k) transposed-conv weights: output channel c reads input
    channel c through the bilinear kernel, every other tap is zero."""
    w = np.zeros((in_channels, out_channels, k, k))
    kern = bilinear_kernel(k, factor)
    for c in range(min(in_channels, out_channels)):
        w[c, c] = kern
    return w


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Block:
    """Parameter container; subclasses fill ``self.params`` in build order."""

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.stats: Dict[str, RunningStats] = {}

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


class ConvBlock(Block):
    """3x3 conv (stride 1, pad 1) -> batch norm -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.params["kernel"] = Tensor(_kaiming(rng, (out_channels, in_channels, 3, 3), 9 * in_channels, dtype), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.params["bn_scale"] = Tensor(np.ones(out_channels, dtype=dtype), requires_grad=True)
        self.params["bn_shift"] = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.stats["bn"] = RunningStats.init(out_channels, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"ConvBlock expects {self.in_channels} channels, got {x.shape[1]}")
        p = self.params
        y = conv2d(x, p["kernel"], p["bias"], stride=1, pad=1)
        y = batch_norm(y, p["bn_scale"], p["bn_shift"], self.stats["bn"], training)
        return relu(y)


class DownBlock(Block):
    """Two ConvBlocks: the first changes the channel count, the second keeps it.
    Pooling is left to the graph so the pre-pool output can be tapped."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = ConvBlock(in_channels, out_channels, rng, dtype)
        self.conv2 = ConvBlock(out_channels, out_channels, rng, dtype)
        for name, blk in (("conv1", self.conv1), ("conv2", self.conv2)):
            for k, v in blk.params.items():
                self.params[f"{name}_{k}"] = v
            for k, v in blk.stats.items():
                self.stats[f"{name}_{k}"] = v

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"DownBlock expects {self.in_channels} channels, got {x.shape[1]}")
        return self.conv2(self.conv1(x, training), training)


class UpBlock(Block):
    """4x4 stride-2 pad-1 transposed conv, bilinear-initialized.

    ``mode="halve"`` outputs half the input channels (segmentation decoders);
    ``mode="preserve"`` keeps them (skip-free encoding networks).
    """

    def __init__(self, in_channels: int, mode: str = "halve", dtype=np.float64):
        super().__init__()
        if mode not in ("halve", "preserve"):
            raise ParameterError(f"unknown UpBlock mode {mode!r}")
        if mode == "halve" and in_channels % 2:
            raise ParameterError("halve mode needs an even channel count")
        self.mode = mode
        self.in_channels = in_channels
        self.out_channels = in_channels // 2 if mode == "halve" else in_channels
        self.params["kernel"] = Tensor(bilinear_init(in_channels, self.out_channels).astype(dtype), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(self.out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"UpBlock expects {self.in_channels} channels, got {x.shape[1]}")
        return conv_transpose2d(x, self.params["kernel"], self.params["bias"], stride=2, pad=1)


class SkipConvBlock(Block):
    """Concatenate the upsampled map with skip maps, then one ConvBlock
    (the Convolution_SC layer) bringing channels to the level's width."""

    def __init__(self, up_channels: int, skip_channels: Sequence[int], out_channels: int,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.up_channels = up_channels
        self.skip_channels = list(skip_channels)
        self.in_channels = up_channels + sum(self.skip_channels)
        self.out_channels = out_channels
        self.conv = ConvBlock(self.in_channels, out_channels, rng, dtype)
        self.params = self.conv.params
        self.stats = self.conv.stats

    def __call__(self, upsampled: Tensor, skips: Sequence[Tensor], training: bool) -> Tensor:
        if len(skips) != len(self.skip_channels):
            raise ShapeError(f"SkipConvBlock expects {len(self.skip_channels)} skips, got {len(skips)}")
        for s in skips:
            if s.shape[2:] != upsampled.shape[2:]:
                raise ShapeError(f"skip spatial size {s.shape[2:]} != upsampled {upsampled.shape[2:]}")
        return self.conv(concat_channels([upsampled, *skips]), training)


class HeadBlock(Block):
    """1x1 conv to a single channel followed by a sigmoid.

    The bias starts at the log-odds of ``prior`` so an untrained head predicts
    background everywhere.
    """

    def __init__(self, in_channels: int, rng: np.random.Generator, dtype=np.float64, prior: float = 0.1):
        super().__init__()
        self.in_channels = in_channels
        w = rng.standard_normal((1, in_channels, 1, 1)) * np.sqrt(1.0 / in_channels)
        self.params["kernel"] = Tensor(w.astype(dtype), requires_grad=True)
        self.params["bias"] = Tensor(np.full(1, np.log(prior / (1 - prior)), dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return sigmoid(conv2d(x, self.params["kernel"], self.params["bias"]))


def down_block_forward(block: DownBlock, x: Tensor, training: bool = True) -> Tensor:
    return block(x, training)


def up_block_forward(block: UpBlock, x: Tensor) -> Tensor:
    return block(x)


def skip_conv_forward(block: SkipConvBlock, upsampled: Tensor, skips: Iterable[Tensor], training: bool = True) -> Tensor:
    return block(upsampled, list(skips), training)
