"""U-Net family graphs built from a :class:`NetConfig`.

Nodes are keyed ``(i, j)`` for X^{i,j}: ``i`` is the encoder level, ``j`` the
dense-skip column. ``X^{i,0}`` are encoder nodes (DownBlocks); every node with
``j >= 1`` upsamples ``X^{i+1,j-1}`` and concatenates the variant's skip set.

=================  =========================  =====================  ========
variant            node set                   skips of X^{i,j}       up mode
=================  =========================  =====================  ========
unetpp             i + j <= depth             X^{i,0..j-1}           halve
unet_e             i + j <= depth             X^{i,0}                halve
encoding_unetpp    i + j <= depth             none                   preserve
unet, es_unet      X^{i,0}, X^{i,depth-i}     X^{i,0}                halve
encoding_unet      X^{i,0}, X^{i,depth-i}     none                   preserve
=================  =========================  =====================  ========
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import RunningStats, Tensor, max_pool2d
from .blocks import DownBlock, HeadBlock, SkipConvBlock, UpBlock
from .errors import ConfigError, ParameterError, ShapeError

Node = Tuple[int, int]

LATTICE_VARIANTS = ("unetpp", "unet_e", "encoding_unetpp")
CHAIN_VARIANTS = ("unet", "es_unet", "encoding_unet")
VARIANTS = LATTICE_VARIANTS + CHAIN_VARIANTS
ENCODING_VARIANTS = ("encoding_unetpp", "encoding_unet")


@dataclass(frozen=True)
class NetConfig:
    variant: str = "unetpp"
    depth: int = 4
    base_channels: int = 32
    in_channels: int = 1
    input_size: int = 64
    supervision: str = "DS"
    feature_supervision: str = "none"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.input_size < 1 or self.input_size % (2 ** self.depth):
            raise ConfigError(f"input_size {self.input_size} not divisible by 2^{self.depth}")
        if self.supervision not in ("NS", "DS"):
            raise ConfigError(f"supervision must be NS or DS, got {self.supervision!r}")
        if self.feature_supervision not in ("none", "BS", "ES"):
            raise ConfigError(f"feature_supervision must be none/BS/ES, got {self.feature_supervision!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def architecture_key(self) -> Tuple:
        """Fields that determine parameter shapes."""
        return (self.variant, self.depth, self.base_channels, self.in_channels, self.input_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    def with_(self, **changes) -> "NetConfig":
        return replace(self, **changes)


def node_set(variant: str, depth: int) -> List[Node]:
    """Nodes in execution order: by ``i + j``, then by column."""
    if variant in LATTICE_VARIANTS:
        nodes = [(i, j) for i in range(depth + 1) for j in range(depth + 1 - i)]
    else:
        nodes = [(i, 0) for i in range(depth + 1)] + [(i, depth - i) for i in range(depth)]
    return sorted(nodes, key=lambda n: (n[0] + n[1], n[1]))


def skip_sources(variant: str, node: Node) -> List[Node]:
    i, j = node
    if j == 0 or variant in ENCODING_VARIANTS:
        return []
    if variant == "unetpp":
        return [(i, k) for k in range(j)]
    return [(i, 0)]


@dataclass
class ForwardOutputs:
    heads: Dict[int, Tensor]
    features: Dict[int, Tensor]
    nodes: Dict[Node, Tensor] = field(repr=False, default_factory=dict)


class NetGraph:
    """Blocks for every node plus a sigmoid head for each supervised X^{0,j}.

    ``level`` is the deepest head kept; it equals ``config.depth`` unless the
    graph came from :func:`prune`, in which case blocks are shared with the
    parent graph.
    """

    def __init__(self, config: NetConfig, nodes: List[Node], encoders: Dict[int, DownBlock],
                 decoders: Dict[Node, SkipConvBlock], ups: Dict[Node, UpBlock],
                 heads: Dict[int, HeadBlock], level: int):
        self.config = config
        self.nodes = nodes
        self.encoders = encoders
        self.decoders = decoders
        self.ups = ups
        self.heads = heads
        self.level = level
        self.skips = {n: skip_sources(config.variant, n) for n in nodes}

    @property
    def head_indices(self) -> List[int]:
        return sorted(self.heads)

    def inputs_of(self, node: Node) -> List[Node]:
        """Graph edges into ``node`` (upsampled parent first)."""
        i, j = node
        if j == 0:
            return [] if i == 0 else [(i - 1, 0)]
        return [(i + 1, j - 1)] + self.skips[node]

    def named_blocks(self):
        for n in self.nodes:
            i, j = n
            if j == 0:
                yield f"node_{i}_{j}/", self.encoders[i]
            else:
                yield f"node_{i}_{j}/up_", self.ups[n]
                yield f"node_{i}_{j}/", self.decoders[n]
        for h in self.head_indices:
            yield f"head_{h}/", self.heads[h]

    def named_parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for prefix, blk in self.named_blocks():
            out.update(blk.named_parameters(prefix))
        return out

    def named_stats(self) -> Dict[str, RunningStats]:
        out: Dict[str, RunningStats] = {}
        for prefix, blk in self.named_blocks():
            for k, v in blk.stats.items():
                out[prefix + k] = v
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Every parameter and running statistic as a named array."""
        out = {k: p.data for k, p in self.named_parameters().items()}
        for k, st in self.named_stats().items():
            out[f"{k}_running_mean"] = st.mean
            out[f"{k}_running_var"] = st.var
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        stats = self.named_stats()
        expected = set(params) | {f"{k}_running_{s}" for k in stats for s in ("mean", "var")}
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))[:3]
            extra = sorted(set(arrays) - expected)[:3]
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ShapeError(f"{k}: stored shape {arrays[k].shape} != {p.shape}")
        for k, p in params.items():
            p.data = np.array(arrays[k], dtype=p.dtype)
        for k, st in stats.items():
            st.mean = np.array(arrays[f"{k}_running_mean"], dtype=st.mean.dtype)
            st.var = np.array(arrays[f"{k}_running_var"], dtype=st.var.dtype)


def build(config: NetConfig) -> NetGraph:
    """Construct a graph with deterministic initialization from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    v = config.variant
    nodes = node_set(v, config.depth)
    up_mode = "preserve" if v in ENCODING_VARIANTS else "halve"
    encoders: Dict[int, DownBlock] = {}
    decoders: Dict[Node, SkipConvBlock] = {}
    ups: Dict[Node, UpBlock] = {}
    for n in nodes:
        i, j = n
        if j == 0:
            cin = config.in_channels if i == 0 else config.channels(i - 1)
            encoders[i] = DownBlock(cin, config.channels(i), rng, dtype)
        else:
            up = UpBlock(config.channels(i + 1), up_mode, dtype)
            skips = [config.channels(s[0]) for s in skip_sources(v, n)]
            ups[n] = up
            decoders[n] = SkipConvBlock(up.out_channels, skips, config.channels(i), rng, dtype)
    head_idx = range(1, config.depth + 1) if v in LATTICE_VARIANTS else [config.depth]
    heads = {h: HeadBlock(config.channels(0), rng, dtype) for h in head_idx}
    return NetGraph(config, nodes, encoders, decoders, ups, heads, config.depth)


def forward(graph: NetGraph, batch: Tensor, training: bool = False) -> ForwardOutputs:
    """Run every node; returns all head probabilities and encoder features
    X^{1,0}..X^{level,0} (taken before pooling)."""
    cfg = graph.config
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch, dtype=cfg.dtype))
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels or batch.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ShapeError(
            f"expected input (B, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {batch.shape}")
    X: Dict[Node, Tensor] = {}
    for n in graph.nodes:
        i, j = n
        if j == 0:
            inp = batch if i == 0 else max_pool2d(X[(i - 1, 0)])
            X[n] = graph.encoders[i](inp, training)
        else:
            up = graph.ups[n](X[(i + 1, j - 1)])
            X[n] = graph.decoders[n](up, [X[s] for s in graph.skips[n]], training)
    heads = {h: graph.heads[h](X[(0, h)]) for h in graph.head_indices}
    feats = {i: X[(i, 0)] for i in range(1, graph.level + 1)}
    return ForwardOutputs(heads, feats, X)


def prune(graph: NetGraph, level: int) -> NetGraph:
    """Sub-network for head X^{0,level}: nodes with ``i + j <= level``.

    Blocks are shared with ``graph``, so the pruned head reproduces the full
    graph's head bitwise in eval mode.
    """
    if graph.config.variant not in LATTICE_VARIANTS:
        raise ParameterError(f"variant {graph.config.variant!r} has a single head and cannot be pruned")
    if not 1 <= level <= graph.level:
        raise ParameterError(f"pruning level must be in 1..{graph.level}, got {level}")
    nodes = [n for n in graph.nodes if n[0] + n[1] <= level]
    return NetGraph(
        graph.config,
        nodes,
        {i: b for i, b in graph.encoders.items() if i <= level},
        {n: b for n, b in graph.decoders.items() if n in nodes},
        {n: b for n, b in graph.ups.items() if n in nodes},
        {level: graph.heads[level]},
        level,
    )


def param_count(graph: NetGraph) -> int:
    return sum(p.size for p in graph.parameters())


def transfer_init(target: NetGraph, source: NetGraph) -> NetGraph:
    """Copy every parameter and batch-norm statistic from ``source``."""
    if target.config.architecture_key() != source.config.architecture_key() or target.level != source.level:
        raise ConfigError("transfer_init needs graphs with identical architecture")
    target.load_state_arrays({k: np.copy(a) for k, a in source.state_arrays().items()})
    return target


def reaches(graph: NetGraph, src: Node, dst: Node) -> bool:
    """Whether activation ``src`` is an ancestor of ``dst`` in the graph."""
    stack, seen = [dst], {dst}
    while stack:
        n = stack.pop()
        if n == src:
            return True
        for p in graph.inputs_of(n):
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return False
