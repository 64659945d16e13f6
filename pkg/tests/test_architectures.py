import numpy as np
import pytest

from esunetpp.architectures import (NetConfig, build, forward, node_set, param_count, prune, reaches,
                                    skip_sources, transfer_init)
from esunetpp.autodiff import Tensor
from esunetpp.blocks import ConvBlock, DownBlock, HeadBlock, SkipConvBlock, UpBlock, bilinear_kernel
from esunetpp.errors import ConfigError, ParameterError, ShapeError


def small(variant="unetpp", **kw):
    kw.setdefault("depth", 4)
    kw.setdefault("base_channels", 2)
    kw.setdefault("input_size", 16)
    kw.setdefault("dtype", "float64")
    return NetConfig(variant=variant, **kw)


def rand_batch(n=2, size=16, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((n, 1, size, size)))


# -- blocks --------------------------------------------------------------------

def test_bilinear_kernel_taps():
    k = bilinear_kernel()
    assert np.allclose(k[0], [0.0625, 0.1875, 0.1875, 0.0625])
    assert np.isclose(k.sum(), 4.0)


def test_conv_block_shape_and_nonnegative_output():
    rng = np.random.default_rng(0)
    blk = ConvBlock(3, 5, rng)
    out = blk(Tensor(rng.standard_normal((2, 3, 6, 6))), training=True)
    assert out.shape == (2, 5, 6, 6)
    assert out.data.min() >= 0


def test_down_block_two_convs_keep_resolution():
    rng = np.random.default_rng(0)
    blk = DownBlock(1, 4, rng)
    assert blk(Tensor(rng.standard_normal((1, 1, 8, 8))), True).shape == (1, 4, 8, 8)
    with pytest.raises(ShapeError):
        blk(Tensor(np.zeros((1, 2, 8, 8))), True)


def test_up_block_modes():
    x = Tensor(np.ones((1, 4, 3, 3)))
    assert UpBlock(4, "halve")(x).shape == (1, 2, 6, 6)
    assert UpBlock(4, "preserve")(x).shape == (1, 4, 6, 6)
    with pytest.raises(ParameterError):
        UpBlock(3, "halve")
    with pytest.raises(ParameterError):
        UpBlock(4, "double")


def test_skip_block_checks_skips():
    rng = np.random.default_rng(0)
    blk = SkipConvBlock(2, [2, 2], 3, rng)
    up = Tensor(np.ones((1, 2, 4, 4)))
    assert blk(up, [Tensor(np.ones((1, 2, 4, 4)))] * 2, True).shape == (1, 3, 4, 4)
    with pytest.raises(ShapeError):
        blk(up, [Tensor(np.ones((1, 2, 4, 4)))], True)
    with pytest.raises(ShapeError):
        blk(up, [Tensor(np.ones((1, 2, 2, 2)))] * 2, True)


def test_head_prior_bias():
    h = HeadBlock(3, np.random.default_rng(0))
    out = h(Tensor(np.zeros((1, 3, 2, 2)))).data
    assert np.allclose(out, 0.1)


# -- graphs --------------------------------------------------------------------

def test_unetpp_node_set_and_counts():
    nodes = node_set("unetpp", 4)
    assert len(nodes) == 15
    assert set(nodes) == {(i, j) for i in range(5) for j in range(5 - i)}
    assert len(node_set("unet", 4)) == 9


def test_execution_order_respects_dependencies():
    g = build(small())
    pos = {n: k for k, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in g.inputs_of(n):
            assert pos[p] < pos[n]


def test_skip_sources_per_variant():
    assert skip_sources("unetpp", (0, 3)) == [(0, 0), (0, 1), (0, 2)]
    assert skip_sources("unet_e", (1, 2)) == [(1, 0)]
    assert skip_sources("encoding_unetpp", (0, 2)) == []
    assert skip_sources("unet", (0, 4)) == [(0, 0)]


def test_lattice_heads_and_channels():
    g = build(small())
    assert g.head_indices == [1, 2, 3, 4]
    out = forward(g, rand_batch())
    for h, p in out.heads.items():
        assert p.shape == (2, 1, 16, 16)
        assert 0 <= p.data.min() and p.data.max() <= 1
    for i, f in out.features.items():
        assert f.shape == (2, 2 * 2 ** i, 16 >> i, 16 >> i)


@pytest.mark.parametrize("variant", ["unet", "es_unet", "encoding_unet"])
def test_chain_variants_have_one_head(variant):
    g = build(small(variant))
    assert g.head_indices == [4]
    assert forward(g, rand_batch()).heads[4].shape == (2, 1, 16, 16)


def test_encoding_net_has_no_skip_path():
    g = build(small("encoding_unetpp"))
    # every path from the input to a head must pass through the bottleneck
    for n in g.nodes:
        if n[1] > 0:
            assert reaches(g, (n[0] + n[1], 0), n)
            assert not any(reaches(g, (k, 0), n) and not reaches(g, (k + 1, 0), n)
                           for k in range(n[0] + n[1]))


def test_unetpp_has_dense_skips():
    g = build(small())
    assert reaches(g, (0, 0), (0, 4))
    assert g.inputs_of((0, 4)) == [(1, 3), (0, 0), (0, 1), (0, 2), (0, 3)]


def test_forward_rejects_bad_input():
    g = build(small())
    with pytest.raises(ShapeError):
        forward(g, Tensor(np.zeros((1, 1, 8, 8))))
    with pytest.raises(ShapeError):
        forward(g, Tensor(np.zeros((1, 2, 16, 16))))


def test_config_validation():
    with pytest.raises(ConfigError):
        small("resnet")
    with pytest.raises(ConfigError):
        small(input_size=24)
    with pytest.raises(ConfigError):
        small(supervision="XS")
    with pytest.raises(ConfigError):
        small(feature_supervision="full")


def test_config_round_trip():
    cfg = small(seed=5, supervision="NS")
    assert NetConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.with_(seed=6).seed == 6


def test_build_is_deterministic_per_seed():
    a, b, c = build(small(seed=3)), build(small(seed=3)), build(small(seed=4))
    sa, sb, sc = a.state_arrays(), b.state_arrays(), c.state_arrays()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert any(not np.array_equal(sa[k], sc[k]) for k in sa)


def test_state_round_trip_and_mismatch():
    a, b = build(small(seed=1)), build(small(seed=2))
    b.load_state_arrays(a.state_arrays())
    x = rand_batch()
    assert np.array_equal(forward(a, x).heads[4].data, forward(b, x).heads[4].data)
    st = a.state_arrays()
    st.pop(next(iter(st)))
    with pytest.raises(ShapeError):
        b.load_state_arrays(st)


def test_transfer_init_copies_and_checks_architecture():
    src, dst = build(small(seed=1)), build(small(seed=2))
    transfer_init(dst, src)
    assert all(np.array_equal(v, dst.state_arrays()[k]) for k, v in src.state_arrays().items())
    with pytest.raises(ConfigError):
        transfer_init(build(small(base_channels=4)), src)


# -- pruning -------------------------------------------------------------------

@pytest.mark.parametrize("level", [1, 2, 3, 4])
def test_pruned_head_is_bitwise_equal(level):
    g = build(small(seed=7))
    forward(g, rand_batch(4, seed=1), training=True)  # move running stats off their init
    x = rand_batch(3, seed=2)
    full = forward(g, x).heads[level].data
    sub = prune(g, level)
    assert sub.head_indices == [level]
    assert np.array_equal(forward(sub, x).heads[level].data, full)


def test_pruning_shrinks_parameters_monotonically():
    g = build(small())
    counts = [param_count(prune(g, L)) for L in (1, 2, 3, 4)]
    assert counts == sorted(counts) and len(set(counts)) == 4
    # L=4 keeps every node and drops only the three shallower heads
    assert counts[-1] == param_count(g) - 3 * (2 + 1)


def test_pruned_graph_shares_blocks():
    g = build(small())
    sub = prune(g, 2)
    assert sub.encoders[0] is g.encoders[0]
    assert sub.nodes == [n for n in g.nodes if sum(n) <= 2]


def test_prune_rejects_bad_level_and_chain_variant():
    g = build(small())
    for bad in (0, 5):
        with pytest.raises(ParameterError):
            prune(g, bad)
    with pytest.raises(ParameterError):
        prune(build(small("unet")), 2)
