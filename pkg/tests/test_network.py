import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cutiesim.errors import DimOverflow, FormatError, ManifestError, NotCounted, TruncatedPayload
from cutiesim.network import (
    ArchConfig, BatchNorm, LayerDesc, LayerKind, NetworkDesc, decode_tensor, encode_tensor,
    load_network, load_tensor, op_count, cifar10_network, random_ternary, save_network,
    save_tensor, validate,
)
from cutiesim.trits import PackedTritTensor

CIFAR10_OPS = [297.27e6, 301.99e6, 301.99e6, 75.5e6, 75.5e6, 18.9e6, 18.9e6, 4.7e6, 2560]


def conv(rng, cin, cout, k=3, **kw):
    return LayerDesc(LayerKind.CONV, cin, cout, (k, k), weights=random_ternary(rng, (cout, k, k, cin), 0.5), **kw)


def test_arch_defaults():
    a = ArchConfig()
    assert (a.in_channels, a.out_channels, a.kernel, a.max_layers) == (128, 128, 3, 8)
    assert a.word_trits == 32
    assert a.window_trits == 1152
    assert a.weight_buffer_bits == 4 * 9 * 128
    with pytest.raises(ValueError):
        ArchConfig(out_channels=130, stages=4)
    with pytest.raises(ValueError):
        ArchConfig(kernel=4)


def test_cifar10_network_validates():
    assert validate(cifar10_network(), ArchConfig()) == []


def test_kernel_violation(rng):
    net = NetworkDesc((conv(rng, 8, 8, k=5, padding=True),), (8, 8, 8))
    assert [v.constraint for v in validate(net, ArchConfig())] == ["kernel exceeds K"]


def test_out_channel_violation(rng):
    net = NetworkDesc((conv(rng, 8, 256, padding=True),), (8, 8, 8))
    assert "out_ch exceeds N_O" in [v.constraint for v in validate(net, ArchConfig())]


def test_other_violations(rng):
    arch = ArchConfig()
    bad = [
        NetworkDesc((conv(rng, 8, 8, stride=(4, 4)),), (16, 16, 8)),
        NetworkDesc((conv(rng, 8, 8, padding=True),), (64, 8, 8)),
        NetworkDesc((conv(rng, 4, 8, padding=True),), (8, 8, 8)),
        NetworkDesc((LayerDesc(LayerKind.MAXPOOL, 8, 8, (2, 2), (2, 2)),), (8, 8, 8)),
        NetworkDesc((conv(rng, 8, 8, padding=True).replace(weights=np.full((8, 3, 3, 8), 2)),), (8, 8, 8)),
        NetworkDesc((LayerDesc(LayerKind.DENSE, 2000, 10, weights=np.zeros((10, 2000))),), (1, 1, 2000)),
    ]
    for net in bad:
        assert validate(net, arch), net


def test_op_counts_match_table():
    net = cifar10_network()
    counts = []
    for layer, (_, out) in zip(net.layers, net.shapes()):
        if layer.kind.is_pool:
            with pytest.raises(NotCounted):
                op_count(layer, out)
        else:
            counts.append(op_count(layer, out))
    for got, want in zip(counts, CIFAR10_OPS):
        assert got == pytest.approx(want, rel=0.01)
    assert sum(counts) == pytest.approx(1.1e9, rel=0.01)


def test_batchnorm_matrix_roundtrip():
    bn = BatchNorm(np.array([1.0, 2.0]), np.array([0.1, 0.2]), np.array([3.0, 4.0]),
                   np.array([1.0, 0.5]), np.array([1e-5, 1e-5]))
    back = BatchNorm.from_matrix(bn.as_matrix())
    for f in ("gamma", "beta", "mean", "var", "eps"):
        np.testing.assert_array_equal(getattr(bn, f), getattr(back, f))


def test_tensor_roundtrip_trits(tmp_path, rng):
    t = rng.integers(-1, 2, (32, 32, 128)).astype(np.int8)
    save_tensor(tmp_path / "x.cttensor", PackedTritTensor.from_array(t))
    np.testing.assert_array_equal(load_tensor(tmp_path / "x.cttensor").to_array(), t)


def test_tensor_roundtrip_real(tmp_path, rng):
    x = rng.normal(size=(3, 4, 5))
    save_tensor(tmp_path / "x.cttensor", x)
    y = load_tensor(tmp_path / "x.cttensor")
    assert y.tobytes() == x.tobytes()


@given(st.lists(st.integers(-(2**31), 2**31 - 1), max_size=50))
def test_tensor_roundtrip_int(vals):
    x = np.array(vals, dtype=np.int64)
    np.testing.assert_array_equal(decode_tensor(encode_tensor(x)), x)


def test_tensor_errors():
    blob = encode_tensor(np.arange(10, dtype=np.float64))
    with pytest.raises(FormatError):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(TruncatedPayload):
        decode_tensor(blob[:-1])
    with pytest.raises(FormatError):
        decode_tensor(blob + b"\0")
    huge = b"CTT1" + struct.pack("<BB", 1, 3) + struct.pack("<3I", 2**31, 2**31, 2**31)
    with pytest.raises(DimOverflow):
        decode_tensor(huge)
    with pytest.raises(DimOverflow):
        encode_tensor(np.array([2**40]))


def test_manifest_roundtrip(tmp_path):
    net = cifar10_network(seed=3)
    save_network(net, tmp_path / "net.ctnet")
    back = load_network(tmp_path / "net.ctnet")
    assert back.input_dims == net.input_dims and back.encoder == net.encoder
    assert len(back.layers) == len(net.layers)
    for a, b in zip(net.layers, back.layers):
        assert (a.kind, a.in_ch, a.out_ch, a.kernel, a.stride, a.padding) == \
               (b.kind, b.in_ch, b.out_ch, b.kernel, b.stride, b.padding)
        if a.weights is not None:
            np.testing.assert_array_equal(a.weights, b.weights)
        if a.bn is not None:
            np.testing.assert_array_equal(a.bn.as_matrix(), b.bn.as_matrix())


def test_manifest_errors(tmp_path):
    p = tmp_path / "bad.ctnet"
    p.write_text("[layer]\nkind = Conv2D\n")
    with pytest.raises(ManifestError):
        load_network(p)
    p.write_text("[network]\ninput = 8, 8, 8\n[layer]\nkind = Nope\n")
    with pytest.raises(ManifestError):
        load_network(p)
