import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cutiesim import golden
from cutiesim.compiler import emit_program
from cutiesim.errors import ShapeError
from cutiesim.network import CIFAR10_ARCH, BatchNorm, LayerDesc, LayerKind, NetworkDesc, cifar10_network

FIXTURE = Path(__file__).parent / "fixtures" / "cifar10_golden.json"


def naive_conv(x, k, stride, padding):
    """Six nested loops, no vectorization."""
    h, w, c = x.shape
    o, kh, kw, _ = k.shape
    ph, pw = (kh // 2, kw // 2) if padding else (0, 0)
    oh = (h + 2 * ph - kh) // stride[0] + 1
    ow = (w + 2 * pw - kw) // stride[1] + 1
    out = np.zeros((oh, ow, o), dtype=np.int64)
    for i in range(oh):
        for j in range(ow):
            for oc in range(o):
                s = 0
                for di in range(kh):
                    for dj in range(kw):
                        for ci in range(c):
                            r = i * stride[0] + di - ph
                            q = j * stride[1] + dj - pw
                            if 0 <= r < h and 0 <= q < w:
                                s += int(x[r, q, ci]) * int(k[oc, di, dj, ci])
                out[i, j, oc] = s
    return out


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3]), st.integers(1, 3), st.integers(1, 3),
       st.booleans())
def test_ref_conv_matches_loops(seed, k, sh, sw, padding):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(k, 7, 2)
    c, o = rng.integers(1, 4, 2)
    x = rng.integers(-1, 2, (h, w, c))
    ker = rng.integers(-1, 2, (o, k, k, c))
    np.testing.assert_array_equal(golden.ref_conv(x, ker, (sh, sw), padding),
                                  naive_conv(x, ker, (sh, sw), padding))


def test_ref_conv_examples(rng):
    x = rng.integers(-1, 2, (5, 5, 1))
    delta = np.zeros((1, 3, 3, 1), int)
    delta[0, 1, 1, 0] = 1
    np.testing.assert_array_equal(golden.ref_conv(x, delta, padding=True), x)
    assert not golden.ref_conv(x, np.zeros((2, 3, 3, 1), int), padding=True).any()
    assert golden.ref_conv(np.ones((3, 3, 1), int), np.ones((1, 3, 3, 1), int)).tolist() == [[[9]]]
    with pytest.raises(ShapeError):
        golden.ref_conv(x, np.zeros((1, 3, 3, 2), int))


def test_ref_threshold_examples():
    pairs = np.array([[0, 1]])
    assert golden.ref_threshold(np.array([[5], [0], [-1]]), pairs).reshape(-1).tolist() == [1, 0, -1]


def test_ref_pool(rng):
    assert golden.ref_pool(np.array([[[0], [0]], [[0], [1]]]), "max", (2, 2)).item() == 1
    assert golden.ref_pool(np.ones((2, 2, 1), int), "sum", (2, 2)).item() == 4
    t = rng.integers(-1, 2, (4, 4, 3))
    got = golden.ref_pool(t, "max", (2, 2))
    for i in range(2):
        for j in range(2):
            for c in range(3):
                assert got[i, j, c] == t[2 * i:2 * i + 2, 2 * j:2 * j + 2, c].max()
    with pytest.raises(ShapeError):
        golden.ref_pool(np.zeros((3, 4, 1)), "max", (2, 2))


def test_empty_network_is_identity(rng):
    x = rng.integers(-1, 2, (4, 4, 3)).astype(np.int8)
    np.testing.assert_array_equal(golden.ref_run(NetworkDesc((), x.shape), x), x)


def test_single_layer_is_composition(rng):
    c = 6
    w = rng.integers(-1, 2, (c, 3, 3, c)).astype(np.int8)
    layer = LayerDesc(LayerKind.CONV, c, c, (3, 3), padding=True, weights=w,
                      bn=BatchNorm(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), np.zeros(c)))
    net = NetworkDesc((layer,), (5, 5, c))
    x = rng.integers(-1, 2, (5, 5, c)).astype(np.int8)
    prog = emit_program(net, CIFAR10_ARCH)
    want = golden.ref_threshold(golden.ref_conv(x, w, padding=True), prog.thresholds)
    np.testing.assert_array_equal(golden.ref_run(prog, x), want)
    np.testing.assert_array_equal(golden.ref_run(net, x), want)


def test_cifar10_network_regression():
    fx = json.loads(FIXTURE.read_text())
    net = cifar10_network(seed=fx["network_seed"])
    x = np.random.default_rng(fx["input_seed"]).integers(-1, 2, fx["input_dims"]).astype(np.int8)
    assert golden.run_network(net, x).reshape(-1).tolist() == fx["output"]
    out, acc = golden.run_program(emit_program(net, CIFAR10_ARCH), x, return_acc=True)
    assert out.reshape(-1).tolist() == fx["output"]
    assert acc.reshape(-1).tolist() == fx["dense_accumulators"]
