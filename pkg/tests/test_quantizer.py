import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cutiesim.errors import Undefined
from cutiesim.quantizer import (
    DEFAULT_SCHEDULE, QuantSchedule, QuantStrategy, identity_refine, order_weights,
    partition_steps, project_ternary, quantize_incremental, sparsity,
)
from cutiesim.trits import PackedTritTensor

ALL = list(QuantStrategy)
W = np.array([0.1, -0.5, 0.3])


@pytest.mark.parametrize("strategy,expected", [
    (QuantStrategy.MAGNITUDE, [1, 2, 0]),
    (QuantStrategy.MAGNITUDE_INVERSE, [0, 2, 1]),
    (QuantStrategy.ZIGZAG, [0, 1, 2]),
])
def test_order_examples(strategy, expected):
    assert order_weights(W, strategy).tolist() == expected


def test_ties_break_by_index():
    w = np.array([0.2, -0.2, 0.2, 0.1])
    assert order_weights(w, QuantStrategy.MAGNITUDE).tolist() == [0, 1, 2, 3]
    assert order_weights(w, QuantStrategy.MAGNITUDE_INVERSE).tolist() == [3, 0, 1, 2]
    assert order_weights(w, QuantStrategy.ZIGZAG).tolist() == [3, 0, 1, 2]


def test_zigzag_alternates():
    w = np.arange(1, 8, dtype=float)[::-1]   # |w| = 7..1 at indices 0..6
    assert order_weights(w, QuantStrategy.ZIGZAG).tolist() == [6, 0, 5, 1, 4, 2, 3]


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(0, 60), elements=st.floats(-4, 4, allow_nan=False)),
       st.sampled_from(ALL))
def test_order_is_permutation(w, strategy):
    order = order_weights(w, strategy)
    assert sorted(order.tolist()) == list(range(w.size))


def test_strategy_parse():
    assert QuantStrategy.parse("Magnitude-Inverse") is QuantStrategy.MAGNITUDE_INVERSE
    assert QuantStrategy.parse("zigzag") is QuantStrategy.ZIGZAG
    with pytest.raises(ValueError):
        QuantStrategy.parse("random")


def test_partition_examples():
    w = np.linspace(-1, 1, 10)
    parts = partition_steps(w, QuantStrategy.MAGNITUDE, QuantSchedule((0.2, 0.5, 1.0)))
    assert [p.size for p in parts] == [2, 3, 5]
    parts = partition_steps(w, QuantStrategy.MAGNITUDE, QuantSchedule((1.0,)))
    assert len(parts) == 1 and sorted(parts[0].tolist()) == list(range(10))


def test_default_schedule_counts():
    counts = DEFAULT_SCHEDULE.counts(1152)
    assert counts == [231, 461, 692, 807, 922, 1037, 1095, 1152]
    steps = np.diff([0] + counts) / 1152
    assert steps[0] == pytest.approx(0.2, abs=1e-3)
    assert steps[4] == pytest.approx(0.1, abs=1e-3)
    assert steps[-1] == pytest.approx(0.05, abs=1e-3)


@pytest.mark.parametrize("fractions", [(0.0, 1.0), (0.5, 0.4, 1.0), (0.5, 0.9), ()])
def test_schedule_validation(fractions):
    with pytest.raises(ValueError):
        QuantSchedule(fractions)


def test_schedule_parse():
    assert QuantSchedule.parse("0.2,0.4,1.0").fractions == (0.2, 0.4, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200), st.lists(st.floats(0.01, 0.99), max_size=6), st.sampled_from(ALL),
       st.integers(0, 2**32 - 1))
def test_partition_disjoint_exhaustive(n, fracs, strategy, seed):
    fr = tuple(sorted(set(round(f, 3) for f in fracs))) + (1.0,)
    w = np.random.default_rng(seed).normal(size=n)
    parts = partition_steps(w, strategy, QuantSchedule(fr))
    flat = np.concatenate(parts)
    assert sorted(flat.tolist()) == list(range(n))
    assert np.concatenate(parts).tolist() == order_weights(w, strategy).tolist()


def test_project_examples():
    assert project_ternary([0.9, -0.05, 0.4], 0.5).tolist() == [1, 0, 0]
    w = np.array([0.3, -2.0, 1e-3, -1e-4])
    t = project_ternary(w, 1e-9)
    np.testing.assert_array_equal(t, np.sign(w))
    assert sparsity(t) == 0.0
    assert not project_ternary(np.zeros((3, 3)), 0.33).any()
    with pytest.raises(ValueError):
        project_ternary(w, 0.0)


def test_sparsity_cases():
    assert sparsity(np.zeros(7, np.int8)) == 1.0
    assert sparsity(np.ones(7, np.int8)) == 0.0
    t = np.ones(1000, np.int8)
    t[:607] = 0
    assert sparsity(PackedTritTensor.from_array(t)) == pytest.approx(0.607)
    with pytest.raises(Undefined):
        sparsity(np.zeros(0, np.int8))


def test_incremental_identity_matches_static(rng):
    w = rng.normal(size=(16, 3, 3, 8))
    for strategy in ALL:
        out, steps = quantize_incremental(w, strategy)
        parts = partition_steps(w, strategy, DEFAULT_SCHEDULE)
        assert [s.indices.tolist() for s in steps] == [p.tolist() for p in parts]
        np.testing.assert_array_equal(out, project_ternary(w, 0.33))


def test_refine_hook_cannot_move_frozen(rng):
    w = rng.normal(size=200)
    seen = []

    def shake(weights, frozen):
        seen.append(int(frozen.sum()))
        weights = weights * 3.0       # also scrambles the frozen entries
        return weights

    out, steps = quantize_incremental(w, QuantStrategy.MAGNITUDE, refine=shake)
    assert seen == DEFAULT_SCHEDULE.counts(200)[:-1]
    assert sorted(np.concatenate([s.indices for s in steps]).tolist()) == list(range(200))
    first = steps[0]
    np.testing.assert_array_equal(out[first.indices], project_ternary(w[first.indices], 0.33,
                                                                      scale=np.abs(w).max()))
    # later weights grew 3x per step, so they stay non-zero
    assert np.count_nonzero(out[steps[-1].indices]) == steps[-1].indices.size


def test_inverse_step_one_sparser(rng):
    for _ in range(20):
        w = rng.normal(size=1152)
        _, mag = quantize_incremental(w, QuantStrategy.MAGNITUDE)
        _, inv = quantize_incremental(w, QuantStrategy.MAGNITUDE_INVERSE)
        assert inv[0].sparsity >= mag[0].sparsity
        assert identity_refine(w, None) is w
