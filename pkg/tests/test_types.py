import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semvid.types import (
    BandwidthBudget,
    FeatureDecomposition,
    FramingError,
    RangeError,
    ShapeError,
    SymbolStream,
    compute_cbr,
    validate_gop,
)


def _conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def test_cbr_of_empty_stream_is_zero():
    stream = SymbolStream.build([torch.zeros(0)] * 7)
    assert compute_cbr(stream, (6, 256, 256)) == 0.0


def test_cbr_grid_point_hand_arithmetic():
    # 6 frames of 256x256x3 = 1,179,648 source values; 5898 symbols
    lengths = [983] * 5 + [983, 0]
    assert sum(lengths) == 5898
    cbr = compute_cbr(lengths, (6, 256, 256))
    assert cbr == 5898 / 1179648
    assert abs(cbr - 0.005) < 1e-3 * 0.005


def test_full_rate_single_frame():
    # latent stride 2 (k5, p2) then three stride-2 (k3, p1) stages
    size = 256
    size = _conv_out(size, 5, 2, 2)
    for _ in range(3):
        size = _conv_out(size, 3, 2, 1)
    assert size == 16
    elements = 128 * size * size
    assert elements == 32768
    assert compute_cbr([elements], (1, 256, 256)) == pytest.approx(1 / 6, abs=0)


def test_cbr_rejects_zero_dimension():
    with pytest.raises(ValueError):
        compute_cbr([1, 2], (0, 64, 64))
    with pytest.raises(ValueError):
        compute_cbr([1, 2], (2, 0, 64))


@settings(max_examples=50, deadline=None)
@given(a=st.lists(st.integers(0, 500), min_size=1, max_size=6),
       b=st.lists(st.integers(0, 500), min_size=1, max_size=6))
def test_cbr_is_additive(a, b):
    dims = (3, 64, 64)
    assert compute_cbr(a + b, dims) == pytest.approx(compute_cbr(a, dims) + compute_cbr(b, dims),
                                                     rel=1e-12, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(total=st.integers(0, 3000), cuts=st.lists(st.integers(0, 3000), min_size=3, max_size=3))
def test_cbr_ignores_distribution_over_vectors(total, cuts):
    cuts = sorted(c % (total + 1) for c in cuts)
    lengths = np.diff([0, *cuts, total]).tolist()
    assert compute_cbr(lengths, (3, 64, 64)) == compute_cbr([total, 0, 0, 0], (3, 64, 64))


def test_validate_gop_accepts_zeros():
    gop = validate_gop(np.zeros((2, 3, 64, 64), dtype=np.float32))
    assert gop.dims == (2, 64, 64)
    assert gop.m == 3 * 64 * 64


def test_validate_gop_rejects_unscaled_bytes():
    raw = np.full((2, 3, 64, 64), 255.0)
    with pytest.raises(RangeError):
        validate_gop(raw)


def test_validate_gop_rejects_indivisible_height():
    with pytest.raises(ShapeError):
        validate_gop(np.zeros((2, 3, 60, 64)))


def test_validate_gop_rejects_wrong_rank():
    with pytest.raises(ShapeError):
        validate_gop(np.zeros((3, 64, 64)))


def test_budget_floor():
    budget = BandwidthBudget.from_cbr(0.005, (6, 256, 256))
    assert budget.total_symbols == 5898
    # 0.01 * 36864 = 368.64 and exact-integer products are not shaved by float error
    assert BandwidthBudget.from_cbr(0.01, (3, 64, 64)).total_symbols == 368
    assert BandwidthBudget.from_cbr(1 / 6, (1, 256, 256)).total_symbols == 32768


def test_budget_bounds():
    with pytest.raises(ValueError):
        BandwidthBudget.from_cbr(0.0, (3, 64, 64))
    with pytest.raises(ValueError):
        BandwidthBudget.from_cbr(0.2, (3, 64, 64), max_cbr=0.1)


def test_stream_lengths_match_vectors():
    stream = SymbolStream.build([torch.ones(3), torch.ones(2)], side=torch.arange(4.0))
    assert stream.lengths == (3, 6)
    assert stream.side_len == 4
    assert torch.equal(stream.side_symbols(), torch.arange(4.0))
    assert [v.numel() for v in stream.feature_vectors()] == [3, 2]
    with pytest.raises(FramingError):
        SymbolStream(vectors=(torch.ones(3),), lengths=(2,))


def test_decomposition_stacking_order():
    common = torch.full((1, 2, 1, 1), 9.0)
    individual = torch.arange(6.0).reshape(3, 2, 1, 1)
    d = FeatureDecomposition(common, individual)
    s = d.stacked()
    assert torch.equal(s[-1], common[0])
    assert torch.equal(FeatureDecomposition.from_stacked(s).individual, individual)
    with pytest.raises(ShapeError):
        FeatureDecomposition(torch.zeros(1, 3, 1, 1), individual)
