import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2corr.infer import (
    ContractError, TileConfig, argmax_labels, bilinear_upsample, miou, tiled_infer, window_origins,
)

# torch.nn.functional.interpolate(mode="bilinear", align_corners=False) on [[0,1],[2,3]] -> 4x4
TORCH_2x2_TO_4x4 = [
    [0.0, 0.25, 0.75, 1.0], [0.5, 0.75, 1.25, 1.5], [1.5, 1.75, 2.25, 2.5], [2.0, 2.25, 2.75, 3.0],
]
# same reference for arange(6).reshape(2,3) -> 5x7
TORCH_2x3_TO_5x7 = [
    [0.0, 0.14285714285714282, 0.5714285714285714, 1.0, 1.4285714285714284, 1.857142857142857, 2.0],
    [0.3000000000000001, 0.44285714285714295, 0.8714285714285714, 1.3, 1.7285714285714284, 2.157142857142857, 2.3],
    [1.5, 1.6428571428571428, 2.071428571428571, 2.5, 2.9285714285714284, 3.3571428571428568, 3.5],
    [2.7, 2.8428571428571434, 3.271428571428572, 3.7, 4.128571428571429, 4.557142857142857, 4.7],
    [3.0, 3.1428571428571423, 3.5714285714285716, 4.0, 4.428571428571428, 4.857142857142857, 5.000000000000001],
]


def enumerate_origins(extent, kernel, overlap):
    stride = max(1, int(np.floor((1 - overlap) * kernel + 0.5)))
    cands = list(range(0, extent, stride))
    return sorted({min(c, extent - kernel) for c in cands})


def test_exact_fit():
    assert window_origins(448, 448, 0.333) == [0]


def test_paper_defaults():
    assert window_origins(896, 448, 0.333) == [0, 299, 448]


def test_small_dedupe():
    assert window_origins(10, 4, 0.5) == [0, 2, 4, 6]


def test_kernel_too_big():
    with pytest.raises(ValueError):
        window_origins(10, 11, 0.5)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.floats(0, 0.95))
def test_origins_match_enumeration_and_cover(extent, kernel, overlap):
    if kernel > extent:
        return
    origins = window_origins(extent, kernel, overlap)
    assert origins == enumerate_origins(extent, kernel, overlap)
    assert all(b > a for a, b in zip(origins, origins[1:]))
    covered = np.zeros(extent, bool)
    for o in origins:
        covered[o : o + kernel] = True
    assert covered.all()


def test_single_window():
    win = np.random.default_rng(0).normal(size=(8, 8, 3))
    pred = tiled_infer(lambda y, x, k: win, TileConfig(8, 0.3, 8, 8))
    assert np.array_equal(pred.logits, win)


def test_constant_model():
    c = np.array([0.1, 2.0, -1.0])
    pred = tiled_infer(lambda y, x, k: np.broadcast_to(c, (k, k, 3)), TileConfig(6, 0.5, 10, 17))
    assert np.max(np.abs(pred.logits - c)) <= 1e-12
    assert np.all(pred.labels == 1)


def test_two_halves():
    # 4-wide windows on a 6-wide canvas at origins 0 and 2; columns 2-3 are shared
    def model(y, x, k):
        return np.full((k, k, 1), 1.0 if x == 0 else 5.0)

    pred = tiled_infer(model, TileConfig(4, 0.5, 4, 6))
    row = pred.logits[0, :, 0]
    np.testing.assert_allclose(row, [1, 1, 3, 3, 5, 5])


def test_wrong_window_shape():
    with pytest.raises(ContractError):
        tiled_infer(lambda y, x, k: np.zeros((k, k - 1, 2)), TileConfig(4, 0.5, 4, 6))


def test_linearity():
    r = np.random.default_rng(1)
    fa, fb = r.normal(size=(10, 13, 4)), r.normal(size=(10, 13, 4))

    def mk(field):
        return lambda y, x, k: field[y : y + k, x : x + k] * (1 + 0.1 * x)

    cfg = TileConfig(5, 0.4, 10, 13)
    a, b = tiled_infer(mk(fa), cfg).logits, tiled_infer(mk(fb), cfg).logits
    both = tiled_infer(lambda y, x, k: 2.0 * mk(fa)(y, x, k) - 0.5 * mk(fb)(y, x, k), cfg).logits
    np.testing.assert_allclose(both, 2.0 * a - 0.5 * b, atol=1e-10)


def test_tile_config_validation():
    with pytest.raises(ValueError):
        TileConfig(500, 0.3, 448, 896)
    with pytest.raises(ValueError):
        TileConfig(10, 1.0, 20, 20)


def test_argmax_ties_lowest_index():
    logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [3.0, 3.0, 3.0]])
    assert argmax_labels(logits).tolist() == [0, 1, 0]


def test_miou_perfect():
    g = np.array([0, 1, 2, 2])
    assert miou(g, g, 3)[1] == 1.0


def test_miou_disjoint():
    per, mean = miou(np.ones(4, int), np.zeros(4, int), 2)
    assert per[0] == 0.0 and mean == 0.0


def test_miou_hand_case():
    per, mean = miou(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
    assert per == pytest.approx([0.5, 2 / 3], abs=1e-15)
    assert abs(mean - 7 / 12) <= 1e-12


def test_miou_ignore_and_absent():
    per, mean = miou(np.array([0, 1, 1, 2]), np.array([0, 255, 0, 255]), 4)
    assert per[0] == 0.5 and per[1] == 0.0 and np.isnan(per[3])
    assert mean == 0.5
    with pytest.raises(ValueError):
        miou(np.zeros(2, int), np.full(2, 255), 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_miou_label_swap_symmetry(seed):
    r = np.random.default_rng(seed)
    g, p = r.integers(0, 3, 30), r.integers(0, 3, 30)
    swap = np.array([1, 0, 2])
    per, mean = miou(p, g, 3)
    per_s, mean_s = miou(swap[p], swap[g], 3)
    assert mean == pytest.approx(mean_s, abs=1e-15)
    np.testing.assert_allclose(per_s, np.array(per)[swap])


def test_upsample_identity():
    x = np.random.default_rng(0).normal(size=(3, 4, 2))
    assert np.array_equal(bilinear_upsample(x, 3, 4), x)


def test_upsample_constant():
    np.testing.assert_allclose(bilinear_upsample(np.full((2, 3, 2), 1.5), 7, 9), 1.5, atol=1e-15)


def test_upsample_reference_grids():
    x = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    np.testing.assert_allclose(bilinear_upsample(x, 4, 4)[..., 0], TORCH_2x2_TO_4x4, atol=1e-15)
    y = np.arange(6.0).reshape(2, 3, 1)
    np.testing.assert_allclose(bilinear_upsample(y, 5, 7)[..., 0], TORCH_2x3_TO_5x7, atol=1e-14)


def test_upsample_rejects_downscale():
    with pytest.raises(ValueError):
        bilinear_upsample(np.zeros((4, 4, 1)), 2, 8)
