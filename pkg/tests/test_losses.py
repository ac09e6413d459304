import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from robust_mtl import losses as L
from robust_mtl.tensor import ContractError, DimensionError, Tensor


def test_class_weights_frozen():
    # 1 / ln(1.02 + p) evaluated with math.log for p = .5, .3, .15, .05
    got = L.class_weights([50, 30, 15, 5])
    np.testing.assert_allclose(got, [2.388285926447683, 3.60189368929012,
                                     6.369274667525919, 14.780076495128606], rtol=1e-12)


def test_class_weights_rare_classes_weigh_more():
    w = L.class_weights([900, 90, 9, 1])
    assert np.all(np.diff(w) > 0)
    assert w[-1] < 1 / math.log(1.02) + 1e-9


def test_class_weights_empty_histogram():
    with pytest.raises(ContractError):
        L.class_weights([0, 0])


def test_label_histogram_skips_ignore():
    labels = np.array([[0, 1, 255], [1, 1, 3]])
    np.testing.assert_array_equal(L.label_histogram(labels, 4), [1, 3, 0, 1])


def test_cross_entropy_hand_value():
    probs = np.array([[0.7, 0.2], [0.3, 0.8]]).reshape(1, 2, 1, 2)
    target = L.one_hot(np.array([[[0, 1]]]), 2)
    got = L.weighted_cross_entropy(Tensor(probs), target, [2.0, 1.0]).item()
    assert got == pytest.approx(-(2 * math.log(0.7) + math.log(0.8)) / 2, rel=1e-12)


def test_cross_entropy_clamps_log():
    probs = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    target = L.one_hot(np.array([[[1]]]), 2)
    assert L.weighted_cross_entropy(Tensor(probs), target).item() == pytest.approx(-math.log(1e-7))


def test_cross_entropy_ignored_pixels_do_not_count():
    probs = np.full((1, 2, 1, 2), 0.5)
    target = L.one_hot(np.array([[[0, 255]]]), 2)
    assert L.weighted_cross_entropy(Tensor(probs), target).item() == pytest.approx(math.log(2))


def test_cross_entropy_shape_errors():
    with pytest.raises(DimensionError):
        L.weighted_cross_entropy(Tensor(np.ones((1, 2, 2, 2))), np.ones((1, 3, 2, 2)))
    with pytest.raises(DimensionError):
        L.weighted_cross_entropy(Tensor(np.ones((1, 2, 2, 2))), np.ones((1, 2, 2, 2)), [1.0])


def ssim_oracle(a, b):
    """Loop SSIM with reflect-padded 3x3 windows, clipped, channel-averaged."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    n, c, h, w = a.shape
    out = np.zeros((n, 1, h, w))
    refl = lambda i, m: -i if i < 0 else (2 * (m - 1) - i if i >= m else i)
    for k in range(n):
        for i in range(h):
            for j in range(w):
                vals = []
                for ch in range(c):
                    pa = np.array([a[k, ch, refl(i + di, h), refl(j + dj, w)] for di in (-1, 0, 1) for dj in (-1, 0, 1)])
                    pb = np.array([b[k, ch, refl(i + di, h), refl(j + dj, w)] for di in (-1, 0, 1) for dj in (-1, 0, 1)])
                    ma, mb = pa.mean(), pb.mean()
                    va, vb = (pa ** 2).mean() - ma ** 2, (pb ** 2).mean() - mb ** 2
                    cov = (pa * pb).mean() - ma * mb
                    s = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
                    vals.append(min(max(s, 0.0), 1.0))
                out[k, 0, i, j] = np.mean(vals)
    return out


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, (2, 3, 5, 7))
    b = np.clip(a + rng.normal(0, 0.15, a.shape), 0, 1)
    np.testing.assert_allclose(L.ssim_map(Tensor(a), Tensor(b)).data, ssim_oracle(a, b), rtol=1e-10, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (1, 3, 4, 5), elements=st.floats(0, 1)))
def test_ssim_identity_and_bounds(x):
    s = L.ssim_map(Tensor(x), Tensor(x)).data
    np.testing.assert_allclose(s, 1.0, rtol=1e-12)
    other = L.ssim_map(Tensor(x), Tensor(1.0 - x)).data
    assert np.all((other >= 0) & (other <= 1))


def test_photometric_zero_for_perfect_warp():
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 6, 6))
    assert L.photometric_loss(Tensor(x), [Tensor(x.copy())]).item() == pytest.approx(0.0, abs=1e-12)


def test_photometric_takes_per_pixel_minimum():
    rng = np.random.default_rng(1)
    tgt = rng.uniform(0, 1, (1, 3, 6, 6))
    a = tgt.copy()
    b = tgt.copy()
    a[..., :3] = rng.uniform(0, 1, (1, 3, 6, 3))  # left half wrong in a
    b[..., 3:] = rng.uniform(0, 1, (1, 3, 6, 3))  # right half wrong in b
    ea = L.reprojection_error(Tensor(tgt), Tensor(a)).data
    eb = L.reprojection_error(Tensor(tgt), Tensor(b)).data
    got = L.photometric_loss(Tensor(tgt), [Tensor(a), Tensor(b)]).item()
    assert got == pytest.approx(np.minimum(ea, eb).mean(), rel=1e-12)
    assert got < min(ea.mean(), eb.mean())


def test_reprojection_error_weights():
    tgt = np.zeros((1, 1, 3, 3))
    warped = np.full((1, 1, 3, 3), 0.5)
    # constant images: SSIM = (c1)(c2) / ((0.25 + c1)(c2)) -> luminance term only
    s = L.SSIM_C1 / (0.25 + L.SSIM_C1)
    want = 0.85 / 2 * (1 - s) + 0.15 * 0.5
    np.testing.assert_allclose(L.reprojection_error(Tensor(tgt), Tensor(warped)).data, want, rtol=1e-12)


def test_photometric_requires_candidates():
    with pytest.raises(ContractError):
        L.photometric_loss(Tensor(np.zeros((1, 1, 2, 2))), [])


def test_smoothness_ramp_and_edge_weighting():
    disp = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4))
    flat = np.zeros((1, 3, 1, 4))
    # mean-normalized ramp has |steps| of 0.4; there are no vertical differences
    assert L.smoothness_loss(disp, flat).item() == pytest.approx(0.4, rel=1e-12)
    edges = np.zeros((1, 3, 1, 4))
    edges[..., 2:] = 1.0  # a unit step between columns 1 and 2
    want = (0.4 + 0.4 * math.exp(-1) + 0.4) / 3
    assert L.smoothness_loss(disp, edges).item() == pytest.approx(want, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 50), hnp.arrays(np.float64, (1, 1, 4, 4), elements=st.floats(0.5, 2)))
def test_smoothness_scale_invariant(k, d):
    img = np.random.default_rng(0).uniform(0, 1, (1, 3, 4, 4))
    a = L.smoothness_loss(Tensor(d), img).item()
    b = L.smoothness_loss(Tensor(d * k), img).item()
    assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


def test_multiscale_combination():
    ph = [Tensor(np.array(v)) for v in (0.1, 0.2, 0.3, 0.4)]
    sm = [Tensor(np.array(v)) for v in (1.0, 2.0, 4.0, 8.0)]
    total, rep = L.multiscale_depth_loss(ph, sm)
    # scale-weighted smoothness is 1 at every scale
    assert rep.j_ph == pytest.approx(0.25)
    assert rep.j_sm == pytest.approx(1.0)
    assert total.item() == pytest.approx(0.25 + 1e-3)
    assert rep.j_depth == rep.j_ph + 1e-3 * rep.j_sm
    assert [s.j_sm for s in rep.per_scale] == [1.0, 2.0, 4.0, 8.0]


def test_multiscale_mismatched_lists():
    with pytest.raises(ContractError):
        L.multiscale_depth_loss([Tensor(np.array(0.1))], [])


def test_loss_report_csv_row():
    rep = L.LossReport(j_ce=1.5, j_ph=0.25, j_sm=2.0, j_depth=0.252)
    assert rep.csv_row(3, 7) == "3,7,1.5,0.25,2.0,0.252"


# -- worked examples ---------------------------------------------------------

def test_class_weight_examples():
    np.testing.assert_allclose(L.class_weights([7, 7]), 1 / math.log(1.52), rtol=1e-14)
    assert L.class_weights([7, 7])[0] == pytest.approx(2.38829, abs=5e-6)
    assert L.class_weights([9])[0] == pytest.approx(1.42228, abs=5e-6)
    w = L.class_weights([3, 3, 3, 3])
    assert np.all(w == w[0])
    assert L.class_weights([5, 0])[1] == pytest.approx(1 / math.log(1.02), rel=1e-14)


def test_cross_entropy_examples():
    target = L.one_hot(np.array([[[0, 2, 1, 3]]]), 4)
    assert L.weighted_cross_entropy(Tensor(target.copy()), target).item() <= 1e-6
    uniform = Tensor(np.full((1, 4, 1, 4), 0.25))
    assert L.weighted_cross_entropy(uniform, target).item() == pytest.approx(math.log(4), rel=1e-14)
    probs = np.array([[0.8, 0.3], [0.2, 0.7]]).reshape(1, 2, 1, 2)  # pixel 0 is class 1, pixel 1 is class 2
    got = L.weighted_cross_entropy(Tensor(probs), L.one_hot(np.array([[[0, 1]]]), 2), [1.0, 2.0]).item()
    assert got == pytest.approx(-(math.log(0.8) + 2 * math.log(0.7)) / 2, rel=1e-14)
    assert got == pytest.approx(0.468, abs=5e-4)


def test_ssim_constant_patches():
    a, b = np.full((1, 1, 5, 5), 0.5), np.full((1, 1, 5, 5), 0.6)
    got = L.ssim_map(Tensor(a), Tensor(b)).data
    want = (2 * 0.5 * 0.6 + L.SSIM_C1) / (0.25 + 0.36 + L.SSIM_C1)
    np.testing.assert_allclose(got, want, rtol=1e-12)
    assert want == pytest.approx(0.98361, abs=5e-6)


def test_ssim_of_independent_noise_is_low():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0, 1, (2, 3, 16, 16)), rng.uniform(0, 1, (2, 3, 16, 16))
    assert L.ssim_map(Tensor(a), Tensor(b)).data.mean() < 0.5


def test_photometric_examples():
    rng = np.random.default_rng(1)
    target = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
    noise = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
    assert L.photometric_loss(target, [Tensor(target.data.copy()), noise]).item() == 0.0
    const = L.photometric_loss(Tensor(np.full((1, 3, 6, 6), 0.5)), [Tensor(np.full((1, 3, 6, 6), 0.6))]).item()
    ssim = (0.6 + L.SSIM_C1) / (0.61 + L.SSIM_C1)
    assert const == pytest.approx(0.85 / 2 * (1 - ssim) + 0.15 * 0.1, rel=1e-12)
    assert const == pytest.approx(0.02197, abs=5e-6)
    other = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
    assert L.photometric_loss(target, [noise, other]).item() == L.photometric_loss(target, [other, noise]).item()


def test_smoothness_examples_on_square_grid():
    ramp = np.tile(np.arange(1.0, 5.0), (4, 1)).reshape(1, 1, 4, 4)
    assert L.smoothness_loss(Tensor(np.full((1, 1, 4, 4), 2.0)), np.zeros((1, 3, 4, 4))).item() == 0.0
    flat = L.smoothness_loss(Tensor(ramp), np.zeros((1, 3, 4, 4))).item()
    assert flat == pytest.approx(1 / 2.5, rel=1e-12)  # slope 1 over mean 2.5; rows add nothing
    stripes = np.tile(np.arange(4.0) % 2, (4, 1)).reshape(1, 1, 4, 4).repeat(3, axis=1)  # |dx| = 1 everywhere
    assert L.smoothness_loss(Tensor(ramp), stripes).item() == pytest.approx(flat * math.exp(-1), rel=1e-12)
    assert L.smoothness_loss(Tensor(ramp * 3), stripes).item() == pytest.approx(
        L.smoothness_loss(Tensor(ramp), stripes).item(), abs=1e-9)


def test_depth_loss_examples():
    assert L.depth_loss(0.02197, 0.5) == pytest.approx(0.022470, abs=5e-7)
    assert L.depth_loss(1.0, 1.0) == pytest.approx(1.001, rel=1e-15)
    assert L.depth_loss(0.3, 7.0, beta=0.0) == 0.3
