import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from oracles import auroc_pairs, dr_at_far_sweep
from scorecombine.combiners import glrt_statistic
from scorecombine.errors import DataError, DomainError
from scorecombine.evaluation import (
    LabeledStatistics,
    auroc,
    calibrated_curve,
    dr_at_far,
    eigen_analysis,
    eigen_scores,
    roc_curve,
    threshold_at_far,
)
from scorecombine.synthbench import ar1_correlation, dense_scenario, generate


def ls(inlier, ood):
    return LabeledStatistics(np.asarray(inlier, float), np.asarray(ood, float))


@pytest.mark.parametrize("inlier, ood, expected", [
    ([0.9, 0.8], [0.1, 0.2], 1.0),
    ([0.8, 0.3], [0.5], 0.5),
    ([1.0, 2.0, 2.0], [2.0, 1.0, 2.0], 0.5),
])
def test_auroc_examples(inlier, ood, expected):
    assert auroc(ls(inlier, ood)) == expected


def test_empty_class_rejected():
    with pytest.raises(DataError):
        ls([], [1.0])


def test_auroc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n1, n2 = rng.integers(1, 51, size=2)
        # integer-valued scores force plenty of ties
        a = rng.integers(0, 10, n1).astype(float)
        b = rng.integers(0, 10, n2).astype(float) - 1
        assert auroc(ls(a, b)) == auroc_pairs(a, b)


def test_auroc_invariances():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=40), rng.normal(-0.5, size=30)
    base = auroc(ls(a, b))
    assert auroc(ls(np.exp(a), np.exp(b))) == pytest.approx(base, abs=1e-15)
    assert base + auroc(ls(b, a)) == pytest.approx(1.0, abs=1e-15)


def test_auroc_equals_trapezoid_area():
    rng = np.random.default_rng(2)
    d = ls(rng.normal(size=60), rng.normal(-1, size=45))
    _, far, dr = roc_curve(d)
    area = np.sum(np.diff(far) * (dr[1:] + dr[:-1]) / 2)
    assert area == pytest.approx(auroc(d), abs=1e-12)


def test_dr_at_far_examples():
    pt = threshold_at_far(ls([1, 2, 3, 4], [0, 0.5]), 0.25)
    assert (pt.tau, pt.far, pt.dr, pt.degenerate) == (1.0, 0.25, 1.0, False)
    sep = ls(np.linspace(10, 20, 100), [0.0, 1.0, 2.0])
    assert dr_at_far(sep, 0.05) == 1.0


def test_dr_at_far_identical_classes_bound():
    rng = np.random.default_rng(3)
    x = rng.normal(size=200)
    assert dr_at_far(ls(x, x.copy()), 0.05) <= 0.05 + 1 / 200


def test_dr_at_far_degenerate_flag():
    pt = threshold_at_far(ls([1.0, 2.0], [5.0]), 0.1)
    assert pt.degenerate and pt.dr == 0.0 and pt.tau == -np.inf
    with pytest.raises(DomainError):
        dr_at_far(ls([1.0], [0.0]), 0.0)


def test_dr_at_far_matches_sweep_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n1, n2 = rng.integers(1, 51, size=2)
        a = np.round(rng.normal(size=n1), 1)
        b = np.round(rng.normal(-0.7, size=n2), 1)
        for alpha in (0.05, 0.1, 0.25, 0.5):
            assert dr_at_far(ls(a, b), alpha) == dr_at_far_sweep(a, b, alpha)


@settings(max_examples=50, deadline=None)
@given(
    a=st.lists(st.floats(-5, 5), min_size=1, max_size=30),
    b=st.lists(st.floats(-5, 5), min_size=1, max_size=30),
    al=st.floats(0.01, 0.98),
    dal=st.floats(0.0, 0.01),
)
def test_dr_at_far_nondecreasing_in_alpha(a, b, al, dal):
    d = ls(a, b)
    assert dr_at_far(d, al) <= dr_at_far(d, al + dal)


def test_eigen_scores_sum_to_glrt_random_bases():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        m = int(rng.integers(1, 25))
        q, _ = np.linalg.qr(rng.normal(size=(m, m)))
        z = rng.normal(scale=2, size=m)
        mu = np.minimum(z, -0.25)
        assert abs(eigen_scores(z, q, mu).sum() - glrt_statistic(z, 0.25)) <= 1e-8


def test_eigen_analysis_identity_cov_and_m1():
    rng = np.random.default_rng(6)
    z_train = rng.normal(size=(500, 4))
    z_in, z_out = rng.normal(size=(50, 4)), rng.normal(-1, size=(40, 4))
    tab = eigen_analysis(z_train, z_in, z_out)
    assert np.all(np.diff(tab.eigenvalues) <= 0)
    assert tab.eigenvectors.T @ tab.eigenvectors == pytest.approx(np.eye(4), abs=1e-8)
    assert tab.inlier_scores.sum(axis=1) == pytest.approx(glrt_statistic(z_in), abs=1e-8)
    one = eigen_analysis(z_train[:, :1], z_in[:, :1], z_out[:, :1])
    assert one.inlier_scores[:, 0] == pytest.approx(glrt_statistic(z_in[:, :1]), abs=1e-12)
    assert np.isnan(one.spearman())


def test_eigen_analysis_rejects_small_n():
    with pytest.raises(DataError):
        eigen_analysis(np.zeros((2, 3)), np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(DomainError):
        eigen_analysis(np.zeros((5, 1)), np.zeros((1, 1)), np.zeros((1, 1)), metric="bad")


def test_eigen_spearman_positive_on_correlated_data():
    scn = dense_scenario(12, -0.5, name="ar1", correlation=ar1_correlation(12, 0.5),
                         n_h0=4000, n_h1=2000, seed=0)
    h0, h1 = generate(scn)
    tab = eigen_analysis(h0[:2000], h0[2000:], h1, metric="sample")
    assert tab.spearman() > 0
    assert tab.aurocs[0] == tab.aurocs.max()


def test_calibrated_curve_stouffer_identity():
    grid = np.linspace(-3, 3, 61)
    out = calibrated_curve(lambda z: z, 0.1, grid)
    assert out[:, 1] == pytest.approx(grid - special.ndtri(0.1), abs=1e-9)


def test_calibrated_curve_fisher_zero_and_unit_slope():
    z0 = special.ndtri(0.1)
    grid = np.array([z0 - 1e-4, z0, z0 + 1e-4])
    out = calibrated_curve(lambda z: np.log(special.ndtr(z)), 0.1, grid)
    assert out[1, 1] == pytest.approx(0.0, abs=1e-12)
    assert (out[2, 1] - out[0, 1]) / 2e-4 == pytest.approx(1.0, abs=1e-6)


def test_calibrated_curve_glrt_pointwise():
    grid = np.linspace(-3, 2, 101)
    glrt = lambda z: glrt_statistic(np.asarray(z)[:, None], 0.25)  # noqa: E731
    out = calibrated_curve(glrt, 0.1, grid)
    z0 = special.ndtri(0.1)
    tau = float(glrt(np.array([z0]))[0])
    slope = -z0  # derivative of (z/2 - z) z is -z below -eps
    assert out[:, 1] == pytest.approx((glrt(grid) - tau) / slope, abs=1e-8)
    above = grid > -0.25
    slopes = np.diff(out[above, 1]) / np.diff(grid[above])
    assert slopes == pytest.approx(np.full(slopes.size, 0.25 / slope), abs=1e-9)


def test_calibrated_curve_rejects_non_monotone():
    with pytest.raises(DomainError):
        calibrated_curve(lambda z: -z ** 2, 0.1, np.linspace(-1, 1, 11))
    with pytest.raises(DomainError):
        calibrated_curve(lambda z: np.zeros_like(z), 0.1, np.linspace(-1, 1, 11))


def test_roc_curve_shapes():
    d = ls([1.0, 2.0, 3.0], [0.0, 1.0])
    thr, far, dr = roc_curve(d)
    assert thr[0] == -np.inf and far[0] == 0 and dr[0] == 0
    assert far[-1] == 1 and dr[-1] == 1
    assert np.all(np.diff(thr) > 0)
