import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import wilcoxon as scipy_wilcoxon
from skimage.metrics import structural_similarity

from oracles import cocircular_reference_literal, cocircular_tangent_geometric
from sdpc.analysis.gabor import (
    GaborFit,
    atlas_from_orientations,
    build_atlas,
    fit_gabor,
    gabor_kernel,
    write_atlas_csv,
)
from sdpc.analysis.interaction import (
    CENTER,
    END,
    OTHER,
    SIDE,
    InteractionMap,
    activity_ratio,
    adjusted_activity,
    aggregate_maps,
    average_maps,
    axis_profile,
    circular_diff_deg,
    cocircular_reference,
    cocircularity_deviation,
    colinearity_deviation,
    interaction_map,
    map_coordinates,
    nearest_feature,
    precision_ratio,
    precision_ratios,
    region_mask,
    select_centers,
    shuffle_positions,
    write_map_csv,
)
from sdpc.analysis.metrics import active_fraction, ssim
from sdpc.analysis.stats import (
    StatRow,
    median_mad,
    read_stats_csv,
    sign_test_passes,
    wilcoxon,
    write_stats_csv,
)
from sdpc.errors import AnalysisError

DEG = np.pi / 180


def uniform_map(theta, R=4, mag=1.0, theta_c=0.0):
    z = np.full((2 * R + 1, 2 * R + 1), mag * np.exp(1j * theta))
    return InteractionMap(z, theta_c)


# --------------------------------------------------------------------------
# Gabor fitting
# --------------------------------------------------------------------------


@pytest.mark.parametrize("theta_deg", [0, 30, 75, 90, 135, 170])
def test_gabor_recovers_orientation(theta_deg):
    g = gabor_kernel((9, 9), theta_deg * DEG, 0.2, phase=0.4, sigma=(2.0, 2.5))
    fit = fit_gabor(g)
    assert circular_diff_deg(fit.theta_deg, theta_deg) <= 3
    assert fit.r2 >= 0.95
    assert abs(fit.frequency - 0.2) < 0.02
    assert 0 <= fit.theta < np.pi


def test_gabor_orientation_convention():
    # theta = 0 means horizontal stripes: constant along each row
    g = gabor_kernel((9, 9), 0.0, 0.2, sigma=(100.0, 100.0))
    np.testing.assert_allclose(g, g[:, 4:5] * np.ones((1, 9)), rtol=2e-3)


def test_gabor_rotation_equivariance():
    g = gabor_kernel((9, 9), 30 * DEG, 0.2, sigma=(2.0, 2.0))
    a, b = fit_gabor(g), fit_gabor(np.rot90(g))
    assert circular_diff_deg(b.theta_deg - a.theta_deg, 90) <= 1


def test_gabor_color_atom_and_noise():
    g = gabor_kernel((8, 8), 60 * DEG, 0.25, sigma=(1.5, 2.0))
    atom = np.stack([g, g, g]) + 0.02 * np.random.default_rng(0).standard_normal((3, 8, 8))
    fit = fit_gabor(atom)
    assert circular_diff_deg(fit.theta_deg, 60) <= 3
    assert fit.r2 > 0.9


def test_gabor_degenerate_and_dc():
    fit = fit_gabor(np.ones((8, 8)))
    assert fit.degenerate and fit.low_frequency
    assert fit.r2 <= 0.1
    assert np.isnan(fit.theta)
    ramp = np.ones((8, 8)) + 1e-3 * np.arange(8)[None, :]
    fit = fit_gabor(ramp)
    assert fit.low_frequency


def test_gabor_noise_fits_poorly():
    fit = fit_gabor(np.random.default_rng(1).standard_normal((9, 9)))
    assert fit.r2 < 0.5


def test_build_atlas_thresholds(tmp_path):
    fits = [GaborFit(i * 0.3, 0.2, 0.0, (2, 2), r2) for i, r2 in enumerate([1, 1, 1, 1, 0.3, 0.8])]
    atlas = build_atlas(fits, r2_threshold=0.5)
    assert atlas.n_retained == 5
    np.testing.assert_array_equal(atlas.indices, [0, 1, 2, 3, 5])
    assert build_atlas(fits, r2_threshold=0.0).n_retained == 6
    with pytest.raises(AnalysisError):
        build_atlas(fits, r2_threshold=1.01)
    write_atlas_csv(tmp_path / "a.csv", atlas)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "feature,theta_deg,freq,r2,retained"
    assert lines[5].endswith(",0")


# --------------------------------------------------------------------------
# Adjusted activity
# --------------------------------------------------------------------------


def test_adjusted_activity_uniform_and_double():
    atlas = atlas_from_orientations([0, 45, 90, 135])
    g = np.full((4, 20, 20), 0.5)
    act = adjusted_activity(g, atlas, (10, 10), R=4)
    assert act.a.shape == (4, 9, 9)
    np.testing.assert_allclose(act.a, 0.0)
    g[:, 6:15, 6:15] = 1.0
    np.testing.assert_allclose(adjusted_activity(g, atlas, (10, 10), R=4).a, 1.0)


def test_adjusted_activity_matches_explicit_masks():
    rng = np.random.default_rng(0)
    g = rng.random((6, 16, 18)) * (rng.random((6, 16, 18)) > 0.5)
    atlas = atlas_from_orientations([0, 30, 60, 90, 120, 150])
    atlas.retained[2] = False
    center, R = (7, 9), 3
    act = adjusted_activity(g, atlas, center, R)
    np.testing.assert_array_equal(act.features, [0, 1, 3, 4, 5])
    for k, f in enumerate(act.features):
        vals = []
        for r in range(16):
            for c in range(18):
                if abs(r - center[0]) > R or abs(c - center[1]) > R:
                    vals.append(g[f, r, c])
        marg = sum(vals) / len(vals)
        for i in range(2 * R + 1):
            for j in range(2 * R + 1):
                local = g[f, center[0] - R + i, center[1] - R + j]
                assert abs(act.a[k, i, j] - (local - marg) / marg) < 1e-12
    assert act.a.min() >= -1


def test_adjusted_activity_zero_marginal():
    atlas = atlas_from_orientations([0, 45, 90, 135])
    g = np.zeros((4, 20, 20))
    g[1] = 1.0
    act = adjusted_activity(g, atlas, (10, 10), 4)
    assert act.skipped == [0, 2, 3]
    np.testing.assert_allclose(act.theta, [45 * DEG])
    with pytest.raises(AnalysisError):
        adjusted_activity(np.zeros((4, 20, 20)), atlas, (10, 10), 4)
    with pytest.raises(AnalysisError):
        adjusted_activity(g, atlas, (2, 10), 4)


# --------------------------------------------------------------------------
# Circular averaging
# --------------------------------------------------------------------------


def test_interaction_map_single_orientation():
    a = np.zeros((4, 3, 3))
    a[2] = 1.0
    theta = np.array([0, 45, 70, 135]) * DEG
    m = interaction_map(a, theta)
    np.testing.assert_allclose(m.theta_bar, 70 * DEG, atol=1e-10)
    np.testing.assert_allclose(m.magnitude, 0.25, atol=1e-10)


def test_interaction_map_45_degree_case():
    m = interaction_map(np.ones((2, 1, 1)), np.array([0.0, np.pi / 2]))
    assert abs(m.theta_bar[0, 0] - np.pi / 4) <= 1e-10
    assert abs(m.magnitude[0, 0] - math.sqrt(2) / 2) <= 1e-10


def test_interaction_map_antipodal_cancellation():
    m = interaction_map(np.ones((2, 1, 1)), np.array([0.3, 0.3 + np.pi]))
    assert m.magnitude[0, 0] <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-np.pi, np.pi))
def test_circular_identities_and_rotation(seed, delta):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    a = rng.uniform(-1, 3, (n, 5, 5))
    theta = rng.uniform(0, np.pi, n)
    m = interaction_map(a, theta)
    cs = (a * np.cos(theta)[:, None, None]).sum(0)
    sn = (a * np.sin(theta)[:, None, None]).sum(0)
    np.testing.assert_allclose(m.magnitude, np.sqrt(cs ** 2 + sn ** 2) / n, atol=1e-10)
    np.testing.assert_allclose(m.theta_bar, np.arctan2(sn, cs), atol=1e-10)
    z = (a * np.exp(1j * theta)[:, None, None]).sum(0) / n
    np.testing.assert_allclose(m.magnitude, np.abs(z), atol=1e-10)
    rot = interaction_map(a, theta + delta)
    np.testing.assert_allclose(rot.magnitude, m.magnitude, atol=1e-10)
    diff = np.angle(np.exp(1j * (rot.theta_bar - m.theta_bar - delta)))
    assert np.all((np.abs(diff) < 1e-8) | (m.magnitude < 1e-9))


# --------------------------------------------------------------------------
# Aggregation
# --------------------------------------------------------------------------


def activity_with_peak(rng, F=4, H=24, W=24):
    g = rng.random((F, H, W)) * 0.2 + 0.05
    g[0, 12, 12] = 5.0
    return g


def test_select_centers_order_border_and_ties():
    g = np.zeros((2, 12, 12))
    g[0, 5, 5] = 3.0
    g[0, 1, 1] = 9.0  # too close to the border
    g[0, 6, 4] = 2.0
    g[0, 4, 7] = 2.0
    g[0, 7, 7] = -1.0
    assert select_centers(g, 0, R=4, top_k=10) == [(5, 5), (4, 7), (6, 4)]
    assert select_centers(g, 0, R=4, top_k=2) == [(5, 5), (4, 7)]
    assert select_centers(g, 1, R=4) == []


def test_nearest_feature_tolerance():
    atlas = atlas_from_orientations([0, 40, 95, 178])
    assert nearest_feature(atlas, 2 * DEG) == 0
    assert nearest_feature(atlas, 175 * DEG) == 3
    assert nearest_feature(atlas, 20 * DEG) is None


def test_aggregate_single_center_equals_map():
    rng = np.random.default_rng(0)
    g = np.zeros((4, 24, 24)) + 0.1
    g[0, 12, 12] = 5.0
    g[1:, 9:16, 9:16] += rng.random((3, 7, 7))
    atlas = atlas_from_orientations([0, 45, 90, 135])
    agg, report = aggregate_maps([g], atlas, 0.0, R=4, top_k=1)
    direct = interaction_map(adjusted_activity(g, atlas, (12, 12), 4))
    np.testing.assert_allclose(agg.z, direct.z)
    assert report.n_maps == 1 and report.n_images == 1


def test_aggregate_duplicates_are_idempotent():
    rng = np.random.default_rng(1)
    gs = [activity_with_peak(rng) for _ in range(3)]
    atlas = atlas_from_orientations([0, 45, 90, 135])
    once, _ = aggregate_maps(gs, atlas, 0.0, top_k=5)
    twice, rep = aggregate_maps(gs + gs, atlas, 0.0, top_k=5)
    np.testing.assert_allclose(twice.z, once.z, atol=1e-12)
    assert rep.n_images == 6


def test_average_of_opposite_maps_cancels():
    z = np.random.default_rng(2).standard_normal((9, 9)) + 1j
    out = average_maps([InteractionMap(z), InteractionMap(-z)])
    np.testing.assert_allclose(out.magnitude, 0.0, atol=1e-12)
    with pytest.raises(AnalysisError):
        average_maps([])


def test_aggregate_counts_skipped_images():
    atlas = atlas_from_orientations([0, 45, 90, 135])
    rng = np.random.default_rng(3)
    empty = np.zeros((4, 24, 24))
    _, report = aggregate_maps([activity_with_peak(rng), empty], atlas, 0.0)
    assert report.skipped_images == 1
    with pytest.raises(AnalysisError):
        aggregate_maps([empty], atlas, 0.0)
    with pytest.raises(AnalysisError):
        aggregate_maps([empty], atlas, 20 * DEG)


def test_shuffle_positions_is_joint_permutation():
    g = np.random.default_rng(0).random((3, 5, 6))
    s = shuffle_positions(g, np.random.default_rng(1))
    a, b = g.reshape(3, -1).T, s.reshape(3, -1).T
    assert sorted(map(tuple, a)) == sorted(map(tuple, b))


# --------------------------------------------------------------------------
# Regions and deviations
# --------------------------------------------------------------------------


def cell(mask, x, y):
    R = (mask.shape[0] - 1) // 2
    return mask[R - y, R + x]


def test_region_mask_hand_cases():
    m = region_mask(0.0, 4)
    assert cell(m, 4, 0) == END and cell(m, -3, 0) == END
    assert cell(m, 0, 4) == SIDE and cell(m, 0, -2) == SIDE
    assert cell(m, 0, 0) == CENTER
    assert cell(m, 2, 2) == OTHER
    m90 = region_mask(np.pi / 2, 4)
    assert cell(m90, 0, 4) == END and cell(m90, 4, 0) == SIDE


@pytest.mark.parametrize("theta_c_deg", [0, 15, 30, 45, 60, 90, 120, 150])
def test_region_mask_partition(theta_c_deg):
    m = region_mask(theta_c_deg * DEG, 4)
    labels, counts = np.unique(m, return_counts=True)
    assert dict(zip(labels, counts))[CENTER] == 1
    assert sum(counts) == 81
    assert set(labels) <= {CENTER, END, SIDE, OTHER}
    assert (m == END).sum() > 0 and (m == SIDE).sum() > 0


def test_colinearity_deviation_uniform_maps():
    dev = colinearity_deviation(uniform_map(30 * DEG, theta_c=30 * DEG))
    assert all(v == 0 for v in dev.values())
    dev = colinearity_deviation(uniform_map(120 * DEG, theta_c=30 * DEG))
    assert all(abs(v - 90) < 1e-9 for v in dev.values())
    # e^{j theta} map orientation -150 deg is the same orientation as 30 deg
    assert colinearity_deviation(uniform_map(-150 * DEG, theta_c=30 * DEG))[END] < 1e-9


def test_cocircular_hand_case():
    ref = np.rad2deg(cocircular_reference(0.0, 4))
    R = 4
    assert abs(ref[R - 2, R + 2] - cocircular_tangent_geometric(2, 2, 0.0)) < 1e-9
    assert abs(ref[R - 2, R + 2] - 90.0) < 1e-9
    m = uniform_map(0.0)
    grid_dev = circular_diff_deg(np.rad2deg(m.theta_bar), ref)
    assert abs(grid_dev[R - 2, R + 2] - 90.0) < 1e-9


@pytest.mark.parametrize("theta_c_deg", [10, 30, 60, 100, 135, 170])
def test_cocircular_reference_matches_literal_and_geometric(theta_c_deg):
    tc = theta_c_deg * DEG
    ref = np.rad2deg(cocircular_reference(tc, 4))
    x, y = map_coordinates(4)
    for i in range(9):
        for j in range(9):
            xi, yi = x[i, j], y[i, j]
            d = math.sin(tc) * xi - math.cos(tc) * yi
            if abs(d) < 1e-6:
                continue
            geo = cocircular_tangent_geometric(xi, yi, tc)
            assert circular_diff_deg(ref[i, j], geo) < 1e-7
            if abs(xi - math.sin(tc) * (xi * xi + yi * yi) / (2 * d)) > 1e-6:
                assert circular_diff_deg(ref[i, j], cocircular_reference_literal(xi, yi, tc)) < 1e-7


def test_cocircular_degenerate_axis_is_colinear():
    for tc in [0.0, 45 * DEG, 90 * DEG]:
        m = uniform_map(tc, theta_c=tc)
        ref = cocircular_reference(tc, 4)
        x, y = map_coordinates(4)
        on_axis = np.abs(np.sin(tc) * x - np.cos(tc) * y) < 1e-9
        assert on_axis.sum() >= 3
        dev = circular_diff_deg(np.rad2deg(m.theta_bar), np.rad2deg(ref))
        np.testing.assert_allclose(dev[on_axis], 0.0, atol=1e-9)
    assert cocircularity_deviation(uniform_map(0.0))[CENTER] == 0.0


def test_precision_ratio_cases():
    assert precision_ratio(20.0, 20.0).value == 1.0
    assert abs(precision_ratio(43.0, 9.0).value - 4.777777) < 1e-5
    assert precision_ratio(43.0, 18.0).value == pytest.approx(precision_ratio(43.0, 9.0).value / 2)
    r = precision_ratio(10.0, 0.0)
    assert r.capped and r.value == 1e3
    assert np.isnan(precision_ratio(float("nan"), 1.0).value)


def test_precision_ratios_against_itself_are_one():
    rng = np.random.default_rng(5)
    gs = [shuffle_positions(activity_with_peak(rng, F=6), rng) for _ in range(4)]
    atlas = atlas_from_orientations([0, 30, 60, 90, 120, 150])
    marg, _ = aggregate_maps(gs, atlas, 0.0)
    for region, (rc, rq) in precision_ratios(marg, marg).items():
        if region != CENTER:
            assert rc.value == 1.0 and rq.value == 1.0


def test_activity_ratio_and_profile():
    rng = np.random.default_rng(6)
    z = rng.standard_normal((9, 9)) + 1j * rng.standard_normal((9, 9))
    m = InteractionMap(z)
    ratio, flagged = activity_ratio(m, m)
    np.testing.assert_allclose(ratio, 1.0)
    assert not flagged.any()
    z0 = z.copy()
    z0[4, 4] = 0
    ratio, flagged = activity_ratio(m, InteractionMap(z0))
    assert flagged[4, 4] and np.isnan(ratio[4, 4]) and flagged.sum() == 1
    grid = np.arange(81, dtype=float).reshape(9, 9)
    prof = axis_profile(grid, 0.0)
    np.testing.assert_allclose(prof, [40, 40, 40, 40, 40])
    prof = axis_profile(grid, np.pi / 2)
    np.testing.assert_allclose(prof, [40] * 5)
    grid[4, 5:] = [2, 3, 4, 5]
    grid[4, :4] = [5, 4, 3, 2]
    np.testing.assert_allclose(axis_profile(grid, 0.0), [40, 2, 3, 4, 5])


def test_map_csv(tmp_path):
    write_map_csv(tmp_path / "m.csv", uniform_map(0.5))
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "x,y,theta_bar_deg,magnitude,region"
    assert len(lines) == 82
    assert lines[1].startswith("-4,4,")
    assert lines[41] == "0,0,28.6479,1,center"


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def test_active_fraction():
    assert active_fraction(np.zeros((4, 5, 5))) == 0.0
    assert active_fraction(np.ones((4, 5, 5))) == 1.0
    assert active_fraction(np.array([0.0, 1.0, -1.0, 2.0])) == 0.5


def test_ssim_identity_and_negative():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 32, 32))
    assert abs(ssim(a, a) - 1.0) < 1e-12
    # zero local mean: the luminance term is ~1 and the structure term -1
    yy, xx = np.mgrid[0:32, 0:32]
    checker = np.where((yy + xx) % 2, 1.0, -1.0)
    assert ssim(checker, -checker) <= 0


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((40, 36))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    ours = ssim(a, b, data_range=1.0)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert abs(ours - ref) < 1e-9


def test_ssim_symmetry_and_errors():
    rng = np.random.default_rng(1)
    a, b = rng.random((3, 24, 24)), rng.random((3, 24, 24)) * 2
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    with pytest.raises(ValueError):
        ssim(a, b[:, :20])


def test_ssim_monotone_in_noise():
    rng = np.random.default_rng(2)
    clean = [rng.random((32, 32)) for _ in range(20)]
    medians = []
    for sigma in range(6):
        vals = []
        for i, c in enumerate(clean):
            noise = np.random.default_rng([i]).standard_normal(c.shape)
            vals.append(ssim(c, c + sigma * noise, data_range=np.ptp(c)))
        medians.append(np.median(vals))
    assert np.all(np.diff(medians) <= 0)


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------


def test_median_mad():
    s = median_mad([1, 2, 3, 4, 5])
    assert (s.median, s.mad, s.n) == (3, 1, 5)
    assert median_mad([]).flag == "empty"


def test_wilcoxon_identical_and_validation():
    x = np.arange(10.0)
    s = wilcoxon(x, x)
    assert s.p_value == 1.0 and s.flag
    with pytest.raises(ValueError):
        wilcoxon(x[:5], x[:5] + 1)
    with pytest.raises(ValueError):
        wilcoxon(x, x[:8])


def test_wilcoxon_shift_detected():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(50)
    b = a + 1 + 0.1 * rng.standard_normal(50)
    s = wilcoxon(b, a)
    assert s.p_value < 0.01 and s.z > 0
    assert sign_test_passes(s, expect_positive=True)
    assert not sign_test_passes(s, expect_positive=False)


@pytest.mark.parametrize("seed", range(6))
def test_wilcoxon_matches_scipy_with_zeros_and_ties(seed):
    rng = np.random.default_rng(seed)
    a = np.round(rng.standard_normal(30), 1)
    b = np.round(a + rng.standard_normal(30) * 0.5 + 0.1 * seed, 1)
    b[:4] = a[:4]  # zero differences
    ours = wilcoxon(a, b)
    ref = scipy_wilcoxon(a, b, zero_method="pratt", method="approx", correction=False)
    assert abs(ours.p_value - ref.pvalue) < 1e-12
    assert ours.statistic == ref.statistic


def test_stats_csv_round_trip(tmp_path):
    rows = [StatRow("ssim_l1", 0.0, 5.0, median_mad([0.1, 0.2, 0.3])),
            StatRow("active_fraction", 1.0, "", wilcoxon(np.arange(8.0) + 1, np.arange(8.0)))]
    write_stats_csv(tmp_path / "s.csv", rows)
    back = read_stats_csv(tmp_path / "s.csv")
    assert list(back[0]) == ["metric", "k_fb", "sigma", "median", "mad", "n", "p_value"]
    assert back[0]["p_value"] == "" and back[1]["n"] == "8"
