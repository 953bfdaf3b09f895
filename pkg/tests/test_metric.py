import numpy as np
import pytest

from nullwave.metric import (MINKOWSKI, HyperbolicityError, MetricSpec, bump, bump_radial,
                             check_A1, c1_norm_H, ellipticity_bounds, eval_metric,
                             metric_fields, metric_time_derivatives, perturbation,
                             smallness_margin, spectral_check)

BUMP = MetricSpec("oscillating_bump", a=0.05, a2=0.02, omega=1.3, theta=(0.0, 0.5, 1.0), R=2.0)


def test_minkowski_is_exact():
    rep = check_A1(MetricSpec(), 1.0)
    assert rep.passed_A1 and rep.H == 0.0 and rep.lambda1 == 1.0
    assert rep.smallness_margin == 0.0
    s = eval_metric(MetricSpec(), 0.3, [0.1, 0.2, 0.3])
    assert np.array_equal(s.g, MINKOWSKI) and np.array_equal(s.g_inv, MINKOWSKI)
    assert s.det_G == pytest.approx(-1.0)
    assert not s.dg.any() and not s.b.any()


def test_report_json_keys():
    doc = check_A1(BUMP, 0.5).to_json()
    assert set(doc) == {"lambda", "H", "lambda1", "smallness_margin", "passed_A1", "alpha"}


def test_support_is_half_R():
    x = np.array([[0.0, 0.0, 1.0 + 1e-9], [1.5, 0, 0], [0, 0.99, 0]])
    h, dh = perturbation(BUMP, 0.4, x)
    assert not h[0].any() and not h[1].any() and h[2].any()
    assert not dh[0].any()


def test_inverse_and_determinant():
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.7, 0.7, size=(50, 3))
    mf = metric_fields(BUMP, 0.37, x)
    eye = np.broadcast_to(np.eye(4), (50, 4, 4))
    assert np.allclose(mf.g @ mf.g_inv, eye, atol=1e-13)
    assert np.allclose(mf.det_G, np.linalg.det(mf.g), rtol=1e-12)


def test_dg_matches_finite_differences():
    x = np.array([[0.2, -0.3, 0.25]])
    t, e = 0.6, 1e-6
    mf = metric_fields(BUMP, t, x)
    fd_t = (metric_fields(BUMP, t + e, x).g - metric_fields(BUMP, t - e, x).g) / (2 * e)
    assert np.allclose(mf.dg[0, 0], fd_t[0], atol=1e-8)
    for a in range(3):
        d = np.zeros(3)
        d[a] = e
        fd = (metric_fields(BUMP, t, x + d).g - metric_fields(BUMP, t, x - d).g) / (2 * e)
        assert np.allclose(mf.dg[0, a + 1], fd[0], atol=1e-8)


def test_b_vector_is_divergence_form():
    # box_g = (-G)^(-1/2) d_a ((-G)^(1/2) g^{ab} d_b): b^b = (-G)^(-1/2) d_a ((-G)^(1/2) g^{ab})
    x0 = np.array([0.15, 0.2, -0.1])
    t, e = 0.45, 1e-5

    def dens(tt, xx):
        mf = metric_fields(BUMP, tt, xx[None])
        return np.sqrt(-mf.det_G[0]) * mf.g_inv[0]

    div = (dens(t + e, x0) - dens(t - e, x0))[0] / (2 * e)
    for a in range(3):
        d = np.zeros(3)
        d[a] = e
        div = div + (dens(t, x0 + d) - dens(t, x0 - d))[a + 1] / (2 * e)
    mf = metric_fields(BUMP, t, x0[None])
    assert np.allclose(mf.b[0], div / np.sqrt(-mf.det_G[0]), atol=1e-8)


def test_time_derivatives_match_differences():
    x = np.array([[0.1, 0.2, 0.3], [0.0, 0.0, 0.0]])
    t, e = 1.1, 1e-5
    dgi, db = metric_time_derivatives(BUMP, t, x)
    p, m = metric_fields(BUMP, t + e, x), metric_fields(BUMP, t - e, x)
    assert np.allclose(dgi, (p.g_inv - m.g_inv) / (2 * e), atol=1e-8)
    assert np.allclose(db, (p.b - m.b) / (2 * e), atol=1e-7)


def test_bump_profile():
    assert bump(0.0) == pytest.approx(1.0)
    assert bump(1.0) == 0.0 and bump(2.0) == 0.0
    x = np.array([[0.3, 0.1, -0.2]])
    B, dB, ddB = bump_radial(x, 0.8, order=2)
    e = 1e-5
    for a in range(3):
        d = np.zeros(3)
        d[a] = e
        fd = (bump_radial(x + d, 0.8)[0] - bump_radial(x - d, 0.8)[0]) / (2 * e)
        assert dB[0, a] == pytest.approx(fd[0], abs=1e-8)


def test_strong_bump_fails_A1():
    rep = check_A1(MetricSpec("oscillating_bump", a=2.0, omega=1.0, theta=(0.3, 0.6, 0.9)), 0.5)
    assert not rep.passed_A1
    assert np.isfinite(rep.to_json()["lambda"])


def test_small_bump_passes_with_margin():
    spec = MetricSpec("oscillating_bump", a=0.01, a2=0.005, omega=1.0, theta=(0.3, 0.6, 0.9))
    rep = check_A1(spec, 0.9)
    assert rep.passed_A1 and 0 < rep.H < 0.05
    assert rep.lambda1 == pytest.approx(ellipticity_bounds(rep.lam, rep.H))
    assert rep.smallness_margin == pytest.approx(smallness_margin(rep.H, 2.0, 0.5))


def test_smallness_margin_formula():
    assert smallness_margin(1e-3, 2.0, 0.5) == pytest.approx(1e-3 * 700 * 2**1.5 / 0.5)
    with pytest.raises(ValueError):
        smallness_margin(1.0, 2.0, 1.0)


def test_ellipticity_constant():
    assert ellipticity_bounds(1.0, 0.0) == 1.0
    assert ellipticity_bounds(0.5, 0.1) == pytest.approx(0.25 / (1.1 + 0.06))
    with pytest.raises(ValueError):
        ellipticity_bounds(0.0, 0.1)


def test_H_grows_with_amplitude():
    hs = [c1_norm_H(MetricSpec("oscillating_bump", a=a, omega=1.0), 9, 8) for a in (0.01, 0.02, 0.04)]
    assert hs[0] < hs[1] < hs[2]


def test_invalid_specs():
    with pytest.raises(ValueError):
        MetricSpec("kerr")
    with pytest.raises(ValueError):
        MetricSpec(R=0.0)
    with pytest.raises(ValueError):
        MetricSpec(theta=(1.0, 2.0))
    with pytest.raises(ValueError):
        check_A1(MetricSpec(), 1.5)


def test_degenerate_metric_raises():
    spec = MetricSpec("oscillating_bump", a=1.5, omega=0.0)
    with pytest.raises(HyperbolicityError):
        metric_fields(spec, 0.0, np.zeros((1, 3)))


def test_spectral_check_flat():
    s = eval_metric(MetricSpec(), 0.0, [0, 0, 0])
    assert spectral_check(s, 1.0)
    assert spectral_check(s, 0.5)
