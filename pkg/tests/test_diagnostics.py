import numpy as np
import pytest

from nullwave.diagnostics import (
    CrossConeFlux, FoliationObserver, MultiplierProfile, UndefinedRatio, D_norm, D_norm_grid,
    K_T_bound, bootstrap_monitor, check_index_lemma, commutator_residual, commuted_energy,
    currents, dyadic_schedule, energy_density, energy_flux, fit_decay, hardy_check,
    ile_constant, ile_integrand, index_sets, lambda2, log_slope, merge_schedules,
    p_weighted_flux, p_weighted_identity, psi_phi_equivalence, shell_rule, slice_energy,
    spherical_average_check, stress_energy, CommutationIndex)
from nullwave.evolve import Solver, SolverConfig
from nullwave.grid_fields import FieldState, Grid, SphereSampling, bump, random_bump_field
from nullwave.metric import MetricSpec, metric_fields
from nullwave.nullform import NullFormSpec

R = 2.0
ETA = np.diag([-1.0, 1.0, 1.0, 1.0])
Q0 = np.diag([1.0, -1.0, -1.0, -1.0])


# ---------------------------------------------------------------------------
# pointwise


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
def test_multiplier_profile_bounds(alpha):
    prof = MultiplierProfile(alpha)
    assert all(prof.check_bounds().values())
    r = np.array([0.999e-3, 1.001e-3])
    for fn in (prof.chi, prof.chi_prime, prof.chi_second):
        a, b = fn(r)
        assert abs(a - b) < 1e-5 * max(1.0, abs(a))


def test_multiplier_profile_rejects_alpha():
    for a in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            MultiplierProfile(a)


def test_stress_energy_trace():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(20, 4))
    T = stress_energy(d, np.broadcast_to(ETA, (20, 4, 4)), np.broadcast_to(ETA, (20, 4, 4)))
    sq = np.einsum("na,ab,nb->n", d, ETA, d)
    assert np.allclose(np.einsum("ab,nab->n", ETA, T), -sq)
    assert np.allclose(T, np.transpose(T, (0, 2, 1)))


def test_flat_T_current():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 3))
    d = rng.normal(size=(30, 4))
    s = metric_fields(MetricSpec(), 0.0, x)
    c = currents("T", d, np.zeros(30), s, x)
    xhat = x / np.linalg.norm(x, axis=1)[:, None]
    dr = np.einsum("ni,ni->n", d[:, 1:], xhat)
    ang = np.sum(d[:, 1:] ** 2, axis=1) - dr**2
    assert np.allclose(c.K, 0.0)
    assert np.allclose(c.spacelike, 0.5 * np.sum(d**2, axis=1))
    assert np.allclose(c.null, 0.5 * ((d[:, 0] + dr) ** 2 + ang))
    assert np.allclose(energy_density(d, s), c.spacelike)


def test_radial_current_finite_and_unknown_field():
    x = np.array([[0.0, 0.0, 0.0], [0.3, -0.2, 0.1], [4.0, 1.0, 0.0]])
    d = np.ones((3, 4))
    s = metric_fields(MetricSpec("oscillating_bump", a=0.05, R=2.0), 0.3, x)
    c = currents("radial_f", d, np.ones(3), s, x)
    for v in (c.spacelike, c.null, c.K):
        assert np.all(np.isfinite(v))
    with pytest.raises(ValueError):
        currents("Z", d, np.ones(3), s, x)


def test_small_formulas():
    d = np.ones((2, 4))
    assert np.all(K_T_bound(0.0, d) == 0.0)
    assert np.allclose(K_T_bound(0.1, d), 3 * 0.1 * (1.12) ** 3 * 4)
    assert lambda2(0.8, 0.5, 0.1) == pytest.approx(0.8 * 0.25 / (2 * 1.3**2))
    assert ile_constant(0.5) == pytest.approx(72.0**2)


def test_shell_rule_volume():
    pts, w, rr = shell_rule(0.5, 2.0, 0.1, SphereSampling())
    assert w.sum() == pytest.approx(4 * np.pi / 3 * (8.0 - 0.125), rel=1e-12)
    assert np.allclose(np.linalg.norm(pts, axis=1), rr)
    pts, w, rr = shell_rule(1.0, 1.0, 0.1, SphereSampling())
    assert len(w) == 0


# ---------------------------------------------------------------------------
# cone integrals on an exact field


class _Host:
    def __init__(self, grid):
        self.grid = grid


def _feed_exact(n, tau, T=2 * R, w=0.6 * R, s0=-R):
    """Feed an exact outgoing wave ``(q(t-r) - q(t+r)) / r`` into an observer."""
    g = Grid.for_run(n, R, T)
    q = lambda s: np.exp(-(s - s0) ** 2 / w**2)
    qp = lambda s: -2 * (s - s0) / w**2 * q(s)
    qpp = lambda s: (4 * (s - s0) ** 2 / w**4 - 2 / w**2) * q(s)
    r = g.r
    rs = np.where(r > 0, r, 1.0)

    def state(t):
        phi = np.where(r > 0, (q(t - r) - q(t + r)) / rs, -2 * qp(t))
        pi = np.where(r > 0, (qp(t - r) - qp(t + r)) / rs, -2 * qpp(t))
        return FieldState(t, phi, pi)

    host = _Host(g)
    obs = FoliationObserver([tau], R, p_values=(1.0, 2.0), bands=False)
    dt = 0.25 * g.h
    ts = np.unique(np.concatenate([np.linspace(0, T, int(np.ceil(T / dt)) + 1), [tau]]))
    obs.start(host, state(0.0))
    for t in ts[1:]:
        obs.after_step(host, state(t))
    obs.finish(host, state(T), None)
    r_end = T - tau + R
    exact = 4 * np.pi * q(tau - R) ** 2 * (1 / R - 1 / r_end)
    return obs, exact


def test_cone_energy_of_outgoing_wave_converges():
    tau = 0.3 * R
    errs = []
    for n in (33, 65):
        obs, exact = _feed_exact(n, tau)
        eb = energy_flux(obs, tau)
        errs.append(abs(eb.null_truncated / exact - 1))
        # d_v (r phi) vanishes for a purely outgoing wave
        assert p_weighted_flux(obs, tau, 1.0) < 0.1 * exact * (33 / n) ** 2
    assert errs[1] < 0.08
    assert errs[0] / errs[1] > 3.5


# ---------------------------------------------------------------------------
# flat linear runs


@pytest.fixture(scope="module")
def flat_run():
    T = 2.5 * R
    leaves = [0.0, 0.5 * R, R, 1.5 * R]
    g = Grid.for_run(49, R, T)
    st = random_bump_field(g, np.random.default_rng(7), R)
    obs = FoliationObserver(leaves, R, p_values=(1.0, 1.5))
    rec = Solver(SolverConfig(grid=g, T_max=T, R=R, schedule=leaves)).run(st, [obs])
    assert rec.status == "completed"
    return obs, leaves


def test_flat_proxy_matches_conserved_energy():
    T = 2.0 * R
    leaves = [0.0, 0.5 * R, R]
    g = Grid.for_run(65, R, T)
    prof = np.exp(-(g.r / (0.5 * R)) ** 2) * (1 + 0.3 * g.coords(0) / R)
    st = FieldState(0.0, prof, 0.5 * prof)
    E0 = slice_energy(st, g)
    obs = FoliationObserver(leaves, R)
    Solver(SolverConfig(grid=g, T_max=T, R=R, schedule=leaves)).run(st, [obs])
    proxy = np.array([energy_flux(obs, tau).proxy for tau in leaves])
    assert np.all(np.abs(proxy / E0 - 1) < 0.08)
    assert np.ptp(proxy) < 0.01 * proxy[0]
    for tau in leaves:
        eb = energy_flux(obs, tau)
        assert eb.E_total <= eb.proxy * (1 + 1e-12)


def test_flat_inequality_ratios(flat_run):
    obs, leaves = flat_run
    for tau in leaves:
        for check in (hardy_check, spherical_average_check, psi_phi_equivalence):
            res = check(obs, tau)
            assert res.defined and res.passed()


def test_flat_ile_bound(flat_run):
    obs, leaves = flat_run
    res = ile_integrand(obs, 0.5, 0.0, leaves[-1])
    assert res.defined and res.ratio < 1.0
    with pytest.raises(ValueError):
        ile_integrand(obs, 0.4, 0.0, leaves[-1])


def test_flat_cross_cone_bound():
    T = 2.5 * R
    g = Grid.for_run(49, R, T)
    st = random_bump_field(g, np.random.default_rng(3), R)
    cc = CrossConeFlux(v0=2.0 * R, tau1=0.0, tau2=R, R=R)
    Solver(SolverConfig(grid=g, T_max=T, R=R)).run(st, [cc])
    assert 0 < cc.value() <= 1.1 * cc.bound()
    with pytest.raises(ValueError):
        CrossConeFlux(v0=0.5 * R, tau1=0.0, tau2=R, R=R)


def test_quadratic_homogeneity():
    T = 2.0 * R
    leaves = [0.0, 0.5 * R]
    g = Grid.for_run(33, R, T)
    out = []
    for s in (1.0, 3.0):
        st = random_bump_field(g, np.random.default_rng(5), R)
        st = FieldState(0.0, s * st.phi, s * st.pi)
        obs = FoliationObserver(leaves, R, nullform=NullFormSpec(Q0))
        Solver(SolverConfig(grid=g, T_max=T, R=R, schedule=leaves)).run(st, [obs])
        out.append((energy_flux(obs, leaves[1]).E_total, obs.leaf(leaves[1]).interior_source,
                    D_norm(obs, 0.5, 0.0, leaves[1])))
    (e1, s1, d1), (e3, s3, d3) = out
    assert e3 == pytest.approx(9 * e1, rel=1e-10)
    assert s3 == pytest.approx(81 * s1, rel=1e-10)
    assert d3 == pytest.approx(81 * d1, rel=1e-10)


def test_zero_field_ratios_undefined():
    T = 2.0 * R
    g = Grid.for_run(17, R, T)
    obs = FoliationObserver([0.0, R], R)
    Solver(SolverConfig(grid=g, T_max=T, R=R, schedule=[0.0, R])).run(
        FieldState(0.0, g.zeros(), g.zeros()), [obs])
    assert energy_flux(obs, R).E_total == 0.0
    h = hardy_check(obs, R)
    assert not h.defined and h.passed()
    assert not spherical_average_check(obs, R).defined
    mon = bootstrap_monitor(obs, 0.5)
    assert np.all(mon.interior == 0) and mon.c_interior == 0.0
    assert not mon.interior_fit.passed


def test_p_weighted_identity_balances():
    T = 3.0 * R
    leaves = [0.0, R]
    g = Grid.for_run(129, R, T)
    X = [g.coords(a) for a in range(3)]
    c = np.array([0.15, 0.1, 0.2]) * R
    prof = bump(np.sqrt(sum((X[a] - c[a]) ** 2 for a in range(3))) / R)
    st = FieldState(0.0, prof * (1 + 0.5 * X[0] / R), 0.3 * prof * X[2] / R)
    obs = FoliationObserver(leaves, R, p_values=(0.0, 1.0))
    Solver(SolverConfig(grid=g, T_max=T, R=R, schedule=leaves)).run(st, [obs])
    for p in (0.0, 1.0):
        assert p_weighted_identity(obs, 0.0, R, p).relative < 0.05


def test_observer_lookup_errors(flat_run):
    obs, leaves = flat_run
    with pytest.raises(ValueError):
        obs.leaf(0.123)
    with pytest.raises(ValueError):
        p_weighted_flux(obs, leaves[0], 2.0)
    with pytest.raises(ValueError):
        p_weighted_flux(obs, leaves[0], 0.0)
    with pytest.raises(ValueError):
        commuted_energy(obs, 6, 0, leaves[0])
    with pytest.raises(ValueError):
        commuted_energy(obs, 1, 0, leaves[0])
    with pytest.raises(ValueError):
        obs.region_integrals(0.0, 0.7)
    with pytest.raises(ValueError):
        D_norm(obs, 0.5, 0.0, 100.0)
    with pytest.raises(ValueError):
        FoliationObserver([0.0], R, p_values=(2.5,))


def test_D_norm_grid_gaussian():
    g = Grid(97, 0.1)
    F = np.exp(-g.r**2) / (1 + g.r) ** 0.75
    val = D_norm_grid([F, F, F], [0.0, 1.0, 2.0], g, 0.5)
    assert val == pytest.approx(2 * (np.pi / 2) ** 1.5, rel=1e-6)


# ---------------------------------------------------------------------------
# commutators and index sets


def _field(t, x):
    return np.cos(0.9 * t) * np.exp(
        -0.5 * np.sum((x - np.array([0.1, -0.2, 0.15])) ** 2, axis=1)) * (1 + 0.3 * x[:, 0])


SPEC = MetricSpec("oscillating_bump", omega=1.3, R=2.0, a=0.05, a2=0.02, theta=(0, 0.5, 1.0))


def test_T_commutator_second_order():
    res = [commutator_residual(SPEC, Grid(n, 1.5 / ((n - 1) // 2)), _field, 0.7, "T")
           for n in (25, 49)]
    assert np.log2(res[0].max_residual / res[1].max_residual) >= 1.9
    assert all(r.max_outside == 0.0 for r in res)


def test_Omega_commutator_converges():
    res = [commutator_residual(SPEC, Grid(n, 1.5 / ((n - 1) // 2)), _field, 0.7, "Omega",
                               core_frac=0.65) for n in (25, 49)]
    assert res[0].max_residual / res[1].max_residual > 2.5
    assert all(r.max_outside < 1e-10 for r in res)
    with pytest.raises(ValueError):
        commutator_residual(SPEC, Grid(9, 0.3), _field, 0.0, "Z")


def test_index_lemma():
    rep = check_index_lemma()
    assert rep["passed"] and rep["cases"] > 0
    ix = index_sets()
    assert ix.contains_A(5, 3) and not ix.contains_A(6, 0)
    assert ix.contains_B(5, 1) and not ix.contains_B(5, 3)


def test_index_lemma_detects_broken_sets():
    ix = index_sets()
    broken = CommutationIndex(ix.A_set - {(0, 0)}, ix.B_set)
    rep = check_index_lemma(broken)
    assert not rep["passed"] and rep["failures"]["closed"] > 0


# ---------------------------------------------------------------------------
# fits and schedules


def test_fit_decay_recovers_power_laws():
    tau = np.geomspace(8.0, 40.0, 7)
    rep = fit_decay(tau, 3.0 * (1 + tau) ** -1.7, 0.5 * (1 + tau) ** -0.8, 0.5)
    assert rep.energy.slope == pytest.approx(-1.7, abs=1e-10)
    assert rep.pointwise.slope == pytest.approx(-0.8, abs=1e-10)
    assert rep.energy.passed and rep.pointwise.passed
    js = rep.to_json()
    assert js["pass"] == {"energy": True, "pointwise": True}
    slow = fit_decay(tau, (1 + tau) ** -1.0, (1 + tau) ** -0.2, 0.5)
    assert not slow.energy.passed and not slow.pointwise.passed


def test_fit_decay_degenerate_inputs():
    tau = np.geomspace(8.0, 40.0, 7)
    assert log_slope(tau[:5], np.ones(5), -1.5).flagged == "fewer than 6 leaves"
    assert "factor 4" in log_slope(np.linspace(8, 10, 7), np.ones(7), -1.5).flagged
    bad = np.ones(7)
    bad[3] = 0.0
    res = log_slope(tau, bad, -1.5)
    assert res.flagged == "degenerate series" and not res.passed
    assert fit_decay(tau, bad, bad, 0.5).to_json()["slope_energy"] is None
    with pytest.raises(ValueError):
        fit_decay(tau, bad, bad, 1.5)


def test_dyadic_schedule():
    assert dyadic_schedule(2.0, 20.0) == [2.0, 4.0, 8.0, 16.0, 20.0]
    assert dyadic_schedule(2.0, 16.0) == [2.0, 4.0, 8.0, 16.0]
    with pytest.raises(ValueError):
        dyadic_schedule(1.1, 20.0)
    with pytest.raises(ValueError):
        dyadic_schedule(2.0, 1.5)
    assert merge_schedules([2.0, 4.0], [4.0 + 1e-14, 3.0]) == [2.0, 3.0, 4.0]


def test_undefined_ratio_is_value_error():
    assert issubclass(UndefinedRatio, ValueError)
