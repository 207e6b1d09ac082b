"""Spectral-layer tests: semigroup, eigentriple, tilt, criterion, evolution ODE.

Closed forms used as oracles here are re-derived in the docstrings rather
than imported from the implementation, so a wrong constant in the package
cannot silently agree with itself.
"""

import math

import numpy as np
import pytest

from spinesim import FiniteChainMotion, FiniteOffspring, BranchingParams, ModelSpec, preset
from spinesim.spectral import (
    Eigentriple,
    SpectralError,
    SupercriticalityError,
    UnsupportedBackendError,
    eigentriple_checks,
    fk_matrix,
    fk_semigroup,
    iu_convergence_profile,
    llogl_criterion,
    principal_eigentriple,
    solve_u_equation,
    tilt_motion,
    u_equation_rhs,
)

SYM_CRITERION = 2 * math.log(2)  # l = 2 log 2 at both states, phi_tilde beta m sums to 1
ASYM_CRITERION = 3.121420818082812  # (4/3) log 2 + 2 log 3, direct summation


def _expm_taylor(m, t, terms=25, squarings=12):
    """Independent matrix exponential: scaling and squaring over a Taylor sum."""
    a = np.asarray(m, dtype=float) * (t / 2.0**squarings)
    out = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, terms + 1):
        term = term @ a / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


# --- expectation semigroup ----------------------------------------------------


def test_fk_matrix_sym(sym):
    m = fk_matrix(sym.motion, sym.branching)
    assert m == pytest.approx(np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_fk_semigroup_sym_closed_form(sym):
    """exp(t[[0,1],[1,0]]) = e^t * [[cosh, sinh],[sinh, cosh]](t), at t=1
    written through e^(-2): e * (1 +- e^(-2))/2."""
    p = fk_semigroup(sym.motion, sym.branching, 1.0)
    on = math.e * (1 + math.exp(-2)) / 2
    off = math.e * (1 - math.exp(-2)) / 2
    assert p == pytest.approx(np.array([[on, off], [off, on]]), abs=1e-13)


def test_fk_semigroup_asym_against_taylor_oracle(asym):
    m = fk_matrix(asym.motion, asym.branching)
    assert m == pytest.approx(np.array([[0.0, 1.0], [2.0, 1.0]]))
    for t in (0.3, 1.0, 2.0):
        assert fk_semigroup(asym.motion, asym.branching, t) == pytest.approx(
            _expm_taylor(m, t), rel=1e-12, abs=1e-12
        )


def test_fk_semigroup_asym_eigendecomposition_form(asym):
    """M = [[0,1],[2,1]] has exact eigenpairs (2, (1,2)) and (-1, (1,-1)),
    giving e^M = (1/3) [[e^2 + 2 e^-1, e^2 - e^-1], [2e^2 - 2e^-1, 2e^2 + e^-1]]."""
    p = fk_semigroup(asym.motion, asym.branching, 1.0)
    e2, em1 = math.exp(2), math.exp(-1)
    expected = (
        np.array([[e2 + 2 * em1, e2 - em1], [2 * e2 - 2 * em1, 2 * e2 + em1]]) / 3.0
    )
    assert p == pytest.approx(expected, rel=1e-13)


def test_semigroup_property(asym):
    ps = fk_semigroup(asym.motion, asym.branching, 0.4)
    pt = fk_semigroup(asym.motion, asym.branching, 0.9)
    pst = fk_semigroup(asym.motion, asym.branching, 1.3)
    assert ps @ pt == pytest.approx(pst, rel=1e-12)


def test_semigroup_positivity(asym):
    for t in (1e-6, 0.1, 5.0):
        assert fk_semigroup(asym.motion, asym.branching, t).min() > 0


# --- principal eigentriple ----------------------------------------------------


def test_eigentriple_sym_exact(sym_eig):
    assert sym_eig.lambda1 == pytest.approx(1.0, abs=1e-12)
    assert sym_eig.phi == pytest.approx([1.0, 1.0], abs=1e-12)
    assert sym_eig.phi_tilde == pytest.approx([0.5, 0.5], abs=1e-12)
    assert sym_eig.phi_sq_mass == pytest.approx(2.0, abs=1e-11)
    assert sym_eig.gap == pytest.approx(2.0, abs=1e-9)


def test_eigentriple_asym_exact(asym_eig):
    # fk matrix [[0,1],[2,1]]: lambda1 = 2, phi = (1,2)/2 in sup norm,
    # left vector (1,1) scaled so <phi phi~, m> = 1 with m = (1,1)
    assert asym_eig.lambda1 == pytest.approx(2.0, abs=1e-12)
    assert asym_eig.phi == pytest.approx([0.5, 1.0], abs=1e-11)
    assert asym_eig.phi_tilde == pytest.approx([2 / 3, 2 / 3], abs=1e-11)
    assert asym_eig.phi_sq_mass == pytest.approx(1.25, abs=1e-10)
    assert asym_eig.gap == pytest.approx(3.0, abs=1e-9)


def test_eigentriple_normalization_conventions(asym_eig, asym):
    m = asym.motion.measure
    phi = np.asarray(asym_eig.phi)
    phi_tilde = np.asarray(asym_eig.phi_tilde)
    assert phi.max() == pytest.approx(1.0, abs=1e-12)
    assert float(np.sum(phi * phi_tilde * m)) == pytest.approx(1.0, abs=1e-12)


def test_eigentriple_invariance(asym, asym_eig):
    """phi is invariant for the discounted semigroup at several horizons."""
    phi = np.asarray(asym_eig.phi)
    for t in (0.5, 1.0, 2.0):
        p = fk_semigroup(asym.motion, asym.branching, t)
        residual = np.max(np.abs(math.exp(-asym_eig.lambda1 * t) * (p @ phi) - phi))
        assert residual < 1e-8


def test_phi_tilde_left_invariance(asym, asym_eig):
    p = fk_semigroup(asym.motion, asym.branching, 1.0)
    left = np.asarray(asym_eig.phi_tilde) * asym.motion.measure
    assert left @ p == pytest.approx(math.exp(asym_eig.lambda1) * left, rel=1e-10)


def test_eigentriple_bm_analytic(bm_eig):
    assert bm_eig.lambda1 == pytest.approx(0.5, abs=1e-15)
    assert bm_eig.gap == pytest.approx(1.5, abs=1e-15)
    assert bm_eig.phi_at(math.pi / 2) == pytest.approx(1.0)
    assert bm_eig.phi_at(math.pi / 4) == pytest.approx(math.sin(math.pi / 4))
    assert bm_eig.phi_tilde_at(math.pi / 2) == pytest.approx(2 / math.pi)
    blob = bm_eig.to_json()
    assert blob["lambda1"] == pytest.approx(0.5)


def test_bm_phi_tilde_integrates_phi_to_one(bm_eig):
    xs = np.linspace(0.0, math.pi, 20001)
    vals = np.array([bm_eig.phi_at(x) * bm_eig.phi_tilde_at(x) for x in xs])
    assert np.trapezoid(vals, xs) == pytest.approx(1.0, abs=1e-8)


def test_subcritical_model_rejected(sym):
    """Adding killing 2 to the symmetric chain drops lambda1 to -1."""
    q = np.array([[-3.0, 1.0], [1.0, -3.0]])
    motion = FiniteChainMotion(q, measure=np.ones(2))
    with pytest.raises(SupercriticalityError):
        principal_eigentriple(motion, sym.branching)


def test_eigentriple_checks_pass(sym, sym_eig, asym, asym_eig):
    for spec, eig in [(sym, sym_eig), (asym, asym_eig)]:
        rows = eigentriple_checks(spec.motion, spec.branching, eig)
        assert all(ok for _, ok, _ in rows), [r for r in rows if not r[1]]


def test_eigentriple_checks_reject_scaled_phi_tilde(asym, asym_eig):
    """Doubling phi_tilde breaks the pairing normalization and must be caught."""
    tampered = Eigentriple(
        asym_eig.lambda1,
        asym_eig.phi,
        [2.0 * v for v in asym_eig.phi_tilde],
        asym_eig.backend,
        phi_sq_mass=asym_eig.phi_sq_mass,
        gap=asym_eig.gap,
    )
    rows = eigentriple_checks(asym.motion, asym.branching, tampered)
    assert any(not ok for _, ok, _ in rows)


# --- tilted motion -------------------------------------------------------------


def test_tilt_sym_is_original_generator(sym, sym_tilt):
    """phi is constant on MODEL-SYM, so the h-transform changes nothing."""
    assert sym_tilt.generator_phi == pytest.approx(sym.motion.generator, abs=1e-12)
    assert sym_tilt.stationary == pytest.approx([0.5, 0.5], abs=1e-10)


def test_tilt_asym_closed_form(asym_tilt):
    # L_phi[x,y] = M[x,y] phi(y)/phi(x) off-diagonal, rows zeroed:
    # phi = (1/2, 1): state 0 rate 1*2 = 2, state 1 rate 2*(1/2) = 1
    assert asym_tilt.generator_phi == pytest.approx(
        np.array([[-2.0, 2.0], [1.0, -1.0]]), abs=1e-10
    )
    assert asym_tilt.stationary == pytest.approx([1 / 3, 2 / 3], abs=1e-10)


def test_tilt_rows_sum_to_zero(asym_tilt):
    assert np.abs(asym_tilt.generator_phi.sum(axis=1)).max() < 1e-10


def test_tilt_stationarity(asym_tilt):
    pi = np.asarray(asym_tilt.stationary)
    assert pi @ asym_tilt.generator_phi == pytest.approx(np.zeros(2), abs=1e-12)
    assert pi @ asym_tilt.transition(0.7) == pytest.approx(pi, abs=1e-12)


def test_tilt_transition_matches_discounted_semigroup(asym, asym_eig, asym_tilt):
    """The tilted kernel is e^{-lambda1 t} P_t^{FK}(x,y) phi(y)/phi(x)."""
    phi = np.asarray(asym_eig.phi)
    for t in (0.5, 1.0):
        fk = fk_semigroup(asym.motion, asym.branching, t)
        expected = math.exp(-asym_eig.lambda1 * t) * fk * (phi[None, :] / phi[:, None])
        assert asym_tilt.transition(t) == pytest.approx(expected, abs=1e-10)


def test_tilt_scale_invariance(asym, asym_eig):
    """Rescaling phi (with phi_tilde compensating) leaves the tilt unchanged."""
    scaled = Eigentriple(
        asym_eig.lambda1,
        [2.0 * v for v in asym_eig.phi],
        [0.5 * v for v in asym_eig.phi_tilde],
        asym_eig.backend,
        gap=asym_eig.gap,
    )
    a = tilt_motion(asym.motion, asym.branching, asym_eig).generator_phi
    b = tilt_motion(asym.motion, asym.branching, scaled).generator_phi
    assert a == pytest.approx(b, abs=1e-12)


def test_tilted_diffusion_drift_and_confinement(bm, bm_eig):
    tilt = tilt_motion(bm.motion, bm.branching, bm_eig)
    assert tilt.backend == "diffusion"
    # drift (log sin)' = cot
    assert tilt.motion.drift(math.pi / 2) == pytest.approx(0.0, abs=1e-12)
    assert tilt.motion.drift(math.pi / 4) == pytest.approx(1.0, rel=1e-12)
    rng = np.random.default_rng(13)
    x = math.pi / 2
    for _ in range(2000):
        x = tilt.motion.euler_step(x, rng)
        assert 0.0 < x < math.pi


def test_bm_stationary_density(bm, bm_eig):
    tilt = tilt_motion(bm.motion, bm.branching, bm_eig)
    xs = np.linspace(0.0, math.pi, 10001)
    dens = np.array([tilt.stationary(x) for x in xs])
    assert np.trapezoid(dens, xs) == pytest.approx(1.0, abs=1e-8)
    # phi phi~ m with m Lebesgue: (2/pi) sin^2
    assert tilt.stationary(math.pi / 2) == pytest.approx(2 / math.pi, rel=1e-12)


# --- convergence profile --------------------------------------------------------


def test_profile_sym_closed_form(sym, sym_eig):
    """Two-state symmetric chain mixes at rate 2: deviation is exactly e^{-2t}."""
    devs, slope = iu_convergence_profile(sym.motion, sym.branching, sym_eig, [0.5, 1.0, 2.0])
    assert devs == pytest.approx([math.exp(-1), math.exp(-2), math.exp(-4)], rel=1e-9)
    assert slope == pytest.approx(-2.0, rel=1e-6)


def test_profile_large_t_hits_floor(sym, sym_eig):
    devs, _ = iu_convergence_profile(sym.motion, sym.branching, sym_eig, [1.0, 10.0])
    assert devs[1] < 1e-8


def test_profile_asym_slope_matches_gap(asym, asym_eig):
    devs, slope = iu_convergence_profile(asym.motion, asym.branching, asym_eig, [1.0, 2.0, 4.0])
    assert all(b < a for a, b in zip(devs, devs[1:]))
    assert slope == pytest.approx(-3.0, rel=0.05)


def test_profile_rejects_wrong_gap(asym, asym_eig):
    wrong = Eigentriple(
        asym_eig.lambda1, asym_eig.phi, asym_eig.phi_tilde, asym_eig.backend, gap=1.5
    )
    with pytest.raises(SpectralError):
        iu_convergence_profile(asym.motion, asym.branching, wrong, [1.0, 2.0, 4.0])


def test_profile_needs_finite_chain(bm, bm_eig):
    with pytest.raises(UnsupportedBackendError):
        iu_convergence_profile(bm.motion, bm.branching, bm_eig, [1.0, 2.0])


# --- the moment criterion --------------------------------------------------------


def test_criterion_sym(sym, sym_eig):
    res = llogl_criterion(sym.branching, sym_eig, sym.motion.measure)
    assert res.finite
    assert res.value == pytest.approx(SYM_CRITERION, rel=1e-12)
    assert repr(res).startswith("Finite(")
    assert res.to_json() == {"finite": True, "value": pytest.approx(SYM_CRITERION)}


def test_criterion_asym_frozen(asym, asym_eig):
    """phi = (1/2, 1): state 0 contributes l = 2*(1/2)*log(1) = 0 ... no:
    l(0) = 2 * 0.5 * log(2*0.5)+ = 0, so only terms with k phi > 1 count.
    Direct summation: state 0: 1*log(1) = 0; state 1: (1/2)(2 log 2 + 3 log 3).
    Weighted by phi_tilde beta m = (2/3)(1, 2): value = (2/3)*2*(log 2 + (3/2) log 3).
    """
    res = llogl_criterion(asym.branching, asym_eig, asym.motion.measure)
    assert res.finite
    hand = (2 / 3) * 1 * 0.0 + (2 / 3) * 2 * (0.5 * (2 * math.log(2) + 3 * math.log(3)))
    assert res.value == pytest.approx(hand, rel=1e-10)
    assert res.value == pytest.approx(ASYM_CRITERION, rel=1e-10)


def test_criterion_heavy_diverges(heavy, heavy_eig):
    res = llogl_criterion(heavy.branching, heavy_eig, heavy.motion.measure)
    assert not res.finite
    assert repr(res) == "Diverges"
    assert res.witness["bound"] == 1e3
    assert res.witness["loglog_cutoff"] == pytest.approx(692.2393017536676, rel=1e-9)
    assert res.to_json()["finite"] is False


def test_heavy_lambda1_frozen(heavy_eig):
    # sym motion, growth (A-1)*1 with A = 3.046094555572219: lambda1 = A - 1
    assert heavy_eig.lambda1 == pytest.approx(2.046094555572219, rel=1e-12)


# --- evolution ODE ----------------------------------------------------------------


def test_u_equation_logistic_closed_form(sym):
    """Constant f on the symmetric model collapses to the scalar logistic
    du/ds = u^2 - u, i.e. u_t = u0 / (u0 + (1-u0) e^t)."""
    for c in (0.3, 0.7, 1.5):
        u0 = math.exp(-c)
        for t in (0.5, 1.0, 2.0):
            expected = u0 / (u0 + (1 - u0) * math.exp(t))
            u = solve_u_equation(sym.motion, sym.branching, [c, c], t)
            assert u == pytest.approx([expected, expected], rel=1e-10)


def test_u_equation_step_halving(asym):
    coarse = solve_u_equation(asym.motion, asym.branching, [0.3, 1.1], 1.0, step=1e-3)
    fine = solve_u_equation(asym.motion, asym.branching, [0.3, 1.1], 1.0, step=5e-4)
    assert np.max(np.abs(coarse - fine)) < 1e-8


def test_u_equation_fixed_point_and_bounds(asym):
    assert solve_u_equation(asym.motion, asym.branching, [0.0, 0.0], 2.0) == pytest.approx(
        [1.0, 1.0], abs=1e-12
    )
    u = solve_u_equation(asym.motion, asym.branching, [50.0, 50.0], 3.0)
    assert np.all((u >= 0.0) & (u <= 1.0))


def test_u_equation_monotone_in_f(asym):
    small = solve_u_equation(asym.motion, asym.branching, [0.2, 0.2], 1.0)
    large = solve_u_equation(asym.motion, asym.branching, [0.4, 0.4], 1.0)
    assert np.all(large < small)


def test_u_equation_rejects_negative_f(asym):
    with pytest.raises(ValueError):
        solve_u_equation(asym.motion, asym.branching, [-0.1, 0.5], 1.0)


def test_u_equation_rhs_at_fixed_point(sym):
    rhs = u_equation_rhs(sym.motion, sym.branching, np.array([1.0, 1.0]))
    assert rhs == pytest.approx([0.0, 0.0], abs=1e-15)


def test_u_equation_needs_finite_chain(bm):
    with pytest.raises(UnsupportedBackendError):
        solve_u_equation(bm.motion, bm.branching, [0.5], 1.0)


def test_u_equation_zero_horizon(sym):
    u = solve_u_equation(sym.motion, sym.branching, [0.3, 0.9], 0.0)
    assert u == pytest.approx(np.exp([-0.3, -0.9]))
