import math

import numpy as np
import pytest

from ebbb.dynamics import StepContext, current_matrix, marginal_current
from ebbb.linalg import is_unitary
from ebbb.models import (
    EprbParams,
    LarmorParams,
    SurrealParams,
    build_eprb_stage1,
    build_eprb_stage2,
    build_larmor,
    build_surreal,
    check_spec,
    eprb_allset_state,
    eprb_ready_state,
    eprb_stage1_unitary,
    eprb_stage2_single,
    lattice_positions,
    spin_down,
    spin_up,
    stage1_to_stage2,
)
from ebbb.spin import build_frame

ALPHA, BETA = math.pi / 5, 3 * math.pi / 5


def same_ray(a, b, tol=1e-12):
    return abs(abs(np.vdot(a, b)) - np.linalg.norm(a) * np.linalg.norm(b)) < tol


@pytest.mark.parametrize(
    "spec",
    [
        build_larmor(LarmorParams(eps=0.1)),
        build_eprb_stage1(),
        build_eprb_stage1(particle=2),
        build_eprb_stage2(),
        build_surreal(SurrealParams(lattice_size=64, x0=14, width=2.5, eps=0.5)),
    ],
    ids=lambda s: s.name,
)
def test_specs_well_formed(spec):
    assert check_spec(spec) == []
    assert len(spec.times()) == spec.n_steps + 1
    assert spec.times()[-1] == pytest.approx(sum(st.duration for st in spec.schedule))


def test_params_validation():
    with pytest.raises(ValueError):
        EprbParams(gamma_alpha_1=1.2)
    with pytest.raises(ValueError):
        EprbParams(n_substeps=50, eps=0.1)
    with pytest.raises(ValueError):
        LarmorParams(s=0.7)
    with pytest.raises(ValueError):
        SurrealParams(lattice_size=63)
    assert EprbParams.from_eps(0.04).n_substeps == 25


# -- EPRB -------------------------------------------------------------------


def test_stage1_full_operator():
    ga = math.sin(math.pi / 5)
    u = eprb_stage1_unitary(ga)
    assert np.max(np.abs(u.conj().T @ u - np.eye(12))) < 1e-12
    out = u @ np.eye(12)[0]  # |phi0, x_r, +>
    ref = np.zeros(12, dtype=complex)
    ref[(1 * 2 + 1) * 2] = ga  # |alpha, x_a, +>
    ref[(2 * 2 + 1) * 2] = math.cos(math.pi / 5)  # |beta, x_a, +>
    np.testing.assert_allclose(out, ref, atol=1e-15)


def test_stage1_final_probabilities():
    spec = build_eprb_stage1()
    psi = spec.initial_state
    for sub, _ in spec.step_operators():
        psi = sub @ psi
    p = np.abs(psi) ** 2
    phi = spec.decoders["phi"].codes
    assert p[phi == 1].sum() == pytest.approx(math.sin(math.pi / 5) ** 2, abs=1e-10)
    assert p[phi == 2].sum() == pytest.approx(math.cos(math.pi / 5) ** 2, abs=1e-10)
    assert p[phi == 2].sum() == pytest.approx(0.6545, abs=1e-4)


def test_stage1_feeds_allset_state():
    p = EprbParams()
    u = np.kron(eprb_stage1_unitary(p.gamma_alpha_1), eprb_stage1_unitary(p.gamma_alpha_2))
    psi = stage1_to_stage2(u @ eprb_ready_state())
    assert np.linalg.norm(psi) == pytest.approx(1.0, abs=1e-12)
    assert same_ray(psi, eprb_allset_state(p))


def test_stage2_single_unitary():
    u = eprb_stage2_single(ALPHA, BETA)
    assert is_unitary(u, tol=1e-12)


def test_spin_projection_amplitudes():
    for ang in (0.0, ALPHA, BETA, 2.0):
        up0, dn0 = np.array([1, 0]), np.array([0, 1])
        assert np.vdot(spin_up(ang), up0) == pytest.approx(math.cos(ang / 2))
        assert np.vdot(spin_up(ang), dn0) == pytest.approx(math.sin(ang / 2))
        assert np.vdot(spin_down(ang), up0) == pytest.approx(math.sin(ang / 2))
        assert np.vdot(spin_down(ang), dn0) == pytest.approx(-math.cos(ang / 2))


def conditional_outcomes(final, a_idx, b_idx, a, b):
    """Amplitudes of (x1, x2) in {+,-}^2 for devices (a, b), spin projected out."""
    f = final.reshape(20, 20)
    out = []
    for x1, v1 in ((1 + 2 * a_idx, spin_up(a)), (2 + 2 * a_idx, spin_down(a))):
        for x2, v2 in ((1 + 2 * b_idx, spin_up(b)), (2 + 2 * b_idx, spin_down(b))):
            r1 = [(a_idx * 5 + x1) * 2 + s for s in (0, 1)]
            r2 = [(b_idx * 5 + x2) * 2 + s for s in (0, 1)]
            out.append(v1.conj() @ f[np.ix_(r1, r2)] @ v2.conj())
    out = np.array(out)
    return out / np.linalg.norm(out)


def test_stage2_conditional_coefficients():
    spec = build_eprb_stage2()
    final = spec.schedule[0].unitary @ spec.initial_state
    s, c = math.sin((ALPHA - BETA) / 2), math.cos((ALPHA - BETA) / 2)
    ref = np.array([-s, -c, c, -s]) / math.sqrt(2)
    got = conditional_outcomes(final, 0, 1, ALPHA, BETA)
    # same vector including relative signs, up to one global phase
    np.testing.assert_allclose(got * np.conj(got[1]) / abs(got[1]), ref * np.sign(ref[1]), atol=1e-12)
    # the sub-step schedule reaches the same state
    psi = spec.initial_state
    for sub, _ in spec.step_operators():
        psi = sub @ psi
    assert np.max(np.abs(psi - final)) < 1e-8


def test_stage2_decoders():
    spec = build_eprb_stage2()
    k = ((1 * 5 + 3) * 2 + 1) * 20 + (0 * 5 + 2) * 2 + 0
    assert spec.decode("phi1", k) == 1 and spec.decode("x1", k) == 3
    assert spec.decode("sigma1", k) == 1 and spec.decode("phi2", k) == 0
    assert spec.decoders["xsign1"].value(k) == 1.0
    assert spec.decoders["xsign2"].value(k) == -1.0
    assert spec.decoders["xsign1"].value(0) == 0.0


# -- Larmor -----------------------------------------------------------------


def larmor_frames(params, n_times, every=1):
    spec = build_larmor(params)
    psi = spec.initial_state
    (sub, _), = [next(spec.step_operators())]
    frames, prev = [], None
    for k in range(n_times):
        prev = build_frame(psi, spec.space, previous=prev)
        frames.append(prev)
        for _ in range(every):
            psi = sub @ psi
    return spec, frames


def test_larmor_frame_at_start():
    p = LarmorParams()
    _, frames = larmor_frames(p, 1)
    (t1, p1), (t2, p2) = frames[0].angles(0)
    assert (t1, p1) == pytest.approx((p.theta1, p.phi1), abs=1e-9)
    assert (t2, p2) == pytest.approx((p.theta2, p.phi2), abs=1e-9)


def test_larmor_zero_coupling_static():
    _, frames = larmor_frames(LarmorParams(mu1=0.0, mu2=0.0, eps=0.1), 10, every=5)
    for f in frames:
        assert np.array_equal(f.theta, frames[0].theta) and np.array_equal(f.phi, frames[0].phi)


def test_larmor_precession_rates():
    p = LarmorParams(eps=0.05)
    spec, frames = larmor_frames(p, 21, every=2)
    t = spec.times()[: 2 * 21 : 2]
    theta = np.array([f.theta[0] for f in frames])
    phi = np.unwrap(np.array([f.phi[0] for f in frames]), axis=0)
    assert np.ptp(theta, axis=0).max() < 1e-4
    slopes = np.polyfit(t, phi, 1)[0]
    # H = -mu S_z precesses the axis at rate -mu under exp(-i H t)
    np.testing.assert_allclose(slopes, [-p.mu1, -p.mu2], rtol=1e-2)
    assert slopes[1] / slopes[0] == pytest.approx(1.5, rel=1e-2)


def test_larmor_space_size():
    spec = build_larmor()
    assert spec.space.total_dim == 25
    assert spec.n_steps == round(4 * math.pi / 0.02)


# -- crossing packets -------------------------------------------------------


SMALL = dict(lattice_size=64, x0=14.0, width=2.5, eps=0.5)


def test_surreal_marginal_current_vanishes_at_origin():
    spec = build_surreal(SurrealParams(**SMALL))
    n = spec.space.n_configs
    sub, eps = next(spec.step_operators())
    psi = spec.initial_state
    worst = 0.0
    for _ in range(spec.n_steps):
        jb = marginal_current(StepContext.from_unitary(psi, sub, eps), spec.space)
        worst = max(worst, abs(jb[n // 2, n // 2 - 1]))
        psi = sub @ psi
    assert worst < 1e-14
    assert lattice_positions(n)[n // 2 - 1 : n // 2 + 1].tolist() == [-0.5, 0.5]


def test_surreal_single_packet_modes_agree():
    # with the internal state unentangled the summed current is the current
    # of the occupied internal component, so both engines jump identically
    spec = build_surreal(SurrealParams(single_packet=True, **SMALL))
    sub, eps = next(spec.step_operators())
    psi = spec.initial_state
    for _ in range(5):
        ctx = StepContext.from_unitary(psi, sub, eps)
        j = current_matrix(ctx)
        np.testing.assert_allclose(marginal_current(ctx, spec.space), j[::2, ::2], atol=1e-16)
        assert np.max(np.abs(j[1::2])) < 1e-16 and np.max(np.abs(j[:, 1::2])) < 1e-16
        psi = sub @ psi


def test_surreal_internal_state_untouched():
    spec = build_surreal(SurrealParams(**SMALL))
    sub = spec.schedule[0].substep
    # hopping acts on x only
    assert np.max(np.abs(sub[::2, 1::2])) < 1e-15 and np.max(np.abs(sub[1::2, ::2])) < 1e-15


def test_surreal_overlap_warning():
    with pytest.warns(UserWarning):
        build_surreal(SurrealParams(lattice_size=64, x0=4.0, width=4.0))
