import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebbb.dynamics import (
    BeableTrajectory,
    ConfigurationSpace,
    ConsistencyViolation,
    DegenerateSource,
    Interval,
    JumpDistribution,
    MaxHalvingsExceeded,
    StepContext,
    TrajectoryStep,
    adapt_step,
    check_context,
    current_matrix,
    current_matrix_column,
    inconsistent_sources,
    jump_columns,
    jump_distribution,
    marginal_current,
    marginal_jump_distribution,
    marginal_master_update,
    master_update,
    rate_matrix,
    sample_columns,
    sample_step,
    transformed_step,
    transition_matrix,
)
from ebbb.linalg import evolution_from_hamiltonian
from ebbb.spin import BasisFrame, identity_frame


def random_state(rng, n):
    psi = rng.normal(size=n) + 1j * rng.normal(size=n)
    return psi / np.linalg.norm(psi)


def random_hermitian(rng, n):
    a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return (a + a.conj().T) / 2


def random_ctx(seed, n, eps=0.05):
    rng = np.random.default_rng(seed)
    u = evolution_from_hamiltonian(random_hermitian(rng, n), eps)
    return StepContext.from_unitary(random_state(rng, n), u, eps)


# -- configuration space ----------------------------------------------------


def test_space_dims():
    sp = ConfigurationSpace(((3, 2), (4, 5)))
    assert sp.total_dim == 120 and sp.n_configs == 12 and sp.spin_dim == 10
    assert sp.dims == (3, 2, 4, 5)


def test_space_codec_round_trip():
    sp = ConfigurationSpace(((3, 2), (2, 3)))
    for i in range(sp.total_dim):
        ext, inn = sp.decode(i)
        assert sp.encode(ext, inn) == i
        assert sp.config_of(i) == np.ravel_multi_index(ext, sp.external_dims)
        assert sp.spin_of(i) == np.ravel_multi_index(inn, sp.internal_dims)


def test_space_split_merge():
    sp = ConfigurationSpace(((3, 2), (2, 3)))
    v = np.arange(sp.total_dim, dtype=float)
    blocks = sp.split(v)
    assert blocks.shape == (6, 6)
    for c in range(6):
        for s in range(6):
            assert sp.config_of(int(blocks[c, s])) == c and sp.spin_of(int(blocks[c, s])) == s
    assert np.array_equal(sp.merge(blocks), v)
    np.testing.assert_array_equal(sp.config_indicator @ v, blocks.sum(axis=1))


def test_space_rejects_bad_layout():
    with pytest.raises(ValueError):
        ConfigurationSpace(((0, 2),))


# -- currents ---------------------------------------------------------------


def test_identity_has_no_current():
    rng = np.random.default_rng(0)
    ctx = StepContext.from_unitary(random_state(rng, 5), np.eye(5, dtype=complex), 0.1)
    assert np.all(current_matrix(ctx) == 0)
    d = jump_distribution(ctx, 2)
    assert d.stay_probability == 1.0 and np.all(d.probabilities == 0)


def test_current_continuity():
    ctx = random_ctx(1, 6)
    j = current_matrix(ctx)
    dp = np.abs(ctx.psi_next) ** 2 - np.abs(ctx.psi_t) ** 2
    np.testing.assert_allclose(j.sum(axis=1), dp, atol=1e-14)


def test_current_antisymmetric_exact():
    ctx = random_ctx(2, 7)
    j = current_matrix(ctx)
    assert np.all(j + j.T == 0)
    cols = np.stack([current_matrix_column(ctx, m) for m in range(7)], axis=1)
    assert np.all(cols + cols.T == 0)
    np.testing.assert_allclose(cols, j, atol=1e-16)


def test_rabi_flow_direction():
    # H = sigma_y rotates |0> towards |1> with real amplitudes
    sy = np.array([[0, -1j], [1j, 0]])
    ctx = StepContext.from_unitary(np.array([1, 0], dtype=complex), evolution_from_hamiltonian(sy, 1e-3), 1e-3)
    assert current_matrix_column(ctx, 0)[1] > 0


# -- jump probabilities -----------------------------------------------------


def test_jump_column_normalised():
    ctx = random_ctx(3, 8, eps=0.01)
    for m in range(8):
        d = jump_distribution(ctx, m)
        assert np.all(d.probabilities >= 0) and d.stay_probability >= 0
        assert abs(d.column().sum() - 1.0) < 1e-14
        assert d.probabilities[m] == 0


def test_jump_columns_match_single():
    ctx = random_ctx(4, 6, eps=0.01)
    cols, bad = jump_columns(ctx, [0, 3, 5])
    assert not bad.any()
    for k, m in enumerate((0, 3, 5)):
        np.testing.assert_allclose(cols[:, k], jump_distribution(ctx, m).column(), atol=1e-16)


def test_degenerate_source():
    psi = np.array([1, 0], dtype=complex)
    ctx = StepContext.from_unitary(psi, np.eye(2, dtype=complex), 0.1)
    with pytest.raises(DegenerateSource):
        jump_distribution(ctx, 1)


CHAIN = np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]], dtype=complex)


def low_weight_ctx(eps):
    # nearly empty middle state of a three-site chain, mass streaming through it
    a = np.sqrt((1 - 1e-4) / 2)
    psi = np.array([1e-2, a, a * np.exp(1.25j * np.pi)])
    return psi, evolution_from_hamiltonian(CHAIN, eps)


def test_two_states_always_consistent():
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    rng = np.random.default_rng(13)
    for _ in range(200):
        psi = random_state(rng, 2)
        eps = rng.uniform(0.01, 3)
        ctx = StepContext.from_unitary(psi, evolution_from_hamiltonian(sx, eps), eps)
        assert len(inconsistent_sources(ctx)) == 0


def test_consistency_violation_raised():
    psi, u = low_weight_ctx(0.05)
    ctx = StepContext.from_unitary(psi, u, 0.05)
    with pytest.raises(ConsistencyViolation) as info:
        jump_distribution(ctx, 0)
    assert info.value.total > 1
    assert list(inconsistent_sources(ctx)) == [0]


@pytest.mark.parametrize("seed", range(5))
def test_bell_rate_limit(seed):
    rng = np.random.default_rng(seed)
    h = random_hermitian(rng, 5)
    psi = random_state(rng, 5)
    rate = rate_matrix(psi, h)
    dev = []
    for eps in (1e-3, 1e-4, 1e-5):
        t = transition_matrix(StepContext.from_unitary(psi, evolution_from_hamiltonian(h, eps), eps))
        dev.append(np.max(np.abs(t / eps - rate)))
    assert dev[0] / dev[1] > 8 and dev[1] / dev[2] > 8


# -- sampling ---------------------------------------------------------------


def test_sample_trivial():
    stay = JumpDistribution(1, np.zeros(3), 1.0)
    assert all(sample_step(stay, u) == 1 for u in (0.0, 0.5, 0.999999))
    go = JumpDistribution(1, np.array([0.0, 0.0, 1.0]), 0.0)
    assert all(sample_step(go, u) == 2 for u in (0.0, 0.5, 0.999999))


def test_sample_rejects_bad_uniform():
    with pytest.raises(ValueError):
        sample_step(JumpDistribution(0, np.zeros(2), 1.0), 1.0)


def test_sample_statistics():
    d = JumpDistribution(2, np.array([0.1, 0.25, 0.0, 0.05, 0.3]), 0.3)
    col = d.column()
    n = 10**6
    u = np.random.default_rng(7).random(n)
    picks = sample_columns(np.repeat(col[:, None], 1, axis=1)[:, [0] * n], u)
    freq = np.bincount(picks, minlength=5) / n
    se = np.sqrt(col * (1 - col) / n)
    assert np.all(np.abs(freq - col) <= 4 * se + 1e-15)


def test_sample_step_matches_columns():
    d = jump_distribution(random_ctx(5, 6, eps=0.02), 1)
    u = np.random.default_rng(8).random(200)
    picks = sample_columns(d.column()[:, None].repeat(200, axis=1), u)
    assert [sample_step(d, x) for x in u] == list(picks)


def test_sample_seed_determinism():
    d = jump_distribution(random_ctx(6, 6, eps=0.02), 0)
    a = [sample_step(d, g) for g in [np.random.default_rng(11)] * 50]
    b = [sample_step(d, g) for g in [np.random.default_rng(11)] * 50]
    assert a == b


# -- adaptive steps ---------------------------------------------------------


def test_adapt_keeps_consistent_step():
    ctx0 = random_ctx(9, 4, eps=0.01)
    ctx, eps = adapt_step(ctx0.u_step, 0, ctx0.psi_t, 0.01)
    assert eps == 0.01 and np.array_equal(ctx.u_step, ctx0.u_step)


def test_adapt_reduces_step():
    psi, u = low_weight_ctx(0.05)
    ctx, eps = adapt_step(u, 0, psi, 0.05)
    assert eps < 0.05
    d = jump_distribution(ctx, 0)
    assert d.stay_probability >= 0
    # every rejected candidate really violated the condition
    e = 0.05
    while e > eps:
        with pytest.raises(ConsistencyViolation):
            jump_distribution(StepContext.from_unitary(psi, np.linalg.matrix_power(ctx.u_step, round(e / eps)), e), 0)
        e /= 2


def test_adapt_limit():
    psi, u = low_weight_ctx(0.05)
    with pytest.raises(MaxHalvingsExceeded):
        adapt_step(u, 0, psi, 0.05, max_halvings=0)
    with pytest.raises(ValueError):
        adapt_step(u, 0, psi, 0.0)


def test_interval_advance_restores_default():
    psi, u = low_weight_ctx(0.05)
    iv = Interval(psi, u, 0.05)
    # a draw near one lands on the last target of the column, never on the stay slot of state 0
    m, eps = iv.advance(0, lambda: 0.999999)
    assert m != 0 and eps < 0.05 and iv.n_bisections > 0
    nxt = Interval(u @ psi, u, 0.05)
    m2, eps2 = nxt.advance(m, lambda: 0.5)
    assert eps2 == 0.05


def test_interval_leaves_consistent_and_exact():
    psi, u = low_weight_ctx(0.05)
    iv = Interval(psi, u, 0.05)
    leaves = iv.leaves()
    assert len(leaves) > 1
    assert sum(0.05 / 2**lv for lv, _ in leaves) == pytest.approx(0.05)
    p = np.abs(psi) ** 2
    for lv, j in leaves:
        ctx = iv.context(lv, j)
        assert len(inconsistent_sources(ctx)) == 0
        p = master_update(ctx, p)
    np.testing.assert_allclose(p, np.abs(u @ psi) ** 2, atol=1e-14)
    with pytest.raises(MaxHalvingsExceeded):
        Interval(psi, u, 0.05, max_halvings=0).leaves()


# -- frames -----------------------------------------------------------------


def test_transformed_identity_frames():
    ctx = random_ctx(10, 8)
    sp = ConfigurationSpace(((2, 2), (1, 2)))
    f = identity_frame(sp)
    for v in ((None, None), (f, f)):
        t = transformed_step(ctx.psi_t, ctx.u_step, *v, eps=ctx.eps)
        np.testing.assert_allclose(t.psi_t, ctx.psi_t, atol=1e-15)
        np.testing.assert_allclose(t.u_step, ctx.u_step, atol=1e-15)
        assert check_context(t)


def test_transformed_dimension_mismatch():
    ctx = random_ctx(11, 4)
    f = identity_frame(ConfigurationSpace(((2, 2), (1, 2))))
    with pytest.raises(ValueError):
        transformed_step(ctx.psi_t, ctx.u_step, f, f)


def smooth_frames(space, n_steps, seed, rate=0.02):
    rng = np.random.default_rng(seed)
    a0 = rng.uniform(0, np.pi, (space.n_configs, space.n_particles, 2))
    w = rng.normal(size=a0.shape)
    out = []
    for t in range(n_steps + 1):
        a = a0 + rate * t * w
        out.append(BasisFrame.from_angles(space, a[..., 0], a[..., 1]))
    return out


@pytest.mark.parametrize("seed", range(3))
def test_transformed_marginals_and_transport(seed):
    sp = ConfigurationSpace(((2, 2), (2, 2)))
    rng = np.random.default_rng(seed)
    u = evolution_from_hamiltonian(random_hermitian(rng, sp.total_dim), 0.01)
    psi = random_state(rng, sp.total_dim)
    frames = smooth_frames(sp, 60, seed)
    p = np.abs(frames[0].apply(psi)) ** 2
    for t in range(60):
        ctx = transformed_step(psi, u, frames[t], frames[t + 1], eps=0.01)
        assert check_context(ctx)
        marg = sp.split(np.abs(ctx.psi_t) ** 2).sum(axis=1)
        np.testing.assert_allclose(marg, sp.split(np.abs(psi) ** 2).sum(axis=1), atol=1e-14)
        p = master_update(ctx, p)
        psi = u @ psi
        np.testing.assert_allclose(p, np.abs(frames[t + 1].apply(psi)) ** 2, atol=1e-10)


# -- master equation --------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 30), eps=st.floats(1e-3, 0.3))
def test_master_equation_transport(seed, n, eps):
    rng = np.random.default_rng(seed)
    u = evolution_from_hamiltonian(random_hermitian(rng, n), eps)
    psi = random_state(rng, n)
    p = np.abs(psi) ** 2
    for _ in range(20):
        iv = Interval(psi, u, eps)
        for lv, j in iv.leaves():
            p = master_update(iv.context(lv, j), p)
        psi = u @ psi
        assert np.max(np.abs(p - np.abs(psi) ** 2)) < 1e-10


def test_marginal_guidance_sums_internal_current():
    sp = ConfigurationSpace(((4, 2),))
    ctx = random_ctx(12, 8, eps=0.01)
    jb = marginal_current(ctx, sp)
    j = current_matrix(ctx)
    np.testing.assert_allclose(jb[1, 2], j[2:4, 4:6].sum(), atol=1e-16)
    assert np.all(jb + jb.T == 0) or np.max(np.abs(jb + jb.T)) < 1e-16
    d = marginal_jump_distribution(ctx, sp, 1)
    assert abs(d.column().sum() - 1) < 1e-14
    pb = sp.split(np.abs(ctx.psi_t) ** 2).sum(axis=1)
    np.testing.assert_allclose(
        marginal_master_update(ctx, sp, pb), sp.split(np.abs(ctx.psi_next) ** 2).sum(axis=1), atol=1e-14
    )


def test_trajectory_time_order():
    tr = BeableTrajectory()
    tr.append(TrajectoryStep(0, 3))
    tr.append(TrajectoryStep(2, 1))
    with pytest.raises(ValueError):
        tr.append(TrajectoryStep(2, 0))
    assert list(tr.indices) == [3, 1]


def test_context_requires_positive_eps():
    with pytest.raises(ValueError):
        StepContext(np.ones(1), np.ones(1), np.eye(1), 0.0)
