"""Stochastic beable engine: probability currents, jump probabilities, sampling.

A beable lives on a composite index ``n`` of a finite configuration space.
Per time step the wave function goes ``psi_next = U psi_t``; the real,
antisymmetric current

    J[n, m] = Re(conj(psi_next[n]) U[n, m] psi_t[m]) - (n <-> m)

gives the jump probabilities ``T[n, m] = max(0, J[n, m]) / |psi_t[m]|^2``
and an exact master equation for ``|psi|^2``. A step is usable only when the
jumps out of the occupied state sum to at most one; otherwise the step is
bisected with a unitary square root until it is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .linalg import is_unitary, unitary_root

P_FLOOR = 1e-12
STAY_TOL = 1e-12
MAX_HALVINGS = 20


class EngineError(RuntimeError):
    """Base class for failures of the trajectory engine."""


class ConsistencyViolation(EngineError):
    """Jump probabilities out of the occupied state exceed one; shrink the step."""

    def __init__(self, source: int, total: float):
        super().__init__(f"jump probabilities from state {source} sum to {total:.6g} > 1")
        self.source = source
        self.total = total


class DegenerateSource(EngineError):
    """The occupied state has (numerically) zero probability."""


class MaxHalvingsExceeded(EngineError):
    """Step bisection hit its depth limit without restoring consistency."""


@dataclass(frozen=True)
class ConfigurationSpace:
    """Factored index space ``(x1, s1, x2, s2, ...)`` with particle 1 slowest.

    ``particles`` lists ``(external_dims, internal_dims)`` per particle. Within a
    particle the external index is slow and the internal (spin) index fast.
    """

    particles: tuple[tuple[int, int], ...]

    def __post_init__(self):
        parts = tuple((int(a), int(b)) for a, b in self.particles)
        if not parts or any(a < 1 or b < 1 for a, b in parts):
            raise ValueError(f"invalid particle layout {self.particles!r}")
        object.__setattr__(self, "particles", parts)

    @property
    def n_particles(self) -> int:
        return len(self.particles)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(d for pair in self.particles for d in pair)

    @property
    def external_dims(self) -> tuple[int, ...]:
        return tuple(a for a, _ in self.particles)

    @property
    def internal_dims(self) -> tuple[int, ...]:
        return tuple(b for _, b in self.particles)

    @property
    def total_dim(self) -> int:
        return math.prod(self.dims)

    @property
    def n_configs(self) -> int:
        return math.prod(self.external_dims)

    @property
    def spin_dim(self) -> int:
        return math.prod(self.internal_dims)

    def encode(self, externals: Sequence[int], internals: Sequence[int]) -> int:
        digits = [v for pair in zip(externals, internals) for v in pair]
        return int(np.ravel_multi_index(digits, self.dims))

    def decode(self, index: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        digits = np.unravel_index(int(index), self.dims)
        return tuple(int(d) for d in digits[0::2]), tuple(int(d) for d in digits[1::2])

    def config_of(self, index):
        """Flat external-configuration index of composite index(es)."""
        digits = np.unravel_index(index, self.dims)
        return np.ravel_multi_index(digits[0::2], self.external_dims)

    def spin_of(self, index):
        """Flat spin index of composite index(es)."""
        digits = np.unravel_index(index, self.dims)
        return np.ravel_multi_index(digits[1::2], self.internal_dims)

    @cached_property
    def config_major(self) -> np.ndarray:
        """Permutation ``p`` with ``p[c * spin_dim + s]`` the composite index of (c, s)."""
        n = self.n_particles
        order = list(range(0, 2 * n, 2)) + list(range(1, 2 * n, 2))
        idx = np.arange(self.total_dim).reshape(self.dims)
        return np.ascontiguousarray(idx.transpose(order).reshape(-1))

    @cached_property
    def config_indicator(self) -> np.ndarray:
        """``(n_configs, total_dim)`` 0/1 matrix summing a vector over internal indices."""
        a = np.zeros((self.n_configs, self.total_dim))
        a[np.repeat(np.arange(self.n_configs), self.spin_dim), self.config_major] = 1.0
        return a

    def split(self, psi: np.ndarray) -> np.ndarray:
        """View a composite vector as a ``(n_configs, spin_dim)`` array."""
        return np.asarray(psi)[self.config_major].reshape(self.n_configs, self.spin_dim)

    def merge(self, blocks: np.ndarray) -> np.ndarray:
        out = np.empty(self.total_dim, dtype=np.asarray(blocks).dtype)
        out[self.config_major] = np.asarray(blocks).reshape(-1)
        return out


@dataclass(frozen=True)
class StepContext:
    """Everything needed to form jump probabilities for one (sub-)step."""

    psi_t: np.ndarray
    psi_next: np.ndarray
    u_step: np.ndarray
    eps: float
    basis_t: object = None
    basis_next: object = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps!r}")

    @classmethod
    def from_unitary(cls, psi_t: np.ndarray, u_step: np.ndarray, eps: float) -> "StepContext":
        psi_t = np.asarray(psi_t, dtype=complex)
        return cls(psi_t, u_step @ psi_t, u_step, eps)


@dataclass(frozen=True)
class JumpDistribution:
    """One column of the transition matrix: where the beable at ``source`` can go."""

    source: int
    probabilities: np.ndarray
    stay_probability: float

    def column(self) -> np.ndarray:
        col = self.probabilities.copy()
        col[self.source] = self.stay_probability
        return col


@dataclass(frozen=True)
class TrajectoryStep:
    time_index: int
    composite_index: int
    basis_angles: Optional[tuple[tuple[float, float], ...]] = None
    eps_used: Optional[float] = None


@dataclass
class BeableTrajectory:
    steps: list[TrajectoryStep] = field(default_factory=list)

    def append(self, step: TrajectoryStep):
        if self.steps and step.time_index <= self.steps[-1].time_index:
            raise ValueError("time_index must increase strictly")
        self.steps.append(step)

    @property
    def indices(self) -> np.ndarray:
        return np.array([s.composite_index for s in self.steps], dtype=np.int64)


# -- currents and jump probabilities ---------------------------------------


def current_matrix(ctx: StepContext) -> np.ndarray:
    """Full antisymmetric current matrix; O(N^2), for checks and exact transport."""
    k = np.real(ctx.psi_next.conj()[:, None] * ctx.u_step * ctx.psi_t[None, :])
    return k - k.T


def current_columns(ctx: StepContext, sources) -> np.ndarray:
    """Current columns ``J[:, m]`` for each ``m`` in ``sources`` (shape N x len)."""
    m = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    into = np.real(ctx.psi_next.conj()[:, None] * ctx.u_step[:, m] * ctx.psi_t[m][None, :])
    out = np.real(ctx.psi_next[m].conj()[None, :] * ctx.u_step[m, :].T * ctx.psi_t[:, None])
    return into - out


def current_matrix_column(ctx: StepContext, m: int) -> np.ndarray:
    return current_columns(ctx, [m])[:, 0]


def _columns_to_jumps(j: np.ndarray, sources: np.ndarray, p_src: np.ndarray, p_floor: float):
    if np.any(p_src <= p_floor):
        bad = int(sources[np.argmax(p_src <= p_floor)])
        raise DegenerateSource(f"source state {bad} has probability <= {p_floor:g}")
    t = np.maximum(j, 0.0) / p_src[None, :]
    t[sources, np.arange(len(sources))] = 0.0
    stay = 1.0 - t.sum(axis=0)
    return t, stay


def jump_columns(ctx: StepContext, sources, p_floor: float = P_FLOOR):
    """Vectorised :func:`jump_distribution` for several sources.

    Returns ``(columns, violated)``: an ``N x k`` array of column-stochastic
    transition probabilities (stay probability on the source row) and a
    boolean mask of sources whose step is inconsistent. Violating columns are
    left unnormalised; callers must not sample from them.
    """
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    p_src = np.abs(ctx.psi_t[sources]) ** 2
    t, stay = _columns_to_jumps(current_columns(ctx, sources), sources, p_src, p_floor)
    violated = stay < -STAY_TOL
    t[sources, np.arange(len(sources))] = np.maximum(stay, 0.0)
    return t, violated


def jump_distribution(ctx: StepContext, m: int, p_floor: float = P_FLOOR) -> JumpDistribution:
    m = int(m)
    p_m = abs(ctx.psi_t[m]) ** 2
    t, stay = _columns_to_jumps(current_columns(ctx, [m]), np.array([m]), np.array([p_m]), p_floor)
    stay = float(stay[0])
    if stay < -STAY_TOL:
        raise ConsistencyViolation(m, 1.0 - stay)
    return JumpDistribution(m, t[:, 0], max(stay, 0.0))


def transition_matrix(ctx: StepContext, p_floor: float = P_FLOOR) -> np.ndarray:
    """All columns ``T[n, m]`` with zero diagonal; columns with P_m <= p_floor are zero."""
    j = current_matrix(ctx)
    p = np.abs(ctx.psi_t) ** 2
    live = p > p_floor
    t = np.zeros_like(j)
    t[:, live] = np.maximum(j[:, live], 0.0) / p[live]
    np.fill_diagonal(t, 0.0)
    return t


def rate_matrix(psi: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Continuous-time jump rates ``max(0, 2 Im(conj(psi_n) H_nm psi_m)) / P_m``.

    The sign is the one obtained from the discrete current with
    ``U = exp(-i H eps)``, so that ``transition_matrix / eps`` converges to it.
    """
    psi = np.asarray(psi, dtype=complex)
    r = np.maximum(0.0, 2.0 * np.imag(psi.conj()[:, None] * h * psi[None, :]))
    r = r / (np.abs(psi) ** 2)[None, :]
    np.fill_diagonal(r, 0.0)
    return r


def master_flow_update(j: np.ndarray, p_src: np.ndarray, p: np.ndarray, p_floor: float) -> np.ndarray:
    """One master-equation step for ``p`` from a current ``j`` computed at ``p_src``."""
    # T[n, m] p[m] = max(0, J[n, m]) * (p[m] / p_src[m]); below the floor the ratio
    # is taken as one, otherwise rounding in p would be amplified by 1 / p_src
    flow = np.maximum(j, 0.0)
    np.fill_diagonal(flow, 0.0)
    live = p_src > p_floor
    w = np.ones_like(p)
    w[live] = p[live] / p_src[live]
    return p + flow @ w - w * flow.sum(axis=0)


def master_update(ctx: StepContext, p: np.ndarray, p_floor: float = P_FLOOR) -> np.ndarray:
    """Advance a full probability vector by one step of the master equation.

    Uses the transition probabilities of ``ctx``; for ``p = |psi_t|^2`` the
    result equals ``|psi_next|^2`` up to rounding.
    """
    p_src = np.abs(ctx.psi_t) ** 2
    return master_flow_update(current_matrix(ctx), p_src, np.asarray(p, dtype=float), p_floor)


def marginal_master_update(
    ctx: StepContext, space: ConfigurationSpace, p_bar: np.ndarray, p_floor: float = P_FLOOR
) -> np.ndarray:
    """Master equation on external configurations driven by the summed current."""
    p_src = space.split(np.abs(ctx.psi_t) ** 2).sum(axis=1)
    return master_flow_update(marginal_current(ctx, space), p_src, np.asarray(p_bar, dtype=float), p_floor)


def inconsistent_sources(ctx: StepContext, p_floor: float = P_FLOOR) -> np.ndarray:
    """Occupied sources (``P_m > p_floor``) whose jump column sums to more than one."""
    p = np.abs(ctx.psi_t) ** 2
    stay = 1.0 - transition_matrix(ctx, p_floor).sum(axis=0)
    return np.flatnonzero((p > p_floor) & (stay < -STAY_TOL))


def marginal_current(ctx: StepContext, space: ConfigurationSpace) -> np.ndarray:
    """Current between external configurations, summed over internal indices."""
    return space.config_indicator @ current_matrix(ctx) @ space.config_indicator.T


def marginal_inconsistent(
    ctx: StepContext, space: ConfigurationSpace, p_floor: float = P_FLOOR
) -> np.ndarray:
    p_bar = space.split(np.abs(ctx.psi_t) ** 2).sum(axis=1)
    live = p_bar > p_floor
    t = np.zeros((space.n_configs, space.n_configs))
    t[:, live] = np.maximum(marginal_current(ctx, space)[:, live], 0.0) / p_bar[live]
    np.fill_diagonal(t, 0.0)
    return np.flatnonzero(live & (1.0 - t.sum(axis=0) < -STAY_TOL))


def marginal_jump_distribution(
    ctx: StepContext, space: ConfigurationSpace, config: int, p_floor: float = P_FLOOR
) -> JumpDistribution:
    """Jump probabilities between external configurations only.

    The composite current is summed over the internal indices on both ends,
    which is the lattice version of guidance by the spin-averaged current.
    """
    block = space.config_major.reshape(space.n_configs, space.spin_dim)
    members = block[config]
    p_bar = float(np.sum(np.abs(ctx.psi_t[members]) ** 2))
    if p_bar <= p_floor:
        raise DegenerateSource(f"configuration {config} has probability <= {p_floor:g}")
    j = current_columns(ctx, members).sum(axis=1)
    j_bar = j[block].sum(axis=1)
    t = np.maximum(j_bar, 0.0) / p_bar
    t[config] = 0.0
    stay = 1.0 - float(t.sum())
    if stay < -STAY_TOL:
        raise ConsistencyViolation(config, 1.0 - stay)
    return JumpDistribution(int(config), t, max(stay, 0.0))


# -- sampling ---------------------------------------------------------------


def _draw(rng_state) -> float:
    if isinstance(rng_state, np.random.Generator):
        return float(rng_state.random())
    u = float(rng_state)
    if not 0.0 <= u < 1.0:
        raise ValueError(f"uniform variate out of [0, 1): {u!r}")
    return u


def sample_columns(columns: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw from each column (ascending target index), one uniform each."""
    cdf = np.cumsum(columns, axis=0)
    picks = (cdf <= uniforms[None, :]).sum(axis=0)
    n = columns.shape[0]
    over = picks >= n
    if np.any(over):
        # u beyond the rounded total: fall back to the last reachable target
        last = n - 1 - np.argmax(columns[::-1, :] > 0, axis=0)
        picks = np.where(over, last, picks)
    return picks


def sample_step(dist: JumpDistribution, rng_state) -> int:
    """Draw the next index; ``rng_state`` is a Generator or a uniform in [0, 1)."""
    u = _draw(rng_state)
    return int(sample_columns(dist.column()[:, None], np.array([u]))[0])


# -- adaptive step ----------------------------------------------------------


FrameBuilder = Callable[[np.ndarray, object], object]


class Interval:
    """One default time step that is bisected on demand.

    Level ``k`` uses the sub-step operator ``u_step^(1/2^k)``; sub-interval
    ``j`` at that level starts from the wave function after ``j`` such
    sub-steps. Contexts, roots and intermediate frames are built lazily and
    cached, so many trajectories can share one interval. ``jump`` replaces
    :func:`jump_distribution` (e.g. for guidance by a summed current).
    """

    def __init__(
        self,
        psi_t: np.ndarray,
        u_step: np.ndarray,
        eps: float,
        frame_t=None,
        frame_next=None,
        frame_builder: Optional[FrameBuilder] = None,
        max_halvings: int = MAX_HALVINGS,
        p_floor: float = P_FLOOR,
        jump: Optional[Callable[[StepContext, int], JumpDistribution]] = None,
    ):
        self.psi_t = np.asarray(psi_t, dtype=complex)
        self.eps = float(eps)
        self.frame_t = frame_t
        self.frame_next = frame_next
        self.frame_builder = frame_builder
        self.max_halvings = int(max_halvings)
        self.p_floor = p_floor
        self.jump = jump or (lambda ctx, m: jump_distribution(ctx, m, self.p_floor))
        self._roots = [np.asarray(u_step, dtype=complex)]
        self._psi = {(0, 0): self.psi_t}
        self._frames = {}
        self._contexts = {}
        self.n_bisections = 0

    def root(self, level: int) -> np.ndarray:
        while len(self._roots) <= level:
            self._roots.append(unitary_root(self._roots[-1], 2))
        return self._roots[level]

    def psi(self, level: int, j: int) -> np.ndarray:
        key = (level, j)
        if key not in self._psi:
            if j % 2 == 0:
                self._psi[key] = self.psi(level - 1, j // 2)
            else:
                self._psi[key] = self.root(level) @ self.psi(level, j - 1)
        return self._psi[key]

    def frame(self, level: int, j: int):
        if self.frame_t is None:
            return None
        if j == 0:
            return self.frame_t
        if j == 2**level:
            return self.frame_next
        g = math.gcd(j, 2**level)
        key = (level - g.bit_length() + 1, j // g)
        if key not in self._frames:
            if self.frame_builder is None:
                self._frames[key] = self.frame_t
            else:
                self._frames[key] = self.frame_builder(self.psi(level, j), self.frame_t)
        return self._frames[key]

    def context(self, level: int = 0, j: int = 0) -> StepContext:
        key = (level, j)
        if key not in self._contexts:
            u = self.root(level)
            eps = self.eps / 2**level
            start = self.psi(level, j)
            if self.frame_t is None:
                ctx = StepContext(start, u @ start, u, eps)
            else:
                ctx = transformed_step(
                    start, u, self.frame(level, j), self.frame(level, j + 1), eps=eps
                )
            self._contexts[key] = ctx
        return self._contexts[key]

    def leaves(self, inconsistent=None, level: int = 0, j: int = 0) -> list[tuple[int, int]]:
        """Sub-intervals on which no occupied source violates consistency.

        Unlike :meth:`advance`, the refinement is shared by every beable, so a
        whole ensemble moving through the leaves is transported exactly.
        ``inconsistent(ctx)`` returns the offending sources (default
        :func:`inconsistent_sources`).
        """
        check = inconsistent or (lambda ctx: inconsistent_sources(ctx, self.p_floor))
        bad = check(self.context(level, j))
        if len(bad) == 0:
            return [(level, j)]
        if level >= self.max_halvings:
            raise MaxHalvingsExceeded(
                f"state {int(bad[0])} still inconsistent after {self.max_halvings} halvings"
            )
        self.n_bisections += 1
        return self.leaves(check, level + 1, 2 * j) + self.leaves(check, level + 1, 2 * j + 1)

    def advance(self, m: int, draw: Callable[[], float], level: int = 0, j: int = 0):
        """Move a beable at ``m`` across sub-interval ``(level, j)``.

        Returns ``(new_index, finest_eps)``; ``draw`` supplies one uniform per
        accepted sub-step.
        """
        ctx = self.context(level, j)
        try:
            dist = self.jump(ctx, m)
        except ConsistencyViolation:
            if level >= self.max_halvings:
                raise MaxHalvingsExceeded(
                    f"state {m} still inconsistent after {self.max_halvings} halvings"
                ) from None
            self.n_bisections += 1
            m, e1 = self.advance(m, draw, level + 1, 2 * j)
            m, e2 = self.advance(m, draw, level + 1, 2 * j + 1)
            return m, min(e1, e2)
        return sample_step(dist, draw()), ctx.eps


def adapt_step(
    u_full: np.ndarray,
    m: int,
    psi_t: np.ndarray,
    eps_default: float,
    max_halvings: int = MAX_HALVINGS,
    p_floor: float = P_FLOOR,
) -> tuple[StepContext, float]:
    """First consistent sub-step for a beable at ``m``.

    Tries ``u_full`` at ``eps_default`` and keeps taking unitary square roots
    until the jump column of ``m`` passes the consistency check.
    """
    if not eps_default > 0:
        raise ValueError("eps_default must be positive")
    interval = Interval(psi_t, u_full, eps_default, max_halvings=max_halvings, p_floor=p_floor)
    for level in range(max_halvings + 1):
        ctx = interval.context(level, 0)
        try:
            jump_distribution(ctx, m, p_floor)
        except ConsistencyViolation:
            continue
        return ctx, ctx.eps
    raise MaxHalvingsExceeded(f"state {m} still inconsistent after {max_halvings} halvings")


# -- basis-changing steps ---------------------------------------------------


def _frame_matrix(frame, n: int) -> np.ndarray:
    if frame is None:
        return np.eye(n, dtype=complex)
    return frame.matrix()


def transformed_step(psi_t, u, v_t, v_next, eps: float = 1.0) -> StepContext:
    """Context expressed in configuration-dependent spin frames.

    ``v_t`` and ``v_next`` are basis frames (or ``None`` for the fixed basis)
    at the start and end of the step. The result carries the transformed
    wave functions and ``V_next U V_t^dagger`` so that :func:`jump_distribution`
    applies unchanged.
    """
    psi_t = np.asarray(psi_t, dtype=complex)
    u = np.asarray(u, dtype=complex)
    n = psi_t.shape[0]
    if u.shape != (n, n):
        raise ValueError(f"operator shape {u.shape} does not match state dimension {n}")
    w_t = _frame_matrix(v_t, n)
    w_next = _frame_matrix(v_next, n)
    if w_t.shape != (n, n) or w_next.shape != (n, n):
        raise ValueError("frame dimension does not match the state dimension")
    u_v = w_next @ u @ w_t.conj().T
    return StepContext(w_t @ psi_t, w_next @ (u @ psi_t), u_v, eps, v_t, v_next)


def check_context(ctx: StepContext, tol: float = 1e-10) -> bool:
    """``psi_next == u_step psi_t`` and unitarity, both to ``tol``."""
    ok = np.max(np.abs(ctx.u_step @ ctx.psi_t - ctx.psi_next)) < tol
    return bool(ok and is_unitary(ctx.u_step))
