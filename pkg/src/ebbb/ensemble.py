"""Ensembles of beable trajectories and their statistics.

The wave function, the spin frames and the per-step jump columns depend only
on time, so they are computed once per step and shared by every trajectory.
Trajectories are advanced together, one time step at a time; each one owns a
counter-based random stream keyed by ``(base_seed, k)``, which makes results
independent of chunking and worker count.
"""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import (
    P_FLOOR,
    BeableTrajectory,
    STAY_TOL,
    ConsistencyViolation,
    DegenerateSource,
    EngineError,
    Interval,
    TrajectoryStep,
    master_flow_update,
    current_matrix,
    jump_columns,
    marginal_current,
    marginal_jump_distribution,
)
from .models import ExperimentSpec
from .spin import BasisFrame, build_frame, identity_frame

THREADS_ENV = "EBBB_THREADS"


class TrajectoryError(EngineError):
    """An engine failure tagged with the trajectory and time step it happened in."""

    def __init__(self, trajectory: int, time_index: int, cause: Exception):
        super().__init__(f"trajectory {trajectory}, step {time_index}: {cause}")
        self.trajectory = trajectory
        self.time_index = time_index
        self.cause = cause


@dataclass(frozen=True)
class EnsembleConfig:
    n_trajectories: int = 1000
    base_seed: int = 0
    record_every: int = 1
    workers: Optional[int] = None

    def __post_init__(self):
        if int(self.n_trajectories) != self.n_trajectories or self.n_trajectories < 1:
            raise ValueError("n_trajectories must be a positive integer")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError("record_every must be a positive integer")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be positive")

    def n_workers(self) -> int:
        env = os.environ.get(THREADS_ENV)
        if env:
            return max(1, int(env))
        return self.workers or 1


def trajectory_rng(base_seed: int, k: int) -> np.random.Generator:
    """Private stream of trajectory ``k``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(base_seed, spawn_key=(k,))))


@dataclass
class EnsembleStats:
    spec: ExperimentSpec
    config: EnsembleConfig
    times: np.ndarray  # recorded times
    steps: np.ndarray  # grid step index of each record
    labels: tuple[str, ...]
    freq: np.ndarray  # (n_records, n_labels)
    se: np.ndarray
    exact: np.ndarray
    beables: np.ndarray  # (n_steps + 1, n_trajectories), every grid step
    frames: list  # BasisFrame or None per grid step
    fine_steps: dict = field(default_factory=dict)  # refined step -> finest eps used
    counters: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.beables.shape[1]

    def final(self, decoder: str) -> np.ndarray:
        return self.spec.decode(decoder, self.beables[-1])

    def angles(self, step: int, k: int):
        """Frame angles ``((theta, phi), ...)`` seen by trajectory ``k`` at a grid step."""
        frame = self.frames[step]
        if frame is None:
            return None
        config = self.spec.space.config_of(int(self.spec.composite_of(self.beables[step, k])))
        return frame.angles(int(config))

    def trajectory(self, k: int) -> BeableTrajectory:
        eps = np.concatenate([[0.0], [e for _, e in self.spec.step_operators()]])
        traj = BeableTrajectory()
        for t in range(self.beables.shape[0]):
            traj.append(
                TrajectoryStep(
                    t,
                    int(self.spec.composite_of(self.beables[t, k])),
                    self.angles(t, k),
                    float(self.fine_steps.get(t, eps[t])) if t else None,
                )
            )
        return traj


# -- driver -----------------------------------------------------------------


def _frame_builder(spec: ExperimentSpec):
    def build(psi, previous):
        return build_frame(psi, spec.space, previous=previous, fix_phi=spec.fix_phi)

    return build


def _frame_history(spec: ExperimentSpec, psis: list[np.ndarray]) -> list:
    if spec.frames == "none":
        return [None] * len(psis)
    first = build_frame(
        psis[0], spec.space, fix_phi=spec.fix_phi, fill=identity_frame(spec.space)
    )
    if spec.frames == "static":
        return [first] * len(psis)
    out = [first]
    build = _frame_builder(spec)
    for psi in psis[1:]:
        out.append(build(psi, out[-1]))
    return out


def _guidance(spec: ExperimentSpec):
    """``(law, jump, check)`` hooks for :class:`Interval`; all ``None`` for eBBB guidance."""
    if spec.guidance != "marginal":
        return None, None, None
    law = _MarginalLaw(spec.space)
    jump = lambda ctx, c: marginal_jump_distribution(ctx, spec.space, c)  # noqa: E731
    return law, jump, law.inconsistent


def _probabilities(spec: ExperimentSpec, psi, frame: Optional[BasisFrame]) -> np.ndarray:
    """Beable distribution: ``|psi^V|^2`` (summed over spin for marginal guidance)."""
    p = np.abs(psi if frame is None else frame.apply(psi)) ** 2
    if spec.guidance == "marginal":
        return spec.space.split(p).sum(axis=1)
    return p


def _label_histogram(codes: np.ndarray, weights, n_labels: int) -> np.ndarray:
    return np.bincount(codes, weights=weights, minlength=n_labels)


def _release(frame):
    if frame is not None:
        frame.__dict__.pop("_matrix", None)


def run_ensemble(spec: ExperimentSpec, cfg: EnsembleConfig = EnsembleConfig()) -> EnsembleStats:
    n = cfg.n_trajectories
    ops = list(spec.step_operators())
    n_steps = len(ops)

    psis = wavefunction_history(spec)
    frames = _frame_history(spec, psis)

    rngs = [trajectory_rng(cfg.base_seed, k) for k in range(n)]
    uniforms = np.stack([g.random(n_steps + 1) for g in rngs], axis=1)  # (steps+1, n)

    record = spec.decoders[spec.record]
    n_labels = len(record.names)
    rec_steps = sorted(set(range(0, n_steps + 1, cfg.record_every)) | {n_steps})
    rec_pos = {t: i for i, t in enumerate(rec_steps)}
    freq = np.zeros((len(rec_steps), n_labels))
    exact = np.zeros_like(freq)

    def record_step(t, beables, p):
        i = rec_pos[t]
        composite = spec.composite_of(beables)
        freq[i] = _label_histogram(record(composite), None, n_labels) / n
        if spec.guidance == "marginal":
            exact[i] = _label_histogram(record(spec.composite_of(np.arange(len(p)))), p, n_labels)
        else:
            exact[i] = _label_histogram(record.codes, p, n_labels)

    # initial positions from the distribution in the initial frame
    p0 = _probabilities(spec, psis[0], frames[0])
    cdf = np.cumsum(p0)
    beables = np.minimum(np.searchsorted(cdf, uniforms[0] * cdf[-1], side="right"), len(p0) - 1)
    history = np.empty((n_steps + 1, n), dtype=np.int32)
    history[0] = beables
    record_step(0, beables, p0)

    counters = {"refined_steps": 0, "bisections": 0, "min_eps": float("inf")}
    fine: dict = {}
    workers = cfg.n_workers()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    builder = _frame_builder(spec) if spec.frames == "dynamic" else None
    law, jump, check = _guidance(spec)

    try:
        for t, (u, eps) in enumerate(ops, start=1):
            interval = Interval(psis[t - 1], u, eps, frames[t - 1], frames[t], builder, jump=jump)
            try:
                leaves = interval.leaves(check)
            except EngineError as err:
                raise TrajectoryError(-1, t, err) from err
            for i, (level, j) in enumerate(leaves):
                # the first leaf uses the per-step uniform, refinements draw extras
                u_leaf = uniforms[t] if i == 0 else np.array([g.random() for g in rngs])
                ctx = interval.context(level, j)
                try:
                    beables = _sample_all(spec, law, interval, ctx, beables, u_leaf, pool, workers)
                except _SourceError as err:
                    raise TrajectoryError(err.trajectory, t, err.cause) from err.cause
            if len(leaves) > 1:
                e = min(interval.context(lv, j).eps for lv, j in leaves)
                fine[t] = e
                counters["refined_steps"] += 1
                counters["min_eps"] = min(counters["min_eps"], e)
            counters["bisections"] += interval.n_bisections
            history[t] = beables
            if t in rec_pos:
                record_step(t, beables, _probabilities(spec, psis[t], frames[t]))
            if frames[t - 1] is not frames[t]:
                _release(frames[t - 1])
    finally:
        if pool is not None:
            pool.shutdown()
    _release(frames[-1])
    if counters["min_eps"] == float("inf"):
        counters["min_eps"] = min((e for _, e in ops), default=None)

    times = spec.times()[rec_steps]
    se = np.sqrt(freq * (1 - freq) / n)
    return EnsembleStats(
        spec, cfg, times, np.array(rec_steps), record.names, freq, se, exact,
        history, frames, fine, counters,
    )


class _MarginalLaw:
    """Spin-summed guidance; memoises the configuration current of the last context."""

    def __init__(self, space, p_floor: float = P_FLOOR):
        self.space = space
        self.p_floor = p_floor
        self._ctx = None
        self._current = None

    def current(self, ctx) -> np.ndarray:
        # the consistency check and the sampling ask for the same context back to back
        if self._ctx is not ctx:
            self._ctx, self._current = ctx, marginal_current(ctx, self.space)
        return self._current

    def _transitions(self, ctx, sources):
        p_bar = self.space.split(np.abs(ctx.psi_t) ** 2).sum(axis=1)[sources]
        live = p_bar > self.p_floor
        t = np.zeros((self.space.n_configs, len(sources)))
        t[:, live] = np.maximum(self.current(ctx)[:, sources[live]], 0.0) / p_bar[live]
        t[sources, np.arange(len(sources))] = 0.0
        return t, live, 1.0 - t.sum(axis=0)

    def inconsistent(self, ctx) -> np.ndarray:
        _, live, stay = self._transitions(ctx, np.arange(self.space.n_configs))
        return np.flatnonzero(live & (stay < -STAY_TOL))

    def columns(self, ctx, sources) -> np.ndarray:
        """Columns of :func:`marginal_jump_distribution` for several configurations."""
        sources = np.asarray(sources)
        t, live, stay = self._transitions(ctx, sources)
        if not np.all(live):
            raise DegenerateSource(f"configuration {int(sources[np.argmin(live)])} is empty")
        if np.any(stay < -STAY_TOL):
            k = int(np.argmin(stay))
            raise ConsistencyViolation(int(sources[k]), 1.0 - float(stay[k]))
        t[sources, np.arange(len(sources))] = np.maximum(stay, 0.0)
        return t


class _SourceError(Exception):
    def __init__(self, trajectory: int, cause: Exception):
        self.trajectory = trajectory
        self.cause = cause


def _columns(spec, law, interval: Interval, ctx, sources):
    if law is not None:
        return law.columns(ctx, sources)
    cols, bad = jump_columns(ctx, sources, interval.p_floor)
    if np.any(bad):
        raise ConsistencyViolation(int(sources[np.argmax(bad)]), 1.0 - float(cols[:, bad].min()))
    return cols


def _sample_all(spec, law, interval: Interval, ctx, beables, uniforms, pool, workers):
    """Move every beable across one consistent (sub-)step."""
    sources, inverse = np.unique(beables, return_inverse=True)
    try:
        cols = _columns(spec, law, interval, ctx, sources)
    except EngineError as err:
        src = getattr(err, "source", None)
        if src is None:
            p = _probabilities(spec, ctx.psi_t, None)
            src = sources[np.argmin(p[sources])]
        raise _SourceError(int(np.argmax(beables == src)), err) from err
    cdf = np.cumsum(cols, axis=0)
    last = cols.shape[0] - 1 - np.argmax(cols[::-1] > 0, axis=0)

    def work(lo, hi):
        out = np.empty(hi - lo, dtype=np.int64)
        inv = inverse[lo:hi]
        u = uniforms[lo:hi]
        for g in np.unique(inv):
            sel = np.flatnonzero(inv == g)
            pick = np.searchsorted(cdf[:, g], u[sel], side="right")
            out[sel] = np.where(pick >= cdf.shape[0], last[g], pick)
        return out

    n = len(beables)
    if pool is None:
        return work(0, n)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return np.concatenate(list(pool.map(lambda b: work(*b), zip(bounds[:-1], bounds[1:]))))


# -- exact transport --------------------------------------------------------


@dataclass
class TransportReport:
    """Outcome of moving the exact distribution through the step schedule."""

    max_error: float  # max |P_master - |psi^V|^2| over all (sub-)steps
    violations: list  # (step, source, P_source, column_sum) at the default step size
    refined_steps: int
    min_eps: float
    frames_unitary: bool = True

    @property
    def first_violation(self) -> Optional[int]:
        return self.violations[0][0] if self.violations else None

    @property
    def violating_steps(self) -> int:
        return len({v[0] for v in self.violations})


def exact_transport(spec: ExperimentSpec) -> TransportReport:
    """Evolve the full beable distribution with the master equation, no sampling.

    Uses the same frames and interval refinement as :func:`run_ensemble`, and
    compares against ``|psi^V|^2`` after every accepted (sub-)step.
    """
    psis = wavefunction_history(spec)
    frames = _frame_history(spec, psis)
    builder = _frame_builder(spec) if spec.frames == "dynamic" else None
    law, jump, check = _guidance(spec)
    space = spec.space

    def current(ctx):
        if law is None:
            return current_matrix(ctx), np.abs(ctx.psi_t) ** 2, np.abs(ctx.psi_next) ** 2
        split = lambda v: space.split(np.abs(v) ** 2).sum(axis=1)  # noqa: E731
        return law.current(ctx), split(ctx.psi_t), split(ctx.psi_next)

    p = _probabilities(spec, psis[0], frames[0])
    err, violations, refined = 0.0, [], 0
    min_eps = float("inf")
    unitary = all(f is None or f.is_unitary() for f in frames)
    for t, (u, eps) in enumerate(spec.step_operators(), start=1):
        interval = Interval(psis[t - 1], u, eps, frames[t - 1], frames[t], builder, jump=jump)
        j, p_src, _ = current(interval.context())
        flow = np.maximum(j, 0.0)
        np.fill_diagonal(flow, 0.0)
        live = p_src > interval.p_floor
        sums = np.zeros_like(p_src)
        sums[live] = flow[:, live].sum(axis=0) / p_src[live]
        bad = np.flatnonzero(live & (1.0 - sums < -STAY_TOL))
        violations += [(t, int(m), float(p_src[m]), float(sums[m])) for m in bad]
        leaves = interval.leaves(check) if len(bad) else [(0, 0)]
        refined += len(leaves) > 1
        for level, i in leaves:
            ctx = interval.context(level, i)
            min_eps = min(min_eps, ctx.eps)
            j, p_src, target = current(ctx)
            p = master_flow_update(j, p_src, p, interval.p_floor)
            err = max(err, float(np.max(np.abs(p - target))))
        if frames[t - 1] is not frames[t]:
            _release(frames[t - 1])
    return TransportReport(err, violations, refined, min_eps, unitary)


# -- derived statistics -----------------------------------------------------


def _mean_se(values: np.ndarray) -> tuple[float, float, int]:
    n = len(values)
    if n == 0:
        warnings.warn("empty conditional bucket")
        return float("nan"), float("nan"), 0
    mean = float(np.mean(values))
    return mean, float(np.sqrt(max(0.0, 1 - mean**2) / n)), n


def spin_correlation(stats: EnsembleStats, pool_order: bool = False) -> dict:
    """``<sigma1 sigma2>`` at the final time, per realised pair of device angles.

    Spin values are read from the recorded locations. Keys are
    ``(phi1, phi2)`` labels; with ``pool_order`` the pairs ``(a, b)`` and
    ``(b, a)`` share one bucket keyed by the sorted pair. Values are
    ``(C, standard_error, count)``.
    """
    spec = stats.spec
    final = stats.beables[-1]
    s1 = spec.decoders["xsign1"].value(spec.composite_of(final))
    s2 = spec.decoders["xsign2"].value(spec.composite_of(final))
    a = spec.decode("phi1", final)
    b = spec.decode("phi2", final)
    names = spec.decoders["phi1"].names
    out = {}
    done = (s1 != 0) & (s2 != 0)
    for i in range(len(names)):
        for j in range(len(names)):
            if pool_order and j < i:
                continue
            sel = done & (a == i) & (b == j)
            if pool_order and i != j:
                sel |= done & (a == j) & (b == i)
            out[(names[i], names[j])] = _mean_se(s1[sel] * s2[sel])
    return out


def single_spin_mean(stats: EnsembleStats) -> dict:
    """``<sigma_i>`` at the final time per particle and realised device angle."""
    spec = stats.spec
    final = spec.composite_of(stats.beables[-1])
    out = {}
    for i in (1, 2):
        s = spec.decoders[f"xsign{i}"].value(final)
        a = spec.decoders[f"phi{i}"](final)
        for j, name in enumerate(spec.decoders[f"phi{i}"].names):
            sel = (a == j) & (s != 0)
            out[(i, name)] = _mean_se(s[sel])
    return out


def exact_spin_correlation(spec: ExperimentSpec, psi: np.ndarray) -> dict:
    """Correlation and single-spin means from a final wave function, per device pair."""
    p = np.abs(np.asarray(psi)) ** 2
    idx = np.arange(len(p))
    s1 = spec.decoders["xsign1"].value(idx)
    s2 = spec.decoders["xsign2"].value(idx)
    a, b = spec.decoders["phi1"](idx), spec.decoders["phi2"](idx)
    names = spec.decoders["phi1"].names
    out = {}
    for i in range(len(names)):
        for j in range(len(names)):
            sel = (a == i) & (b == j) & (s1 != 0) & (s2 != 0)
            w = p[sel].sum()
            out[(names[i], names[j])] = float((p[sel] * s1[sel] * s2[sel]).sum() / w) if w > 0 else float("nan")
    return out


def wavefunction_history(spec: ExperimentSpec) -> list[np.ndarray]:
    """Wave function at every grid time, from the per-step operators."""
    psis = [np.asarray(spec.initial_state, dtype=complex)]
    for u, _ in spec.step_operators():
        psis.append(u @ psis[-1])
    return psis


__all__ = [
    "EnsembleConfig",
    "EnsembleStats",
    "TrajectoryError",
    "run_ensemble",
    "spin_correlation",
    "single_spin_mean",
    "exact_spin_correlation",
    "wavefunction_history",
    "exact_transport",
    "TransportReport",
    "trajectory_rng",
    "P_FLOOR",
]
