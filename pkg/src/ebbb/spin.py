"""Spin operators, rotated bases and the self-adjusting spin frame.

For each external configuration the spin part of the wave function is
normalised, approximated by a product of single-particle states, and each
factor is matched to the closest rotated ``S_z`` eigenvector. The Euler
angles of those matches define the spin basis in which beables take values.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .dynamics import P_FLOOR, ConfigurationSpace
from .linalg import tensor_product

POLE_TOL = 1e-9
DEGENERACY_TOL = 1e-9
GRID = 64


class DegenerateConfiguration(ValueError):
    """The spin block of a configuration carries (numerically) no weight."""


@dataclass(frozen=True, eq=False)
class SpinOperators:
    s: float
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray

    @property
    def dim(self) -> int:
        return self.sz.shape[0]

    @property
    def m_values(self) -> np.ndarray:
        """Level values ``s, s-1, ..., -s`` in basis order."""
        return np.real(np.diag(self.sz)).copy()

    def level_index(self, m: float) -> int:
        k = self.s - m
        if abs(k - round(k)) > 1e-9 or not 0 <= round(k) < self.dim:
            raise ValueError(f"m={m!r} is not a level of spin {self.s}")
        return int(round(k))

    @cached_property
    def _sy_eig(self):
        return np.linalg.eigh(self.sy)

    def y_rotation(self, theta: float) -> np.ndarray:
        """``exp(-i theta S_y)``."""
        w, v = self._sy_eig
        return (v * np.exp(-1j * w * theta)) @ v.conj().T

    def rotation(self, theta: float, phi: float) -> np.ndarray:
        """``exp(-i phi S_z) exp(-i theta S_y)``; columns are the rotated eigenvectors."""
        return np.exp(-1j * phi * self.m_values)[:, None] * self.y_rotation(theta)


@lru_cache(maxsize=None)
def _spin_operators(two_s: int) -> SpinOperators:
    s = two_s / 2
    m = s - np.arange(two_s + 1)
    # <m+1| S+ |m> sits just above the diagonal for descending m
    sp = np.diag(np.sqrt(s * (s + 1) - m[1:] * (m[1:] + 1)), k=1).astype(complex)
    sm = sp.conj().T
    ops = SpinOperators(s, (sp + sm) / 2, (sp - sm) / 2j, np.diag(m).astype(complex))
    for a in (ops.sx, ops.sy, ops.sz):
        a.setflags(write=False)
    return ops


def spin_operators(s: float) -> SpinOperators:
    two_s = 2 * s
    if two_s < 0 or abs(two_s - round(two_s)) > 1e-12:
        raise ValueError(f"spin must be a non-negative half-integer, got {s!r}")
    return _spin_operators(int(round(two_s)))


def spin_for_dim(dim: int) -> SpinOperators:
    return _spin_operators(int(dim) - 1)


def rotated_eigenvector(ops: SpinOperators, m: float, theta: float, phi: float) -> np.ndarray:
    return ops.rotation(theta, phi)[:, ops.level_index(m)]


def direction(theta: float, phi: float) -> np.ndarray:
    return np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])


# -- conditional states and factorisation -----------------------------------


@dataclass(frozen=True, eq=False)
class ConditionalSpinState:
    config: int
    amplitudes: np.ndarray  # shape internal_dims, unit norm


def _flat_config(space: ConfigurationSpace, x) -> int:
    if np.ndim(x) == 0:
        c = int(x)
    else:
        c = int(np.ravel_multi_index(tuple(int(v) for v in x), space.external_dims))
    if not 0 <= c < space.n_configs:
        raise IndexError(f"configuration {x!r} outside the space")
    return c


def conditional_spin_state(psi, space: ConfigurationSpace, x, p_floor: float = P_FLOOR):
    c = _flat_config(space, x)
    block = space.split(psi)[c]
    norm2 = float(np.vdot(block, block).real)
    if norm2 <= p_floor:
        raise DegenerateConfiguration(f"configuration {c} has spin weight {norm2:.3g}")
    return ConditionalSpinState(c, (block / np.sqrt(norm2)).reshape(space.internal_dims))


def _fix_phase(v: np.ndarray) -> np.ndarray:
    mag = np.abs(v)
    k = int(np.argmax(mag >= mag.max() - 1e-12))
    return v * (abs(v[k]) / v[k])


def _top_eigvec(rho: np.ndarray) -> tuple[np.ndarray, float]:
    w, q = np.linalg.eigh(rho)
    lam = float(w[-1])
    top = q[:, w >= lam - DEGENERACY_TOL]
    if top.shape[1] == 1:
        return top[:, 0], lam
    # degenerate: the member of the top eigenspace closest to the constant vector
    ones = np.ones(rho.shape[0]) / np.sqrt(rho.shape[0])
    v = top @ (top.conj().T @ ones)
    nv = np.linalg.norm(v)
    return (v / nv if nv > 1e-12 else top[:, -1]), lam


def factorize_two_spin(state) -> tuple[np.ndarray, np.ndarray, float]:
    """Best product approximation ``psi1 (x) psi2`` of a two-spin state.

    ``psi1`` is the top eigenvector of particle 1's reduced density matrix and
    ``psi2`` its partner ``A^T conj(psi1)``, so ``|<psi1 psi2|A>|^2 = lambda_max``.
    """
    a = np.asarray(getattr(state, "amplitudes", state))
    if a.ndim != 2:
        raise NotImplementedError("product factorisation is only available for two spins")
    f, lam = _top_eigvec(a @ a.conj().T)
    g = a.T @ f.conj()
    ng = np.linalg.norm(g)
    if ng < 1e-12:
        g, _ = _top_eigvec(a.T @ a.conj())
    else:
        g = g / ng
    return _fix_phase(f), _fix_phase(g), lam


# -- Euler-angle fit --------------------------------------------------------


def _overlaps(ops: SpinOperators, psi: np.ndarray, theta, phi) -> np.ndarray:
    """``<v^m_{theta phi}|psi>`` for all levels m (last axis)."""
    w, v = ops._sy_eig
    z = np.exp(1j * phi * ops.m_values) * psi
    return v @ (np.exp(1j * w * theta) * (v.conj().T @ z))


def _reflect(theta: float, phi: float) -> tuple[float, float]:
    theta = float(np.mod(theta, 2 * np.pi))
    if theta > np.pi:
        theta, phi = 2 * np.pi - theta, phi + np.pi
    return theta, float(np.mod(phi, 2 * np.pi))


def _gauge(theta, phi, fix_phi):
    theta, phi = _reflect(theta, 0.0 if fix_phi else phi)
    if theta < POLE_TOL:
        return 0.0, 0.0
    if theta > np.pi - POLE_TOL:
        return float(np.pi), 0.0
    if phi >= 2 * np.pi - 1e-12:
        phi = 0.0
    return theta, phi


def _canonical(theta, phi, m, fix_phi, reference):
    theta, phi = _gauge(theta, phi, fix_phi)
    cands = [(theta, phi, m)]
    pole = theta in (0.0, float(np.pi))
    if pole or not fix_phi:
        cands.append((*_gauge(np.pi - theta, phi + np.pi, fix_phi), -m))
    if len(cands) == 1:
        return cands[0]
    if reference is not None:
        n_ref = direction(*reference)
        dots = [float(direction(t, p) @ n_ref) for t, p, _ in cands]
        if abs(dots[0] - dots[1]) > 1e-9:
            return cands[int(np.argmax(dots))]

    def key(c):
        t, p, _ = c
        if abs(t - np.pi / 2) <= POLE_TOL:
            return (1, 0 if p < np.pi - 1e-12 else 1)
        return (0 if t < np.pi / 2 else 2, 0)

    return min(cands, key=key)


def _spin_half_fit(psi, fix_phi):
    a, b = psi
    if fix_phi:
        # |<v_theta|psi>|^2 = u^T M u with u on a half circle covering both levels
        mm = np.real(np.array([[abs(a) ** 2, np.conj(a) * b], [np.conj(b) * a, abs(b) ** 2]]))
        w, q = np.linalg.eigh(mm)
        ang = float(np.mod(np.arctan2(q[1, -1], q[0, -1]), np.pi))
        if ang > np.pi - 1e-12:
            ang = 0.0
        if ang <= np.pi / 2:
            return 2 * ang, 0.0, 0.5
        return 2 * (ang - np.pi / 2), 0.0, -0.5
    z = np.conj(a) * b
    nx, ny, nz = 2 * z.real, 2 * z.imag, abs(a) ** 2 - abs(b) ** 2
    return float(np.arctan2(np.hypot(nx, ny), nz)), float(np.arctan2(ny, nx)), 0.5


def _moment_directions(ops, psi):
    """Candidate axes from the spin expectation and the quadrupole tensor."""
    s = [ops.sx, ops.sy, ops.sz]
    mean = np.array([np.vdot(psi, a @ psi).real for a in s])
    q = np.array([[np.vdot(psi, (a @ b + b @ a) @ psi).real / 2 for b in s] for a in s])
    dirs = list(np.linalg.eigh(q)[1].T)
    if np.linalg.norm(mean) > 1e-9:
        dirs.append(mean / np.linalg.norm(mean))
    out = []
    for n in dirs:
        for sgn in (1, -1):
            x, y, z = sgn * n
            out.append((float(np.arctan2(np.hypot(x, y), z)), float(np.arctan2(y, x))))
    return out


def fit_euler(psi_single, ops: SpinOperators, fix_phi: bool = False, reference=None):
    """Euler angles and level of the rotated eigenvector closest to ``psi_single``.

    Maximises ``|<v^m_{theta phi}|psi>|`` (global phase does not matter).
    Returns ``(theta, phi, m, residual)`` with ``residual = 1 - |<v|psi>|^2``.
    The fit is two-fold ambiguous (``(pi - theta, phi + pi, -m)`` is the same
    vector); ``reference`` angles, if given, pick the nearer representative,
    otherwise the one with ``theta < pi/2`` (or ``phi < pi`` on the equator).
    With ``fix_phi`` only ``phi = 0`` is searched.
    """
    psi = np.asarray(psi_single, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    mvals = ops.m_values

    if ops.dim == 2:
        theta, phi, m = _spin_half_fit(psi, fix_phi)
    else:
        thetas = np.linspace(0, np.pi, GRID + 1)
        phis = [0.0] if fix_phi else np.linspace(0, 2 * np.pi, GRID, endpoint=False)
        w, v = ops._sy_eig
        z = np.exp(1j * np.outer(phis, mvals)) * psi  # (nphi, d)
        zw = z @ v.conj()  # (nphi, d) = (v^H z)^T
        rot = np.exp(1j * np.outer(thetas, w))  # (ntheta, d)
        ov = (rot[:, None, :] * zw[None, :, :]) @ v.T
        score = np.abs(ov) ** 2
        it, ip, k = np.unravel_index(np.argmax(score), score.shape)
        starts = [(thetas[it], phis[ip])]
        if not fix_phi:
            starts += _moment_directions(ops, psi)
        if reference is not None:
            starts.append((reference[0], 0.0 if fix_phi else reference[1]))

        best = None
        for t0, p0 in starts:
            p0 = 0.0 if fix_phi else p0
            sc = np.abs(_overlaps(ops, psi, t0, p0)) ** 2
            kk = int(np.argmax(sc))
            cand = (1.0 - sc[kk], t0, p0, kk)
            if best is None or cand[0] < best[0] - 1e-15:
                best = cand
        res, theta, phi, k = best
        if res > 1e-15:
            def loss(x):
                t, p = (x[0], 0.0) if fix_phi else x
                return 1.0 - abs(_overlaps(ops, psi, t, p)[k]) ** 2

            if fix_phi:
                h = np.pi / GRID
                r = minimize_scalar(
                    lambda t: loss([t]), bounds=(theta - h, theta + h), method="bounded",
                    options={"xatol": 1e-12},
                )
                if r.fun < res:
                    theta = float(r.x)
            else:
                r = minimize(
                    loss, [theta, phi], method="Nelder-Mead",
                    options={"xatol": 1e-12, "fatol": 1e-17, "maxiter": 4000,
                             "initial_simplex": [[theta, phi], [theta + 0.02, phi],
                                                 [theta, phi + 0.02]]},
                )
                if r.fun < res:
                    theta, phi = float(r.x[0]), float(r.x[1])
        m = float(mvals[k])

    theta, phi, m = _canonical(theta, phi, m, fix_phi, reference)
    overlap = _overlaps(ops, psi, theta, phi)[ops.level_index(m)]
    return theta, phi, m, float(max(0.0, 1.0 - abs(overlap) ** 2))


# -- basis frames -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BasisFrame:
    """Per-configuration, per-particle Euler angles and the induced spin unitaries.

    ``blocks[c]`` maps the spin amplitudes of configuration ``c`` to their
    components along the rotated eigenvectors, i.e. it is the tensor product
    of the inverse single-particle rotations.
    """

    space: ConfigurationSpace
    theta: np.ndarray  # (n_configs, n_particles)
    phi: np.ndarray
    level: np.ndarray  # best-fit level value per particle
    blocks: np.ndarray  # (n_configs, spin_dim, spin_dim)

    @classmethod
    def from_angles(cls, space, theta, phi, level=None) -> "BasisFrame":
        theta = np.asarray(theta, dtype=float).reshape(space.n_configs, space.n_particles)
        phi = np.asarray(phi, dtype=float).reshape(space.n_configs, space.n_particles)
        if level is None:
            level = np.full_like(theta, np.nan)
        ops = [spin_for_dim(d) for d in space.internal_dims]
        blocks = np.empty((space.n_configs, space.spin_dim, space.spin_dim), dtype=complex)
        for c in range(space.n_configs):
            blocks[c] = tensor_product(
                *[o.rotation(t, p).conj().T for o, t, p in zip(ops, theta[c], phi[c])]
            )
        return cls(space, theta, phi, np.asarray(level, dtype=float), blocks)

    def angles(self, config: int) -> tuple[tuple[float, float], ...]:
        return tuple((float(t), float(p)) for t, p in zip(self.theta[config], self.phi[config]))

    @cached_property
    def _matrix(self) -> np.ndarray:
        sp = self.space
        idx = sp.config_major.reshape(sp.n_configs, sp.spin_dim)
        w = np.zeros((sp.total_dim, sp.total_dim), dtype=complex)
        w[idx[:, :, None], idx[:, None, :]] = self.blocks
        return w

    def matrix(self) -> np.ndarray:
        """Full ``N x N`` transformation ``psi -> psi^V``."""
        return self._matrix

    def apply(self, psi) -> np.ndarray:
        blocks = self.space.split(psi)
        return self.space.merge(np.einsum("cij,cj->ci", self.blocks, blocks))

    def is_unitary(self, tol: float = 1e-10) -> bool:
        eye = np.eye(self.space.spin_dim)
        err = np.einsum("cji,cjk->cik", self.blocks.conj(), self.blocks) - eye
        return bool(np.max(np.abs(err)) < tol)


def identity_frame(space: ConfigurationSpace) -> BasisFrame:
    z = np.zeros((space.n_configs, space.n_particles))
    return BasisFrame.from_angles(space, z, z)


def build_frame(
    psi,
    space: ConfigurationSpace,
    previous: Optional[BasisFrame] = None,
    fix_phi: bool = False,
    fill: Optional[BasisFrame] = None,
    p_floor: float = P_FLOOR,
) -> BasisFrame:
    """Spin frame adapted to the wave function at every external configuration.

    Configurations without spin weight keep the angles of ``previous`` (or of
    ``fill`` when there is no previous frame); with neither available they
    raise :class:`DegenerateConfiguration`.
    """
    if space.n_particles > 2:
        raise NotImplementedError("spin frames are only supported for one or two particles")
    ops = [spin_for_dim(d) for d in space.internal_dims]
    npart = space.n_particles
    theta = np.zeros((space.n_configs, npart))
    phi = np.zeros((space.n_configs, npart))
    level = np.full((space.n_configs, npart), np.nan)
    blocks = space.split(psi)
    norms = np.sum(np.abs(blocks) ** 2, axis=1)
    for c in range(space.n_configs):
        if norms[c] <= p_floor:
            source = previous if previous is not None else fill
            if source is None:
                raise DegenerateConfiguration(f"configuration {c} has no spin weight")
            theta[c], phi[c], level[c] = source.theta[c], source.phi[c], source.level[c]
            continue
        amp = (blocks[c] / np.sqrt(norms[c])).reshape(space.internal_dims)
        factors = [amp] if npart == 1 else factorize_two_spin(amp)[:2]
        for i, (f, o) in enumerate(zip(factors, ops)):
            ref = None if previous is None else (previous.theta[c, i], previous.phi[c, i])
            t, p, m, _ = fit_euler(f, o, fix_phi=fix_phi, reference=ref)
            theta[c, i], phi[c, i], level[c, i] = t, p, m
    return BasisFrame.from_angles(space, theta, phi, level)
