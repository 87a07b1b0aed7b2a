"""Experiment builders: Larmor precession, the two-stage EPRB experiment and
the crossing-packet ("surreal trajectory") comparison.

Each builder returns an :class:`ExperimentSpec`: the configuration space, the
initial state, a schedule of stages with their per-step operators, and
decoders that turn composite indices into readable beable values.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import ConfigurationSpace
from .linalg import evolution_from_hamiltonian, is_unitary, tensor_product, unitary_root
from .spin import rotated_eigenvector, spin_operators

# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Stage:
    label: str
    unitary: np.ndarray  # full-stage evolution
    n_substeps: int
    substep: np.ndarray  # operator applied at every time step
    duration: float = 1.0

    @property
    def eps(self) -> float:
        return self.duration / self.n_substeps


@dataclass(frozen=True, eq=False)
class Decoder:
    """Lookup table from composite index to an integer code with printable names."""

    codes: np.ndarray
    names: tuple[str, ...]
    values: Optional[tuple[float, ...]] = None

    def __call__(self, indices):
        return self.codes[np.asarray(indices)]

    def value(self, indices):
        if self.values is None:
            raise ValueError("decoder has no numeric values")
        return np.asarray(self.values)[self.codes[np.asarray(indices)]]


@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    name: str
    space: ConfigurationSpace
    initial_state: np.ndarray
    schedule: tuple[Stage, ...]
    decoders: dict[str, Decoder]
    record: str  # decoder whose codes label the recorded probabilities
    frames: str = "none"  # none | static | dynamic
    fix_phi: bool = False
    guidance: str = "ebbb"  # ebbb | marginal
    params: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames not in ("none", "static", "dynamic"):
            raise ValueError(f"unknown frame mode {self.frames!r}")
        if self.guidance not in ("ebbb", "marginal"):
            raise ValueError(f"unknown guidance mode {self.guidance!r}")
        if self.record not in self.decoders:
            raise ValueError(f"record decoder {self.record!r} missing")

    @property
    def n_steps(self) -> int:
        return sum(st.n_substeps for st in self.schedule)

    def times(self) -> np.ndarray:
        t = [0.0]
        for st in self.schedule:
            t.extend(t[-1] + st.eps * np.arange(1, st.n_substeps + 1))
        return np.array(t)

    def step_operators(self):
        """``(substep, eps)`` for each time step of the whole schedule."""
        for st in self.schedule:
            for _ in range(st.n_substeps):
                yield st.substep, st.eps

    def composite_of(self, beables):
        """Composite index for beable indices (marginal beables live on configurations)."""
        beables = np.asarray(beables)
        if self.guidance == "marginal":
            return self.space.config_major[beables * self.space.spin_dim]
        return beables

    def decode(self, name: str, beables):
        return self.decoders[name](self.composite_of(beables))


def _steps(duration: float, eps: float) -> int:
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps!r}")
    return max(1, int(round(duration / eps)))


# -- Larmor precession ------------------------------------------------------


@dataclass(frozen=True)
class LarmorParams:
    s: float = 2.0
    mu1: float = 1.0
    mu2: float = 1.5
    theta1: float = np.pi / 2
    phi1: float = np.pi / 4
    theta2: float = np.pi / 4
    phi2: float = np.pi / 8
    m1: float = 2.0
    m2: float = -2.0
    coefficients: tuple[complex, complex] = (1.0, -2.0)
    eps: float = 0.02
    t_final: Optional[float] = None

    def __post_init__(self):
        spin_operators(self.s)  # validates 2s integer
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.t_final is not None and not self.t_final > 0:
            raise ValueError("t_final must be positive")

    @property
    def duration(self) -> float:
        if self.t_final is not None:
            return float(self.t_final)
        mu = abs(self.mu1) if self.mu1 else 1.0
        return 4 * np.pi / mu


def larmor_hamiltonian(p: LarmorParams) -> np.ndarray:
    ops = spin_operators(p.s)
    eye = np.eye(ops.dim)
    return -p.mu1 * np.kron(ops.sz, eye) - p.mu2 * np.kron(eye, ops.sz)


def larmor_initial_state(p: LarmorParams) -> np.ndarray:
    ops = spin_operators(p.s)
    a1 = rotated_eigenvector(ops, p.m1, p.theta1, p.phi1)
    a2 = rotated_eigenvector(ops, p.m2, p.theta1, p.phi1)
    b1 = rotated_eigenvector(ops, p.m2, p.theta2, p.phi2)
    b2 = rotated_eigenvector(ops, p.m1, p.theta2, p.phi2)
    c1, c2 = p.coefficients
    psi = c1 * np.kron(a1, b1) + c2 * np.kron(a2, b2)
    return psi / np.linalg.norm(psi)


def build_larmor(params: LarmorParams = LarmorParams()) -> ExperimentSpec:
    ops = spin_operators(params.s)
    d = ops.dim
    space = ConfigurationSpace(((1, d), (1, d)))
    h = larmor_hamiltonian(params)
    n = _steps(params.duration, params.eps)
    eps = params.duration / n
    stage = Stage(
        "larmor",
        evolution_from_hamiltonian(h, params.duration),
        n,
        evolution_from_hamiltonian(h, eps),
        params.duration,
    )
    mvals = ops.m_values
    idx = np.arange(space.total_dim)
    s1, s2 = idx // d, idx % d
    mnames = tuple(f"{m:+g}" for m in mvals)
    decoders = {
        "m1": Decoder(s1, mnames, tuple(mvals)),
        "m2": Decoder(s2, mnames, tuple(mvals)),
        "spins": Decoder(idx, tuple(f"m1={mvals[i]:+g} m2={mvals[j]:+g}" for i in range(d) for j in range(d))),
    }
    return ExperimentSpec(
        "larmor", space, larmor_initial_state(params), (stage,), decoders, "spins",
        frames="dynamic", params=params,
    )


# -- EPRB -------------------------------------------------------------------

PHI1 = ("phi0", "alpha", "beta")
X1 = ("x_r", "x_a")
PHI2 = ("alpha", "beta")
X2 = ("x_a", "x_alpha+", "x_alpha-", "x_beta+", "x_beta-")
SPIN = ("+", "-")


@dataclass(frozen=True)
class EprbParams:
    gamma_alpha_1: complex = math.sin(math.pi / 5)
    gamma_alpha_2: complex = math.sqrt(0.79)  # approximate value quoted for particle two
    alpha: float = math.pi / 5
    beta: float = 3 * math.pi / 5
    n_substeps: int = 50
    eps: float = 0.02

    def __post_init__(self):
        for name in ("gamma_alpha_1", "gamma_alpha_2"):
            g = getattr(self, name)
            if not abs(g) <= 1:
                raise ValueError(f"{name} must satisfy |gamma| <= 1, got {g!r}")
        if int(self.n_substeps) != self.n_substeps or self.n_substeps < 1:
            raise ValueError("n_substeps must be a positive integer")
        if abs(self.eps * self.n_substeps - 1.0) > 1e-9:
            raise ValueError("eps must equal 1 / n_substeps (stages have unit duration)")

    @classmethod
    def from_eps(cls, eps: float, **kw) -> "EprbParams":
        return cls(n_substeps=_steps(1.0, eps), eps=1.0 / _steps(1.0, eps), **kw)

    @staticmethod
    def gamma_beta(gamma_alpha: complex) -> float:
        return math.sqrt(max(0.0, 1.0 - abs(gamma_alpha) ** 2))


def spin_up(angle: float) -> np.ndarray:
    """``|angle+>`` in the (0+, 0-) basis."""
    return np.array([math.cos(angle / 2), math.sin(angle / 2)], dtype=complex)


def spin_down(angle: float) -> np.ndarray:
    """``|angle->`` in the (0+, 0-) basis."""
    return np.array([math.sin(angle / 2), -math.cos(angle / 2)], dtype=complex)


def eprb_stage1_factors(gamma_alpha: complex):
    """Magnet-angle, location and spin operators of the first stage."""
    ga = complex(gamma_alpha)
    gb = EprbParams.gamma_beta(ga)
    u_phi = np.array([[0, 0, 1], [ga, -np.conj(gb), 0], [gb, np.conj(ga), 0]], dtype=complex)
    u_x = np.array([[0, 1], [1, 0]], dtype=complex)
    return u_phi, u_x, np.eye(2, dtype=complex)


def eprb_stage1_unitary(gamma_alpha: complex) -> np.ndarray:
    return tensor_product(*eprb_stage1_factors(gamma_alpha))


def build_eprb_stage1(params: EprbParams = EprbParams(), particle: int = 1) -> ExperimentSpec:
    """Ready -> all-set stage for one particle on ``phi x x x spin`` (12 states)."""
    ga = params.gamma_alpha_1 if particle == 1 else params.gamma_alpha_2
    factors = eprb_stage1_factors(ga)
    n = int(params.n_substeps)
    # the magnet and location factors are rooted separately, as in the stage-one
    # Schroedinger equation; rooting the product would cross the branch cut
    sub = tensor_product(unitary_root(factors[0], n), unitary_root(factors[1], n), factors[2])
    space = ConfigurationSpace(((6, 2),))
    psi0 = np.zeros(12, dtype=complex)
    psi0[space.encode([0], [0])] = 1.0
    idx = np.arange(12)
    ext, spin = idx // 2, idx % 2
    phi, x = ext // 2, ext % 2
    decoders = {
        "phi": Decoder(phi, PHI1, (0.0, params.alpha, params.beta)),
        "x": Decoder(x, X1),
        "spin": Decoder(spin, SPIN, (0.5, -0.5)),
        "phi_x": Decoder(ext, tuple(f"{a},{b}" for a in PHI1 for b in X1)),
    }
    stage = Stage("stage1", tensor_product(*factors), n, sub, 1.0)
    return ExperimentSpec(
        "eprb-stage1", space, psi0, (stage,), decoders, "phi_x",
        frames="static", fix_phi=True, params=params, meta={"particle": particle},
    )


def eprb_stage2_single(alpha: float, beta: float) -> np.ndarray:
    """Final-stage operator for one particle on ``phi(2) x x(5) x spin(2)``."""
    def x_swap(k):
        u = np.eye(5, dtype=complex)
        u[[0, k]] = u[[k, 0]]
        return u

    proj = lambda v: np.outer(v, v.conj())  # noqa: E731
    p_phi = [np.diag([1.0, 0.0]).astype(complex), np.diag([0.0, 1.0]).astype(complex)]
    u = np.zeros((20, 20), dtype=complex)
    for i, ang in enumerate((alpha, beta)):
        u += tensor_product(p_phi[i], x_swap(1 + 2 * i), proj(spin_up(ang)))
        u += tensor_product(p_phi[i], x_swap(2 + 2 * i), proj(spin_down(ang)))
    return u


def eprb_allset_state(params: EprbParams = EprbParams()) -> np.ndarray:
    """Two-particle all-set state on the reduced 400-dimensional space."""
    def particle(ga, sigma):
        v = np.zeros(20, dtype=complex)
        v[(0 * 5 + 0) * 2 + sigma] = ga
        v[(1 * 5 + 0) * 2 + sigma] = EprbParams.gamma_beta(ga)
        return v

    g1, g2 = params.gamma_alpha_1, params.gamma_alpha_2
    psi = np.kron(particle(g1, 0), particle(g2, 1)) - np.kron(particle(g1, 1), particle(g2, 0))
    return psi / np.sqrt(2)


def eprb_ready_state() -> np.ndarray:
    """Spin singlet in the ready state on the two-particle stage-one space (144)."""
    up, dn = np.zeros(12, dtype=complex), np.zeros(12, dtype=complex)
    up[0], dn[1] = 1.0, 1.0
    return (np.kron(up, dn) - np.kron(dn, up)) / np.sqrt(2)


def stage1_to_stage2(psi144: np.ndarray) -> np.ndarray:
    """Restrict a two-particle stage-one state to the reduced stage-two space."""
    keep = []
    for phi in (1, 2):
        for sigma in (0, 1):
            keep.append(((phi * 2 + 1) * 2 + sigma, ((phi - 1) * 5 + 0) * 2 + sigma))
    a = np.asarray(psi144).reshape(12, 12)
    out = np.zeros((20, 20), dtype=complex)
    for i1, j1 in keep:
        for i2, j2 in keep:
            out[j1, j2] = a[i1, i2]
    return out.reshape(-1)


def build_eprb_stage2(
    params: EprbParams = EprbParams(), allset: Optional[np.ndarray] = None
) -> ExperimentSpec:
    """All-set -> measured stage for both particles (400 states)."""
    u1 = eprb_stage2_single(params.alpha, params.beta)
    n = int(params.n_substeps)
    r1 = unitary_root(u1, n)
    space = ConfigurationSpace(((10, 2), (10, 2)))
    psi0 = eprb_allset_state(params) if allset is None else np.asarray(allset, dtype=complex)
    if psi0.shape != (400,):
        raise ValueError("all-set state must live on the 400-dimensional stage-two space")
    stage = Stage("stage2", np.kron(u1, u1), n, np.kron(r1, r1), 1.0)

    idx = np.arange(400)
    p1, p2 = idx // 20, idx % 20
    angles = (params.alpha, params.beta)
    dec = {}
    for i, loc in ((1, p1), (2, p2)):
        ext, sp = loc // 2, loc % 2
        phi, x = ext // 5, ext % 5
        dec[f"phi{i}"] = Decoder(phi, PHI2, angles)
        dec[f"x{i}"] = Decoder(x, X2)
        dec[f"sigma{i}"] = Decoder(sp, SPIN, (1.0, -1.0))
        # spin sign read off the location: +1 / -1 in a measured state, 0 before
        dec[f"xsign{i}"] = Decoder(np.array([0, 1, 2, 1, 2])[x], ("none", "+", "-"), (0.0, 1.0, -1.0))
    dec["state"] = Decoder(
        idx,
        tuple(
            f"{PHI2[a]},{X2[b]},{SPIN[c]}|{PHI2[d]},{X2[e]},{SPIN[f]}"
            for a in range(2) for b in range(5) for c in range(2)
            for d in range(2) for e in range(5) for f in range(2)
        ),
    )
    return ExperimentSpec(
        "eprb-stage2", space, psi0, (stage,), dec, "state",
        frames="dynamic", fix_phi=True, params=params,
    )


# -- crossing packets -------------------------------------------------------


@dataclass(frozen=True)
class SurrealParams:
    lattice_size: int = 256
    width: float = 8.0
    x0: float = 48.0
    p: float = math.pi / 2
    mass: float = 1.0
    guidance_mode: str = "ebbb"
    eps: float = 0.1
    t_final: Optional[float] = None
    single_packet: bool = False

    def __post_init__(self):
        if self.lattice_size < 4 or self.lattice_size % 2:
            raise ValueError("lattice_size must be an even integer >= 4")
        if self.guidance_mode not in ("ebbb", "marginal"):
            raise ValueError("guidance_mode must be 'ebbb' or 'marginal'")
        if not (self.width > 0 and self.mass > 0 and self.eps > 0):
            raise ValueError("width, mass and eps must be positive")

    @property
    def velocity(self) -> float:
        return math.sin(self.p) / self.mass

    @property
    def duration(self) -> float:
        if self.t_final is not None:
            return float(self.t_final)
        return 2 * self.x0 / abs(self.velocity)


def lattice_positions(n: int) -> np.ndarray:
    """Site coordinates symmetric about the bond at x = 0."""
    return np.arange(n) - n / 2 + 0.5


def lattice_hamiltonian(n: int, mass: float) -> np.ndarray:
    hop = 1.0 / (2 * mass)
    h = np.eye(n) * (2 * hop)
    i = np.arange(n)
    h[i, (i + 1) % n] -= hop
    h[(i + 1) % n, i] -= hop
    return h.astype(complex)


def lattice_packet(x: np.ndarray, center: float, p: float, width: float) -> np.ndarray:
    psi = np.exp(-((x - center) ** 2) / (4 * width**2) + 1j * p * x)
    return psi / np.linalg.norm(psi)


def build_surreal(params: SurrealParams = SurrealParams()) -> ExperimentSpec:
    n = params.lattice_size
    x = lattice_positions(n)
    left = lattice_packet(x, -params.x0, params.p, params.width)
    right = lattice_packet(x, params.x0, -params.p, params.width)
    overlap = float(np.sum(np.abs(left) * np.abs(right)))
    if not params.single_packet and overlap > 1e-6:
        warnings.warn(f"wave packets overlap at t=0 (sum |psi1||psi2| = {overlap:.2e})")
    e1, e2 = np.array([1, 0], dtype=complex), np.array([0, 1], dtype=complex)
    if params.single_packet:
        psi0 = np.kron(left, e1)
    else:
        psi0 = (np.kron(left, e1) + np.kron(right, e2)) / np.sqrt(2)
    psi0 = psi0 / np.linalg.norm(psi0)
    h = np.kron(lattice_hamiltonian(n, params.mass), np.eye(2))
    steps = _steps(params.duration, params.eps)
    eps = params.duration / steps
    stage = Stage(
        "free", evolution_from_hamiltonian(h, params.duration), steps,
        evolution_from_hamiltonian(h, eps), params.duration,
    )
    idx = np.arange(2 * n)
    decoders = {
        "x": Decoder(idx // 2, tuple(f"{v:g}" for v in x), tuple(x)),
        "internal": Decoder(idx % 2, ("1", "2"), (1.0, 2.0)),
    }
    return ExperimentSpec(
        "surreal", ConfigurationSpace(((n, 2),)), psi0, (stage,), decoders, "x",
        frames="none", guidance=params.guidance_mode, params=params,
    )


def check_spec(spec: ExperimentSpec) -> list[str]:
    """Structural invariants of a built experiment; returns failure messages."""
    problems = []
    if abs(np.linalg.norm(spec.initial_state) - 1) > 1e-10:
        problems.append("initial state is not normalised")
    for st in spec.schedule:
        if not is_unitary(st.unitary):
            problems.append(f"stage {st.label}: full operator not unitary")
        if not is_unitary(st.substep):
            problems.append(f"stage {st.label}: sub-step operator not unitary")
        if st.n_substeps < 1:
            problems.append(f"stage {st.label}: n_substeps < 1")
        power = np.linalg.matrix_power(st.substep, st.n_substeps)
        if np.max(np.abs(power - st.unitary)) > 1e-8:
            problems.append(f"stage {st.label}: sub-step power does not reproduce the stage")
    return problems
