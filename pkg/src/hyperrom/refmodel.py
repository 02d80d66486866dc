"""Geometrically nonlinear 2D truss used as the full-order data source.

Each bar stores the Green-Lagrange strain energy ``0.5 * EA * L0 * eps**2`` with
``eps = (L**2 - L0**2) / (2 * L0**2)``.  Energy, internal force and tangent
stiffness are available in closed form, which is everything a commercial FE
package exports for a static analysis.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import DivergenceError, InputError, SingularConfigurationError

if TYPE_CHECKING:
    from .dataset import SnapshotSet

MIN_BAR_LENGTH = 1e-12
LOAD_LABELS = ("interpolation", "extrapolation-forward", "extrapolation-reverse")


@dataclass(frozen=True, eq=False)
class TrussGeometry:
    """Nodes [m], bars ``(node_a, node_b, EA [N])`` and fixed DOF indices.

    DOF ``2*i`` is the x-displacement of node ``i``, ``2*i + 1`` the y-displacement.
    """

    nodes: np.ndarray
    bars: np.ndarray
    rigidity: np.ndarray
    fixed_dofs: tuple[int, ...]
    free_dofs: np.ndarray = field(init=False, repr=False)
    rest_length_sq: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        bars = np.asarray(self.bars, dtype=int).reshape(-1, 2)
        rigidity = np.asarray(self.rigidity, dtype=float).reshape(-1)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise InputError("nodes must be an (N, 2) array")
        if len(bars) == 0 or len(rigidity) != len(bars):
            raise InputError("need at least one bar and one EA value per bar")
        if bars.min() < 0 or bars.max() >= len(nodes):
            raise InputError("bar references a nonexistent node")
        if np.any(rigidity <= 0):
            raise InputError("axial rigidity EA must be positive")
        n_dof = 2 * len(nodes)
        fixed = tuple(sorted({int(d) for d in self.fixed_dofs}))
        if fixed and (fixed[0] < 0 or fixed[-1] >= n_dof):
            raise InputError("fixed DOF index out of range")
        d0 = nodes[bars[:, 1]] - nodes[bars[:, 0]]
        l0_sq = np.einsum("ij,ij->i", d0, d0)
        if np.any(l0_sq <= MIN_BAR_LENGTH**2):
            raise InputError("every bar needs a positive rest length")
        free = np.setdiff1d(np.arange(n_dof), np.array(fixed, dtype=int))
        if free.size == 0:
            raise InputError("geometry has no free DOFs")
        for name, value in (("nodes", nodes), ("bars", bars), ("rigidity", rigidity),
                            ("fixed_dofs", fixed), ("free_dofs", free),
                            ("rest_length_sq", l0_sq)):
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return int(self.free_dofs.size)

    @property
    def rest_lengths(self) -> np.ndarray:
        return np.sqrt(self.rest_length_sq)

    def dof(self, node: int, direction: int) -> int:
        """Free-DOF index of ``node`` in ``direction`` (0 = x, 1 = y)."""
        full = 2 * node + direction
        pos = np.searchsorted(self.free_dofs, full)
        if pos >= self.free_dofs.size or self.free_dofs[pos] != full:
            raise InputError(f"DOF {direction} of node {node} is fixed")
        return int(pos)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.nodes, self.bars, self.rigidity, np.asarray(self.fixed_dofs)):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class FullState:
    x: np.ndarray
    e: float
    f: np.ndarray
    K: np.ndarray | None


@dataclass(frozen=True)
class NewtonSettings:
    tolerance: float = 1e-8
    max_iterations: int = 50

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise InputError("tolerance must be positive")


@dataclass(frozen=True, eq=False)
class LoadCase:
    """Spatial load distribution ``B`` (n x p) and an ordered list of magnitudes.

    ``lead_in`` magnitudes are solved for continuation but not recorded; this is
    how a case such as "F_max -> 2 F_max" starts from the converged F_max state.
    """

    name: str
    label: str
    input_matrix: np.ndarray
    magnitudes: np.ndarray
    lead_in: np.ndarray | None = None

    def __post_init__(self):
        B = np.asarray(self.input_matrix, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        mags = np.asarray(self.magnitudes, dtype=float)
        if mags.ndim == 1:
            mags = mags[:, None]
        if mags.shape[0] == 0:
            raise InputError("load case needs at least one magnitude")
        if mags.shape[1] != B.shape[1]:
            raise InputError(f"magnitudes have {mags.shape[1]} entries, B has {B.shape[1]} columns")
        if self.label not in LOAD_LABELS:
            raise InputError(f"unknown load label {self.label!r}")
        lead = np.zeros((0, B.shape[1])) if self.lead_in is None else np.asarray(self.lead_in, float)
        lead = lead.reshape(-1, B.shape[1])
        object.__setattr__(self, "input_matrix", B)
        object.__setattr__(self, "magnitudes", mags)
        object.__setattr__(self, "lead_in", lead)

    @property
    def p(self) -> int:
        return self.input_matrix.shape[1]


def _bar_kinematics(geometry: TrussGeometry, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    if x.shape != (geometry.n,):
        raise InputError(f"displacement must have length {geometry.n}, got {x.shape}")
    u = np.zeros(2 * len(geometry.nodes))
    u[geometry.free_dofs] = x
    u = u.reshape(-1, 2)
    a, b = geometry.bars[:, 0], geometry.bars[:, 1]
    d0 = geometry.nodes[b] - geometry.nodes[a]
    du = u[b] - u[a]
    d = d0 + du
    length_sq = np.einsum("ij,ij->i", d, d)
    if np.any(length_sq < MIN_BAR_LENGTH**2):
        bad = int(np.argmin(length_sq))
        raise SingularConfigurationError(f"bar {bad} collapsed to zero length")
    # written as a difference so that eps is exactly zero for du == 0
    eps = (2.0 * np.einsum("ij,ij->i", d0, du) + np.einsum("ij,ij->i", du, du)) / (
        2.0 * geometry.rest_length_sq)
    return d, eps


def _bar_dofs(geometry: TrussGeometry) -> np.ndarray:
    a, b = geometry.bars[:, 0], geometry.bars[:, 1]
    return np.stack([2 * a, 2 * a + 1, 2 * b, 2 * b + 1], axis=1)


def energy(geometry: TrussGeometry, x: np.ndarray) -> float:
    _, eps = _bar_kinematics(geometry, x)
    return float(np.sum(0.5 * geometry.rigidity * geometry.rest_lengths * eps**2))


def evaluate(geometry: TrussGeometry, x: np.ndarray, stiffness: bool = True) -> FullState:
    """Strain energy, internal force and tangent stiffness at displacement ``x``."""
    x = np.asarray(x, dtype=float)
    d, eps = _bar_kinematics(geometry, x)
    L0 = geometry.rest_lengths
    EA = geometry.rigidity
    e = float(np.sum(0.5 * EA * L0 * eps**2))

    # force on node b is s * d, on node a its negative
    s = EA * eps / L0
    fb = s[:, None] * d
    dofs = _bar_dofs(geometry)
    n_all = 2 * len(geometry.nodes)
    f_all = np.zeros(n_all)
    np.add.at(f_all, dofs, np.concatenate([-fb, fb], axis=1))
    f = f_all[geometry.free_dofs]

    K = None
    if stiffness:
        k = s[:, None, None] * np.eye(2) + (EA / L0**3)[:, None, None] * (d[:, :, None] * d[:, None, :])
        blocks = np.block([[k, -k], [-k, k]])
        K_all = np.zeros((n_all, n_all))
        np.add.at(K_all, (dofs[:, :, None], dofs[:, None, :]), blocks)
        K = K_all[np.ix_(geometry.free_dofs, geometry.free_dofs)]
    return FullState(x=x.copy(), e=e, f=f, K=K)


def _newton(geometry, target, x, settings, step, record_iterations=None):
    tol = settings.tolerance * (1.0 + np.linalg.norm(target))
    for it in range(settings.max_iterations + 1):
        state = evaluate(geometry, x)
        residual = target - state.f
        res_norm = float(np.linalg.norm(residual))
        if not np.isfinite(res_norm):
            raise DivergenceError("non-finite residual", step, res_norm)
        if res_norm <= tol:
            if record_iterations is not None:
                record_iterations.append(it)
            return state
        if it == settings.max_iterations:
            break
        try:
            x = x + np.linalg.solve(state.K, residual)
        except np.linalg.LinAlgError:
            raise DivergenceError("singular tangent stiffness", step, res_norm) from None
    raise DivergenceError(f"no convergence in {settings.max_iterations} iterations", step, res_norm)


def solve_full(geometry: TrussGeometry, load: LoadCase,
               settings: NewtonSettings = NewtonSettings()) -> "SnapshotSet":
    """Newton-Raphson continuation over the load magnitudes of ``load``."""
    from .dataset import SnapshotSet

    B = load.input_matrix
    if B.shape[0] != geometry.n:
        raise InputError(f"input matrix has {B.shape[0]} rows, geometry has n={geometry.n}")
    x = np.zeros(geometry.n)
    for k, u in enumerate(load.lead_in):
        x = _newton(geometry, B @ u, x, settings, step=-(len(load.lead_in) - k)).x
    states, iterations = [], []
    for k, u in enumerate(load.magnitudes):
        state = _newton(geometry, B @ u, x, settings, step=k, record_iterations=iterations)
        states.append(state)
        x = state.x
    return SnapshotSet.from_states(
        states, load.magnitudes, name=load.name, case_label=load.label,
        provenance={"geometry": geometry.digest(), "tolerance": settings.tolerance,
                    "max_iterations": settings.max_iterations, "iterations": iterations})


# --- default cantilever lattice -------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    bays: int = 16
    rows: int = 3
    bay_length: float = 0.1
    row_height: float = 0.1
    axial_rigidity: float = 1.0e6
    brace_rigidity: float | None = None

    @property
    def span(self) -> float:
        return self.bays * self.bay_length

    def node(self, column: int, row: int) -> int:
        return column * self.rows + row

    @property
    def tip_node(self) -> int:
        return self.node(self.bays, self.rows // 2)


def cantilever_lattice(spec: Lattice = Lattice()) -> TrussGeometry:
    """Cross-braced lattice clamped at ``x = 0`` (all nodes of the first column fixed)."""
    if spec.bays < 1 or spec.rows < 2:
        raise InputError("lattice needs >= 1 bay and >= 2 rows")
    brace = spec.axial_rigidity if spec.brace_rigidity is None else spec.brace_rigidity
    nodes = [(c * spec.bay_length, j * spec.row_height)
             for c in range(spec.bays + 1) for j in range(spec.rows)]
    bars, ea = [], []
    for c in range(spec.bays + 1):
        for j in range(spec.rows):
            if c < spec.bays:
                bars.append((spec.node(c, j), spec.node(c + 1, j)))
                ea.append(spec.axial_rigidity)
            if j < spec.rows - 1 and c > 0:
                bars.append((spec.node(c, j), spec.node(c, j + 1)))
                ea.append(spec.axial_rigidity)
            if c < spec.bays and j < spec.rows - 1:
                bars.append((spec.node(c, j), spec.node(c + 1, j + 1)))
                bars.append((spec.node(c, j + 1), spec.node(c + 1, j)))
                ea.extend([brace, brace])
    fixed = [2 * spec.node(0, j) + k for j in range(spec.rows) for k in (0, 1)]
    return TrussGeometry(np.array(nodes), np.array(bars), np.array(ea), tuple(fixed))


def point_load_matrix(geometry: TrussGeometry, node: int, direction: Sequence[float] = (0.0, 1.0)):
    """n x 1 input matrix for a unit point load at ``node``."""
    B = np.zeros((geometry.n, 1))
    for k, comp in enumerate(direction):
        if comp != 0.0:
            B[geometry.dof(node, k), 0] = comp
    return B


def output_row(geometry: TrussGeometry, node: int, direction: int = 1) -> np.ndarray:
    row = np.zeros(geometry.n)
    row[geometry.dof(node, direction)] = 1.0
    return row


def ramp_load_cases(B: np.ndarray, max_load: float, steps: int = 100) -> list[LoadCase]:
    """The four cases: 0 -> F, F -> 2F, 0 -> -F, -F -> -2F, each in ``steps`` increments.

    Only the first records the rest state, so a full set has ``4 * steps + 1`` samples.
    """
    if steps < 1:
        raise InputError("steps must be >= 1")
    inc = max_load / steps
    up = inc * np.arange(1, steps + 1)
    return [
        LoadCase("interpolation", "interpolation", B, np.concatenate([[0.0], up])),
        LoadCase("forward", "extrapolation-forward", B, max_load + up, lead_in=up),
        LoadCase("reverse", "extrapolation-reverse", B, -up),
        LoadCase("reverse-far", "extrapolation-reverse", B, -(max_load + up), lead_in=-up),
    ]


def calibrate_max_load(geometry: TrussGeometry, B: np.ndarray, out_row: np.ndarray,
                       target: float, settings: NewtonSettings = NewtonSettings(),
                       steps: int = 20) -> float:
    """Load magnitude whose nonlinear response puts ``out_row @ x`` at ``target``.

    The result is rounded to three significant digits.
    """
    K0 = evaluate(geometry, np.zeros(geometry.n)).K
    linear = float(out_row @ np.linalg.solve(K0, B[:, 0]))
    if linear * target <= 0:
        raise InputError("output does not respond in the direction of the target")
    f_lin = target / linear

    def response(load):
        case = LoadCase("calib", "interpolation", B, np.linspace(load / steps, load, steps))
        return float(out_row @ solve_full(geometry, case, settings).x[-1]) - target

    hi = 2.0 * f_lin
    while response(hi) < 0:
        hi *= 2.0
    load = brentq(response, 0.5 * f_lin, hi, xtol=1e-8 * f_lin, rtol=1e-10)
    return float(f"{load:.3g}")
