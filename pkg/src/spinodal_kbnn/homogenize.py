"""Volume and boundary averages of a frame: F_avg, E_avg, P_avg and energies."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .phasefield import (
    FieldState,
    GridSpec,
    MaterialParams,
    center_f,
    chemical_energy_terms,
    discrete_total_energy,
    green_lagrange,
    mechanical_energy_terms,
    nodal_forces,
)

FACES = ("+X", "-X", "+Y", "-Y")

CSV_COLUMNS = (
    "run_id", "frame_id",
    "F11", "F12", "F21", "F22",
    "E11", "E12", "E22",
    "P11", "P12", "P21", "P22",
    "Psi_mech", "Psi_total",
)  # fmt: skip


@dataclass(frozen=True)
class HomogenizedRecord:
    """Averaged response of one frame.

    ``Psi_mech`` and ``Psi_total`` are stored per unit reference volume so that
    P_avg = F_avg dPsi_mech/dE_avg holds without a volume factor.
    """

    F_avg: np.ndarray
    E_avg: np.ndarray
    P_avg: np.ndarray
    Psi_mech: float
    Psi_total: float
    frame_id: int = 0
    run_id: str = ""
    face_mismatch: float = 0.0

    def row(self) -> dict:
        F, E, P = self.F_avg, self.E_avg, self.P_avg
        return {
            "run_id": self.run_id,
            "frame_id": self.frame_id,
            "F11": F[0, 0], "F12": F[0, 1], "F21": F[1, 0], "F22": F[1, 1],
            "E11": E[0, 0], "E12": E[0, 1], "E22": E[1, 1],
            "P11": P[0, 0], "P12": P[0, 1], "P21": P[1, 0], "P22": P[1, 1],
            "Psi_mech": self.Psi_mech,
            "Psi_total": self.Psi_total,
        }  # fmt: skip


def average_deformation_gradient(state: FieldState, grid: GridSpec) -> np.ndarray:
    """(1/V) integral of F, using the same corner quadrature as the energy.

    The cell average of the four corner gradients is the cell-centre gradient,
    and summing those telescopes to I + (1/V) * boundary integral of u (x) N.
    """
    f = center_f(state.u, grid).mean(axis=0)
    return f.reshape(2, 2)


def mechanical_free_energy(state: FieldState, grid: GridSpec, params: MaterialParams) -> float:
    """Integrated purely mechanical and mechanochemical energy (gradient term uses lambda_e l_e^2)."""
    bulk, grad = mechanical_energy_terms(
        state.c, state.u, grid, params, gradient_coef=params.lambda_e * params.l_e**2
    )
    return bulk + grad


def total_free_energy(state: FieldState, grid: GridSpec, params: MaterialParams) -> float:
    """Integrated chemical + mechanical + gradient energy; the quantity CH stepping never increases."""
    return discrete_total_energy(state.c, state.u, grid, params)


def chemical_free_energy(state: FieldState, grid: GridSpec, params: MaterialParams) -> float:
    return sum(chemical_energy_terms(state.c, grid, params))


def _face_nodes(grid: GridSpec, face: str):
    ny, nx = grid.shape
    if face == "+X":
        return (slice(None), nx - 1), np.array([1.0, 0.0]), grid.Ly
    if face == "-X":
        return (slice(None), 0), np.array([-1.0, 0.0]), grid.Ly
    if face == "+Y":
        return (ny - 1, slice(None)), np.array([0.0, 1.0]), grid.Lx
    if face == "-Y":
        return (0, slice(None)), np.array([0.0, -1.0]), grid.Lx
    raise ValueError(f"face must be one of {FACES}, got {face!r}")


def average_stress(
    state: FieldState, face: str, grid: GridSpec, params: MaterialParams, forces=None
) -> np.ndarray:
    """Face-averaged traction, reported as the stress column that face resolves.

    The traction integral is the sum of discrete reaction forces dPsi/du over
    the face nodes (corners included). Multiplying by the sign of the outward
    normal makes opposite faces report the same column P[:, J].
    """
    idx, normal, area = _face_nodes(grid, face)
    R = nodal_forces(state, grid, params) if forces is None else forces
    total = np.array([R[0][idx].sum(), R[1][idx].sum()])
    return total / area * normal.sum()


def boundary_average_stress(state: FieldState, grid: GridSpec, params: MaterialParams, forces=None):
    """(1/V) sum over boundary nodes of R (x) X.

    This is the derivative of the discrete mechanical energy with respect to an
    affine boundary displacement gradient, divided by volume.
    """
    R = nodal_forces(state, grid, params) if forces is None else forces
    X, Y = grid.coords()
    bnd = np.zeros(grid.shape, dtype=bool)
    bnd[[0, -1], :] = True
    bnd[:, [0, -1]] = True
    Rb = R[:, bnd]
    Xb = np.stack([X[bnd], Y[bnd]])
    return (Rb @ Xb.T) / grid.volume


def face_mismatch(state: FieldState, grid: GridSpec, params: MaterialParams, forces=None) -> float:
    """Relative disagreement of the normal stresses resolved on opposite faces."""
    R = nodal_forces(state, grid, params) if forces is None else forces
    px = average_stress(state, "+X", grid, params, R)[0], average_stress(state, "-X", grid, params, R)[0]
    py = average_stress(state, "+Y", grid, params, R)[1], average_stress(state, "-Y", grid, params, R)[1]
    scale = max(abs(px[0]), abs(py[0]), 1e-30)
    return max(abs(px[0] - px[1]), abs(py[0] - py[1])) / scale


def homogenize(
    state: FieldState,
    grid: GridSpec,
    params: MaterialParams,
    frame_id: int = 0,
    run_id: str = "",
) -> HomogenizedRecord:
    F = average_deformation_gradient(state, grid)
    E = green_lagrange(F)
    R = nodal_forces(state, grid, params)
    P = boundary_average_stress(state, grid, params, R)
    V = grid.volume
    return HomogenizedRecord(
        F_avg=F,
        E_avg=E,
        P_avg=P,
        Psi_mech=mechanical_free_energy(state, grid, params) / V,
        Psi_total=total_free_energy(state, grid, params) / V,
        frame_id=frame_id,
        run_id=run_id,
        face_mismatch=face_mismatch(state, grid, params, R),
    )


def record_to_dict(rec: HomogenizedRecord) -> dict:
    d = asdict(rec)
    for k in ("F_avg", "E_avg", "P_avg"):
        d[k] = np.asarray(d[k]).tolist()
    return d
