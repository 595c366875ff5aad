"""Coupled Cahn-Hilliard / strain-gradient elasticity on a structured 2D grid.

The discrete model is built around a single discrete free energy so that every
derived quantity (chemical potential, nodal forces, reaction tractions) is an
exact derivative of it:

* chemistry lives on nodes, integrated with trapezoidal weights; the
  composition gradient term uses edge differences (compact 5-point Laplacian);
* the homogeneous mechanical energy is sampled at the four corners of every
  cell, each corner using the one-sided differences of its two adjacent cell
  edges (this removes hourglass modes); corner weights sum to the nodal
  trapezoidal weight, so ``c`` and the strain are co-located;
* the strain-gradient term uses ``e2`` at cell centres and differences across
  interior cell faces (natural higher-order boundary condition).
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .utils import make_rng

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)

# f = (F11, F12, F21, F22); each reparameterized strain is 0.5 f^T A f + const.
A_E1 = np.eye(4) / SQRT2
A_E2 = np.diag([1.0, -1.0, 1.0, -1.0]) / SQRT2
A_E3 = SQRT2 * 0.5 * np.array(
    [[0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 1.0, 0.0]]
)


class InvalidInputError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """Newton iteration for mechanical equilibrium did not converge."""

    def __init__(self, message, residual=float("nan"), frame=None):
        super().__init__(message)
        self.residual = residual
        self.frame = frame


class StepFailureError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaterialParams:
    d_c: float = 2.0
    d_e: float = 0.1
    s_e: float = 0.1
    kappa: float = 1e-6
    lambda_e: float = 1e-6
    mobility: float = 1.0
    l_e: float = 1.0

    def __post_init__(self):
        for name in ("d_c", "d_e", "s_e", "kappa", "lambda_e", "mobility", "l_e"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidInputError(f"{name} must be positive and finite, got {v}")

    @property
    def k2(self) -> float:
        """Quadratic strain coefficient 2 d_e / s_e^2."""
        return 2.0 * self.d_e / self.s_e**2

    @property
    def k4(self) -> float:
        """Quartic coefficient d_e / s_e^4."""
        return self.d_e / self.s_e**4


@dataclass(frozen=True)
class GridSpec:
    nx: int = 61
    ny: int = 61
    Lx: float = 0.01
    Ly: float = 0.01

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise InvalidInputError("grid needs at least 8 nodes per direction")
        if not (self.Lx > 0 and self.Ly > 0):
            raise InvalidInputError("domain lengths must be positive")

    @property
    def hx(self) -> float:
        return self.Lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.Ly / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def volume(self) -> float:
        return self.Lx * self.Ly

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Nodal coordinates (X, Y), each of shape (ny, nx)."""
        x = np.linspace(0.0, self.Lx, self.nx)
        y = np.linspace(0.0, self.Ly, self.ny)
        return np.meshgrid(x, y)

    def weights(self) -> np.ndarray:
        return _trapezoid_weights(self)


@functools.lru_cache(maxsize=16)
def _trapezoid_weights(grid: GridSpec) -> np.ndarray:
    wx = np.full(grid.nx, grid.hx)
    wx[[0, -1]] *= 0.5
    wy = np.full(grid.ny, grid.hy)
    wy[[0, -1]] *= 0.5
    w = np.outer(wy, wx)
    w.setflags(write=False)
    return w


@dataclass
class FieldState:
    """Nodal fields; ``u`` has shape (2, ny, nx) with u[0] = u_x, u[1] = u_y."""

    c: np.ndarray
    mu: np.ndarray
    u: np.ndarray
    step: int = 0
    time: float = 0.0

    def copy(self) -> "FieldState":
        return FieldState(self.c.copy(), self.mu.copy(), self.u.copy(), self.step, self.time)


@dataclass(frozen=True)
class BoundaryConditions:
    """Biaxial loading: normal displacement prescribed on each face, tangential free.

    Left face u_x = 0, right face u_x = u1, bottom face u_y = 0, top face u_y = u2.
    Chemical flux and higher-order traction vanish on the whole boundary.
    """

    u1: float = 0.0
    u2: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.u1) and math.isfinite(self.u2)):
            raise InvalidInputError("boundary displacements must be finite")

    def constraints(self, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
        mask = np.zeros((2, *grid.shape), dtype=bool)
        vals = np.zeros((2, *grid.shape))
        mask[0, :, 0] = True
        mask[0, :, -1] = True
        vals[0, :, -1] = self.u1
        mask[1, 0, :] = True
        mask[1, -1, :] = True
        vals[1, -1, :] = self.u2
        return mask, vals

    def affine_guess(self, grid: GridSpec) -> np.ndarray:
        X, Y = grid.coords()
        return np.stack([self.u1 * X / grid.Lx, self.u2 * Y / grid.Ly])


@dataclass(frozen=True)
class PrescribedBoundary:
    """Dirichlet data on an arbitrary set of displacement components."""

    mask: np.ndarray
    values: np.ndarray

    def constraints(self, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
        return self.mask, self.values


@dataclass(frozen=True)
class SimConfig:
    steps: int = 900
    discard: int = 50
    dt: float = 2e-9
    seed: int = 0
    c0_mean: float = 0.46
    c0_amplitude: float = 0.05
    newton_tol: float = 1e-6
    newton_max_iters: int = 60
    dt_backtrack_factor: float = 0.5
    max_backtracks: int = 12
    stabilization: float = 64.0
    u0_noise: float = 1e-4

    def __post_init__(self):
        if not (self.steps > self.discard >= 0):
            raise InvalidInputError("need steps > discard >= 0")
        if not self.dt > 0:
            raise InvalidInputError("dt must be positive")
        if not (self.newton_tol > 0 and self.newton_max_iters > 0):
            raise InvalidInputError("newton tolerances must be positive")
        if not 0 < self.dt_backtrack_factor < 1:
            raise InvalidInputError("dt_backtrack_factor must lie in (0, 1)")


# ---------------------------------------------------------------------------
# pointwise kinematics and energy densities


def green_lagrange(F) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        raise InvalidInputError("deformation gradient must be finite")
    Ft = np.swapaxes(F, -1, -2)
    E = 0.5 * (Ft @ F - np.eye(2))
    return 0.5 * (E + np.swapaxes(E, -1, -2))


def reparam_strains(E) -> tuple:
    E = np.asarray(E, dtype=float)
    if not np.all(np.isfinite(E)):
        raise InvalidInputError("strain must be finite")
    E11, E22, E12 = E[..., 0, 0], E[..., 1, 1], E[..., 0, 1]
    return (E11 + E22) / SQRT2, (E11 - E22) / SQRT2, SQRT2 * E12


def chemical_energy(c, params: MaterialParams):
    c = np.asarray(c, dtype=float)
    return 16.0 * params.d_c * c**2 * (c**2 - 2.0 * c + 1.0)


def chemical_energy_d1(c, params: MaterialParams):
    return params.d_c * (64.0 * c**3 - 96.0 * c**2 + 32.0 * c)


def mechanical_energy_density(c, e, params: MaterialParams):
    """Purely mechanical and mechanochemical part of the homogeneous energy."""
    e1, e2, e3 = e
    k2 = params.k2
    return k2 * (e1**2 + e3**2) + params.k4 * e2**4 + (1.0 - 2.0 * np.asarray(c)) * k2 * e2**2


def homogeneous_energy(c, e, params: MaterialParams):
    return chemical_energy(c, params) + mechanical_energy_density(c, e, params)


def gradient_energy(grad_c, grad_e2, params: MaterialParams):
    grad_c = np.asarray(grad_c, dtype=float)
    grad_e2 = np.asarray(grad_e2, dtype=float)
    return 0.5 * params.kappa * np.sum(grad_c**2, axis=-1) + 0.5 * params.lambda_e * np.sum(
        grad_e2**2, axis=-1
    )


def _strains_from_f(f):
    """Reparameterized strains for f = (..., 4) deformation-gradient vectors."""
    F11, F12, F21, F22 = f[..., 0], f[..., 1], f[..., 2], f[..., 3]
    E11 = 0.5 * (F11 * F11 + F21 * F21 - 1.0)
    E22 = 0.5 * (F12 * F12 + F22 * F22 - 1.0)
    E12 = 0.5 * (F11 * F12 + F21 * F22)
    return (E11 + E22) / SQRT2, (E11 - E22) / SQRT2, SQRT2 * E12


def mech_density_derivs(f, c, params: MaterialParams, hessian=True):
    """Mechanical density W(f, c), dW/df (the stress P in f-order) and d2W/df2."""
    e1, e2, e3 = _strains_from_f(f)
    k2, k4 = params.k2, params.k4
    chem = 1.0 - 2.0 * c
    W = k2 * (e1**2 + e3**2) + k4 * e2**4 + chem * k2 * e2**2
    w1 = 2.0 * k2 * e1
    w2 = 4.0 * k4 * e2**3 + 2.0 * chem * k2 * e2
    w3 = 2.0 * k2 * e3
    g1 = f @ A_E1
    g2 = f @ A_E2
    g3 = f @ A_E3
    P = w1[..., None] * g1 + w2[..., None] * g2 + w3[..., None] * g3
    if not hessian:
        return W, P, None
    w22 = 12.0 * k4 * e2**2 + 2.0 * chem * k2
    H = (
        w1[..., None, None] * A_E1
        + w2[..., None, None] * A_E2
        + w3[..., None, None] * A_E3
        + 2.0 * k2 * (g1[..., :, None] * g1[..., None, :] + g3[..., :, None] * g3[..., None, :])
        + w22[..., None, None] * (g2[..., :, None] * g2[..., None, :])
    )
    return W, P, H


# ---------------------------------------------------------------------------
# discrete operators


@dataclass(frozen=True)
class _Ops:
    grid: GridSpec
    corner_B: tuple  # four sparse (4*ncell, 2N) maps U -> f - I at cell corners
    corner_node: tuple  # node slices (rows, cols) of each corner
    center_B: sp.csr_matrix  # (4*ncell, 2N) map U -> cell-centre f - I
    K: sp.csr_matrix  # node Laplacian stiffness (N, N)
    Lc: sp.csr_matrix  # cell-lattice Laplacian stiffness (ncell, ncell), already area-weighted
    w: np.ndarray  # flat trapezoidal weights
    cell_area: float


def _diff_matrix(n: int, h: float) -> sp.csr_matrix:
    """(n-1, n) forward difference / h."""
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr") / h


def _avg_matrix(n: int) -> sp.csr_matrix:
    return sp.diags([0.5 * np.ones(n - 1), 0.5 * np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr")


def _select(n: int, lo: bool) -> sp.csr_matrix:
    """(n-1, n) picks the lower (or upper) node of each interval."""
    return sp.eye(n - 1, n, k=0 if lo else 1, format="csr")


def _interleave(comps: list[sp.spmatrix], ncell: int) -> sp.csr_matrix:
    """Stack four (ncell, 2N) operators into rows ordered cell*4 + comp."""
    stacked = sp.vstack(comps, format="csr")
    perm = np.arange(4 * ncell).reshape(4, ncell).T.ravel()
    return stacked[perm]


@functools.lru_cache(maxsize=8)
def discrete_ops(grid: GridSpec) -> _Ops:
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    N = grid.n_nodes
    ncell = (nx - 1) * (ny - 1)
    Dx, Dy = _diff_matrix(nx, hx), _diff_matrix(ny, hy)
    Sx_lo, Sx_hi = _select(nx, True), _select(nx, False)
    Sy_lo, Sy_hi = _select(ny, True), _select(ny, False)
    # node index = j*nx + i  ->  kron(row-op, col-op)
    dx_bottom = sp.kron(Sy_lo, Dx, format="csr")
    dx_top = sp.kron(Sy_hi, Dx, format="csr")
    dy_left = sp.kron(Dy, Sx_lo, format="csr")
    dy_right = sp.kron(Dy, Sx_hi, format="csr")
    Z = sp.csr_matrix((ncell, N))

    def fmap(dx, dy):
        # f - I = (dux/dx, dux/dy, duy/dx, duy/dy) with U = [ux; uy]
        return _interleave(
            [sp.hstack([dx, Z]), sp.hstack([dy, Z]), sp.hstack([Z, dx]), sp.hstack([Z, dy])], ncell
        )

    corners = (
        fmap(dx_bottom, dy_left),
        fmap(dx_bottom, dy_right),
        fmap(dx_top, dy_left),
        fmap(dx_top, dy_right),
    )
    corner_node = (
        (slice(0, ny - 1), slice(0, nx - 1)),
        (slice(0, ny - 1), slice(1, nx)),
        (slice(1, ny), slice(0, nx - 1)),
        (slice(1, ny), slice(1, nx)),
    )
    center = fmap(0.5 * (dx_bottom + dx_top), 0.5 * (dy_left + dy_right))

    w = _trapezoid_weights(grid)
    # composition gradient: trapezoid over the edge lattice
    wy_rows = np.full(ny, hy)
    wy_rows[[0, -1]] *= 0.5
    wx_cols = np.full(nx, hx)
    wx_cols[[0, -1]] *= 0.5
    Gx = sp.kron(sp.eye(ny), Dx, format="csr")
    Gy = sp.kron(Dy, sp.eye(nx), format="csr")
    wGx = np.kron(wy_rows, np.full(nx - 1, hx))
    wGy = np.kron(np.full(ny - 1, hy), wx_cols)
    K = (Gx.T @ sp.diags(wGx) @ Gx + Gy.T @ sp.diags(wGy) @ Gy).tocsr()

    # e2 gradient on the cell-centre lattice, interior faces only
    Cx = sp.kron(sp.eye(ny - 1), _diff_matrix(nx - 1, hx), format="csr")
    Cy = sp.kron(_diff_matrix(ny - 1, hy), sp.eye(nx - 1), format="csr")
    Lc = (hx * hy) * (Cx.T @ Cx + Cy.T @ Cy)
    return _Ops(grid, corners, corner_node, center, K, Lc.tocsr(), w.ravel(), hx * hy)


# ---------------------------------------------------------------------------
# discrete energies


def _flat_u(u: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(u).reshape(-1)


def corner_f(u: np.ndarray, grid: GridSpec) -> list[np.ndarray]:
    """Deformation gradients (ncell, 4) at the four corners of every cell."""
    ops = discrete_ops(grid)
    U = _flat_u(u)
    ident = np.array([1.0, 0.0, 0.0, 1.0])
    return [(B @ U).reshape(-1, 4) + ident for B in ops.corner_B]


def center_f(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    ops = discrete_ops(grid)
    return (ops.center_B @ _flat_u(u)).reshape(-1, 4) + np.array([1.0, 0.0, 0.0, 1.0])


def _corner_c(c: np.ndarray, ops: _Ops) -> list[np.ndarray]:
    return [c[rs, cs].ravel() for rs, cs in ops.corner_node]


def mechanical_energy_terms(c, u, grid, params, gradient_coef=None):
    """(homogeneous mechanical integral, strain-gradient integral)."""
    ops = discrete_ops(grid)
    qw = 0.25 * ops.cell_area
    total = 0.0
    for f, cc in zip(corner_f(u, grid), _corner_c(c, ops)):
        e = _strains_from_f(f)
        total += qw * float(np.sum(mechanical_energy_density(cc, e, params)))
    lam = params.lambda_e if gradient_coef is None else gradient_coef
    e2c = _strains_from_f(center_f(u, grid))[1]
    grad = 0.5 * lam * float(e2c @ (ops.Lc @ e2c))
    return total, grad


def chemical_energy_terms(c, grid, params):
    ops = discrete_ops(grid)
    cf = np.ravel(c)
    bulk = float(ops.w @ chemical_energy(cf, params))
    grad = 0.5 * params.kappa * float(cf @ (ops.K @ cf))
    return bulk, grad


def discrete_total_energy(c, u, grid: GridSpec, params: MaterialParams) -> float:
    """Discrete total free energy: the quantity the chemical step never increases."""
    b, g = chemical_energy_terms(c, grid, params)
    m, mg = mechanical_energy_terms(c, u, grid, params)
    return b + g + m + mg


def _mech_energy_grad_hess(c, U, grid, params, want_hess=True):
    """Energy, gradient and (optionally) Hessian of the mechanical energy in U at fixed c."""
    ops = discrete_ops(grid)
    qw = 0.25 * ops.cell_area
    ident = np.array([1.0, 0.0, 0.0, 1.0])
    ncell = ops.center_B.shape[0] // 4
    energy = 0.0
    grad = np.zeros_like(U)
    hess = None
    for B, cc in zip(ops.corner_B, _corner_c(c, ops)):
        f = (B @ U).reshape(-1, 4) + ident
        W, P, H = mech_density_derivs(f, cc, params, hessian=want_hess)
        energy += qw * float(W.sum())
        grad += B.T @ (qw * P).ravel()
        if want_hess:
            blocks = sp.bsr_matrix(
                (qw * H, np.arange(ncell), np.arange(ncell + 1)), shape=(4 * ncell, 4 * ncell)
            )
            term = (B.T @ blocks @ B).tocsr()
            hess = term if hess is None else hess + term
    lam = params.lambda_e
    fc = (ops.center_B @ U).reshape(-1, 4) + ident
    e2c = _strains_from_f(fc)[1]
    Le = ops.Lc @ e2c
    energy += 0.5 * lam * float(e2c @ Le)
    de2 = fc @ A_E2  # (ncell, 4)
    grad += ops.center_B.T @ (lam * Le[:, None] * de2).ravel()
    if want_hess:
        rows = np.repeat(np.arange(ncell), 4)
        cols = np.arange(4 * ncell)
        J = sp.csr_matrix((de2.ravel(), (rows, cols)), shape=(ncell, 4 * ncell)) @ ops.center_B
        second = sp.bsr_matrix(
            (lam * Le[:, None, None] * A_E2, np.arange(ncell), np.arange(ncell + 1)),
            shape=(4 * ncell, 4 * ncell),
        )
        hess = hess + lam * (J.T @ ops.Lc @ J) + ops.center_B.T @ second @ ops.center_B
        hess = hess.tocsr()
    return energy, grad, hess


def nodal_forces(state: FieldState, grid: GridSpec, params: MaterialParams) -> np.ndarray:
    """dPsi/du at every node, shape (2, ny, nx): internal forces / boundary reactions."""
    _, g, _ = _mech_energy_grad_hess(state.c, _flat_u(state.u), grid, params, want_hess=False)
    return g.reshape(2, *grid.shape)


# ---------------------------------------------------------------------------
# fields derived from the displacement


def nodal_strain(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Green-Lagrange strain per node, (ny, nx, 2, 2), averaged over the node's cell corners."""
    ops = discrete_ops(grid)
    ny, nx = grid.shape
    acc = np.zeros((ny, nx, 3))
    wts = np.zeros((ny, nx))
    for f, (rs, cs) in zip(corner_f(u, grid), ops.corner_node):
        F11, F12, F21, F22 = f.T
        comp = np.stack(
            [
                0.5 * (F11 * F11 + F21 * F21 - 1.0),
                0.5 * (F12 * F12 + F22 * F22 - 1.0),
                0.5 * (F11 * F12 + F21 * F22),
            ],
            axis=-1,
        ).reshape(ny - 1, nx - 1, 3)
        acc[rs, cs] += comp
        wts[rs, cs] += 1.0
    acc /= wts[..., None]
    E = np.empty((ny, nx, 2, 2))
    E[..., 0, 0] = acc[..., 0]
    E[..., 1, 1] = acc[..., 1]
    E[..., 0, 1] = E[..., 1, 0] = acc[..., 2]
    return E


def e2_field(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Nodal structural order parameter e2, shape (ny, nx)."""
    return reparam_strains(nodal_strain(u, grid))[1]


def _node_mech_c_derivative(u, grid, params):
    """d(mechanical energy)/dc_i divided by the nodal weight."""
    ops = discrete_ops(grid)
    qw = 0.25 * ops.cell_area
    ny, nx = grid.shape
    acc = np.zeros((ny, nx))
    for f, (rs, cs) in zip(corner_f(u, grid), ops.corner_node):
        e2 = _strains_from_f(f)[1]
        acc[rs, cs] += (qw * (-2.0) * params.k2 * e2**2).reshape(ny - 1, nx - 1)
    return acc / grid.weights()


def chemical_potential(state: FieldState, grid: GridSpec, params: MaterialParams) -> np.ndarray:
    ops = discrete_ops(grid)
    lap = (ops.K @ state.c.ravel()).reshape(grid.shape) / grid.weights()
    return chemical_energy_d1(state.c, params) + _node_mech_c_derivative(state.u, grid, params) + params.kappa * lap


def nodal_deformation_gradient(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    """F per node (ny, nx, 2, 2) from second-order central / one-sided differences."""
    gy_x, gx_x = np.gradient(u[0], grid.hy, grid.hx, edge_order=2)
    gy_y, gx_y = np.gradient(u[1], grid.hy, grid.hx, edge_order=2)
    F = np.empty((*grid.shape, 2, 2))
    F[..., 0, 0] = 1.0 + gx_x
    F[..., 0, 1] = gy_x
    F[..., 1, 0] = gx_y
    F[..., 1, 1] = 1.0 + gy_y
    return F


def stresses(state: FieldState, grid: GridSpec, params: MaterialParams):
    """Pointwise first Piola-Kirchhoff stress P (ny, nx, 2, 2) and higher-order stress B (ny, nx, 2, 2, 2)."""
    F = nodal_deformation_gradient(state.u, grid)
    f = F.reshape(*grid.shape, 4)
    _, P, _ = mech_density_derivs(f, state.c, params, hessian=False)
    e2 = _strains_from_f(f)[1]
    de2_dy, de2_dx = np.gradient(e2, grid.hy, grid.hx, edge_order=2)
    grad_e2 = np.stack([de2_dx, de2_dy], axis=-1)
    df_dy, df_dx = np.gradient(f, grid.hy, grid.hx, axis=(0, 1), edge_order=2)
    lam = params.lambda_e
    # dG/d(grad e2) . d(grad e2)/dF
    P = P + lam * (de2_dx[..., None] * (df_dx @ A_E2) + de2_dy[..., None] * (df_dy @ A_E2))
    de2_df = f @ A_E2
    B = lam * de2_df[..., :, None] * grad_e2[..., None, :]
    return P.reshape(*grid.shape, 2, 2), B.reshape(*grid.shape, 2, 2, 2)


# ---------------------------------------------------------------------------
# mechanical equilibrium


@dataclass
class NewtonLog:
    residuals: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    shifts: list = field(default_factory=list)
    converged: bool = False


def _negative_pivots(lu) -> int | None:
    if not (np.array_equal(lu.perm_r, lu.perm_c)):
        return None
    return int(np.count_nonzero(lu.U.diagonal() < 0))


def _factor_modified(H: sp.csr_matrix, scale: float, tau0: float = 0.0):
    """Factor H + tau*scale*I with a small tau making it positive definite."""
    n = H.shape[0]
    eye = sp.identity(n, format="csr")
    tau = tau0
    for _ in range(60):
        A = H + (tau * scale) * eye if tau > 0 else H
        try:
            lu = _splu_sym(A)
        except RuntimeError:
            lu = None
        # pivots only reveal inertia when no row interchange happened
        if lu is not None and _negative_pivots(lu) == 0:
            return lu, tau
        tau = 1e-5 if tau == 0 else tau * 3.0
    raise ConvergenceError("could not regularize Hessian")


def _splu_sym(A):
    return spla.splu(
        A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True}
    )


def _is_positive_definite(A) -> bool:
    try:
        lu = _splu_sym(A)
    except RuntimeError:
        return False
    neg = _negative_pivots(lu)
    return neg == 0


def _lowest_mode(Hff: sp.csr_matrix):
    n = Hff.shape[0]
    v0 = np.cos(0.7 * np.arange(n)) + 0.5  # fixed start vector keeps ARPACK deterministic
    lam, vec = spla.eigsh(Hff, k=1, which="SA", v0=v0, tol=1e-8)
    v = vec[:, 0]
    k = int(np.argmax(np.abs(v)))
    return float(lam[0]), v * np.sign(v[k])


def solve_mechanical_equilibrium(
    state: FieldState,
    bc,
    grid: GridSpec,
    params: MaterialParams,
    tol: float = 1e-6,
    max_iters: int = 60,
    log_out: NewtonLog | None = None,
    escape_saddles: bool = True,
    max_escapes: int = 8,
) -> np.ndarray:
    """Minimize the discrete energy over free displacement DOFs at frozen c.

    Newton's method with an inertia-corrected Hessian and Armijo backtracking on
    the energy. The residual is the nodal force divided by the nodal weight,
    i.e. a discrete P_iJ,J - B_iJK,JK, checked in the max norm.

    A converged point whose Hessian is indefinite is a saddle (e.g. e2 = 0 inside
    a c > 0.5 region); with ``escape_saddles`` the iterate is pushed along the
    lowest eigenmode and Newton resumes, so the result is a local minimum.
    """
    mask, vals = bc.constraints(grid)
    U = _flat_u(state.u).copy()
    fixed = mask.ravel()
    U[fixed] = vals.ravel()[fixed]
    free = ~fixed
    wts = np.tile(grid.weights().ravel(), 2)[free]
    h_min = min(grid.hx, grid.hy)
    c = state.c
    nlog = log_out if log_out is not None else NewtonLog()
    energy, g, H = _mech_energy_grad_hess(c, U, grid, params)
    escapes = 0
    it = 0
    while True:
        gf = g[free]
        res = float(np.max(np.abs(gf / wts))) if gf.size else 0.0
        nlog.residuals.append(res)
        nlog.energies.append(energy)
        Hff = H[free][:, free]
        scale = float(np.mean(np.abs(Hff.diagonal())))
        if res <= tol:
            if not escape_saddles or escapes >= max_escapes:
                break
            # a Newton step just taken with an unshifted factor already certifies a minimum
            if (nlog.shifts and nlog.shifts[-1] == 0.0 and it > 0) or _is_positive_definite(Hff):
                break
            lam, v = _lowest_mode(Hff)
            if lam >= -1e-6 * scale:
                break
            escapes += 1
            alpha = 0.05 * h_min / np.max(np.abs(v))
            for _ in range(40):
                trial = U.copy()
                trial[free] += alpha * v
                e_trial = _mech_energy_grad_hess(c, trial, grid, params, want_hess=False)[0]
                if e_trial < energy - 0.05 * abs(lam) * alpha**2:
                    break
                alpha *= 0.5
            else:
                break
            log.debug("saddle escape %d: lambda_min=%.3e", escapes, lam)
            U = trial
            energy, g, H = _mech_energy_grad_hess(c, U, grid, params)
            continue
        if it >= max_iters:
            raise ConvergenceError(
                f"Newton did not reach tol={tol:g}; last residual {res:.3e}", residual=res
            )
        it += 1
        prev = nlog.shifts[-1] if nlog.shifts else 0.0
        lu, tau = _factor_modified(Hff, scale, prev / 9.0 if prev > 1e-5 else 0.0)
        nlog.shifts.append(tau)
        d = -lu.solve(gf)
        slope = float(gf @ d)
        alpha = 1.0
        noise = 1e-13 * max(1.0, abs(energy)) + 1e-300
        for _ in range(50):
            trial = U.copy()
            trial[free] += alpha * d
            e_trial = _mech_energy_grad_hess(c, trial, grid, params, want_hess=False)[0]
            if e_trial <= energy + 1e-4 * alpha * slope or (alpha == 1.0 and e_trial - energy <= noise):
                break
            alpha *= 0.5
        else:
            raise ConvergenceError(f"line search failed; residual {res:.3e}", residual=res)
        U = trial
        energy, g, H = _mech_energy_grad_hess(c, U, grid, params)
    nlog.converged = True
    return U.reshape(state.u.shape)


# ---------------------------------------------------------------------------
# Cahn-Hilliard step


@functools.lru_cache(maxsize=8)
def _ch_factor(grid: GridSpec, params: MaterialParams, dt: float, stab: float):
    ops = discrete_ops(grid)
    W = sp.diags(ops.w)
    Winv = sp.diags(1.0 / ops.w)
    M = params.mobility
    A = W / dt + M * stab * ops.K + M * params.kappa * (ops.K @ Winv @ ops.K)
    return spla.splu(A.tocsc())


def _ch_substep(state, grid, params, dt, stab):
    ops = discrete_ops(grid)
    c = state.c.ravel()
    g_mech = _node_mech_c_derivative(state.u, grid, params).ravel()
    explicit = chemical_energy_d1(c, params) - stab * c + g_mech
    rhs = ops.w * c / dt - params.mobility * (ops.K @ explicit)
    c_new = _ch_factor(grid, params, float(dt), float(stab)).solve(rhs)
    return c_new.reshape(grid.shape)


def step_cahn_hilliard(
    state: FieldState,
    dt: float,
    grid: GridSpec,
    params: MaterialParams,
    stabilization: float = 64.0,
    backtrack: float = 0.5,
    max_backtracks: int = 12,
) -> FieldState:
    """Advance c by one stabilized semi-implicit step at frozen u.

    The step is rejected and retried with a smaller dt if the discrete total
    energy would grow by more than a relative 1e-10.
    """
    psi0 = discrete_total_energy(state.c, state.u, grid, params)
    h = dt
    for _ in range(max_backtracks + 1):
        c_new = _ch_substep(state, grid, params, h, stabilization)
        psi1 = discrete_total_energy(c_new, state.u, grid, params)
        if np.all(np.isfinite(c_new)) and psi1 <= psi0 + 1e-10 * abs(psi0):
            new = FieldState(c_new, state.mu, state.u.copy(), state.step + 1, state.time + h)
            new.mu = chemical_potential(new, grid, params)
            return new
        log.debug("energy increase %.3e at dt=%.3e, backtracking", psi1 - psi0, h)
        h *= backtrack
    raise StepFailureError(f"time step underflow after {max_backtracks} backtracks (dt={h:.3e})")


# ---------------------------------------------------------------------------
# full runs


def initial_state(config: SimConfig, bc, grid: GridSpec, params: MaterialParams) -> FieldState:
    rng = make_rng(config.seed)
    lo = config.c0_mean - config.c0_amplitude
    c = lo + 2.0 * config.c0_amplitude * rng.random(grid.shape)
    u = bc.affine_guess(grid)
    if config.u0_noise > 0:
        # e2 = 0 is a stationary point of the mechanics; a tiny seeded kick lets
        # Newton leave it once the square phase becomes unstable.
        mask, _ = bc.constraints(grid)
        kick = config.u0_noise * min(grid.hx, grid.hy) * rng.standard_normal(u.shape)
        u = u + np.where(mask, 0.0, kick)
    st = FieldState(c, np.zeros(grid.shape), u, step=0, time=0.0)
    st.mu = chemical_potential(st, grid, params)
    return st


def run_simulation(
    config: SimConfig,
    bc: BoundaryConditions,
    grid: GridSpec | None = None,
    params: MaterialParams | None = None,
    callback=None,
):
    """Generate ``config.steps`` frames; frame k (1-based) is equilibrated mechanics at c_k.

    Returns the list of frames unless ``callback`` is given, in which case each
    frame is passed to it as it is produced and nothing is accumulated.
    """
    grid = grid or GridSpec()
    params = params or MaterialParams()
    state = initial_state(config, bc, grid, params)
    frames = []
    for k in range(1, config.steps + 1):
        try:
            u = solve_mechanical_equilibrium(
                state, bc, grid, params, tol=config.newton_tol, max_iters=config.newton_max_iters
            )
        except ConvergenceError as exc:
            exc.frame = k
            raise
        state = FieldState(state.c, state.mu, u, step=k, time=state.time)
        state.mu = chemical_potential(state, grid, params)
        frame = state.copy()
        if callback is None:
            frames.append(frame)
        else:
            callback(frame)
        if k < config.steps:
            try:
                state = step_cahn_hilliard(
                    state,
                    config.dt,
                    grid,
                    params,
                    stabilization=config.stabilization,
                    backtrack=config.dt_backtrack_factor,
                    max_backtracks=config.max_backtracks,
                )
            except StepFailureError as exc:
                raise StepFailureError(f"frame {k}: {exc}") from exc
            state.step = k
    return frames if callback is None else None


def with_defaults(**overrides) -> SimConfig:
    return replace(SimConfig(), **overrides)
