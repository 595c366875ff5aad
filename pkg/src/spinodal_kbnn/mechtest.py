"""Small affine perturbation tests on frozen microstructures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .homogenize import homogenize
from .phasefield import (
    ConvergenceError,
    _is_positive_definite,
    _mech_energy_grad_hess,
    _splu_sym,
    FieldState,
    GridSpec,
    MaterialParams,
    PrescribedBoundary,
    e2_field,
    make_rng,
    solve_mechanical_equilibrium,
)

DE_NORMAL_RANGE = 5e-5
DE_SHEAR_RANGE = 3e-4

CSV_COLUMNS = (
    "microstructure_id", "test_id",
    "E11", "E12", "E22",
    "F11", "F12", "F21", "F22",
    "P11", "P12", "P21", "P22",
    "Psi_mech", "Psi_mech_0",
)  # fmt: skip


@dataclass(frozen=True)
class PerturbationSpec:
    """Boundary displacement increments on top of the frame's own boundary data.

    ``delta_u1``/``delta_u2`` stretch the x/y extent, ``delta_shear`` slides the
    top face relative to the bottom one.
    """

    delta_u1: float = 0.0
    delta_u2: float = 0.0
    delta_shear: float = 0.0
    seed: int | None = None

    def increment_gradient(self, grid: GridSpec) -> np.ndarray:
        return np.array(
            [[self.delta_u1 / grid.Lx, self.delta_shear / grid.Ly], [0.0, self.delta_u2 / grid.Ly]]
        )

    def target_strain(self, grid: GridSpec) -> tuple[float, float, float]:
        """Small-strain estimate (dE11, dE22, dE12) of the increment."""
        H = self.increment_gradient(grid)
        return H[0, 0], H[1, 1], 0.5 * H[0, 1]


@dataclass(frozen=True)
class MechTestRecord:
    microstructure_id: str
    test_id: int
    E_avg: np.ndarray
    F_avg: np.ndarray
    P_avg: np.ndarray
    Psi_mech: float
    Psi_mech_0: float

    @property
    def delta_psi(self) -> float:
        return self.Psi_mech - self.Psi_mech_0

    def row(self) -> dict:
        E, F, P = self.E_avg, self.F_avg, self.P_avg
        return {
            "microstructure_id": self.microstructure_id,
            "test_id": self.test_id,
            "E11": E[0, 0], "E12": E[0, 1], "E22": E[1, 1],
            "F11": F[0, 0], "F12": F[0, 1], "F21": F[1, 0], "F22": F[1, 1],
            "P11": P[0, 0], "P12": P[0, 1], "P21": P[1, 0], "P22": P[1, 1],
            "Psi_mech": self.Psi_mech,
            "Psi_mech_0": self.Psi_mech_0,
        }  # fmt: skip


class MechTestError(RuntimeError):
    def __init__(self, message, spec=None, residual=float("nan")):
        super().__init__(message)
        self.spec = spec
        self.residual = residual


def sample_loadings(
    n: int,
    seed: int,
    grid: GridSpec | None = None,
    normal_range: float = DE_NORMAL_RANGE,
    shear_range: float = DE_SHEAR_RANGE,
) -> list[PerturbationSpec]:
    """Uniform random biaxial + shear increments whose small-strain targets lie in range."""
    if n < 1:
        raise ValueError("n must be at least 1")
    grid = grid or GridSpec()
    rng = make_rng(seed)
    d = rng.uniform(-1.0, 1.0, size=(n, 3)) * np.array([normal_range, normal_range, shear_range])
    return [
        PerturbationSpec(
            delta_u1=float(a * grid.Lx), delta_u2=float(b * grid.Ly), delta_shear=float(2.0 * s * grid.Ly), seed=seed
        )
        for a, b, s in d
    ]


def perturbed_boundary(frame: FieldState, spec: PerturbationSpec, grid: GridSpec) -> PrescribedBoundary:
    """Every boundary node keeps its frame displacement plus dH . X."""
    X, Y = grid.coords()
    H = spec.increment_gradient(grid)
    mask = np.zeros((2, *grid.shape), dtype=bool)
    mask[:, [0, -1], :] = True
    mask[:, :, [0, -1]] = True
    vals = frame.u + np.stack([H[0, 0] * X + H[0, 1] * Y, H[1, 0] * X + H[1, 1] * Y])
    return PrescribedBoundary(mask, np.where(mask, vals, 0.0))


class FrozenFrameTester:
    """Runs many perturbation tests on one frame.

    All tests share the interior Hessian of the base state; each test first
    tries chord iterations with that single factorization and falls back to
    full Newton if they stall.
    """

    def __init__(self, frame: FieldState, grid: GridSpec, params: MaterialParams, microstructure_id: str = ""):
        self.frame = frame
        self.grid = grid
        self.params = params
        self.microstructure_id = microstructure_id
        self.base = homogenize(frame, grid, params)
        mask = np.zeros((2, *grid.shape), dtype=bool)
        mask[:, [0, -1], :] = True
        mask[:, :, [0, -1]] = True
        self._free = ~mask.ravel()
        self._wts = np.tile(grid.weights().ravel(), 2)[self._free]
        _, _, H = _mech_energy_grad_hess(frame.c, frame.u.ravel(), grid, params)
        Hff = H[self._free][:, self._free]
        self._lu = _splu_sym(Hff) if _is_positive_definite(Hff) else None

    def _chord(self, u0, tol, iters=30):
        if self._lu is None:
            return None
        U = u0.ravel().copy()
        free = self._free
        last = np.inf
        for _ in range(iters):
            _, g, _ = _mech_energy_grad_hess(self.frame.c, U, self.grid, self.params, want_hess=False)
            res = float(np.max(np.abs(g[free] / self._wts)))
            if res <= tol:
                return U.reshape(u0.shape)
            if res > 0.9 * last:
                return None
            last = res
            U[free] -= self._lu.solve(g[free])
        return None

    def run(self, spec: PerturbationSpec, test_id: int = 0, tol: float = 1e-6, max_iters: int = 60, return_state=False):
        frame, grid = self.frame, self.grid
        bc = perturbed_boundary(frame, spec, grid)
        # affine increment applied everywhere is a much better start than on the boundary only
        X, Y = grid.coords()
        H = spec.increment_gradient(grid)
        u0 = frame.u + np.stack([H[0, 0] * X + H[0, 1] * Y, H[1, 0] * X + H[1, 1] * Y])
        u = self._chord(u0, tol)
        if u is None:
            trial = FieldState(frame.c, frame.mu, u0, frame.step, frame.time)
            try:
                u = solve_mechanical_equilibrium(trial, bc, grid, self.params, tol=tol, max_iters=max_iters)
            except ConvergenceError as exc:
                raise MechTestError(str(exc), spec=spec, residual=exc.residual) from exc
        tested = FieldState(frame.c, frame.mu, u, frame.step, frame.time)
        rec = homogenize(tested, grid, self.params)
        out = MechTestRecord(
            microstructure_id=self.microstructure_id,
            test_id=test_id,
            E_avg=rec.E_avg,
            F_avg=rec.F_avg,
            P_avg=rec.P_avg,
            Psi_mech=rec.Psi_mech,
            Psi_mech_0=self.base.Psi_mech,
        )
        return (out, tested) if return_state else out


def run_mech_test(
    frame: FieldState,
    spec: PerturbationSpec,
    grid: GridSpec,
    params: MaterialParams,
    microstructure_id: str = "",
    test_id: int = 0,
    tol: float = 1e-6,
    max_iters: int = 60,
    return_state: bool = False,
):
    """Equilibrate the frozen microstructure under base + increment loading.

    The composition is never touched. Returns a MechTestRecord, plus the tested
    FieldState when ``return_state`` is set. Use FrozenFrameTester for batches.
    """
    tester = FrozenFrameTester(frame, grid, params, microstructure_id)
    return tester.run(spec, test_id, tol, max_iters, return_state)


def perturbed_e2(tested: FieldState, grid: GridSpec) -> np.ndarray:
    return e2_field(tested.u, grid)


def select_frames(steps: int, discard: int, count: int) -> list[int]:
    """``count`` frame numbers evenly spread over discard+1 .. steps."""
    if count < 1 or steps <= discard:
        raise ValueError("need count >= 1 and steps > discard")
    idx = np.linspace(discard + 1, steps, count)
    return sorted(set(int(round(k)) for k in idx))
