"""File-level pipeline stages shared by the command line and the end-to-end tests.

A run directory holds ``run.json``, ``frames/``, ``homogenized.csv``, and after
featurization ``features.csv`` and ``e2/`` images; mechanical tests append
``mechtests.csv`` (and ``e2_perturbed/`` when requested).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict
from pathlib import Path


from . import dataio
from .features import CSV_COLUMNS as FEATURE_COLUMNS
from .features import FEATURE_NAMES, frame_features
from .homogenize import CSV_COLUMNS as HOMOG_COLUMNS
from .homogenize import homogenize
from .mechtest import FrozenFrameTester, MechTestError, perturbed_e2, sample_loadings, select_frames
from .phasefield import BoundaryConditions, GridSpec, MaterialParams, SimConfig, e2_field, run_simulation
from .utils import RNG_NAME, derive_seed, make_rng

log = logging.getLogger(__name__)

MECH_COLUMNS = (
    "microstructure_id", "run_id", "frame_id", "test_id",
    "E11", "E12", "E22", *FEATURE_NAMES,
    "e2_image", "e2_perturbed",
    "Psi_mech",
    "P11", "P12", "P21", "P22", "F11", "F12", "F21", "F22",
    "Psi_mech_0",
)  # fmt: skip


def sample_bcs(n: int, seed: int, low: float = -1e-5, high: float = 3e-5) -> list[BoundaryConditions]:
    rng = make_rng(seed)
    vals = rng.uniform(low, high, size=(n, 2))
    return [BoundaryConditions(float(a), float(b)) for a, b in vals]


def run_id_for(index: int) -> str:
    return f"run_{index:03d}"


def simulate(
    run_dir,
    config: SimConfig,
    bc: BoundaryConditions,
    grid: GridSpec,
    params: MaterialParams,
    run_id: str = "run_000",
) -> dict:
    """Run one phase-evolution simulation, writing every frame and its homogenized record."""
    run_dir = Path(run_dir)
    (run_dir / "frames").mkdir(parents=True, exist_ok=True)
    rows = []

    def keep(frame):
        dataio.write_frame(dataio.frame_path(run_dir, frame.step), frame, grid, {"run_id": run_id})
        rows.append(homogenize(frame, grid, params, frame.step, run_id).row())

    run_simulation(config, bc, grid, params, callback=keep)
    dataio.write_csv(run_dir / "homogenized.csv", rows, HOMOG_COLUMNS)
    meta = {
        "run_id": run_id,
        "sim": asdict(config),
        "bc": asdict(bc),
        "grid": asdict(grid),
        "material": asdict(params),
        "rng": RNG_NAME,
        "frames": [r["frame_id"] for r in rows],
    }
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def read_run(run_dir) -> dict:
    return json.loads((Path(run_dir) / "run.json").read_text())


def _run_objects(meta):
    return GridSpec(**meta["grid"]), MaterialParams(**meta["material"])


def e2_image_path(run_dir, frame_id: int) -> Path:
    return Path(run_dir) / "e2" / f"frame_{frame_id:05d}.npy"


def featurize(run_dir, include_outer_boundary: bool = False) -> list[dict]:
    """Features and original e2 images for every stored frame of a run."""
    run_dir = Path(run_dir)
    meta = read_run(run_dir)
    rows = []
    for k in meta["frames"]:
        state, grid, _ = dataio.read_frame(dataio.frame_path(run_dir, k))
        feats = frame_features(state, grid, include_outer_boundary)
        dataio.save_image(e2_image_path(run_dir, k), e2_field(state.u, grid))
        rows.append({"run_id": meta["run_id"], "frame_id": k, **asdict(feats)})
    dataio.write_csv(run_dir / "features.csv", rows, FEATURE_COLUMNS)
    return rows


def mechtest(
    run_dir,
    frame_ids,
    tests_per_frame: int,
    seed: int,
    tol: float = 1e-9,
    max_iters: int = 60,
    normal_range: float = 5e-5,
    shear_range: float = 3e-4,
    save_perturbed: bool = False,
) -> list[dict]:
    """Perturbation tests on the selected frames; rows go to ``mechtests.csv``."""
    run_dir = Path(run_dir)
    meta = read_run(run_dir)
    grid, params = _run_objects(meta)
    feats = {int(r["frame_id"]): r for r in dataio.read_csv(run_dir / "features.csv")}
    rows, failures = [], 0
    for k in frame_ids:
        state, _, _ = dataio.read_frame(dataio.frame_path(run_dir, k))
        mid = f"{meta['run_id']}/f{k:05d}"
        tester = FrozenFrameTester(state, grid, params, mid)
        specs = sample_loadings(tests_per_frame, derive_seed(seed, meta["run_id"], k), grid, normal_range, shear_range)
        for t, spec in enumerate(specs):
            try:
                rec, tested = tester.run(spec, t, tol=tol, max_iters=max_iters, return_state=True)
            except MechTestError as exc:
                failures += 1
                log.warning("%s test %d failed (residual %.3g)", mid, t, exc.residual)
                continue
            pert = ""
            if save_perturbed:
                p = run_dir / "e2_perturbed" / f"frame_{k:05d}_test_{t:05d}.npy"
                dataio.save_image(p, perturbed_e2(tested, grid))
                pert = str(p.relative_to(run_dir))
            row = rec.row()
            row.update(
                run_id=meta["run_id"],
                frame_id=k,
                e2_image=str(e2_image_path(run_dir, k).relative_to(run_dir)),
                e2_perturbed=pert,
                **{c: float(feats[k][c]) for c in FEATURE_NAMES},
            )
            rows.append(row)
    path = run_dir / "mechtests.csv"
    dataio.write_csv(path, rows, MECH_COLUMNS)
    if failures:
        log.warning("%s: %d of %d tests failed", run_dir, failures, failures + len(rows))
    return rows


def default_frames(meta: dict, count: int) -> list[int]:
    sim = meta["sim"]
    return select_frames(sim["steps"], sim["discard"], count)


def _rel(path: Path, root: Path) -> str:
    return Path(os.path.relpath(path, root)).as_posix()


def base_dataset(run_dirs, out_csv, discard: int | None = None, name: str | None = None) -> dataio.Dataset:
    """D_I (one run) or D_II (several) from featurized runs."""
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    runs = []
    for rd in map(Path, run_dirs):
        meta = read_run(rd)
        if discard is None:
            discard = meta["sim"]["discard"]
        runs.append(
            {
                "run_id": meta["run_id"],
                "frames": meta["frames"],
                "features": dataio.read_csv(rd / "features.csv"),
                "homogenized": dataio.read_csv(rd / "homogenized.csv"),
                "images": {k: _rel(e2_image_path(rd, k), out_csv.parent) for k in meta["frames"]},
            }
        )
    ds = dataio.build_DI_DII(runs, discard=discard or 0, name=name)
    dataio.save_dataset(ds, out_csv)
    ds.root = out_csv.parent
    return ds


def mech_dataset(run_dirs, out_csv, name: str | None = None) -> dataio.Dataset:
    """D_III (one microstructure) or D_IV (several) from tested runs."""
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    tests = []
    for rd in map(Path, run_dirs):
        for r in dataio.read_csv(rd / "mechtests.csv"):
            r = dict(r)
            r["e2_image"] = _rel(rd / r["e2_image"], out_csv.parent)
            if r["e2_perturbed"]:
                r["e2_perturbed"] = _rel(rd / r["e2_perturbed"], out_csv.parent)
            tests.append(r)
    ds = dataio.build_DIII_DIV(tests, name=name)
    dataio.save_dataset(ds, out_csv)
    return dataio.load_dataset(out_csv)
