"""Frame files, dataset tables and their schemas, splits and experiment manifests.

Frame file layout: an 8-byte little-endian header length, a UTF-8 JSON header,
then the raw little-endian float64 arrays listed in the header (offsets are
relative to the start of the data block).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FEATURE_NAMES
from .phasefield import FieldState, GridSpec
from .utils import make_rng

FRAME_FORMAT = "spinodal-kbnn-frame/1"
STRESS_COLUMNS = ("P11", "P12", "P21", "P22")
DEFGRAD_COLUMNS = ("F11", "F12", "F21", "F22")
STRAIN_COLUMNS = ("E11", "E12", "E22")


class SchemaError(ValueError):
    """A dataset is missing columns or has the wrong schema name."""


# ---------------------------------------------------------------------------
# frames


def write_frame(path, state: FieldState, grid: GridSpec, meta: dict | None = None) -> Path:
    path = Path(path)
    arrays = {"c": state.c, "mu": state.mu, "u1": state.u[0], "u2": state.u[1]}
    blobs, table, offset = [], {}, 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table[name] = {"offset": offset, "shape": list(np.shape(arr)), "dtype": "<f8"}
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": FRAME_FORMAT,
        "grid": {"nx": grid.nx, "ny": grid.ny, "Lx": grid.Lx, "Ly": grid.Ly},
        "step": int(state.step),
        "time": float(state.time).hex(),
        "arrays": table,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    return path


def read_frame(path) -> tuple[FieldState, GridSpec, dict]:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 8:
        raise SchemaError(f"{path}: truncated frame file")
    (n,) = struct.unpack("<Q", buf[:8])
    header = json.loads(buf[8 : 8 + n])
    if header.get("format") != FRAME_FORMAT:
        raise SchemaError(f"{path}: not a frame file")
    data = buf[8 + n :]
    out = {}
    for name, info in header["arrays"].items():
        count = int(np.prod(info["shape"]))
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=info["offset"]).reshape(info["shape"]).copy()
    g = header["grid"]
    grid = GridSpec(nx=g["nx"], ny=g["ny"], Lx=g["Lx"], Ly=g["Ly"])
    state = FieldState(out["c"], out["mu"], np.stack([out["u1"], out["u2"]]), header["step"], float.fromhex(header["time"]))
    return state, grid, header["meta"]


def frame_path(run_dir, frame_id: int) -> Path:
    return Path(run_dir) / "frames" / f"frame_{frame_id:05d}.bin"


def save_image(path, image) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.ascontiguousarray(image, dtype="<f8"), allow_pickle=False)
    return path


def load_image(path) -> np.ndarray:
    return np.load(Path(path), allow_pickle=False)


# ---------------------------------------------------------------------------
# tables


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, rows, columns) -> Path:
    """Rows of dicts to CSV; floats carry 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass(frozen=True)
class DatasetSchema:
    name: str
    features: tuple
    labels: tuple
    auxiliary: tuple = ()
    keys: tuple = ()
    images: tuple = ()

    @property
    def columns(self) -> tuple:
        return (*self.keys, *self.features, *self.images, *self.labels, *self.auxiliary)

    def to_dict(self) -> dict:
        return {
            "schema": self.name,
            "keys": list(self.keys),
            "features": list(self.features),
            "images": list(self.images),
            "labels": list(self.labels),
            "auxiliary": list(self.auxiliary),
        }


_BASE = DatasetSchema(
    name="",
    keys=("run_id", "frame_id"),
    features=FEATURE_NAMES,
    images=("e2_image",),
    labels=("Psi_mech_0",),
)
_MECH = DatasetSchema(
    name="",
    keys=("microstructure_id", "run_id", "frame_id", "test_id"),
    features=(*STRAIN_COLUMNS, *FEATURE_NAMES),
    images=("e2_image", "e2_perturbed"),
    labels=("Psi_mech",),
    auxiliary=(*STRESS_COLUMNS, *DEFGRAD_COLUMNS, "Psi_mech_0"),
)
SCHEMAS = {
    "D_I": DatasetSchema(**{**_BASE.__dict__, "name": "D_I"}),
    "D_II": DatasetSchema(**{**_BASE.__dict__, "name": "D_II"}),
    "D_III": DatasetSchema(**{**_MECH.__dict__, "name": "D_III"}),
    "D_IV": DatasetSchema(**{**_MECH.__dict__, "name": "D_IV"}),
}


@dataclass
class Dataset:
    """A schema-tagged table. Numeric columns are float arrays, key/image columns strings."""

    schema: DatasetSchema
    columns: dict
    root: Path | None = None

    def __len__(self):
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def __getitem__(self, name) -> np.ndarray:
        if name not in self.columns:
            raise SchemaError(f"{self.schema.name}: no column {name!r}")
        return self.columns[name]

    def matrix(self, names) -> np.ndarray:
        return np.column_stack([np.asarray(self[n], dtype=float) for n in names])

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(self.schema, {k: v[rows] for k, v in self.columns.items()}, self.root)

    def expect(self, *names):
        if self.schema.name not in names:
            raise SchemaError(f"expected a {' or '.join(names)} dataset, got {self.schema.name}")
        return self

    def image_paths(self, column="e2_image") -> list[Path]:
        base = self.root or Path(".")
        return [base / p for p in self[column]]


_STRING_COLUMNS = {"run_id", "microstructure_id", "e2_image", "e2_perturbed"}
_INT_COLUMNS = {"frame_id", "test_id"}


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    rows = [{c: ds.columns[c][i] for c in ds.schema.columns} for i in range(len(ds))]
    write_csv(path, rows, ds.schema.columns)
    path.with_suffix(".schema.json").write_text(json.dumps(ds.schema.to_dict(), indent=2) + "\n")
    return path


def load_dataset(path, expect: str | tuple | None = None) -> Dataset:
    """Read a dataset CSV and validate it against its schema sidecar."""
    path = Path(path)
    side = path.with_suffix(".schema.json")
    if not side.exists():
        raise SchemaError(f"{path}: missing schema sidecar {side.name}")
    meta = json.loads(side.read_text())
    name = meta.get("schema")
    if name not in SCHEMAS:
        raise SchemaError(f"{path}: unknown schema {name!r}")
    schema = SCHEMAS[name]
    if expect is not None:
        wanted = (expect,) if isinstance(expect, str) else tuple(expect)
        if name not in wanted:
            raise SchemaError(f"{path}: expected a {' or '.join(wanted)} dataset, got {name}")
    rows = read_csv(path)
    header = list(rows[0].keys()) if rows else _header(path)
    missing = [c for c in schema.columns if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    cols = {}
    for c in schema.columns:
        raw = [r[c] for r in rows]
        if c in _STRING_COLUMNS:
            cols[c] = np.array(raw, dtype=object)
        elif c in _INT_COLUMNS:
            cols[c] = np.array([int(v) for v in raw], dtype=np.int64)
        else:
            try:
                cols[c] = np.array([float(v) for v in raw], dtype=float)
            except ValueError as exc:
                raise SchemaError(f"{path}: non-numeric value in column {c}") from exc
    return Dataset(schema, cols, path.parent)


def _header(path) -> list:
    with Path(path).open(newline="") as fh:
        return next(csv.reader(fh), [])


# ---------------------------------------------------------------------------
# dataset builders


def _index(rows, *key):
    return {tuple(str(r[k]) if k == "run_id" else int(r[k]) for k in key): r for r in rows}


def build_DI_DII(runs: list[dict], discard: int = 50, name: str | None = None) -> Dataset:
    """One row per retained frame.

    ``runs`` holds dicts with ``run_id``, ``features`` and ``homogenized`` row
    lists (as read from the per-run CSVs), ``frames`` (frame ids expected) and
    optional ``images`` mapping frame id to a relative e2 image path.
    """
    name = name or ("D_I" if len(runs) == 1 else "D_II")
    schema = SCHEMAS[name]
    out = {c: [] for c in schema.columns}
    for run in runs:
        rid = str(run["run_id"])
        feats = _index(run["features"], "frame_id")
        homs = _index(run["homogenized"], "frame_id")
        frames = [k for k in run["frames"] if k > discard]
        for k in frames:
            if (k,) not in feats or (k,) not in homs:
                raise SchemaError(f"missing frame (run {rid}, frame {k})")
            f, h = feats[(k,)], homs[(k,)]
            out["run_id"].append(rid)
            out["frame_id"].append(k)
            for c in FEATURE_NAMES:
                out[c].append(float(f[c]))
            out["e2_image"].append(run.get("images", {}).get(k, ""))
            out["Psi_mech_0"].append(float(h["Psi_mech"]))
    if not out["run_id"]:
        raise SchemaError("no frames left after discarding; dataset would be empty")
    return _finish(schema, out)


def build_DIII_DIV(tests: list[dict], name: str | None = None) -> Dataset:
    """One row per mechanical test.

    Each entry of ``tests`` carries the MechTestRecord row fields plus
    ``run_id``, ``frame_id``, the five features of the tested microstructure,
    ``e2_image`` (original field) and ``e2_perturbed`` (may be "").
    """
    if not tests:
        raise SchemaError("no mechanical tests; dataset would be empty")
    micro = {str(t["microstructure_id"]) for t in tests}
    name = name or ("D_III" if len(micro) == 1 else "D_IV")
    schema = SCHEMAS[name]
    missing = [c for c in schema.columns if c not in tests[0]]
    if missing:
        raise SchemaError(f"test records lack columns {missing}")
    out = {c: [t[c] for t in tests] for c in schema.columns}
    return _finish(schema, out)


def _finish(schema: DatasetSchema, out: dict) -> Dataset:
    cols = {}
    for c, v in out.items():
        if c in _STRING_COLUMNS:
            cols[c] = np.array([str(x) for x in v], dtype=object)
        elif c in _INT_COLUMNS:
            cols[c] = np.array([int(x) for x in v], dtype=np.int64)
        else:
            cols[c] = np.array([float(x) for x in v], dtype=float)
    return Dataset(schema, cols)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.10
    cv_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")


def split(n_rows: int, spec: SplitSpec = SplitSpec()) -> tuple[np.ndarray, np.ndarray]:
    """(train+validation rows, test rows), disjoint and exhaustive."""
    if n_rows < 10:
        raise ValueError(f"need at least 10 rows to split, got {n_rows}")
    perm = make_rng(spec.seed).permutation(n_rows)
    n_test = int(round(spec.test_fraction * n_rows))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Manifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def add(self, path, root=None):
        p = Path(path)
        self.files.append(str(p.relative_to(root)) if root else str(p))

    def write(self, directory, filename: str = "manifest.json") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / filename
        doc = {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "files": sorted(set(self.files)),
            **self.extra,
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def read_manifest(directory, filename: str = "manifest.json") -> dict:
    return json.loads((Path(directory) / filename).read_text())
