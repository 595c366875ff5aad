"""Microstructure descriptors: rectangle-variant volume fractions and interface lengths."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .phasefield import GridSpec, e2_field

SQUARE, RECT_PLUS, RECT_MINUS = 0, 1, 2

FEATURE_NAMES = ("phi_r_plus", "phi_r_minus", "l_s_r", "l_r_plus", "l_r_minus")
CSV_COLUMNS = ("run_id", "frame_id", *FEATURE_NAMES)

# segment table: case -> pairs of cell edges (0 bottom, 1 right, 2 top, 3 left)
_SEGMENTS = {
    1: ((3, 0),),
    2: ((0, 1),),
    3: ((3, 1),),
    4: ((1, 2),),
    6: ((0, 2),),
    7: ((3, 2),),
    8: ((2, 3),),
    9: ((0, 2),),
    11: ((1, 2),),
    12: ((3, 1),),
    13: ((0, 1),),
    14: ((3, 0),),
}
# saddles: (centre above, centre below)
_SADDLES = {
    5: (((0, 1), (2, 3)), ((3, 0), (1, 2))),
    10: (((3, 0), (1, 2)), ((0, 1), (2, 3))),
}


@dataclass(frozen=True)
class MicrostructureFeatures:
    phi_r_plus: float
    phi_r_minus: float
    l_s_r: float
    l_r_plus: float
    l_r_minus: float

    @property
    def phi_s(self) -> float:
        return 1.0 - self.phi_r_plus - self.phi_r_minus

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in FEATURE_NAMES])


@dataclass
class ContourSet:
    """Iso-lines as polylines of (x, y) points plus the raw per-cell segments."""

    polylines: list
    level: float
    tag: str = ""
    segments: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    segment_cells: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))

    @property
    def length(self) -> float:
        return float(segment_lengths(self.segments).sum())

    def __len__(self) -> int:
        return len(self.polylines)


def segment_lengths(segments: np.ndarray) -> np.ndarray:
    if len(segments) == 0:
        return np.zeros(0)
    return np.hypot(*(segments[:, 1] - segments[:, 0]).T)


def _spacing(shape, grid, spacing):
    if grid is not None:
        return grid.hx, grid.hy
    if spacing is not None:
        return spacing
    ny, nx = shape
    return 1.0 / (nx - 1), 1.0 / (ny - 1)


def extract_contours(
    values, level: float, grid: GridSpec | None = None, spacing=None, tag: str = ""
) -> ContourSet:
    """Marching squares on a node-centred grid; a node is inside when value >= level.

    Points are linear interpolants along cell edges; ambiguous (saddle) cells
    are resolved with the mean of the four corner values.
    """
    f = np.asarray(values, dtype=float)
    if f.ndim != 2 or not np.all(np.isfinite(f)):
        raise ValueError("field must be a finite 2D array")
    ny, nx = f.shape
    hx, hy = _spacing(f.shape, grid, spacing)
    above = f >= level

    # crossing points on every horizontal and vertical edge
    nH = ny * (nx - 1)
    pts = np.full((nH + nx * (ny - 1), 2), np.nan)
    fa, fb = f[:, :-1], f[:, 1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(above[:, :-1] != above[:, 1:], (level - fa) / (fb - fa), np.nan)
    jj, ii = np.mgrid[0:ny, 0 : nx - 1]
    pts[:nH, 0] = ((ii + t) * hx).ravel()
    pts[:nH, 1] = (jj * hy).ravel()
    fa, fb = f[:-1, :], f[1:, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(above[:-1, :] != above[1:, :], (level - fa) / (fb - fa), np.nan)
    jj, ii = np.mgrid[0 : ny - 1, 0:nx]
    pts[nH:, 0] = (ii * hx).ravel()
    pts[nH:, 1] = ((jj + t) * hy).ravel()

    case = (
        above[:-1, :-1] * 1 + above[:-1, 1:] * 2 + above[1:, 1:] * 4 + above[1:, :-1] * 8
    ).astype(int)
    centre_above = 0.25 * (f[:-1, :-1] + f[:-1, 1:] + f[1:, 1:] + f[1:, :-1]) >= level

    segs, cells = [], []
    for j, i in zip(*np.nonzero((case != 0) & (case != 15))):
        k = case[j, i]
        pairs = _SADDLES[k][0 if centre_above[j, i] else 1] if k in _SADDLES else _SEGMENTS[k]
        edge_ids = (
            j * (nx - 1) + i,  # bottom
            nH + j * nx + i + 1,  # right
            (j + 1) * (nx - 1) + i,  # top
            nH + j * nx + i,  # left
        )
        for a, b in pairs:
            segs.append((edge_ids[a], edge_ids[b]))
            cells.append((j, i))
    if not segs:
        return ContourSet([], level, tag)
    segs = np.asarray(segs)
    polylines = _chain(segs, pts)
    return ContourSet(polylines, level, tag, pts[segs], np.asarray(cells))


def _chain(segs: np.ndarray, pts: np.ndarray) -> list:
    """Join edge-id segments sharing an edge point into polylines."""
    touching: dict[int, list[int]] = {}
    for s, (a, b) in enumerate(segs):
        touching.setdefault(int(a), []).append(s)
        touching.setdefault(int(b), []).append(s)
    used = np.zeros(len(segs), dtype=bool)

    def walk(start_edge, s):
        path = [start_edge]
        while s is not None and not used[s]:
            used[s] = True
            a, b = segs[s]
            nxt = int(b) if a == path[-1] else int(a)
            path.append(nxt)
            s = next((o for o in touching[nxt] if not used[o]), None)
        return path

    lines = []
    # open chains start at edge points used by only one segment
    for e, owners in touching.items():
        if len(owners) == 1 and not used[owners[0]]:
            lines.append(pts[walk(e, owners[0])])
    for s in range(len(segs)):
        if not used[s]:
            lines.append(pts[walk(int(segs[s][0]), s)])
    return lines


def phase_masks(c, e2) -> np.ndarray:
    """Node labels: RECT_PLUS where c > 0.5 and e2 > 0, RECT_MINUS where c > 0.5 and e2 < 0."""
    c, e2 = np.asarray(c, dtype=float), np.asarray(e2, dtype=float)
    if c.shape != e2.shape:
        raise ValueError("c and e2 must share a shape")
    labels = np.full(c.shape, SQUARE, dtype=np.int8)
    rect = c > 0.5
    labels[rect & (e2 > 0)] = RECT_PLUS
    labels[rect & (e2 < 0)] = RECT_MINUS
    return labels


def trapezoid_weights(shape) -> np.ndarray:
    ny, nx = shape
    wx = np.ones(nx)
    wx[[0, -1]] = 0.5
    wy = np.ones(ny)
    wy[[0, -1]] = 0.5
    w = np.outer(wy, wx)
    return w / w.sum()


def volume_fractions(labels) -> tuple[float, float]:
    w = trapezoid_weights(np.shape(labels))
    return float(w[labels == RECT_PLUS].sum()), float(w[labels == RECT_MINUS].sum())


def _bilinear_at(values, pts, hx, hy):
    ny, nx = values.shape
    x, y = pts[:, 0] / hx, pts[:, 1] / hy
    i = np.clip(np.floor(x).astype(int), 0, nx - 2)
    j = np.clip(np.floor(y).astype(int), 0, ny - 2)
    s, t = x - i, y - j
    return (
        values[j, i] * (1 - s) * (1 - t)
        + values[j, i + 1] * s * (1 - t)
        + values[j + 1, i] * (1 - s) * t
        + values[j + 1, i + 1] * s * t
    )


def _boundary_share(c, e2, hx, hy):
    """Lengths of the domain boundary lying in rect+ and rect- (linear interpolation)."""
    out = np.zeros(2)
    for line_c, line_e, h in (
        (c[0], e2[0], hx),
        (c[-1], e2[-1], hx),
        (c[:, 0], e2[:, 0], hy),
        (c[:, -1], e2[:, -1], hy),
    ):
        for k, sign in enumerate((1.0, -1.0)):
            out[k] += h * sum(
                _interval_overlap(line_c[m] - 0.5, line_c[m + 1] - 0.5, sign * line_e[m], sign * line_e[m + 1])
                for m in range(len(line_c) - 1)
            )
    return out


def _positive_interval(a, b):
    if a > 0 and b > 0:
        return 0.0, 1.0
    if a <= 0 and b <= 0:
        return 0.0, 0.0
    t = a / (a - b)
    return (0.0, t) if a > 0 else (t, 1.0)


def _interval_overlap(ca, cb, ea, eb):
    lo1, hi1 = _positive_interval(ca, cb)
    lo2, hi2 = _positive_interval(ea, eb)
    return max(0.0, min(hi1, hi2) - max(lo1, lo2))


def interface_lengths(
    c, e2, grid: GridSpec | None = None, spacing=None, include_outer_boundary: bool = False
) -> tuple[float, float, float]:
    """(l_s^r, l^{r+}, l^{r-}).

    Each piece of the c = 0.5 contour is attributed to the variant whose e2 sign
    dominates the c > 0.5 corners of its cell; pieces of the e2 = 0 contour that
    lie inside c > 0.5 separate the two variants and count toward both.
    """
    c, e2 = np.asarray(c, dtype=float), np.asarray(e2, dtype=float)
    hx, hy = _spacing(c.shape, grid, spacing)
    cs = extract_contours(c, 0.5, spacing=(hx, hy), tag="c")
    l_plus = l_minus = 0.0
    l_s = cs.length
    if len(cs.segments):
        lens = segment_lengths(cs.segments)
        j, i = cs.segment_cells.T
        votes = np.zeros(len(j))
        for dj, di in ((0, 0), (0, 1), (1, 0), (1, 1)):
            cc, ee = c[j + dj, i + di], e2[j + dj, i + di]
            votes += np.where(cc > 0.5, ee, 0.0)
        l_plus += float(lens[votes > 0].sum()) + 0.5 * float(lens[votes == 0].sum())
        l_minus += float(lens[votes < 0].sum()) + 0.5 * float(lens[votes == 0].sum())
    es = extract_contours(e2, 0.0, spacing=(hx, hy), tag="e2")
    if len(es.segments):
        mid = es.segments.mean(axis=1)
        inside = _bilinear_at(c, mid, hx, hy) > 0.5
        shared = float(segment_lengths(es.segments)[inside].sum())
        l_plus += shared
        l_minus += shared
    if include_outer_boundary:
        bp, bm = _boundary_share(c, e2, hx, hy)
        l_plus += float(bp)
        l_minus += float(bm)
    return float(l_s), float(l_plus), float(l_minus)


def compute_features(
    c, e2, grid: GridSpec | None = None, spacing=None, include_outer_boundary: bool = False
) -> MicrostructureFeatures:
    labels = phase_masks(c, e2)
    pp, pm = volume_fractions(labels)
    ls, lp, lm = interface_lengths(c, e2, grid, spacing, include_outer_boundary)
    return MicrostructureFeatures(pp, pm, ls, lp, lm)


def frame_features(state, grid: GridSpec, include_outer_boundary: bool = False) -> MicrostructureFeatures:
    return compute_features(state.c, e2_field(state.u, grid), grid, None, include_outer_boundary)
