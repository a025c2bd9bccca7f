"""Sensor layout, octagonal pixel grid and the beam/pixel path-length matrix.

Coordinates are in cm with the origin at the centre of the region of
interest.  A view angle ``theta`` gives the beam direction
``(cos theta, sin theta)``; beams inside a view are offset along the normal
``(-sin theta, cos theta)``.  Grid rows run top (largest y) to bottom,
columns left to right, and active pixels are enumerated row-major.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

_U32_MAX = 2**32 - 1
_MIN_SEGMENT = 1e-12
_CSTL_MAGIC = b"CSTL"
_CSTL_VERSION = 1


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class SensorConfig:
    num_views: int = 4
    beams_per_view: int = 8
    view_angles: tuple[float, ...] = (0.0, 45.0, 90.0, 135.0)
    beam_spacing: float = 1.80
    beam_span: float = 36.76


@dataclass(frozen=True)
class GridConfig:
    octagon_side: float = 12.60
    pixel_pitch: float = 0.766
    square: bool = False


@dataclass(frozen=True)
class SensorLayout:
    num_views: int
    beams_per_view: int
    view_angles: tuple[float, ...]
    beam_spacing: float
    beam_span: float

    @property
    def num_beams(self) -> int:
        return self.num_views * self.beams_per_view


@dataclass(frozen=True)
class Beam:
    index: int          # 0-based, view-major: index = view * R + position
    start: tuple[float, float]
    end: tuple[float, float]
    view: int
    position: int       # 0-based within the view, ordered along the view normal

    @property
    def length(self) -> float:
        return math.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1])


def build_layout(config: SensorConfig = SensorConfig()) -> tuple[SensorLayout, list[Beam]]:
    q, r = int(config.num_views), int(config.beams_per_view)
    angles = tuple(float(a) for a in config.view_angles)
    if q < 1 or r < 2:
        raise GeometryError(f"need at least 1 view and 2 beams per view, got Q={q}, R={r}")
    if q * r > _U32_MAX:
        raise GeometryError(f"Q*R={q * r} does not fit the beam index range")
    if len(angles) != q:
        raise GeometryError(f"{len(angles)} view angles given for {q} views")
    if any(not 0.0 <= a < 180.0 for a in angles) or any(b <= a for a, b in zip(angles, angles[1:])):
        raise GeometryError("view angles must be strictly increasing within [0, 180)")
    if not config.beam_spacing > 0:
        raise GeometryError("beam spacing must be positive")
    if not config.beam_span > 0:
        raise GeometryError("beam span must be positive")

    layout = SensorLayout(q, r, angles, float(config.beam_spacing), float(config.beam_span))
    half = 0.5 * layout.beam_span
    beams = []
    for view, angle in enumerate(angles):
        rad = math.radians(angle)
        dx, dy = math.cos(rad), math.sin(rad)
        nx, ny = -dy, dx
        for pos in range(r):
            offset = (pos + 1 - (r + 1) / 2) * layout.beam_spacing
            cx, cy = offset * nx, offset * ny
            beams.append(Beam(
                index=view * r + pos,
                start=(cx - half * dx, cy - half * dy),
                end=(cx + half * dx, cy + half * dy),
                view=view,
                position=pos,
            ))
    return layout, beams


def octagon_apothem(side: float) -> float:
    """Centre-to-flat distance of a regular octagon with the given side."""
    return 0.5 * side * (1.0 + math.sqrt(2.0))


def in_octagon(x, y, side: float, margin: float = 0.0):
    """Boundary-inclusive test for the axis-aligned regular octagon, shrunk by `margin`."""
    a = octagon_apothem(side) - margin
    tol = 1e-12 * max(a, 1.0)
    x = np.abs(np.asarray(x, dtype=float))
    y = np.abs(np.asarray(y, dtype=float))
    return (x <= a + tol) & (y <= a + tol) & (x + y <= a * math.sqrt(2.0) + tol)


@dataclass(frozen=True, eq=False)
class RoIGrid:
    octagon_side: float
    pixel_pitch: float
    rows: int
    cols: int
    active_mask: np.ndarray = field(repr=False)
    pixel_centers: np.ndarray = field(repr=False)
    cell_index: np.ndarray = field(repr=False)  # flat bounding-grid index of each active pixel
    square: bool = False

    @property
    def N(self) -> int:
        return int(self.cell_index.size)

    @property
    def width(self) -> float:
        return 2.0 * octagon_apothem(self.octagon_side)

    @property
    def origin(self) -> tuple[float, float]:
        """Lower-left corner of the bounding grid."""
        return (-0.5 * self.cols * self.pixel_pitch, -0.5 * self.rows * self.pixel_pitch)

    def cell_of(self, x, y):
        """(row, col) of the bounding-grid cell containing each point, half-open cells."""
        x0, y0 = self.origin
        col = np.floor((np.asarray(x) - x0) / self.pixel_pitch).astype(np.int64)
        row = self.rows - 1 - np.floor((np.asarray(y) - y0) / self.pixel_pitch).astype(np.int64)
        return row, col

    def to_image(self, values, fill=np.nan) -> np.ndarray:
        """Scatter per-pixel values into a (rows, cols) image."""
        values = np.asarray(values)
        img = np.full(values.shape[:-1] + (self.rows * self.cols,), fill, dtype=float)
        img[..., self.cell_index] = values
        return img.reshape(values.shape[:-1] + (self.rows, self.cols))

    def digest_bytes(self) -> bytes:
        head = struct.pack("<ddII?", self.octagon_side, self.pixel_pitch, self.rows, self.cols, self.square)
        return head + self.cell_index.astype("<u4").tobytes()


def build_grid(config: GridConfig = GridConfig()) -> RoIGrid:
    side, pitch = float(config.octagon_side), float(config.pixel_pitch)
    if not side > 0 or not pitch > 0:
        raise GeometryError("octagon side and pixel pitch must be positive")
    width = 2.0 * octagon_apothem(side)
    if pitch > width * (1 + 1e-12):
        raise GeometryError(f"pixel pitch {pitch} exceeds the octagon width {width:.4f}")
    n = max(1, math.ceil(width / pitch - 1e-9))
    rows = cols = n
    half = 0.5 * (n - 1)
    xs = (np.arange(cols) - half) * pitch
    ys = (half - np.arange(rows)) * pitch
    gx, gy = np.meshgrid(xs, ys)
    if config.square:
        mask = np.ones((rows, cols), dtype=bool)
    else:
        mask = in_octagon(gx, gy, side)
    cell_index = np.flatnonzero(mask.ravel())
    centers = np.column_stack([gx.ravel()[cell_index], gy.ravel()[cell_index]])
    for arr in (mask, centers, cell_index):
        arr.setflags(write=False)
    return RoIGrid(side, pitch, rows, cols, mask, centers, cell_index, bool(config.square))


def _trace_beam(start, end, grid: RoIGrid, lookup: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Parametric traversal of one beam across the bounding grid.

    Returns (pixel indices, lengths) for active pixels, sorted by pixel index.
    Each segment between consecutive crossings is attributed to the cell that
    contains its midpoint, which is the half-open [t_enter, t_exit) rule.
    """
    p = grid.pixel_pitch
    x0, y0 = grid.origin
    x1, y1 = x0 + grid.cols * p, y0 + grid.rows * p
    sx, sy = start
    dx, dy = end[0] - sx, end[1] - sy
    length = math.hypot(dx, dy)
    t_lo, t_hi = 0.0, 1.0
    for s, d, lo, hi in ((sx, dx, x0, x1), (sy, dy, y0, y1)):
        if d == 0.0:
            if not lo <= s < hi:
                return np.empty(0, np.int64), np.empty(0)
            continue
        ta, tb = (lo - s) / d, (hi - s) / d
        t_lo, t_hi = max(t_lo, min(ta, tb)), min(t_hi, max(ta, tb))
    if t_hi <= t_lo:
        return np.empty(0, np.int64), np.empty(0)

    ts = [np.array([t_lo, t_hi])]
    for s, d, lo, count in ((sx, dx, x0, grid.cols), (sy, dy, y0, grid.rows)):
        if d != 0.0:
            t = (lo + np.arange(count + 1) * p - s) / d
            ts.append(t[(t > t_lo) & (t < t_hi)])
    t = np.unique(np.concatenate(ts))
    seg = np.diff(t) * length
    mid = 0.5 * (t[1:] + t[:-1])
    row, col = grid.cell_of(sx + mid * dx, sy + mid * dy)
    inside = (row >= 0) & (row < grid.rows) & (col >= 0) & (col < grid.cols) & (seg >= _MIN_SEGMENT)
    pix = lookup[row[inside] * grid.cols + col[inside]]
    seg = seg[inside]
    keep = pix >= 0
    pix, seg = pix[keep], seg[keep]
    # a cell can be split into several pieces by a crossing at a tie
    uniq, inv = np.unique(pix, return_inverse=True)
    lengths = np.zeros(uniq.size)
    np.add.at(lengths, inv, seg)
    return uniq, lengths


class SensitivityMatrix:
    """Sparse M x N matrix of beam path lengths (cm) through each active pixel."""

    def __init__(self, matrix):
        self.matrix = sp.csr_matrix(matrix, dtype=float)
        self.matrix.sort_indices()

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def M(self) -> int:
        return self.shape[0]

    @property
    def N(self) -> int:
        return self.shape[1]

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, other):
        return self.matrix @ other

    def __eq__(self, other):
        if not isinstance(other, SensitivityMatrix) or other.shape != self.shape:
            return NotImplemented
        a, b = self.matrix, other.matrix
        return (np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
                and np.array_equal(a.data, b.data))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_CSTL_MAGIC)
        buf.write(struct.pack("<HII", _CSTL_VERSION, self.M, self.N))
        m = self.matrix
        for i in range(self.M):
            lo, hi = m.indptr[i], m.indptr[i + 1]
            buf.write(struct.pack("<I", hi - lo))
            rec = np.empty(hi - lo, dtype=[("col", "<u4"), ("len", "<f8")])
            rec["col"] = m.indices[lo:hi]
            rec["len"] = m.data[lo:hi]
            buf.write(rec.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SensitivityMatrix":
        if data[:4] != _CSTL_MAGIC:
            raise GeometryError("not a sensitivity-matrix file (bad magic)")
        version, m, n = struct.unpack_from("<HII", data, 4)
        if version != _CSTL_VERSION:
            raise GeometryError(f"unsupported sensitivity-matrix version {version}")
        off = 4 + struct.calcsize("<HII")
        indptr, cols, vals = [0], [], []
        rec_t = np.dtype([("col", "<u4"), ("len", "<f8")])
        for _ in range(m):
            (count,) = struct.unpack_from("<I", data, off)
            off += 4
            rec = np.frombuffer(data, dtype=rec_t, count=count, offset=off)
            off += count * rec_t.itemsize
            cols.append(rec["col"].astype(np.int64))
            vals.append(rec["len"].astype(float))
            indptr.append(indptr[-1] + count)
        if off != len(data):
            raise GeometryError("trailing bytes in sensitivity-matrix file")
        cols = np.concatenate(cols) if cols else np.empty(0, np.int64)
        vals = np.concatenate(vals) if vals else np.empty(0)
        if cols.size and cols.max() >= n:
            raise GeometryError("column index out of range")
        return cls(sp.csr_matrix((vals, cols, np.asarray(indptr)), shape=(m, n)))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SensitivityMatrix":
        return cls.from_bytes(Path(path).read_bytes())

    def to_csv(self, path) -> None:
        coo = self.matrix.tocoo()
        with open(path, "w") as fh:
            fh.write("i,j,length\n")
            for i, j, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{i},{j},{float(v)!r}\n")

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def build_sensitivity_matrix(layout: SensorLayout, beams: list[Beam], grid: RoIGrid,
                             n_jobs: int = 1) -> SensitivityMatrix:
    if len(beams) != layout.num_beams:
        raise GeometryError(f"layout declares {layout.num_beams} beams, got {len(beams)}")
    lookup = np.full(grid.rows * grid.cols, -1, dtype=np.int64)
    lookup[grid.cell_index] = np.arange(grid.N)

    def trace(beam):
        return _trace_beam(beam.start, beam.end, grid, lookup)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            rows = list(pool.map(trace, beams))
    else:
        rows = [trace(b) for b in beams]

    empty = [b.index for b, (cols, _) in zip(beams, rows) if cols.size == 0]
    if empty:
        warnings.warn(f"beams {empty} miss the region of interest; their rows are zero", stacklevel=2)
    indptr = np.concatenate([[0], np.cumsum([c.size for c, _ in rows])])
    cols = np.concatenate([c for c, _ in rows]) if rows else np.empty(0, np.int64)
    vals = np.concatenate([v for _, v in rows]) if rows else np.empty(0)
    return SensitivityMatrix(sp.csr_matrix((vals, cols, indptr), shape=(len(beams), grid.N)))


def rotation_permutations(beams: list[Beam], grid: RoIGrid, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Index maps induced by a 180 degree rotation about the origin.

    Returns ``(beam_perm, pixel_perm)`` with ``beam_perm[i]`` the beam that
    beam ``i`` lands on and ``pixel_perm[j]`` likewise for pixels.  Raises
    if the beam set or the grid is not closed under the rotation.
    """
    ends = np.array([[*b.start, *b.end] for b in beams])
    mids = 0.5 * (ends[:, :2] + ends[:, 2:])
    dist, beam_perm = cKDTree(mids).query(-mids)
    for i, j in enumerate(beam_perm):
        a = -ends[i].reshape(2, 2)
        b = ends[j].reshape(2, 2)
        # the rotated segment may have its endpoints swapped
        ok = np.allclose(a, b, atol=tol, rtol=0) or np.allclose(a, b[::-1], atol=tol, rtol=0)
        if dist[i] > tol or not ok:
            raise GeometryError(f"beam {i} has no 180-degree counterpart")

    tree = cKDTree(grid.pixel_centers)
    dist, pixel_perm = tree.query(-grid.pixel_centers)
    if np.any(dist > tol):
        raise GeometryError("pixel grid is not symmetric under 180-degree rotation")
    return beam_perm.astype(np.int64), pixel_perm.astype(np.int64)


def geometry_digest(layout: SensorLayout, grid: RoIGrid, L: SensitivityMatrix, extra: bytes = b"") -> bytes:
    """32-byte SHA-256 over the layout, grid, matrix and any caller-supplied bytes."""
    h = hashlib.sha256()
    h.update(struct.pack("<II", layout.num_views, layout.beams_per_view))
    h.update(np.asarray(layout.view_angles, "<f8").tobytes())
    h.update(struct.pack("<dd", layout.beam_spacing, layout.beam_span))
    h.update(grid.digest_bytes())
    h.update(L.to_bytes())
    h.update(extra)
    return h.digest()


def summary(layout: SensorLayout, beams: list[Beam], grid: RoIGrid, L: SensitivityMatrix) -> str:
    lines = [
        f"M={layout.num_beams}",
        f"N={grid.N}",
        f"Q={layout.num_views}",
        f"R={layout.beams_per_view}",
        f"grid={grid.rows}x{grid.cols}",
        f"pixel_pitch={grid.pixel_pitch}",
        f"octagon_side={grid.octagon_side}",
        "",
        "beam,view,position,nonzeros,chord_cm",
    ]
    nnz = np.diff(L.matrix.indptr)
    for b, k, c in zip(beams, nnz, L.row_sums()):
        lines.append(f"{b.index},{b.view},{b.position},{k},{c:.9f}")
    return "\n".join(lines) + "\n"
