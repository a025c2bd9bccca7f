"""Gaussian phantoms, their projections, dataset files and per-beam standardization."""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .geometry import RoIGrid, in_octagon, octagon_apothem
from .spectroscopy import DEFAULT_SPECS, FieldPair, ProjectionPair, forward, within_view_steps

_CSTD_MAGIC = b"CSTD"
_CSTD_VERSION = 1
_HEADER = struct.Struct("<HIIIIIQ32s")

FULL_SCALE_COUNTS = (13440, 5760, 27)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomBounds:
    x_min: float = 0.01
    x_max: float = 0.12
    t_min: float = 318.0
    t_max: float = 1300.0

    def __post_init__(self):
        if not self.x_min < self.x_max or not self.t_min < self.t_max:
            raise ValueError("phantom bounds need min < max")


@dataclass(frozen=True)
class PhantomParams:
    centers: np.ndarray       # (D, 2) cm
    xi: np.ndarray            # (D,) peak scale factors
    sigma_t: np.ndarray       # (D,) temperature widths, cm
    rho: float                # concentration / temperature width ratio
    bounds: PhantomBounds = PhantomBounds()

    @property
    def D(self) -> int:
        return len(self.xi)

    @property
    def sigma_x(self) -> np.ndarray:
        return self.rho * self.sigma_t


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = FULL_SCALE_COUNTS[0]
    n_val: int = FULL_SCALE_COUNTS[1]
    n_test: int = FULL_SCALE_COUNTS[2]
    seed: int = 0
    bounds: PhantomBounds = PhantomBounds()
    d_choices: tuple[int, ...] = (1, 2, 3)
    sigma_range: tuple[float, float] = (0.08, 0.25)   # fractions of the octagon width
    rho_range: tuple[float, float] = (1.0 / 3.0, 1.0)
    xi_range: tuple[float, float] = (0.7, 1.0)
    pressure: float = 1.0

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.n_train, self.n_val, self.n_test)


def proportional_counts(total: int, min_test: int = 27) -> tuple[int, int, int]:
    """Split sizes in the 13440/5760/27 proportions, test kept at least `min_test`."""
    n_val = total * FULL_SCALE_COUNTS[1] // sum(FULL_SCALE_COUNTS)
    n_test = min(max(total * FULL_SCALE_COUNTS[2] // sum(FULL_SCALE_COUNTS), min_test), total - n_val)
    return (total - n_val - n_test, n_val, n_test)


def sample_center_and_width(rng: np.random.Generator, grid: RoIGrid,
                            sigma_range=(0.08, 0.25)) -> tuple[np.ndarray, float]:
    """Centre uniform over the octagon shrunk by one pixel; width uniform in a fraction of its width."""
    margin = grid.pixel_pitch
    reach = octagon_apothem(grid.octagon_side) - margin
    while True:
        c = rng.uniform(-reach, reach, size=2)
        if in_octagon(c[0], c[1], grid.octagon_side, margin):
            break
    sigma = rng.uniform(*sigma_range) * grid.width
    return c, float(sigma)


def sample_phantom_params(rng: np.random.Generator, grid: RoIGrid, config: DatasetConfig = DatasetConfig(),
                          D: int | None = None) -> PhantomParams:
    if D is None:
        D = int(rng.choice(config.d_choices))
    draws = [sample_center_and_width(rng, grid, config.sigma_range) for _ in range(D)]
    xi = rng.uniform(*config.xi_range, size=D)
    rho = float(rng.uniform(*config.rho_range))
    return PhantomParams(np.array([c for c, _ in draws]), xi, np.array([s for _, s in draws]),
                         rho, config.bounds)


def render_phantom(params: PhantomParams, points, pressure: float = 1.0) -> FieldPair:
    """Sum-of-Gaussians concentration and temperature at the given (n, 2) points."""
    pts = np.asarray(points, dtype=float)
    b = params.bounds
    d2 = ((pts[:, None, :] - params.centers[None, :, :]) ** 2).sum(-1)   # (n, D)
    X = b.x_min + (params.xi * (b.x_max - b.x_min) * np.exp(-d2 / params.sigma_x ** 2)).sum(1)
    T = b.t_min + (params.xi * (b.t_max - b.t_min) * np.exp(-d2 / params.sigma_t ** 2)).sum(1)
    return FieldPair(X, T, pressure)


def sample_phantom(rng: np.random.Generator, bounds: PhantomBounds, grid: RoIGrid,
                   D: int | None = None) -> FieldPair:
    params = sample_phantom_params(rng, grid, DatasetConfig(bounds=bounds), D)
    return render_phantom(params, grid.pixel_centers)


@dataclass(eq=False)
class Dataset:
    """Examples stored in split order: train, then validation, then test."""
    X: np.ndarray           # (E, N) float32
    T: np.ndarray           # (E, N) float32
    A1: np.ndarray          # (E, M) float64, noise-free
    A2: np.ndarray
    counts: tuple[int, int, int]
    seed: int
    geometry_digest: bytes
    manifest: dict = field(default_factory=dict)

    SPLITS = ("train", "val", "test")

    def __post_init__(self):
        if sum(self.counts) != len(self.X):
            raise DatasetError(f"split counts {self.counts} do not add up to {len(self.X)} examples")
        if len(self.geometry_digest) != 32:
            raise DatasetError("geometry digest must be 32 bytes")

    @property
    def M(self) -> int:
        return self.A1.shape[1]

    @property
    def N(self) -> int:
        return self.X.shape[1]

    def indices(self, split: str) -> slice:
        i = self.SPLITS.index(split)
        lo = sum(self.counts[:i])
        return slice(lo, lo + self.counts[i])

    def projections(self, split: str | None = None) -> np.ndarray:
        """Raw projections as (E, 2M) rows ``[A1 | A2]``."""
        sl = slice(None) if split is None else self.indices(split)
        return np.hstack([self.A1[sl], self.A2[sl]])

    def fields(self, split: str | None = None) -> np.ndarray:
        """Targets as (E, 2N) rows ``[X | T]`` in physical units."""
        sl = slice(None) if split is None else self.indices(split)
        return np.hstack([self.X[sl], self.T[sl]]).astype(float)

    def fit_pool(self) -> np.ndarray:
        """Projections of the training and validation examples."""
        return self.projections()[:self.counts[0] + self.counts[1]]

    def to_bytes(self) -> bytes:
        parts = [_CSTD_MAGIC, _HEADER.pack(_CSTD_VERSION, self.M, self.N, *self.counts,
                                           self.seed, self.geometry_digest)]
        X = self.X.astype("<f4")
        T = self.T.astype("<f4")
        A1 = self.A1.astype("<f8")
        A2 = self.A2.astype("<f8")
        for e in range(len(X)):
            parts += [X[e].tobytes(), T[e].tobytes(), A1[e].tobytes(), A2[e].tobytes()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        if data[:4] != _CSTD_MAGIC:
            raise DatasetError("not a dataset file (bad magic)")
        version, M, N, ntr, nva, nte, seed, digest = _HEADER.unpack_from(data, 4)
        if version != _CSTD_VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        E = ntr + nva + nte
        rec = np.dtype([("X", "<f4", (N,)), ("T", "<f4", (N,)), ("A1", "<f8", (M,)), ("A2", "<f8", (M,))])
        off = 4 + _HEADER.size
        if len(data) != off + E * rec.itemsize:
            raise DatasetError("dataset file length does not match its header")
        arr = np.frombuffer(data, dtype=rec, count=E, offset=off)
        return cls(arr["X"].astype(np.float32), arr["T"].astype(np.float32),
                   arr["A1"].astype(float), arr["A2"].astype(float), (ntr, nva, nte), seed, digest)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        if self.manifest:
            write_manifest(path.with_suffix(".manifest"), self.manifest)

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        ds = cls.from_bytes(path.read_bytes())
        mpath = path.with_suffix(".manifest")
        if mpath.exists():
            ds.manifest = read_manifest(mpath)
        return ds


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w") as fh:
        for k, v in manifest.items():
            fh.write(f"{k}={v}\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def smoothness_statistic(A: np.ndarray, beams_per_view: int, q: float = 95.0) -> float:
    """Percentile over examples of the largest adjacent-beam step within any view."""
    steps = within_view_steps(A, beams_per_view)
    return float(np.percentile(steps.reshape(len(A), -1).max(axis=1), q))


def build_dataset(config: DatasetConfig, layout, grid: RoIGrid, L, specs=DEFAULT_SPECS,
                  geometry_digest: bytes = b"\0" * 32) -> Dataset:
    """Generate, shuffle and split noise-free examples.

    Example ``e`` draws from its own stream seeded by ``(seed, e)``, so the
    output does not depend on generation order.
    """
    E = sum(config.counts)
    if E == 0:
        raise DatasetError("dataset needs at least one example")
    X = np.empty((E, grid.N), np.float32)
    T = np.empty((E, grid.N), np.float32)
    A1 = np.empty((E, layout.num_beams))
    A2 = np.empty((E, layout.num_beams))
    d_count = dict.fromkeys(config.d_choices, 0)
    for e in range(E):
        rng = np.random.default_rng([config.seed, e])
        params = sample_phantom_params(rng, grid, config)
        d_count[params.D] += 1
        f = render_phantom(params, grid.pixel_centers, config.pressure)
        proj = forward(f, L, specs)
        X[e], T[e], A1[e], A2[e] = f.X, f.T, proj.A1, proj.A2
    perm = np.random.default_rng(config.seed).permutation(E)
    X, T, A1, A2 = X[perm], T[perm], A1[perm], A2[perm]

    pool = config.n_train + config.n_val
    if pool > 1:
        sd = np.hstack([A1[:pool], A2[:pool]]).std(axis=0)
        if np.any(sd == 0):
            raise DatasetError(f"beams {np.flatnonzero(sd == 0).tolist()} have zero variance; degenerate geometry")

    b = config.bounds
    manifest = {
        "examples": E,
        "n_train": config.n_train,
        "n_val": config.n_val,
        "n_test": config.n_test,
        "seed": config.seed,
        "geometry_digest": geometry_digest.hex(),
        "x_min": b.x_min, "x_max": b.x_max, "t_min": b.t_min, "t_max": b.t_max,
        "pressure": config.pressure,
        "d_distribution": "uniform over " + ",".join(map(str, config.d_choices)),
        "d_counts": ",".join(f"{k}:{v}" for k, v in d_count.items()),
        "center_distribution": "uniform over octagon shrunk by one pixel pitch",
        "sigma_t_distribution": f"uniform [{config.sigma_range[0]}, {config.sigma_range[1]}] x octagon width",
        "rho_distribution": f"uniform [{config.rho_range[0]:.6g}, {config.rho_range[1]:.6g}]",
        "xi_distribution": f"uniform [{config.xi_range[0]}, {config.xi_range[1]}]",
        "smoothness_p95_nu1": repr(smoothness_statistic(A1, layout.beams_per_view)),
        "smoothness_p95_nu2": repr(smoothness_statistic(A2, layout.beams_per_view)),
    }
    return Dataset(X, T, A1, A2, config.counts, config.seed, geometry_digest, manifest)


class Standardizer(TransformerMixin, BaseEstimator):
    """Per-column (A - mean) / std with the population standard deviation."""

    def fit(self, A, y=None):
        A = check_array(A, dtype=np.float64)
        self.mean_ = A.mean(axis=0)
        self.scale_ = np.sqrt(((A - self.mean_) ** 2).sum(axis=0) / len(A))
        zero = np.flatnonzero(self.scale_ == 0)
        if zero.size:
            raise DatasetError(f"columns {zero.tolist()} are constant; cannot standardize")
        self.n_features_in_ = A.shape[1]
        return self

    def transform(self, A):
        check_is_fitted(self, ["mean_", "scale_"])
        A = np.asarray(A, dtype=np.float64)
        if A.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {A.shape[-1]}")
        return (A - self.mean_) / self.scale_

    def inverse_transform(self, A):
        check_is_fitted(self, ["mean_", "scale_"])
        return np.asarray(A, dtype=np.float64) * self.scale_ + self.mean_


def standardize(dataset: Dataset) -> tuple[np.ndarray, Standardizer]:
    """Standardized (E, 2M) projections of every split, fit on train + validation."""
    scaler = Standardizer().fit(dataset.fit_pool())
    return scaler.transform(dataset.projections()), scaler


def add_noise(projections: ProjectionPair, snr_db: float, rng: np.random.Generator) -> ProjectionPair:
    """Additive Gaussian noise per frequency, std = RMS over the M beams / 10**(snr/20).

    Accepts batched vectors (..., M); ``snr_db = inf`` returns copies.
    """
    if math.isnan(snr_db):
        raise ValueError("SNR must not be NaN")
    out = []
    for A in (projections.A1, projections.A2):
        A = np.array(A, dtype=float)
        if math.isinf(snr_db) and snr_db > 0:
            out.append(A)
            continue
        sigma = np.sqrt((A ** 2).mean(axis=-1, keepdims=True)) / 10.0 ** (snr_db / 20.0)
        out.append(A + sigma * rng.standard_normal(A.shape))
    return ProjectionPair(*out)


def noisy_projections(A: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """`add_noise` on (..., 2M) rows ``[A1 | A2]``."""
    M = A.shape[-1] // 2
    p = add_noise(ProjectionPair(A[..., :M], A[..., M:]), snr_db, rng)
    return np.concatenate([p.A1, p.A2], axis=-1)


def example_csv(dataset: Dataset, e: int, grid: RoIGrid) -> str:
    lines = ["pixel,x_cm,y_cm,X,T"]
    for j, (x, y) in enumerate(grid.pixel_centers):
        lines.append(f"{j},{float(x)!r},{float(y)!r},{float(dataset.X[e, j])!r},{float(dataset.T[e, j])!r}")
    return "\n".join(lines) + "\n"
