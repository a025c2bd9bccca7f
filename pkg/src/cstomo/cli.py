"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 I/O or malformed input,
4 incompatible artifacts (digest or dimension mismatch), 5 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import geometry as geo
from .config import ConfigError, RunConfig, shipped
from .datagen import Dataset, DatasetError, build_dataset, example_csv
from .estimator import CrosstalkRegressor
from .heatmaps import build_heatmaps
from .network.checkpoint import CheckpointError
from .network.optim import NonFiniteGradientError
from .pipeline import NonFiniteLossError, image_error, snr_sweep, throughput

log = logging.getLogger("cstomo")

FULL_SCALE_IE_35DB = (0.1198, 0.0714)


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    try:
        if args.config is None:
            cfg = RunConfig()
        elif args.config in ("paper", "desk") and not Path(args.config).exists():
            cfg = shipped(args.config)
        else:
            path = Path(args.config)
            if not path.is_file():
                raise CLIError(3, f"config file not found: {path}")
            cfg = RunConfig.load(path)
        cfg = cfg.with_overrides(args.set or [])
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        threads = args.threads if args.threads is not None else int(os.environ.get("CST_THREADS", "0") or 0)
        return cfg.replace(threads=threads)
    except ConfigError as exc:
        raise CLIError(2, str(exc)) from exc
    except ValueError as exc:
        raise CLIError(2, f"bad config: {exc}") from exc


def _out(args) -> Path:
    out = Path(args.out or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(3, f"cannot create output directory {out}: {exc}") from exc
    return out


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CLIError(3, f"cannot read {path}: {exc.strerror or exc}") from exc


def _geometry(cfg: RunConfig):
    try:
        layout, beams = geo.build_layout(cfg.sensor())
        grid = geo.build_grid(cfg.grid())
    except geo.GeometryError as exc:
        raise CLIError(2, str(exc)) from exc
    L = geo.build_sensitivity_matrix(layout, beams, grid, n_jobs=max(cfg.threads, 1))
    digest = geo.geometry_digest(layout, grid, L, cfg.spec_bytes())
    return layout, beams, grid, L, digest


def _load_dataset(path) -> Dataset:
    try:
        ds = Dataset.from_bytes(_read(path))
    except (DatasetError, ValueError) as exc:
        raise CLIError(3, f"{path}: {exc}") from exc
    mpath = Path(path).with_suffix(".manifest")
    if mpath.exists():
        from .datagen import read_manifest
        ds.manifest = read_manifest(mpath)
    return ds


def _load_members(paths, geometry_digest: bytes | None = None, n_pixels: int | None = None):
    members = []
    for p in paths:
        try:
            m = CrosstalkRegressor.from_bytes(_read(p))
        except (CheckpointError, KeyError, ValueError, SyntaxError) as exc:
            raise CLIError(3, f"{p}: not a valid checkpoint ({exc})") from exc
        if geometry_digest is not None and m.geometry_digest != geometry_digest.hex():
            raise CLIError(4, f"{p}: checkpoint was trained on a different geometry")
        if n_pixels is not None and m.n_pixels_ != n_pixels:
            raise CLIError(4, f"{p}: checkpoint expects {m.n_pixels_} pixels, grid has {n_pixels}")
        members.append(m)
    keys = {m.compatibility_key() for m in members}
    if len(keys) > 1:
        raise CLIError(4, "checkpoints do not share one architecture and geometry")
    return members


def _threads(cfg: RunConfig):
    if cfg.threads and cfg.threads > 0:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(cfg.threads)
    return contextlib.nullcontext()


# field export -------------------------------------------------------------

def grid_csv(image: np.ndarray) -> str:
    rows = []
    for row in image:
        rows.append(",".join("" if np.isnan(v) else repr(float(v)) for v in row))
    return "\n".join(rows) + "\n"


def write_pgm(path, image: np.ndarray) -> tuple[float, float]:
    """16-bit binary graymap; inactive pixels are 0, active ones scaled to 1..65535."""
    active = ~np.isnan(image)
    lo, hi = float(np.nanmin(image)), float(np.nanmax(image))
    scaled = np.zeros(image.shape, dtype=">u2")
    span = hi - lo if hi > lo else 1.0
    scaled[active] = 1 + np.round((image[active] - lo) / span * 65534).astype(np.int64)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n65535\n".encode())
        fh.write(scaled.tobytes())
    return lo, hi


def export_fields(out: Path, stem: str, grid: geo.RoIGrid, X: np.ndarray, T: np.ndarray) -> None:
    for name, values in (("X", X), ("T", T)):
        img = grid.to_image(values)
        (out / f"{stem}_{name}.csv").write_text(grid_csv(img))
        lo, hi = write_pgm(out / f"{stem}_{name}.pgm", img)
        (out / f"{stem}_{name}.txt").write_text(
            f"field={name}\nmin={lo!r}\nmax={hi!r}\nrows={grid.rows}\ncols={grid.cols}\n")


def projections_csv(A1, A2, cfg: RunConfig) -> str:
    lines = [f"nu1_{cfg.nu1!r},nu2_{cfg.nu2!r}"]
    lines += [f"{float(a)!r},{float(b)!r}" for a, b in zip(A1, A2)]
    return "\n".join(lines) + "\n"


def read_projections_csv(path, M: int) -> tuple[np.ndarray, np.ndarray]:
    text = _read(path).decode(errors="replace").strip().splitlines()
    if not text:
        raise CLIError(3, f"{path}: empty projection file")
    head = [h.strip().lower() for h in text[0].split(",")]
    if len(head) != 2 or not head[0].startswith("nu1") or not head[1].startswith("nu2"):
        raise CLIError(3, f"{path}: header must name the two frequencies as nu1...,nu2...")
    try:
        vals = np.array([[float(v) for v in line.split(",")] for line in text[1:]], dtype=float)
    except ValueError as exc:
        raise CLIError(3, f"{path}: malformed projection value ({exc})") from exc
    if vals.ndim != 2 or vals.shape[1] != 2 or not np.all(np.isfinite(vals)):
        raise CLIError(3, f"{path}: expected rows of two finite values")
    if len(vals) != M:
        raise CLIError(4, f"{path}: {len(vals)} beams given, sensor has {M}")
    return vals[:, 0], vals[:, 1]


def reconstruct_one(members, A1, A2):
    """Single-example ensemble reconstruction (the path shared by evaluate and reconstruct)."""
    from .pipeline import ensemble_reconstruct
    x, t = ensemble_reconstruct(np.concatenate([A1, A2])[None, :], members)
    return x[0], t[0]


# commands ------------------------------------------------------------------

def cmd_build_geometry(args) -> int:
    cfg = _config(args)
    out = _out(args)
    layout, beams, grid, L, _ = _geometry(cfg)
    try:
        L.save(out / "geometry.cstl")
        L.to_csv(out / "geometry.csv")
        (out / "geometry_summary.txt").write_text(geo.summary(layout, beams, grid, L))
        cfg.save(out / "resolved.cfg")
    except OSError as exc:
        raise CLIError(3, str(exc)) from exc
    print(f"M={layout.num_beams} N={grid.N} nonzeros={L.matrix.nnz} -> {out / 'geometry.cstl'}")
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    if args.count:
        cfg = cfg.replace(n_train=args.count[0], n_val=args.count[1], n_test=args.count[2])
    out = _out(args)
    layout, beams, grid, L, digest = _geometry(cfg)
    try:
        stored = geo.SensitivityMatrix.from_bytes(_read(args.matrix))
    except geo.GeometryError as exc:
        raise CLIError(3, f"{args.matrix}: {exc}") from exc
    if stored != L:
        raise CLIError(4, f"{args.matrix} does not match the geometry described by the config")
    try:
        ds = build_dataset(cfg.dataset(), layout, grid, L, cfg.specs(), digest)
    except DatasetError as exc:
        raise CLIError(5, str(exc)) from exc
    ds.save(out / "dataset.cstd")
    cfg.save(out / "resolved.cfg")
    print(f"{sum(ds.counts)} examples {ds.counts} -> {out / 'dataset.cstd'} sha256={ds.digest()}")
    return 0


def cmd_export(args) -> int:
    cfg = _config(args)
    out = _out(args)
    ds = _load_dataset(args.dataset)
    _, _, grid, _, digest = _geometry(cfg)
    if ds.geometry_digest != digest:
        raise CLIError(4, "dataset was generated for a different geometry")
    split = ds.indices(args.split)
    e = split.start + args.example
    if not split.start <= e < split.stop:
        raise CLIError(2, f"example {args.example} outside the {args.split} split")
    stem = f"{args.split}_{args.example:04d}"
    (out / f"{stem}_projections.csv").write_text(projections_csv(ds.A1[e], ds.A2[e], cfg))
    (out / f"{stem}_fields.csv").write_text(example_csv(ds, e, grid))
    print(out / f"{stem}_projections.csv")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    ds = _load_dataset(args.dataset)
    _, _, grid, _, digest = _geometry(cfg)
    if ds.geometry_digest != digest:
        raise CLIError(4, "dataset was generated for a different geometry")
    if ds.N != grid.N:
        raise CLIError(4, f"dataset has {ds.N} pixels, grid has {grid.N}")
    cfg.save(out / "resolved.cfg")
    seeds = [cfg.seed + k for k in range(args.members)]
    for seed in seeds:
        est = CrosstalkRegressor(**cfg.estimator_params(), random_state=seed, geometry_digest=digest.hex())
        try:
            with _threads(cfg):
                est.fit(ds.projections("train"), ds.fields("train"),
                        validation_data=(ds.projections("val"), ds.fields("val")))
        except (NonFiniteLossError, NonFiniteGradientError) as exc:
            raise CLIError(5, f"training diverged for seed {seed}: {exc}") from exc
        best = est.save(out / f"model_seed{seed}.cstw")
        est.save(out / f"model_seed{seed}.final.cstw", which="final")
        (out / f"history_seed{seed}.csv").write_text(est.train_result_.history_csv())
        h0, hN = est.history_[0], est.history_[-1]
        print(f"seed {seed}: val loss {h0[2]:.5g} -> {hN[2]:.5g} (best epoch {est.best_epoch_}) sha256={best}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    ds = _load_dataset(args.dataset)
    _, _, grid, _, digest = _geometry(cfg)
    if ds.geometry_digest != digest:
        raise CLIError(4, "dataset was generated for a different geometry")
    members = _load_members(args.checkpoints, digest, grid.N)
    test = ds.indices("test")
    A = ds.projections("test")
    with _threads(cfg):
        report = snr_sweep(A, ds.X[test], ds.T[test], members, cfg.snr_levels, cfg.noise_draws,
                           seed=cfg.seed, literal=cfg.ie_literal)
        singles = [image_error(*m.predict_fields(A), ds.X[test], ds.T[test], literal=cfg.ie_literal)
                   for m in members]
        rate = throughput(members, A)
    (out / "sweep.csv").write_text(report.csv())

    lines = [f"examples={report.n_examples}", f"ensemble_size={report.ensemble_size}",
             f"noise_draws={report.draws}", f"ie_denominator={'reconstruction' if cfg.ie_literal else 'truth'}"]
    for r in report.rows:
        lines.append(f"snr_{r['snr_db']}=ie_conc:{r['ie_conc']:.6f},ie_temp:{r['ie_temp']:.6f}")
    for seed_i, (c, t) in enumerate(singles):
        lines.append(f"single_member_{seed_i}_noise_free=ie_conc:{c:.6f},ie_temp:{t:.6f}")
    levels = [float(r["snr_db"]) for r in report.rows]
    if 20.0 in levels and 45.0 in levels:
        vc, vt = report.relative_variation(20.0, 45.0)
        lines.append(f"relative_variation_20_45=conc:{vc:.4f},temp:{vt:.4f}")
    lines.append(f"reference_full_scale_35db=ie_conc:{FULL_SCALE_IE_35DB[0]},ie_temp:{FULL_SCALE_IE_35DB[1]}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    (out / "throughput.txt").write_text(f"reconstructions_per_second={rate:.1f}\n")

    recon = out / "reconstructions"
    recon.mkdir(exist_ok=True)
    for h in range(test.stop - test.start):
        x, t = reconstruct_one(members, ds.A1[test.start + h], ds.A2[test.start + h])
        export_fields(recon, f"test_{h:04d}", grid, x, t)
    print(report.csv(), end="")
    print(f"throughput: {rate:.1f} reconstructions/s")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    out = _out(args)
    layout, _, grid, _, digest = _geometry(cfg)
    members = _load_members(args.checkpoints, digest, grid.N)
    for path in args.projections:
        A1, A2 = read_projections_csv(path, layout.num_beams)
        x, t = reconstruct_one(members, A1, A2)
        stem = Path(path).stem.removesuffix("_projections")
        export_fields(out, stem, grid, x, t)
        print(f"{path} -> {out / stem}_X.csv, {out / stem}_T.csv")
    return 0


def cmd_dump_heatmaps(args) -> int:
    cfg = _config(args)
    out = _out(args)
    M = cfg.num_views * cfg.beams_per_view
    if args.projections:
        A1, A2 = read_projections_csv(args.projections, M)
    elif args.dataset:
        ds = _load_dataset(args.dataset)
        if ds.M != M:
            raise CLIError(4, f"dataset has {ds.M} beams, config has {M}")
        A1, A2 = ds.A1[args.example], ds.A2[args.example]
    else:
        raise CLIError(2, "give --projections or --dataset")
    hm = build_heatmaps(A1, A2, cfg.num_views, cfg.beams_per_view)
    (out / "centrosymmetry.csv").write_text(grid_csv(hm.S[:, :, 0]))
    for ch in range(hm.P.shape[2]):
        (out / f"smoothness_ch{ch}.csv").write_text(grid_csv(hm.P[:, :, ch]))
    print(f"S {hm.S.shape}, P {hm.P.shape} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file, or 'paper' / 'desk' for a shipped one")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (default: current)")
    common.add_argument("--threads", type=int, help="BLAS/geometry threads (default: $CST_THREADS)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cstomo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-geometry", parents=[common], help="sensitivity matrix and geometry summary")
    p.set_defaults(func=cmd_build_geometry)

    p = sub.add_parser("generate", parents=[common], help="synthetic dataset")
    p.add_argument("--matrix", required=True, help="sensitivity-matrix file from build-geometry")
    p.add_argument("--count", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("export", parents=[common], help="write one dataset example as CSV")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=Dataset.SPLITS, default="test")
    p.add_argument("--example", type=int, default=0)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("train", parents=[common], help="train one model per seed")
    p.add_argument("--dataset", required=True)
    p.add_argument("--members", type=int, default=1, help="train seeds seed..seed+members-1")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="SNR sweep on the test split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reconstruct", parents=[common], help="fields from projection CSV files")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--projections", nargs="+", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("dump-heatmaps", parents=[common], help="heatmaps as CSV grids")
    p.add_argument("--projections")
    p.add_argument("--dataset")
    p.add_argument("--example", type=int, default=0)
    p.set_defaults(func=cmd_dump_heatmaps)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
