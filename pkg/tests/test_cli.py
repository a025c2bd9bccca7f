import hashlib

import numpy as np
import pytest

from cstomo.cli import main, read_projections_csv

TINY = ["--config", "desk", "--set", "n_train=24", "--set", "n_val=12", "--set", "n_test=3",
        "--set", "epochs=2", "--set", "batch_size=8", "--set", "conv_filters=2,2,2", "--set", "smooth_filters=2",
        "--set", "decoder_widths=16", "--set", "noise_draws=2", "--set", "snr_levels=20,45"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("build-geometry", *TINY, "--out", out) == 0
    assert run("generate", *TINY, "--matrix", out / "geometry.cstl", "--out", out) == 0
    assert run("train", *TINY, "--dataset", out / "dataset.cstd", "--members", 2, "--out", out) == 0
    assert run("evaluate", *TINY, "--dataset", out / "dataset.cstd", "--checkpoints",
               out / "model_seed0.cstw", out / "model_seed1.cstw", "--out", out) == 0
    return out


def test_build_geometry_default_reports_32_beams(tmp_path, capsys):
    assert run("build-geometry", "--out", tmp_path) == 0
    assert "M=32" in (tmp_path / "geometry_summary.txt").read_text()
    first = sha(tmp_path / "geometry.cstl")
    assert run("build-geometry", "--out", tmp_path) == 0
    assert sha(tmp_path / "geometry.cstl") == first
    assert (tmp_path / "resolved.cfg").exists()


def test_config_errors(tmp_path, capsys):
    assert run("build-geometry", "--config", tmp_path / "missing.cfg", "--out", tmp_path) == 3
    assert run("build-geometry", "--set", "bogus=1", "--out", tmp_path) == 2
    assert run("build-geometry", "--set", "pixel_pitch=-1", "--out", tmp_path) == 2
    assert "error:" in capsys.readouterr().err


def test_resolved_config_is_written_and_reparses(workdir):
    from cstomo.config import RunConfig
    cfg = RunConfig.load(workdir / "resolved.cfg")
    assert cfg.n_train == 24 and cfg.decoder_widths == (16,)


def test_generate_rejects_foreign_matrix(workdir, tmp_path):
    assert run("build-geometry", "--out", tmp_path) == 0      # full-resolution grid
    assert run("generate", *TINY, "--matrix", tmp_path / "geometry.cstl", "--out", tmp_path) == 4
    assert run("generate", *TINY, "--matrix", tmp_path / "nothing.cstl", "--out", tmp_path) == 3


def test_generate_count_override(workdir, tmp_path):
    assert run("generate", *TINY, "--matrix", workdir / "geometry.cstl", "--count", 8, 4, 2, "--out", tmp_path) == 0
    from cstomo.datagen import Dataset
    assert Dataset.load(tmp_path / "dataset.cstd").counts == (8, 4, 2)


def test_outputs_present(workdir):
    for name in ("sweep.csv", "report.txt", "throughput.txt", "history_seed0.csv", "model_seed0.final.cstw"):
        assert (workdir / name).exists(), name
    assert (workdir / "reconstructions" / "test_0002_T.pgm").exists()
    report = (workdir / "report.txt").read_text()
    assert "snr_20=" in report and "single_member_1_noise_free" in report
    assert "reconstructions_per_second" not in report


def test_members_have_distinct_digests(workdir):
    assert sha(workdir / "model_seed0.cstw") != sha(workdir / "model_seed1.cstw")


def test_roundtrip_export_reconstruct_matches_evaluate(workdir, tmp_path):
    assert run("export", *TINY, "--dataset", workdir / "dataset.cstd", "--example", 1, "--out", tmp_path) == 0
    proj = tmp_path / "test_0001_projections.csv"
    assert proj.read_text().startswith("nu1_")
    assert run("reconstruct", *TINY, "--checkpoints", workdir / "model_seed1.cstw", workdir / "model_seed0.cstw",
               "--projections", proj, "--out", tmp_path) == 0
    for suffix in ("X.csv", "T.csv", "X.pgm", "T.pgm", "X.txt", "T.txt"):
        assert (tmp_path / f"test_0001_{suffix}").read_bytes() == \
            (workdir / "reconstructions" / f"test_0001_{suffix}").read_bytes()


def test_pgm_header_and_sidecar(workdir):
    data = (workdir / "reconstructions" / "test_0000_X.pgm").read_bytes()
    assert data.startswith(b"P5\n20 20\n65535\n")
    assert len(data) == len(b"P5\n20 20\n65535\n") + 2 * 400
    side = dict(line.split("=") for line in (workdir / "reconstructions" / "test_0000_X.txt").read_text().split())
    assert float(side["min"]) <= float(side["max"])


def test_malformed_and_mismatched_projection_files(workdir, tmp_path):
    ck = workdir / "model_seed0.cstw"
    bad = tmp_path / "bad.csv"
    bad.write_text("nu1,nu2\n1.0,abc\n")
    assert run("reconstruct", *TINY, "--checkpoints", ck, "--projections", bad, "--out", tmp_path) == 3
    nohead = tmp_path / "nohead.csv"
    nohead.write_text("1.0,2.0\n" * 32)
    assert run("reconstruct", *TINY, "--checkpoints", ck, "--projections", nohead, "--out", tmp_path) == 3
    short = tmp_path / "short.csv"
    short.write_text("nu1,nu2\n" + "1.0,2.0\n" * 31)
    assert run("reconstruct", *TINY, "--checkpoints", ck, "--projections", short, "--out", tmp_path) == 4


def test_zero_projections_give_bounded_fields(workdir, tmp_path):
    zero = tmp_path / "zero.csv"
    zero.write_text("nu1,nu2\n" + "0,0\n" * 32)
    assert run("reconstruct", *TINY, "--checkpoints", workdir / "model_seed0.cstw",
               "--projections", zero, "--out", tmp_path) == 0
    X = np.genfromtxt(tmp_path / "zero_X.csv", delimiter=",")
    assert np.isfinite(X[~np.isnan(X)]).all() and np.nanmax(X) < 0.35


def test_checkpoint_for_other_geometry_rejected(workdir, tmp_path):
    assert run("evaluate", *TINY, "--set", "octagon_side=12.0", "--dataset", workdir / "dataset.cstd",
               "--checkpoints", workdir / "model_seed0.cstw", "--out", tmp_path) == 4
    junk = tmp_path / "junk.cstw"
    junk.write_bytes(b"not a checkpoint")
    assert run("reconstruct", *TINY, "--checkpoints", junk, "--projections", junk, "--out", tmp_path) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exits_5(workdir, tmp_path):
    assert run("train", *TINY, "--set", "learning_rate=1e300", "--dataset", workdir / "dataset.cstd",
               "--out", tmp_path) == 5


def test_lr_zero_smoke(workdir, tmp_path):
    assert run("train", *TINY, "--set", "learning_rate=0", "--dataset", workdir / "dataset.cstd",
               "--out", tmp_path) == 0


def test_dump_heatmaps(workdir, tmp_path):
    assert run("dump-heatmaps", *TINY, "--dataset", workdir / "dataset.cstd", "--out", tmp_path) == 0
    S = np.loadtxt(tmp_path / "centrosymmetry.csv", delimiter=",")
    P0 = np.loadtxt(tmp_path / "smoothness_ch0.csv", delimiter=",")
    assert S.shape == (8, 8) and P0.shape == (4, 8)
    assert run("dump-heatmaps", *TINY, "--out", tmp_path) == 2


def test_threads_env_default(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("CST_THREADS", "1")
    assert run("build-geometry", *TINY, "--out", tmp_path) == 0
    from cstomo.config import RunConfig
    assert RunConfig.load(tmp_path / "resolved.cfg").threads == 1
    assert run("build-geometry", *TINY, "--threads", 2, "--out", tmp_path) == 0
    assert RunConfig.load(tmp_path / "resolved.cfg").threads == 2


def test_read_projections_helper(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("nu1_7185.6,nu2_7444.36\n" + "".join(f"{i}.5,{i}\n" for i in range(32)))
    A1, A2 = read_projections_csv(p, 32)
    assert A1[3] == 3.5 and A2[31] == 31
