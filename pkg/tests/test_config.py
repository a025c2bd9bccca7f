import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cstomo.config import ConfigError, RunConfig, parse_pairs, shipped


def test_defaults_match_module_defaults():
    c = RunConfig()
    assert c.sensor().num_views == 4 and c.grid().pixel_pitch == 0.766
    assert (c.n_train, c.n_val, c.n_test) == (13440, 5760, 27)
    assert (c.tau, c.learning_rate, c.weight_decay, c.epochs) == (0.5, 1e-3, 2e-6, 350)
    assert c.specs()[0].frequency == 7185.6 and c.specs()[1].frequency == 7444.36


def test_snapshot_reparses_identically():
    c = RunConfig().with_overrides(["seed=9", "snr_levels=20,30", "ie_literal=true", "lr_schedule=cosine"])
    assert RunConfig.from_text(c.to_text()) == c
    assert RunConfig.from_text(c.to_text()).digest() == c.digest()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), lr=st.floats(1e-6, 1.0), pitch=st.floats(0.1, 5.0),
       widths=st.lists(st.integers(1, 4096), min_size=1, max_size=4))
def test_any_snapshot_roundtrips(seed, lr, pitch, widths):
    c = RunConfig(seed=seed, learning_rate=lr, pixel_pitch=pitch, decoder_widths=tuple(widths))
    assert RunConfig.from_text(c.to_text()) == c


def test_comments_and_blank_lines(tmp_path):
    path = tmp_path / "r.cfg"
    path.write_text("# header\n\nseed = 4   # trailing\nsquare_roi=yes\n")
    c = RunConfig.load(path)
    assert c.seed == 4 and c.square_roi is True


@pytest.mark.parametrize("pairs", [["nope=1"], ["seed"], ["seed=abc"], ["square_roi=maybe"],
                                   ["lr_schedule=step"], ["output_init=zero"], ["tau=2"], ["batch_size=1"]])
def test_bad_pairs_rejected(pairs):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(pairs)


def test_malformed_line_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_text("seed 4\n")


def test_shipped_configs():
    desk, paper = shipped("desk"), shipped("paper")
    assert desk.pixel_pitch == 1.521 and desk.conv_filters == (8, 16, 32) and desk.epochs == 100
    assert (desk.n_train, desk.n_val, desk.n_test, desk.batch_size) == (1500, 500, 27, 64)
    assert paper.decoder_widths == (8192, 4096, 2048) and paper.epochs == 350
    assert paper.output_init == "unit" and paper.lr_schedule == "constant"
    assert parse_pairs(["epochs=3"]) == {"epochs": 3}
