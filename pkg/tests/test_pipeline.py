import math

import numpy as np
import pytest

from cstomo.network import Architecture, CrosstalkNet
from cstomo.pipeline import (EvalReport, NonFiniteLossError, OutputMapping, TrainConfig, batches,
                             ensemble_reconstruct, image_error, loss, loss_and_grad, relative_errors, snr_sweep,
                             throughput, train)
from gradcheck import numeric_grad, rel_error

MICRO = Architecture(num_views=2, beams_per_view=4, n_pixels=12, conv_filters=(3, 3, 2), smooth_filters=4,
                     decoder_widths=(8,))


def test_loss_perfect_prediction_is_zero(rng):
    x, t = rng.normal(size=(2, 3, 5))
    assert loss(x, t, x, t, 0.5) == 0


def test_loss_matches_loop(rng):
    xh, th, x, t = rng.normal(size=(4, 3, 5))
    tau = 0.3
    mx = sum((xh[b, j] - x[b, j]) ** 2 for b in range(3) for j in range(5)) / 5 / 3
    mt = sum((th[b, j] - t[b, j]) ** 2 for b in range(3) for j in range(5)) / 5 / 3
    assert loss(xh, th, x, t, tau) == pytest.approx(tau * mt + (1 - tau) * mx, rel=1e-12)


def test_loss_tau_one_ignores_concentration(rng):
    xh, th, x, t = rng.normal(size=(4, 3, 5))
    _, dx, _ = loss_and_grad(xh, th, x, t, 1.0)
    assert not dx.any()
    assert loss(xh, th, x, t, 1.0) == loss(xh + 5, th, x, t, 1.0)


def test_loss_gradient_matches_differences(rng):
    xh, th, x, t = rng.normal(size=(4, 3, 5))
    _, dx, dt = loss_and_grad(xh, th, x, t, 0.4)
    assert rel_error(dx, numeric_grad(lambda: loss(xh, th, x, t, 0.4), xh)).max() < 1e-6
    assert rel_error(dt, numeric_grad(lambda: loss(xh, th, x, t, 0.4), th)).max() < 1e-6


def test_loss_rejects_bad_tau():
    with pytest.raises(ValueError):
        loss(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), 1.5)


def test_output_mapping_roundtrip():
    m = OutputMapping.from_bounds(0.01, 0.12)
    assert m.hi == pytest.approx(0.34)
    assert m.to_net(0.01) == pytest.approx(-0.9) and m.to_net(0.34) == pytest.approx(0.9)
    v = np.linspace(0.01, 0.34, 7)
    np.testing.assert_allclose(m.to_physical(m.to_net(v)), v, rtol=1e-14)


def test_batches_cover_everything_without_singletons():
    for n in (1, 2, 64, 65, 129, 130):
        parts = batches(n, 64, np.random.default_rng(0))
        assert sorted(np.concatenate(parts).tolist()) == list(range(n))
        if n > 1:
            assert min(len(p) for p in parts) >= 2


def test_image_error_cases():
    t = np.array([[3.0, 4.0, 0.0]])
    assert image_error(t, t, t, t) == (0.0, 0.0)
    assert image_error(np.zeros((1, 3)), np.zeros((1, 3)), t, t) == (1.0, 1.0)
    pred = np.array([[3.0, 0.0, 0.0]])
    ie = image_error(pred, pred, t, t)
    assert ie == pytest.approx((0.8, 0.8))
    # the literal variant divides the concentration error by the reconstruction
    assert image_error(pred, pred, t, t, literal=True) == pytest.approx((4 / 3, 0.8))
    with pytest.raises(ValueError):
        relative_errors(t, np.zeros((1, 3)))


def _data(rng, n, noise=0.0):
    A = rng.normal(size=(n, 16))
    y = np.tanh(A[:, :12] * 0.5) * 0.5
    return A, np.hstack([y, -y])


def test_training_reduces_loss_and_keeps_best(rng):
    A, y = _data(rng, 40)
    Av, yv = _data(rng, 20)
    net = CrosstalkNet(MICRO, seed=0)
    res = train(net, A, y, Av, yv, TrainConfig(learning_rate=1e-2, epochs=15, batch_size=8, seed=1))
    assert len(res.history) == 16 and res.history[0][0] == 0
    vals = [h[2] for h in res.history]
    assert res.best_epoch == int(np.argmin(vals))
    assert vals[-1] < vals[0]
    assert res.steps == 15 * 5
    assert res.history_csv().splitlines()[0] == "epoch,train_loss,val_loss,lr"


def test_zero_learning_rate_leaves_parameters_and_flat_history(rng):
    A, y = _data(rng, 24)
    net = CrosstalkNet(MICRO, seed=0)
    before = {k: v.copy() for k, v in net.parameters().items()}
    res = train(net, A, y, A, y, TrainConfig(learning_rate=0.0, epochs=3, batch_size=24))
    for k, v in net.parameters().items():
        np.testing.assert_array_equal(v, before[k])
    # one full batch per epoch: train-mode loss depends only on the (frozen) parameters
    train_losses = [h[1] for h in res.history[1:]]
    assert max(train_losses) - min(train_losses) < 1e-12
    assert all(h[3] == 0.0 for h in res.history)


def test_training_is_deterministic(rng):
    A, y = _data(rng, 24)
    runs = []
    for _ in range(2):
        net = CrosstalkNet(MICRO, seed=5)
        res = train(net, A, y, A, y, TrainConfig(epochs=3, batch_size=8, seed=9))
        runs.append((res.history, res.final_state))
    assert runs[0][0] == runs[1][0]
    for k, v in runs[0][1][0].items():
        np.testing.assert_array_equal(v, runs[1][1][0][k])


def test_cosine_schedule():
    c = TrainConfig(learning_rate=1e-2, epochs=11, schedule="cosine", lr_floor=0.1)
    assert c.lr_at(1) == pytest.approx(1e-2)
    assert c.lr_at(11) == pytest.approx(1e-3)
    assert c.lr_at(6) == pytest.approx(5.5e-3)
    assert TrainConfig(learning_rate=1e-3).lr_at(7) == 1e-3
    with pytest.raises(ValueError):
        TrainConfig(epochs=3, schedule="step").lr_at(1)


def test_non_finite_loss_aborts(rng):
    A, y = _data(rng, 16)
    y[3, 2] = np.nan
    with pytest.raises(NonFiniteLossError):
        train(CrosstalkNet(MICRO), A, y, A, y, TrainConfig(epochs=1, batch_size=8))


class _Member:
    """Stand-in ensemble member with a fixed affine response."""

    def __init__(self, scale, key="k"):
        self.scale, self.key = scale, key

    def compatibility_key(self):
        return self.key

    def digest(self):
        return f"{self.scale:.17g}"

    def predict_fields(self, A):
        A = np.atleast_2d(A)
        return self.scale * A[:, :3], self.scale * A[:, 3:6] + 300


def test_ensemble_single_member_is_identity(rng):
    A = rng.normal(size=(4, 8))
    m = _Member(1.7)
    x, t = ensemble_reconstruct(A, [m])
    x1, t1 = m.predict_fields(A)
    np.testing.assert_array_equal(x, x1)
    np.testing.assert_array_equal(t, t1)
    x2, _ = ensemble_reconstruct(A, [m, m])
    np.testing.assert_array_equal(x2, x1)


def test_ensemble_mean_matches_loop_and_ignores_order(rng):
    A = rng.normal(size=(4, 8))
    members = [_Member(s) for s in (0.3, 1.1, 2.9)]
    x, t = ensemble_reconstruct(A, members)
    for e in range(4):
        for j in range(3):
            assert x[e, j] == pytest.approx(sum(m.scale * A[e, j] for m in members) / 3, rel=1e-12)
    xr, tr = ensemble_reconstruct(A, members[::-1])
    np.testing.assert_array_equal(x, xr)
    np.testing.assert_array_equal(t, tr)


def test_ensemble_rejects_mixed_members(rng):
    with pytest.raises(ValueError):
        ensemble_reconstruct(rng.normal(size=(2, 8)), [_Member(1.0, "a"), _Member(1.0, "b")])
    with pytest.raises(ValueError):
        ensemble_reconstruct(rng.normal(size=(2, 8)), [])


def test_snr_sweep_report(rng):
    A = rng.uniform(1, 2, size=(5, 8))
    m = _Member(1.0)
    tx, tt = m.predict_fields(A)
    rep = snr_sweep(A, tx, tt, [m], (20.0, 45.0), draws=10, seed=4)
    assert [r["snr_db"] for r in rep.rows] == ["inf", "20", "45"]
    assert rep.row(math.inf)["ie_conc"] == 0.0
    assert rep.row(20)["ie_conc"] > rep.row(45)["ie_conc"] > 0
    assert rep.csv().splitlines()[0] == "snr_db,ie_conc,ie_temp,stderr_conc,stderr_temp"
    again = snr_sweep(A, tx, tt, [m], (20.0, 45.0), draws=10, seed=4)
    assert again.csv() == rep.csv()
    vc, vt = rep.relative_variation(20, 45)
    assert vc > 0


def test_throughput_positive(rng):
    assert throughput([_Member(1.0)], rng.normal(size=(10, 8)), repeats=2) > 0
