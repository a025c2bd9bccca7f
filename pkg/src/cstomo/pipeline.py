"""Training loop, weighted loss, image errors, ensembles and SNR sweeps."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .network.model import CrosstalkNet
from .network.optim import Adam

log = logging.getLogger(__name__)

DEFAULT_SNRS = (20.0, 25.0, 30.0, 35.0, 40.0, 45.0)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OutputMapping:
    """Linear map between physical values in [lo, hi] and the network's [-0.9, 0.9]."""
    lo: float
    hi: float
    span: float = 0.9

    @classmethod
    def from_bounds(cls, vmin: float, vmax: float, max_inhomogeneities: int = 3) -> "OutputMapping":
        return cls(vmin, max_inhomogeneities * (vmax - vmin) + vmin)

    def to_net(self, v):
        return -self.span + 2 * self.span * (np.asarray(v, dtype=float) - self.lo) / (self.hi - self.lo)

    def to_physical(self, u):
        return self.lo + (np.asarray(u, dtype=float) + self.span) * (self.hi - self.lo) / (2 * self.span)


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.5
    learning_rate: float = 1e-3
    weight_decay: float = 2e-6
    epochs: int = 350
    batch_size: int = 64
    seed: int = 0
    ensemble_size: int = 3
    checkpoint_every: int = 0   # 0: keep only best and final
    schedule: str = "constant"  # or "cosine": decays to lr_floor * lr by the last epoch
    lr_floor: float = 0.01

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during `epoch` (1-based)."""
        if self.schedule == "constant" or self.epochs <= 1:
            return self.learning_rate
        if self.schedule != "cosine":
            raise ValueError(f"unknown learning-rate schedule {self.schedule!r}")
        frac = (epoch - 1) / (self.epochs - 1)
        lo = self.lr_floor * self.learning_rate
        return lo + 0.5 * (self.learning_rate - lo) * (1 + math.cos(math.pi * frac))


def loss_and_grad(xh, th, x, t, tau: float):
    """tau * MSE(T) + (1 - tau) * MSE(X), averaged over pixels then batch.

    Returns (loss, dL/dxh, dL/dth).
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    xh, th = np.atleast_2d(xh), np.atleast_2d(th)
    ex, et = xh - np.atleast_2d(x), th - np.atleast_2d(t)
    n = ex.size
    value = tau * float((et ** 2).sum()) / n + (1 - tau) * float((ex ** 2).sum()) / n
    return value, (1 - tau) * 2 * ex / n, tau * 2 * et / n


def loss(xh, th, x, t, tau: float) -> float:
    return loss_and_grad(xh, th, x, t, tau)[0]


def _split(v):
    n = v.shape[1] // 2
    return v[:, :n], v[:, n:]


def evaluate_loss(model: CrosstalkNet, inputs, targets, tau, batch_size=256) -> float:
    """Mean loss in inference mode, weighted by batch size."""
    total = 0.0
    for lo in range(0, len(inputs), batch_size):
        a1, a2 = _split(inputs[lo:lo + batch_size])
        x, t = _split(targets[lo:lo + batch_size])
        xh, th = model.forward(a1, a2, train=False)
        total += loss(xh, th, x, t, tau) * len(a1)
    return total / len(inputs)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing batch of one is folded into the previous one."""
    order = rng.permutation(n)
    cuts = list(range(batch_size, n, batch_size))
    if cuts and n - cuts[-1] < 2:
        cuts.pop()
    return np.split(order, cuts)


def snapshot(model: CrosstalkNet) -> tuple[dict, dict]:
    return ({k: v.copy() for k, v in model.parameters().items()},
            {k: v.copy() for k, v in model.buffers().items()})


@dataclass
class TrainResult:
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    best_state: tuple[dict, dict] | None = None
    best_epoch: int = 0
    final_state: tuple[dict, dict] | None = None
    steps: int = 0
    rng: np.random.Generator | None = None

    def history_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss,lr"]
        rows += [f"{e},{tr!r},{va!r},{lr!r}" for e, tr, va, lr in self.history]
        return "\n".join(rows) + "\n"


def train(model: CrosstalkNet, inputs, targets, val_inputs, val_targets, config: TrainConfig,
          augment=None, on_epoch=None) -> TrainResult:
    """Mini-batch Adam on the weighted MSE.

    `inputs` are standardized (E, 2M) projections and `targets` mapped (E, 2N)
    fields.  `augment(batch_idx, rng)`, when given, returns replacement inputs
    for the batch.  Epoch 0 of the history holds the untrained losses.
    """
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.learning_rate, weight_decay=config.weight_decay, decays=CrosstalkNet.decays)
    params = model.parameters()

    result = TrainResult(rng=rng)
    val0 = evaluate_loss(model, val_inputs, val_targets, config.tau)
    tr0 = evaluate_loss(model, inputs, targets, config.tau)
    result.history.append((0, tr0, val0, config.learning_rate))
    best = val0
    result.best_state = snapshot(model)

    for epoch in range(1, config.epochs + 1):
        opt.lr = config.lr_at(epoch)
        total, count = 0.0, 0
        for idx in batches(len(inputs), config.batch_size, rng):
            batch_in = augment(idx, rng) if augment is not None else inputs[idx]
            a1, a2 = _split(batch_in)
            x, t = _split(targets[idx])
            model.zero_grad()
            xh, th = model.forward(a1, a2, train=True)
            value, dx, dt = loss_and_grad(xh, th, x, t, config.tau)
            if not math.isfinite(value):
                raise NonFiniteLossError(f"loss became {value} at epoch {epoch}, step {result.steps}")
            model.backward(dx, dt)
            opt.step(params, model.gradients())
            result.steps += 1
            total += value * len(idx)
            count += len(idx)
        val = evaluate_loss(model, val_inputs, val_targets, config.tau)
        if not math.isfinite(val):
            raise NonFiniteLossError(f"validation loss became {val} at epoch {epoch}")
        result.history.append((epoch, total / count, val, opt.lr))
        log.info("epoch %d train %.6g val %.6g", epoch, total / count, val)
        if val < best:
            best, result.best_epoch = val, epoch
            result.best_state = snapshot(model)
        if on_epoch is not None:
            on_epoch(epoch, model, result)
    result.final_state = snapshot(model)
    return result


def relative_errors(pred, true, normalize_by_pred: bool = False) -> np.ndarray:
    """Per-example ||true - pred|| / ||true|| (or / ||pred||)."""
    pred, true = np.atleast_2d(pred), np.atleast_2d(true)
    ref = pred if normalize_by_pred else true
    denom = np.linalg.norm(ref, axis=-1)
    if np.any(denom == 0):
        raise ValueError("zero-norm reference field in image error")
    return np.linalg.norm(true - pred, axis=-1) / denom


def image_error(pred_X, pred_T, true_X, true_T, literal: bool = False) -> tuple[float, float]:
    """Mean relative L2 errors (IE_conc, IE_temp) over examples.

    With ``literal=True`` the concentration error is normalised by the
    reconstruction, the temperature error by the truth.
    """
    ie_c = relative_errors(pred_X, true_X, normalize_by_pred=literal).mean()
    ie_t = relative_errors(pred_T, true_T).mean()
    return float(ie_c), float(ie_t)


def ensemble_reconstruct(inputs, members) -> tuple[np.ndarray, np.ndarray]:
    """Mean of member reconstructions in physical units.

    Members are summed in order of their digests so the result does not
    depend on the order they are passed in.
    """
    members = list(members)
    if not members:
        raise ValueError("ensemble needs at least one member")
    keys = {m.compatibility_key() for m in members}
    if len(keys) != 1:
        raise ValueError("ensemble members have different architectures or geometry")
    members.sort(key=lambda m: m.digest())
    acc_x = acc_t = None
    for m in members:
        x, t = m.predict_fields(inputs)
        acc_x = x if acc_x is None else acc_x + x
        acc_t = t if acc_t is None else acc_t + t
    return acc_x / len(members), acc_t / len(members)


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    draws: int = 0
    n_examples: int = 0
    ensemble_size: int = 0
    seconds: float = 0.0
    reconstructions_per_second: float = 0.0
    per_example: dict = field(default_factory=dict)

    def csv(self) -> str:
        out = ["snr_db,ie_conc,ie_temp,stderr_conc,stderr_temp"]
        for r in self.rows:
            out.append(f"{r['snr_db']},{r['ie_conc']!r},{r['ie_temp']!r},{r['stderr_conc']!r},{r['stderr_temp']!r}")
        return "\n".join(out) + "\n"

    def row(self, snr_db):
        return next(r for r in self.rows if float(r["snr_db"]) == float(snr_db))

    def relative_variation(self, lo=20.0, hi=45.0) -> tuple[float, float]:
        """(IE(lo) - IE(hi)) / IE(hi) for concentration and temperature."""
        a, b = self.row(lo), self.row(hi)
        return ((a["ie_conc"] - b["ie_conc"]) / b["ie_conc"], (a["ie_temp"] - b["ie_temp"]) / b["ie_temp"])


def snr_sweep(raw_inputs, true_X, true_T, members, snr_levels=DEFAULT_SNRS, draws: int = 10,
              seed: int = 0, include_clean: bool = True, literal: bool = False) -> EvalReport:
    """Image errors of the ensemble under additive noise at each SNR.

    Noise for level ``k`` and example ``h`` comes from a stream seeded by
    ``(seed, k, h)``; the noise-free level uses a single draw.
    """
    from .datagen import noisy_projections

    raw_inputs = np.atleast_2d(np.asarray(raw_inputs, dtype=float))
    H = len(raw_inputs)
    levels = ([math.inf] if include_clean else []) + [float(s) for s in snr_levels]
    report = EvalReport(draws=draws, n_examples=H, ensemble_size=len(members))
    t0 = time.perf_counter()
    for k, snr in enumerate(levels):
        n_draw = 1 if math.isinf(snr) else draws
        noisy = np.empty((H, n_draw, raw_inputs.shape[1]))
        for h in range(H):
            rng = np.random.default_rng([seed, k, h])
            noisy[h] = noisy_projections(np.repeat(raw_inputs[h:h + 1], n_draw, axis=0), snr, rng)
        px, pt = ensemble_reconstruct(noisy.reshape(H * n_draw, -1), members)
        tx = np.repeat(np.asarray(true_X, float), n_draw, axis=0)
        tt = np.repeat(np.asarray(true_T, float), n_draw, axis=0)
        ec = relative_errors(px, tx, normalize_by_pred=literal).reshape(H, n_draw)
        et = relative_errors(pt, tt).reshape(H, n_draw)
        report.per_example[snr] = (ec.mean(axis=1), et.mean(axis=1))
        report.rows.append({
            "snr_db": "inf" if math.isinf(snr) else f"{snr:g}",
            "ie_conc": float(ec.mean()), "ie_temp": float(et.mean()),
            "stderr_conc": float(ec.std() / math.sqrt(ec.size)),
            "stderr_temp": float(et.std() / math.sqrt(et.size)),
        })
    report.seconds = time.perf_counter() - t0
    return report


def throughput(members, inputs, repeats: int = 5) -> float:
    """Ensemble reconstructions per second for batch inference on `inputs`."""
    inputs = np.atleast_2d(inputs)
    ensemble_reconstruct(inputs, members)
    t0 = time.perf_counter()
    for _ in range(repeats):
        ensemble_reconstruct(inputs, members)
    return repeats * len(inputs) / (time.perf_counter() - t0)
