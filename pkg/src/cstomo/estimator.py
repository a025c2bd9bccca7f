"""Estimator wrapper: raw projections in, physical concentration/temperature fields out."""
from __future__ import annotations

import ast
import hashlib
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datagen import Standardizer, noisy_projections
from .network import checkpoint as ckpt
from .network.model import Architecture, CrosstalkNet
from .pipeline import OutputMapping, TrainConfig, TrainResult, train

_TUPLE_PARAMS = ("conv_filters", "conv_padding", "decoder_widths", "x_bounds", "t_bounds")


class CrosstalkRegressor(RegressorMixin, BaseEstimator):
    """Dual-branch convolutional regressor for two-line absorption tomography.

    ``X`` rows are raw projections ``[A_nu1 | A_nu2]`` (length 2M) and ``y``
    rows are fields ``[X | T]`` (length 2N).  Standardization statistics are
    fit on the training rows plus any validation rows.  After `fit` the
    model holds the best-validation weights; ``final_state_`` keeps the last
    epoch.
    """

    def __init__(self, num_views=4, beams_per_view=8, conv_filters=(64, 128, 256), conv_padding=(1, 1, 0),
                 smooth_filters=64, decoder_widths=(8192, 4096, 2048), x_bounds=(0.01, 0.12),
                 t_bounds=(318.0, 1300.0), max_inhomogeneities=3, tau=0.5, learning_rate=1e-3,
                 weight_decay=2e-6, epochs=350, batch_size=64, random_state=0, bn_momentum=0.9,
                 bn_eps=1e-5, prelu_init=0.25, augment_snr_db=None, lr_schedule="constant", output_init="unit",
                 geometry_digest=""):
        self.num_views = num_views
        self.beams_per_view = beams_per_view
        self.conv_filters = conv_filters
        self.conv_padding = conv_padding
        self.smooth_filters = smooth_filters
        self.decoder_widths = decoder_widths
        self.x_bounds = x_bounds
        self.t_bounds = t_bounds
        self.max_inhomogeneities = max_inhomogeneities
        self.tau = tau
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.prelu_init = prelu_init
        self.augment_snr_db = augment_snr_db
        self.lr_schedule = lr_schedule
        self.output_init = output_init
        self.geometry_digest = geometry_digest

    def architecture(self, n_pixels: int) -> Architecture:
        return Architecture(self.num_views, self.beams_per_view, int(n_pixels), tuple(self.conv_filters),
                            tuple(self.conv_padding), 3, int(self.smooth_filters), tuple(self.decoder_widths),
                            self.bn_momentum, self.bn_eps, self.prelu_init)

    def _mappings(self):
        k = self.max_inhomogeneities
        return OutputMapping.from_bounds(*self.x_bounds, k), OutputMapping.from_bounds(*self.t_bounds, k)

    def _init_net(self, n_pixels: int):
        self.arch_ = self.architecture(n_pixels)
        self.net_ = CrosstalkNet(self.arch_, seed=[int(self.random_state), 0])
        self.x_map_, self.t_map_ = self._mappings()
        self.n_pixels_ = int(n_pixels)

    def _init_output_stage(self, targets):
        """Start the output batch norm at the per-pixel spread of arctanh(targets).

        With gamma = 1 the Tanh begins saturated and most of a short run is
        spent shrinking it.
        """
        u = np.arctanh(targets)
        N = self.n_pixels_
        stage = self.net_.stages[-1]
        for bn, block in ((stage.bn_x, u[:, :N]), (stage.bn_t, u[:, N:])):
            bn.params["beta"][:] = block.mean(axis=0)
            bn.params["gamma"][:] = np.maximum(block.std(axis=0), 1e-3)

    def _targets(self, y):
        N = y.shape[1] // 2
        return np.hstack([self.x_map_.to_net(y[:, :N]), self.t_map_.to_net(y[:, N:])])

    def fit(self, X, y, validation_data=None, on_epoch=None):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        self.__dict__.pop("_digest_cache", None)
        M = self.num_views * self.beams_per_view
        if X.shape[1] != 2 * M:
            raise ValueError(f"expected {2 * M} projection columns, got {X.shape[1]}")
        if y.shape[1] % 2:
            raise ValueError("targets must hold [X | T] with equal halves")
        if validation_data is None:
            Xv, yv = X, y
        else:
            Xv, yv = check_X_y(*validation_data, multi_output=True, dtype=np.float64)
        self.scaler_ = Standardizer().fit(np.vstack([X, Xv]) if validation_data is not None else X)
        if self.output_init not in ("unit", "data"):
            raise ValueError(f"output_init must be 'unit' or 'data', got {self.output_init!r}")
        self._init_net(y.shape[1] // 2)
        targets = self._targets(y)
        if self.output_init == "data":
            self._init_output_stage(targets)

        augment = None
        if self.augment_snr_db is not None:
            def augment(idx, rng):
                return self.scaler_.transform(noisy_projections(X[idx], float(self.augment_snr_db), rng))

        config = TrainConfig(self.tau, self.learning_rate, self.weight_decay, int(self.epochs),
                             int(self.batch_size), seed=[int(self.random_state), 1],
                             schedule=self.lr_schedule)
        result: TrainResult = train(self.net_, self.scaler_.transform(X), targets,
                                    self.scaler_.transform(Xv), self._targets(yv), config,
                                    augment=augment, on_epoch=on_epoch)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.final_state_ = result.final_state
        self.n_steps_ = result.steps
        self.rng_state_ = ckpt.rng_to_tensor(result.rng)
        self.train_result_ = result
        self.net_.load_state(*result.best_state)
        return self

    def predict_fields(self, X) -> tuple[np.ndarray, np.ndarray]:
        """(X_hat, T_hat) in physical units, inference-mode batch norm."""
        check_is_fitted(self, ["net_", "scaler_"])
        X = check_array(np.atleast_2d(X), dtype=np.float64)
        Z = self.scaler_.transform(X)
        M = Z.shape[1] // 2
        u, v = self.net_.forward(Z[:, :M], Z[:, M:], train=False)
        return self.x_map_.to_physical(u), self.t_map_.to_physical(v)

    def predict(self, X):
        x, t = self.predict_fields(X)
        return np.hstack([x, t])

    def score(self, X, y, sample_weight=None):
        """Negative mean of (IE_conc + IE_temp) / 2."""
        from .pipeline import image_error
        y = np.asarray(y, dtype=float)
        N = y.shape[1] // 2
        x, t = self.predict_fields(X)
        return -0.5 * sum(image_error(x, t, y[:, :N], y[:, N:]))

    # checkpoints ---------------------------------------------------------

    def _meta(self) -> dict[str, str]:
        meta = {k: (",".join(map(repr, v)) if k in _TUPLE_PARAMS else repr(v))
                for k, v in sorted(self.get_params().items()) if k != "geometry_digest"}
        meta["n_pixels"] = str(self.n_pixels_)
        return meta

    def config_digest(self) -> bytes:
        text = "".join(f"{k}={v}\n" for k, v in self._meta().items())
        return hashlib.sha256(text.encode()).digest()

    def compatibility_key(self) -> tuple:
        return (tuple(sorted(self.arch_.to_dict().items())), self.geometry_digest)

    def to_bytes(self, which: str = "best") -> bytes:
        check_is_fitted(self, ["net_", "scaler_"])
        if which == "final":
            params, buffers = self.final_state_
        else:
            params, buffers = self.net_.parameters(), self.net_.buffers()
        meta = self._meta()
        meta["geometry_digest"] = self.geometry_digest
        meta["state"] = which
        meta["best_epoch"] = str(getattr(self, "best_epoch_", 0))
        tensors = {f"param.{k}": v for k, v in params.items()}
        tensors.update({f"buffer.{k}": v for k, v in buffers.items()})
        tensors["standardizer.mean"] = self.scaler_.mean_
        tensors["standardizer.scale"] = self.scaler_.scale_
        tensors["output.x_range"] = np.array([self.x_map_.lo, self.x_map_.hi])
        tensors["output.t_range"] = np.array([self.t_map_.lo, self.t_map_.hi])
        tensors["rng.state"] = getattr(self, "rng_state_", np.zeros(10))
        tensors["train.step"] = np.array([float(getattr(self, "n_steps_", 0))])
        return ckpt.encode(self.config_digest(), meta, tensors)

    def digest(self) -> str:
        if not hasattr(self, "_digest_cache"):
            self._digest_cache = hashlib.sha256(self.to_bytes()).hexdigest()
        return self._digest_cache

    def save(self, path, which: str = "best") -> str:
        data = self.to_bytes(which)
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CrosstalkRegressor":
        digest, meta, tensors = ckpt.decode(data)
        kwargs = {}
        for k in cls._get_param_names():
            if k == "geometry_digest":
                kwargs[k] = meta.get(k, "")
            elif k in _TUPLE_PARAMS:
                kwargs[k] = tuple(ast.literal_eval(x) for x in meta[k].split(","))
            else:
                kwargs[k] = ast.literal_eval(meta[k])
        est = cls(**kwargs)
        est._init_net(int(meta["n_pixels"]))
        params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
        buffers = {k[len("buffer."):]: v for k, v in tensors.items() if k.startswith("buffer.")}
        est.net_.load_state(params, buffers)
        est.scaler_ = Standardizer()
        est.scaler_.mean_ = tensors["standardizer.mean"]
        est.scaler_.scale_ = tensors["standardizer.scale"]
        est.scaler_.n_features_in_ = est.scaler_.mean_.size
        est.x_map_ = OutputMapping(*tensors["output.x_range"])
        est.t_map_ = OutputMapping(*tensors["output.t_range"])
        est.rng_state_ = tensors["rng.state"]
        est.n_steps_ = int(tensors["train.step"][0])
        est.best_epoch_ = int(meta.get("best_epoch", 0))
        if digest != est.config_digest():
            raise ckpt.CheckpointError("checkpoint config digest does not match its metadata")
        return est

    @classmethod
    def load(cls, path) -> "CrosstalkRegressor":
        return cls.from_bytes(Path(path).read_bytes())
