"""Flat ``key=value`` run configuration shared by every command."""
from __future__ import annotations

import dataclasses
import hashlib
import math
import struct
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .datagen import DatasetConfig, PhantomBounds
from .geometry import GridConfig, SensorConfig
from .spectroscopy import TransitionSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # geometry
    num_views: int = 4
    beams_per_view: int = 8
    view_angles: tuple[float, ...] = (0.0, 45.0, 90.0, 135.0)
    beam_spacing: float = 1.80
    beam_span: float = 36.76
    octagon_side: float = 12.60
    pixel_pitch: float = 0.766
    square_roi: bool = False
    # spectroscopy; line parameters are placeholders, not database values
    nu1: float = 7185.6
    nu2: float = 7444.36
    sref1: float = 1.0
    sref2: float = 0.1
    epp1: float = 1045.06
    epp2: float = 1774.75
    tref: float = 296.0
    m: float = 1.5
    pressure: float = 1.0
    # datagen
    n_train: int = 13440
    n_val: int = 5760
    n_test: int = 27
    seed: int = 0
    x_min: float = 0.01
    x_max: float = 0.12
    t_min: float = 318.0
    t_max: float = 1300.0
    sigma_min: float = 0.08
    sigma_max: float = 0.25
    # network
    conv_filters: tuple[int, ...] = (64, 128, 256)
    conv_padding: tuple[int, ...] = (1, 1, 0)
    smooth_filters: int = 64
    decoder_widths: tuple[int, ...] = (8192, 4096, 2048)
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    prelu_init: float = 0.25
    # pipeline
    tau: float = 0.5
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"         # or "cosine"
    output_init: str = "unit"             # or "data": output BN starts at the target spread
    weight_decay: float = 2e-6
    epochs: int = 350
    batch_size: int = 64
    ensemble_size: int = 3
    snr_levels: tuple[float, ...] = (20.0, 25.0, 30.0, 35.0, 40.0, 45.0)
    noise_draws: int = 10
    ie_literal: bool = False
    augment_snr_db: float = math.inf      # inf disables noise augmentation
    threads: int = 0                      # 0: library default

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.output_init not in ("unit", "data"):
            raise ConfigError(f"output_init must be unit or data, got {self.output_init!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.batch_size < 2 or self.epochs < 0 or self.ensemble_size < 1 or self.noise_draws < 1:
            raise ConfigError("batch_size >= 2, epochs >= 0, ensemble_size >= 1 and noise_draws >= 1 required")

    # views onto module configs ------------------------------------------

    def sensor(self) -> SensorConfig:
        return SensorConfig(self.num_views, self.beams_per_view, self.view_angles, self.beam_spacing, self.beam_span)

    def grid(self) -> GridConfig:
        return GridConfig(self.octagon_side, self.pixel_pitch, self.square_roi)

    def specs(self) -> tuple[TransitionSpec, TransitionSpec]:
        return (TransitionSpec(self.nu1, self.sref1, self.epp1, self.tref, self.m),
                TransitionSpec(self.nu2, self.sref2, self.epp2, self.tref, self.m))

    def spec_bytes(self) -> bytes:
        return struct.pack("<9d", self.nu1, self.nu2, self.sref1, self.sref2, self.epp1, self.epp2,
                           self.tref, self.m, self.pressure)

    def dataset(self) -> DatasetConfig:
        return DatasetConfig(self.n_train, self.n_val, self.n_test, self.seed,
                             PhantomBounds(self.x_min, self.x_max, self.t_min, self.t_max),
                             sigma_range=(self.sigma_min, self.sigma_max), pressure=self.pressure)

    def estimator_params(self) -> dict:
        return dict(num_views=self.num_views, beams_per_view=self.beams_per_view,
                    conv_filters=self.conv_filters, conv_padding=self.conv_padding,
                    smooth_filters=self.smooth_filters, decoder_widths=self.decoder_widths,
                    x_bounds=(self.x_min, self.x_max), t_bounds=(self.t_min, self.t_max),
                    tau=self.tau, learning_rate=self.learning_rate, lr_schedule=self.lr_schedule,
                    output_init=self.output_init, weight_decay=self.weight_decay,
                    epochs=self.epochs, batch_size=self.batch_size, bn_momentum=self.bn_momentum,
                    bn_eps=self.bn_eps, prelu_init=self.prelu_init,
                    augment_snr_db=None if math.isinf(self.augment_snr_db) else self.augment_snr_db)

    # text form -------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs) -> "RunConfig":
        return self.replace(**parse_pairs(pairs))

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        pairs = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {line!r}")
            pairs.append(line)
        return (base or cls()).with_overrides(pairs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    return repr(v)


def _coerce(key: str, raw: str):
    typ = _TYPES[key]
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "str":
            return raw
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ.startswith("tuple[int"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if typ.startswith("tuple[float"):
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported config type {typ} for {key}")


def parse_pairs(pairs) -> dict:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def shipped(name: str) -> RunConfig:
    """One of the configs bundled with the package: ``paper`` or ``desk``."""
    text = resources.files("cstomo").joinpath("configs", f"{name}.cfg").read_text()
    return RunConfig.from_text(text)

