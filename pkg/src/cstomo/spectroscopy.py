"""Two-line absorption forward model: fields -> absorbance density -> projections."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# second radiation constant hc/k, cm K
C2 = 1.4387769


@dataclass(frozen=True)
class TransitionSpec:
    """One absorption transition.

    Default values are placeholders chosen for a strong, monotone two-line
    ratio over 318-1300 K; swap in database values for physical work.
    """
    frequency: float
    s_ref: float = 1.0
    lower_state_energy: float = 0.0
    t_ref: float = 296.0
    partition_exponent: float = 1.5

    def __post_init__(self):
        if not self.s_ref > 0:
            raise ValueError("reference line strength must be positive")
        if not self.t_ref > 0:
            raise ValueError("reference temperature must be positive")


DEFAULT_SPECS = (
    TransitionSpec(frequency=7185.6, s_ref=1.0, lower_state_energy=1045.06),
    TransitionSpec(frequency=7444.36, s_ref=0.1, lower_state_energy=1774.75),
)


@dataclass(frozen=True)
class FieldPair:
    X: np.ndarray   # molar fraction per pixel
    T: np.ndarray   # temperature per pixel, K
    P: float = 1.0  # uniform pressure, atm

    def __post_init__(self):
        X, T = np.asarray(self.X, dtype=float), np.asarray(self.T, dtype=float)
        if X.shape != T.shape:
            raise ValueError(f"X and T shapes differ: {X.shape} vs {T.shape}")
        if np.any(X < 0) or np.any(X > 1):
            raise ValueError("molar fraction outside [0, 1]")
        if np.any(T <= 0):
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "T", T)


@dataclass(frozen=True)
class ProjectionPair:
    A1: np.ndarray
    A2: np.ndarray


def line_strength(spec: TransitionSpec, T):
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("temperature must be positive")
    return (spec.s_ref * (spec.t_ref / T) ** spec.partition_exponent
            * np.exp(-C2 * spec.lower_state_energy * (1.0 / T - 1.0 / spec.t_ref)))


def absorbance_density(fields: FieldPair, spec: TransitionSpec) -> np.ndarray:
    return fields.P * fields.X * line_strength(spec, fields.T)


def project(L, a) -> np.ndarray:
    """Path-integrated absorbance ``L @ a``; `a` may carry leading batch axes."""
    a = np.asarray(a, dtype=float)
    n = L.shape[1]
    if a.shape[-1] != n:
        raise ValueError(f"absorbance density has {a.shape[-1]} pixels, matrix expects {n}")
    mat = getattr(L, "matrix", L)
    flat = a.reshape(-1, n)
    return np.asarray((mat @ flat.T).T).reshape(a.shape[:-1] + (L.shape[0],))


def forward(fields: FieldPair, L, specs=DEFAULT_SPECS) -> ProjectionPair:
    s1, s2 = specs
    return ProjectionPair(project(L, absorbance_density(fields, s1)),
                          project(L, absorbance_density(fields, s2)))


def within_view_steps(A, beams_per_view: int) -> np.ndarray:
    """|A_r - A_{r-1}| for adjacent beams of each view, shape (..., Q, R-1)."""
    A = np.asarray(A)
    blocks = A.reshape(A.shape[:-1] + (-1, beams_per_view))
    return np.abs(np.diff(blocks, axis=-1))
