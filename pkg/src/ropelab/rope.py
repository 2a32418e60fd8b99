"""Rotary frequency basis, base scaling vectors, and the rotary transform.

The frequency basis uses zero-based plane indices j = 0 .. d_k/2 - 1 with
theta_j = base**(-2j/d_k), so the top frequency is exactly 1 and scaling
methods that promise "highest frequency unchanged" (NTK) hold exactly.

Scaling methods differ only in the per-plane multiplier vector alpha:
  pi           alpha_j = 1/t                          t = C'/C
  ntk          alpha_j = kappa**(-2j/d_k)             kappa = t**(d_k/(d_k-2))
  dynamic_ntk  ntk evaluated at t_eff = s*max(C', C_test)/C - (s-1), s = C'/(2C)
  yarn         alpha_j = ((1-gamma_j)/t + gamma_j)/sqrt(T), ramp gamma on theta_j
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import DTYPE, Tensor, ShapeError, rotate_pairs

DEFAULT_BASE = 10000.0

SCALING_METHODS = ("none", "pi", "ntk", "dynamic_ntk", "yarn")


@dataclass(frozen=True)
class FrequencyBasis:
    d_k: int
    base: float
    theta: np.ndarray  # [d_k/2], strictly decreasing, theta[0] == 1

    def __post_init__(self):
        if self.d_k % 2 or self.d_k <= 0:
            raise ShapeError(f"head dim must be even and positive, got {self.d_k}")


@dataclass(frozen=True)
class FrequencyScaling:
    method: str
    alpha: np.ndarray  # [d_k/2] per-plane multipliers
    C: int
    C_prime: int
    t: float
    s: Optional[float] = None
    p: Optional[float] = None
    q: Optional[float] = None
    T: Optional[float] = None


def frequency_basis(d_k: int, base: float = DEFAULT_BASE) -> FrequencyBasis:
    if d_k % 2 or d_k <= 0:
        raise ShapeError(f"head dim must be even and positive, got {d_k}")
    if base <= 1.0:
        raise ValueError(f"rope base must exceed 1, got {base}")
    j = np.arange(d_k // 2, dtype=DTYPE)
    theta = base ** (-2.0 * j / d_k)
    return FrequencyBasis(d_k=d_k, base=float(base), theta=theta)


def scaling_none(d_k: int, C: int = 0, C_prime: int = 0) -> FrequencyScaling:
    return FrequencyScaling(method="none", alpha=np.ones(d_k // 2, dtype=DTYPE),
                            C=C, C_prime=C_prime, t=1.0)


def scaling_pi(C: int, C_prime: int, d_k: int) -> FrequencyScaling:
    _check_extension(C, C_prime)
    t = C_prime / C
    alpha = np.full(d_k // 2, 1.0 / t, dtype=DTYPE)
    return FrequencyScaling(method="pi", alpha=alpha, C=C, C_prime=C_prime, t=t)


def ntk_alpha(t: float, d_k: int) -> np.ndarray:
    """NTK per-plane multipliers for target-length ratio t."""
    if d_k <= 2:
        raise ValueError(f"ntk scaling needs d_k > 2, got {d_k}")
    kappa = t ** (d_k / (d_k - 2))
    j = np.arange(d_k // 2, dtype=DTYPE)
    return kappa ** (-2.0 * j / d_k)


def scaling_ntk(C: int, C_prime: int, d_k: int,
                t_override: Optional[float] = None) -> FrequencyScaling:
    """Fixed-ratio NTK scaling; `t_override` substitutes the effective ratio
    (used by the dynamic variant and by grid-searched factors)."""
    _check_extension(C, C_prime)
    t = C_prime / C if t_override is None else float(t_override)
    return FrequencyScaling(method="ntk", alpha=ntk_alpha(t, d_k),
                            C=C, C_prime=C_prime, t=t)


def dynamic_ntk_effective_t(C: int, C_prime: int, C_test: int) -> float:
    """Inference-time ratio: s * max(C', C_test)/C - (s - 1) with s = C'/(2C)."""
    if C <= 0 or C_prime <= 0 or C_test < 1:
        raise ValueError("context lengths must be positive")
    s = C_prime / (2.0 * C)
    return s * max(C_prime, C_test) / C - (s - 1.0)


def scaling_dynamic_ntk(C: int, C_prime: int, d_k: int, C_test: int,
                        factor_override: Optional[float] = None) -> FrequencyScaling:
    _check_extension(C, C_prime)
    t_eff = dynamic_ntk_effective_t(C, C_prime, C_test) if factor_override is None \
        else float(factor_override)
    s = C_prime / (2.0 * C)
    return FrequencyScaling(method="dynamic_ntk", alpha=ntk_alpha(t_eff, d_k),
                            C=C, C_prime=C_prime, t=t_eff, s=s)


def yarn_ramp(theta_j, p: float, q: float):
    """Per-plane interpolation gate: 0 below p, 1 above q, linear between."""
    if p >= q:
        raise ValueError(f"ramp thresholds need p < q, got p={p}, q={q}")
    theta_j = np.asarray(theta_j, dtype=DTYPE)
    gamma = np.clip((theta_j - p) / (q - p), 0.0, 1.0)
    return float(gamma) if gamma.ndim == 0 else gamma


def yarn_defaults(C: int, t: float) -> tuple[float, float, float]:
    """Ramp thresholds from wavelength bounds and the default temperature.

    Planes whose rotation period exceeds C interpolate fully (gamma = 0,
    theta < 2*pi/C); planes with period under C/32 are untouched
    (gamma = 1, theta > 64*pi/C). T follows (0.1*ln(t) + 1)**2.
    """
    p = 2.0 * math.pi / C
    q = 64.0 * math.pi / C
    T = (0.1 * math.log(max(t, 1.0)) + 1.0) ** 2
    return p, q, T


def scaling_yarn(C: int, C_prime: int, d_k: int,
                 p: Optional[float] = None, q: Optional[float] = None,
                 T: Optional[float] = None,
                 base: float = DEFAULT_BASE) -> FrequencyScaling:
    _check_extension(C, C_prime)
    t = C_prime / C
    dp, dq, dT = yarn_defaults(C, t)
    p = dp if p is None else float(p)
    q = dq if q is None else float(q)
    T = dT if T is None else float(T)
    if T <= 0:
        raise ValueError(f"temperature must be positive, got {T}")
    theta = frequency_basis(d_k, base).theta
    gamma = yarn_ramp(theta, p, q)
    alpha = ((1.0 - gamma) * (1.0 / t) + gamma) / math.sqrt(T)
    return FrequencyScaling(method="yarn", alpha=alpha, C=C, C_prime=C_prime,
                            t=t, p=p, q=q, T=T)


def _check_extension(C: int, C_prime: int) -> None:
    if C < 1:
        raise ValueError(f"pretrain context must be >= 1, got {C}")
    if C_prime < C:
        raise ValueError(f"target context {C_prime} below pretrain context {C}")


# -- the rotary transform ---------------------------------------------------


def rope_angles(positions, basis: FrequencyBasis,
                scaling: Optional[FrequencyScaling] = None) -> np.ndarray:
    """Angle table positions[...] x (alpha * theta): shape positions.shape + (d_k/2,)."""
    rates = basis.theta if scaling is None else scaling.alpha * basis.theta
    positions = np.asarray(positions, dtype=DTYPE)
    return positions[..., None] * rates


def apply_rope(x, position, basis: FrequencyBasis,
               scaling: Optional[FrequencyScaling] = None) -> Tensor:
    """Rotate each 2-plane of the trailing axis by position * alpha_j * theta_j.

    `position` may be a single integer (applied to every row) or an array
    matching x's second-to-last extent (one position per row).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != basis.d_k:
        raise ShapeError(f"trailing extent {x.shape[-1]} != head dim {basis.d_k}")
    angles = rope_angles(position, basis, scaling)
    return rotate_pairs(x, angles)


# -- model-facing policy ----------------------------------------------------


@dataclass
class ScalingPolicy:
    """Recipe for building the scaling vector at a given evaluation length.

    dynamic_ntk resolves its ratio from the observed sequence length, so
    the policy (not a fixed vector) is what a model carries around.
    `factor` > 0 pins the effective ratio regardless of method formula
    (grid-searched factors; the paper-table values are reproducible only
    this way).
    """
    method: str = "none"
    C: int = 0
    C_prime: int = 0
    factor: float = 0.0
    yarn_p: Optional[float] = None
    yarn_q: Optional[float] = None
    yarn_T: Optional[float] = None

    def __post_init__(self):
        if self.method not in SCALING_METHODS:
            raise ValueError(f"unknown scaling method {self.method!r}; "
                             f"expected one of {SCALING_METHODS}")

    def resolve(self, d_k: int, seq_len: int) -> FrequencyScaling:
        if self.method == "none":
            return scaling_none(d_k, self.C, self.C_prime)
        if self.method == "pi":
            return scaling_pi(self.C, self.C_prime, d_k)
        if self.method == "ntk":
            override = self.factor if self.factor > 0 else None
            return scaling_ntk(self.C, self.C_prime, d_k, t_override=override)
        if self.method == "dynamic_ntk":
            override = self.factor if self.factor > 0 else None
            return scaling_dynamic_ntk(self.C, self.C_prime, d_k, C_test=seq_len,
                                       factor_override=override)
        return scaling_yarn(self.C, self.C_prime, d_k,
                            p=self.yarn_p, q=self.yarn_q, T=self.yarn_T)


__all__ = [
    "DEFAULT_BASE", "SCALING_METHODS", "FrequencyBasis", "FrequencyScaling",
    "frequency_basis", "scaling_none", "scaling_pi", "ntk_alpha", "scaling_ntk",
    "dynamic_ntk_effective_t", "scaling_dynamic_ntk", "yarn_ramp",
    "yarn_defaults", "scaling_yarn", "rope_angles", "apply_rope",
    "ScalingPolicy",
]
