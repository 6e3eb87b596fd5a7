"""Per-metric CUSUM change detection and per-fragment scalar variance tracking.

The CUSUM accumulator follows s' = max(0, s + x - kappa) and fires when it
reaches the threshold h, resetting to zero on the trigger. The Kalman filter
tracks a latent variance under a random-walk process model with scalar
predict/update; negative posterior means are clamped to zero because the
tracked quantity is a variance.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import CalibrationError, ConfigurationError, DomainError


@dataclass(frozen=True)
class CusumConfig:
    kappa: float
    h: float

    def __post_init__(self) -> None:
        if self.h <= 0:
            raise ConfigurationError("CUSUM threshold h must be positive")


@dataclass(frozen=True)
class CusumState:
    s: float = 0.0

    def __post_init__(self) -> None:
        if self.s < 0:
            raise DomainError("CUSUM accumulator must be nonnegative")


def cusum_update(state: CusumState, x: float, cfg: CusumConfig) -> tuple[CusumState, bool]:
    """One detector step; on trigger the accumulator resets to zero."""
    s = max(0.0, state.s + x - cfg.kappa)
    if s >= cfg.h:
        return CusumState(0.0), True
    return CusumState(s), False


NullModel = Callable[[np.random.Generator, int], np.ndarray]


def _mc_arl(kappa: float, h: float, null_model: NullModel, rng: np.random.Generator,
            runs: int, max_len: int) -> float:
    """Monte-Carlo mean run length to first trigger under the null model."""
    s = np.zeros(runs)
    length = np.full(runs, max_len, dtype=np.int64)
    active = np.ones(runs, dtype=bool)
    for t in range(1, max_len + 1):
        n_active = int(active.sum())
        if n_active == 0:
            break
        x = null_model(rng, n_active)
        s_act = np.maximum(0.0, s[active] + x - kappa)
        fired = s_act >= h
        idx = np.flatnonzero(active)
        length[idx[fired]] = t
        s[idx] = s_act
        active[idx[fired]] = False
    return float(length.mean())


def calibrate_cusum_threshold(
    kappa: float,
    target_arl0: float,
    null_model: NullModel,
    seed: int,
    runs: int = 2000,
    h_lo: float = 0.01,
    h_hi: float = 100.0,
    max_iter: int = 30,
) -> float:
    """Bisection on h so the Monte-Carlo ARL under no change hits target_arl0.

    The run-length cap is 30x the target, which truncates a negligible tail
    once h is near the operating point.
    """
    if target_arl0 < 10:
        raise DomainError("target ARL0 must be >= 10")
    max_len = int(30 * target_arl0)

    def arl(h: float, salt: int) -> float:
        return _mc_arl(kappa, h, null_model, rngmod.stream(seed, "cusum-cal", salt), runs, max_len)

    lo, hi = h_lo, h_hi
    arl_lo = arl(lo, 0)
    if arl_lo > target_arl0:
        raise CalibrationError(f"ARL at h={lo} already {arl_lo:.1f} > target {target_arl0}")
    arl_hi = arl(hi, 1)
    if arl_hi < target_arl0:
        raise CalibrationError(f"ARL at h={hi} only {arl_hi:.1f} < target {target_arl0}")
    h = hi
    for it in range(max_iter):
        h = 0.5 * (lo + hi)
        val = arl(h, 2 + it)
        if abs(val - target_arl0) <= 0.08 * target_arl0:
            return h
        if val < target_arl0:
            lo = h
        else:
            hi = h
    # Bisection interval is tight by now; accept if within the +-20% contract.
    val = arl(h, max_iter + 2)
    if abs(val - target_arl0) <= 0.2 * target_arl0:
        return h
    raise CalibrationError(f"no h in [{h_lo}, {h_hi}] reaches ARL0 {target_arl0} (last {val:.1f})")


@dataclass(frozen=True)
class KalmanConfig:
    q: float
    r: float

    def __post_init__(self) -> None:
        if self.q < 0 or self.r < 0:
            raise ConfigurationError("noise variances must be nonnegative")


@dataclass(frozen=True)
class KalmanState:
    mean: float
    p: float

    def __post_init__(self) -> None:
        if self.mean < 0 or self.p < 0:
            raise DomainError("variance estimate and covariance must be nonnegative")


def kalman_step(state: KalmanState, z: float, cfg: KalmanConfig) -> KalmanState:
    """Scalar predict-update; the posterior mean is clamped at zero.

    With p_prior + r = 0 the observation is treated as exact (gain 1), which
    is the q = r = 0 degenerate case.
    """
    if not np.isfinite(z):
        raise DomainError("observation must be finite")
    p_prior = state.p + cfg.q
    denom = p_prior + cfg.r
    k = 1.0 if denom == 0.0 else p_prior / denom
    mean = max(0.0, state.mean + k * (z - state.mean))
    p = (1.0 - k) * p_prior
    return KalmanState(mean=mean, p=p)


def calibrate_process_noise(observations: np.ndarray) -> float:
    """Process-noise estimate from warmup data: variance of first differences."""
    obs = np.asarray(observations, dtype=float)
    if obs.size < 3:
        raise DomainError("need at least 3 warmup observations")
    return float(np.var(np.diff(obs), ddof=1))
