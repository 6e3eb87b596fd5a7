"""Entropy-gated estimator switching.

Two stitching estimators are modeled by their fitted error laws: a
shadows-style estimator with MSE a/s and an MLE-style estimator with MSE
b/s^2 plus a squared entropy-dependent bias. The switch picks whichever has
the lower predicted MSE at the fragment's shot count and pilot entropy,
favoring MLE on ties.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .errors import ConfigurationError, DomainError, FitError


class EstimatorChoice(enum.Enum):
    SHADOWS = "Shadows"
    MLE = "MLE"


@dataclass(frozen=True)
class PilotStats:
    counts: tuple[int, ...]
    pilot_fraction: float = 0.01

    def __post_init__(self) -> None:
        if any(c < 0 for c in self.counts):
            raise DomainError("counts must be nonnegative")
        if sum(self.counts) < 1:
            raise DomainError("pilot histogram is empty")
        if not 0 < self.pilot_fraction < 1:
            raise ConfigurationError("pilot fraction must be in (0,1)")

    @property
    def entropy_bits(self) -> float:
        return pilot_entropy(self.counts)


@dataclass(frozen=True)
class CascadeFit:
    """Fitted error-law parameters; bias(H) = b0 * max(0, H - h_thr)."""

    alpha_shadows: float
    beta_mle: float
    bias_b0: float = 0.05
    bias_h_thr: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha_shadows <= 0 or self.beta_mle <= 0:
            raise ConfigurationError("alpha and beta must be positive")
        if self.bias_b0 < 0 or self.bias_h_thr < 0:
            raise ConfigurationError("bias parameters must be nonnegative")

    def bias(self, entropy_bits: float) -> float:
        return self.bias_b0 * max(0.0, entropy_bits - self.bias_h_thr)


def pilot_entropy(counts: Sequence[int]) -> float:
    """Plug-in Shannon entropy in bits of the empirical outcome distribution."""
    arr = np.asarray(counts, dtype=float)
    if arr.size == 0 or arr.sum() < 1:
        raise DomainError("pilot histogram is empty")
    if (arr < 0).any():
        raise DomainError("counts must be nonnegative")
    p = arr[arr > 0] / arr.sum()
    return float(-(p * np.log2(p)).sum())


def pilot_budget(fragment_shots: int, fraction: float = 0.01) -> int:
    """Pilot shots deducted from the fragment budget: ceil(fraction * shots)."""
    if fragment_shots < 1:
        raise DomainError("fragment budget must be >= 1")
    return math.ceil(fraction * fragment_shots)


def predict_mse(fit: CascadeFit, s: int, entropy_bits: float) -> tuple[float, float]:
    """(mse_shadows, mse_mle) at shot count s and pilot entropy."""
    if s < 1:
        raise DomainError("shot count must be >= 1")
    mse_shadows = fit.alpha_shadows / s
    mse_mle = fit.beta_mle / s**2 + fit.bias(entropy_bits) ** 2
    return mse_shadows, mse_mle


def choose_estimator(fit: CascadeFit, s: int, entropy_bits: float) -> EstimatorChoice:
    """MLE iff its predicted MSE is <= the shadows MSE (ties favor MLE)."""
    mse_shadows, mse_mle = predict_mse(fit, s, entropy_bits)
    return EstimatorChoice.MLE if mse_mle <= mse_shadows else EstimatorChoice.SHADOWS


def crossover_shots(fit: CascadeFit, entropy_bits: float) -> int | None:
    """Smallest shot count where MLE's predicted MSE drops to the shadows level.

    None means "never": the bias floor alone blocks the inequality for every
    s. With zero bias the cross-over is ceil(beta/alpha).
    """
    a, b = fit.alpha_shadows, fit.beta_mle
    bias2 = fit.bias(entropy_bits) ** 2
    if bias2 == 0.0:
        return max(1, math.ceil(b / a))
    # bias2*s^2 - a*s + b <= 0 from multiplying the inequality by s^2.
    disc = a * a - 4.0 * b * bias2
    if disc < 0:
        return None
    root = math.sqrt(disc)
    lo = (a - root) / (2.0 * bias2)
    hi = (a + root) / (2.0 * bias2)
    s = max(1, math.ceil(lo - 1e-12))
    if s > math.floor(hi + 1e-12):
        return None
    return s


def fit_from_pilots(
    shadows_samples: Sequence[tuple[float, float, float]],
    mle_samples: Sequence[tuple[float, float, float]],
    h_thr_grid: int = 33,
) -> CascadeFit:
    """Least-squares fit of the two error laws from (shots, entropy, sq_error) rows.

    The shadows arm fits alpha against 1/s (through the origin) and is
    rejected when its log-log slope is inconsistent with the 1/s form. The
    MLE arm fits (beta, b0^2) by nonnegative least squares on [1/s^2,
    max(0, H - h_thr)^2] over a grid of thresholds.
    """
    for name, samples in (("shadows", shadows_samples), ("mle", mle_samples)):
        if len({s for s, _, _ in samples}) < 3:
            raise FitError(f"{name} arm needs >= 3 distinct shot counts")

    s_sh = np.array([row[0] for row in shadows_samples], dtype=float)
    e_sh = np.array([row[2] for row in shadows_samples], dtype=float)
    if (e_sh < 0).any():
        raise FitError("squared errors must be nonnegative")
    x = 1.0 / s_sh
    alpha = float((e_sh * x).sum() / (x * x).sum())
    if alpha <= 0:
        raise FitError("shadows errors fit a nonpositive alpha")
    slope = float(np.polyfit(np.log(s_sh), np.log(np.maximum(e_sh, 1e-300)), 1)[0])
    if abs(slope + 1.0) > 0.5:
        raise FitError(f"shadows errors inconsistent with 1/s (log-log slope {slope:.2f})")

    s_ml = np.array([row[0] for row in mle_samples], dtype=float)
    h_ml = np.array([row[1] for row in mle_samples], dtype=float)
    e_ml = np.array([row[2] for row in mle_samples], dtype=float)
    best: tuple[float, float, float, float] | None = None
    for h_thr in np.linspace(0.0, max(h_ml.max(), 1e-9), h_thr_grid):
        g2 = np.maximum(0.0, h_ml - h_thr) ** 2
        design = np.column_stack([1.0 / s_ml**2, g2])
        coef, resid = nnls(design, e_ml)
        if best is None or resid < best[0]:
            best = (resid, float(coef[0]), float(coef[1]), float(h_thr))
    assert best is not None
    _, beta, b0_sq, h_thr = best
    if beta <= 0:
        raise FitError("mle errors fit a nonpositive beta")
    return CascadeFit(
        alpha_shadows=alpha,
        beta_mle=beta,
        bias_b0=math.sqrt(b0_sq),
        bias_h_thr=h_thr,
    )
