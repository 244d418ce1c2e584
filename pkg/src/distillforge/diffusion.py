"""Discrete forward-diffusion machinery shared by every distillation loss.

The forward process is the usual variance-preserving one:

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps,   eps ~ N(0, I)

with abar_t the cumulative product of (1 - beta_s).  Everything here is
plain float64 numpy; denoiser oracles implement :class:`DenoiserOracle`
and must behave as pure functions of their inputs.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError

VIEW_TAGS = ("front", "side", "back", "overhead")

# Default negative prompt used when texture configs enable negatives.
DEFAULT_NEGATIVE_TAG = "worst quality, low quality, semi-realistic"


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta, cumulative signal abar_t and sigma_t = sqrt(1-abar_t)."""

    step_count: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.beta.shape != (self.step_count,):
            raise ConfigurationError("beta must have one entry per step")

    def signal_and_noise(self, t: int) -> tuple[float, float]:
        """(sqrt(abar_t), sqrt(1-abar_t)) for a step index."""
        if not 0 <= t < self.step_count:
            raise ConfigurationError(f"step index t={t} outside [0, {self.step_count})")
        ab = float(self.alpha_bar[t])
        return np.sqrt(ab), np.sqrt(1.0 - ab)


def build_schedule(step_count: int, beta_start: float = 1e-4,
                   beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear-beta schedule; abar is the running product of (1 - beta)."""
    if step_count < 2:
        raise ConfigurationError(f"step_count must be >= 2, got {step_count}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, "
            f"beta_end={beta_end}")
    beta = np.linspace(beta_start, beta_end, step_count, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    sigma = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(step_count=step_count, beta=beta, alpha_bar=alpha_bar,
                         sigma=sigma)


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray,
              schedule: NoiseSchedule) -> np.ndarray:
    """Diffuse x0 to step t with the given noise draw."""
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    sa, sn = schedule.signal_and_noise(t)
    return sa * x0 + sn * eps


@dataclass(frozen=True)
class GuidanceSpec:
    """CFG weight W plus whether the unconditional branch swaps in the negative prompt."""

    weight: float
    use_negative: bool = False

    def __post_init__(self):
        if self.weight < 0:
            raise ConfigurationError(f"CFG weight must be >= 0, got {self.weight}")


@dataclass(frozen=True)
class Condition:
    """Prompt / view / landmark conditioning handed to a denoiser oracle.

    ``landmark`` is any object exposing a boolean ``contour_only`` attribute
    (see render.LandmarkMap); back views must carry contour-only landmarks.
    """

    prompt_tag: str
    negative_tag: Optional[str] = None
    view_tag: str = "front"
    landmark: object = None

    def __post_init__(self):
        if self.view_tag not in VIEW_TAGS:
            raise ConfigurationError(
                f"view_tag {self.view_tag!r} not one of {VIEW_TAGS}")
        if (self.view_tag == "back" and self.landmark is not None
                and not getattr(self.landmark, "contour_only", False)):
            raise ConfigurationError(
                "back view requires a contour-only landmark map")

    def unconditional(self, use_negative: bool) -> "Condition":
        """The CFG unconditional branch: empty prompt, or the negative prompt."""
        tag = self.negative_tag if (use_negative and self.negative_tag) else ""
        return replace(self, prompt_tag=tag)


@dataclass(frozen=True)
class TimePolicy:
    """Sampled-time window as fractions of T, with an optional one-shot anneal."""

    min_fraction: float = 0.02
    max_fraction: float = 0.98
    anneal_at_iter: Optional[int] = None
    annealed_max_fraction: Optional[float] = None

    def __post_init__(self):
        if not (0.0 < self.min_fraction < 1.0):
            raise ConfigurationError(
                f"min_fraction must be in (0,1), got {self.min_fraction}")
        if not (0.0 < self.max_fraction <= 1.0):
            raise ConfigurationError(
                f"max_fraction must be in (0,1], got {self.max_fraction}")
        if self.min_fraction >= self.max_fraction:
            raise ConfigurationError(
                f"min_fraction {self.min_fraction} must be < max_fraction "
                f"{self.max_fraction}")
        if self.annealed_max_fraction is not None:
            if self.annealed_max_fraction > self.max_fraction:
                raise ConfigurationError(
                    "annealed_max_fraction must be <= max_fraction")
            if self.annealed_max_fraction <= self.min_fraction:
                raise ConfigurationError(
                    "annealed_max_fraction must leave a nonempty window")

    def effective_max(self, iteration: int) -> float:
        if (self.anneal_at_iter is not None
                and self.annealed_max_fraction is not None
                and iteration >= self.anneal_at_iter):
            return self.annealed_max_fraction
        return self.max_fraction


def sample_time(iteration: int, policy: TimePolicy, step_count: int,
                rng: np.random.Generator) -> int:
    """Uniform integer step in [floor(min*T), floor(max_eff*T))."""
    lo = int(np.floor(policy.min_fraction * step_count))
    hi = int(np.floor(policy.effective_max(iteration) * step_count))
    if hi <= lo:
        raise ConfigurationError(
            f"time window [{lo}, {hi}) is empty for T={step_count}")
    return int(rng.integers(lo, hi))


def cfg_compose(eps_cond: np.ndarray, eps_uncond: np.ndarray,
                guidance: GuidanceSpec) -> np.ndarray:
    """eps_uncond + W * (eps_cond - eps_uncond).

    W=1 and W=0 return the corresponding input exactly (bitwise), so that
    equal-weight distillation steps are exact zero operators.
    """
    if eps_cond.shape != eps_uncond.shape:
        raise DimensionError(
            f"eps_cond shape {eps_cond.shape} != eps_uncond shape {eps_uncond.shape}")
    w = guidance.weight
    if w == 1.0:
        return eps_cond.copy()
    if w == 0.0:
        return eps_uncond.copy()
    return eps_uncond + w * (eps_cond - eps_uncond)


# omega(t) weightings for the distillation gradients.  The constant choice is
# the default; "one_minus_alpha_bar" is the common alternative and must be
# selected explicitly in the run manifest.
OMEGA_KINDS = ("one", "one_minus_alpha_bar")


def omega(schedule: NoiseSchedule, t: int, kind: str = "one") -> float:
    if kind == "one":
        return 1.0
    if kind == "one_minus_alpha_bar":
        return float(1.0 - schedule.alpha_bar[t])
    raise ConfigurationError(f"unknown omega kind {kind!r}; pick from {OMEGA_KINDS}")


class DenoiserOracle(abc.ABC):
    """The eps-predictor contract.

    ``predict_eps`` must be a pure function of (x_t, t, condition): no internal
    state mutation, identical inputs give identical outputs, and it must be
    safe to call concurrently.  Implementations treat x_t as float64.
    """

    @property
    @abc.abstractmethod
    def image_shape(self) -> tuple[int, ...]:
        """Declared shape of x_t (and of the returned noise prediction)."""

    @abc.abstractmethod
    def predict_eps(self, x_t: np.ndarray, t: int,
                    condition: Condition) -> np.ndarray:
        """Predict the Gaussian noise mixed into x_t."""

    def check_shape(self, x_t: np.ndarray) -> None:
        if tuple(x_t.shape) != tuple(self.image_shape):
            raise DimensionError(
                f"x_t shape {tuple(x_t.shape)} does not match oracle shape "
                f"{tuple(self.image_shape)}")
