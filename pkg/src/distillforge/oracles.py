"""Analytic denoiser oracles with exact, closed-form eps-predictions.

Derivation used throughout (variance-preserving forward process):

    x_t = sqrt(abar) * x0 + sqrt(1-abar) * eps,   x0 ~ N(mu, s0^2 I)

so the diffused marginal is Gaussian,

    x_t ~ N(sqrt(abar) * mu, v I),   v = abar * s0^2 + (1 - abar),

its score is grad log p_t(x_t) = -(x_t - sqrt(abar) mu) / v, and the optimal
eps-prediction follows from eps = -sqrt(1-abar) * score:

    eps*(x_t, t) = sqrt(1-abar) * (x_t - sqrt(abar) mu) / v.

Mixtures combine the per-component predictions with posterior
responsibilities of the diffused components, computed in the log domain.

The expression is evaluated in the canonical form

    eps = (x_t - sa * mu) * (sn / v)

(sa = sqrt(abar), sn = sqrt(1-abar)); the remote-oracle bridge mirrors this
form so both sides produce bit-identical float64, hence identical float32
on the wire.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .diffusion import Condition, DenoiserOracle, NoiseSchedule
from .errors import ConfigurationError, OracleError


def gaussian_eps(x_t: np.ndarray, mu: np.ndarray, variance: float,
                 alpha_bar: float) -> np.ndarray:
    """Closed-form optimal eps for x0 ~ N(mu, variance*I); see module docstring."""
    sa = np.sqrt(alpha_bar)
    sn = np.sqrt(1.0 - alpha_bar)
    v = alpha_bar * variance + (1.0 - alpha_bar)
    return (x_t - sa * mu) * (sn / v)


class GaussianOracle(DenoiserOracle):
    """Per-condition-tag Gaussian target distributions.

    All tags share ``variance`` unless ``variance_by_condition`` overrides
    individual tags; a broader unconditional branch is what gives guided
    distillation steps a finite fixed point, so the override is the normal
    way to model "the empty prompt knows less".
    """

    def __init__(self, mean_by_condition: Mapping[str, np.ndarray],
                 variance: float, schedule: NoiseSchedule,
                 variance_by_condition: Optional[Mapping[str, float]] = None):
        if variance <= 0:
            raise ConfigurationError(f"variance must be > 0, got {variance}")
        if not mean_by_condition:
            raise ConfigurationError("mean_by_condition must not be empty")
        means = {k: np.asarray(v, dtype=np.float64)
                 for k, v in mean_by_condition.items()}
        shapes = {m.shape for m in means.values()}
        if len(shapes) != 1:
            raise ConfigurationError(f"mean images disagree on shape: {shapes}")
        self._means = means
        self.variance = float(variance)
        self._variances = dict(variance_by_condition or {})
        for tag, v in self._variances.items():
            if tag not in means:
                raise ConfigurationError(
                    f"variance override for unknown tag {tag!r}")
            if v <= 0:
                raise ConfigurationError(f"variance for {tag!r} must be > 0")
        self.schedule = schedule
        self._shape = next(iter(shapes))

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self._shape

    def supported_tags(self) -> list[str]:
        return sorted(self._means)

    def mean_for(self, tag: str) -> np.ndarray:
        try:
            return self._means[tag]
        except KeyError:
            raise OracleError(
                f"unknown condition tag {tag!r}; supported tags: "
                f"{self.supported_tags()}") from None

    def variance_for(self, tag: str) -> float:
        return self._variances.get(tag, self.variance)

    def predict_eps(self, x_t: np.ndarray, t: int,
                    condition: Condition) -> np.ndarray:
        self.check_shape(x_t)
        mu = self.mean_for(condition.prompt_tag)
        ab = float(self.schedule.alpha_bar[t])
        return gaussian_eps(np.asarray(x_t, dtype=np.float64), mu,
                            self.variance_for(condition.prompt_tag), ab)


class MixtureOracle(DenoiserOracle):
    """Equal-variance Gaussian mixture target; condition-agnostic.

    The prediction is the responsibility-weighted blend of per-component
    Gaussian predictions, with responsibilities taken from the diffused
    component likelihoods N(sqrt(abar) mu_k, v I).
    """

    def __init__(self, components: Sequence[tuple[float, np.ndarray]],
                 variance: float, schedule: NoiseSchedule):
        if not components:
            raise ConfigurationError("mixture needs at least one component")
        if variance <= 0:
            raise ConfigurationError(f"variance must be > 0, got {variance}")
        weights = np.array([w for w, _ in components], dtype=np.float64)
        if np.any(weights <= 0):
            raise ConfigurationError("mixture weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ConfigurationError(
                f"mixture weights must sum to 1 (got {weights.sum()!r})")
        means = np.stack([np.asarray(m, dtype=np.float64) for _, m in components])
        self.weights = weights
        self.means = means
        self.variance = float(variance)
        self.schedule = schedule

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.means.shape[1:])

    def responsibilities(self, x_t: np.ndarray, t: int) -> np.ndarray:
        """Posterior component probabilities at the diffused observation."""
        ab = float(self.schedule.alpha_bar[t])
        v = ab * self.variance + (1.0 - ab)
        diffs = x_t[None, ...] - np.sqrt(ab) * self.means
        sq = diffs.reshape(len(self.weights), -1)
        logits = np.log(self.weights) - 0.5 * np.einsum("kn,kn->k", sq, sq) / v
        logits -= logsumexp(logits)
        return np.exp(logits)

    def predict_eps(self, x_t: np.ndarray, t: int,
                    condition: Condition) -> np.ndarray:
        self.check_shape(x_t)
        x_t = np.asarray(x_t, dtype=np.float64)
        ab = float(self.schedule.alpha_bar[t])
        resp = self.responsibilities(x_t, t)
        out = np.zeros_like(x_t)
        for r, mu in zip(resp, self.means):
            out += r * gaussian_eps(x_t, mu, self.variance, ab)
        return out


def _camera_from_condition(condition: Condition):
    lm = condition.landmark
    if lm is None:
        return None
    return getattr(lm, "camera", None)


@dataclass
class RenderAnchoredOracle(DenoiserOracle):
    """Pose-conditioned oracle anchored to renders of a fixed reference mesh.

    For a conditional prompt tag with a camera-bearing landmark, the target
    distribution is a sharp Gaussian around the reference render from that
    camera.  Empty and negative prompt tags fall back to a flat, wide prior
    (the "knows nothing but the pose exists" branch of CFG).  When the
    condition carries no pose at all, the oracle degrades to a mixture over
    a fixed set of canonical views -- the pose-unconditioned ablation.
    """

    render_fn: Callable  # camera -> float64 image of self.shape
    shape: tuple[int, ...]
    variance: float
    schedule: NoiseSchedule
    canonical_cameras: Sequence = ()
    uncond_mean: float = 0.5
    uncond_variance: float = 4.0
    uncond_tags: frozenset = frozenset({""})
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.variance <= 0 or self.uncond_variance <= 0:
            raise ConfigurationError("oracle variances must be > 0")

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.shape)

    def anchor_render(self, camera) -> np.ndarray:
        key = camera.cache_key() if hasattr(camera, "cache_key") else camera
        got = self._cache.get(key)
        if got is None:
            with self._lock:
                got = self._cache.get(key)
                if got is None:
                    got = np.asarray(self.render_fn(camera), dtype=np.float64)
                    if got.shape != tuple(self.shape):
                        raise OracleError(
                            f"render_fn returned {got.shape}, oracle expects "
                            f"{tuple(self.shape)}")
                    self._cache[key] = got
        return got

    def _canonical_mixture(self) -> MixtureOracle:
        if not self.canonical_cameras:
            raise OracleError(
                "condition carries no pose and no canonical views configured")
        n = len(self.canonical_cameras)
        comps = [(1.0 / n, self.anchor_render(c)) for c in self.canonical_cameras]
        return MixtureOracle(comps, self.variance, self.schedule)

    def predict_eps(self, x_t: np.ndarray, t: int,
                    condition: Condition) -> np.ndarray:
        self.check_shape(x_t)
        x_t = np.asarray(x_t, dtype=np.float64)
        ab = float(self.schedule.alpha_bar[t])
        if condition.prompt_tag in self.uncond_tags:
            mu = np.full(self.shape, self.uncond_mean, dtype=np.float64)
            return gaussian_eps(x_t, mu, self.uncond_variance, ab)
        camera = _camera_from_condition(condition)
        if camera is not None:
            return gaussian_eps(x_t, self.anchor_render(camera), self.variance, ab)
        return self._canonical_mixture().predict_eps(x_t, t, condition)


def oracle_from_spec(spec: Mapping, schedule: NoiseSchedule,
                     shape: Optional[tuple[int, ...]] = None) -> DenoiserOracle:
    """Build a Gaussian/mixture oracle from a config table.

    ``spec["kind"]`` selects the oracle.  Mean entries are either a float
    (constant image), a list (explicit pixels), or "image:<path>".
    Render-anchored oracles are wired up by the pipeline, which owns the
    renderer; remote oracles by the CLI, which owns the connection.
    """
    kind = spec.get("kind")
    if kind == "gaussian":
        means = {tag: _mean_from_entry(v, shape)
                 for tag, v in spec["means"].items()}
        return GaussianOracle(means, float(spec.get("variance", 0.01)), schedule,
                              variance_by_condition=spec.get("variances"))
    if kind == "mixture":
        comps = [(float(c["weight"]), _mean_from_entry(c["mean"], shape))
                 for c in spec["components"]]
        return MixtureOracle(comps, float(spec.get("variance", 0.01)), schedule)
    raise ConfigurationError(
        f"unknown oracle kind {kind!r} (expected gaussian or mixture here)")


def _mean_from_entry(entry, shape) -> np.ndarray:
    if isinstance(entry, str):
        if entry.startswith("image:"):
            from .images import load_image
            return load_image(entry[len("image:"):])
        raise ConfigurationError(f"unrecognized mean spec {entry!r}")
    if isinstance(entry, (int, float)):
        if shape is None:
            raise ConfigurationError(
                "constant mean needs an explicit oracle shape")
        return np.full(shape, float(entry), dtype=np.float64)
    return np.asarray(entry, dtype=np.float64)
