"""The three distillation gradients (SDS, VSD, SSD) and the reparameterized loss.

Each step samples a time step and a noise draw, diffuses the rendered image,
queries a denoiser oracle, and returns the image-space gradient

    SDS:  omega(t) * (eps_guided - eps)
    VSD:  omega(t) * (eps_guided - eps_surrogate)
    SSD:  omega(t) * (eps_hi - eps_lo)

where eps_hi / eps_lo are CFG compositions of the SAME oracle on the SAME
(x_t, t, condition) at the high weight and at weight 1.  Oracle outputs are
constants here: nothing backpropagates through an oracle.  The caller chains
grad_image through its own render Jacobian, normally via ``reparam_loss``:

    loss = mean((x - stopgrad(x - grad_image))^2)

whose gradient w.r.t. x is exactly (2/N) * grad_image -- the 2/N factor is
kept, not normalized away, so learning rates fold it in explicitly.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .diffusion import (Condition, DenoiserOracle, GuidanceSpec, NoiseSchedule,
                        TimePolicy, add_noise, cfg_compose, omega, sample_time)
from .errors import ConfigurationError, DimensionError, TrainingError


@dataclass
class DistillResult:
    """Image-space gradient plus the Algorithm-style scalar loss and diagnostics."""

    grad_image: np.ndarray
    scalar_loss: float
    diagnostics: dict


def reparam_loss(x: np.ndarray, grad_image: np.ndarray) -> tuple[float, np.ndarray]:
    """MSE against the detached target (x - grad_image).

    Returns (loss, dloss/dx); the gradient is (2/N) * grad_image with N the
    element count.
    """
    if x.shape != grad_image.shape:
        raise DimensionError(f"x shape {x.shape} != grad shape {grad_image.shape}")
    target = x - grad_image  # detached by construction: plain array
    loss = float(np.mean((x - target) ** 2))
    return loss, (2.0 / x.size) * grad_image


def time_features(t: int, step_count: int) -> np.ndarray:
    """4-dim embedding of the normalized time step."""
    u = t / step_count
    return np.array([u, np.sin(2 * np.pi * u), np.cos(2 * np.pi * u), 1.0])


def prompt_features(tag: str, dim: int = 8) -> np.ndarray:
    """Deterministic pseudo-embedding of a prompt tag."""
    seed = int.from_bytes(hashlib.sha256(tag.encode("utf8")).digest()[:8], "little")
    g = np.random.default_rng(seed)
    return g.standard_normal(dim) / np.sqrt(dim)


def camera_features(condition: Condition) -> np.ndarray:
    """(sin az, cos az, elevation/90, distance/5) or zeros without a pose."""
    cam = getattr(condition.landmark, "camera", None)
    if cam is None:
        return np.zeros(4)
    az = np.deg2rad(cam.azimuth_deg)
    return np.array([np.sin(az), np.cos(az), cam.elevation_deg / 90.0,
                     cam.distance / 5.0])


class SurrogateDenoiser:
    """Small trainable eps-predictor standing in for the VSD LoRA.

    Two-layer tanh perceptron over [x_t.flat, time features, prompt features,
    camera features], trained with Adam on ||pred - eps||^2.  Written directly
    in numpy so its update rule (and its instabilities) are fully visible.
    """

    PROMPT_DIM = 8

    def __init__(self, image_shape: tuple[int, ...], step_count: int,
                 hidden: int = 64, lr: float = 3e-3,
                 param_budget: int = 2_000_000,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.image_shape = tuple(image_shape)
        self.step_count = step_count
        n = int(np.prod(image_shape))
        d_in = n + 4 + self.PROMPT_DIM + 4
        n_params = d_in * hidden + hidden + hidden * n + n
        if n_params > param_budget:
            raise ConfigurationError(
                f"surrogate would need {n_params} parameters, over the budget "
                f"of {param_budget}")
        self.w1 = rng.standard_normal((d_in, hidden)) / np.sqrt(d_in)
        self.b1 = np.zeros(hidden)
        self.w2 = rng.standard_normal((hidden, n)) * 0.01 / np.sqrt(hidden)
        self.b2 = np.zeros(n)
        self.lr = lr
        self.steps_taken = 0
        self._adam = {k: (np.zeros_like(v), np.zeros_like(v))
                      for k, v in self._params().items()}

    def _params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def _features(self, x_t: np.ndarray, t: int, condition: Condition) -> np.ndarray:
        return np.concatenate([
            np.asarray(x_t, dtype=np.float64).ravel(),
            time_features(t, self.step_count),
            prompt_features(condition.prompt_tag, self.PROMPT_DIM),
            camera_features(condition),
        ])

    def predict_eps(self, x_t: np.ndarray, t: int,
                    condition: Condition) -> np.ndarray:
        f = self._features(x_t, t, condition)
        h = np.tanh(f @ self.w1 + self.b1)
        return (h @ self.w2 + self.b2).reshape(self.image_shape)

    def train_step(self, x_t: np.ndarray, eps: np.ndarray, t: int,
                   condition: Condition) -> float:
        """One Adam step on mean((pred - eps)^2); returns the loss."""
        f = self._features(x_t, t, condition)
        z1 = f @ self.w1 + self.b1
        h = np.tanh(z1)
        out = h @ self.w2 + self.b2
        resid = out - np.asarray(eps, dtype=np.float64).ravel()
        loss = float(np.mean(resid ** 2))
        if not np.isfinite(loss):
            raise TrainingError(
                f"surrogate loss non-finite at training step {self.steps_taken}")
        dout = (2.0 / resid.size) * resid
        grads = {
            "w2": np.outer(h, dout),
            "b2": dout,
        }
        dh = self.w2 @ dout
        dz1 = dh * (1.0 - h ** 2)
        grads["w1"] = np.outer(f, dz1)
        grads["b1"] = dz1
        self.steps_taken += 1
        b1, b2m, eps_hat = 0.9, 0.999, 1e-8
        for name, p in self._params().items():
            m, v = self._adam[name]
            g = grads[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2m
            v += (1 - b2m) * g * g
            mhat = m / (1 - b1 ** self.steps_taken)
            vhat = v / (1 - b2m ** self.steps_taken)
            p -= self.lr * mhat / (np.sqrt(vhat) + eps_hat)
        return loss


def _diffuse(x: np.ndarray, schedule: NoiseSchedule, policy: TimePolicy,
             iteration: int, rng: np.random.Generator):
    t = sample_time(iteration, policy, schedule.step_count, rng)
    eps = rng.standard_normal(x.shape)
    x_t = add_noise(np.asarray(x, dtype=np.float64), t, eps, schedule)
    return t, eps, x_t


def _guided(oracle: DenoiserOracle, x_t: np.ndarray, t: int,
            condition: Condition, guidance: GuidanceSpec) -> np.ndarray:
    eps_cond = oracle.predict_eps(x_t, t, condition)
    eps_uncond = oracle.predict_eps(
        x_t, t, condition.unconditional(guidance.use_negative))
    return cfg_compose(eps_cond, eps_uncond, guidance)


def sds_step(x: np.ndarray, oracle: DenoiserOracle, guidance: GuidanceSpec,
             schedule: NoiseSchedule, policy: TimePolicy, iteration: int,
             rng: np.random.Generator, condition: Condition,
             omega_kind: str = "one") -> DistillResult:
    """Classic score distillation: pull the guided prediction toward the draw."""
    t, eps, x_t = _diffuse(x, schedule, policy, iteration, rng)
    eps_guided = _guided(oracle, x_t, t, condition, guidance)
    w = omega(schedule, t, omega_kind)
    grad = w * (eps_guided - eps)
    return DistillResult(grad, float(np.mean(grad ** 2)), {
        "t": t, "eps_gap": float(np.linalg.norm(eps_guided - eps)),
        "cfg_weight": guidance.weight, "omega": w, "loss_kind": "sds",
    })


def vsd_step(x: np.ndarray, target_oracle: DenoiserOracle,
             surrogate: SurrogateDenoiser, guidance: GuidanceSpec,
             schedule: NoiseSchedule, policy: TimePolicy, iteration: int,
             rng: np.random.Generator, condition: Condition,
             omega_kind: str = "one",
             surrogate_updates: int = 1) -> DistillResult:
    """Variational score distillation with a from-scratch surrogate denoiser.

    The surrogate stands in for the rendered-image distribution score and is
    trained in lockstep (``surrogate_updates`` Adam steps per call) on the
    same (x_t, eps, t, condition) tuple.
    """
    t, eps, x_t = _diffuse(x, schedule, policy, iteration, rng)
    eps_guided = _guided(target_oracle, x_t, t, condition, guidance)
    eps_sur = surrogate.predict_eps(x_t, t, condition)
    w = omega(schedule, t, omega_kind)
    grad = w * (eps_guided - eps_sur)
    sur_loss = 0.0
    for _ in range(surrogate_updates):
        sur_loss = surrogate.train_step(x_t, eps, t, condition)
    return DistillResult(grad, float(np.mean(grad ** 2)), {
        "t": t, "eps_gap": float(np.linalg.norm(eps_guided - eps_sur)),
        "cfg_weight": guidance.weight, "omega": w, "loss_kind": "vsd",
        "surrogate_loss": sur_loss,
    })


def ssd_step(x: np.ndarray, oracle: DenoiserOracle, hi_guidance: GuidanceSpec,
             schedule: NoiseSchedule, policy: TimePolicy, iteration: int,
             rng: np.random.Generator, condition: Condition,
             omega_kind: str = "one",
             lo_use_negative: bool = False) -> DistillResult:
    """Self score distillation: same oracle, same (x_t, t, condition), twice.

    The high branch is CFG-composed at ``hi_guidance`` (optionally with the
    negative prompt in the unconditional slot); the low branch is weight 1,
    which CFG reduces to the bare conditional call, so equal weights make
    this step an exact zero operator.
    """
    t, eps, x_t = _diffuse(x, schedule, policy, iteration, rng)
    eps_cond = oracle.predict_eps(x_t, t, condition)
    eps_uncond_hi = oracle.predict_eps(
        x_t, t, condition.unconditional(hi_guidance.use_negative))
    eps_hi = cfg_compose(eps_cond, eps_uncond_hi, hi_guidance)
    lo_guidance = GuidanceSpec(1.0, use_negative=lo_use_negative)
    eps_lo = cfg_compose(eps_cond, eps_uncond_hi, lo_guidance)
    w = omega(schedule, t, omega_kind)
    grad = w * (eps_hi - eps_lo)
    return DistillResult(grad, float(np.mean(grad ** 2)), {
        "t": t, "eps_gap": float(np.linalg.norm(eps_hi - eps_lo)),
        "cfg_weight": hi_guidance.weight, "lo_weight": 1.0, "omega": w,
        "loss_kind": "ssd",
    })


class TraceWriter:
    """Appends one (iter, loss, grad_norm, t, W) row per optimization step.

    Floats are written with repr-style %.17g so traces are byte-stable across
    identical runs.
    """

    COLUMNS = ("iter", "loss", "grad_norm", "t", "cfg_weight")

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._fh.write(",".join(self.COLUMNS) + "\n")

    def append(self, iteration: int, loss: float, grad_norm: float, t: int,
               cfg_weight: float) -> None:
        self._fh.write(f"{iteration},{loss:.17g},{grad_norm:.17g},{t},"
                       f"{cfg_weight:.17g}\n")

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
