"""Hash-encoded implicit fields: geometry (SDF + vertex offset) and color.

The geometry field keeps two separate towers (own hash tables, own MLP) for
the SDF and the offset head.  That split is what makes edit mode exact:
freezing the SDF tower's parameters leaves s(p) bit-identical everywhere
while the offset head keeps training.

Offsets are clamped in norm by a saturating nonlinearity,

    offset = raw * clamp_radius * tanh(|raw|) / |raw|,

so |offset| < clamp_radius everywhere and the constraint is differentiable.
The default radius is OFFSET_CLAMP_FACTOR times the grid cell edge: 0.25 is
the largest factor for which an adversarial per-vertex displacement search
on the Kuhn path tet keeps every deformed tet's signed volume positive
(0.45x the edge, and anything above ~0.3, admits inversions).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import GeometryError, TrainingError
from .hashgrid import HashConfig, HashEncoding
from .template import TemplateSDF
from .tetra import TetGrid


class MLP:
    """Dense ReLU network on raw torch tensors (explicitly serializable)."""

    def __init__(self, dims: Sequence[int], *, dtype: torch.dtype,
                 rng: np.random.Generator, out_scale: float = 1.0):
        self.dims = tuple(dims)
        self.weights: list[torch.Tensor] = []
        self.biases: list[torch.Tensor] = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(2.0 / d_in)
            if i == len(dims) - 2:
                scale *= out_scale
            w = rng.standard_normal((d_in, d_out)) * scale
            self.weights.append(torch.tensor(w, dtype=dtype, requires_grad=True))
            self.biases.append(torch.zeros(d_out, dtype=dtype, requires_grad=True))

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < n - 1:
                x = torch.relu(x)
        return x

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """No-grad numpy mirror reading current parameter values."""
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.detach().numpy() + b.detach().numpy()
            if i < n - 1:
                np.maximum(x, 0.0, out=x)
        return x

    def parameters(self) -> list[torch.Tensor]:
        return [*self.weights, *self.biases]


@dataclass
class FitReport:
    iterations: int
    final_loss: float
    holdout_max_error: float

    @property
    def fitted(self) -> bool:
        return self.iterations > 0


# fraction of the grid cell edge that bounds the offset norm (see module doc)
OFFSET_CLAMP_FACTOR = 0.25


class ImplicitField:
    """Geometry field psi_g: position -> (sdf value, clamped vertex offset)."""

    def __init__(self, hash_config: HashConfig = HashConfig(),
                 hidden: Sequence[int] = (64,),
                 offset_clamp_radius: float = OFFSET_CLAMP_FACTOR / 32,
                 dtype: torch.dtype = torch.float64,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.hash_config = hash_config
        self.offset_clamp_radius = float(offset_clamp_radius)
        self._dtype = dtype
        self.enc_sdf = HashEncoding(hash_config, dtype=dtype, rng=rng)
        self.enc_off = HashEncoding(hash_config, dtype=dtype, rng=rng)
        d_in = hash_config.output_dim + 3
        self.mlp_sdf = MLP([d_in, *hidden, 1], dtype=dtype, rng=rng)
        self.mlp_off = MLP([d_in, *hidden, 3], dtype=dtype, rng=rng,
                           out_scale=1e-2)
        self.fit_report: Optional[FitReport] = None
        self.sdf_frozen = False
        self._grid_cache: dict[int, list] = {}

    @property
    def torch_dtype(self) -> torch.dtype:
        return self._dtype

    @property
    def ready(self) -> bool:
        return self.fit_report is not None and self.fit_report.fitted

    def sdf_parameters(self) -> list[torch.Tensor]:
        return [*self.enc_sdf.parameters(), *self.mlp_sdf.parameters()]

    def offset_parameters(self) -> list[torch.Tensor]:
        return [*self.enc_off.parameters(), *self.mlp_off.parameters()]

    def table_parameters(self) -> list[torch.Tensor]:
        return [*self.enc_sdf.parameters(), *self.enc_off.parameters()]

    def parameters(self) -> list[torch.Tensor]:
        return [*self.sdf_parameters(), *self.offset_parameters()]

    def trainable_parameters(self) -> list[torch.Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def sdf(self, points: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([self.enc_sdf.encode(points), points], dim=-1)
        return self.mlp_sdf(feats)[:, 0]

    def offsets(self, points: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([self.enc_off.encode(points), points], dim=-1)
        raw = self.mlp_off(feats)
        norm = raw.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return raw * (self.offset_clamp_radius * torch.tanh(norm) / norm)

    def query(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.sdf(points), self.offsets(points)

    # fast paths over a grid's rest vertices: a frozen CSR operator for the
    # no-grad sign sweep, and precomputed hash lookups (shared by both
    # towers, which have identical configs) for differentiable subsets
    def _grid_entry(self, grid: TetGrid) -> dict:
        key = id(grid)
        entry = self._grid_cache.get(key)
        if entry is None:
            pts = grid.vertices
            idx, weights = self.enc_sdf.interpolation_tables(pts)
            entry = {
                "csr": self.enc_sdf.interpolation_csr(pts),
                "pts": pts.astype(self._np_dtype()),
                "idx": idx,
                "weights": weights,
            }
            self._grid_cache[key] = entry
        return entry

    def sdf_on_grid(self, grid: TetGrid) -> np.ndarray:
        entry = self._grid_entry(grid)
        feats = self.enc_sdf.encode_csr(entry["csr"])
        full = np.concatenate([feats, entry["pts"]], axis=1)
        return self.mlp_sdf.forward_np(full)[:, 0].astype(np.float64)

    def query_grid_subset(self, grid: TetGrid, ids: np.ndarray,
                          rest: torch.Tensor):
        """Differentiable (sdf, offset) at grid vertices using cached lookups."""
        entry = self._grid_entry(grid)
        idx = entry["idx"][:, ids, :]
        w = entry["weights"][:, ids, :]
        f_sdf = torch.cat([self.enc_sdf.encode_precomputed(idx, w), rest], dim=-1)
        f_off = torch.cat([self.enc_off.encode_precomputed(idx, w), rest], dim=-1)
        s = self.mlp_sdf(f_sdf)[:, 0]
        raw = self.mlp_off(f_off)
        norm = raw.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        off = raw * (self.offset_clamp_radius * torch.tanh(norm) / norm)
        return s, off

    def offsets_np(self, points: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            t = torch.tensor(points, dtype=self._dtype)
            return self.offsets(t).numpy().astype(np.float64)

    def _np_dtype(self):
        return np.float32 if self._dtype == torch.float32 else np.float64


class ColorField:
    """psi_tex: position -> rgb in [0,1]^3 via a sigmoid output."""

    def __init__(self, hash_config: HashConfig = HashConfig(),
                 hidden: Sequence[int] = (64,),
                 dtype: torch.dtype = torch.float64,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.hash_config = hash_config
        self._dtype = dtype
        self.enc = HashEncoding(hash_config, dtype=dtype, rng=rng)
        self.mlp = MLP([hash_config.output_dim + 3, *hidden, 3], dtype=dtype,
                       rng=rng)

    @property
    def torch_dtype(self) -> torch.dtype:
        return self._dtype

    def rgb(self, points: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([self.enc.encode(points), points], dim=-1)
        return torch.sigmoid(self.mlp(feats))

    def parameters(self) -> list[torch.Tensor]:
        return [*self.enc.parameters(), *self.mlp.parameters()]

    def trainable_parameters(self) -> list[torch.Tensor]:
        return [p for p in self.parameters() if p.requires_grad]


class AnalyticSDFField:
    """Adapter putting an exact SDF callable behind the field interface."""

    ready = True
    sdf_frozen = True

    def __init__(self, sdf_fn: Callable[[np.ndarray], np.ndarray],
                 dtype: torch.dtype = torch.float64):
        self.sdf_fn = sdf_fn
        self._dtype = dtype

    @property
    def torch_dtype(self) -> torch.dtype:
        return self._dtype

    def query(self, points: torch.Tensor):
        s = torch.tensor(self.sdf_fn(points.detach().cpu().numpy()),
                         dtype=self._dtype)
        return s, torch.zeros_like(points)

    def sdf_on_grid(self, grid: TetGrid) -> np.ndarray:
        return np.asarray(self.sdf_fn(grid.vertices), dtype=np.float64)


def init_sdf_fit(field: ImplicitField, template: TemplateSDF,
                 points_per_iter: int = 10_000, iters: int = 2000,
                 rng: Optional[np.random.Generator] = None,
                 table_lr: float = 1e-2, mlp_lr: float = 1e-3,
                 holdout_points: int = 4096,
                 stop_at_error: Optional[float] = None) -> FitReport:
    """Fit the SDF head to the template over uniform box samples.

    Minimizes mean squared SDF error on fresh uniform points each iteration.
    With ``stop_at_error`` set, the held-out max error is checked every 100
    iterations and the fit stops early once it drops below the threshold.
    The report carries the final held-out max error.
    """
    rng = rng or np.random.default_rng(0)
    opt = torch.optim.Adam([
        {"params": field.enc_sdf.parameters(), "lr": table_lr},
        {"params": field.mlp_sdf.parameters(), "lr": mlp_lr},
    ])
    hold = rng.uniform(-0.5, 0.5, (holdout_points, 3))
    hold_t = torch.tensor(hold, dtype=field.torch_dtype)
    hold_target = template.sdf(hold)

    def holdout_err() -> float:
        with torch.no_grad():
            pred = field.sdf(hold_t).numpy()
        return float(np.abs(pred - hold_target).max())

    final_loss = float("nan")
    done = 0
    for i in range(iters):
        # cosine decay to 20% of the base rate settles the max error
        scale = 0.2 + 0.8 * 0.5 * (1.0 + np.cos(np.pi * i / iters))
        opt.param_groups[0]["lr"] = table_lr * scale
        opt.param_groups[1]["lr"] = mlp_lr * scale
        pts = rng.uniform(-0.5, 0.5, (points_per_iter, 3))
        target = torch.tensor(template.sdf(pts), dtype=field.torch_dtype)
        pred = field.sdf(torch.tensor(pts, dtype=field.torch_dtype))
        loss = ((pred - target) ** 2).mean()
        final_loss = loss.item()
        if not np.isfinite(final_loss):
            raise TrainingError(f"SDF initialization diverged at iteration {i}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        done = i + 1
        if (stop_at_error is not None and done % 50 == 0
                and holdout_err() <= stop_at_error):
            break

    err = holdout_err() if done > 0 else float("inf")
    report = FitReport(iterations=done, final_loss=final_loss,
                       holdout_max_error=err)
    field.fit_report = report
    return report


class EditHandle:
    """Freezes the SDF tower; only offsets (and the color field) keep training."""

    def __init__(self, field: ImplicitField):
        if not field.ready:
            raise GeometryError("cannot enter edit mode on an unfit field")
        self.field = field
        for p in field.sdf_parameters():
            p.requires_grad_(False)
        field.sdf_frozen = True

    def trainable_parameters(self) -> list[torch.Tensor]:
        return self.field.offset_parameters()


def edit_mode_freeze(field: ImplicitField) -> EditHandle:
    return EditHandle(field)


@dataclass
class KeypointSet:
    named: dict            # name -> (3,) position
    contour: np.ndarray    # (K, 3)


def map_keypoints(template: TemplateSDF, field) -> KeypointSet:
    """Advect template keypoints by the field's offset: k' = k + offset(k)."""
    names = list(template.keypoints)
    pts = np.array([template.keypoints[n] for n in names])
    all_pts = np.concatenate([pts, template.contour], axis=0)
    if hasattr(field, "offsets_np"):
        moved = all_pts + field.offsets_np(all_pts)
    else:
        moved = all_pts.copy()  # analytic fields carry zero offsets
    named = {n: moved[i] for i, n in enumerate(names)}
    return KeypointSet(named=named, contour=moved[len(names):])
