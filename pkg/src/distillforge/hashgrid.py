"""Multiresolution hash-grid encoding with trilinear interpolation.

Each level l has grid resolution R_l = floor(base * growth**l); query points
are trilinearly interpolated from 8 corner features looked up in a per-level
table.  Levels whose dense corner count fits in the table are indexed
directly; finer levels hash integer corner coordinates with the usual
xor-of-primes scheme.  The table size must be a power of two so the modulo
reduces to a mask (and so the numpy and torch index paths agree bit-for-bit).

Two evaluation paths share the same tables:

* :meth:`HashEncoding.encode` -- torch, differentiable w.r.t. tables and the
  query positions (through the fractional interpolation weights);
* :meth:`HashEncoding.interpolation_csr` -- a frozen scipy CSR operator for a
  FIXED point set, used for fast no-grad sweeps over grid vertices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch

from .errors import ConfigurationError

HASH_PRIMES = (1, 2654435761, 805459861)

# Corner k of a cell has offsets (k & 1, (k >> 1) & 1, (k >> 2) & 1).
_CORNERS = np.array([[k & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)],
                    dtype=np.int64)

BOX_LO, BOX_HI = -0.5, 0.5  # the unit-normalized bounding box on all axes


@dataclass(frozen=True)
class HashConfig:
    level_count: int = 8
    base_resolution: int = 16
    growth: float = 1.5
    table_size: int = 2 ** 14
    feature_width: int = 2

    def __post_init__(self):
        if self.table_size & (self.table_size - 1):
            raise ConfigurationError("table_size must be a power of two")
        if self.level_count < 1 or self.base_resolution < 1:
            raise ConfigurationError("need at least one level and resolution >= 1")

    def resolutions(self) -> np.ndarray:
        return np.floor(self.base_resolution
                        * self.growth ** np.arange(self.level_count)).astype(np.int64)

    @property
    def output_dim(self) -> int:
        return self.level_count * self.feature_width


class HashEncoding:
    """Trainable feature tables, shape (levels, table_size, feature_width)."""

    def __init__(self, config: HashConfig = HashConfig(), *,
                 dtype: torch.dtype = torch.float64,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.config = config
        init = rng.uniform(-1e-4, 1e-4,
                           (config.level_count, config.table_size,
                            config.feature_width))
        self.tables = torch.tensor(init, dtype=dtype, requires_grad=True)
        self._res = config.resolutions()
        # levels whose dense corner grid fits in the table index directly
        self._dense = (self._res + 1) ** 3 <= config.table_size

    @property
    def dtype(self) -> torch.dtype:
        return self.tables.dtype

    def parameters(self) -> list[torch.Tensor]:
        return [self.tables]

    def _corner_indices(self, cell: np.ndarray, level: int) -> np.ndarray:
        """Table rows for the 8 corners of each cell; cell is (N, 3) int64."""
        corners = cell[:, None, :] + _CORNERS[None, :, :]  # (N, 8, 3)
        if self._dense[level]:
            side = self._res[level] + 1
            return (corners[..., 0] + side * (corners[..., 1]
                                              + side * corners[..., 2]))
        h = (corners[..., 0] * HASH_PRIMES[0]
             ^ corners[..., 1] * HASH_PRIMES[1]
             ^ corners[..., 2] * HASH_PRIMES[2])
        return h & (self.config.table_size - 1)

    def _cells_and_frac(self, points: np.ndarray, level: int):
        r = self._res[level]
        norm = (np.clip(points, BOX_LO, BOX_HI) - BOX_LO) / (BOX_HI - BOX_LO)
        scaled = norm * r
        cell = np.clip(np.floor(scaled), 0, r - 1).astype(np.int64)
        return cell, scaled - cell

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        """(N, 3) -> (N, levels * feature_width); differentiable in points and tables."""
        pts_np = points.detach().cpu().numpy()
        n = len(pts_np)
        lc = self.config.level_count
        ts = self.config.table_size
        # integer work in numpy, fused over levels
        cells = np.empty((lc, n, 3), dtype=np.int64)
        idx = np.empty((lc, n, 8), dtype=np.int64)
        for level in range(lc):
            cells[level], _ = self._cells_and_frac(pts_np, level)
            idx[level] = self._corner_indices(cells[level], level) + level * ts
        norm = (points.clamp(BOX_LO, BOX_HI) - BOX_LO) / (BOX_HI - BOX_LO)
        res_t = torch.from_numpy(self._res.astype(pts_np.dtype)).to(points.dtype)
        frac = (norm[None, :, :] * res_t[:, None, None]
                - torch.from_numpy(cells).to(points.dtype))   # (L, N, 3)
        fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        # corner order matches _CORNERS: bit0 -> x, bit1 -> y, bit2 -> z
        weights = torch.stack([
            gx * gy * gz, fx * gy * gz, gx * fy * gz, fx * fy * gz,
            gx * gy * fz, fx * gy * fz, gx * fy * fz, fx * fy * fz,
        ], dim=-1)                                             # (L, N, 8)
        flat = self.tables.reshape(lc * ts, self.config.feature_width)
        feats = flat[torch.from_numpy(idx.reshape(-1, 8))]     # (L*N, 8, F)
        out = (feats * weights.reshape(-1, 8, 1)).sum(dim=1)   # (L*N, F)
        return (out.reshape(lc, n, self.config.feature_width)
                .permute(1, 0, 2).reshape(n, self.config.output_dim))

    def interpolation_tables(self, points: np.ndarray):
        """Precomputed (indices, weights) for a FIXED point set.

        indices: (L, N, 8) rows into the per-level tables; weights: (L, N, 8).
        Hashing does not depend on table values, so the result is reusable
        across training steps (and shareable between encodings of the same
        config, e.g. the SDF and offset towers).
        """
        n = len(points)
        lc = self.config.level_count
        np_dtype = np.float32 if self.dtype == torch.float32 else np.float64
        idx = np.empty((lc, n, 8), dtype=np.int64)
        weights = np.empty((lc, n, 8), dtype=np_dtype)
        for level in range(lc):
            cell, frac = self._cells_and_frac(points, level)
            idx[level] = self._corner_indices(cell, level)
            w = (frac[:, None, :] * _CORNERS[None, :, :]
                 + (1.0 - frac[:, None, :]) * (1.0 - _CORNERS[None, :, :]))
            weights[level] = w.prod(axis=-1)
        return idx, weights

    def encode_precomputed(self, idx: np.ndarray,
                           weights: np.ndarray) -> torch.Tensor:
        """Torch-differentiable (in tables) encode from precomputed lookups."""
        lc, n, _ = idx.shape
        ts = self.config.table_size
        flat = self.tables.reshape(lc * ts, self.config.feature_width)
        offs = (np.arange(lc, dtype=np.int64) * ts)[:, None, None]
        feats = flat[torch.from_numpy((idx + offs).reshape(-1, 8))]
        w = torch.from_numpy(weights.reshape(-1, 8, 1)).to(self.dtype)
        out = (feats * w).sum(dim=1)
        return (out.reshape(lc, n, self.config.feature_width)
                .permute(1, 0, 2).reshape(n, self.config.output_dim))

    def interpolation_csr(self, points: np.ndarray) -> list[sp.csr_matrix]:
        """Per-level CSR operators M_l so that M_l @ tables[l] interpolates
        the FIXED point set; weights use the same arithmetic as encode()."""
        n = len(points)
        np_dtype = np.float32 if self.dtype == torch.float32 else np.float64
        mats = []
        for level in range(self.config.level_count):
            cell, frac = self._cells_and_frac(points, level)
            idx = self._corner_indices(cell, level)  # (N, 8)
            w = (frac[:, None, :] * _CORNERS[None, :, :]
                 + (1.0 - frac[:, None, :]) * (1.0 - _CORNERS[None, :, :]))
            weights = w.prod(axis=-1).astype(np_dtype)  # (N, 8)
            rows = np.repeat(np.arange(n), 8)
            mat = sp.csr_matrix(
                (weights.ravel(), (rows, idx.ravel())),
                shape=(n, self.config.table_size))
            mats.append(mat)
        return mats

    def encode_csr(self, mats: list[sp.csr_matrix],
                   tables_np: np.ndarray | None = None) -> np.ndarray:
        """Evaluate the frozen CSR operators against current table values."""
        if tables_np is None:
            tables_np = self.tables.detach().numpy()
        f = self.config.feature_width
        out = np.empty((mats[0].shape[0], self.config.output_dim),
                       dtype=tables_np.dtype)
        for level, mat in enumerate(mats):
            out[:, level * f:(level + 1) * f] = mat @ tables_np[level]
        return out
