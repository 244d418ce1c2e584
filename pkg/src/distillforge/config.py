"""Run configuration: profiles, TOML loading, resolved-manifest dumping.

Configs are flat dataclasses grouped into TOML sections that mirror the
package modules.  Two named profiles exist: ``paper`` keeps the published
recipe's numbers (512 px renders, 15k/20k iterations, texture anneal at
5000), ``desk`` is the scaled-down profile used by the closed-loop
verification experiments (64 px, 32^3 grid, 3000+3000 iterations).
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .diffusion import DEFAULT_NEGATIVE_TAG
from .errors import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class RunConfig:
    # [run]
    stage: str = "geometry"
    loss: str = "ssd"
    seed: int = 0
    out_dir: str = "runs/out"
    profile: str = "desk"
    prompt: str = "a 3d head"
    negative_prompt: str = DEFAULT_NEGATIVE_TAG

    # [diffusion]
    schedule_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    omega_kind: str = "one"

    # [guidance]
    geometry_cfg_weight: float = 100.0
    texture_cfg_weight: float = 7.5
    geometry_use_negative: bool = False
    texture_use_negative: bool = True

    # [time]
    geometry_min_fraction: float = 0.02
    geometry_max_fraction: float = 0.5
    texture_min_fraction: float = 0.02
    texture_max_fraction: float = 0.98
    texture_anneal_at_iter: int = 5000
    texture_annealed_max_fraction: float = 0.7

    # [camera]
    camera_distance: float = 3.0
    elevation_range: tuple = (-10.0, 45.0)
    fov_range: tuple = (30.0, 50.0)
    resolution: int = 64

    # [geometry]
    grid_resolution: int = 32
    hash_levels: int = 8
    hash_base_resolution: int = 16
    hash_growth: float = 1.5
    hash_table_size: int = 2 ** 14
    hash_feature_width: int = 2
    mlp_hidden: int = 64
    offset_clamp_factor: float = 0.25
    dtype: str = "float32"

    # [regularizers]
    normal_consistency_weight: float = 8000.0
    laplacian_weight: float = 10000.0

    # [optimizer]
    mlp_lr: float = 1e-3
    table_lr: float = 1e-2
    weight_decay: float = 1e-2

    # [iterations]
    geometry_iters: int = 3000
    texture_iters: int = 3000
    refine_iters: int = 900
    edit_offset_iters: int = 800
    edit_texture_iters: int = 800
    export_every: int = 500

    # [init]
    init_points_per_iter: int = 10_000
    init_max_iters: int = 2000
    init_stop_at_error: float = 1e-2

    # [stage]
    early_mask_fraction: float = 0.2
    background: float = 0.5

    # [oracle]
    oracle_kind: str = "render_anchored"
    oracle_target: str = "ellipsoid_nose"
    oracle_variance: float = 0.01
    oracle_uncond_variance: float = 4.0
    oracle_pose_conditioned: bool = True
    oracle_host: str = "127.0.0.1"
    oracle_port: int = 9411

    def __post_init__(self):
        if self.stage not in ("geometry", "texture", "edit", "refine"):
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.loss not in ("sds", "vsd", "ssd"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32/float64, "
                                     f"got {self.dtype!r}")


SECTIONS = {
    "run": ("stage", "loss", "seed", "out_dir", "profile", "prompt",
            "negative_prompt"),
    "diffusion": ("schedule_steps", "beta_start", "beta_end", "omega_kind"),
    "guidance": ("geometry_cfg_weight", "texture_cfg_weight",
                 "geometry_use_negative", "texture_use_negative"),
    "time": ("geometry_min_fraction", "geometry_max_fraction",
             "texture_min_fraction", "texture_max_fraction",
             "texture_anneal_at_iter", "texture_annealed_max_fraction"),
    "camera": ("camera_distance", "elevation_range", "fov_range", "resolution"),
    "geometry": ("grid_resolution", "hash_levels", "hash_base_resolution",
                 "hash_growth", "hash_table_size", "hash_feature_width",
                 "mlp_hidden", "offset_clamp_factor", "dtype"),
    "regularizers": ("normal_consistency_weight", "laplacian_weight"),
    "optimizer": ("mlp_lr", "table_lr", "weight_decay"),
    "iterations": ("geometry_iters", "texture_iters", "refine_iters",
                   "edit_offset_iters", "edit_texture_iters", "export_every"),
    "init": ("init_points_per_iter", "init_max_iters", "init_stop_at_error"),
    "stage": ("early_mask_fraction", "background"),
    "oracle": ("oracle_kind", "oracle_target", "oracle_variance",
               "oracle_uncond_variance", "oracle_pose_conditioned",
               "oracle_host", "oracle_port"),
}

PROFILES = {
    "desk": dict(resolution=64, grid_resolution=32, geometry_iters=3000,
                 texture_iters=3000, texture_anneal_at_iter=1500,
                 dtype="float32"),
    "paper": dict(resolution=512, grid_resolution=64, geometry_iters=15_000,
                  texture_iters=20_000, texture_anneal_at_iter=5000,
                  dtype="float32"),
}

_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def apply_profile(config: RunConfig, profile: str) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigurationError(
            f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return replace(config, profile=profile, **PROFILES[profile])


def config_from_mapping(mapping: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Sectioned mapping -> RunConfig; profile applies before explicit keys."""
    flat: dict = {}
    for section, table in mapping.items():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        if not isinstance(table, dict):
            raise ConfigurationError(f"section [{section}] must be a table")
        for key, value in table.items():
            if key not in SECTIONS[section]:
                raise ConfigurationError(
                    f"unknown key {key!r} in section [{section}]")
            flat[key] = tuple(value) if isinstance(value, list) else value
    cfg = base or RunConfig()
    if "profile" in flat:
        cfg = apply_profile(cfg, flat["profile"])
    return replace(cfg, **flat)


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    with open(path, "rb") as fh:
        mapping = tomllib.load(fh)
    return config_from_mapping(mapping, base)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int,)):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_config(config: RunConfig) -> str:
    """Resolved config as diffable TOML with module-named sections."""
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_toml_value(getattr(config, key))}")
        lines.append("")
    return "\n".join(lines)


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(dump_config(config).encode("utf8")).hexdigest()


def write_manifest(config: RunConfig, path) -> str:
    """Run manifest: resolved config plus its content hash."""
    text = dump_config(config)
    digest = config_hash(config)
    with open(path, "w") as fh:
        fh.write(f"# distillforge run manifest\n# config_hash = {digest}\n\n")
        fh.write(text)
    return digest
