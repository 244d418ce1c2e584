"""Two-stage generation (geometry -> texture), editing, refinement.

A run owns: per-subsystem RNG streams spawned from the root seed, the
deformable-grid field(s), a denoiser oracle, an AdamW optimizer over the
stage's trainable parameters, a loss-trace CSV and periodic mesh exports.
Checkpoints capture parameters, optimizer state and RNG streams bit-exactly,
so a reloaded run continues identically to an uninterrupted one.

Seed splitting rule: numpy SeedSequence(seed).spawn(n), assigned in the
fixed order RNG_STREAMS below.  Subsystems draw only from their own stream.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import RunConfig, config_hash, write_manifest
from .diffusion import (Condition, GuidanceSpec, TimePolicy, build_schedule)
from .distill import SurrogateDenoiser, TraceWriter, sds_step, ssd_step, vsd_step
from .errors import (CheckpointError, ConfigurationError, GeometryError,
                     SequencingError, TrainingError)
from .fields import ColorField, ImplicitField, edit_mode_freeze, init_sdf_fit, map_keypoints
from .hashgrid import HashConfig
from .meshio import write_obj, write_ply
from .metrics import reference_color
from .oracles import RenderAnchoredOracle, oracle_from_spec
from .render import (CameraPose, CameraRanges, composite, project_landmarks,
                     rasterize, render_reference_np, sample_camera, view_tag)
from .template import (TemplateSDF, ellipsoid_nose_target, head_template,
                       sphere_template)
from .tetra import Mesh, TetGrid, marching_tets, regularize

RNG_STREAMS = ("camera", "distill", "background", "field_init",
               "texture_init", "surrogate", "init_points")


def make_rngs(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(ss)
            for name, ss in zip(RNG_STREAMS, children)}


def rng_states(rngs: dict) -> dict:
    return {name: g.bit_generator.state for name, g in rngs.items()}


def restore_rngs(states: dict) -> dict:
    out = {}
    for name in RNG_STREAMS:
        g = np.random.default_rng(0)
        g.bit_generator.state = states[name]
        out[name] = g
    return out


def make_target(name: str) -> TemplateSDF:
    """Named analytic targets for render-anchored oracles and edits."""
    if name == "ellipsoid_nose":
        return ellipsoid_nose_target()
    if name == "head":
        return head_template()
    if name.startswith("head_nose:"):
        return head_template(nose_radius=float(name.split(":", 1)[1]))
    if name.startswith("sphere:"):
        return sphere_template(radius=float(name.split(":", 1)[1]))
    raise ConfigurationError(f"unknown oracle target {name!r}")


def _torch_dtype(config: RunConfig) -> torch.dtype:
    return torch.float32 if config.dtype == "float32" else torch.float64


def camera_ranges(config: RunConfig) -> CameraRanges:
    return CameraRanges(distance=(config.camera_distance, config.camera_distance),
                        elevation_deg=tuple(config.elevation_range),
                        fov_deg=tuple(config.fov_range),
                        resolution=config.resolution)


def build_target_mesh(config: RunConfig, target: TemplateSDF,
                      with_colors: bool) -> Mesh:
    from .fields import AnalyticSDFField
    grid = TetGrid.build(config.grid_resolution)
    mesh = marching_tets(grid, AnalyticSDFField(target.sdf,
                                                dtype=_torch_dtype(config)))
    if with_colors:
        mesh.colors = torch.tensor(reference_color(mesh.vertices_np),
                                   dtype=_torch_dtype(config))
    return mesh


def build_oracle(config: RunConfig, schedule, mode: str):
    """Oracle per config; render-anchored ones render the named target."""
    shape = (config.resolution, config.resolution, 3)
    if config.oracle_kind == "render_anchored":
        target = make_target(config.oracle_target)
        mesh = build_target_mesh(config, target, with_colors=(mode == "color"))
        verts = mesh.vertices_np
        attrs = (mesh.normals_np if mode == "normal"
                 else mesh.colors.detach().numpy())
        faces = mesh.faces

        def render_fn(camera):
            return render_reference_np(verts, faces, attrs, camera, mode,
                                       config.background)

        canon = [CameraPose(config.camera_distance, az, 0.0, 40.0,
                            config.resolution)
                 for az in np.arange(0.0, 360.0, 45.0)]
        return RenderAnchoredOracle(
            render_fn=render_fn, shape=shape, variance=config.oracle_variance,
            schedule=schedule, canonical_cameras=canon,
            uncond_mean=config.background,
            uncond_variance=config.oracle_uncond_variance,
            uncond_tags=frozenset({"", config.negative_prompt}),
        )
    if config.oracle_kind == "remote":
        from .wire import RemoteOracle
        return RemoteOracle(config.oracle_host, config.oracle_port, shape,
                            schedule)
    raise ConfigurationError(
        f"oracle kind {config.oracle_kind!r} is not runnable from a pipeline "
        f"config (gaussian/mixture oracles are test-scale)")


# deterministic parameter naming for checkpoints / optimizer state
def named_field_params(field: ImplicitField,
                       color_field: Optional[ColorField]) -> list:
    out = []
    for tower, enc, mlp in (("sdf", field.enc_sdf, field.mlp_sdf),
                            ("off", field.enc_off, field.mlp_off)):
        out.append((f"field.{tower}.tables", enc.tables))
        for i, w in enumerate(mlp.weights):
            out.append((f"field.{tower}.w{i}", w))
        for i, b in enumerate(mlp.biases):
            out.append((f"field.{tower}.b{i}", b))
    if color_field is not None:
        out.append(("tex.tables", color_field.enc.tables))
        for i, w in enumerate(color_field.mlp.weights):
            out.append((f"tex.w{i}", w))
        for i, b in enumerate(color_field.mlp.biases):
            out.append((f"tex.b{i}", b))
    return out


class RunSession:
    """Shared machinery behind the stage entry points."""

    def __init__(self, config: RunConfig, resume: Optional[Checkpoint] = None,
                 stage_mode: str = "normal"):
        self.config = config
        self.grid = TetGrid.build(config.grid_resolution)
        self.schedule = build_schedule(config.schedule_steps,
                                       config.beta_start, config.beta_end)
        self.template = head_template()
        self.dtype = _torch_dtype(config)
        self.oracle = build_oracle(config, self.schedule, stage_mode)
        self.ranges = camera_ranges(config)
        if resume is not None:
            self.rngs = restore_rngs(resume.rng_states)
        else:
            self.rngs = make_rngs(config.seed)
        hc = HashConfig(level_count=config.hash_levels,
                        base_resolution=config.hash_base_resolution,
                        growth=config.hash_growth,
                        table_size=config.hash_table_size,
                        feature_width=config.hash_feature_width)
        clamp = config.offset_clamp_factor / config.grid_resolution
        self.field = ImplicitField(hc, hidden=(config.mlp_hidden,),
                                   offset_clamp_radius=clamp,
                                   dtype=self.dtype,
                                   rng=self.rngs["field_init"])
        self.color_field = ColorField(hc, hidden=(config.mlp_hidden,),
                                      dtype=self.dtype,
                                      rng=self.rngs["texture_init"])
        self.surrogate: Optional[SurrogateDenoiser] = None
        if config.loss == "vsd":
            self.surrogate = SurrogateDenoiser(
                (config.resolution, config.resolution, 3),
                config.schedule_steps, rng=self.rngs["surrogate"])
        if resume is not None:
            self._restore(resume)
        os.makedirs(config.out_dir, exist_ok=True)

    # --- checkpoint plumbing -------------------------------------------------

    def _named_params(self):
        return named_field_params(self.field, self.color_field)

    def _restore(self, ckpt: Checkpoint) -> None:
        if ckpt.config_digest() != config_hash(self.config):
            # stage entry points rewrite stage-specific fields; only the
            # geometry-defining core must match
            for key in ("grid_resolution", "hash_levels", "hash_table_size",
                        "hash_feature_width", "mlp_hidden", "resolution",
                        "dtype", "seed"):
                if getattr(ckpt.config, key) != getattr(self.config, key):
                    raise CheckpointError(
                        f"checkpoint disagrees on {key}: "
                        f"{getattr(ckpt.config, key)} vs "
                        f"{getattr(self.config, key)}")
        with torch.no_grad():
            for name, p in self._named_params():
                if name in ckpt.arrays:
                    p.copy_(torch.from_numpy(ckpt.arrays[name]).to(p.dtype))
        if self.surrogate is not None:
            for attr in ("w1", "b1", "w2", "b2"):
                key = f"surrogate.{attr}"
                if key in ckpt.arrays:
                    setattr(self.surrogate, attr, ckpt.arrays[key].copy())
            for pname in ("w1", "b1", "w2", "b2"):
                m = ckpt.arrays.get(f"surrogate.adam_m.{pname}")
                v = ckpt.arrays.get(f"surrogate.adam_v.{pname}")
                if m is not None and v is not None:
                    self.surrogate._adam[pname] = (m.copy(), v.copy())
            if "surrogate.steps" in ckpt.meta:
                self.surrogate.steps_taken = int(ckpt.meta["surrogate.steps"])
        fr = ckpt.meta.get("fit_report")
        if fr is not None:
            from .fields import FitReport
            self.field.fit_report = FitReport(**fr)
        if ckpt.meta.get("sdf_frozen"):
            edit_mode_freeze(self.field)

    def make_checkpoint(self, stage: str, iteration: int,
                        optimizer: Optional[torch.optim.Optimizer] = None,
                        opt_params: Optional[list] = None,
                        extra_meta: Optional[dict] = None) -> Checkpoint:
        arrays = {name: p.detach().numpy().copy()
                  for name, p in self._named_params()}
        if self.surrogate is not None:
            for pname, val in self.surrogate._params().items():
                arrays[f"surrogate.{pname}"] = val.copy()
            for pname, (m, v) in self.surrogate._adam.items():
                arrays[f"surrogate.adam_m.{pname}"] = m.copy()
                arrays[f"surrogate.adam_v.{pname}"] = v.copy()
        meta = {"config_hash": config_hash(self.config),
                "sdf_frozen": bool(self.field.sdf_frozen)}
        if self.field.fit_report is not None:
            rep = self.field.fit_report
            meta["fit_report"] = {"iterations": rep.iterations,
                                  "final_loss": rep.final_loss,
                                  "holdout_max_error": rep.holdout_max_error}
        if self.surrogate is not None:
            meta["surrogate.steps"] = self.surrogate.steps_taken
        if optimizer is not None and opt_params is not None:
            name_of = {id(p): n for n, p in self._named_params()}
            for p in opt_params:
                st = optimizer.state.get(p)
                if not st:
                    continue
                pname = name_of[id(p)]
                arrays[f"opt.{pname}.exp_avg"] = st["exp_avg"].numpy().copy()
                arrays[f"opt.{pname}.exp_avg_sq"] = st["exp_avg_sq"].numpy().copy()
                arrays[f"opt.{pname}.step"] = np.array(
                    [float(st["step"])], dtype=np.float64)
        meta.update(extra_meta or {})
        return Checkpoint(config=self.config, stage=stage, iteration=iteration,
                          arrays=arrays, rng_states=rng_states(self.rngs),
                          meta=meta)

    def make_optimizer(self, params: list) -> torch.optim.AdamW:
        tables, rest = [], []
        name_of = {id(p): n for n, p in self._named_params()}
        for p in params:
            (tables if name_of[id(p)].endswith("tables") else rest).append(p)
        groups = []
        if tables:
            groups.append({"params": tables, "lr": self.config.table_lr})
        if rest:
            groups.append({"params": rest, "lr": self.config.mlp_lr})
        return torch.optim.AdamW(groups, weight_decay=self.config.weight_decay)

    def restore_optimizer(self, optimizer: torch.optim.Optimizer,
                          params: list, ckpt: Checkpoint) -> None:
        name_of = {id(p): n for n, p in self._named_params()}
        for p in params:
            pname = name_of[id(p)]
            ea = ckpt.arrays.get(f"opt.{pname}.exp_avg")
            if ea is None:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(
                    float(ckpt.arrays[f"opt.{pname}.step"][0])),
                "exp_avg": torch.from_numpy(ea.copy()).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(
                    ckpt.arrays[f"opt.{pname}.exp_avg_sq"].copy()).to(p.dtype),
            }

    # --- shared per-iteration machinery --------------------------------------

    def guidance_for(self, stage: str) -> GuidanceSpec:
        if stage == "geometry" or stage == "edit_offsets":
            return GuidanceSpec(self.config.geometry_cfg_weight,
                                self.config.geometry_use_negative)
        return GuidanceSpec(self.config.texture_cfg_weight,
                            self.config.texture_use_negative)

    def policy_for(self, stage: str) -> TimePolicy:
        c = self.config
        if stage == "geometry" or stage == "edit_offsets":
            return TimePolicy(c.geometry_min_fraction, c.geometry_max_fraction)
        return TimePolicy(c.texture_min_fraction, c.texture_max_fraction,
                          anneal_at_iter=c.texture_anneal_at_iter,
                          annealed_max_fraction=c.texture_annealed_max_fraction)

    def condition_for(self, camera: CameraPose, depth_map) -> Condition:
        tag = view_tag(camera)
        landmark = None
        if self.config.oracle_pose_conditioned:
            keypoints = map_keypoints(self.template, self.field)
            landmark = project_landmarks(keypoints, camera, tag,
                                         depth_map=depth_map)
        return Condition(prompt_tag=self.config.prompt,
                         negative_tag=self.config.negative_prompt,
                         view_tag=tag, landmark=landmark)

    def distill_step(self, x_np: np.ndarray, stage: str, iteration: int,
                     condition: Condition):
        guidance = self.guidance_for(stage)
        policy = self.policy_for(stage)
        rng = self.rngs["distill"]
        kind = self.config.loss
        args = (self.schedule, policy, iteration, rng, condition,
                self.config.omega_kind)
        if kind == "ssd":
            return ssd_step(x_np, self.oracle, guidance, *args)
        if kind == "sds":
            return sds_step(x_np, self.oracle, guidance, *args)
        return vsd_step(x_np, self.oracle, self.surrogate, guidance, *args)

    def background_for(self, stage: str, iteration: int, total: int) -> float:
        # the background stream is consumed every iteration so that resumed
        # runs stay aligned regardless of the early/late switch
        draw = float(self.rngs["background"].uniform(0.35, 0.65))
        if stage != "geometry":
            return self.config.background
        if iteration < self.config.early_mask_fraction * total:
            return self.config.background
        return draw

    def export_mesh(self, mesh: Mesh, stage: str, iteration: int) -> str:
        base = os.path.join(self.config.out_dir, f"mesh_{stage}_{iteration:06d}")
        if mesh.colors is not None:
            path = base + ".ply"
            write_ply(path, mesh.vertices_np, mesh.faces, mesh.normals_np,
                      mesh.colors.detach().numpy())
        else:
            path = base + ".obj"
            write_obj(path, mesh.vertices_np, mesh.faces, mesh.normals_np)
        return path


def _reparam_torch(x: torch.Tensor, grad_image: np.ndarray) -> torch.Tensor:
    g = torch.tensor(grad_image, dtype=x.dtype)
    target = (x.detach() - g)
    return ((x - target) ** 2).mean()


def run_init(config: RunConfig) -> Checkpoint:
    """Fit the SDF head to the generation template (init-geometry)."""
    session = RunSession(config, stage_mode="normal")
    write_manifest(config, os.path.join(config.out_dir, "manifest_init.toml"))
    init_sdf_fit(session.field, session.template,
                 points_per_iter=config.init_points_per_iter,
                 iters=config.init_max_iters,
                 rng=session.rngs["init_points"],
                 stop_at_error=config.init_stop_at_error)
    return session.make_checkpoint("init", 0)


def _geometry_like_loop(session: RunSession, stage: str, start: int,
                        iters: int, train_params: list,
                        optimizer: torch.optim.Optimizer,
                        trace: TraceWriter) -> None:
    config = session.config
    for i in range(start, iters):
        camera = sample_camera(session.rngs["camera"], session.ranges)
        mesh = marching_tets(session.grid, session.field)
        if len(mesh.faces) == 0:
            raise TrainingError(f"surface vanished at iteration {i}")
        out = rasterize(mesh, camera, mode="normal")
        bg = session.background_for("geometry", i, iters)
        x = composite(out.normal_map, out.mask, bg)
        condition = session.condition_for(camera, out.depth)
        res = session.distill_step(
            x.detach().numpy().astype(np.float64), stage, i, condition)
        reg = regularize(mesh)
        loss = (_reparam_torch(x, res.grad_image)
                + config.normal_consistency_weight * reg.normal_consistency
                + config.laplacian_weight * reg.laplacian)
        loss_val = float(loss.detach())
        if not np.isfinite(loss_val):
            session.make_checkpoint(stage, i, optimizer, train_params).save(
                os.path.join(config.out_dir, f"abort_{stage}.ckpt"))
            raise TrainingError(f"non-finite loss at iteration {i}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        trace.append(i, loss_val, float(np.linalg.norm(res.grad_image)),
                     res.diagnostics["t"], res.diagnostics["cfg_weight"])
        if (i + 1) % config.export_every == 0 or i + 1 == iters:
            with torch.no_grad():
                session.export_mesh(marching_tets(session.grid, session.field),
                                    stage, i + 1)


def _texture_like_loop(session: RunSession, stage: str, start: int,
                       iters: int, optimizer: torch.optim.Optimizer,
                       trace: TraceWriter, iter_offset: int = 0) -> None:
    """Texture/refine loop: geometry fixed, mesh extracted once."""
    config = session.config
    with torch.no_grad():
        mesh = marching_tets(session.grid, session.field)
    verts = mesh.vertices.detach()
    static = Mesh(vertices=verts, faces=mesh.faces,
                  normals=mesh.normals.detach())
    keypoints = map_keypoints(session.template, session.field)
    train_params = session.color_field.trainable_parameters()
    for i in range(start, iters):
        camera = sample_camera(session.rngs["camera"], session.ranges)
        static.colors = session.color_field.rgb(verts)
        out = rasterize(static, camera, mode="color")
        bg = session.background_for(stage, i, iters)
        x = composite(out.color, out.mask.detach(), bg)
        tag = view_tag(camera)
        landmark = None
        if config.oracle_pose_conditioned:
            landmark = project_landmarks(keypoints, camera, tag,
                                         depth_map=out.depth)
        condition = Condition(prompt_tag=config.prompt,
                              negative_tag=config.negative_prompt,
                              view_tag=tag, landmark=landmark)
        res = session.distill_step(
            x.detach().numpy().astype(np.float64), "texture",
            i + iter_offset, condition)
        loss = _reparam_torch(x, res.grad_image)
        loss_val = float(loss.detach())
        if not np.isfinite(loss_val):
            session.make_checkpoint(stage, i, optimizer, train_params).save(
                os.path.join(config.out_dir, f"abort_{stage}.ckpt"))
            raise TrainingError(f"non-finite loss at iteration {i}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        trace.append(i, loss_val, float(np.linalg.norm(res.grad_image)),
                     res.diagnostics["t"], res.diagnostics["cfg_weight"])
        if (i + 1) % config.export_every == 0 or i + 1 == iters:
            with torch.no_grad():
                static.colors = session.color_field.rgb(verts)
                session.export_mesh(static, stage, i + 1)


def run_geometry_stage(config: RunConfig,
                       init: Optional[Checkpoint] = None,
                       resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Optimize psi_g against the oracle through normal-map renders."""
    session = RunSession(config, resume=resume or init, stage_mode="normal")
    if resume is None and init is None:
        init_sdf_fit(session.field, session.template,
                     points_per_iter=config.init_points_per_iter,
                     iters=config.init_max_iters,
                     rng=session.rngs["init_points"],
                     stop_at_error=config.init_stop_at_error)
    if not session.field.ready:
        raise GeometryError("geometry stage requires an initialized SDF "
                            "(run init_sdf_fit / init-geometry first)")
    write_manifest(config, os.path.join(config.out_dir, "manifest_geometry.toml"))
    params = session.field.trainable_parameters()
    optimizer = session.make_optimizer(params)
    start = 0
    if resume is not None:
        if resume.stage != "geometry":
            raise SequencingError(
                f"cannot resume geometry from a {resume.stage!r} checkpoint")
        session.restore_optimizer(optimizer, params, resume)
        start = resume.iteration
    mode = "a" if start else "w"
    trace_path = os.path.join(config.out_dir, "trace_geometry.csv")
    trace = TraceWriter(trace_path) if mode == "w" else _append_trace(trace_path)
    with trace:
        _geometry_like_loop(session, "geometry", start, config.geometry_iters,
                            params, optimizer, trace)
    return session.make_checkpoint("geometry", config.geometry_iters,
                                   optimizer, params)


def _append_trace(path) -> TraceWriter:
    tw = TraceWriter.__new__(TraceWriter)
    tw.path = path
    tw._fh = open(path, "a", newline="")
    return tw


def run_texture_stage(config: RunConfig, geometry: Checkpoint,
                      resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Optimize psi_tex on the frozen geometry through color renders."""
    if geometry.stage not in ("geometry", "texture", "edit", "refine"):
        raise SequencingError(
            f"texture stage needs a geometry checkpoint, got {geometry.stage!r}")
    session = RunSession(config, resume=resume or geometry, stage_mode="color")
    for p in session.field.parameters():
        p.requires_grad_(False)
    write_manifest(config, os.path.join(config.out_dir, "manifest_texture.toml"))
    params = session.color_field.trainable_parameters()
    optimizer = session.make_optimizer(params)
    start = 0
    if resume is not None:
        if resume.stage != "texture":
            raise SequencingError(
                f"cannot resume texture from a {resume.stage!r} checkpoint")
        session.restore_optimizer(optimizer, params, resume)
        start = resume.iteration
    trace_path = os.path.join(config.out_dir, "trace_texture.csv")
    trace = TraceWriter(trace_path) if start == 0 else _append_trace(trace_path)
    with trace:
        _texture_like_loop(session, "texture", start, config.texture_iters,
                           optimizer, trace)
    return session.make_checkpoint("texture", config.texture_iters,
                                   optimizer, params)


def run_edit_phase(config: RunConfig, source: Checkpoint,
                   phase: int) -> Checkpoint:
    """Editing: phase 1 deforms offsets under a frozen SDF; phase 2 retunes
    psi_tex on the deformed geometry, warm-started from generation."""
    if phase not in (1, 2):
        raise ConfigurationError(f"edit phase must be 1 or 2, got {phase}")
    if phase == 2 and not source.meta.get("edit_phase1_done"):
        raise SequencingError("edit phase 2 requested before phase 1")
    if phase == 1:
        session = RunSession(config, resume=source, stage_mode="normal")
        if not session.field.ready:
            raise GeometryError("editing requires a trained geometry field")
        handle = edit_mode_freeze(session.field)
        params = [p for p in handle.trainable_parameters()
                  if p.requires_grad]
        optimizer = session.make_optimizer(params)
        trace = TraceWriter(os.path.join(config.out_dir, "trace_edit1.csv"))
        with trace:
            _geometry_like_loop(session, "edit_offsets", 0,
                                config.edit_offset_iters, params, optimizer,
                                trace)
        return session.make_checkpoint("edit", config.edit_offset_iters,
                                       optimizer, params,
                                       extra_meta={"edit_phase1_done": True})
    session = RunSession(config, resume=source, stage_mode="color")
    for p in session.field.parameters():
        p.requires_grad_(False)
    params = session.color_field.trainable_parameters()
    optimizer = session.make_optimizer(params)
    trace = TraceWriter(os.path.join(config.out_dir, "trace_edit2.csv"))
    with trace:
        _texture_like_loop(session, "edit_texture", 0,
                           config.edit_texture_iters, optimizer, trace)
    return session.make_checkpoint(
        "edit", config.edit_texture_iters, optimizer, params,
        extra_meta={"edit_phase1_done": True, "edit_phase2_done": True})


def run_edit(config: RunConfig, generated: Checkpoint) -> Checkpoint:
    """Both editing phases: geometric deformation, then texture follow-up."""
    phase1 = run_edit_phase(config, generated, 1)
    return run_edit_phase(config, phase1, 2)


def run_refine(config: RunConfig, textured: Checkpoint) -> Checkpoint:
    """Image-space refinement: more texture-only distillation steps."""
    if textured.stage not in ("texture", "edit"):
        raise SequencingError(
            f"refinement needs a textured checkpoint, got {textured.stage!r}")
    session = RunSession(config, resume=textured, stage_mode="color")
    for p in session.field.parameters():
        p.requires_grad_(False)
    write_manifest(config, os.path.join(config.out_dir, "manifest_refine.toml"))
    params = session.color_field.trainable_parameters()
    optimizer = session.make_optimizer(params)
    trace = TraceWriter(os.path.join(config.out_dir, "trace_refine.csv"))
    with trace:
        _texture_like_loop(session, "refine", 0, config.refine_iters,
                           optimizer, trace,
                           iter_offset=config.texture_iters)
    return session.make_checkpoint("refine", config.refine_iters,
                                   optimizer, params)
