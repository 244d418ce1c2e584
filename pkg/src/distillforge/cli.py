"""Command-line entry points.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
Diagnostics go to stderr; machine-readable results go to files.
DISTILLFORGE_THREADS caps worker/torch parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np
import torch

from . import verification
from .checkpoint import Checkpoint
from .config import PROFILES, RunConfig, apply_profile, load_config
from .errors import ConfigurationError, DistillForgeError
from .meshio import write_obj, write_ply

COMMANDS = ("init-geometry", "fit-geometry", "fit-texture", "edit", "refine",
            "export", "verify", "oracle-info")


def _apply_thread_cap() -> None:
    cap = os.environ.get("DISTILLFORGE_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distillforge",
        description="Score-distillation engine (SDS/VSD/SSD) for a "
                    "deformable tetrahedral head representation.")
    sub = parser.add_subparsers(dest="command")

    def add_common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--profile", choices=sorted(PROFILES),
                       help="named config profile")
        p.add_argument("--loss", choices=("sds", "vsd", "ssd"))
        p.add_argument("--oracle", help="oracle spec, e.g. "
                       "render_anchored:ellipsoid_nose or remote:host:port")
        p.add_argument("--debug-dumps", action="store_true",
                       help="dump per-export PNG/PPM images")

    for name in ("init-geometry", "fit-geometry", "fit-texture", "edit",
                 "refine"):
        p = sub.add_parser(name)
        add_common(p)
        if name != "init-geometry":
            p.add_argument("--from", dest="source",
                           help="input checkpoint path")
    p = sub.add_parser("export")
    p.add_argument("checkpoint")
    p.add_argument("--format", choices=("obj", "ply"), default="obj")
    p.add_argument("--out", required=True)
    p = sub.add_parser("verify")
    p.add_argument("--suite", default="acceptance",
                   help=f"one of {sorted(verification.SUITES)}")
    p.add_argument("--list", action="store_true", help="list checks and exit")
    p = sub.add_parser("oracle-info")
    add_common(p)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "profile", None):
        cfg = apply_profile(cfg, args.profile)
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ConfigurationError(f"config file not found: {args.config}")
        cfg = load_config(args.config, base=cfg)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "loss", None):
        overrides["loss"] = args.loss
    if getattr(args, "oracle", None):
        overrides.update(_oracle_overrides(args.oracle))
    return replace(cfg, **overrides) if overrides else cfg


def _oracle_overrides(spec: str) -> dict:
    kind, _, rest = spec.partition(":")
    if kind == "render_anchored":
        out = {"oracle_kind": kind}
        if rest:
            out["oracle_target"] = rest
        return out
    if kind == "remote":
        host, _, port = rest.partition(":")
        out = {"oracle_kind": "remote"}
        if host:
            out["oracle_host"] = host
        if port:
            out["oracle_port"] = int(port)
        return out
    raise ConfigurationError(
        f"unknown oracle spec {spec!r} (render_anchored[:target] or "
        f"remote[:host[:port]])")


def _load_checkpoint(path) -> Checkpoint:
    if not path:
        raise ConfigurationError("this command needs --from <checkpoint>")
    if not os.path.exists(path):
        raise ConfigurationError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def cmd_init_geometry(args) -> int:
    from .pipeline import run_init
    cfg = resolve_config(args)
    ck = run_init(cfg)
    path = os.path.join(cfg.out_dir, "init.ckpt")
    ck.save(path)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_fit_geometry(args) -> int:
    from .pipeline import run_geometry_stage
    cfg = resolve_config(args)
    init = _load_checkpoint(args.source) if args.source else None
    ck = run_geometry_stage(cfg, init=init)
    path = os.path.join(cfg.out_dir, "geometry.ckpt")
    ck.save(path)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_fit_texture(args) -> int:
    from .pipeline import run_texture_stage
    cfg = resolve_config(args)
    geometry = _load_checkpoint(args.source)
    ck = run_texture_stage(cfg, geometry)
    path = os.path.join(cfg.out_dir, "texture.ckpt")
    ck.save(path)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_edit(args) -> int:
    from .pipeline import run_edit
    cfg = resolve_config(args)
    generated = _load_checkpoint(args.source)
    ck = run_edit(cfg, generated)
    path = os.path.join(cfg.out_dir, "edit.ckpt")
    ck.save(path)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_refine(args) -> int:
    from .pipeline import run_refine
    cfg = resolve_config(args)
    textured = _load_checkpoint(args.source)
    ck = run_refine(cfg, textured)
    path = os.path.join(cfg.out_dir, "refine.ckpt")
    ck.save(path)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_export(args) -> int:
    from .pipeline import RunSession
    from .tetra import marching_tets
    ck = _load_checkpoint(args.checkpoint)
    session = RunSession(ck.config, resume=ck, stage_mode="normal")
    mesh = marching_tets(session.grid, session.field)
    with_colors = "tex.tables" in ck.arrays and ck.stage in (
        "texture", "edit", "refine")
    colors = None
    if with_colors:
        import torch as _t
        with _t.no_grad():
            colors = session.color_field.rgb(mesh.vertices.detach()).numpy()
    if args.format == "obj":
        write_obj(args.out, mesh.vertices_np, mesh.faces, mesh.normals_np,
                  colors)
    else:
        write_ply(args.out, mesh.vertices_np, mesh.faces, mesh.normals_np,
                  colors)
    print(f"wrote {args.out} ({len(mesh.vertices)} vertices, "
          f"{len(mesh.faces)} faces)", file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    if args.list:
        for suite, names in verification.SUITES.items():
            print(f"{suite}: {', '.join(names)}")
        return 0
    results = verification.run_suite(args.suite)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 2 if failed else 0


def cmd_oracle_info(args) -> int:
    from .diffusion import build_schedule
    from .pipeline import build_oracle
    cfg = resolve_config(args)
    schedule = build_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
    oracle = build_oracle(cfg, schedule, "normal")
    print(f"kind: {cfg.oracle_kind}")
    print(f"image shape: {oracle.image_shape}")
    print(f"target: {cfg.oracle_target}")
    print(f"variance: {cfg.oracle_variance} "
          f"(unconditional {cfg.oracle_uncond_variance})")
    print(f"pose conditioned: {cfg.oracle_pose_conditioned}")
    return 0


HANDLERS = {
    "init-geometry": cmd_init_geometry,
    "fit-geometry": cmd_fit_geometry,
    "fit-texture": cmd_fit_texture,
    "edit": cmd_edit,
    "refine": cmd_refine,
    "export": cmd_export,
    "verify": cmd_verify,
    "oracle-info": cmd_oracle_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return 1 if exc.code not in (0, None) else 0
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    _apply_thread_cap()
    try:
        return HANDLERS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DistillForgeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
