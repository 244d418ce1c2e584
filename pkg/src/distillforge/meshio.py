"""Mesh export in OBJ and binary little-endian PLY, plus parsers for round-trips.

OBJ carries positions, normals, and (optionally) per-vertex colors as
extension comments of the form ``# vc r g b`` following each vertex line.
PLY is binary little-endian with float positions/normals and uchar colors.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigurationError


def write_obj(path, vertices: np.ndarray, faces: np.ndarray,
              normals: np.ndarray | None = None,
              colors: np.ndarray | None = None) -> None:
    with open(path, "w") as fh:
        fh.write("# distillforge mesh export\n")
        if colors is not None:
            fh.write("# vertex colors as '# vc r g b' after each vertex\n")
        for i, v in enumerate(vertices):
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            if colors is not None:
                c = colors[i]
                fh.write(f"# vc {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
        if normals is not None:
            for n in normals:
                fh.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for f in faces:
            if normals is not None:
                fh.write(f"f {f[0]+1}//{f[0]+1} {f[1]+1}//{f[1]+1} "
                         f"{f[2]+1}//{f[2]+1}\n")
            else:
                fh.write(f"f {f[0]+1} {f[1]+1} {f[2]+1}\n")


def read_obj(path):
    verts, normals, colors, faces = [], [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif parts[0] == "#" and len(parts) >= 5 and parts[1] == "vc":
                colors.append([float(x) for x in parts[2:5]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return (np.array(verts), np.array(faces, dtype=np.int64),
            np.array(normals) if normals else None,
            np.array(colors) if colors else None)


def write_ply(path, vertices: np.ndarray, faces: np.ndarray,
              normals: np.ndarray | None = None,
              colors: np.ndarray | None = None) -> None:
    n_v, n_f = len(vertices), len(faces)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n_v}",
              "property float x", "property float y", "property float z"]
    if normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
    if colors is not None:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header += [f"element face {n_f}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        cols = [np.asarray(vertices, dtype="<f4")]
        if normals is not None:
            cols.append(np.asarray(normals, dtype="<f4"))
        body = np.concatenate(cols, axis=1).tobytes()
        if colors is not None:
            c8 = np.clip(np.round(np.asarray(colors) * 255), 0, 255).astype(np.uint8)
            stride = cols[0].shape[1] + (cols[1].shape[1] if normals is not None else 0)
            rows = bytearray()
            flat = np.concatenate(cols, axis=1)
            for i in range(n_v):
                rows += flat[i].tobytes() + c8[i].tobytes()
            body = bytes(rows)
        fh.write(body)
        for f in np.asarray(faces, dtype="<i4"):
            fh.write(struct.pack("<B3i", 3, *f))


def read_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").strip().split("\n")
    if "format binary_little_endian 1.0" not in header:
        raise ConfigurationError(f"{path}: expected binary little-endian PLY")
    n_v = n_f = 0
    v_props: list[str] = []
    section = None
    for line in header:
        parts = line.split()
        if parts[0] == "element":
            section = parts[1]
            if section == "vertex":
                n_v = int(parts[2])
            elif section == "face":
                n_f = int(parts[2])
        elif parts[0] == "property" and section == "vertex" and parts[1] != "list":
            v_props.append((parts[1], parts[2]))
    off = end
    n_float = sum(1 for t, _ in v_props if t == "float")
    n_uchar = sum(1 for t, _ in v_props if t == "uchar")
    stride = 4 * n_float + n_uchar
    raw = data[off:off + n_v * stride]
    off += n_v * stride
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n_v, stride)
    floats = rec[:, :4 * n_float].copy().view("<f4")
    verts = floats[:, :3].astype(np.float64)
    normals = floats[:, 3:6].astype(np.float64) if n_float >= 6 else None
    colors = (rec[:, 4 * n_float:].astype(np.float64) / 255.0
              if n_uchar == 3 else None)
    faces = np.empty((n_f, 3), dtype=np.int64)
    for i in range(n_f):
        cnt = data[off]
        if cnt != 3:
            raise ConfigurationError(f"{path}: non-triangle face in PLY")
        faces[i] = struct.unpack_from("<3i", data, off + 1)
        off += 1 + 12
    return verts, faces, normals, colors
