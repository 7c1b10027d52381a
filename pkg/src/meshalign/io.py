"""File formats: ASCII PLY, NMFB feature banks, NMFG feature grids, PGM masks."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .mesh import MeshError, NeuralMesh

BANK_MAGIC = b"NMFB"
GRID_MAGIC = b"NMFG"
BANK_VERSION = 1
LOAD_NORM_TOL = 1e-3


class FormatError(ValueError):
    """Malformed or inconsistent input file."""


# -- PLY ---------------------------------------------------------------------

def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an ASCII PLY; returns ``(vertices (n,3), faces (m,3))``.

    Only x/y/z of the vertex element are kept; other properties are skipped.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    elements: list[list] = []  # [name, count, [props]]
    body_start = None
    fmt = None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before element")
            elements[-1][2].append(tok[1:])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
    if fmt != "ascii":
        raise FormatError(f"{path}: only ASCII PLY is supported (got {fmt})")
    if body_start is None:
        raise FormatError(f"{path}: missing end_header")

    body = [ln.split() for ln in lines[body_start:] if ln.strip()]
    pos = 0
    vertices = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        rows = body[pos:pos + count]
        if len(rows) != count:
            raise FormatError(f"{path}: element {name} truncated")
        pos += count
        if name == "vertex":
            names = [p[-1] for p in props]
            try:
                idx = [names.index(c) for c in "xyz"]
            except ValueError:
                raise FormatError(f"{path}: vertex element lacks x/y/z") from None
            try:
                vertices = np.array([[float(r[j]) for j in idx] for r in rows], dtype=float).reshape(-1, 3)
            except (ValueError, IndexError):
                raise FormatError(f"{path}: bad vertex row") from None
        elif name == "face":
            out = []
            for r in rows:
                try:
                    k = int(r[0])
                    ids = [int(x) for x in r[1:1 + k]]
                except (ValueError, IndexError):
                    raise FormatError(f"{path}: bad face row") from None
                if k != 3 or len(ids) != 3:
                    raise FormatError(f"{path}: non-triangle face with {k} vertices")
                out.append(ids)
            faces = np.array(out, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise FormatError(f"{path}: face index out of range")
    return vertices, faces


def write_ply(path, vertices, faces=None) -> None:
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    f = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    out = ["ply", "format ascii 1.0", f"element vertex {len(v)}",
           "property float x", "property float y", "property float z"]
    if faces is not None:
        out += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    out.append("end_header")
    out += [f"{x!r} {y!r} {z!r}" for x, y, z in v.tolist()]
    out += [f"3 {a} {b} {c}" for a, b, c in f.tolist()]
    Path(path).write_text("\n".join(out) + "\n")


# -- feature banks -----------------------------------------------------------

def write_feature_banks(path, banks, feature_dim: int) -> None:
    sizes = [len(b) for b in banks]
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<III", BANK_VERSION, len(sizes), feature_dim))
        fh.write(np.asarray(sizes, dtype="<u4").tobytes())
        for b in banks:
            if len(b):
                fh.write(np.asarray(b, dtype="<f4").reshape(-1, feature_dim).tobytes())


def read_feature_banks(path) -> tuple[list[np.ndarray], int]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != BANK_MAGIC:
        raise FormatError(f"{path}: bad NMFB magic")
    version, n, dim = struct.unpack_from("<III", data, 4)
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported NMFB version {version}")
    header = 16 + 4 * n
    if len(data) < header:
        raise FormatError(f"{path}: truncated bank-size table")
    sizes = np.frombuffer(data, dtype="<u4", count=n, offset=16).astype(np.int64)
    total = int(sizes.sum())
    if len(data) != header + 4 * total * dim:
        raise FormatError(f"{path}: file length does not match header arithmetic")
    rows = np.frombuffer(data, dtype="<f4", count=total * dim, offset=header).astype(float).reshape(total, dim)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return [rows[offsets[i]:offsets[i + 1]] for i in range(n)], int(dim)


def _renormalize_bank(bank: np.ndarray, where: str) -> np.ndarray:
    if len(bank) == 0:
        return bank
    norms = np.linalg.norm(bank, axis=1)
    if np.any(np.abs(norms - 1.0) > LOAD_NORM_TOL):
        raise FormatError(f"{where}: feature norm outside [{1 - LOAD_NORM_TOL}, {1 + LOAD_NORM_TOL}]")
    return bank / norms[:, None]


def load_neural_mesh(mesh_path, bank_path) -> NeuralMesh:
    vertices, faces = read_ply(mesh_path)
    banks, dim = read_feature_banks(bank_path)
    if len(banks) != len(vertices):
        raise FormatError(f"vertex-count mismatch: PLY has {len(vertices)}, bank file declares {len(banks)}")
    banks = [_renormalize_bank(b, f"{bank_path} vertex {i}") for i, b in enumerate(banks)]
    try:
        return NeuralMesh(vertices, faces, tuple(banks), dim)
    except MeshError as e:
        raise FormatError(str(e)) from e


def save_neural_mesh(mesh: NeuralMesh, mesh_path, bank_path) -> None:
    write_ply(mesh_path, mesh.vertices, mesh.faces)
    write_feature_banks(bank_path, mesh.feature_banks, mesh.feature_dim)


# -- feature grids -----------------------------------------------------------

def write_feature_grid(path, grid) -> None:
    g = np.asarray(grid, dtype="<f4")
    if g.ndim != 3:
        raise FormatError("feature grid must be H x W x D")
    h, w, d = g.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<III", h, w, d))
        fh.write(g.tobytes())


def read_feature_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != GRID_MAGIC:
        raise FormatError(f"{path}: bad NMFG magic")
    h, w, d = struct.unpack_from("<III", data, 4)
    if len(data) != 16 + 4 * h * w * d:
        raise FormatError(f"{path}: file length does not match header arithmetic")
    return np.frombuffer(data, dtype="<f4", offset=16).astype(float).reshape(h, w, d)


# -- masks -------------------------------------------------------------------

def write_pgm(path, mask) -> None:
    m = np.asarray(mask)
    img = np.where(m > 0, 255, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit PGM (P5 or P2); returns a boolean mask (nonzero = object)."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    if magic == b"P5":
        raw = data[pos + 1:pos + 1 + w * h]
        if len(raw) != w * h:
            raise FormatError(f"{path}: truncated PGM raster")
        img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    elif magic == b"P2":
        vals = data[pos:].split()
        if len(vals) < w * h:
            raise FormatError(f"{path}: truncated PGM raster")
        img = np.array([int(x) for x in vals[:w * h]]).reshape(h, w)
    else:
        raise FormatError(f"{path}: not a PGM file")
    return img > 0


# -- JSON --------------------------------------------------------------------

def dump_json(path, obj) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())
