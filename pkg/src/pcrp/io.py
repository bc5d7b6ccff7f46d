"""XYZ text clouds and OFF meshes."""
from __future__ import annotations

import logging
import zlib
from pathlib import Path

import numpy as np

from .geometry import as_cloud, normalize_to_unit_sphere

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_COUNT = 2048


def read_xyz(path) -> np.ndarray:
    """One point per line, three whitespace-separated floats; ``#`` lines are comments."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise ValueError(f"{path}: no points")
    return as_cloud(rows)


def write_xyz(path, points) -> None:
    pts = as_cloud(points)
    # %.17g round-trips float64 exactly
    np.savetxt(path, pts, fmt="%.17g")


def read_off(path):
    """Return ``(vertices, triangles)``; polygons are fan-triangulated."""
    with open(path, "r", encoding="utf-8") as fh:
        tokens_by_line = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not tokens_by_line:
        raise ValueError(f"{path}: empty OFF file")
    head = tokens_by_line[0]
    if not head[0].startswith("OFF"):
        raise ValueError(f"{path}: missing OFF header")
    # some ModelNet files glue the counts onto the header ("OFF490 518 0")
    rest = [head[0][3:]] if len(head[0]) > 3 else []
    rest += head[1:]
    body = tokens_by_line[1:]
    if rest:
        counts = rest
    else:
        counts, body = body[0], body[1:]
    n_vert, n_face = int(counts[0]), int(counts[1])
    if len(body) < n_vert + n_face:
        raise ValueError(f"{path}: truncated OFF body")
    verts = np.array([[float(x) for x in body[i][:3]] for i in range(n_vert)], dtype=np.float64)
    tris = []
    skipped = 0
    for line in body[n_vert:n_vert + n_face]:
        n = int(line[0])
        ids = [int(x) for x in line[1:1 + n]]
        if n < 3 or len(ids) < n:
            skipped += 1
            continue
        for j in range(1, n - 1):
            tris.append((ids[0], ids[j], ids[j + 1]))
    if skipped:
        log.warning("%s: skipped %d faces with fewer than 3 vertices", path, skipped)
    faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= n_vert):
        raise ValueError(f"{path}: face index out of range")
    return verts, faces


def sample_mesh_surface(vertices, faces, n: int = DEFAULT_SAMPLE_COUNT, seed=0,
                        normalize: bool = True, return_face_index: bool = False):
    """Area-weighted uniform sampling of ``n`` points from a triangle mesh.

    With ``return_face_index`` the per-sample index into ``faces`` is returned too.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    good = area > 1e-15
    if not np.all(good):
        log.warning("skipping %d degenerate faces", int((~good).sum()))
        a, b, c, area = a[good], b[good], c[good], area[good]
    face_ids = np.flatnonzero(good)
    if area.size == 0:
        raise ValueError("mesh has no faces with positive area")
    rng = np.random.default_rng(seed)
    face = rng.choice(area.size, size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    pts = ((1 - r1)[:, None] * a[face]
           + (r1 * (1 - r2))[:, None] * b[face]
           + (r1 * r2)[:, None] * c[face])
    if normalize:
        pts = normalize_to_unit_sphere(pts)
    if return_face_index:
        return pts, face_ids[face]
    return pts


def load_cloud(path, n_points: int = DEFAULT_SAMPLE_COUNT, seed=None, normalize: bool = True) -> np.ndarray:
    """Read a ``.xyz``/``.txt`` cloud or sample an ``.off`` mesh.

    OFF sampling without an explicit ``seed`` is seeded from the file name, so
    repeated loads of one mesh give the same cloud.
    """
    path = Path(path)
    if path.suffix.lower() == ".off":
        if seed is None:
            seed = zlib.crc32(path.name.encode("utf-8"))
        verts, faces = read_off(path)
        return sample_mesh_surface(verts, faces, n_points, seed=seed, normalize=normalize)
    pts = read_xyz(path)
    return normalize_to_unit_sphere(pts) if normalize else pts
