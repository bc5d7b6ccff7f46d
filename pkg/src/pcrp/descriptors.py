"""Rotation-invariant local geometry: normals, local reference frames, FPFH."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import SpatialIndex, as_cloud

log = logging.getLogger(__name__)

N_BINS = 11
FPFH_DIM = 3 * N_BINS
DEFAULT_FPFH_K = 32

# projections this close to zero count as "on the plane"; keeps sign tests stable
# against rounding for points lying exactly on a local plane
_SIGN_EPS = 1e-12
_WRAP_EPS = 1e-9


@dataclass(frozen=True)
class NormalField:
    normals: np.ndarray  # (N, 3) unit vectors
    degenerate: np.ndarray  # (N,) bool, True where the +z default was used

    def __len__(self):
        return self.normals.shape[0]


@dataclass(frozen=True)
class LocalReferenceFrame:
    axes: np.ndarray  # (3, 3) rows e1, e2, e3 (descending eigenvalue)
    eigenvalues: np.ndarray  # (3,) descending
    ambiguous: bool


def _index(cloud, index):
    return index if index is not None else SpatialIndex(cloud)


def _tiebreak_sign(vecs: np.ndarray) -> np.ndarray:
    # +1/-1 making the first non-negligible of (z, y, x) positive
    out = np.ones(vecs.shape[0])
    undecided = np.ones(vecs.shape[0], dtype=bool)
    for axis in (2, 1, 0):
        comp = vecs[:, axis]
        hit = undecided & (np.abs(comp) > _SIGN_EPS)
        out[hit] = np.sign(comp[hit])
        undecided &= ~hit
    return out


def estimate_normals(cloud, k: int = 16, index: SpatialIndex | None = None) -> NormalField:
    """Smallest-eigenvalue direction of each point's k-NN covariance (self included).

    Normals are oriented away from the cloud centroid; points whose offset from
    the centroid is perpendicular to the normal fall back to a +z-first rule.
    """
    if k < 3:
        raise ValueError("normal estimation needs k >= 3")
    pts = as_cloud(cloud)
    index = _index(pts, index)
    _, nbr = index.query(pts, k)
    local = pts[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / local.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    degenerate = evals[:, 2] < 1e-12
    normals[degenerate] = (0.0, 0.0, 1.0)

    outward = np.einsum("ni,ni->n", normals, pts - pts.mean(axis=0))
    sign = np.where(outward > _SIGN_EPS, 1.0, -1.0)
    tie = np.abs(outward) <= _SIGN_EPS
    sign[tie] = _tiebreak_sign(normals[tie])
    normals *= sign[:, None]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if degenerate.any():
        log.warning("%d points with degenerate neighborhoods got a default +z normal",
                    int(degenerate.sum()))
    return NormalField(normals, degenerate)


def _majority_sign(proj: np.ndarray) -> np.ndarray:
    """Per row, +1 if strictly more projections are positive than negative, -1 if fewer.

    Count ties fall back on the sign of the projection sum (+1 when it is zero).
    """
    pos = (proj > _SIGN_EPS).sum(axis=1)
    neg = (proj < -_SIGN_EPS).sum(axis=1)
    sign = np.where(pos > neg, 1.0, np.where(neg > pos, -1.0, 0.0))
    tie = sign == 0
    sign[tie] = np.where(proj[tie].sum(axis=1) < 0, -1.0, 1.0)
    return sign


def compute_lrfs(cloud, centers=None, k: int = 64, index: SpatialIndex | None = None):
    """Local reference frames at ``centers`` (default: every point).

    Returns ``(frames, eigenvalues, ambiguous)`` with ``frames[i]`` holding rows
    e1, e2, e3. e1 and e3 point toward the majority of neighbor offsets and
    e2 = e3 x e1, so every frame is right-handed.
    """
    if k < 4:
        raise ValueError("local reference frames need k >= 4")
    pts = as_cloud(cloud)
    index = _index(pts, index)
    centers = np.arange(pts.shape[0]) if centers is None else np.asarray(centers, dtype=np.int64)
    _, nbr = index.query(pts[centers], k)
    local = pts[nbr]
    offsets = local - pts[centers][:, None, :]
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / local.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    evals = evals[:, ::-1]
    e1 = evecs[:, :, 2]
    e3 = evecs[:, :, 0]
    e1 = e1 * _majority_sign(np.einsum("nki,ni->nk", offsets, e1))[:, None]
    e3 = e3 * _majority_sign(np.einsum("nki,ni->nk", offsets, e3))[:, None]
    e2 = np.cross(e3, e1)
    frames = np.stack([e1, e2, e3], axis=1)

    scale = np.maximum(evals[:, 0], np.finfo(float).tiny)
    gaps = np.minimum(evals[:, 0] - evals[:, 1], evals[:, 1] - evals[:, 2])
    ambiguous = gaps <= 1e-10 * scale
    return frames, evals, ambiguous


def compute_lrf(cloud, point: int, k: int = 64, index: SpatialIndex | None = None) -> LocalReferenceFrame:
    frames, evals, amb = compute_lrfs(cloud, [point], k=k, index=index)
    return LocalReferenceFrame(frames[0], evals[0], bool(amb[0]))


def pair_features(p_s, n_s, p_t, n_t):
    """Darboux-frame angles (alpha, phi, theta) for source/target pairs.

    Inputs broadcast over leading axes. Returns the three angle arrays plus a
    validity mask that is False for zero-distance pairs.
    """
    d = p_t - p_s
    dist = np.linalg.norm(d, axis=-1)
    valid = dist > 1e-12
    dn = d / np.where(valid, dist, 1.0)[..., None]
    u = np.broadcast_to(n_s, d.shape)
    v = np.cross(u, dn)
    vn = np.linalg.norm(v, axis=-1)
    v = np.where((vn > 1e-12)[..., None], v / np.where(vn > 1e-12, vn, 1.0)[..., None], 0.0)
    w = np.cross(u, v)
    alpha = np.einsum("...i,...i->...", v, n_t)
    phi = np.einsum("...i,...i->...", u, dn)
    theta = np.arctan2(np.einsum("...i,...i->...", w, n_t), np.einsum("...i,...i->...", u, n_t))
    # -pi and +pi are the same angle but sit in opposite end bins; rounding noise
    # in w.n_t must not decide between them
    theta = np.where(theta <= -np.pi + _WRAP_EPS, np.pi, theta)
    return alpha, phi, theta, valid


def _bin(values, lo, hi):
    b = np.floor((values - lo) / (hi - lo) * N_BINS).astype(np.int64)
    return np.clip(b, 0, N_BINS - 1)


def _normalize_blocks(hist: np.ndarray) -> np.ndarray:
    blocks = hist.reshape(hist.shape[:-1] + (3, N_BINS))
    total = blocks.sum(axis=-1, keepdims=True)
    blocks = np.where(total > 0, 100.0 * blocks / np.where(total > 0, total, 1.0), 0.0)
    return blocks.reshape(hist.shape)


def _as_normals(normals):
    return normals.normals if isinstance(normals, NormalField) else np.asarray(normals, dtype=np.float64)


def compute_spfh(cloud, normals, point: int, k: int = DEFAULT_FPFH_K,
                 index: SpatialIndex | None = None) -> np.ndarray:
    """33-bin simplified point feature histogram of one point over its k neighbors."""
    pts = as_cloud(cloud)
    nrm = _as_normals(normals)
    nset = _index(pts, index).neighbors(point, k)
    return _spfh_rows(pts, nrm, np.array([point]), nset.indices[None, :])[0]


def _spfh_rows(pts, nrm, centers, nbr):
    # one histogram per center over its row of the neighbor table
    alpha, phi, theta, valid = pair_features(
        pts[centers][:, None, :], nrm[centers][:, None, :], pts[nbr], nrm[nbr])
    hist = np.zeros((centers.size, FPFH_DIM))
    rows = np.broadcast_to(np.arange(centers.size)[:, None], nbr.shape)[valid]
    for offset, vals, lo, hi in ((0, alpha, -1.0, 1.0),
                                 (N_BINS, phi, -1.0, 1.0),
                                 (2 * N_BINS, theta, -np.pi, np.pi)):
        np.add.at(hist, (rows, offset + _bin(vals[valid], lo, hi)), 1.0)
    return _normalize_blocks(hist)


def compute_fpfh(cloud, normals, k: int = DEFAULT_FPFH_K,
                 index: SpatialIndex | None = None) -> np.ndarray:
    """FPFH for every point, shape ``(N, 33)``.

    FPFH(p) = SPFH(p) + (1/k) * sum_i SPFH(p_i) / |p - p_i| over the k nearest
    neighbors, then each 11-bin block is rescaled to sum to 100.
    """
    pts = as_cloud(cloud)
    nrm = _as_normals(normals)
    dist, nbr = _index(pts, index).knn_all(k)
    spfh = _spfh_rows(pts, nrm, np.arange(pts.shape[0]), nbr)
    valid = dist > 1e-12
    weight = np.where(valid, 1.0 / np.where(valid, dist, 1.0), 0.0) / nbr.shape[1]
    fpfh = spfh + np.einsum("nk,nkb->nb", weight, spfh[nbr])
    return _normalize_blocks(fpfh)
