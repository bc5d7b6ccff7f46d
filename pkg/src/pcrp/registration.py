"""Feature-correspondence registration with symmetry-constrained matching,
Procrustes inside RANSAC, end-to-end pose estimation, and a point-to-point ICP
baseline."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from . import io as pcio
from .frpointhop import FrPointHopModel, PointFeatureSet, extract_features
from .geometry import RigidTransform, as_cloud, chamfer_distance, rotation_angle_deg
from .retrieval import GalleryIndex, VladCodebook, compute_vlad, retrieve

log = logging.getLogger(__name__)

_SIDE_EPS = 1e-12


@dataclass(frozen=True)
class RegistrationConfig:
    ransac_iterations: int = 2000
    inlier_threshold: float = 0.05
    seed: int = 0
    mutual: bool = True
    ratio: float | None = None
    use_symmetry: bool = True
    moment_order: int = 2
    chamfer_threshold: float = 0.2
    refine_rounds: int = 10


@dataclass(frozen=True)
class SymmetryPartition:
    axis: int  # chosen principal axis (0 = largest variance)
    labels: np.ndarray  # (N,) 0 = non-negative side, 1 = negative side
    scores: np.ndarray  # (3,) |moment+ - moment-| per axis; inf for unusable axes
    axes: np.ndarray  # (3, 3) principal directions as rows


@dataclass(frozen=True)
class CorrespondenceSet:
    query_idx: np.ndarray
    target_idx: np.ndarray
    distances: np.ndarray
    side_consistent: bool

    def __len__(self):
        return self.query_idx.shape[0]


@dataclass(frozen=True)
class PoseEstimate:
    transform: RigidTransform  # maps query coordinates onto the target/gallery frame
    inlier_count: int
    n_correspondences: int
    rms_residual: float
    chamfer: float = math.nan
    reliable: bool = True
    retrieved_id: str | None = None


# -- symmetry -----------------------------------------------------------------

def symmetry_partition(cloud, moment_order: int = 2) -> SymmetryPartition:
    """Split a centered cloud along its most symmetric principal axis.

    For every principal axis the points are projected, the ``moment_order``
    moment of |projection| is summed separately over the non-negative and the
    negative side, and the axis with the smallest absolute difference wins
    (lowest axis index on ties). With ``moment_order=1`` the score reduces to
    the plain sum of projections, which vanishes on any centered cloud.
    """
    pts = as_cloud(cloud)
    cov = pts.T @ pts / pts.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    evals, axes = evals[::-1], evecs[:, ::-1].T
    usable = evals > 1e-12 * max(float(evals[0]), 1e-300)
    if not usable.all():
        log.warning("degenerate principal axes; using %d of 3", int(usable.sum()))
    proj = pts @ axes.T
    pos = proj >= -_SIDE_EPS
    mag = np.abs(proj) ** moment_order
    scores = np.abs((mag * pos).sum(axis=0) - (mag * ~pos).sum(axis=0))
    scores = np.where(usable, scores, np.inf)
    axis = int(np.argmin(scores))
    labels = np.where(pos[:, axis], 0, 1).astype(np.int64)
    return SymmetryPartition(axis, labels, scores, axes)


# -- correspondences ------------------------------------------------------------

def _pairwise_sq(a, b):
    d2 = np.sum(a ** 2, axis=1)[:, None] - 2.0 * a @ b.T + np.sum(b ** 2, axis=1)[None, :]
    return np.maximum(d2, 0.0)


def _match_block(qf, tf, q_ids, t_ids, mutual, ratio):
    d2 = _pairwise_sq(qf[q_ids], tf[t_ids])
    nn = np.argmin(d2, axis=1)
    rows = np.arange(q_ids.size)
    keep = np.ones(q_ids.size, dtype=bool)
    if mutual:
        keep &= np.argmin(d2, axis=0)[nn] == rows
    if ratio is not None and t_ids.size > 1:
        part = np.partition(d2, 1, axis=1)
        keep &= np.sqrt(part[:, 0]) < ratio * np.sqrt(part[:, 1])
    return q_ids[rows], t_ids[nn], np.sqrt(d2[rows, nn]), keep


def match_correspondences(query_features, target_features, query_partition=None,
                          target_partition=None, mutual: bool = True,
                          ratio: float | None = None, swap_sides: bool = False) -> CorrespondenceSet:
    """Feature-space nearest neighbors from query to target, side by side.

    Query side s is matched against target side s (or 1 - s with
    ``swap_sides``) and the per-side lists are concatenated. Without
    partitions, or when a side is empty on either object, matching runs over
    all points and the result is flagged as not side-consistent. When the
    mutual/ratio filters would leave fewer than 3 pairs they are not applied.
    """
    qf = np.asarray(getattr(query_features, "features", query_features), dtype=np.float64)
    tf = np.asarray(getattr(target_features, "features", target_features), dtype=np.float64)
    if qf.shape[0] == 0 or tf.shape[0] == 0:
        raise ValueError("feature sets must be non-empty")
    if qf.shape[1] != tf.shape[1]:
        raise ValueError("feature dimensions differ")

    blocks = None
    if query_partition is not None and target_partition is not None:
        ql, tl = query_partition.labels, target_partition.labels
        pairs = [(0, 1), (1, 0)] if swap_sides else [(0, 0), (1, 1)]
        blocks = [(np.flatnonzero(ql == a), np.flatnonzero(tl == b)) for a, b in pairs]
        if any(q.size == 0 or t.size == 0 for q, t in blocks):
            log.info("empty partition side; falling back to unconstrained matching")
            blocks = None
    consistent = blocks is not None
    if blocks is None:
        blocks = [(np.arange(qf.shape[0]), np.arange(tf.shape[0]))]

    parts = [_match_block(qf, tf, q, t, mutual, ratio) for q, t in blocks]
    q_idx = np.concatenate([p[0] for p in parts])
    t_idx = np.concatenate([p[1] for p in parts])
    dist = np.concatenate([p[2] for p in parts])
    keep = np.concatenate([p[3] for p in parts])
    if keep.sum() >= 3:
        q_idx, t_idx, dist = q_idx[keep], t_idx[keep], dist[keep]
    return CorrespondenceSet(q_idx, t_idx, dist, consistent)


# -- Procrustes / RANSAC ----------------------------------------------------------

def _kabsch_batch(src, dst):
    """Least-squares rotations/translations for batches of paired points (B, n, 3)."""
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    h = np.einsum("bni,bnj->bij", src - cs, dst - cd)
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2)
    ut = np.swapaxes(u, 1, 2)
    d = np.sign(np.linalg.det(v @ ut))
    d[d == 0] = 1.0
    corr = np.ones((src.shape[0], 3))
    corr[:, 2] = d
    r = (v * corr[:, None, :]) @ ut
    t = cd[:, 0, :] - np.einsum("bij,bj->bi", r, cs[:, 0, :])
    return r, t


def procrustes(source, target) -> RigidTransform:
    """Rigid transform minimizing sum |R s_i + t - d_i|^2 (reflection-corrected SVD)."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("source and target must pair up")
    if src.shape[0] < 3:
        raise ValueError("Procrustes needs at least 3 pairs")
    sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise ValueError("collinear point configuration")
    r, t = _kabsch_batch(src[None], dst[None])
    return RigidTransform(r[0], t[0])


def _residuals(transform: RigidTransform, src, dst):
    return np.linalg.norm(transform.apply(src) - dst, axis=1)


def ransac_pose(correspondences: CorrespondenceSet, query_points, target_points,
                config: RegistrationConfig = RegistrationConfig()) -> PoseEstimate:
    """Robust pose from 3-point hypotheses; the best inlier set is refit with Procrustes.

    An inlier is a pair whose distance after the transform is below
    ``config.inlier_threshold``. Ties in inlier count go to the earlier hypothesis.
    """
    src = np.asarray(query_points, dtype=np.float64)[correspondences.query_idx]
    dst = np.asarray(target_points, dtype=np.float64)[correspondences.target_idx]
    n = src.shape[0]
    if n < 3:
        raise ValueError("RANSAC needs at least 3 correspondences")
    tau = config.inlier_threshold
    rng = np.random.default_rng(config.seed)

    samples = rng.integers(0, n, size=(config.ransac_iterations, 3))
    # redraw samples that repeat a correspondence
    for _ in range(100):
        dup = ((samples[:, 0] == samples[:, 1]) | (samples[:, 0] == samples[:, 2])
               | (samples[:, 1] == samples[:, 2]))
        if not dup.any():
            break
        samples[dup] = rng.integers(0, n, size=(int(dup.sum()), 3))

    best_count, best_iter, best_rt = -1, -1, None
    chunk = max(1, 2_000_000 // max(n, 1))
    for start in range(0, samples.shape[0], chunk):
        s = samples[start:start + chunk]
        r, t = _kabsch_batch(src[s], dst[s])
        diff = np.matmul(src[None], np.swapaxes(r, 1, 2)) + (t[:, None, :] - dst[None])
        counts = (np.einsum("bni,bni->bn", diff, diff) < tau * tau).sum(axis=1)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count, best_iter, best_rt = int(counts[j]), start + j, (r[j], t[j])

    if best_count < 3:
        try:
            fallback = procrustes(src, dst)
        except ValueError:
            fallback = RigidTransform.identity()
        res = _residuals(fallback, src, dst)
        return PoseEstimate(fallback, 0, n, float(np.sqrt(np.mean(res ** 2))), reliable=False)

    transform = RigidTransform(*best_rt)
    inliers = _residuals(transform, src, dst) < tau
    for _ in range(config.refine_rounds):
        try:
            refit = procrustes(src[inliers], dst[inliers])
        except ValueError:
            break
        new_inliers = _residuals(refit, src, dst) < tau
        if new_inliers.sum() < 3:
            break
        transform = refit
        if np.array_equal(new_inliers, inliers):
            break
        inliers = new_inliers
    res = _residuals(transform, src, dst)
    inliers = res < tau
    rms = float(np.sqrt(np.mean(res[inliers] ** 2))) if inliers.any() else math.inf
    return PoseEstimate(transform, int(inliers.sum()), n, rms, reliable=bool(inliers.sum() >= 3))


# -- pipelines -----------------------------------------------------------------------

def register_features(query: PointFeatureSet, target: PointFeatureSet,
                      config: RegistrationConfig = RegistrationConfig()) -> PoseEstimate:
    """Pose taking ``query.points`` onto ``target.points``.

    With symmetry enabled both side associations are tried and the one with
    more RANSAC inliers is kept (the direct association on ties).
    """
    qp, tp = query.points, target.points
    if not config.use_symmetry:
        corr = match_correspondences(query, target, mutual=config.mutual, ratio=config.ratio)
        return ransac_pose(corr, qp, tp, config)
    qpart = symmetry_partition(qp - qp.mean(axis=0), config.moment_order)
    tpart = symmetry_partition(tp - tp.mean(axis=0), config.moment_order)
    best = None
    for swap in (False, True):
        corr = match_correspondences(query, target, qpart, tpart, mutual=config.mutual,
                                     ratio=config.ratio, swap_sides=swap)
        est = ransac_pose(corr, qp, tp, config)
        if best is None or est.inlier_count > best.inlier_count:
            best = est
        if not corr.side_consistent:
            break
    return best


def attach_chamfer(est: PoseEstimate, query_cloud, target_cloud, config, **extra) -> PoseEstimate:
    """Record the chamfer distance of the aligned query and apply the reliability threshold."""
    cd = chamfer_distance(est.transform.apply(query_cloud), target_cloud)
    return replace(est, chamfer=cd, reliable=bool(est.reliable and cd <= config.chamfer_threshold), **extra)


def register_clouds(model: FrPointHopModel, source, target,
                    config: RegistrationConfig = RegistrationConfig()) -> PoseEstimate:
    """Direct pair registration of ``source`` onto ``target`` (no retrieval)."""
    src, dst = as_cloud(source), as_cloud(target)
    est = register_features(extract_features(model, src), extract_features(model, dst), config)
    return attach_chamfer(est, src, dst, config)


def estimate_pose(model: FrPointHopModel, codebook: VladCodebook | None, index: GalleryIndex,
                  query, config: RegistrationConfig = RegistrationConfig(),
                  load_cloud=None, query_features: PointFeatureSet | None = None) -> PoseEstimate:
    """Retrieve the closest gallery object and register the query onto it.

    ``load_cloud(record)`` returns the gallery cloud of a record; by default the
    record's ``cloud_path`` goes through ``io.load_cloud``. The estimate is flagged
    unreliable when the chamfer distance between the aligned query and the
    retrieved object exceeds ``config.chamfer_threshold``.
    """
    if len(index) == 0:
        raise ValueError("gallery is empty")
    codebook = codebook if codebook is not None else index.codebook
    q = as_cloud(query)
    qfeat = query_features if query_features is not None else extract_features(model, q)
    (best_id, _), = retrieve(index, compute_vlad(codebook, qfeat), 1)
    record = index.record(best_id)
    if load_cloud is None:
        target = pcio.load_cloud(record.cloud_path)
    else:
        target = as_cloud(load_cloud(record))
    est = register_features(qfeat, extract_features(model, target), config)
    return attach_chamfer(est, q, target, config, retrieved_id=best_id)


def icp_baseline(query, target, max_iters: int = 50, tol: float = 1e-7,
                 init: RigidTransform | None = None) -> RigidTransform:
    """Point-to-point ICP of ``query`` onto ``target``.

    Stops once the mean nearest-neighbor residual changes by less than ``tol``.
    """
    src, dst = as_cloud(query), as_cloud(target)
    tree = cKDTree(dst)
    transform = init if init is not None else RigidTransform.identity()
    prev = math.inf
    for _ in range(max_iters):
        dist, idx = tree.query(transform.apply(src), k=1)
        err = float(np.mean(dist))
        if abs(prev - err) < tol:
            break
        prev = err
        transform = procrustes(src, dst[idx])
    return transform


def rotation_error_deg(estimate, ground_truth) -> float:
    """Geodesic angle between two rotations (matrices or RigidTransforms), in degrees."""
    ra = getattr(estimate, "rotation", estimate)
    rb = getattr(ground_truth, "rotation", ground_truth)
    return rotation_angle_deg(np.asarray(ra) @ np.asarray(rb).T)


def translation_error(estimate: RigidTransform, ground_truth: RigidTransform) -> np.ndarray:
    return np.asarray(estimate.translation) - np.asarray(ground_truth.translation)


# -- pose record ------------------------------------------------------------------

POSE_FIELDS = (["query_id", "retrieved_id"] + [f"r{i}{j}" for i in range(3) for j in range(3)]
               + ["tx", "ty", "tz", "inliers", "rms", "chamfer", "reliable"])


def format_pose_record(query_id: str, est: PoseEstimate) -> str:
    """One whitespace-separated line in ``POSE_FIELDS`` order."""
    vals = [query_id, est.retrieved_id or "-"]
    vals += [repr(float(v)) for v in est.transform.rotation.ravel()]
    vals += [repr(float(v)) for v in est.transform.translation]
    vals += [str(est.inlier_count), repr(est.rms_residual), repr(est.chamfer), "1" if est.reliable else "0"]
    return " ".join(vals)


def parse_pose_record(line: str):
    """Inverse of ``format_pose_record``: ``(query_id, PoseEstimate)``."""
    f = line.split()
    if len(f) != len(POSE_FIELDS):
        raise ValueError(f"pose record needs {len(POSE_FIELDS)} fields, got {len(f)}")
    rot = np.array([float(v) for v in f[2:11]]).reshape(3, 3)
    trans = np.array([float(v) for v in f[11:14]])
    retrieved = None if f[1] == "-" else f[1]
    est = PoseEstimate(RigidTransform(rot, trans), int(f[14]), int(f[14]), float(f[15]),
                       float(f[16]), f[17] == "1", retrieved)
    return f[0], est
