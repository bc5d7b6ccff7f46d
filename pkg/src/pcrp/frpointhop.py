"""Two-hop unsupervised point features.

Hop 1 describes each point by its FPFH histogram and compresses it with a
Saab kernel. The cloud is then halved by farthest point sampling; hop 2
pools the hop-1 responses of each retained point's neighbors by octant of
its local reference frame and compresses the pooled vector with a second
Saab kernel. The per-point feature is the hop-1 response concatenated with
the hop-2 response.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .descriptors import compute_fpfh, compute_lrfs, estimate_normals
from .geometry import SpatialIndex, as_cloud, farthest_point_sample
from .saab import SaabKernel, apply_saab, fit_saab
from .serialization import Reader, Writer, read_header, write_header

log = logging.getLogger(__name__)

MODEL_MAGIC = b"PCRP"
MODEL_VERSION = 1
N_OCTANTS = 8

_OCTANT_EPS = 1e-12


@dataclass(frozen=True)
class HopConfig:
    k1: int = 64
    k2: int = 32
    normal_k: int = 16
    fps_ratio: float = 0.5
    energy_threshold: float = 0.95
    target_dim: int = 200
    max_train_points: int = 2000

    def __post_init__(self):
        if self.k1 < 8 or self.k2 < 8:
            raise ValueError("k1 and k2 must be at least 8")
        if self.normal_k < 3:
            raise ValueError("normal_k must be at least 3")
        if self.target_dim < 2:
            raise ValueError("target_dim must be at least 2")
        if not 0.0 < self.fps_ratio <= 1.0:
            raise ValueError("fps_ratio must lie in (0, 1]")
        if not 0.0 < self.energy_threshold <= 1.0:
            raise ValueError("energy_threshold must lie in (0, 1]")
        if self.max_train_points < 1:
            raise ValueError("max_train_points must be positive")


@dataclass(frozen=True)
class FrPointHopModel:
    config: HopConfig
    hop1: SaabKernel
    hop2: SaabKernel
    version: int = MODEL_VERSION

    @property
    def hop1_dim(self) -> int:
        return self.hop1.n_out

    @property
    def feature_dim(self) -> int:
        return self.hop1.n_out + self.hop2.n_out


@dataclass
class PointFeatureSet:
    features: np.ndarray  # (M, feature_dim)
    indices: np.ndarray  # (M,) indices into the input cloud of the retained points
    points: np.ndarray  # (M, 3) coordinates of the retained points
    ambiguous: np.ndarray = field(default=None)  # (M,) LRF ambiguity flags

    def __len__(self):
        return self.features.shape[0]

    @property
    def ambiguous_fraction(self) -> float:
        return float(np.mean(self.ambiguous)) if self.ambiguous is not None else 0.0


def hop1_attributes(cloud, config: HopConfig = HopConfig(), index: SpatialIndex | None = None) -> np.ndarray:
    """33-D FPFH attributes with ``config.k1`` neighbors."""
    pts = as_cloud(cloud)
    index = index if index is not None else SpatialIndex(pts)
    normals = estimate_normals(pts, k=config.normal_k, index=index)
    return compute_fpfh(pts, normals, k=config.k1, index=index)


def _octant_ids(local: np.ndarray) -> np.ndarray:
    bits = (local >= -_OCTANT_EPS).astype(np.int64)
    return 4 * bits[..., 0] + 2 * bits[..., 1] + bits[..., 2]


def _octant_pool(points, frames, hop1, centers, nbr) -> np.ndarray:
    offsets = points[nbr] - points[centers][:, None, :]
    local = np.einsum("mkj,mij->mki", offsets, frames)
    onehot = np.eye(N_OCTANTS)[_octant_ids(local)]  # (M, k, 8)
    sums = np.einsum("mko,mkc->mco", onehot, hop1[nbr])
    counts = onehot.sum(axis=1)  # (M, 8)
    means = np.where(counts[:, None, :] > 0,
                     sums / np.where(counts > 0, counts, 1.0)[:, None, :], 0.0)
    # channel-major: [ch0 oct0..7, ch1 oct0..7, ...]
    return means.reshape(means.shape[0], -1)


def hop2_attributes(points, frames, hop1_features, point: int, k2: int,
                    index: SpatialIndex | None = None) -> np.ndarray:
    """Octant-pooled hop-1 responses around ``point`` as an ``8 * d1`` vector.

    ``points``, ``frames`` and ``hop1_features`` all index the same (retained)
    point set; ``frames[point]`` supplies the octant axes. Empty octants give 0.
    """
    pts = as_cloud(points)
    index = index if index is not None else SpatialIndex(pts)
    nset = index.neighbors(point, k2)
    return _octant_pool(pts, np.asarray(frames)[[point]], np.asarray(hop1_features, dtype=np.float64),
                        np.array([point]), nset.indices[None, :])[0]


def hop2_attribute_table(points, frames, hop1_features, k2: int,
                         index: SpatialIndex | None = None) -> np.ndarray:
    """``hop2_attributes`` for every point of the retained set at once."""
    pts = as_cloud(points)
    index = index if index is not None else SpatialIndex(pts)
    _, nbr = index.knn_all(k2)
    return _octant_pool(pts, np.asarray(frames), np.asarray(hop1_features, dtype=np.float64),
                        np.arange(pts.shape[0]), nbr)


def _retained_count(n: int, ratio: float) -> int:
    return max(1, math.ceil(n * ratio))


def _hop2_inputs(pts, hop1_resp, config: HopConfig, index: SpatialIndex):
    """Downsample, build LRFs at the retained points, and pool hop-1 responses."""
    keep = farthest_point_sample(pts, _retained_count(pts.shape[0], config.fps_ratio), seed_index=0)
    frames, _, ambiguous = compute_lrfs(pts, keep, k=config.k1, index=index)
    attrs = hop2_attribute_table(pts[keep], frames, hop1_resp[keep], config.k2)
    return keep, attrs, ambiguous


def _check_size(n: int, config: HopConfig) -> None:
    if n < 2 * config.k2 or _retained_count(n, config.fps_ratio) <= config.k2:
        raise ValueError(f"cloud of {n} points is too small for k2={config.k2}")
    if n <= config.k1:
        raise ValueError(f"cloud of {n} points is too small for k1={config.k1}")


def fit_model(training_clouds, config: HopConfig = HopConfig(), rng_seed=0) -> FrPointHopModel:
    """Fit both Saab kernels on pooled attributes of ``training_clouds``.

    Hop 1 keeps the fewest components reaching ``config.energy_threshold``
    (raised when hop 2 could not otherwise fill the budget); hop 2 keeps
    exactly ``target_dim - d1`` components.
    """
    clouds = [as_cloud(c) for c in training_clouds]
    if not clouds:
        raise ValueError("need at least one training cloud")
    for c in clouds:
        _check_size(c.shape[0], config)
    rng = np.random.default_rng(rng_seed)
    indexes = [SpatialIndex(c) for c in clouds]
    attrs1 = [hop1_attributes(c, config, idx) for c, idx in zip(clouds, indexes)]

    def pooled(tables):
        picks = []
        for t in tables:
            if t.shape[0] > config.max_train_points:
                sel = np.sort(rng.choice(t.shape[0], config.max_train_points, replace=False))
                t = t[sel]
            picks.append(t)
        return np.vstack(picks)

    hop1_full = fit_saab(pooled(attrs1))
    d1 = fit_saab_count(hop1_full, config.energy_threshold)
    # hop 2 yields at most 8*d1 components, so d1 must satisfy d1 + 8*d1 >= target
    d1 = max(d1, math.ceil(config.target_dim / (1 + N_OCTANTS)))
    d1 = min(d1, hop1_full.n_available, config.target_dim - 1)

    while True:
        hop1 = hop1_full.truncated(d1)
        tables = []
        for c, idx, a in zip(clouds, indexes, attrs1):
            _, attrs2, _ = _hop2_inputs(c, apply_saab(hop1, a), config, idx)
            tables.append(attrs2)
        samples2 = pooled(tables)
        if samples2.shape[0] < samples2.shape[1] + 1:
            raise ValueError(f"insufficient hop-2 samples: {samples2.shape[0]} for dimension {samples2.shape[1]}")
        hop2_full = fit_saab(samples2)
        need = config.target_dim - d1
        if hop2_full.n_available >= need or d1 >= min(hop1_full.n_available, config.target_dim - 1):
            break
        log.info("hop-2 rank %d below the %d needed; raising hop-1 dimension to %d",
                 hop2_full.n_available, need, d1 + 1)
        d1 += 1
    if hop2_full.n_available < config.target_dim - d1:
        log.warning("feature dimension limited to %d (target %d)",
                    d1 + hop2_full.n_available, config.target_dim)
    hop2 = hop2_full.truncated(min(config.target_dim - d1, hop2_full.n_available))
    return FrPointHopModel(config, hop1, hop2)


def fit_saab_count(kernel: SaabKernel, threshold: float) -> int:
    cum = np.cumsum(kernel.energies)
    return int(min(np.searchsorted(cum, threshold - 1e-12) + 1, kernel.n_available))


def extract_features(model: FrPointHopModel, cloud) -> PointFeatureSet:
    """Per-point features at the farthest-point-sampled half of ``cloud``."""
    pts = as_cloud(cloud)
    cfg = model.config
    _check_size(pts.shape[0], cfg)
    index = SpatialIndex(pts)
    h1 = apply_saab(model.hop1, hop1_attributes(pts, cfg, index))
    keep, attrs2, ambiguous = _hop2_inputs(pts, h1, cfg, index)
    h2 = apply_saab(model.hop2, attrs2)
    feats = np.hstack([h1[keep], h2])
    if not np.all(np.isfinite(feats)):
        raise FloatingPointError("non-finite point features")
    return PointFeatureSet(feats, keep, pts[keep], ambiguous)


# -- model bundle -------------------------------------------------------------

def _write_kernel(k: SaabKernel) -> bytes:
    w = Writer()
    w.u32(k.d_in)
    w.u32(k.n_out)
    w.array(k.mean)
    w.array(k.dc)
    w.array(k.ac.reshape(-1, k.d_in))
    w.array(k.energies)
    return w.getvalue()


def _read_kernel(r: Reader) -> SaabKernel:
    d_in = r.u32()
    n_out = r.u32()
    mean = r.array()
    dc = r.array()
    ac = r.array().reshape(-1, d_in)
    energies = r.array()
    return SaabKernel(mean, dc, ac, energies, n_out)


def model_to_bytes(model: FrPointHopModel) -> bytes:
    w = Writer()
    write_header(w, MODEL_MAGIC, model.version)
    w.section(json.dumps(asdict(model.config), sort_keys=True).encode("utf-8"))
    w.section(_write_kernel(model.hop1))
    w.section(_write_kernel(model.hop2))
    return w.getvalue()


def model_from_bytes(data: bytes) -> FrPointHopModel:
    r = Reader(data)
    version = read_header(r, MODEL_MAGIC, MODEL_VERSION)
    config = HopConfig(**json.loads(r.section().raw_all().decode("utf-8")))
    hop1 = _read_kernel(r.section())
    hop2 = _read_kernel(r.section())
    return FrPointHopModel(config, hop1, hop2, version)


def save_model(model: FrPointHopModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> FrPointHopModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
