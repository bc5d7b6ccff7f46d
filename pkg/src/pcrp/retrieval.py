"""VLAD aggregation of point features and nearest-neighbor gallery retrieval."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frpointhop import FrPointHopModel, PointFeatureSet, extract_features
from .geometry import as_cloud, chamfer_distance
from .serialization import Reader, Writer, read_header, write_header

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"PCRC"
GALLERY_MAGIC = b"PCRG"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class VladCodebook:
    centroids: np.ndarray  # (k, d)
    inertia: float
    n_iter: int
    seed: int
    inertia_history: tuple = ()

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def assign(self, features) -> np.ndarray:
        return _nearest(np.asarray(features, dtype=np.float64), self.centroids)[0]


@dataclass(frozen=True)
class VladVector:
    vector: np.ndarray  # (k * d,)
    is_zero: bool = False


def _nearest(x, centroids):
    # squared distances; argmin picks the lower centroid index on ties
    d2 = (np.sum(x ** 2, axis=1)[:, None] - 2.0 * x @ centroids.T
          + np.sum(centroids ** 2, axis=1)[None, :])
    np.maximum(d2, 0.0, out=d2)
    return np.argmin(d2, axis=1), d2


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError("fewer distinct samples than codewords")
        j = rng.choice(n, p=d2 / total)
        centers[i] = x[j]
        np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1), out=d2)
    return centers


def fit_codebook(features, k: int = 10, seed: int = 0, max_iter: int = 300,
                 tol: float = 1e-6) -> VladCodebook:
    """k-means++ seeded Lloyd iterations until centroids move less than ``tol``."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k:
        raise ValueError(f"need at least k={k} samples")
    if np.unique(x, axis=0).shape[0] < k:
        raise ValueError(f"fewer distinct samples than k={k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, d2 = _nearest(x, centers)
        history.append(float(d2[np.arange(x.shape[0]), labels].sum()))
        new = np.empty_like(centers)
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[labels == j].mean(axis=0)
            else:
                # reseed an empty cluster at the worst-served sample
                far = int(np.argmax(d2[np.arange(x.shape[0]), labels]))
                new[j] = x[far]
                labels[far] = j
        shift = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        if shift < tol:
            break
    labels, d2 = _nearest(x, centers)
    inertia = float(d2[np.arange(x.shape[0]), labels].sum())
    history.append(inertia)
    return VladCodebook(centers, inertia, n_iter, int(seed), tuple(history))


def _features_of(features) -> np.ndarray:
    f = features.features if isinstance(features, PointFeatureSet) else features
    return np.asarray(f, dtype=np.float64)


def vlad_residuals(codebook: VladCodebook, features) -> np.ndarray:
    """Unnormalized per-codeword residual sums, shape ``(k, d)``."""
    f = _features_of(features)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("empty feature set")
    if f.shape[1] != codebook.dim:
        raise ValueError(f"feature dimension {f.shape[1]} does not match codebook {codebook.dim}")
    labels = codebook.assign(f)
    resid = np.zeros_like(codebook.centroids)
    np.add.at(resid, labels, f - codebook.centroids[labels])
    return resid


def compute_vlad(codebook: VladCodebook, features) -> VladVector:
    """Hard-assignment VLAD with signed square root and global L2 normalization."""
    v = vlad_residuals(codebook, features).ravel()
    v = np.sign(v) * np.sqrt(np.abs(v))
    norm = np.linalg.norm(v)
    if norm == 0:
        return VladVector(v, is_zero=True)
    return VladVector(v / norm)


@dataclass(frozen=True)
class GalleryRecord:
    object_id: str
    category: str
    vlad: np.ndarray
    cloud_path: str


@dataclass
class GalleryIndex:
    codebook: VladCodebook
    records: list = field(default_factory=list)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        ids = [r.object_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate object ids in gallery")
        dims = {r.vlad.shape[0] for r in self.records}
        if len(dims) > 1:
            raise ValueError("gallery VLAD vectors differ in dimension")
        self._matrix = (np.vstack([r.vlad for r in self.records])
                        if self.records else np.zeros((0, self.codebook.k * self.codebook.dim)))

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> list:
        return [r.object_id for r in self.records]

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def record(self, object_id: str) -> GalleryRecord:
        for r in self.records:
            if r.object_id == object_id:
                return r
        raise KeyError(object_id)


def build_gallery(model: FrPointHopModel, codebook: VladCodebook, gallery, threads: int = 1) -> GalleryIndex:
    """One record per ``(object_id, category, cloud, cloud_path)`` entry of ``gallery``.

    Records are stored sorted by object id.
    """
    items = list(gallery)
    if not items:
        raise ValueError("gallery is empty")
    ids = [it[0] for it in items]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate object ids in gallery")
    items.sort(key=lambda it: it[0])

    def vlad_of(item):
        return compute_vlad(codebook, extract_features(model, as_cloud(item[2]))).vector

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            vlads = list(pool.map(vlad_of, items))
    else:
        vlads = [vlad_of(it) for it in items]
    records = [GalleryRecord(oid, cat, v, str(path))
               for (oid, cat, _, path), v in zip(items, vlads)]
    return GalleryIndex(codebook, records)


def retrieve(index: GalleryIndex, query_vlad, m: int = 1):
    """Top-``m`` gallery ids by Euclidean VLAD distance as ``[(id, distance), ...]``."""
    if len(index) == 0:
        raise ValueError("gallery is empty")
    if not 1 <= m <= len(index):
        raise ValueError(f"m must lie in [1, {len(index)}]")
    q = query_vlad.vector if isinstance(query_vlad, VladVector) else np.asarray(query_vlad)
    dist = np.linalg.norm(index.matrix - q[None, :], axis=1)
    ids = index.ids
    order = sorted(range(len(ids)), key=lambda i: (dist[i], ids[i]))[:m]
    return [(ids[i], float(dist[i])) for i in order]


def precision_at_m(retrieved, ground_truth, m: int) -> float:
    """|top-m retrieved ∩ top-m ground truth| / m."""
    if len(retrieved) < m or len(ground_truth) < m:
        raise ValueError("both lists need at least m entries")
    return len(set(list(retrieved)[:m]) & set(list(ground_truth)[:m])) / m


def ground_truth_ranking(query, gallery_clouds) -> list:
    """Gallery ids ordered by chamfer distance to the canonically posed ``query``.

    ``gallery_clouds`` maps id -> cloud (or is an iterable of pairs).
    """
    items = list(gallery_clouds.items()) if isinstance(gallery_clouds, dict) else list(gallery_clouds)
    if not items:
        raise ValueError("gallery is empty")
    scored = [(chamfer_distance(query, cloud), oid) for oid, cloud in items]
    scored.sort()
    return [oid for _, oid in scored]


# -- persistence ----------------------------------------------------------------

def _write_codebook(w: Writer, cb: VladCodebook) -> None:
    w.array(cb.centroids)
    w.f64(cb.inertia)
    w.u32(cb.n_iter)
    w.u32(cb.seed)
    w.array(np.asarray(cb.inertia_history, dtype=np.float64))


def _read_codebook(r: Reader) -> VladCodebook:
    centroids = r.array()
    inertia = r.f64()
    n_iter = r.u32()
    seed = r.u32()
    history = tuple(float(v) for v in r.array())
    return VladCodebook(centroids, inertia, n_iter, seed, history)


def codebook_to_bytes(cb: VladCodebook) -> bytes:
    w = Writer()
    write_header(w, CODEBOOK_MAGIC, FORMAT_VERSION)
    _write_codebook(w, cb)
    return w.getvalue()


def codebook_from_bytes(data: bytes) -> VladCodebook:
    r = Reader(data)
    read_header(r, CODEBOOK_MAGIC, FORMAT_VERSION)
    return _read_codebook(r)


def gallery_to_bytes(index: GalleryIndex) -> bytes:
    w = Writer()
    write_header(w, GALLERY_MAGIC, index.version)
    cb = Writer()
    _write_codebook(cb, index.codebook)
    w.section(cb.getvalue())
    w.u32(len(index.records))
    for rec in index.records:
        w.string(rec.object_id)
        w.string(rec.category)
        w.array(rec.vlad)
        w.string(rec.cloud_path)
    return w.getvalue()


def gallery_from_bytes(data: bytes) -> GalleryIndex:
    r = Reader(data)
    version = read_header(r, GALLERY_MAGIC, FORMAT_VERSION)
    codebook = _read_codebook(r.section())
    records = []
    for _ in range(r.u32()):
        oid = r.string()
        cat = r.string()
        vlad = r.array()
        path = r.string()
        records.append(GalleryRecord(oid, cat, vlad, path))
    return GalleryIndex(codebook, records, version)


def save_codebook(cb: VladCodebook, path) -> None:
    Path(path).write_bytes(codebook_to_bytes(cb))


def load_codebook(path) -> VladCodebook:
    return codebook_from_bytes(Path(path).read_bytes())


def save_gallery(index: GalleryIndex, path) -> None:
    Path(path).write_bytes(gallery_to_bytes(index))


def load_gallery(path) -> GalleryIndex:
    return gallery_from_bytes(Path(path).read_bytes())
