"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a single ``PASS`` / ``FAIL`` / ``SKIP`` line. Criteria 10-12
need ModelNet40 meshes; point ``PCRP_MODELNET40`` at the dataset root
(``<category>/<train|test>/*.off``) to run them.
"""
import math
import os
from pathlib import Path

import numpy as np
import pytest

from pcrp.descriptors import compute_fpfh, estimate_normals
from pcrp.frpointhop import HopConfig, extract_features, fit_model, hop1_attributes
from pcrp.geometry import RigidTransform, axis_angle_matrix, random_rigid_transform
from pcrp.io import load_cloud
from pcrp.registration import (
    CorrespondenceSet,
    RegistrationConfig,
    estimate_pose,
    icp_baseline,
    procrustes,
    ransac_pose,
    register_clouds,
    rotation_error_deg,
    symmetry_partition,
)
from pcrp.retrieval import (
    build_gallery,
    compute_vlad,
    fit_codebook,
    ground_truth_ranking,
    precision_at_m,
    retrieve,
    vlad_residuals,
)
from pcrp.saab import apply_saab, fit_saab
from pcrp.synthetic import mirror_symmetric_cloud, shape_suite

N_SHAPES = 40
N_POINTS = 1024
MODELNET = os.environ.get("PCRP_MODELNET40")


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")
        assert ok, detail
    return emit


def skip_line(capsys, number, title):
    with capsys.disabled():
        print(f"\n[SKIP] criterion {number}: {title} (set PCRP_MODELNET40 to run)")
    pytest.skip("ModelNet40 not available")


# -- shared synthetic world -------------------------------------------------------------

@pytest.fixture(scope="module")
def world():
    suite = shape_suite(N_SHAPES, n=N_POINTS, seed=2024)
    clouds = {f"shape{i:02d}": c for i, (_, c) in enumerate(suite)}
    model = fit_model(list(clouds.values()), HopConfig(), rng_seed=0)
    feats = {k: extract_features(model, c) for k, c in clouds.items()}
    codebook = fit_codebook(np.vstack([f.features for f in feats.values()]), k=10, seed=0)
    index = build_gallery(model, codebook, [(k, "synthetic", c, k) for k, c in clouds.items()])
    return model, codebook, index, clouds


def posed_query(cloud, transform, seed):
    # rigidly moved copy with the point order shuffled
    return transform.apply(cloud)[np.random.default_rng(seed).permutation(cloud.shape[0])]


# -- desk scale -------------------------------------------------------------------------------

def test_criterion_01_procrustes_exactness(report):
    worst_r = worst_t = 0.0
    for i in range(100):
        rng = np.random.default_rng([1, i])
        src = rng.normal(size=(int(rng.integers(3, 200)), 3))
        t = random_rigid_transform(rng, 180.0, 1.0)
        est = procrustes(src, t.apply(src))
        worst_r = max(worst_r, rotation_error_deg(est, t))
        worst_t = max(worst_t, float(np.abs(est.translation - t.translation).max()))
    report(1, "Procrustes exactness", worst_r < 1e-6 and worst_t < 1e-9,
           f"max rotation error {worst_r:.2e} deg, max translation error {worst_t:.2e}")


def test_criterion_02_fpfh_rigid_invariance(report):
    clouds = [c for _, c in shape_suite(10, n=512, seed=7)]
    rng = np.random.default_rng(2)
    clouds += [rng.normal(size=(512, 3)) * rng.uniform(0.3, 1.0, 3) for _ in range(10)]
    worst = 0.0
    for ci, cloud in enumerate(clouds):
        base = compute_fpfh(cloud, estimate_normals(cloud))
        for j in range(5):
            moved = random_rigid_transform([2, ci, j], 180.0, 1.0).apply(cloud)
            worst = max(worst, float(np.abs(compute_fpfh(moved, estimate_normals(moved)) - base).max()))
    report(2, "FPFH rigid invariance", worst < 1e-6, f"max per-bin difference {worst:.2e} over 20x5")


def test_criterion_03_saab_correctness(report):
    rng = np.random.default_rng(3)
    clouds = [c for _, c in shape_suite(4, n=512, seed=3)]
    samples = [np.vstack([hop1_attributes(c) for c in clouds]),
               rng.normal(size=(2000, 24)) * np.linspace(4, 0.1, 24) @ np.linalg.qr(rng.normal(size=(24, 24)))[0]]
    worst_orth = worst_parseval = worst_match = 0.0
    ordered = True
    for x in samples:
        k = fit_saab(x)
        basis = np.vstack([k.dc, k.ac])
        worst_orth = max(worst_orth, float(np.abs(basis @ basis.T - np.eye(basis.shape[0])).max()))
        ordered &= bool(np.all(np.diff(k.energies[1:]) <= 0))
        y = apply_saab(k, x)
        xc = x - x.mean(axis=0)
        worst_parseval = max(worst_parseval, abs((y ** 2).sum() - (xc ** 2).sum()) / (xc ** 2).sum())
        # independent oracle: eigendecomposition of the explicitly projected covariance
        d = x.shape[1]
        proj = np.eye(d) - np.ones((d, d)) / d
        evals, evecs = np.linalg.eigh(proj @ np.cov(xc.T, bias=True) @ proj)
        evecs = evecs[:, ::-1][:, : k.ac.shape[0]].T
        for got, want in zip(k.ac, evecs):
            worst_match = max(worst_match, min(np.abs(got - want).max(), np.abs(got + want).max()))
    ok = worst_orth < 1e-6 and ordered and worst_parseval < 1e-6 and worst_match < 1e-6
    report(3, "Saab correctness", ok,
           f"orthonormality {worst_orth:.1e}, AC energies ordered {ordered}, "
           f"Parseval rel {worst_parseval:.1e}, eigvec match {worst_match:.1e}")


def test_criterion_04_vlad_oracle(report, world):
    model, codebook, _, clouds = world
    feats = extract_features(model, clouds["shape00"]).features
    one = fit_codebook(feats, k=1, seed=0)
    err1 = float(np.abs(vlad_residuals(one, feats)[0] - feats.shape[0] * (feats.mean(0) - one.centroids[0])).max())
    naive = np.zeros_like(codebook.centroids)
    for f in feats:
        j = int(np.argmin(((codebook.centroids - f) ** 2).sum(axis=1)))
        naive[j] += f - codebook.centroids[j]
    err10 = float(np.abs(vlad_residuals(codebook, feats) - naive).max())
    report(4, "VLAD oracle equivalence", err1 < 1e-9 and err10 < 1e-9,
           f"k=1 error {err1:.1e}, k=10 error {err10:.1e}")


def test_criterion_05_retrieval_pose_invariance(report, world):
    model, codebook, index, clouds = world
    hits = total = 0
    for i, (oid, cloud) in enumerate(sorted(clouds.items())):
        for j in range(5):
            t = random_rigid_transform([5, i, j], 180.0, 0.5)
            q = posed_query(cloud, t, [5, i, j])
            top, = retrieve(index, compute_vlad(codebook, extract_features(model, q)), 1)
            hits += top[0] == oid
            total += 1
    rate = hits / total
    report(5, "retrieval pose invariance", rate >= 0.95, f"top-1 self-retrieval {hits}/{total} = {rate:.1%}")


def test_criterion_06_end_to_end_pose(report, world):
    model, codebook, index, clouds = world
    ids = sorted(clouds)
    good = 0
    errors = []
    for trial in range(50):
        oid = ids[trial % len(ids)]
        t = random_rigid_transform([6, trial], 180.0, 0.5)
        est = estimate_pose(model, codebook, index, posed_query(clouds[oid], t, [6, trial]),
                            load_cloud=lambda rec: clouds[rec.object_id])
        err = rotation_error_deg(est.transform, t.inverse())
        errors.append(err)
        good += err < 5.0
    report(6, "end-to-end pose recovery", good / 50 >= 0.90,
           f"{good}/50 trials under 5 deg, median error {np.median(errors):.3f} deg")


def test_criterion_07_ransac_robustness(report):
    ok = 0
    for trial in range(100):
        rng = np.random.default_rng([7, trial])
        t = random_rigid_transform(rng, 180.0, 0.5)
        inl = rng.uniform(-1, 1, size=(50, 3))
        src = np.vstack([inl, rng.uniform(-1, 1, size=(50, 3))])
        dst = np.vstack([t.apply(inl), rng.uniform(-1, 1, size=(50, 3))])
        idx = np.arange(100)
        order = rng.permutation(100)
        corr = CorrespondenceSet(idx[order], idx[order], np.zeros(100), True)
        est = ransac_pose(corr, src, dst, RegistrationConfig(inlier_threshold=0.05, seed=trial))
        ok += rotation_error_deg(est.transform, t) < 0.5
    report(7, "RANSAC robustness", ok >= 95, f"{ok}/100 trials under 0.5 deg with 50% outliers")


def test_criterion_08_icp_contrast(report, world):
    model, codebook, index, clouds = world
    ids = sorted(clouds)
    icp_fail = pipe_fail = 0
    n_pairs = 50
    for p in range(n_pairs):
        oid = ids[p % len(ids)]
        axis = np.random.default_rng([8, p]).normal(size=3)
        t = RigidTransform(axis_angle_matrix(axis, math.radians(120.0)), np.zeros(3))
        q = posed_query(clouds[oid], t, [8, p])
        icp_fail += rotation_error_deg(icp_baseline(q, clouds[oid]), t.inverse()) > 10.0
        est = estimate_pose(model, codebook, index, q, load_cloud=lambda rec: clouds[rec.object_id])
        pipe_fail += rotation_error_deg(est.transform, t.inverse()) > 10.0
    ok = icp_fail / n_pairs >= 0.5 and pipe_fail / n_pairs < 0.05
    report(8, "ICP baseline contrast", ok,
           f"ICP failures {icp_fail}/{n_pairs}, pipeline failures {pipe_fail}/{n_pairs} at 120 deg")


def test_criterion_09_symmetry_partition(report):
    worst = 0.0
    chosen = True
    for seed in range(10):
        for axis in range(3):
            part = symmetry_partition(mirror_symmetric_cloud(600, seed=seed, axis=axis))
            mirror = int(np.argmax(np.abs(part.axes[:, axis])))
            worst = max(worst, float(part.scores[mirror]))
            chosen &= part.axis == mirror
    partition_ok = True
    inputs = [c for _, c in shape_suite(10, n=256, seed=9)]
    inputs += [np.random.default_rng([9, i]).normal(size=(100 + i, 3)) for i in range(10)]
    for c in inputs:
        c = c - c.mean(axis=0)
        part = symmetry_partition(c)
        sides = [set(np.flatnonzero(part.labels == s)) for s in (0, 1)]
        partition_ok &= not (sides[0] & sides[1]) and (sides[0] | sides[1]) == set(range(len(c)))
    report(9, "symmetry partition", worst < 1e-9 and partition_ok,
           f"max mirror-axis score {worst:.1e}, mirror axis chosen {chosen}, "
           f"disjoint+exhaustive on {len(inputs)} inputs {partition_ok}")


# -- full scale (ModelNet40) -------------------------------------------------------------------------

CATEGORIES = ("airplane", "chair", "sofa", "car")


def _modelnet_split(root, split):
    items = []
    for cat in CATEGORIES:
        for p in sorted((Path(root) / cat / split).glob("*.off")):
            items.append((f"{cat}/{p.stem}", cat, p))
    return items


@pytest.fixture(scope="module")
def modelnet():
    train = _modelnet_split(MODELNET, "train")
    test = _modelnet_split(MODELNET, "test")
    gallery = {oid: load_cloud(p, 2048) for oid, _, p in train}
    model = fit_model(list(gallery.values()), HopConfig(), rng_seed=0)
    feats = [extract_features(model, c).features for c in gallery.values()]
    rng = np.random.default_rng(0)
    per = max(1, 100000 // len(feats))
    pooled = np.vstack([f[np.sort(rng.choice(len(f), min(per, len(f)), replace=False))] for f in feats])
    codebook = fit_codebook(pooled, k=10, seed=0)
    index = build_gallery(model, codebook, [(oid, cat, gallery[oid], str(p)) for oid, cat, p in train])
    queries = [(oid, cat, load_cloud(p, 2048)) for oid, cat, p in test]
    return model, codebook, index, gallery, queries


def _partial(cloud, seed, keep=0.7):
    # keep the points nearest a random viewing direction
    d = np.random.default_rng(seed).normal(size=3)
    order = np.argsort(-(cloud @ (d / np.linalg.norm(d))))
    return cloud[np.sort(order[: int(keep * len(cloud))])]


@pytest.mark.fullscale
def test_criterion_10_partial_registration_accuracy(report, capsys, request):
    if not MODELNET:
        skip_line(capsys, 10, "ModelNet40 partial registration")
    model, _, _, _, queries = request.getfixturevalue("modelnet")
    errs = []
    for i, (_, _, cloud) in enumerate(queries):
        t = random_rigid_transform([10, i], 180.0, 0.5)
        est = register_clouds(model, t.apply(_partial(cloud, [10, i])), cloud)
        errs.append(rotation_error_deg(est.transform, t.inverse()))
    errs = np.asarray(errs)
    mae, rmse = float(np.mean(np.abs(errs))), float(np.sqrt(np.mean(errs ** 2)))
    report(10, "ModelNet40 partial registration", mae <= 3 * 0.33 and rmse <= 3 * 1.64,
           f"rotation MAE {mae:.3f} (limit {3 * 0.33:.2f}), RMSE {rmse:.3f} (limit {3 * 1.64:.2f})")


@pytest.mark.fullscale
def test_criterion_11_modelnet_retrieval_precision(report, capsys, request):
    if not MODELNET:
        skip_line(capsys, 11, "ModelNet40 retrieval")
    model, codebook, index, gallery, queries = request.getfixturevalue("modelnet")
    precisions = []
    for i, (_, _, cloud) in enumerate(queries):
        t = random_rigid_transform([11, i], 180.0, 0.5)
        ranked = retrieve(index, compute_vlad(codebook, extract_features(model, t.apply(cloud))), 10)
        precisions.append(precision_at_m([r[0] for r in ranked], ground_truth_ranking(cloud, gallery), 10))
    p10 = float(np.mean(precisions))
    report(11, "ModelNet40 retrieval", p10 >= 0.55, f"Precision@10 {p10:.2%} with arbitrary poses")


@pytest.mark.fullscale
def test_criterion_12_modelnet_pose_medians(report, capsys, request):
    if not MODELNET:
        skip_line(capsys, 12, "ModelNet40 pose")
    model, codebook, index, gallery, queries = request.getfixturevalue("modelnet")
    target_median = {"chair": 4.24, "airplane": 1.65, "car": 2.11, "sofa": 2.29}
    per_cat = {c: [] for c in target_median}
    for i, (_, cat, cloud) in enumerate(queries):
        t = random_rigid_transform([12, i], 180.0, 0.5)
        est = estimate_pose(model, codebook, index, t.apply(cloud), load_cloud=lambda rec: gallery[rec.object_id])
        per_cat[cat].append(rotation_error_deg(est.transform, t.inverse()))
    medians = {c: float(np.median(v)) for c, v in per_cat.items() if v}
    ok = len(medians) == 4 and all(medians[c] <= 2 * target_median[c] for c in target_median)
    report(12, "ModelNet40 pose", ok, ", ".join(f"{c} median {m:.2f} (limit {2 * target_median[c]:.2f})"
                                             for c, m in medians.items()))
