import math

import numpy as np
import pytest

from pcrp.descriptors import compute_fpfh, compute_lrfs, estimate_normals
from pcrp.frpointhop import (
    HopConfig,
    extract_features,
    fit_model,
    hop1_attributes,
    hop2_attribute_table,
    hop2_attributes,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_model,
)
from pcrp.geometry import random_rigid_transform
from pcrp.serialization import FormatError
from pcrp.synthetic import sample_shape, random_shape_params


def octant_oracle(points, frame, feats, center, nbrs):
    # loop form: bucket each neighbor by the signs of its local coordinates
    d1 = feats.shape[1]
    sums = np.zeros((d1, 8))
    counts = np.zeros(8)
    for j in nbrs:
        loc = frame @ (points[j] - points[center])
        o = 4 * (loc[0] >= -1e-12) + 2 * (loc[1] >= -1e-12) + (loc[2] >= -1e-12)
        sums[:, o] += feats[j]
        counts[o] += 1
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return means.ravel()


class TestHopAttributes:
    def test_hop1_delegates_to_fpfh(self, small_suite):
        cloud = small_suite[0][1]
        cfg = HopConfig()
        np.testing.assert_array_equal(
            hop1_attributes(cloud, cfg), compute_fpfh(cloud, estimate_normals(cloud, k=cfg.normal_k), k=cfg.k1))

    def test_single_octant(self):
        pts = np.vstack([[0.0, 0, 0], np.random.default_rng(0).random((8, 3)) + 0.1])
        feats = np.tile([2.0, -3.0], (9, 1))
        out = hop2_attributes(pts, np.tile(np.eye(3), (9, 1, 1)), feats, 0, 8)
        expected = np.zeros((2, 8))
        expected[:, 7] = [2.0, -3.0]
        np.testing.assert_allclose(out, expected.ravel())

    def test_uniform_responses(self, rng):
        pts = rng.normal(size=(60, 3))
        frames, _, _ = compute_lrfs(pts, k=16)
        out = hop2_attributes(pts, frames, np.full((60, 3), 1.5), 5, 20).reshape(3, 8)
        nonempty = out[0] != 0
        assert nonempty.sum() >= 2
        np.testing.assert_allclose(out[:, nonempty], 1.5)

    def test_matches_loop_oracle(self, rng):
        pts = rng.normal(size=(80, 3))
        frames, _, _ = compute_lrfs(pts, k=16)
        feats = rng.normal(size=(80, 4))
        table = hop2_attribute_table(pts, frames, feats, 10)
        for c in (0, 33, 79):
            d = np.linalg.norm(pts - pts[c], axis=1)
            nbrs = [j for j in np.argsort(d, kind="stable") if j != c][:10]
            np.testing.assert_allclose(table[c], octant_oracle(pts, frames[c], feats, c, nbrs), atol=1e-12)
            np.testing.assert_allclose(hop2_attributes(pts, frames, feats, c, 10), table[c], atol=1e-12)

    def test_hop2_rotation_invariant(self, rng):
        pts = rng.normal(size=(300, 3)) * [1.0, 0.6, 0.3]
        feats = rng.normal(size=(300, 5))
        t = random_rigid_transform(2, 180, 0.5)
        fa, _, amb = compute_lrfs(pts, k=32)
        moved = t.apply(pts)
        fb, _, _ = compute_lrfs(moved, k=32)
        a = hop2_attribute_table(pts, fa, feats, 16)
        b = hop2_attribute_table(moved, fb, feats, 16)
        assert not amb.any()
        np.testing.assert_allclose(a, b, atol=1e-5)


class TestModel:
    def test_dimensions(self, small_model):
        assert small_model.feature_dim == 200
        assert small_model.hop1.d_in == 33
        assert small_model.hop2.d_in == 8 * small_model.hop1_dim

    def test_hop1_energy_reaches_threshold(self, small_model):
        assert small_model.hop1.retained_energy >= small_model.config.energy_threshold - 1e-12

    def test_kernels_orthonormal(self, small_model):
        for k in (small_model.hop1, small_model.hop2):
            basis = np.vstack([k.dc, k.ac])
            np.testing.assert_allclose(basis @ basis.T, np.eye(basis.shape[0]), atol=1e-6)
            assert np.all(np.diff(k.energies[1:]) <= 0)

    def test_fit_is_deterministic(self, small_suite, small_model):
        again = fit_model([c for _, c in small_suite], HopConfig(), rng_seed=0)
        assert model_to_bytes(again) == model_to_bytes(small_model)

    def test_bundle_roundtrip(self, small_model, tmp_path):
        blob = model_to_bytes(small_model)
        assert blob[:4] == b"PCRP"
        assert model_to_bytes(model_from_bytes(blob)) == blob
        path = tmp_path / "m.pcrp"
        save_model(small_model, path)
        assert path.read_bytes() == blob
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.hop2.ac, small_model.hop2.ac)
        assert loaded.config == small_model.config

    def test_bundle_rejects_bad_magic(self, small_model):
        blob = bytearray(model_to_bytes(small_model))
        blob[:4] = b"XXXX"
        with pytest.raises(FormatError):
            model_from_bytes(bytes(blob))
        with pytest.raises(FormatError):
            model_from_bytes(model_to_bytes(small_model)[:50])

    def test_no_clouds(self):
        with pytest.raises(ValueError):
            fit_model([])


class TestExtract:
    def test_shape_and_finiteness(self, small_features, small_suite):
        for pfs, (_, cloud) in zip(small_features, small_suite):
            assert pfs.features.shape == (math.ceil(len(cloud) / 2), 200)
            assert np.all(np.isfinite(pfs.features))
            np.testing.assert_array_equal(pfs.points, cloud[pfs.indices])

    @pytest.mark.parametrize("n", [301, 400])
    def test_half_retained(self, small_model, n):
        cloud = sample_shape(random_shape_params(5), n=n, seed=1)
        assert len(extract_features(small_model, cloud)) == math.ceil(n / 2)

    def test_rigid_transform_cosine(self, small_model, small_suite):
        for i, (_, cloud) in enumerate(small_suite[:4]):
            a = extract_features(small_model, cloud)
            moved = random_rigid_transform(100 + i, 180, 0.5).apply(cloud)
            b = extract_features(small_model, moved)
            np.testing.assert_array_equal(a.indices, b.indices)
            fa, fb = a.features, b.features
            cos = np.einsum("ij,ij->i", fa, fb) / (np.linalg.norm(fa, axis=1) * np.linalg.norm(fb, axis=1))
            assert a.ambiguous_fraction <= 0.05
            assert np.median(cos) > 0.99

    def test_deterministic(self, small_model, small_suite):
        cloud = small_suite[1][1]
        np.testing.assert_array_equal(extract_features(small_model, cloud).features,
                                      extract_features(small_model, cloud).features)

    def test_small_cloud_rejected(self, small_model):
        with pytest.raises(ValueError):
            extract_features(small_model, np.random.default_rng(0).normal(size=(40, 3)))
