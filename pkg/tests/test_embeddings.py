import numpy as np
import pytest
import torch

from eofusion.checkpoint import Checkpoint, STAGE_PRETRAIN_S2
from eofusion.autoencoder import ModalityAutoencoder
from eofusion.datacube import SynthSpec, generate_synthetic_scene
from eofusion.embeddings import (
    EmbeddingCube, embed_cube, fit_pca, load_embedding_cube, render_comparison,
    save_embedding_cube,
)

from conftest import tiny_config


@pytest.fixture(scope="module")
def small_scene():
    spec = SynthSpec(height=17, width=17, classes=2, s2_frames=13, s1_frames=26,
                     noise=0.0, cloud_fraction=0.0)
    return generate_synthetic_scene(spec, seed=5)


@pytest.fixture(scope="module")
def s2_checkpoint():
    torch.manual_seed(0)
    model = ModalityAutoencoder(tiny_config("S2"))
    cfg = {"modality": tiny_config("S2").to_dict()}
    return Checkpoint.from_model(model, STAGE_PRETRAIN_S2, cfg)


def synthetic_embedding(e_values, times=None, kind="fused"):
    e_values = np.asarray(e_values, dtype=np.float32)
    t = e_values.shape[0]
    if times is None:
        times = np.arange(t, dtype=np.float64)
    return EmbeddingCube(e=e_values, times=times, cube_id="emb0", kind=kind,
                         model_hash="t" * 64)


class TestEmbedCube:
    def test_shape_and_kind(self, small_scene, s2_checkpoint):
        emb = embed_cube(None, small_scene.s2, s2_checkpoint, frames=[6])
        assert emb.e.shape == (13, 17, 17, 9)
        assert emb.kind == "s2"
        assert np.isfinite(emb.e[6]).all()
        assert np.isnan(emb.e[0]).all()  # frame not requested stays missing

    def test_deterministic(self, small_scene, s2_checkpoint):
        a = embed_cube(None, small_scene.s2, s2_checkpoint, frames=[6])
        b = embed_cube(None, small_scene.s2, s2_checkpoint, frames=[6])
        assert np.array_equal(a.e, b.e, equal_nan=True)

    def test_invalid_pixel_has_missing_embedding(self, small_scene, s2_checkpoint):
        import dataclasses
        s2 = small_scene.s2
        mask = s2.mask.copy()
        mask[:, 3, 4] = False
        values = np.where(mask[..., None], s2.values, np.nan).astype(np.float32)
        masked = dataclasses.replace(s2, values=values, mask=mask)
        emb = embed_cube(None, masked, s2_checkpoint, frames=[6])
        assert np.isnan(emb.e[6, 3, 4]).all()
        assert np.isfinite(emb.e[6, 8, 8]).all()

    def test_locality_outside_context_window(self, small_scene, s2_checkpoint):
        import dataclasses
        s2 = small_scene.s2
        emb_ref = embed_cube(None, s2, s2_checkpoint, frames=[6])
        poked = s2.values.copy()
        poked[:, 0, 0, :] = 0.123  # farther than 8 pixels from (16, 16)
        emb_poked = embed_cube(None, dataclasses.replace(s2, values=poked),
                               s2_checkpoint, frames=[6])
        assert np.array_equal(emb_ref.e[6, 16, 16], emb_poked.e[6, 16, 16])
        assert not np.array_equal(emb_ref.e[6, 0, 0], emb_poked.e[6, 0, 0])

    def test_small_cube_rejected(self, s2_checkpoint):
        spec = SynthSpec(height=10, width=10, classes=2, s2_frames=13, s1_frames=26)
        scene = generate_synthetic_scene(spec, seed=1)
        with pytest.raises(ValueError):
            embed_cube(None, scene.s2, s2_checkpoint)

    def test_save_load_round_trip(self, tmp_path, small_scene, s2_checkpoint):
        emb = embed_cube(None, small_scene.s2, s2_checkpoint, frames=[6])
        save_embedding_cube(emb, tmp_path / "emb")
        save_embedding_cube(emb, tmp_path / "emb2")
        loaded = load_embedding_cube(tmp_path / "emb")
        assert np.array_equal(loaded.e, emb.e, equal_nan=True)
        assert loaded.kind == emb.kind and loaded.model_hash == emb.model_hash
        for name in ("manifest.json", "values.bin", "times.bin", "mask.bin"):
            assert (tmp_path / "emb" / name).read_bytes() == \
                   (tmp_path / "emb2" / name).read_bytes()


class TestPCA:
    def test_rank3_exact_recovery(self):
        rng = np.random.default_rng(0)
        basis = np.linalg.qr(rng.normal(size=(7, 3)))[0]
        coords = rng.normal(size=(1000, 3)) * np.array([3.0, 2.0, 1.0])
        vectors = coords @ basis.T + rng.normal(size=7)
        pca = fit_pca(synthetic_embedding(vectors.reshape(1, 40, 25, 7)))
        assert pca.explained_variance.sum() == pytest.approx(pca.total_variance, abs=1e-9)
        assert not pca.reduced_rank

    def test_orthonormal_components(self):
        rng = np.random.default_rng(1)
        vectors = rng.normal(size=(500, 7))
        pca = fit_pca(synthetic_embedding(vectors.reshape(1, 20, 25, 7)))
        gram = pca.components @ pca.components.T
        assert np.allclose(gram, np.eye(3), atol=1e-6)

    def test_isotropic_shares(self):
        rng = np.random.default_rng(2)
        vectors = rng.normal(size=(100_000, 7))
        pca = fit_pca(synthetic_embedding(vectors.reshape(1, 400, 250, 7)))
        shares = pca.explained_variance_ratio
        assert np.all(np.abs(shares - 1 / 7) <= 0.02)

    def test_reconstruction_bound(self):
        rng = np.random.default_rng(3)
        vectors = rng.normal(size=(2000, 7)) * np.arange(1, 8)
        emb = synthetic_embedding(vectors.reshape(1, 40, 50, 7))
        pca = fit_pca(emb)
        scores = pca.transform(vectors)
        recon = scores @ pca.components + pca.mean
        residual = vectors - recon
        n = vectors.shape[0]
        residual_var = (residual ** 2).sum() / (n - 1)
        expected = pca.total_variance - pca.explained_variance.sum()
        assert residual_var == pytest.approx(expected, abs=1e-6)

    def test_sign_convention(self):
        rng = np.random.default_rng(4)
        vectors = rng.normal(size=(500, 7)) * np.arange(1, 8)
        pca = fit_pca(synthetic_embedding(vectors.reshape(1, 20, 25, 7)))
        for row in pca.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_reduced_rank_flag(self):
        rng = np.random.default_rng(5)
        flat = np.outer(rng.normal(size=100), rng.normal(size=7))
        pca = fit_pca(synthetic_embedding(flat.reshape(1, 10, 10, 7)))
        assert pca.reduced_rank
        two_d = rng.normal(size=(100, 2))
        pca2 = fit_pca(synthetic_embedding(two_d.reshape(1, 10, 10, 2), kind="s1"))
        assert pca2.components.shape == (2, 2)
        assert pca2.reduced_rank

    def test_subsample_deterministic(self):
        rng = np.random.default_rng(6)
        vectors = rng.normal(size=(5000, 7))
        emb = synthetic_embedding(vectors.reshape(1, 100, 50, 7))
        a = fit_pca(emb, max_samples=1000, seed=3)
        b = fit_pca(emb, max_samples=1000, seed=3)
        assert np.array_equal(a.components, b.components)

    def test_too_few_vectors_rejected(self):
        emb = synthetic_embedding(np.zeros((1, 1, 2, 7)))
        emb.e[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            fit_pca(emb)


class TestRender:
    def test_dimensions_and_byte_stability(self, tmp_path, small_scene):
        rng = np.random.default_rng(7)
        t, h, w = 13, 17, 17
        e = rng.normal(size=(t, h, w, 7)).astype(np.float32)
        emb = synthetic_embedding(e, times=small_scene.s2.times)
        from PIL import Image
        p1 = render_comparison(emb, small_scene.s2, 6, tmp_path / "a")
        p2 = render_comparison(emb, small_scene.s2, 6, tmp_path / "b")
        for path in p1:
            img = Image.open(path)
            assert img.size == (w, h)
        assert p1[0].read_bytes() == p2[0].read_bytes()
        assert p1[1].read_bytes() == p2[1].read_bytes()

    def test_constant_embedding_gives_constant_color(self, tmp_path, small_scene):
        e = np.full((13, 17, 17, 7), 0.25, dtype=np.float32)
        emb = synthetic_embedding(e, times=small_scene.s2.times)
        _, pca_path = render_comparison(emb, small_scene.s2, 6, tmp_path)
        from PIL import Image
        arr = np.asarray(Image.open(pca_path))
        assert len(np.unique(arr.reshape(-1, 3), axis=0)) == 1

    def test_two_class_embedding_shows_two_colors(self, tmp_path, small_scene):
        # a converged encoder maps a noise-free 2-class scene onto two
        # embedding values, so the rendered PCA scores form two colors
        from PIL import Image
        from sklearn.cluster import KMeans
        rng = np.random.default_rng(8)
        cm = small_scene.class_map
        centers = rng.normal(size=(2, 7)) * 3
        e = centers[cm][None].repeat(13, axis=0)
        emb = synthetic_embedding(e.astype(np.float32), times=small_scene.s2.times)
        _, pca_path = render_comparison(emb, small_scene.s2, 6, tmp_path)
        pixels = np.asarray(Image.open(pca_path)).reshape(-1, 3).astype(float)
        assert len(np.unique(pixels, axis=0)) == 2
        km = KMeans(n_clusters=2, n_init=10, random_state=0).fit(pixels)
        within = km.inertia_
        total = ((pixels - pixels.mean(axis=0)) ** 2).sum()
        assert within < 0.05 * total

    def test_missing_frame_rejected(self, tmp_path, small_scene):
        e = np.full((13, 17, 17, 7), 0.5, dtype=np.float32)
        emb = synthetic_embedding(e, times=small_scene.s2.times)
        with pytest.raises(ValueError):
            render_comparison(emb, small_scene.s2, 99, tmp_path)
        e_nan = e.copy()
        e_nan[4] = np.nan
        with pytest.raises(ValueError):
            render_comparison(synthetic_embedding(e_nan, times=small_scene.s2.times),
                              small_scene.s2, 4, tmp_path)
