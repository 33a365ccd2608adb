"""Retrieval tests: embedding invariants, KNN ordering, cache format."""

import numpy as np
import pytest

from quasiparse.errors import ConfigurationError, IndexFormatError
from quasiparse.retrieval import (
    ConvPathExtractor,
    DownsampleExtractor,
    KnnIndex,
    build_index,
    embed_image,
    load_index,
    retrieve_knn,
    save_index,
)

from test_corpus import toy_corpus


class TestEmbedding:
    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 255, size=(20, 20, 3), dtype=np.uint8)
        v = embed_image(img, DownsampleExtractor(16))
        assert v.shape == (16 * 16 * 3,)
        assert v.dtype == np.float32
        assert abs(np.linalg.norm(v) - 1.0) < 1e-6
        assert abs(v.mean()) < 1e-6

    def test_constant_image_embeds_to_zero(self):
        img = np.full((12, 12, 3), 63, dtype=np.uint8)
        v = embed_image(img, DownsampleExtractor(8))
        assert not v.any()

    def test_brightness_invariance(self):
        # mean subtraction removes uniform brightness shifts
        rng = np.random.default_rng(1)
        img = rng.integers(30, 200, size=(16, 16, 3), dtype=np.uint8)
        a = embed_image(img, DownsampleExtractor(8))
        b = embed_image(np.clip(img.astype(int) + 20, 0, 255).astype(np.uint8),
                        DownsampleExtractor(8))
        assert np.max(np.abs(a - b)) < 0.02

    def test_identity_size_resample(self):
        # downsample to the native size keeps pixel values exactly
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 255, size=(8, 8, 3))
        v = embed_image(img, DownsampleExtractor(8))
        raw = (img / 255.0).reshape(-1)
        centered = raw - raw.mean()
        want = centered / np.linalg.norm(centered)
        np.testing.assert_allclose(v, want.astype(np.float32), atol=1e-6)

    def test_conv_path_extractor_runs(self):
        from quasiparse.model import ConvSpec, McnnConfig, init_params

        cfg = McnnConfig(
            input_hw=(16, 16),
            conv_layers=(ConvSpec(4, 0, 3, 2, 1),),
            cross_enabled=frozenset(),
            fc_dims=(8,),
        )
        params = init_params(cfg, seed=0)
        img = np.random.default_rng(3).integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
        v = embed_image(img, ConvPathExtractor(params))
        assert v.ndim == 1 and np.isfinite(v).all()


class TestRetrieve:
    def test_hand_distances(self):
        vecs = np.array(
            [
                [1.0, 0.0],
                [0.0, 1.0],
                [0.6, 0.8],
                [-1.0, 0.0],
            ],
            dtype=np.float32,
        )
        index = KnnIndex(ids=["a", "b", "c", "d"], vectors=vecs)
        got = retrieve_knn(index, np.array([0.9, 0.1]), 3)
        assert got == ["a", "c", "b"]

    def test_tie_broken_by_id(self):
        vecs = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
        index = KnnIndex(ids=["zeta", "mid", "alpha"], vectors=vecs)
        got = retrieve_knn(index, np.array([1.0, 0.0]), 2)
        assert got == ["alpha", "zeta"]

    def test_exclude_self(self):
        vecs = np.eye(3, dtype=np.float32)
        index = KnnIndex(ids=["a", "b", "c"], vectors=vecs)
        got = retrieve_knn(index, vecs[0], 2, exclude="a")
        assert "a" not in got and len(got) == 2

    def test_k_range_validated(self):
        index = KnnIndex(ids=["a", "b"], vectors=np.eye(2, dtype=np.float32))
        with pytest.raises(ConfigurationError):
            retrieve_knn(index, np.zeros(2), 0)
        with pytest.raises(ConfigurationError):
            retrieve_knn(index, np.zeros(2), 2, exclude="a")

    def test_dim_mismatch(self):
        index = KnnIndex(ids=["a"], vectors=np.zeros((1, 4), dtype=np.float32))
        with pytest.raises(ConfigurationError, match="dim"):
            retrieve_knn(index, np.zeros(3), 1)

    def test_matches_full_sort_bruteforce(self):
        rng = np.random.default_rng(17)
        for trial in range(100):
            n = int(rng.integers(3, 30))
            d = int(rng.integers(2, 6))
            vecs = rng.standard_normal((n, d)).astype(np.float32)
            # duplicated rows force tie-break coverage
            if n > 4:
                vecs[1] = vecs[0]
            ids = [f"e{i:03d}" for i in range(n)]
            index = KnnIndex(ids=ids, vectors=vecs)
            q = rng.standard_normal(d)
            k = int(rng.integers(1, n + 1))
            got = retrieve_knn(index, q, k)
            d2 = ((vecs.astype(np.float64) - q) ** 2).sum(axis=1)
            want = [ids[i] for i in sorted(range(n), key=lambda i: (d2[i], ids[i]))][:k]
            assert got == want, f"trial {trial}"

    def test_unique_ids_enforced(self):
        with pytest.raises(ConfigurationError):
            KnnIndex(ids=["a", "a"], vectors=np.zeros((2, 2), dtype=np.float32))


class TestIndexCache:
    def test_roundtrip(self, tmp_path):
        corpus = toy_corpus()
        index = build_index(corpus, "train", DownsampleExtractor(8))
        path = tmp_path / "train.knnx"
        save_index(index, path)
        loaded = load_index(path, extractor=DownsampleExtractor(8))
        assert loaded.ids == index.ids
        np.testing.assert_array_equal(loaded.vectors, index.vectors)

    def test_roundtrip_bytes_identical(self, tmp_path):
        corpus = toy_corpus()
        index = build_index(corpus, "train", DownsampleExtractor(8))
        p1 = tmp_path / "a.knnx"
        p2 = tmp_path / "b.knnx"
        save_index(index, p1)
        save_index(load_index(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.knnx"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(IndexFormatError):
            load_index(path)

    def test_truncation_detected(self, tmp_path):
        corpus = toy_corpus()
        index = build_index(corpus, "train", DownsampleExtractor(8))
        path = tmp_path / "t.knnx"
        save_index(index, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 7])
        with pytest.raises(IndexFormatError):
            load_index(path)

    def test_trailing_garbage_detected(self, tmp_path):
        corpus = toy_corpus()
        index = build_index(corpus, "train", DownsampleExtractor(8))
        path = tmp_path / "g.knnx"
        save_index(index, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(IndexFormatError):
            load_index(path)

    def test_retrieval_same_after_reload(self, tmp_path):
        corpus = toy_corpus()
        index = build_index(corpus, "train", DownsampleExtractor(8))
        path = tmp_path / "r.knnx"
        save_index(index, path)
        loaded = load_index(path, extractor=DownsampleExtractor(8))
        q = embed_image(corpus.entries["train000"].image, DownsampleExtractor(8))
        assert retrieve_knn(index, q, 3) == retrieve_knn(loaded, q, 3)
