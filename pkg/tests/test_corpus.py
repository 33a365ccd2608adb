"""Corpus layer tests: boxes, regions, augmentation, normalizer, pair stream, disk I/O."""

import json

import numpy as np
import pytest

from quasiparse.corpus import (
    BoxNorm,
    CorpusEntry,
    Corpus,
    OutputNormalizer,
    augment_entry,
    compute_mean_image,
    displacement_target,
    fit_normalizer,
    gen_pairs,
    load_corpus,
    make_knn_region,
    save_corpus,
    targets_matrix,
    to_network_input,
)
from quasiparse.errors import ConfigurationError, CorpusError
from quasiparse.retrieval import DownsampleExtractor, build_index


def entry_with_rect(entry_id, hw, label, r1, r2, c1, c2, extra=None):
    """Entry whose label-l pixels fill rows [r1,r2) x cols [c1,c2)."""
    h, w = hw
    rng = np.random.default_rng(abs(hash(entry_id)) % 2**32)
    img = rng.integers(0, 255, size=(h, w, 3), dtype=np.uint8)
    lab = np.zeros((h, w), dtype=np.uint8)
    lab[r1:r2, c1:c2] = label
    if extra:
        for l2, (rr1, rr2, cc1, cc2) in extra.items():
            lab[rr1:rr2, cc1:cc2] = l2
    return CorpusEntry.from_rasters(entry_id, img, lab)


def toy_corpus(n_train=6, n_test=2, hw=(16, 16), labels=("part_a", "part_b")):
    entries = {}
    splits = {"train": [], "val": [], "test": []}
    rng = np.random.default_rng(99)
    idx = 0
    for split, count in (("train", n_train), ("test", n_test)):
        for _ in range(count):
            eid = f"{split}{idx:03d}"
            r = int(rng.integers(2, 8))
            c = int(rng.integers(2, 8))
            extra = {2: (r + 4, min(r + 7, hw[0]), c, c + 4)} if len(labels) > 1 and idx % 3 else None
            entries[eid] = entry_with_rect(eid, hw, 1, r, r + 4, c, c + 5, extra)
            splits[split].append(eid)
            idx += 1
    return Corpus(label_names=list(labels), image_hw=hw, entries=entries, splits=splits)


class TestBoxNorm:
    def test_from_mask_outer_edges(self):
        mask = np.zeros((10, 20), dtype=bool)
        mask[2:5, 4:9] = True
        box = BoxNorm.from_mask(mask)
        assert box == BoxNorm(4 / 20, 2 / 10, 9 / 20, 5 / 10)

    def test_single_pixel_box(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[3, 5] = True
        box = BoxNorm.from_mask(mask)
        assert box == BoxNorm(5 / 8, 3 / 8, 6 / 8, 4 / 8)
        assert not box.empty

    def test_empty_mask(self):
        box = BoxNorm.from_mask(np.zeros((4, 4), dtype=bool))
        assert box == BoxNorm(0.0, 0.0, 0.0, 0.0)
        assert box.empty

    def test_full_mask_is_unit_box(self):
        assert BoxNorm.from_mask(np.ones((6, 3), dtype=bool)) == BoxNorm(0, 0, 1, 1)

    def test_pixel_rect_roundtrip(self):
        # box built from a mask must rasterize back onto the same pixels
        rng = np.random.default_rng(31)
        for _ in range(50):
            h = int(rng.integers(3, 12))
            w = int(rng.integers(3, 12))
            mask = np.zeros((h, w), dtype=bool)
            r1 = int(rng.integers(0, h - 1))
            r2 = int(rng.integers(r1 + 1, h + 1))
            c1 = int(rng.integers(0, w - 1))
            c2 = int(rng.integers(c1 + 1, w + 1))
            mask[r1:r2, c1:c2] = True
            rect = BoxNorm.from_mask(mask).pixel_rect(h, w)
            assert rect == (r1, r2, c1, c2)

    def test_shift_clip(self):
        box = BoxNorm(0.5, 0.5, 0.9, 0.9)
        moved = box.shifted(np.array([0.3, -0.7, 0.3, -0.7])).clipped()
        np.testing.assert_allclose(moved.as_array(), [0.8, 0.0, 1.0, 0.2], atol=1e-12)

    def test_displacement_target_direction(self):
        # moving the region box by t lands exactly on the query box
        q = BoxNorm(0.2, 0.3, 0.6, 0.8)
        r = BoxNorm(0.1, 0.35, 0.55, 0.75)
        t = displacement_target(r, q)
        np.testing.assert_allclose(r.as_array() + t, q.as_array())
        assert np.abs(t).max() <= 1.0


class TestEntryValidation:
    def test_label_set_and_boxes_derived(self):
        e = entry_with_rect("x", (12, 12), 3, 2, 6, 1, 7)
        assert e.label_set == frozenset({3})
        assert e.boxes[3] == BoxNorm(1 / 12, 2 / 12, 7 / 12, 6 / 12)

    def test_wrong_dtype_rejected(self):
        img = np.zeros((4, 4, 3), dtype=np.float32)
        with pytest.raises(CorpusError, match="uint8"):
            CorpusEntry.from_rasters("bad", img, np.zeros((4, 4), dtype=np.uint8))

    def test_size_mismatch_rejected(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        with pytest.raises(CorpusError, match="size"):
            CorpusEntry.from_rasters("bad", img, np.zeros((4, 5), dtype=np.uint8))


class TestMeanAndRegions:
    def test_mean_image_value(self):
        a = entry_with_rect("a", (4, 4), 1, 0, 2, 0, 2)
        b = entry_with_rect("b", (4, 4), 1, 1, 3, 1, 3)
        mean = compute_mean_image([a, b])
        want = (a.image.astype(np.float64) + b.image) / 2
        np.testing.assert_allclose(mean, want.astype(np.float32))

    def test_region_keeps_label_pixels_only(self):
        e = entry_with_rect("e", (8, 8), 2, 2, 5, 3, 6)
        mean = np.full((8, 8, 3), 100.0, dtype=np.float32)
        region = make_knn_region(e, 2, mean)
        assert region.present
        np.testing.assert_allclose(region.image[2:5, 3:6], e.image[2:5, 3:6])
        outside = ~region.mask
        assert np.all(region.image[outside] == 100.0)
        assert region.box == e.boxes[2]

    def test_absent_label_region_is_mean(self):
        e = entry_with_rect("e", (8, 8), 2, 2, 5, 3, 6)
        mean = np.full((8, 8, 3), 77.0, dtype=np.float32)
        region = make_knn_region(e, 5, mean)
        assert not region.present
        assert not region.mask.any()
        assert region.box == BoxNorm(0, 0, 0, 0)
        np.testing.assert_array_equal(region.image, mean)

    def test_network_input_layout(self):
        img = np.zeros((4, 6, 3), dtype=np.uint8)
        img[:, :, 0] = 255
        x = to_network_input(img)
        assert x.shape == (3, 4, 6)
        assert np.all(x[0] == 0.5) and np.all(x[1] == -0.5)


class TestAugment:
    def test_four_variants_with_stable_ids(self):
        e = entry_with_rect("q7", (16, 16), 1, 4, 9, 5, 11)
        variants = augment_entry(e)
        assert [v.id for v in variants] == [
            "q7#orig",
            "q7#orig-mirror",
            "q7#scale",
            "q7#scale-mirror",
        ]
        for v in variants:
            assert v.image.shape == e.image.shape

    def test_original_variant_untouched(self):
        e = entry_with_rect("q", (16, 16), 1, 4, 9, 5, 11)
        v = augment_entry(e)[0]
        np.testing.assert_array_equal(v.image, e.image)
        np.testing.assert_array_equal(v.label_map, e.label_map)

    def test_mirror_flips_boxes(self):
        e = entry_with_rect("q", (16, 16), 1, 4, 9, 5, 11)
        m = augment_entry(e)[1]
        np.testing.assert_array_equal(m.label_map, e.label_map[:, ::-1])
        ob = e.boxes[1]
        mb = m.boxes[1]
        assert mb == BoxNorm(1 - ob.x2, ob.y1, 1 - ob.x1, ob.y2)

    def test_mirror_preserves_pixel_counts(self):
        e = entry_with_rect("q", (16, 16), 1, 4, 9, 5, 11)
        for v in augment_entry(e):
            if v.id.endswith("mirror") and "scale" not in v.id:
                assert (v.label_map == 1).sum() == (e.label_map == 1).sum()

    def test_scale_zooms_center(self):
        # a centered square grows under the 1.2x center-crop zoom
        e = entry_with_rect("q", (24, 24), 1, 9, 15, 9, 15)
        v = augment_entry(e)[2]
        assert (v.label_map == 1).sum() > (e.label_map == 1).sum()
        assert 1 in v.label_set


class TestNormalizer:
    def test_identity_roundtrip(self):
        rng = np.random.default_rng(42)
        targets = rng.uniform(-1, 1, size=(300, 5))
        valid = rng.uniform(size=300) < 0.6
        norm = fit_normalizer(targets, valid)
        vecs = rng.uniform(-2, 2, size=(50, 5))
        back = norm.denormalize(norm.normalize(vecs))
        assert np.max(np.abs(back - vecs)) < 1e-12

    def test_normalized_stream_is_standardized(self):
        rng = np.random.default_rng(43)
        targets = rng.normal(3.0, 2.0, size=(500, 5))
        valid = np.ones(500, dtype=bool)
        norm = fit_normalizer(targets, valid)
        z = norm.normalize(targets)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(z.var(axis=0), 1.0, atol=1e-9)

    def test_displacement_stats_ignore_masked_rows(self):
        targets = np.zeros((4, 5))
        targets[:, 0] = [1, 0, 1, 0]
        targets[0, 1:] = [0.2, 0.2, 0.2, 0.2]
        targets[2, 1:] = [0.4, 0.4, 0.4, 0.4]
        # masked rows carry garbage that must not leak into the statistics
        targets[1, 1:] = [9, 9, 9, 9]
        valid = np.array([True, False, True, False])
        norm = fit_normalizer(targets, valid)
        np.testing.assert_allclose(norm.mean[1:], 0.3)

    def test_constant_component_maps_to_zero(self):
        targets = np.ones((10, 5)) * 0.5
        norm = fit_normalizer(targets, np.ones(10, dtype=bool))
        z = norm.normalize(targets[0])
        np.testing.assert_array_equal(z, np.zeros(5))

    def test_variance_floor(self):
        targets = np.ones((10, 5))
        norm = fit_normalizer(targets, np.ones(10, dtype=bool))
        assert np.all(norm.variance >= OutputNormalizer.VAR_FLOOR)

    def test_empty_stream_rejected(self):
        with pytest.raises(ConfigurationError):
            fit_normalizer(np.zeros((0, 5)), np.zeros(0, dtype=bool))


class TestGenPairs:
    def setup_method(self):
        self.corpus = toy_corpus()
        self.index = build_index(self.corpus, "train", DownsampleExtractor(8))

    def test_pair_targets_consistent(self):
        pairs = gen_pairs(self.corpus, self.index, k_neighbors=2, augment=False,
                          balance_ratio=None)
        assert pairs
        for p in pairs:
            query_entry = self.corpus.entries[p.query_id]
            in_query = p.region.label in query_entry.label_set
            assert p.target.confidence == (1.0 if in_query else 0.0)
            assert p.displacement_valid == (in_query and p.region.present)
            if p.displacement_valid:
                # shifting the region box by the target lands on the query's
                # tight box for that label
                landed = p.region.box.shifted(p.target.displacements)
                want = query_entry.boxes[p.region.label]
                np.testing.assert_allclose(landed.as_array(), want.as_array(), atol=1e-12)
            else:
                assert not p.target.displacements.any()

    def test_query_never_its_own_neighbor(self):
        pairs = gen_pairs(self.corpus, self.index, k_neighbors=3, augment=False,
                          balance_ratio=None)
        for p in pairs:
            assert p.region.source_id != p.query_id.split("#")[0]

    def test_unbalanced_count(self):
        # every (query, neighbor, label) combination appears exactly once
        pairs = gen_pairs(self.corpus, self.index, k_neighbors=2, augment=False,
                          balance_ratio=None)
        assert len(pairs) == 6 * 2 * self.corpus.num_labels

    def test_augmented_count(self):
        pairs = gen_pairs(self.corpus, self.index, k_neighbors=2, augment=True,
                          balance_ratio=None)
        assert len(pairs) == 6 * 4 * 2 * self.corpus.num_labels

    def test_seed_determinism(self):
        a = gen_pairs(self.corpus, self.index, k_neighbors=2, seed=5, augment=False)
        b = gen_pairs(self.corpus, self.index, k_neighbors=2, seed=5, augment=False)
        assert [(p.query_id, p.region.source_id, p.region.label) for p in a] == [
            (p.query_id, p.region.source_id, p.region.label) for p in b
        ]

    def test_balance_caps_positives(self):
        loose = gen_pairs(self.corpus, self.index, k_neighbors=2, augment=False,
                          balance_ratio=None)
        tight = gen_pairs(self.corpus, self.index, k_neighbors=2, augment=False,
                          balance_ratio=1.0)
        def pos_counts(pairs):
            counts = {}
            for p in pairs:
                if p.target.confidence == 1.0:
                    counts[p.region.label] = counts.get(p.region.label, 0) + 1
            return counts
        lc = pos_counts(loose)
        tc = pos_counts(tight)
        cap = min(lc.values())
        assert all(v <= cap for v in tc.values())
        # negatives are never dropped
        assert sum(1 for p in tight if p.target.confidence == 0.0) == sum(
            1 for p in loose if p.target.confidence == 0.0
        )

    def test_targets_matrix_layout(self):
        pairs = gen_pairs(self.corpus, self.index, k_neighbors=1, augment=False)
        t, valid = targets_matrix(pairs)
        assert t.shape == (len(pairs), 5)
        assert valid.dtype == bool
        assert set(np.unique(t[:, 0])) <= {0.0, 1.0}


class TestCorpusIO:
    def test_roundtrip(self, tmp_path):
        corpus = toy_corpus()
        save_corpus(corpus, tmp_path / "c")
        loaded = load_corpus(tmp_path / "c")
        assert loaded.label_names == corpus.label_names
        assert loaded.image_hw == corpus.image_hw
        assert loaded.splits == corpus.splits
        for eid, e in corpus.entries.items():
            le = loaded.entries[eid]
            np.testing.assert_array_equal(le.image, e.image)
            np.testing.assert_array_equal(le.label_map, e.label_map)
            assert le.label_set == e.label_set
            assert le.boxes == e.boxes

    def test_manifest_structure(self, tmp_path):
        corpus = toy_corpus(n_train=2, n_test=1)
        save_corpus(corpus, tmp_path / "c")
        manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
        assert manifest["format_version"] == 1
        assert manifest["label_names"] == corpus.label_names
        assert len(manifest["entries"]) == 3

    def test_box_tamper_detected(self, tmp_path):
        corpus = toy_corpus(n_train=2, n_test=1)
        save_corpus(corpus, tmp_path / "c")
        path = tmp_path / "c" / "manifest.json"
        manifest = json.loads(path.read_text())
        for entry in manifest["entries"]:
            for box in entry["boxes"].values():
                box[0] += 0.25
            break
        path.write_text(json.dumps(manifest))
        with pytest.raises(CorpusError, match="box"):
            load_corpus(tmp_path / "c")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CorpusError):
            load_corpus(tmp_path / "nope")

    def test_duplicate_id_rejected(self, tmp_path):
        corpus = toy_corpus(n_train=2, n_test=1)
        save_corpus(corpus, tmp_path / "c")
        path = tmp_path / "c" / "manifest.json"
        manifest = json.loads(path.read_text())
        manifest["entries"].append(dict(manifest["entries"][0]))
        path.write_text(json.dumps(manifest))
        with pytest.raises(CorpusError, match="duplicate"):
            load_corpus(tmp_path / "c")
