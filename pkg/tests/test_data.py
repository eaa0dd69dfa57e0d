import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from buildseg.data import (PATCH, AdapterConfig, ClassMapping, DataError, SampleRecord, fuse,
                           generate_synthetic, hash_split, ingest, load_patch, map_classes_binary,
                           rasterize_rect, read_manifest, reassemble_mask, synth_scene, tile_grid,
                           tile_to_patches, write_patch_store)

import oracles


def save_pair(root, stem, img, mask, images="images", masks="masks"):
    (root / images).mkdir(parents=True, exist_ok=True)
    (root / masks).mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(root / images / f"{stem}.png")
    Image.fromarray(mask).save(root / masks / f"{stem}.png")


def rand_pair(rng, h, w, labels=2):
    return (rng.integers(0, 256, (h, w, 3), dtype=np.uint8),
            rng.integers(0, labels, (h, w)).astype(np.uint8))


class TestAdapters:
    @pytest.mark.parametrize("tag", ["mapai", "inria", "whu", "floodnet", "synthetic"])
    def test_builtin_loads(self, tag):
        cfg = AdapterConfig.builtin(tag)
        assert cfg.tag == tag and 1 in cfg.classes.mapping.values()

    def test_unknown_tag(self):
        with pytest.raises(DataError):
            AdapterConfig.builtin("spacenet")

    def test_mapping_needs_building(self):
        with pytest.raises(DataError, match="building"):
            ClassMapping("x", {0: 0})


class TestClassMapping:
    def test_binary_identity(self):
        m = np.random.default_rng(0).integers(0, 2, (5, 5))
        out, n = map_classes_binary(m, AdapterConfig.builtin("mapai").classes)
        np.testing.assert_array_equal(out, m)
        assert n == 0

    def test_floodnet_buildings(self):
        cm = AdapterConfig.builtin("floodnet").classes
        grid = np.array([[cm.label_id("building-flooded"), cm.label_id("building-non-flooded")]] * 2)
        out, _ = map_classes_binary(grid, cm)
        np.testing.assert_array_equal(out, 1)

    def test_floodnet_other_classes(self):
        cm = AdapterConfig.builtin("floodnet").classes
        grid = np.array([[cm.label_id(n) for n in ("background", "water", "road-flooded", "tree")]])
        out, _ = map_classes_binary(grid, cm)
        np.testing.assert_array_equal(out, 0)

    def test_strict_rejects_unknown(self):
        with pytest.raises(DataError, match="unmapped"):
            map_classes_binary(np.array([[0, 7]]), AdapterConfig.builtin("mapai").classes)

    def test_lenient_counts_unknown(self):
        out, n = map_classes_binary(np.array([[1, 7, 7]]), AdapterConfig.builtin("mapai").classes, strict=False)
        np.testing.assert_array_equal(out, [[1, 0, 0]])
        assert n == 2

    def test_inria_255(self):
        out, _ = map_classes_binary(np.array([[0, 255]]), AdapterConfig.builtin("inria").classes)
        np.testing.assert_array_equal(out, [[0, 1]])


class TestTiling:
    def test_512_gives_four_full_patches(self):
        rng = np.random.default_rng(1)
        patches = tile_to_patches(*rand_pair(rng, 512, 512))
        assert len(patches) == 4
        assert all(p.valid == (0, 0, 256, 256) for p in patches)

    def test_256_identity(self):
        img, mask = rand_pair(np.random.default_rng(2), 256, 256)
        (p,) = tile_to_patches(img, mask)
        np.testing.assert_array_equal(p.image, img)
        np.testing.assert_array_equal(p.mask, mask)

    def test_300_padding(self):
        patches = tile_to_patches(*rand_pair(np.random.default_rng(3), 300, 300))
        assert len(patches) == 4
        by_pos = {(p.row, p.col): p for p in patches}
        assert by_pos[0, 0].valid == (0, 0, 256, 256)
        assert by_pos[1, 1].valid == (0, 0, 44, 44)
        assert by_pos[1, 1].mask[44:].sum() == 0

    @pytest.mark.parametrize("h,w", [(1, 1), (100, 700), (256, 257), (513, 255), (768, 1000)])
    def test_count_formula(self, h, w):
        patches = tile_to_patches(np.zeros((h, w, 3), np.uint8), np.zeros((h, w), np.uint8))
        assert len(patches) == oracles.patch_count(h, w)
        assert all(p.image.shape == (PATCH, PATCH, 3) and p.mask.shape == (PATCH, PATCH) for p in patches)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 600), st.integers(1, 600), st.integers(0, 2**32 - 1))
    def test_reassembly_lossless(self, h, w, seed):
        img, mask = rand_pair(np.random.default_rng(seed), h, w)
        np.testing.assert_array_equal(reassemble_mask(tile_to_patches(img, mask), h, w), mask)

    def test_overlapping_stride(self):
        img, mask = rand_pair(np.random.default_rng(4), 400, 300)
        patches = tile_to_patches(img, mask, stride=128)
        assert len(patches) == tile_grid(400, stride=128) * tile_grid(300, stride=128)
        np.testing.assert_array_equal(reassemble_mask(patches, 400, 300, stride=128), mask)

    def test_rescale_keeps_binary(self):
        img, mask = rand_pair(np.random.default_rng(5), 300, 300)
        patches = tile_to_patches(img, mask, rescale=0.5)
        assert len(patches) == 1 and patches[0].valid == (0, 0, 150, 150)
        assert set(np.unique(patches[0].mask)) <= {0, 1}

    def test_size_mismatch(self):
        with pytest.raises(DataError):
            tile_to_patches(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5), np.uint8))


class TestIngest:
    def test_orphan_warns(self, tmp_path):
        rng = np.random.default_rng(6)
        for i in range(3):
            save_pair(tmp_path, f"s{i}", *rand_pair(rng, 8, 8))
        Image.fromarray(rand_pair(rng, 8, 8)[0]).save(tmp_path / "images" / "lonely.png")
        records, warnings = ingest(tmp_path, "mapai")
        assert len(records) == 3 and len(warnings) == 1 and "lonely" in warnings[0]

    def test_deterministic(self, tmp_path):
        rng = np.random.default_rng(7)
        for i in range(5):
            save_pair(tmp_path, f"s{i}", *rand_pair(rng, 8, 8))
        assert ingest(tmp_path, "mapai", seed=2) == ingest(tmp_path, "mapai", seed=2)

    def test_split_dirs_honoured(self, tmp_path):
        rng = np.random.default_rng(8)
        save_pair(tmp_path / "train", "a", *rand_pair(rng, 8, 8))
        save_pair(tmp_path / "test", "b", *rand_pair(rng, 8, 8))
        records, _ = ingest(tmp_path, "mapai")
        assert {(r.id, r.split) for r in records} == {("a", "train"), ("b", "test")}

    def test_hash_split_proportions(self):
        splits = [hash_split(f"id{i}", seed=0) for i in range(4000)]
        assert abs(splits.count("train") / 4000 - 0.8) < 0.03
        assert abs(splits.count("test") / 4000 - 0.1) < 0.02

    def test_empty_root(self, tmp_path):
        with pytest.raises(DataError):
            ingest(tmp_path, "mapai")

    def test_missing_root(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            ingest(tmp_path / "nope", "mapai")


class TestPatchStore:
    def test_round_trip(self, corpus_a):
        again = read_manifest(corpus_a.root)
        assert again.entries == corpus_a.entries
        files = list((corpus_a.root / "patches").rglob("*.img"))
        assert len(files) == len(corpus_a.entries)
        for e in corpus_a.entries[:3]:
            p = load_patch(corpus_a.root, e)
            assert p.image.shape == (PATCH, PATCH, 3)
            assert set(np.unique(p.mask)) <= {0, 1}

    def test_store_bytes_match_source(self, tmp_path):
        rng = np.random.default_rng(9)
        img, mask = rand_pair(rng, 300, 260)
        rec = SampleRecord("r0", "mapai", "x.png", "y.png", 260, 300, "train")
        patches = tile_to_patches(img, mask, "r0")
        m = write_patch_store([(rec, patches)], tmp_path)
        for e, p in zip(m.entries, patches):
            q = load_patch(tmp_path, e)
            assert q.image.tobytes() == p.image.tobytes() and q.mask.tobytes() == p.mask.tobytes()

    def test_truncated_file_named(self, tmp_path, corpus_a):
        import shutil
        root = tmp_path / "copy"
        shutil.copytree(corpus_a.root, root)
        e = corpus_a.entries[0]
        path = root / e.mask_file
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(DataError, match=e.mask_file.split("/")[-1]):
            load_patch(root, e)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            read_manifest(tmp_path)

    def test_duplicate_ids(self, tmp_path):
        rec = SampleRecord("r0", "mapai", "x", "y", 256, 256, "train")
        with pytest.raises(DataError, match="duplicate"):
            write_patch_store([(rec, []), (rec, [])], tmp_path)

    def test_fuse_deterministic(self, tmp_path):
        raw = generate_synthetic(tmp_path / "raw", seed=1, n_scenes=3)
        fuse([(raw, "synthetic")], tmp_path / "s1", seed=1)
        fuse([(raw, "synthetic")], tmp_path / "s2", seed=1)
        for f in sorted((tmp_path / "s1").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "s2" / f.relative_to(tmp_path / "s1")).read_bytes()

    def test_stats(self, corpus_a):
        s = corpus_a.stats()
        assert s["patches"] == 24 and s["records"] == 6
        assert 0 < s["building_fraction"] < 0.6


class TestSynthetic:
    def test_same_seed_identical(self):
        for domain in "AB":
            a, b = synth_scene(4, 2, domain), synth_scene(4, 2, domain)
            np.testing.assert_array_equal(a[0], b[0])
            np.testing.assert_array_equal(a[1], b[1])

    def test_domains_differ(self):
        assert not np.array_equal(synth_scene(4, 0, "A")[0], synth_scene(4, 0, "B")[0])

    @pytest.mark.parametrize("index", range(8))
    @pytest.mark.parametrize("domain", ["A", "B"])
    def test_building_fraction(self, index, domain):
        frac = synth_scene(11, index, domain)[1].mean()
        assert 0 < frac < 0.6

    def test_rasterize_rect(self):
        m = rasterize_rect((10, 12), 2, 3, 4, 5)
        expect = np.zeros((10, 12), np.uint8)
        for i in range(2, 6):
            for j in range(3, 8):
                expect[i, j] = 1
        np.testing.assert_array_equal(m, expect)

    def test_generator_bytes_identical(self, tmp_path):
        generate_synthetic(tmp_path / "a", 7, 4)
        generate_synthetic(tmp_path / "b", 7, 4)
        for f in sorted((tmp_path / "a").rglob("*.png")):
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_ten_pairs_ingest(self, tmp_path):
        records, warnings = ingest(generate_synthetic(tmp_path, 2, 10), "synthetic")
        assert len(records) == 10 and not warnings
        assert {r.split for r in records} == {"train", "val", "test"}

    def test_bad_domain(self):
        with pytest.raises(ValueError):
            synth_scene(0, 0, "C")
