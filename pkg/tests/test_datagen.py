import hashlib

import numpy as np
import numpy.testing as npt
import pytest

from docshadow.datagen import (
    ImageTriplet, ShadowJitter, ShadowParams, ShadowSampler, augment_shadow, composite_shadow,
    dominant_background_color, generate_dataset, load_dataset, load_triplet, make_triplet, random_mask,
    rasterize_polygon, read_manifest, recolor_albedo, synth_document, triplet_seed,
)
from docshadow.errors import ConfigError, DataError, ShapeError
from docshadow.images import save_png

from oracles import point_in_polygon, triangle_contains


def _digest(d):
    h = hashlib.sha256()
    for p in sorted(d.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def clean_dir(tmp_path):
    d = tmp_path / "clean"
    d.mkdir()
    for i in range(3):
        save_png(d / f"page{i}.png", synth_document(32, 48, seed=i))
    return d


class TestRasterize:
    def test_triangle_matches_barycentric(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            tri = rng.uniform(0, 20, (3, 2))
            got = rasterize_polygon(tri, 20, 20)
            for y in range(20):
                for x in range(20):
                    assert got[y, x] == triangle_contains(x + 0.5, y + 0.5, tri)

    def test_concave_matches_ray_cast(self):
        verts = [(2, 2), (18, 3), (10, 9), (17, 17), (3, 15)]
        got = rasterize_polygon(verts, 20, 20)
        ref = [[point_in_polygon(x + 0.5, y + 0.5, verts) for x in range(20)] for y in range(20)]
        npt.assert_array_equal(got, np.array(ref, dtype=np.uint8))

    def test_axis_aligned_square(self):
        got = rasterize_polygon([(2, 3), (6, 3), (6, 8), (2, 8)], 10, 10)
        assert got.sum() == 4 * 5 and got[3:8, 2:6].all()


class TestMasks:
    @pytest.mark.parametrize("gen", ["polygon", "band", "blob"])
    def test_coverage_and_binary(self, gen):
        for seed in range(5):
            m = random_mask(32, 40, gen, seed=seed)
            assert m.dtype == np.uint8 and set(np.unique(m)) <= {0, 1}
            assert 0.05 <= m.mean() <= 0.6

    def test_deterministic(self):
        npt.assert_array_equal(random_mask(32, 32, seed=4), random_mask(32, 32, seed=4))

    def test_errors(self):
        with pytest.raises(ShapeError):
            random_mask(8, 32)
        with pytest.raises(ConfigError):
            random_mask(32, 32, "spiral")


class TestComposite:
    def test_linear_arithmetic(self):
        rng = np.random.default_rng(0)
        clean = rng.random((8, 8, 3))
        mask = np.zeros((8, 8), np.uint8)
        mask[2:6, 1:5] = 1
        sp = ShadowParams((0.5, 0.6, 0.7), (-0.05, 0.0, 0.02))
        t = composite_shadow(clean, mask, sp)
        inside = mask.astype(bool)
        ref = np.clip(clean * np.array(sp.w) + np.array(sp.b), 0, 1)
        npt.assert_allclose(t.input[inside], ref[inside])
        npt.assert_array_equal(t.input[~inside], clean[~inside])
        npt.assert_array_equal(t.target, clean)

    def test_feather_stays_inside(self):
        rng = np.random.default_rng(1)
        clean = rng.random((16, 16, 3))
        mask = random_mask(16, 16, "band", seed=2)
        t = composite_shadow(clean, mask, ShadowParams(feather=3))
        npt.assert_array_equal(t.input[mask == 0], clean[mask == 0])
        t.validate(check_unshadowed=True)

    def test_monotone_darkening(self):
        rng = np.random.default_rng(2)
        clean = rng.random((16, 16, 3))
        t = composite_shadow(clean, random_mask(16, 16, seed=3), ShadowParams((0.9, 1.0, 0.4), (-0.1, 0.0, 0.0), 2))
        assert np.all(t.input <= t.target + 1e-12)

    @pytest.mark.parametrize("sp", [ShadowParams((0.0, 0.5, 0.5)), ShadowParams((1.2, 0.5, 0.5)),
                                    ShadowParams(b=(0.3, 0.0, 0.0)), ShadowParams(feather=-1)])
    def test_invalid_params(self, sp):
        with pytest.raises(ConfigError):
            composite_shadow(np.zeros((16, 16, 3)), np.zeros((16, 16)), sp)

    def test_validate_rejects(self):
        x = np.zeros((4, 4, 3))
        with pytest.raises(DataError):
            ImageTriplet(x, x, np.full((4, 4), 2, np.uint8)).validate()
        with pytest.raises(DataError):
            ImageTriplet(x, x, np.zeros((4, 4), np.uint8), "MARS").validate()
        with pytest.raises(ShapeError):
            ImageTriplet(x, x, np.zeros((4, 5), np.uint8)).validate()


class TestAugment:
    def _trip(self):
        clean = synth_document(32, 32, seed=1)
        return composite_shadow(clean, random_mask(32, 32, seed=1), ShadowParams())

    def test_only_shadow_pixels_change(self):
        t = self._trip()
        a = augment_shadow(t, seed=5)
        out = t.mask == 0
        npt.assert_array_equal(a.input[out], t.input[out])
        npt.assert_array_equal(a.target, t.target)
        assert not np.array_equal(a.input, t.input)

    def test_deterministic_and_seeded(self):
        t = self._trip()
        npt.assert_array_equal(augment_shadow(t, seed=3).input, augment_shadow(t, seed=3).input)
        assert not np.array_equal(augment_shadow(t, seed=3).input, augment_shadow(t, seed=4).input)

    def test_zero_jitter_is_identity(self):
        t = self._trip()
        npt.assert_array_equal(augment_shadow(t, ShadowJitter(0, 0, 0), seed=1).input, t.input)

    def test_hue_rotation_keeps_gray(self):
        x = np.full((16, 16, 3), 0.5)
        t = composite_shadow(x, np.ones((16, 16)), ShadowParams())
        a = augment_shadow(t, ShadowJitter(0, 0, 30.0), seed=0)
        npt.assert_allclose(a.input, t.input, atol=1e-12)


class TestPaperColor:
    def test_dominant_cluster(self):
        rng = np.random.default_rng(0)
        img = np.empty((20, 20, 3))
        img[:] = (0.9, 0.85, 0.7)
        idx = rng.random((20, 20)) < 0.25
        img[idx] = (0.1, 0.1, 0.1)
        img += rng.normal(0, 0.01, img.shape)
        npt.assert_allclose(dominant_background_color(img, k=3), (0.9, 0.85, 0.7), atol=0.01)

    def test_deterministic(self):
        img = synth_document(24, 24, seed=2)
        npt.assert_array_equal(dominant_background_color(img, seed=1), dominant_background_color(img, seed=1))

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            dominant_background_color(np.zeros((4, 4, 3)), k=1)

    def test_recolor(self):
        npt.assert_allclose(recolor_albedo(np.ones((2, 2, 3)), (0.5, 0.6, 0.7))[0, 0], (0.5, 0.6, 0.7))
        with pytest.raises(ConfigError):
            recolor_albedo(np.ones((2, 2, 3)), (1.5, 0, 0))


class TestSampler:
    def test_draw_in_range(self):
        s = ShadowSampler()
        rng = np.random.default_rng(0)
        for _ in range(200):
            sp, gen = s.draw(rng)
            sp.validate()
            assert gen in s.generators

    def test_make_triplet_deterministic(self):
        clean = synth_document(32, 32, seed=0)
        a, _ = make_triplet(clean, 11)
        b, _ = make_triplet(clean, 11)
        npt.assert_array_equal(a.input, b.input)
        a.validate()

    def test_triplet_seed_distinct(self):
        assert len({triplet_seed(0, i) for i in range(100)}) == 100


class TestDatasetIO:
    def test_layout_and_manifest(self, clean_dir, tmp_path):
        out = tmp_path / "data"
        rows = generate_dataset(clean_dir, 4, out, seed=1)
        assert len(list(out.glob("*.png"))) == 12 and len(read_manifest(out)) == len(rows) == 4
        trips = load_dataset(out)
        assert trips[0].input.shape == (32, 48, 3)
        for t in trips:
            t.validate(check_unshadowed=True)

    def test_same_seed_same_bytes(self, clean_dir, tmp_path):
        generate_dataset(clean_dir, 3, tmp_path / "a", seed=5)
        generate_dataset(clean_dir, 3, tmp_path / "b", seed=5)
        generate_dataset(clean_dir, 3, tmp_path / "c", seed=6)
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b") != _digest(tmp_path / "c")

    def test_missing_clean_dir(self, tmp_path):
        with pytest.raises(DataError):
            generate_dataset(tmp_path / "nope", 2, tmp_path / "out")
        assert not (tmp_path / "out").exists()

    def test_failure_cleans_up(self, clean_dir, tmp_path):
        (clean_dir / "tiny.png").write_bytes(b"not a png")
        with pytest.raises(DataError):
            generate_dataset(clean_dir, 2, tmp_path / "out")
        assert not (tmp_path / "out").exists()

    def test_missing_mask(self, clean_dir, tmp_path):
        out = tmp_path / "data"
        generate_dataset(clean_dir, 1, out)
        (out / "0_mask.png").unlink()
        with pytest.raises(DataError):
            load_triplet(out, 0)
        assert load_triplet(out, 0, require_mask=False).mask.sum() == 0
