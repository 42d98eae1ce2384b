import json
import warnings

import numpy as np
import pytest

from driftseg.data import (AugmentPolicy, DomainSpec, LabelError, PolygonAnnotation,
                           Sample, augment, dataset_stats, load_dataset, parse_labels,
                           parse_wkt_polygon, rasterize, rescale_nearest, rot90_cw,
                           synth_domain, synth_sample, write_dataset)
from oracles import point_in_polygon, rasterize_loops


def label_json(features):
    return json.dumps({"features": features})


def feat(wkt, subtype, uid="u1"):
    return {"wkt": wkt, "properties": {"subtype": subtype, "uid": uid}}


class TestParseLabels:
    def test_empty_feature_list(self):
        assert parse_labels(label_json([])) == []

    def test_square_destroyed(self):
        text = label_json([feat("POLYGON ((0 0, 4 0, 4 4, 0 4, 0 0))", "destroyed")])
        anns = parse_labels(text)
        assert len(anns) == 1
        assert anns[0].damage_class == 4
        assert anns[0].ring == [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)]
        assert anns[0].uid == "u1"

    def test_degenerate_ring_rejected(self):
        text = label_json([feat("POLYGON ((0 0, 1 1))", "destroyed")])
        with pytest.raises(LabelError, match="3 distinct"):
            parse_labels(text)

    def test_malformed_json(self):
        with pytest.raises(LabelError, match="malformed"):
            parse_labels("{not json")

    def test_unparseable_wkt(self):
        text = label_json([feat("LINESTRING (0 0, 1 1)", "destroyed")])
        with pytest.raises(LabelError, match="unparseable"):
            parse_labels(text)

    def test_unknown_subtype(self):
        text = label_json([feat("POLYGON ((0 0, 1 0, 1 1, 0 1, 0 0))", "obliterated")])
        with pytest.raises(LabelError, match="unknown damage subtype"):
            parse_labels(text)

    def test_all_subtype_mappings(self):
        for name, cls in [("no-damage", 1), ("minor-damage", 2),
                          ("major-damage", 3), ("destroyed", 4)]:
            anns = parse_labels(label_json([feat("POLYGON ((0 0, 2 0, 2 2, 0 2, 0 0))", name)]))
            assert anns[0].damage_class == cls

    def test_unclassified_mapping(self):
        text = label_json([feat("POLYGON ((0 0, 2 0, 2 2, 0 2, 0 0))", "un-classified")])
        assert parse_labels(text)[0].damage_class == 1
        assert parse_labels(text, unclassified="ignore") == []

    def test_xbd_nested_xy_format(self):
        doc = json.dumps({"features": {"xy": [feat("POLYGON ((0 0, 2 0, 2 2, 0 2, 0 0))",
                                                   "minor-damage")],
                                       "lng_lat": []}})
        anns = parse_labels(doc)
        assert len(anns) == 1 and anns[0].damage_class == 2

    def test_wkt_interior_ring_warns(self):
        with pytest.warns(UserWarning, match="interior"):
            ring = parse_wkt_polygon(
                "POLYGON ((0 0, 9 0, 9 9, 0 9, 0 0), (2 2, 3 2, 3 3, 2 3, 2 2))")
        assert len(ring) == 4


class TestRasterize:
    def test_no_annotations(self):
        assert np.array_equal(rasterize([], 4, 4), np.zeros((4, 4), dtype=np.uint8))

    def test_square_covers_exact_pixels(self):
        # square spanning x,y in [1,3): covers centers of pixels (1..2, 1..2)
        ann = PolygonAnnotation(ring=[(1, 1), (3, 1), (3, 3), (1, 3)], damage_class=2)
        mask = rasterize([ann], 4, 4)
        expected = np.zeros((4, 4), dtype=np.uint8)
        expected[1:3, 1:3] = 2
        assert np.array_equal(mask, expected)
        assert np.array_equal(mask, rasterize_loops([ann], 4, 4))

    def test_overlap_max_class_wins(self):
        a = PolygonAnnotation(ring=[(0, 0), (3, 0), (3, 3), (0, 3)], damage_class=2)
        b = PolygonAnnotation(ring=[(1, 1), (4, 1), (4, 4), (1, 4)], damage_class=4)
        mask = rasterize([a, b], 5, 5)
        assert mask[1, 1] == 4 and mask[2, 2] == 4
        assert mask[0, 0] == 2
        assert np.array_equal(mask, rasterize_loops([a, b], 5, 5))
        # order must not matter
        assert np.array_equal(mask, rasterize([b, a], 5, 5))

    def test_degenerate_polygon_skipped_with_warning(self):
        bad = PolygonAnnotation(ring=[(0, 0), (5, 0), (2.5, 0), (1, 0)], damage_class=3)
        with pytest.warns(UserWarning, match="degenerate"):
            mask = rasterize([bad], 4, 4)
        assert not mask.any()

    def test_random_polygons_match_loop_oracle_exactly(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            anns = []
            for _ in range(rng.integers(1, 4)):
                k = int(rng.integers(3, 8))
                ring = [(float(rng.uniform(-1, 13)), float(rng.uniform(-1, 13)))
                        for _ in range(k)]
                try:
                    anns.append(PolygonAnnotation(ring=ring,
                                                  damage_class=int(rng.integers(1, 5))))
                except LabelError:
                    continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                got = rasterize(anns, 12, 12)
                ref = rasterize_loops([a for a in anns if _area(a.ring) != 0.0], 12, 12)
            assert np.array_equal(got, ref)


def _area(ring):
    r = np.asarray(ring, dtype=np.float64)
    x, y = r[:, 0], r[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def quiet_spec(**kw):
    base = dict(name="dom", force="wind", base_palette=(0.4, 0.5, 0.6),
                gain_shift=(1.0, 1.0, 1.0), texture_scale=10.0,
                building_density=6.0, damage_profile=(0.4, 0.3, 0.2, 0.1), seed=7)
    base.update(kw)
    return DomainSpec(**base)


class TestSynth:
    def test_deterministic_bytes(self):
        spec = quiet_spec()
        a = synth_domain(spec, 3, 32, 32)
        b = synth_domain(quiet_spec(), 3, 32, 32)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.pre, sb.pre)
            assert np.array_equal(sa.post, sb.post)
            assert np.array_equal(sa.mask, sb.mask)
            assert sa.sample_id == sb.sample_id

    def test_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            synth_domain(quiet_spec(damage_profile=(0.5, 0.5, 0.5, 0.5)), 1, 32, 32)
        with pytest.raises(ValueError, match="positive"):
            synth_domain(quiet_spec(building_density=0.0), 1, 32, 32)
        with pytest.raises(ValueError, match="at least 32"):
            synth_domain(quiet_spec(), 1, 16, 16)
        with pytest.raises(ValueError, match="force"):
            synth_domain(quiet_spec(force="plague"), 1, 32, 32)

    def test_all_undamaged_profile(self):
        spec = quiet_spec(damage_profile=(1.0, 0.0, 0.0, 0.0), building_density=10.0)
        samples = synth_domain(spec, 4, 32, 32)
        assert any(s.mask.any() for s in samples)
        for s in samples:
            assert set(np.unique(s.mask)) <= {0, 1}
            # unit gain and no damage: the post image equals the pre image
            assert np.array_equal(s.pre, s.post)

    def test_gain_shift_only_difference_when_undamaged(self):
        gain = (0.8, 1.1, 0.9)
        spec = quiet_spec(damage_profile=(1.0, 0.0, 0.0, 0.0), gain_shift=gain)
        for s in synth_domain(spec, 3, 32, 32):
            expect = np.clip(np.round(s.pre.astype(np.float64) * np.asarray(gain)), 0, 255)
            assert np.max(np.abs(s.post.astype(np.float64) - expect)) <= 1.0

    def test_mask_support_independent_of_damage_profile(self):
        base = quiet_spec(damage_profile=(1.0, 0.0, 0.0, 0.0))
        worst = quiet_spec(damage_profile=(0.0, 0.0, 0.0, 1.0))
        for sa, sb in zip(synth_domain(base, 4, 32, 32), synth_domain(worst, 4, 32, 32)):
            assert np.array_equal(sa.mask > 0, sb.mask > 0)
            assert set(np.unique(sb.mask)) <= {0, 4}

    def test_mean_matches_palette_expectation(self):
        # near-zero density so the background dominates; analytic mean is the palette
        spec = quiet_spec(building_density=1e-6, seed=11)
        samples = synth_domain(spec, 200, 32, 32)
        per_image = np.array([s.pre.mean(axis=(0, 1)) for s in samples]) / 255.0
        mean = per_image.mean(axis=0)
        sem = per_image.std(axis=0, ddof=1) / np.sqrt(len(samples))
        for c in range(3):
            assert abs(mean[c] - spec.base_palette[c]) <= 3.0 * sem[c] + 0.003

    def test_damage_effects_change_post(self):
        spec = quiet_spec(damage_profile=(0.0, 0.0, 0.0, 1.0), building_density=10.0)
        changed = 0
        for s in synth_domain(spec, 4, 32, 32):
            in_bldg = s.mask == 4
            if in_bldg.any():
                diff = (s.pre[in_bldg].astype(int) - s.post[in_bldg].astype(int))
                changed += int(np.abs(diff).mean() > 5)
        assert changed >= 3

    def test_force_field_runs_for_all_forces(self):
        for force in ("wind", "fire", "water"):
            samples = synth_domain(quiet_spec(force=force), 2, 32, 32)
            assert len(samples) == 2


class TestAugment:
    def sample(self, h=16, w=16, seed=0):
        rng = np.random.default_rng(seed)
        return Sample(pre=rng.integers(0, 256, (h, w, 3), dtype=np.uint8),
                      post=rng.integers(0, 256, (h, w, 3), dtype=np.uint8),
                      mask=rng.integers(0, 5, (h, w), dtype=np.uint8),
                      domain_id="d", sample_id="s")

    def test_identity_policy_unchanged(self):
        s = self.sample()
        out = augment(s, np.random.default_rng(0), AugmentPolicy.identity())
        assert np.array_equal(out.pre, s.pre)
        assert np.array_equal(out.post, s.post)
        assert np.array_equal(out.mask, s.mask)

    def test_rot90_mapping(self):
        s = self.sample()
        h = s.mask.shape[0]
        rot = rot90_cw(s.mask, 1)
        for r in range(h):
            for c in range(s.mask.shape[1]):
                assert rot[c, h - 1 - r] == s.mask[r, c]

    def test_rot180_twice_identity(self):
        s = self.sample()
        assert np.array_equal(rot90_cw(rot90_cw(s.mask, 2), 2), s.mask)

    def test_rot_full_cycle(self):
        s = self.sample()
        assert np.array_equal(rot90_cw(s.pre, 4), s.pre)

    def test_geometric_applied_identically(self):
        s = self.sample()
        pol = AugmentPolicy(rotate=True, flip=True)
        out = augment(s, np.random.default_rng(3), pol)
        # recover the same transform by matching the mask, then check images
        for k in range(4):
            for fh in (False, True):
                for fv in (False, True):
                    m = rot90_cw(s.mask, k)
                    m = m[:, ::-1] if fh else m
                    m = m[::-1] if fv else m
                    if np.array_equal(m, out.mask):
                        p = rot90_cw(s.pre, k)
                        p = p[:, ::-1] if fh else p
                        p = p[::-1] if fv else p
                        assert np.array_equal(p, out.pre)
                        return
        pytest.fail("augmented mask does not match any rot/flip of the input")

    def test_rescale_preserves_shape_and_classes(self):
        s = self.sample()
        pol = AugmentPolicy(rescale=(0.8, 1.25))
        for seed in range(6):
            out = augment(s, np.random.default_rng(seed), pol)
            assert out.mask.shape == s.mask.shape
            assert out.pre.shape == s.pre.shape
            assert set(np.unique(out.mask)) <= set(np.unique(s.mask)) | {0}

    def test_rescale_nearest_identity_at_one(self):
        s = self.sample()
        assert np.array_equal(rescale_nearest(s.mask, 1.0), s.mask)

    def test_photometric_leaves_mask(self):
        s = self.sample()
        pol = AugmentPolicy(brightness=(0.8, 1.2), contrast=(0.8, 1.2),
                            color=(0.8, 1.2), sharpness=0.5)
        out = augment(s, np.random.default_rng(5), pol)
        assert np.array_equal(out.mask, s.mask)
        assert not np.array_equal(out.pre, s.pre)

    def test_deterministic_given_rng(self):
        s = self.sample()
        pol = AugmentPolicy.full()
        a = augment(s, np.random.default_rng(9), pol)
        b = augment(s, np.random.default_rng(9), pol)
        assert np.array_equal(a.pre, b.pre)
        assert np.array_equal(a.post, b.post)
        assert np.array_equal(a.mask, b.mask)

    def test_rotation_commutes_with_rasterization(self):
        rng = np.random.default_rng(14)
        h = w = 10
        for _ in range(10):
            k = int(rng.integers(3, 7))
            ring = [(float(rng.uniform(0, w)), float(rng.uniform(0, h))) for _ in range(k)]
            try:
                ann = PolygonAnnotation(ring=ring, damage_class=3)
            except LabelError:
                continue
            if _area(ring) == 0.0:
                continue
            # pixel (r,c) -> (c, H-1-r) corresponds to (x,y) -> (H - y, x)
            rot_ring = [(h - y, x) for x, y in ring]
            rot_ann = PolygonAnnotation(ring=rot_ring, damage_class=3)
            assert np.array_equal(rot90_cw(rasterize([ann], h, w), 1),
                                  rasterize([rot_ann], w, h))


class TestStatsAndIO:
    def test_all_background_fraction(self):
        s = Sample(pre=np.zeros((8, 8, 3), np.uint8), post=np.zeros((8, 8, 3), np.uint8),
                   mask=np.zeros((8, 8), np.uint8), domain_id="a", sample_id="a_0")
        stats = dataset_stats([s])
        assert stats["a"]["count"] == 1
        assert stats["a"]["pixel_fractions"][0] == 1.0

    def test_two_equal_domains(self):
        samples = []
        for d in ("a", "b"):
            for i in range(3):
                samples.append(Sample(pre=np.zeros((4, 4, 3), np.uint8),
                                      post=np.zeros((4, 4, 3), np.uint8),
                                      mask=np.zeros((4, 4), np.uint8),
                                      domain_id=d, sample_id=f"{d}_{i}"))
        stats = dataset_stats(samples)
        assert stats["a"]["count"] == 3 and stats["b"]["count"] == 3

    def test_fractions_match_pixel_count_oracle(self):
        rng = np.random.default_rng(3)
        samples = [Sample(pre=np.zeros((6, 6, 3), np.uint8), post=np.zeros((6, 6, 3), np.uint8),
                          mask=rng.integers(0, 5, (6, 6), dtype=np.uint8),
                          domain_id="d", sample_id=f"d_{i}") for i in range(4)]
        stats = dataset_stats(samples)
        counts = np.zeros(5, dtype=np.int64)
        for s in samples:
            for v in s.mask.reshape(-1):
                counts[v] += 1
        assert np.allclose(stats["d"]["pixel_fractions"], counts / counts.sum())
        assert abs(stats["d"]["pixel_fractions"].sum() - 1.0) < 1e-12

    def test_empty_dataset_errors(self):
        with pytest.raises(ValueError, match="empty"):
            dataset_stats([])

    def test_write_load_roundtrip(self, tmp_path):
        spec = quiet_spec(name="roundtrip", seed=5)
        samples = synth_domain(spec, 3, 32, 32)
        write_dataset(samples, tmp_path / "ds", domain_specs=[spec])
        loaded, manifest = load_dataset(tmp_path / "ds")
        assert len(loaded) == 3
        assert manifest["domains"][0]["force"] == "wind"
        by_id = {s.sample_id: s for s in loaded}
        for s in samples:
            l = by_id[s.sample_id]
            assert np.array_equal(l.pre, s.pre)
            assert np.array_equal(l.post, s.post)
            assert np.array_equal(l.mask, s.mask)
            assert l.domain_id == s.domain_id
