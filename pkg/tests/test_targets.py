import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hourglass_mtl.errors import ConfigurationError, DegenerateInputError, DimensionError
from hourglass_mtl.shapes import synth_shapes
from hourglass_mtl.targets import (
    BACKGROUND,
    DistanceTransformConfig,
    build_targets,
    class_balance_weights,
    dilate_disk,
    distance_transform,
    extract_edges,
    extract_semantic_contours,
    raw_boundary,
    squared_distance_to,
    weights_from_frequencies,
)
from oracles import brute_truncated_distance, raw_boundary as brute_raw, stamp_disk


def random_instance_map(rng, size=32):
    ids = np.zeros((size, size), dtype=np.int64)
    for k in range(1, rng.integers(1, 6) + 1):
        y0, x0 = rng.integers(0, size - 4, 2)
        h, w = rng.integers(3, size // 2, 2)
        ids[y0 : y0 + h, x0 : x0 + w] = k
    # sprinkle a few stray pixels to get irregular boundaries
    ys, xs = rng.integers(0, size, (2, 10))
    ids[ys, xs] = rng.integers(0, 6, 10)
    return ids


class TestEdges:
    def test_row_raw_boundary(self):
        ids = np.array([[1, 1, 2, 2]])
        np.testing.assert_array_equal(raw_boundary(ids)[0], [False, True, True, False])

    def test_single_pixel_disk_has_13(self):
        m = np.zeros((5, 5), dtype=bool)
        m[2, 2] = True
        d = dilate_disk(m)
        assert d.sum() == 13
        assert d[0, 2] and d[2, 0] and not d[0, 0] and not d[1, 0]

    def test_border_is_not_boundary(self):
        assert not raw_boundary(np.full((6, 6), 3)).any()

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            ids = random_instance_map(rng)
            np.testing.assert_array_equal(extract_edges(ids), stamp_disk(brute_raw(ids)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.int64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 3)))
    def test_raw_subset_of_dilated(self, ids):
        raw = raw_boundary(ids)
        dil = extract_edges(ids)
        assert np.all(dil[raw])
        np.testing.assert_array_equal(dil, stamp_disk(raw))


class TestContours:
    def test_no_edges_all_background(self):
        lab = np.array([[1, 2], [3, 0]])
        out = extract_semantic_contours(lab, np.zeros((2, 2), dtype=bool))
        assert np.all(out == BACKGROUND)

    def test_all_edges_equals_labels(self):
        lab = np.array([[1, 2], [3, 0]])
        np.testing.assert_array_equal(extract_semantic_contours(lab, np.ones((2, 2), dtype=bool)), lab)

    def test_random_mask_select(self):
        rng = np.random.default_rng(2)
        lab = rng.integers(0, 5, (9, 7))
        edge = rng.random((9, 7)) < 0.4
        out = extract_semantic_contours(lab, edge)
        for y in range(9):
            for x in range(7):
                assert out[y, x] == (lab[y, x] if edge[y, x] else 0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            extract_semantic_contours(np.zeros((2, 2)), np.zeros((2, 3), dtype=bool))


class TestDistanceTransform:
    def test_row_example(self):
        ids = np.array([[0, 1, 1, 1, 0]])
        dq = distance_transform(ids, cfg=DistanceTransformConfig(R=3, K=3))
        np.testing.assert_array_equal(dq.truncated[0], [0, 0, 1, 0, 0])
        np.testing.assert_array_equal(dq.truncated, brute_truncated_distance(ids, 3))

    def test_unit_bins(self):
        cfg = DistanceTransformConfig(R=6, K=6)
        ids = np.zeros((15, 15), dtype=int)
        ids[1:14, 1:14] = 1
        dq = distance_transform(ids, cfg=cfg)
        assert dq.truncated[7, 7] == 6
        p = np.argwhere(dq.truncated == 3)[0]
        np.testing.assert_array_equal(dq.one_hot()[:, p[0], p[1]], np.eye(6)[3])
        np.testing.assert_allclose(dq.representatives, np.arange(6.0))

    def test_matches_brute_force_50_maps(self):
        rng = np.random.default_rng(7)
        cfg = DistanceTransformConfig(R=5, K=6)
        for _ in range(50):
            ids = random_instance_map(rng)
            if not raw_boundary(ids).any() and (ids != 0).any():
                continue
            dq = distance_transform(ids, cfg=cfg)
            np.testing.assert_array_equal(dq.truncated, brute_truncated_distance(ids, cfg.R))
            oh = dq.one_hot()
            assert np.all(oh.sum(axis=0) == 1)

    def test_background_in_bin_zero_and_range(self):
        rng = np.random.default_rng(8)
        cfg = DistanceTransformConfig()
        for _ in range(10):
            ids = random_instance_map(rng)
            dq = distance_transform(ids, cfg=cfg)
            assert np.all(dq.bins[ids == 0] == 0)
            assert np.all(dq.truncated[ids == 0] == 0)
            assert dq.truncated.min() >= 0 and dq.truncated.max() <= cfg.R
            assert dq.bins.max() < cfg.K

    def test_bin_layout_default(self):
        cfg = DistanceTransformConfig()
        from hourglass_mtl.targets import quantize

        q = quantize(np.arange(21).reshape(1, -1), cfg)
        expected = [min(d * 6 // 20, 5) for d in range(21)]
        np.testing.assert_array_equal(q.bins[0], expected)
        np.testing.assert_allclose(q.quantized_values()[0], [20 / 6 * b for b in expected])

    def test_degenerate_input(self):
        with pytest.raises(DegenerateInputError):
            distance_transform(np.ones((4, 4), dtype=int))

    def test_blank(self):
        dq = distance_transform(np.zeros((4, 4), dtype=int))
        assert not dq.truncated.any()

    def test_squared_edt_large_distances(self):
        seeds = np.zeros((70, 3), dtype=bool)
        seeds[0, 0] = True
        d2 = squared_distance_to(seeds)
        for y in range(70):
            for x in range(3):
                assert d2[y, x] == y * y + x * x

    @pytest.mark.parametrize("R,K", [(0, 6), (5, 1), (2.5, 3)])
    def test_config_validation(self, R, K):
        with pytest.raises(ConfigurationError):
            DistanceTransformConfig(R=R, K=K)


class TestClassBalance:
    def test_frequency_arithmetic(self):
        cw = weights_from_frequencies(np.array([0.2, 0.5, 0.8]))
        assert cw.median == 0.5
        np.testing.assert_allclose(cw.weights, [2.5, 1.0, 0.625], rtol=0, atol=1e-15)

    def test_single_class(self):
        cw = class_balance_weights([np.zeros((4, 4), dtype=int)] * 3)
        np.testing.assert_array_equal(cw.weights, [1.0])

    def test_absent_class_zero_weight(self):
        cw = class_balance_weights([np.array([[0, 2], [2, 2]])], n_classes=4)
        assert cw.weights[1] == 0 and cw.weights[3] == 0
        assert cw.median == pytest.approx(0.5)

    def test_even_median(self):
        cw = weights_from_frequencies(np.array([0.1, 0.2, 0.4, 0.8]))
        assert cw.median == pytest.approx(0.3)

    def test_matches_recount(self):
        rng = np.random.default_rng(5)
        maps = [rng.integers(0, rng.integers(2, 6), (rng.integers(3, 9), rng.integers(3, 9))) for _ in range(12)]
        cw = class_balance_weights(maps, n_classes=6)
        freqs = {}
        for c in range(6):
            num = den = 0
            for m in maps:
                k = int((m == c).sum())
                if k:
                    num += k
                    den += m.size
            if den:
                freqs[c] = num / den
        vals = sorted(freqs.values())
        mid = len(vals) // 2
        med = vals[mid] if len(vals) % 2 else (vals[mid - 1] + vals[mid]) / 2
        for c in range(6):
            want = med / freqs[c] if c in freqs else 0.0
            assert cw.weights[c] == pytest.approx(want, rel=1e-14)

    def test_median_class_gets_one(self):
        maps = [np.array([[0, 0, 1, 2, 2, 2]])]
        cw = class_balance_weights(maps)
        assert cw.weights[0] == 1.0


class TestSynthShapes:
    def test_deterministic(self):
        a = synth_shapes(3, 4)
        b = synth_shapes(3, 4)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.labels.tobytes() == y.labels.tobytes()
            assert x.instances.tobytes() == y.instances.tobytes()

    def test_count_zero(self):
        assert synth_shapes(0, 0) == []

    def test_census_regression(self):
        samples = synth_shapes(0, 100, 64, 4)
        census = [sum(1 for s in samples if (s.labels == c).any()) for c in range(1, 4)]
        assert census == [77, 70, 80]
        assert min(census) >= 10

    def test_instances_and_shapes(self):
        for s in synth_shapes(1, 30, 48, 5):
            assert s.image.shape == (3, 48, 48)
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0
            ids = np.unique(s.instances)
            ids = ids[ids > 0]
            assert 2 <= len(ids) <= 6
            for k in ids:
                classes = np.unique(s.labels[s.instances == k])
                assert len(classes) == 1 and classes[0] >= 1
            assert np.all((s.labels > 0) == (s.instances > 0))

    def test_too_small(self):
        with pytest.raises(ConfigurationError):
            synth_shapes(0, 1, size=8)
        with pytest.raises(ConfigurationError):
            synth_shapes(0, 1, n_classes=1)


class TestBuildTargets:
    def test_blank(self):
        tb = build_targets(np.zeros((8, 8), dtype=int), np.zeros((8, 8), dtype=int))
        assert not tb.edge.any()
        assert np.all(tb.contour == BACKGROUND)
        assert np.all(tb.distq.bins == 0)

    def test_rectangle_perimeter(self):
        lab = np.zeros((20, 20), dtype=int)
        lab[5:12, 4:15] = 2
        inst = (lab > 0).astype(int)
        tb = build_targets(lab, inst)
        perim = np.zeros_like(lab, dtype=bool)
        # both sides of the step: the rectangle's outer ring and the pixels just outside it
        perim[5:12, 4:15] = True
        perim[6:11, 5:14] = False
        outer = np.zeros_like(perim)
        outer[4:13, 3:16] = True
        outer[5:12, 4:15] = False
        outer[4, 3] = outer[4, 15] = outer[12, 3] = outer[12, 15] = False
        np.testing.assert_array_equal(tb.edge, stamp_disk(perim | outer))

    def test_composition(self):
        rng = np.random.default_rng(9)
        inst = random_instance_map(rng)
        lab = (inst % 3).astype(int)
        cfg = DistanceTransformConfig(R=7, K=4)
        tb = build_targets(lab, inst, cfg)
        np.testing.assert_array_equal(tb.edge, extract_edges(inst))
        np.testing.assert_array_equal(tb.contour, extract_semantic_contours(lab, tb.edge))
        np.testing.assert_array_equal(tb.distq.bins, distance_transform(inst, tb.edge, cfg).bins)
        np.testing.assert_array_equal(tb.seg, lab)
        assert tb.edge.shape == tb.contour.shape == tb.distq.bins.shape == tb.seg.shape
