import math

import numpy as np
import pytest

from vismem.errors import InvalidInputError
from vismem.grids import Box2D, gaussian_smooth, minmax_rescale
from vismem.priors import (
    AnchorSet,
    DensePrior,
    anchors_from_gt,
    dense_prior,
    extract_anchors,
    find_peaks,
    radius_cells_to_normalized,
)
from vismem.retrieval import Prototype


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


def proto_of(vec, category="cat"):
    v = np.asarray(vec, dtype=np.float32)
    v = v / np.linalg.norm(v)
    return Prototype(category=category, vector=v, neighbors=[(0, 1.0, 1.0)], tau=0.07)


def empty_proto(d, category="cat"):
    return Prototype(category=category, vector=np.zeros(d, dtype=np.float32),
                     neighbors=[], tau=0.07)


class TestDensePrior:
    def test_empty_prototype_gives_zero_map(self):
        grid = rng_for(0).standard_normal((5, 5, 4)).astype(np.float32)
        prior = dense_prior(grid, empty_proto(4))
        np.testing.assert_array_equal(prior.heatmap, np.zeros((5, 5), dtype=np.float32))

    def test_aligned_cell_is_maximum(self):
        d = 8
        rng = rng_for(1)
        u = rng.standard_normal(d).astype(np.float32)
        u /= np.linalg.norm(u)
        grid = rng.standard_normal((9, 9, d)).astype(np.float32) * 0.1
        grid[4, 4] = u * 5.0  # perfectly aligned, any magnitude
        prior = dense_prior(grid, proto_of(u), sigma=0.5)
        assert np.unravel_index(prior.heatmap.argmax(), (9, 9)) == (4, 4)
        assert prior.heatmap[4, 4] == pytest.approx(1.0, abs=1e-6)

    def test_magnitude_invariance(self):
        """Cells are direction-only: scaling a cell's features must not change the map."""
        rng = rng_for(2)
        grid = rng.standard_normal((6, 6, 4)).astype(np.float32)
        scaled = grid * rng.uniform(0.5, 10.0, (6, 6, 1)).astype(np.float32)
        p = proto_of(rng.standard_normal(4))
        np.testing.assert_allclose(dense_prior(grid, p).heatmap,
                                   dense_prior(scaled, p).heatmap, atol=1e-4)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_composition_oracle(self, seed):
        rng = rng_for(seed)
        grid = rng.standard_normal((8, 10, 6)).astype(np.float32)
        p = proto_of(rng.standard_normal(6))
        sigma = 1.0
        g = grid.astype(np.float64)
        norms = np.linalg.norm(g, axis=2, keepdims=True)
        raw = ((g / norms) @ p.vector.astype(np.float64)).astype(np.float32)
        oracle = minmax_rescale(gaussian_smooth(raw, sigma))
        np.testing.assert_allclose(dense_prior(grid, p, sigma).heatmap, oracle, atol=1e-6)

    def test_range_zero_one(self):
        rng = rng_for(3)
        prior = dense_prior(rng.standard_normal((7, 7, 4)).astype(np.float32),
                            proto_of(rng.standard_normal(4)))
        assert prior.heatmap.min() >= 0.0 and prior.heatmap.max() <= 1.0 + 1e-6

    def test_constant_compatibility_gives_zeros(self):
        u = np.array([1.0, 0.0, 0.0], dtype=np.float32)
        grid = np.broadcast_to(u, (5, 5, 3)).copy()
        prior = dense_prior(grid, proto_of(u))
        np.testing.assert_array_equal(prior.heatmap, np.zeros((5, 5), dtype=np.float32))

    def test_zero_cells_treated_as_zero_similarity(self):
        grid = np.zeros((4, 4, 3), dtype=np.float32)
        grid[0, 0] = [1.0, 0.0, 0.0]
        grid[3, 3] = [-1.0, 0.0, 0.0]
        prior = dense_prior(grid, proto_of([1.0, 0.0, 0.0]), sigma=0.1)
        assert prior.heatmap[0, 0] == pytest.approx(1.0, abs=1e-6)
        assert prior.heatmap[3, 3] == pytest.approx(0.0, abs=1e-6)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            dense_prior(np.zeros((3, 3, 4), dtype=np.float32), proto_of([1.0, 0.0]))


def peaks_oracle(hm, threshold):
    """Exhaustive neighborhood check, independent of the vectorized version."""
    h, w = hm.shape
    out = []
    for r in range(h):
        for c in range(w):
            v = float(hm[r, c])
            if v < threshold:
                continue
            ok = True
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == dc == 0:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and hm[rr, cc] > hm[r, c]:
                        ok = False
            if ok:
                out.append((r, c, v))
    out.sort(key=lambda p: (-p[2], p[0], p[1]))
    return out


class TestFindPeaks:
    def test_single_bump(self):
        hm = np.zeros((5, 5), dtype=np.float32)
        hm[2, 3] = 1.0
        peaks = find_peaks(hm, 0.5)
        assert peaks == [(2, 3, 1.0)]

    def test_plateau_cells_all_peaks(self):
        hm = np.zeros((4, 4), dtype=np.float32)
        hm[1:3, 1:3] = 1.0
        peaks = find_peaks(hm, 0.5)
        assert [(r, c) for r, c, _ in peaks] == [(1, 1), (1, 2), (2, 1), (2, 2)]

    def test_threshold_excludes_low_peaks(self):
        hm = np.zeros((5, 5), dtype=np.float32)
        hm[1, 1] = 0.4
        hm[3, 3] = 0.8
        assert [(r, c) for r, c, _ in find_peaks(hm, 0.5)] == [(3, 3)]

    def test_border_cells_can_be_peaks(self):
        hm = np.zeros((3, 3), dtype=np.float32)
        hm[0, 0] = 1.0
        assert find_peaks(hm, 0.5)[0][:2] == (0, 0)

    def test_sort_order_ties_row_then_col(self):
        hm = np.zeros((5, 5), dtype=np.float32)
        hm[4, 0] = hm[0, 4] = hm[2, 2] = 0.9
        assert [(r, c) for r, c, _ in find_peaks(hm, 0.5)] == [(0, 4), (2, 2), (4, 0)]

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_exhaustive_oracle(self, seed):
        hm = rng_for(seed).uniform(0, 1, (12, 14)).astype(np.float32)
        assert find_peaks(hm, 0.3) == peaks_oracle(hm.astype(np.float64), 0.3)


def greedy_oracle(peaks, h, w, radius, max_anchors):
    accepted = []
    for r, c, resp in peaks:
        if len(accepted) >= max_anchors:
            break
        x, y = (c + 0.5) / w, (r + 0.5) / h
        if all(math.hypot(x - ax, y - ay) >= radius for ax, ay, _ in accepted):
            accepted.append((x, y, resp))
    return accepted


class TestExtractAnchors:
    def _prior(self, hm):
        return DensePrior(category="cat", heatmap=np.asarray(hm, dtype=np.float32), sigma=1.0)

    def test_cell_center_coordinates(self):
        hm = np.zeros((4, 8), dtype=np.float32)
        hm[1, 5] = 1.0
        anchors = extract_anchors(self._prior(hm))
        (pt, resp), = anchors.anchors
        assert (pt.x, pt.y) == ((5 + 0.5) / 8, (1 + 0.5) / 4)
        assert resp == 1.0

    def test_suppression_removes_close_second_peak(self):
        hm = np.zeros((10, 10), dtype=np.float32)
        hm[4, 4] = 1.0
        hm[4, 6] = 0.9  # 2 cells away < default 3-cell radius
        hm[4, 9] = 0.8  # 5 cells away, kept
        anchors = extract_anchors(self._prior(hm))
        assert len(anchors) == 2
        assert [a[1] for a in anchors.anchors] == [1.0, pytest.approx(0.8)]

    def test_max_anchors_cap(self):
        hm = np.zeros((20, 20), dtype=np.float32)
        for i in range(15):
            hm[(i * 5) % 20, (i * 7) % 20] = 0.9
        anchors = extract_anchors(self._prior(hm), max_anchors=4)
        assert len(anchors) == 4

    def test_responses_descending(self):
        hm = rng_for(0).uniform(0, 1, (15, 15)).astype(np.float32)
        anchors = extract_anchors(self._prior(hm), threshold=0.2)
        resps = [r for _, r in anchors.anchors]
        assert resps == sorted(resps, reverse=True)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_greedy_oracle(self, seed):
        hm = rng_for(seed).uniform(0, 1, (16, 16)).astype(np.float32)
        prior = self._prior(hm)
        radius = radius_cells_to_normalized(3.0, 16, 16)
        anchors = extract_anchors(prior, threshold=0.4, radius=radius, max_anchors=6)
        oracle = greedy_oracle(peaks_oracle(hm.astype(np.float64), 0.4), 16, 16, radius, 6)
        assert len(anchors) == len(oracle)
        for (pt, resp), (x, y, oresp) in zip(anchors.anchors, oracle):
            assert (pt.x, pt.y) == (x, y)
            assert resp == pytest.approx(oresp, abs=1e-7)

    def test_empty_heatmap_no_anchors(self):
        anchors = extract_anchors(self._prior(np.zeros((6, 6))))
        assert len(anchors) == 0 and anchors.points() == []

    def test_threshold_validation(self):
        with pytest.raises(InvalidInputError):
            extract_anchors(self._prior(np.zeros((4, 4))), threshold=1.5)

    def test_radius_validation(self):
        with pytest.raises(InvalidInputError):
            extract_anchors(self._prior(np.zeros((4, 4))), radius=0.0)

    def test_radius_conversion(self):
        assert radius_cells_to_normalized(3.0, 10, 20) == 3.0 / 20
        assert radius_cells_to_normalized(3.0, 40, 20) == 3.0 / 40


class TestAnchorsFromGt:
    def test_box_centers_unit_response(self):
        boxes = [Box2D(0.0, 0.0, 0.4, 0.2), Box2D(0.5, 0.5, 1.0, 1.0)]
        anchors = anchors_from_gt(boxes, "dog")
        assert anchors.category == "dog"
        assert [(p.x, p.y) for p in anchors.points()] == [(0.2, 0.1), (0.75, 0.75)]
        assert all(r == 1.0 for _, r in anchors.anchors)

    def test_no_suppression_between_overlapping_boxes(self):
        b = Box2D(0.4, 0.4, 0.6, 0.6)
        anchors = anchors_from_gt([b, b, b], "cat")
        assert len(anchors) == 3

    def test_empty(self):
        assert len(anchors_from_gt([], "cat")) == 0


class TestPlantedRecovery:
    """A prototype-aligned block planted in an otherwise orthogonal grid must
    be recovered as the top anchor at the planted location."""

    @pytest.mark.parametrize("seed", range(10))
    def test_recovers_planted_center(self, seed):
        rng = rng_for(seed)
        d = 16
        basis = np.linalg.qr(rng.standard_normal((d, d)))[0].astype(np.float32)
        u, others = basis[0], basis[1:]
        h = w = 16
        coeff = rng.standard_normal((h, w, d - 1)).astype(np.float32)
        grid = np.einsum("hwk,kd->hwd", coeff, others)  # orthogonal to u everywhere
        r0, c0 = int(rng.integers(3, 13)), int(rng.integers(3, 13))
        grid[r0 - 1 : r0 + 2, c0 - 1 : c0 + 2] = u * 3.0
        prior = dense_prior(grid, proto_of(u), sigma=1.0)
        anchors = extract_anchors(prior, threshold=0.5)
        assert len(anchors) >= 1
        pt, resp = anchors.anchors[0]
        assert abs(pt.x - (c0 + 0.5) / w) <= 1.5 / w
        assert abs(pt.y - (r0 + 0.5) / h) <= 1.5 / h
