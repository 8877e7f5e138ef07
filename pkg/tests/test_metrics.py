"""Metric oracles: hand-computed values, symmetry, and ranking protocol."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picnet import metrics as M
from picnet import networks as N
from picnet.diffcore import Rng, ShapeError


def _img(vals):
    return np.asarray(vals, dtype=np.float64)


class TestL1:
    def test_identical_images(self):
        a = np.linspace(-1, 1, 12).reshape(1, 3, 4)
        assert M.l1(a, a) == 0.0

    def test_hand_value(self):
        a = _img([[0.0, 0.5], [-0.5, 1.0]])
        b = _img([[0.5, 0.5], [0.5, 0.0]])
        # diffs 0.5, 0, 1.0, 1.0 -> mean 0.625
        assert M.l1(a, b) == pytest.approx(0.625, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            M.l1(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_triangle_inequality(self, seed):
        r = np.random.default_rng(seed)
        a, b, c = r.normal(size=(3, 2, 4, 4))
        assert M.l1(a, c) <= M.l1(a, b) + M.l1(b, c) + 1e-12


class TestPsnr:
    def test_identical_hits_cap(self):
        a = np.linspace(-1, 1, 16).reshape(4, 4)
        assert M.psnr(a, a) == 100.0

    def test_mse_001_gives_20db(self):
        # [-1,1] offset 0.2 remaps to [0,1] offset 0.1 -> MSE 0.01 -> 20 dB
        a = np.zeros((4, 4))
        b = np.full((4, 4), 0.2)
        assert M.psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_symmetry(self):
        r = np.random.default_rng(7)
        a, b = r.uniform(-1, 1, size=(2, 1, 8, 8))
        assert M.psnr(a, b) == M.psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            M.psnr(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_in_range(self):
        a = np.full((4, 4), -1.0)
        b = np.full((4, 4), 1.0)  # worst case: MSE = 1 -> 0 dB boundary
        v = M.psnr(a, b)
        assert 0.0 <= v <= 100.0


class TestTv:
    def test_constant_image_is_zero(self):
        assert M.tv(np.full((1, 5, 5), 0.3)) == 0.0

    def test_hand_value(self):
        img = _img([[0.0, 1.0], [3.0, 6.0]])
        # horizontal |1-0|,|6-3| -> mean 2; vertical |3-0|,|6-1| -> mean 4
        assert M.tv(img) == pytest.approx(6.0, abs=1e-12)

    def test_channel_axis_ignored_in_diffs(self):
        img = np.stack([_img([[0.0, 1.0], [3.0, 6.0]])] * 3)
        assert M.tv(img) == pytest.approx(6.0, abs=1e-12)

    def test_nonnegative(self):
        r = np.random.default_rng(3)
        assert M.tv(r.normal(size=(1, 6, 6))) >= 0.0

    def test_too_small(self):
        with pytest.raises(ShapeError):
            M.tv(np.zeros((1, 1, 5)))


class TestDiversity:
    def test_identical_samples(self):
        s = np.zeros((1, 4, 4))
        mask = np.ones((1, 4, 4))
        mask[:, 1:3, 1:3] = 0.0
        assert M.diversity([s, s, s], mask) == (0.0, 0.0)

    def test_three_constant_images(self):
        mask = np.zeros((1, 2, 2))  # everything hidden
        samples = [np.full((1, 2, 2), v) for v in (0.0, 1.0, 3.0)]
        # pairwise l1: 1, 3, 2 -> mean 2
        full, masked = M.diversity(samples, mask)
        assert full == pytest.approx(2.0, abs=1e-12)
        assert masked == pytest.approx(2.0, abs=1e-12)

    def test_hole_only_difference_scales_by_pixel_ratio(self):
        mask = np.ones((1, 4, 4))
        mask[:, :2, :2] = 0.0  # n = 4 of N = 16
        a = np.zeros((1, 4, 4))
        b = np.zeros((1, 4, 4))
        b[:, :2, :2] = 1.0
        full, masked = M.diversity([a, b], mask)
        assert full == pytest.approx(masked * 4 / 16, abs=1e-12)
        assert masked == pytest.approx(1.0, abs=1e-12)

    def test_mask_broadcasts_over_channels(self):
        mask = np.ones((1, 2, 2))
        mask[0, 0, 0] = 0.0
        a = np.zeros((3, 2, 2))
        b = np.full((3, 2, 2), 2.0)
        full, masked = M.diversity([a, b], mask)
        assert full == pytest.approx(2.0) and masked == pytest.approx(2.0)

    def test_permutation_invariant(self):
        r = np.random.default_rng(5)
        samples = list(r.normal(size=(4, 1, 4, 4)))
        mask = np.ones((1, 4, 4))
        mask[:, 2:, 2:] = 0.0
        base = M.diversity(samples, mask)
        perm = M.diversity([samples[2], samples[0], samples[3], samples[1]], mask)
        assert base == pytest.approx(perm, abs=1e-12)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError, match=">= 2 samples"):
            M.diversity([np.zeros((1, 2, 2))], np.zeros((1, 2, 2)))

    def test_needs_hidden_pixels(self):
        s = np.zeros((1, 2, 2))
        with pytest.raises(ValueError, match="no hidden pixels"):
            M.diversity([s, s], np.ones((1, 2, 2)))


class TestRanking:
    def test_basic_topk(self):
        assert M.rank_scores([0.9, 0.1, 0.5], 2) == [0, 2]

    def test_stable_ties(self):
        assert M.rank_scores([0.5, 0.5, 0.5], 2) == [0, 1]

    def test_k_equals_count_is_score_sorted_permutation(self):
        scores = [0.3, 0.9, 0.1, 0.9]
        assert M.rank_scores(scores, 4) == [1, 3, 0, 2]

    def test_monotone_transform_invariance(self):
        r = np.random.default_rng(11)
        scores = r.normal(size=20)
        base = M.rank_scores(scores, 7)
        assert M.rank_scores(np.tanh(scores) * 3 + 1, 7) == base

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            M.rank_scores([1.0, 2.0], 3)
        with pytest.raises(ValueError):
            M.rank_scores([1.0, 2.0], 0)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            M.rank_scores([], 1)
        with pytest.raises(ValueError, match="no completions"):
            M.rank_samples(None, [], 1)

    def test_top_10_of_50_with_discriminator(self):
        cfg = N.NetConfig(image_size=16, channels=1, ch=4, z_dim=8,
                          attention_size=8, n_scale=2)
        disc = N.Discriminator(Rng(3), cfg)
        r = np.random.default_rng(0)
        comps = [r.uniform(-1, 1, size=(1, 16, 16)).astype(np.float32) for _ in range(50)]
        top = M.rank_samples(disc, comps, 10)
        assert len(top) == 10 and len(set(top)) == 10
        assert M.rank_samples(disc, comps, 10) == top  # deterministic
        # verify against direct scoring
        from picnet.diffcore import Tensor
        scores = [float(disc(Tensor(c[None]))[0].item()) for c in comps]
        assert top == M.rank_scores(scores, 10)


class TestReport:
    def test_csv_row_and_header(self):
        r = M.MetricsReport(l1=0.125, psnr=20.0, tv=1.5,
                            diversity_full=0.25, diversity_masked=0.5)
        assert M.CSV_HEADER.split(",")[0] == "name"
        assert r.csv_row("img_0") == "img_0,0.125,20,1.5,0.25,0.5"

    def test_table_is_aligned(self):
        rows = [("a", M.MetricsReport(0.1, 20.0, 1.0)),
                ("longer_name", M.MetricsReport(0.2, 30.0, 2.0))]
        table = M.format_table(rows)
        lines = table.splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("name")
        assert "longer_name" in lines[2]
