"""Degeneracy study scaffolding: toy task, trace helpers, tiny end-to-end."""

import numpy as np
import pytest

from picnet import data
from picnet import degeneracy as G
from picnet import networks as N
from picnet.diffcore import Rng

TINY = dict(
    net=N.NetConfig(image_size=16, channels=1, ch=4, z_dim=8,
                    attention_size=8, n_scale=2),
    train_count=4, held_count=2, samples_per_condition=2, batch_size=2,
)


class TestToyTask:
    def test_every_condition_appears_exactly_once(self):
        task = G.toy_task(12, Rng(3))
        keys = {s.I_m.tobytes() for s in task}
        assert len(task) == 12 and len(keys) == 12

    def test_fixed_center_mask_shared_by_all(self):
        task = G.toy_task(5, Rng(3))
        ref = task[0].M
        assert all(np.array_equal(s.M, ref) for s in task)
        assert ref.shape == (1, 16, 16)
        assert int((ref == 0).sum()) == 64  # 8x8 center hole
        assert all(s.n == 64 for s in task)

    def test_seed_deterministic(self):
        a = G.toy_task(4, Rng(9))
        b = G.toy_task(4, Rng(9))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.I_g, y.I_g)

    def test_hole_admits_multiple_stripe_phase_completions(self):
        # For integer period p, the p integer phase shifts of one stripe
        # image give p distinct hole fillings from the same family.
        p = 4
        mask = data.make_mask(data.MaskSpec(kind="center"), 16, 16, Rng(0))
        hole = mask[0] == 0.0
        patches = [data.stripe_image(16, 0.0, p, 2.0 * np.pi * k / p)[0][hole]
                   for k in range(p)]
        for i in range(p):
            for j in range(i + 1, p):
                assert np.abs(patches[i] - patches[j]).max() > 0.5


class TestTraceHelpers:
    def test_moving_average_hand_case(self):
        got = G.moving_average([1.0, 2.0, 3.0, 4.0], 2)
        np.testing.assert_allclose(got, [1.0, 1.5, 2.5, 3.5])

    def test_window_one_is_identity(self):
        x = [3.0, 1.0, 2.0]
        np.testing.assert_allclose(G.moving_average(x, 1), x)

    def test_rejects_zero_window(self):
        with pytest.raises(ValueError):
            G.moving_average([1.0], 0)

    def test_monotone_decay_passes(self):
        trace = np.linspace(1.0, 0.2, 400)
        assert G.sigma_tail_nonincreasing(trace, window=100)

    def test_noisy_decay_passes_after_smoothing(self):
        r = np.random.default_rng(0)
        trace = np.linspace(1.0, 0.2, 400) + r.normal(0, 2e-4, 400)
        assert G.sigma_tail_nonincreasing(trace, window=100)

    def test_rising_tail_fails(self):
        trace = np.concatenate([np.linspace(1.0, 0.2, 200),
                                np.linspace(0.2, 0.8, 200)])
        assert not G.sigma_tail_nonincreasing(trace, window=100)


class TestRunVariant:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown variant"):
            G.run_variant("vae", 1, 1)

    @pytest.mark.parametrize("kind", G.VARIANTS)
    def test_tiny_budget_end_to_end(self, kind):
        r = G.run_variant(kind, 2, seed=1, **TINY)
        assert r.variant == kind and r.seed == 1
        assert len(r.sigma_trace) == 3  # init + one entry per step
        assert r.stable
        assert np.isfinite(r.diversity_masked) and r.diversity_masked >= 0
        assert np.isfinite(r.diversity_full) and r.diversity_full >= 0
        assert np.isfinite(r.mean_prior_sigma) and r.mean_prior_sigma >= 0

    def test_fixed_prior_sigma_is_one(self):
        r = G.run_variant("fixed_prior_cvae", 1, seed=2, **TINY)
        assert r.mean_prior_sigma == 1.0
        assert all(v == 1.0 for v in r.sigma_trace)

    def test_same_seed_reproduces(self):
        a = G.run_variant("cvae", 2, seed=3, **TINY)
        b = G.run_variant("cvae", 2, seed=3, **TINY)
        assert a.csv_row() == b.csv_row()
        assert a.sigma_trace == b.sigma_trace


class TestRunAll:
    def test_csv_shape_and_artifacts(self, tmp_path):
        rep = G.run_all(1, [1], out_dir=str(tmp_path), **TINY)
        lines = rep.csv_text.strip().splitlines()
        assert lines[0] == G.CSV_HEADER
        assert len(lines) == 1 + len(G.VARIANTS) * 1
        assert (tmp_path / "degeneracy.csv").read_text() == rep.csv_text
        assert (tmp_path / "degeneracy.md").exists()
        assert (tmp_path / "sigma_traces.csv").exists()
        assert rep.by("cvae", 1).variant == "cvae"
        assert set(rep.ordering_by_seed) == {1}
        assert "## Verdicts" in rep.markdown

    def test_rerun_bit_identical(self):
        a = G.run_all(1, [1], **TINY)
        b = G.run_all(1, [1], **TINY)
        assert a.csv_text == b.csv_text
        assert a.markdown == b.markdown

    def test_rejects_empty_seeds(self):
        with pytest.raises(ValueError, match="seed"):
            G.run_all(1, [])
