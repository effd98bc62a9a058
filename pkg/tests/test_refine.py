"""Tests for disparity refinement: lookup, GRU, upsampling, scale-shift."""

import numpy as np
import pytest
import torch

from conftest import gradcheck_norm_error, projection_loss
from greaten.refine import (
    ConvexUpsampler,
    ConvGRUCell,
    DisparityRefiner,
    ScaleShift,
    lookup_cost,
    stub_relative_depth,
)
from greaten.synthdata import SceneConfig, generate_scene


def lookup_oracle(volume, disparity, radius):
    """Scalar per-candidate interpolation, numpy loops only."""
    n_groups, n_d, h, w = volume.shape
    out = np.zeros(((2 * radius + 1) * n_groups, h, w), dtype=np.float64)
    for o in range(2 * radius + 1):
        for g in range(n_groups):
            for y in range(h):
                for x in range(w):
                    cand = disparity[y, x] + o - radius
                    if cand < 0 or cand > n_d - 1:
                        continue
                    lo = int(np.floor(cand))
                    hi = min(lo + 1, n_d - 1)
                    frac = cand - lo
                    out[o * n_groups + g, y, x] = (1 - frac) * volume[
                        g, lo, y, x
                    ] + frac * volume[g, hi, y, x]
    return out


class TestLookupCost:
    def test_integer_disparity_reproduces_direct_indexing(self):
        g = torch.Generator().manual_seed(0)
        volume = torch.randn((1, 2, 6, 3, 4), generator=g)
        disparity = torch.full((1, 1, 3, 4), 2.0)
        out = lookup_cost(volume, disparity, 0)
        assert torch.equal(out, volume[:, :, 2])

    def test_offset_blocks_are_ascending_candidates(self):
        g = torch.Generator().manual_seed(1)
        volume = torch.randn((1, 2, 6, 3, 4), generator=g)
        disparity = torch.full((1, 1, 3, 4), 2.0)
        out = lookup_cost(volume, disparity, 1)
        for block, d in enumerate([1, 2, 3]):
            assert torch.equal(out[:, 2 * block : 2 * block + 2], volume[:, :, d])

    def test_halfway_candidate_averages_neighbors(self):
        g = torch.Generator().manual_seed(2)
        volume = torch.randn((1, 3, 5, 2, 2), generator=g)
        disparity = torch.full((1, 1, 2, 2), 2.5)
        out = lookup_cost(volume, disparity, 0)
        want = 0.5 * volume[:, :, 2] + 0.5 * volume[:, :, 3]
        assert torch.allclose(out, want, atol=1e-7)

    def test_out_of_range_candidates_are_zero(self):
        g = torch.Generator().manual_seed(3)
        volume = torch.randn((1, 2, 4, 3, 3), generator=g)
        disparity = torch.zeros((1, 1, 3, 3))
        out = lookup_cost(volume, disparity, 2)
        assert torch.all(out[:, :4] == 0)  # offsets -2 and -1
        disparity = torch.full((1, 1, 3, 3), 3.0)
        out = lookup_cost(volume, disparity, 2)
        assert torch.all(out[:, 6:] == 0)  # offsets +1 and +2

    def test_matches_scalar_interpolation_oracle(self):
        rng = np.random.default_rng(7)
        volume = rng.standard_normal((2, 6, 4, 5))
        disparity = rng.uniform(-1.0, 6.5, size=(4, 5))
        got = lookup_cost(
            torch.from_numpy(volume)[None],
            torch.from_numpy(disparity)[None, None],
            2,
        )
        want = lookup_oracle(volume, disparity, 2)
        np.testing.assert_allclose(got[0].numpy(), want, atol=1e-6, rtol=0)

    def test_nonfinite_disparity_rejected(self):
        volume = torch.zeros((1, 2, 4, 3, 3))
        disparity = torch.full((1, 1, 3, 3), float("nan"))
        with pytest.raises(ValueError):
            lookup_cost(volume, disparity, 1)

    def test_mismatched_disparity_shape_rejected(self):
        volume = torch.zeros((1, 2, 4, 3, 3))
        with pytest.raises(ValueError):
            lookup_cost(volume, torch.zeros((1, 1, 3, 4)), 1)


class TestScaleShift:
    def _maps(self, seed, shape=(1, 1, 5, 7)):
        g = torch.Generator().manual_seed(seed)
        return torch.rand(shape, generator=g) * 10.0

    def test_fresh_block_passes_prior_through(self):
        torch.manual_seed(0)
        ss = ScaleShift()
        d0 = self._maps(1)
        d_rel = self._maps(2)
        with torch.no_grad():
            assert torch.equal(ss(d0, d_rel), d_rel)

    def test_zero_scale_ignores_prior(self):
        torch.manual_seed(0)
        ss = ScaleShift()
        with torch.no_grad():
            ss.head.bias.copy_(torch.tensor([0.0, 3.5]))
            out = ss(self._maps(3), self._maps(4))
        assert torch.all(out == 3.5)

    def test_forced_affine_inverse_recovers_ground_truth(self):
        torch.manual_seed(0)
        ss = ScaleShift()
        d_gt = self._maps(5)
        d_rel = 2.0 * d_gt + 3.0
        with torch.no_grad():
            ss.head.bias.copy_(torch.tensor([0.5, -1.5]))
            out = ss(d_gt, d_rel)
        assert torch.allclose(out, d_gt, atol=1e-6)

    def test_global_collapse_uses_spatial_means(self):
        torch.manual_seed(11)
        ss = ScaleShift(hidden_channels=8, collapse_to_global=True)
        with torch.no_grad():
            ss.head.weight.normal_(0, 0.5)
        d0, d_rel = self._maps(6), self._maps(7)
        with torch.no_grad():
            out, scale, shift = ss(d0, d_rel, return_params=True)
            params = ss.head(torch.tanh(ss.pre(torch.cat([d0, d_rel], dim=1))))
        assert scale.shape == (1, 1, 1, 1)
        assert torch.allclose(scale, params[:, 0:1].mean(), atol=1e-6)
        assert torch.allclose(out, scale * d_rel + shift, atol=1e-6)

    def test_mismatched_shapes_rejected(self):
        ss = ScaleShift()
        with pytest.raises(ValueError):
            ss(torch.zeros((1, 1, 4, 4)), torch.zeros((1, 1, 4, 5)))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(21)
        ss = ScaleShift(hidden_channels=6).double()
        with torch.no_grad():
            ss.head.weight.normal_(0, 0.3)
        d0 = torch.rand((1, 1, 5, 6), dtype=torch.float64, requires_grad=True)
        d_rel = torch.rand((1, 1, 5, 6), dtype=torch.float64, requires_grad=True)
        tensors = list(ss.parameters()) + [d0, d_rel]
        err = gradcheck_norm_error(
            lambda: projection_loss(ss(d0, d_rel)), tensors, module=ss
        )
        assert err < 1e-4


class TestConvGRUCell:
    def _state(self, seed, hidden_channels=4, input_channels=6, h=5, w=7):
        g = torch.Generator().manual_seed(seed)
        hidden = torch.rand((1, hidden_channels, h, w), generator=g) * 1.6 - 0.8
        x = torch.randn((1, input_channels, h, w), generator=g)
        return hidden, x

    def test_closed_update_gate_keeps_hidden(self):
        torch.manual_seed(0)
        cell = ConvGRUCell(4, 6)
        hidden, x = self._state(1)
        with torch.no_grad():
            cell.update_gate.weight.zero_()
            cell.update_gate.bias.fill_(-20.0)
            out = cell(hidden, x)
        assert float((out - hidden).abs().max()) < 1e-7

    def test_open_update_gate_replaces_hidden_with_candidate(self):
        torch.manual_seed(0)
        cell = ConvGRUCell(4, 6)
        hidden, x = self._state(2)
        with torch.no_grad():
            cell.update_gate.weight.zero_()
            cell.update_gate.bias.fill_(20.0)
            out = cell(hidden, x)
            r = torch.sigmoid(cell.reset_gate(torch.cat([hidden, x], dim=1)))
            want = torch.tanh(cell.candidate(torch.cat([r * hidden, x], dim=1)))
        assert float((out - want).abs().max()) < 1e-7

    def test_hidden_stays_strictly_inside_unit_interval(self):
        torch.manual_seed(5)
        cell = ConvGRUCell(4, 6)
        hidden, _ = self._state(3)
        g = torch.Generator().manual_seed(9)
        with torch.no_grad():
            for _ in range(10):
                x = torch.randn((1, 6, 5, 7), generator=g) * 3.0
                hidden = cell(hidden, x)
                assert float(hidden.abs().max()) < 1.0


class TestDisparityRefiner:
    def _refiner(self, seed=0):
        torch.manual_seed(seed)
        return DisparityRefiner(
            fuse_channels=4,
            n_groups=2,
            hidden_channels=4,
            context_channels=4,
            motion_channels=4,
            lookup_radius=1,
        )

    def _inputs(self, seed, b=1, h=6, w=8, n_d=5):
        g = torch.Generator().manual_seed(seed)
        volume = torch.randn((b, 2, n_d, h, w), generator=g)
        d0 = torch.rand((b, 1, h, w), generator=g) * (n_d - 1)
        f_fuse = torch.randn((b, 4, h, w), generator=g)
        return volume, d0, f_fuse

    def test_fresh_update_head_produces_zero_delta(self):
        refiner = self._refiner()
        volume, d0, f_fuse = self._inputs(1)
        with torch.no_grad():
            state = refiner.init_state(f_fuse, d0)
            cost = lookup_cost(volume, d0, refiner.lookup_radius)
            new_state, delta = refiner.gru_step(state, cost)
        assert torch.all(delta == 0)
        assert torch.equal(new_state.disparity, d0)

    def test_initial_hidden_state_is_bounded(self):
        refiner = self._refiner(3)
        _, d0, f_fuse = self._inputs(4)
        with torch.no_grad():
            state = refiner.init_state(f_fuse, d0)
        assert float(state.hidden.abs().max()) < 1.0

    def test_single_iteration_sequence_layout(self):
        refiner = self._refiner(5)
        volume, d0, f_fuse = self._inputs(6)
        with torch.no_grad():
            seq = refiner(volume, d0, f_fuse, n_iters=1)
        assert len(seq.iterates) == 1
        assert seq.metric is None
        assert seq.initial.shape == (1, 1, 24, 32)
        assert seq.final.shape == (1, 1, 24, 32)

    def test_metric_prior_recorded_and_used_for_initialization(self):
        refiner = self._refiner(7)
        volume, d0, f_fuse = self._inputs(8)
        d_met = d0 * 0.5 + 1.0
        with torch.no_grad():
            seq = refiner(volume, d0, f_fuse, n_iters=2, d_met=d_met)
        assert seq.metric is not None
        # The zero-initialized update head leaves the metric prior untouched.
        for it in seq.iterates:
            assert torch.equal(it, seq.metric)
        assert not torch.equal(seq.metric, seq.initial)

    def test_zeroed_update_head_gives_constant_sequence(self):
        refiner = self._refiner(9)
        volume, d0, f_fuse = self._inputs(10)
        with torch.no_grad():
            seq = refiner(volume, d0, f_fuse, n_iters=4)
        for it in seq.iterates:
            assert torch.equal(it, seq.initial)

    def test_perturbed_update_head_actually_moves_the_sequence(self):
        refiner = self._refiner(11)
        volume, d0, f_fuse = self._inputs(12)
        with torch.no_grad():
            refiner.delta_head[-1].weight.normal_(0, 0.5)
            refiner.delta_head[-1].bias.fill_(0.3)
            seq = refiner(volume, d0, f_fuse, n_iters=2)
        assert not torch.equal(seq.iterates[0], seq.initial)
        assert not torch.equal(seq.iterates[1], seq.iterates[0])

    def test_zero_iterations_rejected(self):
        refiner = self._refiner()
        volume, d0, f_fuse = self._inputs(13)
        with pytest.raises(ValueError):
            refiner(volume, d0, f_fuse, n_iters=0)

    def test_gru_step_gradients_match_finite_differences(self):
        refiner = self._refiner(15).double()
        g = torch.Generator().manual_seed(16)
        h, w = 6, 8
        volume = torch.randn((1, 2, 5, h, w), generator=g, dtype=torch.float64)
        volume.requires_grad_(True)
        hidden = (
            torch.rand((1, 4, h, w), generator=g, dtype=torch.float64) * 1.6 - 0.8
        ).requires_grad_(True)
        context = torch.randn(
            (1, 4, h, w), generator=g, dtype=torch.float64
        ).requires_grad_(True)
        # Keep candidates well away from integer lattice and range edges so
        # the interpolation cell is stable under the probe step.
        disparity = (
            torch.randint(1, 3, (1, 1, h, w), generator=g).double()
            + torch.rand((1, 1, h, w), generator=g, dtype=torch.float64) * 0.6
            + 0.2
        ).requires_grad_(True)

        def loss():
            from greaten.refine import RefinerState

            state = RefinerState(hidden=hidden, context=context, disparity=disparity)
            cost = lookup_cost(volume, disparity, refiner.lookup_radius)
            new_state, delta = refiner.gru_step(state, cost)
            return projection_loss([new_state.hidden, new_state.disparity])

        tensors = (
            list(refiner.gru.parameters())
            + list(refiner.motion_encoder.parameters())
            + list(refiner.delta_head.parameters())
            + [volume, hidden, context, disparity]
        )
        err = gradcheck_norm_error(loss, tensors, module=refiner)
        assert err < 1e-4


class TestConvexUpsampler:
    def test_constant_field_scales_by_four(self):
        torch.manual_seed(0)
        up = ConvexUpsampler(guide_channels=3)
        d = torch.full((1, 1, 3, 4), 2.5)
        g = torch.Generator().manual_seed(1)
        guide = torch.randn((1, 3, 3, 4), generator=g)
        with torch.no_grad():
            out = up(d, guide)
        assert out.shape == (1, 1, 12, 16)
        assert float((out - 10.0).abs().max()) < 1e-5

    def test_center_one_hot_weights_give_nearest_neighbor(self):
        torch.manual_seed(0)
        up = ConvexUpsampler(guide_channels=2, hidden_channels=4)
        with torch.no_grad():
            for layer in (up.weight_head[0], up.weight_head[2]):
                layer.weight.zero_()
                layer.bias.zero_()
            bias = up.weight_head[2].bias.view(9, 16)
            bias.fill_(-40.0)
            bias[4] = 40.0
        g = torch.Generator().manual_seed(2)
        d = torch.rand((1, 1, 3, 4), generator=g) * 8.0 + 1.0
        guide = torch.randn((1, 2, 3, 4), generator=g)
        with torch.no_grad():
            out = up(d, guide)
        want = 4.0 * d.repeat_interleave(4, dim=2).repeat_interleave(4, dim=3)
        assert torch.allclose(out, want, atol=1e-6)

    def test_output_bounded_by_coarse_neighborhood_extrema(self):
        torch.manual_seed(3)
        up = ConvexUpsampler(guide_channels=2)
        g = torch.Generator().manual_seed(4)
        d = torch.rand((1, 1, 3, 4), generator=g) * 10.0
        guide = torch.randn((1, 2, 3, 4), generator=g) * 2.0
        with torch.no_grad():
            out = up(d, guide)[0, 0].numpy()
        coarse = d[0, 0].numpy()
        padded = np.pad(coarse, 1, mode="edge")
        for fy in range(out.shape[0]):
            for fx in range(out.shape[1]):
                cy, cx = fy // 4, fx // 4
                window = padded[cy : cy + 3, cx : cx + 3]
                assert out[fy, fx] >= 4.0 * window.min() - 1e-5
                assert out[fy, fx] <= 4.0 * window.max() + 1e-5

    def test_mismatched_guide_rejected(self):
        up = ConvexUpsampler(guide_channels=2)
        with pytest.raises(ValueError):
            up(torch.zeros((1, 1, 3, 4)), torch.zeros((1, 2, 3, 5)))


class TestStubRelativeDepth:
    def _sample(self, seed=0):
        return generate_scene(
            SceneConfig(height=96, width=160, max_disparity=32, seed=seed)
        )

    def test_identity_parameters_reproduce_ground_truth(self):
        sample = self._sample()
        rng = np.random.default_rng(0)
        d_rel = stub_relative_depth(
            sample, rng, a_range=(1.0, 1.0), b_range=(0.0, 0.0), eps=0.0
        )
        np.testing.assert_array_equal(d_rel, sample.disparity_gt)

    def test_pure_affine_distortion_is_exactly_recoverable(self):
        sample = self._sample(1)
        rng = np.random.default_rng(1)
        d_rel = stub_relative_depth(
            sample, rng, a_range=(0.5, 0.5), b_range=(2.0, 2.0), eps=0.0
        )
        want = (0.5 * sample.disparity_gt.astype(np.float64) + 2.0).astype(np.float32)
        np.testing.assert_array_equal(d_rel, want)

    def test_noisy_prior_stays_strongly_correlated(self):
        for seed in range(10):
            sample = self._sample(seed + 10)
            rng = np.random.default_rng(seed)
            d_rel = stub_relative_depth(sample, rng, eps=0.1)
            valid = sample.valid_mask.astype(bool)
            corr = np.corrcoef(
                d_rel[valid].astype(np.float64),
                sample.disparity_gt[valid].astype(np.float64),
            )[0, 1]
            assert corr > 0.95
