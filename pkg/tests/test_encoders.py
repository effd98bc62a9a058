"""Tests for the image and normal feature encoders."""

import pytest
import torch

from greaten.encoders import EncoderConfig, ImageEncoder, NormalEncoder

from conftest import gradcheck_norm_error, projection_loss

TINY = EncoderConfig(channel_plan=(6, 8, 12, 16), blocks_per_stage=1)


def expected_shapes(batch, plan, h, w):
    return {s: (batch, c, h // s, w // s) for s, c in zip((4, 8, 16, 32), plan)}


class TestImageEncoder:
    def test_level_shapes_for_default_plan(self):
        torch.manual_seed(0)
        enc = ImageEncoder()
        pyr = enc(torch.randn(2, 3, 64, 96))
        want = expected_shapes(2, (48, 64, 96, 128), 64, 96)
        got = {s: tuple(t.shape) for s, t in pyr.items()}
        assert got == want

    def test_all_zero_image_with_zero_biases_gives_zero_levels(self):
        torch.manual_seed(1)
        enc = ImageEncoder(TINY)
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                with torch.no_grad():
                    p.zero_()
        pyr = enc(torch.zeros(1, 3, 64, 96))
        for stride, level in pyr.items():
            assert torch.all(level == 0), f"stride {stride} not zero"

    def test_same_image_twice_gives_identical_pyramids(self):
        torch.manual_seed(2)
        enc = ImageEncoder(TINY)
        img = torch.randn(1, 3, 64, 96)
        a = enc(img)
        b = enc(img.clone())
        for stride in (4, 8, 16, 32):
            assert torch.equal(a[stride], b[stride])

    @pytest.mark.parametrize("shape", [(1, 3, 60, 96), (1, 3, 64, 90), (1, 3, 33, 33)])
    def test_input_not_divisible_by_32_rejected(self, shape):
        enc = ImageEncoder(TINY)
        with pytest.raises(ValueError):
            enc(torch.zeros(*shape))

    def test_wrong_channel_count_rejected(self):
        enc = ImageEncoder(TINY)
        with pytest.raises(ValueError):
            enc(torch.zeros(1, 4, 64, 64))

    def test_parameter_gradients_match_finite_differences(self):
        torch.manual_seed(3)
        enc = ImageEncoder(TINY).double()
        n_params = sum(p.numel() for p in enc.parameters())
        assert n_params <= 10_000
        img = torch.randn(1, 3, 32, 64, dtype=torch.float64)
        params = list(enc.parameters())

        def loss_fn():
            return projection_loss(enc(img))

        assert gradcheck_norm_error(loss_fn, params, module=enc) < 1e-4


class TestNormalEncoder:
    def test_level_shapes_match_channel_plan(self):
        torch.manual_seed(4)
        enc = NormalEncoder()
        pyr = enc(torch.randn(1, 3, 64, 96))
        want = expected_shapes(1, (48, 64, 96, 128), 64, 96)
        got = {s: tuple(t.shape) for s, t in pyr.items()}
        assert got == want

    def test_all_zero_input_with_zero_biases_gives_zero_levels(self):
        torch.manual_seed(5)
        enc = NormalEncoder(TINY)
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                with torch.no_grad():
                    p.zero_()
        pyr = enc(torch.zeros(1, 3, 64, 96))
        for stride, level in pyr.items():
            assert torch.all(level == 0), f"stride {stride} not zero"

    def test_constant_normal_field_is_spatially_constant_inside(self):
        torch.manual_seed(6)
        enc = NormalEncoder(TINY)
        field = torch.zeros(1, 3, 256, 256)
        field[:, 2] = 1.0
        pyr = enc(field)
        for stride, margin in ((4, 12), (8, 6)):
            level = pyr[stride]
            inner = level[:, :, margin:-margin, margin:-margin]
            spread = (inner.amax(dim=(2, 3)) - inner.amin(dim=(2, 3))).max()
            assert spread < 1e-5, f"stride {stride}: interior spread {spread}"

    def test_batch_permutation_permutes_outputs(self):
        torch.manual_seed(7)
        enc = NormalEncoder(TINY)
        batch = torch.randn(2, 3, 64, 64)
        fwd = enc(batch)
        swapped = enc(batch[[1, 0]])
        for stride in (4, 8, 16, 32):
            assert torch.allclose(fwd[stride][[1, 0]], swapped[stride], atol=1e-6)

    def test_input_not_divisible_by_32_rejected(self):
        enc = NormalEncoder(TINY)
        with pytest.raises(ValueError):
            enc(torch.zeros(1, 3, 48, 64))

    def test_parameter_gradients_match_finite_differences(self):
        torch.manual_seed(8)
        enc = NormalEncoder(TINY).double()
        n_params = sum(p.numel() for p in enc.parameters())
        assert n_params <= 10_000
        field = torch.randn(1, 3, 32, 64, dtype=torch.float64)
        params = list(enc.parameters())

        def loss_fn():
            return projection_loss(enc(field))

        assert gradcheck_norm_error(loss_fn, params, module=enc) < 1e-4
