import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image, ImageOps

from aait.errors import DomainError, InvalidOperationError, UnsupportedOperationError
from aait.imgops import (AFFINE_OPS, COLOR_OPS, MAGNITUDE_MAPS, OperationKind, apply_operation,
                         finite_difference_check, gated_apply, relaxed_bernoulli)

SIGNED = [OperationKind.SHEAR_X, OperationKind.SHEAR_Y, OperationKind.TRANSLATE_X, OperationKind.TRANSLATE_Y,
          OperationKind.ROTATE]


def smooth_image(side=16, channels=3, dtype=torch.float64):
    yy, xx = torch.meshgrid(torch.linspace(-1, 1, side, dtype=dtype), torch.linspace(-1, 1, side, dtype=dtype),
                            indexing="ij")
    chans = [0.5 + 0.4 * torch.exp(-(xx**2 + yy**2) / (0.3 + 0.2 * c)) * torch.cos(1.5 * xx + c) for c in range(channels)]
    return torch.stack(chans).unsqueeze(0)


def pil_apply(op, images: torch.Tensor) -> torch.Tensor:
    """Run a PIL image operation on every 8-bit image of the batch."""
    out = []
    for img in images:
        arr = torch.round(img * 255).to(torch.uint8).permute(1, 2, 0).numpy()
        res = np.asarray(op(Image.fromarray(arr))).copy()
        out.append(torch.from_numpy(res).permute(2, 0, 1).float() / 255)
    return torch.stack(out)


def bilinear_oracle(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Per-pixel inverse warp with bilinear weights and zeros outside, written without torch."""
    h, w = img.shape
    out = np.zeros_like(img)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    for i in range(h):
        for j in range(w):
            p = np.array([j - cx, i - cy])
            sx, sy = matrix @ p + offset
            sx, sy = sx + cx, sy + cy
            x0, y0 = math.floor(sx), math.floor(sy)
            acc = 0.0
            for yy, wy in ((y0, 1 - (sy - y0)), (y0 + 1, sy - y0)):
                for xx, wx in ((x0, 1 - (sx - x0)), (x0 + 1, sx - x0)):
                    if 0 <= yy < h and 0 <= xx < w:
                        acc += wy * wx * img[yy, xx]
            out[i, j] = acc
    return out


class TestOperationKind:
    def test_families(self):
        assert all(k.family == "affine" for k in AFFINE_OPS)
        assert all(k.family == "color" for k in COLOR_OPS)
        assert {k.value for k in AFFINE_OPS} == {"ShearX", "ShearY", "TranslateX", "TranslateY", "Rotate", "Flip"}

    def test_magnitude_flags(self):
        no_mag = {OperationKind.FLIP, OperationKind.INVERT, OperationKind.AUTO_CONTRAST, OperationKind.EQUALIZE}
        for kind in OperationKind:
            assert kind.has_magnitude == (kind not in no_mag)

    def test_unknown_kind(self):
        with pytest.raises(InvalidOperationError):
            apply_operation("Cutout", 0.5, torch.rand(1, 3, 8, 8))


class TestApplyOperation:
    @pytest.mark.parametrize("kind", SIGNED)
    def test_midpoint_is_identity(self, kind):
        x = torch.rand(2, 3, 12, 12, generator=torch.Generator().manual_seed(1))
        assert torch.allclose(apply_operation(kind, 0.5, x), x, atol=1e-6)

    @pytest.mark.parametrize("kind", [OperationKind.CONTRAST, OperationKind.COLOR, OperationKind.BRIGHTNESS,
                                      OperationKind.SHARPNESS])
    def test_unit_factor_is_identity(self, kind):
        x = torch.rand(2, 3, 12, 12, generator=torch.Generator().manual_seed(2))
        m = MAGNITUDE_MAPS[kind]
        mu = (1.0 - m.lo) / (m.hi - m.lo)
        assert torch.allclose(apply_operation(kind, mu, x), x, atol=1e-6)

    def test_involutions(self):
        x = torch.rand(2, 3, 9, 9)
        assert torch.equal(apply_operation("Flip", None, apply_operation("Flip", None, x)), x)
        assert torch.equal(apply_operation("Flip", None, x), x.flip(-1))
        assert torch.allclose(apply_operation("Invert", None, apply_operation("Invert", None, x)), x)

    def test_posterize_full_depth_is_identity(self):
        x = torch.randint(0, 256, (2, 3, 8, 8)).float() / 255
        assert torch.equal(apply_operation("Posterize", 1.0, x), x)

    def test_rotate_matches_pixel_oracle(self):
        # mu = 0.75 maps to +15 degrees
        img = torch.zeros(1, 1, 5, 5, dtype=torch.float64)
        img[0, 0, 1, 3] = 1.0
        out = apply_operation("Rotate", 0.75, img)[0, 0].numpy()
        rad = math.radians(15.0)
        matrix = np.array([[math.cos(rad), -math.sin(rad)], [math.sin(rad), math.cos(rad)]])
        expected = bilinear_oracle(img[0, 0].numpy(), matrix, np.zeros(2))
        np.testing.assert_allclose(out, expected, atol=1e-5)

    @pytest.mark.parametrize("kind,mu", [("ShearX", 0.9), ("ShearY", 0.2), ("TranslateX", 0.7), ("TranslateY", 0.35)])
    def test_affine_ops_match_pixel_oracle(self, kind, mu):
        img = torch.rand(1, 1, 7, 6, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
        value = MAGNITUDE_MAPS[OperationKind.parse(kind)](mu)
        h, w = 7, 6
        matrix, offset = np.eye(2), np.zeros(2)
        if kind == "ShearX":
            matrix = np.array([[1.0, value], [0.0, 1.0]])
        elif kind == "ShearY":
            matrix = np.array([[1.0, 0.0], [value, 1.0]])
        elif kind == "TranslateX":
            offset = np.array([value * w, 0.0])
        else:
            offset = np.array([0.0, value * h])
        expected = bilinear_oracle(img[0, 0].numpy(), matrix, offset)
        np.testing.assert_allclose(apply_operation(kind, mu, img)[0, 0].numpy(), np.clip(expected, 0, 1), atol=1e-6)

    def test_integer_translation_is_a_shift(self):
        x = torch.rand(1, 3, 10, 10, dtype=torch.float64)
        mu = (0.3 + 0.45) / 0.9  # +3 pixels
        out = apply_operation("TranslateX", mu, x)
        assert torch.allclose(out[..., :7], x[..., 3:], atol=1e-9)
        assert torch.allclose(out[..., 7:], torch.zeros_like(out[..., 7:]))

    def test_magnitude_domain(self):
        with pytest.raises(DomainError):
            apply_operation("Rotate", 1.5, torch.rand(1, 3, 4, 4))
        with pytest.raises(DomainError):
            apply_operation("Rotate", -0.1, torch.rand(1, 3, 4, 4))

    def test_gradient_flows_to_magnitude_and_images(self):
        x = torch.rand(2, 3, 8, 8, requires_grad=True)
        mu = torch.tensor(0.7, requires_grad=True)
        apply_operation("Rotate", mu, x).sum().backward()
        assert x.grad is not None and mu.grad is not None and mu.grad != 0

    def test_per_image_independence(self):
        x = torch.rand(4, 3, 8, 8)
        perm = torch.tensor([2, 0, 3, 1])
        for kind in SIGNED:
            assert torch.allclose(apply_operation(kind, 0.8, x)[perm], apply_operation(kind, 0.8, x[perm]))

    @settings(max_examples=40, deadline=None)
    @given(kind=st.sampled_from(list(OperationKind)), mu=st.floats(0, 1), seed=st.integers(0, 2**16))
    def test_outputs_stay_in_unit_range(self, kind, mu, seed):
        x = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(seed))
        out = apply_operation(kind, mu, x)
        assert out.shape == x.shape
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


class TestStraightThrough:
    def test_posterize_forward_is_exact(self):
        x = torch.rand(2, 3, 8, 8)
        mu = torch.tensor(0.4, requires_grad=True)
        bits = round(MAGNITUDE_MAPS[OperationKind.POSTERIZE](0.4))
        shift = 8 - bits
        expected = ((torch.round(x * 255).to(torch.int64) >> shift) << shift).float() / 255
        out = apply_operation("Posterize", mu, x)
        assert torch.equal(out, expected)
        out.sum().backward()
        assert mu.grad is not None and torch.isfinite(mu.grad)

    @pytest.mark.parametrize("mu", [0.0, 0.3, 0.6, 0.7, 0.9, 1.0])
    def test_solarize_forward_matches_pil(self, mu):
        x = torch.randint(0, 256, (2, 3, 8, 8), generator=torch.Generator().manual_seed(0)).float() / 255
        m = torch.tensor(mu, requires_grad=True)
        level = round(float(m.detach()) * 255)  # the float32 magnitude, as the op sees it
        # PIL inverts values >= its threshold, so level + 1 flips exactly the values above level
        expected = pil_apply(lambda im: ImageOps.solarize(im, level + 1), x)
        out = apply_operation("Solarize", m, x)
        assert torch.equal(out, expected)
        out.sum().backward()
        assert m.grad is not None and torch.isfinite(m.grad)

    @pytest.mark.parametrize("mu", [0.0, 0.2, 0.5, 0.8, 1.0])
    def test_posterize_forward_matches_pil(self, mu):
        x = torch.randint(0, 256, (2, 3, 8, 8), generator=torch.Generator().manual_seed(1)).float() / 255
        bits = round(MAGNITUDE_MAPS[OperationKind.POSTERIZE](mu))
        expected = pil_apply(lambda im: ImageOps.posterize(im, bits), x)
        assert torch.equal(apply_operation("Posterize", torch.tensor(mu, requires_grad=True), x), expected)

    def test_equalize_forward_matches_pil(self):
        x = torch.randint(0, 200, (2, 3, 12, 12), generator=torch.Generator().manual_seed(2)).float() / 255
        assert torch.equal(apply_operation("Equalize", None, x), pil_apply(ImageOps.equalize, x))

    def test_discrete_ops_reject_finite_difference(self):
        with pytest.raises(UnsupportedOperationError):
            finite_difference_check("Posterize", 0.5, torch.rand(1, 3, 8, 8))
        with pytest.raises(UnsupportedOperationError):
            finite_difference_check("Flip", 0.5, torch.rand(1, 3, 8, 8))


class TestFiniteDifference:
    # bilinear sampling is piecewise linear in the sample position, so the
    # magnitudes avoid 0.5 where every sample sits exactly on a pixel centre
    def test_rotate(self):
        assert finite_difference_check("Rotate", 0.3, smooth_image(32), h=1e-3) < 1e-2

    def test_shear_y_random_image(self):
        x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(4))
        assert finite_difference_check("ShearY", 0.6, x, h=1e-3) < 1e-2

    def test_translate_constant_interior(self):
        x = torch.full((1, 3, 16, 16), 0.4, dtype=torch.float64)
        assert finite_difference_check("TranslateX", 0.5, x, h=1e-3, crop=4) == pytest.approx(0.0, abs=1e-9)

    @pytest.mark.parametrize("kind", ["Contrast", "Color", "Brightness", "Sharpness"])
    def test_colour_ops(self, kind):
        assert finite_difference_check(kind, 0.4, smooth_image(), h=1e-3) < 1e-2


class TestGatedApply:
    def test_closed_gate(self):
        x = torch.rand(3, 3, 8, 8)
        for _ in range(20):
            assert torch.equal(gated_apply("Rotate", 0.9, 0.0, 0.05, x, "attack"), x)

    def test_open_gate(self):
        x = torch.rand(3, 3, 8, 8)
        assert torch.equal(gated_apply("Rotate", 0.9, 1.0, 0.05, x, "attack"), apply_operation("Rotate", 0.9, x))

    def test_application_rate(self):
        g = torch.Generator().manual_seed(0)
        x = torch.rand(1, 1, 2, 2)
        fired = sum(not torch.equal(gated_apply("Flip", None, 0.5, 0.05, x, "attack", g), x) for _ in range(10000))
        assert abs(fired / 10000 - 0.5) <= 0.02

    def test_temperature_domain(self):
        with pytest.raises(DomainError):
            gated_apply("Rotate", 0.5, 0.5, 0.0, torch.rand(1, 3, 4, 4))

    def test_search_mode_has_probability_gradient(self):
        x = torch.rand(8, 3, 8, 8)
        p = torch.tensor(0.5, requires_grad=True)
        gated_apply("Rotate", 0.9, p, 0.5, x, "search", torch.Generator().manual_seed(0)).sum().backward()
        assert p.grad is not None and p.grad != 0

    def test_search_mode_flip_is_hard_forward(self):
        x = torch.rand(16, 3, 6, 6)
        p = torch.tensor(0.5, requires_grad=True)
        out = gated_apply("Flip", None, p, 0.05, x, "search", torch.Generator().manual_seed(3))
        for i in range(16):
            assert torch.allclose(out[i], x[i]) or torch.allclose(out[i], x[i].flip(-1))
        out.sum().backward()
        assert p.grad is not None

    def test_relaxed_bernoulli_mean(self):
        g = torch.Generator().manual_seed(0)
        s = relaxed_bernoulli(torch.tensor(0.3), 0.05, (20000,), g)
        assert abs(float((s > 0.5).float().mean()) - 0.3) < 0.02
