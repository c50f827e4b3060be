"""Differentiable image operations.

Every operation takes a batch of images ``(N, C, H, W)`` with values in
``[0, 1]`` and a normalized magnitude in ``[0, 1]`` and returns a batch of the
same shape.  Gradients flow to both the images and the magnitude (when the
operation has one).  Posterize and Solarize are straight-through: the forward
pass is the exact discrete operation, the backward pass differentiates a
sigmoid-relaxed surrogate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch
import torch.nn.functional as F

from .errors import DomainError, InvalidOperationError, UnsupportedOperationError

Magnitude = Union[float, torch.Tensor]

# sharpness of the sigmoid relaxations used in the backward pass
SOLARIZE_TAU = 0.05
POSTERIZE_TAU = 0.1


class OperationKind(enum.Enum):
    SHEAR_X = "ShearX"
    SHEAR_Y = "ShearY"
    TRANSLATE_X = "TranslateX"
    TRANSLATE_Y = "TranslateY"
    ROTATE = "Rotate"
    FLIP = "Flip"
    SOLARIZE = "Solarize"
    POSTERIZE = "Posterize"
    INVERT = "Invert"
    CONTRAST = "Contrast"
    COLOR = "Color"
    BRIGHTNESS = "Brightness"
    SHARPNESS = "Sharpness"
    AUTO_CONTRAST = "AutoContrast"
    EQUALIZE = "Equalize"

    @property
    def family(self) -> str:
        return "affine" if self in AFFINE_OPS else "color"

    @property
    def has_magnitude(self) -> bool:
        return self not in _NO_MAGNITUDE

    @classmethod
    def parse(cls, value) -> "OperationKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise InvalidOperationError(f"unknown operation {value!r}") from None


AFFINE_OPS = (
    OperationKind.SHEAR_X,
    OperationKind.SHEAR_Y,
    OperationKind.TRANSLATE_X,
    OperationKind.TRANSLATE_Y,
    OperationKind.ROTATE,
    OperationKind.FLIP,
)
COLOR_OPS = tuple(k for k in OperationKind if k not in AFFINE_OPS)
_NO_MAGNITUDE = frozenset(
    {OperationKind.FLIP, OperationKind.INVERT, OperationKind.AUTO_CONTRAST, OperationKind.EQUALIZE}
)


@dataclass(frozen=True)
class MagnitudeMap:
    """Affine map from a normalized magnitude in [0, 1] to an operation argument."""

    kind: OperationKind
    lo: float
    hi: float
    discretize: bool = False

    def __call__(self, mu):
        return self.lo + (self.hi - self.lo) * mu

    def level(self, mu: float) -> float:
        """Discrete argument actually used by the exact forward pass."""
        value = self(float(mu.detach()) if torch.is_tensor(mu) else float(mu))
        if self.kind is OperationKind.POSTERIZE:
            return float(round(value))
        if self.kind is OperationKind.SOLARIZE:
            return round(value * 255.0) / 255.0
        return value


MAGNITUDE_MAPS = {
    OperationKind.SHEAR_X: MagnitudeMap(OperationKind.SHEAR_X, -0.3, 0.3),
    OperationKind.SHEAR_Y: MagnitudeMap(OperationKind.SHEAR_Y, -0.3, 0.3),
    OperationKind.TRANSLATE_X: MagnitudeMap(OperationKind.TRANSLATE_X, -0.45, 0.45),
    OperationKind.TRANSLATE_Y: MagnitudeMap(OperationKind.TRANSLATE_Y, -0.45, 0.45),
    OperationKind.ROTATE: MagnitudeMap(OperationKind.ROTATE, -30.0, 30.0),
    OperationKind.SOLARIZE: MagnitudeMap(OperationKind.SOLARIZE, 0.0, 1.0, discretize=True),
    OperationKind.POSTERIZE: MagnitudeMap(OperationKind.POSTERIZE, 1.0, 8.0, discretize=True),
    OperationKind.CONTRAST: MagnitudeMap(OperationKind.CONTRAST, 0.1, 1.9),
    OperationKind.COLOR: MagnitudeMap(OperationKind.COLOR, 0.1, 1.9),
    OperationKind.BRIGHTNESS: MagnitudeMap(OperationKind.BRIGHTNESS, 0.1, 1.9),
    OperationKind.SHARPNESS: MagnitudeMap(OperationKind.SHARPNESS, 0.1, 1.9),
}


# ---------------------------------------------------------------------------
# affine family


def affine_warp(images: torch.Tensor, matrix: torch.Tensor, offset: torch.Tensor) -> torch.Tensor:
    """Inverse-warp ``images`` with bilinear sampling and zero padding.

    The output pixel at centered pixel coordinates ``p = (x, y)`` (x to the
    right, y downwards, origin at the image center) takes the value of the
    input at ``matrix @ p + offset``.  ``matrix`` is ``(2, 2)`` and ``offset``
    is ``(2,)``; both may carry gradients.
    """
    n, _, h, w = images.shape
    # pixel -> normalized coordinates for align_corners=False: u = 2 x / W
    sx, sy = 2.0 / w, 2.0 / h
    theta = torch.stack(
        [
            torch.stack([matrix[0, 0], matrix[0, 1] * (sx / sy), offset[0] * sx]),
            torch.stack([matrix[1, 0] * (sy / sx), matrix[1, 1], offset[1] * sy]),
        ]
    )
    grid = F.affine_grid(theta.unsqueeze(0).expand(n, 2, 3), list(images.shape), align_corners=False)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _affine_params(kind: OperationKind, value: torch.Tensor, h: int, w: int):
    one, zero = torch.ones_like(value), torch.zeros_like(value)
    offset = torch.stack([zero, zero])
    if kind is OperationKind.SHEAR_X:
        matrix = torch.stack([torch.stack([one, value]), torch.stack([zero, one])])
    elif kind is OperationKind.SHEAR_Y:
        matrix = torch.stack([torch.stack([one, zero]), torch.stack([value, one])])
    elif kind is OperationKind.TRANSLATE_X:
        matrix = torch.stack([torch.stack([one, zero]), torch.stack([zero, one])])
        offset = torch.stack([value * w, zero])
    elif kind is OperationKind.TRANSLATE_Y:
        matrix = torch.stack([torch.stack([one, zero]), torch.stack([zero, one])])
        offset = torch.stack([zero, value * h])
    else:  # Rotate, counter-clockwise as displayed
        rad = value * (math.pi / 180.0)
        c, s = torch.cos(rad), torch.sin(rad)
        matrix = torch.stack([torch.stack([c, -s]), torch.stack([s, c])])
    return matrix, offset


# ---------------------------------------------------------------------------
# color family helpers


def _grayscale(images: torch.Tensor) -> torch.Tensor:
    if images.shape[1] == 3:
        weights = images.new_tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
        return (images * weights).sum(dim=1, keepdim=True)
    return images.mean(dim=1, keepdim=True)


def _blend(degenerate: torch.Tensor, images: torch.Tensor, factor) -> torch.Tensor:
    return degenerate + factor * (images - degenerate)


def _smooth(images: torch.Tensor) -> torch.Tensor:
    c = images.shape[1]
    kernel = images.new_tensor([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0
    kernel = kernel.expand(c, 1, 3, 3)
    blurred = F.conv2d(images, kernel, padding=1, groups=c)
    # PIL leaves the one-pixel border untouched
    out = images.clone()
    out[..., 1:-1, 1:-1] = blurred[..., 1:-1, 1:-1]
    return out


def _auto_contrast(images: torch.Tensor) -> torch.Tensor:
    lo = images.amin(dim=(2, 3), keepdim=True)
    hi = images.amax(dim=(2, 3), keepdim=True)
    span = hi - lo
    flat = span <= 0
    scaled = (images - lo) / torch.where(flat, torch.ones_like(span), span)
    return torch.where(flat, images, scaled)


def _equalize_exact(images: torch.Tensor) -> torch.Tensor:
    """PIL-style histogram equalization on the 8-bit grid, per image and channel."""
    levels = torch.round(images.detach() * 255.0).clamp(0, 255).to(torch.long)
    out = torch.empty_like(images)
    n, c = images.shape[:2]
    for i in range(n):
        for j in range(c):
            v = levels[i, j]
            hist = torch.bincount(v.flatten(), minlength=256)
            nonzero = hist[hist > 0]
            step = int((int(hist.sum()) - int(nonzero[-1])) // 255)
            if step == 0:
                out[i, j] = images[i, j]
                continue
            cum = torch.cumsum(hist, 0) - hist
            lut = torch.clamp((cum + step // 2) // step, max=255)
            out[i, j] = lut[v].to(images.dtype) / 255.0
    return out


def _posterize_exact(images: torch.Tensor, bits: float) -> torch.Tensor:
    shift = 8 - int(bits)
    if shift <= 0:
        return images.clone()
    step = float(2**shift)
    v = torch.round(images * 255.0)
    return torch.floor(v / step) * step / 255.0


def _soft_floor(z: torch.Tensor, tau: float) -> torch.Tensor:
    n = torch.round(z).detach()
    return (n - 1.0) + torch.sigmoid((z - n) / tau)


def _posterize_surrogate(images: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    bits = MAGNITUDE_MAPS[OperationKind.POSTERIZE](mu)
    step = torch.pow(2.0, 8.0 - bits)
    return _soft_floor(images * 255.0 / step, POSTERIZE_TAU) * step / 255.0


def _solarize_exact(images: torch.Tensor, threshold: float) -> torch.Tensor:
    # on the 8-bit grid so float rounding never decides which pixels flip
    v = torch.round(images * 255.0)
    level = round(float(threshold) * 255.0)
    return torch.where(v > level, 255.0 - v, v) / 255.0


def _solarize_surrogate(images: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    threshold = MAGNITUDE_MAPS[OperationKind.SOLARIZE](mu)
    gate = torch.sigmoid((images - threshold) / SOLARIZE_TAU)
    return images + gate * (1.0 - 2.0 * images)


class _StraightThrough(torch.autograd.Function):
    """Forward: ``exact(x, mu)``; backward: gradient of ``surrogate(x, mu)``."""

    @staticmethod
    def forward(ctx, images, mu, exact, surrogate):
        ctx.save_for_backward(images, mu)
        ctx.surrogate = surrogate
        with torch.no_grad():
            return exact(images, mu)

    @staticmethod
    def backward(ctx, grad_output):
        images, mu = ctx.saved_tensors
        need_x, need_mu = ctx.needs_input_grad[:2]
        if ctx.surrogate is None:
            return (grad_output if need_x else None), None, None, None
        with torch.enable_grad():
            x = images.detach().requires_grad_(True)
            m = mu.detach().requires_grad_(True)
            y = ctx.surrogate(x, m)
            gx, gm = torch.autograd.grad(y, (x, m), grad_output, allow_unused=True)
        if gm is None:
            gm = torch.zeros_like(mu)
        return (gx if need_x else None), (gm if need_mu else None), None, None


def straight_through(
    exact: Callable, surrogate: Optional[Callable], images: torch.Tensor, mu: torch.Tensor
) -> torch.Tensor:
    """Exact op forward, surrogate gradient backward.

    With ``surrogate=None`` the backward pass is the identity on the images.
    """
    return _StraightThrough.apply(images, mu, exact, surrogate)


# ---------------------------------------------------------------------------
# public API


def _check_magnitude(magnitude: Magnitude, like: torch.Tensor) -> torch.Tensor:
    mu = magnitude if isinstance(magnitude, torch.Tensor) else torch.tensor(float(magnitude), dtype=like.dtype)
    mu = mu.to(dtype=like.dtype, device=like.device).reshape(())
    value = float(mu.detach())
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise DomainError(f"magnitude must lie in [0, 1], got {value}")
    return mu


def apply_operation(kind, magnitude: Magnitude, images: torch.Tensor) -> torch.Tensor:
    """Apply one operation at normalized ``magnitude`` to a batch of images."""
    kind = OperationKind.parse(kind)
    mu = _check_magnitude(0.0 if magnitude is None else magnitude, images)
    h, w = images.shape[-2:]

    if kind is OperationKind.FLIP:
        return torch.flip(images, dims=(-1,))
    if kind is OperationKind.INVERT:
        return 1.0 - images
    if kind is OperationKind.AUTO_CONTRAST:
        return _auto_contrast(images).clamp(0.0, 1.0)
    if kind is OperationKind.EQUALIZE:
        return straight_through(lambda x, _: _equalize_exact(x), None, images, mu)

    mapping = MAGNITUDE_MAPS[kind]
    if kind is OperationKind.POSTERIZE:
        bits = mapping.level(mu)
        out = straight_through(lambda x, _: _posterize_exact(x, bits), _posterize_surrogate, images, mu)
        return out.clamp(0.0, 1.0)
    if kind is OperationKind.SOLARIZE:
        threshold = mapping.level(mu)
        out = straight_through(lambda x, _: _solarize_exact(x, threshold), _solarize_surrogate, images, mu)
        return out.clamp(0.0, 1.0)

    value = mapping(mu)
    if kind in AFFINE_OPS:
        matrix, offset = _affine_params(kind, value, h, w)
        out = affine_warp(images, matrix, offset)
    elif kind is OperationKind.CONTRAST:
        mean = _grayscale(images).mean(dim=(1, 2, 3), keepdim=True)
        out = _blend(mean, images, value)
    elif kind is OperationKind.COLOR:
        out = _blend(_grayscale(images), images, value)
    elif kind is OperationKind.BRIGHTNESS:
        out = images * value
    elif kind is OperationKind.SHARPNESS:
        out = _blend(_smooth(images), images, value)
    else:  # pragma: no cover - exhaustive above
        raise InvalidOperationError(f"unhandled operation {kind}")
    return out.clamp(0.0, 1.0)


def relaxed_bernoulli(probability: torch.Tensor, temperature: float, shape, generator=None) -> torch.Tensor:
    """Reparameterized sample from a binary concrete distribution."""
    u = torch.rand(shape, generator=generator, dtype=probability.dtype, device=probability.device)
    u = u.clamp(1e-6, 1.0 - 1e-6)
    eps = 1e-6
    logit = torch.log(probability + eps) - torch.log(1.0 - probability + eps)
    return torch.sigmoid((logit + torch.log(u) - torch.log1p(-u)) / temperature)


def gated_apply(
    kind,
    magnitude: Magnitude,
    probability: Magnitude,
    temperature: float,
    images: torch.Tensor,
    mode: str = "attack",
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Apply an operation behind a Bernoulli gate.

    ``attack`` mode draws one hard gate for the whole batch.  ``search`` mode
    draws one relaxed (concrete) gate per image and blends the transformed and
    original images so that the output is differentiable in ``probability``.
    The Flip gate is straight-through in search mode: hard in the forward pass,
    relaxed in the backward pass.
    """
    kind = OperationKind.parse(kind)
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    p = probability if isinstance(probability, torch.Tensor) else torch.tensor(float(probability), dtype=images.dtype)
    p = p.to(dtype=images.dtype, device=images.device).reshape(())
    pv = float(p.detach())
    if not 0.0 <= pv <= 1.0:
        raise DomainError(f"probability must lie in [0, 1], got {pv}")

    if mode == "attack":
        u = float(torch.rand((), generator=generator))
        if u < pv:
            return apply_operation(kind, magnitude, images)
        return images
    if mode != "search":
        raise DomainError(f"mode must be 'search' or 'attack', got {mode!r}")

    gate = relaxed_bernoulli(p, temperature, (images.shape[0], 1, 1, 1), generator)
    if kind is OperationKind.FLIP:
        gate = (gate > 0.5).to(gate.dtype) + gate - gate.detach()
    transformed = apply_operation(kind, magnitude, images)
    return gate * transformed + (1.0 - gate) * images


def _probe_weights(shape, dtype) -> torch.Tensor:
    h, w = shape[-2:]
    yy = torch.arange(h, dtype=dtype).view(-1, 1)
    xx = torch.arange(w, dtype=dtype).view(1, -1)
    return 1.0 + 0.5 * torch.sin(0.7 * xx + 0.3) * torch.cos(0.5 * yy - 0.2)


def finite_difference_check(kind, magnitude: float, images: torch.Tensor, h: float = 1e-3, crop: int = 0) -> float:
    """Max deviation between autograd and central-difference magnitude gradients.

    The scalar functional is a fixed smooth weighting of the output pixels,
    averaged over the (optionally ``crop``-trimmed) image area.  Computation is
    in float64.
    """
    kind = OperationKind.parse(kind)
    if not kind.has_magnitude or MAGNITUDE_MAPS[kind].discretize:
        raise UnsupportedOperationError(f"{kind.value} has no continuous magnitude")
    if not (0.0 <= magnitude - h and magnitude + h <= 1.0):
        raise DomainError("magnitude +/- h must stay inside [0, 1]")

    x = images.detach().to(torch.float64)
    weights = _probe_weights(x.shape, torch.float64)

    def functional(mu):
        out = apply_operation(kind, mu, x)
        if crop:
            out = out[..., crop:-crop, crop:-crop]
            wts = weights[crop:-crop, crop:-crop]
        else:
            wts = weights
        return (out * wts).mean()

    mu = torch.tensor(float(magnitude), dtype=torch.float64, requires_grad=True)
    (analytic,) = torch.autograd.grad(functional(mu), mu)
    with torch.no_grad():
        numeric = (functional(magnitude + h) - functional(magnitude - h)) / (2.0 * h)
    return float((analytic - numeric).abs())
