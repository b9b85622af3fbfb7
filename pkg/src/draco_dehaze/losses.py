"""Training objectives: MAE, negative SSIM, triplet / quadruplet contrastive
regularizers and the weighted composite used for training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .blocks import DracoWeights, feature_extractor
from .tensor import (
    ConfigurationError,
    DimensionError,
    Tensor,
    absolute,
    add,
    div,
    mean_all,
    mean_spatial,
    mul,
    no_grad,
    scale,
    square,
    sub,
)

LOSS_MODES = ("quadruplet", "triplet", "mae+quad", "ssim+quad", "no-contrastive")

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    lambda_mae: float = 1.0
    lambda_ssim: float = 1.0
    lambda_contrastive: float = 0.1
    balance: float = 0.1          # B
    level_weight: float = 0.03125  # Omega
    eps: float = 1e-7

    def __post_init__(self):
        values = (self.lambda_mae, self.lambda_ssim, self.lambda_contrastive,
                  self.balance, self.level_weight)
        if any(v < 0 for v in values):
            raise ConfigurationError(f"loss weights must be nonnegative: {self}")
        if self.eps <= 0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")


@dataclass
class Quadruple:
    """Anchor J, intermediate J', positive GT and negative (hazy) I."""

    anchor: Tensor
    intermediate: Tensor
    positive: Tensor
    negative: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.anchor, self.intermediate, self.positive, self.negative)}
        if len(shapes) != 1:
            raise DimensionError(f"quadruple members differ in shape: {sorted(shapes)}")
        if self.anchor.shape[1] != 3:
            raise DimensionError(f"quadruple images must have 3 channels, got {self.anchor.shape}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    return mean_all(absolute(sub(a, b)))


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "mae_loss")
    return l1_distance(pred, target)


def _global_ssim(x: Tensor, y: Tensor) -> Tensor:
    mu_x, mu_y = mean_spatial(x), mean_spatial(y)
    dx, dy = sub(x, mu_x), sub(y, mu_y)
    var_x = mean_spatial(square(dx))
    var_y = mean_spatial(square(dy))
    cov = mean_spatial(mul(dx, dy))
    num = mul(add(scale(mul(mu_x, mu_y), 2.0), SSIM_C1), add(scale(cov, 2.0), SSIM_C2))
    den = mul(add(add(square(mu_x), square(mu_y)), SSIM_C1), add(add(var_x, var_y), SSIM_C2))
    # per image and channel, then averaged
    return mean_all(div(num, den))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' filtering over the last two axes
    k = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:w - k + 1 + j] for j in range(k))


def windowed_ssim(x: np.ndarray, y: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows, per channel."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g = gaussian_window(size, sigma)
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x ** 2
    syy = _filter_valid(y * y, g) - mu_y ** 2
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    s = ((2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)) / (
        (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    )
    return float(s.mean())


def ssim_value(x: Tensor, y: Tensor, window: str = "global") -> Tensor:
    """SSIM with C1 = 0.01^2 and C2 = 0.03^2 (unit dynamic range).

    ``global`` uses whole-image statistics per channel and is differentiable;
    ``gaussian11`` is the windowed metric form and returns a constant tensor.
    """
    _same_shape(x, y, "ssim_value")
    if window == "global":
        return _global_ssim(x, y)
    if window == "gaussian11":
        return Tensor.scalar(windowed_ssim(x.data, y.data), dtype=x.dtype)
    raise ConfigurationError(f"unknown SSIM window {window!r}")


def ssim_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "ssim_loss")
    return scale(_global_ssim(pred, target), -1.0)


# ----------------------------------------------------------------------------
# contrastive regularization
# ----------------------------------------------------------------------------

def _ratio_sum(numerators: Sequence[Tensor], denominators: Sequence[Tensor],
               lw: LossWeights) -> Tensor:
    total = None
    for num, den in zip(numerators, denominators):
        term = scale(div(num, add(den, lw.eps)), lw.level_weight)
        total = term if total is None else add(total, term)
    return scale(total, lw.balance)


def quadruplet_from_features(f_anchor: Sequence[Tensor], f_inter: Sequence[Tensor],
                             f_pos: Sequence[Tensor], f_neg: Sequence[Tensor],
                             lw: LossWeights) -> Tensor:
    """B * sum_i Omega * d(J,GT) / (d(J,I) + d(J',I) + d(J',J) + eps)."""
    nums, dens = [], []
    for a, m, p, n in zip(f_anchor, f_inter, f_pos, f_neg):
        nums.append(l1_distance(a, p))
        dens.append(add(add(l1_distance(a, n), l1_distance(m, n)), l1_distance(m, a)))
    return _ratio_sum(nums, dens, lw)


def triplet_from_features(f_anchor: Sequence[Tensor], f_pos: Sequence[Tensor],
                          f_neg: Sequence[Tensor], lw: LossWeights) -> Tensor:
    """B * sum_i Omega * d(J,GT) / (d(J,I) + eps)."""
    nums = [l1_distance(a, p) for a, p in zip(f_anchor, f_pos)]
    dens = [l1_distance(a, n) for a, n in zip(f_anchor, f_neg)]
    return _ratio_sum(nums, dens, lw)


Extractor = Callable[[Tensor], list[Tensor]]


def _extractor_fn(extractor: DracoWeights | Extractor) -> Extractor:
    if isinstance(extractor, DracoWeights):
        return lambda img: feature_extractor(img, extractor)
    return extractor


def _constant_features(extract: Extractor, image: Tensor) -> list[Tensor]:
    # clear and hazy images are fixed targets: no gradient through their branch
    with no_grad():
        return [f.detach() for f in extract(image.detach())]


def quadruplet_loss(q: Quadruple, extractor: DracoWeights | Extractor,
                    lw: LossWeights | None = None) -> Tensor:
    lw = lw or LossWeights()
    extract = _extractor_fn(extractor)
    return quadruplet_from_features(
        extract(q.anchor), extract(q.intermediate),
        _constant_features(extract, q.positive), _constant_features(extract, q.negative), lw,
    )


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor,
                 extractor: DracoWeights | Extractor, lw: LossWeights | None = None) -> Tensor:
    _same_shape(anchor, positive, "triplet_loss")
    _same_shape(anchor, negative, "triplet_loss")
    lw = lw or LossWeights()
    extract = _extractor_fn(extractor)
    return triplet_from_features(
        extract(anchor), _constant_features(extract, positive),
        _constant_features(extract, negative), lw,
    )


def loss_terms(q: Quadruple, extractor: DracoWeights | Extractor, lw: LossWeights | None = None,
               mode: str = "quadruplet") -> dict[str, Tensor]:
    """Return ``mae``, ``ssim_loss``, ``contrastive`` and ``total`` for a mode.

    Terms a mode leaves out are still reported (``contrastive`` as 0 in
    ``no-contrastive`` mode, where the extractor is never called).
    """
    if mode not in LOSS_MODES:
        raise ConfigurationError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    lw = lw or LossWeights()
    mae = mae_loss(q.anchor, q.positive)
    ssim = ssim_loss(q.anchor, q.positive)
    if mode == "no-contrastive":
        contrastive = Tensor.scalar(0.0, dtype=q.anchor.dtype)
    elif mode == "triplet":
        contrastive = triplet_loss(q.anchor, q.positive, q.negative, extractor, lw)
    else:
        contrastive = quadruplet_loss(q, extractor, lw)

    parts = []
    if mode != "ssim+quad":
        parts.append(scale(mae, lw.lambda_mae))
    if mode != "mae+quad":
        parts.append(scale(ssim, lw.lambda_ssim))
    if mode != "no-contrastive":
        parts.append(scale(contrastive, lw.lambda_contrastive))
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return {"mae": mae, "ssim_loss": ssim, "contrastive": contrastive, "total": total}


def draco_total_loss(q: Quadruple, extractor: DracoWeights | Extractor,
                     lw: LossWeights | None = None, mode: str = "quadruplet") -> Tensor:
    return loss_terms(q, extractor, lw, mode)["total"]
