"""Image-quality metrics and analytic model cost.

FLOPs convention: 2 x multiply-accumulates of convolutions (and SE
projections). Activations, additions and pooling are not counted.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .blocks import ArchConfig, DracoWeights, param_layout
from .losses import SSIM_C1, SSIM_C2, windowed_ssim
from .tensor import ConfigurationError, DimensionError, Tensor

FLOP_COMPONENTS = ("full", "ddirb_only", "attdrn_only")

# shown as the PSNR of identical images in JSON reports
PSNR_INF_SENTINEL = "inf"


class SmallImageWarning(UserWarning):
    """Image smaller than the SSIM window; global statistics were used."""


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(pred, target, max_value: float = 1.0) -> float:
    """10 log10(MAX^2 / MSE); ``inf`` when the images are identical."""
    a, b = _array(pred), _array(target)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(max_value ** 2 / mse)


def _global_ssim_np(a: np.ndarray, b: np.ndarray) -> float:
    axes = (-2, -1)
    mu_a, mu_b = a.mean(axis=axes), b.mean(axis=axes)
    va, vb = a.var(axis=axes), b.var(axis=axes)
    cov = ((a - mu_a[..., None, None]) * (b - mu_b[..., None, None])).mean(axis=axes)
    s = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (va + vb + SSIM_C2)
    )
    return float(s.mean())


def ssim_metric(pred, target, window: int = 11) -> float:
    """Gaussian-windowed (11x11, sigma 1.5) mean SSIM over channels.

    Images smaller than the window fall back to global statistics and emit
    :class:`SmallImageWarning`.
    """
    a, b = _array(pred), _array(target)
    if a.shape != b.shape:
        raise DimensionError(f"ssim_metric: shapes {a.shape} and {b.shape} differ")
    if min(a.shape[-2:]) < window:
        warnings.warn(
            f"image {a.shape[-2:]} smaller than the {window}x{window} SSIM window; "
            "using global statistics",
            SmallImageWarning,
            stacklevel=2,
        )
        return _global_ssim_np(a, b)
    return windowed_ssim(a, b, size=window)


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------

def count_params(weights: DracoWeights | ArchConfig, include_extractor: bool = False) -> int:
    if isinstance(weights, ArchConfig):
        shapes = param_layout(weights)
    else:
        shapes = {n: t.shape for n, t in weights.params.items()}
    return int(sum(int(np.prod(s)) for n, s in shapes.items()
                   if include_extractor or not n.startswith("extractor.")))


def closed_form_param_count(config: ArchConfig) -> int:
    """Parameter count written out by hand (see README, "Parameter budget").

    Independent of :func:`param_layout`; the two must agree exactly.
    """
    c, a, r = config.base_channels, config.attention_channels, config.se_reduction
    k, ka = config.io_kernel, config.attention_kernel
    s = c // r
    sub_block = (c * c + c) + (9 * c + c) + (c * s + s) + (s * c + c) + (c * c + c)
    ddirb = 3 * sub_block
    attdrn = (
        3 * (9 * c * c + c)                       # parallel dilated branches
        + 2 * (ka * ka * a * a + a)               # channel / pixel attention conv1
        + 2 * (ka * ka * a + 1)                   # conv2: a -> 1
        + 2 * (ka * ka * a + a)                   # conv3: 1 -> a
        + (9 * a * c + c)                         # fuse a -> c
    )
    stage_io = (k * k * 3 * c + c) + (k * k * c * 3 + 3)
    total = 0
    if config.uses_ddirb:
        total += stage_io + config.n_ddirb * ddirb
    if config.uses_attdrn:
        total += stage_io + config.n_attdrn * attdrn
    return total


# ----------------------------------------------------------------------------
# FLOPs
# ----------------------------------------------------------------------------

def conv_flops(h: int, w: int, cin: int, cout: int, k: int) -> int:
    return 2 * h * w * cout * cin * k * k


def depthwise_flops(h: int, w: int, c: int, k: int) -> int:
    return 2 * h * w * c * k * k


def se_flops(c: int, r: int) -> int:
    # squeeze and excite projections on the pooled vector
    return 2 * (2 * c * c // r)


def ddirb_sub_block_flops(config: ArchConfig, h: int, w: int) -> int:
    c = config.base_channels
    return (conv_flops(h, w, c, c, 1) + depthwise_flops(h, w, c, 3)
            + se_flops(c, config.se_reduction) + conv_flops(h, w, c, c, 1))


def residual_block_flops(c: int, h: int, w: int) -> int:
    """Ordinary residual block: two 3x3 convolutions at ``c`` channels."""
    return 2 * conv_flops(h, w, c, c, 3)


def flops_breakdown(config: ArchConfig, h: int, w: int, component: str = "full") -> dict[str, int]:
    """Per-layer-group FLOPs of the inference network for a component."""
    if component not in FLOP_COMPONENTS:
        raise ConfigurationError(f"unknown component {component!r}; expected one of {FLOP_COMPONENTS}")
    if h < 1 or w < 1:
        raise ConfigurationError(f"resolution must be positive, got {h}x{w}")
    c, a, ka, k = (config.base_channels, config.attention_channels,
                   config.attention_kernel, config.io_kernel)
    parts: dict[str, int] = {}
    if component in ("full", "ddirb_only"):
        parts["ddirb_stage.io"] = conv_flops(h, w, 3, c, k) + conv_flops(h, w, c, 3, k)
        parts["ddirb_blocks"] = config.n_ddirb * 3 * ddirb_sub_block_flops(config, h, w)
    if component in ("full", "attdrn_only"):
        parts["attdrn_stage.io"] = conv_flops(h, w, 3, c, k) + conv_flops(h, w, c, 3, k)
        per_block = (
            3 * conv_flops(h, w, c, c, 3)
            # channel attention runs on the pooled 1x1 map
            + conv_flops(1, 1, a, a, ka) + conv_flops(1, 1, a, 1, ka) + conv_flops(1, 1, 1, a, ka)
            + conv_flops(h, w, a, a, ka) + conv_flops(h, w, a, 1, ka) + conv_flops(h, w, 1, a, ka)
            + conv_flops(h, w, a, c, 3)
        )
        parts["attdrn_blocks"] = config.n_attdrn * per_block
    return parts


def count_flops(config: ArchConfig, h: int, w: int, component: str = "full") -> int:
    """Inference FLOPs of the full network or of a single-stage ablation."""
    return int(sum(flops_breakdown(config, h, w, component).values()))


def extractor_flops(config: ArchConfig, h: int, w: int) -> int:
    """Cost of one feature-extractor pass (training only)."""
    c1, c2 = config.extractor_channels
    return conv_flops(h, w, 3, c1, 3) + conv_flops(h // 2, w // 2, c1, c2, 3)


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

@dataclass
class MetricsReport:
    psnr_db: float | None
    ssim: float | None
    params: int | None
    flops: int | None
    height: int
    width: int
    config_digest: str | None = None
    name: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["psnr_db"] is not None and np.isinf(d["psnr_db"]):
            d["psnr_db"] = PSNR_INF_SENTINEL
        return {k: v for k, v in d.items() if v is not None or k in
                ("psnr_db", "ssim", "params", "flops")}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def evaluate_pair(pred, target, config: ArchConfig | None = None, name: str | None = None,
                  weights: DracoWeights | None = None) -> MetricsReport:
    a = _array(pred)
    h, w = a.shape[-2:]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SmallImageWarning)
        s = ssim_metric(pred, target)
    return MetricsReport(
        psnr_db=psnr(pred, target),
        ssim=s,
        params=count_params(weights) if weights is not None else None,
        flops=count_flops(config, h, w) if config is not None else None,
        height=int(h),
        width=int(w),
        config_digest=config.digest() if config is not None else None,
        name=name,
    )
