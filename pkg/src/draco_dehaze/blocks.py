"""Network architecture: SE gating, DDIRB, ATTDRN, contrastive feature
extractor and the two-stage dehazing network.

All blocks are plain functions of an input tensor and a
:class:`DracoWeights` bundle; parameters are addressed by dotted prefixes
(``ddirb0.sub1.dw.w`` and so on).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .tensor import (
    ConfigurationError,
    ConvSpec,
    DimensionError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    depthwise_conv2d,
    global_avg_pool,
    max_pool2x2,
    mul,
    relu,
    sigmoid,
)

BLOCK_MODES = ("full", "ddirb", "attdrn")


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 32
    attention_channels: int = 96
    n_ddirb: int = 3
    n_attdrn: int = 3
    ddirb_dilations: tuple[int, int, int] = (1, 2, 5)
    attdrn_dilations: tuple[int, int, int] = (1, 3, 5)
    se_reduction: int = 4
    attention_kernel: int = 1
    extractor_channels: tuple[int, int] = (16, 32)
    # kernel of the stage entry (3 -> base) and exit (base -> 3) convolutions
    io_kernel: int = 3
    blocks: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "ddirb_dilations", tuple(int(d) for d in self.ddirb_dilations))
        object.__setattr__(self, "attdrn_dilations", tuple(int(d) for d in self.attdrn_dilations))
        object.__setattr__(self, "extractor_channels", tuple(int(c) for c in self.extractor_channels))
        for name in ("ddirb_dilations", "attdrn_dilations"):
            dil = getattr(self, name)
            if len(dil) != 3 or any(d < 1 for d in dil):
                raise ConfigurationError(f"{name} must be three positive integers, got {dil}")
            if not all(a < b for a, b in zip(dil, dil[1:])):
                raise ConfigurationError(f"{name} must be strictly increasing, got {dil}")
        if self.attention_channels != 3 * self.base_channels:
            raise ConfigurationError(
                f"attention_channels ({self.attention_channels}) must be 3 x base_channels "
                f"({self.base_channels})"
            )
        if self.base_channels % self.se_reduction:
            raise ConfigurationError(
                f"base_channels {self.base_channels} not divisible by se_reduction {self.se_reduction}"
            )
        if self.attention_kernel not in (1, 3):
            raise ConfigurationError(f"attention_kernel must be 1 or 3, got {self.attention_kernel}")
        if self.io_kernel < 1 or self.io_kernel % 2 == 0:
            raise ConfigurationError(f"io_kernel must be a positive odd integer, got {self.io_kernel}")
        if self.blocks not in BLOCK_MODES:
            raise ConfigurationError(f"blocks must be one of {BLOCK_MODES}, got {self.blocks!r}")
        if self.n_ddirb < 0 or self.n_attdrn < 0 or len(self.extractor_channels) != 2:
            raise ConfigurationError("block counts must be >= 0 and extractor_channels a pair")

    @property
    def uses_ddirb(self) -> bool:
        return self.blocks in ("full", "ddirb")

    @property
    def uses_attdrn(self) -> bool:
        return self.blocks in ("full", "attdrn")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown ArchConfig fields: {sorted(unknown)}")
        return cls(**d)

    def with_blocks(self, blocks: str) -> "ArchConfig":
        return replace(self, blocks=blocks)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ----------------------------------------------------------------------------
# parameter layout
# ----------------------------------------------------------------------------

def _conv(layout: dict, name: str, cin: int, cout: int, k: int) -> None:
    layout[f"{name}.w"] = (cout, cin, k, k)
    layout[f"{name}.b"] = (1, cout, 1, 1)


def _depthwise(layout: dict, name: str, c: int, k: int) -> None:
    layout[f"{name}.w"] = (c, 1, k, k)
    layout[f"{name}.b"] = (1, c, 1, 1)


def ddirb_layout(prefix: str, config: ArchConfig) -> dict[str, tuple[int, ...]]:
    c = config.base_channels
    layout: dict[str, tuple[int, ...]] = {}
    for s in range(3):
        sub = f"{prefix}.sub{s}"
        _conv(layout, f"{sub}.expand", c, c, 1)
        _depthwise(layout, f"{sub}.dw", c, 3)
        _conv(layout, f"{sub}.se.squeeze", c, c // config.se_reduction, 1)
        _conv(layout, f"{sub}.se.excite", c // config.se_reduction, c, 1)
        _conv(layout, f"{sub}.project", c, c, 1)
    return layout


def attdrn_layout(prefix: str, config: ArchConfig) -> dict[str, tuple[int, ...]]:
    c, a, k = config.base_channels, config.attention_channels, config.attention_kernel
    layout: dict[str, tuple[int, ...]] = {}
    for i in range(3):
        _conv(layout, f"{prefix}.branch{i}", c, c, 3)
    for part in ("ca", "pa"):
        _conv(layout, f"{prefix}.{part}.conv1", a, a, k)
        _conv(layout, f"{prefix}.{part}.conv2", a, 1, k)
        _conv(layout, f"{prefix}.{part}.conv3", 1, a, k)
    _conv(layout, f"{prefix}.fuse", a, c, 3)
    return layout


def extractor_layout(config: ArchConfig) -> dict[str, tuple[int, ...]]:
    c1, c2 = config.extractor_channels
    layout: dict[str, tuple[int, ...]] = {}
    _conv(layout, "extractor.conv1", 3, c1, 3)
    _conv(layout, "extractor.conv2", c1, c2, 3)
    return layout


def param_layout(config: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; a pure function of the config."""
    c, k = config.base_channels, config.io_kernel
    layout: dict[str, tuple[int, ...]] = {}
    if config.uses_ddirb:
        _conv(layout, "ddirb_stage.head", 3, c, k)
        for b in range(config.n_ddirb):
            layout.update(ddirb_layout(f"ddirb{b}", config))
        _conv(layout, "ddirb_stage.tail", c, 3, k)
    if config.uses_attdrn:
        _conv(layout, "attdrn_stage.head", 3, c, k)
        for b in range(config.n_attdrn):
            layout.update(attdrn_layout(f"attdrn{b}", config))
        _conv(layout, "attdrn_stage.tail", c, 3, k)
    layout.update(extractor_layout(config))
    return layout


@dataclass
class DracoWeights:
    config: ArchConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, include_extractor: bool = True) -> list[str]:
        return [n for n in self.params if include_extractor or not n.startswith("extractor.")]

    def tensors(self, include_extractor: bool = True) -> list[Tensor]:
        return [self.params[n] for n in self.names(include_extractor)]

    def extractor_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("extractor.")]

    def astype(self, dtype, requires_grad: bool | None = None) -> "DracoWeights":
        return DracoWeights(
            self.config,
            {
                n: Tensor(t.data.astype(dtype), dtype=dtype,
                          requires_grad=t.requires_grad if requires_grad is None else requires_grad)
                for n, t in self.params.items()
            },
        )

    def copy(self) -> "DracoWeights":
        return self.astype(np.float32)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


STAGE_TAILS = ("ddirb_stage.tail.w", "attdrn_stage.tail.w")


def init_weights(config: ArchConfig | None = None, seed: int = 0,
                 zero_tails: bool = True) -> DracoWeights:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, seeded.

    With ``zero_tails`` the two stage output convolutions start at zero, so
    each stage begins as the identity on its residual path.
    """
    config = config or ArchConfig()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_layout(config).items():
        if name.endswith(".b") or (zero_tails and name in STAGE_TAILS):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return DracoWeights(config, params)


def zero_weights(config: ArchConfig | None = None) -> DracoWeights:
    config = config or ArchConfig()
    return DracoWeights(
        config,
        {n: Tensor(np.zeros(s, dtype=np.float32), requires_grad=True, name=n)
         for n, s in param_layout(config).items()},
    )


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------

def _apply_conv(x: Tensor, weights: DracoWeights, name: str, dilation: int = 1) -> Tensor:
    w = weights[f"{name}.w"]
    out_c, in_c, k, _ = w.shape
    return conv2d(x, w, weights[f"{name}.b"], ConvSpec(in_c, out_c, k, dilation))


def _apply_depthwise(x: Tensor, weights: DracoWeights, name: str, dilation: int) -> Tensor:
    w = weights[f"{name}.w"]
    c, _, k, _ = w.shape
    return depthwise_conv2d(x, w, weights[f"{name}.b"], ConvSpec(c, c, k, dilation))


def _check_channels(x: Tensor, expected: int, what: str) -> None:
    if x.shape[1] != expected:
        raise DimensionError(f"{what}: expected {expected} channels, got {x.shape[1]} ({x.shape})")


def se_block(x: Tensor, weights: DracoWeights, prefix: str) -> Tensor:
    """Squeeze-and-excite: x * sigmoid(excite(relu(squeeze(avgpool(x)))))."""
    c = x.shape[1]
    squeeze = weights[f"{prefix}.squeeze.w"]
    if c % squeeze.shape[0] or squeeze.shape[1] != c:
        raise ConfigurationError(
            f"se_block: {c} channels incompatible with squeeze weight {squeeze.shape}"
        )
    pooled = global_avg_pool(x)
    hidden = relu(_apply_conv(pooled, weights, f"{prefix}.squeeze"))
    gate = sigmoid(_apply_conv(hidden, weights, f"{prefix}.excite"))
    return mul(x, gate)


def ddirb_block(x: Tensor, weights: DracoWeights, prefix: str,
                dilations: tuple[int, int, int] = (1, 2, 5)) -> Tensor:
    """Three inverted-residual sub-blocks with additive skips.

    Sub-block s: expand (1x1, ReLU) -> depthwise 3x3 at ``dilations[s]``
    (ReLU) -> SE -> project (1x1, linear). The first sub-block's skip starts
    at the expand output, later ones at the sub-block input.
    """
    _check_channels(x, weights.config.base_channels, "ddirb_block")
    out = x
    for s, d in enumerate(dilations):
        sub = f"{prefix}.sub{s}"
        expanded = relu(_apply_conv(out, weights, f"{sub}.expand"))
        h = relu(_apply_depthwise(expanded, weights, f"{sub}.dw", d))
        h = se_block(h, weights, f"{sub}.se")
        h = _apply_conv(h, weights, f"{sub}.project")
        out = add(expanded if s == 0 else out, h)
    return out


def attdrn_block(x: Tensor, weights: DracoWeights, prefix: str,
                 dilations: tuple[int, int, int] = (1, 3, 5)) -> Tensor:
    """Parallel dilated convs, channel attention, pixel attention, fuse + skip."""
    _check_channels(x, weights.config.base_channels, "attdrn_block")
    branches = [relu(_apply_conv(x, weights, f"{prefix}.branch{i}", d))
                for i, d in enumerate(dilations)]
    feats = concat_channels(branches)

    ca = global_avg_pool(feats)
    ca = relu(_apply_conv(ca, weights, f"{prefix}.ca.conv1"))
    ca = relu(_apply_conv(ca, weights, f"{prefix}.ca.conv2"))
    ca = relu(_apply_conv(ca, weights, f"{prefix}.ca.conv3"))
    feats = add(feats, ca)

    pa = relu(_apply_conv(feats, weights, f"{prefix}.pa.conv1"))
    gate = relu(_apply_conv(pa, weights, f"{prefix}.pa.conv2"))
    # bounded gate: a ReLU here makes the block quadratic in its input
    gate = sigmoid(_apply_conv(gate, weights, f"{prefix}.pa.conv3"))
    h = mul(pa, gate)

    h = _apply_conv(h, weights, f"{prefix}.fuse")
    return add(x, h)


def feature_extractor(image: Tensor, weights: DracoWeights) -> list[Tensor]:
    """Two conv(3x3, ReLU) + 2x2 max-pool stages; returns both stage outputs."""
    n, c, h, w = image.shape
    if c != 3:
        raise DimensionError(f"feature_extractor: expected 3 channels, got {c}")
    if h < 4 or w < 4:
        raise DimensionError(f"feature_extractor: spatial extent {h}x{w} below 4x4")
    f1 = max_pool2x2(relu(_apply_conv(image, weights, "extractor.conv1")))
    f2 = max_pool2x2(relu(_apply_conv(f1, weights, "extractor.conv2")))
    return [f1, f2]


def draco_forward(hazy: Tensor, weights: DracoWeights) -> tuple[Tensor, Tensor]:
    """Return (intermediate J', final J) for a batch of hazy images.

    DDIRB stage: head conv -> DDIRB stack -> tail conv -> + hazy = J'.
    ATTDRN stage: head conv -> ATTDRN stack -> tail conv -> + J' = J.
    Ablation modes skip a stage: ``ddirb`` gives J = J', ``attdrn`` uses the
    hazy input as J'.
    """
    if hazy.shape[1] != 3:
        raise DimensionError(f"draco_forward: expected a 3-channel image, got {hazy.shape}")
    cfg = weights.config
    inter = hazy
    if cfg.uses_ddirb:
        h = relu(_apply_conv(hazy, weights, "ddirb_stage.head"))
        for b in range(cfg.n_ddirb):
            h = ddirb_block(h, weights, f"ddirb{b}", cfg.ddirb_dilations)
        inter = add(_apply_conv(h, weights, "ddirb_stage.tail"), hazy)
    final = inter
    if cfg.uses_attdrn:
        h = relu(_apply_conv(inter, weights, "attdrn_stage.head"))
        for b in range(cfg.n_attdrn):
            h = attdrn_block(h, weights, f"attdrn{b}", cfg.attdrn_dilations)
        final = add(_apply_conv(h, weights, "attdrn_stage.tail"), inter)
    return inter, final
