"""Seeded training: random aligned crops, Adam, the joint training step and
binary checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .blocks import ArchConfig, DracoWeights, draco_forward, init_weights
from .losses import LOSS_MODES, LossWeights, Quadruple, loss_terms
from .tensor import ConfigurationError, DimensionError, Tensor, backward

log = logging.getLogger(__name__)

MAGIC = b"DRC1"
VERSION = 1


class NumericError(ArithmeticError):
    """Non-finite loss during training."""


class CheckpointFormatError(ValueError):
    """Malformed checkpoint file; the message names the byte offset."""


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 200
    batch: int = 16
    crop: int = 64
    seed: int = 0
    loss_mode: str = "quadruplet"
    arch: ArchConfig = field(default_factory=ArchConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_steps: int | None = None
    train_extractor: bool = True
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig.from_dict(self.arch)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.batch < 1:
            raise ConfigurationError(f"batch must be >= 1, got {self.batch}")
        if self.crop < 4 or self.crop % 4:
            raise ConfigurationError(f"crop must be a positive multiple of 4, got {self.crop}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"unknown loss mode {self.loss_mode!r}")
        if self.lr <= 0 or self.epochs < 0:
            raise ConfigurationError("lr must be positive and epochs nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if state.step < 0:
        raise ConfigurationError(f"step counter must be >= 0, got {state.step}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: grad {g.shape} != param {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise DimensionError(f"adam_step: moment {m.shape} != param {p.shape} for {name}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    return state


# ----------------------------------------------------------------------------
# data
# ----------------------------------------------------------------------------

Pair = tuple[np.ndarray, np.ndarray]  # (hazy, clear), each (3, H, W)


@dataclass
class CropBatch:
    hazy: np.ndarray
    clear: np.ndarray
    indices: list[int]
    offsets: list[tuple[int, int]]


def sample_crops(pairs: Sequence[Pair], crop: int, batch: int, rng: np.random.Generator,
                 indices: Sequence[int] | None = None, strict: bool = True) -> CropBatch:
    """Cut aligned ``crop x crop`` windows from (hazy, clear) pairs.

    Offsets are uniform over the valid range and shared by both members of
    a pair. Pairs are drawn with ``rng`` unless ``indices`` is given. Pairs
    smaller than the crop raise, or are skipped with a warning when
    ``strict`` is false.
    """
    if indices is None:
        indices = [int(i) for i in rng.integers(0, len(pairs), size=batch)]
    hazy, clear, used, offsets = [], [], [], []
    for i in indices:
        h_img, c_img = pairs[i]
        if h_img.shape != c_img.shape:
            raise DimensionError(f"pair {i}: hazy {h_img.shape} and clear {c_img.shape} differ")
        _, h, w = h_img.shape
        if h < crop or w < crop:
            msg = f"pair {i} is {h}x{w}, smaller than crop {crop}"
            if strict:
                raise DimensionError(msg)
            log.warning("skipping %s", msg)
            continue
        y = int(rng.integers(0, h - crop + 1))
        x = int(rng.integers(0, w - crop + 1))
        hazy.append(h_img[:, y:y + crop, x:x + crop])
        clear.append(c_img[:, y:y + crop, x:x + crop])
        used.append(i)
        offsets.append((y, x))
    if not hazy:
        raise DimensionError(f"no pair is large enough for crop {crop}")
    return CropBatch(np.stack(hazy).astype(np.float32), np.stack(clear).astype(np.float32),
                     used, offsets)


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

@dataclass
class StepResult:
    step: int
    mae: float
    ssim_loss: float
    contrastive: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _trainable_names(weights: DracoWeights, train_extractor: bool) -> list[str]:
    return weights.names(include_extractor=train_extractor)


def train_step(hazy: np.ndarray, clear: np.ndarray, weights: DracoWeights, state: AdamState,
               config: TrainConfig) -> StepResult:
    """Forward, composite loss, backward and one joint Adam update."""
    if hazy.shape != clear.shape or hazy.ndim != 4 or hazy.shape[1] != 3:
        raise DimensionError(f"train_step: hazy {hazy.shape} and clear {clear.shape} must match (B,3,H,W)")
    x, y = Tensor(hazy), Tensor(clear)
    inter, final = draco_forward(x, weights)
    terms = loss_terms(Quadruple(final, inter, y, x), weights, config.loss_weights, config.loss_mode)
    values = {k: t.item() for k, t in terms.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericError(f"non-finite loss at step {state.step + 1}: {values}")

    names = _trainable_names(weights, config.train_extractor)
    leaves = [weights[n] for n in names]
    backward(terms["total"], leaves)
    adam_step({n: weights[n].data for n in names}, {n: weights[n].grad for n in names}, state,
              config.lr, config.beta1, config.beta2, config.eps_adam)
    return StepResult(state.step, values["mae"], values["ssim_loss"],
                      values["contrastive"], values["total"])


@dataclass
class TrainResult:
    weights: DracoWeights
    state: AdamState
    history: list[dict]


def fit(pairs: Sequence[Pair], config: TrainConfig, weights: DracoWeights | None = None,
        state: AdamState | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs (or until ``config.max_steps``).

    An epoch is ``ceil(len(pairs) / batch)`` steps over a seeded permutation
    of the pairs. Each epoch appends the mean of its step losses to the
    returned history and passes it to ``on_epoch``.
    """
    if not pairs:
        raise ValueError("fit needs at least one (hazy, clear) pair")
    rng = np.random.default_rng(config.seed)
    weights = weights if weights is not None else init_weights(config.arch, config.seed)
    state = state if state is not None else AdamState()
    steps_per_epoch = math.ceil(len(pairs) / config.batch)
    history: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        results = []
        for s in range(steps_per_epoch):
            if config.max_steps is not None and state.step >= config.max_steps:
                break
            idx = order[s * config.batch:(s + 1) * config.batch]
            crops = sample_crops(pairs, config.crop, len(idx), rng, indices=idx)
            results.append(train_step(crops.hazy, crops.clear, weights, state, config))
        if not results:
            break
        row = {"epoch": epoch, "step": state.step}
        for key in ("mae", "ssim_loss", "contrastive", "total"):
            row[key] = float(np.mean([getattr(r, key) for r in results]))
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d step %d total %.5f", epoch, state.step, row["total"])
    return TrainResult(weights, state, history)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

@dataclass
class Checkpoint:
    weights: DracoWeights
    state: AdamState
    seed: int = 0

    @property
    def config(self) -> ArchConfig:
        return self.weights.config


def _encode_tensors(named: Sequence[tuple[str, np.ndarray]]) -> bytes:
    out = [struct.pack("<I", len(named))]
    for name, arr in named:
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Little-endian: magic, version, tensors, moments, step, seed, arch JSON."""
    params = [(n, t.data) for n, t in ckpt.weights.params.items()]
    moments = []
    for n in ckpt.weights.params:
        if n in ckpt.state.m:
            moments.append((f"m.{n}", ckpt.state.m[n]))
            moments.append((f"v.{n}", ckpt.state.v[n]))
    arch = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        _encode_tensors(params),
        _encode_tensors(moments),
        struct.pack("<QQ", ckpt.state.step, ckpt.seed),
        struct.pack("<I", len(arch)),
        arch,
    ])


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(
                f"{self.path}: truncated reading {what} at offset {self.pos} "
                f"(need {n} bytes, {len(self.raw) - self.pos} left)"
            )
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensors(self, what: str) -> list[tuple[str, np.ndarray]]:
        (count,) = self.unpack("<I", f"{what} count")
        out = []
        for _ in range(count):
            (name_len,) = self.unpack("<I", "name length")
            at = self.pos
            try:
                name = self.take(name_len, "name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointFormatError(f"{self.path}: invalid UTF-8 name at offset {at}") from None
            (ndim,) = self.unpack("<B", f"ndim of {name}")
            dims = self.unpack(f"<{ndim}Q", f"dims of {name}")
            size = int(np.prod(dims)) if ndim else 1
            payload = self.take(4 * size, f"payload of {name}")
            out.append((name, np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)))
        return out


def decode_checkpoint(raw: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(raw, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version} at offset 4")
    params = r.tensors("tensor")
    moments = r.tensors("moment")
    step, seed = r.unpack("<QQ", "step and seed")
    (arch_len,) = r.unpack("<I", "arch length")
    at = r.pos
    try:
        arch = ArchConfig.from_dict(json.loads(r.take(arch_len, "arch config").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: bad arch config at offset {at}: {exc}") from None
    if r.pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - r.pos} trailing bytes at offset {r.pos}")

    expected = {n for n in _layout_names(arch)}
    got = [n for n, _ in params]
    if set(got) != expected:
        raise CheckpointFormatError(
            f"{path}: tensor names do not match arch config "
            f"(missing {sorted(expected - set(got))[:3]}, extra {sorted(set(got) - expected)[:3]})"
        )
    weights = DracoWeights(arch, {n: Tensor(a, requires_grad=True, name=n) for n, a in params})
    state = AdamState(step=int(step))
    for name, arr in moments:
        kind, _, pname = name.partition(".")
        target = {"m": state.m, "v": state.v}.get(kind)
        if target is None or pname not in weights.params:
            raise CheckpointFormatError(f"{path}: unknown moment tensor {name!r}")
        target[pname] = arr.copy()
    return Checkpoint(weights, state, int(seed))


def _layout_names(arch: ArchConfig):
    from .blocks import param_layout

    return param_layout(arch).keys()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), path)


def default_train_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(), **overrides)
