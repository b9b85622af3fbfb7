"""Synthetic haze via the atmospheric scattering model.

A clear image J becomes ``I = J * t + A * (1 - t)`` with transmission
``t = exp(-beta * d)`` over a depth map normalized to [0, 1].
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ConfigurationError, ContractError

log = logging.getLogger(__name__)

DEPTH_KINDS = ("linear_x", "linear_y", "radial", "file")
DEFAULT_T_MIN = 0.05


class SingularityError(ArithmeticError):
    """Raised when the transmission is too small to invert the haze model."""


@dataclass
class HazeRecipe:
    airlight: tuple[float, float, float]
    beta: float
    depth_kind: str = "linear_x"
    seed: int = 0
    depth: np.ndarray | None = None  # explicit (H, W) map; required for depth_kind "file"

    def __post_init__(self):
        a = tuple(float(v) for v in np.broadcast_to(np.asarray(self.airlight, dtype=float), (3,)))
        if any(not 0.0 <= v <= 1.0 for v in a):
            raise ConfigurationError(f"airlight must lie in [0, 1], got {a}")
        self.airlight = a
        if self.beta < 0:
            raise ConfigurationError(f"beta must be nonnegative, got {self.beta}")
        if self.depth_kind not in DEPTH_KINDS:
            raise ConfigurationError(f"unknown depth kind {self.depth_kind!r}")
        if self.depth_kind == "file" and self.depth is None:
            raise ConfigurationError("depth_kind 'file' needs an explicit depth map")

    def depth_map(self, height: int, width: int) -> np.ndarray:
        if self.depth is not None:
            d = np.asarray(self.depth, dtype=np.float64)
            if d.shape != (height, width):
                raise ConfigurationError(f"depth map {d.shape} does not match image {(height, width)}")
            return normalize_depth(d)
        return generate_depth(self.depth_kind, height, width)

    def transmission(self, height: int, width: int) -> np.ndarray:
        return np.exp(-self.beta * self.depth_map(height, width))

    def manifest_fields(self) -> dict:
        return {"A": list(self.airlight), "beta": self.beta,
                "depth_kind": self.depth_kind, "seed": self.seed}


def sample_airlight(rng: np.random.Generator, low: float = 0.7, high: float = 1.0):
    return tuple(float(v) for v in rng.uniform(low, high, size=3))


def normalize_depth(d: np.ndarray) -> np.ndarray:
    lo, hi = float(d.min()), float(d.max())
    if hi - lo == 0:
        return np.zeros_like(d, dtype=np.float64)
    return (d - lo) / (hi - lo)


def generate_depth(kind: str, height: int, width: int) -> np.ndarray:
    """Synthetic depth in [0, 1]: horizontal ramp, vertical ramp or radial."""
    if height < 1 or width < 1:
        raise ConfigurationError(f"depth map needs H, W >= 1, got {height}x{width}")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    if kind == "linear_x":
        raw = np.broadcast_to(xs, (height, width))
    elif kind == "linear_y":
        raw = ys
    elif kind == "radial":
        cy, cx = (height - 1) / 2, (width - 1) / 2
        raw = np.hypot(ys - cy, xs - cx)
    elif kind == "file":
        raise ConfigurationError("depth kind 'file' is loaded, not generated")
    else:
        raise ConfigurationError(f"unknown depth kind {kind!r}; expected one of {DEPTH_KINDS}")
    return normalize_depth(np.asarray(raw))


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"expected a (3, H, W) image, got shape {img.shape}")
    return img


def apply_asm(clear: np.ndarray, recipe: HazeRecipe, transmission: np.ndarray | None = None):
    """Haze a (3, H, W) clear image.

    Returns ``(hazy, t, direct, airlight)`` where ``direct = J * t`` and
    ``airlight = A * (1 - t)`` sum to ``hazy``.
    """
    clear = _check_image(clear)
    if clear.min() < 0 or clear.max() > 1:
        raise ContractError(
            f"clear image must lie in [0, 1], got range [{clear.min():.4g}, {clear.max():.4g}]"
        )
    _, h, w = clear.shape
    t = recipe.transmission(h, w) if transmission is None else np.asarray(transmission, np.float64)
    a = np.asarray(recipe.airlight, dtype=np.float64).reshape(3, 1, 1)
    direct = clear * t
    airlight = a * (1.0 - t)
    return direct + airlight, t, direct, airlight


def invert_asm(hazy: np.ndarray, transmission: np.ndarray, airlight,
               t_min: float = DEFAULT_T_MIN) -> np.ndarray:
    """Recover J = (I - A (1 - t)) / t given the true transmission."""
    hazy = _check_image(hazy)
    t = np.asarray(transmission, dtype=np.float64)
    if t.min() < t_min:
        raise SingularityError(f"transmission {t.min():.4g} below t_min={t_min}")
    a = np.broadcast_to(np.asarray(airlight, dtype=np.float64), (3,)).reshape(3, 1, 1)
    return (hazy - a * (1.0 - t)) / t


def render_scene(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """A smooth random clear scene in [0, 1]: colour gradient plus blobs."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ys /= max(height - 1, 1)
    xs /= max(width - 1, 1)
    img = np.empty((3, height, width))
    for c in range(3):
        a, b, base = rng.uniform(-0.4, 0.4, size=3)
        img[c] = 0.45 + 0.3 * base + a * xs + b * ys
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.3)
        colour = rng.uniform(-0.35, 0.35, size=3)
        blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * r * r))
        img += colour.reshape(3, 1, 1) * blob
    return np.clip(img, 0.0, 1.0)


def make_pair_dataset(clear_dir: str | Path, recipes: Sequence[HazeRecipe],
                      out_dir: str | Path) -> int:
    """Haze every clear PPM in ``clear_dir`` with every recipe.

    Writes ``out_dir/clear/<stem>_r<k>.ppm``, ``out_dir/hazy/<stem>_r<k>.ppm``
    and ``out_dir/manifest.jsonl``; returns the number of pairs.
    """
    from .imageio import read_ppm_array, write_ppm_array

    clear_dir, out_dir = Path(clear_dir), Path(out_dir)
    if not clear_dir.is_dir():
        raise FileNotFoundError(f"clear image directory not found: {clear_dir}")
    sources = sorted(clear_dir.glob("*.ppm"))
    if not sources:
        raise FileNotFoundError(f"no .ppm images in {clear_dir}")
    (out_dir / "clear").mkdir(parents=True, exist_ok=True)
    (out_dir / "hazy").mkdir(parents=True, exist_ok=True)

    rows = []
    for src in sources:
        clear = read_ppm_array(src)
        for k, recipe in enumerate(recipes):
            hazy, *_ = apply_asm(clear, recipe)
            name = f"{src.stem}_r{k}.ppm"
            write_ppm_array(out_dir / "clear" / name, clear)
            write_ppm_array(out_dir / "hazy" / name, hazy)
            rows.append({"clear": f"clear/{name}", "hazy": f"hazy/{name}", **recipe.manifest_fields()})
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    log.info("wrote %d pairs to %s", len(rows), out_dir)
    return len(rows)


def read_manifest(data_dir: str | Path) -> list[dict]:
    data_dir = Path(data_dir)
    path = data_dir / "manifest.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
