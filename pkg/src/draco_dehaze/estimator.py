"""scikit-learn style wrappers: a dehazing regressor and a haze transformer.

Image batches are float arrays shaped ``(n_images, 3, H, W)`` in [0, 1].
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .blocks import ArchConfig, DracoWeights, draco_forward, init_weights
from .haze import HazeRecipe, apply_asm, sample_airlight
from .losses import LossWeights
from .metrics import psnr
from .tensor import Tensor, no_grad
from .train import AdamState, Checkpoint, TrainConfig, fit


def check_images(X, name: str = "X", allow_range: bool = False) -> np.ndarray:
    """Validate an image batch and return it as float32 ``(n, 3, H, W)``.

    A single ``(3, H, W)`` image is promoted to a batch of one.
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n_images, 3, H, W), got {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[2] == 0 or arr.shape[3] == 0:
        raise ValueError(f"{name} is empty: {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or infinite values")
    if not allow_range and (arr.min() < 0 or arr.max() > 1):
        raise ValueError(f"{name} values must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]")
    return arr


def check_pair(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X, "X")
    y = check_images(y, "y")
    if X.shape != y.shape:
        raise ValueError(f"X {X.shape} and y {y.shape} must have the same shape")
    return X, y


def _check_fitted(est, attr: str = "weights_"):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")


class DracoDehazer(BaseEstimator):
    """Two-stage dehazing network trained with the contrastive composite loss.

    ``fit(X_hazy, y_clear)`` trains from scratch; ``predict`` returns the
    final dehazed images and ``predict_intermediate`` the DDIRB-stage ones.
    ``score`` is the mean PSNR in dB.
    """

    def __init__(self, base_channels=32, blocks="full", attention_kernel=1, io_kernel=3,
                 loss_mode="quadruplet", lr=1e-3, epochs=200, batch_size=16, crop=64,
                 max_steps=None, train_extractor=True, seed=0):
        self.base_channels = base_channels
        self.blocks = blocks
        self.attention_kernel = attention_kernel
        self.io_kernel = io_kernel
        self.loss_mode = loss_mode
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.crop = crop
        self.max_steps = max_steps
        self.train_extractor = train_extractor
        self.seed = seed

    def _arch(self) -> ArchConfig:
        return ArchConfig(base_channels=self.base_channels,
                          attention_channels=3 * self.base_channels,
                          attention_kernel=self.attention_kernel, io_kernel=self.io_kernel,
                          blocks=self.blocks)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch=self.batch_size, crop=self.crop,
                           seed=self.seed, loss_mode=self.loss_mode, arch=self._arch(),
                           max_steps=self.max_steps, train_extractor=self.train_extractor,
                           loss_weights=LossWeights())

    def fit(self, X, y, weights: DracoWeights | None = None):
        X, y = check_pair(X, y)
        config = self._train_config()
        result = fit(list(zip(X, y)), config, weights=weights)
        self.weights_ = result.weights
        self.optimizer_state_ = result.state
        self.history_ = result.history
        self.n_steps_ = result.state.step
        return self

    def _forward(self, X) -> tuple[np.ndarray, np.ndarray]:
        _check_fitted(self)
        X = check_images(X, "X")
        inter, final = [], []
        with no_grad():
            for img in X:
                j_inter, j = draco_forward(Tensor(img[None]), self.weights_)
                inter.append(j_inter.data[0])
                final.append(j.data[0])
        return np.stack(inter), np.stack(final)

    def predict(self, X) -> np.ndarray:
        return self._forward(X)[1]

    def predict_intermediate(self, X) -> np.ndarray:
        return self._forward(X)[0]

    def score(self, X, y) -> float:
        X, y = check_pair(X, y)
        pred = np.clip(self.predict(X), 0.0, 1.0)
        return float(np.mean([psnr(p, t) for p, t in zip(pred, y)]))

    def to_checkpoint(self) -> Checkpoint:
        _check_fitted(self)
        return Checkpoint(self.weights_, self.optimizer_state_, self.seed)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "DracoDehazer":
        arch = ckpt.config
        est = cls(base_channels=arch.base_channels, blocks=arch.blocks,
                  attention_kernel=arch.attention_kernel, io_kernel=arch.io_kernel,
                  seed=ckpt.seed)
        est.weights_ = ckpt.weights
        est.optimizer_state_ = ckpt.state
        est.history_ = []
        est.n_steps_ = ckpt.state.step
        return est

    def init_untrained(self) -> "DracoDehazer":
        """Attach freshly initialized weights without training."""
        self.weights_ = init_weights(self._arch(), self.seed)
        self.optimizer_state_ = AdamState()
        self.history_ = []
        self.n_steps_ = 0
        return self


class HazeSynthesizer(TransformerMixin, BaseEstimator):
    """Add synthetic haze to clear images with the scattering model.

    ``airlight=None`` draws a per-channel airlight in [0.7, 1.0] for each
    image from ``seed``.
    """

    def __init__(self, beta=1.0, airlight=None, depth_kind="linear_x", seed=0):
        self.beta = beta
        self.airlight = airlight
        self.depth_kind = depth_kind
        self.seed = seed

    def fit(self, X, y=None):
        check_images(X, "X")
        self.n_features_in_ = 3
        return self

    def recipes(self, n: int) -> list[HazeRecipe]:
        rng = np.random.default_rng(self.seed)
        out = []
        for _ in range(n):
            a = sample_airlight(rng) if self.airlight is None else self.airlight
            out.append(HazeRecipe(a, self.beta, self.depth_kind, self.seed))
        return out

    def transform(self, X) -> np.ndarray:
        _check_fitted(self, "n_features_in_")
        X = check_images(X, "X")
        hazy = [apply_asm(img, r)[0] for img, r in zip(X, self.recipes(len(X)))]
        return np.stack(hazy).astype(np.float32)
