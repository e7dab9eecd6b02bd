"""Latent encoder/decoder pair with per-channel standardisation.

Two variants:

``identity``
    Latent == image (scale factor 1, stats (0, 1)); the whole pipeline then
    runs in image space.
``conv-autoencoder``
    A small :class:`~rectiflow.nets.ConvAutoencoder` trained from scratch on
    normal images with plain MSE. Its raw latents are standardised with
    dataset-level per-channel mean/std so they are roughly N(0, 1).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .nets import ConvAutoencoder
from .optim import AdamW, scheduled_lr

log = logging.getLogger(__name__)

MIN_STD = 1e-6


class CodecFitError(RuntimeError):
    """Autoencoder training finished above the reconstruction target."""

    def __init__(self, achieved: float, target: float, codec: Codec):
        super().__init__(f"held-out reconstruction MSE {achieved:.3g} above target {target:.3g}")
        self.achieved = achieved
        self.target = target
        self.codec = codec


class UnfittedCodecError(RuntimeError):
    pass


@dataclass
class LatentStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)

    @classmethod
    def identity(cls, channels: int) -> LatentStats:
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))

    @classmethod
    def from_latents(cls, z: np.ndarray) -> LatentStats:
        """Per-channel statistics over a (N, C, h, w) batch."""
        z64 = z.astype(np.float64)
        mean = z64.mean(axis=(0, 2, 3))
        std = np.maximum(z64.std(axis=(0, 2, 3)), MIN_STD)
        return cls(mean.astype(np.float32), std.astype(np.float32))

    def _bcast(self, z: np.ndarray):
        shape = (-1, 1, 1)
        return self.mean.reshape(shape), self.std.reshape(shape)

    def standardize(self, z: np.ndarray) -> np.ndarray:
        mu, sd = self._bcast(z)
        return ((z - mu) / sd).astype(np.float32)

    def destandardize(self, y: np.ndarray) -> np.ndarray:
        mu, sd = self._bcast(y)
        return (y * sd + mu).astype(np.float32)


@dataclass
class CodecConfig:
    variant: str = "conv-autoencoder"
    scale_factor: int = 4
    latent_channels: int = 4
    width: int = 16
    epochs: int = 40
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    target_mse: float = 5e-3
    holdout_fraction: float = 0.1
    min_images: int = 64

    def validate(self) -> None:
        if self.variant not in ("identity", "conv-autoencoder"):
            raise ValueError(f"unknown codec variant {self.variant!r}")
        if self.variant == "conv-autoencoder" and self.scale_factor not in (4, 8):
            raise ValueError(f"scale_factor must be 4 or 8, got {self.scale_factor}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError(f"holdout_fraction must be in (0, 1), got {self.holdout_fraction}")


class Codec:
    """Maps (N, H, W) grayscale images to standardised (N, C, h, w) latents and back."""

    def __init__(self, variant: str, model: ConvAutoencoder | None = None, stats: LatentStats | None = None):
        self.variant = variant
        self.model = model
        self.stats = stats
        self.fit_mse: float | None = None
        self.loss_curve: list[float] = []
        if variant == "identity":
            self.stats = LatentStats.identity(1)

    @property
    def scale_factor(self) -> int:
        return 1 if self.variant == "identity" else self.model.scale_factor

    @property
    def latent_channels(self) -> int:
        return 1 if self.variant == "identity" else self.model.latent_channels

    def latent_shape(self, image_shape: tuple[int, int]) -> tuple[int, int, int]:
        f = self.scale_factor
        return (self.latent_channels, image_shape[0] // f, image_shape[1] // f)

    def _check(self, x: np.ndarray) -> None:
        if self.stats is None:
            raise UnfittedCodecError("codec has no latent statistics; fit it first")
        f = self.scale_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"image dims {x.shape[-2:]} not divisible by scale factor {f}")

    def raw_encode(self, x: np.ndarray, chunk: int = 64) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if self.variant == "identity":
            return x[:, None]
        out = [self.model.encode(Tensor(x[i : i + chunk, None])).data for i in range(0, len(x), chunk)]
        return np.concatenate(out)

    def raw_decode(self, z: np.ndarray, chunk: int = 64) -> np.ndarray:
        if self.variant == "identity":
            return z[:, 0].astype(np.float32)
        out = [self.model.decode(Tensor(z[i : i + chunk])).data[:, 0] for i in range(0, len(z), chunk)]
        return np.concatenate(out)

    def encode(self, x: np.ndarray) -> np.ndarray:
        """(N, H, W) or (H, W) images -> standardised latents."""
        x = np.asarray(x, dtype=np.float32)
        single = x.ndim == 2
        batch = x[None] if single else x
        self._check(batch)
        y = self.stats.standardize(self.raw_encode(batch))
        return y[0] if single else y

    def decode(self, y: np.ndarray) -> np.ndarray:
        """Standardised latents -> images; destandardises first."""
        if self.stats is None:
            raise UnfittedCodecError("codec has no latent statistics; fit it first")
        y = np.asarray(y, dtype=np.float32)
        single = y.ndim == 3
        batch = y[None] if single else y
        x = self.raw_decode(self.stats.destandardize(batch))
        return x[0] if single else x


def identity_codec() -> Codec:
    return Codec("identity")


def fit_autoencoder(normals: np.ndarray, config: CodecConfig | None = None, seed: int = 0) -> Codec:
    """Train the conv autoencoder on ``normals`` (N, H, W) and compute latent statistics.

    Raises :class:`CodecFitError` (carrying the trained codec) if the held-out
    reconstruction MSE ends above ``config.target_mse``.
    """
    config = config or CodecConfig()
    config.validate()
    if config.variant == "identity":
        return identity_codec()
    normals = np.asarray(normals, dtype=np.float32)
    if len(normals) < config.min_images:
        raise ValueError(f"need at least {config.min_images} normal images, got {len(normals)}")
    f = config.scale_factor
    if normals.shape[1] % f or normals.shape[2] % f:
        raise ValueError(f"image dims {normals.shape[1:]} not divisible by scale factor {f}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(normals))
    n_hold = max(1, int(round(config.holdout_fraction * len(normals))))
    hold, train = normals[order[:n_hold]], normals[order[n_hold:]]

    model = ConvAutoencoder(1, config.latent_channels, f, config.width, seed=seed)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    codec = Codec("conv-autoencoder", model)
    n_batches = max(1, len(train) // config.batch_size)
    total = max(1, config.epochs * n_batches)
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(len(train))
        losses = []
        for b in range(n_batches):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            x = Tensor(train[idx, None])
            opt.lr = scheduled_lr(config.lr, "cosine", step, total)
            with Graph() as g:
                diff = ad.sub(model(x), x)
                loss = ad.mul_scalar(ad.sq_norm(diff), 1.0 / diff.size)
            opt.step(g.backward(loss, model.parameters()), clip=1.0)
            losses.append(loss.item())
            step += 1
        codec.loss_curve.append(float(np.mean(losses)))
        log.debug("codec epoch %d: train mse %.5f", epoch, codec.loss_curve[-1])

    codec.stats = LatentStats.from_latents(codec.raw_encode(train))
    rec = codec.decode(codec.encode(hold))
    codec.fit_mse = float(np.mean((rec.astype(np.float64) - hold) ** 2))
    log.info("codec fitted: held-out mse %.5f (target %.5f)", codec.fit_mse, config.target_mse)
    if codec.fit_mse > config.target_mse:
        raise CodecFitError(codec.fit_mse, config.target_mse, codec)
    return codec
