"""Glue between phantoms, codec, corruption and flow used by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .codec import Codec
from .corruption import CorruptionConfig, TextureBank, downsample_foreground, procedural_textures, read_texture_dir
from .flow import CorruptionPairs, FlowModel, TrainConfig, reflow, train
from .nets import MlpVelocity, UNetVelocity
from .phantom import make_normals

log = logging.getLogger(__name__)


@dataclass
class LatentSet:
    images: np.ndarray  # (N, H, W)
    foregrounds: np.ndarray  # (N, H, W) bool
    latents: np.ndarray  # (N, C, h, w)
    latent_fg: np.ndarray  # (N, h, w) bool


def phantom_arrays(n: int, seed: int, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    ph = make_normals(n, seed, size)
    return np.stack([p.image for p in ph]), np.stack([p.foreground for p in ph])


def encode_set(codec: Codec, images: np.ndarray, foregrounds: np.ndarray) -> LatentSet:
    latents = codec.encode(images)
    fg = downsample_foreground(foregrounds, codec.scale_factor)
    return LatentSet(images, foregrounds, latents, fg)


def texture_bank(codec: Codec, n: int, size: int, seed: int, texture_dir: str | None = None) -> TextureBank:
    """Procedural textures (plus any PGMs in ``texture_dir``) encoded by ``codec``."""
    textures = procedural_textures(n, size, seed)
    if texture_dir:
        textures += read_texture_dir(texture_dir, size)
    return TextureBank(list(codec.encode(np.stack(textures))))


def make_velocity(kind: str, channels: int, preset: str = "XS", seed: int = 0, dim: int | None = None):
    if kind == "unet":
        return UNetVelocity.from_preset(preset, channels=channels, seed=seed)
    if kind == "mlp":
        return MlpVelocity(dim or channels, seed=seed)
    raise ValueError(f"unknown velocity kind {kind!r}")


def train_flow(
    data: LatentSet,
    corruption: CorruptionConfig,
    train_cfg: TrainConfig,
    bank: TextureBank | None = None,
    preset: str = "XS",
) -> FlowModel:
    model = make_velocity("unet", data.latents.shape[1], preset, seed=train_cfg.seed)
    source = CorruptionPairs(data.latents, corruption, data.latent_fg, bank)
    return train(model, source, train_cfg)


def reflow_flow(
    teacher: FlowModel,
    data: LatentSet,
    corruption: CorruptionConfig,
    train_cfg: TrainConfig,
    bank: TextureBank | None = None,
) -> FlowModel:
    source = CorruptionPairs(data.latents, corruption, data.latent_fg, bank)
    return reflow(teacher, source, train_cfg)
