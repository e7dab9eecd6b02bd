"""Synthetic latent corruption for building (corrupted, normal) training pairs.

A corruption draw picks up to N disjoint random-walk regions on the latent grid.
Each region gets a replacement field (structured Gaussian noise or a texture
crop) and a severity ``alpha``, and the masked entries are blended as

    y0 = sqrt(1 - alpha) * y1 + sqrt(alpha) * r    (inside the region)
    y0 = y1                                        (everywhere else)

which keeps standard-normal entries standard normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .phantom import value_noise

STRATEGIES = ("structured-noise", "texture-patch")
_MOVES = np.array([(1, 0), (-1, 0), (0, 1), (0, -1)])


class OverlapError(ValueError):
    """Raised when corruption regions share cells."""


@dataclass
class CorruptionConfig:
    region_count_range: tuple[int, int] = (1, 4)
    walk_steps_range: tuple[int, int] = (0, 40)
    alpha_range: tuple[float, float] = (0.05, 1.0)
    strategy_weights: tuple[float, float] = (0.5, 0.5)
    max_area_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("region_count_range", "walk_steps_range", "alpha_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a non-empty, non-negative range, got {(lo, hi)}")
        lo, hi = self.alpha_range
        if hi > 1:
            raise ValueError(f"alpha_range must lie in [0, 1], got {(lo, hi)}")
        w = self.strategy_weights
        if len(w) != len(STRATEGIES) or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"strategy_weights must be {len(STRATEGIES)} non-negative values summing to 1, got {w}")
        if not 0 < self.max_area_fraction <= 1:
            raise ValueError(f"max_area_fraction must be in (0, 1], got {self.max_area_fraction}")


@dataclass
class MaskRegion:
    cells: np.ndarray  # (h, w) bool
    replacement: np.ndarray  # (C, h, w)
    alpha: float
    strategy: str = "structured-noise"


@dataclass
class CorruptionSpec:
    regions: list[MaskRegion] = field(default_factory=list)

    def union_mask(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        for r in self.regions:
            m |= r.cells
        return m


def random_walk_mask(
    foreground: np.ndarray, steps: int, rng: np.random.Generator, max_cells: int | None = None
) -> np.ndarray:
    """Cells visited by a ``steps``-move walk over 4-neighbours inside ``foreground``.

    The start is uniform over foreground cells; every move is uniform over the
    neighbours that stay inside the foreground (a cell with none stays put).
    The walk stops early once ``max_cells`` distinct cells are visited.
    """
    foreground = np.asarray(foreground, dtype=bool)
    cells = np.argwhere(foreground)
    if len(cells) == 0:
        raise ValueError("random walk needs a non-empty foreground")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    h, w = foreground.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = foreground
    mask = np.zeros_like(foreground)
    r, c = cells[rng.integers(len(cells))]
    mask[r, c] = True
    visited = 1
    for _ in range(steps):
        if max_cells is not None and visited >= max_cells:
            break
        ok = [m for m in _MOVES if padded[r + 1 + m[0], c + 1 + m[1]]]
        if not ok:
            break
        dr, dc = ok[rng.integers(len(ok))]
        r, c = r + dr, c + dc
        visited += not mask[r, c]
        mask[r, c] = True
    return mask


def structured_noise(channels: int, h: int, w: int, rng: np.random.Generator, beta: float | None = None) -> np.ndarray:
    """``sqrt(beta) * q + sqrt(1 - beta) * p`` per channel.

    ``beta ~ U[0, 1]`` is drawn once and shared by all channels; each channel
    gets its own scalar ``q ~ N(0, 1)`` and field ``p ~ N(0, I)``.
    """
    if min(channels, h, w) < 1:
        raise ValueError(f"dims must be >= 1, got {(channels, h, w)}")
    if beta is None:
        beta = rng.uniform(0.0, 1.0)
    q = rng.standard_normal((channels, 1, 1))
    p = rng.standard_normal((channels, h, w))
    return (np.sqrt(beta) * q + np.sqrt(1.0 - beta) * p).astype(np.float32)


def corrupt(y1: np.ndarray, regions: Sequence[MaskRegion]) -> np.ndarray:
    """Blend each region's replacement into ``y1``; entries outside every region are copied bitwise."""
    y1 = np.asarray(y1)
    y0 = y1.copy()
    claimed = np.zeros(y1.shape[-2:], dtype=bool)
    for k, reg in enumerate(regions):
        if reg.cells.shape != claimed.shape:
            raise ValueError(f"region {k} grid {reg.cells.shape} does not match latent grid {claimed.shape}")
        if np.any(claimed & reg.cells):
            raise OverlapError(f"region {k} overlaps an earlier region")
        if reg.replacement.shape != y1.shape:
            raise ValueError(f"region {k} replacement shape {reg.replacement.shape} != latent shape {y1.shape}")
        claimed |= reg.cells
        a = float(reg.alpha)
        m = reg.cells
        y0[..., m] = (np.sqrt(1.0 - a) * y1[..., m] + np.sqrt(a) * reg.replacement[..., m]).astype(y1.dtype)
    return y0


class TextureBank:
    """Standardised latent texture fields to crop replacements from."""

    def __init__(self, latents: Sequence[np.ndarray]):
        if not latents:
            raise ValueError("texture bank needs at least one texture")
        self.latents = [self._standardise(np.asarray(z, dtype=np.float32)) for z in latents]

    @staticmethod
    def _standardise(z: np.ndarray) -> np.ndarray:
        mu = z.mean(axis=(1, 2), keepdims=True)
        sd = z.std(axis=(1, 2), keepdims=True)
        return ((z - mu) / np.maximum(sd, 1e-6)).astype(np.float32)

    def __len__(self) -> int:
        return len(self.latents)

    def replacement_for(self, cells: np.ndarray, channels: int, rng: np.random.Generator) -> np.ndarray:
        """A (C, h, w) field whose values under ``cells`` come from a random crop.

        The crop has the size of the region's bounding box and is tiled when a
        texture is smaller than that box.
        """
        h, w = cells.shape
        rows, cols = np.nonzero(cells)
        r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
        bh, bw = r1 - r0, c1 - c0
        tex = self.latents[rng.integers(len(self.latents))]
        if tex.shape[0] != channels:
            raise ValueError(f"texture has {tex.shape[0]} channels, latent has {channels}")
        th, tw = tex.shape[1:]
        if th < bh or tw < bw:
            tex = np.tile(tex, (1, -(-bh // th), -(-bw // tw)))
            th, tw = tex.shape[1:]
        oy = rng.integers(th - bh + 1)
        ox = rng.integers(tw - bw + 1)
        out = np.zeros((channels, h, w), dtype=np.float32)
        out[:, r0:r1, c0:c1] = tex[:, oy : oy + bh, ox : ox + bw]
        return out


def procedural_textures(n: int, size: int, seed: int) -> list[np.ndarray]:
    """Grayscale (size, size) textures in [0, 1]: value noise, stripes and checkerboards."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = []
    for i in range(n):
        kind = i % 3
        if kind == 0:
            img = 0.5 + 0.5 * value_noise((size, size), int(rng.integers(4, 17)), rng)
        else:
            period = rng.uniform(3.0, size / 3)
            ang = rng.uniform(0, np.pi)
            u = xx * np.cos(ang) + yy * np.sin(ang)
            if kind == 1:
                img = 0.5 + 0.5 * np.sin(2 * np.pi * u / period)
            else:
                v = -xx * np.sin(ang) + yy * np.cos(ang)
                img = ((np.floor(u / period) + np.floor(v / period)) % 2).astype(np.float64)
        out.append(np.clip(img, 0, 1).astype(np.float32))
    return out


def read_texture_dir(path: str | Path, size: int) -> list[np.ndarray]:
    """Load every ``*.pgm`` under ``path`` as [0, 1] floats, centre-cropped or tiled to ``size``."""
    from .persist import read_pgm

    out = []
    for f in sorted(Path(path).glob("*.pgm")):
        img = read_pgm(f).astype(np.float32) / 255.0
        if img.shape[0] < size or img.shape[1] < size:
            img = np.tile(img, (-(-size // img.shape[0]), -(-size // img.shape[1])))
        oy = (img.shape[0] - size) // 2
        ox = (img.shape[1] - size) // 2
        out.append(img[oy : oy + size, ox : ox + size])
    return out


def sample_regions(
    latent_shape: tuple[int, int, int],
    config: CorruptionConfig,
    rng: np.random.Generator,
    foreground: np.ndarray | None = None,
    texture_bank: TextureBank | None = None,
) -> CorruptionSpec:
    """Draw a full corruption description for one latent.

    Regions are grown one after another; cells claimed by earlier regions are
    removed from the walkable area of later ones, so regions never overlap.
    The union stays strictly below ``max_area_fraction`` of the foreground
    (a walk that would reach it is cut short; a foreground too small for even
    one cell under the cap gets a single cell). If the budget or the free
    foreground runs out, fewer regions are returned.
    """
    c, h, w = latent_shape
    free = np.ones((h, w), dtype=bool) if foreground is None else np.asarray(foreground, dtype=bool).copy()
    area = int(free.sum())
    budget = max(1, int(np.ceil(config.max_area_fraction * area)) - 1)
    n_regions = int(rng.integers(config.region_count_range[0], config.region_count_range[1] + 1))
    spec = CorruptionSpec()
    for _ in range(n_regions):
        if not free.any() or budget < 1:
            break
        steps = int(rng.integers(config.walk_steps_range[0], config.walk_steps_range[1] + 1))
        cells = random_walk_mask(free, steps, rng, max_cells=budget)
        budget -= int(cells.sum())
        free &= ~cells
        strategy = STRATEGIES[rng.choice(len(STRATEGIES), p=config.strategy_weights)]
        if strategy == "texture-patch" and texture_bank is not None:
            repl = texture_bank.replacement_for(cells, c, rng)
        else:
            strategy = "structured-noise"
            repl = structured_noise(c, h, w, rng)
        alpha = float(rng.uniform(*config.alpha_range))
        spec.regions.append(MaskRegion(cells, repl, alpha, strategy))
    return spec


def make_pair(
    y1: np.ndarray,
    config: CorruptionConfig,
    rng: np.random.Generator,
    foreground: np.ndarray | None = None,
    texture_bank: TextureBank | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(y0, y1, union_mask)`` for a single (C, h, w) latent."""
    spec = sample_regions(y1.shape, config, rng, foreground, texture_bank)
    return corrupt(y1, spec.regions), y1, spec.union_mask(y1.shape[-2:])


def make_pairs(
    y1: np.ndarray,
    config: CorruptionConfig,
    rng: np.random.Generator,
    foregrounds: np.ndarray | None = None,
    texture_bank: TextureBank | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`make_pair`: returns ``(y0, masks)`` for a (N, C, h, w) batch."""
    y0 = np.empty_like(y1)
    masks = np.zeros((y1.shape[0],) + y1.shape[2:], dtype=bool)
    for i in range(y1.shape[0]):
        fg = None if foregrounds is None else foregrounds[i]
        y0[i], _, masks[i] = make_pair(y1[i], config, rng, fg, texture_bank)
    return y0, masks


def downsample_foreground(foreground: np.ndarray, factor: int, threshold: float = 0.5) -> np.ndarray:
    """Average-pool a (…, H, W) boolean mask by ``factor`` and keep cells above ``threshold``."""
    if factor == 1:
        return np.asarray(foreground, dtype=bool)
    *lead, h, w = foreground.shape
    pooled = foreground.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))
    return pooled > threshold

