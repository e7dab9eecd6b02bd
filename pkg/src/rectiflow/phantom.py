"""Procedural desk-scale data.

* brain-like grayscale phantoms with a known foreground mask,
* ground-truth lesion injection for evaluation (image space, exact masks),
* 2-D vector transport tasks for sanity-checking the flow in vector mode.

Lesions are grown by a walker defined here, deliberately separate from the
latent-space corruption sampler used for training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .autodiff import bilinear_matrix

LESION_KINDS = ("bright-blob", "dark-blob", "texture-patch")
VECTOR_TASKS = ("gaussian-offset", "two-moons-perturbed")


@dataclass
class Phantom:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    foreground: np.ndarray  # (H, W) bool
    seed: int
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class LesionCase:
    image: np.ndarray
    gt_mask: np.ndarray
    severity: float
    kind: str
    seed: int
    phantom: Phantom


def value_noise(shape: tuple[int, int], cells: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random field in roughly [-1, 1]: a coarse uniform grid, bilinearly upsampled."""
    coarse = rng.uniform(-1, 1, size=(cells, cells))
    mh = bilinear_matrix(cells, shape[0])
    mw = bilinear_matrix(cells, shape[1])
    return mh @ coarse @ mw.T


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def gen_phantom(seed: int, size: int = 64) -> Phantom:
    """Elliptical "brain" with white/grey matter contrast, dark ventricles and soft texture."""
    rng = np.random.default_rng(seed)
    cy = size / 2 + rng.uniform(-0.03, 0.03) * size
    cx = size / 2 + rng.uniform(-0.03, 0.03) * size
    a = rng.uniform(0.33, 0.43) * size
    b = rng.uniform(0.33, 0.43) * size
    theta = rng.uniform(-0.3, 0.3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    foreground = r <= 1.0

    wobble = 0.06 * value_noise((size, size), 5, rng)
    wm_edge = rng.uniform(0.62, 0.75)
    white = _smoothstep((wm_edge + wobble - r) / 0.1)
    grey_level = rng.uniform(0.45, 0.55)
    white_level = rng.uniform(0.7, 0.8)
    img = grey_level + (white_level - grey_level) * white

    vent_off = rng.uniform(0.12, 0.2) * a
    vent_a = rng.uniform(0.07, 0.12) * a
    vent_b = rng.uniform(0.18, 0.3) * b
    vent = np.zeros_like(img)
    for sgn in (-1.0, 1.0):
        rv = np.sqrt(((u - sgn * vent_off) / vent_a) ** 2 + (v / vent_b) ** 2)
        vent = np.maximum(vent, _smoothstep((1.1 - rv) / 0.3))
    img = img + (0.18 - img) * vent

    grad = rng.uniform(-0.05, 0.05)
    img = img + grad * u / a
    img = img + 0.04 * value_noise((size, size), 9, rng)
    rim = _smoothstep((r - 0.9) / 0.1)
    img = img * (1 - 0.25 * rim)
    img = np.where(foreground, np.clip(img, 0.0, 1.0), 0.0).astype(np.float32)
    params = {
        "center": [cy, cx],
        "axes": [a, b],
        "theta": theta,
        "white_edge": wm_edge,
        "ventricle": [vent_off, vent_a, vent_b],
    }
    return Phantom(img, foreground, seed, params)


def _lesion_walk(foreground: np.ndarray, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Visited set of a 4-neighbour walk painted with a plus-shaped brush, clipped to the foreground."""
    fg = np.argwhere(foreground)
    # start away from the rim so the lesion mostly sits inside tissue
    interior = foreground.copy()
    for shift in ((2, 0), (-2, 0), (0, 2), (0, -2)):
        interior &= np.roll(foreground, shift, axis=(0, 1))
    starts = np.argwhere(interior)
    pos = starts[rng.integers(len(starts))] if len(starts) else fg[rng.integers(len(fg))]
    h, w = foreground.shape
    visited = np.zeros_like(foreground)
    visited[pos[0], pos[1]] = True
    moves = np.array([(1, 0), (-1, 0), (0, 1), (0, -1)])
    for _ in range(steps):
        nxt = pos + moves[rng.integers(4)]
        if 0 <= nxt[0] < h and 0 <= nxt[1] < w and foreground[nxt[0], nxt[1]]:
            pos = nxt
            visited[pos[0], pos[1]] = True
    mask = visited.copy()
    mask[1:] |= visited[:-1]
    mask[:-1] |= visited[1:]
    mask[:, 1:] |= visited[:, :-1]
    mask[:, :-1] |= visited[:, 1:]
    return mask & foreground


def _lesion_intensity(kind: str, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    if kind == "bright-blob":
        return np.ones(shape)
    if kind == "dark-blob":
        return np.full(shape, 0.05)
    if kind == "texture-patch":
        period = rng.uniform(3.0, 7.0)
        angle = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
        phase = (xx * np.cos(angle) + yy * np.sin(angle)) * 2 * np.pi / period
        return 0.5 + 0.45 * np.sign(np.sin(phase))
    raise ValueError(f"unknown lesion kind {kind!r}; choose from {LESION_KINDS}")


def inject_lesion(phantom: Phantom, seed: int, kind: str = "bright-blob", severity: float = 1.0) -> LesionCase:
    """Blend a random-walk-shaped lesion into ``phantom`` with weight ``severity``."""
    if not severity > 0:
        raise ValueError(f"severity must be positive, got {severity}")
    severity = min(float(severity), 1.0)
    rng = np.random.default_rng(seed)
    size = phantom.image.shape[0]
    steps = int(rng.integers(80, 300) * (size / 64) ** 2)
    mask = _lesion_walk(phantom.foreground, steps, rng)
    target = _lesion_intensity(kind, phantom.image.shape, rng)
    img = phantom.image.astype(np.float64)
    blended = img + severity * (target - img)
    out = np.where(mask, blended, img).astype(np.float32)
    return LesionCase(out, mask, severity, kind, seed, phantom)


def make_normals(n: int, seed: int, size: int = 64) -> list[Phantom]:
    ss = np.random.SeedSequence(seed)
    return [gen_phantom(int(s.generate_state(1)[0]), size) for s in ss.spawn(n)]


def make_lesion_cases(
    n: int,
    seed: int,
    size: int = 64,
    kinds: tuple[str, ...] = LESION_KINDS,
    severity_range: tuple[float, float] = (0.3, 1.0),
) -> list[LesionCase]:
    """``n`` lesioned phantoms with kinds cycled and severities drawn uniformly."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n):
        phantom_seed, lesion_seed = (int(x) for x in rng.integers(0, 2**63 - 1, size=2))
        sev = float(rng.uniform(*severity_range))
        cases.append(inject_lesion(gen_phantom(phantom_seed, size), lesion_seed, kinds[i % len(kinds)], sev))
    return cases


def gen_vector_task(
    name: str,
    n: int,
    seed: int,
    offset: tuple[float, ...] = (2.0, -1.0),
    jitter: float = 0.2,
) -> tuple[np.ndarray, np.ndarray]:
    """Paired (corrupted, clean) point sets, each of shape (n, d).

    ``gaussian-offset``: clean points ~ N(0, I), corrupted = clean + ``offset``.
    ``two-moons-perturbed``: clean points on two noiseless half-circles,
    corrupted = clean + isotropic Gaussian noise scaled so the mean
    displacement norm equals ``jitter``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if name == "gaussian-offset":
        c = np.asarray(offset, dtype=np.float64)
        x1 = rng.standard_normal((n, c.size))
        x0 = x1 + c
    elif name == "two-moons-perturbed":
        upper = rng.random(n) < 0.5
        ang = rng.uniform(0, np.pi, n)
        x1 = np.where(
            upper[:, None],
            np.stack([np.cos(ang), np.sin(ang)], axis=1),
            np.stack([1 - np.cos(ang), 0.5 - np.sin(ang)], axis=1),
        )
        # mean norm of a 2-D standard normal is sqrt(pi / 2)
        x0 = x1 + jitter * np.sqrt(2 / np.pi) * rng.standard_normal((n, 2))
    else:
        raise ValueError(f"unknown vector task {name!r}; choose from {VECTOR_TASKS}")
    return x0.astype(np.float32), x1.astype(np.float32)
