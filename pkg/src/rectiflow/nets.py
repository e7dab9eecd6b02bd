"""Velocity fields v(y, t) and a small convolutional autoencoder.

All models keep their weights in an ordered ``params`` dict of named
:class:`~rectiflow.autodiff.Tensor` leaves, so training code, checkpoints and
optimizers only ever deal with a flat name -> tensor mapping.
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

NUM_FREQUENCIES = 8


def time_embedding(t, num_frequencies: int = NUM_FREQUENCIES, batch: int | None = None) -> np.ndarray:
    """Sinusoidal features ``[sin(2^k pi t), cos(2^k pi t)]`` for k < num_frequencies.

    ``t`` may be a scalar (broadcast to ``batch`` rows) or a length-N array.
    Returns an (N, 2K) float32 array.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(batch or 1, float(t))
    if t.ndim != 1 or (batch is not None and t.shape[0] != batch):
        raise ShapeError(f"time embedding: expected {batch} time values, got shape {t.shape}")
    if np.any(t < 0) or np.any(t > 1) or not np.isfinite(t).all():
        raise ValueError(f"time must lie in [0, 1], got range [{t.min()}, {t.max()}]")
    freqs = (2.0 ** np.arange(num_frequencies)) * math.pi
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class Module:
    """Base class: named parameters plus declared initialisation rules."""

    kind = "module"

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self._init_rules: dict[str, tuple[str, float]] = {}

    def _add(self, name: str, shape: tuple[int, ...], rule: str = "he", fan_in: float = 1.0) -> Tensor:
        t = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = t
        self._init_rules[name] = (rule, fan_in)
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise KeyError(f"state dict mismatch: missing {missing}, unexpected {extra}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def config(self) -> dict[str, Any]:
        raise NotImplementedError


def init_params(model: Module, seed: int) -> dict[str, Tensor]:
    """He-normal weights scaled by fan-in, zero biases, zero output layer.

    The same seed always yields bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        rule, fan_in = model._init_rules[name]
        if rule == "he":
            p.data = (rng.standard_normal(p.shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        else:
            p.data = np.zeros(p.shape, dtype=np.float32)
    return model.params


def _conv(model: Module, name: str, cin: int, cout: int, k: int = 3, zero: bool = False) -> None:
    model._add(f"{name}.w", (cout, cin, k, k), "zero" if zero else "he", cin * k * k)
    model._add(f"{name}.b", (cout,), "zero")


def _conv_t(model: Module, name: str, cin: int, cout: int, k: int = 4, stride: int = 2) -> None:
    # each output pixel sees cin * (k / stride)^2 inputs
    model._add(f"{name}.w", (cin, cout, k, k), "he", cin * k * k / stride**2)
    model._add(f"{name}.b", (cout,), "zero")


def _linear(model: Module, name: str, fan_in: int, fan_out: int, zero: bool = False) -> None:
    model._add(f"{name}.w", (fan_in, fan_out), "zero" if zero else "he", fan_in)
    model._add(f"{name}.b", (fan_out,), "zero")


class MlpVelocity(Module):
    """Velocity field on flat vectors: (N, d) plus time -> (N, d)."""

    kind = "mlp"

    def __init__(self, dim: int, hidden: tuple[int, ...] = (128, 128), num_frequencies: int = NUM_FREQUENCIES, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.hidden = tuple(hidden)
        self.num_frequencies = num_frequencies
        # first layer split into data and time halves; equivalent to concatenating the inputs
        self._add("in_y.w", (dim, hidden[0]), "he", dim + 2 * num_frequencies)
        self._add("in_t.w", (2 * num_frequencies, hidden[0]), "he", dim + 2 * num_frequencies)
        self._add("in.b", (hidden[0],), "zero")
        for i in range(1, len(hidden)):
            _linear(self, f"h{i}", hidden[i - 1], hidden[i])
        _linear(self, "out", hidden[-1], dim, zero=True)
        init_params(self, seed)

    def config(self) -> dict[str, Any]:
        return {"kind": self.kind, "dim": self.dim, "hidden": list(self.hidden), "num_frequencies": self.num_frequencies}

    def __call__(self, y: Tensor, t) -> Tensor:
        if y.ndim != 2 or y.shape[1] != self.dim:
            raise ShapeError(f"mlp velocity expects (N, {self.dim}) input, got {y.shape}")
        p = self.params
        emb = Tensor(time_embedding(t, self.num_frequencies, y.shape[0]))
        h = ad.add_bias(ad.add(ad.matmul(y, p["in_y.w"]), ad.matmul(emb, p["in_t.w"])), p["in.b"])
        h = ad.silu(h)
        for i in range(1, len(self.hidden)):
            h = ad.silu(ad.add_bias(ad.matmul(h, p[f"h{i}.w"]), p[f"h{i}.b"]))
        return ad.add_bias(ad.matmul(h, p["out.w"]), p["out.b"])

    def expected_param_count(self) -> int:
        k2 = 2 * self.num_frequencies
        widths = self.hidden
        n = (self.dim + k2) * widths[0] + widths[0]
        n += sum(widths[i - 1] * widths[i] + widths[i] for i in range(1, len(widths)))
        return n + widths[-1] * self.dim + self.dim


UNET_PRESETS: dict[str, dict[str, Any]] = {
    "XS": {"base_channels": 16, "channel_mults": (1, 2, 2)},
    "S": {"base_channels": 36, "channel_mults": (1, 2, 3)},
    "M": {"base_channels": 72, "channel_mults": (1, 2, 3)},
}


class UNetVelocity(Module):
    """U-shaped convolutional velocity field on (N, C, h, w) latents.

    Each resolution level has a two-conv block whose first conv output gets a
    per-channel time projection added. Downsampling is 2x average pooling,
    upsampling is 2x bilinear, and mirrored levels are joined by channel
    concatenation.
    """

    kind = "unet"

    def __init__(
        self,
        channels: int = 4,
        base_channels: int = 16,
        channel_mults: tuple[int, ...] = (1, 2, 2),
        num_frequencies: int = NUM_FREQUENCIES,
        seed: int = 0,
    ):
        super().__init__()
        if len(channel_mults) < 2:
            raise ValueError("channel_mults needs at least two levels")
        self.channels = channels
        self.base_channels = base_channels
        self.channel_mults = tuple(channel_mults)
        self.num_frequencies = num_frequencies
        self.depth = len(channel_mults) - 1
        ch = [base_channels * m for m in channel_mults]
        self.level_channels = ch
        _conv(self, "stem", channels, ch[0])
        for i in range(self.depth):
            self._block(f"enc{i}", ch[max(i - 1, 0)], ch[i])
        self._block("mid", ch[self.depth - 1], ch[self.depth])
        for i in reversed(range(self.depth)):
            self._block(f"dec{i}", ch[i + 1] + ch[i], ch[i])
        _conv(self, "out", ch[0], channels, zero=True)
        init_params(self, seed)

    @classmethod
    def from_preset(cls, preset: str, channels: int = 4, seed: int = 0) -> UNetVelocity:
        try:
            cfg = UNET_PRESETS[preset]
        except KeyError:
            raise ValueError(f"unknown UNet preset {preset!r}; choose from {sorted(UNET_PRESETS)}") from None
        return cls(channels=channels, seed=seed, **cfg)

    def config(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "channels": self.channels,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "num_frequencies": self.num_frequencies,
        }

    def _block(self, name: str, cin: int, cout: int) -> None:
        _conv(self, f"{name}.c1", cin, cout)
        _linear(self, f"{name}.t", 2 * self.num_frequencies, cout)
        _conv(self, f"{name}.c2", cout, cout)

    def _run_block(self, name: str, h: Tensor, emb: Tensor) -> Tensor:
        p = self.params
        h = ad.add_bias(ad.conv2d(h, p[f"{name}.c1.w"], padding=1), p[f"{name}.c1.b"])
        temb = ad.add_bias(ad.matmul(emb, p[f"{name}.t.w"]), p[f"{name}.t.b"])
        h = ad.silu(ad.add_channelwise(h, temb))
        h = ad.add_bias(ad.conv2d(h, p[f"{name}.c2.w"], padding=1), p[f"{name}.c2.b"])
        return ad.silu(h)

    def __call__(self, y: Tensor, t) -> Tensor:
        if y.ndim != 4 or y.shape[1] != self.channels:
            raise ShapeError(f"unet velocity expects (N, {self.channels}, h, w) input, got {y.shape}")
        div = 2**self.depth
        if y.shape[2] % div or y.shape[3] % div:
            raise ShapeError(f"unet velocity: spatial dims {y.shape[2:]} not divisible by {div}")
        p = self.params
        emb = Tensor(time_embedding(t, self.num_frequencies, y.shape[0]))
        h = ad.add_bias(ad.conv2d(y, p["stem.w"], padding=1), p["stem.b"])
        skips = []
        for i in range(self.depth):
            h = self._run_block(f"enc{i}", h, emb)
            skips.append(h)
            h = ad.avgpool2d(h, 2)
        h = self._run_block("mid", h, emb)
        for i in reversed(range(self.depth)):
            skip = skips[i]
            h = ad.upsample_bilinear(h, skip.shape[2:])
            h = self._run_block(f"dec{i}", ad.concat_channels(h, skip), emb)
        return ad.add_bias(ad.conv2d(h, p["out.w"], padding=1), p["out.b"])

    def expected_param_count(self) -> int:
        k2 = 2 * self.num_frequencies
        ch = self.level_channels

        def conv(cin, cout):
            return 9 * cin * cout + cout

        def block(cin, cout):
            return conv(cin, cout) + k2 * cout + cout + conv(cout, cout)

        n = conv(self.channels, ch[0]) + conv(ch[0], self.channels)
        n += sum(block(ch[max(i - 1, 0)], ch[i]) for i in range(self.depth))
        n += block(ch[self.depth - 1], ch[self.depth])
        n += sum(block(ch[i + 1] + ch[i], ch[i]) for i in range(self.depth))
        return n


class ConvAutoencoder(Module):
    """Strided-conv encoder / transposed-conv decoder with spatial factor 4 or 8."""

    kind = "autoencoder"

    def __init__(self, in_channels: int = 1, latent_channels: int = 4, scale_factor: int = 4, width: int = 16, seed: int = 0):
        super().__init__()
        if scale_factor not in (4, 8):
            raise ValueError(f"scale_factor must be 4 or 8, got {scale_factor}")
        self.in_channels = in_channels
        self.latent_channels = latent_channels
        self.scale_factor = scale_factor
        self.width = width
        self.n_down = int(math.log2(scale_factor))
        widths = [width] + [2 * width] * self.n_down
        self._widths = widths
        _conv(self, "enc.in", in_channels, widths[0])
        for i in range(self.n_down):
            _conv(self, f"enc.down{i}", widths[i], widths[i + 1], k=4)
        _conv(self, "enc.out", widths[-1], latent_channels)
        _conv(self, "dec.in", latent_channels, widths[-1])
        for i in reversed(range(self.n_down)):
            _conv_t(self, f"dec.up{i}", widths[i + 1], widths[i])
        _conv(self, "dec.out", widths[0], in_channels)
        init_params(self, seed)

    def config(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "latent_channels": self.latent_channels,
            "scale_factor": self.scale_factor,
            "width": self.width,
        }

    def encode(self, x: Tensor) -> Tensor:
        f = self.scale_factor
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"autoencoder expects (N, {self.in_channels}, H, W) with H, W divisible by {f}, got {x.shape}")
        p = self.params
        h = ad.silu(ad.add_bias(ad.conv2d(x, p["enc.in.w"], padding=1), p["enc.in.b"]))
        for i in range(self.n_down):
            h = ad.silu(ad.add_bias(ad.conv2d(h, p[f"enc.down{i}.w"], stride=2, padding=1), p[f"enc.down{i}.b"]))
        return ad.add_bias(ad.conv2d(h, p["enc.out.w"], padding=1), p["enc.out.b"])

    def decode(self, z: Tensor) -> Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(f"autoencoder decode expects (N, {self.latent_channels}, h, w), got {z.shape}")
        p = self.params
        h = ad.silu(ad.add_bias(ad.conv2d(z, p["dec.in.w"], padding=1), p["dec.in.b"]))
        for i in reversed(range(self.n_down)):
            h = ad.conv2d_transpose(h, p[f"dec.up{i}.w"], stride=2, padding=1)
            h = ad.silu(ad.add_bias(h, p[f"dec.up{i}.b"]))
        return ad.add_bias(ad.conv2d(h, p["dec.out.w"], padding=1), p["dec.out.b"])

    def __call__(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


def velocity_forward(model: Module, y: Tensor, t) -> Tensor:
    """Evaluate v(y, t); ``t`` is a scalar or one value per batch row."""
    return model(y, t)


def build_model(config: dict[str, Any], seed: int = 0) -> Module:
    """Reconstruct a model from the dict produced by ``Module.config()``."""
    cfg = dict(config)
    kind = cfg.pop("kind")
    if kind == "mlp":
        cfg["hidden"] = tuple(cfg["hidden"])
        return MlpVelocity(seed=seed, **cfg)
    if kind == "unet":
        cfg["channel_mults"] = tuple(cfg["channel_mults"])
        return UNetVelocity(seed=seed, **cfg)
    if kind == "autoencoder":
        return ConvAutoencoder(seed=seed, **cfg)
    raise ValueError(f"unknown model kind {kind!r}")
