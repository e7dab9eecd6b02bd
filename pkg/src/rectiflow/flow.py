"""Rectified-flow training, reflow and Euler transport.

Time and direction conventions used throughout the package:

* ``t = 0`` is the corrupted end and ``t = 1`` the normal end; the training
  interpolant is ``y_t = (1 - t) * y0 + t * y1``.
* The velocity is regressed onto ``y0 - y1``, i.e. it points from the normal
  sample towards its corrupted version. Correction therefore *subtracts* the
  velocity, and a single reverse step at ``t = 0`` is exactly
  ``y - v(y, 0)``.
* ``direction="reverse"`` (correction) integrates t upward from 0 with
  ``z <- z - dt * v(z, t_k)``, ``t_k = k / steps``;
  ``direction="forward"`` is its mirror, integrating t downward from 1 with
  ``z <- z + dt * v(z, t_k)``, ``t_k = 1 - k / steps``.

For a velocity that is constant in z and t both directions are exact and
mutually inverse for any step count.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, NonFiniteError, ShapeError, Tensor
from .corruption import CorruptionConfig, TextureBank, make_pairs
from .nets import Module, build_model
from .optim import AdamW, scheduled_lr

log = logging.getLogger(__name__)

GENERATIONS = ("1-reflect", "2-reflect")
DIRECTIONS = ("forward", "reverse")

VelocityFn = Callable[[np.ndarray, float], np.ndarray]
Velocity = Union[Module, "FlowModel", VelocityFn]


class TrainingDivergedError(FloatingPointError):
    """A non-finite loss or activation appeared during training."""

    def __init__(self, message: str, lr: float, epoch: int, batch_index: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch_index}, lr {lr:.3g})")
        self.lr = lr
        self.epoch = epoch
        self.batch_index = batch_index


class SolverDivergedError(FloatingPointError):
    pass


# -- interpolation and loss ----------------------------------------------------------


def _time_column(t, y: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1) or np.any(~np.isfinite(t)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t.ndim == 0:
        return t
    if t.shape != (y.shape[0],):
        raise ShapeError(f"interpolate: t has shape {t.shape}, expected ({y.shape[0]},) or scalar")
    return t.reshape((-1,) + (1,) * (y.ndim - 1))


def interpolate(y0: np.ndarray, y1: np.ndarray, t) -> np.ndarray:
    """``(1 - t) * y0 + t * y1``; ``t`` is a scalar or one value per batch row."""
    y0 = np.asarray(y0, dtype=np.float32)
    y1 = np.asarray(y1, dtype=np.float32)
    if y0.shape != y1.shape:
        raise ShapeError(f"interpolate: shapes {y0.shape} and {y1.shape} differ")
    tc = _time_column(t, y0)
    if tc.ndim == 0:
        if tc == 0:
            return y0.copy()
        if tc == 1:
            return y1.copy()
    out = (1 - tc) * y0 + tc * y1
    # endpoints stay exact even per-row
    if tc.ndim:
        rows = tc.reshape(-1)
        out[rows == 0] = y0[rows == 0]
        out[rows == 1] = y1[rows == 1]
    return out.astype(np.float32)


def rf_loss(model: Module, y0: np.ndarray, y1: np.ndarray, t) -> Tensor:
    """Batch mean of the per-sample squared error ``||(y0 - y1) - v(y_t, t)||^2``.

    Differentiable with respect to the model parameters when called inside a
    :class:`~rectiflow.autodiff.Graph`.
    """
    y0 = np.asarray(y0, dtype=np.float32)
    y1 = np.asarray(y1, dtype=np.float32)
    yt = interpolate(y0, y1, t)
    pred = model(Tensor(yt), t)
    if pred.shape != y0.shape:
        raise ShapeError(f"rf_loss: velocity shape {pred.shape} != data shape {y0.shape}")
    diff = ad.sub(pred, Tensor(y0 - y1))
    return ad.mul_scalar(ad.sq_norm(diff), 1.0 / y0.shape[0])


# -- models and configs --------------------------------------------------------------


SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    batch_size: int = 96
    lr: float = 5e-4
    reflow_lr: float = 1e-5
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    epochs: int = 20
    reflow_epochs: int = 5
    teacher_steps: int = 10
    seed: int = 0
    # "constant", or "cosine" decay to 5% of the base rate over the run
    schedule: str = "constant"

    def validate(self) -> None:
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.schedule!r}; choose from {SCHEDULES}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.lr > 0 and self.reflow_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.reflow_lr > self.lr:
            raise ValueError(f"reflow_lr {self.reflow_lr} exceeds lr {self.lr}")
        if self.epochs < 0 or self.reflow_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.teacher_steps < 1:
            raise ValueError("teacher_steps must be >= 1")
        if self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("weight_decay must be >= 0 and clip_norm > 0")


@dataclass
class FlowModel:
    velocity: Module
    generation: str = "1-reflect"
    loss_curve: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    epochs: int = 0
    seed: int = 0
    status: str = "untrained"
    teacher_id: str | None = None

    def __post_init__(self) -> None:
        if self.generation not in GENERATIONS:
            raise ValueError(f"generation must be one of {GENERATIONS}, got {self.generation!r}")
        if self.generation == "2-reflect" and not self.teacher_id:
            raise ValueError("a 2-reflect model must record its teacher's checkpoint id")

    def checkpoint_id(self) -> str:
        """Content hash of the velocity parameters (names, shapes and bytes)."""
        h = hashlib.sha256()
        for name, arr in sorted(self.velocity.state_dict().items()):
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def metadata(self) -> dict:
        return {
            "generation": self.generation,
            "loss_curve": list(self.loss_curve),
            "epochs": self.epochs,
            "seed": self.seed,
            "status": self.status,
            "teacher_id": self.teacher_id,
        }


# -- pair sources --------------------------------------------------------------------


class PairSource(Protocol):
    def sample(self, epoch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """All (y0, y1) pairs for one epoch."""


@dataclass
class FixedPairs:
    y0: np.ndarray
    y1: np.ndarray

    def __post_init__(self) -> None:
        self.y0 = np.asarray(self.y0, dtype=np.float32)
        self.y1 = np.asarray(self.y1, dtype=np.float32)
        if self.y0.shape != self.y1.shape:
            raise ShapeError(f"pair shapes differ: {self.y0.shape} vs {self.y1.shape}")

    def sample(self, epoch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        return self.y0, self.y1


@dataclass
class CorruptionPairs:
    """Fresh synthetic corruption of a fixed set of normal latents every epoch."""

    normals: np.ndarray  # (N, C, h, w)
    config: CorruptionConfig
    foregrounds: np.ndarray | None = None  # (N, h, w)
    texture_bank: TextureBank | None = None

    def __post_init__(self) -> None:
        self.normals = np.asarray(self.normals, dtype=np.float32)
        self.config.validate()

    def sample(self, epoch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        y0, _ = make_pairs(self.normals, self.config, rng, self.foregrounds, self.texture_bank)
        return y0, self.normals


# -- training ------------------------------------------------------------------------


def train(
    model: Module,
    source: PairSource,
    config: TrainConfig,
    *,
    lr: float | None = None,
    epochs: int | None = None,
    generation: str = "1-reflect",
    teacher_id: str | None = None,
) -> FlowModel:
    """Fit ``model`` on pairs from ``source`` with AdamW and per-sample uniform t.

    Mutates ``model`` in place and wraps it in a :class:`FlowModel`. Status is
    ``"ok"`` when the last epoch's mean loss is at most half the loss of the
    first batch, ``"warn: ..."`` otherwise.
    """
    config.validate()
    lr = config.lr if lr is None else lr
    epochs = config.epochs if epochs is None else epochs
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=config.weight_decay)
    flow = FlowModel(model, generation, seed=config.seed, teacher_id=teacher_id)
    params = model.parameters()
    step, total_steps = 0, None

    for epoch in range(epochs):
        y0_all, y1_all = source.sample(epoch, rng)
        n = len(y0_all)
        if total_steps is None:
            total_steps = epochs * -(-n // config.batch_size)
        perm = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            t = rng.uniform(0.0, 1.0, size=len(idx))
            opt.lr = scheduled_lr(lr, config.schedule, step, total_steps)
            step += 1
            try:
                with Graph() as g:
                    loss = rf_loss(model, y0_all[idx], y1_all[idx], t)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError("loss is not finite")
                grads = g.backward(loss, params)
                norm = opt.step(grads, clip=config.clip_norm)
                if not np.isfinite(norm):
                    raise NonFiniteError("gradient norm is not finite")
            except NonFiniteError as exc:
                raise TrainingDivergedError(str(exc), opt.lr, epoch, b) from exc
            flow.step_losses.append(value)
            total += value * len(idx)
        flow.loss_curve.append(total / max(n, 1))
        log.info("epoch %d/%d: loss %.5f", epoch + 1, epochs, flow.loss_curve[-1])

    flow.epochs = epochs
    if epochs == 0:
        flow.status = "untrained"
    elif flow.loss_curve[-1] * 2 <= flow.step_losses[0]:
        flow.status = "ok"
    else:
        flow.status = (
            f"warn: final loss {flow.loss_curve[-1]:.4g} not below half of initial {flow.step_losses[0]:.4g}"
        )
        log.warning("training %s", flow.status)
    return flow


# -- transport -----------------------------------------------------------------------


def velocity_fn(model: Velocity) -> VelocityFn:
    """Uniform ``(z, t) -> ndarray`` view of a module, a FlowModel or a plain callable."""
    if isinstance(model, FlowModel):
        model = model.velocity
    if isinstance(model, Module):
        return lambda z, t: model(Tensor(z), t).data
    return model


@dataclass
class Trajectory:
    states: list[np.ndarray]  # steps + 1 entries, states[0] = start
    velocities: list[np.ndarray]  # steps entries
    times: list[float]  # evaluation time of each velocity
    direction: str


def _solve(model: Velocity, z_start: np.ndarray, steps: int, direction: str) -> Trajectory:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    v = velocity_fn(model)
    dt = np.float32(1.0 / steps)
    sign = np.float32(-1.0 if direction == "reverse" else 1.0)
    z = np.asarray(z_start, dtype=np.float32).copy()
    traj = Trajectory([z.copy()], [], [], direction)
    for k in range(steps):
        t = k / steps if direction == "reverse" else 1.0 - k / steps
        vel = np.asarray(v(z, t), dtype=np.float32)
        if vel.shape != z.shape:
            raise ShapeError(f"velocity shape {vel.shape} != state shape {z.shape}")
        z = z + sign * dt * vel
        if not np.all(np.isfinite(z)):
            raise SolverDivergedError(f"non-finite state after step {k + 1}/{steps} (t={t:.3f})")
        traj.states.append(z.copy())
        traj.velocities.append(vel)
        traj.times.append(t)
    return traj


def euler_solve(model: Velocity, z_start: np.ndarray, steps: int = 1, direction: str = "reverse"):
    """Explicit Euler transport; returns ``(z_end, trajectory)``.

    With ``steps=1`` and ``direction="reverse"`` the result is ``z - v(z, 0)``.
    """
    traj = _solve(model, z_start, steps, direction)
    return traj.states[-1], traj


def correct(model: Velocity, y: np.ndarray, steps: int = 1, chunk: int = 256) -> np.ndarray:
    """Reverse transport of a batch, evaluated in chunks to bound memory."""
    y = np.asarray(y, dtype=np.float32)
    return np.concatenate([euler_solve(model, y[i : i + chunk], steps)[0] for i in range(0, len(y), chunk)])


def straightness(model: Velocity, z_starts: np.ndarray, steps: int = 10, direction: str = "reverse") -> float:
    """Mean relative deviation of the step velocities from the overall displacement.

    Per sample: ``mean_k ||s * v_k - d||^2 / ||d||^2`` with ``d = z_end - z_start``
    and ``s = -1`` for reverse transport. Samples with ``||d|| < 1e-8`` are
    skipped; returns 0.0 when every sample is skipped.
    """
    if steps < 2:
        raise ValueError(f"straightness needs steps >= 2, got {steps}")
    traj = _solve(model, z_starts, steps, direction)
    z0 = traj.states[0].astype(np.float64)
    d = traj.states[-1].astype(np.float64) - z0
    axes = tuple(range(1, d.ndim))
    dn = np.sum(d * d, axis=axes)
    keep = np.sqrt(dn) >= 1e-8
    if not keep.any():
        return 0.0
    sign = -1.0 if direction == "reverse" else 1.0
    dev = np.zeros_like(dn)
    for vel in traj.velocities:
        r = sign * vel.astype(np.float64) - d
        dev += np.sum(r * r, axis=axes)
    per_sample = dev[keep] / steps / dn[keep]
    return float(per_sample.mean())


# -- reflow --------------------------------------------------------------------------


def clone_velocity(model: Module, seed: int = 0) -> Module:
    student = build_model(copy.deepcopy(model.config()), seed=seed)
    student.load_state_dict(model.state_dict())
    return student


def reflow_pairs(teacher: FlowModel, y0: np.ndarray, steps: int = 10) -> FixedPairs:
    """(y0, teacher's ``steps``-step reverse transport of y0), teacher frozen."""
    z1 = correct(teacher, y0, steps)
    return FixedPairs(y0, z1)


def reflow(
    teacher: FlowModel,
    source: PairSource,
    config: TrainConfig,
    student: Module | None = None,
) -> FlowModel:
    """Train a 2-reflect student on (corrupted, teacher-corrected) pairs.

    One draw of corrupted latents is taken from ``source``; their targets are the
    teacher's ``config.teacher_steps``-step reverse transport. The student starts
    as a copy of the teacher unless given, and is trained at ``config.reflow_lr``.
    """
    if teacher.generation != "1-reflect":
        raise ValueError(f"reflow needs a 1-reflect teacher, got {teacher.generation}")
    rng = np.random.default_rng(config.seed + 1)
    y0, _ = source.sample(0, rng)
    student = student if student is not None else clone_velocity(teacher.velocity)
    probe_t = student(Tensor(y0[:1]), 0.0)
    probe_s = teacher.velocity(Tensor(y0[:1]), 0.0)
    if probe_t.shape != probe_s.shape:
        raise ShapeError(f"teacher output {probe_s.shape} and student output {probe_t.shape} differ")
    pairs = reflow_pairs(teacher, y0, config.teacher_steps)
    return train(
        student,
        pairs,
        config,
        lr=config.reflow_lr,
        epochs=config.reflow_epochs,
        generation="2-reflect",
        teacher_id=teacher.checkpoint_id(),
    )
