"""Imitation training, equispaced subsequences, reverse sampling and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ddk import DiffusionSchedule, NonFiniteError, Trajectory
from .network import Hyperparams, RegressorModel, training_loss
from .shape import Shape

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SHAPEDIFF-CKPT"


@dataclass
class TrainConfig:
    iterations: int = 100_000
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 1e-6
    lr_schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, it: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * it / self.iterations))


@dataclass
class OptimizerState:
    iteration: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class TrainResult:
    model: RegressorModel
    history: list[tuple[int, float, float]] = field(default_factory=list)
    state: OptimizerState = field(default_factory=OptimizerState)


def adamw_update(theta, grad, state: OptimizerState, lr: float, cfg: TrainConfig):
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    state.iteration += 1
    k = state.iteration
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * grad
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * grad * grad
    mhat = state.m / (1.0 - cfg.beta1 ** k)
    vhat = state.v / (1.0 - cfg.beta2 ** k)
    theta -= lr * cfg.weight_decay * theta
    theta -= lr * mhat / (np.sqrt(vhat) + cfg.eps)


# --------------------------------------------------------------------------
# subsequences and training
# --------------------------------------------------------------------------

def equispaced_subsequence(trajectory: Trajectory, interval: int | None = None) -> list[tuple[Shape, int]]:
    """Frames at ``t = T, T - i, ..., 0``."""
    i = trajectory.schedule.interval_i if interval is None else int(interval)
    T = trajectory.T
    if i <= 0 or T % i:
        raise ValueError(f"interval {i} does not divide T={T}")
    return [(trajectory.frames[t], t) for t in range(T, -1, -i)]


def _pairs(trajectory: Trajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked (input at t, target at t-i, t) arrays over the equispaced subsequence."""
    i = trajectory.schedule.interval_i
    ts = np.arange(trajectory.T, 0, -i)
    src = np.stack([trajectory.frames[t].vertices for t in ts])
    dst = np.stack([trajectory.frames[t - i].vertices for t in ts])
    return src, dst, ts


def train(model: RegressorModel, trajectories: list[Trajectory], config: TrainConfig, *,
          state: OptimizerState | None = None, log_every: int = 0) -> TrainResult:
    """Fit the model to map frame ``t`` (at time ``t``) to frame ``t - i``.

    Each iteration draws ``batch_size`` (trajectory, step) pairs uniformly.
    With a latent-conditioned model every pair carries the latent vector of
    its trajectory's frame 0.
    """
    if not trajectories:
        raise ValueError("train needs at least one trajectory")
    intervals = {tr.schedule.interval_i for tr in trajectories}
    if len(intervals) != 1:
        raise ValueError(f"trajectories use different intervals: {sorted(intervals)}")
    Ts = {tr.T for tr in trajectories}
    if model.hp.time_conditioning and max(Ts) > model.hp.T:
        raise ValueError(f"model was built for T={model.hp.T}, trajectories reach T={max(Ts)}")

    data = [_pairs(tr) for tr in trajectories]
    latents = None
    if model.hp.latent_dim:
        latents = [model.latent(tr.frames[0].vertices) for tr in trajectories]
    same_n = len({d[0].shape[1] for d in data}) == 1

    state = state or OptimizerState()
    history = []
    theta = model.theta

    for it in range(state.iteration, config.iterations):
        # batches depend only on (seed, iteration), so a resumed run matches an uninterrupted one
        rng = np.random.default_rng([config.seed, it])
        B = config.batch_size
        if same_n:
            tri = rng.integers(len(data), size=B)
        else:
            tri = np.full(B, rng.integers(len(data)))
        k = np.array([rng.integers(len(data[j][2])) for j in tri])
        xs = np.stack([data[j][0][s] for j, s in zip(tri, k)])
        ys = np.stack([data[j][1][s] for j, s in zip(tri, k)])
        ts = np.array([data[j][2][s] for j, s in zip(tri, k)])
        lat = np.stack([latents[j] for j in tri]) if latents is not None else None
        loss, grad = training_loss(model, xs, ys, ts, lat)
        if not math.isfinite(loss) or not np.isfinite(grad).all():
            raise NonFiniteError(f"non-finite loss at iteration {it}", frame=it)
        lr = config.lr_at(it)
        adamw_update(theta, grad, state, lr, config)
        history.append((it, loss, lr))
        if log_every and (it % log_every == 0 or it == config.iterations - 1):
            log.info("iter=%d loss=%.6g lr=%.3g", it, loss, lr)
    return TrainResult(model, history, state)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

@dataclass
class SampleResult:
    shape: Shape
    frames: list[tuple[Shape, int]]
    model_calls: int


def sample(model: RegressorModel, template: Shape, schedule: DiffusionSchedule,
           rng: np.random.Generator, *, latent: np.ndarray | None = None) -> SampleResult:
    """Reverse process from ``template``: for t = T, T-i, ..., i,
    ``x <- (x + e) + offset(x + e, t)`` with ``e ~ N(0, beta_t I)``."""
    i, T = schedule.interval_i, schedule.T
    x = template.vertices.copy()
    frames = [(template, T)]
    calls = 0
    for t in range(T, 0, -i):
        noisy = x + rng.standard_normal(x.shape) * math.sqrt(schedule.beta_at(t))
        x = noisy + model.forward(noisy, t, latent)
        calls += 1
        if not np.isfinite(x).all():
            raise NonFiniteError(f"non-finite sample at t={t}", frame=t)
        frames.append((template.with_vertices(x.copy()), t - i))
    return SampleResult(frames[-1][0], frames, calls)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: RegressorModel, state: OptimizerState | None = None,
                    extra: dict | None = None) -> None:
    """Magic line, one JSON header line, then raw little-endian float64 arrays."""
    arrays = [("theta", model.theta), ("encoder", model.encoder)]
    if state is not None and state.m is not None:
        arrays += [("adam_m", state.m), ("adam_v", state.v)]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    header = {
        "version": model.version,
        "hyperparams": model.hp.to_dict(),
        "arrays": [[name, int(a.size)] for name, a in arrays],
        "iteration": int(state.iteration) if state is not None else 0,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    blob = CKPT_MAGIC + b" 1\n" + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    Path(path).write_bytes(blob)


def load_checkpoint(path, expect: Hyperparams | None = None):
    """Returns ``(model, optimizer_state, extra)``; rejects corrupt or mismatched files."""
    blob = Path(path).read_bytes()
    first = blob.find(b"\n")
    second = blob.find(b"\n", first + 1)
    if first < 0 or second < 0 or not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    header = json.loads(blob[first + 1:second])
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = blob[second + 1:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    hp = Hyperparams(**header["hyperparams"])
    if expect is not None and expect != hp:
        raise CheckpointError(f"{path}: hyperparams {hp} do not match expected {expect}")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays, off = {}, 0
    for name, size in header["arrays"]:
        arrays[name] = flat[off:off + size].astype(np.float64)
        off += size
    if off != flat.size:
        raise CheckpointError(f"{path}: payload size mismatch")
    model = RegressorModel(hp, arrays["theta"], arrays["encoder"])
    state = OptimizerState(header["iteration"], arrays.get("adam_m"), arrays.get("adam_v"))
    return model, state, header.get("extra", {})
