"""Forward deformation: the differential deformation kernel, the Gaussian
baseline kernel, whole trajectories and the data-driven average shape."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .regularizers import (
    EnergyReport,
    RegularizerWeights,
    ReferenceDelta,
    build_context,
    total_energy,
    total_gradient,
)
from .shape import (
    EdgeConnected,
    KNearest,
    Kind,
    Shape,
    ShapeError,
    build_neighborhood,
    compute_normals,
    laplacian_coordinates,
)

log = logging.getLogger(__name__)

SAFEGUARD_RATIO = 10.0
MAX_HALVINGS = 30


class Mode(str, Enum):
    ANCHORED_DRIFT = "anchored_drift"
    TEMPLATE_DESCENT = "template_descent"


class NonFiniteError(ArithmeticError):
    def __init__(self, message: str, vertex: int | None = None, frame: int | None = None):
        super().__init__(message)
        self.vertex = vertex
        self.frame = frame


@dataclass
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    interval_i: int = 1
    mode: Mode = Mode.ANCHORED_DRIFT
    seed: int = 0
    eta: float | None = None  # overrides RegularizerWeights.eta when set

    def __post_init__(self):
        self.T = int(self.T)
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if len(self.beta) != self.T:
            raise ValueError(f"beta has {len(self.beta)} entries for T={self.T}")
        if not np.all(np.isfinite(self.beta)) or (self.beta < 0).any():
            raise ValueError("beta entries must be finite and >= 0")
        self.interval_i = int(self.interval_i)
        if self.interval_i <= 0 or self.interval_i > self.T or self.T % self.interval_i:
            raise ValueError(f"interval {self.interval_i} must divide T={self.T}")
        self.mode = Mode(self.mode)
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        if self.eta is not None and not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")

    @classmethod
    def constant(cls, T: int, beta: float, **kw) -> "DiffusionSchedule":
        return cls(T, np.full(int(T), float(beta)), **kw)

    @classmethod
    def linear(cls, T: int, beta_start: float, beta_end: float, **kw) -> "DiffusionSchedule":
        return cls(T, np.linspace(beta_start, beta_end, int(T)), **kw)

    def beta_at(self, t: int) -> float:
        """Variance of step ``t`` (1-based, as in x^(t-1) -> x^(t))."""
        return float(self.beta[t - 1])


@dataclass
class Trajectory:
    frames: list[Shape]
    schedule: DiffusionSchedule
    anchor_id: str = ""
    template_id: str = ""
    energies: list[EnergyReport] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) != self.schedule.T + 1:
            raise ValueError(f"{len(self.frames)} frames for T={self.schedule.T}")
        first = self.frames[0]
        for t, f in enumerate(self.frames):
            if f.n != first.n:
                raise ValueError(f"frame {t} has {f.n} vertices, frame 0 has {first.n}")
            if not f.same_connectivity(first):
                raise ValueError(f"frame {t} connectivity differs from frame 0")

    @property
    def T(self) -> int:
        return self.schedule.T


@dataclass
class StepInfo:
    energy_before: float
    energy_after: float
    eta: float
    halvings: int
    report: EnergyReport | None = None


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

class DeformationKernel:
    """One DDK chain: keeps neighbourhoods, the reference Laplacian
    coordinates and normal orientation between steps.

    Mesh connectivity (and the kNN lists used by the potential term on meshes)
    is fixed at construction; point-cloud kNN lists are rebuilt every
    ``rebuild_every`` steps.
    """

    def __init__(self, start: Shape, anchor: Shape, weights: RegularizerWeights, *,
                 reference: Shape | None = None, knn_k: int = 8, rebuild_every: int = 10,
                 safeguard: bool = True, eta: float | None = None):
        if start.n == 0 or anchor.n == 0:
            raise ShapeError("DDK needs non-empty shapes")
        self.anchor = anchor
        self.weights = weights
        self.knn_k = knn_k
        self.rebuild_every = max(1, int(rebuild_every))
        self.safeguard = safeguard
        self.eta = weights.eta if eta is None else float(eta)
        self.reference = (reference if reference is not None else start).vertices.copy()
        self.frozen = start.kind is Kind.MESH
        self.steps = 0
        self._prev_normals = None
        self.edges = None
        self.knn = None
        self.surface = None
        self._ref_delta = None
        self._build(start)

    def _build(self, X: Shape):
        w = self.weights
        need_surface = w.lambda_n > 0 or w.lambda_l > 0
        if w.lambda_e > 0 or (need_surface and X.has_edges):
            if self.edges is None:
                self.edges = build_neighborhood(X, EdgeConnected())
        if w.lambda_p > 0 or (need_surface and not X.has_edges):
            if X.n < 2:
                raise ShapeError("kNN-based terms need at least 2 vertices")
            self.knn = build_neighborhood(X, KNearest(self.knn_k))
        if need_surface:
            surface = self.edges if X.has_edges else self.knn
            if surface is not self.surface:
                self.surface = surface
                if w.lambda_l > 0:
                    self._ref_delta = ReferenceDelta(laplacian_coordinates(self.reference, surface))

    def _refresh(self, X: Shape):
        if not self.frozen and self.steps > 0 and self.steps % self.rebuild_every == 0:
            self._build(X)

    def context(self, X: Shape, anchor: Shape | None = None):
        anchor = self.anchor if anchor is None else anchor
        normals = None
        if self.weights.lambda_n > 0:
            nb = None if X.kind is Kind.MESH else self.surface
            normals = compute_normals(X, nb, previous=self._prev_normals)
        return build_context(X, anchor, self.weights, edges=self.edges, knn=self.knn,
                             normals=normals, reference=self._ref_delta,
                             neighborhood=self.surface)

    def energy(self, X: Shape, anchor: Shape | None = None) -> EnergyReport:
        anchor = self.anchor if anchor is None else anchor
        return total_energy(X, anchor, self.weights, context=self.context(X, anchor))

    def step(self, X: Shape, beta_t: float, rng: np.random.Generator,
             anchor: Shape | None = None, eta: float | None = None) -> tuple[Shape, StepInfo]:
        anchor = self.anchor if anchor is None else anchor
        eta = self.eta if eta is None else float(eta)
        self._refresh(X)
        noise = rng.standard_normal(X.vertices.shape) * math.sqrt(beta_t)
        x = X.vertices
        if eta == 0.0:
            self.steps += 1
            return X.with_vertices(x + noise), StepInfo(math.nan, math.nan, 0.0, 0)

        ctx = self.context(X, anchor)
        self._prev_normals = ctx.normals
        g = total_gradient(X, anchor, self.weights, context=ctx)
        bad = ~np.isfinite(g).all(axis=1)
        if bad.any():
            v = int(np.argmax(bad))
            raise NonFiniteError(f"non-finite gradient at vertex {v}", vertex=v)

        before = total_energy(X, anchor, self.weights, context=ctx)
        # noise energy on the Chamfer scale, plus slack for rounding at stationary points
        noise_energy = float((noise * noise).sum())
        if self.weights.reduction == "mean":
            noise_energy /= X.n
        limit = SAFEGUARD_RATIO * noise_energy + 1e-12 * max(1.0, abs(before.total))
        halvings = 0
        while True:
            cand = X.with_vertices(x - eta * g + noise)
            if not self.safeguard:
                after = None
                break
            after = self.energy(cand, anchor)
            if after.total - before.total <= limit:
                break
            if halvings == MAX_HALVINGS:
                # no descent step found; keep only the noise
                eta = 0.0
                cand = X.with_vertices(x + noise)
                after = self.energy(cand, anchor)
                break
            eta *= 0.5
            halvings += 1
        self.steps += 1
        info = StepInfo(before.total, after.total if after else math.nan, eta, halvings, after)
        return cand, info


def ddk_step(X: Shape, anchor: Shape, weights: RegularizerWeights, beta_t: float,
             rng: np.random.Generator, *, eta: float | None = None,
             reference: Shape | None = None, safeguard: bool = True, knn_k: int = 8) -> Shape:
    """x_i <- x_i - eta * dL/dx_i + N(0, beta_t I), L anchored at ``anchor``."""
    kernel = DeformationKernel(X, anchor, weights, reference=reference, knn_k=knn_k,
                               safeguard=safeguard, eta=eta)
    return kernel.step(X, beta_t, rng, eta=eta)[0]


def gdk_step(X: Shape, beta_t: float, rng: np.random.Generator) -> Shape:
    """Gaussian diffusion baseline: independent N(0, beta_t I) noise per vertex."""
    if X.n == 0:
        raise ShapeError("GDK needs a non-empty shape")
    noise = rng.standard_normal(X.vertices.shape) * math.sqrt(beta_t)
    return X.with_vertices(X.vertices + noise)


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

def run_trajectory(source: Shape, template: Shape | None, weights: RegularizerWeights,
                   schedule: DiffusionSchedule, *, knn_k: int = 8, rebuild_every: int = 10,
                   safeguard: bool = True, anchor_id: str = "", template_id: str = "",
                   progress=None) -> Trajectory:
    """Generate ``X^(0) .. X^(T)``.

    AnchoredDrift starts at ``source`` and applies T DDK steps anchored at it.
    TemplateDescent descends from ``template`` towards ``source`` for T-1
    steps and stores the states in reverse, so ``frames[T]`` is the template,
    ``frames[1]`` the last descent state and ``frames[0]`` the source.
    """
    rng = np.random.default_rng(schedule.seed)
    T = schedule.T
    if schedule.mode is Mode.ANCHORED_DRIFT:
        kernel = DeformationKernel(source, source, weights, knn_k=knn_k, rebuild_every=rebuild_every,
                                   safeguard=safeguard, eta=schedule.eta)
        frames = [source]
        energies = [kernel.energy(source)]
        X = source
        for t in range(1, T + 1):
            X, info = kernel.step(X, schedule.beta_at(t), rng)
            _check_frame(X, t)
            frames.append(X)
            energies.append(info.report if info.report is not None else kernel.energy(X))
            if progress:
                progress(t, T, energies[-1])
        return Trajectory(frames, schedule, anchor_id, template_id, energies)

    if template is None:
        raise ShapeError("TemplateDescent needs a template shape")
    kernel = DeformationKernel(template, source, weights, knn_k=knn_k, rebuild_every=rebuild_every,
                               safeguard=safeguard, eta=schedule.eta)
    states = [template]
    energies = [kernel.energy(template)]
    X = template
    # descent step k uses the variance of frame T-k, the frame it becomes
    for k in range(1, T):
        X, info = kernel.step(X, schedule.beta_at(T - k + 1), rng)
        _check_frame(X, T - k)
        states.append(X)
        energies.append(info.report if info.report is not None else kernel.energy(X))
        if progress:
            progress(k, T, energies[-1])
    final = _terminal_frame(source, template, X, kernel, schedule, rng)
    states.append(final)
    energies.append(kernel.energy(final))
    return Trajectory(states[::-1], schedule, anchor_id, template_id, energies[::-1])


def _check_frame(X: Shape, t: int):
    bad = ~np.isfinite(X.vertices).all(axis=1)
    if bad.any():
        v = int(np.argmax(bad))
        raise NonFiniteError(f"non-finite vertex {v} in frame {t}", vertex=v, frame=t)


def _terminal_frame(source, template, last, kernel, schedule, rng) -> Shape:
    """The source expressed in the template's vertex order.

    Equal connectivity keeps the source as is; equal vertex counts reorder
    the source by an optimal assignment to the last descent state; otherwise
    one more DDK step stands in for the source.
    """
    if source.n == template.n and source.kind is Kind.MESH and source.same_connectivity(template):
        return template.with_vertices(source.vertices.copy())
    if source.n == template.n:
        d = last.vertices[:, None, :] - source.vertices[None, :, :]
        cost = np.einsum("ijk,ijk->ij", d, d)
        perm = kernels.assignment(cost)
        return template.with_vertices(source.vertices[perm])
    X, _ = kernel.step(last, schedule.beta_at(1), rng)
    return X


def gdk_trajectory(source: Shape, schedule: DiffusionSchedule, *, anchor_id: str = "",
                   template_id: str = "") -> Trajectory:
    rng = np.random.default_rng(schedule.seed)
    frames = [source]
    X = source
    for t in range(1, schedule.T + 1):
        X = gdk_step(X, schedule.beta_at(t), rng)
        frames.append(X)
    return Trajectory(frames, schedule, anchor_id, template_id, [])


# --------------------------------------------------------------------------
# data-driven template
# --------------------------------------------------------------------------

def average_shape(dataset: list[Shape], npoints: int, steps: int,
                  weights: RegularizerWeights, eta: float | None = None, *,
                  seed: int = 0, cycle: int = 50, knn_k: int = 8) -> Shape:
    """Average shape of a dataset by repeated noiseless DDK steps.

    One cloud of ``npoints`` unit-Gaussian points evolves; every step anchors
    it at the next shape of a reshuffled pass over the dataset.  The step size
    restarts at ``eta`` every ``cycle`` steps and decays harmonically inside
    a cycle.
    """
    if not dataset:
        raise ShapeError("average_shape needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    eta = weights.eta if eta is None else float(eta)
    shapes = [_resample(s, npoints, rng) for s in dataset]
    X = Shape(rng.standard_normal((npoints, 3)))
    if npoints < 2 and (weights.lambda_p > 0 or weights.lambda_n > 0 or weights.lambda_l > 0):
        weights = RegularizerWeights(lambda_c=weights.lambda_c, eta=weights.eta)
    kernel = None
    order = []
    for k in range(steps):
        if not order:
            order = list(rng.permutation(len(shapes)))
        anchor = shapes[order.pop()]
        j = k % max(1, cycle)
        step_eta = eta / (1.0 + j)
        if kernel is None:
            kernel = DeformationKernel(X, anchor, weights, knn_k=knn_k, eta=eta)
        X, _ = kernel.step(X, 0.0, rng, anchor=anchor, eta=step_eta)
    return X


def _resample(shape: Shape, npoints: int, rng: np.random.Generator) -> Shape:
    n = shape.n
    if n == npoints:
        return Shape(shape.vertices)
    if n > npoints:
        idx = np.sort(rng.choice(n, size=npoints, replace=False))
    else:
        idx = np.concatenate([np.arange(n), rng.choice(n, size=npoints - n, replace=True)])
    return Shape(shape.vertices[idx])
