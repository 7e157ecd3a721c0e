"""Shape regularisation energies and their analytic gradients.

The individual energies are plain sums over vertices (and neighbour pairs),
so their magnitude grows with vertex count.  The combined objective reduces
each term either by that sum (``reduction="sum"``) or by the mean over its
summands (``reduction="mean"``, the default): Chamfer divides each direction
by its point count, pair terms by the number of directed pairs and the
Laplacian term by the vertex count.  Under ``"mean"`` the tabulated weight
profiles and step sizes are scale-free; under ``"sum"`` the same weights let
the edge term dominate and a unit step overshoots.

Gradients follow a semi-gradient convention.  Within one evaluation the
Chamfer nearest-neighbour correspondences, the neighbour lists, the normals
used by the normal term and the reference Laplacian coordinates are constants.
:class:`EnergyContext` holds those frozen quantities so an energy and its
gradient can be evaluated against exactly the same assignments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import kernels
from .shape import (
    EdgeConnected,
    KNearest,
    Neighborhood,
    Shape,
    ShapeError,
    build_neighborhood,
    compute_normals,
    laplacian_coordinates,
)

TERMS = ("normal", "laplacian", "edge", "potential")


@dataclass
class RegularizerWeights:
    lambda_n: float = 0.0
    lambda_l: float = 0.0
    lambda_e: float = 0.0
    lambda_p: float = 0.0
    lambda_c: float = 1.0
    eta: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        for f in fields(self):
            if f.name == "reduction":
                continue
            value = float(getattr(self, f.name))
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {value}")
            setattr(self, f.name, value)
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")

    @classmethod
    def pcl(cls) -> "RegularizerWeights":
        return cls(lambda_c=1.0, lambda_p=0.01, eta=1.0)

    @classmethod
    def mesh(cls) -> "RegularizerWeights":
        return cls(lambda_c=1.0, lambda_e=0.8, lambda_n=0.01, lambda_l=0.15, lambda_p=0.01, eta=1.0)

    @classmethod
    def face(cls) -> "RegularizerWeights":
        return cls(lambda_c=1.0, lambda_e=0.8, lambda_n=0.01, lambda_l=0.15, lambda_p=0.01, eta=0.1)

    def term_weights(self) -> dict[str, float]:
        return {"normal": self.lambda_n, "laplacian": self.lambda_l,
                "edge": self.lambda_e, "potential": self.lambda_p}


@dataclass
class EnergyReport:
    total: float
    chamfer: float = 0.0
    normal: float = 0.0
    laplacian: float = 0.0
    edge: float = 0.0
    potential: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _pts(x) -> np.ndarray:
    return x.vertices if isinstance(x, Shape) else np.asarray(x, dtype=np.float64)


def _scatter(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((n, 3))
    for c in range(3):
        out[:, c] = np.bincount(index, weights=values[:, c], minlength=n)
    return out


# --------------------------------------------------------------------------
# individual terms
# --------------------------------------------------------------------------

def chamfer_assignments(P, Q) -> tuple[np.ndarray, np.ndarray]:
    """Nearest index in Q for every point of P, and in P for every point of Q."""
    P, Q = _pts(P), _pts(Q)
    if len(P) == 0 or len(Q) == 0:
        raise ShapeError("chamfer distance of an empty shape")
    return kernels.nearest(P, Q)[0], kernels.nearest(Q, P)[0]


def chamfer(P, Q, assignments=None) -> float:
    P, Q = _pts(P), _pts(Q)
    if len(P) == 0 or len(Q) == 0:
        raise ShapeError("chamfer distance of an empty shape")
    if assignments is None:
        terms = np.concatenate([kernels.nearest(P, Q)[1], kernels.nearest(Q, P)[1]])
    else:
        fwd, bwd = assignments
        d1 = P - Q[fwd]
        d2 = Q - P[bwd]
        terms = np.concatenate([(d1 * d1).sum(axis=1), (d2 * d2).sum(axis=1)])
    # correctly rounded, so the value does not depend on summation order
    return math.fsum(terms.tolist())


def chamfer_grad(P, Q, assignments=None) -> np.ndarray:
    """Gradient of ``chamfer(P, Q)`` with respect to the points of P."""
    P, Q = _pts(P), _pts(Q)
    fwd, bwd = assignments if assignments is not None else chamfer_assignments(P, Q)
    g = 2.0 * (P - Q[fwd])
    g += _scatter(2.0 * (P[bwd] - Q), bwd, len(P))
    return g


def normal_consistency(P, neighborhood: Neighborhood, normals) -> float:
    if normals is None:
        raise ShapeError("normal consistency needs normals")
    x = _pts(P)
    src, dst = neighborhood.pairs()
    s = np.einsum("ij,ij->i", x[src] - x[dst], normals[src])
    return float((s * s).sum())


def normal_consistency_grad(P, neighborhood: Neighborhood, normals) -> np.ndarray:
    if normals is None:
        raise ShapeError("normal consistency needs normals")
    x = _pts(P)
    src, dst = neighborhood.pairs()
    nrm = normals[src]
    s = np.einsum("ij,ij->i", x[src] - x[dst], nrm)
    contrib = 2.0 * s[:, None] * nrm
    return _scatter(contrib, src, len(x)) - _scatter(contrib, dst, len(x))


@dataclass
class ReferenceDelta:
    """Precomputed Laplacian coordinates standing in for the pre-deformation shape."""

    delta: np.ndarray


def _reference(before, neighborhood: Neighborhood, n: int) -> np.ndarray:
    if isinstance(before, ReferenceDelta):
        ref = before.delta
    else:
        ref = _pts(before)
        if len(ref) != n:
            raise ShapeError(f"vertex count mismatch: {len(ref)} vs {n}")
        ref = laplacian_coordinates(ref, neighborhood)
    return ref


def laplacian_reg(P_before, P_after, neighborhood: Neighborhood) -> float:
    after = _pts(P_after)
    r = laplacian_coordinates(after, neighborhood) - _reference(P_before, neighborhood, len(after))
    return float((r * r).sum())


def laplacian_reg_grad(P_before, P_after, neighborhood: Neighborhood) -> np.ndarray:
    """Gradient of ``laplacian_reg`` with respect to ``P_after``."""
    after = _pts(P_after)
    r = laplacian_coordinates(after, neighborhood) - _reference(P_before, neighborhood, len(after))
    src, dst = neighborhood.pairs()
    counts = neighborhood.counts()
    back = 2.0 * r[src] / counts[src][:, None]
    return 2.0 * r - _scatter(back, dst, len(after))


def _require_edges(neighborhood: Neighborhood):
    if not isinstance(neighborhood.mode, EdgeConnected):
        raise ShapeError("edge length regularisation needs an EdgeConnected neighbourhood")


def edge_length_reg(P, neighborhood: Neighborhood) -> float:
    _require_edges(neighborhood)
    x = _pts(P)
    src, dst = neighborhood.pairs()
    d = x[src] - x[dst]
    return float((d * d).sum())


def edge_length_reg_grad(P, neighborhood: Neighborhood) -> np.ndarray:
    _require_edges(neighborhood)
    x = _pts(P)
    src, dst = neighborhood.pairs()
    d = 2.0 * (x[src] - x[dst])
    return _scatter(d, src, len(x)) - _scatter(d, dst, len(x))


def potential_energy_reg(P, neighborhood: Neighborhood) -> float:
    counts = neighborhood.counts()
    if (counts == 0).any():
        raise ShapeError(f"vertex {int(np.argmax(counts == 0))} has an empty neighbourhood")
    x = _pts(P)
    src, dst = neighborhood.pairs()
    d = x[src] - x[dst]
    return float((1.0 / (1.0 + (d * d).sum(axis=1))).sum())


def potential_energy_reg_grad(P, neighborhood: Neighborhood) -> np.ndarray:
    x = _pts(P)
    src, dst = neighborhood.pairs()
    d = x[src] - x[dst]
    w = 1.0 + (d * d).sum(axis=1)
    contrib = -2.0 * d / (w * w)[:, None]
    return _scatter(contrib, src, len(x)) - _scatter(contrib, dst, len(x))


# --------------------------------------------------------------------------
# combined objective
# --------------------------------------------------------------------------

@dataclass
class EnergyContext:
    """Frozen quantities for one energy/gradient evaluation.

    ``surface`` is the neighbourhood for the normal and Laplacian terms (edge
    connectivity on meshes, kNN on point clouds); ``edges`` feeds the edge
    term; ``knn`` feeds the potential term.
    """

    surface: Neighborhood | None = None
    edges: Neighborhood | None = None
    knn: Neighborhood | None = None
    normals: np.ndarray | None = None
    reference: ReferenceDelta | None = None
    assignments: tuple[np.ndarray, np.ndarray] | None = None
    extra: dict = field(default_factory=dict)


def build_context(X: Shape, anchor, weights: RegularizerWeights,
                  neighborhood: Neighborhood | None = None, *,
                  reference=None, knn_k: int = 8,
                  edges: Neighborhood | None = None, knn: Neighborhood | None = None,
                  normals: np.ndarray | None = None,
                  freeze_assignments: bool = True) -> EnergyContext:
    """Build the neighbourhoods, normals and references a weight profile needs.

    Terms with zero weight get nothing built, so their preconditions never apply.
    ``reference`` is the shape (or :class:`ReferenceDelta`) whose Laplacian
    coordinates the Laplacian term compares against; it defaults to ``X``.
    """
    if neighborhood is not None:
        if isinstance(neighborhood.mode, EdgeConnected):
            edges = edges or neighborhood
        else:
            knn = knn or neighborhood
    ctx = EnergyContext()
    need_edges = weights.lambda_e > 0
    need_surface = weights.lambda_n > 0 or weights.lambda_l > 0
    if need_edges or (need_surface and X.has_edges and neighborhood is None):
        if edges is None:
            edges = build_neighborhood(X, EdgeConnected())
        ctx.edges = edges
    if weights.lambda_p > 0 or (need_surface and ctx.edges is None and not X.has_edges):
        if knn is None:
            knn = build_neighborhood(X, KNearest(knn_k))
        ctx.knn = knn
    if need_surface:
        if neighborhood is not None:
            ctx.surface = neighborhood
        else:
            ctx.surface = ctx.edges if X.has_edges else ctx.knn
    if weights.lambda_n > 0:
        if normals is None:
            nb = ctx.surface if X.faces is None else None
            normals = compute_normals(X, nb)
        ctx.normals = normals
    if weights.lambda_l > 0:
        if reference is None:
            reference = X
        if not isinstance(reference, ReferenceDelta):
            ref = _pts(reference)
            if len(ref) != X.n:
                raise ShapeError(f"vertex count mismatch: {len(ref)} vs {X.n}")
            reference = ReferenceDelta(laplacian_coordinates(ref, ctx.surface))
        ctx.reference = reference
    if weights.lambda_c > 0 and freeze_assignments:
        ctx.assignments = chamfer_assignments(X, anchor)
    return ctx


def _scales(x: np.ndarray, anchor: np.ndarray, context: EnergyContext,
            weights: RegularizerWeights) -> dict[str, float]:
    if weights.reduction == "sum":
        return dict(chamfer_fwd=1.0, chamfer_bwd=1.0, normal=1.0, laplacian=1.0, edge=1.0, potential=1.0)

    def pairs(nb):
        return float(max(1, len(nb.indices))) if nb is not None else 1.0

    return dict(chamfer_fwd=float(len(x)), chamfer_bwd=float(len(anchor)),
                normal=pairs(context.surface), laplacian=float(len(x)),
                edge=pairs(context.edges), potential=pairs(context.knn))


def _chamfer_parts(x, q, assignments):
    if assignments is None:
        return kernels.nearest(x, q)[1].sum(), kernels.nearest(q, x)[1].sum()
    fwd, bwd = assignments
    d1 = x - q[fwd]
    d2 = q - x[bwd]
    return (d1 * d1).sum(), (d2 * d2).sum()


def total_energy(X, anchor, weights: RegularizerWeights,
                 neighborhood: Neighborhood | None = None, *,
                 context: EnergyContext | None = None, **context_kw) -> EnergyReport:
    """Weighted regularisers plus the weighted Chamfer term to ``anchor``.

    Term values in the report are already reduced per ``weights.reduction``.
    """
    if context is None:
        shape = X if isinstance(X, Shape) else Shape(X)
        context = build_context(shape, anchor, weights, neighborhood, freeze_assignments=False, **context_kw)
    x, q = _pts(X), _pts(anchor)
    sc = _scales(x, q, context, weights)
    rep = EnergyReport(total=0.0)
    if weights.lambda_c > 0:
        if len(x) == 0 or len(q) == 0:
            raise ShapeError("chamfer distance of an empty shape")
        fwd, bwd = _chamfer_parts(x, q, context.assignments)
        rep.chamfer = float(fwd / sc["chamfer_fwd"] + bwd / sc["chamfer_bwd"])
    if weights.lambda_n > 0:
        rep.normal = normal_consistency(x, context.surface, context.normals) / sc["normal"]
    if weights.lambda_l > 0:
        rep.laplacian = laplacian_reg(context.reference, x, context.surface) / sc["laplacian"]
    if weights.lambda_e > 0:
        rep.edge = edge_length_reg(x, context.edges) / sc["edge"]
    if weights.lambda_p > 0:
        rep.potential = potential_energy_reg(x, context.knn) / sc["potential"]
    rep.total = (weights.lambda_n * rep.normal + weights.lambda_l * rep.laplacian
                 + weights.lambda_e * rep.edge + weights.lambda_p * rep.potential
                 + weights.lambda_c * rep.chamfer)
    return rep


def total_gradient(X, anchor, weights: RegularizerWeights,
                   neighborhood: Neighborhood | None = None, *,
                   context: EnergyContext | None = None, **context_kw) -> np.ndarray:
    """Analytic gradient of :func:`total_energy` with respect to the vertices of ``X``."""
    if context is None:
        shape = X if isinstance(X, Shape) else Shape(X)
        context = build_context(shape, anchor, weights, neighborhood, **context_kw)
    x, q = _pts(X), _pts(anchor)
    sc = _scales(x, q, context, weights)
    g = np.zeros_like(x)
    if weights.lambda_c > 0:
        fwd, bwd = context.assignments if context.assignments is not None else chamfer_assignments(x, q)
        g += (weights.lambda_c * 2.0 / sc["chamfer_fwd"]) * (x - q[fwd])
        g += (weights.lambda_c * 2.0 / sc["chamfer_bwd"]) * _scatter(x[bwd] - q, bwd, len(x))
    if weights.lambda_n > 0:
        g += (weights.lambda_n / sc["normal"]) * normal_consistency_grad(x, context.surface, context.normals)
    if weights.lambda_l > 0:
        g += (weights.lambda_l / sc["laplacian"]) * laplacian_reg_grad(context.reference, x, context.surface)
    if weights.lambda_e > 0:
        g += (weights.lambda_e / sc["edge"]) * edge_length_reg_grad(x, context.edges)
    if weights.lambda_p > 0:
        g += (weights.lambda_p / sc["potential"]) * potential_energy_reg_grad(x, context.knn)
    return g
