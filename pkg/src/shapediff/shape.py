"""Shapes, neighbourhoods, normals, Laplacian coordinates and the icosphere template."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels

MAX_ICOSPHERE_LEVEL = 7
DEFAULT_K = 8


class ShapeError(ValueError):
    pass


class DegenerateVertexError(ShapeError):
    """Raised when a per-vertex quantity is undefined; ``.vertex`` names the vertex."""

    def __init__(self, vertex: int, reason: str):
        super().__init__(f"vertex {vertex}: {reason}")
        self.vertex = vertex


class Kind(str, Enum):
    POINT_CLOUD = "PointCloud"
    MESH = "Mesh"


def edges_from_faces(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges of a triangle list, each as ``(lo, hi)``, sorted."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


@dataclass(eq=False)
class Shape:
    vertices: np.ndarray
    faces: np.ndarray | None = None
    edges: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ShapeError(f"vertices must be (n, 3), got {v.shape}")
        self.vertices = v
        n = len(v)
        if self.faces is not None:
            f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
            _check_indices(f, n, "face")
            bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if bad.any():
                raise ShapeError(f"face {int(np.argmax(bad))} repeats a vertex index")
            self.faces = f
            derived = edges_from_faces(f) if len(f) else np.empty((0, 2), np.int64)
            if self.edges is not None:
                given = np.unique(np.sort(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2), axis=1), axis=0)
                if given.shape != derived.shape or not np.array_equal(given, derived):
                    raise ShapeError("edges disagree with the edges of the faces")
            self.edges = derived
        elif self.edges is not None:
            e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
            _check_indices(e, n, "edge")
            if (e[:, 0] == e[:, 1]).any():
                raise ShapeError("self-loop edge")
            self.edges = np.unique(np.sort(e, axis=1), axis=0)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != v.shape:
                raise ShapeError(f"normals must match vertices, got {nrm.shape}")
            if np.any(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) > 1e-6):
                raise ShapeError("stored normals must have unit length")
            self.normals = nrm

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def kind(self) -> Kind:
        return Kind.MESH if self.faces is not None else Kind.POINT_CLOUD

    @property
    def has_edges(self) -> bool:
        return self.edges is not None and len(self.edges) > 0

    def with_vertices(self, vertices: np.ndarray, normals: np.ndarray | None = None) -> "Shape":
        """Same connectivity, new positions; skips revalidation of connectivity."""
        out = object.__new__(Shape)
        out.vertices = np.asarray(vertices, dtype=np.float64)
        out.faces = self.faces
        out.edges = self.edges
        out.normals = normals
        return out

    def same_connectivity(self, other: "Shape") -> bool:
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)
        return eq(self.faces, other.faces) and eq(self.edges, other.edges)


def _check_indices(idx: np.ndarray, n: int, what: str):
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        row = int(np.argmax((idx < 0).any(axis=1) | (idx >= n).any(axis=1)))
        raise ShapeError(f"{what} {row} has an index outside [0, {n})")


# --------------------------------------------------------------------------
# neighbourhoods
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeConnected:
    pass


@dataclass(frozen=True)
class KNearest:
    k: int = DEFAULT_K


@dataclass(eq=False)
class Neighborhood:
    """Per-vertex neighbour lists in compressed form: neighbours of ``i`` are
    ``indices[indptr[i]:indptr[i + 1]]``."""

    indptr: np.ndarray
    indices: np.ndarray
    mode: EdgeConnected | KNearest

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def lists(self) -> list[list[int]]:
        return [self[i].tolist() for i in range(self.n)]

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed ``(p, k)`` pairs, one per list entry, in list order."""
        src = np.repeat(np.arange(self.n), self.counts())
        return src, self.indices


def build_neighborhood(shape: Shape, mode: EdgeConnected | KNearest | None = None) -> Neighborhood:
    if mode is None:
        mode = EdgeConnected() if shape.kind is Kind.MESH else KNearest()
    n = shape.n
    if n < 2:
        raise ShapeError("a neighbourhood needs at least 2 vertices")
    if isinstance(mode, EdgeConnected):
        if not shape.has_edges:
            raise ShapeError("EdgeConnected neighbourhood requested on a shape without edges")
        e = shape.edges
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
        return Neighborhood(indptr, dst.astype(np.int64), mode)
    if isinstance(mode, KNearest):
        if mode.k <= 0:
            raise ShapeError(f"k must be positive, got {mode.k}")
        k = min(mode.k, n - 1)
        idx = kernels.knn(shape.vertices, k)
        indptr = np.arange(0, n * k + 1, k, dtype=np.int64)
        return Neighborhood(indptr, idx.reshape(-1), KNearest(mode.k))
    raise TypeError(f"unknown neighbourhood mode {mode!r}")


# --------------------------------------------------------------------------
# normals and Laplacian coordinates
# --------------------------------------------------------------------------

def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalised face normals; their length is twice the face area."""
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return np.cross(b - a, c - a)


def compute_normals(shape: Shape, neighborhood: Neighborhood | None = None,
                    previous: np.ndarray | None = None) -> np.ndarray:
    """Per-vertex unit normals.

    Meshes use the area-weighted mean of incident face normals (zero-area faces
    add nothing).  Point clouds use the least-variance axis of each vertex's
    neighbour covariance, oriented to agree with ``previous`` (default: the
    stored normals) or else towards +z.
    """
    v = shape.vertices
    n = shape.n
    if shape.kind is Kind.MESH:
        f = shape.faces
        touched = np.bincount(f.reshape(-1), minlength=n)
        if (touched == 0).any():
            raise DegenerateVertexError(int(np.argmax(touched == 0)), "belongs to no face")
        fn = face_normals(v, f)
        acc = np.zeros((n, 3))
        for c in range(3):
            np.add.at(acc, f[:, c], fn)
        length = np.linalg.norm(acc, axis=1)
        if (length == 0).any():
            raise DegenerateVertexError(int(np.argmax(length == 0)), "incident faces have zero total normal")
        return acc / length[:, None]

    if neighborhood is None:
        neighborhood = build_neighborhood(shape, KNearest())
    counts = neighborhood.counts()
    if (counts < 3).any():
        raise DegenerateVertexError(int(np.argmax(counts < 3)), "fewer than 3 neighbours for a PCA normal")
    src, dst = neighborhood.pairs()
    # covariance of the vertex together with its neighbours
    m = counts + 1
    mean = (v + _segment_sum(v[dst], src, n)) / m[:, None]
    cov = np.zeros((n, 3, 3))
    d0 = v - mean
    cov += d0[:, :, None] * d0[:, None, :]
    dn = v[dst] - mean[src]
    outer = dn[:, :, None] * dn[:, None, :]
    for a in range(3):
        for b in range(3):
            cov[:, a, b] += np.bincount(src, weights=outer[:, a, b], minlength=n)
    cov /= m[:, None, None]
    scale = np.trace(cov, axis1=1, axis2=2)
    if (scale == 0).any():
        raise DegenerateVertexError(int(np.argmax(scale == 0)), "all neighbours coincide")
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    if previous is None:
        previous = shape.normals
    if previous is not None:
        flip = np.einsum("ij,ij->i", normals, previous) < 0
    else:
        flip = _below_hemisphere(normals)
    normals[flip] *= -1
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def _below_hemisphere(normals):
    # +z first; for normals lying in the z=0 plane fall back to +y, then +x
    z, y, x = normals[:, 2], normals[:, 1], normals[:, 0]
    eps = 1e-12
    return np.where(np.abs(z) > eps, z < 0, np.where(np.abs(y) > eps, y < 0, x < 0))


def _segment_sum(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((n, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(seg, weights=values[:, c], minlength=n)
    return out


def laplacian_coordinates(shape: Shape | np.ndarray, neighborhood: Neighborhood) -> np.ndarray:
    """delta_p = p - mean of its neighbours."""
    v = shape.vertices if isinstance(shape, Shape) else np.asarray(shape, dtype=np.float64)
    counts = neighborhood.counts()
    if (counts == 0).any():
        raise DegenerateVertexError(int(np.argmax(counts == 0)), "empty neighbour list")
    src, dst = neighborhood.pairs()
    return v - _segment_sum(v[dst], src, len(v)) / counts[:, None]


# --------------------------------------------------------------------------
# icosphere
# --------------------------------------------------------------------------

def icosphere(subdivision_level: int = 4) -> Shape:
    """Unit icosphere with ``10 * 4**level + 2`` vertices."""
    level = int(subdivision_level)
    if level < 0 or level > MAX_ICOSPHERE_LEVEL:
        raise ShapeError(f"icosphere level must be in [0, {MAX_ICOSPHERE_LEVEL}], got {level}")
    r = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, r, 0), (1, r, 0), (-1, -r, 0), (1, -r, 0),
        (0, -1, r), (0, 1, r), (0, -1, -r), (0, 1, -r),
        (r, 0, -1), (r, 0, 1), (-r, 0, -1), (-r, 0, 1),
    ]
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(level):
        v, faces = _subdivide(v, faces)
    return Shape(v, faces)


def _subdivide(v, faces):
    edges = edges_from_faces(faces)
    n = len(v)
    mid = v[edges[:, 0]] + v[edges[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    # edge (a, b) with a < b gets vertex n + row; look rows up through a sorted key
    key = edges[:, 0] * n + edges[:, 1]

    def midpoint(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return n + np.searchsorted(key, lo * n + hi)

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
    new_faces = np.stack([
        np.stack([a, ab, ca], 1),
        np.stack([b, bc, ab], 1),
        np.stack([c, ca, bc], 1),
        np.stack([ab, bc, ca], 1),
    ], axis=1).reshape(-1, 3)
    return np.vstack([v, mid]), new_faces
