"""Triangle mesh, graph Laplacian, differential coordinates, anchored solves.

The Laplacian here is the unnormalized graph Laplacian L = D - A over the
edge graph of the triangles: uniform weights, topology-only, symmetric.
Reconstruction from differential coordinates solves the soft-constrained
normal equations

    (L^T L + lambda^2 S^T S) x = L^T delta + lambda^2 S^T c

per coordinate axis, where S selects anchor rows and c holds the anchor
values.  The Cholesky factor of the left-hand side is computed once (with a
reverse Cuthill-McKee reordering to keep it banded) and reused for every
solve, which is the whole performance point.

All math in this module is float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import solve_triangular
from scipy.sparse.csgraph import connected_components, reverse_cuthill_mckee

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


class DisconnectedMeshError(MeshError):
    """Vertex graph is not connected; names the smallest unreachable vertex."""

    def __init__(self, vertex_index: int):
        self.vertex_index = vertex_index
        super().__init__(
            f"mesh vertex graph is disconnected; smallest unreachable vertex index: {vertex_index}"
        )


class NotPositiveDefiniteError(MeshError):
    """Anchored normal matrix failed the Cholesky factorization."""


@dataclass
class TriMesh:
    """Shared topology plus one set of vertex positions.

    positions: (N, 3) float64, triangles: (F, 3) int indices into positions.
    """

    positions: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise MeshError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError(f"triangles must be (F, 3), got {self.triangles.shape}")
        n = self.vertex_count
        if self.triangles.size:
            if self.triangles.min() < 0 or self.triangles.max() >= n:
                raise MeshError("triangle index out of range")
            degenerate = (
                (self.triangles[:, 0] == self.triangles[:, 1])
                | (self.triangles[:, 1] == self.triangles[:, 2])
                | (self.triangles[:, 0] == self.triangles[:, 2])
            )
            if degenerate.any():
                raise MeshError(f"triangle {int(np.flatnonzero(degenerate)[0])} repeats a vertex index")

    @property
    def vertex_count(self) -> int:
        return self.positions.shape[0]

    def bbox_diagonal(self) -> float:
        lo = self.positions.min(axis=0)
        hi = self.positions.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def with_positions(self, positions) -> "TriMesh":
        return TriMesh(np.asarray(positions, dtype=np.float64), self.triangles)


@dataclass
class LaplacianOperator:
    """Sparse unnormalized graph Laplacian L = D - A (CSR, float64)."""

    matrix: sparse.csr_matrix

    @property
    def vertex_count(self) -> int:
        return self.matrix.shape[0]


@dataclass
class DiffCoords:
    """Per-vertex differential coordinates delta = L @ positions, shape (N, 3)."""

    delta: np.ndarray


@dataclass
class AnchoredFactor:
    """Cholesky factor of M = L^T L + lambda^2 S^T S, reusable across frames.

    The factor is of the RCM-permuted matrix: with P the permutation,
    lower @ lower.T == M[perm][:, perm].  ``normal_matrix`` undoes the
    permutation for verification.
    """

    anchor_indices: np.ndarray
    anchor_weight: float
    perm: np.ndarray
    lower: np.ndarray
    laplacian: sparse.csr_matrix = field(repr=False)

    @property
    def vertex_count(self) -> int:
        return self.lower.shape[0]

    def normal_matrix(self) -> np.ndarray:
        """Dense M in the original vertex ordering (test/verification aid)."""
        m_perm = self.lower @ self.lower.T
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return m_perm[np.ix_(inv, inv)]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve M x = rhs for one or many right-hand-side columns."""
        squeeze = rhs.ndim == 1
        b = rhs.reshape(self.vertex_count, -1)[self.perm]
        y = solve_triangular(self.lower, b, lower=True, check_finite=False)
        z = solve_triangular(self.lower, y, trans="T", lower=True, check_finite=False)
        out = np.empty_like(z)
        out[self.perm] = z
        return out[:, 0] if squeeze else out


def _check_connected(n_vertices: int, adjacency: sparse.spmatrix) -> None:
    n_comp, labels = connected_components(adjacency, directed=False)
    if n_comp > 1:
        root_label = labels[0]
        unreachable = int(np.flatnonzero(labels != root_label)[0])
        raise DisconnectedMeshError(unreachable)


def build_laplacian(mesh: TriMesh) -> LaplacianOperator:
    """Graph Laplacian L = D - A over the triangle edge graph.

    Raises DisconnectedMeshError if any vertex cannot be reached from vertex 0
    (isolated vertices included).
    """
    n = mesh.vertex_count
    t = mesh.triangles
    i = np.concatenate([t[:, 0], t[:, 1], t[:, 1], t[:, 2], t[:, 2], t[:, 0]])
    j = np.concatenate([t[:, 1], t[:, 0], t[:, 2], t[:, 1], t[:, 0], t[:, 2]])
    adj = sparse.coo_matrix((np.ones(i.size), (i, j)), shape=(n, n)).tocsr()
    adj.data[:] = 1.0  # shared edges count once
    _check_connected(n, adj)
    degrees = np.asarray(adj.sum(axis=1)).ravel()
    lap = sparse.diags(degrees) - adj
    return LaplacianOperator(lap.tocsr())


def differential_coords(laplacian: LaplacianOperator, positions) -> DiffCoords:
    """delta = L @ positions, applied per axis."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (laplacian.vertex_count, 3):
        raise MeshError(
            f"positions shape {pos.shape} does not match Laplacian size {laplacian.vertex_count}"
        )
    return DiffCoords(laplacian.matrix @ pos)


def factor_anchored(laplacian: LaplacianOperator, anchors, weight: float) -> AnchoredFactor:
    """Factor M = L^T L + weight^2 S^T S once for reuse across frames."""
    anchors = np.unique(np.asarray(anchors, dtype=np.int64))
    n = laplacian.vertex_count
    if anchors.size == 0:
        raise MeshError("anchor list must be nonempty")
    if anchors.min() < 0 or anchors.max() >= n:
        raise MeshError("anchor index out of range")
    if not weight > 0:
        raise MeshError(f"anchor weight must be positive, got {weight}")
    lap = laplacian.matrix
    penalty = np.zeros(n)
    penalty[anchors] = weight * weight
    m = (lap.T @ lap + sparse.diags(penalty)).tocsr()
    perm = np.asarray(reverse_cuthill_mckee(m, symmetric_mode=True), dtype=np.int64)
    m_perm = m[np.ix_(perm, perm)].toarray()
    try:
        lower = np.linalg.cholesky(m_perm)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            "anchored normal matrix is not positive definite "
            "(is the mesh connected and the anchor set nonempty?)"
        ) from exc
    return AnchoredFactor(anchors, float(weight), perm, lower, lap)


def reconstruct(factor: AnchoredFactor, delta, anchor_positions) -> np.ndarray:
    """Solve min ||L x - delta||^2 + weight^2 ||x_anchors - c||^2 per column.

    Usually delta is (N, 3); any column count works, so several frames can
    share one pair of triangular solves by stacking their axes side by side.
    """
    d = delta.delta if isinstance(delta, DiffCoords) else np.asarray(delta, dtype=np.float64)
    c = np.asarray(anchor_positions, dtype=np.float64)
    n = factor.vertex_count
    if d.ndim != 2 or d.shape[0] != n:
        raise MeshError(f"delta shape {d.shape} does not match mesh size {n}")
    if c.shape != (factor.anchor_indices.size, d.shape[1]):
        raise MeshError(
            f"anchor positions shape {c.shape} does not match anchor count "
            f"{factor.anchor_indices.size} x {d.shape[1]} columns"
        )
    rhs = factor.laplacian.T @ d
    rhs[factor.anchor_indices] += (factor.anchor_weight ** 2) * c
    return factor.solve(rhs)


# --- OBJ I/O (v and f records only) ---------------------------------------


def read_obj(path) -> TriMesh:
    positions = []
    triangles = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: malformed vertex record")
                positions.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshError(f"{path}:{lineno}: only triangle faces are supported")
                # tolerate v/vt/vn face syntax, keep the vertex index only
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                triangles.append(idx)
            # all other record types ignored
    return TriMesh(np.array(positions, dtype=np.float64), np.array(triangles, dtype=np.int64))


def write_obj(mesh: TriMesh, path) -> None:
    """ASCII OBJ with v/f records; floats use shortest round-trip formatting."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in mesh.positions:
            fh.write(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        for t in mesh.triangles:
            fh.write(f"f {int(t[0]) + 1} {int(t[1]) + 1} {int(t[2]) + 1}\n")
