"""Triangulation, finite-element matrices and the Matern-field precision.

The spatial random field with Matern covariance (smoothness fixed at 1) is
represented as a Gaussian Markov random field on a triangular mesh: with
lumped mass matrix C and stiffness matrix G, the precision of the node
weights is

    Q_s = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G),

which is sparse because linear basis functions only overlap between mesh
neighbours.  kappa controls the correlation range rho = sqrt(8)/kappa (the
distance at which correlation drops to about 0.13) and tau is normalized so
the stationary marginal standard deviation equals a requested sigma.
"""

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, cKDTree
from scipy.special import k1

from .errors import GeometryError, ParameterError

NU = 1.0  # smoothness of the Matern family; the order-2 operator above is exact only for nu=1


@dataclass(frozen=True)
class Mesh:
    """Triangulation: node coordinates, CCW triangles, hull-boundary flags."""

    nodes: np.ndarray       # (m, 2) float
    triangles: np.ndarray   # (k, 3) int
    boundary: np.ndarray    # (m,) bool, True for convex-hull nodes

    @property
    def m(self) -> int:
        return self.nodes.shape[0]

    def triangle_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        return 0.5 * np.abs(_cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]))

    def to_json(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "triangles": self.triangles.tolist(),
            "boundary": self.boundary.astype(int).tolist(),
        }

    @staticmethod
    def from_json(doc: dict) -> "Mesh":
        return Mesh(
            nodes=np.asarray(doc["nodes"], dtype=float),
            triangles=np.asarray(doc["triangles"], dtype=int),
            boundary=np.asarray(doc["boundary"], dtype=bool),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @staticmethod
    def load(path) -> "Mesh":
        with open(path) as fh:
            return Mesh.from_json(json.load(fh))


@dataclass(frozen=True)
class FemMatrices:
    """Lumped mass diagonal `c` and stiffness matrix `G` of the mesh."""

    c: np.ndarray        # (m,) positive diagonal of the lumped mass matrix
    G: sp.csc_matrix     # (m, m) symmetric, zero row sums

    @property
    def C(self) -> sp.csc_matrix:
        return sp.diags(self.c).tocsc()

    @property
    def m(self) -> int:
        return self.c.shape[0]


@dataclass(frozen=True)
class SpatialPrecision:
    """Sparse precision of the mesh-node field plus its (kappa, tau)."""

    Q: sp.csc_matrix
    kappa: float
    tau: float

    @property
    def m(self) -> int:
        return self.Q.shape[0]


@dataclass(frozen=True)
class Projector:
    """Barycentric interpolation matrix from mesh nodes to data locations."""

    A: sp.csr_matrix     # (n, m); rows nonnegative, sum to 1, <= 3 nonzeros


def _dedupe(points: np.ndarray, tol: float) -> np.ndarray:
    """Keep the first of any group of points closer than `tol`."""
    tree = cKDTree(points)
    keep = np.ones(points.shape[0], dtype=bool)
    for i, j in sorted(tree.query_pairs(tol)):
        if keep[i]:
            keep[j] = False
    return points[keep]


def _cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """z component of the cross product of 2-D vectors."""
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _triangulate(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tri = Delaunay(points)
    simplices = tri.simplices.copy()
    p = points[simplices]
    signed = 0.5 * _cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    flip = signed < 0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]
    scale = np.ptp(points, axis=0).max()
    degenerate = np.abs(signed) <= 1e-14 * scale**2
    if degenerate.any():
        simplices = simplices[~degenerate]
    hull = np.zeros(points.shape[0], dtype=bool)
    hull[np.unique(tri.convex_hull)] = True
    return simplices, hull


def _edge_table(triangles: np.ndarray) -> dict[tuple[int, int], int]:
    """Map sorted edge -> number of adjacent triangles."""
    counts: dict[tuple[int, int], int] = {}
    for a, b, c in triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            counts[key] = counts.get(key, 0) + 1
    return counts


def build_mesh(points, max_edge: float, cutoff: float = 0.0,
               extension: float = 0.0, max_rounds: int = 40) -> Mesh:
    """Triangulate data locations, optionally padded by an outer ring.

    Points closer than `cutoff` are thinned (first one kept).  When
    `extension` > 0 a ring of helper nodes is placed that far beyond the
    furthest data point, so every data location ends up strictly interior
    to the hull.  Interior edges longer than `max_edge` are split at their
    midpoint and the set re-triangulated until none remain; hull edges are
    exempt.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.ndim != 2 or points.shape[1] != 2:
        raise GeometryError("points must be an (n, 2) array")
    if max_edge <= 0:
        raise ParameterError("max_edge must be positive")
    if cutoff > 0:
        points = _dedupe(points, cutoff)
    else:
        points = _dedupe(points, 1e-12 * (1.0 + np.abs(points).max()))
    if points.shape[0] < 3:
        raise GeometryError("need at least 3 distinct points after thinning")
    centered = points - points.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-10 * (1 + np.abs(centered).max())) < 2:
        raise GeometryError("all points are collinear")

    if extension > 0:
        center = points.mean(axis=0)
        radius = np.hypot(*(points - center).T).max() + extension
        n_ring = int(np.clip(np.ceil(2 * np.pi * radius / max_edge), 16, 128))
        angles = 2 * np.pi * np.arange(n_ring) / n_ring
        ring = center + radius * np.column_stack([np.cos(angles), np.sin(angles)])
        points = np.vstack([points, ring])

    scale = 1.0 + np.abs(points).max()
    converged = False
    triangles = None
    for _ in range(max_rounds):
        triangles, _ = _triangulate(points)
        used = np.unique(triangles)
        if used.size < points.shape[0]:
            # Qhull omitted a degenerate point or zero-area filtering
            # orphaned a node; such nodes are float-level duplicates and
            # carry no geometry of their own
            points = points[used]
            continue
        long_edges = _long_interior_edges(points, triangles, max_edge)
        if not long_edges:
            converged = True
            break
        # global rounds: re-triangulate after inserting exact midpoints,
        # skipping candidates that already exist at float tolerance
        tree = cKDTree(points)
        mids = [(points[u] + points[v]) / 2.0 for u, v in long_edges]
        fresh = [m for m in mids if tree.query(m, k=1)[0] > 1e-7 * scale]
        if not fresh:
            break  # Qhull keeps a degenerate configuration; finish locally
        points = np.vstack([points, np.asarray(fresh)])
    if not converged:
        # local finish: split surviving long edges on the triangle
        # structure directly; split halves are medians, so no new edge
        # ever exceeds the current maximum and the loop terminates
        triangles, _ = _triangulate(points)
        used = np.unique(triangles)
        if used.size < points.shape[0]:
            points = points[used]
            triangles, _ = _triangulate(points)
            if np.unique(triangles).size < points.shape[0]:
                raise GeometryError("could not form a triangulation covering all nodes")
        points, triangles = _split_long_edges(points, triangles, max_edge)
    hull = np.zeros(points.shape[0], dtype=bool)
    for (u, v), n_adj in _edge_table(triangles).items():
        if n_adj == 1:
            hull[u] = hull[v] = True
    return Mesh(nodes=points, triangles=triangles, boundary=hull)


def _long_interior_edges(points, triangles, max_edge) -> list:
    """Interior (two-triangle) edges longer than max_edge."""
    out = []
    for (u, v), n_adj in _edge_table(triangles).items():
        if n_adj < 2:
            continue  # hull edge
        if np.hypot(*(points[u] - points[v])) > max_edge * (1 + 1e-12):
            out.append((u, v))
    return out


def _split_long_edges(points, triangles, max_edge, max_passes: int = 200):
    """Longest-edge bisection until no interior edge exceeds max_edge.

    Any triangle owning a long interior edge has its LONGEST edge split at
    the midpoint (both adjacent triangles are subdivided, so the mesh stays
    conforming).  Splitting the longest edge rather than the offending one
    is what guarantees termination: otherwise sliver chains regenerate
    equal-length edges forever.  Children of a CCW triangle stay CCW.
    """
    triangles = [tuple(int(x) for x in t) for t in triangles]
    pts = list(points)

    def length(u, v):
        return float(np.hypot(*(pts[u] - pts[v])))

    for _ in range(max_passes):
        owners: dict[tuple[int, int], list[int]] = {}
        for idx, (a, b, c) in enumerate(triangles):
            for u, v in ((a, b), (b, c), (c, a)):
                key = (u, v) if u < v else (v, u)
                owners.setdefault(key, []).append(idx)
        marked = set()
        for (u, v), tris in owners.items():
            if len(tris) == 2 and length(u, v) > max_edge * (1 + 1e-12):
                marked.update(tris)
        if not marked:
            return np.asarray(pts), np.asarray(triangles, dtype=int)
        to_split = set()
        for idx in marked:
            a, b, c = triangles[idx]
            sides = [(a, b), (b, c), (c, a)]
            u, v = max(sides, key=lambda e: length(*e))
            to_split.add((u, v) if u < v else (v, u))
        busy: set[int] = set()
        replacements: dict[int, list[tuple[int, int, int]]] = {}
        for u, v in sorted(to_split, key=lambda e: -length(*e)):
            tris = owners[(u, v)]
            if busy.intersection(tris):
                continue
            busy.update(tris)
            m = len(pts)
            pts.append((pts[u] + pts[v]) / 2.0)
            for idx in tris:
                a, b, c = triangles[idx]
                # rotate so the split edge is (a, b)
                for _ in range(3):
                    if {a, b} == {u, v}:
                        break
                    a, b, c = b, c, a
                replacements[idx] = [(a, m, c), (m, b, c)]
        new_triangles = []
        for idx, tri in enumerate(triangles):
            new_triangles.extend(replacements.get(idx, [tri]))
        triangles = new_triangles
    raise GeometryError("edge splitting did not converge")


def fem_matrices(mesh: Mesh) -> FemMatrices:
    """Assemble the lumped mass diagonal and the stiffness matrix.

    Per triangle with vertices p0, p1, p2 and area A the linear-element
    stiffness contribution is K_ij = (e_i . e_j) / (4A) with e_i the edge
    opposite vertex i; each vertex receives A/3 of lumped mass.
    """
    pts = mesh.nodes[mesh.triangles]               # (k, 3, 2)
    e = np.stack([pts[:, 2] - pts[:, 1],
                  pts[:, 0] - pts[:, 2],
                  pts[:, 1] - pts[:, 0]], axis=1)  # (k, 3, 2)
    area = 0.5 * _cross2(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
    if np.any(area <= 0):
        raise GeometryError("degenerate triangle in mesh")

    k = mesh.triangles.shape[0]
    local = np.einsum("tie,tje->tij", e, e) / (4.0 * area)[:, None, None]
    rows = np.repeat(mesh.triangles, 3, axis=1).reshape(k, 3, 3)
    cols = np.tile(mesh.triangles, (1, 3)).reshape(k, 3, 3)
    G = sp.coo_matrix(
        (local.ravel(), (rows.ravel(), cols.ravel())),
        shape=(mesh.m, mesh.m),
    ).tocsc()

    c = np.zeros(mesh.m)
    np.add.at(c, mesh.triangles.ravel(), np.repeat(area / 3.0, 3))
    if np.any(c <= 0):
        raise GeometryError("mesh has a node with no adjacent triangle")
    return FemMatrices(c=c, G=G)


def spde_precision(fem: FemMatrices, kappa: float, tau: float) -> SpatialPrecision:
    """Q_s = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)."""
    if kappa <= 0 or tau <= 0:
        raise ParameterError("kappa and tau must be positive")
    Cinv = sp.diags(1.0 / fem.c)
    Q = tau**2 * (kappa**4 * fem.C + 2.0 * kappa**2 * fem.G + fem.G @ Cinv @ fem.G)
    Q = ((Q + Q.T) * 0.5).tocsc()  # exact symmetry despite float round-off
    return SpatialPrecision(Q=Q, kappa=float(kappa), tau=float(tau))


def matern_correlation(d, kappa: float):
    """Correlation at distance d for the smoothness-1 family: (kd) K1(kd).

    Continuous at zero where the limit is 1; strictly decreasing in d.
    """
    if kappa <= 0:
        raise ParameterError("kappa must be positive")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ParameterError("distances must be nonnegative")
    x = kappa * d
    out = np.ones_like(x)
    pos = x > 0
    out[pos] = x[pos] * k1(x[pos])
    if out.ndim == 0:
        return float(out)
    return out


def convert_params(rho: float, sigma: float) -> tuple[float, float]:
    """Map (range rho, marginal SD sigma) to the SPDE scales (kappa, tau).

    kappa = sqrt(8 nu)/rho, and tau is set from the closed-form stationary
    variance sigma^2 = 1 / (4 pi kappa^2 tau^2) in two dimensions.
    """
    if rho <= 0 or sigma <= 0:
        raise ParameterError("rho and sigma must be positive")
    kappa = np.sqrt(8.0 * NU) / rho
    tau = 1.0 / (np.sqrt(4.0 * np.pi) * kappa * sigma)
    return float(kappa), float(tau)


def invert_params(kappa: float, tau: float) -> tuple[float, float]:
    """Inverse of convert_params."""
    if kappa <= 0 or tau <= 0:
        raise ParameterError("kappa and tau must be positive")
    rho = np.sqrt(8.0 * NU) / kappa
    sigma = 1.0 / (np.sqrt(4.0 * np.pi) * kappa * tau)
    return float(rho), float(sigma)


def build_projector(mesh: Mesh, locations) -> Projector:
    """Barycentric weights of each location in its containing triangle.

    Boundary locations count as inside (weights within 1e-9 of zero are
    clamped); a location outside every triangle raises GeometryError.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    tri_pts = mesh.nodes[mesh.triangles]           # (k, 3, 2)
    origin = tri_pts[:, 0]                          # (k, 2)
    span = np.stack([tri_pts[:, 1] - origin, tri_pts[:, 2] - origin], axis=2)
    inv_span = np.linalg.inv(span)                  # (k, 2, 2)

    rows, cols, vals = [], [], []
    for i, loc in enumerate(locations):
        uv = np.einsum("kab,kb->ka", inv_span, loc - origin)
        bary = np.column_stack([1.0 - uv.sum(axis=1), uv])
        ok = np.nonzero(bary.min(axis=1) >= -1e-9)[0]
        if ok.size == 0:
            raise GeometryError(f"location {i} at {loc.tolist()} lies outside the mesh")
        w = np.clip(bary[ok[0]], 0.0, None)
        w /= w.sum()
        for j in range(3):
            if w[j] > 0.0:
                rows.append(i)
                cols.append(mesh.triangles[ok[0], j])
                vals.append(w[j])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(locations.shape[0], mesh.m))
    return Projector(A=A)
