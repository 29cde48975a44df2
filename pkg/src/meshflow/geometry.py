"""Simplicial meshes and per-element geometry.

Element quantities are computed for all elements at once; arrays carry the
element index on the leading axis.  Edge matrices follow the usual
convention ``E_K = [x_1 - x_0, ..., x_d - x_0]`` (edge vectors as columns).
"""

from dataclasses import dataclass, field
from functools import cached_property
from math import factorial, sqrt

import numpy as np
from scipy import sparse

from . import dense

INTERIOR, BOUNDARY, CORNER = 0, 1, 2


class MeshError(ValueError):
    """Invalid mesh data or mesh file."""


class SingularElementError(MeshError):
    def __init__(self, element, det_value):
        self.element = int(element)
        self.det_value = float(det_value)
        super().__init__(f"element {self.element} is singular or inverted (det E_K = {self.det_value:.3e})")


@dataclass(frozen=True)
class ReferenceElement:
    dim: int
    xi: np.ndarray
    E_hat: np.ndarray
    det_E_hat: float

    @cached_property
    def E_hat_inv(self):
        return np.linalg.inv(self.E_hat)


def build_reference_element(d):
    """Equilateral simplex of unit volume with positive orientation."""
    if d == 2:
        s = 2.0 / 3.0 ** 0.25
        xi = np.array([[0.0, 0.0], [s, 0.0], [0.5 * s, 0.5 * sqrt(3.0) * s]])
    elif d == 3:
        a = (6.0 * sqrt(2.0)) ** (1.0 / 3.0)
        xi = np.array(
            [
                [0.0, 0.0, 0.0],
                [a, 0.0, 0.0],
                [0.5 * a, 0.5 * sqrt(3.0) * a, 0.0],
                [0.5 * a, sqrt(3.0) * a / 6.0, a * sqrt(2.0 / 3.0)],
            ]
        )
    else:
        raise ValueError(f"unsupported dimension d={d}; expected 2 or 3")
    E_hat = (xi[1:] - xi[0]).T
    return ReferenceElement(dim=d, xi=xi, E_hat=E_hat, det_E_hat=float(np.linalg.det(E_hat)))


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Simplicial mesh of an axis-aligned box domain.

    ``fixed_axes[i, a]`` is True when vertex ``i`` lies on a face of the box
    normal to axis ``a``; its velocity component along ``a`` must vanish.
    Corner vertices have every axis fixed.
    """

    vertices: np.ndarray
    elements: np.ndarray
    fixed_axes: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray

    @property
    def dim(self):
        return self.vertices.shape[1]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @cached_property
    def boundary_class(self):
        n_fixed = self.fixed_axes.sum(axis=1)
        tags = np.full(self.n_vertices, INTERIOR, dtype=int)
        tags[n_fixed > 0] = BOUNDARY
        tags[n_fixed == self.dim] = CORNER
        return tags

    @cached_property
    def vertex_patches(self):
        """For each vertex, the sorted indices of the elements containing it."""
        owners = np.repeat(np.arange(self.n_elements), self.dim + 1)
        verts = self.elements.ravel()
        order = np.argsort(verts, kind="stable")
        bounds = np.searchsorted(verts[order], np.arange(self.n_vertices + 1))
        return [owners[order[bounds[i] : bounds[i + 1]]] for i in range(self.n_vertices)]

    @cached_property
    def incidence(self):
        """Sparse (n_vertices, n_elements) vertex-element incidence matrix."""
        rows = self.elements.ravel()
        cols = np.repeat(np.arange(self.n_elements), self.dim + 1)
        return sparse.csr_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(self.n_vertices, self.n_elements)
        )

    @cached_property
    def adjacency(self):
        """Sparse boolean vertex-vertex adjacency (shared element), diagonal included."""
        a = (self.incidence @ self.incidence.T).tocsr()
        a.data[:] = 1.0
        return a

    @cached_property
    def edges(self):
        """Unique undirected edges as a sorted (n_edges, 2) array."""
        k = self.dim + 1
        pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
        e = np.concatenate([self.elements[:, [i, j]] for i, j in pairs])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def element_neighbors(self):
        """``nbr[k, j]``: element across the facet opposite local vertex j of k, or -1."""
        n, k = self.n_elements, self.dim + 1
        keys, owner = [], []
        for j in range(k):
            facet = np.sort(np.delete(self.elements, j, axis=1), axis=1)
            keys.append(facet)
            owner.append(np.column_stack([np.arange(n), np.full(n, j)]))
        keys = np.concatenate(keys)
        owner = np.concatenate(owner)
        order = np.lexsort(keys.T[::-1])
        keys, owner = keys[order], owner[order]
        same = np.all(keys[1:] == keys[:-1], axis=1)
        nbr = np.full((n, k), -1, dtype=np.int64)
        a, b = owner[:-1][same], owner[1:][same]
        nbr[a[:, 0], a[:, 1]] = b[:, 0]
        nbr[b[:, 0], b[:, 1]] = a[:, 0]
        return nbr

    @property
    def domain_volume(self):
        return float(np.prod(self.box_hi - self.box_lo))

    def with_vertices(self, vertices):
        """Same topology and boundary data, new coordinates (no validity check)."""
        return SimplicialMesh(
            vertices=np.asarray(vertices, dtype=float),
            elements=self.elements,
            fixed_axes=self.fixed_axes,
            box_lo=self.box_lo,
            box_hi=self.box_hi,
        )

    @classmethod
    def from_arrays(cls, vertices, elements, box=None, tol=1e-12):
        """Validate, orient and classify a mesh.

        ``box`` is ``(lo, hi)``; by default the bounding box of the vertices.
        Elements with negative orientation have their first two vertices
        swapped.
        """
        vertices = np.array(vertices, dtype=float)
        elements = np.array(elements, dtype=np.int64)
        if vertices.ndim != 2 or elements.ndim != 2:
            raise MeshError("vertices and elements must be 2-D arrays")
        d = vertices.shape[1]
        if elements.shape[1] != d + 1:
            raise MeshError(f"elements must have {d + 1} vertices in dimension {d}")
        if elements.size and (elements.min() < 0 or elements.max() >= len(vertices)):
            raise MeshError("element vertex index out of range")
        if np.any(np.diff(np.sort(elements, axis=1), axis=1) == 0):
            raise MeshError("element with repeated vertex index")
        if box is None:
            lo, hi = vertices.min(axis=0), vertices.max(axis=0)
        else:
            lo, hi = (np.asarray(b, dtype=float) for b in box)
        if np.any(vertices < lo - tol) or np.any(vertices > hi + tol):
            raise MeshError("vertex outside the domain box")

        dets = dense.det(_edge_matrices(vertices, elements))
        flip = dets < 0
        if np.any(flip):
            elements = elements.copy()
            elements[flip, 0], elements[flip, 1] = elements[flip, 1], elements[flip, 0].copy()
        scale = 1e-14 * float(np.prod(hi - lo))
        bad = np.flatnonzero(np.abs(dets) <= scale)
        if bad.size:
            raise SingularElementError(bad[0], dets[bad[0]])

        fixed = (np.abs(vertices - lo) <= tol) | (np.abs(vertices - hi) <= tol)
        return cls(vertices=vertices, elements=elements, fixed_axes=fixed, box_lo=lo, box_hi=hi)


def _edge_matrices(vertices, elements):
    x = vertices[elements]  # (N, d+1, d)
    return np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)


def edge_matrices(mesh):
    return _edge_matrices(mesh.vertices, mesh.elements)


def uniform_square_mesh(n, lo=(0.0, 0.0), hi=(1.0, 1.0)):
    """Structured n-by-n triangulation of a rectangle, each cell cut along the same diagonal."""
    if n < 1:
        raise ValueError("n must be positive")
    xs = np.linspace(lo[0], hi[0], n + 1)
    ys = np.linspace(lo[1], hi[1], n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    tri = np.empty((2 * n * n, 3), dtype=np.int64)
    tri[0::2] = np.column_stack([a, b, c])
    tri[1::2] = np.column_stack([a, c, d])
    return SimplicialMesh.from_arrays(vertices, tri, box=(lo, hi))


@dataclass(frozen=True)
class ElementGeometry:
    """Geometry of one element, or of a stack of elements along axis 0."""

    E_K: np.ndarray
    det_E_K: np.ndarray
    volume: np.ndarray
    FK_prime: np.ndarray
    J: np.ndarray
    det_J: np.ndarray
    E_K_inv: np.ndarray
    basis_gradients: np.ndarray = field(repr=False)


def geometry_from_edges(E, ref):
    d = E.shape[-1]
    detE = dense.det(E)
    Einv = dense.inv(E, detE)
    grads = np.concatenate([-Einv.sum(axis=-2, keepdims=True), Einv], axis=-2)
    return ElementGeometry(
        E_K=E,
        det_E_K=detE,
        volume=detE / factorial(d),
        FK_prime=E @ ref.E_hat_inv,
        J=ref.E_hat @ Einv,
        det_J=ref.det_E_hat / detE,
        E_K_inv=Einv,
        basis_gradients=grads,
    )


def element_geometry(mesh, ref, k=None, check=True):
    """Geometry of element ``k``, or of every element when ``k`` is None.

    Raises SingularElementError when ``det(E_K)`` is not above the scale
    relative tolerance ``1e-14 * |box|``.
    """
    if ref.dim != mesh.dim:
        raise ValueError("reference element dimension does not match the mesh")
    if k is None:
        E = edge_matrices(mesh)
    else:
        x = mesh.vertices[mesh.elements[k]]
        E = (x[1:] - x[0]).T
    geom = geometry_from_edges(E, ref)
    if check:
        tol = 1e-14 * mesh.domain_volume
        bad = np.flatnonzero(np.atleast_1d(geom.det_E_K) <= tol)
        if bad.size:
            which = bad[0] if k is None else k
            raise SingularElementError(which, np.atleast_1d(geom.det_E_K)[bad[0]])
    return geom


def _facet_measures(E, M):
    """Measures, in metric ``M``, of the d+1 facets of each element; shape (..., d+1)."""
    d = E.shape[-1]
    zero = np.zeros(E.shape[:-1] + (1,))
    P = np.concatenate([zero, E], axis=-1)  # vertex positions relative to x_0, as columns
    out = []
    for j in range(d + 1):
        others = [i for i in range(d + 1) if i != j]
        F = P[..., others[1:]] - P[..., others[:1]]
        gram = dense.transpose(F) @ M @ F
        out.append(np.sqrt(np.maximum(dense.det(gram), 0.0)) / factorial(d - 1))
    return np.stack(out, axis=-1)


def min_altitude_in_metric(geom, M_K):
    """Smallest altitude of the element(s) measured in the norm ``sqrt(v^T M_K v)``."""
    M_K = np.asarray(M_K, dtype=float)
    if not np.all(dense.is_spd(M_K, rtol=1e-10)):
        raise ValueError("metric is not symmetric positive definite")
    d = geom.E_K.shape[-1]
    vol_m = geom.volume * np.sqrt(dense.det(M_K))
    return d * vol_m / _facet_measures(geom.E_K, M_K).max(axis=-1)


def locate_points(mesh, points, start, max_steps=200, tol=1e-12):
    """Find the element containing each point by walking from ``start`` elements.

    Returns ``(elements, barycentric)``.  A point that leaves the mesh is
    assigned to the boundary element where the walk stopped, with
    extrapolated barycentric coordinates.
    """
    points = np.asarray(points, dtype=float)
    cur = np.array(start, dtype=np.int64, copy=True)
    lam = np.zeros((len(points), mesh.dim + 1))
    active = np.arange(len(points))
    nbr = mesh.element_neighbors
    for _ in range(max_steps):
        if active.size == 0:
            break
        el = cur[active]
        x = mesh.vertices[mesh.elements[el]]
        E = np.swapaxes(x[:, 1:] - x[:, :1], 1, 2)
        rest = np.einsum("nab,nb->na", dense.inv(E), points[active] - x[:, 0])
        bary = np.column_stack([1.0 - rest.sum(axis=1), rest])
        lam[active] = bary
        worst = np.argmin(bary, axis=1)
        nxt = nbr[el, worst]
        moving = (bary[np.arange(active.size), worst] < -tol) & (nxt >= 0)
        cur[active[moving]] = nxt[moving]
        active = active[moving]
    return cur, lam


def read_mesh(path):
    """Read the ASCII mesh format written by :func:`write_mesh`."""
    try:
        with open(path) as fh:
            tokens = fh.read().split()
        d, nv, ne = (int(t) for t in tokens[:3])
        pos = 3
        verts = np.array(tokens[pos : pos + nv * d], dtype=float).reshape(nv, d)
        pos += nv * d
        elems = np.array(tokens[pos : pos + ne * (d + 1)], dtype=np.int64).reshape(ne, d + 1)
        pos += ne * (d + 1)
        tags = np.array(tokens[pos : pos + nv], dtype=int)
        if tags.size != nv or pos + nv != len(tokens):
            raise MeshError(f"{path}: unexpected token count")
    except (OSError, ValueError, IndexError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"cannot read mesh file {path}: {exc}") from exc
    mesh = SimplicialMesh.from_arrays(verts, elems)
    if not np.array_equal(tags, mesh.boundary_class):
        bad = int(np.flatnonzero(tags != mesh.boundary_class)[0])
        raise MeshError(
            f"{path}: boundary tag {tags[bad]} of vertex {bad} is inconsistent "
            f"with the domain box (expected {mesh.boundary_class[bad]})"
        )
    return mesh


def write_mesh(mesh, path):
    lines = [f"{mesh.dim} {mesh.n_vertices} {mesh.n_elements}"]
    lines += [" ".join(f"{c:.17g}" for c in v) for v in mesh.vertices]
    lines += [" ".join(str(int(i)) for i in e) for e in mesh.elements]
    lines += [str(int(t)) for t in mesh.boundary_class]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
