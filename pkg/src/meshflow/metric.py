"""Metric tensor fields: Hessian recovery, |H|, and the L2-optimal metric."""

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from . import dense
from .geometry import MeshError, edge_matrices


class RecoveryError(MeshError):
    """A least-squares patch stayed rank deficient after enlargement."""


@dataclass(frozen=True)
class HessianRecoveryConfig:
    patch_depth: int = 1
    eigen_floor: float = 1e-3
    absolute_floor: float = 1e-8
    regularize: bool = True
    regularization_scale: float = 2.0

    def __post_init__(self):
        if self.patch_depth < 1:
            raise ValueError("patch_depth must be >= 1")
        if not self.eigen_floor > 0 or not self.absolute_floor > 0:
            raise ValueError("eigenvalue floors must be positive")
        if not self.regularization_scale > 0:
            raise ValueError("regularization_scale must be positive")


@dataclass(frozen=True, eq=False)
class MetricField:
    """Nodal SPD metric tensors with global eigenvalue bounds."""

    nodal_metrics: np.ndarray
    m_lower: float
    m_upper: float

    @classmethod
    def from_nodal(cls, nodal):
        nodal = 0.5 * (nodal + dense.transpose(nodal))
        lam = np.linalg.eigvalsh(nodal)
        if lam[:, 0].min() <= 0:
            raise ValueError("nodal metric is not positive definite")
        return cls(nodal_metrics=nodal, m_lower=float(lam[:, 0].min()), m_upper=float(lam[:, -1].max()))

    @classmethod
    def constant(cls, mesh, M):
        M = np.asarray(M, dtype=float)
        return cls.from_nodal(np.broadcast_to(M, (mesh.n_vertices,) + M.shape).copy())

    @classmethod
    def from_function(cls, mesh, fn):
        """Sample a tensor-valued function ``fn(points) -> (n, d, d)`` at the vertices."""
        return cls.from_nodal(np.asarray(fn(mesh.vertices), dtype=float))

    def upper_triangle(self):
        d = self.nodal_metrics.shape[-1]
        iu = np.triu_indices(d)
        return self.nodal_metrics[:, iu[0], iu[1]]


def element_average_metric(field, mesh, k=None):
    """Vertex mean of the nodal metrics on element ``k`` (all elements if None)."""
    nodal = field.nodal_metrics if isinstance(field, MetricField) else np.asarray(field)
    if k is None:
        return nodal[mesh.elements].mean(axis=1)
    return nodal[mesh.elements[k]].mean(axis=0)


def _monomial_exponents(d):
    return list(combinations_with_replacement(range(d), 2))


def _design_rows(dx, d):
    """Quadratic design matrix rows [1, x_a, x_a x_b] for local coordinates ``dx`` (..., d)."""
    cols = [np.ones(dx.shape[:-1])]
    cols += [dx[..., a] for a in range(d)]
    cols += [dx[..., a] * dx[..., b] for a, b in _monomial_exponents(d)]
    return np.stack(cols, axis=-1)


_PATCH_CACHE = {}


def _patch_table(mesh, depth):
    """Padded neighbour table (n_vertices, width) and mask for graph distance <= depth."""
    key = (id(mesh.elements), depth)
    hit = _PATCH_CACHE.get(key)
    if hit is not None and hit[0] is mesh.elements:
        return hit[1], hit[2]
    reach = mesh.adjacency
    for _ in range(depth - 1):
        reach = reach @ mesh.adjacency
    reach = reach.tocsr()
    counts = np.diff(reach.indptr)
    width = counts.max()
    table = np.zeros((mesh.n_vertices, width), dtype=np.int64)
    mask = np.arange(width) < counts[:, None]
    table[mask] = reach.indices
    table[~mask] = np.repeat(np.arange(mesh.n_vertices), width - counts)
    if len(_PATCH_CACHE) > 64:
        _PATCH_CACHE.clear()
    _PATCH_CACHE[key] = (mesh.elements, table, mask)
    return table, mask


def _fit_vertex_hessians(mesh, u, depth, vertices):
    d = mesh.dim
    table, mask = _patch_table(mesh, depth)
    table, mask = table[vertices], mask[vertices]
    x = mesh.vertices
    dx = x[table] - x[vertices][:, None, :]
    h = np.sqrt((dx ** 2).sum(axis=-1).max(axis=1))  # patch radius, for conditioning
    A = _design_rows(dx / h[:, None, None], d) * mask[..., None]
    b = (u[table] - u[vertices][:, None]) * mask
    s = np.linalg.svd(A, compute_uv=False)
    if A.shape[1] < A.shape[2]:  # fewer patch points than monomials
        ok = np.zeros(len(vertices), dtype=bool)
    else:
        ok = s[:, -1] > 1e-8 * s[:, 0]
    coef = np.einsum("nij,nj->ni", np.linalg.pinv(A), b)
    H = np.zeros((len(vertices), d, d))
    for c, (a, bb) in enumerate(_monomial_exponents(d), start=1 + d):
        if a == bb:
            H[:, a, a] = 2.0 * coef[:, c]
        else:
            H[:, a, bb] = H[:, bb, a] = coef[:, c]
    return H / (h ** 2)[:, None, None], ok


def recover_vertex_hessians(mesh, u_nodal, cfg=HessianRecoveryConfig()):
    """Least-squares quadratic fit around every vertex; returns (n_vertices, d, d)."""
    u = np.asarray(u_nodal, dtype=float)
    if u.shape != (mesh.n_vertices,):
        raise ValueError("u_nodal must hold one value per vertex")
    everyone = np.arange(mesh.n_vertices)
    H, ok = _fit_vertex_hessians(mesh, u, cfg.patch_depth, everyone)
    if not ok.all():
        retry = everyone[~ok]
        H2, ok2 = _fit_vertex_hessians(mesh, u, cfg.patch_depth + 1, retry)
        if not ok2.all():
            raise RecoveryError(f"rank-deficient Hessian fitting patch at vertex {retry[~ok2][0]}")
        H[retry] = H2
    return H


def recover_hessian(mesh, u_nodal, cfg=HessianRecoveryConfig()):
    """Element Hessians: the mean of the recovered Hessians at the element's vertices."""
    return recover_vertex_hessians(mesh, u_nodal, cfg)[mesh.elements].mean(axis=1)


def absolute_value_spd(H, eigen_floor=1e-3, absolute_floor=1e-8):
    """``Q diag(|lambda|) Q^T`` with eigenvalues floored to keep the result SPD."""
    H = np.asarray(H, dtype=float)
    lam, Q = np.linalg.eigh(0.5 * (H + dense.transpose(H)))
    mag = np.abs(lam)
    floor = np.maximum(eigen_floor * mag.max(axis=-1, keepdims=True), absolute_floor)
    mag = np.maximum(mag, floor)
    return (Q * mag[..., None, :]) @ dense.transpose(Q)


def optimal_l2_metric(absH):
    """``det(|H|)^(-1/(d+4)) |H|``: the metric for L2 error of linear interpolation."""
    d = absH.shape[-1]
    return dense.det(absH)[..., None, None] ** (-1.0 / (d + 4)) * absH


def regularization_level(absH, vol):
    """``alpha_h`` such that ``det(|H|/alpha_h)^(2/(d+4))`` has unit mean over the domain."""
    d = absH.shape[-1]
    mean = np.sum(vol * dense.det(absH) ** (2.0 / (d + 4))) / vol.sum()
    return mean ** ((d + 4) / (2.0 * d))


def build_metric(mesh, u_nodal, cfg=HessianRecoveryConfig()):
    """Metric field adapted to the nodal function ``u_nodal``.

    Element metrics come from the recovered Hessians; the nodal metric is the
    volume-weighted mean over the incident elements.  With ``cfg.regularize``
    the Hessian is replaced by ``I + |H|/(s alpha_h)``, ``s`` being
    ``cfg.regularization_scale``, before forming the metric.  This bounds the
    metric from below where ``u`` is locally linear; larger ``s`` gives a
    more uniform metric.
    """
    absH = absolute_value_spd(recover_hessian(mesh, u_nodal, cfg), cfg.eigen_floor, cfg.absolute_floor)
    d = mesh.dim
    vol = np.abs(dense.det(edge_matrices(mesh)))
    if cfg.regularize:
        absH = np.eye(d) + absH / (cfg.regularization_scale * regularization_level(absH, vol))
    M_elem = optimal_l2_metric(absH)
    weighted = mesh.incidence @ (vol[:, None] * M_elem.reshape(-1, d * d))
    total = mesh.incidence @ vol
    return MetricField.from_nodal((weighted / total[:, None]).reshape(-1, d, d))
