"""Meshing functionals built from the equidistribution and alignment conditions.

Both functionals have the element-sum form ``I_h = sum_K |K| G(J, det J, M_K)``
with ``J = (F_K')^{-1}``.  Matrix derivatives use the transposed layout,
``(dG/dJ)_{ij} = dG/dJ_{ji}``, so that ``dG = tr(dG/dJ @ dJ)``.
"""

import warnings
from dataclasses import dataclass
from math import factorial

import numpy as np

from . import dense
from .geometry import build_reference_element, element_geometry
from .metric import element_average_metric

NEW = "new"
EXISTING = "existing"


@dataclass(frozen=True)
class FunctionalSpec:
    """Which functional to use and its parameters.

    ``theta`` is only meaningful for the existing (averaged) functional.
    """

    kind: str = NEW
    p: float = 1.0
    theta: float = 1.0 / 3.0
    d: int = 2

    def __post_init__(self):
        if self.kind not in (NEW, EXISTING):
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.kind == EXISTING:
            if not 0.0 < self.theta < 1.0:
                raise ValueError("theta must lie in (0, 1)")
            if not (self.theta <= 0.5 and self.p >= 1 and self.d * self.p >= 2):
                warnings.warn(
                    f"existing functional with theta={self.theta}, p={self.p}, d={self.d} "
                    "is outside the coercive/polyconvex regime",
                    stacklevel=3,
                )
        else:
            if self.p < 1:
                raise ValueError("the new functional requires p >= 1")
            if self.p == 1:
                # coercivity is proven for p > 1 only
                warnings.warn("new functional with p = 1: coercivity not guaranteed", stacklevel=3)

    @classmethod
    def new(cls, p=1.0, d=2):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return cls(kind=NEW, p=p, d=d)

    @classmethod
    def existing(cls, theta=1.0 / 3.0, p=1.5, d=2):
        return cls(kind=EXISTING, p=p, theta=theta, d=d)

    def balance(self, det_M):
        """The positive scalar P_i multiplying the mesh velocity at a vertex."""
        if self.kind == EXISTING:
            return det_M ** ((self.p - 1.0) / 2.0)
        return det_M ** (2.0 / self.d)


@dataclass(frozen=True)
class GDerivatives:
    G: np.ndarray
    dG_dJ: np.ndarray
    dG_ddetJ: np.ndarray
    dG_dM: np.ndarray


@dataclass(frozen=True)
class EnergyBreakdown:
    I_h: float
    I_eq: float | None
    I_ali: float | None
    sigma_h: float
    gamma_h: float
    per_element: np.ndarray


def _check_args(J, detJ, M):
    J = np.asarray(J, dtype=float)
    M = np.asarray(M, dtype=float)
    detJ = np.asarray(detJ, dtype=float)
    if not np.all(dense.is_spd(M, rtol=1e-10)):
        raise ValueError("metric argument is not symmetric positive definite")
    ref = dense.det(J)
    if np.any(np.abs(ref - detJ) > 1e-10 * np.maximum(np.abs(ref), 1e-300)):
        raise ValueError("detJ is inconsistent with det(J)")
    return J, detJ, M


def g_existing(J, detJ, M, spec, check=True):
    """Integrand of the theta-averaged equidistribution/alignment functional."""
    if check:
        J, detJ, M = _check_args(J, detJ, M)
    d, p, theta = J.shape[-1], spec.p, spec.theta
    dp2 = d * p / 2.0
    Minv = dense.inv(M)
    detM = dense.det(M)
    sq = np.sqrt(detM)
    MinvJt = Minv @ dense.transpose(J)
    tr = dense.trace(J @ MinvJt)
    coef = (1.0 - 2.0 * theta) * d ** dp2
    ratio = detJ / sq
    t_pow = tr ** dp2
    G = theta * sq * t_pow + coef * sq * ratio ** p
    dG_dJ = (d * p * theta * sq * tr ** (dp2 - 1.0))[..., None, None] * MinvJt
    dG_ddetJ = p * coef * detM ** ((1.0 - p) / 2.0) * detJ ** (p - 1.0)
    dG_dM = (
        (-0.5 * theta * d * p * sq * tr ** (dp2 - 1.0))[..., None, None] * (MinvJt @ J @ Minv)
        + (0.5 * theta * sq * t_pow)[..., None, None] * Minv
        + (0.5 * coef * (1.0 - p) * sq * ratio ** p)[..., None, None] * Minv
    )
    return GDerivatives(G=G, dG_dJ=dG_dJ, dG_ddetJ=dG_ddetJ, dG_dM=dG_dM)


def g_new(J, detJ, M, gamma_h, spec, check=True):
    """Integrand of the single-condition functional.

    ``gamma_h`` enters as a constant: its weak dependence on the mesh is not
    differentiated.
    """
    if check:
        J, detJ, M = _check_args(J, detJ, M)
        if not np.all(np.asarray(gamma_h) > 0):
            raise ValueError("gamma_h must be positive")
    d, p = J.shape[-1], spec.p
    Minv = dense.inv(M)
    sq = np.sqrt(dense.det(M))
    MinvJt = Minv @ dense.transpose(J)
    A = J @ MinvJt - np.asarray(gamma_h)[..., None, None] * np.eye(d)
    nrm2 = (A * A).sum(axis=(-2, -1))
    G = sq * nrm2 ** p
    dG_dJ = (4.0 * p * sq * nrm2 ** (p - 1.0))[..., None, None] * (MinvJt @ A)
    dG_ddetJ = np.zeros_like(G)
    dG_dM = 0.5 * G[..., None, None] * Minv - 0.5 * dG_dJ @ J @ Minv
    return GDerivatives(G=G, dG_dJ=dG_dJ, dG_ddetJ=dG_ddetJ, dG_dM=dG_dM)


def evaluate_g(J, detJ, M, spec, gamma_h=None, check=False):
    if spec.kind == EXISTING:
        return g_existing(J, detJ, M, spec, check=check)
    return g_new(J, detJ, M, gamma_h, spec, check=check)


def sigma_h(mesh, metric, geom=None):
    """Total volume of the mesh measured in the element-averaged metric."""
    if geom is None:
        geom = element_geometry(mesh, build_reference_element(mesh.dim))
    M_K = element_average_metric(metric, mesh)
    return float(np.sum(geom.volume * np.sqrt(dense.det(M_K))))


def gamma_from_sigma(sigma, n_elements, d):
    return (sigma / n_elements) ** (-2.0 / d)


def energy(mesh, metric, spec, gamma_h=None, ref=None, geom=None):
    """Evaluate ``I_h`` element by element.

    For the new functional ``gamma_h`` defaults to ``(sigma_h/N)^(-2/d)`` at
    the current mesh.  For the existing functional the equidistribution and
    alignment parts are returned as well.
    """
    ref = ref or build_reference_element(mesh.dim)
    if geom is None:
        geom = element_geometry(mesh, ref)
    d = mesh.dim
    M_K = element_average_metric(metric, mesh)
    sq = np.sqrt(dense.det(M_K))
    sig = float(np.sum(geom.volume * sq))
    gam = gamma_from_sigma(sig, mesh.n_elements, d) if gamma_h is None else float(gamma_h)
    g = evaluate_g(geom.J, geom.det_J, M_K, spec, gamma_h=gam)
    per = geom.volume * g.G
    I_eq = I_ali = None
    if spec.kind == EXISTING:
        p = spec.p
        dp2 = d * p / 2.0
        eq_term = d ** dp2 * (geom.det_J / sq) ** p
        tr = dense.trace(geom.J @ dense.inv(M_K) @ dense.transpose(geom.J))
        I_eq = float(np.sum(geom.volume * sq * eq_term))
        I_ali = float(np.sum(geom.volume * sq * (tr ** dp2 - eq_term)))
    return EnergyBreakdown(
        I_h=float(per.sum()), I_eq=I_eq, I_ali=I_ali, sigma_h=sig, gamma_h=gam, per_element=per
    )


def coercivity_constants(spec, m_lower, m_upper, gamma_h):
    """Constants (alpha, beta) with ``G >= alpha ||J||_F^(4p) - beta`` for the new functional."""
    if spec.kind != NEW:
        raise ValueError("coercivity constants are derived for the new functional")
    if spec.p <= 1:
        warnings.warn("p <= 1: coercivity constants evaluated outside the proven regime", stacklevel=2)
    d, p = spec.d, spec.p
    alpha = 2.0 ** (1.0 - 2.0 * p) * m_lower ** (d / 2.0) / (m_upper ** (2.0 * p) * d ** (2.0 * p))
    beta = m_lower ** (d / 2.0) * (gamma_h ** 2 * d) ** p
    return alpha, beta


@dataclass(frozen=True)
class CorollaryBounds:
    C1: float
    C2: float
    altitude_bound: float
    volume_bound: float


def corollary_bounds(spec, m_upper, N, I_h_initial, domain_volume, alpha, beta):
    """Lower bounds on metric altitudes and volumes along an energy-decreasing trajectory."""
    d, p = spec.d, spec.p
    q = 4.0 * p - d
    if q <= 0:
        raise ValueError("bounds require 4p > d")
    df = factorial(d)
    # logarithms keep large p from overflowing 2^(6p) and friends
    log_num = 6.0 * p * np.log(2.0) + (4.0 * p / d) * np.log(df) + np.log(alpha)
    log_den = (
        4.0 * p * np.log(d)
        + (4.0 * p - 2.0 * p / d) * np.log(d + 1.0)
        + np.log(beta * domain_volume + I_h_initial)
    )
    log_c1 = (log_num - log_den) / q
    C1 = float(np.exp(log_c1))
    C2 = C1 ** d / df
    alt = float(np.exp(log_c1 - d / (2.0 * q) * np.log(m_upper) - 4.0 * p / (d * q) * np.log(N)))
    vol = float(np.exp(
        d * log_c1 - np.log(df)
        - ((d * d) / (2.0 * q) + d / 2.0) * np.log(m_upper)
        - 4.0 * p / q * np.log(N)
    ))
    return CorollaryBounds(C1=C1, C2=C2, altitude_bound=alt, volume_bound=vol)
