"""Mesh quality measures, interpolation error and trajectory audits."""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import dense
from .geometry import build_reference_element, element_geometry
from .metric import element_average_metric

# 6-point, degree-4 symmetric rule on the triangle (barycentric, weights sum to 1)
_TRI_A, _TRI_B = 0.445948490915965, 0.091576213509771
_TRI_POINTS = np.array(
    [
        [1 - 2 * _TRI_A, _TRI_A, _TRI_A],
        [_TRI_A, 1 - 2 * _TRI_A, _TRI_A],
        [_TRI_A, _TRI_A, 1 - 2 * _TRI_A],
        [1 - 2 * _TRI_B, _TRI_B, _TRI_B],
        [_TRI_B, 1 - 2 * _TRI_B, _TRI_B],
        [_TRI_B, _TRI_B, 1 - 2 * _TRI_B],
    ]
)
_TRI_WEIGHTS = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)

# 4-point, degree-2 rule on the tetrahedron
_TET_A, _TET_B = 0.5854101966249685, 0.1381966011250105
_TET_POINTS = np.full((4, 4), _TET_B) + np.eye(4) * (_TET_A - _TET_B)
_TET_WEIGHTS = np.full(4, 0.25)


@dataclass(frozen=True)
class QualityReport:
    Q_eq: float
    Q_ali: float
    Q_geo: float
    per_element_eq: np.ndarray = field(repr=False)
    per_element_ali: np.ndarray = field(repr=False)
    per_element_geo: np.ndarray = field(repr=False)
    N: int
    l2_error: float | None = None


def _alignment_ratio(A):
    d = A.shape[-1]
    return dense.trace(A) / (d * dense.det(A) ** (1.0 / d))


def _rms(values):
    return float(np.sqrt(np.mean(values ** 2)))


def quality_measures(mesh, metric, u=None, ref=None):
    """Equidistribution, alignment and geometric quality of a mesh in a metric.

    Per-element values are 1 for an element that is uniform in the metric;
    the aggregates are root-mean-squares over the elements.  If ``u`` is
    given, the L2 error of its linear interpolant is included.
    """
    ref = ref or build_reference_element(mesh.dim)
    geom = element_geometry(mesh, ref)
    M_K = element_average_metric(metric, mesh)
    vm = geom.volume * np.sqrt(dense.det(M_K))
    q_eq = vm / (vm.sum() / mesh.n_elements)
    Fp = geom.FK_prime
    FpT = dense.transpose(Fp)
    q_ali = _alignment_ratio(FpT @ M_K @ Fp)
    q_geo = _alignment_ratio(FpT @ Fp)
    err = None if u is None else l2_interpolation_error(mesh, u)
    return QualityReport(
        Q_eq=_rms(q_eq), Q_ali=_rms(q_ali), Q_geo=_rms(q_geo),
        per_element_eq=q_eq, per_element_ali=q_ali, per_element_geo=q_geo,
        N=mesh.n_elements, l2_error=err,
    )


def l2_interpolation_error(mesh, u):
    """``||Pi_h u - u||_{L2}`` for the piecewise linear nodal interpolant of ``u``.

    ``u`` maps an (n, d) array of points to n values.
    """
    d = mesh.dim
    if d == 2:
        bary, w = _TRI_POINTS, _TRI_WEIGHTS
    elif d == 3:
        bary, w = _TET_POINTS, _TET_WEIGHTS
    else:
        raise ValueError(f"no quadrature rule for dimension {d}")
    x = mesh.vertices[mesh.elements]  # (N, d+1, d)
    u_nodes = np.asarray(u(mesh.vertices), dtype=float)[mesh.elements]  # (N, d+1)
    pts = np.einsum("qj,kja->kqa", bary, x)
    u_exact = np.asarray(u(pts.reshape(-1, d)), dtype=float).reshape(pts.shape[:2])
    u_interp = u_nodes @ bary.T
    E = np.swapaxes(x[:, 1:] - x[:, :1], 1, 2)
    vol = np.abs(dense.det(E)) / np.prod(np.arange(1, d + 1))
    return float(np.sqrt(np.sum(vol * ((u_interp - u_exact) ** 2 @ w))))


def write_quality_csv(path, rows):
    """Rows of (functional, N, Q_geo, Q_eq, Q_ali, error)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["functional", "N", "Q_geo", "Q_eq", "Q_ali", "error"])
        for name, rep in rows:
            err = "" if rep.l2_error is None else f"{rep.l2_error:.6e}"
            w.writerow([name, rep.N, f"{rep.Q_geo:.6f}", f"{rep.Q_eq:.6f}", f"{rep.Q_ali:.6f}", err])


@dataclass
class AuditReport:
    energy_upticks: list
    altitude_violations: list
    volume_violations: list
    plateau_ratio: float
    min_volume: float
    min_metric_altitude: float

    @property
    def ok(self):
        return not (self.energy_upticks or self.altitude_violations or self.volume_violations)


def plateau_ratio(times, energies, fraction=0.8):
    """``|I(t_end) - I(fraction * t_end)| / |I(t_end)|`` from a recorded series."""
    times = np.asarray(times)
    energies = np.asarray(energies)
    k = int(np.searchsorted(times, fraction * times[-1], side="right")) - 1
    k = max(k, 0)
    return float(abs(energies[-1] - energies[k]) / abs(energies[-1]))


def bound_audit(record, bounds=None, slack=1e-12):
    """Check a trajectory against energy monotonicity and the altitude/volume bounds.

    Monotonicity is checked on the per-step energy pairs when the record has
    them (each pair uses the metric held during that step), otherwise on the
    energy series itself.  ``bounds`` is a CorollaryBounds (or None to skip
    the bound checks).  Violations are reported by index; nothing is raised.
    """
    E = np.asarray(record.energies)
    pairs = np.asarray(getattr(record, "step_energies", []), dtype=float)
    if pairs.size:
        upticks = [int(i) for i in np.flatnonzero(pairs[:, 1] > pairs[:, 0])]
    else:
        upticks = [int(i) for i in np.flatnonzero(E[1:] > E[:-1]) + 1]
    alt = np.asarray(record.min_metric_altitude)
    vol = np.asarray(record.min_volume)
    alt_bad, vol_bad = [], []
    if bounds is not None:
        alt_bad = [int(i) for i in np.flatnonzero(alt < bounds.altitude_bound - slack)]
        vol_bad = [int(i) for i in np.flatnonzero(vol < bounds.volume_bound - slack)]
    return AuditReport(
        energy_upticks=upticks,
        altitude_violations=alt_bad,
        volume_violations=vol_bad,
        plateau_ratio=plateau_ratio(record.times, E) if len(E) > 1 else 0.0,
        min_volume=float(vol.min()),
        min_metric_altitude=float(alt.min()),
    )
