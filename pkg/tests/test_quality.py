import csv
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from meshflow.functional import CorollaryBounds
from meshflow.geometry import SimplicialMesh, uniform_square_mesh
from meshflow.metric import MetricField
from meshflow.quality import bound_audit, l2_interpolation_error, plateau_ratio, quality_measures, write_quality_csv
from meshflow.verify import perturbed_grid

from conftest import random_spd


def _single(x):
    return SimplicialMesh.from_arrays(x, [[0, 1, 2]])


def test_equilateral_identity_is_perfect(ref2):
    mesh = _single(ref2.xi)
    rep = quality_measures(mesh, MetricField.constant(mesh, np.eye(2)))
    assert rep.Q_eq == pytest.approx(1.0, abs=1e-14)
    assert rep.Q_ali == pytest.approx(1.0, abs=1e-14)
    assert rep.Q_geo == pytest.approx(1.0, abs=1e-14)
    assert rep.N == 1


def test_uniform_mesh_equidistributed():
    mesh = uniform_square_mesh(7)
    rep = quality_measures(mesh, MetricField.constant(mesh, np.diag([3.0, 0.5])))
    assert rep.Q_eq == pytest.approx(1.0, abs=1e-13)
    assert np.allclose(rep.per_element_eq, 1.0)


def test_alignment_one_when_metric_matches_element(unit_right_triangle, ref2):
    # M = c F'^{-T} F'^{-1} makes F'^T M F' = c I
    mesh = unit_right_triangle
    E = np.array([[1.0, 0.0], [0.0, 1.0]])
    Fp = E @ np.linalg.inv(ref2.E_hat)
    Fi = np.linalg.inv(Fp)
    M = 2.5 * Fi.T @ Fi
    rep = quality_measures(mesh, MetricField.constant(mesh, M))
    assert rep.Q_ali == pytest.approx(1.0, abs=1e-12)
    assert rep.Q_geo > 1.0


def test_geometric_quality_singular_value_oracle(rng, ref2):
    x = rng.uniform(size=(3, 2))
    if np.linalg.det(np.column_stack([x[1] - x[0], x[2] - x[0]])) < 0:
        x[[1, 2]] = x[[2, 1]]
    mesh = _single(x)
    rep = quality_measures(mesh, MetricField.constant(mesh, np.eye(2)))
    E = np.column_stack([x[1] - x[0], x[2] - x[0]])
    s = np.linalg.svd(E @ np.linalg.inv(ref2.E_hat), compute_uv=False)
    # (s1^2 + s2^2) / (2 s1 s2)
    assert rep.Q_geo == pytest.approx((s[0] ** 2 + s[1] ** 2) / (2 * s[0] * s[1]), rel=1e-12)


def test_right_triangle_lattice_value():
    # right isosceles triangle: (s1/s2 + s2/s1)/2 = 2/sqrt(3)
    mesh = uniform_square_mesh(5)
    rep = quality_measures(mesh, MetricField.constant(mesh, np.eye(2)))
    assert rep.Q_geo == pytest.approx(2 / np.sqrt(3), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_measures_at_least_one(seed):
    rng = np.random.default_rng(seed)
    mesh = perturbed_grid(5, 0.2, rng)
    rep = quality_measures(mesh, MetricField.from_nodal(random_spd(rng, mesh.n_vertices)))
    for arr in (rep.per_element_ali, rep.per_element_geo):
        assert np.all(arr >= 1 - 1e-12)
    assert rep.Q_eq >= 1 - 1e-12  # rms of values with mean one


def test_rigid_motion_invariance(rng):
    mesh = perturbed_grid(5, 0.2, rng)
    nodal = random_spd(rng, mesh.n_vertices)
    th = 0.7
    Q = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    moved = SimplicialMesh.from_arrays(mesh.vertices @ Q.T + [2.0, -1.0], mesh.elements)
    a = quality_measures(mesh, MetricField.from_nodal(nodal))
    b = quality_measures(moved, MetricField.from_nodal(Q @ nodal @ Q.T))
    for f in ("Q_eq", "Q_ali", "Q_geo"):
        assert getattr(a, f) == pytest.approx(getattr(b, f), rel=1e-12)


def test_linear_function_interpolated_exactly(rng):
    mesh = perturbed_grid(6, 0.2, rng)
    assert l2_interpolation_error(mesh, lambda p: 2.0 * p[:, 0] - 3.0 * p[:, 1] + 0.5) < 1e-14


def test_quadratic_error_matches_quadrature(unit_right_triangle):
    # e = Pi u - u = x - x^2 for u = x^2 on the unit right triangle
    err = l2_interpolation_error(unit_right_triangle, lambda p: p[:, 0] ** 2)
    val, _ = integrate.dblquad(lambda y, x: (x - x * x) ** 2, 0, 1, 0, lambda x: 1 - x)
    assert err == pytest.approx(np.sqrt(val), rel=1e-12)


def test_error_second_order():
    u = lambda p: np.sin(2 * p[:, 0]) * np.exp(p[:, 1])
    e1 = l2_interpolation_error(uniform_square_mesh(16), u)
    e2 = l2_interpolation_error(uniform_square_mesh(32), u)
    assert e1 / e2 == pytest.approx(4.0, rel=0.02)


def test_quality_csv(tmp_path):
    mesh = uniform_square_mesh(4)
    rep = quality_measures(mesh, MetricField.constant(mesh, np.eye(2)), lambda p: p[:, 0] ** 2)
    path = tmp_path / "q.csv"
    write_quality_csv(path, [("new", rep)])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["functional", "N", "Q_geo", "Q_eq", "Q_ali", "error"]
    assert rows[1][0] == "new" and int(rows[1][1]) == 32
    assert float(rows[1][5]) == pytest.approx(rep.l2_error, rel=1e-6)


def test_plateau_ratio():
    t = np.linspace(0, 1, 11)
    E = 1.0 + np.exp(-10 * t)
    k = 8  # t = 0.8
    assert plateau_ratio(t, E) == pytest.approx(abs(E[-1] - E[k]) / E[-1])
    assert plateau_ratio(t, np.ones(11)) == 0.0


def _record(energies, alt, vol, pairs=None):
    rec = SimpleNamespace(
        times=list(np.arange(len(energies), dtype=float)),
        energies=list(energies),
        min_metric_altitude=list(alt),
        min_volume=list(vol),
    )
    if pairs is not None:
        rec.step_energies = pairs
    return rec


def test_bound_audit_flags_uptick_and_violations():
    rec = _record([5.0, 4.0, 4.5, 3.0], [0.2, 0.1, 0.05, 0.3], [1e-2, 1e-3, 1e-2, 1e-2])
    bounds = CorollaryBounds(C1=1.0, C2=1.0, altitude_bound=0.08, volume_bound=5e-3)
    rep = bound_audit(rec, bounds)
    assert rep.energy_upticks == [2]
    assert rep.altitude_violations == [2]
    assert rep.volume_violations == [1]
    assert not rep.ok
    assert rep.min_metric_altitude == 0.05


def test_bound_audit_uses_step_pairs():
    # refreshed series rises between steps, but every step decreases in its own metric
    rec = _record([5.0, 5.5, 6.0], [1, 1, 1], [1, 1, 1], pairs=[(5.2, 5.0), (5.9, 5.5)])
    rep = bound_audit(rec)
    assert rep.ok and rep.energy_upticks == []
    rec.step_energies = [(5.2, 5.0), (5.5, 5.6)]
    assert bound_audit(rec).energy_upticks == [1]
