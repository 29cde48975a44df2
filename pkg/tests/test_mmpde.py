import csv

import numpy as np
import pytest

from meshflow.functional import FunctionalSpec, GDerivatives, energy
from meshflow.geometry import CORNER, SimplicialMesh, build_reference_element, element_geometry, uniform_square_mesh
from meshflow.metric import MetricField, build_metric
from meshflow.mmpde import (
    InterpolatedMetric,
    MmpdeConfig,
    StagnationError,
    StepEnergy,
    TrajectoryRecord,
    assemble_velocities,
    boundary_project,
    energy_gradient,
    energy_hessian,
    evaluate_state,
    integrate,
    local_velocities,
    step,
)
from meshflow.problems import example_field
from meshflow.verify import finite_difference_gradient, gradient_check, perturbed_grid

from conftest import random_spd

NEW = FunctionalSpec.new()
EXIST = FunctionalSpec.existing()
U51 = example_field("sine_wave_30")


def _metric51(mesh):
    return build_metric(mesh, U51(mesh.vertices))


def test_local_velocities_zero_derivatives(random_grid4, ref2):
    g = element_geometry(random_grid4, ref2)
    n = random_grid4.n_elements
    zero = GDerivatives(G=np.zeros(n), dG_dJ=np.zeros((n, 2, 2)), dG_ddetJ=np.zeros(n), dG_dM=np.zeros((n, 2, 2)))
    nodal = np.broadcast_to(np.eye(2), (n, 3, 2, 2))
    assert np.all(local_velocities(g, zero, nodal, ref2) == 0.0)


def test_local_velocities_translation_invariant(ref2, rng):
    x = np.array([[0.1, 0.2], [0.9, 0.3], [0.4, 0.8]])
    M = random_spd(rng, 1)[0]
    out = []
    for shift in ([0.0, 0.0], [3.0, -1.5]):
        mesh = SimplicialMesh.from_arrays(x + shift, [[0, 1, 2]])
        st = evaluate_state(mesh, MetricField.constant(mesh, M), NEW, ref2)
        out.append(local_velocities(st.geom, st.derivs, st.metric.nodal_metrics[mesh.elements], ref2))
    assert np.allclose(out[0], out[1], rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("spec", [NEW, EXIST], ids=["new", "existing"])
def test_gradient_matches_finite_differences(spec, rng):
    for _ in range(3):
        mesh = perturbed_grid(4, 0.2, rng)
        assert gradient_check(mesh, _metric51(mesh), spec) < 1e-6


@pytest.mark.parametrize("spec", [NEW, EXIST], ids=["new", "existing"])
def test_gradient_matches_plain_energy_with_fixed_vertex_metric(spec, random_grid4, ref2):
    # metric data carried by the vertices: the plain I_h is the energy, no metric-gradient term
    metric = _metric51(random_grid4)
    st = evaluate_state(random_grid4, metric, spec, ref2)
    an = energy_gradient(st, ref2, metric_gradient=False)

    def plain(x):
        return (energy(random_grid4.with_vertices(x), metric, spec, gamma_h=st.gamma_h, ref=ref2).I_h,)

    coords = [(i, a) for i in np.flatnonzero(random_grid4.boundary_class == 0) for a in (0, 1)]
    fd = finite_difference_gradient(plain, random_grid4.vertices, coords, 1e-5 * 0.25)
    ref = np.array([an[i, a] for i, a in coords])
    assert np.max(np.abs(fd - ref) / np.abs(ref).max()) < 1e-7


def test_symmetric_vertex_zero_velocity():
    # every interior vertex of the uniform lattice is a centre of point symmetry
    mesh = uniform_square_mesh(6)
    metric = MetricField.constant(mesh, np.eye(2))
    interior = mesh.boundary_class == 0
    for spec in (NEW, EXIST):
        v = assemble_velocities(mesh, metric, spec, MmpdeConfig())
        assert np.abs(v[interior]).max() <= 1e-12 * np.abs(v).max()


def test_velocity_is_negative_gradient(random_grid4, ref2):
    metric = MetricField.constant(random_grid4, np.eye(2))  # P_i = 1
    cfg = MmpdeConfig(tau=1.0)
    for spec in (NEW, EXIST):
        st = evaluate_state(random_grid4, metric, spec, ref2)
        v = assemble_velocities(random_grid4, metric, spec, cfg, project=False)
        assert np.allclose(v, -energy_gradient(st, ref2), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("c", [2.0, 10.0])
def test_metric_scaling_factor(random_grid4, rng, c):
    nodal = random_spd(rng, random_grid4.n_vertices)
    m1 = MetricField.from_nodal(nodal)
    mc = MetricField.from_nodal(c * nodal)
    cfg = MmpdeConfig()
    for spec, expected in ((NEW, c ** (3 - 2 * NEW.p)), (EXIST, 1.0)):
        v1 = assemble_velocities(random_grid4, m1, spec, cfg)
        vc = assemble_velocities(random_grid4, mc, spec, cfg)
        moving = np.abs(v1) > 1e-8 * np.abs(v1).max()
        ratio = vc[moving] / v1[moving]
        # one common factor for every vertex, equal to the brute-force value
        assert np.allclose(ratio, ratio[0], rtol=1e-9)
        assert ratio[0] == pytest.approx(expected, rel=1e-9)


def test_boundary_project(grid4):
    raw = np.tile([0.3, -0.7], (grid4.n_vertices, 1))
    out = boundary_project(grid4, raw)
    x = grid4.vertices
    corners = grid4.boundary_class == CORNER
    assert np.all(out[corners] == 0)
    bottom = np.isclose(x[:, 1], 0) & ~corners
    assert np.allclose(out[bottom], [0.3, 0.0])
    left = np.isclose(x[:, 0], 0) & ~corners
    assert np.allclose(out[left], [0.0, -0.7])
    interior = grid4.boundary_class == 0
    assert np.array_equal(out[interior], raw[interior])


def test_step_energy_matches_state_at_start(random_grid4, ref2):
    for spec in (NEW, EXIST):
        st = evaluate_state(random_grid4, _metric51(random_grid4), spec, ref2)
        e = StepEnergy(st, spec, ref2)
        I, g, _ = e(random_grid4.vertices.copy())
        assert I == pytest.approx(st.I_h, rel=1e-13)
        assert np.allclose(g, energy_gradient(st, ref2), rtol=1e-10, atol=1e-10 * np.abs(g).max())


def test_step_energy_gradient_away_from_start(random_grid4, ref2, rng):
    st = evaluate_state(random_grid4, _metric51(random_grid4), NEW, ref2)
    e = StepEnergy(st, NEW, ref2)
    x = random_grid4.vertices.copy()
    interior = random_grid4.boundary_class == 0
    x[interior] += rng.uniform(-0.02, 0.02, size=(interior.sum(), 2))
    _, g, _ = e(x)
    coords = [(i, a) for i in np.flatnonzero(interior) for a in (0, 1)]
    fd = finite_difference_gradient(e, x, coords, 1e-6)
    an = np.array([g[i, a] for i, a in coords])
    assert np.max(np.abs(fd - an) / np.maximum(np.abs(an), 1e-8 * np.abs(an).max())) < 1e-6


def test_step_energy_rejects_inverted(random_grid4, ref2):
    st = evaluate_state(random_grid4, _metric51(random_grid4), NEW, ref2)
    e = StepEnergy(st, NEW, ref2)
    x = random_grid4.vertices.copy()
    i = int(np.flatnonzero(random_grid4.boundary_class == 0)[0])
    x[i] = [5.0, 5.0]
    I, g, s = e(x)
    assert I == np.inf and g is None and s is None


def test_energy_hessian_symmetric_and_consistent(random_grid4, ref2, rng):
    st = evaluate_state(random_grid4, _metric51(random_grid4), NEW, ref2)
    e = StepEnergy(st, NEW, ref2)
    x = random_grid4.vertices
    g0 = e.gradient(st)
    H = energy_hessian(e, x, g0)
    assert abs(H - H.T).max() < 1e-12 * abs(H).max()
    free = ~random_grid4.fixed_axes.ravel()
    dx = np.zeros(x.size)
    dx[free] = rng.normal(size=free.sum())
    h = 1e-6
    gp = e(x + h * dx.reshape(x.shape))[1].ravel()
    gm = e(x - h * dx.reshape(x.shape))[1].ravel()
    fd = (gp - gm) / (2 * h)
    assert np.allclose((H @ dx)[free], fd[free], rtol=1e-3, atol=1e-4 * np.abs(fd).max())


def test_step_zero_velocity_is_fixed_point(grid4):
    metric = MetricField.constant(grid4, np.eye(2))
    res = step(grid4, metric, NEW, MmpdeConfig(), 1e-3, velocity=np.zeros((grid4.n_vertices, 2)))
    assert res.accepted
    assert res.mesh is grid4
    assert res.rejected == 0


@pytest.mark.parametrize("scheme", ["implicit", "euler"])
def test_first_step_decreases_energy(scheme):
    mesh = uniform_square_mesh(29)
    cfg = MmpdeConfig(scheme=scheme)
    metric = _metric51(mesh)
    st = evaluate_state(mesh, metric, NEW)
    res = step(mesh, metric, NEW, cfg, cfg.dt_init, state=st)
    assert res.accepted
    assert res.I_h < st.I_h
    assert np.all(element_geometry(res.mesh, build_reference_element(2)).det_E_K > 0)


def test_huge_step_backtracks():
    mesh = uniform_square_mesh(29)
    cfg = MmpdeConfig(scheme="euler")
    metric = _metric51(mesh)
    st = evaluate_state(mesh, metric, NEW)
    res = step(mesh, metric, NEW, cfg, 10.0, state=st)
    assert res.rejected >= 1
    assert res.accepted and res.dt_used < 10.0
    assert res.I_h <= st.I_h


def test_stagnation_reported():
    mesh = uniform_square_mesh(29)
    cfg = MmpdeConfig(scheme="euler", dt_min=1.0, dt_init=1.0, dt_max=1.0)
    with pytest.raises(StagnationError) as info:
        step(mesh, _metric51(mesh), NEW, cfg, 10.0)
    assert info.value.vertex is not None


def test_config_validation():
    for bad in (
        dict(tau=0.0),
        dict(dt_min=1.0, dt_init=0.1),
        dict(energy_backtrack_factor=1.0),
        dict(growth=0.5),
        dict(scheme="rk4"),
        dict(t_final=-1.0),
        dict(newton_iterations=0),
    ):
        with pytest.raises(ValueError):
            MmpdeConfig(**bad)


def _check_trajectory(mesh0, mesh, record):
    se = np.array(record.step_energies)
    assert np.all(se[:, 1] <= se[:, 0])
    assert np.all(np.diff(record.times) > 0)
    assert min(record.min_det) > 0
    # boundary vertices stay on their faces, corners do not move
    fixed = mesh0.fixed_axes
    assert np.allclose(mesh.vertices[fixed], mesh0.vertices[fixed], atol=1e-12)
    corners = mesh0.boundary_class == CORNER
    assert np.array_equal(mesh.vertices[corners], mesh0.vertices[corners])


def test_identity_metric_run_keeps_mesh_valid():
    # with M = I only the boundary rows feel a net force (right-triangle lattice)
    mesh0 = uniform_square_mesh(8)
    metric = MetricField.constant(mesh0, np.eye(2))
    mesh, rec = integrate(mesh0, metric, NEW, MmpdeConfig(t_final=0.05))
    _check_trajectory(mesh0, mesh, rec)
    assert rec.energies[-1] <= rec.energies[0]


# forward Euler is stability-limited to dt ~ 1e-10 here, hence the tiny horizon
@pytest.mark.parametrize("scheme,t_final", [("implicit", 0.02), ("euler", 2e-8)])
def test_short_adaptive_run(scheme, t_final):
    mesh0 = uniform_square_mesh(12)
    mesh, rec = integrate(mesh0, U51, NEW, MmpdeConfig(t_final=t_final, scheme=scheme))
    _check_trajectory(mesh0, mesh, rec)
    assert rec.energies[-1] < rec.energies[0]
    assert rec.accepted == len(rec.times) - 1


def test_no_refresh_keeps_gamma_and_background_metric():
    mesh0 = uniform_square_mesh(12)
    seen = []
    cfg = MmpdeConfig(t_final=0.01, metric_refresh=False)
    mesh, rec = integrate(mesh0, U51, NEW, cfg, callback=lambda t, s: seen.append(s.gamma_h))
    gamma0 = evaluate_state(mesh0, _metric51(mesh0), NEW).gamma_h
    assert np.allclose(seen, gamma0, rtol=0, atol=0)
    _check_trajectory(mesh0, mesh, rec)


def test_interpolated_metric_reproduces_background(rng):
    mesh = uniform_square_mesh(10)
    field = _metric51(mesh)
    src = InterpolatedMetric(mesh, field)
    assert src(mesh) is field
    # moving the vertices onto other vertices' positions returns their values
    perm = rng.permutation(mesh.n_vertices)
    moved = mesh.with_vertices(mesh.vertices[perm])
    assert np.allclose(src(moved).nodal_metrics, field.nodal_metrics[perm], rtol=1e-10)


def test_fixed_point_single_reference_element(ref2):
    mesh = SimplicialMesh.from_arrays(ref2.xi, [[0, 1, 2]])
    gamma = 1.7
    metric = MetricField.constant(mesh, np.eye(2) / gamma)  # J = I, J M^-1 J^T = gamma I
    st = evaluate_state(mesh, metric, NEW, ref2)
    assert st.gamma_h == pytest.approx(gamma, rel=1e-14)
    assert abs(st.I_h) < 1e-28
    assert np.abs(assemble_velocities(mesh, metric, NEW, MmpdeConfig())).max() < 1e-12
    out, rec = integrate(mesh, metric, NEW, MmpdeConfig(t_final=0.1))
    assert np.max(np.abs(out.vertices - mesh.vertices)) <= 1e-14


def test_trajectory_csv(tmp_path):
    mesh0 = uniform_square_mesh(6)
    _, rec = integrate(mesh0, U51, EXIST, MmpdeConfig(t_final=0.005))
    path = tmp_path / "traj.csv"
    rec.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "I_h", "min_vol", "min_alt_M", "accepted"]
    assert len(rows) == len(rec.times) + 1
    assert float(rows[-1][0]) == pytest.approx(0.005)


def test_deterministic():
    mesh0 = uniform_square_mesh(8)
    a, ra = integrate(mesh0, U51, NEW, MmpdeConfig(t_final=0.01))
    b, rb = integrate(mesh0, U51, NEW, MmpdeConfig(t_final=0.01))
    assert np.array_equal(a.vertices, b.vertices)
    assert ra.energies == rb.energies
