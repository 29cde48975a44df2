"""Discrete moving mesh PDE: velocity assembly and energy-decreasing time stepping.

The mesh equation is the modified gradient flow

    dx_i/dt = (P_i / tau) * sum_{K in omega_i} |K| v^K_{i_K}

with the local velocities ``v^K`` computed in closed form from the
derivatives of the integrand ``G``.

During one time step the metric and ``gamma_h`` are held fixed.  Each
element keeps the affine interpolant of its nodal metrics from the start of
the step and evaluates it at its (moving) centroid; this makes the step
energy a smooth function of the vertex positions whose gradient at the start
of the step is exactly the assembled velocity above.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from . import dense
from .functional import evaluate_g, gamma_from_sigma
from .geometry import (
    SingularElementError,
    build_reference_element,
    edge_matrices,
    geometry_from_edges,
    locate_points,
    min_altitude_in_metric,
)
from .metric import HessianRecoveryConfig, MetricField, build_metric, element_average_metric

log = logging.getLogger(__name__)

SCHEMES = ("implicit", "euler")


class StagnationError(RuntimeError):
    """No acceptable step was found before the time step fell below ``dt_min``."""

    def __init__(self, message, t=None, element=None, vertex=None):
        super().__init__(message)
        self.t = t
        self.element = element
        self.vertex = vertex


@dataclass(frozen=True)
class MmpdeConfig:
    """Time constant, step controller and metric refresh settings.

    ``scheme="implicit"`` takes backward Euler steps, each solved
    approximately by ``newton_iterations`` damped Newton iterations;
    ``scheme="euler"`` takes forward Euler steps with backtracking.
    """

    tau: float = 1e-2
    t_final: float = 1.0
    dt_init: float = 1e-4
    dt_min: float = 1e-12
    dt_max: float = 1e-2
    energy_backtrack_factor: float = 0.5
    growth: float = 1.2
    metric_refresh: bool = True
    scheme: str = "implicit"
    newton_iterations: int = 3
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown time stepping scheme {self.scheme!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 < self.dt_min <= self.dt_init <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt_init <= dt_max")
        if not 0.0 < self.energy_backtrack_factor < 1.0:
            raise ValueError("energy_backtrack_factor must lie in (0, 1)")
        if not self.growth >= 1.0:
            raise ValueError("growth must be at least 1")
        if not self.t_final > 0:
            raise ValueError("t_final must be positive")
        if self.newton_iterations < 1:
            raise ValueError("newton_iterations must be positive")


# -- metric sources ---------------------------------------------------------


class AdaptiveMetric:
    """Metric rebuilt from a scalar field sampled at the current vertices."""

    def __init__(self, u, cfg=HessianRecoveryConfig()):
        self.u = u
        self.cfg = cfg

    def __call__(self, mesh):
        return build_metric(mesh, self.u(mesh.vertices), self.cfg)


class FrozenMetric:
    """Fixed nodal metric data; the values stay attached to their vertices."""

    def __init__(self, field):
        self.field = field

    def __call__(self, mesh):
        return self.field


class InterpolatedMetric:
    """The piecewise linear interpolant of a nodal metric on a fixed background mesh.

    Evaluating it on a moved copy of the background mesh gives the metric of
    the same spatial field at the new vertex positions.
    """

    def __init__(self, mesh, field):
        self.mesh = mesh
        self.field = field
        self._start = np.array([p[0] for p in mesh.vertex_patches])

    def __call__(self, mesh):
        if mesh.vertices is self.mesh.vertices or np.array_equal(mesh.vertices, self.mesh.vertices):
            return self.field
        el, lam = locate_points(self.mesh, mesh.vertices, self._start)
        nodal = self.field.nodal_metrics[self.mesh.elements[el]]
        return MetricField.from_nodal(np.einsum("nj,njab->nab", lam, nodal))


class TensorFieldMetric:
    """Metric given as an analytic tensor function of position, ``fn(points) -> (n, d, d)``."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, mesh):
        return MetricField.from_function(mesh, self.fn)


def as_metric_source(u_or_metric, refresh=True, hessian_cfg=HessianRecoveryConfig(), mesh=None):
    """Wrap a scalar field, MetricField or source into a callable ``mesh -> MetricField``."""
    if isinstance(u_or_metric, MetricField):
        return FrozenMetric(u_or_metric)
    if isinstance(u_or_metric, (AdaptiveMetric, FrozenMetric, InterpolatedMetric, TensorFieldMetric)):
        return u_or_metric
    if callable(u_or_metric):
        source = AdaptiveMetric(u_or_metric, hessian_cfg)
        if refresh:
            return source
        if mesh is None:
            raise ValueError("a mesh is required to freeze the metric")
        return FrozenMetric(source(mesh))
    raise TypeError("expected a scalar field, a MetricField or a metric source")


# -- velocities -------------------------------------------------------------


def local_velocities(geom, derivs, nodal_metrics, ref, metric_gradient=True):
    """Local vertex velocities ``v_j^K``, j = 0..d, for one or many elements.

    ``nodal_metrics`` holds the metric at the element vertices, shape
    ``(..., d+1, d, d)``.  With ``metric_gradient=False`` the term carrying the
    spatial variation of the metric is dropped (metric data attached to the
    vertices rather than to space).
    """
    Einv = geom.E_K_inv
    G = np.asarray(derivs.G)[..., None, None]
    rows = (
        -G * Einv
        + Einv @ derivs.dG_dJ @ ref.E_hat @ Einv
        + (np.asarray(derivs.dG_ddetJ) * geom.det_J)[..., None, None] * Einv
    )
    d = Einv.shape[-1]
    if metric_gradient:
        # tr(dG/dM M_j) for each vertex j of the element
        weights = np.einsum("...ab,...jba->...j", derivs.dG_dM, nodal_metrics)
        S = np.einsum("...j,...ja->...a", weights, geom.basis_gradients)
    else:
        S = np.zeros(Einv.shape[:-1])
    rows = rows - S[..., None, :] / (d + 1)
    v0 = -rows.sum(axis=-2) - S
    return np.concatenate([v0[..., None, :], rows], axis=-2)


def _scatter(mesh, local):
    """Sum element-local vertex vectors (N, d+1, d) into a (n_vertices, d) array."""
    d = mesh.dim
    idx = mesh.elements.ravel()
    flat = local.reshape(-1, d)
    return np.column_stack(
        [np.bincount(idx, weights=flat[:, a], minlength=mesh.n_vertices) for a in range(d)]
    )


@dataclass
class MeshState:
    """Everything derived from a mesh and its metric at one instant."""

    mesh: object
    metric: MetricField
    geom: object
    M_K: np.ndarray
    sigma_h: float
    gamma_h: float
    I_h: float
    per_element: np.ndarray
    derivs: object = field(repr=False)


def evaluate_state(mesh, metric, spec, ref=None, gamma_h=None, check=True, M_K=None):
    """Geometry, element metrics, ``gamma_h`` and G with its derivatives.

    ``M_K`` overrides the vertex-mean element metrics.
    """
    ref = ref or build_reference_element(mesh.dim)
    geom = geometry_from_edges(edge_matrices(mesh), ref)
    if check:
        tol = 1e-14 * mesh.domain_volume
        bad = np.flatnonzero(geom.det_E_K <= tol)
        if bad.size:
            raise SingularElementError(bad[0], geom.det_E_K[bad[0]])
    if M_K is None:
        M_K = element_average_metric(metric, mesh)
    sig = float(np.sum(geom.volume * np.sqrt(dense.det(M_K))))
    gam = gamma_from_sigma(sig, mesh.n_elements, mesh.dim) if gamma_h is None else float(gamma_h)
    derivs = evaluate_g(geom.J, geom.det_J, M_K, spec, gamma_h=gam)
    per = geom.volume * derivs.G
    return MeshState(
        mesh=mesh, metric=metric, geom=geom, M_K=M_K, sigma_h=sig, gamma_h=gam,
        I_h=float(per.sum()), per_element=per, derivs=derivs,
    )


def energy_gradient(state, ref, metric_gradient=True):
    """Analytic ``dI_h/dx_i`` for every vertex (gamma_h held fixed), shape (n_vertices, d)."""
    mesh = state.mesh
    nodal = state.metric.nodal_metrics[mesh.elements]
    v = local_velocities(state.geom, state.derivs, nodal, ref, metric_gradient)
    return -_scatter(mesh, state.geom.volume[:, None, None] * v)


def boundary_project(mesh, raw):
    """Zero the velocity components normal to the boundary faces (all of them at corners)."""
    out = np.array(raw, dtype=float, copy=True)
    out[mesh.fixed_axes] = 0.0
    return out


def assemble_velocities(mesh, metric, spec, cfg, gamma_h=None, ref=None, state=None,
                        project=True, metric_gradient=True):
    """Nodal mesh velocities of the MMPDE, boundary conditions included."""
    ref = ref or build_reference_element(mesh.dim)
    if state is None:
        state = evaluate_state(mesh, metric, spec, ref, gamma_h)
    grad = energy_gradient(state, ref, metric_gradient)
    P = spec.balance(dense.det(state.metric.nodal_metrics))
    vel = -(P / cfg.tau)[:, None] * grad
    return boundary_project(mesh, vel) if project else vel


# -- the energy held during one step ---------------------------------------


class StepEnergy:
    """``I_h`` as a function of the vertex positions with the step's metric frozen.

    Element K carries ``A_K``, the affine interpolant of its nodal metrics on
    the mesh at the start of the step, evaluated at its current centroid.
    ``gamma_h`` is fixed.  At the starting positions the value equals the
    usual ``I_h`` and the gradient equals the assembled velocity formula.
    """

    def __init__(self, state, spec, ref):
        mesh = state.mesh
        self.mesh = mesh
        self.spec = spec
        self.ref = ref
        self.metric = state.metric
        self.gamma_h = state.gamma_h
        nodal = state.metric.nodal_metrics[mesh.elements]  # (N, d+1, d, d)
        self._nodal = nodal
        self._x0 = mesh.vertices[mesh.elements[:, 0]]
        grads = state.geom.basis_gradients  # (N, d+1, d)
        self._Einv = state.geom.E_K_inv
        # d A_K / d x_a, constant on each element
        self._dA = np.einsum("kja,kjbc->kabc", grads, nodal)
        self._tol = 1e-14 * mesh.domain_volume

    def element_metrics(self, x):
        c = x[self.mesh.elements].mean(axis=1)
        lam = np.einsum("kab,kb->ka", self._Einv, c - self._x0)
        lam = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)
        return np.einsum("kj,kjab->kab", lam, self._nodal)

    def state(self, x):
        """MeshState at positions ``x``, or None if an element is inverted or the metric is lost."""
        mesh = self.mesh if x is self.mesh.vertices else self.mesh.with_vertices(x)
        E = edge_matrices(mesh)
        if not np.all(dense.det(E) > self._tol):
            return None
        M_K = self.element_metrics(mesh.vertices)
        if not np.all(dense.is_spd(M_K, rtol=1e-12)):
            return None
        st = evaluate_state(mesh, self.metric, self.spec, self.ref, gamma_h=self.gamma_h,
                            check=False, M_K=M_K)
        return st if np.isfinite(st.I_h) else None

    def gradient(self, st):
        """Exact gradient of the step energy at the state returned by :meth:`state`."""
        geom, g = st.geom, st.derivs
        d = self.mesh.dim
        v = local_velocities(geom, g, None, self.ref, metric_gradient=False)
        grad = -_scatter(self.mesh, geom.volume[:, None, None] * v)
        w = np.einsum("kbc,kacb->ka", g.dG_dM, self._dA) * (geom.volume / (d + 1))[:, None]
        idx = self.mesh.elements.ravel()
        for a in range(d):
            grad[:, a] += np.bincount(idx, weights=np.repeat(w[:, a], d + 1),
                                      minlength=self.mesh.n_vertices)
        return grad

    def __call__(self, x):
        """``(I_h, gradient, state)``; ``(inf, None, None)`` for an invalid configuration."""
        st = self.state(x)
        if st is None:
            return np.inf, None, None
        return st.I_h, self.gradient(st), st


# -- time stepping ----------------------------------------------------------


@dataclass
class StepResult:
    mesh: object
    accepted: bool
    I_h: float
    dt_used: float
    dt_next: float
    rejected: int
    state: MeshState


_PATTERN_CACHE = {}


def _distance2_coloring(mesh):
    """Greedy colouring in which vertices with a common neighbour get different colours."""
    a2 = (mesh.adjacency @ mesh.adjacency).tocsr()
    colors = np.full(mesh.n_vertices, -1, dtype=np.int64)
    for i in range(mesh.n_vertices):
        taken = colors[a2.indices[a2.indptr[i] : a2.indptr[i + 1]]]
        used = set(taken[taken >= 0].tolist())
        c = 0
        while c in used:
            c += 1
        colors[i] = c
    return colors


def _probe_pattern(mesh):
    """Perturbation groups for a coloured finite-difference Hessian.

    Each group moves one coordinate of an independent vertex set; returns a
    list of ``(vertices, axis, rows, owners)`` where ``rows`` are the vertices
    whose gradient changes and ``owners`` the perturbed vertex responsible.
    """
    key = id(mesh.elements)
    hit = _PATTERN_CACHE.get(key)
    if hit is not None and hit[0] is mesh.elements and np.array_equal(hit[1], mesh.fixed_axes):
        return hit[2]
    colors = _distance2_coloring(mesh)
    adj = mesh.adjacency.tocsc()
    groups = []
    for c in range(colors.max() + 1):
        members = np.flatnonzero(colors == c)
        for a in range(mesh.dim):
            movable = members[~mesh.fixed_axes[members, a]]
            if movable.size == 0:
                continue
            sub = adj[:, movable].tocoo()
            groups.append((movable, a, sub.row, movable[sub.col]))
    if len(_PATTERN_CACHE) > 16:
        _PATTERN_CACHE.clear()
    _PATTERN_CACHE[key] = (mesh.elements, mesh.fixed_axes.copy(), groups)
    return groups


def energy_hessian(energy, x, grad, h=None):
    """Sparse finite-difference Hessian of a StepEnergy at ``x`` (flattened vertex-axis order)."""
    mesh = energy.mesh
    d, n = mesh.dim, mesh.n_vertices * mesh.dim
    if h is None:
        h = 1e-7 * float(np.max(mesh.box_hi - mesh.box_lo))
    rows, cols, vals = [], [], []
    for movable, a, r, owner in _probe_pattern(mesh):
        xp = x.copy()
        xp[movable, a] += h
        st = energy.state(xp)
        if st is None:
            continue
        dg = (energy.gradient(st) - grad) / h
        for b in range(d):
            rows.append(r * d + b)
            cols.append(owner * d + a)
            vals.append(dg[r, b])
    H = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return 0.5 * (H + H.T)


def _proximal_newton(energy, st0, grad0, weights, free, iterations):
    """Approximate minimiser of ``I(x) + 1/2 sum w |x - x0|^2`` over the free coordinates.

    Damped Newton with an Armijo line search, started at ``x0``; every
    iterate has a lower objective than the last, so ``I`` never exceeds its
    starting value.  Returns the final state.
    """
    x0 = st0.mesh.vertices
    z0 = x0.ravel()[free]
    z = z0.copy()
    st, grad = st0, grad0
    F = st0.I_h
    mu = 0.0
    for _ in range(iterations):
        H = energy_hessian(energy, st.mesh.vertices, grad)[free][:, free]
        A0 = (H + sparse.diags(weights)).tocsc()
        diag = np.abs(A0.diagonal()) + 1e-300
        G = grad.ravel()[free] + weights * (z - z0)
        while True:
            A = A0 + sparse.diags(mu * diag, format="csc") if mu > 0 else A0
            with np.errstate(all="ignore"):
                p = spsolve(A, -G)
            if np.all(np.isfinite(p)) and p @ G < 0:
                break
            mu = max(10.0 * mu, 1e-8)
            if mu > 1e8:
                p = -G / diag  # scaled gradient step
                break
        slope = p @ G
        s = 1.0
        found = None
        while s > 1e-10:
            zt = z + s * p
            xt = x0.ravel().copy()
            xt[free] = zt
            It, gt, stt = energy(xt.reshape(x0.shape))
            if stt is not None:
                dz = zt - z0
                Ft = It + 0.5 * np.sum(weights * dz * dz)
                if Ft <= F + 1e-4 * s * slope:
                    found = (zt, Ft, stt, gt)
                    break
            s *= 0.5
        if found is None:
            break
        decrease = F - found[1]
        z, F, st, grad = found
        if s == 1.0:
            mu /= 10.0
        if decrease <= 1e-12 * abs(F):
            break
    return st


def step(mesh, metric, spec, cfg, dt, ref=None, state=None, velocity=None):
    """One time step with energy/validity acceptance.

    ``metric`` is the MetricField on ``mesh`` that is held fixed during the
    step (see StepEnergy); ``gamma_h`` comes from ``state`` or is computed
    from ``metric``.  A trial is accepted when every element keeps positive
    orientation and ``I_h`` does not increase.

    Forward Euler (``cfg.scheme == "euler"``) tries ``x + dt v`` and
    multiplies ``dt`` by ``energy_backtrack_factor`` on rejection.  The
    implicit scheme approximates the backward Euler step ``x - x0 = dt v(x)``
    by a few Newton iterations on the equivalent proximal problem, which
    cannot increase the energy; dt is reduced only if that fails.  Below
    ``dt_min`` a StagnationError is raised.  An Euler trial whose predicted
    decrease ``dt |grad . v|`` is below the rounding level of ``I_h`` leaves
    the mesh in place and counts as accepted: there is nothing left to
    resolve at working precision.
    """
    ref = ref or build_reference_element(mesh.dim)
    if state is None:
        state = evaluate_state(mesh, metric, spec, ref)
    if velocity is None:
        velocity = assemble_velocities(mesh, state.metric, spec, cfg, ref=ref, state=state)
    if not np.any(velocity):
        return StepResult(mesh, True, state.I_h, dt, min(dt * cfg.growth, cfg.dt_max), 0, state)
    energy = StepEnergy(state, spec, ref)
    free = ~mesh.fixed_axes.ravel()
    P = spec.balance(dense.det(state.metric.nodal_metrics))
    grad0 = None
    rejected = 0
    bad_element = None
    dt0 = dt
    while dt >= cfg.dt_min:
        if cfg.scheme == "euler":
            x = mesh.vertices + dt * velocity
            trial = energy.state(x)
            if trial is None:
                detE = dense.det(edge_matrices(mesh.with_vertices(x)))
                bad_element = int(np.argmin(detE))
        else:
            if grad0 is None:
                grad0 = energy.gradient(state)
            w = np.repeat(cfg.tau / (dt * P), mesh.dim)[free]
            trial = _proximal_newton(energy, state, grad0, w, free, cfg.newton_iterations)
        if trial is not None and trial.I_h <= state.I_h:
            dt_next = min(dt * cfg.growth, cfg.dt_max)
            return StepResult(trial.mesh, True, trial.I_h, dt, dt_next, rejected, trial)
        if cfg.scheme == "euler":
            # predicted decrease below the rounding level of I_h: the mesh is
            # stationary at working precision, so hold it for the full step
            if grad0 is None:
                grad0 = energy.gradient(state)
            if dt * abs(np.sum(grad0 * velocity)) <= 64 * np.finfo(float).eps * abs(state.I_h):
                return StepResult(mesh, True, state.I_h, dt0, dt0, rejected, state)
        rejected += 1
        dt *= cfg.energy_backtrack_factor
    vertex = int(np.argmax(np.linalg.norm(velocity, axis=1)))
    raise StagnationError(
        f"no energy-decreasing step above dt_min={cfg.dt_min:g} "
        f"(fastest vertex {vertex}, last inverted element {bad_element})",
        element=bad_element,
        vertex=vertex,
    )


@dataclass
class TrajectoryRecord:
    """Accepted states of a mesh trajectory.

    ``energies[n]`` is ``I_h`` of the n-th accepted mesh in its own
    (refreshed) metric.  ``step_energies[n]`` is the pair ``(I_h before,
    I_h after)`` of step n, both in the metric held fixed during that step;
    these pairs carry the monotonicity guarantee.
    """

    times: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    min_volume: list = field(default_factory=list)
    min_metric_altitude: list = field(default_factory=list)
    step_energies: list = field(default_factory=list)
    min_det: list = field(default_factory=list)
    accepted: int = 0
    rejected: int = 0

    def append(self, t, state):
        self.times.append(float(t))
        self.energies.append(state.I_h)
        self.min_volume.append(float(state.geom.volume.min()))
        self.min_det.append(float(state.geom.det_E_K.min()))
        self.min_metric_altitude.append(float(min_altitude_in_metric(state.geom, state.M_K).min()))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "I_h", "min_vol", "min_alt_M", "accepted"])
            rows = zip(self.times, self.energies, self.min_volume, self.min_metric_altitude)
            for n, row in enumerate(rows):
                w.writerow([f"{v:.17g}" for v in row] + [n])


def integrate(mesh0, u_or_metric, spec, cfg, hessian_cfg=HessianRecoveryConfig(), ref=None,
              callback=None):
    """Advance the mesh from t = 0 to ``cfg.t_final``.

    ``u_or_metric`` is a scalar field ``u(points)``, a MetricField given on
    ``mesh0``, or a metric source (``mesh -> MetricField``).  With a scalar
    field or source and ``cfg.metric_refresh`` the metric and ``gamma_h``
    are recomputed on every accepted mesh.  Otherwise the initial metric is
    kept as a piecewise linear field on the initial mesh and ``gamma_h``
    keeps its initial value.  ``callback(t, state)`` is called after every
    accepted step.
    """
    ref = ref or build_reference_element(mesh0.dim)
    if isinstance(u_or_metric, MetricField):
        refresh = None
        background = InterpolatedMetric(mesh0, u_or_metric)
    else:
        source = as_metric_source(u_or_metric, True, hessian_cfg)
        if cfg.metric_refresh:
            refresh = source
            background = None
        else:
            refresh = None
            background = InterpolatedMetric(mesh0, source(mesh0))
    metric0 = refresh(mesh0) if refresh is not None else background(mesh0)
    state = evaluate_state(mesh0, metric0, spec, ref)
    gamma0 = state.gamma_h
    record = TrajectoryRecord()
    record.append(0.0, state)
    t, dt = 0.0, cfg.dt_init
    mesh = mesh0
    while t < cfg.t_final * (1.0 - 1e-12):
        if record.accepted >= cfg.max_steps:
            raise StagnationError(f"step limit {cfg.max_steps} reached at t={t:g}", t=t)
        dt = min(dt, cfg.t_final - t)
        try:
            res = step(mesh, state.metric, spec, cfg, dt, ref=ref, state=state)
        except StagnationError as exc:
            exc.t = t
            raise
        t += res.dt_used
        record.step_energies.append((state.I_h, res.I_h))
        mesh, dt = res.mesh, res.dt_next
        if refresh is not None:
            state = evaluate_state(mesh, refresh(mesh), spec, ref)
        else:
            state = evaluate_state(mesh, background(mesh), spec, ref, gamma_h=gamma0)
        record.accepted += 1
        record.rejected += res.rejected
        record.append(t, state)
        if callback is not None:
            callback(t, state)
    return mesh, record
