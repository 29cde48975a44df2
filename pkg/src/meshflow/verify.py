"""Finite-difference checks of the assembled energy gradient."""

import numpy as np

from .geometry import build_reference_element, uniform_square_mesh
from .mmpde import StepEnergy, energy_gradient, evaluate_state


def perturbed_grid(n, amplitude, rng):
    """Uniform n x n square mesh with interior vertices moved by up to ``amplitude`` edge lengths."""
    mesh = uniform_square_mesh(n)
    h = 1.0 / (n - 1)
    x = mesh.vertices.copy()
    interior = ~mesh.fixed_axes.any(axis=1)
    x[interior] += rng.uniform(-amplitude * h, amplitude * h, size=(interior.sum(), mesh.dim))
    return mesh.with_vertices(x)


def finite_difference_gradient(energy, x, coords, h):
    """Fourth-order central differences of ``energy(x)[0]`` in the given (vertex, axis) pairs."""
    out = np.empty(len(coords))
    for n, (i, a) in enumerate(coords):
        f = {}
        for s in (-2, -1, 1, 2):
            xs = x.copy()
            xs[i, a] += s * h
            f[s] = energy(xs)[0]
        out[n] = (8.0 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12.0 * h)
    return out


def gradient_check(mesh, metric, spec, ref=None, h=None, vertices=None):
    """Largest per-coordinate relative error between the analytic gradient and finite differences.

    The analytic gradient is the closed-form velocity assembly; the finite
    differences perturb one interior coordinate at a time while the metric
    follows each element centroid through the affine interpolant of its
    nodal values (``gamma_h`` fixed).

    Returns
    -------
    float
    """
    ref = ref or build_reference_element(mesh.dim)
    state = evaluate_state(mesh, metric, spec, ref)
    analytic = energy_gradient(state, ref)
    energy = StepEnergy(state, spec, ref)
    if vertices is None:
        vertices = np.flatnonzero(~mesh.fixed_axes.any(axis=1))
    coords = [(int(i), a) for i in vertices for a in range(mesh.dim)]
    if h is None:
        h = 1e-5 * float(np.min(state.geom.volume) ** (1.0 / mesh.dim))
    fd = finite_difference_gradient(energy, mesh.vertices, coords, h)
    an = np.array([analytic[i, a] for i, a in coords])
    floor = 1e-8 * np.max(np.abs(an))
    return float(np.max(np.abs(fd - an) / np.maximum(np.abs(an), floor)))
