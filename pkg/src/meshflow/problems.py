"""Closed-form test functions on the unit square."""

import numpy as np


def sine_wave(strength):
    """``tanh(-strength * (y - 0.5 - 0.25 sin(2 pi x)))``."""

    def u(points):
        points = np.asarray(points, dtype=float)
        x, y = points[..., 0], points[..., 1]
        return np.tanh(-strength * (y - 0.5 - 0.25 * np.sin(2.0 * np.pi * x)))

    u.__name__ = f"sine_wave_{strength:g}"
    return u


_SPHERE_CENTRES = ((0.0, 0.0), (0.5, 0.5), (0.5, -0.5), (-0.5, 0.5), (-0.5, -0.5))


def five_spheres(points):
    """Five tanh fronts on circles of radius^2 = 1/8 in the scaled square (-2, 2)^2."""
    points = np.asarray(points, dtype=float)
    X = -2.0 + 4.0 * points[..., 0]
    Y = -2.0 + 4.0 * points[..., 1]
    total = np.zeros(np.shape(X))
    for cx, cy in _SPHERE_CENTRES:
        total += np.tanh(30.0 * ((X - cx) ** 2 + (Y - cy) ** 2 - 0.125))
    return total


EXAMPLES = {
    "sine_wave_30": sine_wave(30.0),
    "sine_wave_100": sine_wave(100.0),
    "five_spheres": five_spheres,
}

# final times used for each example
DEFAULT_T_FINAL = {"sine_wave_30": 5.0, "sine_wave_100": 0.1, "five_spheres": 0.5}


def example_field(name):
    try:
        return EXAMPLES[name]
    except KeyError:
        raise ValueError(f"unknown example {name!r}; choose from {sorted(EXAMPLES)}") from None


def sine_wave_hessian(strength):
    """Exact Hessian of :func:`sine_wave`, returned as (n, 2, 2)."""

    def hess(points):
        points = np.asarray(points, dtype=float)
        x, y = points[..., 0], points[..., 1]
        s = strength
        w = 2.0 * np.pi
        z = -s * (y - 0.5 - 0.25 * np.sin(w * x))
        zx = 0.25 * s * w * np.cos(w * x)
        zy = -s
        zxx = -0.25 * s * w * w * np.sin(w * x)
        t = np.tanh(z)
        f1 = 1.0 - t * t  # tanh'
        f2 = -2.0 * t * f1  # tanh''
        H = np.empty(np.shape(x) + (2, 2))
        H[..., 0, 0] = f2 * zx * zx + f1 * zxx
        H[..., 0, 1] = H[..., 1, 0] = f2 * zx * zy
        H[..., 1, 1] = f2 * zy * zy
        return H

    return hess
