"""Deterministic SVG wireframes of 2D meshes."""

import numpy as np


def _fmt(v):
    return f"{v:.6f}"


def render_svg(mesh, viewport=None, size=800, stroke=0.6, color="#1f3b73"):
    """SVG document with one polyline per unique mesh edge.

    Parameters
    ----------
    mesh : SimplicialMesh
        A two-dimensional mesh.
    viewport : tuple, optional
        ``((x0, x1), (y0, y1))`` window to draw; defaults to the mesh box.
        Edges entirely outside the window are skipped, the rest are clipped
        by the SVG viewBox.
    size : int
        Width of the image in pixels; the height follows the window aspect.

    Returns
    -------
    str
    """
    if mesh.dim != 2:
        raise ValueError(f"can only render 2D meshes, got dimension {mesh.dim}")
    if viewport is None:
        (x0, y0), (x1, y1) = mesh.box_lo, mesh.box_hi
    else:
        (x0, x1), (y0, y1) = viewport
    if not (x1 > x0 and y1 > y0):
        raise ValueError("empty viewport")
    width = size
    height = max(1, int(round(size * (y1 - y0) / (x1 - x0))))
    sx = width / (x1 - x0)
    sy = height / (y1 - y0)

    edges = mesh.edges  # sorted unique vertex pairs
    a = mesh.vertices[edges[:, 0]]
    b = mesh.vertices[edges[:, 1]]
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    keep = (hi[:, 0] >= x0) & (lo[:, 0] <= x1) & (hi[:, 1] >= y0) & (lo[:, 1] <= y1)
    # pixel coordinates with y pointing down
    pa = np.column_stack([(a[keep, 0] - x0) * sx, (y1 - a[keep, 1]) * sy])
    pb = np.column_stack([(b[keep, 0] - x0) * sx, (y1 - b[keep, 1]) * sy])

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<g fill="none" stroke="{color}" stroke-width="{stroke}">',
    ]
    for (ax, ay), (bx, by) in zip(pa, pb):
        out.append(f'<polyline points="{_fmt(ax)},{_fmt(ay)} {_fmt(bx)},{_fmt(by)}"/>')
    out += ["</g>", "</svg>", ""]
    return "\n".join(out)


def write_svg(path, mesh, viewport=None, **kwargs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_svg(mesh, viewport, **kwargs))
