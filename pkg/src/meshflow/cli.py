"""Command-line harness: example runs, gradient checks, quality tables and SVG output.

Exit codes: 0 success, 2 configuration error, 3 integrator stagnation,
4 mesh I/O error.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .functional import EXISTING, NEW, FunctionalSpec
from .geometry import MeshError, build_reference_element, read_mesh, uniform_square_mesh, write_mesh
from .metric import HessianRecoveryConfig, build_metric
from .mmpde import MmpdeConfig, StagnationError, integrate
from .problems import DEFAULT_T_FINAL, EXAMPLES, example_field
from .quality import quality_measures, write_quality_csv
from .render import write_svg
from .verify import gradient_check, perturbed_grid

EXIT_OK, EXIT_CONFIG, EXIT_STAGNATION, EXIT_MESH_IO = 0, 2, 3, 4
OUTPUTS = ("mesh", "csv", "svg", "quality")

log = logging.getLogger("meshflow")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    example: str = "sine_wave_30"
    functional: FunctionalSpec = dataclasses.field(default_factory=FunctionalSpec.new)
    grid: int = 29
    t_final: float | None = None  # None: the example's default
    mmpde: MmpdeConfig = dataclasses.field(default_factory=MmpdeConfig)
    metric: HessianRecoveryConfig = dataclasses.field(default_factory=HessianRecoveryConfig)
    outputs: tuple = OUTPUTS
    zooms: tuple = ()

    def __post_init__(self):
        if self.example not in EXAMPLES:
            raise ConfigError(f"unknown example {self.example!r}; choose from {sorted(EXAMPLES)}")
        if int(self.grid) != self.grid or self.grid < 4:
            raise ConfigError("grid must be an integer >= 4")
        if self.t_final is not None and not self.t_final > 0:
            raise ConfigError("t_final must be positive")
        bad = set(self.outputs) - set(OUTPUTS)
        if bad:
            raise ConfigError(f"unknown outputs {sorted(bad)}")
        for z in self.zooms:
            if len(z) != 4 or not (z[1] > z[0] and z[3] > z[2]):
                raise ConfigError(f"zoom window must be x0 x1 y0 y1 with x0<x1, y0<y1: {z}")

    @property
    def final_time(self):
        return DEFAULT_T_FINAL[self.example] if self.t_final is None else self.t_final


def _functional_from(kind, p=None, theta=None):
    if kind == NEW:
        return FunctionalSpec.new(p=1.0 if p is None else p)
    if kind == EXISTING:
        kw = {}
        if p is not None:
            kw["p"] = p
        if theta is not None:
            kw["theta"] = theta
        return FunctionalSpec.existing(**kw)
    raise ConfigError(f"unknown functional {kind!r}; choose 'new' or 'existing'")


def load_config(args):
    """Build a RunConfig from an optional JSON file overridden by command-line flags."""
    doc = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    fdoc = doc.get("functional", {})
    if isinstance(fdoc, str):
        fdoc = {"kind": fdoc}
    kind = args.functional or fdoc.get("kind", NEW)
    p = args.p if args.p is not None else fdoc.get("p")
    theta = args.theta if args.theta is not None else fdoc.get("theta")
    mdoc = dict(doc.get("mmpde", {}))
    if args.tau is not None:
        mdoc["tau"] = args.tau
    if args.no_metric_refresh:
        mdoc["metric_refresh"] = False
    try:
        spec = _functional_from(kind, p, theta)
        t_final = args.t_final if args.t_final is not None else doc.get("t_final")
        example = args.example or doc.get("example", "sine_wave_30")
        mdoc.setdefault("t_final", t_final or DEFAULT_T_FINAL.get(example, 1.0))
        mmpde = MmpdeConfig(**mdoc)
        metric = HessianRecoveryConfig(**doc.get("metric", {}))
        zooms = [tuple(z) for z in doc.get("zooms", [])] + [tuple(z) for z in (args.zoom or [])]
        return RunConfig(
            example=example,
            functional=spec,
            grid=args.grid if args.grid is not None else doc.get("grid", 29),
            t_final=t_final,
            mmpde=mmpde,
            metric=metric,
            outputs=tuple(doc.get("outputs", OUTPUTS)),
            zooms=tuple(zooms),
        )
    except TypeError as exc:
        raise ConfigError(f"bad configuration field: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def run(cfg, out_dir, stream=None):
    """Adapt the uniform initial mesh for ``cfg`` and write the requested artifacts."""
    stream = stream or sys.stdout
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    u = example_field(cfg.example)
    mesh0 = uniform_square_mesh(cfg.grid)
    ref = build_reference_element(2)
    mmpde = dataclasses.replace(cfg.mmpde, t_final=cfg.final_time)
    mesh, record = integrate(mesh0, u, cfg.functional, mmpde, cfg.metric, ref)
    report = quality_measures(mesh, build_metric(mesh, u(mesh.vertices), cfg.metric), u, ref)
    name = cfg.functional.kind
    if "mesh" in cfg.outputs:
        write_mesh(mesh, out / "mesh_final.txt")
    if "csv" in cfg.outputs:
        record.write_csv(out / "trajectory.csv")
    if "quality" in cfg.outputs:
        write_quality_csv(out / "quality.csv", [(name, report)])
    if "svg" in cfg.outputs:
        write_svg(out / "mesh.svg", mesh)
        for i, (x0, x1, y0, y1) in enumerate(cfg.zooms):
            write_svg(out / f"mesh_zoom_{i}.svg", mesh, viewport=((x0, x1), (y0, y1)))
    stream.write("functional,N,Q_geo,Q_eq,Q_ali,error\n")
    stream.write(
        f"{name},{report.N},{report.Q_geo:.4f},{report.Q_eq:.4f},{report.Q_ali:.4f},"
        f"{report.l2_error:.4e}\n"
    )
    return mesh, record, report


def _thread_limit():
    n = os.environ.get("MESHFLOW_THREADS")
    if not n:
        return nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"MESHFLOW_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _add_functional_flags(p):
    p.add_argument("--functional", choices=[NEW, EXISTING])
    p.add_argument("--theta", type=float)
    p.add_argument("--p", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="meshflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="adapt a uniform mesh to an example function")
    r.add_argument("--example", choices=sorted(EXAMPLES))
    _add_functional_flags(r)
    r.add_argument("--grid", type=int)
    r.add_argument("--t-final", type=float)
    r.add_argument("--tau", type=float)
    r.add_argument("--out-dir", default="meshflow_out")
    r.add_argument("--config")
    r.add_argument("--no-metric-refresh", action="store_true")
    r.add_argument("--zoom", type=float, nargs=4, action="append", metavar=("X0", "X1", "Y0", "Y1"))

    g = sub.add_parser("gradient-check", help="compare the analytic energy gradient with finite differences")
    _add_functional_flags(g)
    g.add_argument("--grid", type=int, default=4)
    g.add_argument("--example", choices=sorted(EXAMPLES), default="sine_wave_30")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-6)

    q = sub.add_parser("quality", help="quality measures of a mesh file")
    q.add_argument("mesh")
    q.add_argument("--example", choices=sorted(EXAMPLES), default="sine_wave_30")
    q.add_argument("--out", help="write the row to this CSV file")

    s = sub.add_parser("render", help="draw a mesh file as SVG")
    s.add_argument("mesh")
    s.add_argument("--out", required=True)
    s.add_argument("--zoom", type=float, nargs=4, metavar=("X0", "X1", "Y0", "Y1"))
    return parser


def _cmd_run(args):
    cfg = load_config(args)
    run(cfg, args.out_dir)
    return EXIT_OK


def _cmd_gradient_check(args):
    spec = _functional_from(args.functional or NEW, args.p, args.theta)
    if args.grid < 2:
        raise ConfigError("grid must be at least 2")
    mesh = perturbed_grid(args.grid, 0.2, np.random.default_rng(args.seed))
    u = example_field(args.example)
    metric = build_metric(mesh, u(mesh.vertices))
    err = gradient_check(mesh, metric, spec)
    ok = err < args.tol
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tol {args.tol:g})")
    return EXIT_OK if ok else 1


def _cmd_quality(args):
    mesh = read_mesh(args.mesh)
    u = example_field(args.example)
    rep = quality_measures(mesh, build_metric(mesh, u(mesh.vertices)), u)
    print("N,Q_geo,Q_eq,Q_ali,error")
    print(f"{rep.N},{rep.Q_geo:.4f},{rep.Q_eq:.4f},{rep.Q_ali:.4f},{rep.l2_error:.4e}")
    if args.out:
        write_quality_csv(args.out, [(Path(args.mesh).stem, rep)])
    return EXIT_OK


def _cmd_render(args):
    mesh = read_mesh(args.mesh)
    viewport = None
    if args.zoom:
        x0, x1, y0, y1 = args.zoom
        if not (x1 > x0 and y1 > y0):
            raise ConfigError("zoom window must satisfy x0 < x1 and y0 < y1")
        viewport = ((x0, x1), (y0, y1))
    if mesh.dim != 2:
        raise ConfigError("only 2D meshes can be rendered")
    try:
        write_svg(args.out, mesh, viewport)
    except OSError as exc:
        raise MeshError(f"cannot write {args.out}: {exc}") from None
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "gradient-check": _cmd_gradient_check,
    "quality": _cmd_quality,
    "render": _cmd_render,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StagnationError as exc:
        print(f"integrator stagnation at t={exc.t}: {exc}", file=sys.stderr)
        return EXIT_STAGNATION
    except MeshError as exc:
        print(f"mesh error: {exc}", file=sys.stderr)
        return EXIT_MESH_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_MESH_IO


if __name__ == "__main__":
    sys.exit(main())
