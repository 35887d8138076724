"""Command-line pipeline: scene generation, reconstruction, metrics,
and plotting exports.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure. Every command records its effective parameters in a
manifest so runs are replayable; all randomness flows through the seeds
captured there.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .adjoint import StaleFactorizationError
from .baselines import build_jacobian, solve_l1fista, solve_l2cg
from .fem import AssemblyError, OpticalParams, assemble, compose
from .forward import FactorizationError, LayoutError, factorize
from .mesh import MeshError
from .metrics import MetricsError, dice, mu_error, write_report_csv
from .phantoms import (MANIFEST_FILE, PhantomError, get_preset, load_scene,
                       save_scene, simulate_scene)
from .recon import (ReconConfig, ReconError, load_trace_csv, reconstruct,
                    sample_field_on_grid, save_trace_csv)
from .volume import GridSpec, VolumeError, read_vtk, write_vtk

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ConfigError(Exception):
    """Bad run configuration (unknown key, bad value)."""


METHODS = ("mu-neufmt", "neufmt", "l2cg", "l1fista")

# configuration keys per method; unknown keys are rejected, known keys
# that a method ignores produce a warning
COMMON_KEYS = {"seed", "init_mu_a", "init_mu_s", "export_spacing"}
INR_KEYS = {"iters", "lr_theta", "lambda_l1", "n_freqs", "lr_decay"}
ADAPT_KEYS = {"period", "lr_mu_a", "lr_mu_s", "clamp_lo", "clamp_hi",
              "adapt_mu_a", "adapt_mu_s"}
L2CG_KEYS = {"iters", "cg_alpha"}
FISTA_KEYS = {"iters", "fista_lambda"}
ALL_KEYS = COMMON_KEYS | INR_KEYS | ADAPT_KEYS | L2CG_KEYS | FISTA_KEYS

KEYS_BY_METHOD = {
    "mu-neufmt": COMMON_KEYS | INR_KEYS | ADAPT_KEYS,
    "neufmt": COMMON_KEYS | INR_KEYS,
    "l2cg": COMMON_KEYS | L2CG_KEYS,
    "l1fista": COMMON_KEYS | FISTA_KEYS,
}

DEFAULTS = {
    "seed": "0",
    "iters": "2000",
    "period": "50",
    "lr_theta": "1e-4",
    "lr_mu_a": "1e-5",
    "lr_mu_s": "1e-3",
    "lambda_l1": "1e-6",
    "n_freqs": "6",
    "lr_decay": "0.1",
    "clamp_lo": "0.2",
    "clamp_hi": "5.0",
    "adapt_mu_a": "true",
    "adapt_mu_s": "true",
    "cg_alpha": "1e-3",
    "fista_lambda": "3e-2",
    "export_spacing": "1.0",
}


def load_run_config(path, overrides, method):
    """Merge defaults, an optional config file, and CLI overrides.

    Unknown keys are an error; known keys inapplicable to the method are
    ignored with a warning naming them.
    """
    merged = dict(DEFAULTS)
    user_keys = set()
    sources = []
    if path is not None:
        sources.append(fileio.read_kv(path))
    if overrides:
        sources.append(overrides)
    for src in sources:
        for key, value in src.items():
            if key not in ALL_KEYS:
                raise ConfigError(
                    f"unknown configuration key {key!r}; known keys: "
                    f"{', '.join(sorted(ALL_KEYS))}")
            merged[key] = value
            user_keys.add(key)
    ignored = sorted(user_keys - KEYS_BY_METHOD[method])
    if ignored:
        print(f"warning: method {method} ignores configuration keys: "
              f"{', '.join(ignored)}", file=sys.stderr)
    return merged


def _float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"configuration key {key} = {cfg[key]!r} is not "
                          "a number")


def _int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"configuration key {key} = {cfg[key]!r} is not "
                          "an integer")


def cmd_phantom(args):
    scene = simulate_scene(get_preset(args.preset), edge_len=args.edge,
                           noise_level=args.noise, seed=args.seed)
    save_scene(scene, args.out)
    print(f"scene bundle written to {args.out}")
    return EXIT_OK


def _export_grid(scene, spacing):
    lo, hi = scene.mesh.bounding_box()
    return GridSpec.for_box(lo, hi, spacing)


def _nodal_to_volume(mesh, values, grid):
    """Nearest-node resampling of a nodal field onto a regular grid.

    Used for the classical solvers whose output lives on mesh nodes; the
    structured meshes make nearest-node exact at matching resolutions.
    """
    from scipy.spatial import cKDTree
    tree = cKDTree(mesh.nodes)
    _, idx = tree.query(grid.points())
    return values[idx].reshape(grid.shape)


def cmd_reconstruct(args):
    scene = load_scene(args.scene)
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    overrides = {k.strip(): v.strip() for k, v in overrides.items()}
    cfg = load_run_config(args.config, overrides, args.method)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _int(cfg, "seed")
    init = OpticalParams(
        mu_a=_float(cfg, "init_mu_a") if "init_mu_a" in cfg else
        scene.true_params.mu_a,
        mu_s_prime=_float(cfg, "init_mu_s") if "init_mu_s" in cfg else
        scene.true_params.mu_s_prime,
        zeta=scene.true_params.zeta, c=scene.true_params.c)

    sys_matrices = assemble(scene.mesh, scene.true_params.zeta)
    spacing = _float(cfg, "export_spacing")
    grid = _export_grid(scene, spacing)

    if args.method in ("mu-neufmt", "neufmt"):
        recon_cfg = ReconConfig(
            init=init,
            mode="mu_neufmt" if args.method == "mu-neufmt" else "neufmt",
            adapt_mu_a=fileio.parse_bool(cfg["adapt_mu_a"]),
            adapt_mu_s=fileio.parse_bool(cfg["adapt_mu_s"]),
            n_iters=_int(cfg, "iters"), period=_int(cfg, "period"),
            lr_theta=_float(cfg, "lr_theta"),
            lr_mu_a=_float(cfg, "lr_mu_a"), lr_mu_s=_float(cfg, "lr_mu_s"),
            lambda_l1=_float(cfg, "lambda_l1"), seed=seed,
            clamp_lo_factor=_float(cfg, "clamp_lo"),
            clamp_hi_factor=_float(cfg, "clamp_hi"),
            n_freqs=_int(cfg, "n_freqs"), lr_decay=_float(cfg, "lr_decay"))
        trace = reconstruct(scene.mesh, sys_matrices, scene.layout,
                            scene.m_real, recon_cfg)
        volume_values = sample_field_on_grid(trace.field, grid)
        final_c = trace.final_C
        final_params = trace.final_params
    else:
        from .baselines import estimate_operator_norm
        fact = factorize(compose(sys_matrices, init))
        jac = build_jacobian(fact, scene.layout)
        k = _int(cfg, "iters")
        m_flat = scene.m_real.values.ravel()
        if args.method == "l2cg":
            # cg_alpha is relative to the operator norm of J'J
            alpha = _float(cfg, "cg_alpha") * estimate_operator_norm(jac)
            final_c, _ = solve_l2cg(jac, m_flat, alpha=max(alpha, 1e-300),
                                    iters=k)
        else:
            # fista_lambda is relative to 2 max|J'm|, above which the
            # all-zero field is optimal
            lam_max = 2.0 * float(np.abs(jac.rmatvec(m_flat)).max())
            final_c, _ = solve_l1fista(jac, m_flat,
                                       lam=_float(cfg, "fista_lambda")
                                       * lam_max, iters=k)
        trace = None
        volume_values = _nodal_to_volume(scene.mesh, final_c, grid)
        final_params = init

    save_trace_path = out / "trace.csv"
    if trace is not None:
        save_trace_csv(trace, save_trace_path)
    else:
        # constant-coefficient trace so downstream metrics see the same shape
        from .recon import ReconTrace
        flat = ReconTrace(iters=np.arange(1, k + 1),
                          losses=np.full(k, np.nan),
                          mu_a=np.full(k, final_params.mu_a),
                          mu_s=np.full(k, final_params.mu_s_prime),
                          lr_theta=np.zeros(k))
        save_trace_csv(flat, save_trace_path)
    fileio.save_field(out / "field.txt", final_c)
    write_vtk(out / "volume.vtk", grid, volume_values, name="fluorescence")
    fileio.write_kv(out / "manifest.txt", {
        "format": "recon v1",
        "method": args.method,
        "scene": str(args.scene),
        "preset": scene.preset.name,
        "init_mu_a": fileio.format_float(init.mu_a),
        "init_mu_s": fileio.format_float(init.mu_s_prime),
        "final_mu_a": fileio.format_float(final_params.mu_a),
        "final_mu_s": fileio.format_float(final_params.mu_s_prime),
        **{k: cfg[k] for k in sorted(KEYS_BY_METHOD[args.method] & set(cfg))},
    })
    print(f"reconstruction ({args.method}) written to {out}")
    return EXIT_OK


def cmd_metrics(args):
    scene = load_scene(args.scene)
    rows = []
    grid_ref = None
    for recon_dir in args.recon:
        recon_dir = Path(recon_dir)
        manifest_path = recon_dir / "manifest.txt"
        if not manifest_path.exists():
            raise fileio.FileFormatError(f"missing manifest: {manifest_path}")
        manifest = fileio.read_kv(manifest_path)
        method = manifest.get("method", recon_dir.name)
        vtk_path = recon_dir / "volume.vtk"
        if not vtk_path.exists():
            raise fileio.FileFormatError(f"missing volume: {vtk_path}")
        grid, values = read_vtk(vtk_path)
        if grid_ref is None:
            grid_ref = grid
        elif grid != grid_ref:
            raise MetricsError(
                f"{vtk_path}: grid {grid} does not match the first "
                f"reconstruction grid {grid_ref}")
        from .phantoms import ground_truth_samples
        truth = ground_truth_samples(scene.preset,
                                     grid.points()).reshape(grid.shape)
        result = dice(values, truth)
        trace = load_trace_csv(recon_dir / "trace.csv")
        err_a = mu_error(trace.mu_a, scene.true_params.mu_a).final_window_pct
        err_s = mu_error(trace.mu_s,
                         scene.true_params.mu_s_prime).final_window_pct
        rows.append((scene.preset.name, method, result.dice, err_a, err_s))
    write_report_csv(rows, args.out)
    print(f"metrics report ({len(rows)} rows) written to {args.out}")
    return EXIT_OK


def cmd_export(args):
    if args.what == "gt-volume":
        if not args.scene:
            raise ConfigError("export gt-volume requires --scene")
        scene = load_scene(args.scene)
        grid = _export_grid(scene, args.spacing)
        from .phantoms import ground_truth_samples
        values = ground_truth_samples(scene.preset,
                                      grid.points()).reshape(grid.shape)
        write_vtk(args.out, grid, values, name="ground_truth")
    elif args.what == "profile":
        if not (args.volume and args.start and args.end):
            raise ConfigError(
                "export profile requires --volume, --start, and --end")
        grid, values = read_vtk(args.volume)
        from .metrics import line_profile
        start = [float(v) for v in args.start.split(",")]
        end = [float(v) for v in args.end.split(",")]
        prof = line_profile(values, grid, start, end, args.samples)
        with open(args.out, "w", encoding="ascii", newline="\n") as fh:
            fh.write("t,value\n")
            for t, v in zip(np.linspace(0, 1, args.samples), prof):
                fh.write(f"{t:.6g},{v:.17g}\n")
    print(f"export written to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fmtrecon",
        description="Fluorescence tomography reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="simulate a scene bundle")
    p.add_argument("--preset", required=True,
                   help="s_shape, case1..case4 (or full preset names)")
    p.add_argument("--edge", type=float, default=None,
                   help="mesh edge length in mm (preset default if omitted)")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("reconstruct", help="run one method on a scene")
    p.add_argument("scene", help="scene bundle directory")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--config", default=None, help="key = value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single configuration key")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("metrics", help="score reconstructions against truth")
    p.add_argument("--scene", required=True)
    p.add_argument("--recon", action="append", required=True,
                   help="reconstruction output directory (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("export", help="plotting exports")
    p.add_argument("what", choices=("gt-volume", "profile"))
    p.add_argument("--scene", help="scene bundle (gt-volume)")
    p.add_argument("--volume", help="volume.vtk to sample (profile)")
    p.add_argument("--start", help="x,y,z of segment start (profile)")
    p.add_argument("--end", help="x,y,z of segment end (profile)")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, PhantomError, MeshError, LayoutError,
            AssemblyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (fileio.FileFormatError, VolumeError, MetricsError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FactorizationError, ReconError, StaleFactorizationError,
            np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
