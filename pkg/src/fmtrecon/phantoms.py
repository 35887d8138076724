"""Synthetic scenes: ground-truth fluorescence targets plus simulated
boundary measurements.

Five presets cover an S-shaped inclusion for coefficient-convergence
studies and four staged difficulty cases (small sphere, curved-surface
phantom, peanut region, peanut plus embedded hot sphere). Geometry
constants beyond the published phantom sizes are artifact choices and
are recorded in the scene manifest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fileio
from .fem import OpticalParams, assemble, compose
from .forward import (LayoutConfig, MeasurementStack, add_noise, build_layout,
                      factorize, forward_model, load_measurements,
                      save_measurements)
from .mesh import PhantomSpec, load_mesh, save_mesh


class PhantomError(Exception):
    pass


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    level: float = 1.0

    def values(self, pts):
        if self.radius <= 0:
            return np.zeros(len(pts))
        d = np.linalg.norm(pts - np.asarray(self.center), axis=1)
        return np.where(d <= self.radius, self.level, 0.0)

    def bbox(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Tube:
    """Planar polyline extruded in z: within `radius` of the path in the
    xy-plane and within `half_thickness` of the plane."""

    path_xy: tuple      # ((x, y), ...) polyline samples
    z_mid: float
    radius: float
    half_thickness: float
    level: float = 1.0

    def values(self, pts):
        path = np.asarray(self.path_xy)
        near_plane = np.abs(pts[:, 2] - self.z_mid) <= self.half_thickness
        out = np.zeros(len(pts))
        idx = np.flatnonzero(near_plane)
        if idx.size:
            d = np.min(np.linalg.norm(pts[idx, None, :2] - path[None, :, :],
                                      axis=2), axis=1)
            out[idx] = np.where(d <= self.radius, self.level, 0.0)
        return out

    def bbox(self):
        path = np.asarray(self.path_xy)
        lo = np.array([path[:, 0].min() - self.radius,
                       path[:, 1].min() - self.radius,
                       self.z_mid - self.half_thickness])
        hi = np.array([path[:, 0].max() + self.radius,
                       path[:, 1].max() + self.radius,
                       self.z_mid + self.half_thickness])
        return lo, hi


def _s_path(center_x=27.5, center_y=27.5, arc_radius=7.0, samples=200):
    """Two half-turn arcs tracing the letter S, sampled densely."""
    t = np.linspace(0.0, 1.0, samples)
    upper = np.stack([center_x + arc_radius * np.cos(np.pi * 1.5 * t),
                      center_y + arc_radius
                      + arc_radius * np.sin(np.pi * 1.5 * t)], axis=1)
    lower = np.stack([center_x + arc_radius * np.cos(np.pi * (0.5 - 1.5 * t)),
                      center_y - arc_radius
                      + arc_radius * np.sin(np.pi * (0.5 - 1.5 * t))], axis=1)
    return tuple(map(tuple, np.vstack([upper, lower])))


@dataclass(frozen=True)
class ScenePreset:
    name: str
    shape: str                 # "slab" or "slab_with_cap"
    dimensions: tuple          # mm
    targets: tuple
    true_params: OpticalParams
    cap_height: float = 0.0
    default_edge: float = 2.5


TRUE_PARAMS = OpticalParams(mu_a=0.1, mu_s_prime=1.0)

PRESETS = {
    "s_shape": ScenePreset(
        name="s_shape", shape="slab", dimensions=(55.0, 55.0, 15.0),
        targets=(Tube(path_xy=_s_path(), z_mid=7.5, radius=2.0,
                      half_thickness=1.0),),
        true_params=TRUE_PARAMS),
    "case1_sphere": ScenePreset(
        name="case1_sphere", shape="slab", dimensions=(55.0, 55.0, 15.0),
        targets=(Sphere(center=(27.5, 27.5, 7.5), radius=1.5),),
        true_params=TRUE_PARAMS),
    # The cap generator displaces only the top node layer, so targets
    # live in the slab base below the dome.
    "case2_cap_sphere": ScenePreset(
        name="case2_cap_sphere", shape="slab_with_cap",
        dimensions=(50.0, 50.0, 4.0), cap_height=5.0, default_edge=1.0,
        targets=(Sphere(center=(25.0, 25.0, 2.0), radius=1.0),),
        true_params=TRUE_PARAMS),
    "case3_peanut": ScenePreset(
        name="case3_peanut", shape="slab", dimensions=(55.0, 55.0, 15.0),
        targets=(Sphere(center=(25.5, 27.5, 7.5), radius=3.0),
                 Sphere(center=(29.5, 27.5, 7.5), radius=3.0)),
        true_params=TRUE_PARAMS),
    "case4_peanut_plus_sphere": ScenePreset(
        name="case4_peanut_plus_sphere", shape="slab",
        dimensions=(55.0, 55.0, 15.0),
        targets=(Sphere(center=(25.5, 27.5, 7.5), radius=3.0),
                 Sphere(center=(29.5, 27.5, 7.5), radius=3.0),
                 Sphere(center=(29.5, 27.5, 7.5), radius=1.25, level=2.0)),
        true_params=TRUE_PARAMS),
}

# shorthand ids accepted by the CLI
PRESET_ALIASES = {"case1": "case1_sphere", "case2": "case2_cap_sphere",
                  "case3": "case3_peanut", "case4": "case4_peanut_plus_sphere"}


def get_preset(name) -> ScenePreset:
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESETS:
        valid = sorted(set(PRESETS) | set(PRESET_ALIASES))
        raise PhantomError(f"unknown preset {name!r}; valid presets: "
                           f"{', '.join(valid)}")
    return PRESETS[name]


def ground_truth_samples(preset: ScenePreset, pts):
    """Analytic target levels at arbitrary points (overlaps take the max)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    out = np.zeros(len(pts))
    for target in preset.targets:
        out = np.maximum(out, target.values(pts))
    return out


def ground_truth_field(preset: ScenePreset, mesh):
    """Target levels at the mesh nodes, checked to stay strictly interior."""
    lo, hi = mesh.bounding_box()
    for target in preset.targets:
        if target.radius == 0:
            continue
        t_lo, t_hi = target.bbox()
        if np.any(t_lo <= lo) or np.any(t_hi >= hi):
            raise PhantomError(
                f"target of preset {preset.name!r} exits the volume: "
                f"target bounds {tuple(t_lo)}..{tuple(t_hi)} vs mesh "
                f"{tuple(lo)}..{tuple(hi)}")
    c = ground_truth_samples(preset, mesh.nodes)
    if np.any(c[mesh.node_is_boundary] != 0):
        raise PhantomError(f"target of preset {preset.name!r} touches "
                           "boundary nodes")
    return c


@dataclass
class Scene:
    """Everything a reconstruction needs, plus its provenance."""

    preset: ScenePreset
    mesh: object
    layout: object
    c_true: np.ndarray
    m_real: MeasurementStack
    true_params: OpticalParams
    edge_len: float
    noise_level: float
    seed: int
    n_src: tuple
    n_det: tuple
    src_margin_frac: float
    det_margin_frac: float


def _grid_positions(extent_x, extent_y, n, margin_frac):
    xs = np.linspace(margin_frac * extent_x, (1 - margin_frac) * extent_x,
                     n[0])
    ys = np.linspace(margin_frac * extent_y, (1 - margin_frac) * extent_y,
                     n[1])
    return [(x, y) for x in xs for y in ys]


def simulate_scene(preset, edge_len=None, noise_level=0.05, seed=0,
                   n_src=(8, 8), n_det=(16, 16), src_margin_frac=0.2,
                   det_margin_frac=0.15) -> Scene:
    """Mesh, layout, ground truth, and noisy measurements for a preset.

    Sources raster the flat bottom surface and detectors image the top
    (curved for the cap phantom); the source burial depth is one
    transport mean free path at the true scattering coefficient.
    """
    if isinstance(preset, str):
        preset = get_preset(preset)
    if edge_len is None:
        edge_len = preset.default_edge
    spec = PhantomSpec(shape=preset.shape, dimensions=preset.dimensions,
                       edge_len=edge_len, cap_height=preset.cap_height)
    mesh = spec.build()
    c_true = ground_truth_field(preset, mesh)
    cfg = LayoutConfig(source_side="bottom", detector_side="top",
                       source_depth=1.0 / preset.true_params.mu_s_prime,
                       detector_sigma=1.0)
    layout = build_layout(
        mesh,
        _grid_positions(preset.dimensions[0], preset.dimensions[1], n_src,
                        src_margin_frac),
        _grid_positions(preset.dimensions[0], preset.dimensions[1], n_det,
                        det_margin_frac),
        cfg)
    fact = factorize(compose(assemble(mesh, preset.true_params.zeta),
                             preset.true_params))
    _, clean = forward_model(fact, layout, c_true)
    noisy = add_noise(clean, noise_level, seed)
    return Scene(preset=preset, mesh=mesh, layout=layout, c_true=c_true,
                 m_real=noisy, true_params=preset.true_params,
                 edge_len=edge_len, noise_level=noise_level, seed=seed,
                 n_src=tuple(n_src), n_det=tuple(n_det),
                 src_margin_frac=src_margin_frac,
                 det_margin_frac=det_margin_frac)


MESH_FILE = "mesh.txt"
MEASUREMENTS_FILE = "measurements.txt"
GROUND_TRUTH_FILE = "ground_truth.txt"
LAYOUT_FILE = "layout.txt"
MANIFEST_FILE = "manifest.txt"


def save_scene(scene: Scene, directory):
    """Write the scene bundle: mesh, layout, measurements, ground truth,
    and a manifest capturing every generation parameter."""
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_mesh(scene.mesh, directory / MESH_FILE)
    save_measurements(scene.m_real, directory / MEASUREMENTS_FILE)
    fileio.save_field(directory / GROUND_TRUTH_FILE, scene.c_true)
    cfg = scene.layout.config
    fileio.write_kv(directory / LAYOUT_FILE, {
        "format": "layout v1",
        "source_side": cfg.source_side,
        "detector_side": cfg.detector_side,
        "source_depth": fileio.format_float(cfg.source_depth),
        "detector_sigma": fileio.format_float(cfg.detector_sigma),
        "n_src_x": scene.n_src[0], "n_src_y": scene.n_src[1],
        "n_det_x": scene.n_det[0], "n_det_y": scene.n_det[1],
        "src_margin_frac": fileio.format_float(scene.src_margin_frac),
        "det_margin_frac": fileio.format_float(scene.det_margin_frac),
    })
    fileio.write_kv(directory / MANIFEST_FILE, {
        "format": "scene v1",
        "preset": scene.preset.name,
        "edge": fileio.format_float(scene.edge_len),
        "noise": fileio.format_float(scene.noise_level),
        "seed": scene.seed,
        "true_mu_a": fileio.format_float(scene.true_params.mu_a),
        "true_mu_s": fileio.format_float(scene.true_params.mu_s_prime),
        "zeta": fileio.format_float(scene.true_params.zeta),
        "c": fileio.format_float(scene.true_params.c),
        "mesh_file": MESH_FILE,
        "measurements_file": MEASUREMENTS_FILE,
        "ground_truth_file": GROUND_TRUTH_FILE,
        "layout_file": LAYOUT_FILE,
    })


def load_scene(directory) -> Scene:
    """Rebuild a scene from its bundle; the layout is reconstructed
    deterministically from the recorded grid parameters."""
    from pathlib import Path
    directory = Path(directory)
    manifest = fileio.read_kv(directory / MANIFEST_FILE)
    if manifest.get("format") != "scene v1":
        raise PhantomError(f"{directory}: not a scene bundle "
                           f"(format {manifest.get('format')!r})")
    preset = get_preset(manifest["preset"])
    true_params = OpticalParams(mu_a=float(manifest["true_mu_a"]),
                                mu_s_prime=float(manifest["true_mu_s"]),
                                zeta=float(manifest["zeta"]),
                                c=float(manifest["c"]))
    mesh = load_mesh(directory / manifest["mesh_file"])
    m_real = load_measurements(directory / manifest["measurements_file"])
    c_true = fileio.load_field(directory / manifest["ground_truth_file"])
    lay = fileio.read_kv(directory / manifest["layout_file"])
    cfg = LayoutConfig(source_side=lay["source_side"],
                       detector_side=lay["detector_side"],
                       source_depth=float(lay["source_depth"]),
                       detector_sigma=float(lay["detector_sigma"]))
    n_src = (int(lay["n_src_x"]), int(lay["n_src_y"]))
    n_det = (int(lay["n_det_x"]), int(lay["n_det_y"]))
    src_margin = float(lay["src_margin_frac"])
    det_margin = float(lay["det_margin_frac"])
    layout = build_layout(
        mesh,
        _grid_positions(preset.dimensions[0], preset.dimensions[1], n_src,
                        src_margin),
        _grid_positions(preset.dimensions[0], preset.dimensions[1], n_det,
                        det_margin),
        cfg)
    return Scene(preset=preset, mesh=mesh, layout=layout, c_true=c_true,
                 m_real=m_real, true_params=true_params,
                 edge_len=float(manifest["edge"]),
                 noise_level=float(manifest["noise"]),
                 seed=int(manifest["seed"]), n_src=n_src, n_det=n_det,
                 src_margin_frac=src_margin, det_margin_frac=det_margin)
