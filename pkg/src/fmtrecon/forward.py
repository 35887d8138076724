"""Forward light propagation: excitation solve, fluorophore coupling,
emission solve, and detector projection.

The system matrix is factorized once and the factorization reused for
every solve until the optical coefficients change; with raster scans the
right-hand sides are solved as a single block.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu


class LayoutError(Exception):
    """Source or detector placement impossible on this mesh."""


class FactorizationError(Exception):
    """System matrix not symmetric positive definite."""


@dataclass(frozen=True)
class LayoutConfig:
    """Geometry conventions for sources and detectors.

    Sources are unit point loads buried `source_depth` mm into the volume
    from the illuminated surface (one transport mean free path, 1/mu_s',
    by convention); set `surface_sources` to load the surface node
    instead. Detectors are normalized Gaussian footprints of width
    `detector_sigma` mm over boundary nodes of the detection surface;
    sigma 0 collapses to the single nearest node.
    """

    source_side: str = "bottom"
    detector_side: str = "top"
    source_depth: float = 1.0
    detector_sigma: float = 1.0
    surface_sources: bool = False

    def __post_init__(self):
        for side in (self.source_side, self.detector_side):
            if side not in ("top", "bottom"):
                raise LayoutError(f"side must be 'top' or 'bottom', "
                                  f"got {side!r}")
        if self.source_depth < 0 or self.detector_sigma < 0:
            raise LayoutError("source_depth and detector_sigma must be >= 0")


@dataclass(frozen=True)
class SourceDetectorLayout:
    """Sparse source loads and detector projections on mesh nodes."""

    sources: sparse.csr_matrix     # (N, n_src), unit point loads
    detectors: sparse.csr_matrix   # (N, n_det), columns sum to 1
    config: LayoutConfig

    @property
    def n_sources(self):
        return self.sources.shape[1]

    @property
    def n_detectors(self):
        return self.detectors.shape[1]


@dataclass(frozen=True)
class PhotonFields:
    """Nodal photon densities per source, arbitrary intensity units."""

    excitation: np.ndarray   # (N, n_src)
    emission: np.ndarray     # (N, n_src)
    factorization: "Factorization" = field(repr=False, compare=False)


@dataclass(frozen=True)
class MeasurementStack:
    """Detector readings per source position."""

    values: np.ndarray       # (n_src, n_det)
    provenance: str = "simulated"


def _surface_nodes(mesh, side):
    """Boundary nodes belonging to faces whose outward normal faces `side`."""
    faces = mesh.boundary_faces
    a = mesh.nodes[faces[:, 0]]
    n = np.cross(mesh.nodes[faces[:, 1]] - a, mesh.nodes[faces[:, 2]] - a)
    nz = n[:, 2] / np.linalg.norm(n, axis=1)
    keep = nz > 0.5 if side == "top" else nz < -0.5
    idx = np.unique(faces[keep].ravel())
    if idx.size == 0:
        raise LayoutError(f"mesh has no {side} surface faces")
    return idx


def build_layout(mesh, source_positions, detector_positions,
                 config: LayoutConfig = LayoutConfig()):
    """Construct source loads and detector footprints from 2D scan coords.

    Positions are (x, y) pairs on the scanned surfaces; both must lie
    within the mesh footprint.
    """
    source_positions = np.atleast_2d(np.asarray(source_positions, float))
    detector_positions = np.atleast_2d(np.asarray(detector_positions, float))
    lo, hi = mesh.bounding_box()
    for name, pos in (("source", source_positions),
                      ("detector", detector_positions)):
        if pos.shape[1] != 2:
            raise LayoutError(f"{name} positions must be (x, y) pairs")
        outside = ((pos[:, 0] < lo[0]) | (pos[:, 0] > hi[0])
                   | (pos[:, 1] < lo[1]) | (pos[:, 1] > hi[1]))
        if outside.any():
            bad = pos[outside][0]
            raise LayoutError(f"{name} position {tuple(bad)} outside the "
                              f"mesh footprint x:[{lo[0]:g},{hi[0]:g}] "
                              f"y:[{lo[1]:g},{hi[1]:g}]")

    n = mesh.n_nodes
    src_surface = _surface_nodes(mesh, config.source_side)
    det_surface = _surface_nodes(mesh, config.detector_side)
    into = -1.0 if config.source_side == "top" else 1.0

    src_nodes = []
    for x, y in source_positions:
        surf_xy = mesh.nodes[src_surface, :2]
        nearest_surf = src_surface[
            np.argmin(np.sum((surf_xy - (x, y)) ** 2, axis=1))]
        if config.surface_sources or config.source_depth == 0.0:
            src_nodes.append(int(nearest_surf))
            continue
        target = mesh.nodes[nearest_surf] + [0, 0,
                                             into * config.source_depth]
        # Nearest node excluding the illuminated surface itself, so the
        # load lands inside the volume.
        candidates = np.setdiff1d(np.arange(n), src_surface)
        d2 = np.sum((mesh.nodes[candidates] - target) ** 2, axis=1)
        src_nodes.append(int(candidates[np.argmin(d2)]))
    sources = sparse.csr_matrix(
        (np.ones(len(src_nodes)), (src_nodes, np.arange(len(src_nodes)))),
        shape=(n, len(src_nodes)))

    sigma = config.detector_sigma
    det_xy = mesh.nodes[det_surface, :2]
    rows, cols, vals = [], [], []
    for j, (x, y) in enumerate(detector_positions):
        d2 = np.sum((det_xy - (x, y)) ** 2, axis=1)
        if sigma == 0.0:
            w_idx = np.array([np.argmin(d2)])
            w = np.array([1.0])
        else:
            within = d2 <= (3.0 * sigma) ** 2
            if not within.any():
                raise LayoutError(
                    f"detector at ({x:g}, {y:g}) has no {config.detector_side}"
                    f" boundary node within 3 sigma = {3 * sigma:g} mm")
            w_idx = np.flatnonzero(within)
            w = np.exp(-0.5 * d2[w_idx] / sigma ** 2)
            w /= w.sum()
        rows.extend(det_surface[w_idx])
        cols.extend([j] * len(w_idx))
        vals.extend(w)
    detectors = sparse.csr_matrix((vals, (rows, cols)),
                                  shape=(n, len(detector_positions)))
    return SourceDetectorLayout(sources=sources, detectors=detectors,
                                config=config)


class Factorization:
    """Opaque sparse factorization handle supporting repeated solves.

    Uses a symmetric-mode LU without row pivoting, so the signs of the
    pivots expose the matrix inertia: any non-positive pivot means the
    matrix is not positive definite and the optical parameters are
    invalid.
    """

    def __init__(self, s):
        s = sparse.csc_matrix(s)
        if s.shape[0] != s.shape[1]:
            raise FactorizationError(f"matrix is {s.shape}, expected square")
        self.n = s.shape[0]
        try:
            self._lu = splu(s, permc_spec="MMD_AT_PLUS_A",
                            diag_pivot_thresh=0.0,
                            options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise FactorizationError(f"factorization failed: {exc}") from exc
        pivots = self._lu.U.diagonal()
        if not np.all(pivots > 0):
            raise FactorizationError(
                "matrix is not positive definite "
                f"(min pivot {pivots.min():g}); optical parameters invalid")

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise ValueError(f"rhs has {b.shape[0]} rows, expected {self.n}")
        return self._lu.solve(b)


def factorize(s) -> Factorization:
    """Factorize a composed system matrix for repeated solves."""
    return Factorization(s)


def forward_model(fact: Factorization, layout: SourceDetectorLayout, c):
    """Predict boundary measurements for a nodal fluorescence field.

    Solves the excitation system for every source column, couples the
    fluorophores elementwise, solves the emission system, and projects
    onto the detectors.
    """
    c = np.asarray(c, dtype=np.float64).ravel()
    if c.shape[0] != fact.n or layout.sources.shape[0] != fact.n:
        raise ValueError(
            f"dimension mismatch: field {c.shape[0]}, system {fact.n}, "
            f"layout {layout.sources.shape[0]}")
    excitation = fact.solve(layout.sources.toarray())
    emission_src = c[:, None] * excitation
    emission = fact.solve(emission_src)
    measurements = emission.T @ layout.detectors
    fields = PhotonFields(excitation=excitation, emission=emission,
                          factorization=fact)
    return fields, MeasurementStack(values=np.asarray(measurements),
                                    provenance="simulated")


def add_noise(stack: MeasurementStack, level: float,
              seed: int) -> MeasurementStack:
    """Multiplicative Gaussian noise: M * (1 + level * g), g ~ N(0, 1)."""
    if level < 0:
        raise ValueError(f"noise level must be >= 0, got {level}")
    if level == 0:
        return stack
    g = np.random.default_rng(seed).standard_normal(stack.values.shape)
    return replace(stack, values=stack.values * (1.0 + level * g))


def save_measurements(stack: MeasurementStack, path):
    """Write the `measurements v1` text format."""
    n_src, n_det = stack.values.shape
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"measurements v1 {n_src} {n_det}\n")
        for row in stack.values:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_measurements(path) -> MeasurementStack:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[0] != "measurements" or head[1] != "v1":
        raise ValueError(f"{path}: malformed measurements header")
    n_src, n_det = int(head[2]), int(head[3])
    if len(lines) - 1 != n_src:
        raise ValueError(f"{path}: expected {n_src} rows, "
                         f"found {len(lines) - 1}")
    values = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    if values.shape != (n_src, n_det):
        raise ValueError(f"{path}: expected {n_src}x{n_det} values")
    return MeasurementStack(values=values, provenance="loaded")
