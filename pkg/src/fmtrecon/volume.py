"""Regular sampling grids, legacy-VTK volume export, and interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class VolumeError(Exception):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned regular grid of sample points."""

    origin: tuple      # (x0, y0, z0) mm
    spacing: tuple     # (dx, dy, dz) mm
    shape: tuple       # (nx, ny, nz) samples

    def __post_init__(self):
        if any(s <= 0 for s in self.spacing) or any(n < 1 for n in self.shape):
            raise VolumeError(f"bad grid: spacing {self.spacing}, "
                              f"shape {self.shape}")

    @classmethod
    def for_box(cls, lo, hi, spacing):
        """Grid covering [lo, hi] with roughly the requested spacing."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        shape = tuple(int(round((h - l) / spacing)) + 1
                      for l, h in zip(lo, hi))
        actual = tuple((h - l) / max(n - 1, 1)
                       for l, h, n in zip(lo, hi, shape))
        return cls(origin=tuple(lo), spacing=actual, shape=shape)

    @property
    def n_points(self):
        nx, ny, nz = self.shape
        return nx * ny * nz

    def axes(self):
        return tuple(self.origin[d] + self.spacing[d] * np.arange(self.shape[d])
                     for d in range(3))

    def points(self):
        """All sample coordinates, shape (n_points, 3), x varying slowest."""
        ax = self.axes()
        xx, yy, zz = np.meshgrid(*ax, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])


def write_vtk(path, grid: GridSpec, values, name="field"):
    """Legacy VTK structured-points file (ASCII, float64)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != tuple(grid.shape):
        raise VolumeError(f"values shape {values.shape} != grid shape "
                          f"{grid.shape}")
    nx, ny, nz = grid.shape
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{name}\n")
        fh.write("ASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx} {ny} {nz}\n")
        fh.write(f"ORIGIN {grid.origin[0]:.17g} {grid.origin[1]:.17g} "
                 f"{grid.origin[2]:.17g}\n")
        fh.write(f"SPACING {grid.spacing[0]:.17g} {grid.spacing[1]:.17g} "
                 f"{grid.spacing[2]:.17g}\n")
        fh.write(f"POINT_DATA {nx * ny * nz}\n")
        fh.write(f"SCALARS {name} double 1\n")
        fh.write("LOOKUP_TABLE default\n")
        # VTK point order: x fastest, z slowest.
        flat = values.transpose(2, 1, 0).ravel()
        fh.write("\n".join(f"{v:.17g}" for v in flat))
        fh.write("\n")


def read_vtk(path):
    """Read a volume written by write_vtk. Returns (GridSpec, values)."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().split("\n")
    try:
        if not lines[0].startswith("# vtk DataFile"):
            raise VolumeError(f"{path}: not a legacy VTK file")
        if lines[2].strip() != "ASCII":
            raise VolumeError(f"{path}: only ASCII VTK supported")
        if lines[3].strip() != "DATASET STRUCTURED_POINTS":
            raise VolumeError(f"{path}: not a structured-points dataset")
        dims = tuple(int(v) for v in lines[4].split()[1:4])
        origin = tuple(float(v) for v in lines[5].split()[1:4])
        spacing = tuple(float(v) for v in lines[6].split()[1:4])
        data = np.array(" ".join(lines[10:]).split(), dtype=np.float64)
    except (IndexError, ValueError) as exc:
        raise VolumeError(f"{path}: malformed VTK file ({exc})") from exc
    n = dims[0] * dims[1] * dims[2]
    if data.size != n:
        raise VolumeError(f"{path}: expected {n} values, found {data.size}")
    values = data.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    return GridSpec(origin=origin, spacing=spacing, shape=dims), values


def trilinear(values, grid: GridSpec, pts):
    """Trilinear interpolation of a sampled volume at arbitrary points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    rel = (pts - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    out_of_range = (rel < -1e-9) | (rel > np.asarray(grid.shape) - 1 + 1e-9)
    if np.any(out_of_range):
        bad = pts[np.any(out_of_range, axis=1)][0]
        raise VolumeError(f"point {tuple(bad)} outside the sampled grid")
    shape = np.asarray(grid.shape)
    idx = np.clip(np.floor(rel).astype(int), 0, np.maximum(shape - 2, 0))
    frac = np.clip(rel - idx, 0.0, 1.0)
    out = np.zeros(len(pts))
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.prod(np.where(off, frac, 1.0 - frac), axis=1)
        at = np.minimum(idx + off, shape - 1)  # degenerate axes get weight 0
        out += w * values[at[:, 0], at[:, 1], at[:, 2]]
    return out
