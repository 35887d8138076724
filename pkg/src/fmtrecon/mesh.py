"""Tetrahedral volume meshes with oriented boundary faces.

Meshes are generated from structured hexahedral grids, each hexahedron
split into 6 tetrahedra along a fixed diagonal so the result is
deterministic and conforming. Coordinates are millimetres throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class MeshError(Exception):
    """Invalid mesh geometry or topology."""


class MeshFormatError(MeshError):
    """Malformed mesh file. Carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# Local faces of a tetrahedron (a,b,c,d), each opposite the listed vertex.
_TET_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
_TET_FACE_OPPOSITE = np.array([0, 1, 2, 3])

# Kuhn subdivision of the unit hexahedron: one tet per axis permutation,
# all sharing the (0,0,0)-(1,1,1) diagonal. Odd permutations are reordered
# so every tet has positive signed volume.
_HEX_TO_TETS = []
for _perm, _parity in [((0, 1, 2), 1), ((0, 2, 1), -1), ((1, 0, 2), -1),
                       ((1, 2, 0), 1), ((2, 0, 1), 1), ((2, 1, 0), -1)]:
    _c = [(0, 0, 0)]
    _v = [0, 0, 0]
    for _ax in _perm:
        _v = list(_v)
        _v[_ax] = 1
        _c.append(tuple(_v))
    if _parity < 0:
        _c[1], _c[2] = _c[2], _c[1]
    _HEX_TO_TETS.append(_c)


@dataclass(frozen=True)
class TetMesh:
    """Immutable tetrahedral mesh.

    Attributes
    ----------
    nodes : (N, 3) float array
        Node coordinates in mm.
    elements : (E, 4) int array
        Tetrahedra as node indices, ordered for positive signed volume.
    boundary_faces : (B, 3) int array
        Boundary triangles, oriented so normals point outward.
    node_is_boundary : (N,) bool array
        True exactly for nodes referenced by boundary_faces.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_faces: np.ndarray
    node_is_boundary: np.ndarray

    def __post_init__(self):
        for arr in (self.nodes, self.elements, self.boundary_faces,
                    self.node_is_boundary):
            arr.setflags(write=False)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    def bounding_box(self):
        return self.nodes.min(axis=0), self.nodes.max(axis=0)


def element_volumes(mesh_or_nodes, elements=None):
    """Signed volumes of all tetrahedra."""
    if elements is None:
        nodes, elements = mesh_or_nodes.nodes, mesh_or_nodes.elements
    else:
        nodes = mesh_or_nodes
    x = nodes[elements]
    edges = x[:, 1:] - x[:, :1]
    return np.linalg.det(edges) / 6.0


def _exterior_faces(elements):
    """Faces appearing in exactly one element.

    Returns (faces, owner_element, opposite_local_vertex) with faces as
    unsorted index triples in the element's own ordering.
    """
    all_faces = elements[:, _TET_FACES].reshape(-1, 3)
    keys = np.sort(all_faces, axis=1)
    _, first, counts = np.unique(keys, axis=0, return_index=True,
                                 return_counts=True)
    # Faces with a single occurrence are exterior; `first` is unambiguous
    # for those regardless of sort stability.
    pos = first[counts == 1]
    owner = pos // 4
    local = pos % 4
    faces = all_faces[pos]
    opposite = elements[owner, _TET_FACE_OPPOSITE[local]]
    return faces, owner, opposite


def _orient_outward(nodes, faces, opposite):
    """Flip face triples whose normal points toward the opposite vertex."""
    a, b, c = nodes[faces[:, 0]], nodes[faces[:, 1]], nodes[faces[:, 2]]
    n = np.cross(b - a, c - a)
    inward = np.einsum("ij,ij->i", n, nodes[opposite] - a) > 0
    out = faces.copy()
    out[inward, 1], out[inward, 2] = faces[inward, 2], faces[inward, 1]
    return out


def _finish_mesh(nodes, elements):
    faces, _, opposite = _exterior_faces(elements)
    boundary_faces = _orient_outward(nodes, faces, opposite)
    flags = np.zeros(nodes.shape[0], dtype=bool)
    flags[boundary_faces.ravel()] = True
    mesh = TetMesh(nodes=np.ascontiguousarray(nodes, dtype=np.float64),
                   elements=np.ascontiguousarray(elements, dtype=np.int64),
                   boundary_faces=np.ascontiguousarray(boundary_faces,
                                                       dtype=np.int64),
                   node_is_boundary=flags)
    validate_mesh(mesh)
    return mesh


def generate_slab_mesh(extent, edge_len):
    """Structured tetrahedral mesh of an axis-aligned box.

    Parameters
    ----------
    extent : (3,) floats
        Box dimensions (mm), corner at the origin.
    edge_len : float
        Target edge length (mm); actual spacing divides each extent evenly.
    """
    extent = tuple(float(e) for e in extent)
    if any(e <= 0 for e in extent) or edge_len <= 0:
        raise MeshError(f"degenerate extent {extent} for edge length {edge_len}: "
                        "all dimensions and the edge length must be positive")
    if edge_len > min(extent):
        raise MeshError(f"degenerate extent {extent}: every dimension must be "
                        f">= edge length {edge_len}")
    ncells = [max(1, math.ceil(e / edge_len)) for e in extent]
    axes = [np.linspace(0.0, e, n + 1) for e, n in zip(extent, ncells)]
    nx, ny, nz = (n + 1 for n in ncells)
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    nodes = np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])

    def nid(i, j, k):
        return (i * ny + j) * nz + k

    ci, cj, ck = np.meshgrid(np.arange(ncells[0]), np.arange(ncells[1]),
                             np.arange(ncells[2]), indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    tets = []
    for pattern in _HEX_TO_TETS:
        tets.append(np.stack(
            [nid(ci + di, cj + dj, ck + dk) for di, dj, dk in pattern],
            axis=1))
    elements = np.concatenate(tets, axis=0)
    # Interleave so the 6 tets of each cell stay adjacent in element order.
    order = np.argsort(np.tile(np.arange(ci.size), 6), kind="stable")
    elements = elements[order]
    return _finish_mesh(nodes, elements)


def cap_profile(xy, footprint_center, half_width, cap_height):
    """Vertical displacement of a spherical cap over a flat top.

    The cap meets the plane at radius `half_width` from the footprint
    center and rises to `cap_height` at the center; outside that radius
    the displacement is zero.
    """
    r2 = np.sum((np.asarray(xy, dtype=float) - footprint_center) ** 2, axis=-1)
    sphere_r = (half_width ** 2 + cap_height ** 2) / (2.0 * cap_height)
    z = np.sqrt(np.maximum(sphere_r ** 2 - r2, 0.0)) - (sphere_r - cap_height)
    return np.maximum(z, 0.0)


def generate_cap_mesh(base, cap_height, edge_len):
    """Slab mesh whose top surface bulges into a spherical cap.

    Top-layer nodes of the structured slab are displaced vertically by the
    cap profile; connectivity is unchanged, so the mesh stays conforming.
    The cap must be shallower than half the smaller footprint side, or the
    displacement map would fold over.
    """
    base = tuple(float(b) for b in base)
    if cap_height <= 0:
        raise MeshError(f"cap height must be positive, got {cap_height}")
    half_width = min(base[0], base[1]) / 2.0
    if cap_height >= half_width:
        raise MeshError(
            f"cap height {cap_height} not realizable over a "
            f"{base[0]} x {base[1]} footprint: the implied spherical cap "
            f"would overhang (requires cap height < {half_width})")
    slab = generate_slab_mesh(base, edge_len)
    nodes = slab.nodes.copy()
    top = np.abs(nodes[:, 2] - base[2]) < 1e-12 * max(base)
    center = np.array([base[0] / 2.0, base[1] / 2.0])
    nodes[top, 2] += cap_profile(nodes[top, :2], center, half_width,
                                 cap_height)
    return _finish_mesh(nodes, slab.elements.copy())


def validate_mesh(mesh):
    """Check all structural invariants; raise MeshError on violation."""
    n = mesh.n_nodes
    if mesh.elements.size == 0:
        raise MeshError("no elements")
    if mesh.elements.min() < 0 or mesh.elements.max() >= n:
        bad = int(np.argmax((mesh.elements < 0) | (mesh.elements >= n)))
        raise MeshError(f"element {bad // 4} refers to node index out of "
                        f"range (node count {n})")
    vols = element_volumes(mesh)
    if np.any(vols <= 0):
        bad = int(np.argmax(vols <= 0))
        raise MeshError(f"element {bad} has non-positive volume {vols[bad]:g}")
    if mesh.boundary_faces.size:
        if mesh.boundary_faces.min() < 0 or mesh.boundary_faces.max() >= n:
            raise MeshError("boundary face refers to node index out of range")
    ext_faces, _, opposite = _exterior_faces(mesh.elements)
    ext_keys = {tuple(f) for f in np.sort(ext_faces, axis=1)}
    bf_sorted = np.sort(mesh.boundary_faces, axis=1)
    for i, key in enumerate(map(tuple, bf_sorted)):
        if key not in ext_keys:
            raise MeshError(f"boundary face {i} {key} is not an exterior "
                            "face of exactly one element")
    if len({tuple(k) for k in bf_sorted}) != len(bf_sorted):
        raise MeshError("duplicate boundary faces")
    if len(bf_sorted) != len(ext_keys):
        raise MeshError("boundary faces do not cover the mesh exterior")
    # Outward orientation against the owning element.
    owner_opposite = {tuple(f): o for f, o in
                      zip(map(tuple, np.sort(ext_faces, axis=1)), opposite)}
    a = mesh.nodes[mesh.boundary_faces[:, 0]]
    b = mesh.nodes[mesh.boundary_faces[:, 1]]
    c = mesh.nodes[mesh.boundary_faces[:, 2]]
    normals = np.cross(b - a, c - a)
    opp = np.array([owner_opposite[tuple(k)] for k in bf_sorted])
    if np.any(np.einsum("ij,ij->i", normals, mesh.nodes[opp] - a) >= 0):
        bad = int(np.argmax(
            np.einsum("ij,ij->i", normals, mesh.nodes[opp] - a) >= 0))
        raise MeshError(f"boundary face {bad} is not oriented outward")
    flags = np.zeros(n, dtype=bool)
    flags[mesh.boundary_faces.ravel()] = True
    if not np.array_equal(flags, mesh.node_is_boundary):
        raise MeshError("node boundary flags do not match boundary faces")
    _check_manifold(mesh.boundary_faces)


def _check_manifold(boundary_faces):
    edges = np.concatenate([boundary_faces[:, [0, 1]],
                            boundary_faces[:, [1, 2]],
                            boundary_faces[:, [2, 0]]])
    keys = np.sort(edges, axis=1)
    _, counts = np.unique(keys, axis=0, return_counts=True)
    if np.any(counts != 2):
        bad = int(np.argmax(counts != 2))
        raise MeshError(f"non-manifold boundary: an edge is shared by "
                        f"{counts[bad]} faces instead of 2")


@dataclass(frozen=True)
class PhantomSpec:
    """Named phantom geometry plus target mesh resolution."""

    shape: str                       # "slab" or "slab_with_cap"
    dimensions: tuple                # (x, y, z) mm; z is the base thickness
    edge_len: float                  # target edge length, mm
    cap_height: float = 0.0

    def __post_init__(self):
        if self.shape not in ("slab", "slab_with_cap"):
            raise MeshError(f"unknown phantom shape {self.shape!r}")
        if any(d <= 0 for d in self.dimensions):
            raise MeshError("phantom dimensions must be strictly positive")
        thinnest = min(self.dimensions)
        if math.ceil(thinnest / self.edge_len) + 1 < 5:
            raise MeshError(
                f"edge length {self.edge_len} yields fewer than 5 nodes "
                f"along the thinnest axis ({thinnest} mm); use edge length "
                f"<= {thinnest / 4:g}")
        if self.shape == "slab_with_cap" and self.cap_height <= 0:
            raise MeshError("slab_with_cap requires a positive cap height")

    def build(self):
        if self.shape == "slab":
            return generate_slab_mesh(self.dimensions, self.edge_len)
        return generate_cap_mesh(self.dimensions, self.cap_height,
                                 self.edge_len)


def save_mesh(mesh, path):
    """Write the plain-text mesh format (17 significant digits)."""
    lines = ["tetmesh v1", f"nodes {mesh.n_nodes}"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.nodes]
    lines.append(f"elements {mesh.n_elements}")
    lines += [f"{a} {b} {c} {d}" for a, b, c, d in mesh.elements]
    lines.append(f"boundary {len(mesh.boundary_faces)}")
    lines += [f"{a} {b} {c}" for a, b, c in mesh.boundary_faces]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path):
    """Parse the plain-text mesh format and validate all invariants."""
    with open(path, "r", encoding="ascii") as fh:
        raw = fh.read().split("\n")
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(raw) if ln.strip()]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise MeshFormatError("unexpected end of file",
                                  line=lines[-1][0] if lines else 1)
        item = lines[pos]
        pos += 1
        return item

    lno, header = take()
    if header != "tetmesh v1":
        raise MeshFormatError(f"malformed header {header!r}, expected "
                              "'tetmesh v1'", line=lno)

    def section(name, width, dtype):
        lno, head = take()
        parts = head.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshFormatError(f"expected '{name} <count>', got {head!r}",
                                  line=lno)
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshFormatError(f"bad {name} count {parts[1]!r}", line=lno)
        rows = np.empty((count, width), dtype=dtype)
        for r in range(count):
            lno, ln = take()
            fields = ln.split()
            if len(fields) != width:
                raise MeshFormatError(
                    f"expected {width} values in {name} entry, got "
                    f"{len(fields)}", line=lno)
            try:
                rows[r] = [dtype(f) for f in fields]
            except ValueError:
                raise MeshFormatError(f"bad {name} value in {ln!r}", line=lno)
        return rows, lno

    nodes, _ = section("nodes", 3, float)
    elements, el_end = section("elements", 4, int)
    if elements.shape[0] == 0:
        raise MeshFormatError("no elements", line=el_end)
    boundary, _ = section("boundary", 3, int)
    if pos != len(lines):
        raise MeshFormatError("trailing content after boundary section",
                              line=lines[pos][0])
    n = nodes.shape[0]
    for name, arr in (("elements", elements), ("boundary", boundary)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise MeshFormatError(
                f"{name} index out of range (node count {n})")
    flags = np.zeros(n, dtype=bool)
    flags[boundary.ravel()] = True
    mesh = TetMesh(nodes=nodes, elements=elements, boundary_faces=boundary,
                   node_is_boundary=flags)
    validate_mesh(mesh)
    return mesh
