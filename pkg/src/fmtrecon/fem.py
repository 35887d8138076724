"""Finite-element matrices for the diffusion model on tetrahedral meshes.

Linear (P1) nodal elements with exact integration. Three component
matrices are assembled once per mesh:

* ``absorption`` - node-pair mass matrix, weighted by mu_a at composition
* ``diffusion``  - stiffness matrix, weighted by the diffusion coefficient
* ``boundary``   - Robin surface mass matrix with the 1/(2*zeta)
  reflection factor folded in at assembly time

and combined into the system matrix

    S = c * (mu_a * absorption + diffusion_coeff * diffusion + boundary)

with diffusion_coeff = 1 / (3 * (mu_a + mu_s')). S is symmetric positive
definite for any admissible optical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .mesh import TetMesh, element_volumes


class AssemblyError(Exception):
    """Mesh unsuitable for assembly (degenerate element, bad zeta)."""


@dataclass(frozen=True)
class OpticalParams:
    """Homogeneous optical coefficients of the medium.

    mu_a and mu_s_prime are in 1/mm; zeta is the refractive-mismatch
    factor of the Robin boundary condition; c is a global light-speed
    scale left at 1 for dimensionless work.
    """

    mu_a: float
    mu_s_prime: float
    zeta: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        for name in ("mu_a", "mu_s_prime", "zeta", "c"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")

    @property
    def diffusion_coeff(self):
        """kappa = 1 / (3 (mu_a + mu_s')), in mm."""
        return 1.0 / (3.0 * (self.mu_a + self.mu_s_prime))

    def replace(self, **kw):
        d = dict(mu_a=self.mu_a, mu_s_prime=self.mu_s_prime, zeta=self.zeta,
                 c=self.c)
        d.update(kw)
        return OpticalParams(**d)


@dataclass(frozen=True)
class SystemMatrices:
    """The three assembled component matrices (CSR, canonical form)."""

    absorption: sparse.csr_matrix
    diffusion: sparse.csr_matrix
    boundary: sparse.csr_matrix
    zeta: float
    n_nodes: int


def _scatter(indices, local, n):
    """Accumulate per-entity local blocks into a canonical CSR matrix."""
    k = indices.shape[1]
    rows = np.broadcast_to(indices[:, :, None], local.shape).ravel()
    cols = np.broadcast_to(indices[:, None, :], local.shape).ravel()
    mat = sparse.coo_matrix((local.ravel(), (rows, cols)),
                            shape=(n, n)).tocsr()
    mat.sort_indices()
    return mat


def assemble(mesh: TetMesh, zeta: float = 1.0) -> SystemMatrices:
    """Assemble the absorption, diffusion, and Robin boundary matrices.

    The Robin factor 1/(2*zeta) is folded into the boundary matrix here;
    changing zeta therefore requires reassembly (of this matrix only).
    """
    if not (np.isfinite(zeta) and zeta > 0):
        raise AssemblyError(f"zeta must be finite and > 0, got {zeta}")
    n = mesh.n_nodes
    vols = element_volumes(mesh)
    if np.any(vols <= 0):
        bad = int(np.argmax(vols <= 0))
        raise AssemblyError(f"element {bad} has non-positive volume "
                            f"{vols[bad]:g}")

    # Volume mass: integral of psi_i psi_j over a tet is V/10 (diagonal)
    # and V/20 (off-diagonal).
    mass_pattern = (np.ones((4, 4)) + np.eye(4)) / 20.0
    local_mass = vols[:, None, None] * mass_pattern

    # Stiffness: basis gradients are constant per element. With edge
    # matrix M (rows x_i - x_0), gradients of psi_1..3 are the columns of
    # inv(M) transposed; psi_0 closes the partition of unity.
    coords = mesh.nodes[mesh.elements]
    edges = coords[:, 1:] - coords[:, :1]
    grads123 = np.linalg.inv(edges).transpose(0, 2, 1)
    grads = np.empty((mesh.n_elements, 4, 3))
    grads[:, 1:] = grads123
    grads[:, 0] = -grads123.sum(axis=1)
    local_stiff = vols[:, None, None] * np.einsum("eid,ejd->eij", grads,
                                                  grads)

    absorption = _scatter(mesh.elements, local_mass, n)
    diffusion = _scatter(mesh.elements, local_stiff, n)

    # Surface mass over boundary triangles: A/6 diagonal, A/12 off.
    faces = mesh.boundary_faces
    fa = mesh.nodes[faces[:, 0]]
    areas = 0.5 * np.linalg.norm(
        np.cross(mesh.nodes[faces[:, 1]] - fa, mesh.nodes[faces[:, 2]] - fa),
        axis=1)
    surf_pattern = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local_surf = (areas / (2.0 * zeta))[:, None, None] * surf_pattern
    boundary = _scatter(faces, local_surf, n)
    # Keep all three on a common sparsity superset so composition never
    # changes the pattern.
    boundary = (boundary + 0.0 * absorption).tocsr()
    boundary.sort_indices()

    return SystemMatrices(absorption=absorption, diffusion=diffusion,
                          boundary=boundary, zeta=zeta, n_nodes=n)


def compose(sys: SystemMatrices, p: OpticalParams) -> sparse.csr_matrix:
    """System matrix S = c (mu_a * Sa + kappa * Sd + Sb)."""
    if p.zeta != sys.zeta:
        raise AssemblyError(
            f"optical params carry zeta={p.zeta} but the boundary matrix "
            f"was assembled with zeta={sys.zeta}; reassemble")
    s = p.c * (p.mu_a * sys.absorption + p.diffusion_coeff * sys.diffusion
               + sys.boundary)
    s = s.tocsr()
    s.sort_indices()
    return s


def d_S_d_mu(sys: SystemMatrices, p: OpticalParams,
             which: str) -> sparse.csr_matrix:
    """Derivative of the composed system matrix w.r.t. one coefficient.

    dS/dmu_a  = c [Sa - Sd / (3 (mu_a + mu_s')^2)]
    dS/dmu_s' = c [   - Sd / (3 (mu_a + mu_s')^2)]
    """
    dk = -1.0 / (3.0 * (p.mu_a + p.mu_s_prime) ** 2)
    if which == "mu_a":
        d = p.c * (sys.absorption + dk * sys.diffusion)
    elif which == "mu_s_prime":
        d = p.c * (dk * sys.diffusion)
    else:
        raise ValueError(f"which must be 'mu_a' or 'mu_s_prime', got {which!r}")
    d = d.tocsr()
    d.sort_indices()
    return d


def is_structurally_symmetric(a, tol=0.0):
    """True if (i,j) is present iff (j,i) is, with equal values within tol."""
    a = a.tocsr()
    a.sort_indices()
    t = a.T.tocsr()
    t.sort_indices()
    if not (np.array_equal(a.indptr, t.indptr)
            and np.array_equal(a.indices, t.indices)):
        return False
    if tol == 0.0:
        return np.array_equal(a.data, t.data)
    return bool(np.all(np.abs(a.data - t.data) <= tol * np.abs(a.data).max()))


def dump_matrix_market(a, path):
    """Debug dump in Matrix Market coordinate format."""
    from scipy.io import mmwrite
    mmwrite(str(path), a.tocoo())
