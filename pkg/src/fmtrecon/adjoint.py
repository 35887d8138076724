"""Adjoint-state gradients of the data-fidelity loss.

For loss L = sum((M_hat - M)^2) the gradient w.r.t. the nodal
fluorescence field and w.r.t. each optical coefficient is assembled from
two extra block solves against the cached factorization (the system
matrix is symmetric, so no transpose solves are needed):

    lam_m = S^-1 (P R_s)          per source column s, R = 2 (M_hat - M)
    dL/dC += lam_m . Phi_x
    lam_x = S^-1 (C . lam_m)
    dL/dmu = -sum_s [ lam_m' (dS/dmu) Phi_m  +  lam_x' (dS/dmu) Phi_x ]

where the first term follows the emission solve and the second the
excitation solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import OpticalParams, SystemMatrices, d_S_d_mu
from .forward import Factorization, PhotonFields, SourceDetectorLayout


class StaleFactorizationError(Exception):
    """Photon fields were produced under a different system matrix."""


@dataclass(frozen=True)
class GradientBundle:
    dL_dC: np.ndarray
    dL_dmu_a: float
    dL_dmu_s: float
    loss_value: float


def loss_and_residual(m_hat, m_real):
    """Squared-error data fidelity and its measurement-space residual.

    Returns (loss, R) with loss = sum((m_hat - m_real)^2) and
    R = 2 (m_hat - m_real).
    """
    m_hat = np.asarray(m_hat, dtype=np.float64)
    m_real = np.asarray(m_real, dtype=np.float64)
    if m_hat.shape != m_real.shape:
        raise ValueError(f"measurement shapes differ: {m_hat.shape} vs "
                         f"{m_real.shape}")
    diff = m_hat - m_real
    return float(np.sum(diff * diff)), 2.0 * diff


def gradients(fact: Factorization, layout: SourceDetectorLayout,
              fields: PhotonFields, c, residual, sys: SystemMatrices,
              p: OpticalParams, want_mu: bool = True) -> GradientBundle:
    """Gradient bundle for the current residual.

    `fields` must come from forward_model under the same factorization;
    `residual` is the (n_src, n_det) array from loss_and_residual. With
    want_mu=False the coefficient gradients are skipped (one fewer block
    solve), as Algorithm iterations between coefficient updates need only
    dL/dC.
    """
    if fields.factorization is not fact:
        raise StaleFactorizationError(
            "photon fields were computed under a different factorization; "
            "re-run forward_model after changing optical parameters")
    c = np.asarray(c, dtype=np.float64).ravel()
    residual = np.asarray(residual, dtype=np.float64)
    n_src = layout.n_sources
    if residual.shape != (n_src, layout.n_detectors):
        raise ValueError(f"residual shape {residual.shape} does not match "
                         f"layout ({n_src}, {layout.n_detectors})")

    # loss = sum(diff^2) = sum((R/2)^2)
    loss = float(np.sum(residual * residual)) / 4.0

    adj_emission = fact.solve(layout.detectors @ residual.T)  # (N, n_src)
    dl_dc = np.sum(adj_emission * fields.excitation, axis=1)

    if not want_mu:
        return GradientBundle(dL_dC=dl_dc, dL_dmu_a=0.0, dL_dmu_s=0.0,
                              loss_value=loss)

    adj_excitation = fact.solve(c[:, None] * adj_emission)
    out = {}
    for which, key in (("mu_a", "dL_dmu_a"), ("mu_s_prime", "dL_dmu_s")):
        d = d_S_d_mu(sys, p, which)
        out[key] = -(np.sum(adj_emission * (d @ fields.emission))
                     + np.sum(adj_excitation * (d @ fields.excitation)))
    return GradientBundle(dL_dC=dl_dc, dL_dmu_a=float(out["dL_dmu_a"]),
                          dL_dmu_s=float(out["dL_dmu_s"]), loss_value=loss)
