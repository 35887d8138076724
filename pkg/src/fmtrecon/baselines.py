"""Classical reconstructions on the linearized measurement model.

For fixed optical coefficients the forward map is linear in the nodal
field, M = J C. The Jacobian rows are built from adjoint solves, one per
detector (not one per source-detector pair):

    row(s, d) = (S^-1 P_d) . Phi_x_s

Two solvers operate on it: Tikhonov-regularized conjugate gradients on
the normal equations (via CGLS on the augmented system) and non-negative
L1-regularized FISTA. Both run at whatever coefficients the caller
supplies, with no adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import Factorization, SourceDetectorLayout

# Above this many explicit entries the Jacobian stays implicit.
DENSE_ENTRY_CAP = 20_000_000


@dataclass
class JacobianModel:
    """Linear measurement operator, dense or applied implicitly.

    Rows are ordered source-major: row(s, d) = s * n_det + d. The
    implicit form stores the detector adjoints A = S^-1 P (N x n_det)
    and the excitation block Phi_x (N x n_src).
    """

    detector_adjoint: np.ndarray    # (N, n_det)
    excitation: np.ndarray          # (N, n_src)
    dense: np.ndarray = None        # (n_src*n_det, N) when materialized

    @property
    def n_nodes(self):
        return self.detector_adjoint.shape[0]

    @property
    def shape(self):
        n_rows = self.excitation.shape[1] * self.detector_adjoint.shape[1]
        return (n_rows, self.n_nodes)

    def matvec(self, c):
        """J @ c, flattened source-major."""
        c = np.asarray(c, dtype=np.float64).ravel()
        if self.dense is not None:
            return self.dense @ c
        # (n_src, n_det) = Phi_x' diag(c) A
        out = (self.excitation * c[:, None]).T @ self.detector_adjoint
        return out.ravel()

    def rmatvec(self, r):
        """J' @ r for a flattened source-major residual."""
        r = np.asarray(r, dtype=np.float64).ravel()
        if self.dense is not None:
            return self.dense.T @ r
        n_src = self.excitation.shape[1]
        n_det = self.detector_adjoint.shape[1]
        rm = r.reshape(n_src, n_det)
        return np.sum((self.detector_adjoint @ rm.T) * self.excitation,
                      axis=1)


def build_jacobian(fact: Factorization, layout: SourceDetectorLayout,
                   dense_cap: int = DENSE_ENTRY_CAP) -> JacobianModel:
    """Assemble the linearized operator under the current factorization.

    Materializes the dense matrix only when n_rows * N fits under
    `dense_cap` entries; otherwise the operator stays implicit.
    """
    detector_adjoint = fact.solve(layout.detectors.toarray())
    excitation = fact.solve(layout.sources.toarray())
    model = JacobianModel(detector_adjoint=detector_adjoint,
                          excitation=excitation)
    n_rows, n = model.shape
    if n_rows * n <= dense_cap:
        dense = np.empty((n_rows, n))
        n_det = detector_adjoint.shape[1]
        for s in range(excitation.shape[1]):
            block = detector_adjoint * excitation[:, s:s + 1]
            dense[s * n_det:(s + 1) * n_det] = block.T
        model.dense = dense
    return model


def solve_l2cg(jac, m_real, alpha, iters=200, tol=1e-12):
    """Tikhonov-regularized least squares by conjugate gradients.

    Minimizes ||J C - m||^2 + alpha ||C||^2 through CGLS on the augmented
    system [J; sqrt(alpha) I], which solves the normal equations
    (J'J + alpha I) C = J'm; the augmented least-squares residual (the
    objective) decreases monotonically. Returns (C, converged).
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    m = np.asarray(getattr(m_real, "values", m_real), dtype=np.float64).ravel()
    matvec = jac.matvec if hasattr(jac, "matvec") else lambda v: jac @ v
    rmatvec = (jac.rmatvec if hasattr(jac, "rmatvec")
               else lambda v: jac.T @ v)
    n = jac.shape[1]
    sqrt_a = np.sqrt(alpha)
    x = np.zeros(n)
    r_top = m.copy()              # m - J x
    r_bot = np.zeros(n)           # -sqrt(alpha) x
    s = rmatvec(r_top) + sqrt_a * r_bot
    p = s.copy()
    gamma = float(s @ s)
    gamma0 = gamma
    converged = False
    for _ in range(iters):
        if gamma <= tol * tol * gamma0 or gamma == 0.0:
            converged = True
            break
        q_top = matvec(p)
        q_bot = sqrt_a * p
        denom = float(q_top @ q_top + q_bot @ q_bot)
        if denom == 0.0:
            converged = True
            break
        step = gamma / denom
        x += step * p
        r_top -= step * q_top
        r_bot -= step * q_bot
        s = rmatvec(r_top) + sqrt_a * r_bot
        gamma_new = float(s @ s)
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return x, converged


def soft_threshold(v, thresh):
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


def estimate_operator_norm(jac, iters=50, seed=0):
    """Power iteration estimate of ||J'J||_2."""
    matvec = jac.matvec if hasattr(jac, "matvec") else lambda v: jac @ v
    rmatvec = (jac.rmatvec if hasattr(jac, "rmatvec")
               else lambda v: jac.T @ v)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(jac.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = rmatvec(matvec(v))
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise ValueError("operator norm estimation failed: J'J v = 0")
        lam = norm
        v = w / norm
    return lam


def solve_l1fista(jac, m_real, lam, iters=500, seed=0):
    """Non-negative L1-regularized least squares by FISTA.

    Minimizes ||J C - m||^2 + lam ||C||_1 subject to C >= 0 with step
    1/L, L the power-iteration estimate of ||J'J||; the proximal map is
    a soft threshold followed by the non-negativity clamp. Returns
    (C, objective_history).
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    m = np.asarray(getattr(m_real, "values", m_real), dtype=np.float64).ravel()
    matvec = jac.matvec if hasattr(jac, "matvec") else lambda v: jac @ v
    rmatvec = (jac.rmatvec if hasattr(jac, "rmatvec")
               else lambda v: jac.T @ v)
    big_l = estimate_operator_norm(jac, seed=seed)
    step = 1.0 / big_l

    def objective(c):
        r = matvec(c) - m
        return float(r @ r + lam * np.abs(c).sum())

    x = np.zeros(jac.shape[1])
    y = x.copy()
    t = 1.0
    history = [objective(x)]
    for _ in range(iters):
        grad = rmatvec(matvec(y) - m)      # half the true gradient
        z = y - step * grad
        x_new = np.maximum(soft_threshold(z, 0.5 * step * lam), 0.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        history.append(objective(x))
    return x, np.array(history)
