"""Self-supervised reconstruction loop.

Each iteration evaluates the neural field at the mesh nodes, runs the
forward model, forms the squared-error loss with an L1 penalty on the
field, backpropagates through the adjoint solves and the network, and
applies one Adam step to the network parameters. Every T-th iteration
one optical coefficient takes a plain gradient-descent step (alternating
between absorption and scattering when both are adaptive), is clamped,
and the system matrix is recomposed and refactorized. The non-adaptive
variant keeps the coefficients at their initial values throughout.

Measurements are normalized internally to a peak of one so that loss
magnitudes (and hence workable learning rates) do not depend on source
strength or mesh scale; the normalization is folded back into the field
before results are returned.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .adjoint import gradients, loss_and_residual
from .fem import OpticalParams, SystemMatrices, compose
from .forward import FactorizationError, factorize, forward_model
from .inr import (AdamState, EncodingConfig, NeuralField, adam_step,
                  field_backward, field_eval, field_forward)
from .volume import GridSpec

MODES = ("neufmt", "mu_neufmt")
SOFTPLUS_ZERO = float(np.log(2.0))


class ReconError(Exception):
    """Reconstruction aborted; carries the trace up to the failure."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class ReconConfig:
    """Knobs of the reconstruction loop.

    `period` is the alternation period T; with both adapt flags set the
    even multiples of T update mu_a and the odd ones mu_s', and with a
    single flag set every multiple updates that coefficient. Coefficients
    are clamped to [clamp_lo_factor, clamp_hi_factor] times their initial
    guess after every step.
    """

    init: OpticalParams
    mode: str = "mu_neufmt"
    adapt_mu_a: bool = True
    adapt_mu_s: bool = True
    n_iters: int = 2000
    period: int = 50
    lr_theta: float = 1e-4
    lr_mu_a: float = 1e-5
    lr_mu_s: float = 1e-3
    lambda_l1: float = 1e-6
    seed: int = 0
    clamp_lo_factor: float = 0.2
    clamp_hi_factor: float = 5.0
    n_freqs: int = 6
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_iters < 1 or self.period < 1:
            raise ValueError("n_iters and period must be >= 1")
        for name in ("lr_theta", "lr_mu_a", "lr_mu_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        if not (0 < self.clamp_lo_factor < self.clamp_hi_factor):
            raise ValueError("clamp factors must satisfy 0 < lo < hi")
        if not (0 < self.lr_decay <= 1):
            raise ValueError("lr_decay must be in (0, 1]")


@dataclass
class ReconTrace:
    """Per-iteration history plus the converged field."""

    iters: np.ndarray
    losses: np.ndarray
    mu_a: np.ndarray
    mu_s: np.ndarray
    lr_theta: np.ndarray
    final_C: np.ndarray = dataclass_field(default=None)
    final_params: OpticalParams = dataclass_field(default=None)
    field: NeuralField = dataclass_field(default=None, repr=False)
    n_refactorizations: int = 0


def _update_target(cfg, i):
    """Which coefficient steps at iteration i, or None."""
    if cfg.mode != "mu_neufmt" or i % cfg.period != 0:
        return None
    if cfg.adapt_mu_a and cfg.adapt_mu_s:
        return "mu_a" if (i // cfg.period) % 2 == 0 else "mu_s_prime"
    if cfg.adapt_mu_a:
        return "mu_a"
    if cfg.adapt_mu_s:
        return "mu_s_prime"
    return None


def _initial_scale(fact, layout, m_norm, n_nodes):
    """Head scale making the initial constant field match the data level."""
    _, unit = forward_model(fact, layout, np.ones(n_nodes))
    unit_level = np.abs(unit.values).mean()
    data_level = np.abs(m_norm).mean()
    if unit_level <= 0 or data_level <= 0:
        return 1.0
    return data_level / unit_level / SOFTPLUS_ZERO


def reconstruct(mesh, sys: SystemMatrices, layout, m_real,
                cfg: ReconConfig) -> ReconTrace:
    """Run the alternating reconstruction loop.

    `m_real` is an (n_src, n_det) array (or a MeasurementStack). Returns
    the trace with per-iteration loss and coefficient history; losses are
    reported in normalized measurement units.
    """
    m_real = np.asarray(getattr(m_real, "values", m_real), dtype=np.float64)
    if m_real.shape != (layout.n_sources, layout.n_detectors):
        raise ValueError(f"measurements {m_real.shape} do not match layout "
                         f"({layout.n_sources}, {layout.n_detectors})")
    scale = float(np.abs(m_real).max())
    if scale == 0.0:
        scale = 1.0
    m_norm = m_real / scale

    p = cfg.init
    s = compose(sys, p)
    fact = factorize(s)
    n_refact = 1

    encoding = EncodingConfig.for_mesh(mesh, cfg.n_freqs)
    head_scale = _initial_scale(fact, layout, m_norm, mesh.n_nodes)
    nf = NeuralField.create(encoding, seed=cfg.seed, output_scale=head_scale)
    # Field magnitude implied by the data; the L1 penalty is measured in
    # these units so lambda stays meaningful regardless of source strength.
    c_star = max(head_scale * SOFTPLUS_ZERO, np.finfo(float).tiny)
    params = nf.parameters()
    adam = AdamState.for_params(params)

    bounds = {
        "mu_a": (cfg.clamp_lo_factor * cfg.init.mu_a,
                 cfg.clamp_hi_factor * cfg.init.mu_a),
        "mu_s_prime": (cfg.clamp_lo_factor * cfg.init.mu_s_prime,
                       cfg.clamp_hi_factor * cfg.init.mu_s_prime),
    }

    k = cfg.n_iters
    trace = ReconTrace(iters=np.arange(1, k + 1),
                       losses=np.full(k, np.nan),
                       mu_a=np.full(k, np.nan),
                       mu_s=np.full(k, np.nan),
                       lr_theta=np.full(k, np.nan))

    def partial(i):
        done = slice(0, i)
        return ReconTrace(iters=trace.iters[done], losses=trace.losses[done],
                          mu_a=trace.mu_a[done], mu_s=trace.mu_s[done],
                          lr_theta=trace.lr_theta[done], field=nf,
                          n_refactorizations=n_refact)

    for i in range(1, k + 1):
        c, tape = field_forward(nf, mesh.nodes)
        fields, m_hat = forward_model(fact, layout, c)
        fid, residual = loss_and_residual(m_hat.values, m_norm)
        loss = fid + cfg.lambda_l1 * np.abs(c).sum() / c_star
        if not np.isfinite(loss):
            raise ReconError(f"non-finite loss at iteration {i}",
                             trace=partial(i - 1))

        target = _update_target(cfg, i)
        bundle = gradients(fact, layout, fields, c, residual, sys, p,
                           want_mu=target is not None)
        dl_dc = bundle.dL_dC + (cfg.lambda_l1 / c_star) * np.sign(c)
        theta_grads = field_backward(nf, tape, dl_dc)
        lr_i = cfg.lr_theta * cfg.lr_decay ** ((i - 1) / max(k - 1, 1))
        adam_step(params, theta_grads, adam, lr_i)

        if target is not None:
            lr_mu = cfg.lr_mu_a if target == "mu_a" else cfg.lr_mu_s
            grad = (bundle.dL_dmu_a if target == "mu_a"
                    else bundle.dL_dmu_s)
            lo, hi = bounds[target]
            new_value = min(max(getattr(p, target) - lr_mu * grad, lo), hi)
            if new_value != getattr(p, target):
                previous = p
                p = p.replace(**{target: new_value})
                s = compose(sys, p)
                try:
                    fact = factorize(s)
                except FactorizationError:
                    # retry once at the clamped value, then give up
                    retry = min(max(new_value, lo), hi)
                    p = previous.replace(**{target: retry})
                    try:
                        fact = factorize(compose(sys, p))
                    except FactorizationError as exc:
                        raise ReconError(
                            f"factorization failed after {target} update at "
                            f"iteration {i}: {exc}", trace=partial(i - 1))
                n_refact += 1

        trace.losses[i - 1] = loss
        trace.mu_a[i - 1] = p.mu_a
        trace.mu_s[i - 1] = p.mu_s_prime
        trace.lr_theta[i - 1] = lr_i

    # fold the measurement normalization back into the field so sampled
    # values are in the units of the supplied measurements
    nf.output_scale *= scale
    trace.field = nf
    trace.final_params = p
    trace.final_C = field_eval(nf, mesh.nodes)
    trace.n_refactorizations = n_refact
    return trace


def sample_field_on_grid(nf: NeuralField, grid: GridSpec, chunk=16384):
    """Evaluate the field on a regular grid; shape follows the grid."""
    values = field_eval(nf, grid.points(), chunk=chunk)
    return values.reshape(grid.shape)


def save_trace_csv(trace: ReconTrace, path):
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss", "mu_a", "mu_s", "lr_theta"])
        for row in zip(trace.iters, trace.losses, trace.mu_a, trace.mu_s,
                       trace.lr_theta):
            writer.writerow([int(row[0])] + [f"{v:.17g}" for v in row[1:]])


def load_trace_csv(path) -> ReconTrace:
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["iter", "loss", "mu_a", "mu_s", "lr_theta"]:
            raise ValueError(f"{path}: unexpected trace header {header}")
        rows = [r for r in reader if r]
    data = np.array([[float(v) for v in r] for r in rows])
    if data.size == 0:
        data = data.reshape(0, 5)
    return ReconTrace(iters=data[:, 0].astype(int), losses=data[:, 1],
                      mu_a=data[:, 2], mu_s=data[:, 3], lr_theta=data[:, 4])
