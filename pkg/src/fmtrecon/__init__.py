"""Fluorescence molecular tomography reconstruction.

A differentiable finite-element diffusion forward model, adjoint-state
gradients, a coordinate-network fluorescence field, classical baseline
solvers, and an alternating optimizer that recovers the fluorescence
distribution together with the medium's absorption and scattering
coefficients from boundary measurements.
"""

from .adjoint import GradientBundle, gradients, loss_and_residual
from .baselines import JacobianModel, build_jacobian, solve_l1fista, solve_l2cg
from .fem import OpticalParams, SystemMatrices, assemble, compose, d_S_d_mu
from .forward import (Factorization, LayoutConfig, MeasurementStack,
                      PhotonFields, SourceDetectorLayout, add_noise,
                      build_layout, factorize, forward_model)
from .inr import (AdamState, EncodingConfig, NeuralField, adam_step, encode,
                  field_backward, field_forward)
from .mesh import (PhantomSpec, TetMesh, generate_cap_mesh,
                   generate_slab_mesh, load_mesh, save_mesh)
from .metrics import DiceResult, dice, line_profile, mu_error
from .phantoms import (PRESETS, ScenePreset, ground_truth_field, load_scene,
                       save_scene, simulate_scene)
from .recon import (ReconConfig, ReconTrace, reconstruct,
                    sample_field_on_grid)
from .volume import GridSpec, read_vtk, write_vtk

__version__ = "0.1.0"
