import numpy as np
import pytest

from fmtrecon.adjoint import loss_and_residual
from fmtrecon.fem import OpticalParams, assemble, compose
from fmtrecon.forward import factorize, forward_model
from fmtrecon.mesh import generate_slab_mesh
from fmtrecon.phantoms import (PRESETS, PhantomError, ScenePreset, Sphere,
                               get_preset, ground_truth_field,
                               ground_truth_samples, load_scene,
                               save_scene, simulate_scene)


def test_case1_support_rule():
    mesh = generate_slab_mesh((55, 55, 15), 2.5)
    c = ground_truth_field(get_preset("case1_sphere"), mesh)
    inside = np.linalg.norm(mesh.nodes - (27.5, 27.5, 7.5), axis=1) <= 1.5
    assert np.array_equal(c > 0, inside)
    assert set(np.unique(c)) <= {0.0, 1.0}


def test_zero_radius_target_gives_empty_field():
    mesh = generate_slab_mesh((55, 55, 15), 2.5)
    preset = ScenePreset(name="empty", shape="slab",
                         dimensions=(55.0, 55.0, 15.0),
                         targets=(Sphere(center=(27.5, 27.5, 7.5),
                                         radius=0.0),),
                         true_params=OpticalParams(0.1, 1.0))
    assert np.all(ground_truth_field(preset, mesh) == 0)


def test_case1_support_volume_close_to_analytic():
    mesh = generate_slab_mesh((55, 55, 15), 1.0)
    c = ground_truth_field(get_preset("case1_sphere"), mesh)
    cell_volume = 1.0
    support_volume = c.sum() * cell_volume
    analytic = 4 / 3 * np.pi * 1.5 ** 3
    assert abs(support_volume - analytic) <= max(cell_volume * 10, analytic)
    # tighter: within a couple of shells of boundary cells
    assert support_volume == pytest.approx(analytic, abs=8 * cell_volume)


def test_target_exiting_volume_rejected():
    mesh = generate_slab_mesh((20, 20, 10), 2.5)
    preset = ScenePreset(name="bad", shape="slab",
                         dimensions=(20.0, 20.0, 10.0),
                         targets=(Sphere(center=(10, 10, 9), radius=2.0),),
                         true_params=OpticalParams(0.1, 1.0))
    with pytest.raises(PhantomError, match="exits the volume"):
        ground_truth_field(preset, mesh)


def test_case4_levels():
    mesh = generate_slab_mesh((55, 55, 15), 1.0)
    c = ground_truth_field(get_preset("case4"), mesh)
    assert set(np.unique(c)) == {0.0, 1.0, 2.0}
    # the hot sphere lies inside the peanut lobe
    hot = np.linalg.norm(mesh.nodes - (29.5, 27.5, 7.5), axis=1) <= 1.25
    assert np.all(c[hot] == 2.0)


def test_unknown_preset():
    with pytest.raises(PhantomError, match="valid presets"):
        get_preset("case9")


def test_preset_aliases():
    assert get_preset("case1") is PRESETS["case1_sphere"]
    assert get_preset("case1_sphere") is PRESETS["case1_sphere"]


def test_s_shape_configuration():
    preset = get_preset("s_shape")
    assert preset.true_params.mu_a == 0.1
    assert preset.true_params.mu_s_prime == 1.0
    mesh = generate_slab_mesh(preset.dimensions, 2.5)
    c = ground_truth_field(preset, mesh)
    assert c.sum() > 10
    # extruded at mid depth only
    assert np.all(mesh.nodes[c > 0, 2] == 7.5)


def test_ground_truth_nonnegative_and_interior():
    for name in ("s_shape", "case1", "case2", "case3", "case4"):
        preset = get_preset(name)
        mesh_kwargs = {}
        scene_edge = preset.default_edge
        from fmtrecon.mesh import PhantomSpec
        mesh = PhantomSpec(shape=preset.shape, dimensions=preset.dimensions,
                           edge_len=scene_edge,
                           cap_height=preset.cap_height).build()
        c = ground_truth_field(preset, mesh)
        assert (c >= 0).all()
        assert c.sum() > 0
        assert np.all(c[mesh.node_is_boundary] == 0)


def test_simulate_scene_noiseless_self_consistency():
    scene = simulate_scene("case3", edge_len=3.75, noise_level=0.0, seed=3,
                           n_src=(3, 3), n_det=(4, 4))
    sys = assemble(scene.mesh, scene.true_params.zeta)
    fact = factorize(compose(sys, scene.true_params))
    _, m_hat = forward_model(fact, scene.layout, scene.c_true)
    loss, _ = loss_and_residual(m_hat.values, scene.m_real.values)
    assert loss <= 1e-20 * np.abs(scene.m_real.values).max() ** 2 * m_hat.values.size


def test_simulate_scene_seeds(tmp_path):
    # case3 still has support at this coarse resolution; case1's 1.5 mm
    # sphere would fall between the 3.67 mm grid nodes
    a = simulate_scene("case3", edge_len=3.75, noise_level=0.05, seed=1,
                       n_src=(2, 2), n_det=(3, 3))
    b = simulate_scene("case3", edge_len=3.75, noise_level=0.05, seed=2,
                       n_src=(2, 2), n_det=(3, 3))
    again = simulate_scene("case3", edge_len=3.75, noise_level=0.05, seed=1,
                           n_src=(2, 2), n_det=(3, 3))
    assert not np.array_equal(a.m_real.values, b.m_real.values)
    assert np.array_equal(a.c_true, b.c_true)
    assert np.array_equal(a.m_real.values, again.m_real.values)


def test_scene_bundle_round_trip(tmp_path):
    scene = simulate_scene("case3", edge_len=3.75, noise_level=0.05, seed=9,
                           n_src=(2, 2), n_det=(3, 3))
    save_scene(scene, tmp_path / "bundle")
    again = load_scene(tmp_path / "bundle")
    assert np.array_equal(again.m_real.values, scene.m_real.values)
    assert np.array_equal(again.c_true, scene.c_true)
    assert np.array_equal(again.mesh.nodes, scene.mesh.nodes)
    assert (again.layout.sources != scene.layout.sources).nnz == 0
    assert (again.layout.detectors != scene.layout.detectors).nnz == 0
    assert again.true_params == scene.true_params
    assert again.preset.name == "case3_peanut"


def test_ground_truth_samples_matches_field():
    mesh = generate_slab_mesh((55, 55, 15), 2.5)
    preset = get_preset("case3")
    assert np.array_equal(ground_truth_samples(preset, mesh.nodes),
                          ground_truth_field(preset, mesh))
