import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import label

from clothslide.cloth import (ClothMesh, ClothParamError, ClothParams, NodeClass, build_cloth, classify_node,
                              make_configuration, max_structural_strain, mechanical_energy, settle)


def node(params, i, j):
    return j * params.grid_w + i


def test_build_rest_configuration():
    p = ClothParams(width_m=0.3, height_m=0.3, grid_w=20, grid_h=20)
    mesh = build_cloth(p, [(0, (0.0, 0.0, 0.0))])
    assert mesh.positions.shape == (400, 3)
    np.testing.assert_allclose(mesh.positions[0], 0.0)
    np.testing.assert_allclose(mesh.undeformed[0], 0.0)
    assert np.all(mesh.velocities == 0)


def test_incompatible_pins_allowed():
    p = ClothParams(grid_w=6, grid_h=6)
    mesh = build_cloth(p, [(0, (0, 0, 0)), (5, (0, 0, 0))])
    assert mesh.pinned == (0, 5)


@pytest.mark.parametrize("kw, msg", [
    (dict(grid_w=2), "grid too small"),
    (dict(shear_stiffness=0.0), "stiffness"),
    (dict(edge_band_m=0.2), "band invariant"),
    (dict(damping=1.0), "damping"),
])
def test_param_invariants(kw, msg):
    with pytest.raises(ClothParamError, match=msg):
        ClothParams(**kw)


def test_bad_pin_index():
    with pytest.raises(ClothParamError):
        build_cloth(ClothParams(grid_w=4, grid_h=4), [(16, (0, 0, 0))])


def test_zero_gravity_is_fixed_point():
    p = ClothParams(grid_w=8, grid_h=8)
    mesh = build_cloth(p, [(0, (0, 0, 0))])
    out = settle(mesh, gravity=0.0, max_steps=200)
    np.testing.assert_array_equal(out.positions, mesh.positions)


def test_hanging_corner_below_pin_and_low_strain():
    p = ClothParams(grid_w=12, grid_h=12)
    mesh = settle(build_cloth(p, [(0, (0, 0, 0))]))
    free = np.ones(p.n_nodes, bool)
    free[0] = False
    assert np.all(mesh.positions[free, 2] < 0.0)
    assert max_structural_strain(mesh) <= 0.10
    np.testing.assert_array_equal(mesh.positions[0], [0, 0, 0])


def test_top_edge_pins_give_mirror_symmetry():
    p = ClothParams(grid_w=11, grid_h=11)
    a, b = node(p, 0, 0), node(p, 10, 0)
    rest = build_cloth(p, [(a, (0, 0, 0))])
    mesh = settle(build_cloth(p, [(a, (0, 0, 0)), (b, tuple(rest.positions[b]))]))
    x_mid = 0.5 * (mesh.positions[a, 0] + mesh.positions[b, 0])
    for j in range(p.grid_h):
        for i in range(p.grid_w):
            left = mesh.positions[node(p, i, j)]
            right = mesh.positions[node(p, p.grid_w - 1 - i, j)]
            assert abs((left[0] - x_mid) + (right[0] - x_mid)) < 1e-3
            assert abs(left[1] - right[1]) < 1e-3
            assert abs(left[2] - right[2]) < 1e-3


def test_classify_examples():
    p = ClothParams()
    mesh = build_cloth(p, [(0, (0, 0, 0))])
    c = p.grid_w // 2
    assert classify_node(mesh, node(p, 0, 0)) == NodeClass.CORNER
    assert classify_node(mesh, node(p, c, 0)) == NodeClass.EDGE
    assert classify_node(mesh, node(p, c, p.grid_h // 2)) == NodeClass.INTERIOR


def test_corner_clusters(params):
    mesh = build_cloth(params, [(0, (0, 0, 0))])
    grid = (mesh.node_class == NodeClass.CORNER).reshape(params.grid_h, params.grid_w)
    _, n = label(grid)
    assert n == 4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_classification_ignores_deformation(seed):
    p = ClothParams(grid_w=9, grid_h=7)
    mesh = build_cloth(p, [(0, (0, 0, 0))])
    bent = ClothMesh(p, np.random.default_rng(seed).normal(size=mesh.positions.shape), mesh.undeformed, mesh.pinned)
    assert [classify_node(bent, i) for i in range(p.n_nodes)] == [classify_node(mesh, i) for i in range(p.n_nodes)]


def test_corner_implies_edge_band(params):
    mesh = build_cloth(params, [(0, (0, 0, 0))])
    uv = mesh.undeformed
    d = np.minimum.reduce([uv[:, 0], params.width_m - uv[:, 0], uv[:, 1], params.height_m - uv[:, 1]])
    corner = mesh.node_class == NodeClass.CORNER
    assert np.all(d[corner] <= params.edge_band_m + 1e-12)


def test_energy_non_increasing():
    p = ClothParams(grid_w=10, grid_h=10)
    mesh = build_cloth(p, [(0, (0, 0, 0))])
    energies = [mechanical_energy(mesh)]
    for _ in range(30):
        mesh = settle(mesh, max_steps=100, ke_eps=0.0)
        energies.append(mechanical_energy(mesh))
    assert np.all(np.diff(energies) <= 1e-9)


def test_pins_never_move(hanging):
    np.testing.assert_array_equal(hanging.positions[hanging.pinned[0]], [0, 0, 0])


def test_configuration_rotation(params):
    base = make_configuration(params, 5, 0.0)
    turned = make_configuration(params, 5, 15.0)
    pin = base.positions[base.pinned[0]]
    a = np.deg2rad(15.0)
    rot = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    np.testing.assert_allclose(turned.positions, (base.positions - pin) @ rot.T + pin, atol=1e-12)
    np.testing.assert_array_equal(make_configuration(params, 5, 360.0).positions, base.positions)


def test_configuration_rejects_off_increment(params):
    with pytest.raises(ValueError):
        make_configuration(params, 5, 10.0)


def test_mesh_json_roundtrip(hanging):
    back = ClothMesh.from_json(hanging.to_json())
    np.testing.assert_array_equal(back.positions, hanging.positions)
    np.testing.assert_array_equal(back.undeformed, hanging.undeformed)
    assert back.pinned == hanging.pinned
