import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convocc.encoder import (
    MODES,
    EncoderConfig,
    FeatureGrid,
    Lattice,
    PointNet,
    VoxelEncoder,
    cell_indices,
    coordinate_features,
    global_encode,
    pointnet_encode,
    project_and_pool,
    voxel_centers,
    voxel_encode,
)
from convocc.grad import Tensor

from oracles import conv_loops, scatter_mean_dict


def small_net(mode="three_planes", res=8, d=5, blocks=2, seed=0):
    cfg = EncoderConfig(mode=mode, plane_resolution=res, volume_resolution=res, feature_dim=d,
                        point_net_blocks=blocks)
    in_dim = 3 if mode == "global_baseline" else 6
    return cfg, PointNet(cfg, in_dim, np.random.default_rng(seed)), Lattice.from_config(cfg)


def test_layouts_per_mode():
    dims = {m: [len(Lattice.from_config(EncoderConfig(m)).spatial(lay)) for lay in EncoderConfig(m).layouts]
            for m in MODES}
    assert dims == {"single_plane": [2], "three_planes": [2, 2, 2], "volume": [3],
                    "hybrid": [2, 2, 2, 3], "global_baseline": []}


def test_config_validation():
    with pytest.raises(ValueError, match="valid modes"):
        EncoderConfig(mode="octree").validate()
    with pytest.raises(ValueError):
        EncoderConfig(plane_resolution=1).validate()
    assert EncoderConfig().feature_dim == 32


def test_feature_grid_rejects_wrong_rank():
    with pytest.raises(ValueError):
        FeatureGrid("volume", Tensor(np.zeros((1, 4, 4, 3))))
    g = FeatureGrid("plane_xz", Tensor(np.zeros((1, 4, 6, 3))))
    assert g.resolution == (4, 6) and g.channels == 3


def test_clamp_rule_upper_boundary():
    p = np.array([[0.9999999, 0.2, 1.0]])
    assert cell_indices(p, "plane_xy", (8, 8))[0] == 7 * 8 + 1
    assert cell_indices(p, "plane_xz", (8, 8))[0] == 7 * 8 + 7
    assert cell_indices(np.array([[-0.3, 0.0, 0.0]]), "volume", (4, 4, 4))[0] == 0


def test_periodic_coordinates_repeat_every_cell():
    lat = Lattice(("plane_xy",), (8, 8, 8))
    p = np.random.default_rng(0).uniform(0.2, 0.6, (10, 3))
    np.testing.assert_allclose(coordinate_features(p, lat), coordinate_features(p + 2 / 8, lat), atol=1e-12)
    assert coordinate_features(p, Lattice(())).shape == (10, 3)


def test_permutation_equivariance_of_point_path():
    _, net, lat = small_net()
    pts = np.random.default_rng(1).uniform(size=(40, 3))
    perm = np.random.default_rng(2).permutation(40)
    a = pointnet_encode(net, pts, lat).data[0]
    b = pointnet_encode(net, pts[perm], lat).data[0]
    np.testing.assert_allclose(b, a[perm], atol=1e-12)
    ga = project_and_pool(Tensor(a[None]), pts, "plane_xy", (8, 8)).data.data
    gb = project_and_pool(Tensor(b[None]), pts[perm], "plane_xy", (8, 8)).data.data
    np.testing.assert_allclose(ga, gb, atol=1e-12)


def test_single_point_pool_is_its_own_feature():
    cfg, net, lat = small_net(blocks=1)
    p = np.array([[[0.3, 0.7, 0.1]]])
    out = pointnet_encode(net, p, lat).data[0, 0]
    # hand trace: every layout's pool over one point returns that point's activation
    coords = coordinate_features(p, lat)[0, 0]
    h = net.lift.weight.data @ coords + net.lift.bias.data
    a = np.maximum(net.blocks[0].weight.data @ h + net.blocks[0].bias.data, 0)
    expect = net.merges[0].weight.data @ np.concatenate([a, 3 * a]) + net.merges[0].bias.data
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_two_points_in_one_cell_share_pooled_component():
    cfg, net, lat = small_net(mode="single_plane", blocks=1)
    p = np.array([[[0.51, 0.52, 0.1], [0.55, 0.58, 0.9]]])  # same xy cell at R=8
    out = pointnet_encode(net, p, lat).data[0]
    coords = coordinate_features(p, lat)[0]
    h = coords @ net.lift.weight.data.T + net.lift.bias.data
    a = np.maximum(h @ net.blocks[0].weight.data.T + net.blocks[0].bias.data, 0)
    pooled = a.mean(axis=0)
    w = net.merges[0].weight.data
    d = cfg.feature_dim
    # difference depends only on each point's own activation
    np.testing.assert_allclose(out[0] - out[1], w[:, :d] @ (a[0] - a[1]), atol=1e-12)
    np.testing.assert_allclose(out[0], w[:, :d] @ a[0] + w[:, d:] @ pooled + net.merges[0].bias.data, atol=1e-12)


def test_empty_cloud_rejected():
    _, net, lat = small_net()
    with pytest.raises(ValueError):
        pointnet_encode(net, np.zeros((0, 3)), lat)


def test_voxel_encoder_zero_grid_gives_bias():
    cfg = EncoderConfig(feature_dim=4)
    enc = VoxelEncoder(cfg, np.random.default_rng(0))
    out = voxel_encode(enc, np.zeros((4, 4, 4))).data
    np.testing.assert_allclose(out, np.broadcast_to(enc.conv.bias.data, out.shape), atol=0)


def test_voxel_encoder_identity_kernel():
    cfg = EncoderConfig(feature_dim=3)
    enc = VoxelEncoder(cfg, np.random.default_rng(0))
    enc.conv.weight.data[...] = 0
    enc.conv.weight.data[:, 0, 1, 1, 1] = [1.0, 2.0, -0.5]
    enc.conv.bias.data[...] = 0
    occ = (np.random.default_rng(1).uniform(size=(5, 5, 5)) > 0.5).astype(float)
    out = voxel_encode(enc, occ).data[0]
    np.testing.assert_allclose(out, occ[..., None] * np.array([1.0, 2.0, -0.5]), atol=0)


def test_voxel_encoder_matches_loop_conv():
    cfg = EncoderConfig(feature_dim=3)
    enc = VoxelEncoder(cfg, np.random.default_rng(4))
    occ = (np.random.default_rng(5).uniform(size=(5, 5, 5)) > 0.6).astype(float)
    out = voxel_encode(enc, occ, resolution=5).data[0]
    ref = conv_loops(occ[None], enc.conv.weight.data, enc.conv.bias.data, pad=1)
    np.testing.assert_allclose(np.moveaxis(out, -1, 0), ref, atol=1e-12)
    with pytest.raises(ValueError):
        voxel_encode(enc, occ, resolution=8)


def test_voxel_centres():
    c = voxel_centers(2)
    assert c.shape == (8, 3) and c.min() == 0.25 and c.max() == 0.75


def test_identical_features_in_one_pixel():
    f = np.tile(np.array([1.5, -2.0]), (3, 1))
    pos = np.array([[0.1, 0.1, 0.2], [0.12, 0.11, 0.9], [0.13, 0.05, 0.5]])
    g = project_and_pool(Tensor(f[None]), pos, "plane_xy", (4, 4)).data.data[0]
    np.testing.assert_array_equal(g[0, 0], [1.5, -2.0])
    assert np.count_nonzero(g) == 2


@pytest.mark.parametrize("layout,spatial", [("plane_xy", (16, 16)), ("plane_yz", (8, 8)), ("volume", (8, 8, 8))])
def test_project_and_pool_vs_scatter_oracle(layout, spatial):
    rng = np.random.default_rng(7)
    pos = rng.uniform(size=(5000, 3))
    f = rng.normal(size=(5000, 4))
    got = project_and_pool(Tensor(f[None]), pos, layout, spatial).data.data[0].reshape(-1, 4)
    axes = {"plane_xy": [0, 1], "plane_yz": [1, 2], "volume": [0, 1, 2]}[layout]
    idx = np.minimum((pos[:, axes] * spatial).astype(int), np.array(spatial) - 1)
    flat = np.ravel_multi_index(idx.T, spatial)
    np.testing.assert_allclose(got, scatter_mean_dict(flat, f, int(np.prod(spatial))), atol=1e-12)


def test_global_encode_single_and_duplicated():
    _, net, lat = small_net(mode="global_baseline")
    pts = np.random.default_rng(3).uniform(size=(1, 30, 3))
    f = pointnet_encode(net, pts, lat)
    code = global_encode(f).data[0]
    np.testing.assert_array_equal(code, f.data[0].max(axis=0))
    dup = global_encode(pointnet_encode(net, np.concatenate([pts, pts], axis=1), lat)).data[0]
    np.testing.assert_allclose(dup, code, atol=1e-12)
    one = global_encode(Tensor(f.data[:, :1])).data[0]
    np.testing.assert_array_equal(one, f.data[0, 0])


def test_global_encode_matches_direct_max():
    f = np.random.default_rng(9).normal(size=(2, 50, 6))
    ref = np.array([[max(f[b, n, c] for n in range(50)) for c in range(6)] for b in range(2)])
    np.testing.assert_array_equal(global_encode(Tensor(f)).data, ref)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_pool_permutation_invariance_property(n, seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(size=(n, 3))
    f = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    a = project_and_pool(Tensor(f[None]), pos, "plane_xz", (4, 4)).data.data
    b = project_and_pool(Tensor(f[perm][None]), pos[perm], "plane_xz", (4, 4)).data.data
    np.testing.assert_allclose(a, b, atol=1e-12)
    # every occupied cell holds a convex combination of its points' features
    assert a.max() <= max(f.max(), 0.0) + 1e-12 and a.min() >= min(f.min(), 0.0) - 1e-12
