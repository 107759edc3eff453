import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convocc import grad as G
from convocc.encoder import EncoderConfig, FeatureGrid
from convocc.grad import GradError, Tensor, gradcheck
from convocc.model import ConvOccNet, ModelConfig
from convocc.occ_decoder import (
    OccHeadConfig,
    OccupancyHead,
    grid_coords,
    occupancy_forward,
    predict_batch,
    query_feature,
)

from oracles import bilinear_formula, trilinear_formula


def grid(layout, shape, rng):
    return FeatureGrid(layout, Tensor(rng.normal(size=(1,) + shape)))


def test_grid_coords_cell_centres():
    c = (np.arange(8) + 0.5) / 8
    np.testing.assert_allclose(grid_coords(c[:, None], (8,))[:, 0], np.arange(8) / 7, atol=1e-15)
    assert grid_coords(np.array([[0.0], [1.0]]), (8,)).ravel().tolist() == [0.0, 1.0]


def test_query_above_node_returns_node_feature():
    g = grid("plane_xy", (8, 8, 3), np.random.default_rng(0))
    p = np.array([[(2 + 0.5) / 8, (5 + 0.5) / 8, 0.77]])
    for mode in ("bilinear", "nearest"):
        np.testing.assert_allclose(query_feature([g], p, mode).data[0, 0], g.data.data[0, 2, 5], atol=1e-14)


def test_three_constant_planes_sum():
    c = np.array([0.3, -1.2])
    grids = [FeatureGrid(lay, Tensor(np.broadcast_to(c, (1, 4, 4, 2)).copy()))
             for lay in ("plane_xy", "plane_xz", "plane_yz")]
    p = np.random.default_rng(1).uniform(size=(50, 3))
    np.testing.assert_allclose(query_feature(grids, p).data[0], np.broadcast_to(3 * c, (50, 2)), atol=1e-14)


def test_random_grids_match_formula_oracle():
    rng = np.random.default_rng(2)
    gs = [grid("plane_xy", (8, 8, 4), rng), grid("plane_xz", (8, 8, 4), rng),
          grid("plane_yz", (8, 8, 4), rng), grid("volume", (4, 4, 4, 4), rng)]
    axes = {"plane_xy": (0, 1), "plane_xz": (0, 2), "plane_yz": (1, 2), "volume": (0, 1, 2)}
    p = rng.uniform(-0.05, 1.05, size=(500, 3))
    got = query_feature(gs, p).data[0]
    for q, row in zip(p, got):
        acc = np.zeros(4)
        for g in gs:
            r = g.resolution[0]
            u = [min(max((min(max(q[a], 0), 1) * r - 0.5) / (r - 1), 0), 1) for a in axes[g.layout]]
            arr = g.data.data[0]
            acc += bilinear_formula(arr, *u) if len(u) == 2 else trilinear_formula(arr, u)
        np.testing.assert_allclose(row, acc, atol=1e-12)


def test_nearest_is_piecewise_constant():
    g = grid("plane_xy", (8, 8, 3), np.random.default_rng(3))
    # both inside the nearest-region of cell (3, 4)
    p = np.array([[3.3 / 8, 4.6 / 8, 0.1], [3.7 / 8, 4.4 / 8, 0.9]])
    psi = query_feature([g], p, "nearest").data[0]
    np.testing.assert_array_equal(psi[0], psi[1])
    assert not np.allclose(*query_feature([g], p, "bilinear").data[0])


def test_query_feature_errors():
    with pytest.raises(ValueError):
        query_feature([], np.zeros((1, 3)))
    g = grid("plane_xy", (4, 4, 2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        query_feature([g], np.zeros((1, 3)), "cubic")
    with pytest.raises(ValueError):
        query_feature([g, grid("plane_xz", (4, 4, 3), np.random.default_rng(0))], np.zeros((1, 3)))


def head(seed=0, zero=True):
    h = OccupancyHead(OccHeadConfig(hidden_dim=8, resnet_blocks=2, coord_dim=6, feature_dim=4),
                      np.random.default_rng(seed))
    if not zero:
        rng = np.random.default_rng(seed + 1)
        h.out.weight.data[...] = rng.normal(size=h.out.weight.shape)
        h.out.bias.data[...] = 0.1
    return h


def test_zero_final_layer_gives_one_half():
    rng = np.random.default_rng(0)
    p = occupancy_forward(head(), Tensor(rng.normal(size=(2, 7, 6))), Tensor(rng.normal(size=(2, 7, 4)))).data
    assert np.all(p == 0.5)


def test_probabilities_inside_open_interval():
    rng = np.random.default_rng(1)
    p = occupancy_forward(head(zero=False), Tensor(rng.normal(size=(1, 200, 6))),
                          Tensor(rng.normal(size=(1, 200, 4)))).data
    assert np.all((p > 0) & (p < 1))


def test_gradient_wrt_psi_matches_finite_differences():
    rng = np.random.default_rng(2)
    h = head(zero=False)
    coords = Tensor(rng.normal(size=(1, 4, 6)))
    psi = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
    res = gradcheck(lambda: G.total(occupancy_forward(h, coords, psi)), [psi], h=1e-4)
    assert res.worst < 1e-4


def test_nonfinite_psi_rejected():
    psi = np.zeros((1, 2, 4))
    psi[0, 1, 2] = np.nan
    with pytest.raises(GradError):
        head().logits(Tensor(np.zeros((1, 2, 6))), Tensor(psi))


def tiny_model(mode="three_planes", **kw):
    cfg = ModelConfig(encoder=EncoderConfig(mode=mode, plane_resolution=8, volume_resolution=8,
                                            feature_dim=4, point_net_blocks=1),
                      unet_base_channels=2, head_hidden=8, head_blocks=2, **kw)
    m = ConvOccNet(cfg)
    rng = np.random.default_rng(11)
    m.head.out.weight.data[...] = rng.normal(size=m.head.out.weight.shape)
    return m


def test_global_baseline_psi_is_query_independent():
    m = tiny_model("global_baseline")
    pts = np.random.default_rng(0).uniform(size=(100, 3))
    enc = m.encode(pts)
    assert enc.grids == [] and enc.code.shape == (1, 4)


@pytest.mark.parametrize("mode", ["single_plane", "three_planes", "volume", "hybrid", "global_baseline"])
def test_predict_deterministic_and_batch_consistent(mode):
    m = tiny_model(mode)
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(60, 3))
    q = rng.uniform(size=(12, 3))
    a = predict_batch(m, x, q)
    np.testing.assert_array_equal(a, predict_batch(m, x, q))
    single = np.array([predict_batch(m, x, q[i:i + 1])[0] for i in range(len(q))])
    np.testing.assert_allclose(a, single, atol=1e-12)
    np.testing.assert_allclose(a, predict_batch(m, x, q, chunk=5), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bilinear_partition_of_unity_property(seed):
    # constant grids interpolate to the constant anywhere, inside or outside the cube
    rng = np.random.default_rng(seed)
    c = rng.normal(size=3)
    g = FeatureGrid("volume", Tensor(np.broadcast_to(c, (1, 4, 4, 4, 3)).copy()))
    p = rng.uniform(-0.5, 1.5, size=(20, 3))
    np.testing.assert_allclose(query_feature([g], p).data[0], np.broadcast_to(c, (20, 3)), atol=1e-12)
