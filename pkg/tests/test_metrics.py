import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convocc.geometry import Primitive, SceneSpec, TriangleMesh, box_scene, random_rotation, sphere_scene
from convocc.metrics import (
    EvalReport,
    chamfer_l1,
    evaluate,
    f_score,
    f_score_from,
    match_surfaces,
    mesh_contains,
    nearest,
    nearest_brute,
    normal_consistency,
    volumetric_iou,
)

from fixtures import cube_mesh, square
from oracles import brute_nn_dist


def moved(mesh, rot, t):
    return TriangleMesh(mesh.vertices @ rot.T + t, mesh.triangles)


def test_iou_identical_disjoint_and_half_overlap():
    a = box_scene([0.1, 0.1, 0.1], [0.5, 0.5, 0.5])
    assert volumetric_iou(a, a, 10_000) == 1.0
    assert volumetric_iou(a, box_scene([0.6, 0.6, 0.6], [0.9, 0.9, 0.9]), 10_000) == 0.0
    n = 1_000_000
    b = box_scene([0.3, 0.1, 0.1], [0.7, 0.5, 0.5])  # shares half of a's volume
    iou = volumetric_iou(a, b, n, seed=2)
    # inter ~ Bin(n, 0.032), union ~ Bin(n, 0.096); delta-method sigma of the ratio
    p_i, p_u = 0.032, 0.096
    sigma = math.sqrt(p_i * (1 - p_i / p_u) / n) / p_u
    assert abs(iou - 1 / 3) < 3 * sigma


def test_iou_both_empty_is_one():
    assert volumetric_iou(SceneSpec([]), SceneSpec([]), 100) == 1.0


def test_mesh_contains_matches_box():
    mesh = cube_mesh([0.2, 0.3, 0.1], [0.7, 0.6, 0.9])
    pts = np.random.default_rng(0).uniform(size=(5000, 3))
    inside = np.all((pts > [0.2, 0.3, 0.1]) & (pts < [0.7, 0.6, 0.9]), axis=1)
    np.testing.assert_array_equal(mesh_contains(mesh, pts), inside)
    assert volumetric_iou(mesh, box_scene([0.2, 0.3, 0.1], [0.7, 0.6, 0.9]), 20_000) == 1.0


def test_chamfer_self_floor():
    s = sphere_scene(0.3)
    assert chamfer_l1(s, s, 100_000, seed=0) < 1e-3


def test_chamfer_parallel_planes():
    t = 0.1
    cd = chamfer_l1(square(2, 0.4), square(2, 0.4 + t), 100_000)
    assert cd == pytest.approx(t, rel=0.01)


def test_chamfer_translated_plane_vs_brute_oracle():
    d = 0.05
    a, b = square(0, 0.4), square(0, 0.4, shift=(d, 0, 0))
    cd = chamfer_l1(a, b, 1000, seed=3)
    m = match_surfaces(a, b, 1000, seed=3)
    pa, _ = a.sample(1000, np.random.default_rng([3, 0]))
    pb, _ = b.sample(1000, np.random.default_rng([3, 0]))
    oracle = 0.5 * (brute_nn_dist(pa, pb)[0].mean() + brute_nn_dist(pb, pa)[0].mean())
    assert abs(cd - oracle) < 1e-12 and np.allclose(m.pred_to_truth, brute_nn_dist(pa, pb)[0], atol=1e-12)
    assert abs(chamfer_l1(a, b, 100_000) - d) < 0.05 * d


def test_nearest_matches_brute_force():
    rng = np.random.default_rng(4)
    q, r = rng.uniform(size=(1000, 3)), rng.uniform(size=(1000, 3))
    d1, i1 = nearest(q, r)
    d2, i2 = nearest_brute(q, r)
    d3, i3 = brute_nn_dist(q, r)
    assert np.abs(d1 - d2).max() < 1e-12 and np.abs(d1 - d3).max() < 1e-12
    np.testing.assert_array_equal(i1, i3)
    np.testing.assert_array_equal(nearest(q, r, workers=2)[0], d1)


def test_normal_consistency_fixtures():
    s = sphere_scene(0.3)
    assert normal_consistency(s, s, 20_000) >= 0.99
    sq = square(2, 0.5)
    assert normal_consistency(sq, sq, 20_000) >= 0.99
    # rotated 90 degrees about the in-plane x axis through the centre
    assert normal_consistency(sq, square(1, 0.5), 20_000) == pytest.approx(0.0, abs=1e-12)


def test_f_score_fixtures():
    sq = square(2, 0.5)
    assert f_score(sq, sq, 0.01, 20_000) == 1.0
    far = square(2, 0.5 + 0.3)
    assert f_score(sq, far, math.inf, 2_000) == 1.0
    assert f_score(sq, square(2, 0.52), 0.01, 100_000) == 0.0
    assert f_score(sq, square(2, 0.505), 0.01, 100_000) == 1.0
    with pytest.raises(ValueError):
        f_score(sq, sq, 0.0)


def test_f_score_swapping_swaps_precision_recall():
    a = cube_mesh([0.2, 0.2, 0.2], [0.6, 0.6, 0.6])
    b = cube_mesh([0.22, 0.2, 0.2], [0.6, 0.7, 0.6])
    ab = match_surfaces(a, b, 5000, 1)
    ba = match_surfaces(b, a, 5000, 1)
    f1, p1, r1 = f_score_from(ab, 0.02)
    f2, p2, r2 = f_score_from(ba, 0.02)
    assert p1 != r1
    assert (p1, r1, f1) == (r2, p2, f2)


def test_chamfer_symmetric():
    a = cube_mesh([0.2, 0.2, 0.2], [0.6, 0.6, 0.6])
    b = sphere_scene(0.25)
    assert chamfer_l1(a, b, 50_000) == pytest.approx(chamfer_l1(b, a, 50_000), rel=0.01)


def test_empty_mesh_flags():
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))
    assert chamfer_l1(empty, square()) == math.inf
    rep = evaluate(empty, sphere_scene(0.3), n_points=100, n_iou_samples=100)
    assert rep.flags == ["empty mesh"] and rep.f_score == 0.0
    assert json.loads(rep.to_json())["chamfer_l1"] == "inf"


def test_evaluate_self_and_determinism():
    mesh = cube_mesh([0.25, 0.2, 0.3], [0.75, 0.7, 0.6])
    truth = box_scene([0.25, 0.2, 0.3], [0.75, 0.7, 0.6])
    a = evaluate(mesh, truth, n_points=20_000, n_iou_samples=20_000, seed=7)
    b = evaluate(mesh, truth, n_points=20_000, n_iou_samples=20_000, seed=7)
    assert a == b
    assert a.iou == 1.0 and a.f_score > 0.99 and a.normal_consistency > 0.98
    same = evaluate(mesh, mesh, n_points=20_000, n_iou_samples=20_000, seed=7)
    assert (same.iou, same.chamfer_l1, same.f_score, same.normal_consistency) == (1.0, 0.0, 1.0, 1.0)
    c = evaluate(mesh, truth, fscore_threshold=0.015, n_points=20_000, n_iou_samples=20_000, seed=7)
    assert (c.iou, c.chamfer_l1, c.normal_consistency) == (a.iou, a.chamfer_l1, a.normal_consistency)
    lines = a.table().splitlines()
    assert lines[0].split() == ["IoU", "Chamfer-L1", "Normal", "C.", "F-Score"]


def test_single_surface_slab():
    ground = Primitive("box", np.eye(3), [0.5, 0.5, 0.05], [0.5, 0.5, 0.02], role="ground")
    scene = SceneSpec([], ground)
    top = square(2, 0.07)
    both = chamfer_l1(top, scene, 20_000)
    single = chamfer_l1(top, scene, 20_000, single_surface=True)
    assert single < 1e-2 < both


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_motion_invariance(seed):
    rng = np.random.default_rng(seed)
    a = cube_mesh([0.2, 0.2, 0.2], [0.6, 0.5, 0.7])
    b = cube_mesh([0.25, 0.2, 0.22], [0.6, 0.55, 0.7])
    rot, t = random_rotation(rng), rng.uniform(-1, 1, 3)
    ma, mb = match_surfaces(a, b, 20_000, 0), match_surfaces(moved(a, rot, t), moved(b, rot, t), 20_000, 0)
    cd = lambda m: 0.5 * (m.pred_to_truth.mean() + m.truth_to_pred.mean())
    nc = lambda m: 0.5 * (m.normal_pred.mean() + m.normal_truth.mean())
    assert cd(mb) == pytest.approx(cd(ma), rel=0.01)
    assert nc(mb) == pytest.approx(nc(ma), rel=0.01)
    assert f_score_from(mb, 0.02)[0] == pytest.approx(f_score_from(ma, 0.02)[0], abs=0.01)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metric_ranges(seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(0.1, 0.4, 3)
    a = cube_mesh(lo, lo + rng.uniform(0.1, 0.5, 3))
    rep = evaluate(a, sphere_scene(rng.uniform(0.1, 0.4)), n_points=2000, n_iou_samples=2000, seed=seed)
    assert 0 <= rep.iou <= 1 and 0 <= rep.normal_consistency <= 1 and 0 <= rep.f_score <= 1
    assert rep.chamfer_l1 >= 0
    assert isinstance(rep, EvalReport)
