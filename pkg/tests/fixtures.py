"""Analytic fields and meshes shared by the extraction, metric and acceptance tests."""

import numpy as np
from scipy.spatial import cKDTree

from convocc.encoder import EncoderConfig
from convocc.geometry import TriangleMesh
from convocc.model import ConvOccNet, ModelConfig


def sphere_field(p, c=(0.5, 0.5, 0.5), r=0.3):
    d = np.linalg.norm(np.asarray(p) - np.asarray(c), axis=-1)
    return 1 / (1 + np.exp((d - r) / 0.03))


def two_box_field(p):
    p = np.asarray(p)

    def box(c, h):
        q = np.abs(p - np.asarray(c)) - np.asarray(h)
        return np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(axis=-1), 0)

    sd = np.minimum(box((0.3, 0.35, 0.4), (0.15, 0.1, 0.2)), box((0.7, 0.65, 0.55), (0.12, 0.2, 0.1)))
    return 1 / (1 + np.exp(sd / 0.02))


def grid_values(fn, n):
    x = np.linspace(0, 1, n)
    g = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1)
    return fn(g.reshape(-1, 3)).reshape(n, n, n)


def hausdorff(a, b):
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return np.inf
    return max(cKDTree(b).query(a)[0].max(), cKDTree(a).query(b)[0].max())


def square(normal_axis=2, offset=0.5, shift=(0.0, 0.0, 0.0)):
    """Unit square perpendicular to ``normal_axis`` at ``offset``, two triangles."""
    a, b = [i for i in range(3) if i != normal_axis]
    v = np.zeros((4, 3))
    v[:, normal_axis] = offset
    v[:, [a, b]] = [[0, 0], [1, 0], [1, 1], [0, 1]]
    return TriangleMesh(v + np.asarray(shift), [[0, 1, 2], [0, 2, 3]])


def cube_mesh(lo, hi):
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    v = lo + corners * (hi - lo)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return TriangleMesh(v, tris)


def volume_model(res=16, depth=1, seed=0):
    cfg = ModelConfig(encoder=EncoderConfig(mode="volume", volume_resolution=res, feature_dim=4,
                                            point_net_blocks=1),
                      volume_depth=depth, unet_base_channels=2, head_hidden=8, head_blocks=1, seed=seed)
    m = ConvOccNet(cfg)
    m.head.out.weight.data[...] = np.random.default_rng(seed + 1).normal(size=m.head.out.weight.shape)
    return m


def two_object_cloud(seed=0, n=3000):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n // 2, 3))
    a = 0.25 * a / np.linalg.norm(a, axis=1, keepdims=True) + (0.5, 0.5, 0.5)
    b = rng.uniform(-0.2, 0.2, size=(n - n // 2, 3)) + (1.5, 0.5, 0.5)
    return np.concatenate([a, b])


def overfit_sphere(out_dir, steps=400, radius=0.3):
    """Train a small three-plane model on one sphere; returns (checkpoint path, cloud path)."""
    from pathlib import Path

    from convocc.data import Item
    from convocc.geometry import occupancy_query, sample_surface, sphere_scene, write_point_cloud
    from convocc.training import CKPT_FILE, TrainConfig, train_loop

    out = Path(out_dir)
    scene = sphere_scene(radius)
    pts = sample_surface(scene, 3000, 0.0, seed=0).points
    q = np.random.default_rng(1).uniform(size=(20_000, 3))
    item = Item(scene, pts, q, occupancy_query(scene, q))
    mc = ModelConfig(encoder=EncoderConfig(plane_resolution=16, feature_dim=16, point_net_blocks=2),
                     head_hidden=16, head_blocks=2, unet_base_channels=8)
    tc = TrainConfig(batch_size=1, queries_per_item=2048, max_steps=steps, eval_every=steps, lr=1e-3,
                     val_queries=5000)
    train_loop(mc, [item], [item], tc, out_dir=out)
    cloud = out / "sphere.bin"
    write_point_cloud(cloud, pts)
    return out / CKPT_FILE, cloud
