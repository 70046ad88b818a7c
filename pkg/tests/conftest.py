"""Shared synthetic data generators and independent oracles."""

import numpy as np
import pytest

from voxelcodec import PointCloud, RigidTransform, nn


def random_cloud(n, seed, lo=0.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.random((n, 3)) * (hi - lo) + lo)


def structured_cloud(n, seed, scale=1.0):
    """Axis-aligned planes plus sphere shells: highly structured, learnable geometry."""
    rng = np.random.default_rng(seed)
    parts = []
    n_plane = n // 2
    for axis, level in ((0, 0.2), (1, 0.55), (2, 0.8)):
        pts = rng.random((n_plane // 3, 3))
        pts[:, axis] = level + rng.normal(0, 0.004, len(pts))
        parts.append(pts)
    n_sphere = n - sum(len(p) for p in parts)
    for center, radius, m in (((0.35, 0.4, 0.5), 0.18, n_sphere // 2),
                              ((0.7, 0.65, 0.35), 0.12, n_sphere - n_sphere // 2)):
        u = rng.normal(size=(m, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        parts.append(np.asarray(center) + radius * u)
    pts = np.clip(np.concatenate(parts), 0.0, 1.0) * scale
    return PointCloud(pts)


def planar_cloud(n, seed, z=0.37, jitter=0.0):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 3))
    pts[:, 2] = z + (rng.normal(0, jitter, n) if jitter else 0.0)
    return PointCloud(np.clip(pts, 0.0, 1.0))


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def moving_sequence(n_frames, n_points, seed, step=0.05):
    """Rigidly drifting copies of one cloud, each carrying the aligning pose."""
    base = structured_cloud(n_points, seed).points
    frames = []
    for t in range(n_frames):
        shift = np.array([step * t, -0.3 * step * t, 0.0])
        moved = base + shift
        pose = RigidTransform(np.eye(3), -shift)   # maps the frame back onto base
        frames.append(PointCloud(moved, pose=pose))
    return frames


# --- independent oracles ----------------------------------------------------


def brute_force_nn(query, reference):
    d2 = ((reference - query) ** 2).sum(axis=1)
    idx = int(np.argmin(d2))
    return idx, float(d2[idx])


def brute_force_chamfer(a, b):
    d_ab = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(d_ab.min(axis=1).mean() + d_ab.min(axis=0).mean())


def voxelize_directly(points, depth):
    """Dense occupancy straight from the points, bypassing the octree."""
    n = 1 << depth
    idx = np.clip(np.floor(np.asarray(points) * n).astype(np.int64), 0, n - 1)
    grid = np.zeros((n, n, n), dtype=np.uint8)
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return grid


# --- finite-difference gradient harness -------------------------------------


def _relu_masks(cache, layers):
    return [c for layer, c in zip(layers, cache) if isinstance(layer, nn.ReLU)]


def fd_check_params(params64, loss_fn, grads, rng, checks_per_tensor=12, eps=1e-4):
    """Central finite differences against analytic gradients on float64 params.

    loss_fn(params) must return (loss, relu_masks). Coordinates whose +/- eps
    evaluations flip a ReLU mask are skipped (the loss is not differentiable
    there); returns (worst relative error, checked, skipped).
    """
    flat_p = params64.parameter_arrays()
    flat_g = [t for group in grads for t in group]
    worst, checked, skipped = 0.0, 0, 0
    for t, gt in zip(flat_p, flat_g):
        n = min(checks_per_tensor, t.size)
        for _ in range(n):
            ij = tuple(rng.integers(0, s) for s in t.shape)
            orig = t[ij]
            t[ij] = orig + eps
            lp, masks_p = loss_fn(params64)
            t[ij] = orig - eps
            lm, masks_m = loss_fn(params64)
            t[ij] = orig
            if any(not np.array_equal(a, b) for a, b in zip(masks_p, masks_m)):
                skipped += 1
                continue
            fd = (lp - lm) / (2 * eps)
            an = gt[ij]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
            checked += 1
    return worst, checked, skipped


def to_float64(params):
    return nn.ModelParams(params.layers,
                          [[t.astype(np.float64) for t in g] for g in params.tensors],
                          params.seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
