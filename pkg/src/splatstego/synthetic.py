"""Procedural toy scenes: a textured stage (backdrop, floor, a few objects).

Every scene shares the same geometry; the ``texture_seed`` picks an
independent smooth colour field. Ground-truth views are rendered with the
RGB rasterizer from a dense cloud of flat surface splats.
"""
from __future__ import annotations

import numpy as np

from .camera import Camera
from .rasterizer import rasterize_rgb
from .scene import SH_C0, GaussianCloud, logit, rotmat_to_quat

STAGE_TARGET = np.array([0.0, 0.2, 0.0])


def _plane_points(origin, u, v, nu, nv, rng):
    a = (np.arange(nu) + 0.5 + rng.uniform(-0.3, 0.3, (nv, nu))) / nu
    b = (np.arange(nv)[:, None] + 0.5 + rng.uniform(-0.3, 0.3, (nv, nu))) / nv
    pts = origin + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v
    n = np.cross(u, v)
    n = n / np.linalg.norm(n)
    return pts, np.tile(n, (len(pts), 1))


def _sphere_points(center, radius, count):
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    theta = np.pi * (1 + 5**0.5) * i
    n = np.column_stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)])
    return center + radius * n, n


def _box_points(center, half, per_face, rng):
    pts, normals = [], []
    side = int(np.sqrt(per_face))
    for axis in range(3):
        for sign in (-1, 1):
            o = np.array(center, dtype=float)
            o[axis] += sign * half
            a, b = [k for k in range(3) if k != axis]
            u = np.zeros(3)
            u[a] = 2 * half
            v = np.zeros(3)
            v[b] = 2 * half
            p, n = _plane_points(o - u / 2 - v / 2, u, v, side, side, rng)
            nn = np.zeros(3)
            nn[axis] = sign
            pts.append(p)
            normals.append(np.tile(nn, (len(p), 1)))
    return np.concatenate(pts), np.concatenate(normals)


def stage_surface(spacing=0.15, seed=0):
    """Surface samples of the stage: (points, normals, part id, local spacing)."""
    rng = np.random.default_rng(seed)
    parts = []
    nu, nv = int(13 / spacing), int(4.5 / spacing)
    parts.append(_plane_points(np.array([-6.5, -1.0, 1.5]), np.array([13.0, 0, 0]),
                               np.array([0, 4.5, 0.0]), nu, nv, rng) + (spacing,))
    parts.append(_plane_points(np.array([-6.5, -1.0, -2.5]), np.array([13.0, 0, 0]),
                               np.array([0, 0, 4.0]), nu, int(4.0 / spacing), rng) + (spacing,))
    s2 = spacing * 0.6
    for c, r in (((-0.9, -0.35, 0.1), 0.65), ((0.35, -0.7, -0.9), 0.3)):
        count = int(4 * np.pi * r * r / s2**2)
        parts.append(_sphere_points(np.array(c), r, count) + (s2,))
    half = 0.45
    parts.append(_box_points((1.1, -0.55, 0.3), half, int((2 * half / s2) ** 2), rng) + (s2,))
    pts = np.concatenate([p[0] for p in parts])
    normals = np.concatenate([p[1] for p in parts])
    part = np.concatenate([np.full(len(p[0]), k) for k, p in enumerate(parts)])
    spacing_arr = np.concatenate([np.full(len(p[0]), p[2]) for p in parts])
    return pts, normals, part, spacing_arr


def texture(points, part, texture_seed):
    """Smooth procedural rgb in [0.05, 0.95] at surface points."""
    rng = np.random.default_rng(1000 + texture_seed)
    out = np.empty((len(points), 3))
    base = rng.uniform(-0.6, 0.6, (int(part.max()) + 1, 3))
    for ch in range(3):
        acc = base[part, ch].copy()
        for _ in range(5):
            k = rng.normal(0, 1.3, 3)
            acc += rng.uniform(0.3, 0.8) * np.sin(points @ k + rng.uniform(0, 2 * np.pi))
        out[:, ch] = 0.5 + 0.45 * np.tanh(acc)
    return out


def _frame_from_normals(normals):
    R = np.empty((len(normals), 3, 3))
    ref = np.where(np.abs(normals[:, 1:2]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(ref, normals)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    R[:, :, 0], R[:, :, 1], R[:, :, 2] = t1, t2, normals
    return R


def ground_truth_cloud(texture_seed, spacing=0.15, geometry_seed=0):
    """Opaque flat splats covering the stage, coloured by ``texture``."""
    pts, normals, part, sp = stage_surface(spacing, geometry_seed)
    rgb = texture(pts, part, texture_seed)
    quats = np.array([rotmat_to_quat(R) for R in _frame_from_normals(normals)])
    scales = np.column_stack([0.75 * sp, 0.75 * sp, 0.02 * sp])
    return GaussianCloud(
        means=pts,
        quats=quats,
        log_scales=np.log(scales),
        opacity_logits=np.full(len(pts), logit(0.98)),
        features=((rgb - 0.5) / SH_C0)[:, None, :],
        mode="sh",
        extent=5.0,
    )


def arc_cameras(n_views=16, size=64, seed=0, fov=50.0, distance=4.5, near=0.3):
    """Cameras on an arc in front of the stage, returned in seeded shuffled order.

    The near plane sits well clear of zero: flat splats passing beside the
    camera at tiny depth would otherwise blow up under the affine projection.
    """
    rng = np.random.default_rng(seed)
    az = np.radians(np.linspace(-35, 35, n_views))
    el = np.radians(rng.uniform(10, 22, n_views))
    dist = distance + rng.uniform(-0.4, 0.4, n_views)
    cams = []
    for a, e, d in zip(az, el, dist):
        eye = STAGE_TARGET + d * np.array([np.sin(a) * np.cos(e), np.sin(e), -np.cos(a) * np.cos(e)])
        cams.append(Camera.look_at(eye, STAGE_TARGET, [0.0, 1.0, 0.0], size, size, fov, near=near))
    order = rng.permutation(n_views)
    return [cams[i] for i in order]


def render_views(cloud, cameras):
    return [np.clip(rasterize_rgb(cloud, c)[0], 0.0, 1.0) for c in cameras]


def seed_points(gt_cloud, count=1500, extra=300, seed=0):
    """Sparse noisy surface samples plus uniform clutter, as (N, 6) xyz+rgb."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(gt_cloud), size=min(count, len(gt_cloud)), replace=False)
    pts = gt_cloud.means[idx] + rng.normal(0, 0.03, (len(idx), 3))
    rgb = np.clip(gt_cloud.features[idx, 0, :] * SH_C0 + 0.5, 0, 1)
    lo, hi = gt_cloud.means.min(0), gt_cloud.means.max(0)
    junk = rng.uniform(lo, hi, (extra, 3))
    junk_rgb = rng.uniform(0, 1, (extra, 3))
    return np.concatenate([np.column_stack([pts, rgb]), np.column_stack([junk, junk_rgb])])


def message_image(size=64, seed=0):
    """Smooth colourful blobs on a gradient: the single hidden image."""
    rng = np.random.default_rng(5000 + seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.stack([0.2 + 0.5 * xx, 0.3 + 0.4 * yy, 0.6 - 0.3 * xx * yy], axis=-1)
    for _ in range(6):
        c = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.08, 0.2)
        w = np.exp(-((xx - c[0]) ** 2 + (yy - c[1]) ** 2) / (2 * r * r))[..., None]
        img = img * (1 - w) + rng.uniform(0, 1, 3) * w
    return np.clip(img, 0.02, 0.98)


def watermark_image(size=64, color=(0.85, 0.25, 0.55)):
    return np.broadcast_to(np.asarray(color, dtype=np.float64), (size, size, 3)).copy()


def make_dataset(kind="scene", n_views=16, size=64, seed=0, n_hidden=1, designated_view=0,
                 spacing=0.15):
    """Paired toy dataset.

    ``kind``: ``"scene"`` pairs scene 0 with ``n_hidden`` hidden scenes
    (texture seeds 1..L), ``"image"`` hides one image at ``designated_view``,
    ``"plain"`` has no hidden content.
    """
    from .train import PairedDataset

    cams = arc_cameras(n_views, size, seed)
    gt = ground_truth_cloud(0, spacing)
    images = render_views(gt, cams)
    hidden = None
    hidden_image = None
    dv = None
    if kind == "scene":
        per_scene = [render_views(ground_truth_cloud(k + 1, spacing), cams) for k in range(n_hidden)]
        hidden = [[per_scene[k][v] for k in range(n_hidden)] for v in range(n_views)]
    elif kind == "image":
        hidden_image = message_image(size, seed)
        dv = designated_view
    elif kind != "plain":
        raise ValueError(f"unknown dataset kind {kind!r}")
    return PairedDataset(
        cameras=cams, images=images, hidden=hidden, hidden_image=hidden_image,
        designated_view=dv, seed_points=seed_points(gt, seed=seed),
    )
