"""Pinhole cameras and EWA projection of Gaussian means and covariances.

View space is right-handed with +z pointing forward, +x right and +y down,
so image coordinates grow with x and y. Pixel (u, v) has its centre at
(u, v) in image coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

DILATION = 0.3
DEFAULT_NEAR = 0.01
DEFAULT_FAR = 100.0


@dataclass(frozen=True, eq=False)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_view: np.ndarray
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        w2v = np.asarray(self.world_to_view, dtype=np.float64)
        object.__setattr__(self, "world_to_view", w2v)
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be >= 1")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise InvalidParameterError("need 0 < near < far")
        if w2v.shape != (4, 4) or not np.all(np.isfinite(w2v)):
            raise InvalidParameterError("world_to_view must be a finite 4x4 matrix")
        R = w2v[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9:
            raise InvalidParameterError("rotation block of world_to_view is not orthonormal")

    @property
    def R(self):
        return self.world_to_view[:3, :3]

    @property
    def t(self):
        return self.world_to_view[:3, 3]

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    @property
    def camera_to_world(self):
        c2w = np.eye(4)
        c2w[:3, :3] = self.R.T
        c2w[:3, 3] = self.center
        return c2w

    @classmethod
    def from_camera_to_world(cls, c2w, width, height, fx, fy, cx=None, cy=None, **kw):
        c2w = np.asarray(c2w, dtype=np.float64)
        R = c2w[:3, :3]
        w2v = np.eye(4)
        w2v[:3, :3] = R.T
        w2v[:3, 3] = -R.T @ c2w[:3, 3]
        return cls(
            width, height, fx, fy,
            (width - 1) / 2 if cx is None else cx,
            (height - 1) / 2 if cy is None else cy,
            w2v, **kw,
        )

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_x_deg, **kw):
        """Camera at ``eye`` looking at ``target``; ``up`` is the world up vector."""
        eye = np.asarray(eye, dtype=np.float64)
        f = np.asarray(target, dtype=np.float64) - eye
        f /= np.linalg.norm(f)
        r = np.cross(f, up)
        r /= np.linalg.norm(r)
        d = np.cross(f, r)
        w2v = np.eye(4)
        w2v[:3, :3] = np.stack([r, d, f])
        w2v[:3, 3] = -w2v[:3, :3] @ eye
        fx = 0.5 * width / np.tan(0.5 * np.radians(fov_x_deg))
        return cls(width, height, fx, fx, (width - 1) / 2, (height - 1) / 2, w2v, **kw)


def project_mean(cam: Camera, mu):
    """Return (pixel position, view depth, visible) for a world point."""
    t = cam.R @ np.asarray(mu, dtype=np.float64) + cam.t
    depth = t[2]
    if not depth > cam.near:
        return None, depth, False
    uv = np.array([cam.fx * t[0] / depth + cam.cx, cam.fy * t[1] / depth + cam.cy])
    return uv, depth, bool(depth < cam.far)


def projection_jacobian(cam: Camera, t):
    """Jacobian of the perspective map at view-space points t (N, 3) -> (N, 2, 3)."""
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * tx / tz**2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * ty / tz**2
    return J


def project_covariance(cam: Camera, mu, cov, dilation: float = DILATION):
    """Screen-space covariance J R_v Sigma R_v^T J^T + dilation * I."""
    t = cam.R @ np.asarray(mu, dtype=np.float64) + cam.t
    if not t[2] > 0:
        raise InvalidParameterError("point is at or behind the camera plane; cull it first")
    J = projection_jacobian(cam, t[None])[0]
    T = J @ cam.R
    out = T @ np.asarray(cov, dtype=np.float64) @ T.T
    out = 0.5 * (out + out.T)
    return out + dilation * np.eye(2)


def project_gaussians(cam: Camera, means, covs, dilation: float = DILATION):
    """Batched projection.

    Returns a dict with view points ``t``, ``J``, view covariances ``V``,
    screen covariances ``cov2d`` and pixel means ``mean2d``. Points with
    t_z <= 0 get NaN screen quantities; callers mask them via ``depth``.
    """
    t = means @ cam.R.T + cam.t
    tz = t[:, 2]
    safe = np.where(tz > 0, tz, np.nan)
    ts = np.column_stack([t[:, 0], t[:, 1], safe])
    J = projection_jacobian(cam, ts)
    V = cam.R @ covs @ cam.R.T
    cov2d = J @ V @ np.swapaxes(J, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation
    mean2d = np.column_stack([cam.fx * t[:, 0] / safe + cam.cx, cam.fy * t[:, 1] / safe + cam.cy])
    return {"t": t, "J": J, "V": V, "cov2d": cov2d, "mean2d": mean2d, "depth": tz}


def screen_radius(cov2d):
    """3-sigma radius from the largest eigenvalue of each 2x2 covariance."""
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    return 3.0 * np.sqrt(np.maximum(lam, 0.0))


def visibility(cam: Camera, proj, radius):
    depth = proj["depth"]
    m = proj["mean2d"]
    with np.errstate(invalid="ignore"):
        return (
            (depth > cam.near)
            & (depth < cam.far)
            & (m[:, 0] >= -radius)
            & (m[:, 0] <= cam.width - 1 + radius)
            & (m[:, 1] >= -radius)
            & (m[:, 1] <= cam.height - 1 + radius)
        )


def depth_order(idx, depth):
    """Sort ``idx`` by depth ascending, ties by index."""
    idx = np.asarray(idx)
    order = np.lexsort((idx, depth[idx]))
    return idx[order]


def frustum_cull(cloud, cam: Camera, dilation: float = DILATION):
    """Indices of Gaussians inside the view volume, nearest first."""
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    proj = project_gaussians(cam, cloud.means, cloud.covariances(), dilation)
    radius = screen_radius(proj["cov2d"])
    vis = visibility(cam, proj, radius)
    return depth_order(np.nonzero(vis)[0], proj["depth"])
