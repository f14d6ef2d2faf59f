"""Gaussian primitives, covariance construction and spherical-harmonic colour.

Parameters are stored pre-activation (log-scale, opacity logit, raw
quaternion) so the optimizer works in an unconstrained space; the
activated values are exposed as properties.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError

MODES = ("feature", "sh", "sh-double")

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

INIT_OPACITY = 0.1
INIT_FEATURE_STD = 0.1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def quat_to_rotmat(q):
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    The quaternions are normalised first.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Inverse of :func:`quat_to_rotmat` for a single matrix (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q if q[0] >= 0 else -q


def rotmat_backward(q_unit, dR):
    """Gradient w.r.t. a unit quaternion given dL/dR, both batched."""
    w, x, y, z = q_unit[..., 0], q_unit[..., 1], q_unit[..., 2], q_unit[..., 3]
    g = dR
    dw = 2 * (
        -z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
        - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1]
    )
    dx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
        - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    dy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
        + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    dz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
        - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def build_covariance(q, s):
    """Sigma = R diag(s)^2 R^T for one Gaussian."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(s))):
        raise InvalidParameterError("non-finite rotation or scale")
    if np.linalg.norm(q) == 0:
        raise InvalidParameterError("zero-length quaternion")
    if np.any(s <= 0):
        raise InvalidParameterError("scales must be positive")
    return build_covariances(q[None], s[None])[0]


def build_covariances(quats, scales):
    R = quat_to_rotmat(quats)
    M = R * scales[:, None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def sh_basis(dirs, degree):
    """Real SH basis values, shape (N, (degree+1)^2), for unit directions (N, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=1)


def sh_basis_grad(dirs, degree):
    """d(basis)/d(dir), shape (N, K, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = SH_C1
        rows += [(zero, -c + zero, zero), (zero, zero, c + zero), (-c + zero, zero, zero)]
    if degree >= 2:
        a = SH_C2
        rows += [
            (a[0] * y, a[0] * x, zero),
            (zero, a[1] * z, a[1] * y),
            (-2 * a[2] * x, -2 * a[2] * y, 4 * a[2] * z),
            (a[3] * z, zero, a[3] * x),
            (2 * a[4] * x, -2 * a[4] * y, zero),
        ]
    if degree >= 3:
        b = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (6 * b[0] * x * y, b[0] * (3 * xx - 3 * yy), zero),
            (b[1] * y * z, b[1] * x * z, b[1] * x * y),
            (-2 * b[2] * x * y, b[2] * (4 * zz - xx - 3 * yy), 8 * b[2] * y * z),
            (-6 * b[3] * x * z, -6 * b[3] * y * z, b[3] * (6 * zz - 3 * xx - 3 * yy)),
            (b[4] * (4 * zz - 3 * xx - yy), -2 * b[4] * x * y, 8 * b[4] * x * z),
            (2 * b[5] * x * z, -2 * b[5] * y * z, b[5] * (xx - yy)),
            (b[6] * (3 * xx - 3 * yy), -6 * b[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=1)


def evaluate_sh(h, direction):
    """RGB of one SH coefficient set ((k+1)^2, 3) seen from ``direction``."""
    h = np.asarray(h, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    n = np.linalg.norm(d)
    if not np.isfinite(n) or n == 0:
        raise InvalidParameterError("direction must be a non-zero finite vector")
    degree = int(round(np.sqrt(h.shape[0]))) - 1
    if h.ndim != 2 or sh_coeff_count(degree) != h.shape[0]:
        raise InvalidParameterError(f"bad SH coefficient shape {h.shape}")
    basis = sh_basis((d / n)[None], degree)[0]
    return np.maximum(basis @ h + 0.5, 0.0)


@dataclass
class GaussianCloud:
    """Learnable scene: one row per Gaussian.

    ``features`` is (N, M) in feature mode; in the SH modes it holds
    coefficients of shape (N, K, 3) (``sh``) or (N, K, 6) (``sh-double``,
    channels 3..5 being the second colour set).
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray
    mode: str = "feature"
    extent: float = 1.0
    sh_degree: int = field(default=0)

    PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "features")

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParameterError(f"unknown cloud mode {self.mode!r}")
        if self.mode != "feature":
            self.sh_degree = int(round(np.sqrt(self.features.shape[1]))) - 1

    def __len__(self):
        return self.means.shape[0]

    @property
    def feature_dim(self) -> int:
        """M in feature mode; number of SH coefficients per Gaussian otherwise."""
        if self.mode == "feature":
            return self.features.shape[1]
        return self.features.shape[1] * self.features.shape[2]

    @property
    def out_channels(self) -> int:
        """Channels of the rasterized image."""
        if self.mode == "feature":
            return self.features.shape[1]
        return self.features.shape[2]

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def rotations(self):
        return self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)

    def covariances(self):
        return build_covariances(self.quats, self.scales)

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            **{k: v.copy() for k, v in self.params().items()},
            mode=self.mode,
            extent=self.extent,
            sh_degree=self.sh_degree,
        )

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(
            **{k: v[idx].copy() for k, v in self.params().items()},
            mode=self.mode,
            extent=self.extent,
            sh_degree=self.sh_degree,
        )

    def append(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            **{k: np.concatenate([v, getattr(other, k)]) for k, v in self.params().items()},
            mode=self.mode,
            extent=self.extent,
            sh_degree=self.sh_degree,
        )

    def check_finite(self):
        if len(self) == 0:
            return
        for name, arr in self.params().items():
            flat = arr.reshape(len(self), -1)
            bad = np.nonzero(~np.all(np.isfinite(flat), axis=1))[0]
            if bad.size:
                raise InvalidParameterError(
                    f"Gaussian {int(bad[0])} has a non-finite {name} parameter"
                )


def _nn_scale(points, fallback):
    if len(points) < 2:
        return np.full(len(points), fallback)
    k = min(4, len(points))
    d, _ = cKDTree(points).query(points, k=k)
    mean_sq = np.mean(d[:, 1:] ** 2, axis=1)
    return np.sqrt(np.maximum(mean_sq, 1e-7))


def init_cloud(
    seed_points=None,
    count=None,
    box=None,
    M: int = 16,
    mode: str = "feature",
    sh_degree: int = 3,
    seed: int = 0,
    extent: float | None = None,
) -> GaussianCloud:
    """Create an initial cloud from seed points or a uniform box sample.

    ``seed_points`` is either an (N, 3) array of positions or an (N, 6)
    array of position + rgb in [0, 1]. Without seed points, ``count``
    positions are drawn uniformly inside ``box`` = (lo, hi).
    """
    if mode not in MODES:
        raise InvalidParameterError(f"unknown mode {mode!r}")
    if M < 1:
        raise InvalidParameterError("feature dimension must be >= 1")
    rng = np.random.default_rng(seed)
    rgb = None
    if seed_points is not None:
        pts = np.asarray(seed_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise InvalidParameterError("seed point list is empty")
        if pts.shape[1] >= 6:
            rgb = np.clip(pts[:, 3:6], 0.0, 1.0)
        means = pts[:, :3].copy()
    else:
        if not count or count < 1 or box is None:
            raise InvalidParameterError("need seed points or count >= 1 and a box")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
        means = lo + (hi - lo) * rng.random((count, 3))
    n = len(means)
    if extent is None:
        span = np.linalg.norm(means.max(0) - means.min(0))
        extent = float(span) if span > 0 else 1.0
    scales = _nn_scale(means, fallback=0.01 * extent)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    opacity_logits = np.full(n, float(logit(INIT_OPACITY)))
    if mode == "feature":
        features = rng.normal(0.0, INIT_FEATURE_STD, (n, M))
    else:
        channels = 3 if mode == "sh" else 6
        features = np.zeros((n, sh_coeff_count(sh_degree), channels))
        if rgb is not None:
            features[:, 0, :3] = (rgb - 0.5) / SH_C0
    return GaussianCloud(
        means=means,
        quats=quats,
        log_scales=np.log(np.repeat(scales[:, None], 3, axis=1)),
        opacity_logits=opacity_logits,
        features=features,
        mode=mode,
        extent=float(extent),
        sh_degree=sh_degree if mode != "feature" else 0,
    )
