"""Tile-based alpha compositing of per-Gaussian features, with its adjoint.

Every Gaussian's screen footprint is truncated to the ellipse where the
squared Mahalanobis distance is at most 9 (3 sigma); tiles are binned by
the bounding square of that ellipse, so tiling itself never changes the
image. Contributions below ``sigma_min`` are skipped and a pixel stops
once its transmittance would fall under ``t_stop``.

Work is split over 16x16 tiles. Each tile writes only its own pixels and
its own slice of the per-(tile, Gaussian) gradient buffer; partial
gradients are then summed per Gaussian in a fixed order, so the result
does not depend on the number of worker threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .camera import (
    DILATION,
    Camera,
    depth_order,
    project_covariance,
    project_gaussians,
    project_mean,
    screen_radius,
    visibility,
)
from .errors import AuxMismatchError, InvalidParameterError, ShapeMismatchError
from .scene import GaussianCloud, rotmat_backward, quat_to_rotmat, sh_basis, sh_basis_grad

TILE = 16
SUPPORT_SQ = 9.0

_threads = 1


def set_num_threads(n: int):
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_num_threads() -> int:
    return _threads


@dataclass(frozen=True)
class RasterSettings:
    sigma_min: float = 1e-6
    t_stop: float = 1e-6
    sigma_max: float = 0.99
    dilation: float = DILATION


DEFAULT_SETTINGS = RasterSettings()
# the coarser thresholds popularised by reference splatting code; cheaper but
# they truncate up to ~1/255 per skipped contribution
REFERENCE_SETTINGS = RasterSettings(sigma_min=1.0 / 255.0, t_stop=1e-4)
NO_SKIP = RasterSettings(sigma_min=0.0, t_stop=0.0)


@dataclass
class RenderAux:
    """Everything the backward pass needs from a forward call."""

    settings: RasterSettings
    n_gaussians: int
    shape: tuple
    visible: np.ndarray          # indices into the cloud
    t: np.ndarray                # view-space points of visible Gaussians
    J: np.ndarray
    V: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray           # (N, 3) a, b, c for every cloud row (0 if hidden)
    means2d: np.ndarray          # (N, 2)
    alphas: np.ndarray           # (N,) activated opacity
    colors: np.ndarray           # (N, C) what was composited
    background: np.ndarray
    tile_ranges: np.ndarray
    gids: np.ndarray
    t_final: np.ndarray
    n_contrib: np.ndarray
    sh: dict = field(default_factory=dict)


@dataclass
class Gradients:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray
    means2d: np.ndarray          # dL/d(pixel mean), for density control
    visible: np.ndarray

    def as_dict(self):
        return {
            "means": self.means,
            "quats": self.quats,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "features": self.features,
        }


# --------------------------------------------------------------------------
# numba kernels


@numba.njit(nogil=True, cache=True)
def _forward_tiles(tiles, tiles_x, H, W, tile_ranges, gids, means2d, conics, alphas,
                   colors, bg, sigma_min, sigma_max, t_stop, out, t_final, n_contrib):
    C = colors.shape[1]
    for t in tiles:
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_ranges[t, 0]
        end = tile_ranges[t, 1]
        for v in range(ty * TILE, min(ty * TILE + TILE, H)):
            for u in range(tx * TILE, min(tx * TILE + TILE, W)):
                T = 1.0
                last = 0
                for k in range(start, end):
                    g = gids[k]
                    dx = u - means2d[g, 0]
                    dy = v - means2d[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    if q > SUPPORT_SQ:
                        continue
                    s = alphas[g] * math.exp(-0.5 * q)
                    if s > sigma_max:
                        s = sigma_max
                    if s < sigma_min:
                        continue
                    Tn = T * (1.0 - s)
                    if Tn < t_stop:
                        break
                    w = s * T
                    for c in range(C):
                        out[v, u, c] += colors[g, c] * w
                    T = Tn
                    last = k - start + 1
                for c in range(C):
                    out[v, u, c] += bg[c] * T
                t_final[v, u] = T
                n_contrib[v, u] = last


@numba.njit(nogil=True, cache=True)
def _backward_tiles(tiles, tiles_x, H, W, tile_ranges, gids, means2d, conics, alphas,
                    colors, bg, sigma_min, sigma_max, t_stop, n_contrib, dout,
                    p_color, p_alpha, p_mean, p_conic):
    C = colors.shape[1]
    behind = np.empty(C)
    for t in tiles:
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_ranges[t, 0]
        end = tile_ranges[t, 1]
        n = end - start
        ks = np.empty(n, np.int64)
        ss = np.empty(n)
        Ts = np.empty(n)
        qs = np.empty(n)
        clamped = np.empty(n, np.bool_)
        for v in range(ty * TILE, min(ty * TILE + TILE, H)):
            for u in range(tx * TILE, min(tx * TILE + TILE, W)):
                last = n_contrib[v, u]
                # replay the forward pass up to the last contributor
                m = 0
                T = 1.0
                for k in range(start, start + last):
                    g = gids[k]
                    dx = u - means2d[g, 0]
                    dy = v - means2d[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    if q > SUPPORT_SQ:
                        continue
                    s = alphas[g] * math.exp(-0.5 * q)
                    cl = False
                    if s > sigma_max:
                        s = sigma_max
                        cl = True
                    if s < sigma_min:
                        continue
                    ks[m] = k
                    ss[m] = s
                    Ts[m] = T
                    qs[m] = q
                    clamped[m] = cl
                    m += 1
                    T = T * (1.0 - s)
                for c in range(C):
                    behind[c] = bg[c]
                for j in range(m - 1, -1, -1):
                    k = ks[j]
                    g = gids[k]
                    s = ss[j]
                    T = Ts[j]
                    dsig = 0.0
                    for c in range(C):
                        gc = dout[v, u, c]
                        p_color[k, c] += gc * s * T
                        dsig += gc * (colors[g, c] - behind[c])
                        behind[c] = s * colors[g, c] + (1.0 - s) * behind[c]
                    dsig *= T
                    if clamped[j]:
                        continue
                    G = math.exp(-0.5 * qs[j])
                    p_alpha[k] += dsig * G
                    dq = -0.5 * dsig * alphas[g] * G
                    dx = u - means2d[g, 0]
                    dy = v - means2d[g, 1]
                    a = conics[g, 0]
                    b = conics[g, 1]
                    cc = conics[g, 2]
                    p_mean[k, 0] -= dq * 2.0 * (a * dx + b * dy)
                    p_mean[k, 1] -= dq * 2.0 * (b * dx + cc * dy)
                    p_conic[k, 0] += dq * dx * dx
                    p_conic[k, 1] += dq * 2.0 * dx * dy
                    p_conic[k, 2] += dq * dy * dy


@numba.njit(nogil=True, cache=True)
def _reduce_pairs(gids, p_color, p_alpha, p_mean, p_conic, d_color, d_alpha, d_mean, d_conic):
    # pairs are sorted by tile, so each Gaussian is summed in ascending tile order
    C = p_color.shape[1]
    for k in range(gids.shape[0]):
        g = gids[k]
        for c in range(C):
            d_color[g, c] += p_color[k, c]
        d_alpha[g] += p_alpha[k]
        d_mean[g, 0] += p_mean[k, 0]
        d_mean[g, 1] += p_mean[k, 1]
        d_conic[g, 0] += p_conic[k, 0]
        d_conic[g, 1] += p_conic[k, 1]
        d_conic[g, 2] += p_conic[k, 2]


def _run_tiles(fn, n_tiles, threads, *args):
    threads = max(1, int(threads or _threads))
    all_tiles = np.arange(n_tiles, dtype=np.int64)
    if threads == 1 or n_tiles < 2:
        fn(all_tiles, *args)
        return
    chunks = [c for c in np.array_split(all_tiles, min(threads, n_tiles)) if len(c)]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        for f in [pool.submit(fn, c, *args) for c in chunks]:
            f.result()


# --------------------------------------------------------------------------
# preprocessing


def _bin_tiles(vis, means2d, radius, depth, H, W):
    tiles_x = (W + TILE - 1) // TILE
    tiles_y = (H + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    if len(vis) == 0:
        return np.zeros(0, np.int64), np.zeros((n_tiles, 2), np.int64), tiles_x, n_tiles
    m = means2d[vis]
    r = radius[vis] * (1 + 1e-9) + 1e-9
    u0 = np.clip(np.ceil(m[:, 0] - r), 0, W - 1).astype(np.int64)
    u1 = np.clip(np.floor(m[:, 0] + r), 0, W - 1).astype(np.int64)
    v0 = np.clip(np.ceil(m[:, 1] - r), 0, H - 1).astype(np.int64)
    v1 = np.clip(np.floor(m[:, 1] + r), 0, H - 1).astype(np.int64)
    ok = (u0 <= u1) & (v0 <= v1)
    vis, u0, u1, v0, v1 = vis[ok], u0[ok], u1[ok], v0[ok], v1[ok]
    tx0, tx1, ty0, ty1 = u0 // TILE, u1 // TILE, v0 // TILE, v1 // TILE
    nx = tx1 - tx0 + 1
    cnt = nx * (ty1 - ty0 + 1)
    total = int(cnt.sum())
    g = np.repeat(vis, cnt)
    offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    nxr = np.repeat(nx, cnt)
    tile = (np.repeat(ty0, cnt) + offs // nxr) * tiles_x + np.repeat(tx0, cnt) + offs % nxr
    order = np.lexsort((g, depth[g], tile))
    gids = np.ascontiguousarray(g[order])
    tile = tile[order]
    starts = np.searchsorted(tile, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tile, np.arange(n_tiles), side="right")
    return gids, np.stack([starts, ends], axis=1).astype(np.int64), tiles_x, n_tiles


def _colors(cloud: GaussianCloud, cam: Camera, vis, active_degree):
    n = len(cloud)
    if cloud.mode == "feature":
        return np.ascontiguousarray(cloud.features, dtype=np.float64), {}
    degree = cloud.sh_degree if active_degree is None else min(active_degree, cloud.sh_degree)
    K = (degree + 1) ** 2
    colors = np.zeros((n, cloud.features.shape[2]))
    diff = cloud.means[vis] - cam.center
    dist = np.linalg.norm(diff, axis=1)
    dirs = diff / dist[:, None]
    basis = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", basis, cloud.features[vis, :K, :]) + 0.5
    colors[vis] = np.maximum(raw, 0.0)
    info = {"degree": degree, "dirs": dirs, "dist": dist, "basis": basis, "positive": raw > 0}
    return colors, info


def _prepare(cloud: GaussianCloud, cam: Camera, background, settings, active_degree):
    cloud.check_finite()
    n = len(cloud)
    C = cloud.out_channels
    if background is None:
        bg = np.zeros(C)
    else:
        bg = np.asarray(background, dtype=np.float64).reshape(-1)
        if bg.shape[0] != C:
            raise ShapeMismatchError(f"background has {bg.shape[0]} channels, image has {C}")
    H, W = cam.height, cam.width
    conics = np.zeros((n, 3))
    means2d = np.zeros((n, 2))
    if n:
        proj = project_gaussians(cam, cloud.means, cloud.covariances(), settings.dilation)
        cov2d = proj["cov2d"]
        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
        radius = screen_radius(cov2d)
        with np.errstate(invalid="ignore"):
            ok = visibility(cam, proj, radius) & (det > 0) & np.isfinite(det)
        vis = depth_order(np.nonzero(ok)[0], proj["depth"])
        d = det[vis]
        conics[vis, 0] = cov2d[vis, 1, 1] / d
        conics[vis, 1] = -cov2d[vis, 0, 1] / d
        conics[vis, 2] = cov2d[vis, 0, 0] / d
        means2d[vis] = proj["mean2d"][vis]
        gids, ranges, tiles_x, n_tiles = _bin_tiles(vis, means2d, radius, proj["depth"], H, W)
        t, J, V, c2 = proj["t"][vis], proj["J"][vis], proj["V"][vis], cov2d[vis]
    else:
        vis = np.zeros(0, np.int64)
        tiles_x = (W + TILE - 1) // TILE
        n_tiles = tiles_x * ((H + TILE - 1) // TILE)
        gids, ranges = np.zeros(0, np.int64), np.zeros((n_tiles, 2), np.int64)
        t = J = V = c2 = np.zeros((0,))
    colors, sh = _colors(cloud, cam, vis, active_degree)
    return dict(
        bg=bg, vis=vis, conics=conics, means2d=means2d, alphas=cloud.opacities.astype(np.float64),
        colors=colors, sh=sh, gids=gids, ranges=ranges, tiles_x=tiles_x, n_tiles=n_tiles,
        t=t, J=J, V=V, cov2d=c2,
    )


# --------------------------------------------------------------------------
# public API


def rasterize_forward(cloud: GaussianCloud, cam: Camera, background=None,
                      settings: RasterSettings = DEFAULT_SETTINGS, threads=None,
                      active_sh_degree=None):
    """Composite the cloud into an (H, W, C) image.

    In feature mode C = M and the per-Gaussian features are blended; in the
    SH modes the colours evaluated from the coefficients are blended
    instead (C = 3 or 6). Returns (image, RenderAux).
    """
    p = _prepare(cloud, cam, background, settings, active_sh_degree)
    H, W = cam.height, cam.width
    C = p["colors"].shape[1]
    out = np.zeros((H, W, C))
    t_final = np.ones((H, W))
    n_contrib = np.zeros((H, W), np.int64)
    _run_tiles(
        _forward_tiles, p["n_tiles"], threads, p["tiles_x"], H, W, p["ranges"], p["gids"],
        p["means2d"], p["conics"], p["alphas"], p["colors"], p["bg"],
        settings.sigma_min, settings.sigma_max, settings.t_stop, out, t_final, n_contrib,
    )
    aux = RenderAux(
        settings=settings, n_gaussians=len(cloud), shape=(H, W, C), visible=p["vis"],
        t=p["t"], J=p["J"], V=p["V"], cov2d=p["cov2d"], conics=p["conics"],
        means2d=p["means2d"], alphas=p["alphas"], colors=p["colors"], background=p["bg"],
        tile_ranges=p["ranges"], gids=p["gids"], t_final=t_final, n_contrib=n_contrib, sh=p["sh"],
    )
    return out, aux


def rasterize_rgb(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0), **kw):
    """Colour render for the SH baselines (same kernel, colours from SH)."""
    if cloud.mode == "feature":
        raise InvalidParameterError("rasterize_rgb needs an SH-mode cloud")
    bg = np.asarray(background, dtype=np.float64)
    if cloud.mode == "sh-double" and bg.size == 3:
        bg = np.concatenate([bg, bg])
    return rasterize_forward(cloud, cam, bg, **kw)


def rasterize_backward(cloud: GaussianCloud, cam: Camera, aux: RenderAux, dL_dF, threads=None):
    """Adjoint of :func:`rasterize_forward` for every cloud parameter."""
    dL_dF = np.ascontiguousarray(dL_dF, dtype=np.float64)
    if aux.n_gaussians != len(cloud) or dL_dF.shape != aux.shape or \
            aux.shape[:2] != (cam.height, cam.width):
        raise AuxMismatchError("render state does not match this cloud/camera/gradient")
    n, C = len(cloud), aux.shape[2]
    P = len(aux.gids)
    p_color = np.zeros((P, C))
    p_alpha = np.zeros(P)
    p_mean = np.zeros((P, 2))
    p_conic = np.zeros((P, 3))
    s = aux.settings
    _run_tiles(
        _backward_tiles, len(aux.tile_ranges), threads, (cam.width + TILE - 1) // TILE,
        cam.height, cam.width, aux.tile_ranges, aux.gids, aux.means2d, aux.conics, aux.alphas,
        aux.colors, aux.background, s.sigma_min, s.sigma_max, s.t_stop, aux.n_contrib, dL_dF,
        p_color, p_alpha, p_mean, p_conic,
    )
    d_color = np.zeros((n, C))
    d_alpha = np.zeros(n)
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    _reduce_pairs(aux.gids, p_color, p_alpha, p_mean, p_conic, d_color, d_alpha, d_mean2d, d_conic)
    return _chain(cloud, cam, aux, d_color, d_alpha, d_mean2d, d_conic)


def _chain(cloud, cam, aux, d_color, d_alpha, d_mean2d, d_conic):
    n = len(cloud)
    vis = aux.visible
    g_means = np.zeros((n, 3))
    g_quats = np.zeros((n, 4))
    g_logs = np.zeros((n, 3))
    alpha = aux.alphas
    g_logit = d_alpha * alpha * (1 - alpha)

    if cloud.mode == "feature":
        g_feat = d_color
    else:
        g_feat = np.zeros_like(cloud.features)
        sh = aux.sh
        if len(vis):
            dc = d_color[vis] * sh["positive"]
            K = sh["basis"].shape[1]
            g_feat[vis, :K, :] = sh["basis"][:, :, None] * dc[:, None, :]
            coeffs = cloud.features[vis, :K, :]
            dbasis = np.einsum("nkc,nc->nk", coeffs, dc)
            ddir = np.einsum("nk,nkj->nj", dbasis, sh_basis_grad(sh["dirs"], sh["degree"]))
            dirs = sh["dirs"]
            proj = ddir - dirs * np.sum(dirs * ddir, axis=1, keepdims=True)
            g_means[vis] += proj / sh["dist"][:, None]

    if len(vis):
        t, J, V, cov = aux.t, aux.J, aux.V, aux.cov2d
        conic = aux.conics[vis]
        Cm = np.empty((len(vis), 2, 2))
        Cm[:, 0, 0] = conic[:, 0]
        Cm[:, 0, 1] = Cm[:, 1, 0] = conic[:, 1]
        Cm[:, 1, 1] = conic[:, 2]
        dc = d_conic[vis]
        Gc = np.empty_like(Cm)
        Gc[:, 0, 0] = dc[:, 0]
        Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * dc[:, 1]
        Gc[:, 1, 1] = dc[:, 2]
        G_cov = -Cm @ Gc @ Cm
        Jt = np.swapaxes(J, 1, 2)
        G_V = Jt @ G_cov @ J
        G_J = 2.0 * G_cov @ J @ V
        fx, fy = cam.fx, cam.fy
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        dm = d_mean2d[vis]
        dtx = G_J[:, 0, 2] * (-fx / tz**2) + dm[:, 0] * fx / tz
        dty = G_J[:, 1, 2] * (-fy / tz**2) + dm[:, 1] * fy / tz
        dtz = (
            G_J[:, 0, 0] * (-fx / tz**2)
            + G_J[:, 0, 2] * (2 * fx * tx / tz**3)
            + G_J[:, 1, 1] * (-fy / tz**2)
            + G_J[:, 1, 2] * (2 * fy * ty / tz**3)
            - dm[:, 0] * fx * tx / tz**2
            - dm[:, 1] * fy * ty / tz**2
        )
        dt = np.column_stack([dtx, dty, dtz])
        g_means[vis] += dt @ cam.R
        G_S = cam.R.T @ G_V @ cam.R
        q = cloud.quats[vis]
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        R = quat_to_rotmat(qn)
        s = np.exp(cloud.log_scales[vis])
        M = R * s[:, None, :]
        G_M = (G_S + np.swapaxes(G_S, 1, 2)) @ M
        G_R = G_M * s[:, None, :]
        ds = np.sum(G_M * R, axis=1)
        g_logs[vis] = ds * s
        dqn = rotmat_backward(qn, G_R)
        g_quats[vis] = (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / np.linalg.norm(
            q, axis=1, keepdims=True
        )

    return Gradients(
        means=g_means, quats=g_quats, log_scales=g_logs, opacity_logits=g_logit,
        features=g_feat, means2d=d_mean2d, visible=vis,
    )


def rasterize_bruteforce(cloud: GaussianCloud, cam: Camera, background=None,
                         sigma_max: float = DEFAULT_SETTINGS.sigma_max,
                         dilation: float = DILATION, active_sh_degree=None):
    """Reference compositor: every pixel walks every visible Gaussian.

    No tiles, no small-contribution skip, no early termination; sums are
    carried in extended precision. Projection goes through the scalar
    per-Gaussian camera routines rather than the batched path.
    """
    cloud.check_finite()
    H, W = cam.height, cam.width
    C = cloud.out_channels
    bg = np.zeros(C) if background is None else np.asarray(background, dtype=np.float64).reshape(-1)
    if bg.shape[0] != C:
        raise ShapeMismatchError("background channel mismatch")
    ld = np.longdouble
    out = np.zeros((H, W, C), dtype=ld)
    T = np.ones((H, W), dtype=ld)
    if len(cloud):
        entries = []
        covs = cloud.covariances()
        for i in range(len(cloud)):
            mu = cloud.means[i]
            uv, depth, inside = project_mean(cam, mu)
            if not inside:
                continue
            cov2d = project_covariance(cam, mu, covs[i], dilation)
            det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] ** 2
            if not det > 0:
                continue
            r = float(screen_radius(cov2d[None])[0])
            if not (-r <= uv[0] <= W - 1 + r and -r <= uv[1] <= H - 1 + r):
                continue
            entries.append((depth, i, uv, np.linalg.inv(cov2d)))
        entries.sort(key=lambda e: (e[0], e[1]))
        colors, _ = _colors(cloud, cam, np.array([e[1] for e in entries], dtype=np.int64),
                            active_sh_degree)
        vv, uu = np.meshgrid(np.arange(H, dtype=ld), np.arange(W, dtype=ld), indexing="ij")
        alphas = cloud.opacities
        for _, i, uv, inv in entries:
            dx = uu - ld(uv[0])
            dy = vv - ld(uv[1])
            q = ld(inv[0, 0]) * dx * dx + ld(inv[0, 1] + inv[1, 0]) * dx * dy + ld(inv[1, 1]) * dy * dy
            sig = np.minimum(ld(alphas[i]) * np.exp(ld(-0.5) * q), ld(sigma_max))
            sig = np.where(q <= SUPPORT_SQ, sig, ld(0))
            out += (sig * T)[..., None] * colors[i].astype(ld)
            T = T * (1 - sig)
    out += T[..., None] * bg.astype(ld)
    return out.astype(np.float64)
