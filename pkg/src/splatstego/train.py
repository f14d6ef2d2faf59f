"""Joint optimisation of a Gaussian cloud and its decoders.

One ``fit`` call runs the whole loop: seeded view shuffling, a forward and
analytic backward pass per iteration, Adam updates, periodic density
control and held-out metric logging.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .errors import InvalidParameterError, ShapeMismatchError, TrainingAbort
from .nn import (
    ConvStack,
    RESIDUAL_SCALE,
    LossReport,
    loss_cop,
    loss_mes,
    loss_rgb,
    loss_total,
    make_stack,
    make_watermark_encoder,
    watermark_embed,
)
from .rasterizer import rasterize_backward, rasterize_forward
from .scene import GaussianCloud, init_cloud, logit, quat_to_rotmat, sigmoid

MODES = ("hider", "hider-image", "hider-multi", "baseline-3dgs", "baseline-sh", "baseline-decoder")
FEATURE_MODES = ("hider", "hider-image", "hider-multi")
CLOUD_PARAMS = GaussianCloud.PARAM_NAMES


@dataclass
class TrainConfig:
    mode: str = "hider"
    iterations: int = 3000
    lam: float = 0.5
    beta: float = 0.2
    gamma: float = 0.2
    M: int = 16
    L: int = 1
    # Adam learning rates; positions are scaled by the scene extent
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_feature: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_decoder: float = 1e-3
    # density control
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop_fraction: float = 0.6
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    split_scale_fraction: float = 0.01
    max_gaussians: int = 5000
    opacity_reset_interval: int = 500
    opacity_reset_value: float = 0.01
    # once opacities have been reset, Gaussians wider than this times the extent are pruned
    max_scale_fraction: float = 0.1
    # decoders
    decoder_depth: int = 5
    decoder_width: int = 64
    # SH baselines
    sh_degree: int = 3
    sh_interval: int = 1000
    seed: int = 0
    background: str = "black"
    holdout_fraction: float = 0.125
    log_interval: int = 250
    threads: int = 1
    # RTWS fine-tuning
    rtws_iterations: int = 1000
    rtws_pretrain_iterations: int = 400
    rtws_cop_weight: float = 1.0
    rtws_watermark_width: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise InvalidParameterError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.iterations < 0:
            raise InvalidParameterError("iterations must be >= 0")
        if self.lam < 0:
            raise InvalidParameterError("lam must be >= 0")
        for name in ("beta", "gamma"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1]")
        if self.M < 1 or self.L < 1:
            raise InvalidParameterError("M and L must be >= 1")
        if self.mode != "hider-multi" and self.L != 1 and self.mode in FEATURE_MODES:
            raise InvalidParameterError("L > 1 needs mode hider-multi")
        if self.background not in ("black", "white"):
            raise InvalidParameterError("background must be 'black' or 'white'")
        if not 0 <= self.sh_degree <= 3:
            raise InvalidParameterError("sh_degree must be in 0..3")
        if self.decoder_depth < 1 or self.decoder_width < 1:
            raise InvalidParameterError("decoder depth and width must be >= 1")
        if self.threads < 1:
            raise InvalidParameterError("threads must be >= 1")
        if self.opacity_reset_interval < 0 or not 0.0 < self.opacity_reset_value < 1.0:
            raise InvalidParameterError("opacity reset needs interval >= 0 and value in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @property
    def n_streams(self):
        """Number of hidden 3-channel streams the message decoder emits."""
        return self.L if self.mode == "hider-multi" else 1


@dataclass
class PairedDataset:
    """Views of the original scene with their paired hidden content.

    ``hidden[v]`` is the list of L hidden-scene images for view v. For
    image hiding, ``hidden_image`` belongs to ``designated_view`` only.
    """

    cameras: list
    images: list
    hidden: list | None = None
    hidden_image: np.ndarray | None = None
    designated_view: int | None = None
    seed_points: np.ndarray | None = None

    def __post_init__(self):
        if not self.cameras:
            raise InvalidParameterError("dataset has no views")
        if len(self.images) != len(self.cameras):
            raise ShapeMismatchError("one image per camera is required")
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if np.shape(img) != (cam.height, cam.width, 3):
                raise ShapeMismatchError(f"view {i}: image does not match camera size")
        if self.hidden is not None:
            if len(self.hidden) != len(self.cameras):
                raise ShapeMismatchError("hidden views must correspond one-to-one with views")
            counts = {len(h) for h in self.hidden}
            if len(counts) != 1 or 0 in counts:
                raise ShapeMismatchError("every view needs the same number of hidden images")
            for i, (cam, hs) in enumerate(zip(self.cameras, self.hidden)):
                for h in hs:
                    if np.shape(h) != (cam.height, cam.width, 3):
                        raise ShapeMismatchError(f"view {i}: hidden image size mismatch")
        if self.hidden_image is not None:
            dv = self.designated_view
            if dv is None or not 0 <= dv < len(self.cameras):
                raise InvalidParameterError("hidden_image needs a valid designated_view")
            cam = self.cameras[dv]
            if np.shape(self.hidden_image) != (cam.height, cam.width, 3):
                raise ShapeMismatchError("hidden image size mismatch")

    def __len__(self):
        return len(self.cameras)

    @property
    def n_hidden(self):
        return len(self.hidden[0]) if self.hidden is not None else 0

    def split(self, holdout_fraction=0.125):
        """(train indices, test indices): the last fraction of views is held out."""
        T = len(self)
        n_test = int(T * holdout_fraction)
        if n_test == 0 or n_test >= T:
            idx = list(range(T))
            return idx, idx
        return list(range(T - n_test)), list(range(T - n_test, T))

    def scene_extent(self):
        """Radius of the camera centres around their mean, padded by 10%."""
        centers = np.array([c.center for c in self.cameras])
        r = float(np.max(np.linalg.norm(centers - centers.mean(0), axis=1))) if len(centers) > 1 else 0.0
        return 1.1 * r if r > 0 else 1.0


# --------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over named numpy arrays; moments follow row edits of the cloud."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-15

    def __init__(self):
        self.m = {}
        self.v = {}
        self.steps = {}

    def step(self, key, param, grad, lr):
        """In-place update of ``param``. A ``None`` gradient leaves it untouched."""
        if grad is None:
            return
        if key not in self.m:
            self.m[key] = np.zeros_like(param)
            self.v[key] = np.zeros_like(param)
            self.steps[key] = 0
        m, v = self.m[key], self.v[key]
        if m.shape != param.shape:
            raise ShapeMismatchError(f"optimizer state for {key} has shape {m.shape}, param {param.shape}")
        self.steps[key] += 1
        t = self.steps[key]
        g = grad.astype(param.dtype, copy=False)
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        param -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(param.dtype, copy=False)

    def reset(self, key):
        """Zero the moments of ``key`` (after its parameter is overwritten)."""
        if key in self.m:
            self.m[key][...] = 0
            self.v[key][...] = 0

    def remap_rows(self, keys, source):
        """Rebuild per-row moments: row i takes old row ``source[i]``, or zero if -1."""
        source = np.asarray(source)
        take = source >= 0
        for key in keys:
            if key not in self.m:
                continue
            for store in (self.m, self.v):
                old = store[key]
                new = np.zeros((len(source),) + old.shape[1:], dtype=old.dtype)
                new[take] = old[source[take]]
                store[key] = new


# --------------------------------------------------------------------------
# model state


@dataclass
class DensityStats:
    grad_norm: np.ndarray
    count: np.ndarray
    grad_dir: np.ndarray

    @classmethod
    def empty(cls, n):
        return cls(np.zeros(n), np.zeros(n), np.zeros((n, 3)))

    def add(self, visible, screen_grad, world_grad):
        self.grad_norm[visible] += np.linalg.norm(screen_grad[visible], axis=1)
        self.count[visible] += 1
        self.grad_dir[visible] += world_grad[visible]


@dataclass
class Model:
    cloud: GaussianCloud
    D_s: ConvStack | None
    D_m: ConvStack | None
    config: TrainConfig
    opt: Adam = field(default_factory=Adam)
    stats: DensityStats | None = None
    iteration: int = 0

    def __post_init__(self):
        if self.stats is None:
            self.stats = DensityStats.empty(len(self.cloud))


def _cloud_mode(mode):
    if mode in FEATURE_MODES:
        return "feature"
    return "sh-double" if mode == "baseline-sh" else "sh"


def init_model(dataset: PairedDataset, config: TrainConfig) -> Model:
    """Seeded initial cloud and decoders for ``config.mode``."""
    _check_dataset(dataset, config)
    extent = dataset.scene_extent()
    seed = config.seed
    if dataset.seed_points is not None:
        pts = dataset.seed_points
        if len(pts) > config.max_gaussians:
            keep = np.sort(np.random.default_rng(seed).choice(len(pts), config.max_gaussians, replace=False))
            pts = pts[keep]
        cloud = init_cloud(pts, M=config.M, mode=_cloud_mode(config.mode),
                           sh_degree=config.sh_degree, seed=seed, extent=extent)
    else:
        centers = np.array([c.center for c in dataset.cameras])
        lo, hi = centers.min(0) - extent, centers.max(0) + extent
        cloud = init_cloud(count=min(2000, config.max_gaussians), box=(lo, hi), M=config.M,
                           mode=_cloud_mode(config.mode), sh_degree=config.sh_degree,
                           seed=seed, extent=extent)
    D_s = D_m = None
    kw = dict(depth=config.decoder_depth, width=config.decoder_width)
    if config.mode in FEATURE_MODES:
        D_s = make_stack(config.M, 3, seed=seed + 1, **kw)
        D_m = make_stack(config.M, 3 * config.n_streams, seed=seed + 2, **kw)
    elif config.mode == "baseline-decoder":
        D_m = make_stack(3, 3, seed=seed + 2, **kw)
    return Model(cloud, D_s, D_m, config)


def _check_dataset(dataset, config):
    mode = config.mode
    if mode in ("hider", "hider-multi", "baseline-sh", "baseline-decoder"):
        if dataset.hidden is None and dataset.hidden_image is None:
            raise InvalidParameterError(f"mode {mode} needs hidden content in the dataset")
        if dataset.hidden is not None and dataset.n_hidden < config.n_streams:
            raise InvalidParameterError(
                f"mode {mode} needs {config.n_streams} hidden scenes, dataset has {dataset.n_hidden}"
            )
    if mode == "hider-image" and dataset.hidden_image is None:
        raise InvalidParameterError("hider-image needs a hidden_image and designated_view")


def _background(config, channels):
    return np.full(channels, 1.0 if config.background == "white" else 0.0)


def active_sh_degree(config, iteration):
    return min(config.sh_degree, iteration // max(1, config.sh_interval))


def message_target(dataset: PairedDataset, config: TrainConfig, view):
    """Hidden target for ``view`` as an (H, W, 3L) array, or None when absent."""
    if image_hiding(dataset, config):
        return dataset.hidden_image if view == dataset.designated_view else None
    if dataset.hidden is None:
        return None
    return np.concatenate(dataset.hidden[view][: config.n_streams], axis=-1)


def predict_view(model: Model, cam: Camera, iteration=None):
    """Render one view; returns (scene rgb, list of hidden rgb streams or None)."""
    cfg = model.config
    it = cfg.iterations if iteration is None else iteration
    cloud = model.cloud
    if cfg.mode in FEATURE_MODES:
        F, _ = rasterize_forward(cloud, cam, threads=cfg.threads)
        F32 = F.astype(np.float32)
        I = model.D_s.forward(F32).astype(np.float64)
        if model.D_m is None:
            return I, None
        Mout = model.D_m.forward(F32).astype(np.float64)
        return I, [Mout[..., 3 * k:3 * k + 3] for k in range(Mout.shape[-1] // 3)]
    img, _ = rasterize_forward(cloud, cam, _background(cfg, cloud.out_channels),
                               threads=cfg.threads, active_sh_degree=active_sh_degree(cfg, it))
    if cfg.mode == "baseline-3dgs":
        return np.clip(img, 0, 1), None
    if cfg.mode == "baseline-sh":
        return np.clip(img[..., :3], 0, 1), [np.clip(img[..., 3:], 0, 1)]
    if model.D_m is None:
        return np.clip(img, 0, 1), None
    Mout = model.D_m.forward(img.astype(np.float32)).astype(np.float64)
    return np.clip(img, 0, 1), [Mout]


# --------------------------------------------------------------------------
# one step


def _finite(value, model, view, term):
    if not np.isfinite(value):
        raise TrainingAbort(model.iteration, view, term, value)


def train_step(model: Model, dataset: PairedDataset, view: int) -> LossReport:
    """Forward, backward and Adam update on a single view."""
    cfg = model.config
    cloud = model.cloud
    cam = dataset.cameras[view]
    I_gt = dataset.images[view]
    M_gt = message_target(dataset, cfg, view)
    use_mes = M_gt is not None and cfg.mode != "baseline-3dgs"
    l_mes = 0.0
    parts = {}
    grads_s = grads_m = None

    if cfg.mode in FEATURE_MODES:
        F, aux = rasterize_forward(cloud, cam, threads=cfg.threads)
        F32 = F.astype(np.float32)
        cache_s = []
        I = model.D_s.forward(F32, cache_s)
        l_rgb, g_I, p = loss_rgb(I, I_gt, cfg.gamma)
        parts.update({f"rgb_{k}": v for k, v in p.items()})
        grads_s, dF = model.D_s.backward(cache_s, g_I)
        dF = dF.astype(np.float64)
        if use_mes:
            cache_m = []
            Mout = model.D_m.forward(F32, cache_m)
            L = Mout.shape[-1] // 3
            g_M = np.zeros(Mout.shape)
            for k in range(L):
                sl = slice(3 * k, 3 * k + 3)
                lk, gk, _ = loss_mes(Mout[..., sl], M_gt[..., sl], cfg.beta)
                l_mes += lk / L
                g_M[..., sl] = gk / L
                parts[f"mes_{k}"] = lk
            grads_m, dFm = model.D_m.backward(cache_m, cfg.lam * g_M)
            dF = dF + dFm
    else:
        bg = _background(cfg, cloud.out_channels)
        img, aux = rasterize_forward(cloud, cam, bg, threads=cfg.threads,
                                     active_sh_degree=active_sh_degree(cfg, model.iteration))
        I = img[..., :3]
        l_rgb, g_I, _ = loss_rgb(I, I_gt, cfg.gamma)
        dF = np.zeros_like(img)
        dF[..., :3] = g_I
        if use_mes and cfg.mode == "baseline-sh":
            l_mes, g_M, _ = loss_mes(img[..., 3:6], M_gt, cfg.beta)
            dF[..., 3:6] = cfg.lam * g_M
        elif use_mes and cfg.mode == "baseline-decoder":
            cache_m = []
            Mout = model.D_m.forward(I.astype(np.float32), cache_m)
            l_mes, g_M, _ = loss_mes(Mout, M_gt, cfg.beta)
            grads_m, dI = model.D_m.backward(cache_m, cfg.lam * g_M)
            dF[..., :3] += dI
    _finite(l_rgb, model, view, "l_rgb")
    _finite(l_mes, model, view, "l_mes")
    total = loss_total(l_rgb, l_mes, cfg.lam)
    _finite(total, model, view, "l_total")

    g = rasterize_backward(cloud, cam, aux, dF, threads=cfg.threads)
    screen = g.means2d * np.array([cam.width / 2.0, cam.height / 2.0])
    model.stats.add(g.visible, screen, g.means)
    _apply_cloud_update(model, g.as_dict())
    if model.D_s is not None and grads_s is not None:
        _apply_stack_update(model, "D_s", model.D_s, grads_s)
    if model.D_m is not None and grads_m is not None:
        _apply_stack_update(model, "D_m", model.D_m, grads_m)
    model.iteration += 1
    return LossReport(rgb=float(l_rgb), mes=float(l_mes), total=float(total), parts=parts)


def position_lr(cfg: TrainConfig, iteration, extent):
    """Log-linear decay from lr_position to lr_position_final over the run."""
    frac = min(1.0, iteration / max(1, cfg.iterations))
    lr = math.exp((1 - frac) * math.log(cfg.lr_position) + frac * math.log(cfg.lr_position_final))
    return lr * extent


def _cloud_lrs(model):
    cfg = model.config
    return {
        "means": position_lr(cfg, model.iteration, model.cloud.extent),
        "quats": cfg.lr_rotation,
        "log_scales": cfg.lr_scale,
        "opacity_logits": cfg.lr_opacity,
        "features": cfg.lr_feature,
    }


def _apply_cloud_update(model, grads, only=None):
    cloud = model.cloud
    lrs = _cloud_lrs(model)
    for name in CLOUD_PARAMS:
        if only is not None and name not in only:
            continue
        if name == "features" and cloud.mode != "feature" and cloud.features.shape[1] > 1:
            # higher SH bands at a twentieth of the base rate, as colour DC dominates
            lr = np.full((1, cloud.features.shape[1], 1), lrs[name] / 20.0)
            lr[0, 0, 0] = lrs[name]
            model.opt.step("cloud." + name, cloud.features, grads[name], lr)
        else:
            model.opt.step("cloud." + name, getattr(cloud, name), grads[name], lrs[name])


def _apply_stack_update(model, tag, stack, grads):
    lr = model.config.lr_decoder
    for i, (w, b) in enumerate(zip(stack.weights, stack.biases)):
        model.opt.step(f"{tag}.w{i}", w, grads[f"w{i}"], lr)
        model.opt.step(f"{tag}.b{i}", b, grads[f"b{i}"], lr)


# --------------------------------------------------------------------------
# density control


def adaptive_density_control(cloud: GaussianCloud, stats: DensityStats, config: TrainConfig,
                             iteration: int = 0, opt: Adam | None = None, seed: int = 0):
    """Clone, split and prune; returns (new cloud, new stats, counts dict).

    ``counts`` satisfies n - pruned + cloned + split == len(new cloud).
    """
    n = len(cloud)
    counts = {"before": n, "cloned": 0, "split": 0, "pruned": 0}
    if n == 0:
        return cloud, stats, counts
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = np.where(stats.count > 0, stats.grad_norm / np.maximum(stats.count, 1), 0.0)
    hot = avg >= config.grad_threshold
    room = max(0, config.max_gaussians - n)
    if hot.sum() > room:
        # keep the strongest candidates so the cap holds
        order = np.lexsort((np.arange(n), -avg))
        chosen = order[:room]
        hot = np.zeros(n, bool)
        hot[chosen] = True
    big = np.max(cloud.scales, axis=1) > config.split_scale_fraction * cloud.extent
    clone = hot & ~big
    split = hot & big
    rng = np.random.default_rng(seed + 7919 * iteration)

    keep_idx = np.nonzero(~split)[0]
    clone_idx = np.nonzero(clone)[0]
    split_idx = np.nonzero(split)[0]
    parts = [cloud.subset(keep_idx)]
    source = [keep_idx]

    if len(clone_idx):
        c = cloud.subset(clone_idx)
        d = stats.grad_dir[clone_idx]
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        unit = np.where(norm > 0, d / np.where(norm > 0, norm, 1), 0.0)
        c.means = c.means - unit * np.max(c.scales, axis=1, keepdims=True)
        parts.append(c)
        source.append(np.full(len(clone_idx), -1))
    if len(split_idx):
        base = cloud.subset(split_idx)
        R = quat_to_rotmat(base.quats)
        children = []
        for _ in range(2):
            ch = base.copy()
            z = rng.normal(size=(len(split_idx), 3)) * base.scales
            ch.means = base.means + np.einsum("nij,nj->ni", R, z)
            ch.log_scales = base.log_scales - np.log(1.6)
            children.append(ch)
        parts.extend(children)
        source.append(np.full(2 * len(split_idx), -1))

    new = parts[0]
    for p in parts[1:]:
        new = new.append(p)
    src = np.concatenate(source)
    alive = sigmoid(new.opacity_logits) >= config.prune_opacity
    if 0 < config.opacity_reset_interval < iteration:
        alive &= np.max(new.scales, axis=1) <= config.max_scale_fraction * cloud.extent
    new = new.subset(np.nonzero(alive)[0])
    src = src[alive]
    counts.update(cloned=len(clone_idx), split=len(split_idx), pruned=int((~alive).sum()))
    if opt is not None:
        opt.remap_rows(["cloud." + k for k in CLOUD_PARAMS], src)
    new.check_finite()
    return new, DensityStats.empty(len(new)), counts


def reset_opacity(model: Model):
    """Clamp every opacity to at most ``opacity_reset_value`` and restart its moments.

    Gaussians the views still need climb back; the rest stay faint and get
    pruned at the next density-control step.
    """
    cap = logit(model.config.opacity_reset_value)
    np.minimum(model.cloud.opacity_logits, cap, out=model.cloud.opacity_logits)
    model.opt.reset("cloud.opacity_logits")


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    model: Model
    history: list

    @property
    def cloud(self):
        return self.model.cloud

    @property
    def D_s(self):
        return self.model.D_s

    @property
    def D_m(self):
        return self.model.D_m


# wall-clock seconds stay in the in-memory history only, so logs are reproducible
HISTORY_FIELDS = ("iteration", "l_rgb", "l_mes", "psnr_s", "psnr_m", "n_gaussians")


def image_hiding(dataset: PairedDataset, config: TrainConfig) -> bool:
    """True when the message is a single image at the designated view."""
    return dataset.hidden_image is not None and (config.mode == "hider-image" or dataset.hidden is None)


def held_out_metrics(model: Model, dataset: PairedDataset):
    """Mean (PSNR_S, PSNR_M) over the held-out views.

    In image-hiding runs PSNR_M is measured at the designated view; it is
    NaN when the mode carries no message.
    """
    from .evaluate import psnr

    cfg = model.config
    _, test = dataset.split(cfg.holdout_fraction)
    single = image_hiding(dataset, cfg)
    ps, pm = [], []
    for v in test:
        I, Ms = predict_view(model, dataset.cameras[v], model.iteration)
        ps.append(psnr(I, dataset.images[v]))
        if Ms is not None and not single and dataset.hidden is not None:
            pm.append(np.mean([psnr(Ms[k], dataset.hidden[v][k]) for k in range(len(Ms))]))
    if single and cfg.mode != "baseline-3dgs":
        _, Ms = predict_view(model, dataset.cameras[dataset.designated_view], model.iteration)
        if Ms is not None:
            pm = [psnr(Ms[0], dataset.hidden_image)]
    return float(np.mean(ps)), (float(np.mean(pm)) if pm else float("nan"))


def fit(dataset: PairedDataset, config: TrainConfig, log_path=None, model: Model | None = None,
        progress=None) -> FitResult:
    """Train from scratch (or continue ``model``) for ``config.iterations`` steps."""
    if len(dataset) == 0:
        raise InvalidParameterError("dataset is empty")
    model = model or init_model(dataset, config)
    train_idx, _ = dataset.split(config.holdout_fraction)
    if config.mode == "hider-image" and dataset.designated_view not in train_idx:
        raise InvalidParameterError("the designated view must be a training view")
    rng = np.random.default_rng(config.seed + 3)
    history = []
    start = time.perf_counter()
    window = []

    def log():
        ps, pm = held_out_metrics(model, dataset)
        lr = float(np.mean([w.rgb for w in window])) if window else float("nan")
        lm = float(np.mean([w.mes for w in window])) if window else float("nan")
        row = dict(iteration=model.iteration, l_rgb=lr, l_mes=lm, psnr_s=ps, psnr_m=pm,
                   n_gaussians=len(model.cloud), seconds=time.perf_counter() - start)
        history.append(row)
        window.clear()
        if progress:
            progress(row)

    log()
    order = []
    stop = int(config.densify_stop_fraction * config.iterations)
    for _ in range(config.iterations):
        if not order:
            order = list(rng.permutation(train_idx))
        view = int(order.pop())
        window.append(train_step(model, dataset, view))
        it = model.iteration
        if (config.densify_interval > 0 and config.densify_start <= it <= stop
                and it % config.densify_interval == 0):
            model.cloud, model.stats, _ = adaptive_density_control(
                model.cloud, model.stats, config, it, model.opt, config.seed)
        if (config.opacity_reset_interval > 0 and config.densify_start <= it < stop
                and it % config.opacity_reset_interval == 0):
            reset_opacity(model)
        if config.log_interval > 0 and it % config.log_interval == 0 and it != config.iterations:
            log()
    if config.iterations > 0:
        log()
    if log_path is not None:
        write_history(history, log_path)
    return FitResult(model, history)


def write_history(history, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


# --------------------------------------------------------------------------
# RTWS


@dataclass
class RtwsResult:
    cloud: GaussianCloud
    E_w: ConvStack
    D_w: ConvStack
    history: list


def _mse_grad(pred, target):
    r = pred - target
    return float(np.mean(r.astype(np.float64) ** 2)), (2 * r / r.size).astype(pred.dtype)


def pretrain_watermark(images, W_cop, config: TrainConfig, seed=0):
    """Fit E_w and D_w so D_w(E_w(I)) = W_cop and D_w(I) = 0."""
    E_w = make_watermark_encoder(seed=seed + 11, width=config.rtws_watermark_width)
    D_w = make_stack(3, 3, depth=config.decoder_depth, width=config.rtws_watermark_width,
                     seed=seed + 12)
    opt = Adam()
    rng = np.random.default_rng(seed + 13)
    W32 = W_cop.astype(np.float32)
    zero = np.zeros_like(W32)
    for _ in range(config.rtws_pretrain_iterations):
        img = images[int(rng.integers(len(images)))].astype(np.float32)
        ce = []
        marked = watermark_embed(E_w, img, W32, ce)
        cm, cg = [], []
        out_m = D_w.forward(marked, cm)
        out_g = D_w.forward(img, cg)
        _, gm = _mse_grad(out_m, W32)
        _, gg = _mse_grad(out_g, zero)
        gw1, d_marked = D_w.backward(cm, gm)
        gw2, _ = D_w.backward(cg, gg)
        ge, _ = E_w.backward(ce, RESIDUAL_SCALE * d_marked)
        for i in range(len(D_w.weights)):
            opt.step(f"D_w.w{i}", D_w.weights[i], gw1[f"w{i}"] + gw2[f"w{i}"], config.lr_decoder)
            opt.step(f"D_w.b{i}", D_w.biases[i], gw1[f"b{i}"] + gw2[f"b{i}"], config.lr_decoder)
        for i in range(len(E_w.weights)):
            opt.step(f"E_w.w{i}", E_w.weights[i], ge[f"w{i}"], config.lr_decoder)
            opt.step(f"E_w.b{i}", E_w.biases[i], ge[f"b{i}"], config.lr_decoder)
    return E_w, D_w


def rtws_finetune(model: Model, dataset: PairedDataset, W_cop, config: TrainConfig | None = None,
                  progress=None) -> RtwsResult:
    """Fine-tune only the feature attribute (and D_w) for 2D-view watermark tracing.

    Training targets are the original views and their watermarked copies
    mixed half and half. The renders are pushed to decode to ``W_cop`` while
    ground truth decodes to black; positions, rotations, scales and
    opacities are never written.
    """
    cfg = config or model.config
    if model.config.mode not in FEATURE_MODES:
        raise InvalidParameterError("RTWS fine-tuning needs a feature-mode model")
    W_cop = np.asarray(W_cop, dtype=np.float64)
    cam0 = dataset.cameras[0]
    if W_cop.shape != (cam0.height, cam0.width, 3):
        raise ShapeMismatchError("W_cop must match the view resolution")
    train_idx, _ = dataset.split(cfg.holdout_fraction)
    E_w, D_w = pretrain_watermark([dataset.images[v] for v in train_idx], W_cop, cfg, cfg.seed)
    cloud = model.cloud.copy()
    D_s = model.D_s
    D_m = model.D_m
    W32 = W_cop.astype(np.float32)
    marked = {v: watermark_embed(E_w, dataset.images[v].astype(np.float32), W32).astype(np.float64)
              for v in train_idx}
    inner = Model(cloud, D_s, D_m, cfg.replace(mode=model.config.mode, L=model.config.L))
    inner.iteration = cfg.iterations
    rng = np.random.default_rng(cfg.seed + 17)
    history = []
    order = []
    for it in range(cfg.rtws_iterations):
        if not order:
            order = list(rng.permutation(train_idx))
        v = int(order.pop())
        cam = dataset.cameras[v]
        target = marked[v] if rng.random() < 0.5 else dataset.images[v]
        F, aux = rasterize_forward(cloud, cam, threads=cfg.threads)
        F32 = F.astype(np.float32)
        cs = []
        I = D_s.forward(F32, cs)
        l_rgb, g_I, _ = loss_rgb(I, target, cfg.gamma)
        l_cop, g_w, d_pred = loss_cop(D_w, I, dataset.images[v].astype(np.float32), W32)
        g_I = g_I + cfg.rtws_cop_weight * d_pred.astype(np.float64)
        _, dF = D_s.backward(cs, g_I)
        dF = dF.astype(np.float64)
        l_mes = 0.0
        M_gt = message_target(dataset, model.config, v)
        if D_m is not None and M_gt is not None:
            cm = []
            Mout = D_m.forward(F32, cm)
            L = Mout.shape[-1] // 3
            g_M = np.zeros(Mout.shape)
            for k in range(L):
                sl = slice(3 * k, 3 * k + 3)
                lk, gk, _ = loss_mes(Mout[..., sl], M_gt[..., sl], cfg.beta)
                l_mes += lk / L
                g_M[..., sl] = gk / L
            _, dFm = D_m.backward(cm, cfg.lam * g_M)
            dF = dF + dFm
        for name, val in (("l_rgb", l_rgb), ("l_cop", l_cop), ("l_mes", l_mes)):
            if not np.isfinite(val):
                raise TrainingAbort(it, v, name, val)
        g = rasterize_backward(cloud, cam, aux, dF, threads=cfg.threads)
        inner.opt.step("cloud.features", cloud.features, g.features, cfg.lr_feature)
        for i in range(len(D_w.weights)):
            inner.opt.step(f"D_w.w{i}", D_w.weights[i], g_w[f"w{i}"], cfg.lr_decoder)
            inner.opt.step(f"D_w.b{i}", D_w.biases[i], g_w[f"b{i}"], cfg.lr_decoder)
        history.append({"iteration": it + 1, "l_rgb": float(l_rgb), "l_cop": float(l_cop),
                        "l_mes": float(l_mes)})
        if progress and (it + 1) % max(1, cfg.log_interval) == 0:
            progress(history[-1])
    return RtwsResult(cloud, E_w, D_w, history)
