"""Fidelity metrics, pruning attacks, the wrong-decoder probe and steganalysis.

The detector is a two-member ensemble on 8-bit images: the chi-square
pairs-of-values attack and sample-pairs analysis, averaged into a score
in [0, 1]. ``roc_curve`` sweeps every distinct score as a threshold.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .errors import InvalidParameterError, ShapeMismatchError
from .nn import make_stack, ssim
from .scene import GaussianCloud

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


# --------------------------------------------------------------------------
# pruning


def _check_ratio(ratio):
    if not 0.0 <= ratio < 1.0:
        raise InvalidParameterError("prune ratio must lie in [0, 1)")


def prune_sequential(cloud: GaussianCloud, ratio: float) -> GaussianCloud:
    """Drop the floor(ratio * n) lowest-opacity Gaussians (ties: lower index first)."""
    _check_ratio(ratio)
    n = len(cloud)
    k = int(np.floor(ratio * n))
    if k == 0:
        return cloud.copy()
    order = np.lexsort((np.arange(n), cloud.opacity_logits))
    keep = np.sort(order[k:])
    return cloud.subset(keep)


def prune_random(cloud: GaussianCloud, ratio: float, seed: int = 0) -> GaussianCloud:
    _check_ratio(ratio)
    n = len(cloud)
    k = int(np.floor(ratio * n))
    if k == 0:
        return cloud.copy()
    drop = np.random.default_rng(seed).choice(n, size=k, replace=False)
    keep = np.setdiff1d(np.arange(n), drop)
    return cloud.subset(keep)


# --------------------------------------------------------------------------
# metrics report


@dataclass
class MetricsReport:
    views: list
    psnr_s: list
    ssim_s: list
    message_views: list = field(default_factory=list)
    psnr_m: list = field(default_factory=list)
    ssim_m: list = field(default_factory=list)
    psnr_m_streams: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    @staticmethod
    def _mean(xs):
        return float(np.mean(xs)) if len(xs) else float("nan")

    @property
    def mean_psnr_s(self):
        return self._mean(self.psnr_s)

    @property
    def mean_ssim_s(self):
        return self._mean(self.ssim_s)

    @property
    def mean_psnr_m(self):
        return self._mean(self.psnr_m)

    @property
    def mean_ssim_m(self):
        return self._mean(self.ssim_m)

    @property
    def mean_seconds(self):
        return self._mean(self.seconds)

    def stream_means(self):
        """Mean PSNR per hidden stream (multi-scene runs)."""
        if not self.psnr_m_streams:
            return []
        return [float(x) for x in np.mean(np.array(self.psnr_m_streams), axis=0)]

    def summary(self):
        return {
            "psnr_s": self.mean_psnr_s, "ssim_s": self.mean_ssim_s,
            "psnr_m": self.mean_psnr_m, "ssim_m": self.mean_ssim_m,
            "psnr_m_streams": self.stream_means(), "n_views": len(self.views),
        }

    def timings(self):
        """Wall-clock render+decode seconds; kept apart from the reproducible fields."""
        return {"views": list(self.views), "seconds": list(self.seconds),
                "seconds_per_view": self.mean_seconds}

    def write_csv(self, path):
        msg = dict(zip(self.message_views, zip(self.psnr_m, self.ssim_m)))
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["view", "psnr_s", "ssim_s", "psnr_m", "ssim_m"])
            for i, v in enumerate(self.views):
                pm, sm = msg.get(v, (float("nan"), float("nan")))
                w.writerow([v, f"{self.psnr_s[i]:.6f}", f"{self.ssim_s[i]:.6f}", f"{pm:.6f}", f"{sm:.6f}"])


def evaluate(model, dataset, views=None, message_decoder=None) -> MetricsReport:
    """Render the given views (held-out by default) and score both streams.

    ``message_decoder`` swaps in a different D_m (wrong-decoder probe).
    """
    from .train import image_hiding, predict_view

    cfg = model.config
    if views is None:
        _, views = dataset.split(cfg.holdout_fraction)
    views = list(views)
    saved = model.D_m
    if message_decoder is not None:
        model.D_m = message_decoder
    try:
        rep = MetricsReport(views=views, psnr_s=[], ssim_s=[])
        single = image_hiding(dataset, cfg)
        for v in views:
            t0 = time.perf_counter()
            I, Ms = predict_view(model, dataset.cameras[v])
            rep.seconds.append(time.perf_counter() - t0)
            rep.psnr_s.append(psnr(I, dataset.images[v]))
            rep.ssim_s.append(float(ssim(I, dataset.images[v])))
            if Ms is not None and not single and dataset.hidden is not None:
                ps = [psnr(Ms[k], dataset.hidden[v][k]) for k in range(len(Ms))]
                ss = [float(ssim(Ms[k], dataset.hidden[v][k])) for k in range(len(Ms))]
                rep.message_views.append(v)
                rep.psnr_m.append(float(np.mean(ps)))
                rep.ssim_m.append(float(np.mean(ss)))
                rep.psnr_m_streams.append(ps)
        dv = dataset.designated_view
        Ms = predict_view(model, dataset.cameras[dv])[1] if single else None
        if Ms is not None:
            rep.message_views.append(dv)
            rep.psnr_m.append(psnr(Ms[0], dataset.hidden_image))
            rep.ssim_m.append(float(ssim(Ms[0], dataset.hidden_image)))
            rep.psnr_m_streams.append([rep.psnr_m[-1]])
    finally:
        model.D_m = saved
    return rep


def wrong_decoder_test(model, dataset, seed: int = 0, views=None, random_decoder=None):
    """(PSNR_M with the trained D_m, PSNR_M with a freshly initialised one)."""
    D_m = model.D_m
    if D_m is None:
        raise InvalidParameterError("model has no message decoder")
    if random_decoder is None:
        depth = len(D_m.weights)
        width = D_m.weights[0].shape[3] if depth > 1 else 64
        random_decoder = make_stack(D_m.in_channels, D_m.out_channels, depth=depth, width=width,
                                    seed=seed, dtype=D_m.dtype, output=D_m.output)
    trained = evaluate(model, dataset, views)
    rand = evaluate(model, dataset, views, message_decoder=random_decoder)
    return trained.mean_psnr_m, rand.mean_psnr_m


# --------------------------------------------------------------------------
# steganalysis


def quantize(img):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.int64)


def chi_square_score(q):
    """Pairs-of-values attack: p-value that the LSB pairs are equalised.

    Near 1 when the histogram bins 2k and 2k+1 look equal (random LSBs),
    near 0 for natural images. Bins with no mass are skipped; with no
    usable pair the score is 0.
    """
    q = np.asarray(q)
    stat, dof = 0.0, 0
    for ch in range(q.shape[-1] if q.ndim == 3 else 1):
        vals = q[..., ch] if q.ndim == 3 else q
        h = np.bincount(vals.ravel(), minlength=256)[:256].astype(np.float64)
        even, odd = h[0::2], h[1::2]
        expected = 0.5 * (even + odd)
        ok = expected > 0
        stat += float(np.sum((even[ok] - expected[ok]) ** 2 / expected[ok]))
        dof += int(ok.sum())
    dof -= 1
    if dof < 1:
        return 0.0
    return float(chi2.sf(stat, dof))


def sample_pairs_score(q):
    """Sample-pairs estimate of the LSB embedding rate, clipped to [0, 1].

    Uses horizontally adjacent pixel pairs in each channel.
    """
    q = np.asarray(q)
    if q.ndim == 2:
        q = q[..., None]
    u = q[:, :-1, :].ravel()
    v = q[:, 1:, :].ravel()
    P = u.size
    if P == 0:
        return 0.0
    same_pair = (u >> 1) == (v >> 1)
    W = float(np.sum(same_pair & (u != v)))
    Z = float(np.sum(u == v))
    v_even = (v & 1) == 0
    X = float(np.sum((v_even & (u < v)) | (~v_even & (u > v))))
    Y = float(np.sum((v_even & (u > v)) | (~v_even & (u < v))))
    a = 0.5 * (W + Z)
    b = 2.0 * X - P
    c = Y - X
    if a == 0:
        est = c / b if b != 0 else 0.0
    else:
        disc = b * b - 4 * a * c
        if disc >= 0:
            r1 = (-b + np.sqrt(disc)) / (2 * a)
            r2 = (-b - np.sqrt(disc)) / (2 * a)
            est = r1 if abs(r1) <= abs(r2) else r2
        else:
            est = c / b if b != 0 else 0.0
    return float(np.clip(est, 0.0, 1.0))


def detector_score(img) -> float:
    """Mean of the chi-square and sample-pairs scores on the 8-bit image."""
    q = quantize(img)
    return 0.5 * (chi_square_score(q) + sample_pairs_score(q))


@dataclass
class DetectionReport:
    pos: list
    neg: list
    thresholds: list
    fpr: list
    tpr: list
    auc: float

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, a, b in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])


def roc_curve(pos_scores, neg_scores) -> DetectionReport:
    """ROC over every distinct score (predict positive when score >= threshold).

    The curve starts at (0, 0) with threshold +inf; AUC is the trapezoid
    area, computed on integer counts so ties score exactly one half.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise InvalidParameterError("roc_curve needs non-empty positive and negative sets")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise InvalidParameterError("scores must be finite")
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    ps = np.sort(pos)
    ns = np.sort(neg)
    tp = pos.size - np.searchsorted(ps, thr, side="left")
    fp = neg.size - np.searchsorted(ns, thr, side="left")
    tp = np.concatenate([[0], tp]).astype(np.int64)
    fp = np.concatenate([[0], fp]).astype(np.int64)
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * pos.size * neg.size)
    return DetectionReport(
        pos=pos.tolist(), neg=neg.tolist(),
        thresholds=[float("inf")] + thr.tolist(),
        fpr=(fp / neg.size).tolist(), tpr=(tp / pos.size).tolist(), auc=float(auc),
    )


def auc_bruteforce(pos_scores, neg_scores) -> float:
    """P(pos > neg) + P(pos == neg) / 2 by explicit pair counting."""
    greater = equal = 0
    for p in pos_scores:
        for n in neg_scores:
            if p > n:
                greater += 1
            elif p == n:
                equal += 1
    return (2 * greater + equal) / (2 * len(pos_scores) * len(neg_scores))


def detection_sets(models_and_data):
    """Detector scores for renders (positive) and ground truth (negative).

    ``models_and_data`` is an iterable of (model, dataset) pairs; every
    held-out view contributes one image to each set.
    """
    from .train import predict_view

    pos, neg = [], []
    for model, dataset in models_and_data:
        _, test = dataset.split(model.config.holdout_fraction)
        for v in test:
            I, _ = predict_view(model, dataset.cameras[v])
            pos.append(detector_score(I))
            neg.append(detector_score(dataset.images[v]))
    return pos, neg


def write_summary(path, payload: dict):
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True, default=float)
