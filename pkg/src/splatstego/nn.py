"""Small 3x3 convolution stacks with hand-written backprop, SSIM and losses.

Images are channel-last (H, W, C). Convolutions use stride 1 and zero
padding 1, so spatial size is preserved through a stack.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import InvalidParameterError, MissingCacheError, ShapeMismatchError

HIDDEN_WIDTH = 64
DEFAULT_DEPTH = 5

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@njit(cache=True, nogil=True)
def _im2col(x):
    """(H, W, C) -> (H*W, 9*C) patches, zero padded, tap order (row, col)."""
    H, W, C = x.shape
    out = np.zeros((H * W, 9 * C), dtype=x.dtype)
    for y in range(H):
        for u in range(W):
            r = y * W + u
            for i in range(3):
                yy = y + i - 1
                if yy < 0 or yy >= H:
                    continue
                for j in range(3):
                    xx = u + j - 1
                    if xx < 0 or xx >= W:
                        continue
                    base = (3 * i + j) * C
                    for c in range(C):
                        out[r, base + c] = x[yy, xx, c]
    return out


@njit(cache=True, nogil=True)
def _col2im(dcols, H, W, C):
    """Adjoint of :func:`_im2col`."""
    out = np.zeros((H, W, C), dtype=dcols.dtype)
    for y in range(H):
        for u in range(W):
            r = y * W + u
            for i in range(3):
                yy = y + i - 1
                if yy < 0 or yy >= H:
                    continue
                for j in range(3):
                    xx = u + j - 1
                    if xx < 0 or xx >= W:
                        continue
                    base = (3 * i + j) * C
                    for c in range(C):
                        out[yy, xx, c] += dcols[r, base + c]
    return out


@dataclass
class ConvStack:
    """Conv+ReLU layers; the last layer has no ReLU.

    ``weights[i]`` has shape (3, 3, c_in, c_out). ``output`` selects the
    final nonlinearity: ``"sigmoid"`` for decoders (images in [0, 1]),
    ``"tanh"`` for bounded residuals, ``"linear"`` for none.
    """

    weights: list
    biases: list
    output: str = "sigmoid"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidParameterError("need one bias per weight and at least one layer")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[3] != b.shape[2]:
                raise InvalidParameterError("adjacent layer channel counts do not match")
        if self.output not in ("sigmoid", "tanh", "linear"):
            raise InvalidParameterError(f"unknown output activation {self.output!r}")

    @property
    def in_channels(self):
        return self.weights[0].shape[2]

    @property
    def out_channels(self):
        return self.weights[-1].shape[3]

    @property
    def topology(self):
        return [self.in_channels] + [w.shape[3] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def copy(self):
        return ConvStack([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.output)

    def astype(self, dtype):
        return ConvStack([w.astype(dtype) for w in self.weights],
                         [b.astype(dtype) for b in self.biases], self.output)

    def forward(self, x, cache: list | None = None):
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ShapeMismatchError(
                f"input has {x.shape[-1]} channels, stack expects {self.in_channels}"
            )
        H, W, _ = x.shape
        h = np.ascontiguousarray(x, dtype=self.dtype)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cols = _im2col(np.ascontiguousarray(h))
            z = cols @ w.reshape(-1, w.shape[3]) + b
            if cache is not None:
                cache.append(cols)
            if i < n - 1:
                h = np.maximum(z, 0).reshape(H, W, -1)
            else:
                h = z.reshape(H, W, -1)
        if self.output == "sigmoid":
            h = sigmoid(h)
        elif self.output == "tanh":
            h = np.tanh(h)
        if cache is not None:
            cache.append((H, W, h))
        return h

    def backward(self, cache, grad_out):
        """Return ({param name: grad}, grad wrt input) for a cached forward."""
        if not cache:
            raise MissingCacheError("backward called without a cached forward pass")
        H, W, y = cache[-1]
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.shape != y.shape:
            raise ShapeMismatchError("output gradient shape mismatch")
        if self.output == "sigmoid":
            g = g * y * (1 - y)
        elif self.output == "tanh":
            g = g * (1 - y * y)
        g = g.reshape(H * W, -1)
        grads = {}
        n = len(self.weights)
        for i in range(n - 1, -1, -1):
            w = self.weights[i]
            cols = cache[i]
            wm = w.reshape(-1, w.shape[3])
            grads[f"w{i}"] = (cols.T @ g).reshape(w.shape)
            grads[f"b{i}"] = g.sum(axis=0)
            dcols = np.ascontiguousarray(g @ wm.T)
            dx = _col2im(dcols, H, W, w.shape[2])
            if i > 0:
                # ReLU mask: the layer input is the previous activation, which is
                # the centre tap of this layer's im2col block
                c_in = w.shape[2]
                prev = cols[:, 4 * c_in:5 * c_in].reshape(H, W, c_in)
                dx = dx * (prev > 0)
            g = dx.reshape(H * W, -1)
        return grads, g.reshape(H, W, -1)


def make_stack(in_ch, out_ch, depth=DEFAULT_DEPTH, width=HIDDEN_WIDTH, seed=0,
               dtype=np.float32, output="sigmoid") -> ConvStack:
    """Kaiming-style (fan-in) initialised stack, deterministic in ``seed``."""
    if depth < 1:
        raise InvalidParameterError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    chans = [in_ch] + [width] * (depth - 1) + [out_ch]
    weights, biases = [], []
    for i in range(depth):
        fan_in = 9 * chans[i]
        std = np.sqrt(2.0 / fan_in) if i < depth - 1 else np.sqrt(1.0 / fan_in)
        weights.append((rng.standard_normal((3, 3, chans[i], chans[i + 1])) * std).astype(dtype))
        biases.append(np.zeros(chans[i + 1], dtype=dtype))
    return ConvStack(weights, biases, output)


def decoder_forward(stack: ConvStack, F, cache: list | None = None):
    return stack.forward(F, cache)


def decoder_backward(stack: ConvStack, cache, dL_dout):
    return stack.backward(cache, dL_dout)


# --------------------------------------------------------------------------
# SSIM


def _gauss_window():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_FILTERS: dict = {}


def _filter_matrix(n):
    """Dense 1-D operator: symmetric padding then 'valid' Gaussian correlation."""
    if n not in _FILTERS:
        r = SSIM_WINDOW // 2
        w = _gauss_window()
        src = np.pad(np.arange(n), r, mode="symmetric")
        K = np.zeros((n, n))
        for i in range(n):
            np.add.at(K[i], src[i:i + SSIM_WINDOW], w)
        _FILTERS[n] = K
    return _FILTERS[n]


def _blur(x, adjoint=False):
    KH = _filter_matrix(x.shape[0])
    KW = _filter_matrix(x.shape[1])
    if adjoint:
        KH, KW = KH.T, KW.T
    y = np.tensordot(KH, x, axes=(1, 0))
    return np.tensordot(KW, y, axes=(1, 1)).transpose(1, 0, 2)


def ssim(a, b, return_grad=False):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5).

    With ``return_grad`` also returns dSSIM/da.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    shape = a.shape
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    mu_a, mu_b = _blur(a), _blur(b)
    e_aa, e_bb, e_ab = _blur(a * a), _blur(b * b), _blur(a * b)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * cov + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    smap = A1 * A2 / (B1 * B2)
    value = float(smap.mean())
    if not return_grad:
        return value
    g = 1.0 / smap.size
    d_mu_a = g * (2 * mu_b * A2 / (B1 * B2) - 2 * mu_b * A1 / (B1 * B2)
                  - smap * (2 * mu_a / B1 - 2 * mu_a / B2))
    d_eaa = g * (-smap / B2)
    d_eab = g * (2 * A1 / (B1 * B2))
    grad = _blur(d_mu_a, True) + 2 * a * _blur(d_eaa, True) + b * _blur(d_eab, True)
    return value, grad.reshape(shape)


# --------------------------------------------------------------------------
# losses


@dataclass
class LossReport:
    rgb: float = 0.0
    mes: float = 0.0
    total: float = 0.0
    cop: float = 0.0
    parts: dict = field(default_factory=dict)


def photometric_loss(pred, gt, weight):
    """(1 - w) * L1 + w * (1 - SSIM); returns (value, dL/dpred, parts)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"loss shapes differ: {pred.shape} vs {gt.shape}")
    if not 0.0 <= weight <= 1.0:
        raise InvalidParameterError("SSIM weight must lie in [0, 1]")
    diff = pred - gt
    l1 = float(np.abs(diff).mean())
    grad = (1 - weight) * np.sign(diff) / diff.size
    parts = {"l1": l1}
    if weight > 0:
        s, gs = ssim(pred, gt, return_grad=True)
        parts["ssim"] = s
        value = (1 - weight) * l1 + weight * (1 - s)
        grad = grad - weight * gs
    else:
        value = l1
    return value, grad, parts


def loss_rgb(I_pred, I_gt, gamma=0.2):
    return photometric_loss(I_pred, I_gt, gamma)


def loss_mes(M_pred, M_gt, beta=0.2):
    return photometric_loss(M_pred, M_gt, beta)


def loss_total(l_rgb, l_mes, lam):
    if lam < 0:
        raise InvalidParameterError("lambda must be non-negative")
    return l_rgb + lam * l_mes


def loss_cop(D_w: ConvStack, I_pred, I_gt, W_cop):
    """Watermark decoder objective: W_cop on renders, black on ground truth.

    Squared errors are averaged per element. Returns (value, grads for D_w
    parameters, dL/dI_pred).
    """
    if not (np.shape(I_pred) == np.shape(I_gt) == np.shape(W_cop)):
        raise ShapeMismatchError("I_pred, I_gt and W_cop must share a shape")
    c1, c2 = [], []
    out_p = D_w.forward(I_pred, c1)
    out_g = D_w.forward(I_gt, c2)
    rp = out_p - W_cop
    rg = out_g
    n = rp.size
    value = float(np.sum(rp.astype(np.float64) ** 2) / n + np.sum(rg.astype(np.float64) ** 2) / n)
    gp, d_pred = D_w.backward(c1, 2 * rp / n)
    gg, _ = D_w.backward(c2, 2 * rg / n)
    grads = {k: gp[k] + gg[k] for k in gp}
    return value, grads, d_pred


# --------------------------------------------------------------------------
# watermark embedder


RESIDUAL_SCALE = 0.02


def make_watermark_encoder(seed=0, width=32, dtype=np.float32) -> ConvStack:
    """3-layer conv stack on [image, watermark] producing a tanh residual."""
    return make_stack(6, 3, depth=3, width=width, seed=seed, dtype=dtype, output="tanh")


def watermark_embed(E_w: ConvStack, image, W_cop, cache: list | None = None):
    x = np.concatenate([image, W_cop], axis=-1).astype(E_w.dtype)
    return image + RESIDUAL_SCALE * E_w.forward(x, cache)
