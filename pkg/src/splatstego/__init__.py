"""Steganography for Gaussian splatting scenes.

A cloud of 3D Gaussians carries a learned feature vector per point instead
of colour coefficients. A public scene decoder turns the rendered feature
image into the visible view; a private message decoder turns the same
render into hidden content.
"""
from .camera import Camera, frustum_cull, project_covariance, project_mean
from .nn import ConvStack, make_stack, ssim
from .rasterizer import (
    NO_SKIP,
    RasterSettings,
    rasterize_backward,
    rasterize_bruteforce,
    rasterize_forward,
    rasterize_rgb,
)
from .scene import GaussianCloud, init_cloud
from .train import PairedDataset, TrainConfig, adaptive_density_control, fit, rtws_finetune, train_step

__all__ = [
    "Camera",
    "ConvStack",
    "GaussianCloud",
    "NO_SKIP",
    "PairedDataset",
    "RasterSettings",
    "TrainConfig",
    "adaptive_density_control",
    "fit",
    "frustum_cull",
    "init_cloud",
    "make_stack",
    "project_covariance",
    "project_mean",
    "rasterize_backward",
    "rasterize_bruteforce",
    "rasterize_forward",
    "rasterize_rgb",
    "rtws_finetune",
    "ssim",
    "train_step",
]
