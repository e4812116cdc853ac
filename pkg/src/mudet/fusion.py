"""Cross-modal feature fusion.

Cross-attention pulls height-stream context into the RGB stream (queries
and values from RGB, keys from the height map). Per-modality confidence
heads then split locations into easy / RGB-only-hard / height-only-hard
masks, and the masked weighted sum assembles the fused feature map. The
binary masks are recomputed every forward pass and never carry gradient;
the (2 - Conf) factors do.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (ConvBlockParams, DimensionError, Tensor,
                     conv_block_forward, matmul, mul_spatial, reshape,
                     sigmoid, softmax_rows, transpose2d)


@dataclass
class CrossAttentionParams:
    """Three 1x1 linear projections (query, key, value) plus the key width."""

    g1: ConvBlockParams
    g2: ConvBlockParams
    g3: ConvBlockParams
    d: int

    def __post_init__(self):
        for name, g in (("g1", self.g1), ("g2", self.g2), ("g3", self.g3)):
            if g.kernel_size != 1:
                raise ValueError(f"{name} must be a 1x1 convolution")
        if self.g1.weight.shape[1] != self.g3.weight.shape[1]:
            raise ValueError("g1 and g3 must consume the same (RGB) channel count")
        if self.g1.weight.shape[0] != self.g2.weight.shape[0]:
            raise ValueError("g1 and g2 must produce equal channel counts")
        if self.d != self.g1.weight.shape[0]:
            raise ValueError(f"d={self.d} must equal the projection width "
                             f"{self.g1.weight.shape[0]}")

    def parameters(self):
        return self.g1.parameters() + self.g2.parameters() + self.g3.parameters()


@dataclass
class ConfidencePair:
    conf_rgb: Tensor
    conf_h: Tensor
    theta: float

    def __post_init__(self):
        if not (0.0 < self.theta < 1.0):
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")


@dataclass
class MaskTriple:
    """Binary easy / RGB-hard / height-hard location masks, mutually exclusive."""

    easy: np.ndarray
    rgb_only: np.ndarray
    h_only: np.ndarray

    def __post_init__(self):
        for m in (self.easy, self.rgb_only, self.h_only):
            vals = np.unique(m)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise ValueError("masks must be binary")
        if np.any(self.easy + self.rgb_only + self.h_only > 1.0):
            raise ValueError("masks must be mutually exclusive")


def _flatten_tokens(x: Tensor) -> Tensor:
    """(C, M, N) -> (M*N, C) row-major token sequence."""
    c, m, n = x.shape
    return transpose2d(reshape(x, c, m * n))


def cross_attention(z_rgb: Tensor, z_h: Tensor, p: CrossAttentionParams) -> Tensor:
    """softmax((g1(Z_rgb) g2(Z_h)^T) / sqrt(d)) g3(Z_rgb), spatially flattened."""
    if z_rgb.shape[1:] != z_h.shape[1:]:
        raise DimensionError(
            f"modalities must be co-registered: {z_rgb.shape} vs {z_h.shape}")
    q = _flatten_tokens(conv_block_forward(z_rgb, p.g1))
    k = _flatten_tokens(conv_block_forward(z_h, p.g2))
    v = _flatten_tokens(conv_block_forward(z_rgb, p.g3))
    scores = matmul(q, transpose2d(k)) * (1.0 / math.sqrt(p.d))
    attn = softmax_rows(scores)
    mixed = matmul(attn, v)
    c_out = p.g3.weight.shape[0]
    _, m, n = z_rgb.shape
    return reshape(transpose2d(mixed), c_out, m, n)


def confidence_maps(z_rgb: Tensor, z_h: Tensor, head_rgb: ConvBlockParams,
                    head_h: ConvBlockParams, theta: float = 0.2) -> ConfidencePair:
    """Per-modality objectness confidence, sigmoid of a 1x1 head."""
    for name, head in (("head_rgb", head_rgb), ("head_h", head_h)):
        if head.weight.shape[0] != 1:
            raise ValueError(f"{name} must produce a single channel, "
                             f"got {head.weight.shape[0]}")
        if head.kernel_size != 1:
            raise ValueError(f"{name} must be a 1x1 convolution")
    cr = sigmoid(conv_block_forward(z_rgb, head_rgb))
    ch = sigmoid(conv_block_forward(z_h, head_h))
    m, n = z_rgb.shape[1:]
    return ConfidencePair(conf_rgb=reshape(cr, m, n), conf_h=reshape(ch, m, n),
                          theta=theta)


def build_masks(conf: ConfidencePair) -> MaskTriple:
    """Threshold the confidence pair; equality with theta counts as not above."""
    cr = conf.conf_rgb.data
    ch = conf.conf_h.data
    t = conf.theta
    easy = (cr > t) & (ch > t)
    rgb_only = (cr > t) & (ch < t)
    h_only = (cr < t) & (ch > t)
    return MaskTriple(easy=easy.astype(np.float64),
                      rgb_only=rgb_only.astype(np.float64),
                      h_only=h_only.astype(np.float64))


def fuse(z_mix: Tensor, z_rgb: Tensor, z_h: Tensor, masks: MaskTriple,
         conf: ConfidencePair) -> Tensor:
    """Masked weighted fusion; zero wherever no mask fires.

    Z = easy * (mix + rgb + h)
      + rgb_hard * (mix + rgb) * (2 - Conf_rgb)
      + h_hard * (mix + h) * (2 - Conf_h)
    """
    if not (z_mix.shape == z_rgb.shape == z_h.shape):
        raise DimensionError(
            f"feature shapes differ: {z_mix.shape}, {z_rgb.shape}, {z_h.shape}")
    if masks.easy.shape != z_mix.shape[1:] or conf.conf_rgb.shape != z_mix.shape[1:]:
        raise DimensionError("mask/confidence spatial extent does not match features")
    easy_term = mul_spatial(z_mix + z_rgb + z_h, Tensor(masks.easy))
    rgb_term = mul_spatial(mul_spatial(z_mix + z_rgb, 2.0 - conf.conf_rgb),
                           Tensor(masks.rgb_only))
    h_term = mul_spatial(mul_spatial(z_mix + z_h, 2.0 - conf.conf_h),
                         Tensor(masks.h_only))
    return easy_term + rgb_term + h_term
