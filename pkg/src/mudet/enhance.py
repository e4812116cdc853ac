"""Unimodal hierarchical enhancement of the two input streams.

RGB gets power-law gamma boosts of its grayscale image at several
coefficients; the height map gets banded grayscale slicing that keeps a
foreground pass band and replaces both background bands with constants.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class EnhancementRangeError(ValueError):
    """Input pixel outside the range the transform is defined on."""


@dataclass(frozen=True)
class GammaConfig:
    A: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.A <= 0 or self.gamma <= 0:
            raise ValueError(f"A and gamma must be positive, got A={self.A} gamma={self.gamma}")


@dataclass(frozen=True)
class SliceConfig:
    """Banded height slicing: [c_min, i0] -> h1, (i0, i1] kept, (i1, c_max] -> h2."""

    h1: float = 0.0
    h2: float = 0.0
    i0: float = 0.5
    i1: float = 6.0
    c_min: float = 0.0
    c_max: float = 20.0

    def __post_init__(self):
        if not (self.c_min <= self.i0 <= self.i1 <= self.c_max):
            raise ValueError(
                f"slice thresholds must satisfy c_min <= i0 <= i1 <= c_max, got "
                f"{self.c_min}, {self.i0}, {self.i1}, {self.c_max}")


@dataclass(frozen=True)
class UniEnhConfig:
    A: float = 1.0
    gamma_coeffs: tuple = (0.5, 1.5)
    slice: SliceConfig = field(default_factory=SliceConfig)


def _unwrap(img):
    if isinstance(img, Tensor):
        return img.data, True
    return np.asarray(img, dtype=np.float64), False


def _rewrap(data, was_tensor):
    return Tensor(data) if was_tensor else data


def _check_range(data, lo, hi, what):
    bad = (data < lo) | (data > hi)
    if np.any(bad):
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise EnhancementRangeError(
            f"{what}: value {data[idx]} at index {idx} outside [{lo}, {hi}]")


def gamma_transform(img, cfg: GammaConfig):
    """Map each normalized value v to (A*v)**gamma, clamped back to [0, 1]."""
    data, was_tensor = _unwrap(img)
    _check_range(data, 0.0, 1.0, "gamma_transform")
    out = np.clip((cfg.A * data) ** cfg.gamma, 0.0, 1.0)
    return _rewrap(out, was_tensor)


def grayscale_slice(hmap, cfg: SliceConfig):
    """Apply the three-band height slicing; the pass band owns its upper edge."""
    data, was_tensor = _unwrap(hmap)
    _check_range(data, cfg.c_min, cfg.c_max, "grayscale_slice")
    out = np.where(data <= cfg.i0, cfg.h1, np.where(data <= cfg.i1, data, cfg.h2))
    return _rewrap(out, was_tensor)


def hierarchical_enhance_rgb(rgb, cfg: UniEnhConfig):
    """Stack the raw RGB planes with one gamma-boosted grayscale plane per coefficient.

    Input (3, M, N) in [0, 1]; output (3 + len(gamma_coeffs), M, N).
    """
    data, was_tensor = _unwrap(rgb)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"expected (3, M, N) RGB input, got shape {data.shape}")
    gray = data.mean(axis=0)
    planes = [data]
    for g in cfg.gamma_coeffs:
        planes.append(gamma_transform(gray, GammaConfig(cfg.A, g))[None])
    return _rewrap(np.concatenate(planes, axis=0), was_tensor)


def enhance_height(hmap, cfg: UniEnhConfig):
    """Slice the height map and rescale by the pass-band top into roughly [0, 1]."""
    data, was_tensor = _unwrap(hmap)
    if data.ndim == 2:
        data = data[None]
    sliced = grayscale_slice(data, cfg.slice)
    scale = cfg.slice.i1 if cfg.slice.i1 > 0 else 1.0
    return _rewrap(sliced / scale, was_tensor)
