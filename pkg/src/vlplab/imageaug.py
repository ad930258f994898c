"""SimCLR-style image views on (3, H, W) float arrays in [0, 1].

Every random transform draws its application coin first and its parameters
only when it applies, so a fixed generator state reproduces the view exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])

# RGB <-> YIQ; hue rotation turns the (I, Q) chroma plane.
_YIQ = np.array([[0.299, 0.587, 0.114],
                 [0.595716, -0.274453, -0.321263],
                 [0.211456, -0.522591, 0.311135]])
_YIQ_INV = np.linalg.inv(_YIQ)


class ImageTooSmall(ValueError):
    pass


def _interp_matrices(starts, lengths, out: int, size: int) -> np.ndarray:
    """Bilinear resampling of each ``[start, start + length)`` onto ``out`` samples (half-pixel centers)."""
    starts = np.asarray(starts, dtype=float)[:, None]
    lengths = np.asarray(lengths, dtype=float)[:, None]
    last = starts + lengths - 1
    pos = np.clip(starts + (np.arange(out) + 0.5) * (lengths / out) - 0.5, starts, last)
    lo = np.floor(pos)
    hi = np.minimum(lo + 1, last)
    w = pos - lo
    b = len(starts)
    m = np.zeros((b, out, size))
    bi, ri = np.arange(b)[:, None], np.arange(out)[None, :]
    m[bi, ri, lo.astype(int)] = 1.0 - w
    m[bi, ri, hi.astype(int)] += w
    return m


def _interp_matrix(start: int, length: int, out: int, size: int) -> np.ndarray:
    return _interp_matrices([start], [length], out, size)[0]


def resized_crop(img: np.ndarray, top: int, left: int, h: int, w: int, out_size: int) -> np.ndarray:
    _, height, width = img.shape
    ry = _interp_matrix(top, h, out_size, height)
    rx = _interp_matrix(left, w, out_size, width)
    return ry @ img @ rx.T


def sample_crop(height: int, width: int, scale, rng: np.random.Generator,
                ratio=(3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    lo, hi = scale
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"bad crop scale {scale}")
    if height < 1 or width < 1:
        raise ImageTooSmall(f"image of size {height}x{width}")
    area = height * width
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fallback: central crop at the closest admissible aspect ratio
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def random_resized_crop(img: np.ndarray, out_size: int, scale, rng: np.random.Generator,
                        ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    if out_size < 2:
        raise ValueError("out_size must be at least 2")
    top, left, h, w = sample_crop(img.shape[1], img.shape[2], scale, rng, ratio)
    return np.clip(resized_crop(img, top, left, h, w, out_size), 0.0, 1.0)


def luma(img: np.ndarray, axis: int = 0) -> np.ndarray:
    """BT.601 luma, written so that a gray pixel maps exactly to itself."""
    r, g, b = np.moveaxis(img, axis, 0)
    return r + LUMA[1] * (g - r) + LUMA[2] * (b - r)


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img, factor):
    return np.clip(factor * img + (1.0 - factor) * luma(img).mean(), 0.0, 1.0)


def adjust_saturation(img, factor):
    return np.clip(factor * img + (1.0 - factor) * luma(img)[None], 0.0, 1.0)


def adjust_hue(img, turns):
    theta = 2.0 * math.pi * turns
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    m = _YIQ_INV @ rot @ _YIQ
    return np.clip(np.tensordot(m, img, axes=1), 0.0, 1.0)


JITTER_OPS = ("brightness", "contrast", "saturation", "hue")


def draw_jitter(rng: np.random.Generator, contrast: float = 0.4, brightness: float = 0.4,
                saturation: float = 0.4, hue: float = 0.1, prob: float = 0.8):
    """Coin, then a random order of the four adjustments with their factors; None if skipped."""
    if rng.random() >= prob:
        return None
    steps = []
    for op in rng.permutation(4):
        if op == 0:
            steps.append((0, rng.uniform(max(0.0, 1 - brightness), 1 + brightness)))
        elif op == 1:
            steps.append((1, rng.uniform(max(0.0, 1 - contrast), 1 + contrast)))
        elif op == 2:
            steps.append((2, rng.uniform(max(0.0, 1 - saturation), 1 + saturation)))
        else:
            steps.append((3, rng.uniform(-hue, hue)))
    return tuple(steps)


_ADJUST = (adjust_brightness, adjust_contrast, adjust_saturation, adjust_hue)


def color_jitter(img: np.ndarray, rng: np.random.Generator, contrast: float = 0.4,
                 brightness: float = 0.4, saturation: float = 0.4, hue: float = 0.1,
                 prob: float = 0.8) -> np.ndarray:
    """With probability ``prob``, apply the four adjustments in a random order."""
    steps = draw_jitter(rng, contrast, brightness, saturation, hue, prob)
    out = img
    for op, factor in steps or ():
        out = _ADJUST[op](out, factor)
    return out


def to_grayscale(img: np.ndarray, rng: np.random.Generator, prob: float = 0.2) -> np.ndarray:
    if rng.random() >= prob:
        return img
    return np.broadcast_to(luma(img), img.shape).copy()


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    """Convolution matrix with half-sample symmetric reflection at both edges."""
    radius = len(kernel) // 2
    period = 2 * n
    src = (np.arange(n)[:, None] + np.arange(-radius, radius + 1)[None, :]) % period
    src = np.where(src >= n, period - 1 - src, src)
    flat = (np.arange(n)[:, None] * n + src).ravel()
    weights = np.broadcast_to(kernel, src.shape).ravel()
    return np.bincount(flat, weights, minlength=n * n).reshape(n, n)


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    my = _blur_matrix(img.shape[1], k)
    mx = my if img.shape[1] == img.shape[2] else _blur_matrix(img.shape[2], k)
    return np.clip(my @ img @ mx.T, 0.0, 1.0)


def gaussian_blur(img: np.ndarray, rng: np.random.Generator, sigma_range=(0.1, 2.0),
                  prob: float = 0.5) -> np.ndarray:
    if rng.random() >= prob:
        return img
    return blur(img, rng.uniform(*sigma_range))


def horizontal_flip(img: np.ndarray, rng: np.random.Generator, prob: float = 0.5) -> np.ndarray:
    if rng.random() >= prob:
        return img
    return img[..., ::-1].copy()


@dataclass(frozen=True)
class ImageAugConfig:
    out_size: int = 32
    weak_scale: tuple[float, float] = (0.5, 1.0)
    strong_scale: tuple[float, float] = (0.08, 1.0)
    jitter_contrast: float = 0.4
    jitter_brightness: float = 0.4
    jitter_saturation: float = 0.4
    jitter_hue: float = 0.1
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_prob: float = 0.5
    flip_prob: float = 0.5


PAPER_IMAGE_AUG = ImageAugConfig(out_size=224)


@dataclass(frozen=True)
class ViewParams:
    """Everything random about one view, drawn up front."""
    crop: tuple[int, int, int, int]
    jitter: tuple | None = None
    gray: bool = False
    sigma: float | None = None
    flip: bool = False


def draw_view_params(height: int, width: int, mode: str, cfg: ImageAugConfig,
                     rng: np.random.Generator) -> ViewParams:
    """Weak: crop only. Strong: crop, jitter, grayscale, blur, flip, in that order."""
    if mode == "weak":
        return ViewParams(sample_crop(height, width, cfg.weak_scale, rng))
    if mode != "strong":
        raise ValueError(f"mode must be 'weak' or 'strong', got {mode!r}")
    crop = sample_crop(height, width, cfg.strong_scale, rng)
    jitter = draw_jitter(rng, cfg.jitter_contrast, cfg.jitter_brightness,
                         cfg.jitter_saturation, cfg.jitter_hue, cfg.jitter_prob)
    gray = bool(rng.random() < cfg.grayscale_prob)
    sigma = float(rng.uniform(*cfg.blur_sigma)) if rng.random() < cfg.blur_prob else None
    flip = bool(rng.random() < cfg.flip_prob)
    return ViewParams(crop, jitter, gray, sigma, flip)


def _per_sample(x: np.ndarray) -> np.ndarray:
    return x[:, None, None, None]


def apply_views(imgs: np.ndarray, params: list[ViewParams], out_size: int) -> np.ndarray:
    """Apply drawn view parameters to a (B, 3, H, W) batch."""
    if out_size < 2:
        raise ValueError("out_size must be at least 2")
    _, _, height, width = imgs.shape
    crops = np.array([p.crop for p in params]).reshape(-1, 4)
    ry = _interp_matrices(crops[:, 0], crops[:, 2], out_size, height)
    rx = _interp_matrices(crops[:, 1], crops[:, 3], out_size, width)
    out = np.clip(ry[:, None] @ imgs @ rx.transpose(0, 2, 1)[:, None], 0.0, 1.0)

    for stage in range(4):
        for op in range(4):
            sel = [i for i, p in enumerate(params) if p.jitter and p.jitter[stage][0] == op]
            if not sel:
                continue
            f = np.array([params[i].jitter[stage][1] for i in sel])
            x = out[sel]
            if op == 0:
                x = x * _per_sample(f)
            elif op == 1:
                mean = luma(x, axis=1).mean(axis=(1, 2))
                x = _per_sample(f) * x + _per_sample((1.0 - f) * mean)
            elif op == 2:
                gray = luma(x, axis=1)[:, None]
                x = _per_sample(f) * x + _per_sample(1.0 - f) * gray
            else:
                theta = 2.0 * np.pi * f
                rot = np.zeros((len(sel), 3, 3))
                rot[:, 0, 0] = 1.0
                rot[:, 1, 1] = rot[:, 2, 2] = np.cos(theta)
                rot[:, 1, 2], rot[:, 2, 1] = -np.sin(theta), np.sin(theta)
                m = _YIQ_INV @ rot @ _YIQ
                x = np.einsum("bij,bjhw->bihw", m, x)
            out[sel] = np.clip(x, 0.0, 1.0)

    gray = [i for i, p in enumerate(params) if p.gray]
    if gray:
        out[gray] = luma(out[gray], axis=1)[:, None]
    blurred = [i for i, p in enumerate(params) if p.sigma is not None]
    if blurred:
        m = np.stack([_blur_matrix(out_size, gaussian_kernel(params[i].sigma)) for i in blurred])
        out[blurred] = np.clip(m[:, None] @ out[blurred] @ m.transpose(0, 2, 1)[:, None], 0.0, 1.0)
    flipped = [i for i, p in enumerate(params) if p.flip]
    if flipped:
        out[flipped] = out[flipped][..., ::-1]
    return out


def augment_image(img: np.ndarray, mode: str, cfg: ImageAugConfig, rng: np.random.Generator) -> np.ndarray:
    """Weak: crop only. Strong: crop, jitter, grayscale, blur, flip, in that order."""
    params = draw_view_params(img.shape[1], img.shape[2], mode, cfg, rng)
    return apply_views(img[None], [params], cfg.out_size)[0]


def augment_batch(imgs: np.ndarray, mode: str, cfg: ImageAugConfig, rngs) -> np.ndarray:
    """Same views as calling ``augment_image`` per sample with the matching generator."""
    params = [draw_view_params(imgs.shape[2], imgs.shape[3], mode, cfg, rng) for rng in rngs]
    return apply_views(imgs, params, cfg.out_size)
