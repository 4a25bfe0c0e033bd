"""Sample augmentation (two views per image) and batch augmentation (one
frozen draw shared by every image of a task).

Every augmentation is split into a parameter draw and a pure application,
so a stored parameter record reproduces its output bit for bit.
Images are float arrays of shape (H, W, 3) or (N, H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

# color-jitter base strengths (brightness, contrast, saturation, hue) at strength 1.0
JITTER_BASE = (0.4, 0.4, 0.2, 0.1)
JITTER_STRENGTH = 0.2
LUMA = np.array([0.2989, 0.587, 0.114])


@dataclass(frozen=True)
class SampleAugConfig:
    crop_min: float = 20 / 32
    crop_max: float = 1.0
    vflip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strength: float = JITTER_STRENGTH
    drop_p: float = 0.2

    def envelope(self) -> tuple[float, float, float, float]:
        return tuple(b * self.jitter_strength for b in JITTER_BASE)


@dataclass(frozen=True)
class SampleAugParams:
    crop: tuple[int, int, int]  # (top, left, size)
    vflip: bool
    jitter: bool
    factors: tuple[float, float, float, float]  # brightness, contrast, saturation multipliers; hue shift
    order: tuple[int, int, int, int]
    drop: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BatchAugConfig:
    hflip_p: float = 0.5
    blur_p: float = 0.2
    blur_sigma: float = 1.0
    brightness: float = 0.2
    noise_max: float = 0.02


@dataclass(frozen=True)
class BatchAugParams:
    hflip: bool
    blur: bool
    brightness: float
    noise_sigma: float
    noise_seed: int

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# color helpers


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def grayscale(img: np.ndarray) -> np.ndarray:
    y = img @ LUMA
    return np.repeat(y[..., None], 3, axis=-1)


def _blend(img, other, factor):
    return np.clip(factor * img + (1 - factor) * other, 0.0, 1.0)


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img, factor):
    return _blend(img, np.mean(img @ LUMA), factor)


def adjust_saturation(img, factor):
    return _blend(img, grayscale(img), factor)


def adjust_hue(img, shift):
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


# ---------------------------------------------------------------------------
# geometry helpers


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) image, half-pixel centers."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def gaussian_kernel(size: int = 3, sigma: float = 1.0) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def blur(images: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate (…, H, W, C) images with a square kernel, edge-replicated."""
    k = kernel.shape[0]
    r = k // 2
    pad = [(0, 0)] * (images.ndim - 3) + [(r, r), (r, r), (0, 0)]
    xp = np.pad(images, pad, mode="edge")
    h, w = images.shape[-3], images.shape[-2]
    out = np.zeros_like(images, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out += kernel[i, j] * xp[..., i:i + h, j:j + w, :]
    return out


# ---------------------------------------------------------------------------
# sample augmentation


def draw_sample_params(rng: np.random.Generator, size: int,
                       cfg: SampleAugConfig = SampleAugConfig()) -> SampleAugParams:
    lo = max(1, int(round(cfg.crop_min * size)))
    hi = max(lo, int(round(cfg.crop_max * size)))
    side = int(rng.integers(lo, hi + 1))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    vflip = bool(rng.random() < cfg.vflip_p)
    jitter = bool(rng.random() < cfg.jitter_p)
    b, c, s, h = cfg.envelope()
    factors = (float(rng.uniform(max(0.0, 1 - b), 1 + b)),
               float(rng.uniform(max(0.0, 1 - c), 1 + c)),
               float(rng.uniform(max(0.0, 1 - s), 1 + s)),
               float(rng.uniform(-h, h)))
    order = tuple(int(i) for i in rng.permutation(4))
    drop = bool(rng.random() < cfg.drop_p)
    return SampleAugParams((top, left, side), vflip, jitter, factors, order, drop)


def apply_sample_aug(img: np.ndarray, params: SampleAugParams) -> np.ndarray:
    h, w = img.shape[:2]
    top, left, side = params.crop
    if top < 0 or left < 0 or top + side > h or left + side > w:
        raise ValueError(f"crop {params.crop} outside a {h}x{w} image")
    out = resize_bilinear(np.asarray(img, dtype=np.float64)[top:top + side, left:left + side], h, w)
    if params.vflip:
        out = out[::-1]
    if params.jitter:
        ops = (adjust_brightness, adjust_contrast, adjust_saturation, adjust_hue)
        for k in params.order:
            out = ops[k](out, params.factors[k])
    if params.drop:
        out = grayscale(out)
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def sample_augment(img: np.ndarray, rng: np.random.Generator,
                   cfg: SampleAugConfig = SampleAugConfig()):
    """Two independent views of one image: ``(a, a_tilde, (params_a, params_b))``."""
    size = img.shape[0]
    pa = draw_sample_params(rng, size, cfg)
    pb = draw_sample_params(rng, size, cfg)
    return apply_sample_aug(img, pa), apply_sample_aug(img, pb), (pa, pb)


def sample_augment_batch(images: np.ndarray, rng: np.random.Generator,
                         cfg: SampleAugConfig = SampleAugConfig()):
    a, at, trace = [], [], []
    for img in images:
        x1, x2, p = sample_augment(img, rng, cfg)
        a.append(x1)
        at.append(x2)
        trace.append(p)
    return np.stack(a), np.stack(at), trace


# ---------------------------------------------------------------------------
# batch augmentation


def draw_batch_params(rng: np.random.Generator, cfg: BatchAugConfig = BatchAugConfig()
                      ) -> BatchAugParams:
    return BatchAugParams(
        hflip=bool(rng.random() < cfg.hflip_p),
        blur=bool(rng.random() < cfg.blur_p),
        brightness=float(rng.uniform(-cfg.brightness, cfg.brightness)),
        noise_sigma=float(rng.uniform(0.0, cfg.noise_max)),
        noise_seed=int(rng.integers(0, 2 ** 63 - 1)),
    )


def apply_batch_aug(images: np.ndarray, params: BatchAugParams, blur_sigma: float = 1.0,
                    stream: int = 0) -> np.ndarray:
    """Apply one batch-augmentation draw to every image of ``images``.

    ``stream`` separates the noise of different image groups (x, a, a~) that
    share the same draw.
    """
    out = np.asarray(images, dtype=np.float64)
    if params.hflip:
        out = out[..., ::-1, :]
    if params.blur:
        out = blur(out, gaussian_kernel(3, blur_sigma))
    out = out + params.brightness
    if params.noise_sigma > 0:
        noise_rng = np.random.default_rng([params.noise_seed, stream])
        out = out + noise_rng.normal(0.0, params.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(images.dtype, copy=False)


# ---------------------------------------------------------------------------
# standard supervised augmentation for the cross-entropy baseline


def pad_crop_flip(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty_like(images)
    for i in range(n):
        t, l = rng.integers(0, 2 * pad + 1, size=2)
        crop = padded[i, t:t + h, l:l + w]
        out[i] = crop[:, ::-1] if rng.random() < 0.5 else crop
    return out
