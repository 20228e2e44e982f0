"""Synthetic clean images and paired degradations.

Images are float64 arrays in [0, 1] shaped (C, H, W). Every function is pure:
the output is fully determined by its arguments (including the seed).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import correlate1d

from .errors import BadSpec, EvenKernel, NonPositiveSigma, QualityOutOfRange, TooSmall

KINDS = ("noise", "kernel_blur", "jpeg", "haze", "lowlight", "rain")
# evaluation-only corruption used for out-of-distribution checks
OOD_KINDS = ("saltpepper",)
LOW_COST_KINDS = ("noise", "kernel_blur", "jpeg")

BLUR_KERNEL = 15

# parameter ranges used when sampling training/eval specs
SAMPLING_RANGES = {
    "noise": {"sigma": (0.0, 50 / 255)},
    "kernel_blur": {"sigma": (0.1, 3.1)},
    "jpeg": {"q": (20, 90)},
    "haze": {"t": (0.2, 0.8), "A": (0.7, 1.0)},
    "lowlight": {"gamma": (1.5, 3.0), "a": (0.2, 0.6)},
    "rain": {"density": (0.0, 0.05), "length": (3, 9)},
    "saltpepper": {"amount": (0.02, 0.1)},
}

STD_LUMINANCE_TABLE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.float64).reshape(8, 8)


def stream(seed, name, *index):
    """Independent generator for a named sub-stream of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *map(int, index)]))


@dataclass
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self):
        p = self.params
        required = {
            "noise": ("sigma",),
            "kernel_blur": ("k", "sigma"),
            "jpeg": ("q",),
            "haze": ("t", "A"),
            "lowlight": ("gamma", "a"),
            "rain": ("density", "length"),
            "saltpepper": ("amount",),
        }
        if self.kind not in required:
            raise BadSpec(f"unknown degradation kind {self.kind!r}")
        missing = [k for k in required[self.kind] if k not in p]
        extra = [k for k in p if k not in required[self.kind]]
        if missing or extra:
            raise BadSpec(f"{self.kind}: missing {missing}, unexpected {extra}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise BadSpec(f"seed {self.seed} is not a u64")
        ok = {
            "noise": lambda: 0 < p["sigma"] <= 1,
            "kernel_blur": lambda: int(p["k"]) == p["k"] and p["k"] >= 3 and p["k"] % 2 == 1 and p["sigma"] > 0,
            "jpeg": lambda: int(p["q"]) == p["q"] and 1 <= p["q"] <= 100,
            "haze": lambda: 0 < p["t"] <= 1 and 0 <= p["A"] <= 1,
            "lowlight": lambda: p["gamma"] > 0 and 0 < p["a"] <= 1,
            "rain": lambda: 0 <= p["density"] <= 1 and int(p["length"]) == p["length"] and p["length"] >= 1,
            "saltpepper": lambda: 0 <= p["amount"] <= 1,
        }[self.kind]()
        if not ok:
            raise BadSpec(f"{self.kind}: parameters out of range: {p}")
        return self

    def to_text(self):
        params = " ".join(f"{k}={v!r}" for k, v in sorted(self.params.items()))
        return f"{self.kind} {params} seed={self.seed}"

    @classmethod
    def from_text(cls, text):
        kind, *fields = text.split()
        params, seed = {}, 0
        for item in fields:
            key, _, val = item.partition("=")
            if key == "seed":
                seed = int(val)
            else:
                num = float(val)
                params[key] = int(num) if num.is_integer() and "." not in val else num
        return cls(kind, params, seed).validate()


def sample_spec(kind, rng):
    """Draw a DegradationSpec of ``kind`` with parameters from SAMPLING_RANGES."""
    r = SAMPLING_RANGES.get(kind)
    if r is None:
        raise BadSpec(f"unknown degradation kind {kind!r}")
    seed = int(rng.integers(0, 2 ** 63))
    if kind == "noise":
        lo, hi = r["sigma"]
        # (0, 50/255]: 1 - U[0,1) lies in (0, 1]
        params = {"sigma": lo + (hi - lo) * (1.0 - rng.random())}
    elif kind == "kernel_blur":
        params = {"k": BLUR_KERNEL, "sigma": float(rng.uniform(*r["sigma"]))}
    elif kind == "jpeg":
        params = {"q": int(rng.integers(r["q"][0], r["q"][1] + 1))}
    elif kind == "haze":
        params = {"t": float(rng.uniform(*r["t"])), "A": float(rng.uniform(*r["A"]))}
    elif kind == "lowlight":
        params = {"gamma": float(rng.uniform(*r["gamma"])), "a": float(rng.uniform(*r["a"]))}
    elif kind == "rain":
        params = {
            "density": float(rng.uniform(*r["density"])),
            "length": int(rng.integers(r["length"][0], r["length"][1] + 1)),
        }
    else:
        params = {"amount": float(rng.uniform(*r["amount"]))}
    return DegradationSpec(kind, params, seed).validate()


# ---------------------------------------------------------------- clean images


def _coverage(dist):
    # 1-pixel wide anti-aliased edge from a signed distance in pixels
    return np.clip(0.5 - dist, 0.0, 1.0)


def gen_clean(seed, h, w, channels=3):
    """Procedural clean image: colour gradients, 2-6 shapes and soft texture."""
    if h < 16 or w < 16:
        raise TooSmall(f"clean images need h, w >= 16, got {(h, w)}")
    rng = stream(seed, "clean")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = xx / (w - 1), yy / (h - 1)

    img = np.empty((channels, h, w))
    for c in range(channels):
        c0, cx, cy = rng.uniform(0.25, 0.75), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)
        img[c] = c0 + cx * (u - 0.5) + cy * (v - 0.5)

    for _ in range(int(rng.integers(2, 7))):
        cy_, cx_ = rng.uniform(0, h), rng.uniform(0, w)
        size = rng.uniform(0.12, 0.35) * min(h, w)
        if rng.random() < 0.5:
            aspect = rng.uniform(0.6, 1.6)
            dist = np.hypot((yy - cy_) * aspect, xx - cx_) - size
        else:
            theta = rng.uniform(0, math.pi)
            du = (xx - cx_) * math.cos(theta) + (yy - cy_) * math.sin(theta)
            dv = -(xx - cx_) * math.sin(theta) + (yy - cy_) * math.cos(theta)
            dist = np.maximum(np.abs(du) - size, np.abs(dv) - size * rng.uniform(0.3, 1.0))
        alpha = rng.uniform(0.6, 1.0) * _coverage(dist)
        colour = rng.uniform(0, 1, size=channels)
        img = img * (1 - alpha) + colour[:, None, None] * alpha

    texture = np.zeros((h, w))
    for _ in range(int(rng.integers(4, 9))):
        fx, fy = rng.uniform(2, 8, size=2) * rng.choice([-1, 1], size=2)
        phase = rng.uniform(0, 2 * math.pi)
        texture += rng.uniform(0.01, 0.04) * np.sin(2 * math.pi * (fx * u + fy * v) + phase)
    tint = rng.uniform(0.5, 1.0, size=channels)
    img = np.clip(img + tint[:, None, None] * texture, 0.0, 1.0)

    std = img.std()
    if std < 0.06:
        m = img.mean()
        img = np.clip(m + (img - m) * (0.06 / max(std, 1e-6)), 0.0, 1.0)
    return img


# ---------------------------------------------------------------- low-cost degradations


def clip_add(img, noise):
    return np.clip(img + noise, 0.0, 1.0)


def add_gaussian_noise(img, sigma, seed):
    """I_N = clip(I + N), N ~ N(0, sigma^2) per element; sigma in [0, 1] units."""
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be > 0, got {sigma}")
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=np.shape(img))
    return clip_add(np.asarray(img, dtype=np.float64), noise)


def gaussian_kernel1d(k, sigma):
    if k % 2 == 0 or k < 1:
        raise EvenKernel(f"kernel size must be odd, got {k}")
    if not sigma > 0:
        raise NonPositiveSigma(f"blur sigma must be > 0, got {sigma}")
    x = np.arange(k) - k // 2
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_kernel(k, sigma):
    g = gaussian_kernel1d(k, sigma)
    kern = np.outer(g, g)
    return kern / kern.sum()


def gaussian_blur(img, k, sigma):
    """Separable Gaussian blur with reflect padding, channels independent."""
    g = gaussian_kernel1d(k, sigma)
    out = correlate1d(np.asarray(img, dtype=np.float64), g, axis=-1, mode="mirror")
    out = correlate1d(out, g, axis=-2, mode="mirror")
    return np.clip(out, 0.0, 1.0)


def quant_table(q):
    """Luminance table scaled by the IJG quality law, entries clamped to [1, 255]."""
    if not 1 <= q <= 100:
        raise QualityOutOfRange(f"quality must be in [1, 100], got {q}")
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    table = np.floor((STD_LUMINANCE_TABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _rgb_to_ycbcr(rgb):
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr])


def _ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[0], ycc[1] - 128.0, ycc[2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b])


def jpeg_like(img, q):
    """Quantisation-only JPEG: YCbCr, 8x8 DCT-II, scaled luminance table, inverse.

    No chroma subsampling and no entropy coding; every channel uses the
    luminance table.
    """
    table = quant_table(q)
    img = np.asarray(img, dtype=np.float64)
    channels, h, w = img.shape
    x = img * 255.0
    x = _rgb_to_ycbcr(x) if channels == 3 else x
    ph, pw = -h % 8, -w % 8
    x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge") - 128.0
    c, hh, ww = x.shape
    blocks = x.reshape(c, hh // 8, 8, ww // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = dctn(blocks, type=2, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / table) * table
    blocks = idctn(coef, type=2, axes=(-2, -1), norm="ortho")
    x = blocks.transpose(0, 1, 3, 2, 4).reshape(c, hh, ww)[:, :h, :w] + 128.0
    x = _ycbcr_to_rgb(x) if channels == 3 else x
    return np.clip(x / 255.0, 0.0, 1.0)


# ---------------------------------------------------------------- stand-ins for high-cost kinds


def _rain(img, density, length, seed):
    rng = np.random.default_rng(seed)
    _, h, w = img.shape
    count = int(round(density * h * w))
    if count == 0:
        return img.copy()
    theta = rng.uniform(-math.pi / 6, math.pi / 6)
    streaks = np.zeros((h, w))
    ys = rng.uniform(0, h, size=count)
    xs = rng.uniform(0, w, size=count)
    level = rng.uniform(0.6, 1.0, size=count)
    steps = np.arange(length)
    py = np.floor(ys[:, None] + steps[None, :] * math.cos(theta)).astype(int) % h
    px = np.floor(xs[:, None] + steps[None, :] * math.sin(theta)).astype(int) % w
    np.maximum.at(streaks, (py.ravel(), px.ravel()), np.repeat(level, length))
    alpha = 0.8 * streaks
    return np.clip(img * (1 - alpha) + alpha, 0.0, 1.0)


def salt_pepper(img, amount, seed):
    rng = np.random.default_rng(seed)
    _, h, w = img.shape
    out = img.copy()
    hit = rng.random((h, w)) < amount
    salt = rng.random((h, w)) < 0.5
    out[:, hit & salt] = 1.0
    out[:, hit & ~salt] = 0.0
    return out


def degrade_extra(img, spec):
    """haze: I*t + A(1-t); lowlight: clip(a * I^gamma); rain: blended bright streaks."""
    spec.validate()
    img = np.asarray(img, dtype=np.float64)
    p = spec.params
    if spec.kind == "haze":
        return np.clip(img * p["t"] + p["A"] * (1.0 - p["t"]), 0.0, 1.0)
    if spec.kind == "lowlight":
        return np.clip(p["a"] * img ** p["gamma"], 0.0, 1.0)
    if spec.kind == "rain":
        return _rain(img, p["density"], int(p["length"]), spec.seed)
    if spec.kind == "saltpepper":
        return salt_pepper(img, p["amount"], spec.seed)
    raise BadSpec(f"{spec.kind} is not an extra degradation")


def apply(spec, img):
    """Degrade ``img`` according to ``spec``."""
    spec.validate()
    p = spec.params
    if spec.kind == "noise":
        return add_gaussian_noise(img, p["sigma"], spec.seed)
    if spec.kind == "kernel_blur":
        return gaussian_blur(img, int(p["k"]), p["sigma"])
    if spec.kind == "jpeg":
        return jpeg_like(img, int(p["q"]))
    return degrade_extra(img, spec)


@dataclass
class PairedSample:
    clean: np.ndarray
    degraded: np.ndarray
    spec: DegradationSpec
    index: int = 0

    @property
    def kind(self):
        return self.spec.kind


def make_pair(clean, spec, index=0):
    return PairedSample(clean, apply(spec, clean), spec, index)


def make_suite(kinds, n_per_kind, size, seed, name="suite"):
    """Deterministic held-out pairs: ``n_per_kind`` images for every kind."""
    suite = []
    for kind in kinds:
        for i in range(n_per_kind):
            rng = stream(seed, f"{name}/{kind}", i)
            clean = gen_clean(int(rng.integers(0, 2 ** 63)), size, size)
            suite.append(make_pair(clean, sample_spec(kind, rng), i))
    return suite
