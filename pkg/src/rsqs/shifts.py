"""Parametric image perturbation families and their phase-disjoint splits.

Images are float arrays of shape (H, W) with values in [0, 1]. Each family maps a
severity level to one distortion parameter through a linear schedule (see
``SEVERITY_SLOPE``); level 0 is the identity, levels 1..5 are the ones episodes draw.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class Phase(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Family(str, enum.Enum):
    GAUSS_NOISE = "gauss_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    DEFOCUS_BLUR = "defocus_blur"
    MOTION_BLUR = "motion_blur"
    ZOOM_BLUR = "zoom_blur"
    GLASS_BLUR = "glass_blur"
    SNOW = "snow"
    FROST = "frost"
    FOG = "fog"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    ELASTIC = "elastic"
    PIXELATE = "pixelate"
    JPEG_QUANTIZE = "jpeg_quantize"


# parameter = slope * severity. Units in the per-family comments. Pixelate and
# quantize are linear in log2 of their grid size: nested dyadic grids keep the
# distortion monotone in severity, which non-nested grids do not (aliasing).
SEVERITY_SLOPE: dict[Family, float] = {
    Family.GAUSS_NOISE: 0.04,     # noise std
    Family.SHOT_NOISE: 0.012,     # photon quantum (variance = quantum * pixel)
    Family.IMPULSE_NOISE: 0.03,   # fraction of salt/pepper pixels
    Family.DEFOCUS_BLUR: 0.5,     # disk radius, px
    Family.MOTION_BLUR: 1.2,      # streak length, px
    Family.ZOOM_BLUR: 0.06,       # max relative zoom
    Family.GLASS_BLUR: 0.5,       # max per-pixel jitter, px (blur std = 0.4 * jitter)
    Family.SNOW: 0.06,            # haze weight; flake density = 0.5 * weight
    Family.FROST: 0.09,           # frost texture weight
    Family.FOG: 0.15,             # fog layer weight
    Family.BRIGHTNESS: 0.08,      # additive offset
    Family.CONTRAST: 0.15,        # contrast factor = 1 - parameter
    Family.ELASTIC: 0.5,          # displacement amplitude, px
    Family.PIXELATE: 0.5,         # log2 of block size
    Family.JPEG_QUANTIZE: 1.0,    # log2 of quantization step in 1/128 units
}

PHASE_FAMILIES: dict[Phase, frozenset[Family]] = {
    Phase.TRAIN: frozenset({Family.GAUSS_NOISE, Family.DEFOCUS_BLUR, Family.GLASS_BLUR, Family.SNOW,
                            Family.FROST, Family.CONTRAST, Family.ELASTIC}),
    Phase.VAL: frozenset({Family.SHOT_NOISE, Family.MOTION_BLUR, Family.FOG, Family.PIXELATE}),
    Phase.TEST: frozenset({Family.IMPULSE_NOISE, Family.ZOOM_BLUR, Family.BRIGHTNESS, Family.JPEG_QUANTIZE}),
}


@dataclass(frozen=True, order=True)
class ShiftSpec:
    family: Family
    severity: int

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not 0 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 0..5, got {self.severity}")

    @property
    def param(self) -> float:
        return severity_param(self.family, self.severity)

    def __str__(self) -> str:
        return f"{self.family.value}@{self.severity}"


def severity_param(family: Family, severity: int) -> float:
    return SEVERITY_SLOPE[Family(family)] * severity


def phase_split(phase: Phase | str) -> frozenset[Family]:
    return PHASE_FAMILIES[Phase(phase)]


def phase_of(family: Family) -> Phase:
    for phase, fams in PHASE_FAMILIES.items():
        if family in fams:
            return phase
    raise KeyError(family)


# ---------------------------------------------------------------- family kernels

def _disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius)) + 1
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.clip(radius + 1.0 - np.hypot(yy, xx), 0.0, 1.0)
    return k / k.sum()


def _line_kernel(length: float, angle: float) -> np.ndarray:
    r = int(np.ceil(length / 2)) + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    ts = np.linspace(-length / 2, length / 2, max(2, int(np.ceil(length * 4)) + 1))
    for t in ts:
        y, x = r + t * np.sin(angle), r + t * np.cos(angle)
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        k[y0, x0] += (1 - fy) * (1 - fx)
        k[y0, x0 + 1] += (1 - fy) * fx
        k[y0 + 1, x0] += fy * (1 - fx)
        k[y0 + 1, x0 + 1] += fy * fx
    return k / k.sum()


def _smooth_field(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    f -= f.min()
    top = f.max()
    return f / top if top > 0 else f


def _zoom_center(img: np.ndarray, z: float) -> np.ndarray:
    h, w = img.shape
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    scale = 1.0 / z
    offset = center - scale * center
    return ndimage.affine_transform(img, np.diag([scale, scale]), offset=offset, order=1, mode="nearest")


def _gauss_noise(x, p, rng):
    return x + p * rng.standard_normal(x.shape)


def _shot_noise(x, p, rng):
    # variance-matched Gaussian form of Poisson noise: var = quantum * intensity
    return x + np.sqrt(p * np.clip(x, 0, 1)) * rng.standard_normal(x.shape)


def _impulse_noise(x, p, rng):
    u = rng.random(x.shape)
    salt = rng.random(x.shape) < 0.5
    out = x.copy()
    hit = u < p
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def _defocus_blur(x, p, rng):
    return ndimage.convolve(x, _disk_kernel(p), mode="reflect")


def _motion_blur(x, p, rng):
    angle = rng.uniform(0, np.pi)
    if p == 0:
        return x.copy()
    return ndimage.convolve(x, _line_kernel(p, angle), mode="nearest")


def _zoom_blur(x, p, rng):
    zooms = 1.0 + p * np.arange(6) / 5
    return np.mean([_zoom_center(x, z) for z in zooms], axis=0)


def _glass_blur(x, p, rng):
    h, w = x.shape
    blurred = ndimage.gaussian_filter(x, 0.4 * p, mode="reflect") if p > 0 else x
    jitter = rng.uniform(-p, p, size=(2, h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    coords = np.stack([yy + jitter[0], xx + jitter[1]])
    return ndimage.map_coordinates(blurred, coords, order=1, mode="reflect")


def _snow(x, p, rng):
    flakes = (rng.random(x.shape) < 0.5 * p).astype(float)
    flakes = np.maximum(flakes, 0.6 * ndimage.shift(flakes, (1, 0), order=0, mode="constant"))
    hazy = x * (1 - p) + 0.8 * p
    return np.maximum(hazy, flakes)


def _frost(x, p, rng):
    tex = _smooth_field(x.shape, 0.8, rng) ** 2
    return x * (1 - 0.5 * p) + p * 1.6 * tex


def _fog(x, p, rng):
    layer = _smooth_field(x.shape, max(x.shape) / 4, rng)
    return (x + p * (0.5 + layer)) / (1 + p)


def _brightness(x, p, rng):
    return x + p


def _contrast(x, p, rng):
    return contrast(x, 1.0 - p)


def contrast(x: np.ndarray, factor: float) -> np.ndarray:
    mu = x.mean()
    return mu + factor * (x - mu)


def _elastic(x, p, rng):
    if p == 0:
        return x.copy()
    h, w = x.shape
    dy = _smooth_field(x.shape, 2.0, rng) * 2 - 1
    dx = _smooth_field(x.shape, 2.0, rng) * 2 - 1
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return ndimage.map_coordinates(x, [yy + p * dy, xx + p * dx], order=1, mode="reflect")


def _block_mean(x: np.ndarray, b: int) -> np.ndarray:
    h, w = x.shape
    hp, wp = -(-h // b) * b, -(-w // b) * b
    xp = np.pad(x, ((0, hp - h), (0, wp - w)), mode="edge")
    m = xp.reshape(hp // b, b, wp // b, b).mean(axis=(1, 3))
    return m.repeat(b, axis=0).repeat(b, axis=1)[:h, :w]


def _pixelate(x, p, rng):
    if p == 0:
        return x.copy()
    k = int(np.floor(p))
    f = p - k
    coarse = _block_mean(x, 2 ** k)
    if f == 0:
        return coarse
    return (1 - f) * coarse + f * _block_mean(x, 2 ** (k + 1))


def _jpeg_quantize(x, p, rng):
    if p == 0:
        return x.copy()
    q = 2.0 ** p / 128
    return np.floor(x / q) * q


_APPLY = {
    Family.GAUSS_NOISE: _gauss_noise,
    Family.SHOT_NOISE: _shot_noise,
    Family.IMPULSE_NOISE: _impulse_noise,
    Family.DEFOCUS_BLUR: _defocus_blur,
    Family.MOTION_BLUR: _motion_blur,
    Family.ZOOM_BLUR: _zoom_blur,
    Family.GLASS_BLUR: _glass_blur,
    Family.SNOW: _snow,
    Family.FROST: _frost,
    Family.FOG: _fog,
    Family.BRIGHTNESS: _brightness,
    Family.CONTRAST: _contrast,
    Family.ELASTIC: _elastic,
    Family.PIXELATE: _pixelate,
    Family.JPEG_QUANTIZE: _jpeg_quantize,
}


def apply_shift(img: np.ndarray, spec: ShiftSpec | None, rng: np.random.Generator) -> np.ndarray:
    """Perturb one (H, W) image; the result is clamped to [0, 1]."""
    x = np.asarray(img, dtype=np.float64)
    if spec is None:
        return np.clip(x, 0.0, 1.0)
    out = _APPLY[spec.family](x, spec.param, rng)
    return np.clip(out, 0.0, 1.0)


def random_spec(phase: Phase, rng: np.random.Generator, max_severity: int = 5,
                min_severity: int = 1) -> ShiftSpec:
    fams = sorted(phase_split(phase), key=lambda f: f.value)
    fam = fams[int(rng.integers(len(fams)))]
    return ShiftSpec(fam, int(rng.integers(min_severity, max_severity + 1)))
