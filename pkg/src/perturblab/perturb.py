"""Six natural image perturbations driven by a single intensity knob.

Each operator maps a [0,1] float image (H, W, C) to another image of the
same shape and range. Intensity 0 is a bit-exact identity for every kind,
and all per-image randomness is replayed from (spec seed, kind, image
index), so a perturbed dataset is a pure function of its inputs.

Kinds and their derived parameters (all linear in intensity ``s``):

  elastic        smoothed random displacement field, max shift ``alpha`` px
  occlusion      filled black disk of radius ``radius_frac * min(H, W)``
  gaussian_noise additive i.i.d. noise with standard deviation ``sigma``
  wave           per-row horizontal sine shift of amplitude ``amplitude`` px
  saturation     convex mix toward the grayscale image (``mix`` = 1 keeps it)
  gaussian_blur  separable Gaussian smoothing of width ``sigma``
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .rng import rng_for

KINDS = ("elastic", "occlusion", "gaussian_noise", "wave", "saturation", "gaussian_blur")

#: intensity -> parameter scale at s = 1; override via ``endpoints=`` to
#: retune how hard s = 1 hits(needed when a dataset is unusually easy).
DEFAULT_ENDPOINTS = {
    "elastic_alpha": 8.0,
    "elastic_sigma": 4.0,
    "occlusion_radius_frac": 0.35,
    "noise_sigma": 0.25,
    "wave_amplitude": 6.0,
    "wave_frequency": 2.0,
    "blur_sigma": 3.0,
}

_LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def validate_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ValueError(f"unknown perturbation kind {kind!r}; expected one of {KINDS}")
    return kind


def intensity_to_params(kind: str, intensity: float, endpoints=None) -> dict:
    """Monotone linear map from the scalar intensity to operator parameters.

    Every map yields identity parameters at intensity 0. The occlusion
    radius is kept as a fraction of min(H, W) so the record stays a pure
    function of (kind, intensity); it is resolved to pixels at apply time.
    """
    validate_kind(kind)
    if not 0.0 <= intensity <= 1.0:
        raise ValueError(f"intensity must be in [0, 1], got {intensity}")
    e = dict(DEFAULT_ENDPOINTS)
    if endpoints:
        e.update(endpoints)
    s = float(intensity)
    if kind == "elastic":
        return {"alpha": e["elastic_alpha"] * s, "sigma": e["elastic_sigma"]}
    if kind == "occlusion":
        # thickness is carried for the record but the occluder is a filled disk
        return {"radius_frac": e["occlusion_radius_frac"] * s, "thickness": 0.0}
    if kind == "gaussian_noise":
        return {"sigma": e["noise_sigma"] * s}
    if kind == "wave":
        return {"amplitude": e["wave_amplitude"] * s, "frequency": e["wave_frequency"]}
    if kind == "saturation":
        return {"mix": 1.0 - s}
    return {"sigma": e["blur_sigma"] * s}


@dataclass(frozen=True)
class PerturbationSpec:
    """A perturbation kind plus its intensity, seed and derived parameters."""

    kind: str
    intensity: float
    seed: int
    params: dict

    @classmethod
    def create(cls, kind: str, intensity: float, seed: int, endpoints=None) -> "PerturbationSpec":
        return cls(kind, float(intensity), int(seed),
                   intensity_to_params(kind, intensity, endpoints))

    def reseeded(self, seed: int) -> "PerturbationSpec":
        return replace(self, seed=int(seed))

    def to_json(self) -> dict:
        return {"kind": self.kind, "intensity": self.intensity,
                "seed": self.seed, "params": dict(self.params)}

    @classmethod
    def from_json(cls, d) -> "PerturbationSpec":
        if isinstance(d, str):
            d = json.loads(d)
        return cls(validate_kind(d["kind"]), float(d["intensity"]),
                   int(d["seed"]), dict(d["params"]))


# ---------------------------------------------------------------------------
# Shared primitives
# ---------------------------------------------------------------------------

def _bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample image at float coordinates with edge clamping."""
    h, w = image.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    top = image[y0, x0] * (1 - wx) + image[y0, x1] * wx
    bot = image[y1, x0] * (1 - wx) + image[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    return k / k.sum()


def _separable_blur(field: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing along the two leading axes, edge-clamped."""
    if sigma <= 0:
        return field.copy()
    k = _gauss_kernel(sigma)
    r = (len(k) - 1) // 2
    h, w = field.shape[:2]
    pad_y = [(r, r)] + [(0, 0)] * (field.ndim - 1)
    fp = np.pad(field, pad_y, mode="edge")
    out = np.zeros_like(field)
    for i, kv in enumerate(k):
        out += kv * fp[i:i + h]
    pad_x = [(0, 0), (r, r)] + [(0, 0)] * (field.ndim - 2)
    fp = np.pad(out, pad_x, mode="edge")
    out = np.zeros_like(field)
    for i, kv in enumerate(k):
        out += kv * fp[:, i:i + w]
    return out


def _luminance(image: np.ndarray) -> np.ndarray:
    r, g, b = _LUMA_WEIGHTS
    return image[..., 0] * r + image[..., 1] * g + image[..., 2] * b


# ---------------------------------------------------------------------------
# The six operators
# ---------------------------------------------------------------------------

def elastic(image: np.ndarray, alpha: float, sigma: float,
            rng: np.random.Generator) -> np.ndarray:
    """Warp by a smoothed random displacement field.

    Per-axis uniform [-1, 1] fields are Gaussian-smoothed at width ``sigma``
    and renormalized to peak magnitude 1, so no pixel moves farther than
    ``alpha``. Sampling is bilinear with edge clamping.
    """
    if alpha == 0:
        return image.copy()
    if sigma <= 0:
        raise ValueError("elastic needs sigma > 0 when alpha > 0")
    h, w = image.shape[:2]
    fields = []
    for _ in range(2):
        f = _separable_blur(rng.uniform(-1.0, 1.0, size=(h, w)), sigma)
        peak = np.abs(f).max()
        if peak > 1e-12:
            f = f / peak
        fields.append(f)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = _bilinear(image, yy + alpha * fields[0], xx + alpha * fields[1])
    return np.clip(out, 0.0, 1.0)


def draw_occlusion_center(shape, radius: float, rng: np.random.Generator):
    """Uniform center such that the whole disk stays inside the image."""
    h, w = shape[:2]
    if radius > (min(h, w) - 1) / 2.0:
        raise ValueError(
            f"occlusion radius {radius:.2f} leaves no valid center in a "
            f"{h}x{w} image"
        )
    return (rng.uniform(radius, h - 1 - radius), rng.uniform(radius, w - 1 - radius))


def occlude(image: np.ndarray, radius: float, center, thickness: float = 0.0) -> np.ndarray:
    """Black out the filled disk of ``radius`` around ``center`` (all
    channels); equivalent to a pixelwise min with a zero disk."""
    del thickness  # carried in parameter records; the occluder is a full disk
    if radius <= 0:
        return image.copy()
    h, w = image.shape[:2]
    cy, cx = center
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    out = image.copy()
    out[mask] = 0.0
    return out


def gaussian_noise(image: np.ndarray, sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Additive zero-mean i.i.d. noise, clipped back into [0, 1]."""
    if sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    if sigma == 0:
        return image.copy()
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def wave(image: np.ndarray, amplitude: float, frequency: float,
         phase: float) -> np.ndarray:
    """Shift row y horizontally by ``amplitude * sin(2*pi*frequency*y/H + phase)``
    with bilinear, edge-clamped resampling."""
    if amplitude < 0:
        raise ValueError("wave amplitude must be >= 0")
    if amplitude == 0:
        return image.copy()
    if frequency <= 0:
        raise ValueError("wave frequency must be > 0")
    h, w = image.shape[:2]
    shifts = amplitude * np.sin(2 * np.pi * frequency * np.arange(h) / h + phase)
    xs = np.clip(np.arange(w)[None, :] - shifts[:, None], 0.0, w - 1.0)
    x0 = np.floor(xs).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    wx = (xs - x0)[..., None]
    rows = np.arange(h)[:, None]
    out = image[rows, x0] * (1 - wx) + image[rows, x1] * wx
    return np.clip(out, 0.0, 1.0)


def saturate(image: np.ndarray, mix: float) -> np.ndarray:
    """Convex combination ``(1 - mix) * gray + mix * image`` where gray is
    the luminance image replicated across channels."""
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"saturation mix must be in [0, 1], got {mix}")
    if mix == 1.0 or image.shape[-1] == 1:
        return image.copy()
    gray = _luminance(image)[..., None]
    return np.clip((1.0 - mix) * gray + mix * image, 0.0, 1.0)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing; kernel radius ceil(3*sigma), normalized
    to sum 1, edge-clamped."""
    if sigma < 0:
        raise ValueError("blur sigma must be >= 0")
    if sigma == 0:
        return image.copy()
    return np.clip(_separable_blur(image, sigma), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def perturb(image: np.ndarray, spec: PerturbationSpec, index: int) -> np.ndarray:
    """Apply ``spec`` to one image; ``index`` selects the per-image draw.

    The output is fully determined by (image, spec, index). Labels are
    never consulted.
    """
    validate_kind(spec.kind)
    if not 0.0 <= spec.intensity <= 1.0:
        raise ValueError(f"intensity must be in [0, 1], got {spec.intensity}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {image.shape}")
    if spec.intensity == 0.0:
        return image.copy()
    rng = rng_for(spec.seed, spec.kind, int(index))
    p = spec.params
    if spec.kind == "elastic":
        return elastic(image, p["alpha"], p["sigma"], rng)
    if spec.kind == "occlusion":
        radius = p["radius_frac"] * min(image.shape[:2])
        if radius <= 0:
            return image.copy()
        center = draw_occlusion_center(image.shape, radius, rng)
        return occlude(image, radius, center, p.get("thickness", 0.0))
    if spec.kind == "gaussian_noise":
        return gaussian_noise(image, p["sigma"], rng)
    if spec.kind == "wave":
        phase = rng.uniform(0.0, 2 * np.pi)
        return wave(image, p["amplitude"], p["frequency"], phase)
    if spec.kind == "saturation":
        return saturate(image, p["mix"])
    return gaussian_blur(image, p["sigma"])


def perturb_batch(images: np.ndarray, spec: PerturbationSpec, indices) -> np.ndarray:
    """Apply ``spec`` to a batch, one independent draw per example index."""
    indices = np.asarray(indices)
    if len(indices) != len(images):
        raise ValueError("one index per image required")
    return np.stack([perturb(img, spec, int(i)) for img, i in zip(images, indices)])
