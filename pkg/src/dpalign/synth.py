"""Synthetic dual-pixel scene generator.

Scenes are stacks of textured, constant-depth layers (background plus
rectangles).  A thin-lens model maps depth to a signed blur radius
r = clamp(gain * (depth - focal_depth), -max_radius, max_radius); each
layer is blurred with a half-disc point-spread function whose side depends
on the view and on sign(r), which is what splits the two dual-pixel views:
their half-disc centroids sit 8r/(3*pi) pixels apart.  Layers composite
back to front; the layer mask is blurred with the same per-view PSF so a
constant-colour scene stays exactly constant.

Images are float64 (3, h, w) in [0, 1] internally and 8-bit RGB PNG on disk.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import convolve

DEPTH_RANGE = (1.0, 8.0)


@dataclass
class LensModel:
    focal_depth: float = 4.0
    blur_gain: float = 1.0
    max_radius: float = 4.0

    def radius(self, depth):
        return float(np.clip(self.blur_gain * (depth - self.focal_depth), -self.max_radius, self.max_radius))


@dataclass
class Layer:
    mask: np.ndarray      # (h, w) in {0, 1}
    depth: float
    texture: np.ndarray   # (3, h, w), defined over the full frame


@dataclass
class Scene:
    sharp: np.ndarray     # (3, h, w) all-in-focus composite
    depth: np.ndarray     # (h, w) piecewise-constant depth
    layers: list = field(default_factory=list)  # back to front; layers[0] covers the frame


@dataclass
class DpSample:
    left: np.ndarray
    right: np.ndarray
    sharp: np.ndarray
    radius: np.ndarray | None = None  # (h, w) signed blur radius


def _texture(rng, h, w):
    kind = rng.choice(("checker", "grating", "speckle"))
    c0 = rng.uniform(0.05, 0.95, size=(3, 1, 1))
    c1 = rng.uniform(0.05, 0.95, size=(3, 1, 1))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "checker":
        cell = int(rng.integers(2, 7))
        pattern = ((yy // cell + xx // cell) % 2)[None]
    elif kind == "grating":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.7)
        phase = rng.uniform(0, 2 * np.pi)
        pattern = (0.5 + 0.5 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase))[None]
    else:
        pattern = rng.uniform(0.0, 1.0, size=(1, h, w))
        pattern = np.repeat(pattern, 1, axis=0)
    return np.clip(c0 + (c1 - c0) * pattern, 0.0, 1.0)


def generate_scene(seed, height, width, region_count=5):
    """Seeded piecewise-constant-depth scene; region_count includes the
    full-frame background."""
    if region_count < 1:
        raise ValueError(f"region_count must be >= 1, got {region_count}")
    rng = np.random.default_rng(seed)
    lo, hi = DEPTH_RANGE
    layers = []
    full = np.ones((height, width))
    layers.append(Layer(full, float(rng.uniform(lo, hi)), _texture(rng, height, width)))
    for _ in range(region_count - 1):
        rh = int(rng.integers(max(2, height // 5), max(3, (3 * height) // 5)))
        rw = int(rng.integers(max(2, width // 5), max(3, (3 * width) // 5)))
        y0 = int(rng.integers(0, height - rh + 1))
        x0 = int(rng.integers(0, width - rw + 1))
        mask = np.zeros((height, width))
        mask[y0 : y0 + rh, x0 : x0 + rw] = 1.0
        layers.append(Layer(mask, float(rng.uniform(lo, hi)), _texture(rng, height, width)))
    sharp = _composite(layers, [_DELTA] * len(layers))
    depth = np.zeros((height, width))
    for layer in layers:
        depth = layer.mask * layer.depth + (1 - layer.mask) * depth
    return Scene(sharp, depth, layers)


_DELTA = np.ones((1, 1))
_SUBSAMPLES = 8


def half_disc_psf(radius, side):
    """Unit-sum PSF: the half of a radius-|r| disc on the given side
    ("left" covers x < 0, "right" x > 0, "full" the whole disc).

    Pixel coverage is estimated on an 8x8 subgrid; radii below 0.5 px
    degenerate to the identity kernel.
    """
    r = abs(float(radius))
    if r < 0.5:
        return _DELTA
    half = int(np.ceil(r))
    size = 2 * half + 1
    offs = (np.arange(_SUBSAMPLES) + 0.5) / _SUBSAMPLES - 0.5
    cy = np.arange(-half, half + 1)
    yy = cy[:, None] + offs[None, :]          # (size, sub)
    xx = yy
    y2 = (yy ** 2).reshape(size, _SUBSAMPLES, 1, 1)
    x2 = (xx ** 2).reshape(1, 1, size, _SUBSAMPLES)
    inside = (y2 + x2) <= r * r
    if side == "left":
        inside = inside & (xx.reshape(1, 1, size, _SUBSAMPLES) < 0)
    elif side == "right":
        inside = inside & (xx.reshape(1, 1, size, _SUBSAMPLES) > 0)
    elif side != "full":
        raise ValueError(f"side must be left/right/full, got {side!r}")
    psf = inside.sum(axis=(1, 3)).astype(np.float64)
    total = psf.sum()
    if total == 0:
        return _DELTA
    return psf / total


def _blur(img, psf):
    if psf is _DELTA or psf.shape == (1, 1):
        return img * psf[0, 0]
    if img.ndim == 2:
        return convolve(img, psf, mode="nearest")
    return np.stack([convolve(ch, psf, mode="nearest") for ch in img])


def _composite(layers, psfs):
    canvas = np.zeros_like(layers[0].texture)
    for layer, psf in zip(layers, psfs):
        color = _blur(layer.texture * layer.mask, psf)
        mask = _blur(layer.mask, psf)
        canvas = color + (1 - mask) * canvas
    return canvas


def render_dp_pair(scene, lens):
    """Render (left, right, radius_map) views of a scene.

    The left view uses the left half-disc for layers behind the focal plane
    (r > 0) and the right half-disc in front of it; the right view mirrors.
    A layer at the focal plane passes through exactly.
    """
    h, w = scene.depth.shape
    if 2 * int(np.ceil(lens.max_radius)) + 1 > min(h, w):
        raise ValueError(
            f"max_radius {lens.max_radius} needs a PSF larger than the {h}x{w} image"
        )
    radii = [lens.radius(layer.depth) for layer in scene.layers]
    left = _composite(scene.layers, [half_disc_psf(r, "left" if r > 0 else "right") for r in radii])
    right = _composite(scene.layers, [half_disc_psf(r, "right" if r > 0 else "left") for r in radii])
    radius_map = np.zeros((h, w))
    for layer, r in zip(scene.layers, radii):
        radius_map = layer.mask * r + (1 - layer.mask) * radius_map
    return left, right, radius_map


def make_samples(seed, count, height, width, region_count=5, lens=None):
    """Deterministic batch of rendered samples; sample i uses seed + i."""
    lens = lens or LensModel()
    out = []
    for i in range(count):
        scene = generate_scene(seed + i, height, width, region_count)
        left, right, radius = render_dp_pair(scene, lens)
        out.append(DpSample(left, right, scene.sharp, radius))
    return out


# ---------------------------------------------------------------------------
# dataset layout: root/<id>_L.png, <id>_R.png, <id>_S.png (+ manifest.json)


def write_png(path, img):
    arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_dataset(samples, root, manifest=None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        sid = f"{i:04d}"
        write_png(root / f"{sid}_L.png", s.left)
        write_png(root / f"{sid}_R.png", s.right)
        write_png(root / f"{sid}_S.png", s.sharp)
    if manifest is not None:
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def dataset_ids(root, require_sharp=True):
    root = Path(root)
    ids = sorted(p.name[: -len("_L.png")] for p in root.glob("*_L.png"))
    if not ids:
        raise FileNotFoundError(f"no *_L.png files under {root}")
    for sid in ids:
        needed = ["R"] + (["S"] if require_sharp else [])
        for part in needed:
            p = root / f"{sid}_{part}.png"
            if not p.exists():
                raise FileNotFoundError(f"dataset triplet {sid!r} is missing {p.name}")
    return ids


def read_dataset(root, require_sharp=True):
    """Triplets as float32 arrays in [0, 1]; sorted by id."""
    root = Path(root)
    samples = []
    for sid in dataset_ids(root, require_sharp):
        left = read_png(root / f"{sid}_L.png")
        right = read_png(root / f"{sid}_R.png")
        sharp = read_png(root / f"{sid}_S.png") if require_sharp else None
        samples.append((sid, DpSample(left, right, sharp)))
    return samples
