"""Procedural camouflage samples and 8-bit PGM/PPM dataset I/O.

Random numbers come from numpy's Philox-4x64 counter-based generator keyed by
the integer seed, so a seed names the same stream on every platform.  Only
IEEE basic arithmetic is used downstream of the generator (the sine below is
a polynomial), which keeps samples bit-identical across machines.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

MIN_FRACTION = 0.01
MAX_FRACTION = 0.60
# minimum RGB distance between raw foreground and background base colors
MIN_COLOR_GAP = 0.4
EDGE_PERTURBATION = 0.05


class ImageIOError(OSError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float64 in [0, 1], multiples of 1/255
    mask: np.ndarray  # [1, H, W] uint8 in {0, 1}
    boundary: np.ndarray  # [1, H, W] uint8 in {0, 1}
    seed: int = -1


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


_TWO_PI = 2.0 * np.pi


def det_sin(t: np.ndarray) -> np.ndarray:
    """sin(t) from range reduction and an odd Taylor polynomial (|err| < 1e-10)."""
    r = t - _TWO_PI * np.round(t / _TWO_PI)
    # fold [-pi, pi] onto [-pi/2, pi/2]
    r = np.where(r > np.pi / 2, np.pi - r, r)
    r = np.where(r < -np.pi / 2, -np.pi - r, r)
    r2 = r * r
    acc = np.zeros_like(r)
    for n in range(17, 1, -2):
        # Horner form of sum (-1)^k r^(2k+1)/(2k+1)!
        acc = 1.0 - acc * r2 / ((n - 1) * n)
    return r * acc


def _waves(rng, yy, xx, count: int, fmin: float, fmax: float, amp: float) -> np.ndarray:
    out = np.zeros_like(yy)
    for _ in range(count):
        fy, fx = rng.uniform(-fmax, fmax, size=2)
        norm = np.sqrt(fy * fy + fx * fx)
        if norm < fmin:
            scale = fmin / max(norm, 1e-9)
            fy, fx = fy * scale, fx * scale
        phase = rng.uniform(0.0, _TWO_PI)
        a = rng.uniform(0.5, 1.0) * amp
        out = out + a * det_sin(_TWO_PI * (fy * yy + fx * xx) + phase)
    return out


def _blob(rng, yy, xx) -> np.ndarray:
    for _ in range(100):
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        ry, rx = rng.uniform(0.15, 0.35, size=2)
        field = 1.0 - ((yy - cy) / ry) ** 2 - ((xx - cx) / rx) ** 2
        field = field + _waves(rng, yy, xx, 4, 0.5, 2.5, 0.25)
        mask = field > 0
        if MIN_FRACTION <= mask.mean() <= MAX_FRACTION:
            return mask
    raise RuntimeError("could not draw a blob within the mask-fraction bounds")


def _colors(rng) -> tuple[np.ndarray, np.ndarray]:
    bg = rng.uniform(0.2, 0.8, size=3)
    while True:
        fg = rng.uniform(0.1, 0.9, size=3)
        if np.sqrt(((fg - bg) ** 2).sum()) >= MIN_COLOR_GAP:
            return fg, bg


def boundary_from_mask(mask: np.ndarray) -> np.ndarray:
    """Inner 4-neighbourhood contour: mask pixels with a 4-neighbour outside the mask.

    Pixels beyond the image border count as equal to their nearest in-image pixel.
    """
    m = np.asarray(mask) != 0
    p = np.pad(m, [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    interior = (
        p[..., :-2, 1:-1] & p[..., 2:, 1:-1] & p[..., 1:-1, :-2] & p[..., 1:-1, 2:]
    )
    return (m & ~interior).astype(np.uint8)


def generate_sample(seed: int, size: tuple[int, int] = (96, 96), difficulty: float = 0.5) -> Sample:
    """One camouflage sample; ``difficulty`` 1 makes the object match the background."""
    h, w = size
    if h % 32 or w % 32:
        raise ValueError(f"sample size {size} must be divisible by 32")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    rng = philox(seed)
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    mask = _blob(rng, yy, xx)
    fg_color, bg_color = _colors(rng)
    bg_tex = _waves(rng, yy, xx, 3, 4.0, 12.0, 0.06)[None] * rng.uniform(0.5, 1.5, size=(3, 1, 1))
    fg_tex = _waves(rng, yy, xx, 3, 4.0, 12.0, 0.06)[None] * rng.uniform(0.5, 1.5, size=(3, 1, 1))
    noise = rng.uniform(-0.03, 0.03, size=(3, h, w))
    d = difficulty
    background = bg_color[:, None, None] + bg_tex
    foreground = ((1 - d) * fg_color + d * bg_color)[:, None, None] + (1 - d) * fg_tex + d * bg_tex
    image = np.where(mask[None], foreground, background) + noise
    edge = boundary_from_mask(mask)
    image = image - EDGE_PERTURBATION * edge[None]
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return Sample(image, mask[None].astype(np.uint8), edge[None], seed)


def hflip(sample: Sample) -> Sample:
    return Sample(
        np.ascontiguousarray(sample.image[..., ::-1]),
        np.ascontiguousarray(sample.mask[..., ::-1]),
        np.ascontiguousarray(sample.boundary[..., ::-1]),
        sample.seed,
    )


# -- image I/O --------------------------------------------------------------

def to_uint8(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == np.uint8:
        return a
    if a.dtype == bool:
        return a.astype(np.uint8) * 255
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, array: np.ndarray) -> None:
    """Write [H, W] / [1, H, W] as PGM (P5) or [3, H, W] as PPM (P6), max value 255."""
    a = to_uint8(array)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim == 3 and a.shape[0] == 3:
        img = Image.fromarray(np.ascontiguousarray(a.transpose(1, 2, 0)), mode="RGB")
    elif a.ndim == 2:
        img = Image.fromarray(a, mode="L")
    else:
        raise ImageIOError(path, f"cannot store array of shape {a.shape} as PGM/PPM")
    try:
        img.save(path, format="PPM")
    except OSError as exc:
        raise ImageIOError(path, str(exc)) from exc


def read_image(path) -> np.ndarray:
    """Read a PGM/PPM file as uint8 [H, W] (grayscale) or [3, H, W] (RGB)."""
    try:
        with Image.open(path) as img:
            if img.format != "PPM":
                raise ImageIOError(path, f"unsupported format {img.format}, expected PGM/PPM")
            if img.mode == "L":
                return np.asarray(img, dtype=np.uint8).copy()
            if img.mode == "RGB":
                return np.asarray(img, dtype=np.uint8).transpose(2, 0, 1).copy()
            raise ImageIOError(path, f"unsupported pixel mode {img.mode}")
    except FileNotFoundError as exc:
        raise ImageIOError(path, "file not found") from exc
    except UnidentifiedImageError as exc:
        raise ImageIOError(path, "not a readable PGM/PPM image") from exc


# -- dataset layout ---------------------------------------------------------

def worker_count() -> int:
    raw = os.environ.get("DPSNET_THREADS", "")
    try:
        return max(1, int(raw)) if raw else max(1, os.cpu_count() or 1)
    except ValueError:
        return 1


def synthetic_dataset(
    seed: int, count: int, size=(96, 96), difficulty: float = 0.5
) -> list[Sample]:
    """``count`` samples with per-sample seeds ``seed * 1_000_003 + i``."""
    seeds = [seed * 1_000_003 + i for i in range(count)]
    with ThreadPoolExecutor(worker_count()) as pool:
        return list(pool.map(lambda s: generate_sample(s, size, difficulty), seeds))


def write_dataset(root, samples: list[Sample]) -> None:
    root = Path(root)
    for sub in ("images", "masks", "boundaries"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_image(root / "images" / f"{i:04d}.ppm", s.image)
        write_image(root / "masks" / f"{i:04d}.pgm", s.mask * 255)
        write_image(root / "boundaries" / f"{i:04d}.pgm", s.boundary * 255)


def load_dataset(root) -> tuple[list[str], list[Sample]]:
    root = Path(root)
    images = root / "images"
    if not images.is_dir():
        raise ImageIOError(images, "dataset has no images/ directory")
    names = sorted(p.stem for p in images.glob("*.ppm"))
    if not names:
        raise ImageIOError(images, "no .ppm images found")
    samples = []
    for name in names:
        image = read_image(images / f"{name}.ppm")
        mask = read_image(root / "masks" / f"{name}.pgm")
        bpath = root / "boundaries" / f"{name}.pgm"
        boundary = read_image(bpath) > 127 if bpath.exists() else boundary_from_mask(mask > 127)
        samples.append(
            Sample(
                image.astype(np.float64) / 255.0,
                (mask > 127)[None].astype(np.uint8),
                np.asarray(boundary, dtype=np.uint8).reshape((1,) + mask.shape),
            )
        )
    return names, samples
