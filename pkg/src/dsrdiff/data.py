"""RGB-D datasets: loading, LR synthesis, normalization, patches and synthetic scenes.

Arrays in this module are numpy, channel-last (``H x W x C``), float32.
Depth is stored in meters; normalized maps live in [0, 1].

Directory layout::

    <root>/<split>/manifest.txt        one id per line
    <root>/<split>/<id>_color.png      8- or 16-bit RGB
    <root>/<split>/<id>_depth.npy      float depth in meters, or
    <root>/<split>/<id>_depth.png      16-bit depth in millimeters
"""
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .resize import imresize

SCALES = (4, 8, 16)
SPLIT_NAMES = ("nyu_train", "nyu_test", "middlebury", "lu", "synthetic")
EXPECTED_COUNTS = {"nyu_train": 1000, "nyu_test": 449}


class DataError(Exception):
    """Raised for missing, corrupt or malformed dataset files."""


@dataclass
class RGBDSample:
    color_hr: np.ndarray  # H x W x 3 in [0, 1]
    depth_hr: np.ndarray  # H x W x 1 normalized
    depth_lr: np.ndarray  # H/s x W/s x 1
    depth_min: float
    depth_max: float
    scale: int
    id: str

    def __post_init__(self):
        h, w = self.depth_hr.shape[:2]
        s = self.scale
        if h % s or w % s:
            raise DataError(f"{self.id}: {h}x{w} not divisible by scale {s}")
        if self.color_hr.shape[:2] != (h, w):
            raise DataError(f"{self.id}: color {self.color_hr.shape[:2]} vs depth {(h, w)}")
        if self.depth_lr.shape[:2] != (h // s, w // s):
            raise DataError(f"{self.id}: LR depth has shape {self.depth_lr.shape[:2]}")
        if not self.depth_max > self.depth_min:
            raise DataError(f"{self.id}: depth_max must exceed depth_min")

    @property
    def hr_shape(self):
        return self.depth_hr.shape[:2]

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return denormalize_depth(x, self.depth_min, self.depth_max)


@dataclass
class DatasetSplit:
    samples: list
    name: str
    seed: int = 0

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def order(self, epoch: int = 0) -> np.ndarray:
        """Epoch visiting order; a pure function of ``(name, seed, epoch)``."""
        key = [self.seed, epoch, *self.name.encode()]
        return np.random.default_rng(key).permutation(len(self.samples))


def _check_scale(scale):
    if scale < 1:
        raise ValueError(f"scale must be positive, got {scale}")


def synthesize_lr(depth_hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic (antialiased) downsampling by ``scale``, clamped to [0, 1]."""
    _check_scale(scale)
    h, w = depth_hr.shape[:2]
    if h % scale or w % scale:
        raise DataError(f"depth map {h}x{w} not divisible by scale {scale}")
    lr = imresize(depth_hr.astype(np.float32), h // scale, w // scale)
    return np.clip(lr, 0.0, 1.0).astype(np.float32)


def normalize_depth(raw: np.ndarray):
    """Min-max normalize a native-unit depth map; returns ``(norm, min, max)``."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DataError("degenerate depth map: non-finite values")
    lo, hi = float(raw.min()), float(raw.max())
    if not hi > lo:
        raise DataError("degenerate depth map: all values equal")
    return ((raw - lo) / (hi - lo)).astype(np.float32), lo, hi


def denormalize_depth(x: np.ndarray, depth_min: float, depth_max: float) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * (depth_max - depth_min) + depth_min


def center_crop(x: np.ndarray, scale: int) -> np.ndarray:
    h, w = x.shape[:2]
    nh, nw = h - h % scale, w - w % scale
    top, left = (h - nh) // 2, (w - nw) // 2
    return x[top:top + nh, left:left + nw]


def make_sample(color: np.ndarray, depth_m: np.ndarray, scale: int, id: str,
                crop: bool = False) -> RGBDSample:
    """Build a sample from native color (``[0,1]``) and depth (meters)."""
    if depth_m.ndim == 2:
        depth_m = depth_m[..., None]
    if crop:
        color, depth_m = center_crop(color, scale), center_crop(depth_m, scale)
    h, w = depth_m.shape[:2]
    if h % scale or w % scale:
        raise DataError(f"{id}: {h}x{w} not divisible by scale {scale}")
    try:
        norm, lo, hi = normalize_depth(depth_m)
    except DataError as err:
        raise DataError(f"{id}: {err}") from None
    return RGBDSample(
        color_hr=np.asarray(color, dtype=np.float32),
        depth_hr=norm,
        depth_lr=synthesize_lr(norm, scale),
        depth_min=lo,
        depth_max=hi,
        scale=scale,
        id=id,
    )


def read_color(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as err:
        raise DataError(f"cannot read color image {path}: {err}") from None
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    arr = arr[..., :3]
    peak = 65535.0 if arr.dtype == np.uint16 or arr.max() > 255 else 255.0
    return (arr.astype(np.float64) / peak).astype(np.float32)


def read_depth(path: Path) -> np.ndarray:
    """Depth in meters, from ``.npy`` (meters) or 16-bit PNG (millimeters)."""
    try:
        if path.suffix == ".npy":
            arr = np.load(path).astype(np.float64)
        else:
            with Image.open(path) as im:
                arr = np.asarray(im).astype(np.float64) / 1000.0
    except (OSError, ValueError) as err:
        raise DataError(f"cannot read depth map {path}: {err}") from None
    return arr.squeeze()


def write_depth_png(path, depth_m: np.ndarray) -> None:
    mm = np.clip(np.rint(np.asarray(depth_m).squeeze() * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def write_color_png(path, color: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(color * 255.0), 0, 255).astype(np.uint8)).save(path)


def _depth_path(folder: Path, sid: str) -> Path:
    for ext in (".npy", ".png"):
        p = folder / f"{sid}_depth{ext}"
        if p.exists():
            return p
    raise DataError(f"missing depth file for id {sid!r} in {folder}")


def load_dataset(root, name: str, scale: int, seed: int = 0, crop: bool = False,
                 allow_partial: bool = False) -> DatasetSplit:
    """Load ``<root>/<name>`` as a :class:`DatasetSplit` sorted by id.

    Dimensions not divisible by ``scale`` raise unless ``crop`` enables a
    center crop. NYU splits must have their published sizes unless
    ``allow_partial`` is set.
    """
    if name not in SPLIT_NAMES:
        raise ValueError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
    if scale not in SCALES and name != "synthetic":
        raise ValueError(f"scale must be one of {SCALES}, got {scale}")
    folder = Path(root) / name
    manifest = folder / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"no samples found in {folder} (missing manifest.txt)")
    ids = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
    if not ids:
        raise DataError(f"no samples found in {folder}")
    expected = EXPECTED_COUNTS.get(name)
    if expected is not None and len(ids) != expected and not allow_partial:
        raise DataError(f"{name} manifest lists {len(ids)} ids, expected {expected}")
    samples = []
    for sid in sorted(ids):
        color_path = folder / f"{sid}_color.png"
        if not color_path.exists():
            raise DataError(f"missing color file {color_path}")
        color = read_color(color_path)
        depth = read_depth(_depth_path(folder, sid))
        samples.append(make_sample(color, depth, scale, sid, crop=crop))
    return DatasetSplit(samples=samples, name=name, seed=seed)


def crop_sample(sample: RGBDSample, top: int, left: int, size: int) -> RGBDSample:
    depth = sample.depth_hr[top:top + size, left:left + size]
    return replace(
        sample,
        color_hr=sample.color_hr[top:top + size, left:left + size],
        depth_hr=depth,
        depth_lr=synthesize_lr(depth, sample.scale),
        id=f"{sample.id}@{top},{left}",
    )


def extract_patches(split: DatasetSplit, patch_hr: int, seed: int,
                    per_image: int = 1) -> list:
    """Deterministic aligned random crops; LR depth is re-synthesized per crop."""
    rng = np.random.default_rng(seed)
    patches = []
    for sample in split:
        h, w = sample.hr_shape
        if patch_hr % sample.scale:
            raise DataError(f"patch size {patch_hr} not divisible by scale {sample.scale}")
        if patch_hr > min(h, w):
            raise DataError(f"patch size {patch_hr} exceeds image {h}x{w} ({sample.id})")
        for _ in range(per_image):
            # offsets on the LR grid keep HR/LR crops aligned
            top = int(rng.integers(0, (h - patch_hr) // sample.scale + 1)) * sample.scale
            left = int(rng.integers(0, (w - patch_hr) // sample.scale + 1)) * sample.scale
            if patch_hr == h == w:
                patches.append(sample)
            else:
                patches.append(crop_sample(sample, top, left, patch_hr))
    return patches


def _smooth_noise(rng, size, cells):
    coarse = rng.uniform(-1.0, 1.0, (cells, cells))
    return imresize(coarse, size, size)


def make_synthetic_scene(seed: int, size: int, scale: int = 4) -> RGBDSample:
    """Rectangles at distinct depths over a sloped background, with a decoy texture.

    Color edges coincide with the depth discontinuities; the stripe texture on
    the color image has no counterpart in depth.
    """
    if size % 16:
        raise ValueError(f"size must be divisible by 16, got {size}")
    rng = np.random.default_rng([seed, size])
    yy, xx = np.mgrid[0:size, 0:size] / size
    gx, gy = rng.uniform(-1.0, 1.0, 2)
    depth = 4.0 + 1.0 * (gx * xx + gy * yy)  # meters
    base = rng.uniform(0.3, 0.7, 3)
    color = base + 0.15 * (xx[..., None] * rng.uniform(-1, 1, 3))

    n_rect = int(rng.integers(3, 6))
    levels = rng.permutation(np.linspace(1.0, 3.0, 8))[:n_rect]
    for k in range(n_rect):
        h, w = rng.integers(size // 6, size // 2, 2)
        top, left = rng.integers(0, size - h), rng.integers(0, size - w)
        region = (slice(top, top + h), slice(left, left + w))
        depth[region] = levels[k]
        color[region] = rng.uniform(0.0, 1.0, 3)

    # the last rectangle drawn is always fully visible; guarantee two more
    # plateaus by stamping small squares in free corners if needed
    visible = [lv for lv in levels if np.any(depth == lv)]
    corner = max(size // 8, 2)
    spots = [(0, 0), (0, size - corner), (size - corner, 0), (size - corner, size - corner)]
    spare = iter(np.linspace(0.5, 0.9, 4))
    for top, left in spots:
        if len(visible) >= 3:
            break
        lv = next(spare)
        depth[top:top + corner, left:left + corner] = lv
        color[top:top + corner, left:left + corner] = rng.uniform(0.0, 1.0, 3)
        visible.append(lv)

    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * rng.uniform(4, 8) + yy * rng.uniform(1, 3)))
    mask = _smooth_noise(rng, size, 3) > 0.2
    color = color + 0.12 * (stripes * mask)[..., None]
    color = np.clip(color, 0.0, 1.0)
    return make_sample(color, depth, scale, id=f"synthetic_{seed:04d}")


def synthetic_split(n: int, size: int, scale: int = 4, seed: int = 0) -> DatasetSplit:
    samples = [make_synthetic_scene(seed + i, size, scale) for i in range(n)]
    return DatasetSplit(samples=sorted(samples, key=lambda s: s.id), name="synthetic", seed=seed)


def write_synthetic_dataset(root, n: int, size: int, seed: int = 0) -> Path:
    """Write ``n`` synthetic scenes in the on-disk dataset layout."""
    folder = Path(root) / "synthetic"
    folder.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n):
        s = make_synthetic_scene(seed + i, size)
        write_color_png(folder / f"{s.id}_color.png", s.color_hr)
        np.save(folder / f"{s.id}_depth.npy", s.denormalize(s.depth_hr))
        ids.append(s.id)
    (folder / "manifest.txt").write_text("\n".join(ids) + "\n")
    return folder
