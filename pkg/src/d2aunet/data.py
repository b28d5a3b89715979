"""Slice/mask ingestion, augmentation chain, subject-level splits and batching."""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .tensor import Tensor

IMAGE_SUFFIXES = (".png", ".pgm")


class DataError(Exception):
    """Base class for dataset problems (CLI exit code 2)."""


class UnreadableImageError(DataError):
    pass


class ColorImageError(DataError):
    pass


class ExtentMismatchError(DataError):
    pass


@dataclass
class SegSample:
    image: np.ndarray  # (H, W) float64 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    subject_id: str = ""
    source: str = ""

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ExtentMismatchError(f"image extent {self.image.shape} != mask extent {self.mask.shape}")

    @property
    def lesion_free(self) -> bool:
        return not self.mask.any()


@dataclass
class AugmentConfig:
    resize_to: int = 80
    crop_to: int = 64
    flip_prob: float = 0.5
    rotation_deg: float = 15.0
    gamma_min: float = 0.7
    gamma_max: float = 1.5
    log_transform_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.crop_to > self.resize_to:
            raise ValueError(f"crop_to ({self.crop_to}) must not exceed resize_to ({self.resize_to})")
        if self.crop_to % 16:
            raise ValueError(f"crop_to ({self.crop_to}) must be divisible by 16")
        if not (0 < self.gamma_min <= self.gamma_max):
            raise ValueError("gamma range must be positive with gamma_min <= gamma_max")
        for name in ("flip_prob", "log_transform_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        if self.rotation_deg < 0:
            raise ValueError("rotation_deg must be non-negative")

    @classmethod
    def identity(cls, size: int) -> "AugmentConfig":
        return cls(resize_to=size, crop_to=size, flip_prob=0.0, rotation_deg=0.0,
                   gamma_min=1.0, gamma_max=1.0, log_transform_prob=0.0)


# --------------------------------------------------------------------------
# file io


def read_gray(path: str | Path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale raster as float64 scaled to [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.array(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise UnreadableImageError(f"cannot read image {path}: {exc}") from exc
    if mode in ("L", "1"):
        return arr.astype(np.float64) / (1.0 if mode == "1" else 255.0)
    if mode.startswith("I;16") or mode == "I":
        if arr.min() < 0 or arr.max() > 65535:
            raise UnreadableImageError(f"{path}: integer values outside the 16-bit range")
        return arr.astype(np.float64) / 65535.0
    raise ColorImageError(f"{path}: expected single-channel grayscale, got mode {mode!r}")


def write_gray(path: str | Path, image: np.ndarray, bits: int = 16) -> None:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    top = 255 if bits == 8 else 65535
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * top), 0, top)
    Image.fromarray(arr.astype(np.uint8 if bits == 8 else np.uint16)).save(path)


def load_sample(image_path: str | Path, mask_path: str | Path, subject_id: str | None = None) -> SegSample:
    image = read_gray(image_path)
    mask = (read_gray(mask_path) > 0).astype(np.uint8)
    if image.shape != mask.shape:
        raise ExtentMismatchError(f"{image_path} is {image.shape} but {mask_path} is {mask.shape}")
    stem = Path(image_path).stem
    return SegSample(image, mask, subject_id if subject_id is not None else subject_of(stem), str(image_path))


def save_sample(sample: SegSample, image_path: str | Path, mask_path: str | Path, bits: int = 16) -> None:
    write_gray(image_path, sample.image, bits)
    Image.fromarray((sample.mask > 0).astype(np.uint8) * 255).save(mask_path)


def subject_of(stem: str) -> str:
    """Subject id from a file stem ``<subject>_<slice>``; a stem without '_' is its own subject."""
    return stem.rsplit("_", 1)[0] if "_" in stem else stem


def load_directory(root: str | Path) -> list[SegSample]:
    """Load ``root/images`` and ``root/masks`` pairs matched by file stem."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root} must contain images/ and masks/ directories")
    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    samples = []
    for p in sorted(img_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if p.stem not in masks:
            raise DataError(f"no mask for image {p.name} in {mask_dir}")
        samples.append(load_sample(p, masks[p.stem]))
    if not samples:
        raise DataError(f"no images found in {img_dir}")
    return samples


def read_manifest(path: str | Path) -> dict[str, str]:
    """Parse ``subject_id<TAB>split`` lines; blank lines and '#' comments ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in ("train", "val", "test"):
            raise DataError(f"{path}:{lineno}: expected 'subject_id<TAB>train|val|test'")
        out[parts[0]] = parts[1]
    return out


def write_manifest(path: str | Path, splits: dict[str, list[SegSample]]) -> None:
    lines = []
    for name, samples in splits.items():
        for sid in sorted({s.subject_id for s in samples}):
            lines.append(f"{sid}\t{name}")
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# preprocessing and augmentation


def intensity_normalize(sample: SegSample) -> SegSample:
    img = sample.image.astype(np.float64)
    lo, hi = img.min(), img.max()
    out = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    return replace(sample, image=out)


def resize(image: np.ndarray, size: int, order: int) -> np.ndarray:
    if image.shape == (size, size):
        return image
    factors = (size / image.shape[0], size / image.shape[1])
    return ndimage.zoom(image, factors, order=order, mode="nearest", grid_mode=True)


def rotate(image: np.ndarray, angle: float, order: int) -> np.ndarray:
    if angle == 0:
        return image
    return ndimage.rotate(image, angle, reshape=False, order=order, mode="constant", cval=0.0)


def log_transform(x: np.ndarray, beta: float = 1.0) -> np.ndarray:
    return np.log1p(beta * x) / math.log1p(beta)


def augment(sample: SegSample, cfg: AugmentConfig, rng: np.random.Generator) -> SegSample:
    """resize -> flips -> rotation -> gamma -> optional log -> random crop.

    Random draws happen in a fixed order whatever the config, so a given
    generator state always maps to the same transform parameters.
    """
    hflip = rng.random() < cfg.flip_prob
    vflip = rng.random() < cfg.flip_prob
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) if cfg.rotation_deg else 0.0
    gamma = rng.uniform(cfg.gamma_min, cfg.gamma_max)
    use_log = rng.random() < cfg.log_transform_prob
    span = cfg.resize_to - cfg.crop_to + 1
    y0, x0 = int(rng.integers(0, span)), int(rng.integers(0, span))

    img = resize(sample.image, cfg.resize_to, order=1)
    mask = resize(sample.mask, cfg.resize_to, order=0)
    if hflip:
        img, mask = img[:, ::-1], mask[:, ::-1]
    if vflip:
        img, mask = img[::-1, :], mask[::-1, :]
    img = np.clip(rotate(img, angle, order=1), 0.0, 1.0)
    mask = rotate(mask, angle, order=0)
    if gamma != 1.0:
        img = img**gamma
    if use_log:
        img = log_transform(img)
    img = img[y0 : y0 + cfg.crop_to, x0 : x0 + cfg.crop_to]
    mask = mask[y0 : y0 + cfg.crop_to, x0 : x0 + cfg.crop_to]
    return replace(sample, image=np.ascontiguousarray(img), mask=np.ascontiguousarray(mask).astype(np.uint8))


def center_resize(sample: SegSample, size: int) -> SegSample:
    """Deterministic evaluation-time resize (bilinear image, nearest mask)."""
    return replace(sample, image=resize(sample.image, size, 1), mask=resize(sample.mask, size, 0).astype(np.uint8))


# --------------------------------------------------------------------------
# splitting and batching


def split_by_subject(samples: Sequence[SegSample], fractions: Sequence[float] = (0.8, 0.1, 0.1),
                     seed: int = 0) -> tuple[list[SegSample], ...]:
    """Assign whole subjects to splits; sizes follow ``fractions`` to one subject."""
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, rel_tol=1e-9):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    subjects = sorted({s.subject_id for s in samples})
    if any(not s.subject_id for s in samples):
        raise DataError("every sample needs a subject_id before splitting")
    n = len(subjects)
    wanted = sum(1 for f in fractions if f > 0)
    if n < wanted:
        raise DataError(f"{n} subjects cannot fill {wanted} non-empty splits")
    # largest-remainder apportionment, at least one subject per non-empty split
    quotas = [f * n for f in fractions]
    counts = [max(int(math.floor(q)), 1 if f > 0 else 0) for q, f in zip(quotas, fractions)]
    order = sorted(range(len(fractions)), key=lambda i: quotas[i] - math.floor(quotas[i]), reverse=True)
    while sum(counts) < n:
        for i in order:
            if sum(counts) == n:
                break
            if fractions[i] > 0:
                counts[i] += 1
    while sum(counts) > n:
        i = max(range(len(counts)), key=lambda j: counts[j] - quotas[j])
        counts[i] -= 1
    perm = np.random.default_rng(seed).permutation(n)
    assignment: dict[str, int] = {}
    start = 0
    for split_idx, c in enumerate(counts):
        for k in perm[start : start + c]:
            assignment[subjects[k]] = split_idx
        start += c
    out: tuple[list[SegSample], ...] = tuple([] for _ in fractions)
    for s in samples:
        out[assignment[s.subject_id]].append(s)
    return out


def split_by_manifest(samples: Sequence[SegSample], manifest: dict[str, str]) -> dict[str, list[SegSample]]:
    out: dict[str, list[SegSample]] = {"train": [], "val": [], "test": []}
    for s in samples:
        if s.subject_id not in manifest:
            raise DataError(f"subject {s.subject_id!r} missing from split manifest")
        out[manifest[s.subject_id]].append(s)
    return out


def epoch_rng(seed: int, epoch: int, *index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, *index])


def batch_iter(samples: Sequence[SegSample], batch_size: int, cfg: AugmentConfig | None, seed: int,
               epoch: int = 0, shuffle: bool = True, dtype=np.float32) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield ``(images (B,1,h,w) Tensor, masks (B,1,h,w) uint8)`` for one epoch.

    Order and augmentation depend only on (seed, epoch, position), so any
    prefetching consumer sees the same stream.
    """
    if not samples:
        raise DataError("cannot batch an empty split")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_rng(seed, epoch).permutation(len(samples)) if shuffle else np.arange(len(samples))
    for start in range(0, len(samples), batch_size):
        imgs, masks = [], []
        for pos in range(start, min(start + batch_size, len(samples))):
            s = samples[order[pos]]
            if cfg is not None:
                s = augment(s, cfg, epoch_rng(seed, epoch, pos))
            imgs.append(s.image)
            masks.append(s.mask)
        images = np.stack(imgs)[:, None].astype(dtype)
        yield Tensor(images), np.stack(masks)[:, None].astype(np.uint8)


def prefetch(batches: Iterable, depth: int = 2) -> Iterator:
    """Produce items on a background thread through a bounded queue (order preserved)."""
    if depth <= 0:
        yield from batches
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    errors: list[BaseException] = []

    def worker():
        try:
            for item in batches:
                q.put(item)
        except BaseException as exc:  # re-raised on the consumer side
            errors.append(exc)
        finally:
            q.put(done)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()
    if errors:
        raise errors[0]


# --------------------------------------------------------------------------
# synthetic fixture


def synthetic_samples(n: int = 4, size: int = 64, seed: int = 0, subjects: int | None = None) -> list[SegSample]:
    """Noisy dark slices with 1-3 bright elliptical lesions each."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    out = []
    for i in range(n):
        image = 0.15 + 0.1 * rng.random((size, size))
        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
            ry, rx = rng.uniform(0.06 * size, 0.18 * size, 2)
            mask |= (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1).astype(np.uint8)
        image = np.where(mask > 0, 0.65 + 0.2 * rng.random((size, size)), image)
        subject = f"s{(i if subjects is None else i % subjects):03d}"
        out.append(SegSample(np.clip(image, 0, 1), mask, subject, f"synthetic:{i}"))
    return out


def write_dataset(samples: Sequence[SegSample], root: str | Path, bits: int = 16) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{s.subject_id}_{i:04d}"
        save_sample(s, root / "images" / f"{stem}.png", root / "masks" / f"{stem}.png", bits)
    return root
