"""Image loading, preprocessing (LCN + ZCA whitening), noise and split manifests."""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError

logger = logging.getLogger(__name__)

STL10_SIZE = 96
STL10_IMAGE_BYTES = 3 * STL10_SIZE * STL10_SIZE  # 27648
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class ImageBatch:
    """Images ``[N, C, H, W]`` (float32) with one source id per image."""

    data: np.ndarray
    ids: list[str]
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"image data must be 4-D, got shape {self.data.shape}")
        if len(self.ids) != len(self.data):
            raise ValueError("one id per image required")

    def __len__(self):
        return len(self.data)

    def subset(self, idx) -> "ImageBatch":
        idx = np.asarray(idx, dtype=int)
        return ImageBatch(self.data[idx], [self.ids[i] for i in idx])

    def with_data(self, data) -> "ImageBatch":
        return ImageBatch(data, list(self.ids), list(self.skipped))

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.data).to(dtype)


def _as_array(batch) -> tuple[np.ndarray, ImageBatch | None]:
    if isinstance(batch, ImageBatch):
        return batch.data, batch
    if isinstance(batch, torch.Tensor):
        return batch.detach().cpu().numpy(), None
    return np.asarray(batch), None


def _wrap(out: np.ndarray, like: ImageBatch | None):
    return like.with_data(out) if like is not None else out


# --------------------------------------------------------------------------
# Loaders
# --------------------------------------------------------------------------


def load_stl10(path, limit: int | None = None) -> ImageBatch:
    """Read an STL-10 ``*_X.bin`` file: uint8 planes stored column-major per image.

    Values are scaled to [0, 1].  ``limit`` keeps only the first images.
    """
    path = os.fspath(path)
    try:
        size = os.path.getsize(path)
    except OSError as exc:
        raise DataError(f"cannot read STL-10 file {path}: {exc}") from exc
    if size % STL10_IMAGE_BYTES:
        offset = (size // STL10_IMAGE_BYTES) * STL10_IMAGE_BYTES
        raise DataError(
            f"{path}: truncated image at byte offset {offset} "
            f"(file size {size} is not a multiple of {STL10_IMAGE_BYTES})"
        )
    n = size // STL10_IMAGE_BYTES
    if limit is not None:
        n = min(n, int(limit))
    raw = np.fromfile(path, dtype=np.uint8, count=n * STL10_IMAGE_BYTES)
    images = raw.reshape(n, 3, STL10_SIZE, STL10_SIZE).transpose(0, 1, 3, 2)
    base = os.path.basename(path)
    return ImageBatch(images.astype(np.float32) / 255.0, [f"{base}:{i}" for i in range(n)])


def load_image_dir(path, resize: Sequence[int] | None = None, grayscale: bool = False) -> ImageBatch:
    """Load PNG/JPEG files from a directory in lexicographic filename order.

    ``resize`` is ``(height, width)``; images are resampled bilinearly.  Files
    that cannot be decoded are skipped with a warning and listed in ``skipped``.
    """
    from PIL import Image

    path = os.fspath(path)
    if not os.path.isdir(path):
        raise DataError(f"not a directory: {path}")
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(IMAGE_SUFFIXES))
    arrays, ids, skipped = [], [], []
    for name in names:
        try:
            with Image.open(os.path.join(path, name)) as im:
                im = im.convert("L" if grayscale else "RGB")
                if resize is not None:
                    im = im.resize((int(resize[1]), int(resize[0])), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except Exception as exc:  # decoder errors come in many types
            warnings.warn(f"skipping unreadable image {name}: {exc}")
            skipped.append(name)
            continue
        arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
        if arrays and arr.shape != arrays[0].shape:
            warnings.warn(f"skipping {name}: size {arr.shape} differs from {arrays[0].shape}")
            skipped.append(name)
            continue
        arrays.append(arr)
        ids.append(name)
    if arrays:
        data = np.stack(arrays)
    else:
        c = 1 if grayscale else 3
        h, w = (int(resize[0]), int(resize[1])) if resize is not None else (0, 0)
        data = np.zeros((0, c, h, w), dtype=np.float32)
    return ImageBatch(data, ids, skipped)


# --------------------------------------------------------------------------
# Local contrast normalization
# --------------------------------------------------------------------------


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _local_mean(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Gaussian-weighted mean per channel, renormalized by the in-bounds weight."""
    c = x.shape[1]
    pad = kernel.shape[-1] // 2
    w = kernel.expand(c, 1, *kernel.shape[-2:])
    num = F.conv2d(x, w, padding=pad, groups=c)
    ones = torch.ones((1, 1) + x.shape[2:], dtype=x.dtype)
    den = F.conv2d(ones, kernel, padding=pad)
    return num / den


def lcn(batch, kernel_size: int = 9, sigma: float = 2.0, epsilon: float = 1e-2, return_parts=False):
    """Local contrast normalization (subtractive then divisive).

    Each channel has its Gaussian-weighted local mean removed; the result is
    divided by ``max(s, epsilon)`` where ``s`` is the Gaussian-weighted local
    standard deviation pooled across channels.  Border pixels use the kernel
    weights that fall inside the image.

    With ``return_parts=True`` also returns the local means and the divisor.
    """
    if kernel_size % 2 != 1:
        raise ValueError("kernel_size must be odd")
    arr, like = _as_array(batch)
    if arr.shape[0] == 0:
        return _wrap(arr.astype(np.float32), like)
    x = torch.as_tensor(arr, dtype=torch.float64)
    kernel = torch.as_tensor(gaussian_kernel(kernel_size, sigma))[None, None]
    mean = _local_mean(x, kernel)
    centered = x - mean
    var = _local_mean(centered ** 2, kernel).mean(dim=1, keepdim=True)
    divisor = torch.clamp_min(var.clamp_min(0).sqrt(), epsilon)
    out = (centered / divisor).numpy().astype(np.float32)
    if return_parts:
        return _wrap(out, like), mean.numpy(), divisor.numpy()
    return _wrap(out, like)


# --------------------------------------------------------------------------
# ZCA whitening
# --------------------------------------------------------------------------


@dataclass
class WhiteningOperator:
    """ZCA transform fit on vectors or on image patches.

    For images (``patch_size`` set) the transform is applied as a convolution
    whose kernel is the row of the ZCA matrix belonging to each channel's
    central patch pixel.
    """

    mean: np.ndarray
    matrix: np.ndarray
    epsilon: float
    patch_size: int | None = None
    channels: int | None = None

    def kernel(self) -> np.ndarray:
        """Convolution kernel ``[C, C, p, p]`` for image whitening."""
        p, c = self.patch_size, self.channels
        centre = (p // 2) * p + p // 2
        rows = [ch * p * p + centre for ch in range(c)]
        return self.matrix[rows].reshape(c, c, p, p)

    def channel_mean(self) -> np.ndarray:
        return self.mean.reshape(self.channels, -1).mean(axis=1)


def extract_patches(images: np.ndarray, patch_size: int, max_patches: int, seed: int = 0) -> np.ndarray:
    """Random ``[P, C*p*p]`` patch matrix (all positions when there are few enough)."""
    n, c, h, w = images.shape
    ph, pw = h - patch_size + 1, w - patch_size + 1
    total = n * ph * pw
    rng = np.random.default_rng(seed)
    if total <= max_patches:
        flat = np.arange(total)
    else:
        flat = np.sort(rng.choice(total, size=max_patches, replace=False))
    img, rem = np.divmod(flat, ph * pw)
    ys, xs = np.divmod(rem, pw)
    out = np.empty((len(flat), c * patch_size * patch_size), dtype=np.float64)
    for k, (i, y, x) in enumerate(zip(img, ys, xs)):
        out[k] = images[i, :, y:y + patch_size, x:x + patch_size].ravel()
    return out


def fit_whitening(
    train,
    patch_size: int | None = None,
    max_patches: int = 100_000,
    eps_scale: float = 1e-5,
    seed: int = 0,
) -> WhiteningOperator:
    """Fit ZCA on ``[N, D]`` vectors, or on image patches when ``patch_size`` is given.

    Eigenvalues are floored at ``eps_scale * trace / dim``.
    """
    arr, _ = _as_array(train)
    arr = np.asarray(arr, dtype=np.float64)
    channels = None
    if patch_size is not None:
        if patch_size % 2 != 1:
            raise ValueError("patch_size must be odd")
        channels = arr.shape[1]
        arr = extract_patches(arr, patch_size, max_patches, seed)
    elif arr.ndim != 2:
        raise ValueError("vector whitening expects [N, D]; pass patch_size for images")
    mean = arr.mean(axis=0)
    centered = arr - mean
    cov = centered.T @ centered / len(arr)
    evals, evecs = np.linalg.eigh(cov)
    floor = eps_scale * np.trace(cov) / cov.shape[0]
    epsilon = float(floor) if floor > 0 else eps_scale
    scale = 1.0 / np.sqrt(np.maximum(evals, epsilon))
    matrix = (evecs * scale) @ evecs.T
    return WhiteningOperator(mean, matrix, epsilon, patch_size, channels)


def apply_whitening(op: WhiteningOperator, batch):
    arr, like = _as_array(batch)
    if op.patch_size is None:
        out = (np.asarray(arr, dtype=np.float64) - op.mean) @ op.matrix.T
        return _wrap(out, like) if like is not None else out
    if arr.shape[0] == 0:
        return _wrap(np.asarray(arr, dtype=np.float32), like)
    x = torch.as_tensor(np.asarray(arr, dtype=np.float64))
    x = x - torch.as_tensor(op.channel_mean())[None, :, None, None]
    pad = op.patch_size // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    out = F.conv2d(x, torch.as_tensor(op.kernel())).numpy().astype(np.float32)
    return _wrap(out, like)


def preprocess(batch, whitening: WhiteningOperator | None = None, **lcn_kw):
    """LCN followed by whitening (when an operator is given)."""
    out = lcn(batch, **lcn_kw)
    return apply_whitening(whitening, out) if whitening is not None else out


# --------------------------------------------------------------------------
# Noise and splits
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def add_noise(batch, spec: NoiseSpec, indices: Sequence[int] | None = None):
    """Add N(0, sigma^2) noise; image ``k`` draws from the stream ``(seed, indices[k])``."""
    arr, like = _as_array(batch)
    arr = np.asarray(arr, dtype=np.float32)
    if spec.sigma == 0:
        return _wrap(arr.copy(), like)
    if indices is None:
        indices = range(len(arr))
    out = np.empty_like(arr)
    for k, idx in enumerate(indices):
        rng = np.random.default_rng([int(spec.seed), int(idx)])
        out[k] = arr[k] + spec.sigma * rng.standard_normal(arr.shape[1:])
    return _wrap(out, like)


def write_manifest(path, ids: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in ids:
            fh.write(f"{i}\n")


def read_manifest(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def stl10_splits(root, n_train: int = 5000, n_test: int = 1200) -> tuple[ImageBatch, ImageBatch]:
    """Train images from ``train_X.bin`` and the first ``n_test`` from ``test_X.bin``."""
    train = load_stl10(os.path.join(root, "train_X.bin"), limit=n_train)
    test = load_stl10(os.path.join(root, "test_X.bin"), limit=n_test)
    overlap = set(train.ids) & set(test.ids)
    if overlap:
        raise DataError(f"{len(overlap)} ids appear in both splits")
    return train, test


def image_dir_splits(path, n_train: int, n_test: int, resize=None, grayscale=False):
    """Deterministic train/test split of an image directory (lexicographic order)."""
    images = load_image_dir(path, resize=resize, grayscale=grayscale)
    if len(images) < n_train + n_test:
        raise DataError(f"{path}: need {n_train + n_test} images, found {len(images)}")
    idx = np.arange(len(images))
    return images.subset(idx[:n_train]), images.subset(idx[n_train:n_train + n_test])
