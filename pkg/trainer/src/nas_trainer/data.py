"""CIFAR-10 in its standard binary distribution, plus a synthetic stand-in.

The binary layout is one record per image: a label byte followed by 3072
pixel bytes (1024 red, 1024 green, 1024 blue, row-major 32x32).  Training
batches are data_batch_1.bin .. data_batch_5.bin; the test split is
test_batch.bin.  `make_synthetic_dataset` writes files in exactly this
format with a per-class template structure, so the full pipeline can run
offline.
"""

from __future__ import annotations

import logging
import tarfile
import urllib.request
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"
RECORD_BYTES = 3073

# Standard CIFAR-10 channel statistics; an affine constant for synthetic data.
CHANNEL_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CHANNEL_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)


class DatasetUnavailableError(Exception):
    pass


def _batch_dir(root: Path) -> Path:
    nested = root / "cifar-10-batches-bin"
    return nested if nested.is_dir() else root


def dataset_present(root: str | Path) -> bool:
    base = _batch_dir(Path(root))
    return (base / TRAIN_FILES[0]).is_file() and (base / TEST_FILE).is_file()


def ensure_dataset(root: str | Path, auto_download: bool = True) -> Path:
    root = Path(root)
    if dataset_present(root):
        return _batch_dir(root)
    if not auto_download:
        raise DatasetUnavailableError(f"no CIFAR-10 binary batches under {root}")
    root.mkdir(parents=True, exist_ok=True)
    archive = root / "cifar-10-binary.tar.gz"
    logger.info("downloading %s", CIFAR10_URL)
    try:
        urllib.request.urlretrieve(CIFAR10_URL, archive)  # noqa: S310 - fixed URL
        with tarfile.open(archive) as tar:
            tar.extractall(root)
    except OSError as exc:
        raise DatasetUnavailableError(
            f"could not download CIFAR-10 ({exc}); place the binary batches "
            f"under {root} or generate a synthetic set with "
            f"`nas-trainer make-synthetic --out {root}`"
        ) from exc
    if not dataset_present(root):
        raise DatasetUnavailableError(f"archive extracted but batches missing under {root}")
    return _batch_dir(root)


def _read_records(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES != 0:
        raise DatasetUnavailableError(f"{path} is not a CIFAR-10 binary batch")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_split(root: str | Path, train: bool, limit: int | None = None):
    """Images uint8 (N,3,32,32) and labels int64 (N,) for one split."""
    base = _batch_dir(Path(root))
    files = TRAIN_FILES if train else [TEST_FILE]
    images, labels = [], []
    remaining = limit
    for name in files:
        path = base / name
        if not path.is_file():
            if train and images:
                break  # synthetic sets may ship fewer than five batches
            raise DatasetUnavailableError(f"missing batch file {path}")
        imgs, labs = _read_records(path)
        if remaining is not None:
            imgs, labs = imgs[:remaining], labs[:remaining]
            remaining -= len(labs)
        images.append(imgs)
        labels.append(labs)
        if remaining == 0:
            break
    return np.concatenate(images), np.concatenate(labels)


def normalize(images: np.ndarray) -> np.ndarray:
    """uint8 (N,3,32,32) -> float32, channel-standardized."""
    x = images.astype(np.float32) / 255.0
    return (x - CHANNEL_MEAN[None, :, None, None]) / CHANNEL_STD[None, :, None, None]


def augment_batch(batch: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Random 4px-pad crop plus horizontal flip, batched and seeded."""
    n, channels, height, width = batch.shape
    padded = torch.nn.functional.pad(batch, (4, 4, 4, 4))
    offsets = torch.randint(0, 9, (n, 2), generator=generator)
    flips = torch.rand(n, generator=generator) < 0.5

    rows = offsets[:, 0, None] + torch.arange(height)  # (n, H)
    cols = offsets[:, 1, None] + torch.arange(width)  # (n, W)
    out = padded[
        torch.arange(n)[:, None, None, None],
        torch.arange(channels)[None, :, None, None],
        rows[:, None, :, None],
        cols[:, None, None, :],
    ]
    out[flips] = out[flips].flip(-1)
    return out


def make_synthetic_dataset(
    root: str | Path, n_train: int = 5000, n_test: int = 1000, seed: int = 0
) -> Path:
    """Write a learnable synthetic dataset in the CIFAR-10 binary format.

    Each class gets a fixed random template; images are a noisy blend of
    their class template, so even brief training separates the classes.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    templates = rng.integers(0, 256, size=(10, 3, 32, 32)).astype(np.float32)

    def render(n, offset):
        labels = (np.arange(n) + offset) % 10
        noise = rng.integers(0, 256, size=(n, 3, 32, 32)).astype(np.float32)
        images = np.clip(0.55 * templates[labels] + 0.45 * noise, 0, 255).astype(np.uint8)
        order = rng.permutation(n)
        return images[order], labels[order].astype(np.uint8)

    def write(path, images, labels):
        records = np.concatenate(
            [labels[:, None], images.reshape(len(labels), -1)], axis=1, dtype=np.uint8
        )
        records.tofile(path)

    per_file = 10_000
    remaining, index = n_train, 1
    while remaining > 0:
        count = min(per_file, remaining)
        images, labels = render(count, offset=n_train - remaining)
        write(root / f"data_batch_{index}.bin", images, labels)
        remaining -= count
        index += 1
    images, labels = render(n_test, offset=0)
    write(root / TEST_FILE, images, labels)
    return root
