"""Training loops: proxy evaluation during search and full retraining.

Recipe: SGD with momentum 0.9, cosine-annealed learning rate, batch 128,
crop+flip augmentation, 90/10 train/validation split.  Everything is
seeded; two identical runs produce identical accuracies.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from nas_trainer import data as cifar

logger = logging.getLogger(__name__)


class TrainingDiverged(Exception):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10  # proxy default; retraining uses 500
    batch_size: int = 128
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"  # "cosine" | "constant"
    split: float = 0.9
    dataset_root: str = "data/cifar10"
    auto_download: bool = True
    limit: int | None = None  # cap on training images (subset runs)
    augment: bool = True
    seed: int = 0
    num_threads: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must be in (0, 1)")

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown train-config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class LoadedData:
    train_images: torch.Tensor
    train_labels: torch.Tensor
    val_images: torch.Tensor
    val_labels: torch.Tensor
    test_images: torch.Tensor = field(default=None)
    test_labels: torch.Tensor = field(default=None)


def load_dataset(config: TrainConfig, with_test: bool = False) -> LoadedData:
    root = cifar.ensure_dataset(config.dataset_root, config.auto_download)
    images, labels = cifar.load_split(root, train=True, limit=config.limit)
    x = torch.from_numpy(cifar.normalize(images))
    y = torch.from_numpy(labels)

    # deterministic split, independent of the per-request training seed
    order = torch.randperm(len(y), generator=torch.Generator().manual_seed(0))
    cut = int(len(y) * config.split)
    loaded = LoadedData(
        train_images=x[order[:cut]],
        train_labels=y[order[:cut]],
        val_images=x[order[cut:]],
        val_labels=y[order[cut:]],
    )
    if with_test:
        test_images, test_labels = cifar.load_split(root, train=False)
        loaded.test_images = torch.from_numpy(cifar.normalize(test_images))
        loaded.test_labels = torch.from_numpy(test_labels)
    return loaded


def _lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.schedule == "constant":
        return config.base_lr
    progress = step / max(total_steps - 1, 1)
    return 0.5 * config.base_lr * (1.0 + math.cos(math.pi * progress))


@torch.no_grad()
def evaluate_accuracy(model, images: torch.Tensor, labels: torch.Tensor, batch_size=256) -> float:
    model.eval()
    correct = 0
    for start in range(0, len(labels), batch_size):
        logits = model(images[start : start + batch_size])
        correct += int((logits.argmax(dim=1) == labels[start : start + batch_size]).sum())
    return correct / max(len(labels), 1)


def evaluate_architecture(graph_doc: dict, loaded: LoadedData, config: TrainConfig, epochs: int | None = None):
    """Seeded build + train + validate; returns (model, val_accuracy).

    Seeding happens before construction so identical requests produce
    identical weights, training trajectories and accuracies.
    """
    from nas_trainer.model import build_model

    torch.manual_seed(config.seed)
    model = build_model(graph_doc)
    accuracy = train_model(model, loaded, config, epochs=epochs)
    return model, accuracy


def train_model(model, loaded: LoadedData, config: TrainConfig, epochs: int | None = None) -> float:
    """Train in place; returns validation accuracy.

    Raises TrainingDiverged on a non-finite loss.
    """
    if config.num_threads:
        torch.set_num_threads(config.num_threads)
    epochs = epochs if epochs is not None else config.epochs
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)

    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    loss_fn = torch.nn.CrossEntropyLoss()
    n = len(loaded.train_labels)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = epochs * steps_per_epoch
    step = 0

    for epoch in range(epochs):
        model.train()
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = loaded.train_images[idx]
            if config.augment:
                batch = cifar.augment_batch(batch, generator)
            for group in optimizer.param_groups:
                group["lr"] = _lr_at(config, step, total_steps)
            optimizer.zero_grad()
            loss = loss_fn(model(batch), loaded.train_labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}")
            loss.backward()
            optimizer.step()
            step += 1
        logger.debug("epoch %d done, last loss %.4f", epoch, float(loss.detach()))

    return evaluate_accuracy(model, loaded.val_images, loaded.val_labels)
