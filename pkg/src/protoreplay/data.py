"""Datasets and task protocols.

Two protocol families are supported: incremental domain (a fixed label set
whose inputs get a fresh pixel permutation per task) and incremental class
(disjoint new classes per task, few-shot quotas). Real image data is read
from IDX files; a seeded Gaussian-blob generator provides desk-scale
substitutes.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np


class FormatError(ValueError):
    """Raised for malformed input files."""


@dataclass
class Image:
    pixels: np.ndarray       # (C, H, W), float64
    label: int
    task: int = 0
    index: int = 0

    @property
    def elements(self) -> int:
        return int(self.pixels.size)


@dataclass
class Dataset:
    train: List[Image]
    test: List[Image]
    num_classes: int


@dataclass
class TaskSpec:
    task_id: int
    class_ids: List[int]
    train_indices: Dict[int, List[int]]     # class -> indices into Dataset.train
    permutation: Optional[np.ndarray] = None  # flat pixel permutation, or None


@dataclass
class ProtocolSchedule:
    kind: str                 # incremental_domain | incremental_class
    tasks: List[TaskSpec]


# ---------------------------------------------------------------------------
# IDX loading

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def load_idx(images_path, labels_path) -> List[Image]:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise FormatError(f"{images_path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != _IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{_IDX_IMAGE_MAGIC:08x}")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise FormatError(f"{images_path}: truncated pixel data")
    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise FormatError(f"{labels_path}: truncated IDX header")
        magic, n_labels = struct.unpack(">II", header)
        if magic != _IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{_IDX_LABEL_MAGIC:08x}")
        labels = f.read(n_labels)
        if len(labels) != n_labels:
            raise FormatError(f"{labels_path}: truncated label data")
    if n_labels != count:
        raise FormatError(
            f"label count {n_labels} != image count {count}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    pixels = pixels.astype(np.float64) / 255.0
    return [Image(pixels[i], int(labels[i]), index=i) for i in range(count)]


# ---------------------------------------------------------------------------
# synthetic blobs

def synthetic_blobs(num_classes: int, dim: int, per_class_train: int,
                    per_class_test: int, separation: float, seed: int,
                    noise: float = 1.0) -> Dataset:
    """Isotropic Gaussian clusters at separation * u_c along fixed near-
    orthogonal unit directions; samples are stored as (1, 1, dim) vectors."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((num_classes, dim))
    for i in range(num_classes):     # Gram-Schmidt while rank allows
        for j in range(min(i, dim)):
            dirs[i] -= dirs[i] @ dirs[j] * dirs[j]
        n = np.linalg.norm(dirs[i])
        if n < 1e-9:
            dirs[i] = rng.standard_normal(dim)
            n = np.linalg.norm(dirs[i])
        dirs[i] /= n
    centers = separation * dirs

    def draw(n_per_class, offset):
        images = []
        for c in range(num_classes):
            pts = centers[c] + noise * rng.standard_normal((n_per_class, dim))
            for k in range(n_per_class):
                images.append(Image(pts[k].reshape(1, 1, dim), c, index=offset + k))
        return images

    return Dataset(draw(per_class_train, 0), draw(per_class_test, per_class_train),
                   num_classes)


def export_csv(images: List[Image], path):
    """One row per image: label followed by the flattened pixels."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        n = images[0].pixels.size if images else 0
        writer.writerow(["label"] + [f"p{i}" for i in range(n)])
        for img in images:
            writer.writerow([img.label] + [repr(float(v))
                                           for v in img.pixels.reshape(-1)])


# ---------------------------------------------------------------------------
# protocols

def _indices_by_class(images: List[Image]) -> Dict[int, List[int]]:
    by_class: Dict[int, List[int]] = {}
    for i, img in enumerate(images):
        by_class.setdefault(img.label, []).append(i)
    return by_class


def permuted_protocol(base: Dataset, num_tasks: int, seed: int) -> ProtocolSchedule:
    """Identity permutation for task 1, an independent fixed pixel permutation
    for each later task; all classes are active in every task."""
    if num_tasks < 1:
        raise ValueError(f"num_tasks must be >= 1, got {num_tasks}")
    rng = np.random.default_rng(seed)
    by_class = _indices_by_class(base.train)
    classes = sorted(by_class)
    n_pixels = base.train[0].pixels.size
    tasks = []
    for t in range(1, num_tasks + 1):
        perm = None if t == 1 else rng.permutation(n_pixels)
        tasks.append(TaskSpec(t, classes, {c: list(by_class[c]) for c in classes},
                              permutation=perm))
    return ProtocolSchedule("incremental_domain", tasks)


def split_protocol(base: Dataset, schedule_kind, few_shot_quota: int = 10,
                   seed: int = 0) -> ProtocolSchedule:
    """Disjoint-class task schedule with seeded few-shot subsampling.

    schedule_kind: "cifar_like" (2 classes then +1 per task, quota 10),
    "imagenet_like" (10 classes per task, 10 tasks, first-task quota 480,
    then 10), or a custom list of (class_ids, quota) pairs.
    """
    rng = np.random.default_rng(seed)
    by_class = _indices_by_class(base.train)
    classes = sorted(by_class)

    if schedule_kind == "cifar_like":
        if len(classes) < 3:
            raise ValueError(f"cifar_like needs >= 3 classes, got {len(classes)}")
        plan = [(classes[:2], few_shot_quota)]
        plan += [([c], few_shot_quota) for c in classes[2:]]
    elif schedule_kind == "imagenet_like":
        if len(classes) < 20:
            raise ValueError(f"imagenet_like needs >= 20 classes, got {len(classes)}")
        n_tasks = len(classes) // 10
        plan = [(classes[i * 10:(i + 1) * 10], 480 if i == 0 else few_shot_quota)
                for i in range(n_tasks)]
    else:
        plan = list(schedule_kind)

    tasks = []
    for t, (class_ids, quota) in enumerate(plan, start=1):
        train_indices = {}
        for c in class_ids:
            if c not in by_class:
                raise ValueError(f"class {c} has no training images")
            idx = by_class[c]
            if quota is not None and quota < len(idx):
                chosen = rng.choice(len(idx), size=quota, replace=False)
                idx = [idx[i] for i in sorted(chosen)]
            train_indices[c] = list(idx)
        tasks.append(TaskSpec(t, list(class_ids), train_indices))
    seen = [c for spec in tasks for c in spec.class_ids]
    if len(set(seen)) != len(seen):
        raise ValueError("incremental-class schedule repeats a class across tasks")
    return ProtocolSchedule("incremental_class", tasks)


def incremental_class_plan(num_classes: int, first_task_classes: int,
                           classes_per_task: int, quota: int):
    """Custom plan helper: first task gets ``first_task_classes``, then
    ``classes_per_task`` new classes per task until exhausted."""
    plan = [(list(range(first_task_classes)), quota)]
    c = first_task_classes
    while c < num_classes:
        step = min(classes_per_task, num_classes - c)
        plan.append((list(range(c, c + step)), quota))
        c += step
    return plan


def _apply_perm(img: Image, perm: Optional[np.ndarray], task_id: int) -> Image:
    if perm is None:
        return Image(img.pixels, img.label, task_id, img.index)
    flat = img.pixels.reshape(img.pixels.shape[0], -1)[:, perm]
    return Image(flat.reshape(img.pixels.shape), img.label, task_id, img.index)


def task_train_images(base: Dataset, spec: TaskSpec) -> List[Image]:
    out = []
    for c in spec.class_ids:
        for i in spec.train_indices[c]:
            out.append(_apply_perm(base.train[i], spec.permutation, spec.task_id))
    return out


def task_test_images(base: Dataset, spec: TaskSpec) -> List[Image]:
    active = set(spec.class_ids)
    return [_apply_perm(img, spec.permutation, spec.task_id)
            for img in base.test if img.label in active]
