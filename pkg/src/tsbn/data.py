"""Datasets, task schedules, the synthetic blob generator and augmentation."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ConfigError

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp"}

# Path16 sub-task orders, written with the sub-dataset abbreviations used as
# class-directory prefixes (e.g. ``CP_hyperplastic``).
NAMED_ORDERS = {
    "path16-I": ["CP", "BR", "OC", "LN", "ST", "LU", "CO"],
    "path16-II": ["CO", "LU", "LN", "ST", "OC", "CP", "BR"],
}


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64
    class_names: list[str]
    split: str = "train"
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("labels out of range of class_names")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices_of(self, classes) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, list(classes)))


@dataclass
class Benchmark:
    train: Dataset
    test: Dataset
    pretrain: Dataset | None = None

    def __post_init__(self):
        check_coverage(self.train, self.test)
        if self.pretrain is not None:
            overlap = np.intersect1d(self.pretrain.ids, np.concatenate([self.train.ids, self.test.ids]))
            if overlap.size:
                raise DataError(f"pretrain split shares {overlap.size} sample ids with the task splits")


def check_coverage(train: Dataset, test: Dataset):
    if train.class_names != test.class_names:
        raise DataError("train and test splits disagree on class names")
    missing = [train.class_names[c] for c in range(train.num_classes)
               if not (np.any(train.labels == c) and np.any(test.labels == c))]
    if missing:
        raise DataError(f"classes missing from train or test split: {missing}")


# --------------------------------------------------------------------------
# on-disk formats


def _read_image(path: Path, size):
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DataError(f"cannot decode {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def _load_split(split_dir: Path, size, class_names=None, id_offset=0):
    found = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    names = found if class_names is None else class_names
    extra = sorted(set(found) - set(names))
    if extra:
        raise DataError(f"{split_dir}: classes not present in train split: {extra}")
    images, labels, errors = [], [], []
    for c, name in enumerate(names):
        cdir = split_dir / name
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if cdir.is_dir() else []
        if not files:
            errors.append(f"{cdir}: no images")
            continue
        for f in files:
            try:
                images.append(_read_image(f, size))
                labels.append(c)
            except DataError as exc:
                errors.append(str(exc))
    if errors:
        raise DataError("; ".join(errors))
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"{split_dir}: images have different sizes {sorted(shapes)}; pass image_size to resize")
    ids = np.arange(id_offset, id_offset + len(labels), dtype=np.int64)
    return Dataset(np.stack(images), np.array(labels), list(names), split_dir.name, ids)


def load_image_directory(root, image_size: int | None = None) -> Benchmark:
    """Read ``root/{pretrain,train,test}/<class>/<image>``; ``pretrain`` is optional.

    Files are visited in lexicographic order and labels follow the sorted
    class-directory names of the train split.
    """
    root = Path(root)
    if not (root / "train").is_dir() or not (root / "test").is_dir():
        raise DataError(f"{root}: expected train/ and test/ sub-directories")
    train = _load_split(root / "train", image_size)
    test = _load_split(root / "test", image_size, train.class_names, id_offset=len(train))
    pretrain = None
    if (root / "pretrain").is_dir():
        pretrain = _load_split(root / "pretrain", image_size, id_offset=len(train) + len(test))
    return Benchmark(train, test, pretrain)


RAW_MAGIC = b"TSBNDATA"


def write_raw(dataset: Dataset, path) -> Path:
    """Header (JSON) + float32 LE samples + uint16 LE labels."""
    path = Path(path)
    header = {"count": len(dataset), "shape": list(dataset.images.shape[1:]),
              "class_names": dataset.class_names, "split": dataset.split,
              "ids": dataset.ids.tolist()}
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<Q", len(blob)) + blob)
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<u2").tobytes())
    return path


def read_raw(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != RAW_MAGIC:
        raise DataError(f"{path}: not a raw dataset file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    n, shape = header["count"], tuple(header["shape"])
    off = 16 + hlen
    count = n * int(np.prod(shape))
    if len(raw) != off + 4 * count + 2 * n:
        raise DataError(f"{path}: payload size does not match header")
    images = np.frombuffer(raw, "<f4", count, off).reshape((n,) + shape).astype(np.float32)
    labels = np.frombuffer(raw, "<u2", n, off + 4 * count).astype(np.int64)
    return Dataset(images, labels, header["class_names"], header["split"], np.array(header["ids"], np.int64))


# --------------------------------------------------------------------------
# task schedules


@dataclass
class TaskSchedule:
    groups: list[list[int]]
    order_name: str | None = None

    def __post_init__(self):
        flat = [c for g in self.groups for c in g]
        if len(flat) != len(set(flat)):
            raise ConfigError(f"task class groups overlap: {self.groups}")
        if any(len(g) == 0 for g in self.groups):
            raise ConfigError("every task needs at least one class")

    @property
    def num_tasks(self) -> int:
        return len(self.groups)

    def task_of(self) -> dict[int, int]:
        return {c: t for t, g in enumerate(self.groups) for c in g}

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(self.groups).encode()).hexdigest()[:16]


def split_tasks(num_classes: int, num_tasks: int | None = None, classes_per_task: int | None = None,
                seed: int = 0, order=None, class_names=None, shuffle=True) -> TaskSchedule:
    """Group classes into disjoint tasks.

    ``order`` may be a key of ``NAMED_ORDERS`` (classes are matched to tasks by
    name prefix) or an explicit list of class-id groups used verbatim.
    Otherwise classes are shuffled under ``seed`` and cut into contiguous
    groups of ``classes_per_task``.
    """
    if order is not None:
        if isinstance(order, str):
            if order not in NAMED_ORDERS:
                raise ConfigError(f"unknown task order {order!r}")
            if class_names is None:
                raise ConfigError("a named order needs class names")
            groups = []
            for prefix in NAMED_ORDERS[order]:
                g = [i for i, n in enumerate(class_names) if n.split("_")[0].split("-")[0] == prefix]
                if not g:
                    raise ConfigError(f"order {order!r}: no classes for sub-task {prefix!r}")
                groups.append(g)
            return TaskSchedule(groups, order)
        groups = [list(map(int, g)) for g in order]
        if any(c < 0 or c >= num_classes for g in groups for c in g):
            raise ConfigError("explicit order references unknown classes")
        return TaskSchedule(groups, "explicit")
    if num_tasks is None or num_tasks < 1:
        raise ConfigError("num_tasks must be a positive integer")
    per = classes_per_task if classes_per_task is not None else num_classes // num_tasks
    if per < 1 or per * num_tasks > num_classes:
        raise ConfigError(f"cannot form {num_tasks} tasks of {per} classes from {num_classes} classes")
    classes = np.arange(num_classes)
    if shuffle:
        classes = np.random.default_rng(seed).permutation(num_classes)
    groups = [classes[t * per:(t + 1) * per].tolist() for t in range(num_tasks)]
    return TaskSchedule(groups)


# --------------------------------------------------------------------------
# synthetic blobs


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 50
    image_size: int = 32
    channels: int = 3
    noise: float = 0.1
    jitter: float = 2.0           # per-sample blob-centre jitter, pixels
    color_jitter: float = 0.05
    radius: tuple[float, float] = (0.12, 0.22)   # fraction of image size
    pretrain_classes: int = 0
    pretrain_per_class: int = 200
    # domain gap between the auxiliary pretraining classes and the task splits:
    # task images become 0.5 + contrast * (img - 0.5) + brightness
    contrast: float = 1.0
    brightness: float = 0.0
    seed: int = 0
    # optional explicit per-class parameters; generated from ``seed`` when empty
    colors: list = field(default_factory=list)
    centers: list = field(default_factory=list)
    radii: list = field(default_factory=list)


def _class_params(spec: SyntheticSpec, count: int, stream: int):
    rng = np.random.default_rng([spec.seed, 101, stream])
    s = spec.image_size
    colors = rng.uniform(0.0, 1.0, size=(count, spec.channels))
    centers = rng.uniform(0.25 * s, 0.75 * s, size=(count, 2))
    radii = rng.uniform(spec.radius[0] * s, spec.radius[1] * s, size=count)
    return colors, centers, radii


def _render(spec, color, center, radius, n, rng):
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy = center[0] + rng.normal(0, spec.jitter, size=n) if spec.jitter else np.full(n, center[0])
    cx = center[1] + rng.normal(0, spec.jitter, size=n) if spec.jitter else np.full(n, center[1])
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    alpha = np.exp(-d2 / (2 * radius ** 2))[:, None]
    col = np.broadcast_to(np.asarray(color, np.float64)[None, :], (n, spec.channels))
    if spec.color_jitter:
        col = col + rng.normal(0, spec.color_jitter, size=(n, spec.channels))
    img = 0.5 * (1 - alpha) + col[:, :, None, None] * alpha
    if spec.noise:
        img = img + rng.normal(0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthesize(spec: SyntheticSpec) -> Benchmark:
    """Gaussian-blob images, one blob colour/position/radius per class.

    Train, test and pretrain samples come from separate RNG streams; pretrain
    classes are an auxiliary set with their own blob parameters.
    """
    colors, centers, radii = _class_params(spec, spec.num_classes, 0)
    if spec.colors:
        colors = np.asarray(spec.colors, float)
    if spec.centers:
        centers = np.asarray(spec.centers, float)
    if spec.radii:
        radii = np.asarray(spec.radii, float)

    def build(split, code, per_class, cols, cents, rads, id_base):
        imgs, labels = [], []
        for c in range(len(cols)):
            rng = np.random.default_rng([spec.seed, code, c])
            img = _render(spec, cols[c], cents[c], rads[c], per_class, rng)
            if split != "pretrain" and (spec.contrast != 1.0 or spec.brightness != 0.0):
                img = np.clip(0.5 + spec.contrast * (img - 0.5) + spec.brightness, 0.0, 1.0).astype(np.float32)
            imgs.append(img)
            labels.append(np.full(per_class, c))
        names = [f"{'aux' if split == 'pretrain' else 'class'}_{c:02d}" for c in range(len(cols))]
        n = per_class * len(cols)
        return Dataset(np.concatenate(imgs), np.concatenate(labels), names, split,
                       np.arange(id_base, id_base + n, dtype=np.int64))

    train = build("train", 1, spec.train_per_class, colors, centers, radii, 0)
    test = build("test", 2, spec.test_per_class, colors, centers, radii, len(train))
    pretrain = None
    if spec.pretrain_classes:
        pc, pcent, prad = _class_params(spec, spec.pretrain_classes, 1)
        pretrain = build("pretrain", 3, spec.pretrain_per_class, pc, pcent, prad, len(train) + len(test))
    return Benchmark(train, test, pretrain)


# --------------------------------------------------------------------------
# augmentation

AUGMENT_POLICIES = ("none", "flip", "flip+crop")


def normalize(batch, mean, std):
    mean = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return (batch - mean) / std


def denormalize(batch, mean, std):
    mean = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return batch * std + mean


def hflip(batch, flags):
    out = batch.copy()
    out[flags] = out[flags][..., ::-1]
    return out


def random_crop(batch, rng, pad=4):
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    out = np.empty_like(batch)
    for i in range(n):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def augment(batch, policy="none", mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), rng=None, flip_flags=None):
    """Random flip (p=0.5) and/or 4-pixel-pad random crop, then per-channel normalization."""
    if policy not in AUGMENT_POLICIES:
        raise ConfigError(f"augmentation policy must be one of {AUGMENT_POLICIES}")
    out = np.asarray(batch, np.float32)
    if policy != "none":
        if flip_flags is None:
            flip_flags = rng.random(len(out)) < 0.5
        out = hflip(out, np.asarray(flip_flags, bool))
        if policy == "flip+crop":
            out = random_crop(out, rng)
    return normalize(out, mean, std)
