"""Tasks, datasets, IDX binary ingestion, synthetic glyphs, preprocessing.

Images are stored as uint8 arrays of shape [N, H, W, C]. The IDX reader
and writer handle the classic single-channel layout (magic 0x00000803
for images, 0x00000801 for labels, big-endian headers).

Training-mode preprocessing consumes exactly nine rng draws per image,
whatever the hyperparameters, so the random stream stays aligned when
batch composition changes. Eval-mode preprocessing draws nothing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .hyperparams import Hyperparams
from .layers import bilinear_resize

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass(frozen=True)
class TaskDef:
    name: str
    num_classes: int
    default_image_extent: int
    num_train: int
    num_valid: int
    num_test: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"task {self.name}: need >= 2 classes")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "default_image_extent": self.default_image_extent,
            "num_train": self.num_train,
            "num_valid": self.num_valid,
            "num_test": self.num_test,
        }

    @staticmethod
    def from_dict(d: dict) -> "TaskDef":
        return TaskDef(**d)


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, H, W, C]
    labels: np.ndarray  # int64 [N]
    split: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ValueError(f"images must be uint8 [N,H,W,C], got {self.images.dtype} {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.images)


# ---------------------------------------------------------------------------
# IDX binaries


def load_idx(images_path, labels_path) -> Dataset:
    """Read a single-channel IDX image/label file pair."""
    with open(images_path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise ValueError(f"{images_path}: truncated header")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_MAGIC_IMAGES:
        raise ValueError(f"{images_path}: bad magic 0x{magic:08x}")
    if len(raw) != 16 + n * h * w:
        raise ValueError(f"{images_path}: expected {16 + n * h * w} bytes, got {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, h, w, 1).copy()

    with open(labels_path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise ValueError(f"{labels_path}: truncated header")
    magic, n_labels = struct.unpack(">II", raw[:8])
    if magic != IDX_MAGIC_LABELS:
        raise ValueError(f"{labels_path}: bad magic 0x{magic:08x}")
    if len(raw) != 8 + n_labels:
        raise ValueError(f"{labels_path}: expected {8 + n_labels} bytes, got {len(raw)}")
    if n_labels != n:
        raise ValueError(f"count mismatch: {n} images vs {n_labels} labels")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images=images, labels=labels)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX image/label file pair."""
    n, h, w, c = ds.images.shape
    if c != 1:
        raise ValueError(f"IDX writer handles 1 channel, got {c}")
    if ds.labels.min(initial=0) < 0 or ds.labels.max(initial=0) > 255:
        raise ValueError("IDX labels must fit in a byte")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, n, h, w))
        f.write(ds.images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_MAGIC_LABELS, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic glyph tasks


def _glyph_template(rng: np.random.Generator, extent: int) -> np.ndarray:
    # coarse random field, upsampled and thresholded into a blobby glyph
    coarse = rng.random((4, 4))
    fine = bilinear_resize(coarse[:, :, None], extent, extent)[:, :, 0]
    glyph = (fine > np.median(fine)).astype(np.float64)
    return ndimage.gaussian_filter(glyph, sigma=extent / 16.0)


def synth_tasks(
    n_tasks: int,
    classes_per_task: int,
    samples: int,
    extent: int,
    seed: int,
) -> list[tuple[TaskDef, Dataset]]:
    """Deterministic glyph-classification tasks with a partially shared alphabet.

    Consecutive tasks overlap in half their glyph shapes (labels stay
    task-local), so knowledge learned on one task can transfer to the next.
    Each sample is a class template under random shift, rotation, and noise.
    """
    rng = np.random.default_rng(seed)
    stride = max(classes_per_task // 2, 1)
    n_glyphs = stride * (n_tasks - 1) + classes_per_task
    alphabet = [_glyph_template(rng, extent) for _ in range(n_glyphs)]

    out = []
    for t in range(n_tasks):
        templates = alphabet[t * stride : t * stride + classes_per_task]
        images = np.empty((samples, extent, extent, 1), dtype=np.uint8)
        labels = np.empty(samples, dtype=np.int64)
        for i in range(samples):
            label = int(rng.integers(classes_per_task))
            glyph = templates[label]
            angle = float(rng.uniform(-20.0, 20.0))
            rotated = ndimage.rotate(glyph, angle, reshape=False, order=1, mode="constant")
            shift = rng.integers(-extent // 8, extent // 8 + 1, size=2)
            shifted = np.roll(rotated, (int(shift[0]), int(shift[1])), axis=(0, 1))
            noisy = shifted + rng.normal(0.0, 0.1, size=shifted.shape)
            images[i, :, :, 0] = (np.clip(noisy, 0.0, 1.0) * 255).astype(np.uint8)
            labels[i] = label
        task = TaskDef(
            name=f"synth{t}",
            num_classes=classes_per_task,
            default_image_extent=extent,
            num_train=0,
            num_valid=0,
            num_test=0,
        )
        out.append((task, Dataset(images=images, labels=labels)))
    return out


def split(ds: Dataset, fractions: tuple[float, float, float], seed: int = 0):
    """Partition into (train, valid, test) after a seeded shuffle."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions {fractions} do not sum to 1")
    n = len(ds)
    n_valid = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_valid - n_test
    if min(n_train, n_valid, n_test) <= 0:
        raise ValueError(f"split of {n} samples by {fractions} leaves an empty part")
    order = np.random.default_rng(seed).permutation(n)
    parts = []
    start = 0
    for size, tag in ((n_train, "train"), (n_valid, "valid"), (n_test, "test")):
        idx = order[start : start + size]
        parts.append(Dataset(images=ds.images[idx].copy(), labels=ds.labels[idx].copy(), split=tag))
        start += size
    return tuple(parts)


# ---------------------------------------------------------------------------
# preprocessing

TRAIN_DRAWS_PER_IMAGE = 9


def _crop_window(h, w, area_frac, aspect):
    # inception-style: pick target area and w/h ratio, clamp into bounds
    target = area_frac * h * w
    cw = int(round(np.sqrt(target * aspect)))
    ch = int(round(np.sqrt(target / aspect)))
    return max(1, min(ch, h)), max(1, min(cw, w))


def _hue_shift(x: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue of an rgb float image in [0,1] by ``shift`` (wrapping)."""
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    mx = np.max(x, axis=-1)
    mn = np.min(x, axis=-1)
    diff = mx - mn
    hue = np.zeros_like(mx)
    mask = diff > 0
    rm = mask & (mx == r)
    gm = mask & ~rm & (mx == g)
    bm = mask & ~rm & ~gm
    hue[rm] = ((g - b)[rm] / diff[rm]) % 6.0
    hue[gm] = (b - r)[gm] / diff[gm] + 2.0
    hue[bm] = (r - g)[bm] / diff[bm] + 4.0
    hue = (hue / 6.0 + shift) % 1.0
    sat = np.where(mx > 0, diff / np.maximum(mx, 1e-12), 0.0)

    i = np.floor(hue * 6.0)
    f = hue * 6.0 - i
    p = mx * (1.0 - sat)
    q = mx * (1.0 - sat * f)
    t = mx * (1.0 - sat * (1.0 - f))
    i = i.astype(np.int64) % 6
    out = np.empty_like(x)
    for k, (rr, gg, bb) in enumerate(
        [(mx, t, p), (q, mx, p), (p, mx, t), (p, q, mx), (t, p, mx), (mx, p, q)]
    ):
        sel = i == k
        out[..., 0][sel] = rr[sel]
        out[..., 1][sel] = gg[sel]
        out[..., 2][sel] = bb[sel]
    return out


def preprocess(
    image: np.ndarray,
    hp: Hyperparams,
    rng: np.random.Generator | None,
    training: bool,
) -> np.ndarray:
    """uint8 [H, W, C] -> float32 [size, size, C] in [-1, 1].

    Training mode applies random crop, flip, and photometric jitter, always
    consuming TRAIN_DRAWS_PER_IMAGE rng values. Eval mode center-crops and
    uses no rng at all.
    """
    h, w, c = image.shape
    x = image.astype(np.float64) / 255.0
    size = hp.image_size

    if training:
        if rng is None:
            raise ValueError("training-mode preprocess needs an rng")
        draws = rng.random(TRAIN_DRAWS_PER_IMAGE)
        area = hp.crop_area_min + draws[0] * (1.0 - hp.crop_area_min)
        aspect = hp.aspect_min + draws[1] * (1.0 / hp.aspect_min - hp.aspect_min)
        ch, cw = _crop_window(h, w, area, aspect)
        top = int(draws[2] * (h - ch + 1))
        left = int(draws[3] * (w - cw + 1))
        x = x[top : top + ch, left : left + cw]
        if hp.flip and draws[4] < 0.5:
            x = x[:, ::-1]
        if hp.brightness_delta > 0:
            x = x + hp.brightness_delta * (2.0 * draws[5] - 1.0)
        if hp.contrast_delta > 0:
            factor = 1.0 + hp.contrast_delta * (2.0 * draws[6] - 1.0)
            x = x.mean() + (x - x.mean()) * factor
        if hp.saturation_delta > 0 and c == 3:
            factor = 1.0 + hp.saturation_delta * (2.0 * draws[7] - 1.0)
            gray = x.mean(axis=-1, keepdims=True)
            x = gray + (x - gray) * factor
        if hp.hue_delta > 0 and c == 3:
            x = _hue_shift(np.clip(x, 0.0, 1.0), hp.hue_delta * (2.0 * draws[8] - 1.0))
    else:
        side = min(h, w)
        top = (h - side) // 2
        left = (w - side) // 2
        x = x[top : top + side, left : left + side]

    x = np.clip(x, 0.0, 1.0)
    if x.shape[:2] != (size, size):
        x = bilinear_resize(x, size, size)
    return (np.clip(x, 0.0, 1.0) * 2.0 - 1.0).astype(np.float32)


def preprocess_eval_batch(ds: Dataset, hp: Hyperparams) -> np.ndarray:
    """Whole-split eval preprocessing, stacked to [N, size, size, C]."""
    return np.stack([preprocess(img, hp, None, training=False) for img in ds.images])


# ---------------------------------------------------------------------------
# bundled task data for runs


@dataclass
class TaskData:
    task: TaskDef
    train: Dataset
    valid: Dataset
    test: Dataset


@dataclass(frozen=True)
class DataConfig:
    """How to materialize the synthetic benchmark for a run."""

    n_tasks: int = 3
    classes_per_task: int = 4
    samples_per_task: int = 600
    extent: int = 16
    seed: int = 7
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def to_dict(self) -> dict:
        return {
            "n_tasks": self.n_tasks,
            "classes_per_task": self.classes_per_task,
            "samples_per_task": self.samples_per_task,
            "extent": self.extent,
            "seed": self.seed,
            "fractions": list(self.fractions),
        }

    @staticmethod
    def from_dict(d: dict) -> "DataConfig":
        d = dict(d)
        if "fractions" in d:
            d["fractions"] = tuple(d["fractions"])
        return DataConfig(**d)


def build_task_datas(dc: DataConfig) -> list[TaskData]:
    out = []
    for task, ds in synth_tasks(
        dc.n_tasks, dc.classes_per_task, dc.samples_per_task, dc.extent, dc.seed
    ):
        train, valid, test = split(ds, dc.fractions, seed=dc.seed)
        task = replace(task, num_train=len(train), num_valid=len(valid), num_test=len(test))
        out.append(TaskData(task=task, train=train, valid=valid, test=test))
    return out
