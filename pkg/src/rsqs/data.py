"""Procedural grayscale dataset, class-level phase splits, binary IO and RSQS episodes."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .shifts import Phase, ShiftSpec, apply_shift, phase_split

MAGIC = b"RSQS"
VERSION = 1
_HEADER = struct.Struct("<4sHIHH")

N_FAMILIES = 7
MIN_HELDOUT = 5


class SamplingError(ValueError):
    pass


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, H, W) with one label per image")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def hw(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def class_split(self, phase: Phase | str) -> np.ndarray:
        return class_split(self.classes, Phase(phase))

    def indices(self, classes) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, classes))

    def subset(self, phase: Phase | str) -> "Dataset":
        idx = self.indices(self.class_split(phase))
        return Dataset(self.images[idx], self.labels[idx])


def split_sizes(n_classes: int) -> tuple[int, int, int]:
    """60/20/20 class split, with each held-out split raised to 5 classes when
    the dataset is large enough, so 5-way episodes exist for val and test."""
    n_val = n_test = int(round(0.2 * n_classes))
    if n_classes >= 3 * MIN_HELDOUT:
        n_val = max(n_val, MIN_HELDOUT)
        n_test = max(n_test, MIN_HELDOUT)
    return n_classes - n_val - n_test, n_val, n_test


def class_split(classes, phase: Phase) -> np.ndarray:
    """Fixed seed-0 class split, stratified by shape family (``c % N_FAMILIES``).

    Held-out classes are taken in permutation order while their family keeps at
    least one training class, so val and test measure transfer to new variants of
    known families and validation tracks test behaviour.
    """
    classes = np.sort(np.asarray(classes))
    n_train, n_val, n_test = split_sizes(len(classes))
    order = classes[np.random.default_rng(0).permutation(len(classes))]
    fams, counts = np.unique(order % N_FAMILIES, return_counts=True)
    left = dict(zip(fams.tolist(), counts.tolist()))
    held: list = []
    for c in order:
        if len(held) == n_val + n_test:
            break
        if left[int(c) % N_FAMILIES] > 1:
            held.append(c)
            left[int(c) % N_FAMILIES] -= 1
    # too few multi-class families: fall back to plain permutation order
    held += [c for c in order if c not in held][:n_val + n_test - len(held)]
    parts = {
        Phase.TRAIN: np.array([c for c in order if c not in held], dtype=classes.dtype),
        Phase.VAL: np.array(held[:n_val], dtype=classes.dtype),
        Phase.TEST: np.array(held[n_val:], dtype=classes.dtype),
    }
    return np.sort(parts[Phase(phase)])


# ---------------------------------------------------------------- procedural classes

def _variant(c: int, n_classes: int) -> tuple[int, int, int]:
    fam = c % N_FAMILIES
    v = c // N_FAMILIES
    nv = len(range(fam, n_classes, N_FAMILIES))
    return fam, v, nv


def _render(fam: int, v: int, nv: int, u: np.ndarray, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    ox, oy = rng.uniform(-0.15, 0.15, 2)
    th = rng.uniform(0.85, 1.15)
    jitter = rng.uniform(-0.14, 0.14)
    x, y = u - ox, w - oy
    frac = v / max(nv, 1)
    if fam == 0:  # oriented bar
        a = np.pi * frac + jitter
        d = np.abs(x * np.sin(a) - y * np.cos(a))
        return _soft(0.16 * th - d)
    if fam == 1:  # ring
        r = 0.3 + 0.45 * frac
        return _soft(0.1 * th - np.abs(np.hypot(x, y) - r))
    if fam == 2:  # off-centre blob
        a = 2 * np.pi * frac + np.pi / 4 + jitter
        cx, cy = 0.45 * np.cos(a), 0.45 * np.sin(a)
        return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * (0.22 * th) ** 2))
    if fam == 3:  # checkerboard
        period = 0.35 + 0.3 * frac
        s = np.sin(np.pi * x / period) * np.sin(np.pi * y / period)
        return 0.5 + 0.5 * np.tanh(6 * s)
    if fam == 4:  # grating
        a = np.pi * frac + np.pi / 8 + jitter
        t = x * np.cos(a) + y * np.sin(a)
        return 0.5 + 0.5 * np.sin(2 * np.pi * 1.6 * t)
    if fam == 5:  # corner / L shape
        a = 2 * np.pi * frac + jitter
        xr = x * np.cos(a) + y * np.sin(a)
        yr = -x * np.sin(a) + y * np.cos(a)
        arm1 = (np.abs(yr) < 0.14 * th) & (xr > -0.1) & (xr < 0.7)
        arm2 = (np.abs(xr) < 0.14 * th) & (yr > -0.1) & (yr < 0.7)
        return (arm1 | arm2).astype(float)
    # linear ramp
    a = 2 * np.pi * frac + jitter
    return np.clip(0.5 + 0.6 * (x * np.cos(a) + y * np.sin(a)), 0, 1)


def _soft(margin: np.ndarray) -> np.ndarray:
    return np.clip(0.5 + margin * 12.0, 0.0, 1.0)


def gen_dataset(n_classes: int, items_per_class: int, h: int = 16, w: int = 16, seed: int = 0) -> Dataset:
    """Procedural shape classes (bars, rings, blobs, checkers, gratings, corners, ramps).

    Class c uses family ``c % 7`` with a variant parameter spaced by ``c // 7``;
    items add random translation, thickness, angle, contrast and pixel noise.
    """
    if h < 8 or w < 8:
        raise ValueError("image side must be at least 8")
    if n_classes < 1 or items_per_class < 1:
        raise ValueError("need at least one class and one item per class")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5253]))
    u, v_ = np.meshgrid(np.linspace(-1, 1, w), np.linspace(-1, 1, h))
    images = np.empty((n_classes * items_per_class, h, w), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes), items_per_class)
    k = 0
    for c in range(n_classes):
        fam, var, nv = _variant(c, n_classes)
        for _ in range(items_per_class):
            shape = _render(fam, var, nv, u, v_, rng)
            fg = rng.uniform(0.7, 1.0)
            bg = rng.uniform(0.0, 0.15)
            img = bg + (fg - bg) * shape + 0.02 * rng.standard_normal((h, w))
            images[k] = np.clip(img, 0, 1)
            k += 1
    return Dataset(images, labels)


# ---------------------------------------------------------------- binary IO

def _item_dtype(h: int, w: int) -> np.dtype:
    return np.dtype([("cls", "<u2"), ("px", "<f4", (h * w,))])


def write_dataset(path: str | os.PathLike, ds: Dataset) -> None:
    h, w = ds.hw
    items = np.empty(len(ds), dtype=_item_dtype(h, w))
    items["cls"] = ds.labels
    items["px"] = ds.images.reshape(len(ds), -1)
    payload = _HEADER.pack(MAGIC, VERSION, len(ds), h, w) + items.tobytes()
    atomic_write(path, payload)


def read_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated dataset file")
    magic, version, n, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError("not an RSQS dataset file")
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    dt = _item_dtype(h, w)
    if len(raw) != _HEADER.size + n * dt.itemsize:
        raise ValueError("dataset file size does not match header")
    items = np.frombuffer(raw, dtype=dt, offset=_HEADER.size, count=n)
    return Dataset(items["px"].reshape(n, h, w).astype(np.float32), items["cls"].astype(np.int64))


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- episodes

@dataclass
class Episode:
    n_way: int
    k_shot: int
    q_query: int
    phase: Phase
    support_images: np.ndarray  # (n_way * k_shot, H, W), shifts applied
    support_labels: np.ndarray  # episode-relative 0..n_way-1
    support_shifts: list[ShiftSpec | None]
    query_images: np.ndarray
    query_labels: np.ndarray
    query_shifts: list[ShiftSpec | None]
    classes: np.ndarray  # global class id of each episode label
    shift_pool: tuple[ShiftSpec, ...] = field(default_factory=tuple)

    @property
    def support(self):
        return list(zip(self.support_images, self.support_labels, self.support_shifts))

    @property
    def query(self):
        return list(zip(self.query_images, self.query_labels, self.query_shifts))


def sample_shift_pool(phase: Phase, max_shifts: int, rng: np.random.Generator) -> tuple[ShiftSpec, ...]:
    fams = sorted(phase_split(phase), key=lambda f: f.value)
    k = min(max_shifts, len(fams))
    chosen = rng.choice(len(fams), size=k, replace=False) if k > 0 else []
    return tuple(ShiftSpec(fams[int(i)], int(rng.integers(1, 6))) for i in chosen)


def sample_episode(ds: Dataset, n_way: int, k_shot: int, q_query: int, max_shifts: int,
                   phase: Phase | str, rng: np.random.Generator) -> Episode:
    """One meta-task: classes without replacement, one shared shift pool, and an
    independent pool draw for every support and query instance."""
    phase = Phase(phase)
    if not 0 <= max_shifts <= 4:
        raise ValueError("max_shifts must be in 0..4")
    classes = ds.class_split(phase)
    if len(classes) < n_way:
        raise SamplingError(f"{phase.value} split has {len(classes)} classes, need {n_way}")
    chosen = np.sort(rng.choice(classes, size=n_way, replace=False))
    pool = sample_shift_pool(phase, max_shifts, rng)

    def draw(img):
        spec = pool[int(rng.integers(len(pool)))] if pool else None
        return apply_shift(img, spec, rng), spec

    s_img, s_lab, s_sh, q_img, q_lab, q_sh = [], [], [], [], [], []
    for label, c in enumerate(chosen):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < k_shot + q_query:
            raise SamplingError(f"class {c} has {len(idx)} items, need {k_shot + q_query}")
        pick = rng.choice(idx, size=k_shot + q_query, replace=False)
        for j, i in enumerate(pick):
            img, spec = draw(ds.images[i])
            if j < k_shot:
                s_img.append(img), s_lab.append(label), s_sh.append(spec)
            else:
                q_img.append(img), q_lab.append(label), q_sh.append(spec)
    perm = rng.permutation(len(q_img))
    return Episode(
        n_way=n_way, k_shot=k_shot, q_query=q_query, phase=phase,
        support_images=np.stack(s_img), support_labels=np.array(s_lab), support_shifts=s_sh,
        query_images=np.stack(q_img)[perm], query_labels=np.array(q_lab)[perm],
        query_shifts=[q_sh[i] for i in perm], classes=chosen, shift_pool=pool,
    )
