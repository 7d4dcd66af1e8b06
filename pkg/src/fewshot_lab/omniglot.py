"""Omniglot ingestion, preprocessing, rotation augmentation, class splits
and episode sampling.

Directory layout: ``root/alphabet/character/*.png`` (the distribution's
``images_background`` / ``images_evaluation`` top level is also accepted
and merged). Classes are enumerated in lexicographic (alphabet, character)
order for stable ids; the split is deterministic by id.

Preprocessing downsamples the square grayscale pages to 28x28 with an
exact area average (every output cell is the mean of its fractional source
window, summed with compensated arithmetic so the result is independent of
summation order) and inverts polarity: ink ~ 1, background ~ 0. Rotations
by multiples of 90 degrees are exact grid permutations, so preprocessing
and rotation commute bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, DataIntegrityError, DimensionError

TARGET_SIZE = 28
ROTATIONS = (0, 90, 180, 270)


# ---------------------------------------------------------------------------
# preprocessing

@lru_cache(maxsize=8)
def _box_windows(src, dst):
    """Per output cell: source index range and the exact overlap-weight
    block (weights in pixels; the full block sums to (src/dst)^2)."""
    scale = src / dst
    rows = []
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        a0, a1 = int(math.floor(lo)), min(int(math.ceil(hi)), src)
        w = np.array([min(a + 1.0, hi) - max(float(a), lo) for a in range(a0, a1)])
        rows.append((a0, a1, w))
    windows = []
    for i, (a0, a1, wr) in enumerate(rows):
        for j, (b0, b1, wc) in enumerate(rows):
            windows.append((i, j, a0, a1, b0, b1, np.outer(wr, wc)))
    return windows, scale * scale


def resample_area(image, dst=TARGET_SIZE):
    """Exact area-average downsample of a square image to dst x dst."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise DimensionError(f"resample_area: need a square 2-D image, got {image.shape}")
    src = image.shape[0]
    if src < dst:
        raise DimensionError(f"resample_area: cannot downsample {src} -> {dst}")
    windows, area = _box_windows(src, dst)
    out = np.empty((dst, dst))
    for i, j, a0, a1, b0, b1, block in windows:
        prod = block * image[a0:a1, b0:b1]
        out[i, j] = math.fsum(prod.ravel().tolist()) / area
    return out


def preprocess(image):
    """Square grayscale page (0..255) -> [1,28,28] float in [0,1], ink = 1."""
    small = resample_area(np.asarray(image, dtype=np.float64) / 255.0)
    return (1.0 - small)[None, :, :]


def rotate90(images, k):
    """Exact 90-degree grid rotation(s) of [..., H, W] arrays."""
    arr = np.asarray(images)
    if arr.shape[-1] != arr.shape[-2]:
        raise DimensionError(f"rotate90: need square spatial dims, got {arr.shape}")
    return np.ascontiguousarray(np.rot90(arr, k=k, axes=(-2, -1)))


# ---------------------------------------------------------------------------
# dataset model

@dataclass(frozen=True)
class CharacterClass:
    """One (alphabet, character, rotation) class with its exemplar files."""

    class_id: int
    base_id: int
    alphabet: str
    character: str
    rotation: int
    image_paths: tuple

    @property
    def name(self):
        return f"{self.alphabet}/{self.character}@{self.rotation}"


class ImageStore:
    """Lazy, memoized loader: PNG file -> preprocessed 28x28 stack."""

    def __init__(self):
        self._cache = {}

    def images(self, cls):
        """[n_exemplars, 28, 28] float array for a class (rotation applied)."""
        base = self._cache.get(cls.base_id)
        if base is None:
            pages = []
            for path in cls.image_paths:
                with Image.open(path) as img:
                    pages.append(preprocess(np.asarray(img.convert("L")))[0])
            base = np.stack(pages)
            self._cache[cls.base_id] = base
        if cls.rotation == 0:
            return base
        return rotate90(base, k=cls.rotation // 90)


@dataclass
class OmniglotDataset:
    classes: list
    store: ImageStore

    @property
    def n_classes(self):
        return len(self.classes)

    @property
    def n_alphabets(self):
        return len({c.alphabet for c in self.classes})


def ingest(root):
    """Enumerate classes under ``root`` in sorted (alphabet, character) order.

    Raises FileNotFoundError for a missing root, DataIntegrityError for an
    empty tree or a class with fewer than 2 exemplars.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    tops = [root / t for t in ("images_background", "images_evaluation") if (root / t).is_dir()]
    if not tops:
        tops = [root]
    alphabet_dirs = sorted(
        (d for top in tops for d in top.iterdir() if d.is_dir()),
        key=lambda d: d.name)
    entries = []
    for adir in alphabet_dirs:
        for cdir in sorted(d for d in adir.iterdir() if d.is_dir()):
            paths = tuple(sorted(str(p) for p in cdir.glob("*.png")))
            if not paths:
                continue
            if len(paths) < 2:
                raise DataIntegrityError(
                    f"class {adir.name}/{cdir.name} has {len(paths)} exemplar(s), need >= 2")
            entries.append((adir.name, cdir.name, paths))
    if not entries:
        raise DataIntegrityError(f"no character classes found under {root}")
    entries.sort(key=lambda e: (e[0], e[1]))
    classes = [
        CharacterClass(class_id=i, base_id=i, alphabet=a, character=c,
                       rotation=0, image_paths=p)
        for i, (a, c, p) in enumerate(entries)
    ]
    return OmniglotDataset(classes=classes, store=ImageStore())


# ---------------------------------------------------------------------------
# augmentation and splitting

def augment_rotations(classes):
    """Each base class yields 4 classes, one per rotation; ids = base*4 + k."""
    for cls in classes:
        if cls.rotation != 0:
            raise ContractError(f"augment_rotations: {cls.name} is already rotated")
    out = []
    for cls in classes:
        for k, rot in enumerate(ROTATIONS):
            out.append(CharacterClass(
                class_id=cls.class_id * 4 + k, base_id=cls.base_id,
                alphabet=cls.alphabet, character=cls.character,
                rotation=rot, image_paths=cls.image_paths))
    return out


@dataclass
class SplitDataset:
    """Disjoint train/test class pools sharing one image store."""

    train_classes: list
    test_classes: list
    store: ImageStore

    def __post_init__(self):
        train_bases = {c.base_id for c in self.train_classes}
        test_bases = {c.base_id for c in self.test_classes}
        if train_bases & test_bases:
            raise ContractError("train and test share base classes")

    def pool(self, split):
        if split == "train":
            return self.train_classes
        if split == "test":
            return self.test_classes
        raise ContractError(f"unknown split {split!r}")


def split_classes(dataset, n_train=1200, augment_train=True, augment_test=False):
    """First ``n_train`` class ids -> train, the rest -> test; rotations of
    a base class never straddle the split (augmentation happens after)."""
    total = dataset.n_classes
    if n_train < 1 or n_train >= total:
        raise ContractError(
            f"split needs 1 <= n_train < {total} base classes, got n_train={n_train}")
    train = dataset.classes[:n_train]
    test = dataset.classes[n_train:]
    if augment_train:
        train = augment_rotations(train)
    if augment_test:
        test = augment_rotations(test)
    return SplitDataset(train_classes=train, test_classes=test, store=dataset.store)


# ---------------------------------------------------------------------------
# episode sampling

@dataclass
class EpisodeSpec:
    """Sampling request: way/shot/query counts against one split.

    ``seed`` is an optional convenience for standalone use; the training
    harness passes explicit generators derived from the run seed instead.
    """

    n_way: int
    k_shot: int
    queries: int = 1
    split: str = "test"
    seed: int = None

    def validate(self):
        if self.n_way < 2:
            raise ContractError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_shot < 1:
            raise ContractError(f"k_shot must be >= 1, got {self.k_shot}")
        if self.queries < 1:
            raise ContractError(f"queries must be >= 1, got {self.queries}")
        if self.split not in ("train", "test"):
            raise ContractError(f"split must be train or test, got {self.split!r}")
        return self

    def make_rng(self):
        if self.seed is None:
            raise ContractError("spec has no seed; pass a generator explicitly")
        return np.random.default_rng(self.seed)


def sample_episode(pool, store, spec, rng):
    """Draw one episode: N classes with distinct base characters, K support
    exemplars per class, then Q queries from those classes disjoint from
    the support. Reproducible from the generator state.
    """
    spec.validate()
    n, k, q = spec.n_way, spec.k_shot, spec.queries
    if n > len(pool):
        raise ContractError(f"episode needs {n} classes, pool has {len(pool)}")

    chosen = []
    seen_bases = set()
    for idx in rng.permutation(len(pool)):
        cls = pool[idx]
        if cls.base_id in seen_bases:
            continue
        seen_bases.add(cls.base_id)
        chosen.append(cls)
        if len(chosen) == n:
            break
    if len(chosen) < n:
        raise ContractError(
            f"only {len(chosen)} distinct base characters available, need {n}")

    query_classes = rng.integers(0, n, size=q)
    per_class = np.bincount(query_classes, minlength=n)

    support_imgs, support_labels = [], []
    reserved = {}
    for label, cls in enumerate(chosen):
        imgs = store.images(cls)
        need = k + per_class[label]
        if need > imgs.shape[0]:
            raise ContractError(
                f"class {cls.name} has {imgs.shape[0]} exemplars, episode needs {need}")
        picks = rng.choice(imgs.shape[0], size=need, replace=False)
        support_imgs.append(imgs[picks[:k]])
        support_labels.extend([label] * k)
        reserved[label] = list(picks[k:])

    query_imgs, query_labels = [], []
    for label in query_classes:
        imgs = store.images(chosen[label])
        query_imgs.append(imgs[reserved[label].pop(0)])
        query_labels.append(label)

    from .fewshot_graph import Episode

    return Episode(
        support_images=np.concatenate(support_imgs)[:, None, :, :],
        support_labels=np.array(support_labels, dtype=np.int64),
        query_images=np.stack(query_imgs)[:, None, :, :],
        query_labels=np.array(query_labels, dtype=np.int64),
        n_way=n, k_shot=k)


# ---------------------------------------------------------------------------
# episode fixtures (golden-test dumps in the tensor container format)

def save_episode(path, episode):
    from .container import save_records

    save_records(path, {
        "episode/support_images": episode.support_images,
        "episode/support_labels": episode.support_labels.astype(np.float64),
        "episode/query_images": episode.query_images,
        "episode/query_labels": episode.query_labels.astype(np.float64),
        "episode/shape": np.array([episode.n_way, episode.k_shot], dtype=np.float64),
    })


def load_episode(path):
    from .container import load_records
    from .fewshot_graph import Episode

    rec = load_records(path)
    n_way, k_shot = (int(v) for v in rec["episode/shape"])
    return Episode(
        support_images=rec["episode/support_images"],
        support_labels=rec["episode/support_labels"].astype(np.int64),
        query_images=rec["episode/query_images"],
        query_labels=rec["episode/query_labels"].astype(np.int64),
        n_way=n_way, k_shot=k_shot)
