"""Preprocessed-image cache.

``data prepare`` decodes and downsamples every page once and stores the
per-class 28x28 stacks in a tensor container; ``CachedImageStore`` then
serves episodes without touching the PNG tree again.
"""

from __future__ import annotations

from .container import load_records, save_records
from .errors import ContractError
from .omniglot import rotate90


def _key(base_id):
    return f"class/{base_id:05d}/images"


def write_cache(path, dataset):
    """Preprocess every base class of ``dataset`` into a container."""
    records = {}
    for cls in dataset.classes:
        if cls.rotation != 0:
            raise ContractError("cache stores base classes only; augment after loading")
        records[_key(cls.base_id)] = dataset.store.images(cls)
        records[f"class/{cls.base_id:05d}/name"] = cls.name.encode("utf-8")
    save_records(path, records)
    return len(dataset.classes)


class CachedImageStore:
    """Drop-in replacement for ``ImageStore`` backed by a cache file."""

    def __init__(self, path):
        self.path = str(path)
        self._records = load_records(path)

    def images(self, cls):
        stack = self._records.get(_key(cls.base_id))
        if stack is None:
            raise ContractError(
                f"cache {self.path} has no images for class {cls.name} (base {cls.base_id})")
        if cls.rotation == 0:
            return stack
        return rotate90(stack, k=cls.rotation // 90)
