"""Synthetic glyph datasets in the Omniglot directory layout.

Two generators:

* ``generate_glyph_tree``: learnable handwriting-like classes. Each class
  is a fixed set of thick random strokes; exemplars jitter the strokes and
  translate the glyph, so a trained embedding must generalize within a
  class while classes stay visually distinct.
* ``generate_count_tree``: structurally full-scale trees (any class and
  alphabet count) with minimal uniform pages, for exercising ingestion and
  split bookkeeping without drawing real data.

Both write grayscale 105x105 PNG files under root/alphabet/character/.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

PAGE = 105


def _draw_glyph(rng_cls, rng_ex, size=PAGE):
    """Render one exemplar: class strokes + per-exemplar jitter."""
    n_strokes = int(rng_cls.integers(3, 6))
    anchors = rng_cls.uniform(18, size - 18, size=(n_strokes, 4))
    width = int(rng_cls.integers(6, 10))

    dx, dy = rng_ex.uniform(-5, 5, size=2)
    jitter = rng_ex.uniform(-2.5, 2.5, size=anchors.shape)
    w = max(3, width + int(rng_ex.integers(-1, 2)))

    img = Image.new("L", (size, size), color=255)
    draw = ImageDraw.Draw(img)
    for (x0, y0, x1, y1), (jx0, jy0, jx1, jy1) in zip(anchors, jitter):
        p0 = (x0 + jx0 + dx, y0 + jy0 + dy)
        p1 = (x1 + jx1 + dx, y1 + jy1 + dy)
        draw.line([p0, p1], fill=0, width=w)
        r = w / 2
        for px, py in (p0, p1):
            draw.ellipse([px - r, py - r, px + r, py + r], fill=0)
    return img


def generate_glyph_tree(root, n_alphabets=3, chars_per_alphabet=12,
                        exemplars=20, seed=0):
    """Write a learnable synthetic dataset; returns the number of classes."""
    root = Path(root)
    class_index = 0
    for a in range(n_alphabets):
        adir = root / f"Alphabet_{a:02d}"
        for c in range(chars_per_alphabet):
            cdir = adir / f"character{c:02d}"
            cdir.mkdir(parents=True, exist_ok=True)
            for e in range(exemplars):
                rng_cls = np.random.default_rng([seed, class_index])
                rng_ex = np.random.default_rng([seed, class_index, e])
                img = _draw_glyph(rng_cls, rng_ex)
                img.save(cdir / f"{class_index:04d}_{e:02d}.png")
            class_index += 1
    return class_index


def generate_count_tree(root, n_classes=1623, n_alphabets=50, exemplars=2):
    """Write a tree with exact class/alphabet counts and tiny uniform pages."""
    root = Path(root)
    buf = io.BytesIO()
    Image.new("L", (PAGE, PAGE), color=255).save(buf, format="PNG")
    page_bytes = buf.getvalue()

    per_alphabet = [n_classes // n_alphabets] * n_alphabets
    for i in range(n_classes % n_alphabets):
        per_alphabet[i] += 1

    class_index = 0
    for a, count in enumerate(per_alphabet):
        adir = root / f"Alphabet_{a:02d}"
        for c in range(count):
            cdir = adir / f"character{c:03d}"
            cdir.mkdir(parents=True, exist_ok=True)
            for e in range(exemplars):
                (cdir / f"{class_index:04d}_{e:02d}.png").write_bytes(page_bytes)
            class_index += 1
    return class_index
