"""Shared test fixtures: a synthetic glyph dataset in the manifest layout."""

import csv
import os

import numpy as np

from csnlab import tensorfile


def _draw_strokes(canvas_size, strokes, rng, jitter=0.0):
    """Rasterize jittered line strokes; intensity falls off with distance."""
    yy, xx = np.mgrid[0:canvas_size, 0:canvas_size].astype(np.float64)
    img = np.zeros((canvas_size, canvas_size))
    for (p0, p1) in strokes:
        a = np.asarray(p0) + rng.normal(0, jitter, 2)
        b = np.asarray(p1) + rng.normal(0, jitter, 2)
        d = b - a
        length2 = max(float(d @ d), 1e-9)
        t = np.clip(((yy - a[0]) * d[0] + (xx - a[1]) * d[1]) / length2, 0.0, 1.0)
        dist = np.sqrt((yy - (a[0] + t * d[0])) ** 2 + (xx - (a[1] + t * d[1])) ** 2)
        img = np.maximum(img, np.clip(1.2 - dist, 0.0, 1.0))
    return np.clip(img, 0.0, 1.0)


def make_glyph_dataset(directory, n_classes=12, examples_per_class=18,
                       canvas_size=14, strokes_per_glyph=4, jitter=0.7, seed=0):
    """Write a glyph dataset: manifest.csv plus one CSNT file per image.

    Every class is a fixed random arrangement of strokes; exemplars redraw
    it with endpoint jitter, so classes are separable but non-trivial.
    """
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for cls in range(n_classes):
        margin = 1.5
        strokes = [
            (rng.uniform(margin, canvas_size - margin, 2),
             rng.uniform(margin, canvas_size - margin, 2))
            for _ in range(strokes_per_glyph)
        ]
        class_dir = f"class{cls:03d}"
        os.makedirs(os.path.join(directory, class_dir), exist_ok=True)
        for idx in range(examples_per_class):
            img = _draw_strokes(canvas_size, strokes, rng, jitter=jitter)
            img *= rng.uniform(0.85, 1.0)
            rel = os.path.join(class_dir, f"{idx:03d}.csnt")
            tensorfile.save_tensor(os.path.join(directory, rel), img, version=1)
            rows.append((class_dir, rel))
    with open(os.path.join(directory, "manifest.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "relative_path"])
        writer.writerows(rows)
    return directory
