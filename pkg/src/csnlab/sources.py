"""Task distributions and the episodic sampler.

Every source partitions its classes into disjoint train/val/test splits, so
classes seen during meta-training never appear at test time.  Episodes
relabel their classes to 0..C-1 in random order, which is what forces an
unadapted network to chance accuracy.

The two synthetic sources carry cheap closed-form oracles (nearest prototype
for the Gaussian clusters, context overlap for the cloze sentences) so that
learning targets can be sanity-checked against an achievable ceiling.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import SamplerError, UsageError
from . import tensorfile


@dataclass
class Episode:
    """One sampled task: n = k*C labeled description pairs plus queries."""

    desc_x: list
    desc_y: np.ndarray  # (n, C) one-hot
    query_x: list
    query_y: np.ndarray  # (m, C) one-hot
    way: int
    shots: int
    class_ids: tuple  # episode label -> underlying class id

    @property
    def n(self) -> int:
        return len(self.desc_x)


def one_hot(labels, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


class TaskSource:
    """Interface: class splits plus per-class example access."""

    input_kind: str  # vector | image | tokens

    def classes(self, split: str) -> list:
        raise NotImplementedError

    def sample_example(self, class_id, rng: np.random.Generator):
        """Draw one fresh example of a class (generative sources)."""
        raise NotImplementedError

    def sample_class_examples(self, class_id, count: int, rng: np.random.Generator) -> list:
        """Draw ``count`` distinct examples of a class."""
        return [self.sample_example(class_id, rng) for _ in range(count)]

    def meta(self) -> dict:
        """Input metadata consumed by model construction."""
        raise NotImplementedError


def _split_ids(ids: list, train: int, val: int, test: int) -> dict:
    if train + val + test > len(ids):
        raise SamplerError(
            f"source has {len(ids)} classes, split needs {train}+{val}+{test}"
        )
    return {
        "train": list(ids[:train]),
        "val": list(ids[train:train + val]),
        "test": list(ids[train + val:train + val + test]),
    }


class GaussianSource(TaskSource):
    """Isotropic Gaussian clusters around fixed prototypes on the unit
    sphere; the noise scale controls the achievable (Bayes) accuracy."""

    input_kind = "vector"

    def __init__(self, n_classes: int, dim: int, noise: float, seed: int = 0,
                 train: int = 30, val: int = 10, test: int = 10):
        if noise <= 0:
            raise UsageError("gaussian source: noise must be positive")
        rng = np.random.default_rng(seed)
        protos = rng.standard_normal((n_classes, dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        self.prototypes = protos
        self.noise = noise
        self.dim = dim
        self._splits = _split_ids(list(range(n_classes)), train, val, test)

    def classes(self, split):
        return self._splits[split]

    def sample_example(self, class_id, rng):
        return self.prototypes[class_id] + self.noise * rng.standard_normal(self.dim)

    def meta(self):
        return {"input_kind": "vector", "input_dim": self.dim}


class ClozeSource(TaskSource):
    """Fill-in-the-blank sentences over a synthetic vocabulary.

    Each target word owns a fixed template sentence with one blank slot;
    examples corrupt each non-blank position with probability
    ``template_noise``.  An episode's classes are C target words, and every
    query's missing word matches exactly one description label.

    Token ids: 0 = pad, 1 = blank marker, 2.. = vocabulary words.
    """

    input_kind = "tokens"
    PAD = 0
    BLANK = 1

    def __init__(self, vocab: int, sentence_len: int, pool: int, seed: int = 0,
                 template_noise: float = 0.2,
                 train: int | None = None, val: int | None = None, test: int | None = None):
        if sentence_len < 3:
            raise UsageError("cloze source: sentences need at least 3 tokens")
        if pool > vocab:
            raise UsageError(f"cloze source: pool {pool} exceeds vocabulary {vocab}")
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.sentence_len = sentence_len
        self.noise = template_noise
        self.n_tokens = vocab + 2  # words plus pad/blank markers
        # target words are a random subset of the vocabulary
        self.pool_words = rng.choice(vocab, size=pool, replace=False) + 2
        self.templates = rng.integers(2, vocab + 2, size=(pool, sentence_len))
        self.blank_pos = rng.integers(0, sentence_len, size=pool)
        if train is None:
            test = val = max(1, pool // 5)
            train = pool - val - test
        self._splits = _split_ids(list(range(pool)), train, val, test)

    def classes(self, split):
        return self._splits[split]

    def sample_example(self, class_id, rng):
        tokens = self.templates[class_id].copy()
        corrupt = rng.random(self.sentence_len) < self.noise
        tokens[corrupt] = rng.integers(2, self.vocab + 2, size=int(corrupt.sum()))
        tokens[self.blank_pos[class_id]] = self.BLANK
        return tokens

    def target_word(self, class_id) -> int:
        return int(self.pool_words[class_id])

    def meta(self):
        return {"input_kind": "tokens", "vocab": self.n_tokens, "seq_len": self.sentence_len}


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling; resizing to the original size is the identity."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


class ImageFolderSource(TaskSource):
    """Few-shot image dataset in the manifest layout.

    ``manifest.csv`` rows are ``class_id,relative_path``; each file is a
    CSNT tensor holding an HxW grayscale image in [0, 1].  Images are
    bilinearly resized to ``image_size``.  With rotations enabled, every
    train class spawns three extra classes rotated by 90/180/270 degrees;
    rotated train classes are still disjoint from val/test classes.
    """

    input_kind = "image"

    def __init__(self, directory, image_size: int = 14, rotations: bool = True,
                 train: int = 30, val: int = 0, test: int = 10):
        manifest = os.path.join(directory, "manifest.csv")
        if not os.path.exists(manifest):
            raise UsageError(f"no manifest.csv under {directory}")
        by_class: dict[str, list] = {}
        with open(manifest, newline="", encoding="utf-8") as fh:
            for rownum, row in enumerate(csv.reader(fh), start=1):
                if not row or (rownum == 1 and row[0].strip().lower() == "class_id"):
                    continue
                if len(row) != 2:
                    raise UsageError(f"manifest row {rownum}: expected 'class_id,relative_path'")
                class_id, rel = row[0].strip(), row[1].strip()
                path = os.path.join(directory, rel)
                try:
                    img = tensorfile.load_tensor(path)
                except (OSError, UsageError) as e:
                    raise UsageError(f"manifest row {rownum}: cannot load '{rel}': {e}")
                if img.ndim != 2:
                    raise UsageError(f"manifest row {rownum}: expected an HxW image, got {img.shape}")
                resized = bilinear_resize(img, image_size, image_size)
                by_class.setdefault(class_id, []).append(resized)
        self.image_size = image_size
        base_ids = sorted(by_class)
        splits = _split_ids(base_ids, train, val, test)
        self.examples: dict[str, list] = {}
        for split_name, ids in splits.items():
            for cid in ids:
                self.examples[cid] = by_class[cid]
        if rotations:
            rotated_train = []
            for cid in splits["train"]:
                for quarter in (1, 2, 3):
                    rid = f"{cid}@rot{quarter * 90}"
                    self.examples[rid] = [np.rot90(img, quarter).copy() for img in by_class[cid]]
                    rotated_train.append(rid)
            splits["train"] = splits["train"] + rotated_train
        self._splits = splits
        self.row_count = sum(len(v) for v in by_class.values())

    def classes(self, split):
        return self._splits[split]

    def sample_class_examples(self, class_id, count, rng):
        pool = self.examples[class_id]
        if count > len(pool):
            raise SamplerError(
                f"class '{class_id}' has {len(pool)} examples, episode needs {count}"
            )
        picks = rng.choice(len(pool), size=count, replace=False)
        return [pool[i] for i in picks]

    def sample_example(self, class_id, rng):
        return self.sample_class_examples(class_id, 1, rng)[0]

    def meta(self):
        return {"input_kind": "image", "image_size": self.image_size, "channels": 1}


def sample_episode(source: TaskSource, split: str, way: int, shots: int,
                   queries_per_class: int, rng: np.random.Generator,
                   label_rng: np.random.Generator | None = None) -> Episode:
    """Draw one N-way k-shot episode.

    Classes come without replacement from the split's pool; each class
    contributes k description examples and a disjoint query set.  Episode
    labels 0..C-1 are assigned to the chosen classes in an order drawn from
    ``label_rng`` (defaults to ``rng``), so label order can be varied
    independently of class choice.
    """
    pool = source.classes(split)
    if len(pool) < way:
        raise SamplerError(f"split '{split}' has {len(pool)} classes, episode needs {way}")
    chosen = sorted(rng.choice(len(pool), size=way, replace=False))
    chosen_ids = [pool[i] for i in chosen]
    order = (label_rng or rng).permutation(way)
    labeled = [chosen_ids[i] for i in order]

    desc_x, desc_labels = [], []
    query_x, query_labels = [], []
    for label, cid in enumerate(labeled):
        examples = source.sample_class_examples(cid, shots + queries_per_class, rng)
        for ex in examples[:shots]:
            desc_x.append(ex)
            desc_labels.append(label)
        for ex in examples[shots:]:
            query_x.append(ex)
            query_labels.append(label)
    qperm = rng.permutation(len(query_x))
    query_x = [query_x[i] for i in qperm]
    query_labels = [query_labels[i] for i in qperm]
    return Episode(
        desc_x=desc_x,
        desc_y=one_hot(desc_labels, way),
        query_x=query_x,
        query_y=one_hot(query_labels, way),
        way=way,
        shots=shots,
        class_ids=tuple(labeled),
    )


# ---------------------------------------------------------------------------
# Oracles: independent, brute-force references for the synthetic sources.


def prototype_oracle_accuracy(episode: Episode) -> float:
    """Classify queries by the nearest class mean of the description set."""
    desc = np.stack(episode.desc_x)
    labels = episode.desc_y.argmax(axis=1)
    protos = np.stack([desc[labels == c].mean(axis=0) for c in range(episode.way)])
    queries = np.stack(episode.query_x)
    d2 = ((queries[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    pred = d2.argmin(axis=1)
    return float((pred == episode.query_y.argmax(axis=1)).mean())


def overlap_oracle_accuracy(episode: Episode) -> float:
    """Classify query sentences by maximal position-wise token overlap with
    the description sentences (ties to the lowest description index)."""
    desc = np.stack(episode.desc_x)
    labels = episode.desc_y.argmax(axis=1)
    correct = 0
    for q, y in zip(episode.query_x, episode.query_y.argmax(axis=1)):
        overlap = (desc == np.asarray(q)[None, :]).sum(axis=1)
        correct += int(labels[int(overlap.argmax())] == y)
    return correct / len(episode.query_x)
