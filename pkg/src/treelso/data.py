"""Weighted image datasets and their on-disk formats.

Image container (``TREELSO-IMG v1``)::

    TREELSO-IMG v1\\n
    <count> <height> <width> <channels>\\n
    <count*height*width*channels float32, little-endian, row-major (n, H, W, C)>

Scores are stored next to it as CSV with header ``index,score``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInputError

IMG_MAGIC = b"TREELSO-IMG v1\n"


def rank_weights(scores, k: float) -> np.ndarray:
    """Rank-based weights ``w_i ~ 1 / (k*N + rank_i)``, normalized to sum 1.

    ``rank_i`` counts the items with a strictly greater score, so tied
    scores share a weight and the best item has rank 0.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InvalidInputError("need a non-empty 1-D score list")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("scores must be finite")
    if not (k > 0 and np.isfinite(k)):
        raise InvalidInputError("k must be a positive finite number")
    n = s.size
    ordered = np.sort(s)
    # strictly greater = n - (number <= s_i)
    rank = n - np.searchsorted(ordered, s, side="right")
    raw = 1.0 / (k * n + rank)
    return raw / raw.sum()


@dataclass(frozen=True)
class WeightedDataset:
    images: np.ndarray    # (n, H, W, C) float64
    scores: np.ndarray    # (n,)
    weights: np.ndarray   # (n,), sums to 1
    k: float = 1e-3

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.scores) or len(self.scores) != len(self.weights):
            raise InvalidInputError("images, scores and weights must agree in length")

    @classmethod
    def uniform(cls, images, scores, k: float = 1e-3) -> "WeightedDataset":
        n = len(scores)
        if n < 1:
            raise InvalidInputError("dataset must not be empty")
        return cls(np.asarray(images, dtype=np.float64), np.asarray(scores, dtype=np.float64),
                   np.full(n, 1.0 / n), k)

    @classmethod
    def ranked(cls, images, scores, k: float) -> "WeightedDataset":
        scores = np.asarray(scores, dtype=np.float64)
        return cls(np.asarray(images, dtype=np.float64), scores, rank_weights(scores, k), k)

    def __len__(self):
        return len(self.scores)

    def extend(self, images, scores) -> "WeightedDataset":
        """Append items and recompute rank weights over the whole set."""
        images = np.asarray(images, dtype=np.float64).reshape((-1,) + self.images.shape[1:])
        return WeightedDataset.ranked(np.concatenate([self.images, images]),
                                      np.concatenate([self.scores, np.asarray(scores, dtype=np.float64)]),
                                      self.k)


# ---------------------------------------------------------------------------
# files


def image_bytes(images) -> bytes:
    x = np.asarray(images)
    if x.ndim != 4:
        raise InvalidInputError(f"expected (n, H, W, C) images, got shape {x.shape}")
    head = IMG_MAGIC + ("%d %d %d %d\n" % x.shape).encode()
    return head + np.ascontiguousarray(x, dtype="<f4").tobytes()


def images_from_bytes(data: bytes) -> np.ndarray:
    if not data.startswith(IMG_MAGIC):
        raise FormatError("not a TREELSO-IMG v1 container")
    end = data.find(b"\n", len(IMG_MAGIC))
    if end < 0:
        raise FormatError("truncated image header")
    try:
        shape = tuple(int(v) for v in data[len(IMG_MAGIC):end].split())
    except ValueError as exc:
        raise FormatError(f"bad image header: {exc}") from exc
    if len(shape) != 4 or min(shape) < 0:
        raise FormatError(f"bad image header {shape}")
    body = data[end + 1:]
    if len(body) != 4 * int(np.prod(shape)):
        raise FormatError("image payload size does not match header")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float64)


def write_images(path, images) -> None:
    with open(path, "wb") as fh:
        fh.write(image_bytes(images))


def read_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return images_from_bytes(fh.read())


def scores_csv(scores) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "score"])
    for i, s in enumerate(scores):
        w.writerow([i, repr(float(s))])
    return buf.getvalue()


def write_scores(path, scores) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(scores_csv(scores))


def read_scores(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["index", "score"]:
        raise FormatError(f"{path}: expected header index,score")
    out = []
    for i, row in enumerate(rows[1:]):
        try:
            idx, val = int(row[0]), float(row[1])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}: bad row {i + 2}: {row}") from exc
        if idx != i:
            raise FormatError(f"{path}: row {i + 2} has index {idx}, expected {i}")
        out.append(val)
    return np.array(out, dtype=np.float64)
