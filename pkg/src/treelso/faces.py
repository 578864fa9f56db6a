"""Synthetic smiling-face task on 16x16 grayscale rasters.

A face is a circle outline, two eye dots and a mouth arc.  The mouth has a
fixed position and width; only its bend depends on the smile degree
``theta`` in ``[0, 5]``.  The vertical offset of the mouth corners above the
mouth centre is ``SAG_AT_ZERO + SAG_PER_DEGREE * theta`` pixels, so
``theta = 0`` is a slight frown, ``theta = 2`` a weak smile and
``theta = 5`` the widest arc that fits between eyes and chin.

:func:`score` estimates ``theta`` back from a raster by normalized
cross-correlation of the mouth window against a bank of rendered templates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

SIZE = 16
CENTER = 7.5

SAG_AT_ZERO = -1.0
SAG_PER_DEGREE = 0.8
MOUTH_ROW = 10.5       # row of the arc's midpoint
MOUTH_HALF_WIDTH = 3.0
STROKE = 1.0           # anti-aliasing falloff, pixels
EYE_ROW = 5.0
EYE_RADIUS = 0.6

RADIUS_RANGE = (6.8, 7.5)
EYE_SPACING_RANGE = (4.0, 6.0)
BRIGHTNESS_RANGE = (0.7, 1.0)
DEGREE_RANGE = (0.0, 5.0)

# rows 7..12, cols 4..11: holds every mouth stroke for any degree
MOUTH_BOX = (slice(7, 13), slice(4, 12))

TEMPLATE_STEP = 0.1
N_TEMPLATES = 51


@dataclass(frozen=True)
class FaceParams:
    degree: float = 0.0
    radius: float = 7.0
    eye_spacing: float = 5.0
    brightness: float = 0.9

    def __post_init__(self):
        for name, value, (lo, hi) in (
            ("degree", self.degree, DEGREE_RANGE),
            ("radius", self.radius, RADIUS_RANGE),
            ("eye_spacing", self.eye_spacing, EYE_SPACING_RANGE),
            ("brightness", self.brightness, BRIGHTNESS_RANGE),
        ):
            if not (lo <= value <= hi):
                raise InvalidInputError(f"{name}={value} outside [{lo}, {hi}]")


_rows, _cols = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)


def _stroke(dist):
    return np.clip(1.0 - dist / STROKE, 0.0, 1.0)


def _mouth(degree: float) -> np.ndarray:
    sag = SAG_AT_ZERO + SAG_PER_DEGREE * degree
    u = np.linspace(-1.0, 1.0, 241)
    xs = CENTER + MOUTH_HALF_WIDTH * u
    ys = MOUTH_ROW - sag * u ** 2
    d = np.sqrt((_rows[..., None] - ys) ** 2 + (_cols[..., None] - xs) ** 2).min(-1)
    return _stroke(d)


def generate_face(p: FaceParams) -> np.ndarray:
    """Render ``p`` as a ``(16, 16, 1)`` array in ``[0, 1]``."""
    r = np.hypot(_rows - CENTER, _cols - CENTER)
    outline = _stroke(np.abs(r - p.radius))
    eyes = np.zeros_like(r)
    for dx in (-p.eye_spacing / 2, p.eye_spacing / 2):
        d = np.hypot(_rows - EYE_ROW, _cols - (CENTER + dx))
        eyes = np.maximum(eyes, _stroke(np.maximum(d - EYE_RADIUS, 0.0)))
    img = p.brightness * np.maximum.reduce([outline, eyes, _mouth(p.degree)])
    return img[..., None]


def _templates() -> np.ndarray:
    bank = []
    for k in range(N_TEMPLATES):
        t = _mouth(k * TEMPLATE_STEP)[MOUTH_BOX].ravel()
        t = t - t.mean()
        bank.append(t / np.linalg.norm(t))
    return np.array(bank)


_BANK = _templates()


def correlations(image) -> np.ndarray:
    """Normalized cross-correlation of the mouth window with every template."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape not in ((SIZE, SIZE, 1), (SIZE, SIZE)):
        raise InvalidInputError(f"expected a 16x16 image, got shape {img.shape}")
    m = img.reshape(SIZE, SIZE)[MOUTH_BOX].ravel()
    m = m - m.mean()
    norm = np.linalg.norm(m)
    if not np.isfinite(norm) or norm < 1e-12:
        return np.zeros(N_TEMPLATES)
    return _BANK @ (m / norm)


def score(image) -> float:
    """Estimated smile degree in ``[0, 5]``.

    The best template index is refined by a parabola through its two
    neighbours; a blank mouth window scores 0.
    """
    c = correlations(image)
    k = int(np.argmax(c))
    offset = 0.0
    if 0 < k < N_TEMPLATES - 1:
        denom = c[k - 1] - 2 * c[k] + c[k + 1]
        if denom < 0:
            offset = float(np.clip(0.5 * (c[k - 1] - c[k + 1]) / denom, -0.5, 0.5))
    return float(np.clip((k + offset) * TEMPLATE_STEP, *DEGREE_RANGE))


def score_many(images) -> np.ndarray:
    return np.array([score(im) for im in np.asarray(images)])


def sample_params(rng: np.random.Generator, max_degree: float, min_degree: float = 0.0) -> FaceParams:
    return FaceParams(
        degree=float(rng.uniform(min_degree, max_degree)),
        radius=float(rng.uniform(*RADIUS_RANGE)),
        eye_spacing=float(rng.uniform(*EYE_SPACING_RANGE)),
        brightness=float(rng.uniform(*BRIGHTNESS_RANGE)),
    )


def make_faces(n: int, max_degree: float, seed: int = 0, min_degree: float = 0.0):
    """``n`` random faces with degree uniform on ``[min_degree, max_degree]``.

    Returns ``(images, scores, params)``; the scores come from :func:`score`,
    not from the generating degree.
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if not DEGREE_RANGE[0] <= max_degree <= DEGREE_RANGE[1]:
        raise InvalidInputError(f"max_degree must lie in {DEGREE_RANGE}")
    if not DEGREE_RANGE[0] <= min_degree <= max_degree:
        raise InvalidInputError("min_degree must lie in [0, max_degree]")
    rng = np.random.default_rng(seed)
    params = [sample_params(rng, max_degree, min_degree) for _ in range(n)]
    images = np.stack([generate_face(p) for p in params])
    return images, score_many(images), params
