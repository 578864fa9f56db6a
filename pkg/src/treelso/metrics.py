"""Fréchet distance between Gaussian fits of image features.

The distance between ``N(mu1, S1)`` and ``N(mu2, S2)`` is::

    |mu1 - mu2|^2 + tr(S1) + tr(S2) - 2 tr((S1^{1/2} S2 S1^{1/2})^{1/2})

where both square roots come from symmetric eigendecompositions.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalDomainError

EIG_TOL = 1e-6


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.size


def gaussian_fit(features) -> GaussianSummary:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidInputError(f"expected an (n, d) feature array, got shape {X.shape}")
    n = X.shape[0]
    if n < 2:
        raise InvalidInputError("need at least 2 feature vectors")
    mu = X.mean(0)
    C = X - mu
    cov = C.T @ C / (n - 1)
    return GaussianSummary(mu, (cov + cov.T) / 2)


def _clean(lam: np.ndarray, what: str) -> np.ndarray:
    """Reject clearly negative eigenvalues; zero those lost in round-off.

    Eigenvalues within ``d * eps * max|lam|`` of zero carry no information,
    and their square roots would otherwise add up to visible noise.
    """
    if lam.size and lam.min() < -EIG_TOL:
        raise NumericalDomainError(f"{what} has eigenvalue {lam.min():.3g} < -{EIG_TOL}")
    floor = lam.size * np.finfo(float).eps * (np.abs(lam).max() if lam.size else 0.0)
    return np.where(lam > floor, lam, 0.0)


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    lam, V = np.linalg.eigh((S + S.T) / 2)
    return (V * np.sqrt(_clean(lam, "covariance"))) @ V.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    if a.mean.shape != b.mean.shape or a.covariance.shape != b.covariance.shape:
        raise InvalidInputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    root = _sqrt_psd(a.covariance)
    M = root @ b.covariance @ root
    cross = np.sqrt(_clean(np.linalg.eigvalsh((M + M.T) / 2), "cross term")).sum()
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2 * cross)


# ---------------------------------------------------------------------------
# feature maps


def flatten(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def downsample4(images) -> np.ndarray:
    """Mean over non-overlapping 4x4 pixel blocks, per channel."""
    x = np.asarray(images, dtype=np.float64)
    n, h, w, c = x.shape
    if h % 4 or w % 4:
        raise InvalidInputError(f"image size {h}x{w} is not divisible by 4")
    return x.reshape(n, h // 4, 4, w // 4, 4, c).mean((2, 4)).reshape(n, -1)


FEATURE_MAPS = {"flatten": flatten, "downsample4": downsample4}


def fid_like(images_a, images_b, feature_map="flatten") -> float:
    fmap = FEATURE_MAPS[feature_map] if isinstance(feature_map, str) else feature_map
    a, b = np.asarray(images_a), np.asarray(images_b)
    if a.ndim != 4 or b.ndim != 4:
        raise InvalidInputError("image sets must be (n, H, W, C) arrays")
    return frechet_distance(gaussian_fit(fmap(a)), gaussian_fit(fmap(b)))


def metric_csv(rows) -> str:
    """Rows of ``(metric, set_a, set_b, feature_map, value)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "set_a", "set_b", "feature_map", "value"])
    for metric, set_a, set_b, fmap, value in rows:
        w.writerow([metric, set_a, set_b, fmap, repr(float(value))])
    return buf.getvalue()
