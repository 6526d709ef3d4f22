"""
Spatial Forcing Lab - Representation Diagnostics

Similarity measures between embedding sets, computed in plain numpy.
"""
import numpy as np

from src.exceptions import ShapeError


def _as_matrix(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(name, x.shape, detail="expects [n_samples, features]")
    return x


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """
    Linear centred kernel alignment between two representations of the same samples.

    ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F), clipped to [0, 1].
    """
    x = _as_matrix(x, "linear_cka")
    y = _as_matrix(y, "linear_cka")
    if x.shape[0] != y.shape[0]:
        raise ShapeError("linear_cka", x.shape, y.shape, detail="sample counts differ")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    cross = np.linalg.norm(yc.T @ xc, ord="fro") ** 2
    denom = np.linalg.norm(xc.T @ xc, ord="fro") * np.linalg.norm(yc.T @ yc, ord="fro")
    if denom == 0.0:
        return 0.0
    return float(np.clip(cross / denom, 0.0, 1.0))


def centroid_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between the row means."""
    a = _as_matrix(a, "centroid_distance")
    b = _as_matrix(b, "centroid_distance")
    if a.shape[1] != b.shape[1]:
        raise ShapeError("centroid_distance", a.shape, b.shape)
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def mean_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Mean row-wise cosine similarity."""
    a = _as_matrix(a, "mean_cosine")
    b = _as_matrix(b, "mean_cosine")
    if a.shape != b.shape:
        raise ShapeError("mean_cosine", a.shape, b.shape)
    na = np.maximum(np.linalg.norm(a, axis=1), 1e-8)
    nb = np.maximum(np.linalg.norm(b, axis=1), 1e-8)
    return float(np.mean(np.sum(a * b, axis=1) / (na * nb)))
