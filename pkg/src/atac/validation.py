"""Input validation helpers shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np


def check_images(X, channels: int = 3, image_size: int | None = None) -> np.ndarray:
    """Validate an [N, C, H, W] float image batch and return it as float64.

    Rejects other ranks, wrong channel counts, non-square maps, sizes that are
    not multiples of 4 (two stride-2 stages) and non-finite values.
    """
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"expected a numeric image array, got dtype {X.dtype}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape [N, C, H, W], got {X.shape}")
    n, c, h, w = X.shape
    if n == 0:
        raise ValueError("empty image batch")
    if c != channels:
        raise ValueError(f"expected {channels} channels, got {c}")
    if h != w or h % 4:
        raise ValueError(f"images must be square with a side divisible by 4, got {h}x{w}")
    if image_size is not None and h != image_size:
        raise ValueError(f"model was fitted on {image_size}x{image_size} images, got {h}x{w}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    return X
