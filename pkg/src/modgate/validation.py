"""Input validation helpers shared by the estimator, harness, and CLI."""

from __future__ import annotations

import numpy as np


def check_mask(mask, n_modalities: int) -> np.ndarray:
    """Coerce to a length-M {0,1} int vector or raise ValueError."""
    m = np.asarray(mask)
    if m.shape != (n_modalities,):
        raise ValueError(f"modality mask must have shape ({n_modalities},), got {m.shape}")
    m = m.astype(np.int64)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("modality mask entries must be 0 or 1")
    return m


def check_streams(x, n_modalities: int | None = None, seq_len: int | None = None,
                  input_dim: int | None = None) -> np.ndarray:
    """Validate multimodal input of shape (N, M, T, d_in) as finite float64."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected (N, M, T, d_in) input, got shape {arr.shape}")
    for axis, want, name in ((1, n_modalities, "modalities"), (2, seq_len, "seq_len"),
                             (3, input_dim, "input_dim")):
        if want is not None and arr.shape[axis] != want:
            raise ValueError(f"input has {arr.shape[axis]} {name}, expected {want}")
    if not np.isfinite(arr).all():
        raise ValueError("input contains non-finite values")
    return arr


def check_labels(y, n_samples: int | None = None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {arr.shape}")
    if n_samples is not None and arr.shape[0] != n_samples:
        raise ValueError(f"{arr.shape[0]} labels for {n_samples} samples")
    return arr
