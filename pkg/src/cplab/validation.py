"""Input checks shared by the estimator wrapper."""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np


def check_sequences(
    X: Any, n_features: int | None = None, min_frames: int = 1
) -> list[np.ndarray]:
    """Validate a collection of (T_i, F) feature matrices.

    Returns float64 copies. A single 2-D array is treated as one utterance
    only if wrapped in a list; a 3-D array is split along its first axis.
    """
    if isinstance(X, np.ndarray):
        if X.ndim != 3:
            raise ValueError(
                f"expected a list of (T, F) arrays or a (N, T, F) array, got shape {X.shape}"
            )
        X = list(X)
    if isinstance(X, (str, bytes)) or not isinstance(X, Sequence):
        raise TypeError(f"expected a sequence of feature matrices, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError("need at least one utterance")
    out = []
    for i, x in enumerate(X):
        a = np.asarray(x, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"utterance {i}: expected a (T, F) matrix, got shape {a.shape}")
        if n_features is not None and a.shape[1] != n_features:
            raise ValueError(f"utterance {i}: expected {n_features} features, got {a.shape[1]}")
        if a.shape[0] < min_frames:
            raise ValueError(f"utterance {i}: {a.shape[0]} frames, need at least {min_frames}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"utterance {i}: features contain NaN or inf")
        out.append(a)
    widths = {a.shape[1] for a in out}
    if len(widths) > 1:
        raise ValueError(f"utterances disagree on feature width: {sorted(widths)}")
    return out


def check_transcripts(
    y: Any, n_samples: int, n_tokens: int | None = None, allow_missing: bool = True
) -> list[list[int] | None]:
    """Validate token transcripts; ``None`` marks an unlabeled utterance."""
    if y is None:
        return [None] * n_samples
    if isinstance(y, (str, bytes)) or not isinstance(y, Sequence):
        raise TypeError(f"expected a sequence of transcripts, got {type(y).__name__}")
    if len(y) != n_samples:
        raise ValueError(f"{n_samples} utterances but {len(y)} transcripts")
    out: list[list[int] | None] = []
    for i, t in enumerate(y):
        if t is None:
            if not allow_missing:
                raise ValueError(f"transcript {i} is missing")
            out.append(None)
            continue
        arr = np.asarray(t)
        if arr.ndim != 1 or (arr.size and not np.issubdtype(arr.dtype, np.integer)):
            raise ValueError(f"transcript {i} must be a 1-D sequence of integer token ids")
        toks = [int(v) for v in arr]
        if any(v < 0 for v in toks):
            raise ValueError(f"transcript {i} has negative token ids")
        if n_tokens is not None and any(v >= n_tokens for v in toks):
            raise ValueError(f"transcript {i} has token ids >= n_tokens={n_tokens}")
        out.append(toks)
    return out
