"""Input validation and normalization helpers."""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError, DomainError


def as_matrix(a, name="array") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DomainError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def as_vector(a, name="array") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise DomainError(f"{name} must be 1-D, got shape {a.shape}")
    return a


def check_orthonormal(u, tol=1e-8, name="u") -> np.ndarray:
    """Return ``u`` as float64 after checking ``u.T @ u == I`` to ``tol`` (Frobenius)."""
    u = as_matrix(u, name)
    gram = u.T @ u
    err = np.linalg.norm(gram - np.eye(u.shape[1]), "fro")
    if not err <= tol:
        raise DomainError(f"{name} is not orthonormal: ||{name}'{name} - I||_F = {err:.3e} > {tol:g}")
    return u


def as_task_arrays(datasets):
    """Normalize a task collection to parallel lists (xs, ys).

    Accepts a sequence of TaskDataset-like objects (attributes ``x``/``y``) or of
    ``(x, y)`` pairs.  All tasks must share the feature dimension d.
    """
    xs, ys = [], []
    for i, item in enumerate(datasets):
        if hasattr(item, "x") and hasattr(item, "y"):
            x, y = item.x, item.y
        else:
            x, y = item
        x = as_matrix(x, f"task {i} design matrix")
        y = as_vector(y, f"task {i} response")
        if x.shape[0] != y.shape[0]:
            raise DomainError(f"task {i}: X has {x.shape[0]} rows but y has {y.shape[0]}")
        xs.append(x)
        ys.append(y)
    if not xs:
        raise ConfigError("at least one task is required")
    d = xs[0].shape[1]
    for i, x in enumerate(xs):
        if x.shape[1] != d:
            raise ConfigError(f"task {i} has d={x.shape[1]}, expected {d}")
    return xs, ys


def stackable(xs) -> bool:
    """True when every task has the same sample count (allows batched updates)."""
    m = xs[0].shape[0]
    return all(x.shape[0] == m for x in xs)


def random_orthonormal(d: int, r: int, rng: np.random.Generator) -> np.ndarray:
    q, rr = np.linalg.qr(rng.standard_normal((d, r)))
    return q * np.sign(np.diag(rr))


def worker_count() -> int:
    """Worker cap from LRS_THREADS (0 = auto, unset = serial)."""
    raw = os.environ.get("LRS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LRS_THREADS must be an integer, got {raw!r}")
    if n == 0:
        return os.cpu_count() or 1
    return max(1, n)
