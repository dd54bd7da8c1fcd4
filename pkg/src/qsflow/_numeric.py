"""Shared linear-algebra and encoding helpers.

Superoperators act on d x d matrices and are stored as d**2 x d**2 matrices
in the column-stacking convention, vec(A @ B @ C) = kron(C.T, A) @ vec(B).
"""
from __future__ import annotations

from typing import Any

import numpy as np


def vec(matrix: np.ndarray) -> np.ndarray:
    return np.asarray(matrix).reshape(-1, order="F")


def unvec(vector: np.ndarray, dim: int) -> np.ndarray:
    return np.asarray(vector).reshape((dim, dim), order="F")


def sandwich(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Superoperator of B -> left @ B @ right."""
    return np.kron(np.asarray(right).T, np.asarray(left))


def apply_superop(superop: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    dim = matrix.shape[0]
    return unvec(superop @ vec(matrix), dim)


def identity_superop(dim: int) -> np.ndarray:
    return np.eye(dim * dim, dtype=complex)


def hermitian_part(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.conj().T)


def min_eigenvalue(matrix: np.ndarray) -> float:
    if matrix.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(hermitian_part(matrix))[0])


def psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Positive square root of a Hermitian matrix; negative eigenvalues are clipped."""
    vals, vecs = np.linalg.eigh(hermitian_part(matrix))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.conj().T


def fix_phase(array: np.ndarray) -> np.ndarray:
    """Rotate so the largest-magnitude entry (first in C order) is real positive."""
    flat = array.reshape(-1)
    if flat.size == 0:
        return array
    idx = int(np.argmax(np.abs(flat)))
    if abs(flat[idx]) == 0.0:
        return array
    return array * (abs(flat[idx]) / flat[idx])


def encode_complex(value: complex) -> list[float]:
    value = complex(value)
    return [value.real, value.imag]


def decode_complex(value: Any) -> complex:
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ValueError(f"complex number must be [re, im], got {value!r}")
        return complex(float(value[0]), float(value[1]))
    return complex(value)


def encode_matrix(matrix: np.ndarray) -> list:
    arr = np.asarray(matrix, dtype=complex)
    if arr.ndim == 1:
        return [encode_complex(x) for x in arr]
    return [encode_matrix(row) for row in arr]


def decode_matrix(data: Any, ndim: int = 2) -> np.ndarray:
    """Decode an ndim-dimensional complex array.

    Leaves are either plain numbers or [re, im] pairs; the expected number of
    dimensions disambiguates a real 2-vector from a single complex pair.
    """
    arr = np.asarray(data)
    if arr.dtype == object:
        raise ValueError("ragged matrix data")
    if arr.ndim == ndim + 1 and arr.shape[-1] == 2 and np.isrealobj(arr):
        arr = arr.astype(float)
        return arr[..., 0] + 1j * arr[..., 1]
    if arr.ndim == ndim:
        return arr.astype(complex)
    raise ValueError(f"expected a {ndim}-dimensional array, got shape {arr.shape}")
