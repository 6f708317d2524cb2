"""
Dense matrix arithmetic and convolution lowering.

Matrices are 2-D numpy arrays (float32 or float64). Spatial tensors are
(H, W, C) arrays with channels innermost; filter banks are (K, F, F, C).
Everything here is a pure function of its inputs.
"""

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from codedinfer.core.errors import DimensionMismatch, InvalidGeometry, ShapeMismatch
from codedinfer.core.types import ActivationKind, ConvGeometry, PoolMode


def _check_matrix(name: str, m: np.ndarray):
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionMismatch(f"{name} must be a non-empty 2-D matrix, got shape {m.shape}")


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    General matrix-matrix product C = A x B.

    Raises:
        DimensionMismatch: if A.cols != B.rows
    """
    _check_matrix("A", a)
    _check_matrix("B", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"A is {a.shape[0]}x{a.shape[1]} but B is {b.shape[0]}x{b.shape[1]}")
    return np.matmul(a, b)


def conv_output_dim(i: int, f: int, p: int, s: int) -> int:
    """Output extent floor((i - f + 2p) / s) + 1."""
    if f < 1 or s < 1 or p < 0:
        raise InvalidGeometry(f"need f >= 1, s >= 1, p >= 0 (got f={f}, s={s}, p={p})")
    if i + 2 * p < f:
        raise InvalidGeometry(f"filter {f} does not fit input {i} with padding {p}")
    return (i - f + 2 * p) // s + 1


def pool_output_dim(i: int, window: int, stride: int) -> int:
    return conv_output_dim(i, window, 0, stride)


def _check_geometry(x: np.ndarray, geom: ConvGeometry):
    if x.ndim != 3:
        raise ShapeMismatch(f"expected an (H, W, C) tensor, got shape {x.shape}")
    if x.shape != geom.input_shape:
        raise ShapeMismatch(f"input shape {x.shape} does not match geometry {geom.input_shape}")
    # Raises InvalidGeometry for impossible windows.
    geom.out_height, geom.out_width


def im2col_padded(xp: np.ndarray, f: int, s: int) -> np.ndarray:
    """im2col over an input that already carries its padding."""
    windows = sliding_window_view(xp, (f, f), axis=(0, 1))[::s, ::s]
    # (Ho, Wo, C, F, F) -> (F, F, C, Ho, Wo)
    ho, wo = windows.shape[0], windows.shape[1]
    cols = windows.transpose(3, 4, 2, 0, 1)
    return cols.reshape(f * f * xp.shape[2], ho * wo)


def im2col(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """
    Unroll every filter-sized patch of ``x`` into a column.

    Row index inside a column is ((dy * F) + dx) * C + c, matching
    ``unroll_filters``; columns run row-major over output positions.
    Out-of-bounds reads are zero.
    """
    _check_geometry(x, geom)
    p = geom.padding
    xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
    return im2col_padded(xp, geom.size, geom.stride)


def unroll_filters(filters: np.ndarray) -> np.ndarray:
    """(K, F, F, C) filter bank -> K x F*F*C matrix."""
    if filters.ndim != 4 or filters.shape[1] != filters.shape[2]:
        raise ShapeMismatch(f"expected a (K, F, F, C) filter bank, got shape {filters.shape}")
    return filters.reshape(filters.shape[0], -1)


def activate(m: np.ndarray, act: ActivationKind) -> np.ndarray:
    if act is ActivationKind.RELU:
        return np.maximum(m, 0)
    return m


def affine_activate(m: np.ndarray, bias: Optional[np.ndarray], act: ActivationKind) -> np.ndarray:
    """
    Apply sigma(M[i][j] + bias[i]) elementwise.

    Raises:
        DimensionMismatch: if len(bias) != M.rows
    """
    if bias is not None and len(bias):
        if bias.ndim != 1 or bias.shape[0] != m.shape[0]:
            raise DimensionMismatch(f"bias length {bias.shape} does not match {m.shape[0]} rows")
        m = m + bias.astype(m.dtype, copy=False)[:, None]
    return activate(m, act)


def cols_to_tensor(out: np.ndarray, height: int, width: int) -> np.ndarray:
    """K x (Ho*Wo) GEMM output -> (Ho, Wo, K) tensor."""
    return np.ascontiguousarray(out.T).reshape(height, width, out.shape[0])


def tensor_to_cols(x: np.ndarray) -> np.ndarray:
    """(H, W, C) tensor -> C x (H*W) matrix; inverse of cols_to_tensor."""
    h, w, c = x.shape
    return np.ascontiguousarray(x.reshape(h * w, c).T)


def conv2d(x: np.ndarray, filters: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Convolution through im2col + gemm, returning an (Ho, Wo, K) tensor."""
    out = gemm(unroll_filters(filters), im2col(x, geom))
    return cols_to_tensor(out, geom.out_height, geom.out_width)


def pool2d(x: np.ndarray, window: int, stride: int, mode: PoolMode) -> np.ndarray:
    """Max/average pooling without padding over an (H, W, C) tensor."""
    if x.ndim != 3:
        raise ShapeMismatch(f"pooling expects (H, W, C), got shape {x.shape}")
    pool_output_dim(x.shape[0], window, stride)
    pool_output_dim(x.shape[1], window, stride)
    windows = sliding_window_view(x, (window, window), axis=(0, 1))[::stride, ::stride]
    if mode is PoolMode.MAX:
        return windows.max(axis=(3, 4))
    return windows.mean(axis=(3, 4)).astype(x.dtype, copy=False)


def rel_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """max |actual - expected| / max |expected| (absolute when expected is all zero)."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeMismatch(f"cannot compare shapes {actual.shape} and {expected.shape}")
    diff = float(np.max(np.abs(actual - expected))) if actual.size else 0.0
    scale = float(np.max(np.abs(expected))) if expected.size else 0.0
    return diff / scale if scale > 0 else diff


def tolerance(dtype: np.dtype) -> float:
    """Relative tolerance for end-to-end comparisons at an element width."""
    return 1e-4 if np.dtype(dtype) == np.float32 else 1e-10
