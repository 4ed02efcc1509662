"""Linear baselines: a fixed 51x103 multiplication matrix and ridge regression.

Both emit FLAME-style vectors with 100 expression components followed by a
3-vector jaw axis-angle; the ridge mapper also emits 6 eye axis-angle values.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .._binio import FormatError, Reader, check_magic, pack_array, read_bytes, write_bytes
from ..dataset import EXPR, EYE_L, EYE_R, IDENTITY_6D, JAW, N_COEFFS, N_EXPR, N_PARAMS
from ..rotations import axis_angle_to_matrix, matrix_to_axis_angle, matrix_to_rot6d, rot6d_to_matrix

BASELINE_EXPR = 100
MATRIX_OUT = BASELINE_EXPR + 3
RIDGE_OUT = BASELINE_EXPR + 9


class MapperError(ValueError):
    pass


@dataclass(eq=False)
class MatrixMapper:
    M: np.ndarray  # (51, 103)

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        if self.M.shape != (N_COEFFS, MATRIX_OUT):
            raise MapperError(f"matrix must be {N_COEFFS}x{MATRIX_OUT}, got {self.M.shape}")

    def predict(self, coeffs):
        return matrix_map(self, coeffs)


@dataclass(eq=False)
class RidgeMapper:
    W: np.ndarray          # (51, 109)
    intercept: np.ndarray  # (109,)
    lam: float = 1.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.intercept = np.asarray(self.intercept, dtype=np.float64)
        if self.W.shape[0] != N_COEFFS or self.intercept.shape != (self.W.shape[1],):
            raise MapperError("ridge weights must be (51, k) with a k-vector intercept")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.intercept))):
            raise MapperError("ridge mapper has non-finite entries")

    def predict(self, coeffs):
        return ridge_apply(self, coeffs)


def _check_input(coeffs):
    x = np.asarray(coeffs, dtype=np.float64)
    if x.shape[-1] != N_COEFFS:
        raise MapperError(f"expected {N_COEFFS} coefficients, got {x.shape[-1]}")
    return x


def matrix_map(mapper: MatrixMapper, coeffs) -> np.ndarray:
    """Plain product ``coeffs^T M``: no bias, no clamping."""
    return _check_input(coeffs) @ mapper.M


def ridge_fit(X, Y, lam: float = 1.0) -> RidgeMapper:
    """Closed-form ridge on centered data; the intercept is not penalized."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise MapperError("X and Y must be 2-D with matching rows")
    if X.shape[0] < X.shape[1] + 1:
        raise MapperError(f"need at least {X.shape[1] + 1} samples, got {X.shape[0]}")
    if lam < 0:
        raise MapperError("lambda must be >= 0")
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    if lam == 0:
        W = np.linalg.lstsq(Xc, Yc, rcond=None)[0]
    else:
        W = np.linalg.solve(Xc.T @ Xc + lam * np.eye(X.shape[1]), Xc.T @ Yc)
    return RidgeMapper(W, ym - xm @ W, lam)


def ridge_apply(mapper: RidgeMapper, coeffs) -> np.ndarray:
    x = np.asarray(coeffs, dtype=np.float64)
    if x.shape[-1] != mapper.W.shape[0]:
        raise MapperError(f"expected {mapper.W.shape[0]} inputs, got {x.shape[-1]}")
    return x @ mapper.W + mapper.intercept


def fit_fixed_matrix(X, Y) -> MatrixMapper:
    """No-intercept least squares onto the 103 matrix outputs.

    Stands in for a published multiplication matrix when none is supplied.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)[:, :MATRIX_OUT]
    return MatrixMapper(np.linalg.lstsq(X, Y, rcond=None)[0])


# --- parameter-format conversion --------------------------------------------------

def params_to_baseline(q, n_expr: int = BASELINE_EXPR) -> np.ndarray:
    """(n, 68) parameter vectors -> (n, 109) baseline targets (zero-padded
    expression, jaw / left / right eye axis-angle)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    out = np.zeros((q.shape[0], n_expr + 9))
    out[:, :N_EXPR] = q[:, EXPR]
    for k, block in enumerate((JAW, EYE_L, EYE_R)):
        out[:, n_expr + 3 * k:n_expr + 3 * k + 3] = matrix_to_axis_angle(rot6d_to_matrix(q[:, block]))
    return out


def baseline_to_params(out, n_expr: int = BASELINE_EXPR) -> np.ndarray:
    """(n, 103|109) baseline outputs -> (n, 68); missing eyes become identity."""
    out = np.atleast_2d(np.asarray(out, dtype=np.float64))
    if out.shape[1] not in (n_expr + 3, n_expr + 9):
        raise MapperError(f"cannot interpret baseline output of width {out.shape[1]}")
    q = np.zeros((out.shape[0], N_PARAMS))
    q[:, EXPR] = out[:, :N_EXPR]
    q[:, JAW] = matrix_to_rot6d(axis_angle_to_matrix(out[:, n_expr:n_expr + 3]))
    if out.shape[1] == n_expr + 9:
        q[:, EYE_L] = matrix_to_rot6d(axis_angle_to_matrix(out[:, n_expr + 3:n_expr + 6]))
        q[:, EYE_R] = matrix_to_rot6d(axis_angle_to_matrix(out[:, n_expr + 6:n_expr + 9]))
    else:
        q[:, EYE_L] = IDENTITY_6D
        q[:, EYE_R] = IDENTITY_6D
    return q


# --- MAT1 / RDG1 containers -------------------------------------------------------

def matrix_to_bytes(mapper: MatrixMapper) -> bytes:
    rows, cols = mapper.M.shape
    return b"MAT1" + struct.pack("<II", rows, cols) + pack_array(mapper.M, "f4")


def matrix_from_bytes(buf) -> MatrixMapper:
    check_magic(buf, "MAT")
    r = Reader(buf, "MAT")
    r.pos = 4
    rows, cols = r.unpack("II")
    if (rows, cols) != (N_COEFFS, MATRIX_OUT):
        raise FormatError(f"matrix file is {rows}x{cols}, expected {N_COEFFS}x{MATRIX_OUT}")
    M = r.array("f4", (rows, cols))
    r.finish()
    return MatrixMapper(M)


def ridge_to_bytes(mapper: RidgeMapper) -> bytes:
    rows, cols = mapper.W.shape
    return b"".join([b"RDG1", struct.pack("<IId", rows, cols, mapper.lam),
                     pack_array(mapper.W, "f4"), pack_array(mapper.intercept, "f4")])


def ridge_from_bytes(buf) -> RidgeMapper:
    check_magic(buf, "RDG")
    r = Reader(buf, "RDG")
    r.pos = 4
    rows, cols, lam = r.unpack("IId")
    if rows != N_COEFFS or cols > 1 << 16:
        raise FormatError(f"implausible ridge dimensions {rows}x{cols}")
    W = r.array("f4", (rows, cols))
    b = r.array("f4", (cols,))
    r.finish()
    try:
        return RidgeMapper(W, b, lam)
    except MapperError as exc:
        raise FormatError(str(exc)) from None


def save_matrix(mapper, path):
    write_bytes(path, matrix_to_bytes(mapper))


def load_matrix(path) -> MatrixMapper:
    return matrix_from_bytes(read_bytes(path))


def save_ridge(mapper, path):
    write_bytes(path, ridge_to_bytes(mapper))


def load_ridge(path) -> RidgeMapper:
    return ridge_from_bytes(read_bytes(path))
