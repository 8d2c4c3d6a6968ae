"""Minimal dense linear algebra over float64 numpy arrays.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64. The
eigensolver is a cyclic Jacobi iteration: the covariance matrices it is
applied to are symmetric PSD and small (d <= 256), where Jacobi is robust
and its output is easy to make deterministic (ascending eigenvalues,
column signs fixed by the largest-magnitude component).

Binary wire format for a single matrix ("NSUM"): magic, u32 rows, u32
cols, then rows*cols little-endian f64 values in row-major order.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

MATRIX_MAGIC = b"NSUM"

_JACOBI_MAX_SWEEPS = 100
_JACOBI_TOL_FACTOR = 1e-12
_SYMMETRY_TOL = 1e-10
_QR_PIVOT_TOL = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a 2-D float64 array with finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D array, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"{name}: empty dimension in shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name}: non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def covariance(x: np.ndarray) -> np.ndarray:
    """(1/n) X^T X over token rows, symmetrized against rounding drift."""
    x = as_matrix(x, "x")
    n = x.shape[0]
    if n == 0:
        raise ContractError("covariance: empty input (n = 0 rows)")
    c = (x.T @ x) / n
    return (c + c.T) / 2.0


def frobenius_norm(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def _offdiag_norm(a: np.ndarray) -> float:
    # summing the off-diagonal entries directly avoids the catastrophic
    # cancellation of sqrt(||A||_F^2 - ||diag||^2) near convergence
    masked = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(masked * masked)))


def sym_eig(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix via cyclic Jacobi sweeps.

    Returns (eigenvalues ascending, eigenvector matrix U with orthonormal
    columns; column k pairs with eigenvalue k). Column signs are fixed so
    the largest-magnitude component of each eigenvector is positive.
    """
    c = as_matrix(c, "c")
    d = c.shape[0]
    if c.shape[0] != c.shape[1]:
        raise DimensionError(f"sym_eig: non-square shape {c.shape}")
    if np.max(np.abs(c - c.T)) > _SYMMETRY_TOL:
        raise ContractError("sym_eig: input not symmetric within 1e-10")

    a = (c + c.T) / 2.0
    u = np.eye(d)
    fnorm = frobenius_norm(a)
    tol = _JACOBI_TOL_FACTOR * max(fnorm, 1e-300)
    rot_tol = tol / max(d * d, 1)

    converged = False
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = _offdiag_norm(a)
        if off <= tol:
            converged = True
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= rot_tol:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                cs = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * cs
                rot_p = cs * a[:, p] - sn * a[:, q]
                rot_q = sn * a[:, p] + cs * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = cs * a[p, :] - sn * a[q, :]
                rot_q = sn * a[p, :] + cs * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = cs * u[:, p] - sn * u[:, q]
                rot_q = sn * u[:, p] + cs * u[:, q]
                u[:, p], u[:, q] = rot_p, rot_q
    else:
        converged = False
    if not converged:
        off = _offdiag_norm(a)
        if off > tol:
            raise NumericError(
                f"sym_eig: Jacobi did not converge in {_JACOBI_MAX_SWEEPS} sweeps "
                f"(off-diagonal {off:.3e} > tol {tol:.3e})")

    eigenvalues = np.diag(a).copy()
    order = np.argsort(eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    u = u[:, order]
    for k in range(d):
        col = u[:, k]
        idx = int(np.argmax(np.abs(col)))
        if col[idx] < 0:
            u[:, k] = -col
    return eigenvalues, u


def qr_orthonormal(g: np.ndarray) -> np.ndarray:
    """Orthonormal basis for the column span of g (same shape as g).

    Signs are fixed so the R diagonal is positive, making the result
    deterministic. Rank deficiency (pivot below 1e-12) is rejected.
    """
    g = as_matrix(g, "g")
    rows, cols = g.shape
    if rows < cols:
        raise DegenerateInputError(f"qr_orthonormal: rows {rows} < cols {cols}")
    q, r = np.linalg.qr(g, mode="reduced")
    diag = np.diag(r)
    if np.min(np.abs(diag)) < _QR_PIVOT_TOL:
        raise DegenerateInputError(
            f"qr_orthonormal: rank-deficient input (min pivot {np.min(np.abs(diag)):.3e})")
    signs = np.sign(diag)
    return q * signs


def write_matrix(fh: BinaryIO, m: np.ndarray) -> None:
    m = as_matrix(m, "m")
    fh.write(MATRIX_MAGIC)
    fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
    fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_matrix(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MATRIX_MAGIC:
        raise ContractError(f"read_matrix: bad magic {magic!r}")
    rows, cols = struct.unpack("<II", fh.read(8))
    raw = fh.read(rows * cols * 8)
    if len(raw) != rows * cols * 8:
        raise ContractError("read_matrix: truncated payload")
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
