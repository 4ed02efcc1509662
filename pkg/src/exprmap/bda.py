"""Affine blendshape distribution alignment: headset-convention coefficients
are mapped into the distribution the expression mapper was trained on."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ._binio import FormatError, Reader, check_magic, pack_array, read_bytes, write_bytes
from .dataset import N_COEFFS, BlendshapeFrame, coeff_matrix

DAMPING = 1e-8


class AlignmentError(ValueError):
    pass


@dataclass(eq=False)
class AffineAlignment:
    W: np.ndarray
    b: np.ndarray
    fit_stats: dict = field(default_factory=lambda: {"n_samples": 0, "train_mse": 0.0})

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.shape != (N_COEFFS, N_COEFFS) or self.b.shape != (N_COEFFS,):
            raise AlignmentError("alignment must be 51x51 W and 51-vector b")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise AlignmentError("alignment contains non-finite entries")

    @classmethod
    def identity(cls):
        return cls(np.eye(N_COEFFS), np.zeros(N_COEFFS))

    def transform(self, coeffs, clamp=True):
        """Batch application on ``(..., 51)`` arrays."""
        out = coeffs @ self.W.T + self.b
        return np.clip(out, 0.0, 1.0) if clamp else out


def _as_arrays(pairs):
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        return np.asarray(pairs[0], float), np.asarray(pairs[1], float)
    vr = coeff_matrix([p[0] for p in pairs])
    mp = coeff_matrix([p[1] for p in pairs])
    return vr, mp


def alignment_mse(W, b, X, Y):
    """Per-coefficient mean squared error of ``Y ~ X W^T + b``."""
    r = Y - (X @ W.T + b)
    return float(np.mean(r * r))


def fit_bda(pairs) -> AffineAlignment:
    """Closed-form least squares on the augmented input ``[bs, 1]``.

    ``pairs`` is a list of ``(vr_frame, mp_frame)`` or a tuple ``(X, Y)`` of
    ``(n, 51)`` arrays. ``train_mse`` is averaged over samples and coefficients.
    """
    X, Y = _as_arrays(pairs)
    n = X.shape[0]
    if n < N_COEFFS + 1:
        raise AlignmentError(f"need at least {N_COEFFS + 1} pairs, got {n}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise AlignmentError("non-finite input")
    Xa = np.hstack([X, np.ones((n, 1))])
    G = Xa.T @ Xa + DAMPING * np.eye(N_COEFFS + 1)
    theta = np.linalg.solve(G, Xa.T @ Y)
    W = theta[:N_COEFFS].T.copy()
    b = theta[N_COEFFS].copy()
    return AffineAlignment(W, b, {"n_samples": n, "train_mse": alignment_mse(W, b, X, Y)})


def apply_bda(alignment: AffineAlignment, frame: BlendshapeFrame) -> BlendshapeFrame:
    out = alignment.W @ frame.coeffs + alignment.b
    np.clip(out, 0.0, 1.0, out=out)
    return BlendshapeFrame(frame.subject_id, frame.frame_id, frame.timestamp_us, out)


_MAGIC = b"BDA1"


def alignment_to_bytes(alignment: AffineAlignment) -> bytes:
    return b"".join([
        _MAGIC,
        pack_array(alignment.W, "f8"),
        pack_array(alignment.b, "f8"),
        struct.pack("<Qd", int(alignment.fit_stats.get("n_samples", 0)),
                    float(alignment.fit_stats.get("train_mse", 0.0))),
    ])


def alignment_from_bytes(buf) -> AffineAlignment:
    check_magic(buf, "BDA")
    r = Reader(buf, "alignment")
    r.pos = 4
    W = r.array("f8", (N_COEFFS, N_COEFFS))
    b = r.array("f8", (N_COEFFS,))
    n, mse = r.unpack("Qd")
    r.finish()
    try:
        return AffineAlignment(W, b, {"n_samples": n, "train_mse": mse})
    except AlignmentError as exc:
        raise FormatError(str(exc)) from None


def save_alignment(alignment, path):
    write_bytes(path, alignment_to_bytes(alignment))


def load_alignment(path) -> AffineAlignment:
    return alignment_from_bytes(read_bytes(path))
