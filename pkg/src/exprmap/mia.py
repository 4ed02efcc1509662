"""Mapper-integrated avatar fitting.

The avatar's expression and pose-corrective offsets (dE, dP) are fitted
against meshes driven by a frozen mapper's predictions, so that the avatar
absorbs the mapper's systematic errors. The image losses of a photometric
avatar are replaced by a vertex-space term:

    L = L_vtx + lam2 L_lap + lam3 L_reg + lam4 L_scale

* ``L_vtx``: mean squared vertex distance (mm^2) between
  ``deform(model, mapper(bs), dE, dP)`` and ``deform(model, q_gt)``.
* ``L_lap``: Laplacian energy (mm^2) of the rest-space offset displacement
  ``Psi dE + Theta dP``.
* ``L_reg``: mean ||e_hat||^2 + ||dE||^2 + ||dP||^2.
* ``L_scale``: anisotropy penalty of the rigged Gaussians. Face scale is
  isotropic, so this term does not depend on the offsets; it is reported but
  contributes no gradient.

Skinning is linear in the rest vertices, so ``L_vtx`` and ``L_lap`` are exact
quadratics in the offsets. The optimizer runs Adam on that quadratic;
:func:`mia_objective` evaluates the same loss by explicit deformation.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ._binio import FormatError, Reader, check_magic, pack_array, read_bytes, write_bytes
from .dataset import EXPR, N_EXPR, N_PARAMS, PairedSample, coeff_matrix, target_matrix
from .flame import (POSE_DIM, FlameLiteModel, deform_params, params_to_rotations, rest_vertices,
                    skinning_matrices)
from .rig import anisotropy_penalty, update_gaussians

logger = logging.getLogger(__name__)

MM2 = 1e6  # m^2 -> mm^2


class MiaError(ValueError):
    pass


class MiaDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class AvatarOffsets:
    d_e: np.ndarray
    d_p: np.ndarray

    def __post_init__(self):
        self.d_e = np.asarray(self.d_e, dtype=np.float64)
        self.d_p = np.asarray(self.d_p, dtype=np.float64)
        if self.d_p.shape != (POSE_DIM,):
            raise MiaError(f"pose offset must have {POSE_DIM} entries")
        if not (np.all(np.isfinite(self.d_e)) and np.all(np.isfinite(self.d_p))):
            raise MiaError("offsets must be finite")

    @classmethod
    def zeros(cls, k_e=N_EXPR):
        return cls(np.zeros(k_e), np.zeros(POSE_DIM))

    def vector(self):
        return np.concatenate([self.d_e, self.d_p])

    @classmethod
    def from_vector(cls, v, k_e=N_EXPR):
        return cls(v[:k_e].copy(), v[k_e:].copy())


@dataclass(frozen=True)
class MiaConfig:
    lam2: float = 1e-2
    lam3: float = 1e-4
    lam4: float = 1e-3
    lr: float = 0.2
    iterations: int = 2000
    seed: int = 0

    def __post_init__(self):
        if min(self.lam2, self.lam3, self.lam4) < 0:
            raise MiaError("regularizer weights must be >= 0")
        if self.iterations < 0 or self.lr <= 0:
            raise MiaError("need iterations >= 0 and lr > 0")


@dataclass
class MiaReport:
    total: list = field(default_factory=list)
    components: dict = field(default_factory=lambda: {"vtx": [], "lap": [], "reg": [], "scale": []})
    best_total: list = field(default_factory=list)
    best_iteration: int = -1
    pre_train_rmse_mm: float = float("nan")
    post_train_rmse_mm: float = float("nan")
    pre_heldout_rmse_mm: Optional[float] = None
    post_heldout_rmse_mm: Optional[float] = None
    config: dict = field(default_factory=dict)
    diverged: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# --- problem assembly ------------------------------------------------------------

def _prepare(model: FlameLiteModel, mapper, frames):
    if not frames:
        raise MiaError("need at least one frame")
    if any(not isinstance(s, PairedSample) or s.target is None for s in frames):
        raise MiaError("every frame needs ground-truth parameters")
    sub = model.with_expr_dim(N_EXPR)
    pred = np.atleast_2d(mapper.predict(coeff_matrix([s.frame for s in frames])))
    if pred.shape[1] != N_PARAMS:
        raise MiaError(f"mapper must emit {N_PARAMS} parameters, got {pred.shape[1]}")
    gt = deform_params(sub, target_matrix(frames))
    return sub, pred, gt


def _offset_basis(sub):
    return np.concatenate([sub.expr_basis, sub.pose_basis], axis=2)  # (V, 3, n)


def _frame_jacobians(sub, pred):
    """Yields per-frame d(vertices)/d(dE, dP): A_v [Psi | Theta], shape (3V, n)."""
    B = _offset_basis(sub)
    rots = params_to_rotations(pred)
    for i in range(pred.shape[0]):
        A = skinning_matrices(sub, rots[i:i + 1])[0]
        yield np.einsum("vab,vbk->vak", A, B).reshape(3 * sub.n_vertices, -1)


def _lap_hessian(sub):
    L = sub.laplacian
    B = _offset_basis(sub)
    n = B.shape[2]
    LB = (L @ B.reshape(sub.n_vertices, 3 * n)).reshape(-1, n)
    return (MM2 / max(L.shape[0], 1)) * (LB.T @ LB)


def _scale_term(sub, cloud, offsets):
    if cloud is None or cloud.n == 0:
        return 0.0
    x = rest_vertices(sub, np.zeros((1, N_EXPR)), np.tile(np.eye(3), (1, 3, 1, 1)), offsets.d_e, offsets.d_p)[0]
    return anisotropy_penalty(update_gaussians(cloud, x, sub.faces))


@dataclass(eq=False)
class MiaProblem:
    """Quadratic form ``c0 + 2 g.x + x.H x`` (vertex + Laplacian part) plus the
    constant pieces of the regularizers."""

    H_vtx: np.ndarray
    g_vtx: np.ndarray
    c_vtx: float
    H_lap: np.ndarray
    expr_sq: float
    scale: float
    k_e: int

    @classmethod
    def build(cls, model, cloud, mapper, frames):
        sub, pred, gt = _prepare(model, mapper, frames)
        n = sub.n_expr + POSE_DIM
        H = np.zeros((n, n))
        g = np.zeros(n)
        c0 = 0.0
        r_all = (deform_params(sub, pred) - gt).reshape(len(frames), -1)
        for i, J in enumerate(_frame_jacobians(sub, pred)):
            H += J.T @ J
            g += J.T @ r_all[i]
            c0 += float(r_all[i] @ r_all[i])
        w = MM2 / (len(frames) * sub.n_vertices)
        expr_sq = float(np.mean(np.sum(pred[:, EXPR] ** 2, axis=1)))
        return cls(w * H, w * g, w * c0, _lap_hessian(sub), expr_sq,
                   _scale_term(sub, cloud, AvatarOffsets.zeros()), sub.n_expr)

    def evaluate(self, x, config: MiaConfig):
        Hx = self.H_vtx @ x
        vtx = self.c_vtx + 2.0 * (self.g_vtx @ x) + x @ Hx
        Lx = self.H_lap @ x
        lap = x @ Lx
        reg = self.expr_sq + x @ x
        comps = {"vtx": float(vtx), "lap": float(lap), "reg": float(reg), "scale": self.scale}
        grad = 2.0 * (self.g_vtx + Hx) + config.lam2 * 2.0 * Lx + config.lam3 * 2.0 * x
        return _total(comps, config), comps, grad


def _total(comps, config):
    return comps["vtx"] + config.lam2 * comps["lap"] + config.lam3 * comps["reg"] + config.lam4 * comps["scale"]


def mia_objective(model: FlameLiteModel, cloud, mapper, frames, offsets: AvatarOffsets,
                  config: MiaConfig = MiaConfig(), with_grad=True):
    """Loss by explicit deformation, with the analytic gradient through the
    deform Jacobian. Returns ``(total, components, grad or None)``."""
    sub, pred, gt = _prepare(model, mapper, frames)
    F, V = len(frames), sub.n_vertices
    meshes = deform_params(sub, pred, offsets.d_e, offsets.d_p)
    r = (meshes - gt).reshape(F, -1)
    w = MM2 / (F * V)
    disp = rest_vertices(sub, offsets.d_e[None], np.tile(np.eye(3), (1, 3, 1, 1)), None, offsets.d_p)[0] \
        - sub.template
    Ld = sub.laplacian @ disp
    nl = max(sub.laplacian.shape[0], 1)
    x = offsets.vector()
    comps = {
        "vtx": w * float(np.sum(r * r)),
        "lap": MM2 * float(np.sum(Ld * Ld)) / nl,
        "reg": float(np.mean(np.sum(pred[:, EXPR] ** 2, axis=1))) + float(x @ x),
        "scale": _scale_term(sub, cloud, offsets),
    }
    total = _total(comps, config)
    if not with_grad:
        return total, comps, None
    grad = np.zeros_like(x)
    for i, J in enumerate(_frame_jacobians(sub, pred)):
        grad += 2.0 * w * (J.T @ r[i])
    B = _offset_basis(sub).reshape(V, -1)
    gl = (2.0 * MM2 / nl) * (sub.laplacian.T @ Ld)           # dL_lap / d disp, (V, 3)
    grad += config.lam2 * (gl.reshape(-1) @ B.reshape(3 * V, -1))
    grad += config.lam3 * 2.0 * x
    return total, comps, grad


# --- fitting ---------------------------------------------------------------------

def _pooled_rmse(sub, pred, gt, offsets=None):
    d_e = d_p = None
    if offsets is not None:
        d_e, d_p = offsets.d_e, offsets.d_p
    d = deform_params(sub, pred, d_e, d_p) - gt
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))) * 1000.0)


def mia_eval(model, mapper, offsets: AvatarOffsets, frames) -> dict:
    """Pooled vertex RMSE (mm) over all frames, with and without offsets."""
    sub, pred, gt = _prepare(model, mapper, frames)
    return {"with": _pooled_rmse(sub, pred, gt, offsets), "without": _pooled_rmse(sub, pred, gt)}


def mia_fit(model: FlameLiteModel, cloud, mapper, frames, config: MiaConfig = MiaConfig(),
            heldout=None):
    """Adam over (dE, dP) with cosine step decay; returns the best-so-far
    offsets and a report. ``mapper`` is frozen (anything with ``predict``)."""
    problem = MiaProblem.build(model, cloud, mapper, frames)
    report = MiaReport(config=asdict(config))
    k = problem.k_e
    x = np.zeros(k + POSE_DIM)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best_x, best = x.copy(), np.inf
    for it in range(config.iterations + 1):
        total, comps, grad = problem.evaluate(x, config)
        if not (np.isfinite(total) and np.all(np.isfinite(grad))):
            report.diverged = True
            raise MiaDiverged(f"non-finite loss at iteration {it}", report)
        report.total.append(float(total))
        for key, val in comps.items():
            report.components[key].append(float(val))
        if total < best:
            best, best_x = total, x.copy()
            report.best_iteration = it
        report.best_total.append(float(best))
        if it == config.iterations:
            break
        t = it + 1
        lr = 0.5 * config.lr * (1.0 + math.cos(math.pi * it / max(config.iterations, 1)))
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    offsets = AvatarOffsets.from_vector(best_x, k)
    ev = mia_eval(model, mapper, offsets, frames)
    report.pre_train_rmse_mm, report.post_train_rmse_mm = ev["without"], ev["with"]
    if heldout:
        ev = mia_eval(model, mapper, offsets, heldout)
        report.pre_heldout_rmse_mm, report.post_heldout_rmse_mm = ev["without"], ev["with"]
    logger.info("mia: loss %.6g -> %.6g, train rmse %.4f -> %.4f mm", report.total[0], best,
                report.pre_train_rmse_mm, report.post_train_rmse_mm)
    return offsets, report


# --- MIA1 container -----------------------------------------------------------------

def offsets_to_bytes(offsets: AvatarOffsets) -> bytes:
    return b"MIA1" + struct.pack("<I", offsets.d_e.size) + pack_array(offsets.d_e, "f4") + pack_array(offsets.d_p, "f4")


def offsets_from_bytes(buf) -> AvatarOffsets:
    check_magic(buf, "MIA")
    r = Reader(buf, "offsets")
    r.pos = 4
    k = r.unpack("I")
    if k > 1 << 16:
        raise FormatError(f"implausible expression dimension {k}")
    d_e = r.array("f4", (k,)).astype(np.float64)
    d_p = r.array("f4", (POSE_DIM,)).astype(np.float64)
    r.finish()
    try:
        return AvatarOffsets(d_e, d_p)
    except MiaError as exc:
        raise FormatError(str(exc)) from None


def save_offsets(offsets, path):
    write_bytes(path, offsets_to_bytes(offsets))


def load_offsets(path) -> AvatarOffsets:
    return offsets_from_bytes(read_bytes(path))
