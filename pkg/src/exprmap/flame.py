"""A lite parametric head: expression and pose-corrective blendshapes with
linear blend skinning over three joints (jaw, left eye, right eye).

Everything is in meters. Blendshape tensors are stored ``(V, 3, K)``.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull

from ._binio import FormatError, Reader, check_magic, pack_array, read_bytes, write_bytes
from .dataset import EXPR, EYE_L, EYE_R, JAW, N_PARAMS, ExpressionParams
from .rotations import rot6d_jacobian, rot6d_to_matrix

logger = logging.getLogger(__name__)

N_JOINTS = 3
POSE_DIM = 9 * N_JOINTS
JOINT_NAMES = ("jaw", "eye_l", "eye_r")


class ModelError(ValueError):
    pass


@dataclass(eq=False)
class FlameLiteModel:
    template: np.ndarray      # (V, 3)
    faces: np.ndarray         # (F, 3) int
    expr_basis: np.ndarray    # (V, 3, K_e)
    pose_basis: np.ndarray    # (V, 3, 27)
    joints: np.ndarray        # (3, 3)
    skin_weights: np.ndarray  # (V, 3)

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.expr_basis = np.asarray(self.expr_basis, dtype=np.float64)
        self.pose_basis = np.asarray(self.pose_basis, dtype=np.float64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        V = self.template.shape[0]
        if self.template.shape != (V, 3):
            raise ModelError("template must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ModelError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise ModelError("faces index vertices out of range")
        if self.expr_basis.ndim != 3 or self.expr_basis.shape[:2] != (V, 3):
            raise ModelError("expression basis must be (V, 3, K_e)")
        if self.pose_basis.shape != (V, 3, POSE_DIM):
            raise ModelError(f"pose basis must be (V, 3, {POSE_DIM})")
        if self.joints.shape != (N_JOINTS, 3):
            raise ModelError("joints must be (3, 3)")
        w = self.skin_weights
        if w.shape != (V, N_JOINTS):
            raise ModelError("skin weights must be (V, 3)")
        if np.any(w < 0) or np.any(w > 1) or np.any(w.sum(axis=1) > 1 + 1e-9):
            raise ModelError("skin weights must lie in [0, 1] with row sums <= 1")
        for name in ("template", "expr_basis", "pose_basis", "joints"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"{name} has non-finite entries")

    @property
    def n_vertices(self):
        return self.template.shape[0]

    @property
    def n_expr(self):
        return self.expr_basis.shape[2]

    @cached_property
    def expr_flat(self):
        return np.ascontiguousarray(self.expr_basis.reshape(-1, self.n_expr))

    @cached_property
    def pose_flat(self):
        return np.ascontiguousarray(self.pose_basis.reshape(-1, POSE_DIM))

    @cached_property
    def root_weights(self):
        return 1.0 - self.skin_weights.sum(axis=1)

    @cached_property
    def laplacian(self):
        return uniform_laplacian(self.faces, self.n_vertices)

    def with_expr_dim(self, k: int) -> "FlameLiteModel":
        """Truncate the expression basis to ``k`` columns, or zero-pad it."""
        cur = self.n_expr
        if k == cur:
            return self
        if k < cur:
            basis = self.expr_basis[:, :, :k]
        else:
            basis = np.concatenate([self.expr_basis, np.zeros((self.n_vertices, 3, k - cur))], axis=2)
        return FlameLiteModel(self.template, self.faces, basis, self.pose_basis, self.joints, self.skin_weights)


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray


# --- pose handling -------------------------------------------------------------

def params_to_rotations(q) -> np.ndarray:
    """(..., 68) parameter vectors -> (..., 3, 3, 3) joint rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    return np.stack([rot6d_to_matrix(q[..., s]) for s in (JAW, EYE_L, EYE_R)], axis=-3)


def pose_feature(rots) -> np.ndarray:
    """(R_j - I) flattened row-major per joint: (..., 3, 3, 3) -> (..., 27)."""
    rots = np.asarray(rots)
    return (rots - np.eye(3)).reshape(rots.shape[:-3] + (POSE_DIM,))


def _split_q(q):
    if isinstance(q, ExpressionParams):
        v = q.to_vector()
    else:
        v = np.asarray(q, dtype=np.float64)
    if v.shape[-1] != N_PARAMS:
        raise ModelError(f"expected {N_PARAMS} parameters, got {v.shape[-1]}")
    return v[..., EXPR], params_to_rotations(v)


def rest_vertices(model, expr, rots, d_e=None, d_p=None) -> np.ndarray:
    """Blendshape-corrected rest pose, batched: expr (n, K_e), rots (n, 3, 3, 3)."""
    expr = np.atleast_2d(expr)
    if expr.shape[-1] != model.n_expr:
        raise ModelError(f"expression dimension {expr.shape[-1]} does not match basis ({model.n_expr})")
    p = pose_feature(rots).reshape(expr.shape[0], POSE_DIM)
    if d_e is not None:
        expr = expr + np.asarray(d_e)
    if d_p is not None:
        if np.shape(d_p) != (POSE_DIM,):
            raise ModelError(f"pose offset must have {POSE_DIM} entries")
        p = p + np.asarray(d_p)
    flat = expr @ model.expr_flat.T + p @ model.pose_flat.T
    return model.template + flat.reshape(expr.shape[0], model.n_vertices, 3)


def skin(model, x, rots) -> np.ndarray:
    """Linear blend skinning of rest vertices x (n, V, 3) with rots (n, 3, 3, 3).

    Written as ``x + sum_j w_j (R_j - I)(x - J_j)``, which equals the usual
    weighted blend with the root weight ``1 - sum_j w_j`` and is exact at rest.
    """
    w = model.skin_weights
    out = x.copy()
    delta = rots - np.eye(3)                                   # (n, 3, 3, 3)
    active = [j for j in range(N_JOINTS) if np.any(delta[:, j])]
    if not active:
        return out
    # one product for all joints: x D_j^T, then subtract J_j D_j^T
    Dt = np.concatenate([np.swapaxes(delta[:, j], -1, -2) for j in active], axis=-1)  # (n, 3, 3k)
    moved = x @ Dt
    for c, j in enumerate(active):
        shift = model.joints[j] @ np.swapaxes(delta[:, j], -1, -2)                      # (n, 3)
        out += w[None, :, j, None] * (moved[..., 3 * c:3 * c + 3] - shift[:, None, :])
    return out


def deform_batch(model, expr, rots, d_e=None, d_p=None) -> np.ndarray:
    rots = np.asarray(rots, dtype=np.float64).reshape(-1, N_JOINTS, 3, 3)
    return skin(model, rest_vertices(model, expr, rots, d_e, d_p), rots)


def deform_params(model, q, d_e=None, d_p=None) -> np.ndarray:
    """Batch deform from (n, 68) parameter vectors; returns (n, V, 3)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    expr, rots = _split_q(q)
    return deform_batch(model, expr, rots, d_e, d_p)


def deform(model: FlameLiteModel, q, d_e=None, d_p=None) -> Mesh:
    expr, rots = _split_q(q)
    verts = deform_batch(model, expr[None], rots[None], d_e, d_p)[0]
    return Mesh(verts, model.faces)


def skinning_matrices(model, rots) -> np.ndarray:
    """Per-vertex linear part of LBS: sum_j w_j R_j + w_root I, shape (n, V, 3, 3)."""
    rots = np.asarray(rots).reshape(-1, N_JOINTS, 3, 3)
    A = np.einsum("vj,njab->nvab", model.skin_weights, rots - np.eye(3))
    A += np.eye(3)
    return A


def deform_jacobian(model: FlameLiteModel, q, d_e=None, d_p=None) -> dict:
    """Analytic Jacobian of the flattened deformed vertices (3V) with respect
    to expression, the three 6D rotations (18), and both offsets."""
    v = q.to_vector() if isinstance(q, ExpressionParams) else np.asarray(q, dtype=np.float64)
    expr, rots = _split_q(v)
    V = model.n_vertices
    x = rest_vertices(model, expr[None], rots[None], d_e, d_p)[0]
    A = skinning_matrices(model, rots[None])[0]                        # (V, 3, 3)
    d_expr = np.einsum("vab,vbk->vak", A, model.expr_basis).reshape(3 * V, -1)
    d_pose = np.einsum("vab,vbk->vak", A, model.pose_basis).reshape(3 * V, POSE_DIM)
    d_rot6 = np.zeros((3 * V, 6 * N_JOINTS))
    for j, block in enumerate((JAW, EYE_L, EYE_R)):
        # dv/dR_j[a, b] = w_j * e_a * (x - J_j)[b] + A * Theta[:, 9j + 3a + b]
        dR = d_pose[:, 9 * j:9 * j + 9].copy().reshape(V, 3, 9)
        rel = x - model.joints[j]
        w = model.skin_weights[:, j]
        for a in range(3):
            for b in range(3):
                dR[:, a, 3 * a + b] += w * rel[:, b]
        d_rot6[:, 6 * j:6 * j + 6] = dR.reshape(3 * V, 9) @ rot6d_jacobian(v[block])
    return {"expr": d_expr, "rot6d": d_rot6, "d_e": d_expr.copy(), "d_p": d_pose}


# --- regularizers ----------------------------------------------------------------

def uniform_laplacian(faces, n_vertices) -> sp.csr_matrix:
    """Rows of I - D^-1 Adj for non-isolated vertices (isolated rows dropped)."""
    faces = np.asarray(faces)
    i = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2], faces[:, 1], faces[:, 2], faces[:, 0]])
    j = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0], faces[:, 0], faces[:, 1], faces[:, 2]])
    adj = sp.coo_matrix((np.ones(i.size), (i, j)), shape=(n_vertices, n_vertices)).tocsr()
    adj.data[:] = 1.0  # collapse duplicate edges
    deg = np.asarray(adj.sum(axis=1)).ravel()
    keep = np.flatnonzero(deg > 0)
    if keep.size < n_vertices:
        logger.warning("Laplacian: %d isolated vertices excluded", n_vertices - keep.size)
    inv = sp.diags(1.0 / deg[keep])
    L = sp.eye(n_vertices, format="csr")[keep] - inv @ adj[keep]
    return L.tocsr()


def laplacian_energy(mesh, L=None) -> float:
    """Mean over vertices of the squared distance to the neighbour average."""
    verts = mesh.vertices if isinstance(mesh, Mesh) else np.asarray(mesh)
    if L is None:
        L = uniform_laplacian(mesh.faces, verts.shape[0])
    d = L @ verts
    return float(np.sum(d * d) / max(L.shape[0], 1))


def laplacian_energy_grad(verts, L) -> np.ndarray:
    return (2.0 / max(L.shape[0], 1)) * (L.T @ (L @ verts))


def flame_param_reg(q, d_e=None, d_p=None) -> float:
    """||e||^2 + ||dE||^2 + ||dP||^2; rotations are not penalized."""
    if isinstance(q, ExpressionParams):
        e = q.expr
    else:
        q = np.asarray(q, dtype=np.float64)
        e = q[EXPR] if q.shape == (N_PARAMS,) else q
    total = float(e @ e)
    if d_e is not None:
        total += float(np.dot(d_e, d_e))
    if d_p is not None:
        total += float(np.dot(d_p, d_p))
    return total


# --- synthetic model -------------------------------------------------------------

HEAD_AXES = np.array([0.075, 0.095, 0.085])
DEFAULT_JOINTS = np.array([
    [0.0, -0.025, 0.0],      # jaw
    [0.032, 0.025, 0.058],   # left eye
    [-0.032, 0.025, 0.058],  # right eye
])


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], axis=1)


def _hull_faces(points):
    hull = ConvexHull(points)
    faces = hull.simplices.astype(np.int64)
    centroid = points.mean(axis=0)
    tri = points[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("fk,fk->f", normal, tri.mean(axis=1) - centroid) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    # canonical order: rotate so the smallest index leads, then sort rows
    lead = np.argmin(faces, axis=1)
    faces = np.stack([np.roll(f, -k) for f, k in zip(faces, lead)])
    return faces[np.lexsort(faces.T[::-1])]


def _bump_field(rng, verts, normals, centres, amp, radius_range):
    field = np.zeros_like(verts)
    for c in centres:
        r = rng.uniform(*radius_range)
        direction = normals[c] + 0.6 * rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        d2 = np.sum((verts - verts[c]) ** 2, axis=1)
        field += rng.standard_normal() * amp * np.exp(-d2 / (2 * r * r))[:, None] * direction
    return field


def synth_model(seed: int, V: int = 1000, K_e: int = 50) -> FlameLiteModel:
    """Seeded head-sized ellipsoid model.

    Basis column ``k`` depends only on ``(seed, k)``, so models built with
    different ``K_e`` share their leading columns. Values are float32-exact.
    """
    if V < 4:
        raise ModelError("need at least 4 vertices")
    unit = _fibonacci_sphere(V)
    verts = unit * HEAD_AXES
    faces = _hull_faces(verts)
    normals = unit / HEAD_AXES
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    front = np.flatnonzero(verts[:, 2] > 0.2 * HEAD_AXES[2])
    if front.size == 0:
        front = np.arange(V)

    expr = np.zeros((V, 3, K_e))
    for k in range(K_e):
        rng = np.random.default_rng([seed, 0xE4, k])
        centres = rng.choice(front, size=min(3, front.size), replace=False)
        expr[:, :, k] = _bump_field(rng, verts, normals, centres, 0.003 / (1.0 + k / 20.0), (0.015, 0.04))

    pose = np.zeros((V, 3, POSE_DIM))
    for col in range(POSE_DIM):
        rng = np.random.default_rng([seed, 0x90, col])
        j = col // 9
        near = np.argsort(np.sum((verts - DEFAULT_JOINTS[j]) ** 2, axis=1))[:max(1, V // 20)]
        centres = rng.choice(near, size=min(2, near.size), replace=False)
        pose[:, :, col] = _bump_field(rng, verts, normals, centres, 0.0015, (0.01, 0.03))

    def sigmoid(t):
        return 1.0 / (1.0 + np.exp(-t))

    w = np.zeros((V, N_JOINTS))
    w[:, 0] = 0.95 * sigmoid((-0.01 - verts[:, 1]) / 0.008) * sigmoid((verts[:, 2] + 0.02) / 0.012)
    for j in (1, 2):
        d2 = np.sum((verts - DEFAULT_JOINTS[j]) ** 2, axis=1)
        w[:, j] = 0.9 * np.exp(-d2 / (2 * 0.015 ** 2))
    w = _f32(w)
    s = w.sum(axis=1)
    over = s > 1.0
    w[over] = _f32(w[over] / s[over, None] * (1.0 - 1e-6))
    return FlameLiteModel(_f32(verts), faces, _f32(expr), _f32(pose), _f32(DEFAULT_JOINTS), w)


# --- FLM1 container ----------------------------------------------------------------

def model_to_bytes(model: FlameLiteModel) -> bytes:
    V, F, K = model.n_vertices, model.faces.shape[0], model.n_expr
    return b"".join([
        b"FLM1", struct.pack("<III", V, F, K),
        pack_array(model.template, "f4"), pack_array(model.faces, "u4"),
        pack_array(model.expr_basis, "f4"), pack_array(model.pose_basis, "f4"),
        pack_array(model.joints, "f4"), pack_array(model.skin_weights, "f4"),
    ])


def model_from_bytes(buf) -> FlameLiteModel:
    check_magic(buf, "FLM")
    r = Reader(buf, "FLM")
    r.pos = 4
    V, F, K = r.unpack("III")
    arrays = dict(
        template=r.array("f4", (V, 3)), faces=r.array("u4", (F, 3)),
        expr_basis=r.array("f4", (V, 3, K)), pose_basis=r.array("f4", (V, 3, POSE_DIM)),
        joints=r.array("f4", (N_JOINTS, 3)), skin_weights=r.array("f4", (V, N_JOINTS)),
    )
    r.finish()
    try:
        return FlameLiteModel(**arrays)
    except ModelError as exc:
        raise FormatError(str(exc)) from None


def save_model(model, path):
    write_bytes(path, model_to_bytes(model))


def load_model(path) -> FlameLiteModel:
    return model_from_bytes(read_bytes(path))
