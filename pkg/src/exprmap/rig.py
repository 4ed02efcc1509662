"""Gaussians bound to mesh triangles.

Each Gaussian stores a triangle id, barycentric anchor and a pose local to
the triangle frame (centroid origin, first-edge x axis, normal z axis,
sqrt-area scale). Re-posing the mesh re-poses every Gaussian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._binio import FormatError, Reader, check_magic, pack_array, read_bytes, write_bytes
from .rotations import (matrix_to_quaternion, normalize_quaternion, quaternion_conjugate,
                        quaternion_multiply)

AREA_EPS = 1e-12
ANISOTROPY_KAPPA = 5.0


class RigError(ValueError):
    pass


class DegenerateFaceError(RigError):
    pass


@dataclass(eq=False)
class GaussianDynamics:
    """Per-frame attributes for N Gaussians (struct of arrays)."""

    positions: np.ndarray   # (N, 3) meters
    rotations: np.ndarray   # (N, 4) unit quaternions, w first
    scales: np.ndarray      # (N, 3) meters
    degenerate: Optional[np.ndarray] = None  # (N,) bool, set by update_gaussians

    def __len__(self):
        return self.positions.shape[0]


@dataclass(eq=False)
class GaussianCloud:
    face_ids: np.ndarray      # (N,) int
    bary: np.ndarray          # (N, 3)
    local_offset: np.ndarray  # (N, 3) in units of face scale
    local_rot: np.ndarray     # (N, 4)
    local_scale: np.ndarray   # (N, 3) in units of face scale
    opacity: np.ndarray       # (N,)
    sh: np.ndarray            # (N, 3 * (deg + 1)^2)
    sh_degree: int = 0
    rest: Optional[GaussianDynamics] = field(default=None, repr=False)

    def __post_init__(self):
        n = self.face_ids.shape[0]
        if self.sh.shape != (n, 3 * (self.sh_degree + 1) ** 2):
            raise RigError("SH array does not match sh_degree")
        if np.any(self.bary < -1e-9) or np.any(np.abs(self.bary.sum(axis=1) - 1) > 1e-6):
            raise RigError("barycentric coordinates must be nonnegative and sum to 1")
        if np.any(self.local_scale <= 0):
            raise RigError("local scales must be positive")
        if np.any((self.opacity < 0) | (self.opacity > 1)):
            raise RigError("opacity must lie in [0, 1]")

    def __len__(self):
        return self.face_ids.shape[0]

    @property
    def n(self):
        return self.face_ids.shape[0]


def _cross(a, b):
    return np.stack([a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
                     a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
                     a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]], axis=1)


def face_frames(vertices, faces):
    """Vectorized triangle frames: origins (F, 3), rotations (F, 3, 3), scales (F,), areas (F,)."""
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    e1 = v1 - v0
    e2 = v2 - v0
    n = _cross(e1, e2)
    nn = np.sqrt(np.sum(n * n, axis=1))
    area = 0.5 * nn
    ok = area >= AREA_EPS
    z = n / np.where(ok, nn, 1.0)[:, None]
    x = e1 / np.where(ok, np.sqrt(np.sum(e1 * e1, axis=1)), 1.0)[:, None]
    y = _cross(z, x)
    R = np.stack([x, y, z], axis=-1)
    if not np.all(ok):
        R[~ok] = np.eye(3)
    return (v0 + v1 + v2) / 3.0, R, np.sqrt(area), area


def face_frame(vertices, faces, face_id):
    origin, R, scale, area = face_frames(vertices, faces[face_id:face_id + 1])
    if area[0] < AREA_EPS:
        raise DegenerateFaceError(f"face {face_id} is degenerate (area {area[0]:.3g})")
    return origin[0], R[0], float(scale[0])


def _closest_point_bary(p, a, b, c):
    """Barycentric coordinates of the closest triangle point to p (vectorized).

    Ericson's region tests; inputs are (n, 3) arrays.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = p.shape[0]
    out = np.empty((n, 3))
    done = np.zeros(n, dtype=bool)

    def assign(mask, u, v, w):
        m = mask & ~done
        out[m, 0], out[m, 1], out[m, 2] = u[m], v[m], w[m]
        done[m] = True

    zero, one = np.zeros(n), np.ones(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), one, zero, zero)
        assign((d3 >= 0) & (d4 <= d3), zero, one, zero)
        assign((d6 >= 0) & (d5 <= d6), zero, zero, one)
        t = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - t, t, zero)
        t = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - t, zero, t)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), zero, 1 - t, t)
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        assign(np.ones(n, dtype=bool), 1 - v - w, v, w)
    return out


def _nearest_faces(points, centroids, chunk=512):
    """Nearest centroid per point; exact ties resolve to the lowest face id."""
    out = np.empty(points.shape[0], dtype=np.int64)
    c2 = np.einsum("ij,ij->i", centroids, centroids)
    for s in range(0, points.shape[0], chunk):
        p = points[s:s + chunk]
        d = np.sum((p[:, None, :] - centroids[None, :, :]) ** 2, axis=2) if centroids.shape[0] < 64 else \
            (np.einsum("ij,ij->i", p, p)[:, None] - 2 * p @ centroids.T + c2[None])
        best = np.argmin(d, axis=1)
        if centroids.shape[0] >= 64:
            # refine with exact distances among near-ties of the expanded form
            dmin = d[np.arange(p.shape[0]), best]
            for i in np.flatnonzero(np.sum(d <= dmin[:, None] + 1e-12, axis=1) > 1):
                cand = np.flatnonzero(d[i] <= dmin[i] + 1e-12)
                exact = np.sum((centroids[cand] - p[i]) ** 2, axis=1)
                best[i] = cand[np.argmin(exact)]
        out[s:s + chunk] = best
    return out


def bind_gaussians(world: GaussianDynamics, opacity, sh, vertices, faces, sh_degree=0) -> GaussianCloud:
    """Attach world-space Gaussians to the nearest triangle (by centroid)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.shape[0] == 0 or vertices.shape[0] == 0:
        raise RigError("cannot bind to an empty mesh")
    origins, R, scale, area = face_frames(vertices, faces)
    if np.any(area < AREA_EPS):
        raise DegenerateFaceError(f"{int(np.sum(area < AREA_EPS))} degenerate faces in binding mesh")
    pos = np.asarray(world.positions, dtype=np.float64)
    fid = _nearest_faces(pos, origins)
    tri = vertices[faces[fid]]
    bary = _closest_point_bary(pos, tri[:, 0], tri[:, 1], tri[:, 2])
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    anchor = np.einsum("ni,nik->nk", bary, tri)
    Rf = R[fid]
    s = scale[fid]
    local_offset = np.einsum("nka,nk->na", Rf, pos - anchor) / s[:, None]
    qf = matrix_to_quaternion(Rf)
    local_rot = normalize_quaternion(quaternion_multiply(quaternion_conjugate(qf),
                                                         np.asarray(world.rotations, dtype=np.float64)))
    local_scale = np.asarray(world.scales, dtype=np.float64) / s[:, None]
    rest = GaussianDynamics(pos.copy(), normalize_quaternion(np.asarray(world.rotations, float)),
                            np.asarray(world.scales, float).copy())
    return GaussianCloud(fid, bary, local_offset, local_rot, local_scale,
                         np.asarray(opacity, dtype=np.float64), np.asarray(sh, dtype=np.float64),
                         sh_degree, rest)


def update_gaussians(cloud: GaussianCloud, vertices, faces, previous: Optional[GaussianDynamics] = None,
                     frames=None) -> GaussianDynamics:
    """Re-pose every Gaussian from a deformed mesh.

    Gaussians on degenerate faces keep their ``previous`` attributes and are
    flagged in ``degenerate``; with no previous state that is an error.
    ``frames`` may carry precomputed :func:`face_frames` output.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    if cloud.n and cloud.face_ids.max() >= faces.shape[0]:
        raise RigError("cloud references faces the mesh does not have (topology mismatch)")
    origins, R, scale, area = face_frames(vertices, faces) if frames is None else frames
    fid = cloud.face_ids
    idx = faces[fid]
    b = cloud.bary
    anchor = b[:, 0:1] * vertices[idx[:, 0]] + b[:, 1:2] * vertices[idx[:, 1]] + b[:, 2:3] * vertices[idx[:, 2]]
    Rf = R[fid]
    s = scale[fid]
    off = cloud.local_offset * s[:, None]
    pos = anchor + Rf[:, :, 0] * off[:, 0:1] + Rf[:, :, 1] * off[:, 1:2] + Rf[:, :, 2] * off[:, 2:3]
    rot = normalize_quaternion(quaternion_multiply(matrix_to_quaternion(Rf), cloud.local_rot))
    scl = cloud.local_scale * s[:, None]
    bad = area[fid] < AREA_EPS
    if np.any(bad):
        if previous is None:
            raise DegenerateFaceError(f"{int(bad.sum())} Gaussians sit on degenerate faces and no previous state exists")
        pos[bad] = previous.positions[bad]
        rot[bad] = previous.rotations[bad]
        scl[bad] = previous.scales[bad]
    return GaussianDynamics(pos, rot, scl, bad)


def anisotropy_penalty(dynamics, kappa: float = ANISOTROPY_KAPPA) -> float:
    """Mean hinged squared excess of max/min axis ratio over ``kappa``."""
    scales = dynamics.scales if isinstance(dynamics, GaussianDynamics) else np.asarray(dynamics)
    if scales.shape[0] == 0:
        return 0.0
    ratio = scales.max(axis=1) / scales.min(axis=1)
    return float(np.mean(np.maximum(0.0, ratio - kappa) ** 2))


def synth_cloud(vertices, faces, n, seed, sh_degree=0) -> GaussianCloud:
    """Seeded Gaussians scattered just above random surface points, then bound."""
    rng = np.random.default_rng([seed, 0x65])
    vertices = np.asarray(vertices, dtype=np.float64)
    origins, R, scale, area = face_frames(vertices, faces)
    prob = area / area.sum()
    fid = rng.choice(faces.shape[0], size=n, p=prob)
    u = rng.dirichlet(np.ones(3), size=n)
    tri = vertices[faces[fid]]
    pos = np.einsum("ni,nik->nk", u, tri) + R[fid][:, :, 2] * (rng.normal(0, 0.1, n) * scale[fid])[:, None]
    q = normalize_quaternion(rng.standard_normal((n, 4)))
    scl = scale[fid][:, None] * rng.uniform(0.2, 0.8, (n, 3))
    opacity = rng.uniform(0.3, 1.0, n)
    sh = rng.normal(0.0, 0.3, (n, 3 * (sh_degree + 1) ** 2))
    # round to float32 so a save/load cycle reproduces the cloud exactly
    f32 = lambda a: np.asarray(a, np.float32).astype(np.float64)  # noqa: E731
    return bind_gaussians(GaussianDynamics(pos, q, scl), f32(opacity), f32(sh), vertices, faces, sh_degree)


# --- GSC1 container ----------------------------------------------------------------

def _record_dtype(sh_degree):
    k = 3 * (sh_degree + 1) ** 2
    return np.dtype([("face_id", "<u4"), ("bary", "<f4", 3), ("local_offset", "<f4", 3),
                     ("local_rot", "<f4", 4), ("local_scale", "<f4", 3), ("opacity", "<f4"),
                     ("sh", "<f4", k)])


def cloud_to_bytes(cloud: GaussianCloud) -> bytes:
    rec = np.empty(cloud.n, dtype=_record_dtype(cloud.sh_degree))
    rec["face_id"] = cloud.face_ids
    rec["bary"] = cloud.bary
    rec["local_offset"] = cloud.local_offset
    rec["local_rot"] = cloud.local_rot
    rec["local_scale"] = cloud.local_scale
    rec["opacity"] = cloud.opacity
    rec["sh"] = cloud.sh
    return b"GSC1" + struct.pack("<II", cloud.n, cloud.sh_degree) + rec.tobytes()


def cloud_from_bytes(buf) -> GaussianCloud:
    check_magic(buf, "GSC")
    r = Reader(buf, "GSC")
    r.pos = 4
    n, deg = r.unpack("II")
    if deg > 8:
        raise FormatError(f"implausible SH degree {deg}")
    dt = _record_dtype(deg)
    raw = r._take(n * dt.itemsize)
    r.finish()
    rec = np.frombuffer(raw, dtype=dt)
    try:
        return GaussianCloud(rec["face_id"].astype(np.int64), rec["bary"].astype(np.float64),
                             rec["local_offset"].astype(np.float64), rec["local_rot"].astype(np.float64),
                             rec["local_scale"].astype(np.float64), rec["opacity"].astype(np.float64),
                             rec["sh"].astype(np.float64).reshape(n, -1), deg)
    except RigError as exc:
        raise FormatError(str(exc)) from None


def save_cloud(cloud, path):
    write_bytes(path, cloud_to_bytes(cloud))


def load_cloud(path) -> GaussianCloud:
    return cloud_from_bytes(read_bytes(path))
