"""Evaluation: parameter RMSE on the shared subspace, vertex RMSE in mm,
per-vertex heatmaps and method comparison tables."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import (EXPR, EYE_L, EYE_R, IDENTITY_6D, JAW, N_EXPR, N_PARAMS, ExpressionParams, PairedSample,
                      coeff_matrix, target_matrix)
from .flame import FlameLiteModel, Mesh, deform_batch, params_to_rotations
from .mappers.baselines import BASELINE_EXPR, baseline_to_params
from .rotations import axis_angle_to_matrix, matrix_to_rot6d

SUBSPACE = "expr[0:50] + jaw 6D"
SUBSPACE_DIM = N_EXPR + 6


class MetricsError(ValueError):
    pass


def to_subspace(x) -> np.ndarray:
    """Map prediction arrays of width 56, 68, 103 or 109 onto the 56-value
    comparison subspace. 6D jaws are compared as emitted; baseline
    axis-angle jaws go through Rodrigues first."""
    if isinstance(x, ExpressionParams):
        x = x.to_vector()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    width = x.shape[1]
    out = np.empty((x.shape[0], SUBSPACE_DIM))
    out[:, :N_EXPR] = x[:, :N_EXPR]
    if width in (SUBSPACE_DIM, N_PARAMS):
        out[:, N_EXPR:] = x[:, JAW]
    elif width in (BASELINE_EXPR + 3, BASELINE_EXPR + 9):
        jaw = x[:, BASELINE_EXPR:BASELINE_EXPR + 3]
        out[:, N_EXPR:] = matrix_to_rot6d(axis_angle_to_matrix(jaw))
    else:
        raise MetricsError(f"cannot convert width-{width} parameters to the comparison subspace")
    return out


def param_rmse_frames(pred, gt) -> np.ndarray:
    a, b = to_subspace(pred), to_subspace(gt)
    if a.shape != b.shape:
        raise MetricsError(f"frame count mismatch: {a.shape[0]} vs {b.shape[0]}")
    return np.sqrt(np.mean((a - b) ** 2, axis=1))


def param_rmse(pred, gt) -> float:
    """Per-frame RMSE over the subspace, averaged over frames."""
    return float(np.mean(param_rmse_frames(pred, gt)))


def _verts(m):
    return m.vertices if isinstance(m, Mesh) else np.asarray(m, dtype=np.float64)


def vertex_errors_mm(a, b) -> np.ndarray:
    va, vb = _verts(a), _verts(b)
    if va.shape != vb.shape:
        raise MetricsError(f"vertex count mismatch: {va.shape} vs {vb.shape}")
    return np.linalg.norm(va - vb, axis=-1) * 1000.0


def vertex_rmse(a, b) -> float:
    va, vb = _verts(a), _verts(b)
    if va.shape != vb.shape:
        raise MetricsError(f"vertex count mismatch: {va.shape} vs {vb.shape}")
    d = va - vb
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))) * 1000.0)


def vertex_rmse_frames(a, b) -> np.ndarray:
    """(n, V, 3) batches -> per-frame RMSE in mm."""
    d = np.asarray(a) - np.asarray(b)
    return np.sqrt(np.mean(np.sum(d * d, axis=-1), axis=-1)) * 1000.0


# --- heatmaps --------------------------------------------------------------------

def error_colors(errors) -> np.ndarray:
    """Linear blue -> red over [0, max]: (255 t, 0, 255 (1 - t))."""
    e = np.asarray(errors, dtype=np.float64)
    top = e.max() if e.size else 0.0
    t = e / top if top > 0 else np.zeros_like(e)
    rgb = np.stack([255.0 * t, np.zeros_like(t), 255.0 * (1.0 - t)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def heatmap_export(mesh: Mesh, per_vertex_error, path, csv_path=None):
    """Write an ASCII PLY with per-vertex colors and a ``vertex_id,error_mm`` CSV
    next to it (``<path>.csv`` unless given). Returns both paths."""
    verts = _verts(mesh)
    err = np.asarray(per_vertex_error, dtype=np.float64)
    if err.shape != (verts.shape[0],):
        raise MetricsError(f"expected {verts.shape[0]} per-vertex errors, got {err.shape}")
    colors = error_colors(err)
    faces = np.asarray(mesh.faces)
    lines = ["ply", "format ascii 1.0", f"element vertex {verts.shape[0]}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue",
             f"element face {faces.shape[0]}", "property list uchar int vertex_indices", "end_header"]
    for (x, y, z), (r, g, b) in zip(verts, colors):
        lines.append(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}")
    for f in faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    csv_path = csv_path or f"{path}.csv"
    with open(csv_path, "w", newline="\n") as fh:
        fh.write("vertex_id,error_mm\n")
        for i, e in enumerate(err):
            fh.write(f"{i},{e:.9g}\n")
    return str(path), str(csv_path)


# --- method comparison ------------------------------------------------------------

TABLE_ORDER = ("matrix", "linear", "epm")
DISPLAY_NAMES = {"matrix": "Matrix", "linear": "Linear", "epm": "EPM"}


@dataclass
class MethodResult:
    name: str
    param_rmse: float
    vertex_rmse_mm: float
    param_frames: list = field(default_factory=list)
    vertex_frames: list = field(default_factory=list)


@dataclass
class EvalReport:
    methods: list
    dataset: dict
    subspace: str = SUBSPACE

    def row(self, name) -> MethodResult:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self, series=True):
        out = {"dataset": self.dataset, "subspace": self.subspace, "methods": []}
        for m in self.methods:
            d = {"name": m.name, "param_rmse": m.param_rmse, "vertex_rmse_mm": m.vertex_rmse_mm}
            if series:
                d["param_frames"] = m.param_frames
                d["vertex_frames"] = m.vertex_frames
            out["methods"].append(d)
        return out

    def to_json(self, series=True) -> str:
        return json.dumps(self.to_dict(series), indent=2, sort_keys=True)

    def to_markdown(self) -> str:
        rows = ["| Method | Param Error ↓ | Vertex Error (mm) ↓ |", "|---|---|---|"]
        for m in self.methods:
            rows.append(f"| {DISPLAY_NAMES.get(m.name, m.name)} | {m.param_rmse:.3f} | {m.vertex_rmse_mm:.3f} |")
        return "\n".join(rows) + "\n"


def _predict(mapper, x):
    if hasattr(mapper, "predict"):
        return np.atleast_2d(mapper.predict(x))
    return np.atleast_2d(mapper(x))


def prediction_meshes(model: FlameLiteModel, pred) -> np.ndarray:
    """Meshes for raw predictions, each with its own expression dimensionality.
    Eye rotations are held at identity so only the compared subspace moves."""
    pred = np.atleast_2d(pred)
    width = pred.shape[1]
    if width == N_PARAMS:
        q, expr = pred.copy(), pred[:, EXPR]
    elif width in (BASELINE_EXPR + 3, BASELINE_EXPR + 9):
        q, expr = baseline_to_params(pred), pred[:, :BASELINE_EXPR]
    else:
        raise MetricsError(f"cannot deform width-{width} predictions")
    q[:, EYE_L] = IDENTITY_6D
    q[:, EYE_R] = IDENTITY_6D
    return deform_batch(model.with_expr_dim(expr.shape[1]), expr, params_to_rotations(q))


def evaluate_methods(methods, test_set, model: FlameLiteModel, batch=512) -> EvalReport:
    """``methods`` is a list of ``(name, mapper)``; rows follow the table order
    (matrix, linear, epm) with any other names appended as given."""
    if not test_set:
        raise MetricsError("empty test set")
    samples = [s for s in test_set if isinstance(s, PairedSample) and s.target is not None]
    if len(samples) != len(test_set):
        raise MetricsError("every test sample needs ground-truth parameters")
    X = coeff_matrix([s.frame for s in samples])
    Q = target_matrix(samples)
    gt_meshes = prediction_meshes(model, Q)
    rank = {n: i for i, n in enumerate(TABLE_ORDER)}
    ordered = sorted(enumerate(methods), key=lambda im: (rank.get(im[1][0], len(rank)), im[0]))
    results = []
    for _, (name, mapper) in ordered:
        pred = _predict(mapper, X)
        pf = param_rmse_frames(pred, Q)
        vf = np.concatenate([vertex_rmse_frames(prediction_meshes(model, pred[i:i + batch]),
                                                gt_meshes[i:i + batch])
                             for i in range(0, len(samples), batch)])
        results.append(MethodResult(name, float(pf.mean()), float(vf.mean()), pf.tolist(), vf.tolist()))
    subjects = sorted({s.frame.subject_id for s in samples})
    return EvalReport(results, {"n_frames": len(samples), "subjects": subjects})
