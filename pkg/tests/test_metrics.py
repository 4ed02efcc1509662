import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exprmap.dataset import target_matrix
from exprmap.flame import Mesh, deform_params
from exprmap.mappers.baselines import params_to_baseline
from exprmap.metrics import (MetricsError, error_colors, evaluate_methods, heatmap_export, param_rmse,
                             prediction_meshes, to_subspace, vertex_rmse)


@pytest.fixture(scope="module")
def test_set(oracle):
    from exprmap.dataset import synth_pairs
    return synth_pairs(oracle, 2, 25)


def test_param_rmse_identity_and_offset(small_pairs):
    q = target_matrix(small_pairs[:20])
    assert param_rmse(q, q) == 0
    sub = to_subspace(q)
    assert param_rmse(sub + 0.1, sub) == pytest.approx(0.1)


def test_eye_entries_excluded(small_pairs, rng):
    q = target_matrix(small_pairs[:20])
    p = q.copy()
    p[:, 56:] += rng.normal(size=(20, 12))
    assert param_rmse(p, q) == 0


def test_baseline_jaw_converted(small_pairs):
    q = target_matrix(small_pairs[:20])
    assert param_rmse(params_to_baseline(q), q) < 1e-9
    assert param_rmse(params_to_baseline(q)[:, :103], q) < 1e-9


def test_unconvertible_width():
    with pytest.raises(MetricsError):
        to_subspace(np.zeros((1, 60)))


def test_vertex_rmse_cases(rng):
    v = rng.normal(size=(100, 3))
    assert vertex_rmse(v, v) == 0
    assert vertex_rmse(v + [1e-3, 0, 0], v) == pytest.approx(1.0)
    w = v.copy()
    w[:50, 1] += 2e-3
    assert vertex_rmse(w, v) == pytest.approx(np.sqrt(2))
    with pytest.raises(MetricsError):
        vertex_rmse(v, v[:-1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-5, 5, allow_nan=False))
def test_vertex_rmse_symmetry_and_scale(seed, s):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 30, 3))
    assert vertex_rmse(a, b) == pytest.approx(vertex_rmse(b, a), rel=1e-12)
    assert vertex_rmse(b + s * (a - b), b) == pytest.approx(abs(s) * vertex_rmse(a, b), rel=1e-9, abs=1e-12)


def test_colormap_endpoints():
    np.testing.assert_array_equal(error_colors(np.zeros(4)), np.tile([0, 0, 255], (4, 1)))
    c = error_colors(np.array([0.0, 0.5, 2.0]))
    np.testing.assert_array_equal(c[2], [255, 0, 0])
    np.testing.assert_array_equal(c[0], [0, 0, 255])


def test_heatmap_files(tmp_path, small_model, rng):
    err = rng.uniform(0, 3, small_model.n_vertices)
    ply, csv = heatmap_export(Mesh(small_model.template, small_model.faces), err, tmp_path / "h.ply")
    lines = open(ply).read().splitlines()
    assert lines[0] == "ply" and f"element vertex {small_model.n_vertices}" in lines
    rows = open(csv).read().splitlines()
    assert rows[0] == "vertex_id,error_mm" and len(rows) - 1 == small_model.n_vertices
    k = int(np.argmax(err))
    body = lines[lines.index("end_header") + 1:]
    assert body[k].split()[3:] == ["255", "0", "0"]


def test_perfect_mapper_row(test_set, small_model):
    gt = target_matrix(test_set)
    lookup = {s.frame.coeffs.tobytes(): s.target.to_vector() for s in test_set}
    perfect = lambda x: np.stack([lookup[r.tobytes()] for r in np.atleast_2d(x)])  # noqa: E731
    rep = evaluate_methods([("epm", perfect)], test_set, small_model)
    row = rep.row("epm")
    assert row.param_rmse == 0 and row.vertex_rmse_mm == 0
    assert rep.dataset["n_frames"] == len(gt)


def test_zero_mapper_matches_rest_displacement(test_set, small_model):
    zero = np.zeros(68)
    zero[50:] = np.tile([1, 0, 0, 0, 1, 0], 3)
    rep = evaluate_methods([("zero", lambda x: np.tile(zero, (len(x), 1)))], test_set, small_model)
    # independent recomputation: per-frame RMS distance of GT meshes (eyes at rest) from the template
    q = target_matrix(test_set)
    q[:, 56:] = np.tile([1, 0, 0, 0, 1, 0], 2)
    d = deform_params(small_model, q) - small_model.template
    expected = np.mean(np.sqrt(np.mean(np.sum(d * d, axis=-1), axis=1))) * 1000
    assert rep.row("zero").vertex_rmse_mm == pytest.approx(expected, rel=1e-9)


def test_table_order_and_outputs(test_set, small_model):
    gt = {s.frame.coeffs.tobytes(): s.target.to_vector() for s in test_set}
    f = lambda x: np.stack([gt[r.tobytes()] for r in x])  # noqa: E731
    rep = evaluate_methods([("epm", f), ("linear", lambda x: params_to_baseline(f(x))),
                            ("matrix", lambda x: params_to_baseline(f(x))[:, :103])], test_set, small_model)
    assert [m.name for m in rep.methods] == ["matrix", "linear", "epm"]
    md = rep.to_markdown().splitlines()
    assert md[0] == "| Method | Param Error ↓ | Vertex Error (mm) ↓ |"
    assert [r.split("|")[1].strip() for r in md[2:]] == ["Matrix", "Linear", "EPM"]
    d = json.loads(rep.to_json())
    assert len(d["methods"][0]["vertex_frames"]) == len(test_set)


def test_empty_test_set(small_model):
    with pytest.raises(MetricsError):
        evaluate_methods([("epm", lambda x: x)], [], small_model)


def test_baseline_meshes_use_wide_basis(small_model, test_set):
    q = target_matrix(test_set[:3])
    b = params_to_baseline(q)
    b[:, 60:100] = 0.5   # entries beyond the model basis are zero-padded columns
    np.testing.assert_allclose(prediction_meshes(small_model, b), prediction_meshes(small_model, q), atol=1e-12)
