import numpy as np
import pytest

from exprmap._binio import FormatError, FormatVersionError
from exprmap.dataset import SyntheticOracle, coeff_matrix, split_subjects, subject_ids, synth_pairs, target_matrix
from exprmap.mappers.baselines import (MATRIX_OUT, RIDGE_OUT, MapperError, MatrixMapper, RidgeMapper,
                                       baseline_to_params, matrix_from_bytes, matrix_map, matrix_to_bytes,
                                       params_to_baseline, ridge_apply, ridge_fit, ridge_from_bytes,
                                       ridge_to_bytes)
from exprmap.mappers.epm import (EpmConfig, EpmError, EpmModel, _forward, epm_forward, epm_from_bytes,
                                 epm_grad_check, epm_to_bytes, epm_train, l1_error)


def f32(a):
    return np.asarray(a, np.float32).astype(np.float64)


# --- EPM architecture --------------------------------------------------------

def test_parameter_count_matches_architecture():
    cfg = EpmConfig()
    h = 128
    fc_in = 51 * h + h
    blocks = 4 * 2 * (h * h + h)
    bn = 9 * 2 * h
    out = h * 68 + 68
    assert cfg.n_parameters() == fc_in + blocks + bn + out
    assert EpmModel.initialize(cfg).n_parameters() == cfg.n_parameters()


def test_bad_config():
    with pytest.raises(EpmError):
        EpmConfig(hidden_dim=0)
    with pytest.raises(EpmError):
        EpmConfig(dropout_p=1.0)


def test_wrong_shape_rejected():
    m = EpmModel.initialize()
    t = dict(m.tensors)
    t["out.W"] = np.zeros((128, 67))
    with pytest.raises(EpmError):
        EpmModel(m.config, t)


def test_zero_output_layer(rng):
    m = EpmModel.initialize(seed=1)
    m.tensors["out.W"][:] = 0
    m.tensors["out.b"][:] = 0
    out = epm_forward(m, rng.uniform(size=(5, 51)), "eval")
    np.testing.assert_array_equal(out, np.zeros((5, 68)))


def test_eval_determinism(rng):
    m = EpmModel.initialize(seed=2)
    x = rng.uniform(size=51)
    a = epm_forward(m, x, "eval")
    b = epm_forward(m, x, "eval")
    assert a.shape == (68,)
    np.testing.assert_array_equal(a, b)


def test_batch_norm_statistics(rng):
    x = rng.uniform(size=(64, 51))
    m = EpmModel.initialize(seed=3, dtype=np.float64)
    _, stats = _forward(m, x, "train", dropout=False)
    for name, (xhat, _, _, var) in stats.items():
        # gamma = 1, beta = 0 at init, so the post-BN activation is xhat
        assert np.max(np.abs(xhat.mean(axis=0))) < 1e-5, name
        np.testing.assert_allclose(xhat.var(axis=0), var / (var + m.config.bn_eps), rtol=1e-10)
    # with a negligible epsilon the variance itself is 1
    m = EpmModel.initialize(EpmConfig(bn_eps=1e-9), seed=3, dtype=np.float64)
    _, stats = _forward(m, x, "train", dropout=False)
    for name, (xhat, *_rest) in stats.items():
        assert np.max(np.abs(xhat.var(axis=0) - 1)) < 1e-4, name


def test_residual_block_identity(rng):
    m = EpmModel.initialize(seed=4, dtype=np.float64)
    for i in range(4):
        for fc in ("fc1", "fc2"):
            m.tensors[f"b{i}.{fc}.W"][:] = 0
            m.tensors[f"b{i}.{fc}.b"][:] = 0
        m.tensors[f"b{i}.bn2.gamma"][:] = 0
        m.tensors[f"b{i}.bn2.beta"][:] = 0
    x = rng.uniform(size=(10, 51))
    T = m.tensors
    h = x @ T["in.W"] + T["in.b"]
    sc = T["in_bn.gamma"] / np.sqrt(T["in_bn.running_var"] + 1e-5)
    a = np.maximum((h - T["in_bn.running_mean"]) * sc + T["in_bn.beta"], 0)
    # blocks reduce to ReLU(a) = a, leaving only the output layer
    np.testing.assert_allclose(epm_forward(m, x, "eval"), a @ T["out.W"] + T["out.b"], atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_input_layer():
    m = EpmModel.initialize()
    m.tensors["in.W"][0, 0] = np.inf
    with pytest.raises(EpmError):
        epm_forward(m, np.ones(51), "eval")


# --- gradient check ----------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_grad_check_passes(seed):
    res = epm_grad_check(seed=seed)
    assert res.n_checked + res.n_skipped >= 200
    assert res.max_rel_error < 1e-3


def test_grad_check_detects_corruption():
    target = ("b1.fc1.W", 77)
    res = epm_grad_check(seed=0, corrupt=(target[0], target[1], 1.0), n_params=50)
    assert res.error_at(*target) > 1e-1


def test_grad_check_zero_inputs():
    assert epm_grad_check(seed=1, inputs=np.zeros((8, 51))).max_rel_error < 1e-3


# --- training ------------------------------------------------------------------

def _split(orc, n_frames, seed=0):
    samples = synth_pairs(orc, 10, n_frames)
    sp = split_subjects(samples, (8, 1, 1), seed=seed)
    return sp, sp.select(samples, "train"), sp.select(samples, "val")


def _arrays(s):
    return coeff_matrix(s), target_matrix(s)


def test_zero_epochs_returns_initialization():
    orc = SyntheticOracle.from_seed(0)
    _, tr, va = _split(orc, 20)
    (x, y), (vx, vy) = _arrays(tr), _arrays(va)
    model, rep = epm_train(x, y, subject_ids(tr), vx, vy, hyper={"epochs": 0})
    assert rep.train_loss == [] and rep.val_loss == []
    init = EpmModel.initialize(seed=0)
    assert np.array_equal(model.tensors["b0.fc1.W"], init.tensors["b0.fc1.W"])


def test_empty_sets_rejected():
    with pytest.raises(EpmError):
        epm_train(np.zeros((0, 51)), np.zeros((0, 68)), [], np.zeros((1, 51)), np.zeros((1, 68)))


def test_train_deterministic():
    orc = SyntheticOracle.from_seed(1)
    _, tr, va = _split(orc, 30)
    (x, y), (vx, vy) = _arrays(tr), _arrays(va)
    hp = {"epochs": 3, "seed": 5}
    a, ra = epm_train(x, y, subject_ids(tr), vx, vy, hyper=hp)
    b, rb = epm_train(x, y, subject_ids(tr), vx, vy, hyper=hp)
    assert epm_to_bytes(a) == epm_to_bytes(b)
    assert ra.to_json() == rb.to_json()


def test_divergence_aborts_with_report():
    from exprmap.mappers.epm import TrainingDiverged
    orc = SyntheticOracle.from_seed(1)
    _, tr, va = _split(orc, 30)
    (x, y), (vx, vy) = _arrays(tr), _arrays(va)
    y = y.copy()
    y[0, 0] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        epm_train(x, y, subject_ids(tr), vx, vy, hyper={"epochs": 2})
    assert info.value.report.diverged


@pytest.fixture(scope="module")
def linear_run():
    orc = SyntheticOracle.from_seed(3, alpha=0.0, bias_sigma=0.0)
    _, tr, va = _split(orc, 2000)
    (x, y), (vx, vy) = _arrays(tr), _arrays(va)
    # dropout only adds gradient noise when the target is affine
    model, rep = epm_train(x, y, subject_ids(tr), vx, vy, EpmConfig(dropout_p=0.0), {"epochs": 200, "lr": 1e-2})
    return orc, (x, y), (vx, vy), model, rep


def test_linear_data_reaches_noise_floor(linear_run):
    orc, (x, y), (vx, vy), model, rep = linear_run
    floor = float(np.mean(np.abs(vy - orc.expected(vx))))
    ridge = ridge_fit(x, y, lam=1.0)
    ridge_l1 = float(np.mean(np.abs(ridge_apply(ridge, vx) - vy)))
    val = l1_error(model, vx, vy)
    assert val < 2 * floor
    assert val < ridge_l1 + 1e-3


def test_linear_data_training_reduces_loss(linear_run):
    _, (x, y), _, model, rep = linear_run
    initial = float(np.mean(np.abs(y - np.median(y, axis=0))))
    assert l1_error(model, x, y) <= initial / 10
    assert all(np.isfinite(rep.train_loss)) and min(rep.val_loss) >= 0
    assert rep.val_loss[rep.best_epoch] == min(rep.val_loss)


# --- baselines -------------------------------------------------------------------

def test_matrix_zero_and_unit(rng):
    mm = MatrixMapper(rng.normal(size=(51, MATRIX_OUT)))
    np.testing.assert_array_equal(matrix_map(mm, np.zeros(51)), np.zeros(MATRIX_OUT))
    e = np.zeros(51)
    e[7] = 1
    np.testing.assert_array_equal(matrix_map(mm, e), mm.M[7])


def test_matrix_permutation(rng):
    perm = rng.permutation(51)
    M = np.zeros((51, MATRIX_OUT))
    M[perm, np.arange(51)] = 1
    x = rng.uniform(size=51)
    np.testing.assert_array_equal(matrix_map(MatrixMapper(M), x)[:51], x[perm])


def test_matrix_shape_errors():
    with pytest.raises(MapperError):
        MatrixMapper(np.zeros((51, 100)))
    with pytest.raises(MapperError):
        matrix_map(MatrixMapper(np.zeros((51, MATRIX_OUT))), np.zeros(50))


def test_ridge_hand_example():
    xs = np.array([[1.0], [2.0]])
    ys = np.array([[2.0], [4.0]])
    xm, ym = xs.mean(0), ys.mean(0)
    w = np.linalg.lstsq(xs - xm, ys - ym, rcond=None)[0]
    assert w[0, 0] == pytest.approx(2.0) and (ym - xm @ w)[0] == pytest.approx(0.0, abs=1e-12)


def test_ridge_single_feature_slice():
    # pad the 1-feature problem to 51 inputs with unused zero columns
    X = np.zeros((52, 51))
    X[:, 0] = np.tile([1.0, 2.0], 26)
    Y = 2 * X[:, :1]
    m = ridge_fit(X, Y, lam=0.0)
    assert m.W[0, 0] == pytest.approx(2.0, abs=1e-10)
    assert m.intercept[0] == pytest.approx(0.0, abs=1e-10)


def test_ridge_lambda_zero_is_ols(rng):
    X = rng.uniform(size=(300, 51))
    Y = rng.normal(size=(300, RIDGE_OUT))
    m = ridge_fit(X, Y, lam=0.0)
    Xa = np.hstack([X, np.ones((300, 1))])
    coef = np.linalg.lstsq(Xa, Y, rcond=None)[0]
    assert np.max(np.abs(m.W - coef[:51])) < 1e-8
    res_ols = Y - Xa @ coef
    assert np.max(np.abs((Y - ridge_apply(m, X)) - res_ols)) < 1e-8


def test_ridge_lambda_limit(rng):
    X = rng.uniform(size=(100, 51))
    Y = rng.normal(size=(100, 5))
    m = ridge_fit(X, Y, lam=1e12)
    assert np.max(np.abs(m.W)) < 1e-8
    np.testing.assert_allclose(m.intercept, Y.mean(axis=0), atol=1e-8)


def test_ridge_too_few_and_negative(rng):
    with pytest.raises(MapperError):
        ridge_fit(rng.uniform(size=(51, 51)), np.zeros((51, 3)))
    with pytest.raises(MapperError):
        ridge_fit(rng.uniform(size=(60, 51)), np.zeros((60, 3)), lam=-1)


def test_ridge_apply_cases(rng):
    c = rng.normal(size=RIDGE_OUT)
    m = RidgeMapper(np.zeros((51, RIDGE_OUT)), c)
    np.testing.assert_array_equal(ridge_apply(m, rng.uniform(size=51)), c)
    W = np.zeros((51, RIDGE_OUT))
    W[:, 10:61] = np.eye(51)
    x = rng.uniform(size=51)
    np.testing.assert_array_equal(ridge_apply(RidgeMapper(W, np.zeros(RIDGE_OUT)), x)[10:61], x)
    with pytest.raises(MapperError):
        ridge_apply(m, np.zeros(52))


def test_baseline_nesting(rng):
    orc = SyntheticOracle.from_seed(6)
    s = synth_pairs(orc, 2, 300)
    X, Y = coeff_matrix(s), params_to_baseline(target_matrix(s))
    ridge = ridge_fit(X, Y, lam=0.0)
    ridge_mse = np.mean((ridge_apply(ridge, X)[:, :MATRIX_OUT] - Y[:, :MATRIX_OUT]) ** 2)
    for _ in range(5):
        M = MatrixMapper(rng.normal(0, 0.1, (51, MATRIX_OUT)))
        assert ridge_mse <= np.mean((matrix_map(M, X) - Y[:, :MATRIX_OUT]) ** 2)


def test_baseline_parameter_conversion(small_pairs):
    q = target_matrix(small_pairs[:30])
    b = params_to_baseline(q)
    assert b.shape == (30, RIDGE_OUT)
    back = baseline_to_params(b)
    np.testing.assert_allclose(back[:, :50], q[:, :50])
    from exprmap.rotations import rot6d_to_matrix
    np.testing.assert_allclose(rot6d_to_matrix(back[:, 50:56]), rot6d_to_matrix(q[:, 50:56]), atol=1e-9)
    eyes = baseline_to_params(b[:, :MATRIX_OUT])
    np.testing.assert_array_equal(eyes[:, 56:], np.tile([1, 0, 0, 0, 1, 0], (30, 2)))
    with pytest.raises(MapperError):
        baseline_to_params(np.zeros((1, 60)))


# --- containers ---------------------------------------------------------------------

def test_epm_round_trip():
    m = EpmModel.initialize(seed=9)
    back = epm_from_bytes(epm_to_bytes(m))
    for k, v in m.tensors.items():
        assert back.tensors[k].tobytes() == v.tobytes()
    buf = epm_to_bytes(m)
    with pytest.raises(FormatError):
        epm_from_bytes(buf[:-1])
    with pytest.raises(FormatVersionError):
        epm_from_bytes(b"EPM7" + buf[4:])


def test_matrix_round_trip(rng):
    mm = MatrixMapper(f32(rng.normal(size=(51, MATRIX_OUT))))
    buf = matrix_to_bytes(mm)
    assert matrix_from_bytes(buf).M.tobytes() == mm.M.tobytes()
    with pytest.raises(FormatError):
        matrix_from_bytes(buf[:100])
    with pytest.raises(FormatVersionError):
        matrix_from_bytes(b"MAT2" + buf[4:])


def test_ridge_round_trip(rng):
    rm = RidgeMapper(f32(rng.normal(size=(51, RIDGE_OUT))), f32(rng.normal(size=RIDGE_OUT)), 0.5)
    buf = ridge_to_bytes(rm)
    back = ridge_from_bytes(buf)
    assert back.W.tobytes() == rm.W.tobytes() and back.intercept.tobytes() == rm.intercept.tobytes()
    assert back.lam == 0.5
    with pytest.raises(FormatError):
        ridge_from_bytes(buf[:-2])
    with pytest.raises(FormatVersionError):
        ridge_from_bytes(b"RDG2" + buf[4:])
