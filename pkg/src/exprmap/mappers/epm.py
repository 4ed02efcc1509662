"""Residual MLP expression mapper (51 blendshapes -> 68 parameters).

Layout::

    FC(51->128) BN ReLU
    4 x [ FC BN ReLU Dropout FC BN (+skip) ReLU ]
    FC(128->68)

Forward and backward passes are written out by hand in numpy so training
is deterministic and the gradients can be checked against finite
differences.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .._binio import FormatError, Reader, check_magic, pack_array, read_bytes, write_bytes
from ..dataset import N_COEFFS, N_PARAMS, balanced_batches

logger = logging.getLogger(__name__)


class EpmError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class EpmConfig:
    input_dim: int = N_COEFFS
    hidden_dim: int = 128
    n_blocks: int = 4
    output_dim: int = N_PARAMS
    dropout_p: float = 0.1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.n_blocks, self.output_dim) <= 0:
            raise EpmError("dimensions must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise EpmError("dropout_p must lie in [0, 1)")

    def bn_names(self):
        names = ["in_bn"]
        for i in range(self.n_blocks):
            names += [f"b{i}.bn1", f"b{i}.bn2"]
        return names

    def tensor_shapes(self):
        """(name, shape) for every stored tensor, in declaration order."""
        d, h, o = self.input_dim, self.hidden_dim, self.output_dim

        def bn(prefix):
            return [(f"{prefix}.gamma", (h,)), (f"{prefix}.beta", (h,)),
                    (f"{prefix}.running_mean", (h,)), (f"{prefix}.running_var", (h,))]

        shapes = [("in.W", (d, h)), ("in.b", (h,))] + bn("in_bn")
        for i in range(self.n_blocks):
            shapes += [(f"b{i}.fc1.W", (h, h)), (f"b{i}.fc1.b", (h,))] + bn(f"b{i}.bn1")
            shapes += [(f"b{i}.fc2.W", (h, h)), (f"b{i}.fc2.b", (h,))] + bn(f"b{i}.bn2")
        shapes += [("out.W", (h, o)), ("out.b", (o,))]
        return shapes

    def param_names(self):
        return [n for n, _ in self.tensor_shapes() if not n.endswith(("running_mean", "running_var"))]

    def n_parameters(self):
        return sum(int(np.prod(s)) for n, s in self.tensor_shapes()
                   if not n.endswith(("running_mean", "running_var")))


class EpmModel:
    def __init__(self, config: EpmConfig, tensors: dict, mode: str = "eval"):
        self.config = config
        self.tensors = {}
        for name, shape in config.tensor_shapes():
            if name not in tensors:
                raise EpmError(f"missing tensor {name}")
            t = np.asarray(tensors[name])
            if t.shape != shape:
                raise EpmError(f"{name}: shape {t.shape} != {shape}")
            self.tensors[name] = t
        if any(np.any(self.tensors[f"{bn}.running_var"] <= 0) for bn in config.bn_names()):
            raise EpmError("running variances must be positive")
        self.mode = mode

    @classmethod
    def initialize(cls, config: EpmConfig = EpmConfig(), seed: int = 0, dtype=np.float32) -> "EpmModel":
        rng = np.random.default_rng([seed, 0xE9])
        tensors = {}
        for name, shape in config.tensor_shapes():
            if name.endswith(".W"):
                gain = 1.0 if name == "out.W" else 2.0
                bound = np.sqrt(3.0 * gain / shape[0])
                tensors[name] = rng.uniform(-bound, bound, shape)
            elif name.endswith(("gamma", "running_var")):
                tensors[name] = np.ones(shape)
            else:
                tensors[name] = np.zeros(shape)
        return cls(config, {k: v.astype(dtype) for k, v in tensors.items()})

    @property
    def dtype(self):
        return self.tensors["in.W"].dtype

    def params(self):
        return {n: self.tensors[n] for n in self.config.param_names()}

    def copy(self, dtype=None):
        dtype = dtype or self.dtype
        return EpmModel(self.config, {k: v.astype(dtype, copy=True) for k, v in self.tensors.items()}, self.mode)

    def eval(self):
        self.mode = "eval"
        return self

    def train(self):
        self.mode = "train"
        return self

    def predict(self, coeffs) -> np.ndarray:
        """Eval-mode batch prediction, (n, 51) -> (n, 68) float64."""
        return epm_forward(self, coeffs, "eval").astype(np.float64)

    def n_parameters(self):
        return sum(v.size for v in self.params().values())


# --- forward / backward --------------------------------------------------------

def _bn_train(x, gamma, beta, eps):
    mu = x.mean(axis=0)
    xc = x - mu
    var = np.mean(xc * xc, axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, mu, var)


def _bn_backward(dy, gamma, cache):
    xhat, inv, _, _ = cache
    n = dy.shape[0]
    dgamma = np.sum(dy * xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    g = dy * gamma
    dx = (inv / n) * (n * g - g.sum(axis=0) - xhat * np.sum(g * xhat, axis=0))
    return dx, dgamma, dbeta


def _forward(model, x, mode, rng=None, dropout=True, caches=None):
    """Shared forward pass. Returns output; fills ``caches`` in train mode."""
    T = model.tensors
    cfg = model.config
    train = mode == "train"
    stats = {} if train else None

    def bn(name, h):
        if train:
            y, c = _bn_train(h, T[f"{name}.gamma"], T[f"{name}.beta"], cfg.bn_eps)
            stats[name] = c
            return y, c
        scale = T[f"{name}.gamma"] / np.sqrt(T[f"{name}.running_var"] + cfg.bn_eps)
        return (h - T[f"{name}.running_mean"]) * scale + T[f"{name}.beta"], None

    h = x @ T["in.W"] + T["in.b"]
    z, c = bn("in_bn", h)
    a = np.maximum(z, 0)
    if caches is not None:
        caches["in"] = (x, z, c)
    p = cfg.dropout_p if (train and dropout) else 0.0
    for i in range(cfg.n_blocks):
        u = a @ T[f"b{i}.fc1.W"] + T[f"b{i}.fc1.b"]
        z1, c1 = bn(f"b{i}.bn1", u)
        r1 = np.maximum(z1, 0)
        if p > 0:
            mask = (rng.random(r1.shape) >= p).astype(r1.dtype) / (1.0 - p)
            d1 = r1 * mask
        else:
            mask = None
            d1 = r1
        v = d1 @ T[f"b{i}.fc2.W"] + T[f"b{i}.fc2.b"]
        z2, c2 = bn(f"b{i}.bn2", v)
        s = z2 + a
        a_next = np.maximum(s, 0)
        if caches is not None:
            caches[f"b{i}"] = (a, z1, c1, mask, d1, s, c2)
        a = a_next
    out = a @ T["out.W"] + T["out.b"]
    if caches is not None:
        caches["out"] = a
    if not np.all(np.isfinite(out)):
        raise EpmError("non-finite activations (corrupt model?)")
    return out, stats


def epm_forward(model: EpmModel, coeffs, mode: Optional[str] = None, rng=None) -> np.ndarray:
    """Map (n, 51) or (51,) coefficients to raw 68-vectors.

    Eval mode is deterministic (running BN statistics, no dropout). Train
    mode uses batch statistics and, given ``rng``, dropout.
    """
    mode = mode or model.mode
    x = np.asarray(coeffs, dtype=model.dtype)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.config.input_dim:
        raise EpmError(f"expected {model.config.input_dim} inputs, got {x.shape[1]}")
    out, _ = _forward(model, x, mode, rng=rng, dropout=rng is not None)
    return out[0] if single else out


def l1_loss_and_grad(model, x, y, rng=None, dropout=True):
    """Mean absolute error over batch and outputs, with parameter gradients.

    Returns ``(loss, grads, batch_stats, kinks)``; ``kinks`` holds the
    boolean ReLU patterns and residual signs used by the gradient checker.
    """
    caches = {}
    out, stats = _forward(model, x, "train", rng=rng, dropout=dropout, caches=caches)
    T = model.tensors
    cfg = model.config
    resid = out - y
    n, o = resid.shape
    loss = float(np.mean(np.abs(resid)))
    dout = np.sign(resid) / (n * o)
    grads = {}
    a = caches["out"]
    grads["out.W"] = a.T @ dout
    grads["out.b"] = dout.sum(axis=0)
    da = dout @ T["out.W"].T
    kinks = [resid > 0, resid < 0]
    for i in reversed(range(cfg.n_blocks)):
        a_in, z1, c1, mask, d1, s, c2 = caches[f"b{i}"]
        kinks += [s > 0, z1 > 0]
        ds = da * (s > 0)
        dv, grads[f"b{i}.bn2.gamma"], grads[f"b{i}.bn2.beta"] = _bn_backward(ds, T[f"b{i}.bn2.gamma"], c2)
        grads[f"b{i}.fc2.W"] = d1.T @ dv
        grads[f"b{i}.fc2.b"] = dv.sum(axis=0)
        dd1 = dv @ T[f"b{i}.fc2.W"].T
        dr1 = dd1 * mask if mask is not None else dd1
        dz1 = dr1 * (z1 > 0)
        du, grads[f"b{i}.bn1.gamma"], grads[f"b{i}.bn1.beta"] = _bn_backward(dz1, T[f"b{i}.bn1.gamma"], c1)
        grads[f"b{i}.fc1.W"] = a_in.T @ du
        grads[f"b{i}.fc1.b"] = du.sum(axis=0)
        da = du @ T[f"b{i}.fc1.W"].T + ds
    x_in, z0, c0 = caches["in"]
    kinks.append(z0 > 0)
    dz0 = da * (z0 > 0)
    dh, grads["in_bn.gamma"], grads["in_bn.beta"] = _bn_backward(dz0, T["in_bn.gamma"], c0)
    grads["in.W"] = x_in.T @ dh
    grads["in.b"] = dh.sum(axis=0)
    return loss, grads, stats, kinks


def _update_running_stats(model, stats):
    m = model.config.bn_momentum
    for name, (xhat, inv, mu, var) in stats.items():
        n = xhat.shape[0]
        unbiased = var * (n / max(n - 1, 1))
        rm = model.tensors[f"{name}.running_mean"]
        rv = model.tensors[f"{name}.running_var"]
        rm *= 1 - m
        rm += m * mu
        rv *= 1 - m
        rv += m * unbiased


# --- training ------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    hyper: dict = field(default_factory=dict)
    seed: int = 0
    diverged: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


DEFAULT_HYPER = {"lr": 1e-3, "batch_size": 256, "epochs": 200, "seed": 0, "weight_decay": 0.0,
                 "lr_schedule": "cosine"}


def l1_error(model, x, y) -> float:
    return float(np.mean(np.abs(model.predict(x) - y)))


def epm_train(train_x, train_y, train_subjects, val_x, val_y, config: EpmConfig = EpmConfig(),
              hyper: Optional[dict] = None, dtype=np.float32, log_every: int = 0):
    """Adam on the L1 loss with subject-balanced batches; the model with the
    lowest validation L1 is returned (in eval mode)."""
    hp = dict(DEFAULT_HYPER)
    hp.update(hyper or {})
    seed = int(hp["seed"])
    train_x = np.asarray(train_x, dtype=dtype)
    train_y = np.asarray(train_y, dtype=dtype)
    val_x = np.asarray(val_x, dtype=np.float64)
    val_y = np.asarray(val_y, dtype=np.float64)
    if train_x.shape[0] == 0 or val_x.shape[0] == 0:
        raise EpmError("training and validation sets must be non-empty")
    report = TrainReport(hyper={**hp, **asdict(config)}, seed=seed)
    model = EpmModel.initialize(config, seed, dtype)
    # L1-optimal constant as the starting output
    model.tensors["out.b"][:] = np.median(train_y, axis=0)
    model.train()
    opt = Adam(model.params(), lr=hp["lr"], weight_decay=hp["weight_decay"])
    rng = np.random.default_rng([seed, 0x7A1])
    best = None
    best_val = np.inf
    n_epochs = int(hp["epochs"])
    if hp["lr_schedule"] not in ("constant", "cosine"):
        raise EpmError(f"unknown lr schedule {hp['lr_schedule']!r}")
    for epoch in range(n_epochs):
        if hp["lr_schedule"] == "cosine":
            opt.lr = 0.5 * hp["lr"] * (1.0 + np.cos(np.pi * epoch / n_epochs))
        losses = []
        for idx in balanced_batches(train_subjects, int(hp["batch_size"]), seed, rng=rng):
            if idx.size < 2:
                continue
            loss, grads, stats, _ = l1_loss_and_grad(model, train_x[idx], train_y[idx], rng=rng)
            if not np.isfinite(loss):
                report.diverged = True
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", report)
            opt.step(grads)
            _update_running_stats(model, stats)
            losses.append(loss)
        model.eval()
        try:
            val = l1_error(model, val_x, val_y)
        except EpmError:
            val = float("nan")
        model.train()
        if not np.isfinite(val):
            report.diverged = True
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", report)
        report.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        report.val_loss.append(val)
        if val < best_val:
            best_val = val
            best = {k: v.copy() for k, v in model.tensors.items()}
            report.best_epoch = epoch
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d train %.5f val %.5f", epoch, report.train_loss[-1], val)
    if best is not None:
        model.tensors.update(best)
    return model.eval(), report


# --- gradient check -------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    errors: dict          # (name, flat index) -> relative error
    n_checked: int
    n_skipped: int        # finite difference straddled a ReLU / |.| kink

    def error_at(self, name, index):
        return self.errors[(name, index)]


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a) + abs(b), floor)


def epm_grad_check(config: EpmConfig = EpmConfig(), seed: int = 0, n_params: int = 200, batch: int = 8,
                   h: float = 1e-5, inputs=None, corrupt=None, include=()) -> GradCheckResult:
    """Central-difference check of the analytic L1-loss gradients, float64,
    dropout off, BN on the batch's own statistics.

    ``corrupt=(name, index, delta)`` adds ``delta`` to one analytic gradient
    entry (fault injection). ``include`` forces extra ``(name, index)``
    entries into the sample. Entries whose perturbation flips any ReLU or
    residual sign are skipped and counted, since the loss is not
    differentiable across those kinks.
    """
    rng = np.random.default_rng([seed, 0x6C])
    model = EpmModel.initialize(config, seed, np.float64)
    x = rng.uniform(0.0, 1.0, (batch, config.input_dim)) if inputs is None else np.asarray(inputs, float)
    y = rng.normal(0.0, 1.0, (x.shape[0], config.output_dim))
    _, grads, _, base_kinks = l1_loss_and_grad(model, x, y, dropout=False)
    if corrupt is not None:
        name, index, delta = corrupt
        grads[name].reshape(-1)[index] += delta

    names = config.param_names()
    sizes = np.array([model.tensors[n].size for n in names])
    flat_choice = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = []
    for f in np.sort(flat_choice):
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        picks.append((names[k], int(f - offsets[k])))
    for extra in include:
        if extra not in picks:
            picks.append(extra)
    if corrupt is not None and (corrupt[0], corrupt[1]) not in picks:
        picks.append((corrupt[0], corrupt[1]))

    errors = {}
    skipped = 0
    for name, index in picks:
        flat = model.tensors[name].reshape(-1)
        orig = flat[index]
        flat[index] = orig + h
        lp, _, _, kp = l1_loss_and_grad(model, x, y, dropout=False)
        flat[index] = orig - h
        lm, _, _, km = l1_loss_and_grad(model, x, y, dropout=False)
        flat[index] = orig
        crossed = any(not (np.array_equal(b, p) and np.array_equal(b, m))
                      for b, p, m in zip(base_kinks, kp, km))
        if crossed:
            skipped += 1
            continue
        numeric = (lp - lm) / (2 * h)
        errors[(name, index)] = relative_error(float(grads[name].reshape(-1)[index]), numeric)
    worst = max(errors.values()) if errors else 0.0
    return GradCheckResult(worst, errors, len(errors), skipped)


# --- EPM1 container --------------------------------------------------------------

def epm_to_bytes(model: EpmModel) -> bytes:
    c = model.config
    parts = [b"EPM1", struct.pack("<IIIIfff", c.input_dim, c.hidden_dim, c.n_blocks, c.output_dim,
                                  c.dropout_p, c.bn_eps, c.bn_momentum)]
    parts += [pack_array(model.tensors[n], "f4") for n, _ in c.tensor_shapes()]
    return b"".join(parts)


def epm_from_bytes(buf) -> EpmModel:
    check_magic(buf, "EPM")
    r = Reader(buf, "EPM")
    r.pos = 4
    d, h, nb, o, p, eps, mom = r.unpack("IIIIfff")
    if max(d, h, o) > 1 << 16 or nb > 1024:
        raise FormatError("implausible EPM dimensions")
    try:
        config = EpmConfig(d, h, nb, o, float(np.float32(p)), float(np.float32(eps)), float(np.float32(mom)))
    except EpmError as exc:
        raise FormatError(str(exc)) from None
    tensors = {n: r.array("f4", s) for n, s in config.tensor_shapes()}
    r.finish()
    try:
        return EpmModel(config, tensors)
    except EpmError as exc:
        raise FormatError(str(exc)) from None


def save_epm(model, path):
    write_bytes(path, epm_to_bytes(model))


def load_epm(path) -> EpmModel:
    return epm_from_bytes(read_bytes(path))
