"""Paired blendshape / expression-parameter data: validation, I/O, subject
splits, subject-balanced sampling and seeded synthetic generators."""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterator, Optional, Sequence

import numpy as np

from .rotations import DEGENERATE_EPS, canonical_rot6d

logger = logging.getLogger(__name__)

N_COEFFS = 51
N_EXPR = 50
N_PARAMS = 68
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

# slices into the 68-vector
EXPR = slice(0, 50)
JAW = slice(50, 56)
EYE_L = slice(56, 62)
EYE_R = slice(62, 68)


class DatasetError(ValueError):
    pass


# --- ordering manifest -------------------------------------------------------

def load_manifest(path=None) -> list[str]:
    """Read an ordering manifest; ``None`` loads the bundled ARKit-51 list."""
    if path is None:
        text = resources.files("exprmap").joinpath("data/arkit51.txt").read_text()
    else:
        with open(path) as f:
            text = f.read()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "version: 1":
        raise DatasetError("manifest must start with 'version: 1'")
    names = lines[1:]
    if len(names) != N_COEFFS:
        raise DatasetError(f"manifest lists {len(names)} coefficients, expected {N_COEFFS}")
    if len(set(names)) != N_COEFFS:
        raise DatasetError("manifest has duplicate coefficient names")
    return names


CANONICAL_ORDER = load_manifest()
COEFF_INDEX = {name: i for i, name in enumerate(CANONICAL_ORDER)}


# --- domain types ------------------------------------------------------------

@dataclass(eq=False)
class BlendshapeFrame:
    subject_id: str
    frame_id: int
    timestamp_us: int
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (N_COEFFS,):
            raise DatasetError(f"coefficient count mismatch: got {self.coeffs.size}, expected {N_COEFFS}")

    def replace_coeffs(self, coeffs) -> "BlendshapeFrame":
        return BlendshapeFrame(self.subject_id, self.frame_id, self.timestamp_us, coeffs)


@dataclass(eq=False)
class ExpressionParams:
    """50 expression coefficients plus jaw / left eye / right eye 6D rotations."""

    expr: np.ndarray
    jaw6d: np.ndarray = field(default_factory=lambda: IDENTITY_6D.copy())
    eye_l6d: np.ndarray = field(default_factory=lambda: IDENTITY_6D.copy())
    eye_r6d: np.ndarray = field(default_factory=lambda: IDENTITY_6D.copy())

    def __post_init__(self):
        self.expr = np.asarray(self.expr, dtype=np.float64)
        self.jaw6d = np.asarray(self.jaw6d, dtype=np.float64)
        self.eye_l6d = np.asarray(self.eye_l6d, dtype=np.float64)
        self.eye_r6d = np.asarray(self.eye_r6d, dtype=np.float64)
        if self.expr.shape != (N_EXPR,):
            raise DatasetError(f"expression block must have {N_EXPR} values, got {self.expr.size}")
        for name in ("jaw6d", "eye_l6d", "eye_r6d"):
            block = getattr(self, name)
            if block.shape != (6,):
                raise DatasetError(f"{name} must have 6 values")
            if not is_orthonormalizable(block):
                raise DatasetError(f"{name} is not orthonormalizable")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.expr, self.jaw6d, self.eye_l6d, self.eye_r6d])

    @classmethod
    def from_vector(cls, v) -> "ExpressionParams":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (N_PARAMS,):
            raise DatasetError(f"expression parameter vector must have {N_PARAMS} values, got {v.size}")
        return cls(v[EXPR], v[JAW], v[EYE_L], v[EYE_R])


def is_orthonormalizable(block6) -> bool:
    a1, a2 = block6[:3], block6[3:]
    n1, n2 = np.linalg.norm(a1), np.linalg.norm(a2)
    if n1 <= DEGENERATE_EPS or n2 <= DEGENERATE_EPS:
        return False
    return bool(np.linalg.norm(np.cross(a1 / n1, a2 / n2)) > DEGENERATE_EPS)


@dataclass(eq=False)
class PairedSample:
    frame: BlendshapeFrame
    target: Optional[ExpressionParams]

    @property
    def subject_id(self):
        return self.frame.subject_id


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise DatasetError("split partitions overlap")

    def select(self, samples, part):
        keep = set(getattr(self, part))
        return [s for s in samples if s.subject_id in keep]


def coeff_matrix(samples) -> np.ndarray:
    frames = [s.frame if isinstance(s, PairedSample) else s for s in samples]
    if not frames:
        return np.zeros((0, N_COEFFS))
    return np.stack([f.coeffs for f in frames])


def target_matrix(samples) -> np.ndarray:
    if not samples:
        return np.zeros((0, N_PARAMS))
    return np.stack([s.target.to_vector() for s in samples])


def subject_ids(samples) -> np.ndarray:
    return np.array([s.subject_id for s in samples])


# --- JSONL I/O ---------------------------------------------------------------

def _parse_coeffs(raw, names, lineno):
    if isinstance(raw, dict):
        unknown = sorted(set(raw) - set(names))
        if unknown:
            raise DatasetError(f"line {lineno}: unknown coefficient name(s) {unknown}")
        if len(raw) != N_COEFFS:
            raise DatasetError(f"line {lineno}: coefficient count mismatch ({len(raw)} != {N_COEFFS})")
        # reorder into canonical position
        return np.array([float(raw[n]) for n in CANONICAL_ORDER])
    if len(raw) != N_COEFFS:
        raise DatasetError(f"line {lineno}: coefficient count mismatch ({len(raw)} != {N_COEFFS})")
    values = np.array(raw, dtype=np.float64)
    if names != CANONICAL_ORDER:
        values = values[[names.index(n) for n in CANONICAL_ORDER]]
    return values


def load_pairs(path, manifest=None) -> tuple[list[PairedSample], int]:
    """Read a JSONL sample file. Returns ``(samples, clamp_count)``.

    ``bs`` may be a list in manifest order or an object keyed by coefficient
    name. Out-of-range coefficients are clamped to [0, 1] and counted.
    """
    names = CANONICAL_ORDER if manifest is None else (
        manifest if isinstance(manifest, list) else load_manifest(manifest))
    if sorted(names) != sorted(CANONICAL_ORDER):
        raise DatasetError("manifest coefficient names do not match the canonical set")
    samples = []
    clamped = 0
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                subject = str(rec["subject"])
                frame_id = int(rec["frame"])
                ts = int(rec.get("ts_us", 0))
                raw_bs = rec["bs"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"line {lineno}: malformed record ({exc})") from None
            if frame_id < 0 or ts < 0:
                raise DatasetError(f"line {lineno}: frame and ts_us must be unsigned")
            try:
                coeffs = _parse_coeffs(raw_bs, names, lineno)
            except (TypeError, ValueError) as exc:
                if isinstance(exc, DatasetError):
                    raise
                raise DatasetError(f"line {lineno}: malformed coefficients ({exc})") from None
            if not np.all(np.isfinite(coeffs)):
                raise DatasetError(f"line {lineno}: non-finite coefficient")
            out = (coeffs < 0.0) | (coeffs > 1.0)
            clamped += int(out.sum())
            coeffs = np.clip(coeffs, 0.0, 1.0)
            target = None
            if rec.get("q") is not None:
                try:
                    target = ExpressionParams.from_vector(rec["q"])
                except (TypeError, ValueError) as exc:
                    raise DatasetError(f"line {lineno}: bad target ({exc})") from None
            samples.append(PairedSample(BlendshapeFrame(subject, frame_id, ts, coeffs), target))
    if clamped:
        logger.info("%s: clamped %d out-of-range coefficients", path, clamped)
    return samples, clamped


def load_frames(path) -> list[BlendshapeFrame]:
    samples, _ = load_pairs(path)
    return [s.frame for s in samples]


def save_pairs(samples, path):
    with open(path, "w") as f:
        for s in samples:
            fr = s.frame if isinstance(s, PairedSample) else s
            rec = {"subject": fr.subject_id, "frame": int(fr.frame_id), "ts_us": int(fr.timestamp_us),
                   "bs": [float(x) for x in fr.coeffs]}
            target = getattr(s, "target", None)
            if target is not None:
                rec["q"] = [float(x) for x in target.to_vector()]
            f.write(json.dumps(rec) + "\n")


def save_vr_pairs(pairs, path):
    with open(path, "w") as f:
        for vr, mp in pairs:
            rec = {"subject": vr.subject_id, "frame": int(vr.frame_id), "ts_us": int(vr.timestamp_us),
                   "bs": [float(x) for x in vr.coeffs], "bs_mp": [float(x) for x in mp.coeffs]}
            f.write(json.dumps(rec) + "\n")


def load_vr_pairs(path) -> list[tuple[BlendshapeFrame, BlendshapeFrame]]:
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                args = (str(rec["subject"]), int(rec["frame"]), int(rec.get("ts_us", 0)))
                vr = BlendshapeFrame(*args, np.clip(np.array(rec["bs"], dtype=float), 0, 1))
                mp = BlendshapeFrame(*args, np.clip(np.array(rec["bs_mp"], dtype=float), 0, 1))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"line {lineno}: malformed record ({exc})") from None
            pairs.append((vr, mp))
    return pairs


# --- splitting and sampling --------------------------------------------------

def subject_source(subject_id: str) -> str:
    """Subjects named ``source/name`` belong to ``source``; others to ``default``."""
    return subject_id.split("/", 1)[0] if "/" in subject_id else "default"


def split_subjects(samples, counts=(8, 1, 1), seed=0) -> DatasetSplit:
    """Subject-disjoint split with ``counts`` (train, val, test) drawn per source."""
    ids = sorted({s if isinstance(s, str) else s.subject_id for s in samples})
    by_source: dict[str, list[str]] = {}
    for sid in ids:
        by_source.setdefault(subject_source(sid), []).append(sid)
    n_train, n_val, n_test = counts
    need = n_train + n_val + n_test
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for source in sorted(by_source):
        members = by_source[source]
        if len(members) < need:
            raise DatasetError(f"source {source!r} has {len(members)} subjects, need {need}")
        order = [members[i] for i in rng.permutation(len(members))]
        train += order[:n_train]
        val += order[n_train:n_train + n_val]
        test += order[n_train + n_val:need]
        # surplus subjects go to train so the union covers everyone
        train += order[need:]
    return DatasetSplit(sorted(train), sorted(val), sorted(test))


def balanced_batches(subjects: Sequence[str], batch_size: int, seed, n_draws: Optional[int] = None,
                     rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    """Yield index batches for one epoch of subject-wise sampling.

    Each draw picks a subject uniformly, then one of its frames uniformly
    (with replacement). A single-subject set degenerates to a plain shuffle.
    """
    subjects = np.asarray(subjects)
    if subjects.size == 0:
        raise DatasetError("cannot sample from an empty dataset")
    rng = np.random.default_rng(seed) if rng is None else rng
    n_draws = subjects.size if n_draws is None else n_draws
    uniq, inverse = np.unique(subjects, return_inverse=True)
    if uniq.size == 1:
        idx = rng.permutation(subjects.size)
        if n_draws > subjects.size:
            idx = np.concatenate([idx, rng.integers(0, subjects.size, n_draws - subjects.size)])
        idx = idx[:n_draws]
    else:
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pick_subject = rng.integers(0, uniq.size, n_draws)
        offset = np.floor(rng.random(n_draws) * counts[pick_subject]).astype(np.int64)
        idx = order[starts[pick_subject] + offset]
    for start in range(0, n_draws, batch_size):
        yield idx[start:start + batch_size]


# --- synthetic oracle --------------------------------------------------------

_JAW_COEFFS = [COEFF_INDEX[n] for n in CANONICAL_ORDER if n.startswith("jaw")]
_EYE_L_COEFFS = [COEFF_INDEX[n] for n in CANONICAL_ORDER if n.startswith("eyeLook") and n.endswith("Left")]
_EYE_R_COEFFS = [COEFF_INDEX[n] for n in CANONICAL_ORDER if n.startswith("eyeLook") and n.endswith("Right")]


# bias and noise on the 6D blocks are damped relative to expression
ROTATION_SCALE = 0.25


@dataclass(eq=False)
class SyntheticOracle:
    """Ground-truth generator ``Q = A bs + alpha B (bs*bs) + c + bias[subject]``.

    The 6D blocks are orthonormalized afterwards so every target is a valid
    :class:`ExpressionParams`.
    """

    seed: int
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    alpha: float = 0.5
    noise_sigma: float = 0.01
    bias_sigma: float = 0.02
    per_subject_bias: dict = field(default_factory=dict)

    @classmethod
    def from_seed(cls, seed: int, alpha: float = 0.5, noise_sigma: float = 0.01,
                  bias_sigma: float = 0.02) -> "SyntheticOracle":
        rng = np.random.default_rng([seed, 0xA11CE])
        A = np.zeros((N_PARAMS, N_COEFFS))
        B = np.zeros((N_PARAMS, N_COEFFS))
        A[EXPR] = rng.normal(0.0, 0.6, (N_EXPR, N_COEFFS))
        B[EXPR] = rng.normal(0.0, 1.0, (N_EXPR, N_COEFFS))
        A[50:] = rng.normal(0.0, 0.02, (18, N_COEFFS))
        B[50:] = rng.normal(0.0, 0.05, (18, N_COEFFS))
        for rows, cols, scale in ((JAW, _JAW_COEFFS, 0.15), (EYE_L, _EYE_L_COEFFS, 0.2),
                                  (EYE_R, _EYE_R_COEFFS, 0.2)):
            block = A[rows]
            block[:, cols] += rng.normal(0.0, scale, (6, len(cols)))
            A[rows] = block
        c = np.zeros(N_PARAMS)
        c[EXPR] = rng.normal(0.0, 0.3, N_EXPR)
        for rows in (JAW, EYE_L, EYE_R):
            c[rows] = IDENTITY_6D
        return cls(seed, A, B, c, alpha, noise_sigma, bias_sigma)

    def subject_bias(self, subject_id: str) -> np.ndarray:
        bias = self.per_subject_bias.get(subject_id)
        if bias is None:
            rng = np.random.default_rng([self.seed, zlib.crc32(subject_id.encode()), 0xB1A5])
            bias = rng.normal(0.0, self.bias_sigma, N_PARAMS)
            bias[50:] *= ROTATION_SCALE
            self.per_subject_bias[subject_id] = bias
        return bias

    def mean(self, bs) -> np.ndarray:
        """Population mean map (no subject bias, no noise), before 6D projection."""
        bs = np.atleast_2d(bs)
        return bs @ self.A.T + self.alpha * (bs * bs) @ self.B.T + self.c

    def expected(self, bs) -> np.ndarray:
        """Bias-free, noise-free targets with canonical 6D blocks."""
        return project_6d_blocks(self.mean(bs))

    def sample_activations(self, rng, n) -> np.ndarray:
        bs = np.zeros((n, N_COEFFS))
        k = rng.integers(3, 9, n)
        for i in range(n):
            active = rng.choice(N_COEFFS, size=k[i], replace=False)
            bs[i, active] = rng.uniform(0.05, 1.0, k[i])
        return bs


def project_6d_blocks(q) -> np.ndarray:
    q = np.array(q, dtype=np.float64, copy=True)
    for rows in (JAW, EYE_L, EYE_R):
        q[..., rows] = canonical_rot6d(q[..., rows])
    return q


def synth_pairs(oracle: SyntheticOracle, n_subjects: int, frames_per_subject: int,
                prefix: str = "synth/s", frame_period_us: int = 16_667) -> list[PairedSample]:
    if n_subjects < 1:
        raise DatasetError("n_subjects must be >= 1")
    if frames_per_subject < 1:
        raise DatasetError("frames_per_subject must be >= 1")
    samples = []
    for i in range(n_subjects):
        sid = f"{prefix}{i:02d}"
        rng = np.random.default_rng([oracle.seed, 0x5EED, i])
        bs = oracle.sample_activations(rng, frames_per_subject)
        q = oracle.mean(bs) + oracle.subject_bias(sid)
        if oracle.noise_sigma:
            noise = rng.normal(0.0, oracle.noise_sigma, q.shape)
            noise[:, 50:] *= ROTATION_SCALE
            q = q + noise
        q = project_6d_blocks(q)
        for f in range(frames_per_subject):
            frame = BlendshapeFrame(sid, f, f * frame_period_us, bs[f])
            samples.append(PairedSample(frame, ExpressionParams.from_vector(q[f])))
    return samples


REMAP_WEIGHTS = (0.5, 0.75, 1.0)


def synth_vr_pairs(samples, seed, sigma: float = 0.01, weights=REMAP_WEIGHTS, D=None):
    """Simulate headset remapping ``BS_VR = clamp(D * BS_MP + noise)``.

    Returns ``(pairs, D)`` with ``pairs`` a list of ``(vr_frame, mp_frame)``
    and ``D`` the diagonal (51-vector) that was applied.
    """
    rng = np.random.default_rng([seed, 0x7E5])
    if D is None:
        D = rng.choice(np.asarray(weights, dtype=np.float64), N_COEFFS)
    D = np.asarray(D, dtype=np.float64)
    frames = [s.frame if isinstance(s, PairedSample) else s for s in samples]
    mp = coeff_matrix(frames)
    vr = mp * D
    if sigma:
        vr = vr + rng.normal(0.0, sigma, vr.shape)
    vr = np.clip(vr, 0.0, 1.0)
    pairs = [(fr.replace_coeffs(vr[i]), fr) for i, fr in enumerate(frames)]
    return pairs, D
