"""Seeded synthetic benchmark for comparing the three expression mappers."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .dataset import SyntheticOracle, coeff_matrix, split_subjects, subject_ids, synth_pairs, target_matrix
from .flame import synth_model
from .mappers.baselines import BASELINE_EXPR, fit_fixed_matrix, params_to_baseline, ridge_fit
from .mappers.epm import EpmConfig, epm_train
from .metrics import evaluate_methods

logger = logging.getLogger(__name__)


@dataclass
class Benchmark:
    seed: int
    train: list
    val: list
    test: list
    model: object
    oracle: SyntheticOracle


def make_benchmark(seed: int, frames_per_subject: int = 2000, n_subjects: int = 10, alpha: float = 0.5,
                   V: int = 1000) -> Benchmark:
    oracle = SyntheticOracle.from_seed(seed, alpha=alpha)
    samples = synth_pairs(oracle, n_subjects, frames_per_subject)
    split = split_subjects(samples, counts=(n_subjects - 2, 1, 1), seed=seed)
    model = synth_model(seed, V=V, K_e=BASELINE_EXPR)
    return Benchmark(seed, split.select(samples, "train"), split.select(samples, "val"),
                     split.select(samples, "test"), model, oracle)


def fit_methods(bench: Benchmark, hyper=None, lam: float = 1.0):
    """Returns ``[(name, mapper), ...]`` for matrix, linear (ridge) and EPM."""
    X = coeff_matrix([s.frame for s in bench.train])
    Q = target_matrix(bench.train)
    Yb = params_to_baseline(Q)
    t0 = time.perf_counter()
    matrix = fit_fixed_matrix(X, Yb)
    ridge = ridge_fit(X, Yb, lam)
    hp = {"seed": bench.seed}
    hp.update(hyper or {})
    epm, report = epm_train(X, Q, subject_ids(bench.train),
                            coeff_matrix([s.frame for s in bench.val]), target_matrix(bench.val),
                            EpmConfig(), hp)
    logger.info("fitted mappers in %.1fs (best epoch %d)", time.perf_counter() - t0, report.best_epoch)
    return [("matrix", matrix), ("linear", ridge), ("epm", epm)], report


BENCH_HYPER = {"lr": 3e-3}


def run_benchmark(seed: int, frames_per_subject: int = 2000, hyper=None):
    bench = make_benchmark(seed, frames_per_subject)
    methods, report = fit_methods(bench, {**BENCH_HYPER, **(hyper or {})})
    return evaluate_methods(methods, bench.test, bench.model), report
