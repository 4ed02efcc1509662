"""``exprmap`` command-line tool.

Flag values resolve in the order: command line, ``EXPRMAP_<FLAG>``
environment variables, ``--config`` INI file (``[common]`` plus a section
named after the subcommand, keys spelled like the flags), built-in defaults.
Errors print ``error: <class>: <detail>`` on stderr with a nonzero exit code.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys

import numpy as np

ENV_PREFIX = "EXPRMAP_"
logger = logging.getLogger("exprmap")


class CliError(Exception):
    def __init__(self, kind, detail, code=1):
        super().__init__(detail)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


def _need(args, *names):
    for name in names:
        value = getattr(args, name.replace("-", "_"))
        if value in (None, ""):
            raise CliError("missing-input", f"--{name} is required", 2)


def _exists(*paths):
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise CliError("missing-input", f"no such file: {p}", 2)


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


# --- subcommands -------------------------------------------------------------------

def cmd_synth_data(args):
    from .dataset import SyntheticOracle, save_pairs, save_vr_pairs, split_subjects, synth_pairs, synth_vr_pairs
    from .flame import save_model, synth_model
    from .rig import save_cloud, synth_cloud

    _need(args, "out")
    oracle = SyntheticOracle.from_seed(args.seed, alpha=args.alpha, noise_sigma=args.noise)
    samples = synth_pairs(oracle, args.subjects, args.frames)
    written = {}
    if args.split:
        counts = tuple(int(c) for c in args.split.split(","))
        split = split_subjects(samples, counts, seed=args.seed)
        root, ext = os.path.splitext(args.out)
        for part in ("train", "val", "test"):
            path = f"{root}.{part}{ext or '.jsonl'}"
            save_pairs(split.select(samples, part), path)
            written[part] = path
    else:
        save_pairs(samples, args.out)
        written["pairs"] = args.out
    if args.vr_out:
        pairs, D = synth_vr_pairs(samples, args.seed, sigma=args.vr_sigma)
        save_vr_pairs(pairs, args.vr_out)
        written["vr"] = args.vr_out
        written["vr_D"] = [float(d) for d in D]
    if args.model_out or args.cloud_out:
        model = synth_model(args.seed, V=args.vertices, K_e=args.expr_dim)
        if args.model_out:
            save_model(model, args.model_out)
            written["model"] = args.model_out
        if args.cloud_out:
            save_cloud(synth_cloud(model.template, model.faces, args.gaussians, args.seed, args.sh_degree),
                       args.cloud_out)
            written["cloud"] = args.cloud_out
    _write_json("-", {"samples": len(samples), "written": written})


def cmd_fit_bda(args):
    from .bda import fit_bda, save_alignment
    from .dataset import load_vr_pairs

    _need(args, "pairs", "out")
    _exists(args.pairs)
    alignment = fit_bda(load_vr_pairs(args.pairs))
    save_alignment(alignment, args.out)
    _write_json("-", alignment.fit_stats)


def _xy(path):
    from .dataset import coeff_matrix, load_pairs, subject_ids, target_matrix

    samples, _ = load_pairs(path)
    if not samples or any(s.target is None for s in samples):
        raise CliError("input", f"{path}: every record needs a 'q' target")
    return coeff_matrix([s.frame for s in samples]), target_matrix(samples), subject_ids(samples)


def cmd_train_epm(args):
    from .mappers.epm import EpmConfig, epm_train, save_epm

    _need(args, "train", "val", "out")
    _exists(args.train, args.val)
    X, Q, subj = _xy(args.train)
    Xv, Qv, _ = _xy(args.val)
    hyper = {"lr": args.lr, "batch_size": args.batch_size, "epochs": args.epochs, "seed": args.seed,
             "weight_decay": args.weight_decay, "lr_schedule": args.lr_schedule}
    model, report = epm_train(X, Q, subj, Xv, Qv, EpmConfig(dropout_p=args.dropout), hyper)
    save_epm(model, args.out)
    if args.report:
        with open(args.report, "w") as f:
            f.write(report.to_json() + "\n")
    _write_json("-", {"best_epoch": report.best_epoch,
                      "best_val_l1": min(report.val_loss) if report.val_loss else None})


def cmd_fit_ridge(args):
    from .mappers.baselines import fit_fixed_matrix, params_to_baseline, ridge_fit, save_matrix, save_ridge

    _need(args, "train", "out")
    _exists(args.train)
    X, Q, _ = _xy(args.train)
    Y = params_to_baseline(Q)
    ridge = ridge_fit(X, Y, args.lam)
    save_ridge(ridge, args.out)
    out = {"lambda": args.lam, "train_mse": float(np.mean((ridge.predict(X) - Y) ** 2))}
    if args.matrix_out:
        save_matrix(fit_fixed_matrix(X, Y), args.matrix_out)
        out["matrix"] = args.matrix_out
    _write_json("-", out)


def _load_mapper(name, args):
    from .mappers.baselines import load_matrix, load_ridge
    from .mappers.epm import load_epm

    table = {"matrix": ("matrix", load_matrix), "linear": ("ridge", load_ridge), "epm": ("epm", load_epm)}
    if name not in table:
        raise CliError("usage", f"unknown method {name!r} (choose from matrix, linear, epm)", 2)
    flag, loader = table[name]
    path = getattr(args, flag)
    if not path:
        raise CliError("missing-input", f"method {name} needs --{flag}", 2)
    _exists(path)
    return loader(path)


def cmd_eval(args):
    from .dataset import load_pairs
    from .flame import load_model
    from .metrics import evaluate_methods

    _need(args, "data", "model", "out")
    _exists(args.data, args.model)
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    methods = [(n, _load_mapper(n, args)) for n in names]
    samples, _ = load_pairs(args.data)
    report = evaluate_methods(methods, samples, load_model(args.model))
    with open(args.out, "w") as f:
        f.write(report.to_json() + "\n")
    md = args.markdown or os.path.splitext(args.out)[0] + ".md"
    with open(md, "w") as f:
        f.write(report.to_markdown())
    sys.stdout.write(report.to_markdown())


def cmd_mia_fit(args):
    from .dataset import load_pairs
    from .flame import load_model
    from .mappers.epm import load_epm
    from .mia import MiaConfig, mia_fit, save_offsets
    from .rig import load_cloud

    _need(args, "train", "model", "epm", "out")
    _exists(args.train, args.model, args.epm, args.cloud, args.heldout)
    frames, _ = load_pairs(args.train)
    heldout = load_pairs(args.heldout)[0] if args.heldout else None
    cloud = load_cloud(args.cloud) if args.cloud else None
    cfg = MiaConfig(args.lam2, args.lam3, args.lam4, args.lr, args.iterations, args.seed)
    offsets, report = mia_fit(load_model(args.model), cloud, load_epm(args.epm), frames, cfg, heldout)
    save_offsets(offsets, args.out)
    if args.report:
        with open(args.report, "w") as f:
            f.write(report.to_json() + "\n")
    _write_json("-", {"pre_train_rmse_mm": report.pre_train_rmse_mm,
                      "post_train_rmse_mm": report.post_train_rmse_mm,
                      "pre_heldout_rmse_mm": report.pre_heldout_rmse_mm,
                      "post_heldout_rmse_mm": report.post_heldout_rmse_mm})


def cmd_serve(args):
    from .stream.config import PipelineConfig, load_config
    from .stream.server import serve

    if args.config_file:
        _exists(args.config_file)
        cfg = load_config(args.config_file, {"host": args.host, "port": args.port})
    else:
        _need(args, "epm", "model", "cloud")
        _exists(args.epm, args.model, args.cloud, args.alignment, args.offsets)
        cfg = PipelineConfig(args.epm, args.model, args.cloud, args.alignment, args.offsets,
                             args.host or "127.0.0.1", args.port if args.port is not None else 7070)
    serve(cfg)


def cmd_replay(args):
    from .dataset import load_frames
    from .stream.client import replay

    _need(args, "trace", "endpoint")
    _exists(args.trace)
    report = replay(load_frames(args.trace), args.endpoint, args.rate, args.timeout)
    _write_json(args.out or "-", report.to_dict())


def cmd_export_heatmap(args):
    from .dataset import load_pairs, target_matrix, coeff_matrix
    from .flame import Mesh, load_model
    from .metrics import heatmap_export, prediction_meshes

    _need(args, "data", "model", "method", "out")
    _exists(args.data, args.model)
    mapper = _load_mapper(args.method, args)
    samples, _ = load_pairs(args.data)
    if not samples or any(s.target is None for s in samples):
        raise CliError("input", f"{args.data}: every record needs a 'q' target")
    model = load_model(args.model)
    pred = prediction_meshes(model, mapper.predict(coeff_matrix([s.frame for s in samples])))
    gt = prediction_meshes(model, target_matrix(samples))
    err = np.sqrt(np.mean(np.sum((pred - gt) ** 2, axis=-1), axis=0)) * 1000.0
    ply, csv = heatmap_export(Mesh(gt.mean(axis=0), model.faces), err, args.out, args.csv)
    _write_json("-", {"ply": ply, "csv": csv, "max_error_mm": float(err.max()), "mean_error_mm": float(err.mean())})


def cmd_grad_check(args):
    from .mappers.epm import EpmConfig, epm_grad_check

    res = epm_grad_check(EpmConfig(), seed=args.seed, n_params=args.params)
    _write_json("-", {"seed": args.seed, "max_rel_error": res.max_rel_error, "n_checked": res.n_checked,
                      "n_skipped": res.n_skipped, "passed": bool(res.max_rel_error < args.tol)})
    if res.max_rel_error >= args.tol:
        raise CliError("grad-check", f"max relative error {res.max_rel_error:.3g} >= {args.tol}")


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="exprmap", description="Blendshape-driven avatar toolkit.")
    p.add_argument("--config", dest="config_path", help="INI file with flag defaults")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    s = add("synth-data", cmd_synth_data, "generate seeded synthetic pairs, models and clouds")
    s.add_argument("--out", help="paired JSONL output (with --split: <out>.train.jsonl etc.)")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--subjects", type=int, default=10, help="number of subjects")
    s.add_argument("--frames", type=int, default=2000, help="frames per subject")
    s.add_argument("--alpha", type=float, default=0.5, help="strength of the quadratic term")
    s.add_argument("--noise", type=float, default=0.01, help="target noise sigma")
    s.add_argument("--split", help="train,val,test subject counts, e.g. 8,1,1")
    s.add_argument("--vr-out", help="also write headset-remapped pairs for fit-bda")
    s.add_argument("--vr-sigma", type=float, default=0.01, help="remap noise sigma")
    s.add_argument("--model-out", help="write a synthetic head model")
    s.add_argument("--vertices", type=int, default=1000, help="model vertex count")
    s.add_argument("--expr-dim", type=int, default=100, help="model expression components")
    s.add_argument("--cloud-out", help="write a Gaussian cloud bound to the model")
    s.add_argument("--gaussians", type=int, default=10000, help="number of Gaussians")
    s.add_argument("--sh-degree", type=int, default=0, help="spherical-harmonics degree")

    s = add("fit-bda", cmd_fit_bda, "fit the affine blendshape alignment")
    s.add_argument("--pairs", help="JSONL with 'bs' (headset) and 'bs_mp' (target) fields")
    s.add_argument("--out", help="alignment file")

    s = add("train-epm", cmd_train_epm, "train the residual MLP mapper")
    s.add_argument("--train", help="training pairs JSONL")
    s.add_argument("--val", help="validation pairs JSONL")
    s.add_argument("--out", help="model file")
    s.add_argument("--report", help="TrainReport JSON")
    s.add_argument("--seed", type=int, default=0, help="training seed")
    s.add_argument("--epochs", type=int, default=200, help="epochs")
    s.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    s.add_argument("--lr-schedule", default="cosine", choices=("cosine", "constant"), help="learning-rate schedule")
    s.add_argument("--batch-size", type=int, default=256, help="batch size")
    s.add_argument("--weight-decay", type=float, default=0.0, help="L2 weight decay")
    s.add_argument("--dropout", type=float, default=0.1, help="dropout probability")

    s = add("fit-ridge", cmd_fit_ridge, "fit the ridge baseline")
    s.add_argument("--train", help="training pairs JSONL")
    s.add_argument("--out", help="ridge model file")
    s.add_argument("--lambda", dest="lam", type=float, default=1.0, help="ridge penalty")
    s.add_argument("--matrix-out", help="also write a no-intercept least-squares 51x103 matrix")

    def mapper_flags(s):
        s.add_argument("--matrix", help="matrix mapper file")
        s.add_argument("--ridge", help="ridge mapper file")
        s.add_argument("--epm", help="EPM model file")

    s = add("eval", cmd_eval, "compare mappers on a test set")
    s.add_argument("--methods", default="matrix,linear,epm", help="comma-separated methods")
    s.add_argument("--data", help="test pairs JSONL")
    s.add_argument("--model", help="head model file")
    s.add_argument("--out", help="EvalReport JSON")
    s.add_argument("--markdown", help="Markdown table (default: <out>.md)")
    mapper_flags(s)

    s = add("mia-fit", cmd_mia_fit, "fit avatar offsets against a frozen mapper")
    s.add_argument("--train", help="fitting frames JSONL with targets")
    s.add_argument("--heldout", help="held-out frames JSONL for reporting")
    s.add_argument("--model", help="head model file")
    s.add_argument("--epm", help="EPM model file")
    s.add_argument("--cloud", help="Gaussian cloud file (for the scale term)")
    s.add_argument("--out", help="offsets file")
    s.add_argument("--report", help="MiaReport JSON")
    s.add_argument("--seed", type=int, default=0, help="seed")
    s.add_argument("--iterations", type=int, default=2000, help="Adam iterations")
    s.add_argument("--lr", type=float, default=0.2, help="Adam step size")
    s.add_argument("--lam2", type=float, default=1e-2, help="Laplacian weight")
    s.add_argument("--lam3", type=float, default=1e-4, help="parameter regularizer weight")
    s.add_argument("--lam4", type=float, default=1e-3, help="scale regularizer weight")

    s = add("serve", cmd_serve, "run the streaming server")
    s.add_argument("--server-config", dest="config_file", help="server INI file")
    s.add_argument("--host", help="listen address")
    s.add_argument("--port", type=int, help="listen port")
    s.add_argument("--epm", help="EPM model file")
    s.add_argument("--model", help="head model file")
    s.add_argument("--cloud", help="Gaussian cloud file")
    s.add_argument("--alignment", help="alignment file")
    s.add_argument("--offsets", help="avatar offsets file")

    s = add("replay", cmd_replay, "stream a trace to a server and measure latency")
    s.add_argument("--trace", help="frames JSONL")
    s.add_argument("--endpoint", default="127.0.0.1:7070", help="host:port")
    s.add_argument("--rate", type=float, default=60.0, help="frames per second")
    s.add_argument("--timeout", type=float, default=1.0, help="seconds to wait for stragglers")
    s.add_argument("--out", help="report path (default stdout)")

    s = add("export-heatmap", cmd_export_heatmap, "write a per-vertex error heatmap")
    s.add_argument("--data", help="pairs JSONL with targets")
    s.add_argument("--model", help="head model file")
    s.add_argument("--method", help="matrix, linear or epm")
    s.add_argument("--out", help="PLY output")
    s.add_argument("--csv", help="CSV output (default: <out>.csv)")
    mapper_flags(s)

    s = add("grad-check", cmd_grad_check, "finite-difference check of the EPM gradients")
    s.add_argument("--seed", type=int, default=0, help="initialization seed")
    s.add_argument("--params", type=int, default=200, help="parameters to sample")
    s.add_argument("--tol", type=float, default=1e-3, help="pass threshold")
    return p


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    return None


def _apply_overrides(parser, argv):
    """Push config-file and environment values in as subparser defaults."""
    pre, _ = parser.parse_known_args(argv)
    if not pre.command:
        return
    sp = _subparser(parser, pre.command)
    values = {}
    if pre.config_path:
        _exists(pre.config_path)
        cp = configparser.ConfigParser()
        cp.read(pre.config_path)
        for section in ("common", pre.command):
            if cp.has_section(section):
                values.update(dict(cp[section]))
    flags = {a.option_strings[-1].lstrip("-"): a for a in sp._actions if a.option_strings and a.dest != "help"}
    for flag in flags:
        env = os.environ.get(ENV_PREFIX + flag.replace("-", "_").upper())
        if env is not None:
            values[flag] = env
    defaults = {}
    for key, raw in values.items():
        flag = key.replace("_", "-")
        action = flags.get(flag)
        if action is None:
            if key in ("common",):
                continue
            raise CliError("usage", f"unknown config key {key!r} for {pre.command}", 2)
        try:
            defaults[action.dest] = action.type(raw) if action.type else raw
        except (TypeError, ValueError):
            raise CliError("usage", f"bad value {raw!r} for {flag}", 2) from None
    sp.set_defaults(**defaults)


OUTPUT_DESTS = ("out", "report", "markdown", "csv", "vr_out", "model_out", "cloud_out", "matrix_out")


def _make_output_dirs(args):
    for dest in OUTPUT_DESTS:
        path = getattr(args, dest, None)
        if path and path != "-":
            parent = os.path.dirname(path)
            if parent:
                os.makedirs(parent, exist_ok=True)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_overrides(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if not args.command:
            parser.print_help()
            return 2
        resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        logger.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
        _make_output_dirs(args)
        args.func(args)
        return 0
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: missing-input: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        kind = {"FormatError": "format", "FormatVersionError": "format-version"}.get(type(exc).__name__, "input")
        if isinstance(exc, RuntimeError):
            kind = "runtime"
        print(f"error: {kind}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
