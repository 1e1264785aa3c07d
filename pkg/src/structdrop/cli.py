"""Command-line entry point: ``structdrop {train,eval,ood,diagnose,verify}``.

Exit codes: 0 success, 1 unexpected error, 2 configuration error,
3 data error, 4 training diverged.

Relative output directories are resolved against ``$STRUCTDROP_OUTPUT_ROOT``
when it is set, otherwise against the working directory.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile

import numpy as np

from . import diagnostics as diag
from . import metrics
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .data import DataError, load_dataset
from .inference import (DivergenceError, Model, Objective, checkpoint_dict, model_from_checkpoint,
                        predict, train)
from .layers import VsdDense
from .tensor import make_rng

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
OUTPUT_ROOT_ENV = "STRUCTDROP_OUTPUT_ROOT"
TRACE_COLUMNS = ("epoch", "lr", "objective", "data_term", "kl_term")


# -- file helpers ----------------------------------------------------------

def atomic_write(path: str, text: str):
    """Write to a temp file in the same directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def resolve_output(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    # repr round-trips float64 exactly and is platform independent
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def trace_csv(trace) -> str:
    return _csv_text(TRACE_COLUMNS, [[_num(row[c]) for c in TRACE_COLUMNS] for row in trace])


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from None


# -- model assembly --------------------------------------------------------

def model_spec(cfg: ExperimentConfig, handle) -> dict:
    """Fill in data-dependent parts of the model section (input shape, output width, likelihood)."""
    arch = [dict(layer) for layer in cfg.model.architecture]
    n_out = handle.n_classes if handle.task == "classification" else 1
    last_dense = max((i for i, l in enumerate(arch) if l["type"] == "dense"), default=None)
    if last_dense is None:
        raise ConfigError("model.architecture needs at least one dense layer")
    if arch[last_dense].get("units") is None:
        arch[last_dense]["units"] = n_out
    if arch[last_dense]["units"] != n_out:
        raise ConfigError(f"final dense layer has {arch[last_dense]['units']} units, task needs {n_out}")
    likelihood = cfg.model.likelihood or ("categorical" if handle.task == "classification" else "gaussian")
    return {
        "architecture": arch,
        "input_shape": list(handle.input_shape),
        "variant": cfg.model.variant,
        "layer_defaults": dict(cfg.model.layer_defaults),
        "likelihood": likelihood,
        "log_precision": float(cfg.model.log_precision),
        "learn_precision": bool(cfg.model.learn_precision),
    }


def _load(path):
    ckpt = _read_json(path)
    try:
        model = model_from_checkpoint(ckpt)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad checkpoint: {exc}") from None
    cfg = ExperimentConfig.from_dict(ckpt["config"]) if "config" in ckpt else None
    return ckpt, model, cfg


def _eval_split(handle):
    if handle.X_test is not None:
        return handle.X_test, handle.y_test, "test"
    return handle.X_train, handle.y_train, "train"


# -- commands --------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out_dir: str | None = None, quiet: bool = False) -> dict:
    out_dir = resolve_output(out_dir or cfg.output_dir)
    handle = load_dataset(cfg.data)
    spec = model_spec(cfg, handle)
    train_spec = cfg.train.to_spec()
    try:
        model = Model(spec, seed=train_spec.seed)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"cannot build model: {exc}") from None
    objective = Objective(cfg.model.variant, cfg.objective.kl_weight, len(handle.X_train),
                          spec["likelihood"], cfg.objective.mc_train)

    def log(row):
        if not quiet:
            print(f"epoch {row['epoch']:4d}  objective {row['objective']:.6g}  kl {row['kl_term']:.6g}",
                  file=sys.stderr)

    diverged = None
    try:
        _, trace = train(model, handle.X_train, handle.y_train, train_spec, objective, callback=log)
    except DivergenceError as exc:
        diverged, trace = exc, exc.trace
    ckpt = checkpoint_dict(model, train_spec, objective, len(trace))
    ckpt["config"] = cfg.to_dict()
    atomic_write(os.path.join(out_dir, "checkpoint.json"), _json(ckpt))
    atomic_write(os.path.join(out_dir, "trace.csv"), trace_csv(trace))
    atomic_write(os.path.join(out_dir, "config.resolved.yaml"), cfg.dumps())
    if diverged is not None:
        raise diverged
    return {"output_dir": out_dir, "epochs": len(trace)}


def _report_for(model, X, y, cfg, S):
    rng = make_rng(cfg.eval.seed)
    if model.likelihood == "categorical":
        probs = predict(model, X, S, rng)
        return metrics.classification_report(probs, y, cfg.eval.ece_bins, cfg.eval.entropy_bins,
                                             cfg.eval.normalize_entropy), probs
    mean, var = predict(model, X, S, rng)
    return metrics.MetricsReport(**metrics.regression_metrics(mean, var, y)), None


def cmd_eval(checkpoint: str, overrides=None, samples: int | None = None, out_dir: str | None = None) -> dict:
    ckpt, model, cfg = _load(checkpoint)
    if cfg is None:
        raise ConfigError("checkpoint carries no config; cannot locate its dataset")
    cfg = ExperimentConfig.from_dict(apply_overrides(cfg.to_dict(), overrides))
    handle = load_dataset(cfg.data)
    X, y, split = _eval_split(handle)
    S = samples or cfg.eval.mc_samples
    report, _ = _report_for(model, X, y, cfg, S)
    report.meta = {"checkpoint": os.path.abspath(checkpoint), "split": split, "mc_samples": S,
                   "n": int(len(X))}
    out_dir = resolve_output(out_dir) if out_dir else os.path.dirname(os.path.abspath(checkpoint))
    atomic_write(os.path.join(out_dir, "report.json"), report.to_json() + "\n")
    atomic_write(os.path.join(out_dir, "report.csv"), report.to_csv())
    return report.to_dict()


def cmd_ood(checkpoint: str, overrides=None, samples: int | None = None, out_dir: str | None = None) -> dict:
    ckpt, model, cfg = _load(checkpoint)
    if cfg is None:
        raise ConfigError("checkpoint carries no config")
    cfg = ExperimentConfig.from_dict(apply_overrides(cfg.to_dict(), overrides))
    if cfg.ood_data is None:
        raise ConfigError("ood needs an ood_data descriptor (e.g. --set ood_data.source=...)")
    if model.likelihood != "categorical":
        raise ConfigError("ood detection needs a classification model")
    handle = load_dataset(cfg.data)
    X_in, _, _ = _eval_split(handle)
    # out-of-distribution inputs get the in-distribution training normalisation
    out_handle = load_dataset({**cfg.ood_data, "normalize": False})
    X_out = out_handle.X_test if out_handle.X_test is not None else out_handle.X_train
    X_out = handle.normalize_inputs(X_out)
    if X_out.shape[1:] != X_in.shape[1:]:
        raise DataError(f"ood inputs have shape {X_out.shape[1:]}, model expects {X_in.shape[1:]}")
    S = samples or cfg.eval.mc_samples
    p_in = predict(model, X_in, S, make_rng(cfg.eval.seed))
    p_out = predict(model, X_out, S, make_rng(cfg.eval.seed + 1))
    scores = metrics.ood_metrics(metrics.max_softmax(p_in), metrics.max_softmax(p_out))
    ent_in = metrics.predictive_entropy(p_in, cfg.eval.entropy_bins, cfg.eval.normalize_entropy)
    ent_out = metrics.predictive_entropy(p_out, cfg.eval.entropy_bins, cfg.eval.normalize_entropy)
    report = metrics.MetricsReport(
        mean_predictive_entropy=ent_out.mean,
        entropy_histogram={"bin_edges": ent_out.bin_edges.tolist(), "counts": ent_out.counts.tolist()},
        meta={"checkpoint": os.path.abspath(checkpoint), "mc_samples": S, "n_in": int(len(X_in)),
              "n_out": int(len(X_out)), "mean_entropy_in": ent_in.mean},
        **scores)
    out_dir = resolve_output(out_dir) if out_dir else os.path.dirname(os.path.abspath(checkpoint))
    atomic_write(os.path.join(out_dir, "ood_report.json"), report.to_json() + "\n")
    hist_rows = [[_num(ent_in.bin_edges[i]), _num(ent_in.bin_edges[i + 1]), int(ent_in.counts[i]),
                  int(ent_out.counts[i])] for i in range(len(ent_in.counts))]
    atomic_write(os.path.join(out_dir, "entropy_hist.csv"),
                 _csv_text(("bin_lower", "bin_upper", "count_in", "count_out"), hist_rows))
    cdf_rows = [["in", _num(x), _num(c)] for x, c in zip(ent_in.cdf_x, ent_in.cdf_y)]
    cdf_rows += [["out", _num(x), _num(c)] for x, c in zip(ent_out.cdf_x, ent_out.cdf_y)]
    atomic_write(os.path.join(out_dir, "entropy_cdf.csv"), _csv_text(("set", "entropy", "cdf"), cdf_rows))
    return report.to_dict()


def cmd_diagnose(checkpoint: str, n_samples: int = 2000, batch: int = 32, out_dir: str | None = None) -> dict:
    """Spectral norm and stable rank of every weight matrix, plus the regularizer
    (MC and Gauss-Newton) at each structured-noise dense layer."""
    ckpt, model, cfg = _load(checkpoint)
    result = {"weights": diag.weight_summary(model.network), "regularizer": []}
    if cfg is not None:
        handle = load_dataset(cfg.data)
        X = handle.X_train[:batch]
        loss = "cross_entropy" if model.likelihood == "categorical" else "squared"
        for i, layer in enumerate(model.network.layers):
            if isinstance(layer, VsdDense) and layer.noise:
                alpha = np.exp(layer.log_alpha.value)
                U = layer.chain.matrix()
                est = diag.estimate_regularizer(model.network, X, alpha, U, layer=i, loss=loss,
                                                n_samples=n_samples, rng=make_rng(0))
                result["regularizer"].append(est.to_dict())
    out_dir = resolve_output(out_dir) if out_dir else os.path.dirname(os.path.abspath(checkpoint))
    path = os.path.join(out_dir, "report.json")
    report = _read_json(path) if os.path.exists(path) else {"schema_version": metrics.SCHEMA_VERSION}
    report["diagnostics"] = result
    atomic_write(path, _json(report))
    return result


def cmd_verify(stream=None) -> bool:
    from .verify import run_all

    return run_all(stream or sys.stdout)


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structdrop", description="Structured-dropout Bayesian networks.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint, trace and resolved config")
    t.add_argument("--config", "-c", help="YAML or JSON experiment config")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. train.lr=0.01 (repeatable)")
    t.add_argument("--output", "-o", help="output directory (overrides output_dir)")
    t.add_argument("--quiet", "-q", action="store_true")

    for name, helptext in (("eval", "evaluate a checkpoint on its test split"),
                           ("ood", "out-of-distribution detection against ood_data")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("checkpoint")
        e.add_argument("--samples", "-S", type=int, help="Monte-Carlo samples")
        e.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        e.add_argument("--output", "-o", help="report directory (default: next to the checkpoint)")

    d = sub.add_parser("diagnose", help="spectral norms, stable ranks and regularizer estimates")
    d.add_argument("checkpoint")
    d.add_argument("--samples", type=int, default=2000, help="MC samples for the regularizer")
    d.add_argument("--batch", type=int, default=32, help="training inputs used for the regularizer")
    d.add_argument("--output", "-o")

    sub.add_parser("verify", help="run the built-in oracle checks")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = load_config(args.config, args.overrides)
            res = cmd_train(cfg, args.output, args.quiet)
            print(f"wrote {res['output_dir']}")
        elif args.command == "eval":
            print(json.dumps(cmd_eval(args.checkpoint, args.overrides, args.samples, args.output),
                             indent=2, sort_keys=True))
        elif args.command == "ood":
            print(json.dumps(cmd_ood(args.checkpoint, args.overrides, args.samples, args.output),
                             indent=2, sort_keys=True))
        elif args.command == "diagnose":
            print(json.dumps(cmd_diagnose(args.checkpoint, args.samples, args.batch, args.output),
                             indent=2, sort_keys=True))
        else:
            return EXIT_OK if cmd_verify() else EXIT_ERROR
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
