"""Command-line entry point tying simulation, training, evaluation, factor
analysis, ablations, hyperparameter search and CSV ingestion into
reproducible pipelines.

Every command resolves (config file, --seed) into a full configuration,
writes its artifacts under --out, and drops a ``manifest.json`` recording
the resolved config, its hash, and a checksum for every input and output.
Re-running a command with the same config and seed reproduces every
artifact byte for byte (the manifest's timestamps aside).

Exit codes: 0 success; 2 usage errors (bad flags, missing files, invalid
config); 1 runtime failures, with a single ``category: message`` line on
stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import data as dio
from . import evaluation as ev
from . import model as mdl
from . import pipelines as pl
from . import simulator as sim
from . import training as tr
from .config import ConfigError, RunConfig, config_hash, config_to_dict, dump_config, load_config


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve_config(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        cfg = load_config(path)
    else:
        cfg = RunConfig()
        cfg.validate()
    cfg.apply_seed(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


class Manifest:
    def __init__(self, command: str, argv, cfg: RunConfig):
        self.record = {
            "command": command,
            "argv": list(argv),
            "seed": cfg.seed,
            "config": config_to_dict(cfg),
            "config_hash": config_hash(cfg),
            "package_version": __version__,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "inputs": {},
            "outputs": {},
        }

    def add_input(self, path: Path):
        self.record["inputs"][str(path)] = _sha256(path)

    def add_output(self, path: Path):
        self.record["outputs"][str(path)] = _sha256(path)

    def write(self, out_dir: Path):
        self.record["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(self.record, fh, indent=2)
            fh.write("\n")


def _header(cfg: RunConfig) -> str:
    return f"seed={cfg.seed} config_hash={config_hash(cfg)}"


def _load_sim_dataset(path: Path):
    dataset = dio.load_dataset(path)
    sim_dict = dataset.metadata.get("sim_config")
    if sim_dict is None:
        raise RuntimeFailure("data-error",
                             f"dataset {path} has no simulator provenance; "
                             "counterfactual evaluation needs a simulated dataset")
    return dataset, sim.SimConfig(**sim_dict)


def _load_model(path: Path):
    try:
        return mdl.load_model(path)
    except (ValueError, KeyError) as exc:
        raise RuntimeFailure("data-error", f"cannot load model {path}: {exc}") from None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    if args.zeta is not None:
        cfg.sim.zeta = args.zeta
    if args.n_patients is not None:
        cfg.sim.n_patients = args.n_patients
    cfg.validate()
    out = _out_dir(args)
    manifest = Manifest("simulate", sys.argv[1:], cfg)
    dataset = sim.generate_dataset(cfg.sim)
    path = out / "dataset.jsonl"
    dio.save_dataset(path, dataset)
    manifest.add_output(path)
    manifest.write(out)
    print(f"wrote {path} ({len(dataset.trajectories)} patients, "
          f"treated fraction {dataset.treated_fraction:.3f})")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dataset_path = _require_file(args.dataset, "dataset")
    if args.variant not in pl.VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; choose from {pl.VARIANTS}")
    out = _out_dir(args)
    manifest = Manifest("train", sys.argv[1:], cfg)
    manifest.add_input(dataset_path)
    dataset = dio.load_dataset(dataset_path)
    model_cfg, train_cfg = pl.variant_configs(cfg, args.variant)
    train_cfg.seed = cfg.seed
    try:
        params, enc_report = tr.train_encoder(dataset, model_cfg, train_cfg)
        params, dec_report = tr.train_decoder(dataset, model_cfg, train_cfg, params)
    except ValueError as exc:
        raise RuntimeFailure("train-error", str(exc)) from None
    model_path = out / "model.json"
    mdl.save_model(model_path, model_cfg, params)
    enc_csv = out / "train_encoder.csv"
    dec_csv = out / "train_decoder.csv"
    enc_report.write_csv(enc_csv)
    dec_report.write_csv(dec_csv)
    for p in (model_path, enc_csv, dec_csv):
        manifest.add_output(p)
    manifest.write(out)
    print(f"wrote {model_path} (variant {args.variant}, "
          f"val MSE {dec_report.best_val:.6f})")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    dataset_path = _require_file(args.dataset, "dataset")
    model_path = _require_file(args.model, "model checkpoint")
    out = _out_dir(args)
    manifest = Manifest("evaluate", sys.argv[1:], cfg)
    manifest.add_input(dataset_path)
    manifest.add_input(model_path)
    dataset, sim_cfg = _load_sim_dataset(dataset_path)
    model_cfg, params = _load_model(model_path)
    predictor = ev.ModelPredictor(model_cfg, params)
    baselines = {"mean": ev.MeanPredictor(ev.train_outcome_mean(dataset)),
                 "last-value": ev.LastValuePredictor()}
    report = ev.EvalReport()
    for tau in cfg.eval.horizons:
        test = sim.generate_counterfactual_test(sim_cfg, tau)
        for name, pred in [("model", predictor)] + list(baselines.items()):
            res = ev.counterfactual_eval(pred, test)
            report.nrmse_rows.append({"model": name, "zeta": sim_cfg.zeta, "tau": tau,
                                      "mean": res.nrmse, "sd": 0.0, "n_seeds": 1})
    n_train, n_val, _ = sim.split_sizes(sim_cfg)
    patients = list(range(n_train + n_val,
                          min(sim_cfg.n_patients,
                              n_train + n_val + cfg.eval.n_plan_patients)))
    for tau in cfg.eval.plan_horizons:
        test = ev.plan_selection_test(sim_cfg, tau, patients,
                                      plan_family=cfg.eval.plan_family)
        res = ev.plan_selection_accuracy(predictor, test)
        report.plan_rows.append({"model": "model", "zeta": sim_cfg.zeta, "tau": tau,
                                 "accuracy": res.accuracy,
                                 "mean_regret": res.mean_regret,
                                 "n_patients": res.n_patients, "n_seeds": 1})
    nrmse_path = out / "nrmse_by_zeta.csv"
    plan_path = out / "plan_accuracy.csv"
    report.write_nrmse_csv(nrmse_path, header=_header(cfg))
    report.write_plan_csv(plan_path, header=_header(cfg))
    for p in (nrmse_path, plan_path):
        manifest.add_output(p)
    manifest.write(out)
    print(f"wrote {nrmse_path} and {plan_path}")
    return 0


def cmd_analyze_factors(args) -> int:
    cfg = _resolve_config(args)
    model_path = _require_file(args.model, "model checkpoint")
    out = _out_dir(args)
    manifest = Manifest("analyze-factors", sys.argv[1:], cfg)
    manifest.add_input(model_path)
    model_cfg, params = _load_model(model_path)
    names = (args.covariates.split(",") if args.covariates
             else list(sim.COVARIATE_NAMES)[:model_cfg.covariate_dim])
    if len(names) != model_cfg.covariate_dim:
        raise UsageError(f"expected {model_cfg.covariate_dim} covariate names, "
                         f"got {len(names)}")
    rows = ev.factor_analysis(params, model_cfg, names)
    path = out / "factor_influence.csv"
    ev.write_factor_csv(path, rows, header=_header(cfg))
    manifest.add_output(path)
    manifest.write(out)
    print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    manifest = Manifest("ablate", sys.argv[1:], cfg)
    variants = args.variants.split(",") if args.variants else list(pl.VARIANTS)
    for v in variants:
        if v not in pl.VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {pl.VARIANTS}")
    report, factor_rows = pl.run_ablation(cfg, variants=variants, jobs=args.jobs)
    nrmse_path = out / "nrmse_by_zeta.csv"
    plan_path = out / "plan_accuracy.csv"
    factor_path = out / "factor_influence.csv"
    report.write_nrmse_csv(nrmse_path, header=_header(cfg))
    report.write_plan_csv(plan_path, header=_header(cfg))
    ev.write_factor_csv(factor_path, factor_rows, header=_header(cfg))
    for p in (nrmse_path, plan_path, factor_path):
        manifest.add_output(p)
    if report.warnings:
        warn_path = out / "warnings.txt"
        warn_path.write_text("\n".join(report.warnings) + "\n")
        manifest.add_output(warn_path)
    manifest.write(out)
    print(f"wrote {nrmse_path}, {plan_path}, {factor_path}")
    return 0


def cmd_hpsearch(args) -> int:
    cfg = _resolve_config(args)
    dataset_path = _require_file(args.dataset, "dataset")
    out = _out_dir(args)
    manifest = Manifest("hpsearch", sys.argv[1:], cfg)
    manifest.add_input(dataset_path)
    dataset = dio.load_dataset(dataset_path)
    try:
        best, leaderboard = tr.random_search(dataset, cfg.model, cfg.train,
                                             n_trials=args.trials, seed=cfg.seed,
                                             jobs=args.jobs)
    except RuntimeError as exc:
        raise RuntimeFailure("search-error", str(exc)) from None
    board_path = out / "leaderboard.csv"
    with open(board_path, "w") as fh:
        fh.write("# " + _header(cfg) + "\n")
        fh.write("rank,trial,status,val_mse,encoder_val_mse,learning_rate,batch_size,"
                 "rnn_hidden,representation_size,fc_hidden,dropout,alpha,beta,gamma\n")
        for rank, rec in enumerate(leaderboard):
            t, mcfg = rec["train_cfg"], rec["model_cfg"]
            fh.write(",".join(map(str, [
                rank, rec["trial"], rec["status"].split(":")[0], repr(rec["val_mse"]),
                repr(rec["encoder_val_mse"]), repr(t.learning_rate), t.batch_size,
                mcfg.rnn_hidden, mcfg.representation_size, mcfg.fc_hidden,
                repr(mcfg.dropout), repr(t.weights.alpha), repr(t.weights.beta),
                repr(t.weights.gamma)])) + "\n")
    best_cfg = replace(cfg, model=best["model_cfg"], train=best["train_cfg"])
    best_path = out / "best_config.yaml"
    best_path.write_text(dump_config(best_cfg))
    manifest.add_output(board_path)
    manifest.add_output(best_path)
    manifest.write(out)
    print(f"wrote {board_path}; best val MSE {best['val_mse']:.6f}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _resolve_config(args)
    csv_path = _require_file(args.input, "input CSV")
    out = _out_dir(args)
    manifest = Manifest("ingest", sys.argv[1:], cfg)
    manifest.add_input(csv_path)
    schema = None
    if args.schema:
        schema_path = _require_file(args.schema, "schema file")
        manifest.add_input(schema_path)
        with open(schema_path) as fh:
            schema = dio.CsvSchema.from_dict(yaml.safe_load(fh) or {})
    try:
        dataset = dio.ingest_longitudinal_csv(csv_path, schema)
    except dio.ParseError as exc:
        raise RuntimeFailure("parse-error", str(exc)) from None
    path = out / "dataset.jsonl"
    dio.save_dataset(path, dataset)
    manifest.add_output(path)
    manifest.write(out)
    print(f"wrote {path} ({len(dataset.trajectories)} patients)")
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factorcast",
        description="Counterfactual sequence forecasting laboratory: simulate "
                    "biased tumour-growth cohorts, train disentangled "
                    "encoder-decoder forecasters, and evaluate counterfactual "
                    "accuracy, treatment-plan selection and factor influence. "
                    "File formats are documented in docs/FORMATS.md.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="generate an observational dataset")
    common(p)
    p.add_argument("--zeta", type=float, default=None, help="override sim.zeta")
    p.add_argument("--n-patients", type=int, default=None, help="override sim.n_patients")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train encoder then decoder on a dataset")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset.jsonl from simulate/ingest")
    p.add_argument("--variant", default="dcrn",
                   help=f"model variant, one of {', '.join(pl.VARIANTS)}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="counterfactual evaluation of a trained model")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True, help="model checkpoint from train")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-factors", help="export per-covariate factor influence")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--covariates", default=None,
                   help="comma-separated covariate names (defaults to the simulator's)")
    p.set_defaults(func=cmd_analyze_factors)

    p = sub.add_parser("ablate", help="train and evaluate all variants over the zeta grid")
    common(p)
    p.add_argument("--variants", default=None,
                   help=f"comma-separated subset of {', '.join(pl.VARIANTS)}")
    p.add_argument("--jobs", type=int, default=1, help="parallel training workers")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("hpsearch", help="seeded random hyperparameter search")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_hpsearch)

    p = sub.add_parser("ingest", help="convert a longitudinal CSV into a dataset file")
    common(p)
    p.add_argument("--input", required=True, help="CSV with id/step/covariates/treatment/outcome")
    p.add_argument("--schema", default=None, help="YAML mapping of column roles")
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage-error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config-error: {exc}", file=sys.stderr)
        return 2
    except dio.ParseError as exc:
        print(f"parse-error: {exc}", file=sys.stderr)
        return 1
    except RuntimeFailure as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 1
    except sim.OverlapError as exc:
        print(f"overlap-error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # keep the contract: one parsable line, exit 1
        print(f"internal-error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
