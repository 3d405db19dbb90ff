"""End-to-end experiment orchestration shared by the command line and the
acceptance suite: dataset construction per (zeta, seed), named model
variants, and the ablation grid over confounding strengths.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import evaluation as ev
from . import model as mdl
from . import simulator as sim
from . import training as tr
from .config import RunConfig

# Named variants: the full model, the unit-weight ablation (omega = 1), the
# unregularized ablation (alpha = gamma = 0) and the per-factor-RNN
# architecture.
VARIANTS = ("dcrn", "dcrn-w1", "dcrn-ga0", "hg-t")
BASELINES = ("mean", "last-value")


def variant_configs(run_cfg: RunConfig, variant: str):
    model_cfg = replace(run_cfg.model)
    train_cfg = replace(run_cfg.train, weights=replace(run_cfg.train.weights))
    if variant == "dcrn":
        pass
    elif variant == "dcrn-w1":
        train_cfg.use_propensity_weights = False
    elif variant == "dcrn-ga0":
        train_cfg.weights.alpha = 0.0
        train_cfg.weights.gamma = 0.0
    elif variant == "hg-t":
        model_cfg.architecture = "hg-t"
    else:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return model_cfg, train_cfg


def sim_config_for(run_cfg: RunConfig, zeta: float, seed: int) -> sim.SimConfig:
    return replace(run_cfg.sim, zeta=zeta, seed=seed)


def dataset_for(run_cfg: RunConfig, zeta: float, seed: int):
    return sim.generate_dataset(sim_config_for(run_cfg, zeta, seed))


def train_variant(dataset, run_cfg: RunConfig, variant: str, seed: int,
                  encoder_only: bool = False):
    """Train one variant; returns (model_cfg, params, reports dict)."""
    model_cfg, train_cfg = variant_configs(run_cfg, variant)
    train_cfg.seed = seed
    params, enc_report = tr.train_encoder(dataset, model_cfg, train_cfg)
    reports = {"encoder": enc_report}
    if not encoder_only:
        params, dec_report = tr.train_decoder(dataset, model_cfg, train_cfg, params)
        reports["decoder"] = dec_report
    return model_cfg, params, reports


def _train_cell(args):
    run_cfg, variant, zeta, seed = args
    dataset = dataset_for(run_cfg, zeta, seed)
    model_cfg, params, reports = train_variant(dataset, run_cfg, variant, seed)
    return {
        "variant": variant, "zeta": zeta, "seed": seed,
        "model_cfg": model_cfg,
        "param_values": {k: p.value for k, p in params.items()},
        "train_mean": ev.train_outcome_mean(dataset),
        "val_mse": reports["decoder"].best_val,
    }


def train_grid(run_cfg: RunConfig, variants, zetas, seeds, jobs: int = 1):
    """Train every (variant, zeta, seed) cell, optionally in parallel.

    Cells are independent runs with their own derived seeds and datasets, so
    process-level parallelism cannot change any result.
    """
    cells = [(run_cfg, v, z, s) for v in variants for z in zetas for s in seeds]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_cell, cells))
    else:
        results = [_train_cell(c) for c in cells]
    return {(r["variant"], r["zeta"], r["seed"]): r for r in results}


def _rebuild_predictor(record):
    params = {k: mdl.Tensor(v) for k, v in record["param_values"].items()}
    return ev.ModelPredictor(record["model_cfg"], params)


class TestSetCache:
    """Deterministic branched-test-set factory keyed by (zeta, seed, tau)."""

    def __init__(self, run_cfg: RunConfig):
        self.run_cfg = run_cfg
        self._cache = {}

    def __call__(self, zeta, seed, tau):
        key = (zeta, seed, tau)
        if key not in self._cache:
            cfg = sim_config_for(self.run_cfg, zeta, seed)
            self._cache[key] = sim.generate_counterfactual_test(cfg, tau)
        return self._cache[key]


def run_ablation(run_cfg: RunConfig, variants=VARIANTS, jobs: int = 1):
    """Train the grid, evaluate all variants plus baselines, analyze factors.

    Returns ``(EvalReport, factor_rows)``: the forecasting/plan tables over
    zeta x horizon cells (seed-averaged) and the factor-influence table of
    the full model trained at ``eval.factor_zeta``.
    """
    ecfg = run_cfg.eval
    zetas, seeds = list(ecfg.zetas), list(ecfg.seeds)
    trained = train_grid(run_cfg, variants, zetas, seeds, jobs=jobs)

    predictor_table = {}
    for (variant, zeta, seed), rec in trained.items():
        predictor_table[(variant, zeta, seed)] = _rebuild_predictor(rec)
    for zeta in zetas:
        for seed in seeds:
            any_rec = next((trained[(v, zeta, seed)] for v in variants
                            if (v, zeta, seed) in trained), None)
            if any_rec is None:
                continue
            predictor_table[("mean", zeta, seed)] = ev.MeanPredictor(any_rec["train_mean"])
            predictor_table[("last-value", zeta, seed)] = ev.LastValuePredictor()

    tests = TestSetCache(run_cfg)
    report = ev.ablation_suite(predictor_table, zetas, ecfg.horizons, seeds, tests)

    # Plan selection for the trained variants only (baselines are degenerate
    # choosers: a constant forecast always picks the first plan).
    for variant in variants:
        for zeta in zetas:
            for tau in ecfg.plan_horizons:
                accs, regrets, n_pat = [], [], 0
                for seed in seeds:
                    rec = trained.get((variant, zeta, seed))
                    if rec is None:
                        continue
                    scfg = sim_config_for(run_cfg, zeta, seed)
                    n_train, n_val, n_test = sim.split_sizes(scfg)
                    patients = list(range(n_train + n_val,
                                          min(scfg.n_patients,
                                              n_train + n_val + ecfg.n_plan_patients)))
                    test = ev.plan_selection_test(scfg, tau, patients,
                                                  plan_family=ecfg.plan_family)
                    res = ev.plan_selection_accuracy(_rebuild_predictor(rec), test)
                    accs.append(res.accuracy)
                    regrets.append(res.mean_regret)
                    n_pat = res.n_patients
                if accs:
                    report.plan_rows.append({
                        "model": variant, "zeta": zeta, "tau": tau,
                        "accuracy": float(np.mean(accs)),
                        "mean_regret": float(np.mean(regrets)),
                        "n_patients": n_pat, "n_seeds": len(accs)})

    factor_rows = []
    fz = ecfg.factor_zeta
    rec = trained.get(("dcrn", fz, seeds[0]))
    if rec is None and "dcrn" in variants:
        dataset = dataset_for(run_cfg, fz, seeds[0])
        model_cfg, params, _ = train_variant(dataset, run_cfg, "dcrn", seeds[0],
                                             encoder_only=True)
        factor_rows = ev.factor_analysis(params, model_cfg, dataset.covariate_names)
    elif rec is not None:
        params = {k: mdl.Tensor(v) for k, v in rec["param_values"].items()}
        factor_rows = ev.factor_analysis(params, rec["model_cfg"],
                                         list(sim.COVARIATE_NAMES))
    return report, factor_rows
