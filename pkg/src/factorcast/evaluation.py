"""Counterfactual evaluation: normalized RMSE over branched test sets,
optimal-plan selection accuracy, factor-influence analysis, baselines and
the ablation grid. Everything reduces to predictors with the signature
``predictor(test_set) -> [n_items, tau]`` so learned models, the simulator
oracle and trivial baselines run through one harness.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses as ls
from . import model as mdl
from . import simulator as sim
from .simulator import CfItem, CfTestSet, SimConfig


def nrmse(predictions, truths, normalizer: float) -> float:
    """Root mean squared error divided by the outcome scale."""
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    truths = np.asarray(truths, dtype=np.float64).reshape(-1)
    if predictions.size == 0:
        raise ValueError("nrmse over empty input")
    if predictions.shape != truths.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {truths.shape}")
    if not normalizer > 0:
        raise ValueError(f"normalizer must be positive, got {normalizer}")
    return float(np.sqrt(np.mean((predictions - truths) ** 2)) / normalizer)


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------

class ModelPredictor:
    """Batched encode-then-decode over a counterfactual test set."""

    def __init__(self, model_cfg: mdl.ModelConfig, params):
        self.cfg = model_cfg
        self.params = params

    def __call__(self, test: CfTestSet) -> np.ndarray:
        preds = np.empty((len(test.items), test.tau))
        by_cut: dict[int, list[int]] = {}
        for i, item in enumerate(test.items):
            by_cut.setdefault(item.cut, []).append(i)
        for cut, rows in sorted(by_cut.items()):
            patients = sorted({test.items[i].patient for i in rows})
            pos = {p: k for k, p in enumerate(patients)}
            x = np.stack([test.histories[p].covariates[:cut] for p in patients])
            a = np.stack([test.histories[p].treatments[:cut] for p in patients])
            y = np.stack([test.histories[p].outcomes[:cut] for p in patients])
            state = mdl.encode_history(self.params, self.cfg, x, a, y)
            sel = np.array([pos[test.items[i].patient] for i in rows])
            start = mdl.EncoderState(
                phi=state.phi[sel],
                factors=None if state.factors is None else tuple(f[sel] for f in state.factors),
                state_a=(state.state_a[0][sel], state.state_a[1][sel]),
                state_y=(state.state_y[0][sel], state.state_y[1][sel]))
            plans = np.stack([test.items[i].plan for i in rows])
            prev = np.array([test.histories[test.items[i].patient].outcomes[cut - 1]
                             for i in rows])
            steps = mdl.decoder_forward(self.params, self.cfg, start, plans, prev,
                                        mode="autoregressive")
            preds[rows, :] = mdl.decoder_predictions(steps)
        return preds


class OraclePredictor:
    """Re-simulates each plan from the hidden branch state with the test
    set's own noise draws; the harness self-consistency reference."""

    def __call__(self, test: CfTestSet) -> np.ndarray:
        preds = np.empty((len(test.items), test.tau))
        for i, item in enumerate(test.items):
            statics, state = test.snapshots[(item.patient, item.cut)]
            eps_r, eps_k = test.noise[(item.patient, item.cut)]
            preds[i] = sim.rollout_outcomes(statics, state, item.plan, eps_r, eps_k)
        return preds


class MeanPredictor:
    """Forecasts the training outcome mean at every horizon."""

    def __init__(self, mean_outcome: float):
        self.mean_outcome = float(mean_outcome)

    def __call__(self, test: CfTestSet) -> np.ndarray:
        return np.full((len(test.items), test.tau), self.mean_outcome)


class LastValuePredictor:
    """Carries the last observed outcome forward over the horizon."""

    def __call__(self, test: CfTestSet) -> np.ndarray:
        preds = np.empty((len(test.items), test.tau))
        for i, item in enumerate(test.items):
            preds[i] = test.histories[item.patient].outcomes[item.cut - 1]
        return preds


def train_outcome_mean(dataset) -> float:
    train = dataset.split("train")
    return float(np.mean(np.concatenate([t.outcomes for t in train])))


# ---------------------------------------------------------------------------
# Counterfactual forecasting metric
# ---------------------------------------------------------------------------

@dataclass
class CfEvalResult:
    tau: int
    nrmse: float              # at the final (tau-step-ahead) horizon
    nrmse_per_step: list[float]
    normalizer: float
    n_items: int


def counterfactual_eval(predictor, test: CfTestSet, normalizer: float | None = None) -> CfEvalResult:
    """Evaluate a predictor's tau-step-ahead forecasts on a branched test set.

    The headline number is the normalized RMSE at the final step of the
    rollout; per-step values cover the whole path. The normalizer defaults
    to the maximum absolute ground-truth outcome of the evaluation set.
    """
    truth = np.stack([item.outcomes for item in test.items])
    preds = np.asarray(predictor(test))
    if preds.shape != truth.shape:
        raise ValueError(f"predictor returned {preds.shape}, expected {truth.shape}")
    if normalizer is None:
        normalizer = float(np.abs(truth).max())
    per_step = [nrmse(preds[:, u], truth[:, u], normalizer) for u in range(test.tau)]
    return CfEvalResult(tau=test.tau, nrmse=per_step[-1], nrmse_per_step=per_step,
                        normalizer=normalizer, n_items=len(test.items))


# ---------------------------------------------------------------------------
# Optimal-plan selection
# ---------------------------------------------------------------------------

def all_plans(tau: int) -> list[np.ndarray]:
    return [np.array(p, dtype=np.int64) for p in itertools.product((0, 1), repeat=tau)]


def plan_selection_test(config: SimConfig, tau: int, patients: list[int],
                        plan_family: str = "all") -> CfTestSet:
    """One history per patient (cut at max_steps - tau), branched into the
    candidate plan family with common noise draws."""
    cut = config.max_steps - tau
    if cut < 1:
        raise ValueError("horizon leaves no observable history")
    plans = all_plans(tau) if plan_family == "all" else sim.one_hot_plans(tau)
    test = CfTestSet(tau=tau, config=config, items=[], histories={})
    for idx in patients:
        statics, traj, states = sim.simulate_patient(config, idx, keep_states=True)
        traj.split = "test"
        test.histories[idx] = traj
        nrng = sim.cf_noise_rng(config.seed, idx, cut)
        eps_r = nrng.normal(0.0, math.sqrt(config.noise_rho_var), size=tau)
        eps_k = nrng.normal(0.0, math.sqrt(config.noise_kappa_var), size=tau)
        branch = states[cut - 1]
        test.snapshots[(idx, cut)] = (statics, branch)
        test.noise[(idx, cut)] = (eps_r, eps_k)
        for plan in plans:
            outcomes = sim.rollout_outcomes(statics, branch, plan, eps_r, eps_k)
            test.items.append(CfItem(patient=idx, cut=cut, plan=plan, outcomes=outcomes))
    return test


@dataclass
class PlanSelectionResult:
    tau: int
    accuracy: float      # exact plan match against the enumerated optimum
    mean_regret: float   # chosen plan's true final outcome minus the optimum
    n_patients: int


def plan_selection_accuracy(predictor, test: CfTestSet) -> PlanSelectionResult:
    """Score a predictor's chosen plans against the brute-force optimum.

    The predictor forecasts the final outcome under every candidate plan of
    each history; the argmin plan (lexicographic tie-break, the order the
    plans are enumerated in) is compared with the simulator's optimum under
    the same noise draws.
    """
    preds = np.asarray(predictor(test))
    final = preds[:, -1]
    by_patient: dict[int, list[int]] = {}
    for i, item in enumerate(test.items):
        by_patient.setdefault(item.patient, []).append(i)
    hits, regrets = 0, []
    for patient, rows in sorted(by_patient.items()):
        chosen_row = rows[int(np.argmin(final[rows]))]
        chosen = test.items[chosen_row]
        truth_finals = np.array([test.items[r].outcomes[-1] for r in rows])
        best_row = rows[int(np.argmin(truth_finals))]
        best = test.items[best_row]
        if np.array_equal(chosen.plan, best.plan):
            hits += 1
        regrets.append(chosen.outcomes[-1] - best.outcomes[-1])
    n = len(by_patient)
    return PlanSelectionResult(tau=test.tau, accuracy=hits / n,
                               mean_regret=float(np.mean(regrets)), n_patients=n)


class RandomPlanPredictor:
    """Uniformly random plan chooser (scores 2**-tau in expectation)."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, test: CfTestSet) -> np.ndarray:
        by_patient: dict[int, list[int]] = {}
        for i, item in enumerate(test.items):
            by_patient.setdefault(item.patient, []).append(i)
        preds = np.ones((len(test.items), test.tau))
        for patient, rows in sorted(by_patient.items()):
            pick = self.rng.integers(len(rows))
            preds[rows[pick], -1] = 0.0  # the argmin lands on this plan
        return preds


# ---------------------------------------------------------------------------
# Factor-influence analysis
# ---------------------------------------------------------------------------

def factor_analysis(params, model_cfg: mdl.ModelConfig, covariate_names) -> list[dict]:
    """Per-covariate influence on each factor, raw and normalized.

    Shares normalize each covariate's row across the three factors (the
    radar-plot data). Rows whose total influence is zero get uniform shares.
    """
    vecs = {f: ls.influence_vector(params, model_cfg, f, source="covariates").value
            for f in ("i", "c", "o")}
    rows = []
    for d, name in enumerate(covariate_names):
        raw = np.array([vecs["i"][d], vecs["c"][d], vecs["o"][d]])
        total = raw.sum()
        shares = raw / total if total > 0 else np.full(3, 1.0 / 3.0)
        rows.append({"covariate": name,
                     "influence_i": float(raw[0]), "influence_c": float(raw[1]),
                     "influence_o": float(raw[2]),
                     "share_i": float(shares[0]), "share_c": float(shares[1]),
                     "share_o": float(shares[2])})
    return rows


def write_factor_csv(path, rows, header: str | None = None) -> None:
    cols = ["covariate", "influence_i", "influence_c", "influence_o",
            "share_i", "share_c", "share_o"]
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) if c == "covariate" else repr(r[c])
                              for c in cols) + "\n")


def read_metric_csv(path) -> list[dict]:
    """Parse a metrics CSV written by this module back into rows."""
    rows = []
    with open(path) as fh:
        lines = [l.rstrip("\n") for l in fh if not l.startswith("#")]
    cols = lines[0].split(",")
    for line in lines[1:]:
        parts = line.split(",")
        row = {}
        for c, v in zip(cols, parts):
            try:
                row[c] = float(v) if v != "" else ""
            except ValueError:
                row[c] = v
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    nrmse_rows: list[dict] = field(default_factory=list)
    plan_rows: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def write_nrmse_csv(self, path, header: str | None = None) -> None:
        cols = ["model", "zeta", "tau", "mean", "sd", "n_seeds"]
        with open(path, "w") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write(",".join(cols) + "\n")
            for r in self.nrmse_rows:
                fh.write(",".join(str(r[c]) if c in ("model", "n_seeds")
                                  else repr(float(r[c])) for c in cols) + "\n")

    def write_plan_csv(self, path, header: str | None = None) -> None:
        cols = ["model", "zeta", "tau", "accuracy", "mean_regret", "n_patients", "n_seeds"]
        with open(path, "w") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write(",".join(cols) + "\n")
            for r in self.plan_rows:
                fh.write(",".join(str(r[c]) if c in ("model", "n_patients", "n_seeds")
                                  else repr(float(r[c])) for c in cols) + "\n")


def ablation_suite(predictor_table, zetas, horizons, seeds, test_builder) -> EvalReport:
    """Evaluate every (model, zeta, tau) cell, averaging over seeds.

    ``predictor_table[(model, zeta, seed)]`` yields a predictor or None;
    missing or None entries are skipped with a recorded warning.
    ``test_builder(zeta, seed, tau)`` supplies the branched test set (cached
    by the caller as needed).
    """
    report = EvalReport()
    models = sorted({k[0] for k in predictor_table})
    for model in models:
        for zeta in zetas:
            for tau in horizons:
                scores = []
                used = 0
                for seed in seeds:
                    predictor = predictor_table.get((model, zeta, seed))
                    if predictor is None:
                        report.warnings.append(
                            f"missing variant {model} at zeta={zeta} seed={seed}; skipped")
                        continue
                    test = test_builder(zeta, seed, tau)
                    scores.append(counterfactual_eval(predictor, test).nrmse)
                    used += 1
                if scores:
                    arr = np.array(scores)
                    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
                    report.nrmse_rows.append({
                        "model": model, "zeta": zeta, "tau": tau,
                        "mean": float(arr.mean()), "sd": sd, "n_seeds": used})
    return report
