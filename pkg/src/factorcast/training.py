"""Two-block training: fit the encoder on one-step-ahead targets, freeze it,
then fit the decoder on teacher-forced multi-step rollouts of encoded
histories. Both blocks minibatch with Adam, validate each epoch and early
stop on the best validation score. A seeded random search samples
hyperparameters from the documented ranges.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import model as mdl
from .autodiff import Tensor
from .data import Dataset

LR_RANGE = (1e-4, 1e-2)
BATCH_RANGE = (16, 512)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    decoder_batch_size: int = 256
    max_epochs: int = 100
    patience: int = 5
    horizon: int = 5
    weights: ls.LossWeights = field(default_factory=ls.LossWeights)
    use_propensity_weights: bool = True  # False runs the unit-weight ablation
    grad_clip: float = 10.0              # global norm; 0 disables
    mmd_bandwidth: float | str = "median"
    mmd_group_cap: int = 512             # subsample cap per group; 0 disables
    seed: int = 0

    def validate(self) -> None:
        if not LR_RANGE[0] <= self.learning_rate <= LR_RANGE[1]:
            raise ValueError(f"learning_rate {self.learning_rate} outside {LR_RANGE}")
        for name in ("batch_size", "decoder_batch_size"):
            b = getattr(self, name)
            if not BATCH_RANGE[0] <= b <= BATCH_RANGE[1]:
                raise ValueError(f"{name} {b} outside {BATCH_RANGE}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.max_epochs < 1 or self.patience < 0:
            raise ValueError("max_epochs must be >= 1 and patience >= 0")
        self.weights.validate()


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    wall_clock: float = 0.0

    def record(self, **row) -> None:
        self.rows.append(row)

    def write_csv(self, path) -> None:
        cols = ["epoch", "l_y", "l_d", "l_c", "l_o", "total", "val_mse"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in self.rows:
                fh.write(",".join(repr(row[c]) if c != "epoch" else str(row[c])
                                  for c in cols) + "\n")


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def _length_groups(trajs):
    groups: dict[int, list] = {}
    for t in trajs:
        groups.setdefault(len(t), []).append(t)
    return groups


def _check_overlap(dataset: Dataset) -> None:
    if not 0.0 < dataset.treated_fraction < 1.0:
        raise ValueError(
            f"marginal treated fraction {dataset.treated_fraction} violates overlap")


def _split_groups(units, mmd_cap, rng):
    """Treated/control row indices for the pooled discrepancy term."""
    ones = np.flatnonzero(units > 0.5)
    zeros = np.flatnonzero(units <= 0.5)
    if mmd_cap and rng is not None:
        if len(ones) > mmd_cap:
            ones = rng.choice(ones, size=mmd_cap, replace=False)
        if len(zeros) > mmd_cap:
            zeros = rng.choice(zeros, size=mmd_cap, replace=False)
    return zeros, ones


# ---------------------------------------------------------------------------
# Encoder block
# ---------------------------------------------------------------------------

def encoder_batch_loss(params, model_cfg, batch, stats_treated_fraction, cfg: TrainConfig,
                       *, training=True, rng=None,
                       omega_override=None, bandwidth_override=None):
    """Total encoder loss over a minibatch of trajectories.

    ``batch`` is a list of Trajectory; mixed lengths are handled by running
    one forward per length group and pooling. Returns the scalar node plus
    the component values. ``omega_override``/``bandwidth_override`` freeze
    the batch constants, which finite-difference checks need.
    """
    pooled_o, pooled_yhat, pooled_aic, pooled_ac = [], [], [], []
    y_targets, a_targets = [], []
    for T, trajs in sorted(_length_groups(batch).items()):
        x = np.stack([t.covariates for t in trajs])
        a = np.stack([t.treatments for t in trajs])
        y = np.stack([t.outcomes for t in trajs])
        steps, _ = mdl.encoder_forward(params, model_cfg, x, a, y,
                                       training=training, rng=rng)
        for t, s in enumerate(steps):
            pooled_o.append(s.f_o)
            pooled_yhat.append(s.y_hat)
            pooled_aic.append(s.a_ic)
            pooled_ac.append(s.a_c)
            y_targets.append(y[:, t + 1])
            a_targets.append(a[:, t])
    y_hat = ad.concat(pooled_yhat, axis=0)
    a_ic = ad.concat(pooled_aic, axis=0)
    a_c = ad.concat(pooled_ac, axis=0)
    f_o = ad.concat(pooled_o, axis=0)
    y_t = np.concatenate(y_targets)
    a_t = np.concatenate(a_targets)

    if omega_override is not None:
        omega = np.asarray(omega_override, dtype=np.float64)
    elif cfg.use_propensity_weights:
        omega = ls.propensity_weight(a_t, a_c.value.reshape(-1), stats_treated_fraction)
    else:
        omega = np.ones_like(y_t)
    l_y = ls.loss_factual(y_hat, y_t, omega)
    l_c = ad.add(ls.loss_ce(a_ic, a_t), ls.loss_ce(a_c, a_t))
    zeros, ones = _split_groups(a_t, cfg.mmd_group_cap, rng)
    bandwidth = bandwidth_override if bandwidth_override is not None else cfg.mmd_bandwidth
    l_d = ls.mmd(ad.take_rows(f_o, zeros) if len(zeros) else None,
                 ad.take_rows(f_o, ones) if len(ones) else None, bandwidth)
    vecs = [ls.influence_vector(params, model_cfg, f, source="covariates", side="enc")
            for f in ("i", "c", "o")]
    l_o = ls.loss_orthogonal(*vecs)
    total = ls.total_loss(l_y, l_d, l_c, l_o, cfg.weights, params, prefix="enc.")
    comps = {"l_y": l_y.item(), "l_d": l_d.item(), "l_c": l_c.item(),
             "l_o": l_o.item(), "total": total.item()}
    return total, comps


def encoder_validation_mse(params, model_cfg, trajs) -> float:
    """Unweighted one-step factual MSE in evaluation mode."""
    sq_sum, n = 0.0, 0
    for T, group in sorted(_length_groups(trajs).items()):
        x = np.stack([t.covariates for t in group])
        a = np.stack([t.treatments for t in group])
        y = np.stack([t.outcomes for t in group])
        steps, _ = mdl.encoder_forward(params, model_cfg, x, a, y, training=False)
        for t, s in enumerate(steps):
            resid = s.y_hat.value.reshape(-1) - y[:, t + 1]
            sq_sum += float(np.sum(resid ** 2))
            n += resid.size
    return sq_sum / n


def train_encoder(dataset: Dataset, model_cfg: mdl.ModelConfig, cfg: TrainConfig,
                  params=None):
    """Block 1: fit the encoder, early-stopping on validation MSE."""
    cfg.validate()
    model_cfg.validate()
    _check_overlap(dataset)
    start_time = time.perf_counter()
    if params is None:
        params = mdl.init_params(model_cfg, cfg.seed)
    enc_params = mdl.block_params(params, "enc")
    train = dataset.split("train")
    val = dataset.split("val")
    if not train or not val:
        raise ValueError("dataset needs non-empty train and val splits")
    rng = _rng(cfg.seed, 4)
    opt = ad.Adam(enc_params, lr=cfg.learning_rate)
    report = TrainReport()
    best_values = ad.param_values(enc_params)
    since_best = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train))
        comp_sums: dict[str, float] = {}
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[lo:lo + cfg.batch_size]]
            with ad.Graph(enc_params) as g:
                total, comps = encoder_batch_loss(
                    params, model_cfg, batch, dataset.treated_fraction, cfg,
                    training=True, rng=rng)
                if not np.isfinite(total.value):
                    raise RuntimeError(f"non-finite encoder loss at epoch {epoch}, "
                                       f"batch {n_batches}")
                grads = g.backward(total)
            if cfg.grad_clip:
                ad.clip_grad_norm(grads, cfg.grad_clip)
            opt.step(grads)
            for k, v in comps.items():
                comp_sums[k] = comp_sums.get(k, 0.0) + v
            n_batches += 1
        val_mse = encoder_validation_mse(params, model_cfg, val)
        report.record(epoch=epoch, val_mse=val_mse,
                      **{k: v / n_batches for k, v in comp_sums.items()})
        if val_mse < report.best_val:
            report.best_val = val_mse
            report.best_epoch = epoch
            best_values = ad.param_values(enc_params)
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    ad.set_param_values(enc_params, best_values)
    report.wall_clock = time.perf_counter() - start_time
    return params, report


# ---------------------------------------------------------------------------
# Decoder block
# ---------------------------------------------------------------------------

@dataclass
class _DecoderSamples:
    """Precomputed frozen-encoder hand-offs for every (patient, cut) pair."""

    phi: np.ndarray        # [M, r] (dcrn) or stacked factors (hg-t: 3 arrays)
    factors: tuple | None
    h_a: np.ndarray
    c_a: np.ndarray
    h_y: np.ndarray
    c_y: np.ndarray
    plans: np.ndarray      # [M, tau] observed future treatments
    targets: np.ndarray    # [M, tau] observed future outcomes
    prev_y: np.ndarray     # [M]

    def __len__(self):
        return len(self.prev_y)

    def start(self, rows) -> mdl.EncoderState:
        factors = None
        if self.factors is not None:
            factors = tuple(f[rows] for f in self.factors)
        return mdl.EncoderState(
            phi=self.phi[rows], factors=factors,
            state_a=(self.h_a[rows], self.c_a[rows]),
            state_y=(self.h_y[rows], self.c_y[rows]))


def prepare_decoder_samples(params, model_cfg, trajs, tau: int) -> _DecoderSamples:
    """Encode every history cut once; the encoder is frozen in block 2.

    Cut points run over t in [2, T - tau] per trajectory. Encoding happens in
    evaluation mode (no dropout), batched per cut length.
    """
    by_cut: dict[int, list] = {}
    for traj in trajs:
        for cut in range(2, len(traj) - tau + 1):
            by_cut.setdefault(cut, []).append(traj)
    if not by_cut:
        raise ValueError(f"no trajectory admits a cut with horizon {tau}")
    chunks = []
    for cut, group in sorted(by_cut.items()):
        x = np.stack([t.covariates[:cut] for t in group])
        a = np.stack([t.treatments[:cut] for t in group])
        y = np.stack([t.outcomes[:cut] for t in group])
        state = mdl.encode_history(params, model_cfg, x, a, y)
        plans = np.stack([t.treatments[cut - 1:cut - 1 + tau] for t in group])
        targets = np.stack([t.outcomes[cut:cut + tau] for t in group])
        prev = np.array([t.outcomes[cut - 1] for t in group])
        chunks.append((state, plans, targets, prev))
    factors = None
    if model_cfg.architecture == "hg-t":
        factors = tuple(np.concatenate([c[0].factors[j] for c in chunks]) for j in range(3))
    return _DecoderSamples(
        phi=np.concatenate([c[0].phi for c in chunks]),
        factors=factors,
        h_a=np.concatenate([c[0].state_a[0] for c in chunks]),
        c_a=np.concatenate([c[0].state_a[1] for c in chunks]),
        h_y=np.concatenate([c[0].state_y[0] for c in chunks]),
        c_y=np.concatenate([c[0].state_y[1] for c in chunks]),
        plans=np.concatenate([c[1] for c in chunks]),
        targets=np.concatenate([c[2] for c in chunks]),
        prev_y=np.concatenate([c[3] for c in chunks]))


def decoder_batch_loss(params, model_cfg, samples: _DecoderSamples, rows,
                       stats_treated_fraction, cfg: TrainConfig, *, training=True,
                       rng=None, omega_override=None, bandwidth_override=None):
    """Teacher-forced decoder loss over a batch of (patient, cut) samples."""
    plans = samples.plans[rows]
    targets = samples.targets[rows]
    steps = mdl.decoder_forward(params, model_cfg, samples.start(rows), plans,
                                samples.prev_y[rows], mode="teacher-forced",
                                observed_y=targets, training=training, rng=rng)
    y_hat = ad.concat([s.y_hat for s in steps], axis=0)
    a_ic = ad.concat([s.a_ic for s in steps], axis=0)
    a_c = ad.concat([s.a_c for s in steps], axis=0)
    f_o = ad.concat([s.f_o for s in steps], axis=0)
    y_t = targets.T.reshape(-1)   # step-major to match the concat layout
    a_t = plans.T.reshape(-1)

    if omega_override is not None:
        omega = np.asarray(omega_override, dtype=np.float64)
    elif cfg.use_propensity_weights:
        omega = ls.propensity_weight(a_t, a_c.value.reshape(-1), stats_treated_fraction)
    else:
        omega = np.ones_like(y_t)
    l_y = ls.loss_factual(y_hat, y_t, omega)
    l_c = ad.add(ls.loss_ce(a_ic, a_t), ls.loss_ce(a_c, a_t))
    zeros, ones = _split_groups(a_t, cfg.mmd_group_cap, rng)
    bandwidth = bandwidth_override if bandwidth_override is not None else cfg.mmd_bandwidth
    l_d = ls.mmd(ad.take_rows(f_o, zeros) if len(zeros) else None,
                 ad.take_rows(f_o, ones) if len(ones) else None, bandwidth)
    vecs = [ls.influence_vector(params, model_cfg, f, source="covariates", side="dec")
            for f in ("i", "c", "o")]
    l_o = ls.loss_orthogonal(*vecs)
    total = ls.total_loss(l_y, l_d, l_c, l_o, cfg.weights, params, prefix="dec.")
    comps = {"l_y": l_y.item(), "l_d": l_d.item(), "l_c": l_c.item(),
             "l_o": l_o.item(), "total": total.item()}
    return total, comps


def decoder_validation_mse(params, model_cfg, samples: _DecoderSamples,
                           batch_size: int = 512) -> float:
    """Autoregressive multi-step factual MSE in evaluation mode."""
    sq_sum, n = 0.0, 0
    for lo in range(0, len(samples), batch_size):
        rows = np.arange(lo, min(lo + batch_size, len(samples)))
        steps = mdl.decoder_forward(params, model_cfg, samples.start(rows),
                                    samples.plans[rows], samples.prev_y[rows],
                                    mode="autoregressive")
        preds = mdl.decoder_predictions(steps)
        resid = preds - samples.targets[rows]
        sq_sum += float(np.sum(resid ** 2))
        n += resid.size
    return sq_sum / n


def train_decoder(dataset: Dataset, model_cfg: mdl.ModelConfig, cfg: TrainConfig,
                  params):
    """Block 2: fit the decoder against the frozen encoder.

    Raises if any gradient ever reaches an encoder parameter; encoder values
    are bitwise unchanged on return.
    """
    cfg.validate()
    _check_overlap(dataset)
    start_time = time.perf_counter()
    tau = cfg.horizon
    dec_params = mdl.block_params(params, "dec")
    train_samples = prepare_decoder_samples(params, model_cfg, dataset.split("train"), tau)
    val_samples = prepare_decoder_samples(params, model_cfg, dataset.split("val"), tau)
    rng = _rng(cfg.seed, 5)
    opt = ad.Adam(dec_params, lr=cfg.learning_rate)
    report = TrainReport()
    best_values = ad.param_values(dec_params)
    since_best = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_samples))
        comp_sums: dict[str, float] = {}
        n_batches = 0
        for lo in range(0, len(order), cfg.decoder_batch_size):
            rows = order[lo:lo + cfg.decoder_batch_size]
            with ad.Graph(params) as g:
                total, comps = decoder_batch_loss(
                    params, model_cfg, train_samples, rows,
                    dataset.treated_fraction, cfg, training=True, rng=rng)
                if not np.isfinite(total.value):
                    raise RuntimeError(f"non-finite decoder loss at epoch {epoch}, "
                                       f"batch {n_batches}")
                grads = g.backward(total)
            enc_leak = sum(float(np.abs(v).sum()) for k, v in grads.items()
                           if k.startswith("enc."))
            if enc_leak != 0.0:
                raise RuntimeError("gradient leaked across the frozen encoder boundary")
            dec_grads = {k: v for k, v in grads.items() if k.startswith("dec.")}
            if cfg.grad_clip:
                ad.clip_grad_norm(dec_grads, cfg.grad_clip)
            opt.step(dec_grads)
            for k, v in comps.items():
                comp_sums[k] = comp_sums.get(k, 0.0) + v
            n_batches += 1
        val_mse = decoder_validation_mse(params, model_cfg, val_samples)
        report.record(epoch=epoch, val_mse=val_mse,
                      **{k: v / n_batches for k, v in comp_sums.items()})
        if val_mse < report.best_val:
            report.best_val = val_mse
            report.best_epoch = epoch
            best_values = ad.param_values(dec_params)
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    ad.set_param_values(dec_params, best_values)
    report.wall_clock = time.perf_counter() - start_time
    return params, report


def train_model(dataset: Dataset, model_cfg: mdl.ModelConfig, cfg: TrainConfig):
    """Both blocks in sequence; returns (params, encoder report, decoder report)."""
    params, enc_report = train_encoder(dataset, model_cfg, cfg)
    params, dec_report = train_decoder(dataset, model_cfg, cfg, params)
    return params, enc_report, dec_report


# ---------------------------------------------------------------------------
# Random hyperparameter search
# ---------------------------------------------------------------------------

@dataclass
class SearchRanges:
    learning_rate: tuple = LR_RANGE            # log-uniform
    batch_size: tuple = (16, 256)
    decoder_batch_size: tuple = (64, 512)
    rnn_hidden: tuple = (8, 128)
    representation_size: tuple = (8, 256)
    fc_hidden: tuple = (4, 32)
    dropout: tuple = (0.0, 0.4)
    alpha: tuple = (0.0, 1.0)
    beta: tuple = (0.0, 1.0)
    gamma: tuple = (0.0, 1.0)


def sample_trial(ranges: SearchRanges, base_model: mdl.ModelConfig,
                 base_train: TrainConfig, rng: np.random.Generator, trial_seed: int):
    def log_uniform(lo, hi):
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    def uniform_int(lo, hi):
        return int(rng.integers(lo, hi + 1))

    model_cfg = replace(
        base_model,
        rnn_hidden=uniform_int(*ranges.rnn_hidden),
        representation_size=uniform_int(*ranges.representation_size),
        fc_hidden=uniform_int(*ranges.fc_hidden),
        factor_size=uniform_int(*ranges.fc_hidden),
        dropout=float(rng.uniform(*ranges.dropout)),
    )
    train_cfg = replace(
        base_train,
        learning_rate=log_uniform(*ranges.learning_rate),
        batch_size=uniform_int(*ranges.batch_size),
        decoder_batch_size=uniform_int(*ranges.decoder_batch_size),
        weights=ls.LossWeights(alpha=float(rng.uniform(*ranges.alpha)),
                               beta=float(rng.uniform(*ranges.beta)),
                               gamma=float(rng.uniform(*ranges.gamma)),
                               l2=base_train.weights.l2),
        seed=trial_seed,
    )
    return model_cfg, train_cfg


def _run_trial(args):
    dataset, model_cfg, train_cfg, trial = args
    try:
        params, enc_report, dec_report = train_model(dataset, model_cfg, train_cfg)
        return {"trial": trial, "status": "ok",
                "val_mse": dec_report.best_val,
                "encoder_val_mse": enc_report.best_val,
                "model_cfg": model_cfg, "train_cfg": train_cfg}
    except Exception as exc:  # a failed trial should not sink the search
        return {"trial": trial, "status": f"failed: {exc}", "val_mse": float("inf"),
                "encoder_val_mse": float("inf"),
                "model_cfg": model_cfg, "train_cfg": train_cfg}


def random_search(dataset: Dataset, base_model: mdl.ModelConfig, base_train: TrainConfig,
                  n_trials: int, seed: int, ranges: SearchRanges | None = None,
                  jobs: int = 1):
    """Uniform random search over the documented ranges.

    Each trial trains encoder and decoder with its own derived seed and is
    ranked by the decoder's best factual validation MSE. Returns
    ``(best_trial, leaderboard)`` sorted best-first.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    ranges = ranges or SearchRanges()
    rng = _rng(seed, 6)
    trial_args = []
    for trial in range(n_trials):
        model_cfg, train_cfg = sample_trial(ranges, base_model, base_train, rng,
                                            trial_seed=seed + 1000 * (trial + 1))
        trial_args.append((dataset, model_cfg, train_cfg, trial))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_trial, trial_args))
    else:
        results = [_run_trial(a) for a in trial_args]
    leaderboard = sorted(results, key=lambda r: (r["val_mse"], r["trial"]))
    if all(r["status"] != "ok" for r in leaderboard):
        raise RuntimeError("all search trials failed: "
                           + "; ".join(r["status"] for r in leaderboard))
    return leaderboard[0], leaderboard
