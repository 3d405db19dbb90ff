"""Sequence models: shared-trunk disentangled encoder/decoder and the
per-factor-RNN ablation architecture.

The main architecture runs one LSTM over the covariate history and projects
its output to a joint representation ``phi``. Three fully connected factor
networks split ``phi`` into a treatment factor ``I``, a confounding factor
``C`` and an outcome factor ``O``. Three heads sit on top: treatment
probability from (I, C), treatment probability from C alone (the propensity
used for outcome weighting), and the next-step outcome from
(C, O, outcome-history, treatment-history, current treatment). Separate
LSTMs carry the treatment and outcome histories.

The decoder mirrors the encoder but rolls the latent forward
autoregressively from the encoder's final ``phi`` (detached), continues the
history LSTMs from the encoder's final states, and feeds the previous
outcome (observed during training, predicted at test time) as an extra
outcome-head input.

The ablation architecture ("hg-t") gives each factor its own LSTM over raw
covariates instead of the shared trunk, so factors cannot influence each
other across time.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ARCHITECTURES = ("dcrn", "hg-t")


@dataclass
class ModelConfig:
    covariate_dim: int = 8
    representation_size: int = 16
    rnn_hidden: int = 16
    fc_hidden: int = 16
    factor_size: int = 16
    dropout: float = 0.1
    architecture: str = "dcrn"

    def validate(self) -> None:
        for name in ("covariate_dim", "representation_size", "rnn_hidden",
                     "fc_hidden", "factor_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout <= 0.4:
            raise ValueError(f"dropout {self.dropout} outside [0, 0.4]")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")

    @property
    def factor_dim(self) -> int:
        # hg-t factors are raw LSTM outputs, so they carry the RNN width.
        return self.factor_size if self.architecture == "dcrn" else self.rnn_hidden


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------

def _init_linear(params, rng, prefix, in_dim, out_dim):
    k = 1.0 / math.sqrt(in_dim)
    params[f"{prefix}.W"] = Tensor(rng.uniform(-k, k, size=(in_dim, out_dim)))
    params[f"{prefix}.b"] = Tensor(rng.uniform(-k, k, size=(out_dim,)))


def _init_fc2(params, rng, prefix, in_dim, hidden, out_dim):
    _init_linear(params, rng, f"{prefix}.l1", in_dim, hidden)
    _init_linear(params, rng, f"{prefix}.l2", hidden, out_dim)


def _init_lstm(params, rng, prefix, in_dim, hidden):
    for key, t in ad.init_lstm(rng, in_dim, hidden).items():
        params[f"{prefix}.{key}"] = t


def _init_block(params, rng, cfg: ModelConfig, side: str) -> None:
    """One encoder or decoder block; ``side`` is 'enc' or 'dec'."""
    dec = side == "dec"
    h, r, fh, fd = cfg.rnn_hidden, cfg.representation_size, cfg.fc_hidden, cfg.factor_dim
    if cfg.architecture == "dcrn":
        trunk_in = r if dec else cfg.covariate_dim
        _init_lstm(params, rng, f"{side}.rnn_x", trunk_in, h)
        _init_linear(params, rng, f"{side}.proj", h, r)
        for f in ("i", "c", "o"):
            _init_fc2(params, rng, f"{side}.factor_{f}", r, fh, cfg.factor_size)
    else:
        factor_in = h if dec else cfg.covariate_dim
        for f in ("i", "c", "o"):
            _init_lstm(params, rng, f"{side}.rnn_{f}", factor_in, h)
    _init_lstm(params, rng, f"{side}.rnn_a", 1, h)
    _init_lstm(params, rng, f"{side}.rnn_y", 1, h)
    _init_fc2(params, rng, f"{side}.head_a", 2 * fd, fh, 1)
    _init_fc2(params, rng, f"{side}.head_astar", fd, fh, 1)
    _init_fc2(params, rng, f"{side}.head_y", 2 * fd + 2 * h + 1 + (1 if dec else 0), fh, 1)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    params: dict[str, Tensor] = {}
    _init_block(params, rng, cfg, "enc")
    _init_block(params, rng, cfg, "dec")
    return params


def block_params(params: dict[str, Tensor], side: str) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if k.startswith(side + ".")}


def zero_params(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.value[...] = 0.0


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------

def _linear(params, prefix, x):
    return ad.add(ad.matmul(x, params[f"{prefix}.W"]), params[f"{prefix}.b"])


def _fc2(params, prefix, x, out_relu=False):
    h = ad.relu(_linear(params, f"{prefix}.l1", x))
    out = _linear(params, f"{prefix}.l2", h)
    return ad.relu(out) if out_relu else out


def _column(values) -> Tensor:
    arr = np.asarray(values, dtype=np.float64)
    return Tensor(arr.reshape(-1, 1))


def _zero_state(batch: int, hidden: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden)))


class _Lstm:
    """One LSTM with its per-forward fused weights and rolling state."""

    def __init__(self, params, prefix, batch, hidden, state=None):
        weights = {f"{kind}_{g}": params[f"{prefix}.{kind}_{g}"]
                   for g in ad.LSTM_GATES for kind in ("W", "R", "b")}
        self.fused = ad.fuse_lstm(weights)
        if state is None:
            self.h, self.c = _zero_state(batch, hidden)
        else:
            self.h, self.c = Tensor(state[0].copy()), Tensor(state[1].copy())

    def step(self, x: Tensor) -> Tensor:
        self.h, self.c = ad.lstm_step(self.fused, x, self.h, self.c)
        return self.h

    def state_values(self) -> tuple[np.ndarray, np.ndarray]:
        return self.h.value.copy(), self.c.value.copy()


@dataclass
class StepOutput:
    """Per-timestep head outputs and factor vectors (batched tensors)."""

    f_i: Tensor
    f_c: Tensor
    f_o: Tensor
    a_ic: Tensor   # [B, 1] probability from (I, C)
    a_c: Tensor    # [B, 1] probability from C alone
    y_hat: Tensor  # [B, 1]


@dataclass
class EncoderState:
    """Detached hand-off from encoder to decoder at a history cut."""

    phi: np.ndarray                          # [B, r] (dcrn) or factor triple (hg-t)
    state_a: tuple[np.ndarray, np.ndarray]
    state_y: tuple[np.ndarray, np.ndarray]
    factors: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None


def _prob(logits):
    # Strict (0, 1) even where the float64 sigmoid saturates.
    return ad.clip(ad.sigmoid(logits), 1e-12, 1.0 - 1e-12)


def _heads(params, side, f_i, f_c, f_o, hy, ha, a_direct, prev_y=None):
    a_ic = _prob(_fc2(params, f"{side}.head_a", ad.concat([f_i, f_c])))
    a_c = _prob(_fc2(params, f"{side}.head_astar", f_c))
    pieces = [f_c, f_o, hy, ha, a_direct]
    if prev_y is not None:
        pieces.append(prev_y)
    y_hat = _fc2(params, f"{side}.head_y", ad.concat(pieces))
    return a_ic, a_c, y_hat


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

def encoder_forward(params, cfg: ModelConfig, x, a, y, *, training=False, rng=None,
                    with_heads=True):
    """Run the encoder over full trajectories.

    ``x`` is [B, T, d], ``a`` and ``y`` are [B, T]. Returns
    ``(steps, EncoderState)`` where ``steps`` holds one StepOutput per
    t = 0..T-2 (each predicting the t+1 outcome) and the state is the
    detached hand-off after the full history (treatment history up to T-2,
    outcome history up to T-1).
    """
    if cfg.architecture == "dcrn":
        return _dcrn_encoder(params, cfg, x, a, y, training, rng, with_heads)
    return _hgt_encoder(params, cfg, x, a, y, training, rng, with_heads)


def _drop(t, cfg, training, rng):
    return ad.dropout(t, cfg.dropout, training, rng)


def _dcrn_encoder(params, cfg, x, a, y, training, rng, with_heads):
    x = np.asarray(x, dtype=np.float64)
    B, T, _ = x.shape
    if T < 2 and with_heads:
        raise ValueError(f"trajectory length {T} < 2: no next-step target exists")
    rnn_x = _Lstm(params, "enc.rnn_x", B, cfg.rnn_hidden)
    rnn_a = _Lstm(params, "enc.rnn_a", B, cfg.rnn_hidden)
    rnn_y = _Lstm(params, "enc.rnn_y", B, cfg.rnn_hidden)
    steps: list[StepOutput] = []
    phi = None
    for t in range(T):
        hx = _drop(rnn_x.step(Tensor(x[:, t, :])), cfg, training, rng)
        phi = ad.tanh(_linear(params, "enc.proj", hx))
        hy = _drop(rnn_y.step(_column(y[:, t])), cfg, training, rng)
        ha = _drop(rnn_a.h, cfg, training, rng)
        if with_heads and t < T - 1:
            f_i = _fc2(params, "enc.factor_i", phi)
            f_c = _fc2(params, "enc.factor_c", phi)
            f_o = _fc2(params, "enc.factor_o", phi)
            a_ic, a_c, y_hat = _heads(params, "enc", f_i, f_c, f_o, hy, ha,
                                      _column(a[:, t]))
            steps.append(StepOutput(f_i, f_c, f_o, a_ic, a_c, y_hat))
        if t < T - 1:
            rnn_a.step(_column(a[:, t]))
    state = EncoderState(phi=phi.value.copy(), state_a=rnn_a.state_values(),
                         state_y=rnn_y.state_values())
    return steps, state


def _hgt_encoder(params, cfg, x, a, y, training, rng, with_heads):
    x = np.asarray(x, dtype=np.float64)
    B, T, _ = x.shape
    if T < 2 and with_heads:
        raise ValueError(f"trajectory length {T} < 2: no next-step target exists")
    rnn_f = {f: _Lstm(params, f"enc.rnn_{f}", B, cfg.rnn_hidden) for f in ("i", "c", "o")}
    rnn_a = _Lstm(params, "enc.rnn_a", B, cfg.rnn_hidden)
    rnn_y = _Lstm(params, "enc.rnn_y", B, cfg.rnn_hidden)
    steps: list[StepOutput] = []
    factors = None
    for t in range(T):
        xt = Tensor(x[:, t, :])
        factors = {f: _drop(rnn_f[f].step(xt), cfg, training, rng) for f in ("i", "c", "o")}
        hy = _drop(rnn_y.step(_column(y[:, t])), cfg, training, rng)
        ha = _drop(rnn_a.h, cfg, training, rng)
        if with_heads and t < T - 1:
            a_ic, a_c, y_hat = _heads(params, "enc", factors["i"], factors["c"],
                                      factors["o"], hy, ha, _column(a[:, t]))
            steps.append(StepOutput(factors["i"], factors["c"], factors["o"],
                                    a_ic, a_c, y_hat))
        if t < T - 1:
            rnn_a.step(_column(a[:, t]))
    state = EncoderState(
        phi=factors["c"].value.copy(),
        state_a=rnn_a.state_values(), state_y=rnn_y.state_values(),
        factors=tuple(factors[f].value.copy() for f in ("i", "c", "o")))
    return steps, state


def encode_history(params, cfg: ModelConfig, x, a, y) -> EncoderState:
    """Evaluation-mode encoding of a (possibly partial) history.

    ``x`` is [B, c, d] for history length c >= 1; treatments after the cut
    are never consumed (the last treatment fed to the history RNN is
    a[:, c-2]).
    """
    _, state = encoder_forward(params, cfg, x, a, y, training=False, with_heads=False)
    return state


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

def decoder_forward(params, cfg: ModelConfig, start: EncoderState, plan, prev_y, *,
                    mode="autoregressive", observed_y=None, training=False, rng=None):
    """Roll the decoder ``tau`` steps under a treatment plan.

    ``plan`` is [B, tau]; ``prev_y`` [B] is the last observed outcome at the
    cut. Teacher-forced mode feeds ``observed_y`` ([B, tau], the factual
    future outcomes); autoregressive mode feeds predictions back. Returns a
    list of StepOutput, one per future step.
    """
    plan = np.asarray(plan)
    if plan.ndim != 2:
        raise ValueError("plan must be [batch, tau]")
    tau = plan.shape[1]
    if mode not in ("autoregressive", "teacher-forced"):
        raise ValueError(f"unknown decoder mode {mode!r}")
    if mode == "teacher-forced":
        if observed_y is None:
            raise ValueError("teacher-forced mode needs observed_y of shape [batch, tau]")
        observed_y = np.asarray(observed_y)
        if observed_y.shape != plan.shape:
            raise ValueError("teacher-forced mode needs observed_y of shape [batch, tau]")
    B = plan.shape[0]
    rnn_a = _Lstm(params, "dec.rnn_a", B, cfg.rnn_hidden, state=start.state_a)
    rnn_y = _Lstm(params, "dec.rnn_y", B, cfg.rnn_hidden, state=start.state_y)
    dcrn = cfg.architecture == "dcrn"
    if dcrn:
        rnn_x = _Lstm(params, "dec.rnn_x", B, cfg.rnn_hidden)
        carry = Tensor(start.phi.copy())
    else:
        rnn_f = {f: _Lstm(params, f"dec.rnn_{f}", B, cfg.rnn_hidden) for f in ("i", "c", "o")}
        carry = tuple(Tensor(v.copy()) for v in start.factors)
    prev = Tensor(np.asarray(prev_y, dtype=np.float64).reshape(-1, 1))
    steps: list[StepOutput] = []
    for u in range(tau):
        if dcrn:
            hx = _drop(rnn_x.step(carry), cfg, training, rng)
            phi = ad.tanh(_linear(params, "dec.proj", hx))
            f_i = _fc2(params, "dec.factor_i", phi)
            f_c = _fc2(params, "dec.factor_c", phi)
            f_o = _fc2(params, "dec.factor_o", phi)
            carry = phi
        else:
            f_i = _drop(rnn_f["i"].step(carry[0]), cfg, training, rng)
            f_c = _drop(rnn_f["c"].step(carry[1]), cfg, training, rng)
            f_o = _drop(rnn_f["o"].step(carry[2]), cfg, training, rng)
            carry = (f_i, f_c, f_o)
        hy = _drop(rnn_y.h, cfg, training, rng)
        ha = _drop(rnn_a.h, cfg, training, rng)
        a_u = _column(plan[:, u])
        a_ic, a_c, y_hat = _heads(params, "dec", f_i, f_c, f_o, hy, ha, a_u, prev_y=prev)
        steps.append(StepOutput(f_i, f_c, f_o, a_ic, a_c, y_hat))
        rnn_a.step(a_u)
        if u < tau - 1:
            prev = _column(observed_y[:, u]) if mode == "teacher-forced" else y_hat
            rnn_y.step(prev)
    return steps


def decoder_predictions(steps: list[StepOutput]) -> np.ndarray:
    """Stack decoder outcome forecasts into [B, tau]."""
    return np.concatenate([s.y_hat.value for s in steps], axis=1)


def impulse_response_rollout(params, cfg: ModelConfig, start: EncoderState, a0, prev_y,
                             tau: int, threshold: float = 0.5):
    """Forecast after a single exogenous treatment.

    The first step applies ``a0``; later steps apply the model's own
    treatment-probability head binarized at ``threshold``, feeding the
    choice back into the treatment history. Outcomes are autoregressive
    throughout. Returns ``(plan, probs, predictions)`` as [B, tau] arrays.
    """
    a0 = np.asarray(a0, dtype=np.int64).reshape(-1)
    B = a0.shape[0]
    rnn_a = _Lstm(params, "dec.rnn_a", B, cfg.rnn_hidden, state=start.state_a)
    rnn_y = _Lstm(params, "dec.rnn_y", B, cfg.rnn_hidden, state=start.state_y)
    dcrn = cfg.architecture == "dcrn"
    if dcrn:
        rnn_x = _Lstm(params, "dec.rnn_x", B, cfg.rnn_hidden)
        carry = Tensor(start.phi.copy())
    else:
        rnn_f = {f: _Lstm(params, f"dec.rnn_{f}", B, cfg.rnn_hidden) for f in ("i", "c", "o")}
        carry = tuple(Tensor(v.copy()) for v in start.factors)
    prev = Tensor(np.asarray(prev_y, dtype=np.float64).reshape(-1, 1))
    plan = np.empty((B, tau), dtype=np.int64)
    probs = np.empty((B, tau))
    preds = np.empty((B, tau))
    for u in range(tau):
        if dcrn:
            phi = ad.tanh(_linear(params, "dec.proj", rnn_x.step(carry)))
            f_i = _fc2(params, "dec.factor_i", phi)
            f_c = _fc2(params, "dec.factor_c", phi)
            f_o = _fc2(params, "dec.factor_o", phi)
            carry = phi
        else:
            f_i = rnn_f["i"].step(carry[0])
            f_c = rnn_f["c"].step(carry[1])
            f_o = rnn_f["o"].step(carry[2])
            carry = (f_i, f_c, f_o)
        a_prob = _prob(_fc2(params, "dec.head_a", ad.concat([f_i, f_c])))
        probs[:, u] = a_prob.value[:, 0]
        if u == 0:
            a_now = a0
        else:
            a_now = (probs[:, u] > threshold).astype(np.int64)
        plan[:, u] = a_now
        a_col = _column(a_now)
        pieces = [f_c, f_o, rnn_y.h, rnn_a.h, a_col, prev]
        y_hat = _fc2(params, "dec.head_y", ad.concat(pieces))
        preds[:, u] = y_hat.value[:, 0]
        rnn_a.step(a_col)
        if u < tau - 1:
            prev = y_hat
            rnn_y.step(prev)
    return plan, probs, preds


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(path, cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    ad.save_params(path, params, metadata={"model_config": asdict(cfg)})


def load_model(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    params, meta = ad.load_params(path)
    cfg = ModelConfig(**meta["model_config"])
    cfg.validate()
    return cfg, params
