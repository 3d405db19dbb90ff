"""Training objective pieces: weighted factual loss, kernel discrepancy,
treatment cross-entropy, and the orthogonality penalty on weight-chain
influence vectors.

Component functions return unscaled values; ``total_loss`` applies the
coefficients exactly once. Propensity weights are computed outside the
graph and enter the factual loss as constants, so no gradient flows
through the weighting into the propensity head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from . import autodiff as ad
from .autodiff import Tensor

PROB_CLAMP = (0.05, 0.95)   # propensity clamp inside the weight function
CE_CLAMP = (1e-7, 1.0 - 1e-7)


@dataclass
class LossWeights:
    alpha: float = 0.4   # discrepancy coefficient
    beta: float = 1.0    # treatment-head coefficient
    gamma: float = 0.3   # orthogonality coefficient
    l2: float = 1e-4     # parameter regularization

    def validate(self) -> None:
        for name in ("alpha", "beta", "gamma", "l2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


# ---------------------------------------------------------------------------
# Outcome weighting
# ---------------------------------------------------------------------------

def propensity_weight(a, a_c_prob, treated_fraction: float) -> np.ndarray:
    """Importance weight from the confounder-head propensity.

    Treated samples get 1 + [p/(1-p)] * [(1-q)/q] with q the clamped
    propensity and p the marginal treated rate; untreated samples get the
    symmetric completion. Always >= 1. The caller must treat the result as
    a constant during differentiation.
    """
    if not 0.0 < treated_fraction < 1.0:
        raise ValueError(f"treated fraction {treated_fraction} outside (0, 1)")
    a = np.asarray(a, dtype=np.float64)
    q = np.clip(np.asarray(a_c_prob, dtype=np.float64), *PROB_CLAMP)
    ratio = treated_fraction / (1.0 - treated_fraction)
    treated = 1.0 + ratio * (1.0 - q) / q
    control = 1.0 + (q / (1.0 - q)) / ratio
    return np.where(a > 0.5, treated, control)


def loss_factual(y_hat: Tensor, y, weights) -> Tensor:
    """Weighted mean squared error on factual outcomes."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("factual loss over an empty batch")
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    flat = ad.reshape(y_hat, (-1,))
    if flat.value.shape != y.shape or w.shape != y.shape:
        raise ad.ShapeError("loss_factual", flat.shape, y.shape, w.shape)
    sq = ad.square(ad.sub(flat, Tensor(y)))
    return ad.tmean(ad.mul(sq, Tensor(w)))


# ---------------------------------------------------------------------------
# Distribution balancing
# ---------------------------------------------------------------------------

def median_bandwidth(sample_a: np.ndarray, sample_b: np.ndarray) -> float:
    """Median pairwise distance over the pooled samples (a constant)."""
    pooled = np.vstack([np.atleast_2d(sample_a), np.atleast_2d(sample_b)])
    if pooled.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def _mean_kernel(x: Tensor, y: Tensor, inv_two_sigma_sq: float) -> Tensor:
    sq_x = ad.reshape(ad.tsum(ad.square(x), axis=1), (-1, 1))
    sq_y = ad.reshape(ad.tsum(ad.square(y), axis=1), (1, -1))
    d2 = ad.sub(ad.add(sq_x, sq_y), ad.mul(ad.matmul(x, ad.transpose(y)), 2.0))
    return ad.tmean(ad.exp(ad.mul(d2, -inv_two_sigma_sq)))


def mmd(sample_a: Tensor | None, sample_b: Tensor | None, bandwidth="median") -> Tensor:
    """Biased V-statistic estimate of squared MMD with an RBF kernel.

    ``bandwidth`` is either a positive float or "median", which freezes the
    median heuristic over the pooled current values (detached, like the
    outcome weights). Returns 0 when either group is empty.
    """
    def empty(t):
        return t is None or t.value.size == 0

    if empty(sample_a) or empty(sample_b):
        return Tensor(0.0)
    if bandwidth == "median":
        sigma = median_bandwidth(sample_a.value, sample_b.value)
    else:
        sigma = float(bandwidth)
        if sigma <= 0:
            raise ValueError(f"bandwidth must be positive, got {sigma}")
    k = 0.5 / (sigma * sigma)
    stat = ad.sub(
        ad.add(_mean_kernel(sample_a, sample_a, k), _mean_kernel(sample_b, sample_b, k)),
        ad.mul(_mean_kernel(sample_a, sample_b, k), 2.0))
    # The statistic is nonnegative up to float error; floor the error away.
    return ad.relu(stat)


# ---------------------------------------------------------------------------
# Treatment prediction
# ---------------------------------------------------------------------------

def loss_ce(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy for one treatment head."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    p = ad.clip(ad.reshape(probs, (-1,)), *CE_CLAMP)
    if p.value.shape != labels.shape:
        raise ad.ShapeError("loss_ce", p.shape, labels.shape)
    pos = ad.mul(ad.log(p), Tensor(labels))
    neg = ad.mul(ad.log(ad.sub(1.0, p)), Tensor(1.0 - labels))
    return ad.mul(ad.tmean(ad.add(pos, neg)), -1.0)


# ---------------------------------------------------------------------------
# Influence vectors and orthogonality
# ---------------------------------------------------------------------------

def lstm_input_influence(params, prefix: str) -> Tensor:
    """Absolute gate input matrices summed into one [in, hidden] matrix."""
    gates = [ad.absolute(params[f"{prefix}.W_{g}"]) for g in ad.LSTM_GATES]
    return ad.add(ad.add(gates[0], gates[1]), ad.add(gates[2], gates[3]))


def chain_influence(stages: list[Tensor]) -> Tensor:
    """Row-averaged product of absolute layer matrices along a path.

    Stages must already be nonnegative (pass weights through
    ``ad.absolute``; ``lstm_input_influence`` handles the recurrent stage).
    Returns a vector in the input space of the first stage.
    """
    if not stages:
        raise ValueError("empty influence chain")
    prod = stages[0]
    for s in stages[1:]:
        prod = ad.matmul(prod, s)
    return ad.tmean(prod, axis=1)


def influence_vector(params, cfg, factor: str, source: str = "covariates",
                     side: str = "enc") -> Tensor:
    """Influence of each source dimension on one factor's output.

    ``source="covariates"`` chains the trunk LSTM's absolute gate matrices
    (and the projection, for the shared-trunk architecture) into the factor
    network; ``source="representation"`` starts at the factor networks. Only
    input-to-hidden paths count: biases and recurrent matrices carry no
    per-input attribution.
    """
    if factor not in ("i", "c", "o"):
        raise ValueError(f"factor must be i/c/o, got {factor!r}")
    if cfg.architecture == "hg-t":
        if source != "covariates":
            raise ValueError("per-factor-RNN architecture has no shared representation")
        return ad.tmean(lstm_input_influence(params, f"{side}.rnn_{factor}"), axis=1)
    stages = []
    if source == "covariates":
        stages.append(lstm_input_influence(params, f"{side}.rnn_x"))
        stages.append(ad.absolute(params[f"{side}.proj.W"]))
    elif source != "representation":
        raise ValueError(f"unknown source {source!r}")
    stages.append(ad.absolute(params[f"{side}.factor_{factor}.l1.W"]))
    stages.append(ad.absolute(params[f"{side}.factor_{factor}.l2.W"]))
    return chain_influence(stages)


def loss_orthogonal(w_i: Tensor, w_c: Tensor, w_o: Tensor, gamma: float = 1.0) -> Tensor:
    """Pairwise inner products of the nonnegative influence vectors.

    Zero exactly when the three vectors have pairwise disjoint supports.
    ``gamma`` defaults to 1 here; during training the coefficient is applied
    once, in ``total_loss``.
    """
    if not (w_i.value.shape == w_c.value.shape == w_o.value.shape):
        raise ad.ShapeError("loss_orthogonal", w_i.shape, w_c.shape, w_o.shape)
    pairs = ad.add(ad.add(ad.tsum(ad.mul(w_i, w_c)), ad.tsum(ad.mul(w_i, w_o))),
                   ad.tsum(ad.mul(w_o, w_c)))
    return ad.mul(pairs, gamma)


# ---------------------------------------------------------------------------
# Combined objective
# ---------------------------------------------------------------------------

def l2_penalty(params, prefix: str | None = None) -> Tensor:
    """Sum of squared weight-matrix entries (biases excluded)."""
    total = Tensor(0.0)
    for name, p in params.items():
        if prefix and not name.startswith(prefix):
            continue
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith(("W", "R")):
            total = ad.add(total, ad.tsum(ad.square(p)))
    return total


def total_loss(l_y: Tensor, l_d: Tensor, l_c: Tensor, l_o: Tensor,
               weights: LossWeights, params, prefix: str | None = None) -> Tensor:
    """L = L_Y + alpha*L_D + beta*L_C + gamma*L_O + l2*||W||^2."""
    weights.validate()
    for name, comp in (("factual", l_y), ("discrepancy", l_d),
                       ("treatment", l_c), ("orthogonality", l_o)):
        if not np.all(np.isfinite(comp.value)):
            raise ad.DomainError(f"total_loss: non-finite {name} component")
    total = ad.add(l_y, ad.mul(l_d, weights.alpha))
    total = ad.add(total, ad.mul(l_c, weights.beta))
    total = ad.add(total, ad.mul(l_o, weights.gamma))
    return ad.add(total, ad.mul(l2_penalty(params, prefix), weights.l2))
