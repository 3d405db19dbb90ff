"""Tumour-growth simulator that produces biased observational datasets.

One patient is a discrete-time trajectory of cancer-cell mass ``rho`` under
immune therapy. Per step the kill rate is ``mu = lambda_p * psi0 * sigma``
(``psi0`` immune cell count, modulated multiplicatively by treatment), the
anti-tumour immune state is ``lam = (rho0 / psi0) / fitness``, and the mass
updates as

    rho' = rho + (alpha0 - mu + mu*lam) * rho - mu*lam * rho**2 + noise

Treatment selection mixes the recent mean kill rate (a time-dependent
confounder) with an autoregressive nuisance process ``kappa`` that has no
effect on outcomes: ``p = sigmoid(zeta * mu_bar + (1 - zeta) * kappa)``.
``zeta = 1`` makes selection depend on tumour state only, ``zeta = 0`` on the
nuisance process only.

Counterfactual test sets branch each observed history into alternative
future treatment plans simulated under common random numbers, so plan
comparisons are noise-free.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, Trajectory

COVARIATE_NAMES = ("alpha0", "lambda_p", "sigma", "psi0", "rho0", "fitness", "kappa", "rho")
MU_WINDOW = 10
AR_ORDER = 10

# Sub-stream tags so patient simulation and counterfactual branching draw
# from independent generators derived from one dataset seed.
_STREAM_PATIENT = 1
_STREAM_CF = 2


class SimulationError(RuntimeError):
    pass


class OverlapError(RuntimeError):
    """Raised when a generated dataset violates treatment overlap."""


@dataclass
class SimConfig:
    zeta: float = 0.5
    n_patients: int = 1000
    max_steps: int = 20
    horizon: int = 5
    noise_rho_var: float = 0.01
    noise_kappa_var: float = 0.01
    ar_coef_var: float = 0.01
    seed: int = 0
    train_fraction: float = 0.7
    val_fraction: float = 0.15

    def validate(self) -> None:
        if not 0.0 <= self.zeta <= 1.0:
            raise ValueError(f"zeta {self.zeta} outside [0, 1]")
        if self.n_patients <= 0 or self.max_steps <= 0 or self.horizon <= 0:
            raise ValueError("n_patients, max_steps and horizon must be positive")
        if self.horizon >= self.max_steps:
            raise ValueError(f"horizon {self.horizon} must be < max_steps {self.max_steps}")
        if min(self.noise_rho_var, self.noise_kappa_var, self.ar_coef_var) < 0:
            raise ValueError("noise variances must be >= 0")
        if not (0 < self.train_fraction < 1 and 0 <= self.val_fraction < 1
                and self.train_fraction + self.val_fraction < 1):
            raise ValueError("split fractions must leave room for a test split")


@dataclass
class PatientStatics:
    alpha0: float     # tumour proliferation rate per step
    lambda_p: float   # intrinsic kill rate
    sigma: float      # drug bound to immune cells
    rho0: float       # tumour cell count constant
    fitness: float    # immune-cell fitness
    theta: np.ndarray  # AR coefficients, length AR_ORDER


@dataclass
class PatientState:
    t: int
    rho: float
    psi0: float
    kappa: float
    kappa_hist: np.ndarray  # most recent first, length AR_ORDER
    mu_hist: np.ndarray     # most recent first, length MU_WINDOW

    def copy(self) -> "PatientState":
        return replace(self, kappa_hist=self.kappa_hist.copy(), mu_hist=self.mu_hist.copy())

    @property
    def mu_bar(self) -> float:
        return float(self.mu_hist.mean())


def patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_PATIENT, index]))


def cf_noise_rng(seed: int, index: int, cut: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_CF, index, cut]))


def sample_patient(config: SimConfig, rng: np.random.Generator) -> tuple[PatientStatics, PatientState]:
    """Draw statics and the initial state for one patient."""
    statics = PatientStatics(
        alpha0=rng.uniform(0.0, 0.1),
        lambda_p=rng.uniform(0.1, 0.2),
        sigma=rng.uniform(0.0, 0.1),
        rho0=rng.uniform(0.0, 0.1),
        fitness=rng.uniform(1.0, 5.0),
        theta=rng.normal(0.0, math.sqrt(config.ar_coef_var), size=AR_ORDER),
    )
    kappa0 = rng.normal(0.0, math.sqrt(config.noise_kappa_var))
    psi0 = rng.uniform(0.1, 0.3)
    rho = rng.uniform(0.03, 1.0)
    mu0 = statics.lambda_p * psi0 * statics.sigma
    kappa_hist = np.zeros(AR_ORDER)
    kappa_hist[0] = kappa0
    state = PatientState(
        t=0, rho=rho, psi0=psi0, kappa=kappa0,
        kappa_hist=kappa_hist, mu_hist=np.full(MU_WINDOW, mu0),
    )
    return statics, state


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def treatment_prob(state: PatientState, zeta: float) -> float:
    """Treatment propensity; strictly inside (0, 1) for finite states.

    The clamp keeps the overlap guarantee under float64, where the sigmoid
    saturates to exactly 0 or 1 beyond |z| ~ 36.7.
    """
    p = _sigmoid(zeta * state.mu_bar + (1.0 - zeta) * state.kappa)
    return min(max(p, 1e-12), 1.0 - 1e-12)


def step_dynamics_with_noise(statics: PatientStatics, state: PatientState, treat: int,
                             eps_rho: float, eps_kappa: float) -> PatientState:
    """Advance one step under explicit noise draws (the deterministic core)."""
    psi0 = state.psi0 * (1.01 if treat else 0.99)
    mu = statics.lambda_p * psi0 * statics.sigma
    lam = (statics.rho0 / psi0) / statics.fitness
    rho = state.rho + (statics.alpha0 - mu + mu * lam) * state.rho \
        - mu * lam * state.rho ** 2 + eps_rho
    rho = max(rho, 0.0)  # additive noise may cross zero; negative mass is unphysical
    kappa = float(statics.theta @ state.kappa_hist) + eps_kappa
    if not (math.isfinite(rho) and math.isfinite(psi0) and math.isfinite(kappa)):
        raise SimulationError(f"non-finite state at step {state.t + 1}")
    return PatientState(
        t=state.t + 1,
        rho=rho,
        psi0=psi0,
        kappa=kappa,
        kappa_hist=np.concatenate(([kappa], state.kappa_hist[:-1])),
        mu_hist=np.concatenate(([mu], state.mu_hist[:-1])),
    )


def step_dynamics(statics: PatientStatics, state: PatientState, treat: int,
                  rng: np.random.Generator, config: SimConfig) -> PatientState:
    eps_rho = rng.normal(0.0, math.sqrt(config.noise_rho_var))
    eps_kappa = rng.normal(0.0, math.sqrt(config.noise_kappa_var))
    return step_dynamics_with_noise(statics, state, treat, eps_rho, eps_kappa)


def _covariate_row(statics: PatientStatics, state: PatientState) -> np.ndarray:
    return np.array([
        statics.alpha0, statics.lambda_p, statics.sigma, state.psi0,
        statics.rho0, statics.fitness, state.kappa, state.rho,
    ])


def simulate_patient(config: SimConfig, index: int,
                     keep_states: bool = False):
    """Simulate one observational trajectory from the patient's own stream.

    Returns ``(statics, trajectory, states)`` where ``states[k]`` is a copy of
    the simulator state at step ``k`` (empty list unless ``keep_states``).
    """
    rng = patient_rng(config.seed, index)
    statics, state = sample_patient(config, rng)
    T = config.max_steps
    x = np.empty((T, len(COVARIATE_NAMES)))
    a = np.empty(T, dtype=np.int64)
    y = np.empty(T)
    states: list[PatientState] = []
    try:
        for t in range(T):
            if keep_states:
                states.append(state.copy())
            x[t] = _covariate_row(statics, state)
            y[t] = state.rho
            p = treatment_prob(state, config.zeta)
            a[t] = int(rng.random() < p)
            if t < T - 1:
                state = step_dynamics(statics, state, int(a[t]), rng, config)
    except SimulationError as exc:
        raise SimulationError(f"patient {index}: {exc}") from exc
    traj = Trajectory(patient_id=index, covariates=x, treatments=a, outcomes=y)
    return statics, traj, states


def split_sizes(config: SimConfig) -> tuple[int, int, int]:
    n_train = int(config.n_patients * config.train_fraction)
    n_val = int(config.n_patients * config.val_fraction)
    return n_train, n_val, config.n_patients - n_train - n_val


def split_of_index(config: SimConfig, index: int) -> str:
    n_train, n_val, _ = split_sizes(config)
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def generate_dataset(config: SimConfig) -> Dataset:
    """Simulate the full cohort and tag patient-level splits."""
    config.validate()
    trajectories = []
    for i in range(config.n_patients):
        _, traj, _ = simulate_patient(config, i)
        traj.split = split_of_index(config, i)
        trajectories.append(traj)
    ds = Dataset(
        trajectories=trajectories,
        covariate_names=list(COVARIATE_NAMES),
        metadata={"zeta": config.zeta, "seed": config.seed,
                  "sim_config": asdict(config)},
    )
    ds.refresh_stats()
    if not 0.0 < ds.treated_fraction < 1.0:
        raise OverlapError(
            f"treated fraction {ds.treated_fraction} violates overlap; "
            "every history must have non-zero probability of either treatment")
    return ds


def mu_bar_series(trajectory: Trajectory) -> np.ndarray:
    """Recover the windowed mean kill rate from a trajectory's covariates."""
    x = trajectory.covariates
    mu = x[:, 1] * x[:, 2] * x[:, 3]  # lambda_p * sigma * psi0
    out = np.empty_like(mu)
    for t in range(len(mu)):
        lo = max(0, t - MU_WINDOW + 1)
        window = mu[lo:t + 1]
        pad = MU_WINDOW - len(window)
        out[t] = (window.sum() + pad * mu[0]) / MU_WINDOW
    return out


# ---------------------------------------------------------------------------
# Counterfactual test sets
# ---------------------------------------------------------------------------

@dataclass
class CfItem:
    patient: int          # patient index within the test split ordering
    cut: int              # observed history length
    plan: np.ndarray      # future treatments, length tau
    outcomes: np.ndarray  # ground-truth outcomes for the tau future steps


@dataclass
class CfTestSet:
    tau: int
    config: SimConfig
    items: list[CfItem]
    histories: dict[int, Trajectory]
    # Hidden simulator internals keyed by (patient, cut); these power the
    # oracle predictor and optimal-plan enumeration, never a learned model.
    snapshots: dict[tuple[int, int], tuple[PatientStatics, PatientState]] = field(default_factory=dict)
    noise: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)


def rollout_outcomes(statics: PatientStatics, state: PatientState, plan,
                     eps_rho: np.ndarray, eps_kappa: np.ndarray) -> np.ndarray:
    """Simulate a treatment plan forward from a branching state."""
    out = np.empty(len(plan))
    for u, treat in enumerate(plan):
        state = step_dynamics_with_noise(statics, state, int(treat), eps_rho[u], eps_kappa[u])
        out[u] = state.rho
    return out


def one_hot_plans(tau: int) -> list[np.ndarray]:
    """Plan j treats at future step j only, j = 1..tau."""
    return [np.eye(tau, dtype=np.int64)[j] for j in range(tau)]


def generate_counterfactual_test(config: SimConfig, tau: int,
                                 patients: list[int] | None = None) -> CfTestSet:
    """Branch every test history into tau single-treatment future plans.

    For each test patient and each history cut length 1..max_steps, the
    observed prefix is kept and tau one-treatment plans are simulated forward
    with noise draws shared across the plans of that history. With P patients
    this yields P * max_steps * tau trajectories.
    """
    config.validate()
    if tau >= config.max_steps:
        raise ValueError(f"tau {tau} must be < max_steps {config.max_steps}")
    if patients is None:
        n_train, n_val, n_test = split_sizes(config)
        patients = list(range(n_train + n_val, config.n_patients))
    test = CfTestSet(tau=tau, config=config, items=[], histories={})
    plans = one_hot_plans(tau)
    for idx in patients:
        statics, traj, states = simulate_patient(config, idx, keep_states=True)
        traj.split = "test"
        test.histories[idx] = traj
        for cut in range(1, config.max_steps + 1):
            nrng = cf_noise_rng(config.seed, idx, cut)
            eps_rho = nrng.normal(0.0, math.sqrt(config.noise_rho_var), size=tau)
            eps_kappa = nrng.normal(0.0, math.sqrt(config.noise_kappa_var), size=tau)
            branch = states[cut - 1]
            test.snapshots[(idx, cut)] = (statics, branch)
            test.noise[(idx, cut)] = (eps_rho, eps_kappa)
            for plan in plans:
                outcomes = rollout_outcomes(statics, branch, plan, eps_rho, eps_kappa)
                test.items.append(CfItem(patient=idx, cut=cut, plan=plan, outcomes=outcomes))
    return test


def enumerate_optimal_plan(statics: PatientStatics, state: PatientState, tau: int,
                           eps_rho: np.ndarray, eps_kappa: np.ndarray):
    """Brute-force the best plan over all 2**tau futures (common noise).

    Returns ``(best_plan, final_outcomes)`` with outcomes listed in
    lexicographic plan order; ties resolve to the lexicographically first
    plan.
    """
    if tau > 5:
        raise ValueError(f"enumeration limited to tau <= 5, got {tau}")
    best_plan = None
    best_rho = math.inf
    finals = []
    for plan in itertools.product((0, 1), repeat=tau):
        rho_end = rollout_outcomes(statics, state, plan, eps_rho, eps_kappa)[-1]
        finals.append(rho_end)
        if rho_end < best_rho:
            best_rho = rho_end
            best_plan = plan
    return np.array(best_plan, dtype=np.int64), np.array(finals)
