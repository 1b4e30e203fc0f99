"""Synthetic multi-study generator and replication harness.

Generates K trials plus a frozen target sample from a shared covariate
model, with study-level random shifts (a_s, b_s, c_s) producing
heterogeneity in the outcome intercept, the main treatment effect and the
treatment-age interaction.  Each replication redraws the trials; the target
profiles and the target-setting effect draw are frozen for the whole
experiment.  Per-profile coverage, interval length and bias are accumulated
across replications.

Covariates (standardized units): age, sex (binary), smoking (binary),
weight, baseline severity score.  The covariate covariance matrix and the
target-population shifts are shipped constants, documented below.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri

from .bart import BartParams, bart_cate_normal, fit_bart_slearner
from .errors import CatemetaError, ConfigurationError
from .forest import ForestParams, fit_causal_forest, forest_cates
from .linear import fit_interaction_ols, linear_cate
from .meta import MetaInput, pool_cate, prediction_interval, reml_theta2_batch
from .model import CovariateProfile, StudyCateEstimate, TrialDataset
from .rng import spawn_seed, substream

COVARIATE_NAMES = ("age", "sex", "smoking", "weight", "madrs")
_AGE, _SEX, _SMOKING, _WEIGHT, _MADRS = range(5)
_BINARY_COLUMNS = (_SEX, _SMOKING)

# Across-study distribution of covariate means (center, sd).
_MEAN_CENTERS = np.array([0.0, 0.6784, 0.3043, 0.0, 0.0])
_MEAN_SDS = np.array([0.2, 0.1, 0.1, 0.5, 0.3])

# Within-study covariance of the latent covariates: unit variances, mild
# positive dependence, slightly stronger between weight and the sex latent.
_COVARIANCE = np.full((5, 5), 0.1)
np.fill_diagonal(_COVARIANCE, 1.0)
_COVARIANCE[_SEX, _WEIGHT] = _COVARIANCE[_WEIGHT, _SEX] = 0.2
_COVARIANCE.setflags(write=False)

# Target population: older, more female, more smokers, heavier, lower
# baseline severity (standardized shifts; binary shifts are probabilities).
_TARGET_SHIFTS = np.array([0.5, 0.1, 0.1, 0.5, -0.3])

_NOISE_SD = 0.05
_N_TARGET_PROFILES = 100

# Study-effect standard deviations (sigma_a, sigma_b, sigma_c) per level.
_HETEROGENEITY_SIGMAS = {
    1: (1.0, 0.25, 0.25),
    2: (1.0, 0.5, 0.25),
    3: (1.0, 1.0, 0.5),
}

CATE_SETTINGS = ("linear", "nonlinear")
COVARIATE_MODES = ("variable", "same", "age_only_variable")
EFFECT_DISTRIBUTIONS = ("normal", "uniform")
# "oracle" injects each study's true effect with negligible variance; it
# exercises the pooling stage alone and is meant for calibration checks.
STAGE1_METHODS = ("linear", "forest_honest", "forest_adaptive", "bart", "oracle")
_ORACLE_SE2 = 1e-6


@dataclass(frozen=True)
class SimConfig:
    k_studies: int = 10
    n_per_study: int = 500
    cate_setting: str = "linear"
    heterogeneity_level: int = 1
    covariate_mode: str = "variable"
    effect_distribution: str = "normal"
    n_replications: int = 500
    master_seed: int = 0

    def __post_init__(self):
        if self.k_studies < 2:
            raise ConfigurationError("k_studies must be >= 2")
        if self.n_per_study < 1 or self.n_replications < 1:
            raise ConfigurationError("sample and replication counts must be positive")
        if self.cate_setting not in CATE_SETTINGS:
            raise ConfigurationError(f"cate_setting must be one of {CATE_SETTINGS}")
        if self.heterogeneity_level not in _HETEROGENEITY_SIGMAS:
            raise ConfigurationError("heterogeneity_level must be 1, 2 or 3")
        if self.covariate_mode not in COVARIATE_MODES:
            raise ConfigurationError(f"covariate_mode must be one of {COVARIATE_MODES}")
        if self.effect_distribution not in EFFECT_DISTRIBUTIONS:
            raise ConfigurationError(
                f"effect_distribution must be one of {EFFECT_DISTRIBUTIONS}"
            )


@dataclass(frozen=True)
class TrueEffectRecord:
    """Frozen target-setting effect draw and the implied true CATEs."""

    target_effects: tuple[float, float, float]
    true_tau: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.true_tau, dtype=np.float64)
        tau.setflags(write=False)
        object.__setattr__(self, "true_tau", tau)


@dataclass(frozen=True)
class MetricsTable:
    """Per-profile coverage, mean interval length and bias for one method."""

    method: str
    profile_ids: tuple[int, ...]
    coverage: np.ndarray
    mean_length: np.ndarray
    bias: np.ndarray
    n_effective_replications: int
    aborted_replications: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("coverage", "mean_length", "bias"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def _draw_binary(latent_col, mean, n):
    """Dichotomize a latent normal column at probability = clamped mean.

    The latent value L ~ N(mean, 1) is mapped through its own CDF, so the
    binary column keeps the latent's rank correlation with the other
    covariates while Pr(1) equals the clamped study mean exactly.
    """
    p = min(max(mean, 0.0), 1.0)
    if p <= 0.0:
        return np.zeros(n)
    if p >= 1.0:
        return np.ones(n)
    return (latent_col <= mean + ndtri(p)).astype(np.float64)


def _study_means(config: SimConfig, rng) -> np.ndarray:
    means = _MEAN_CENTERS.copy()
    if config.covariate_mode == "variable":
        means = rng.normal(_MEAN_CENTERS, _MEAN_SDS)
    elif config.covariate_mode == "age_only_variable":
        means[_AGE] = rng.normal(_MEAN_CENTERS[_AGE], _MEAN_SDS[_AGE])
    return means


def _sample_covariates(means, n, rng) -> np.ndarray:
    latent = rng.multivariate_normal(means, _COVARIANCE, size=n, method="cholesky")
    x = latent.copy()
    for j in _BINARY_COLUMNS:
        x[:, j] = _draw_binary(latent[:, j], means[j], n)
    return x


def gen_trial_covariates(config: SimConfig, study: int, rng) -> np.ndarray:
    """Covariate matrix (n, 5) for one study: draw means, then rows."""
    means = _study_means(config, rng)
    return _sample_covariates(means, config.n_per_study, rng)


def gen_target_profiles(config: SimConfig, rng) -> list[CovariateProfile]:
    """The frozen target sample: 100 profiles from the shifted distribution."""
    means = _MEAN_CENTERS + _TARGET_SHIFTS
    x = _sample_covariates(means, _N_TARGET_PROFILES, rng)
    return [CovariateProfile(profile_id=i, x=x[i]) for i in range(_N_TARGET_PROFILES)]


def _cate_values(age, setting: str, b: float, c: float):
    if setting == "linear":
        return (2.505 + b) + (0.82 + c) * age
    return (2.20 + b) * np.exp((0.35 + c) * age)


def true_cate(profile: CovariateProfile, setting: str, effects: tuple[float, float]) -> float:
    """True treatment effect at a profile for given (b, c) study shifts."""
    b, c = effects
    return float(_cate_values(profile.x[_AGE], setting, b, c))


def draw_study_effects(level: int, distribution: str, rng) -> tuple[float, float, float]:
    """One study's (a_s, b_s, c_s) heterogeneity draw."""
    if distribution == "uniform":
        a, b, c = rng.uniform(-1.0, 1.0, size=3)
    else:
        sa, sb, sc = _HETEROGENEITY_SIGMAS[level]
        a = rng.normal(0.0, sa)
        b = rng.normal(0.0, sb)
        c = rng.normal(0.0, sc)
    return float(a), float(b), float(c)


def gen_outcomes(covariates, treatments, setting: str, effects, rng) -> np.ndarray:
    """Outcomes Y = m(X) + A * tau(X) + noise for one study."""
    a_eff, b_eff, c_eff = effects
    age = covariates[:, _AGE]
    if setting == "linear":
        main = (
            (-17.40 + a_eff)
            - 0.13 * age
            - 2.05 * covariates[:, _MADRS]
            - 0.11 * covariates[:, _SEX]
        )
    else:
        main = (-17.52 + a_eff) - 0.08 * age
    tau = _cate_values(age, setting, b_eff, c_eff)
    noise = rng.normal(0.0, _NOISE_SD, size=covariates.shape[0])
    return main + treatments * tau + noise


def target_effect_record(config: SimConfig, profiles) -> TrueEffectRecord:
    """Draw the target setting's effects once and fix the true CATEs."""
    rng = substream(config.master_seed, "target-effects")
    effects = draw_study_effects(config.heterogeneity_level, config.effect_distribution, rng)
    _, b, c = effects
    tau = np.array([true_cate(p, config.cate_setting, (b, c)) for p in profiles])
    return TrueEffectRecord(target_effects=effects, true_tau=tau)


def gen_study(config: SimConfig, replication: int, study: int) -> TrialDataset:
    """Assemble one simulated trial from its derived random streams."""
    base = (config.master_seed, "rep", replication, "study", study)
    effects = draw_study_effects(
        config.heterogeneity_level,
        config.effect_distribution,
        substream(*base, "effects"),
    )
    x = gen_trial_covariates(config, study, substream(*base, "covariates"))
    a = substream(*base, "treatment").integers(0, 2, size=config.n_per_study)
    y = gen_outcomes(x, a, config.cate_setting, effects, substream(*base, "noise"))
    return TrialDataset(
        study_id=study, y=y, a=a, x=x, covariate_names=COVARIATE_NAMES
    )


def _stage1_estimates(config, method, dataset, profiles, replication,
                      forest_params, bart_params):
    if method == "linear":
        fit = fit_interaction_ols(dataset)
        return [linear_cate(fit, p) for p in profiles]
    if method in ("forest_honest", "forest_adaptive"):
        seed = spawn_seed(config.master_seed, "rep", replication,
                          "study", dataset.study_id, "stage1")
        params = replace(
            forest_params, honest=(method == "forest_honest"), seed=seed
        )
        model = fit_causal_forest(dataset, params)
        return forest_cates(model, profiles)
    if method == "bart":
        seed = spawn_seed(config.master_seed, "rep", replication,
                          "study", dataset.study_id, "stage1")
        posterior = fit_bart_slearner(dataset, profiles, replace(bart_params, seed=seed))
        return [bart_cate_normal(posterior, p) for p in profiles]
    raise ConfigurationError(f"unknown stage1 method '{method}'")


def _oracle_estimates(config, replication, study, profiles):
    """True study effects injected with negligible variance (no data drawn).

    Uses the same effect stream as gen_study, so the oracle sees exactly
    the study effects a data-based method's studies would have.
    """
    rng = substream(config.master_seed, "rep", replication, "study", study, "effects")
    _, b, c = draw_study_effects(
        config.heterogeneity_level, config.effect_distribution, rng
    )
    return [
        StudyCateEstimate(
            study_id=study,
            profile_id=p.profile_id,
            tau_hat=true_cate(p, config.cate_setting, (b, c)),
            se2=_ORACLE_SE2,
        )
        for p in profiles
    ]


def _run_replication(config, method, replication, profiles, forest_params,
                     bart_params, alpha):
    """One replication: K fresh studies, Stage 1 fits, pooling, intervals.

    Returns (lower, center, upper) arrays over profiles.
    """
    per_study = []
    for s in range(1, config.k_studies + 1):
        if method == "oracle":
            per_study.append(_oracle_estimates(config, replication, s, profiles))
            continue
        dataset = gen_study(config, replication, s)
        per_study.append(
            _stage1_estimates(config, method, dataset, profiles, replication,
                              forest_params, bart_params)
        )
    tau = np.array([[est.tau_hat for est in study] for study in per_study])
    v = np.array([[est.se2 for est in study] for study in per_study])
    theta2 = reml_theta2_batch(tau, v)
    lower = np.empty(len(profiles))
    center = np.empty(len(profiles))
    upper = np.empty(len(profiles))
    for i in range(len(profiles)):
        meta = MetaInput(
            profile_id=profiles[i].profile_id,
            estimates=tuple(per_study[s][i] for s in range(config.k_studies)),
        )
        pooled = pool_cate(meta, float(theta2[i]))
        pi = prediction_interval(pooled, alpha, config.k_studies)
        lower[i], center[i], upper[i] = pi.lower, pi.center, pi.upper
    return lower, center, upper


def _replication_worker(args):
    config, method, replication, forest_params, bart_params, alpha = args
    profiles = gen_target_profiles(config, substream(config.master_seed, "target-profiles"))
    try:
        return replication, _run_replication(
            config, method, replication, profiles, forest_params, bart_params, alpha
        )
    except CatemetaError:
        return replication, None


def run_experiment(
    config: SimConfig,
    method: str = "linear",
    forest_params: ForestParams | None = None,
    bart_params: BartParams | None = None,
    alpha: float = 0.05,
    n_workers: int = 1,
) -> MetricsTable:
    """Run all replications for one Stage-1 method and aggregate metrics.

    Coverage is the fraction of effective replications whose interval
    contains the frozen true target CATE; length is the mean interval width;
    bias is the mean of (interval center - true CATE).  A replication whose
    estimation fails is counted as aborted and excluded from all three,
    never silently dropped.  Deterministic given ``config.master_seed``,
    regardless of ``n_workers``.
    """
    if method not in STAGE1_METHODS:
        raise ConfigurationError(f"method must be one of {STAGE1_METHODS}")
    if config.k_studies < 3:
        raise ConfigurationError("prediction intervals need k_studies >= 3")
    forest_params = forest_params if forest_params is not None else ForestParams()
    bart_params = bart_params if bart_params is not None else BartParams()

    profiles = gen_target_profiles(config, substream(config.master_seed, "target-profiles"))
    record = target_effect_record(config, profiles)
    true_tau = record.true_tau

    n_prof = len(profiles)
    covered = np.zeros(n_prof)
    width_sum = np.zeros(n_prof)
    bias_sum = np.zeros(n_prof)
    aborted = []

    jobs = [
        (config, method, r, forest_params, bart_params, alpha)
        for r in range(config.n_replications)
    ]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_replication_worker, jobs, chunksize=1))
    else:
        results = [_replication_worker(job) for job in jobs]

    # Deterministic reduction in replication order.
    for replication, payload in sorted(results, key=lambda item: item[0]):
        if payload is None:
            aborted.append(replication)
            continue
        lower, center, upper = payload
        covered += (lower <= true_tau) & (true_tau <= upper)
        width_sum += upper - lower
        bias_sum += center - true_tau
    n_eff = config.n_replications - len(aborted)
    with np.errstate(invalid="ignore", divide="ignore"):
        coverage = covered / n_eff if n_eff else np.full(n_prof, np.nan)
        mean_length = width_sum / n_eff if n_eff else np.full(n_prof, np.nan)
        bias = bias_sum / n_eff if n_eff else np.full(n_prof, np.nan)
    return MetricsTable(
        method=method,
        profile_ids=tuple(p.profile_id for p in profiles),
        coverage=coverage,
        mean_length=mean_length,
        bias=bias,
        n_effective_replications=n_eff,
        aborted_replications=tuple(aborted),
    )
