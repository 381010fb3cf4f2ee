"""Simulation studies: data-generating processes, ground truth, misspecification and metrics."""
from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .dataset import CONTINUOUS, Dataset, from_arrays, make_folds, scale_outcomes
from .learners import LOG, SQUARED, EnsembleSpec, LearnerSpec
from .nuisance import (NuisanceConfig, NuisanceEstimates, estimate_nuisances,
                       truncate_propensities)
from .targeting import PARAMETERS, glm_benchmark, target_all

logger = logging.getLogger(__name__)

SIM1, SIM2 = "sim1", "sim2"
SCENARIOS = ("s1", "s2", "s3", "s4")
SIM2_FLOOR = 0.01

# Sim-1 covariate regions (0, .5], (.5, .7], (.7, 1] and their lengths
SIM1_REGION_LENGTH = np.array([0.5, 0.2, 0.3])
# outcome table Q[beta, region]
SIM1_Q = np.array([[0.7, 0.5, 0.0],
                   [0.3, 1.0, 2.0]])


@dataclass(frozen=True)
class TruthTable:
    beta: np.ndarray
    values: dict  # parameter -> (m,) array indexed by provider number - 1
    mc_se: dict = field(default_factory=dict)
    beta_redraws: int = 0


def _draw_beta(rng, m):
    redraws = 0
    while True:
        beta = rng.binomial(1, 0.5, size=m)
        if 0 < beta.sum() < m:
            return beta, redraws
        redraws += 1


def _sample_categorical(rng, probs):
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sim1_region(w1):
    w1 = np.asarray(w1)
    return np.where(w1 <= 0.5, 0, np.where(w1 <= 0.7, 1, 2))


def sim1_weights(beta, w1):
    """Unnormalized assignment weights ``expit(+/-2)`` per row and provider."""
    high = (np.asarray(w1) > 0.7)[:, None]
    b1 = (np.asarray(beta) == 1)[None, :]
    return expit(np.where(high == b1, 2.0, -2.0))


def sim1_q(w1, beta_a):
    return SIM1_Q[np.asarray(beta_a), sim1_region(w1)]


def sim1_truth(beta) -> dict:
    """Closed-form parameters: every ingredient is constant on the three regions."""
    beta = np.asarray(beta)
    reps = np.array([0.25, 0.6, 0.85])  # one point inside each region
    u = sim1_weights(beta, reps)
    pi = u / u.sum(axis=1, keepdims=True)  # (3, m)
    Q = SIM1_Q[beta][:, [0, 1, 2]].T  # (3, m): Q at region r for provider a
    L = SIM1_REGION_LENGTH[:, None]
    mu_tilde = (pi * Q).sum(axis=1, keepdims=True)
    p = (L * pi).sum(axis=0)
    phi = (L * Q).sum(axis=0)
    psi1 = (L * pi * Q).sum(axis=0) / p
    psi2 = (L * pi * mu_tilde).sum(axis=0) / p
    return {"phi": phi, "psi1": psi1, "psi2": psi2, "er": psi1 - psi2, "smr": psi1 / psi2}


def draw_sim1(N, m, sigma, seed):
    """One Sim-1 dataset: single uniform covariate, piecewise assignment and outcome."""
    rng = np.random.default_rng(seed)
    beta, redraws = _draw_beta(rng, m)
    W1 = rng.random(N)
    u = sim1_weights(beta, W1)
    A = _sample_categorical(rng, u / u.sum(axis=1, keepdims=True))
    Y = sim1_q(W1, beta[A]) + sigma * rng.standard_normal(N)
    d = from_arrays(W1[:, None], A + 1, Y, CONTINUOUS)
    return d, TruthTable(beta, sim1_truth(beta), {}, redraws)


def sim2_g(beta_a, W):
    return np.maximum(1 + 10 * beta_a * W[:, 0] - 0.2 * W[:, 1] - 0.5 * W[:, 4], SIM2_FLOOR)


def sim2_q(W, beta_a):
    return 2 * W[:, 0] - (W[:, 1] - 0.5) ** 2 + (W[:, 2] > 0.5) + W[:, 4] - 2 * beta_a


def sim2_propensity(beta, W):
    G = np.column_stack([sim2_g(b, W) for b in beta])
    return G / G.sum(axis=1, keepdims=True)


def sim2_truth(beta, n_draws=10 ** 6, seed=0, batches=20, k=10) -> tuple[dict, dict]:
    """Monte Carlo truth over the covariate law; standard errors by batch means.

    Only two provider types exist (beta = 0 or 1), so the integrals are taken
    per type and broadcast to providers.
    """
    beta = np.asarray(beta)
    n1 = int(beta.sum())
    n0 = len(beta) - n1
    rng = np.random.default_rng(seed)
    per = n_draws // batches
    acc = np.zeros((batches, 2, 4))  # batch, type, (pi, pi*Q, pi*mu_tilde, Q)
    for b in range(batches):
        W = rng.random((per, k))
        g = np.column_stack([sim2_g(0, W), sim2_g(1, W)])
        q = np.column_stack([sim2_q(W, 0), sim2_q(W, 1)])
        S = n0 * g[:, 0] + n1 * g[:, 1]
        pi = g / S[:, None]
        mu_t = (n0 * g[:, 0] * q[:, 0] + n1 * g[:, 1] * q[:, 1]) / S
        acc[b, :, 0] = pi.mean(axis=0)
        acc[b, :, 1] = (pi * q).mean(axis=0)
        acc[b, :, 2] = (pi * mu_t[:, None]).mean(axis=0)
        acc[b, :, 3] = q.mean(axis=0)

    def params(x):
        p, pq, pm, qm = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        psi1, psi2 = pq / p, pm / p
        return {"phi": qm, "psi1": psi1, "psi2": psi2, "er": psi1 - psi2, "smr": psi1 / psi2}

    full = params(acc.mean(axis=0))
    per_batch = params(acc)
    se = {k_: per_batch[k_].std(axis=0, ddof=1) / np.sqrt(batches) for k_ in full}
    values = {k_: v[beta] for k_, v in full.items()}
    ses = {k_: v[beta] for k_, v in se.items()}
    return values, ses


def draw_sim2(N, m, sigma, seed, k=10, truth_draws=10 ** 6):
    rng = np.random.default_rng(seed)
    beta, redraws = _draw_beta(rng, m)
    truth_seed = int(rng.integers(2 ** 63))
    W = rng.random((N, k))
    A = _sample_categorical(rng, sim2_propensity(beta, W))
    Y = sim2_q(W, beta[A]) + sigma * rng.standard_normal(N)
    d = from_arrays(W, A + 1, Y, CONTINUOUS)
    values, se = sim2_truth(beta, truth_draws, truth_seed, k=k)
    return d, TruthTable(beta, values, se, redraws)


def apply_misspecification(nu: NuisanceEstimates, scenario: str, seed) -> NuisanceEstimates:
    """Replace nuisance fits by deliberately inconsistent ones.

    s2: Dirichlet(1, ..., 1) propensity rows; s3: outcome model fixed at 0.5
    on the scaled outcome range; s4: both. s1 leaves everything untouched.
    """
    if scenario == "s1":
        return nu
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    rng = np.random.default_rng(seed)
    changes = {}
    if scenario in ("s2", "s4"):
        n, m = nu.pi_hat.shape
        pi = rng.dirichlet(np.ones(m), size=n)
        changes["pi_hat"] = pi
        if nu.pi_direct is not None:
            changes["pi_direct"] = truncate_propensities(pi, nu.truncation)
    if scenario in ("s3", "s4"):
        changes["mu_tilde"] = np.full_like(nu.mu_tilde, 0.5)
    return replace(nu, **changes)


def learner_preset(study: str, seed=0) -> NuisanceConfig:
    """Desk-scale analogues of the simulation learner libraries."""
    if study == SIM1:
        trees = (LearnerSpec.make("gbt", trees=50, depth=2), LearnerSpec.make("gbt", trees=100, depth=2))
        prop = EnsembleSpec(trees, stacking_folds=3, weight_loss=LOG, seed=seed)
        out = EnsembleSpec(trees, stacking_folds=3, weight_loss=SQUARED, seed=seed)
        return NuisanceConfig(propensity=prop, outcome=out)
    prop = EnsembleSpec((LearnerSpec.make("mean"), LearnerSpec.make("glm"),
                         LearnerSpec.make("glm_ridge", lam=1.0),
                         LearnerSpec.make("gbt", trees=100, depth=2)),
                        stacking_folds=3, weight_loss=LOG, seed=seed)
    out = EnsembleSpec((LearnerSpec.make("mean"), LearnerSpec.make("glm"),
                        LearnerSpec.make("glm_ridge", lam=1.0),
                        LearnerSpec.make("gbt", trees=100, depth=2),
                        LearnerSpec.make("knn", k=20)),
                       stacking_folds=3, weight_loss=SQUARED, seed=seed)
    return NuisanceConfig(propensity=prop, outcome=out)


@dataclass(frozen=True)
class SimConfig:
    study: str = SIM1
    N: int = 2500
    m: int = 10
    k: int = 1
    sigma: float = 1.0
    replicates: int = 100
    seed: int = 0
    scenarios: tuple = ("s1",)
    estimators: tuple = ("tmle", "glm")
    parameters: tuple = PARAMETERS
    folds: int = 5
    nuisance: NuisanceConfig | None = None  # None: learner_preset(study)
    truth_draws: int = 10 ** 6
    threads: int = 1
    level: float = 0.95

    def __post_init__(self):
        if self.study not in (SIM1, SIM2):
            raise ValueError(f"unknown study {self.study!r}")
        if self.study == SIM1:
            if self.k != 1:
                object.__setattr__(self, "k", 1)
            if tuple(self.scenarios) != ("s1",):
                raise ValueError("misspecification scenarios apply to sim2 only")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ValueError(f"unknown scenario {s!r}")
        if self.m < 2 or self.N < 1 or self.replicates < 1 or not self.sigma >= 0:
            raise ValueError("invalid simulation size settings")
        unknown = set(self.estimators) - {"tmle", "glm"}
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        object.__setattr__(self, "estimators", tuple(self.estimators))


@dataclass
class SimResult:
    config: SimConfig
    summary: list  # dicts: estimator, scenario, parameter, ME, MAE, coverage
    records: list  # per replicate x estimator x scenario x parameter x provider
    failures: int = 0
    failure_messages: list = field(default_factory=list)

    def cell(self, estimator, parameter, scenario="s1") -> dict:
        for row in self.summary:
            if (row["estimator"], row["parameter"], row["scenario"]) == (estimator, parameter, scenario):
                return row
        raise KeyError((estimator, parameter, scenario))


def _replicate(args):
    cfg, r, seed = args
    ss = np.random.SeedSequence(seed)
    data_ss, fold_ss, mis_ss = ss.spawn(3)
    data_seed = int(data_ss.generate_state(1, np.uint64)[0])
    if cfg.study == SIM1:
        d, truth = draw_sim1(cfg.N, cfg.m, cfg.sigma, data_seed)
    else:
        d, truth = draw_sim2(cfg.N, cfg.m, cfg.sigma, data_seed, cfg.k, cfg.truth_draws)
    prov = np.array(d.labels) - 1
    recs = []

    def record(estimator, scenario, pe):
        for p in pe.parameters:
            for a in range(d.m):
                recs.append((r, estimator, scenario, p, int(prov[a]), float(pe.estimate[p][a]),
                             float(truth.values[p][prov[a]]), float(pe.ci_lo[p][a]),
                             float(pe.ci_hi[p][a])))

    if "glm" in cfg.estimators:
        record("glm", "-", glm_benchmark(d, cfg.parameters))
    if "tmle" in cfg.estimators:
        ncfg = cfg.nuisance or learner_preset(cfg.study)
        ncfg = replace(ncfg, direct="phi" in cfg.parameters)
        ds, scale = scale_outcomes(d)
        folds = make_folds(ds, cfg.folds, int(fold_ss.generate_state(1, np.uint64)[0]) >> 1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            nu = estimate_nuisances(ds, folds, ncfg)
            mis_seeds = mis_ss.spawn(len(cfg.scenarios))
            for sc, sseed in zip(cfg.scenarios, mis_seeds):
                nus = apply_misspecification(nu, sc, sseed)
                record("tmle", sc, target_all(ds, scale, nus, cfg.parameters, cfg.level))
    return recs


def _safe_replicate(args):
    try:
        return args[1], _replicate(args), None
    except Exception as exc:  # replicate-level failure is recorded, not fatal
        return args[1], None, f"replicate {args[1]}: {type(exc).__name__}: {exc}"


def summarize(records, cfg: SimConfig) -> list:
    """ME and MAE averaged over providers then replicates; coverage over all cells."""
    if not records:
        return []
    keys = sorted({(x[1], x[2], x[3]) for x in records},
                  key=lambda k: (k[0] != "tmle", k[1], PARAMETERS.index(k[2])))
    out = []
    for est, sc, p in keys:
        sel = [x for x in records if (x[1], x[2], x[3]) == (est, sc, p)]
        by_rep = {}
        for x in sel:
            by_rep.setdefault(x[0], []).append(x)
        me, mae, cov_hits, cov_n = [], [], 0, 0
        for xs in by_rep.values():
            err = np.array([x[5] - x[6] for x in xs], dtype=float)
            ok = np.isfinite(err)
            if not ok.any():
                continue
            me.append(err[ok].mean())
            mae.append(np.abs(err[ok]).mean())
            if est == "tmle":
                for x in xs:
                    if np.isfinite(x[7]) and np.isfinite(x[8]):
                        cov_hits += x[7] <= x[6] <= x[8]
                        cov_n += 1
        out.append({"study": cfg.study, "scenario": sc, "estimator": est, "parameter": p,
                    "N": cfg.N, "ME": float(np.mean(me)) if me else float("nan"),
                    "MAE": float(np.mean(mae)) if mae else float("nan"),
                    "coverage": cov_hits / cov_n if cov_n else float("nan")})
    return out


def replicate_seeds(seed, replicates):
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(replicates)]


def run_study(cfg: SimConfig) -> SimResult:
    """Run all replicates (optionally in worker processes) and aggregate.

    Results are identical for any thread count: each replicate draws from its
    own seed and the reduction runs in replicate order.
    """
    tasks = [(cfg, r, s) for r, s in enumerate(replicate_seeds(cfg.seed, cfg.replicates))]
    threads = max(1, int(cfg.threads or 1))
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_safe_replicate, tasks))
    else:
        results = [_safe_replicate(t) for t in tasks]
    records, msgs = [], []
    for r, recs, err in sorted(results, key=lambda x: x[0]):
        if err is not None:
            logger.warning(err)
            msgs.append(err)
        else:
            records.extend(recs)
    return SimResult(cfg, summarize(records, cfg), records, len(msgs), msgs)


def default_threads() -> int:
    env = os.environ.get("PROVPROF_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
