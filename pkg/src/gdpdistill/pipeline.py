"""End-to-end runs: generation, extractor/expert training, allocation, distillation, evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gdp
from .allocator import AllocationPlan, UtilityProbe, allocate, search_noise_for_target, sigma_for_budget
from .config import ExperimentConfig
from .data import LabeledSet, PrivateData
from .distill import BudgetLedger, DistillConfig, DistillResult, distill
from .errors import BracketError, BudgetBreachError, InfeasibleBudgetError
from .generator import (
    DpMoments,
    moment_distance,
    release_moments,
    sample_synthetic,
    sigma_for_moment_release,
    true_moments,
)
from .nn import MLP, GradClipSpec, accuracy, dp_steps_per_epoch, forward_features, init_mlp, train
from .tasks import MixtureTask, make_mixture

log = logging.getLogger(__name__)

GEN_MECHANISM = "moment_release"
EXPERT_MECHANISM = "expert_dp_sgd"
MATCH_MECHANISM = "feature_matching"
SEARCH_MECHANISM = "allocation_search"  # hyperparameter tuning; not charged to the budget
ACCOUNTED = (GEN_MECHANISM, EXPERT_MECHANISM, MATCH_MECHANISM)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# stream identifiers under the master seed
S_GEN, S_SAMPLE, S_EXTRACTORS, S_EXPERT_INIT, S_EXPERT_PRE, S_EXPERT_DP, S_BASELINE, S_SEARCH = range(8)


# ---------------------------------------------------------------------------
# Training helpers


def train_extractors(synthetic: LabeledSet, config: ExperimentConfig, seed: int) -> list[MLP]:
    """Classifiers trained on synthetic data; only their feature layers are used."""
    cfg = config.extractor
    models = []
    for n in range(config.distill.n_extractors):
        model = init_mlp(synthetic.dim, cfg.hidden, synthetic.num_classes, _rng(seed, S_EXTRACTORS, n, 0))
        res = train(model, synthetic.x, synthetic.y, cfg.epochs, cfg.lr, _rng(seed, S_EXTRACTORS, n, 1), cfg.batch_size)
        models.append(res.model)
    return models


def expert_schedule(config: ExperimentConfig, n_private: int) -> tuple[float, int]:
    """Poisson rate and step count of the expert's DP-SGD fine-tuning."""
    b = config.expert.batch_size
    p = min(1.0, b / n_private)
    return p, config.expert.finetune_epochs * dp_steps_per_epoch(n_private, b)


def pretrain_expert(synthetic: LabeledSet, config: ExperimentConfig, seed: int) -> MLP:
    cfg = config.expert
    model = init_mlp(synthetic.dim, cfg.hidden, synthetic.num_classes, _rng(seed, S_EXPERT_INIT))
    return train(model, synthetic.x, synthetic.y, cfg.pretrain_epochs, cfg.lr, _rng(seed, S_EXPERT_PRE), 64).model


def finetune_expert(
    model: MLP,
    guard: PrivateData,
    synthetic: LabeledSet,
    config: ExperimentConfig,
    sigma_e: float,
    seed: int,
    mechanism: str = EXPERT_MECHANISM,
) -> MLP:
    cfg = config.expert
    if cfg.finetune_epochs == 0:
        return model
    data = guard.read(mechanism=mechanism)
    clip = GradClipSpec(cfg.clip, sigma_e, cfg.batch_size)
    res = train(
        model, data.x, data.y, cfg.finetune_epochs, cfg.finetune_lr, _rng(seed, S_EXPERT_DP),
        clip=clip, trace_data=(synthetic.x, synthetic.y),
    )
    return res.model


def downstream_accuracy(train_set: LabeledSet, test: LabeledSet, config: ExperimentConfig, seed: int) -> float:
    """Accuracy on ``test`` of a fresh classifier trained on ``train_set``."""
    cfg = config.eval
    model = init_mlp(train_set.dim, cfg.hidden, train_set.num_classes, _rng(seed, 0))
    res = train(model, train_set.x, train_set.y, cfg.epochs, cfg.lr, _rng(seed, 1), cfg.batch_size)
    return accuracy(res.model, test.x, test.y)


def evaluate_set(train_set: LabeledSet, test: LabeledSet, config: ExperimentConfig, workers: int = 1) -> dict:
    seeds = list(config.eval.seeds)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(downstream_accuracy, [train_set] * len(seeds), [test] * len(seeds),
                                 [config] * len(seeds), seeds))
    else:
        accs = [downstream_accuracy(train_set, test, config, s) for s in seeds]
    return {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "per_seed": [float(a) for a in accs]}


def median_feature_norm(extractor: MLP, data: LabeledSet) -> float:
    return float(np.median(np.linalg.norm(forward_features(extractor, data.x), axis=1)))


# ---------------------------------------------------------------------------
# Allocation


@dataclass
class AllocationOutcome:
    plan: AllocationPlan | None
    sigma_release: float  # noise multiplier of each moment release
    details: dict = field(default_factory=dict)


def _feature_schedule(config: ExperimentConfig, counts: np.ndarray) -> tuple[float, int]:
    # per-class Poisson rate; the smallest class has the largest rate
    return min(1.0, config.distill.batch_size / int(counts.min())), config.distill.iterations


def search_generator_mu(
    guard: PrivateData, config: ExperimentConfig, mu_total: float, seed: int
) -> tuple[float, dict]:
    """Noise for the generator giving a moment distance ``fid_multiplier`` times the full-budget one."""
    bound = config.generator.clip_bound
    with guard.mechanism(SEARCH_MECHANISM):
        exact_m, exact_v = true_moments(guard.read(), bound)

    def distance(sigma: float) -> float:
        # common random numbers keep the probe monotone in sigma
        mom = release_moments(guard, sigma, bound, _rng(seed, S_SEARCH, 0), SEARCH_MECHANISM)
        return moment_distance(mom.means, mom.variances, exact_m, exact_v)

    sigma_total = sigma_for_moment_release(mu_total)
    reference = distance(sigma_total)
    target = config.allocation.fid_multiplier * reference
    sigma = search_noise_for_target(
        UtilityProbe(distance, target, "minimize"), (sigma_total, 100 * sigma_total), config.allocation.search_tol
    )
    return math.sqrt(2.0) / sigma, {"reference_distance": reference, "target_distance": target, "sigma": sigma}


def search_expert_mu(
    guard: PrivateData,
    synthetic: LabeledSet,
    validation: LabeledSet,
    config: ExperimentConfig,
    mu_total: float,
    seed: int,
) -> tuple[float, dict]:
    """Noise for the expert reaching ``accuracy_fraction`` of a DP-SGD-only model given the full budget."""
    p_e, t_e = expert_schedule(config, len(guard))
    sigma_total = sigma_for_budget(mu_total, p_e, t_e)
    cfg = config.expert

    scratch = init_mlp(guard.dim, cfg.hidden, guard.num_classes, _rng(seed, S_SEARCH, 1))
    ref_model = finetune_expert(scratch, guard, synthetic, config, sigma_total, seed, SEARCH_MECHANISM)
    reference = accuracy(ref_model, validation.x, validation.y)
    target = config.allocation.accuracy_fraction * reference
    pre = pretrain_expert(synthetic, config, seed)

    def acc(sigma: float) -> float:
        return accuracy(finetune_expert(pre, guard, synthetic, config, sigma, seed, SEARCH_MECHANISM),
                        validation.x, validation.y)

    hi = 50.0 * sigma_total
    try:
        sigma = search_noise_for_target(UtilityProbe(acc, target, "maximize"), (sigma_total, hi), config.allocation.search_tol)
        note = "bisection"
    except BracketError as exc:
        # pre-training alone already meets the target: spend the least budget tried
        sigma, note = hi, f"target not bracketed ({exc}); using the bracket's high end"
    mu_e = gdp.subsampled_mu(gdp.SubsamplingSpec(p_e, t_e, sigma)).mu
    return mu_e, {"reference_accuracy": reference, "target_accuracy": target, "sigma": sigma, "note": note}


def plan_budget(
    config: ExperimentConfig,
    guard: PrivateData,
    task: MixtureTask | None = None,
    synthetic_for_search: LabeledSet | None = None,
    seed: int | None = None,
) -> AllocationOutcome:
    seed = config.seed if seed is None else seed
    if config.budget.non_private:
        return AllocationOutcome(None, 0.0, {"mode": "non-private"})
    total = gdp.DpBudget(config.budget.epsilon, config.budget.delta)
    mu_total = gdp.dp_to_gdp(total).mu
    alloc = config.allocation
    details: dict = {"mode": alloc.mode}
    if alloc.mode == "fraction":
        mu_g, mu_e = alloc.g_fraction * mu_total, alloc.e_fraction * mu_total
    elif alloc.mode == "explicit":
        mu_g, mu_e = alloc.mu_g, alloc.mu_e
    elif alloc.mode == "search":
        if task is None:
            raise InfeasibleBudgetError("search allocation needs the task's validation split")
        mu_g, details["generator_search"] = search_generator_mu(guard, config, mu_total, seed)
        if synthetic_for_search is None:
            mom = release_moments(guard, sigma_for_moment_release(mu_g), config.generator.clip_bound,
                                  _rng(seed, S_SEARCH, 2), SEARCH_MECHANISM)
            synthetic_for_search = sample_synthetic(mom, config.generator.synthetic_per_class, _rng(seed, S_SEARCH, 3))
        mu_e, details["expert_search"] = search_expert_mu(
            guard, synthetic_for_search, task.validation, config, mu_total, seed
        )
        details["tuning_reads_unaccounted"] = True
    else:
        raise InfeasibleBudgetError(f"unknown allocation mode {alloc.mode!r}")

    p_f, t_f = _feature_schedule(config, guard.class_counts())
    p_e, t_e = expert_schedule(config, len(guard))
    plan = allocate(total, mu_g, mu_e, p_f, t_f, p_e=p_e, T_e=t_e)
    return AllocationOutcome(plan, sigma_for_moment_release(mu_g) if mu_g > 0 else math.inf, details)


# ---------------------------------------------------------------------------
# The run


@dataclass
class RunResult:
    report: dict
    distill: DistillResult
    moments: DpMoments
    synthetic: LabeledSet
    plan: AllocationPlan | None
    ledger: BudgetLedger
    access: dict


def run_pipeline(
    config: ExperimentConfig,
    seed: int | None = None,
    *,
    evaluate: bool = True,
    baselines: bool = True,
    workers: int = 1,
) -> RunResult:
    seed = config.seed if seed is None else seed
    task = make_mixture(config.task)
    declared = ACCOUNTED + ((SEARCH_MECHANISM,) if config.allocation.mode == "search" else ())
    guard = PrivateData(task.train, declared)

    # 1. allocation
    outcome = plan_budget(config, guard, task, seed=seed)
    plan = outcome.plan

    # 2. generation
    bound = config.generator.clip_bound
    moments = release_moments(guard, 0.0 if plan is None else outcome.sigma_release, bound, _rng(seed, S_GEN))
    synthetic = sample_synthetic(moments, config.generator.synthetic_per_class, _rng(seed, S_SAMPLE))

    # 3. extractors (synthetic only) and expert (synthetic + DP-SGD on private)
    extractors = train_extractors(synthetic, config, seed)
    expert_pre = pretrain_expert(synthetic, config, seed)
    sigma_e = 0.0 if plan is None else plan.sigma_e
    expert = finetune_expert(expert_pre, guard, synthetic, config, sigma_e, seed)
    if plan is not None and plan.spec_e is not None:
        mu_e_spent = gdp.subsampled_mu(plan.spec_e).mu
    else:
        mu_e_spent = 0.0 if plan is not None else math.inf

    # 4. distillation
    dcfg_dict = {**config.distill.__dict__, "seed": seed}
    dcfg_dict["sigma_f"] = 0.0 if plan is None else plan.sigma_f
    dcfg = DistillConfig(**dcfg_dict)
    clips = [median_feature_norm(phi, synthetic) for phi in extractors]
    result = distill(
        guard, synthetic, extractors, expert, dcfg, plan,
        mu_g=moments.mu_g, mu_e=mu_e_spent, clip_per_extractor=clips,
    )
    ledger = result.ledger
    ledger.records[:0] = moments.records
    if plan is not None:
        if ledger.mu_total > plan.mu_total.mu * (1 + 1e-9):
            raise BudgetBreachError(f"run spent mu={ledger.mu_total!r} > allowed {plan.mu_total.mu!r}")

    exact_m, exact_v = true_moments(task.train, bound)
    metrics: dict = {
        "moment_distance": moment_distance(moments.means, moments.variances, exact_m, exact_v),
        "variance_floor_hits": int(moments.clamped.sum()),
        "expert_accuracy_pretrained": accuracy(expert_pre, task.test.x, task.test.y),
        "expert_accuracy": accuracy(expert, task.test.x, task.test.y),
        "final_loss_f": result.trace[-1][1] if result.trace else None,
        "final_loss_e": result.trace[-1][2] if result.trace else None,
        "feature_clip_bounds": clips,
    }
    if evaluate:
        metrics["downstream"] = evaluate_set(result.distilled, task.test, config, workers)
        if baselines:
            rand = synthetic.random_subset_per_class(dcfg.ipc, _rng(seed, S_BASELINE))
            metrics["baseline_random_subset"] = evaluate_set(rand, task.test, config, workers)
            metrics["baseline_kmeans_init"] = evaluate_set(result.initial, task.test, config, workers)

    access = guard.log.to_dict()
    report = {
        "seed": seed,
        "config": config.to_dict(),
        "allocation": _plan_dict(plan, outcome),
        "ledger": ledger.summary(),
        "access": access,
        "metrics": metrics,
    }
    return RunResult(report, result, moments, synthetic, plan, ledger, access)


def _plan_dict(plan: AllocationPlan | None, outcome: AllocationOutcome) -> dict:
    if plan is None:
        return {"non_private": True, **outcome.details}
    d = plan.to_dict()
    d["sigma_release"] = outcome.sigma_release
    d.update(outcome.details)
    return d
