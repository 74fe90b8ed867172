import math

import numpy as np
import pytest

from gdpdistill import gdp
from gdpdistill.config import ExperimentConfig, golden_config
from gdpdistill.data import PrivateData
from gdpdistill.errors import InfeasibleBudgetError, ParseError
from gdpdistill.pipeline import ACCOUNTED, SEARCH_MECHANISM, downstream_accuracy, evaluate_set, plan_budget, run_pipeline
from gdpdistill.tasks import MixtureSpec, make_mixture


def small_config(**budget):
    cfg = golden_config()
    cfg.task = MixtureSpec(dim=6, num_classes=3, per_class=150, test_per_class=200, separation=4.0, seed=11)
    cfg.generator.synthetic_per_class = 200
    cfg.extractor.epochs = 2
    cfg.expert.pretrain_epochs = 3
    cfg.expert.finetune_epochs = 2
    cfg.distill.iterations = 20
    cfg.distill.ipc = 3
    cfg.distill.batch_size = 32
    cfg.distill.n_extractors = 2
    cfg.eval.epochs = 30
    cfg.eval.seeds = [0, 1]
    for k, v in budget.items():
        setattr(cfg.budget, k, v)
    return cfg


# --- config ------------------------------------------------------------------


def test_config_round_trip_is_byte_identical(tmp_path):
    cfg = golden_config()
    cfg.budget.delta = 1.0 / 3.0
    path = tmp_path / "c.json"
    cfg.save(path)
    again = ExperimentConfig.load(path)
    assert again.to_json() == path.read_text()
    assert again.budget.delta == 1.0 / 3.0


def test_config_infinite_epsilon():
    cfg = golden_config()
    cfg.budget.epsilon = math.inf
    text = cfg.to_json()
    assert '"epsilon": "inf"' in text
    assert ExperimentConfig.from_json(text).budget.non_private


def test_config_rejects_unknown_keys_and_bad_json():
    with pytest.raises(ParseError, match="unknown keys"):
        ExperimentConfig.from_dict({"budget": {"epsilon": 1, "colour": 2}})
    with pytest.raises(ParseError) as info:
        ExperimentConfig.from_json('{\n "seed": 1,\n oops\n}')
    assert info.value.line == 3


def test_golden_task_is_not_saturated():
    task = make_mixture(golden_config().task)
    assert 0.93 <= task.bayes_accuracy(5000) <= 0.97


# --- allocation ----------------------------------------------------------------


def test_fraction_plan_is_feasible_and_honest():
    cfg = golden_config()
    task = make_mixture(cfg.task)
    outcome = plan_budget(cfg, PrivateData(task.train, ACCOUNTED), task)
    plan = outcome.plan
    assert plan.delta_spent() <= cfg.budget.delta
    assert plan.mu_total.mu == pytest.approx(2.0, abs=0.02)
    assert outcome.sigma_release == pytest.approx(math.sqrt(2) / plan.mu_g.mu)


def test_explicit_plan_can_be_infeasible():
    cfg = golden_config()
    cfg.allocation.mode = "explicit"
    cfg.allocation.mu_g, cfg.allocation.mu_e = 2.0, 2.0
    task = make_mixture(cfg.task)
    with pytest.raises(InfeasibleBudgetError):
        plan_budget(cfg, PrivateData(task.train, ACCOUNTED), task)


def test_search_allocation_replays_bit_identically():
    cfg = small_config()
    cfg.allocation.mode = "search"
    task = make_mixture(cfg.task)
    outcomes, logs = [], []
    for _ in range(2):
        guard = PrivateData(task.train, ACCOUNTED + (SEARCH_MECHANISM,))
        outcomes.append(plan_budget(cfg, guard, task, seed=3))
        logs.append(guard.log.to_dict())
    a, b = outcomes
    assert a.plan.sigma_e == b.plan.sigma_e and a.plan.sigma_f == b.plan.sigma_f
    assert a.details == b.details
    assert a.details["tuning_reads_unaccounted"] is True
    # every probe read is labelled as tuning, none as a charged mechanism
    assert set(logs[0]["records_read"]) == {SEARCH_MECHANISM}


# --- end to end --------------------------------------------------------------


def test_small_run_is_deterministic_and_honest():
    cfg = small_config()
    a = run_pipeline(cfg, 5)
    b = run_pipeline(cfg, 5)
    assert a.report == b.report
    assert a.distill.distilled.x.tobytes() == b.distill.distilled.x.tobytes()
    assert a.ledger.delta_spent() <= cfg.budget.delta * (1 + 1e-9)
    assert a.access["undeclared_reads"] == 0
    assert set(a.access["records_read"]) <= set(ACCOUNTED)
    assert 0.0 <= a.report["metrics"]["downstream"]["mean"] <= 1.0


def test_non_private_sentinel_run():
    cfg = small_config(epsilon=math.inf)
    run = run_pipeline(cfg, 5, evaluate=False)
    assert run.plan is None
    assert run.moments.sigma_g == 0.0
    assert run.report["allocation"]["non_private"] is True
    assert not run.ledger.private


def test_parallel_evaluation_matches_sequential():
    cfg = small_config()
    task = make_mixture(cfg.task)
    train = task.train.random_subset_per_class(5, np.random.default_rng(0))
    assert evaluate_set(train, task.test, cfg, workers=2) == evaluate_set(train, task.test, cfg, workers=1)


def test_full_training_set_as_distilled_matches_direct_training():
    cfg = small_config()
    task = make_mixture(cfg.task)
    res = evaluate_set(task.train, task.test, cfg)
    direct = np.mean([downstream_accuracy(task.train, task.test, cfg, s) for s in cfg.eval.seeds])
    assert abs(res["mean"] - direct) <= 0.01


def test_zero_generator_share_skips_the_release():
    cfg = small_config()
    cfg.allocation.g_fraction = 0.0
    run = run_pipeline(cfg, 5, evaluate=False)
    assert run.moments.mu_g == 0.0
    assert "moment_release" not in run.access["records_read"]
    assert run.ledger.delta_spent() <= cfg.budget.delta * (1 + 1e-9)
