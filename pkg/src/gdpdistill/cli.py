"""Command-line entry point: ``gdpdistill {account,allocate,distill,eval,config}``.

Exit status is 0 on success, 1 when the requested budget is infeasible or a run
diverges, and 2 for usage errors (bad flags, unreadable or malformed files).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import gdp
from .allocator import allocate, sigma_for_budget
from .config import ExperimentConfig, golden_config
from .data import LabeledSet, PrivateData
from .errors import DomainError, ParseError, PrivacyError
from .pipeline import ACCOUNTED, evaluate_set, plan_budget, run_pipeline
from .report import dumps, write_failure, write_run
from .tasks import make_mixture

SEED_ENV = "GDPDISTILL_SEED"

EXIT_OK, EXIT_INFEASIBLE, EXIT_USAGE = 0, 1, 2


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _mu_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _default_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise DomainError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _load_config(path: str | None) -> ExperimentConfig:
    return golden_config() if path is None else ExperimentConfig.load(path)


# ---------------------------------------------------------------------------
# account


def cmd_account(args) -> int:
    if args.op == "compose":
        if not args.mu:
            raise DomainError("--mu needs at least one value")
        mu = gdp.compose_parallel(args.mu) if args.parallel else gdp.compose(args.mu)
        print(f"mu = {_fmt(mu.mu)}")
    elif args.op == "to-dp":
        out = gdp.gdp_to_dp(args.mu, args.eps)
        print(f"epsilon = {_fmt(out.epsilon)}")
        print(f"delta = {_fmt(out.delta)}")
    elif args.op == "to-gdp":
        print(f"mu = {_fmt(gdp.dp_to_gdp(gdp.DpBudget(args.eps, args.delta)).mu)}")
    elif args.op == "subsample":
        print(f"mu = {_fmt(gdp.subsampled_mu(gdp.SubsamplingSpec(args.p, args.T, args.sigma)).mu)}")
    elif args.op == "sigma":
        print(f"sigma = {_fmt(sigma_for_budget(args.mu, args.p, args.T))}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# allocate


def cmd_allocate(args) -> int:
    if args.config is not None or args.mu_g is None:
        config = _load_config(args.config)
        if args.eps is not None:
            config.budget.epsilon = args.eps
        if args.delta is not None:
            config.budget.delta = args.delta
        seed = args.seed if args.seed is not None else _default_seed()
        task = make_mixture(config.task)
        guard = PrivateData(task.train, ACCOUNTED + ("allocation_search",))
        outcome = plan_budget(config, guard, task, seed=seed)
        if outcome.plan is None:
            print("non-private run: every noise multiplier is 0")
            return EXIT_OK
        plan, extra = outcome.plan, {"sigma_release": outcome.sigma_release, **outcome.details}
    else:
        if args.mu_e is None or args.p is None or args.T is None:
            raise DomainError("explicit allocation needs --mu-g, --mu-e, --p and --T")
        total = gdp.DpBudget(10.0 if args.eps is None else args.eps, 1e-5 if args.delta is None else args.delta)
        plan = allocate(total, args.mu_g, args.mu_e, args.p, args.T, p_e=args.p_e, T_e=args.T_e)
        extra = {}

    if args.json:
        sys.stdout.write(dumps({**plan.to_dict(), **extra}))
        return EXIT_OK
    print("component,mu,sigma")
    print(f"generation,{_fmt(plan.mu_g.mu)},{_fmt(plan.sigma_g)}")
    print(f"expert,{_fmt(plan.mu_e.mu)},{_fmt(plan.sigma_e)}")
    print(f"matching,{_fmt(plan.mu_f.mu)},{_fmt(plan.sigma_f)}")
    print(f"total,{_fmt(plan.composed.mu)},")
    print(f"# mu_total = {_fmt(plan.mu_total.mu)}  delta_spent = {_fmt(plan.delta_spent())}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# distill


def cmd_distill(args) -> int:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else _default_seed()
    out = Path(args.out)
    try:
        run = run_pipeline(config, seed, evaluate=not args.no_eval, baselines=args.baselines, workers=args.workers)
    except PrivacyError as exc:
        write_failure(out, "pipeline", exc)
        raise
    paths = write_run(run, out, figures=not args.no_figures)
    metrics = run.report["metrics"]
    print(f"mu_spent = {_fmt(run.ledger.mu_total)}")
    print(f"delta_spent = {_fmt(run.ledger.delta_spent())}")
    print(f"undeclared_reads = {run.access['undeclared_reads']}")
    if "downstream" in metrics:
        d = metrics["downstream"]
        print(f"accuracy = {_fmt(d['mean'])} +- {_fmt(d['std'])}")
    for name in sorted(paths):
        print(f"wrote {paths[name]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    distilled = LabeledSet.load_csv(args.distilled, num_classes=config.task.num_classes)
    if distilled.dim != config.task.dim:
        raise ParseError(f"distilled points have dimension {distilled.dim}, task expects {config.task.dim}", line=1)
    if args.seeds is not None:
        config.eval.seeds = args.seeds
    task = make_mixture(config.task)
    res = evaluate_set(distilled, task.test, config, workers=args.workers)
    if args.json:
        sys.stdout.write(dumps(res))
    else:
        print(f"accuracy = {_fmt(res['mean'])} +- {_fmt(res['std'])}")
        print("seed,accuracy")
        for s, a in zip(config.eval.seeds, res["per_seed"]):
            print(f"{s},{a!r}")
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(golden_config().to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gdpdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    acc = sub.add_parser("account", help="privacy accounting calculator")
    acc_sub = acc.add_subparsers(dest="op", required=True)
    p = acc_sub.add_parser("compose", help="compose mu-GDP mechanisms")
    p.add_argument("--mu", type=_mu_list, required=True, help="comma-separated mu values")
    p.add_argument("--parallel", action="store_true", help="disjoint shards: take the max")
    p = acc_sub.add_parser("to-dp", help="mu-GDP -> (epsilon, delta)")
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--eps", type=float, required=True)
    p = acc_sub.add_parser("to-gdp", help="(epsilon, delta) -> mu-GDP")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p = acc_sub.add_parser("subsample", help="mu of T Poisson-subsampled Gaussian steps")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p = acc_sub.add_parser("sigma", help="noise multiplier spending a given mu over T subsampled steps")
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--T", type=int, required=True)
    acc.set_defaults(func=cmd_account)

    alc = sub.add_parser("allocate", help="split a total budget across the three stages")
    alc.add_argument("--config", help="experiment config (JSON); default is the golden config")
    alc.add_argument("--eps", type=float)
    alc.add_argument("--delta", type=float)
    alc.add_argument("--mu-g", type=float, help="explicit generator budget (skips the config)")
    alc.add_argument("--mu-e", type=float)
    alc.add_argument("--p", type=float, help="matching sampling rate")
    alc.add_argument("--T", type=int, help="matching iterations")
    alc.add_argument("--p-e", type=float, help="expert DP-SGD sampling rate")
    alc.add_argument("--T-e", type=int, help="expert DP-SGD steps")
    alc.add_argument("--seed", type=int)
    alc.add_argument("--json", action="store_true")
    alc.set_defaults(func=cmd_allocate)

    dis = sub.add_parser("distill", help="run the full private distillation pipeline")
    dis.add_argument("--config", help="experiment config (JSON); default is the golden config")
    dis.add_argument("--out", required=True, help="output directory")
    dis.add_argument("--seed", type=int, help=f"run seed (default ${SEED_ENV}, then the config's seed)")
    dis.add_argument("--workers", type=int, default=1, help="processes for multi-seed evaluation")
    dis.add_argument("--no-eval", action="store_true")
    dis.add_argument("--baselines", action="store_true", help="also evaluate random-subset and k-means baselines")
    dis.add_argument("--no-figures", action="store_true")
    dis.set_defaults(func=cmd_distill)

    ev = sub.add_parser("eval", help="train fresh models on a distilled set and report test accuracy")
    ev.add_argument("distilled", help="LabeledSet CSV")
    ev.add_argument("--config", help="experiment config (JSON) describing the task")
    ev.add_argument("--seeds", type=_int_list)
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--json", action="store_true")
    ev.set_defaults(func=cmd_eval)

    cfg = sub.add_parser("config", help="print the golden config as JSON")
    cfg.set_defaults(func=cmd_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, DomainError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PrivacyError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
