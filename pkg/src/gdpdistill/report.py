"""Writing run artifacts: CSV/JSON files plus matplotlib figures next to them."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import LabeledSet  # noqa: E402
from .distill import DistillResult  # noqa: E402


def dumps(obj) -> str:
    """Canonical JSON; non-finite floats are spelled as strings so the output stays strict JSON."""
    return json.dumps(_finite(obj), indent=2, sort_keys=True, default=_default, allow_nan=False) + "\n"


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not np.isfinite(obj):
        return "nan" if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def plot_loss_trace(result: DistillResult, path: Path) -> None:
    it = [r[0] for r in result.trace]
    fig, (ax_f, ax_e) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax_f.plot(it, [r[1] for r in result.trace], lw=0.8)
    ax_f.set_yscale("log")
    ax_f.set_xlabel("iteration")
    ax_f.set_ylabel("feature matching loss")
    ax_e.plot(it, [r[2] for r in result.trace], lw=0.8, color="C1")
    ax_e.set_xlabel("iteration")
    ax_e.set_ylabel("expert guidance loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_budget(allocation: dict, path: Path) -> None:
    names = ["generation", "expert", "matching"]
    keys = ["mu_g", "mu_e", "mu_f"]
    values = [allocation[k]["mu"] for k in keys]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(names, np.square(values), color=["C0", "C1", "C2"])
    ax.axhline(allocation["mu_total"]["mu"] ** 2, color="k", ls="--", lw=0.8, label=r"$\mu_{total}^2$")
    ax.set_ylabel(r"$\mu^2$ (adds under composition)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_projection(synthetic: LabeledSet, initial: LabeledSet, distilled: LabeledSet, path: Path) -> None:
    """First two principal axes of the synthetic set, with the distilled points before and after."""
    centre = synthetic.x.mean(axis=0)
    _, _, vt = np.linalg.svd(synthetic.x - centre, full_matrices=False)
    proj = vt[:2].T
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    for c in range(synthetic.num_classes):
        pts = (synthetic.of_class(c) - centre) @ proj
        ax.scatter(pts[:, 0], pts[:, 1], s=2, alpha=0.15, color=f"C{c}")
        a = (initial.of_class(c) - centre) @ proj
        b = (distilled.of_class(c) - centre) @ proj
        ax.scatter(a[:, 0], a[:, 1], s=18, facecolors="none", edgecolors=f"C{c}")
        ax.scatter(b[:, 0], b[:, 1], s=22, marker="x", color=f"C{c}")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title("o initial   x distilled", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_run(run, outdir: str | Path, figures: bool = True) -> dict[str, Path]:
    """Write every artifact of a finished run; returns name -> path."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "distilled": out / "distilled.csv",
        "initial": out / "initial.csv",
        "ledger": out / "ledger.json",
        "moments": out / "moments.json",
        "loss_trace": out / "loss_trace.csv",
        "report": out / "report.json",
    }
    run.distill.distilled.save_csv(paths["distilled"])
    run.distill.initial.save_csv(paths["initial"])
    paths["ledger"].write_text(run.ledger.to_json() + "\n")
    paths["moments"].write_text(run.moments.to_json() + "\n")
    paths["loss_trace"].write_text(run.distill.trace_csv())
    paths["report"].write_text(dumps({"status": "complete", **run.report}))
    if figures:
        paths["fig_loss"] = out / "loss_trace.png"
        plot_loss_trace(run.distill, paths["fig_loss"])
        paths["fig_projection"] = out / "projection.png"
        plot_projection(run.synthetic, run.distill.initial, run.distill.distilled, paths["fig_projection"])
        if run.plan is not None:
            paths["fig_budget"] = out / "budget.png"
            plot_budget(run.report["allocation"], paths["fig_budget"])
    return paths


def write_failure(outdir: str | Path, stage: str, error: BaseException) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(dumps({"status": "failed", "stage": stage, "error": f"{type(error).__name__}: {error}"}))
    return path
