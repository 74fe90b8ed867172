"""Distillation by noisy feature matching with expert guidance.

Each outer iteration picks one feature extractor at random and, for every class,
(1) matches the clipped mean feature of the distilled points of that class to a
noisy clipped mean feature of a Poisson batch of private points, then (2) pulls
the distilled points towards the expert's view of their class, using references
drawn from the synthetic set.

Privacy of step (1), with add/remove-one adjacency. Two calibrations are offered:

* ``"expected_batch"`` (default): the clipped features of the batch are summed and
  divided by the expected batch size B = p n_class, so one record moves the
  statistic by at most C/B; noise N(0, (sigma_f C / B)^2 I) makes each step a
  1/sigma_f Gaussian mechanism. This is the DP-SGD calibration.
* ``"literal"``: the clipped mean over the realised batch plus N(0, sigma_f^2 C^2 I).
  With the mean of an empty batch taken as zero, one record moves the mean by at
  most C, so this is also (conservatively) a 1/sigma_f mechanism, but the noise is
  about B times larger.

Classes are disjoint shards (parallel composition) and iterations compose
sequentially, which with Poisson subsampling gives
mu_f = p sqrt(T (exp(1/sigma_f^2) - 1)). Step (2) only reads synthetic data and the
already-private expert.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import gdp
from .allocator import AllocationPlan
from .data import LabeledSet, PrivateData, as_private
from .errors import BudgetBreachError, ContractError, DivergenceError, DomainError
from .generator import MechanismRecord, kmeans_sample
from .nn import MLP, backward, cross_entropy, forward, forward_logits, kl_to_target

MECHANISM = "feature_matching"
UPDATE_NORM_CAP = 1e3


@dataclass
class DistillConfig:
    ipc: int = 10
    iterations: int = 200
    clip: float = 1.0
    sigma_f: float = 0.0
    lr_f: float = 0.1
    lr_e: float = 0.1
    batch_size: int = 128
    ref_batch: int = 64
    n_extractors: int = 5
    seed: int = 0
    match_target: Literal["private", "synthetic"] = "private"
    noise_calibration: Literal["expected_batch", "literal"] = "expected_batch"

    def __post_init__(self):
        for name in ("ipc", "iterations", "batch_size", "ref_batch", "n_extractors"):
            if getattr(self, name) < (0 if name == "iterations" else 1):
                raise DomainError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.clip <= 0:
            raise DomainError("clip bound must be positive")
        if self.sigma_f < 0 or self.lr_f < 0 or self.lr_e < 0:
            raise DomainError("sigma_f and learning rates must be non-negative")
        if self.match_target not in ("private", "synthetic"):
            raise DomainError(f"unknown match target {self.match_target!r}")
        if self.noise_calibration not in ("expected_batch", "literal"):
            raise DomainError(f"unknown noise calibration {self.noise_calibration!r}")


# ---------------------------------------------------------------------------
# Losses


def _clip_vectors(v: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norms = np.linalg.norm(v, axis=1)
    scale = np.where(norms > c, c / np.maximum(norms, 1e-300), 1.0)
    return v * scale[:, None], norms, scale


def clipped_mean_feature(extractor: MLP, x: np.ndarray, clip: float) -> np.ndarray:
    """(1/|x|) * sum_i min(1, C/||phi(x_i)||) phi(x_i)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise DomainError("clipped mean of an empty slice is undefined")
    feats, _ = forward(extractor, x, "features")
    clipped, _, _ = _clip_vectors(feats, clip)
    return clipped.mean(axis=0)


def clipped_feature_sum(extractor: MLP, x: np.ndarray, clip: float) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        return np.zeros(extractor.feature_dim)
    feats, _ = forward(extractor, x, "features")
    return _clip_vectors(feats, clip)[0].sum(axis=0)


def noisy_private_target(
    extractor: MLP,
    private_x: np.ndarray,
    clip: float,
    sigma_f: float,
    rng: np.random.Generator,
    expected_size: float | None = None,
) -> np.ndarray:
    """The released statistic for one class.

    Without ``expected_size``: clipped mean of the batch plus N(0, sigma_f^2 C^2 I),
    an empty batch counting as the zero vector. With it: clipped sum divided by
    ``expected_size`` plus N(0, (sigma_f C / expected_size)^2 I).
    """
    if expected_size is not None:
        if expected_size <= 0:
            raise DomainError("expected batch size must be positive")
        stat = clipped_feature_sum(extractor, private_x, clip) / expected_size
        scale = sigma_f * clip / expected_size
    else:
        stat = clipped_mean_feature(extractor, private_x, clip) if len(private_x) else np.zeros(extractor.feature_dim)
        scale = sigma_f * clip
    if sigma_f > 0:
        stat = stat + scale * rng.standard_normal(stat.shape)
    return stat


def matching_loss(extractor: MLP, distilled_x: np.ndarray, target: np.ndarray, clip: float) -> tuple[float, np.ndarray]:
    """||target - clipped mean feature of distilled_x||^2 and its gradient w.r.t. distilled_x."""
    x = np.atleast_2d(np.asarray(distilled_x, dtype=np.float64))
    if x.shape[0] == 0:
        raise DomainError("distilled slice is empty")
    feats, cache = forward(extractor, x, "features")
    clipped, norms, scale = _clip_vectors(feats, clip)
    k = len(x)
    resid = target - clipped.mean(axis=0)
    loss = float(resid @ resid)
    g_clipped = np.broadcast_to(-2.0 * resid / k, clipped.shape)
    # d clip(v) / dv = s (I - v v^T / ||v||^2) when clipped (s = C/||v||), identity otherwise
    over = norms > clip
    g_feat = np.array(g_clipped, copy=True)
    if over.any():
        v = feats[over]
        gv = g_clipped[over]
        proj = (gv * v).sum(axis=1, keepdims=True) / (norms[over, None] ** 2)
        g_feat[over] = scale[over, None] * (gv - proj * v)
    grads = backward(extractor, cache, g_feat)
    return loss, grads.inputs


def feature_matching_loss(
    extractor: MLP,
    private_x: np.ndarray,
    distilled_x: np.ndarray,
    clip: float,
    sigma_f: float,
    rng: np.random.Generator,
    *,
    private_class: int | None = None,
    distilled_class: int | None = None,
    expected_size: float | None = None,
) -> tuple[float, np.ndarray]:
    """Noisy feature-matching loss for one class; the gradient flows only through the distilled side."""
    if private_class is not None and distilled_class is not None and private_class != distilled_class:
        raise ContractError(f"private batch of class {private_class} matched against distilled class {distilled_class}")
    target = noisy_private_target(extractor, private_x, clip, sigma_f, rng, expected_size)
    return matching_loss(extractor, distilled_x, target, clip)


def class_centroid(expert: MLP, references: np.ndarray) -> np.ndarray:
    """Mean expert logit vector over the references."""
    references = np.atleast_2d(references)
    if references.shape[0] == 0:
        raise DomainError("expert guidance needs at least one reference")
    return forward_logits(expert, references).mean(axis=0)


def expert_guidance_loss(
    expert: MLP,
    distilled_x: np.ndarray,
    label: int,
    references: np.ndarray,
    reference_labels: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean over the slice of CE(logits, label) + KL(softmax(logits) || softmax(centroid)).

    Returns the loss and its gradient w.r.t. ``distilled_x``.
    """
    if reference_labels is not None and np.any(np.asarray(reference_labels) != label):
        raise ContractError(f"references must all carry class {label}")
    centroid = class_centroid(expert, references)
    x = np.atleast_2d(np.asarray(distilled_x, dtype=np.float64))
    logits, cache = forward(expert, x, "logits")
    labels = np.full(len(x), label, dtype=np.int64)
    ce, g_ce = cross_entropy(logits, labels)
    kl, g_kl = kl_to_target(logits, centroid)
    grads = backward(expert, cache, g_ce + g_kl)
    return ce + kl, grads.inputs


# ---------------------------------------------------------------------------
# Ledger


@dataclass
class BudgetLedger:
    """Every privacy-consuming mechanism invocation and the rule used to combine it."""

    records: list[MechanismRecord] = field(default_factory=list)
    mu_g: float = 0.0
    mu_e: float = 0.0
    mu_f: float = 0.0
    mu_f_closed_form: float = 0.0
    mu_allowed: float = math.inf
    epsilon: float = math.inf
    delta_allowed: float = 1.0
    private: bool = True

    @property
    def mu_total(self) -> float:
        return math.hypot(self.mu_g, self.mu_e, self.mu_f)

    def delta_spent(self) -> float:
        if not self.private or math.isinf(self.mu_total):
            return 1.0
        if math.isinf(self.epsilon):
            return 0.0
        return gdp.gdp_to_dp(self.mu_total, self.epsilon).delta

    def summary(self) -> dict:
        return {
            "private": self.private,
            "mu_g": _jsonable(self.mu_g),
            "mu_e": _jsonable(self.mu_e),
            "mu_f": _jsonable(self.mu_f),
            "mu_f_closed_form": _jsonable(self.mu_f_closed_form),
            "mu_total": _jsonable(self.mu_total),
            "mu_allowed": _jsonable(self.mu_allowed),
            "epsilon": _jsonable(self.epsilon),
            "delta_allowed": self.delta_allowed,
            "delta_spent": self.delta_spent(),
            "n_records": len(self.records),
        }

    def to_json(self) -> str:
        body = {"summary": self.summary(), "mechanisms": [_jsonable_dict(r.to_dict()) for r in self.records]}
        return json.dumps(body, indent=1, sort_keys=True)


def _jsonable(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def _jsonable_dict(d: dict) -> dict:
    return {k: _jsonable(v) if isinstance(v, float) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# The loop


@dataclass
class DistillResult:
    distilled: LabeledSet
    initial: LabeledSet
    ledger: BudgetLedger
    trace: list[tuple[int, float, float]]  # (iteration, mean L_F, mean L_E)

    def trace_csv(self) -> str:
        rows = ["iteration,loss_f,loss_e"] + [f"{i},{a!r},{b!r}" for i, a, b in self.trace]
        return "\n".join(rows) + "\n"


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _cap(g: np.ndarray, cap: float = UPDATE_NORM_CAP) -> np.ndarray:
    n = float(np.linalg.norm(g))
    return g * (cap / n) if n > cap else g


def distill(
    private: LabeledSet | PrivateData,
    synthetic: LabeledSet,
    extractors: Sequence[MLP],
    expert: MLP | None,
    config: DistillConfig,
    plan: AllocationPlan | None = None,
    *,
    mu_g: float = 0.0,
    mu_e: float = 0.0,
    init: LabeledSet | None = None,
    clip_per_extractor: Sequence[float] | None = None,
) -> DistillResult:
    """Run the distillation loop and account for every private read.

    ``mu_g``/``mu_e`` are the budgets already spent upstream (generator, expert);
    they default to the plan's values when a plan is given. ``init`` overrides the
    k-means initialisation. ``clip_per_extractor`` overrides ``config.clip`` per
    extractor (the noise then scales with each extractor's own bound).
    """
    if not extractors:
        raise DomainError("need at least one feature extractor")
    guard = as_private(private, [MECHANISM])
    K = guard.num_classes
    counts = guard.class_counts()
    if synthetic.num_classes != K:
        raise ContractError("synthetic and private sets disagree on the number of classes")
    clips = list(clip_per_extractor) if clip_per_extractor is not None else [config.clip] * len(extractors)
    if len(clips) != len(extractors):
        raise ContractError("one clip bound per extractor is required")

    T = config.iterations
    sigma_f = config.sigma_f
    use_private = config.match_target == "private"
    p_class = np.minimum(1.0, config.batch_size / np.maximum(counts, 1))
    p_max = float(p_class.max())
    if config.noise_calibration == "expected_batch":
        expected = [float(p_class[c] * counts[c]) for c in range(K)]
    else:
        expected = [None] * K
    # add/remove sensitivity of the released statistic in units of the clip bound
    sens_factor = [1.0 / e if e is not None else 1.0 for e in expected]

    ledger = BudgetLedger(private=sigma_f > 0 or not use_private or T == 0)
    if plan is not None:
        if not math.isclose(plan.sigma_f, sigma_f, rel_tol=1e-12):
            raise ContractError(f"config sigma_f={sigma_f!r} differs from the plan's {plan.sigma_f!r}")
        if plan.spec_f.T != T:
            raise ContractError(f"config runs {T} iterations but the plan accounts for {plan.spec_f.T}")
        if p_max > plan.spec_f.p * (1 + 1e-12):
            raise ContractError(f"per-class sampling rate {p_max!r} exceeds the plan's p={plan.spec_f.p!r}")
        mu_g = plan.mu_g.mu if mu_g == 0.0 else mu_g
        mu_e = plan.mu_e.mu if mu_e == 0.0 else mu_e
        ledger.mu_allowed = plan.mu_total.mu
        ledger.epsilon = plan.total.epsilon
        ledger.delta_allowed = plan.total.delta
    ledger.mu_g, ledger.mu_e = mu_g, mu_e

    if init is None:
        init = kmeans_sample(synthetic, config.ipc, extractors[0], _rng(config.seed, 0xC0DE))
    S = init.copy()
    labels_before = S.y.copy()
    class_slices = [S.class_indices(c) for c in range(K)]
    synth_idx = [synthetic.class_indices(c) for c in range(K)]

    if sigma_f > 0 and use_private:
        step_mu = [
            gdp.subsampled_mu(gdp.SubsamplingSpec(float(p_class[c]), 1, sigma_f)).mu for c in range(K)
        ]
    else:
        step_mu = [0.0 if not use_private else math.inf] * K
    per_iteration: list[float] = []

    trace = []
    for it in range(1, T + 1):
        pick = int(_rng(config.seed, it).integers(len(extractors)))
        phi, clip = extractors[pick], clips[pick]
        lf_sum = le_sum = 0.0
        for c in range(K):
            rng = _rng(config.seed, it, c)
            sl = class_slices[c]
            if use_private:
                with guard.mechanism(MECHANISM):
                    batch = guard.poisson_class_batch(c, float(p_class[c]), rng)
                target = noisy_private_target(phi, batch, clip, sigma_f, rng, expected[c])
                ledger.records.append(
                    MechanismRecord(
                        f"{MECHANISM}/iter{it}/class{c}", sigma_f, clip * sens_factor[c], step_mu[c],
                        f"poisson(p={p_class[c]!r}); parallel over classes",
                    )
                )
            else:
                ref = synth_idx[c]
                batch = synthetic.x[ref[rng.random(len(ref)) < p_class[c]]]
                target = noisy_private_target(phi, batch, clip, 0.0, rng, expected[c])
            lf, g = matching_loss(phi, S.x[sl], target, clip)
            S.x[sl] -= config.lr_f * _cap(g)
            lf_sum += lf

            if expert is not None and config.lr_e > 0:
                pool = synth_idx[c]
                n_ref = min(config.ref_batch, len(pool))
                refs = synthetic.x[rng.choice(pool, size=n_ref, replace=False)]
                le, g = expert_guidance_loss(expert, S.x[sl], c, refs)
                S.x[sl] -= config.lr_e * _cap(g)
                le_sum += le
            if not np.all(np.isfinite(S.x[sl])):
                raise DivergenceError(f"distilled points became non-finite at iteration {it}", iteration=it)

        if use_private and sigma_f > 0:
            per_iteration.append(gdp.compose_parallel(step_mu).mu)
            spent = math.hypot(mu_g, mu_e, math.sqrt(it) * per_iteration[-1])
            if spent > ledger.mu_allowed * (1 + 1e-9):
                raise BudgetBreachError(
                    f"ledger reached mu={spent:.6g} > allowed {ledger.mu_allowed:.6g} at iteration {it}"
                )
        trace.append((it, lf_sum / K, le_sum / K))

    if use_private and T > 0 and sigma_f > 0:
        ledger.mu_f = gdp.compose(per_iteration).mu
        ledger.mu_f_closed_form = gdp.subsampled_mu(gdp.SubsamplingSpec(p_max, T, sigma_f)).mu
        if not math.isclose(ledger.mu_f, ledger.mu_f_closed_form, rel_tol=1e-9):
            raise BudgetBreachError(
                f"per-iteration ledger mu_f={ledger.mu_f!r} disagrees with the closed form "
                f"{ledger.mu_f_closed_form!r}"
            )
    elif use_private and T > 0:
        ledger.mu_f = ledger.mu_f_closed_form = math.inf

    if not np.array_equal(S.y, labels_before):
        raise ContractError("distilled labels changed during optimisation")
    return DistillResult(S, init, ledger, trace)


def config_dict(config: DistillConfig) -> dict:
    return asdict(config)
