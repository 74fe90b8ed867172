"""Experiment configuration: nested dataclasses with a canonical JSON form.

Floats are written with ``repr`` precision by the json module, so a config that
is loaded and dumped again is byte-identical. An infinite epsilon is spelled
``"inf"`` and means "no privacy": every noise multiplier is zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Literal

from .distill import DistillConfig
from .errors import ParseError
from .tasks import MixtureSpec


@dataclass
class BudgetConfig:
    epsilon: float = 10.0
    delta: float = 1e-5

    @property
    def non_private(self) -> bool:
        return math.isinf(self.epsilon)


@dataclass
class AllocationConfig:
    mode: Literal["fraction", "explicit", "search"] = "fraction"
    # fraction mode: mu_g = g_fraction * mu_total, mu_e = e_fraction * mu_total
    g_fraction: float = 0.135
    e_fraction: float = 0.65
    # explicit mode
    mu_g: float = 0.27
    mu_e: float = 1.30
    # search mode targets
    fid_multiplier: float = 1.2
    accuracy_fraction: float = 0.9
    search_tol: float = 1e-3


@dataclass
class GeneratorConfig:
    clip_bound: float = 6.0
    synthetic_per_class: int = 1000


@dataclass
class ExtractorConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    epochs: int = 5
    lr: float = 0.05
    batch_size: int = 64


@dataclass
class ExpertConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    pretrain_epochs: int = 10
    finetune_epochs: int = 5
    lr: float = 0.05
    finetune_lr: float = 0.05
    clip: float = 1.0
    batch_size: int = 128


@dataclass
class EvalConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    epochs: int = 300
    lr: float = 0.05
    batch_size: int = 64
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class ExperimentConfig:
    task: MixtureSpec = field(default_factory=MixtureSpec)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    allocation: AllocationConfig = field(default_factory=AllocationConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 7

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.budget.epsilon):
            d["budget"]["epsilon"] = "inf"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, body: dict) -> "ExperimentConfig":
        return _build(cls, body, "")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            body = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        return cls.from_dict(body)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


def _build(cls, body, where: str):
    if not isinstance(body, dict):
        raise ParseError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(body) - set(known)
    if unknown:
        raise ParseError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in body.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}{name}.")
        elif name == "epsilon" and value == "inf":
            kwargs[name] = math.inf
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where or 'config'}: {exc}") from None


def golden_config() -> ExperimentConfig:
    """The desk-scale reference task used by the acceptance suite."""
    return ExperimentConfig()
