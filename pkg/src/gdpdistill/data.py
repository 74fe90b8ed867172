"""Labelled point sets, their CSV format, and an audited wrapper for private data."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import DomainError, ParseError, PrivateAccessError, ShapeError


@dataclass
class LabeledSet:
    """Points ``x`` of shape (n, d) with integer labels ``y`` in [0, num_classes)."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim == 1 and self.x.size == 0:
            self.x = self.x.reshape(0, 0)
        if self.x.ndim != 2:
            raise ShapeError(f"points must form a 2-d array, got shape {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise ShapeError(f"{self.x.shape[0]} points but {self.y.shape} labels")
        if self.num_classes < 1:
            raise DomainError("num_classes must be positive")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DomainError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.y == c)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def of_class(self, c: int) -> np.ndarray:
        return self.x[self.y == c]

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.x[idx], self.y[idx], self.num_classes)

    def copy(self) -> "LabeledSet":
        return LabeledSet(self.x.copy(), self.y.copy(), self.num_classes)

    @classmethod
    def concat(cls, parts: Iterable["LabeledSet"], num_classes: int, dim: int) -> "LabeledSet":
        parts = list(parts)
        if not parts:
            return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), num_classes)
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            num_classes,
        )

    def random_subset_per_class(self, per_class: int, rng: np.random.Generator) -> "LabeledSet":
        picks = []
        for c in range(self.num_classes):
            idx = self.class_indices(c)
            if len(idx) < per_class:
                raise DomainError(f"class {c} has {len(idx)} points, fewer than {per_class}")
            picks.append(np.sort(rng.choice(idx, size=per_class, replace=False)))
        return self.subset(np.concatenate(picks))

    # -- CSV: header ``y,x0,...,x{d-1}``; floats written with repr for lossless round-trips

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(["y"] + [f"x{i}" for i in range(self.dim)]) + "\n")
        for xi, yi in zip(self.x, self.y):
            out.write(",".join([str(int(yi))] + [repr(float(v)) for v in xi]) + "\n")
        return out.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, num_classes: int | None = None) -> "LabeledSet":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ParseError("empty file: missing header", line=1)
        header = [h.strip() for h in rows[0]]
        expected = ["y"] + [f"x{i}" for i in range(len(header) - 1)]
        if header != expected or len(header) < 2:
            raise ParseError(f"header must be 'y,x0,...,x{{d-1}}', got {','.join(header)!r}", line=1)
        d = len(header) - 1
        xs, ys = [], []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ParseError(f"expected {d + 1} fields, found {len(row)}", line=lineno)
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ParseError(f"label {label} out of range", line=lineno)
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite coordinate", line=lineno)
            xs.append(values)
            ys.append(label)
        if not ys:
            raise ParseError("file contains no data rows", line=len(rows) + 1)
        k = num_classes if num_classes is not None else max(ys) + 1
        return cls(np.array(xs), np.array(ys), k)

    @classmethod
    def load_csv(cls, path: str | Path, num_classes: int | None = None) -> "LabeledSet":
        return cls.from_csv(Path(path).read_text(), num_classes)


@dataclass
class AccessLog:
    declared: frozenset[str]
    reads: Counter = field(default_factory=Counter)  # mechanism -> number of records read
    calls: Counter = field(default_factory=Counter)
    undeclared: Counter = field(default_factory=Counter)

    @property
    def undeclared_reads(self) -> int:
        return sum(self.undeclared.values())

    def to_dict(self) -> dict:
        return {
            "declared": sorted(self.declared),
            "records_read": dict(sorted(self.reads.items())),
            "calls": dict(sorted(self.calls.items())),
            "undeclared_reads": self.undeclared_reads,
        }


class PrivateData:
    """Gatekeeper around the private set.

    Every read must name a mechanism from ``declared``; reads are tallied per mechanism.
    Class counts and the dimension are treated as public metadata.
    """

    def __init__(self, data: LabeledSet, declared: Iterable[str]):
        self._data = data
        self.log = AccessLog(frozenset(declared))
        self._active: list[str] = []

    @property
    def num_classes(self) -> int:
        return self._data.num_classes

    @property
    def dim(self) -> int:
        return self._data.dim

    def __len__(self) -> int:
        return len(self._data)

    def class_counts(self) -> np.ndarray:
        return self._data.class_counts()

    @contextmanager
    def mechanism(self, name: str) -> Iterator["PrivateData"]:
        self._active.append(name)
        try:
            yield self
        finally:
            self._active.pop()

    def _charge(self, n: int, mechanism: str | None) -> None:
        name = mechanism or (self._active[-1] if self._active else None)
        if name is None or name not in self.log.declared:
            self.log.undeclared[name or "<none>"] += n
            raise PrivateAccessError(f"private data read outside a declared mechanism ({name!r})")
        self.log.reads[name] += n
        self.log.calls[name] += 1

    def read(self, idx=None, mechanism: str | None = None) -> LabeledSet:
        if idx is None:
            self._charge(len(self._data), mechanism)
            return self._data.copy()
        sub = self._data.subset(idx)
        self._charge(len(sub), mechanism)
        return sub

    def read_class(self, c: int, mechanism: str | None = None) -> np.ndarray:
        rows = self._data.of_class(c)
        self._charge(len(rows), mechanism)
        return rows.copy()

    def poisson_class_batch(
        self, c: int, p: float, rng: np.random.Generator, mechanism: str | None = None
    ) -> np.ndarray:
        """Each point of class ``c`` independently with probability ``p``."""
        idx = self._data.class_indices(c)
        chosen = idx[rng.random(len(idx)) < p]
        self._charge(len(chosen), mechanism)
        return self._data.x[chosen].copy()

    def charge(self, n: int, mechanism: str | None = None) -> None:
        """Record ``n`` reads performed by code that was handed data via :meth:`read`."""
        self._charge(n, mechanism)


def as_private(data, declared: Iterable[str]) -> PrivateData:
    return data if isinstance(data, PrivateData) else PrivateData(data, declared)
