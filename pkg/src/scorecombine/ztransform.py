"""Empirical z-values.

A :class:`ZTransform` stores the sorted training scores of every column and
maps a new score ``s`` to ``Phi^{-1}(F(s))``, where ``F`` is the right-continuous
empirical cdf of the training column. ``F`` is clamped to
``[1/(n+1), n/(n+1)]`` first so that scores outside the training range still
give finite z-values.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from scorecombine.errors import DataError, SchemaError
from scorecombine.numerics import std_normal_quantile

__all__ = ["ScoreMatrix", "ZTransform", "fit"]

LABELS = ("inlier", "ood", "unknown")
TRANSFORM_FORMAT = "scorecombine.ztransform"
TRANSFORM_VERSION = 1


@dataclass
class ScoreMatrix:
    """``n`` samples by ``m`` named raw inlier scores (higher = more inlier)."""

    column_names: tuple[str, ...]
    values: np.ndarray
    labels: tuple[str, ...] | None = None
    sample_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        self.column_names = tuple(str(c) for c in self.column_names)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1 and len(self.column_names) == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2:
            raise SchemaError(f"score values must be a 2-D array, got shape {values.shape}")
        if values.shape[1] != len(self.column_names):
            raise SchemaError(
                f"{values.shape[1]} value columns but {len(self.column_names)} column names"
            )
        if len(set(self.column_names)) != len(self.column_names):
            dupes = sorted({c for c in self.column_names if self.column_names.count(c) > 1})
            raise SchemaError(f"duplicate column names: {dupes}")
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            row, col = bad[0]
            raise DataError(
                f"non-finite score {values[row, col]!r} at row {row}, column "
                f"{self.column_names[col]!r}"
            )
        self.values = values
        n = values.shape[0]
        if self.labels is not None:
            self.labels = tuple(self.labels)
            if len(self.labels) != n:
                raise SchemaError(f"{len(self.labels)} labels for {n} rows")
            unknown = set(self.labels) - set(LABELS)
            if unknown:
                raise SchemaError(f"labels must be one of {LABELS}, got {sorted(unknown)}")
        if self.sample_ids is None:
            self.sample_ids = tuple(str(i) for i in range(n))
        else:
            self.sample_ids = tuple(str(s) for s in self.sample_ids)
            if len(self.sample_ids) != n:
                raise SchemaError(f"{len(self.sample_ids)} sample ids for {n} rows")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.column_names.index(name)]
        except ValueError:
            raise SchemaError(f"unknown column {name!r}; have {list(self.column_names)}") from None

    def select(self, names: Sequence[str]) -> ScoreMatrix:
        """Reorder/restrict columns to ``names``; raises on missing columns."""
        missing = [c for c in names if c not in self.column_names]
        extra = [c for c in self.column_names if c not in names]
        if missing:
            raise SchemaError(f"column mismatch: missing {missing}, extra {extra}")
        idx = [self.column_names.index(c) for c in names]
        return ScoreMatrix(tuple(names), self.values[:, idx], self.labels, self.sample_ids)

    def mask(self, label: str) -> np.ndarray:
        if self.labels is None:
            raise SchemaError("score matrix carries no labels")
        return np.array([lab == label for lab in self.labels], dtype=bool)

    def as_mapping(self) -> dict[str, np.ndarray]:
        return {c: self.values[:, j] for j, c in enumerate(self.column_names)}

    def content_hash(self) -> str:
        """Hash of column names and per-column sorted values.

        Independent of row order and of the file format the matrix was read from.
        """
        h = hashlib.sha256()
        h.update("\x1f".join(self.column_names).encode())
        h.update(np.ascontiguousarray(np.sort(self.values, axis=0), dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ZTransform:
    """Fitted per-column empirical cdf / z-value map. Immutable after :func:`fit`."""

    column_names: tuple[str, ...]
    sorted_scores: tuple[np.ndarray, ...] = field(repr=False)
    n: int
    negate: tuple[str, ...] = ()
    train_hash: str = ""

    @property
    def q_lo(self) -> float:
        return 1.0 / (self.n + 1)

    @property
    def q_hi(self) -> float:
        return self.n / (self.n + 1)

    def _sorted(self, col: str) -> np.ndarray:
        try:
            return self.sorted_scores[self.column_names.index(col)]
        except ValueError:
            raise SchemaError(
                f"unknown column {col!r}; transform has {list(self.column_names)}"
            ) from None

    def empirical_cdf(self, col: str, s):
        """Fraction of training scores ``<= s`` (right-continuous step function)."""
        counts = np.searchsorted(self._sorted(col), s, side="right")
        out = counts / self.n
        return float(out) if np.ndim(s) == 0 else out

    def p_value(self, col: str, s):
        """Empirical cdf clamped into ``[1/(n+1), n/(n+1)]``."""
        out = np.clip(self.empirical_cdf(col, s), self.q_lo, self.q_hi)
        return float(out) if np.ndim(s) == 0 else out

    def z_value(self, col: str, s):
        return std_normal_quantile(self.p_value(col, s))

    def _prepared(self, test: ScoreMatrix) -> np.ndarray:
        extra = [c for c in test.column_names if c not in self.column_names]
        missing = [c for c in self.column_names if c not in test.column_names]
        if extra or missing:
            raise SchemaError(f"column mismatch: missing {missing}, extra {extra}")
        values = test.select(self.column_names).values.copy()
        for col in self.negate:
            j = self.column_names.index(col)
            values[:, j] = -values[:, j]
        return values

    def raw_matrix(self, test: ScoreMatrix) -> np.ndarray:
        """Test scores in transform column order with negation applied."""
        return self._prepared(test)

    def p_matrix(self, test: ScoreMatrix) -> np.ndarray:
        values = self._prepared(test)
        out = np.empty_like(values)
        for j, col in enumerate(self.column_names):
            out[:, j] = self.p_value(col, values[:, j])
        return out

    def transform_matrix(self, test: ScoreMatrix) -> np.ndarray:
        """Elementwise z-values, ``n_test x m``, rows in input order."""
        p = self.p_matrix(test)
        if p.size == 0:
            return p
        return std_normal_quantile(p)

    def to_dict(self) -> dict:
        return {
            "format": TRANSFORM_FORMAT,
            "version": TRANSFORM_VERSION,
            "n": self.n,
            "columns": list(self.column_names),
            "negate": list(self.negate),
            "train_hash": self.train_hash,
            "sorted_scores": {c: s.tolist() for c, s in zip(self.column_names, self.sorted_scores)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ZTransform:
        if d.get("format") != TRANSFORM_FORMAT:
            raise DataError(f"not a z-transform file (format={d.get('format')!r})")
        if d.get("version") != TRANSFORM_VERSION:
            raise DataError(f"unsupported z-transform version {d.get('version')!r}")
        cols = tuple(d["columns"])
        n = int(d["n"])
        sorted_scores = tuple(np.asarray(d["sorted_scores"][c], dtype=float) for c in cols)
        for c, s in zip(cols, sorted_scores):
            if s.shape != (n,) or np.any(np.diff(s) < 0) or not np.all(np.isfinite(s)):
                raise DataError(f"corrupt sorted scores for column {c!r}")
        return cls(cols, sorted_scores, n, tuple(d.get("negate", ())), d.get("train_hash", ""))


def fit(train: ScoreMatrix, negate: Sequence[str] = ()) -> ZTransform:
    """Fit empirical cdfs on inlier training scores.

    ``negate`` lists columns whose source is outlier-oriented; they are sign
    flipped here and in every later transform call.
    """
    if train.n < 2:
        raise DataError(f"need at least 2 training samples, got {train.n}")
    for col in negate:
        if col not in train.column_names:
            raise SchemaError(f"negate names unknown column {col!r}")
    cols = train.column_names
    sorted_scores = []
    for j, col in enumerate(cols):
        column = train.values[:, j]
        if col in negate:
            column = -column
        s = np.sort(column, kind="stable")
        s.setflags(write=False)
        sorted_scores.append(s)
    return ZTransform(cols, tuple(sorted_scores), train.n, tuple(c for c in cols if c in negate),
                      train.content_hash())
