"""Tabular containers: column schema and the (Z, T, Y) dataset."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SchemaError

ROLES = ("covariate", "treatment", "outcome")
KINDS = ("continuous", "discrete")
AUTO_DISCRETE_LEVELS = 20


@dataclass(frozen=True)
class Column:
    name: str
    role: str
    kind: str = "continuous"

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class Schema:
    columns: tuple

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        roles = [c.role for c in self.columns]
        if roles.count("treatment") != 1:
            raise SchemaError("schema needs exactly one treatment column")
        if roles.count("outcome") != 1:
            raise SchemaError("schema needs exactly one outcome column")
        if roles.count("covariate") < 1:
            raise SchemaError("schema needs at least one covariate column")

    @property
    def covariates(self) -> list[Column]:
        return [c for c in self.columns if c.role == "covariate"]

    @property
    def treatment(self) -> Column:
        return next(c for c in self.columns if c.role == "treatment")

    @property
    def outcome(self) -> Column:
        return next(c for c in self.columns if c.role == "outcome")

    @classmethod
    def default(cls, n_covariates: int, kinds=None) -> "Schema":
        kinds = kinds or ["continuous"] * n_covariates
        cols = [Column(f"z{i + 1}", "covariate", k) for i, k in enumerate(kinds)]
        return cls(tuple(cols + [Column("t", "treatment", "discrete"), Column("y", "outcome")]))


@dataclass
class Dataset:
    z: np.ndarray
    t: np.ndarray
    y: np.ndarray
    z_names: tuple = ()
    z_kinds: tuple = ()

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        if self.z.ndim == 1:
            self.z = self.z[:, None]
        self.t = np.asarray(self.t, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.z.shape[0]
        if self.t.size != n or self.y.size != n:
            raise DimensionError(f"row counts differ: z {n}, t {self.t.size}, y {self.y.size}")
        d = self.z.shape[1]
        if not self.z_names:
            self.z_names = tuple(f"z{i + 1}" for i in range(d))
        if not self.z_kinds:
            self.z_kinds = tuple(detect_kind(self.z[:, j], warn=False) for j in range(d))
        if len(self.z_names) != d or len(self.z_kinds) != d:
            raise SchemaError("covariate names/kinds do not match the covariate matrix")
        self.z_names = tuple(self.z_names)
        self.z_kinds = tuple(self.z_kinds)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.z.shape[1]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.z[rows], self.t[rows], self.y[rows], self.z_names, self.z_kinds)

    def schema(self) -> Schema:
        cols = [Column(n, "covariate", k) for n, k in zip(self.z_names, self.z_kinds)]
        return Schema(tuple(cols + [Column("t", "treatment", "discrete"), Column("y", "outcome")]))


def detect_kind(x, warn: bool = True) -> str:
    """Fallback kind detection: few distinct values means discrete."""
    levels = np.unique(np.asarray(x)).size
    kind = "discrete" if levels <= AUTO_DISCRETE_LEVELS else "continuous"
    if warn:
        warnings.warn(f"column kind not declared; guessed {kind} from {levels} distinct values",
                      stacklevel=2)
    return kind
