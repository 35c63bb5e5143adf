from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from xdmmd.errors import ConfigError, DataError, FormatError, IoError, NotFoundError

GROUPS = ("X", "Y")


@dataclass(frozen=True)
class EmbeddingSet:
    """Labeled rows of fixed-dimension embeddings split into groups X and Y.

    ``vectors`` is an ``(N, dim)`` float64 array aligned with ``ids``,
    ``groups`` and ``subgroups``.
    """

    ids: tuple[str, ...]
    groups: tuple[str, ...]
    subgroups: tuple[str, ...]
    vectors: np.ndarray
    dim: int

    def __post_init__(self) -> None:
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.size == 0:
            vec = vec.reshape(len(self.ids), self.dim)
        if vec.ndim != 2 or vec.shape != (len(self.ids), self.dim):
            raise DataError(f"vectors of shape {vec.shape} do not match {len(self.ids)} rows x dim {self.dim}")
        if not (len(self.ids) == len(self.groups) == len(self.subgroups)):
            raise DataError("ids, groups and subgroups differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding ids must be unique")
        bad = set(self.groups) - set(GROUPS)
        if bad:
            raise DataError(f"unknown group labels {sorted(bad)}; expected X or Y")
        if not np.all(np.isfinite(vec)):
            row = int(np.nonzero(~np.isfinite(vec).all(axis=1))[0][0])
            raise DataError(f"non-finite embedding value in row {self.ids[row]!r}")
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)

    @classmethod
    def from_arrays(
        cls,
        x: np.ndarray,
        y: np.ndarray,
        x_ids: Sequence[str] | None = None,
        y_ids: Sequence[str] | None = None,
        x_subgroups: Sequence[str] | None = None,
        y_subgroups: Sequence[str] | None = None,
    ) -> "EmbeddingSet":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if x.shape[1] != y.shape[1]:
            raise ConfigError(f"group dims differ: {x.shape[1]} vs {y.shape[1]}")
        n, m = len(x), len(y)
        x_ids = list(x_ids) if x_ids is not None else [f"X{i:04d}" for i in range(n)]
        y_ids = list(y_ids) if y_ids is not None else [f"Y{j:04d}" for j in range(m)]
        xs = list(x_subgroups) if x_subgroups is not None else [""] * n
        ys = list(y_subgroups) if y_subgroups is not None else [""] * m
        return cls(
            ids=tuple(x_ids + y_ids),
            groups=("X",) * n + ("Y",) * m,
            subgroups=tuple(xs + ys),
            vectors=np.vstack([x, y]),
            dim=x.shape[1],
        )

    def __len__(self) -> int:
        return len(self.ids)

    def mask(self, group: str) -> np.ndarray:
        return np.array([g == group for g in self.groups], dtype=bool)

    @property
    def x(self) -> np.ndarray:
        return self.vectors[self.mask("X")]

    @property
    def y(self) -> np.ndarray:
        return self.vectors[self.mask("Y")]

    def index(self, sample_id: str) -> int:
        try:
            return self.ids.index(sample_id)
        except ValueError:
            raise NotFoundError(f"sample id {sample_id!r} not in embedding set") from None

    def subset(self, keep: np.ndarray) -> "EmbeddingSet":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.nonzero(keep)[0]
        return EmbeddingSet(
            ids=tuple(self.ids[i] for i in keep),
            groups=tuple(self.groups[i] for i in keep),
            subgroups=tuple(self.subgroups[i] for i in keep),
            vectors=self.vectors[keep],
            dim=self.dim,
        )

    def scaled(self, c: float) -> "EmbeddingSet":
        return EmbeddingSet(self.ids, self.groups, self.subgroups, self.vectors * c, self.dim)

    def swapped(self) -> "EmbeddingSet":
        flip = {"X": "Y", "Y": "X"}
        return EmbeddingSet(self.ids, tuple(flip[g] for g in self.groups), self.subgroups, self.vectors, self.dim)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "group", "subgroup", *[f"e{k}" for k in range(self.dim)]])
            for sid, g, sg, vec in zip(self.ids, self.groups, self.subgroups, self.vectors):
                w.writerow([sid, g, sg, *[format(float(v), ".17g") for v in vec]])

    @classmethod
    def read_csv(cls, path: str | Path) -> "EmbeddingSet":
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise IoError(f"cannot read embeddings {path}: {exc}") from exc
        if not rows or rows[0][:3] != ["id", "group", "subgroup"]:
            raise FormatError(f"{path}: expected header id,group,subgroup,e0,...")
        dim = len(rows[0]) - 3
        if rows[0][3:] != [f"e{k}" for k in range(dim)]:
            raise FormatError(f"{path}: embedding columns must be e0..e{dim - 1}")
        body = [r for r in rows[1:] if r]
        for lineno, r in enumerate(body, start=2):
            if len(r) != dim + 3:
                raise FormatError(f"{path}:{lineno}: expected {dim + 3} fields, got {len(r)}")
        try:
            vec = np.array([[float(v) for v in r[3:]] for r in body], dtype=np.float64).reshape(len(body), dim)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        return cls(
            ids=tuple(r[0] for r in body),
            groups=tuple(r[1] for r in body),
            subgroups=tuple(r[2] for r in body),
            vectors=vec,
            dim=dim,
        )
