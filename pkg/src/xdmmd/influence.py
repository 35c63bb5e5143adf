"""Leave-one-out influence scores on the DMMD statistic.

``IF(s) = S(full) - S(full without s)``: positive scores mark samples that
amplify the group difference, negative scores mark samples that make the
groups look alike.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from xdmmd import dmmd
from xdmmd._parallel import pmap
from xdmmd.embedding import EmbeddingSet
from xdmmd.errors import ConfigError, DegenerateGroupError
from xdmmd.rng import mix


@dataclass(frozen=True)
class InfluenceRow:
    id: str
    group: str
    subgroup: str
    influence: float


@dataclass
class InfluenceTable:
    rows: list[InfluenceRow]
    base_statistic: float
    n: int
    m: int

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.influence for r in self.rows])

    def by_id(self) -> dict[str, float]:
        return {r.id: r.influence for r in self.rows}

    def ranked(self, direction: "Direction | None" = None) -> list[InfluenceRow]:
        """Rows by descending influence (ascending for REMOVE_LOWEST); ties by ascending id."""
        if direction is Direction.REMOVE_LOWEST:
            return sorted(self.rows, key=lambda r: (r.influence, r.id))
        return sorted(self.rows, key=lambda r: (-r.influence, r.id))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "group", "subgroup", "influence"])
            for r in self.rows:
                w.writerow([r.id, r.group, r.subgroup, format(r.influence, ".17g")])

    @classmethod
    def read_csv(cls, path: str | Path) -> "InfluenceTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        table = [InfluenceRow(r["id"], r["group"], r["subgroup"], float(r["influence"])) for r in rows]
        n = sum(r.group == "X" for r in table)
        return cls(table, float("nan"), n, len(table) - n)


def _loo_statistic(v: np.ndarray, group: str, mu_x: np.ndarray, mu_y: np.ndarray, n: int, m: int) -> float:
    if group == "X":
        return dmmd._stat((n * mu_x - v) / (n - 1), mu_y, n - 1, m)
    return dmmd._stat(mu_x, (m * mu_y - v) / (m - 1), n, m - 1)


def influence_of(emb: EmbeddingSet, sample_id: str) -> float:
    """Influence of one sample; only that sample's own group must keep a member."""
    i = emb.index(sample_id)
    mu_x, mu_y, n, m = dmmd.group_means(emb)
    size = n if emb.groups[i] == "X" else m
    if size < 2:
        raise DegenerateGroupError(f"removing {sample_id!r} would empty group {emb.groups[i]}")
    return dmmd._stat(mu_x, mu_y, n, m) - _loo_statistic(emb.vectors[i], emb.groups[i], mu_x, mu_y, n, m)


def influence_scores(emb: EmbeddingSet, threads: int = 1) -> InfluenceTable:
    """Influence of every sample via the incremental mean update.

    Removing a sample ``v`` from a group of size ``k`` with mean ``mu``
    leaves mean ``(k * mu - v) / (k - 1)``; only that group's mean and the
    size prefactor change.
    """
    mu_x, mu_y, n, m = dmmd.group_means(emb)
    if n < 2 or m < 2:
        raise DegenerateGroupError(f"each group needs at least 2 samples for leave-one-out (n={n}, m={m})")
    base = dmmd._stat(mu_x, mu_y, n, m)

    def one(i: int) -> InfluenceRow:
        s = _loo_statistic(emb.vectors[i], emb.groups[i], mu_x, mu_y, n, m)
        return InfluenceRow(emb.ids[i], emb.groups[i], emb.subgroups[i], base - s)

    return InfluenceTable(pmap(one, range(len(emb)), threads), base, n, m)


def influence_scores_naive(emb: EmbeddingSet) -> InfluenceTable:
    """Reference path: recompute the statistic on each leave-one-out set."""
    base = dmmd.statistic(emb)
    n, m = len(emb.x), len(emb.y)
    if n < 2 or m < 2:
        raise DegenerateGroupError(f"each group needs at least 2 samples for leave-one-out (n={n}, m={m})")
    rows = []
    keep = np.ones(len(emb), dtype=bool)
    for i in range(len(emb)):
        keep[i] = False
        rows.append(InfluenceRow(emb.ids[i], emb.groups[i], emb.subgroups[i], base - dmmd.statistic(emb.subset(keep))))
        keep[i] = True
    return InfluenceTable(rows, base, n, m)


# --- ablation ---------------------------------------------------------------


class Direction(str, Enum):
    REMOVE_HIGHEST = "highest"
    REMOVE_LOWEST = "lowest"


@dataclass(frozen=True)
class AblationPoint:
    fraction: float
    removed: int
    statistic: float
    p_value: float


@dataclass
class AblationCurve:
    points: list[AblationPoint]
    direction: Direction
    B: int
    seed: int
    scope: str = "global"

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fraction", "removed", "statistic", "p_value"])
            for p in self.points:
                w.writerow([format(p.fraction, ".17g"), p.removed, format(p.statistic, ".17g"), format(p.p_value, ".17g")])

    @classmethod
    def read_csv(cls, path: str | Path, direction: Direction = Direction.REMOVE_HIGHEST) -> "AblationCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        points = [
            AblationPoint(float(r["fraction"]), int(r["removed"]), float(r["statistic"]), float(r["p_value"]))
            for r in rows
        ]
        return cls(points, direction, 0, 0)


def point_seed(seed: int, index: int) -> int:
    """Permutation seed of curve point ``index``; point 0 reuses ``seed`` so it
    reproduces the unablated test exactly."""
    return seed if index == 0 else mix(seed, index)


def _removal_order(emb: EmbeddingSet, table: InfluenceTable, direction: Direction) -> list[int]:
    pos = {sid: i for i, sid in enumerate(emb.ids)}
    if set(pos) != {r.id for r in table.rows}:
        raise ConfigError("influence table rows do not match the embedding set ids")
    return [pos[r.id] for r in table.ranked(direction)]


SCOPES = ("global", "stratified", "X", "Y")


def _removed_set(order: list[int], fraction: float, scope: str, groups: np.ndarray) -> np.ndarray:
    """Keep-mask after removing the first ranked samples for ``fraction``.

    ``global`` ranks both groups together and removes ``floor(f * (n + m))``;
    ``stratified`` removes ``floor(f * size)`` from each group by its own
    ranking; ``X`` / ``Y`` remove ``floor(f * size)`` from that group only.
    """
    keep = np.ones(len(groups), dtype=bool)
    if scope == "global":
        keep[order[: math.floor(fraction * len(groups))]] = False
        return keep
    for g in ("X", "Y") if scope == "stratified" else (scope,):
        members = [i for i in order if groups[i] == g]
        keep[members[: math.floor(fraction * len(members))]] = False
    return keep


def ablation_curve(
    emb: EmbeddingSet,
    table: InfluenceTable,
    fractions: Sequence[float],
    direction: Direction = Direction.REMOVE_HIGHEST,
    B: int = dmmd.DEFAULT_B,
    seed: int = 0,
    scope: str = "global",
    threads: int = 1,
) -> AblationCurve:
    """Remove the top (or bottom) ranked samples at each fraction and re-run
    the permutation test; ``scope`` picks which groups lose samples."""
    fractions = [float(f) for f in fractions]
    if not fractions or fractions[0] != 0.0:
        raise ConfigError("fractions must start at 0")
    if any(b <= a for a, b in zip(fractions, fractions[1:])) or fractions[-1] >= 1.0:
        raise ConfigError(f"fractions must be strictly increasing within [0, 1), got {fractions}")
    if scope not in SCOPES:
        raise ConfigError(f"unknown removal scope {scope!r}; expected one of {SCOPES}")
    direction = Direction(direction)
    order = _removal_order(emb, table, direction)
    groups = np.array(emb.groups)

    subsets = []
    for f in fractions:
        keep = _removed_set(order, f, scope, groups)
        kept_groups = groups[keep]
        if not (kept_groups == "X").any() or not (kept_groups == "Y").any():
            raise DegenerateGroupError(f"removing fraction {f} ({int((~keep).sum())} samples) empties a group")
        subsets.append(keep)

    def run(i: int) -> AblationPoint:
        keep = subsets[i]
        res = dmmd.permutation_pvalue(emb.subset(keep), B, point_seed(seed, i))
        return AblationPoint(fractions[i], int((~keep).sum()), res.statistic, res.p_value)

    points = pmap(run, range(len(fractions)), threads)
    return AblationCurve(points, direction, B, seed, scope)


# --- distribution summaries -------------------------------------------------


@dataclass
class SubgroupSummary:
    group: str
    subgroup: str
    count: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    outliers: list[str] = field(default_factory=list)
    whisker_low: float = 0.0
    whisker_high: float = 0.0

    @property
    def label(self) -> str:
        return f"{self.group}:{self.subgroup}" if self.subgroup else self.group


@dataclass
class DistributionSummary:
    subgroups: list[SubgroupSummary]
    cdfs: dict[str, list[tuple[float, float]]]
    whisker: float = 1.5

    def get(self, group: str, subgroup: str) -> SubgroupSummary:
        for s in self.subgroups:
            if s.group == group and s.subgroup == subgroup:
                return s
        raise KeyError((group, subgroup))

    def to_json(self) -> str:
        return json.dumps(
            {
                "criterion": f"tukey {self.whisker}*IQR",
                "quantile_method": "linear (type 7)",
                "subgroups": [
                    {
                        "group": s.group,
                        "subgroup": s.subgroup,
                        "count": s.count,
                        "min": s.min,
                        "q1": s.q1,
                        "median": s.median,
                        "q3": s.q3,
                        "max": s.max,
                        "whisker_low": s.whisker_low,
                        "whisker_high": s.whisker_high,
                        "outliers": s.outliers,
                    }
                    for s in self.subgroups
                ],
            },
            indent=2,
        ) + "\n"

    def write_cdf_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subgroup", "score", "cdf"])
            for label, pts in self.cdfs.items():
                for score, c in pts:
                    w.writerow([label, format(score, ".17g"), format(c, ".17g")])


def box_stats(values: Sequence[float], whisker: float = 1.5) -> dict:
    """Type-7 quartiles, Tukey fences, whisker ends and outlier positions."""
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = (float(q) for q in np.quantile(v, [0.25, 0.5, 0.75], method="linear"))
    iqr = q3 - q1
    lo, hi = q1 - whisker * iqr, q3 + whisker * iqr
    inside = v[(v >= lo) & (v <= hi)]
    return {
        "min": float(v.min()),
        "q1": q1,
        "median": med,
        "q3": q3,
        "max": float(v.max()),
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": np.nonzero((v < lo) | (v > hi))[0].tolist(),
    }


def empirical_cdf(values: Sequence[float]) -> list[tuple[float, float]]:
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = len(v)
    return [(float(s), (i + 1) / k) for i, s in enumerate(v)]


def summarize(table: InfluenceTable, whisker: float = 1.5) -> DistributionSummary:
    if not table.rows:
        raise ConfigError("cannot summarize an empty influence table")
    keys: list[tuple[str, str]] = []
    for r in table.rows:
        if (r.group, r.subgroup) not in keys:
            keys.append((r.group, r.subgroup))
    keys.sort()
    subs, cdfs = [], {}
    for g, sg in keys:
        rows = [r for r in table.rows if r.group == g and r.subgroup == sg]
        stats = box_stats([r.influence for r in rows], whisker)
        out_ids = sorted(rows[i].id for i in stats.pop("outliers"))
        s = SubgroupSummary(g, sg, len(rows), outliers=out_ids, **stats)
        subs.append(s)
        cdfs[s.label] = empirical_cdf([r.influence for r in rows])
    return DistributionSummary(subs, cdfs, whisker)


def cdf_at(values: Sequence[float], t: float) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.count_nonzero(v <= t)) / len(v)
