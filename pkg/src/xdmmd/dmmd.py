"""DMMD statistic and Monte Carlo permutation test.

    S = n m / (n + m) * || mean(X) - mean(Y) ||^2

Group means are taken with a pairwise tree sum over rows in canonical
(lexicographic) order, so S depends only on the multisets of rows and not
on how they happen to be ordered.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from xdmmd._parallel import pmap
from xdmmd.embedding import EmbeddingSet
from xdmmd.errors import ConfigError, EmptyGroupError
from xdmmd.rng import stream

DEFAULT_B = 1000
_CHUNK = 64


def tree_sum(rows: np.ndarray) -> np.ndarray:
    """Column sums by pairwise (adjacent-pair) reduction in the given row order."""
    acc = np.asarray(rows, dtype=np.float64)
    if len(acc) == 0:
        return np.zeros(acc.shape[1:])
    while len(acc) > 1:
        if len(acc) % 2:
            # an appended zero row is exact and keeps the pairing fixed
            acc = np.vstack([acc, np.zeros((1,) + acc.shape[1:])])
        acc = acc[0::2] + acc[1::2]
    return acc[0]


def canonical_order(rows: np.ndarray) -> np.ndarray:
    """Row indices sorted lexicographically (first column most significant)."""
    rows = np.asarray(rows)
    if len(rows) == 0:
        return np.arange(0)
    return np.lexsort(rows.T[::-1])


def mean(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    return tree_sum(rows[canonical_order(rows)]) / len(rows)


def _check(emb: EmbeddingSet) -> tuple[np.ndarray, np.ndarray]:
    if emb.dim == 0:
        raise ConfigError("embedding dimension must be positive")
    x, y = emb.x, emb.y
    if len(x) == 0 or len(y) == 0:
        raise EmptyGroupError(f"both groups need samples (n={len(x)}, m={len(y)})")
    return x, y


def _stat(mu_x: np.ndarray, mu_y: np.ndarray, n: int, m: int) -> float:
    d = mu_x - mu_y
    return n * m / (n + m) * float(np.dot(d, d))


def statistic(emb: EmbeddingSet) -> float:
    x, y = _check(emb)
    return _stat(mean(x), mean(y), len(x), len(y))


def group_means(emb: EmbeddingSet) -> tuple[np.ndarray, np.ndarray, int, int]:
    x, y = _check(emb)
    return mean(x), mean(y), len(x), len(y)


def statistic_gradient_wrt_sample(emb: EmbeddingSet, sample_id: str) -> np.ndarray:
    """dS / d phi(sample), holding every other embedding fixed.

    For a sample of X this is ``2m/(n+m) * (mu_X - mu_Y)``; for Y the sign
    flips and ``m`` becomes ``n``.
    """
    i = emb.index(sample_id)
    mu_x, mu_y, n, m = group_means(emb)
    return _gradient_from_means(emb.groups[i], mu_x, mu_y, n, m)


def _gradient_from_means(group: str, mu_x: np.ndarray, mu_y: np.ndarray, n: int, m: int) -> np.ndarray:
    d = mu_x - mu_y
    if group == "X":
        return 2.0 * m / (n + m) * d
    return -2.0 * n / (n + m) * d


@dataclass
class TestResult:
    statistic: float
    p_value: float
    n: int
    m: int
    B: int
    seed: int
    permutation_statistics: list[float] = field(default_factory=list, repr=False)

    __test__ = False  # not a pytest class

    def to_json(self, **extra) -> str:
        d = {k: v for k, v in asdict(self).items() if k != "permutation_statistics"}
        d.update(extra)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def write_permutations(self, path: str | Path) -> None:
        Path(path).write_text("statistic\n" + "".join(f"{s:.17g}\n" for s in self.permutation_statistics))


class _PermutationNull:
    """Pooled rows sorted once; each permutation picks a boolean subset.

    A subset of canonically sorted rows is itself canonically sorted, so
    every permuted statistic equals ``statistic()`` on the permuted split.
    """

    def __init__(self, emb: EmbeddingSet, seed: int):
        x, y = _check(emb)
        self.n, self.m = len(x), len(y)
        order = canonical_order(emb.vectors)
        self.pooled = emb.vectors[order]
        self.seed = seed

    def draw(self, b: int) -> float:
        n, total = self.n, self.n + self.m
        perm = stream(self.seed, b).permutation(total)
        in_x = np.zeros(total, dtype=bool)
        in_x[perm[:n]] = True
        mu_x = tree_sum(self.pooled[in_x]) / n
        mu_y = tree_sum(self.pooled[~in_x]) / self.m
        return _stat(mu_x, mu_y, n, self.m)

    def draw_range(self, span: range) -> list[float]:
        return [self.draw(b) for b in span]


def permutation_pvalue(emb: EmbeddingSet, B: int = DEFAULT_B, seed: int = 0, threads: int = 1) -> TestResult:
    """Permutation p-value ``(1 + #{S_b >= S}) / (B + 1)``.

    Permutation ``b`` shuffles the pooled indices with the generator
    ``stream(seed, b)``; the result is identical for any ``threads``.
    """
    if B < 1:
        raise ConfigError(f"number of permutations must be >= 1, got {B}")
    s = statistic(emb)
    null = _PermutationNull(emb, seed)
    chunks = [range(lo, min(lo + _CHUNK, B)) for lo in range(0, B, _CHUNK)]
    perm_stats = [v for part in pmap(null.draw_range, chunks, threads) for v in part]
    exceed = sum(1 for v in perm_stats if v >= s)
    return TestResult(
        statistic=s,
        p_value=(1 + exceed) / (B + 1),
        n=null.n,
        m=null.m,
        B=B,
        seed=seed,
        permutation_statistics=perm_stats,
    )
