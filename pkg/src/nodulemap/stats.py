"""Paired Wilcoxon signed-rank test.

Small samples (n <= 20 after dropping zero differences, or any n up to
64 when exact mode is forced) get an exact p-value: with averaged ranks
doubled into integers, a subset-sum table over sign flips counts every
achievable rank sum, so ties are handled exactly, conditional on the
observed ranks. Larger samples fall back to the tie-corrected normal
approximation with a continuity correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_EXACT_DEFAULT_MAX = 20
_EXACT_HARD_MAX = 64
_ALTERNATIVES = ("two-sided", "greater", "less")


@dataclass
class WilcoxonResult:
    statistic: float      # sum of ranks of positive differences
    w_minus: float
    p_value: float        # None when the test is degenerate (no nonzero pairs)
    n_used: int           # pairs left after dropping zero differences
    method: str           # exact, normal or degenerate


def average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, with tied values sharing their mean rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_cdf_table(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of sign-flip subsets for every doubled rank sum."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        counts[r:] += counts[:total + 1 - r].copy()
    return counts


def _phi(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def wilcoxon(x, y=None, alternative: str = "two-sided", method: str = "auto") -> WilcoxonResult:
    """Signed-rank test of paired samples (or of x against zero).

    ``alternative='greater'`` tests whether x tends to exceed y.
    ``method`` is ``auto`` (exact for small n), ``exact`` or ``approx``.
    """
    if alternative not in _ALTERNATIVES:
        raise ConfigError(f"alternative must be one of {_ALTERNATIVES}, got {alternative!r}")
    if method not in ("auto", "exact", "approx"):
        raise ConfigError(f"method must be auto, exact or approx, got {method!r}")
    x = np.asarray(x, dtype=np.float64)
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ConfigError(f"paired samples differ in shape: {x.shape} vs {y.shape}")
        diffs = x - y
    else:
        diffs = x
    if diffs.ndim != 1:
        raise ConfigError(f"samples must be 1-D, got shape {diffs.shape}")
    if not np.all(np.isfinite(diffs)):
        raise ConfigError("samples contain non-finite values")

    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n == 0:
        # every pair is tied; the test has no distribution to speak of
        return WilcoxonResult(0.0, 0.0, None, 0, "degenerate")

    ranks = average_ranks(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks[diffs < 0].sum())

    use_exact = (method == "exact") or (method == "auto" and n <= _EXACT_DEFAULT_MAX)
    if method == "exact" and n > _EXACT_HARD_MAX:
        raise ConfigError(f"exact method supports at most {_EXACT_HARD_MAX} pairs, got {n}")

    if use_exact:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        if not np.allclose(doubled, 2.0 * ranks):
            raise ConfigError("ranks are not multiples of one half")
        counts = _exact_cdf_table(doubled)
        denom = 2.0 ** n

        def cdf_at_most(w: float) -> float:
            cut = int(math.floor(round(2.0 * w, 6)))
            cut = min(max(cut, -1), counts.size - 1)
            return counts[:cut + 1].sum() / denom if cut >= 0 else 0.0

        if alternative == "two-sided":
            # the sign-flip distribution is symmetric, so the upper tail
            # of w_plus equals the lower tail of w_minus
            p = min(1.0, 2.0 * cdf_at_most(min(w_plus, w_minus)))
        elif alternative == "greater":
            p = 1.0 - cdf_at_most(w_plus - 0.5)
        else:
            p = cdf_at_most(w_plus)
        return WilcoxonResult(w_plus, w_minus, float(p), n, "exact")

    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_sizes = np.unique(np.abs(diffs), return_counts=True)
    var -= float(np.sum(tie_sizes.astype(np.float64) ** 3 - tie_sizes)) / 48.0
    if var <= 0.0:
        return WilcoxonResult(w_plus, w_minus, None, n, "degenerate")
    sigma = math.sqrt(var)
    if alternative == "two-sided":
        delta = w_plus - mu
        z = (delta - 0.5 * math.copysign(1.0, delta)) / sigma if delta != 0 else 0.0
        p = min(1.0, 2.0 * (1.0 - _phi(abs(z))))
    elif alternative == "greater":
        p = 1.0 - _phi((w_plus - mu - 0.5) / sigma)
    else:
        p = _phi((w_plus - mu + 0.5) / sigma)
    return WilcoxonResult(w_plus, w_minus, float(p), n, "normal")
