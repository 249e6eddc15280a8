"""Welch's one-sided t-test and score normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as _sp

from .errors import InvalidArgument


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p_value: float

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


def welch_t_test(a, b) -> WelchResult:
    """One-sided test of mean(a) > mean(b) with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise InvalidArgument("each sample needs at least 2 values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        # both samples constant: only a strictly larger constant is "significant"
        return WelchResult(np.inf if diff > 0 else (0.0 if diff == 0 else -np.inf), np.inf, 0.0 if diff > 0 else 1.0)
    t = diff / np.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return WelchResult(float(t), float(df), float(_sp.t.sf(t, df)))


def significance(report_a, report_b, alpha: float = 0.05) -> bool:
    """True when report_a's mean is significantly larger than report_b's."""
    return welch_t_test(_totals(report_a), _totals(report_b)).significant(alpha)


def _totals(report):
    return getattr(report, "totals", report)


def normalize_score(score: float, random_score: float, reference_score: float) -> float:
    if reference_score == random_score:
        raise InvalidArgument("reference and random scores coincide")
    return (score - random_score) / (reference_score - random_score)
