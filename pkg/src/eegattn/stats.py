"""Rank and permutation tests for comparing decoding accuracies between
conditions."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class SampleGroup:
    label: str
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise ValueError(f"group {self.label!r} is empty")


class KruskalResult(NamedTuple):
    H: float
    p: float


class PairedTestResult(NamedTuple):
    t_obs: float
    p: float
    degenerate: bool


# regularized incomplete gamma ---------------------------------------------

_ITMAX = 10_000
_EPS = 1e-16
_TINY = 1e-300


def _gamma_series(a: float, x: float) -> float:
    """Lower regularized P(a, x) by its power series (good for x < a + 1)."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_ITMAX):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cfrac(a: float, x: float) -> float:
    """Upper regularized Q(a, x) by Lentz's continued fraction (x >= a + 1)."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _ITMAX):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammaincc(a: float, x: float) -> float:
    if a <= 0:
        raise ValueError(f"shape must be positive, got {a}")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cfrac(a, x)


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail of the chi-square distribution."""
    return gammaincc(dof / 2.0, x / 2.0)


def rankdata(values) -> np.ndarray:
    """Mid-ranks (1-based), tied values share the mean of their positions."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _as_groups(groups) -> list[SampleGroup]:
    out = []
    for i, g in enumerate(groups):
        out.append(g if isinstance(g, SampleGroup) else SampleGroup(f"group{i}", tuple(g)))
    return out


def kruskal_wallis(groups: Sequence) -> KruskalResult:
    """Tie-corrected H with a chi-square(g - 1) p-value.

    When every pooled value is identical the tie correction vanishes and
    the result is reported as ``H = 0, p = 1``.
    """
    groups = _as_groups(groups)
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    pooled = np.concatenate([np.asarray(g.values) for g in groups])
    n = pooled.size
    ranks = rankdata(pooled)
    h, start = 0.0, 0
    for g in groups:
        r = ranks[start : start + len(g.values)]
        start += len(g.values)
        h += len(g.values) * (r.mean() - (n + 1) / 2.0) ** 2
    h *= 12.0 / (n * (n + 1))
    _, ties = np.unique(pooled, return_counts=True)
    correction = 1.0 - float(np.sum(ties.astype(float) ** 3 - ties)) / (n**3 - n) if n > 1 else 0.0
    if correction <= 0.0:
        return KruskalResult(0.0, 1.0)
    h /= correction
    return KruskalResult(float(h), float(min(1.0, chi2_sf(h, len(groups) - 1))))


def _t_stats(d: np.ndarray) -> np.ndarray:
    """One-sample t along the last axis; zero spread gives +/-inf (or nan for 0/0)."""
    n = d.shape[-1]
    sd = d.std(axis=-1, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return d.mean(axis=-1) / (sd / math.sqrt(n))


def permutation_paired_test(a, b, n_perm: Optional[int] = 10_000, seed: int = 0,
                            exact: bool = False) -> PairedTestResult:
    """Paired t statistic against its sign-flip null, two-sided.

    Monte-Carlo: ``p = (1 + #{|t*| >= |t|}) / (n_perm + 1)``. With
    ``exact=True`` all ``2**n`` flip patterns are enumerated and
    ``p = #{|t*| >= |t|} / 2**n``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    if np.all(d == d[0]):
        return PairedTestResult(0.0 if d[0] == 0 else math.copysign(math.inf, d[0]), 1.0, True)
    t_obs = float(_t_stats(d))
    # tolerance guards against flips that reproduce |t_obs| up to rounding
    thresh = abs(t_obs) * (1.0 - 1e-12)
    if exact:
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=d.size)))
        t_null = np.abs(_t_stats(signs * d))
        return PairedTestResult(t_obs, float(np.count_nonzero(t_null >= thresh) / len(signs)), False)
    if n_perm is None or n_perm < 1:
        raise ValueError("n_perm must be a positive count")
    rng = np.random.default_rng(seed)
    hits = 0
    for start in range(0, n_perm, 4096):
        m = min(4096, n_perm - start)
        signs = rng.choice((-1.0, 1.0), size=(m, d.size))
        hits += int(np.count_nonzero(np.abs(_t_stats(signs * d)) >= thresh))
    return PairedTestResult(t_obs, (1 + hits) / (n_perm + 1), False)


def extract_accuracies(doc: dict, level: str = "auto") -> tuple[str, list[float]]:
    """Pull per-subject mean accuracies (or every fold accuracy) from a
    results document."""
    subjects = doc.get("subjects")
    if not subjects:
        raise ValueError("results document lists no subjects")
    if level == "auto":
        level = "subject" if len(subjects) >= 2 else "fold"
    if level == "subject":
        return level, [float(s["summary"]["mean_accuracy"]) for s in subjects]
    if level == "fold":
        return level, [float(f["test_accuracy"]) for s in subjects for f in s["folds"]]
    raise ValueError(f"unknown comparison level {level!r}")


def compare_conditions(doc_a: dict, doc_b: dict, level: str = "auto", n_perm: int = 10_000,
                       seed: int = 0, alpha: float = 0.05, labels=("a", "b")) -> dict:
    """Kruskal-Wallis plus the paired sign-flip test on two results documents."""
    if level == "auto":
        both = min(len(doc_a.get("subjects", [])), len(doc_b.get("subjects", [])))
        level = "subject" if both >= 2 else "fold"
    _, acc_a = extract_accuracies(doc_a, level)
    _, acc_b = extract_accuracies(doc_b, level)
    if len(acc_a) != len(acc_b):
        raise ValueError(f"paired test needs equal counts, got {len(acc_a)} and {len(acc_b)} {level} values")
    kw = kruskal_wallis([SampleGroup(labels[0], acc_a), SampleGroup(labels[1], acc_b)])
    perm = permutation_paired_test(acc_a, acc_b, n_perm, seed)
    mean_a, mean_b = float(np.mean(acc_a)), float(np.mean(acc_b))
    return {
        "level": level,
        "n": len(acc_a),
        "labels": list(labels),
        "mean_a": mean_a,
        "mean_b": mean_b,
        "difference": mean_a - mean_b,
        "values_a": acc_a,
        "values_b": acc_b,
        "kruskal_wallis": {"H": kw.H, "p": kw.p, "significant": kw.p < alpha},
        "permutation_t": {"t": perm.t_obs if math.isfinite(perm.t_obs) else str(perm.t_obs),
                          "p": perm.p, "n_perm": n_perm, "degenerate": perm.degenerate,
                          "significant": perm.p < alpha},
        "alpha": alpha,
    }


def format_comparison(result: dict) -> str:
    a, b = result["labels"]
    kw, pt = result["kruskal_wallis"], result["permutation_t"]
    lines = [
        f"{'':24s}{a:>12s}{b:>12s}",
        f"{'mean accuracy (' + result['level'] + ')':24s}{result['mean_a']:12.4f}{result['mean_b']:12.4f}",
        f"{'difference':24s}{result['difference']:12.4f}",
        f"{'Kruskal-Wallis H':24s}{kw['H']:12.4f}   p = {kw['p']:.4g}",
        f"{'paired permutation t':24s}{str(pt['t'])[:12]:>12s}   p = {pt['p']:.4g}",
    ]
    return "\n".join(lines)
