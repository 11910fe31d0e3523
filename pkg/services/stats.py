"""
Paired statistics for comparing conditions across scenes.

Paired t-test with Cohen's d, exact Wilcoxon signed-rank, Pearson and
Spearman correlation with a paired bootstrap CI, and the log-linear fit of
train-test gap against cloud size.
"""

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats as sps

from core.errors import ContractError, DegenerateSampleError, NoInformationError, UndefinedCorrelationError

WILCOXON_MAX_N = 20
DEFAULT_RESAMPLES = 10_000


@dataclass
class PairedSample:
    """Two conditions measured on the same scenes, paired by position."""

    a: np.ndarray
    b: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.ndim != 1 or self.a.shape != self.b.shape:
            raise ContractError("paired samples need two equal-length 1D arrays")
        if self.a.size < 2:
            raise ContractError("paired samples need n >= 2")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ContractError("paired samples must be finite")

    @property
    def n(self) -> int:
        return self.a.size

    @property
    def differences(self) -> np.ndarray:
        return self.a - self.b


@dataclass(frozen=True)
class PairedEffect:
    t: float
    p: float
    d: float
    mean_difference: float
    n: int


def paired_effect(sample: PairedSample) -> PairedEffect:
    """
    Paired t-test (two-sided) with Cohen's d on the differences a - b.

    Raises:
        DegenerateSampleError: the differences have zero spread
    """
    diff = sample.differences
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        raise DegenerateSampleError("all paired differences are identical", mean_difference=mean)
    d = mean / sd
    t = d * np.sqrt(sample.n)
    p = float(2.0 * sps.t.sf(abs(t), df=sample.n - 1))
    return PairedEffect(t=float(t), p=min(p, 1.0), d=d, mean_difference=mean, n=sample.n)


@dataclass(frozen=True)
class WilcoxonResult:
    w: float
    p: float
    n: int  # nonzero differences used


def _signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of the doubled positive-rank sum."""
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for rank in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[: counts.size - rank]
        counts = counts + shifted
    return counts


def wilcoxon_exact(sample: PairedSample) -> WilcoxonResult:
    """
    Exact two-sided Wilcoxon signed-rank test.

    Zero differences are dropped; tied magnitudes share average ranks. The
    null distribution counts all 2^n sign assignments of the ranks.

    Raises:
        NoInformationError: every difference is zero
        ContractError: more than 20 nonzero differences
    """
    diff = sample.differences
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        raise NoInformationError("all paired differences are zero")
    if n > WILCOXON_MAX_N:
        raise ContractError(f"exact Wilcoxon supports n <= {WILCOXON_MAX_N}, got {n}")

    ranks = sps.rankdata(np.abs(diff), method="average")
    # average ranks are multiples of 1/2
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    positive = int(doubled[diff > 0].sum())
    counts = _signed_rank_counts(doubled)
    total = float(2**n)
    lower = counts[: positive + 1].sum() / total
    upper = counts[positive:].sum() / total
    w_plus = positive / 2.0
    w_minus = ranks.sum() - w_plus
    return WilcoxonResult(w=float(min(w_plus, w_minus)), p=float(min(1.0, 2.0 * min(lower, upper))), n=n)


@dataclass(frozen=True)
class Correlation:
    pearson: float
    spearman: float
    ci_low: float
    ci_high: float
    n: int


def _check_correlatable(x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 1 or x.shape != y.shape:
        raise ContractError("correlation needs two equal-length 1D arrays")
    if x.size < 3:
        raise ContractError("correlation needs at least 3 points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("correlation is undefined for constant input")


def _rowwise_pearson(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    denom = np.sqrt((xc * xc).sum(axis=1) * (yc * yc).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (xc * yc).sum(axis=1) / denom
    return np.clip(r, -1.0, 1.0)


def correlate(
    x: Sequence[float],
    y: Sequence[float],
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> Correlation:
    """
    Pearson r, Spearman rho, and a percentile bootstrap 95% CI for r.

    Resamples are paired draws with replacement from a counter-based
    Philox stream; degenerate (constant) resamples are ignored.

    Raises:
        UndefinedCorrelationError: x or y is constant
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_correlatable(x, y)
    pearson = float(np.clip(sps.pearsonr(x, y).statistic, -1.0, 1.0))
    spearman = float(np.clip(sps.spearmanr(x, y).statistic, -1.0, 1.0))

    ci_low = ci_high = float("nan")
    if resamples > 0:
        rng = np.random.Generator(np.random.Philox(seed))
        index = rng.integers(0, x.size, size=(resamples, x.size))
        boot = _rowwise_pearson(x[index], y[index])
        if np.isfinite(boot).any():
            ci_low, ci_high = (float(v) for v in np.nanpercentile(boot, [2.5, 97.5]))
    return Correlation(pearson=pearson, spearman=spearman, ci_low=ci_low, ci_high=ci_high, n=x.size)


@dataclass(frozen=True)
class CountGapFit:
    slope: float  # dB per decade of K
    intercept: float
    r: float
    rho: float
    endpoint_r: Optional[float]
    n: int


def fit_count_gap_points(counts: Sequence[float], gaps: Sequence[float]) -> CountGapFit:
    """
    Least-squares fit of gap on log10 K.

    ``endpoint_r`` recomputes Pearson r without the smallest-K and largest-K
    points; it is None when fewer than 3 distinct K remain.

    Raises:
        ContractError: fewer than 3 distinct K
    """
    counts = np.asarray(counts, dtype=np.float64)
    gaps = np.asarray(gaps, dtype=np.float64)
    if counts.shape != gaps.shape or counts.ndim != 1:
        raise ContractError("counts and gaps must be equal-length 1D arrays")
    if np.unique(counts).size < 3:
        raise ContractError("count-gap fit needs at least 3 distinct K")
    if np.any(counts <= 0):
        raise ContractError("cloud sizes must be positive")
    log_k = np.log10(counts)
    if np.ptp(gaps) == 0:
        raise UndefinedCorrelationError("gap is constant across records")
    fit = sps.linregress(log_k, gaps)
    rho = float(sps.spearmanr(log_k, gaps).statistic)

    keep = np.ones(counts.size, dtype=bool)
    keep[int(np.argmin(counts))] = False
    keep[int(np.argmax(counts))] = False
    endpoint_r = None
    if np.unique(counts[keep]).size >= 3 and np.ptp(gaps[keep]) > 0:
        endpoint_r = float(sps.pearsonr(log_k[keep], gaps[keep]).statistic)
    return CountGapFit(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        r=float(np.clip(fit.rvalue, -1.0, 1.0)),
        rho=rho,
        endpoint_r=endpoint_r,
        n=counts.size,
    )


def fit_count_gap(records: Iterable) -> CountGapFit:
    """``fit_count_gap_points`` over run records (``final_k`` vs ``gap``)."""
    records = list(records)
    return fit_count_gap_points([r.final_k for r in records], [r.gap for r in records])
