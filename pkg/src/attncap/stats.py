"""Chance-level statistics and the epochs-to-shatter distribution fit."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import betaln, gammaln, logsumexp

_R_BOUNDS = (1e-6, 1e8)


def _log_pmf(r: np.ndarray, K: int, T: int) -> np.ndarray:
    """log Binomial(K, 1/T) pmf, with log C(K, r) from betaln for accuracy at large K."""
    log_comb = -math.log(K + 1) - betaln(K - r + 1, r + 1)
    return log_comb - r * math.log(T) + (K - r) * math.log1p(-1.0 / T)


def guess_bound(R: int, K: int, T: int) -> float:
    """P(r < R) for r ~ Binomial(K, 1/T): a pure guesser gets fewer than R right.

    Summed exactly term by term in log space.
    """
    if R <= 0:
        return 0.0
    if R > K:
        return 1.0
    return float(min(1.0, math.exp(logsumexp(_log_pmf(np.arange(R, dtype=np.float64), K, T)))))


def chance_probability(r: int, K: int, T: int) -> float:
    """P(at least r correct) under pure guessing, summed over the upper tail directly."""
    if r <= 0:
        return 1.0
    if r > K:
        return 0.0
    return float(min(1.0, math.exp(logsumexp(_log_pmf(np.arange(r, K + 1, dtype=np.float64), K, T)))))


@dataclass
class NegBinomFit:
    """Negative binomial ``P(X=k) = C(k+r-1, k) (1-p)^k p^r`` fitted by maximum likelihood."""

    r: float
    p: float
    n: int
    sample_mean: float
    sample_var: float
    degenerate: bool = False
    note: str = ""

    @property
    def mean(self) -> float:
        return self.r * (1.0 - self.p) / self.p

    @property
    def var(self) -> float:
        return self.r * (1.0 - self.p) / self.p**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = self.mean
        return d


def _profile_loglik(r: float, x: np.ndarray) -> float:
    p = r / (r + x.mean())
    return float(
        np.sum(gammaln(x + r)) - x.size * gammaln(r) - np.sum(gammaln(x + 1)) + x.size * r * math.log(p)
        + np.sum(x) * math.log1p(-p)
    )


def fit_negative_binomial(counts) -> NegBinomFit:
    """Maximum-likelihood (r, p) for nonnegative integer counts.

    For fixed r the likelihood is maximized by ``p = r / (r + mean)``; r is
    then found by bounded 1-D search on log r. Samples whose variance does
    not exceed the mean have no finite maximizer and come back flagged
    ``degenerate`` with r pinned at the search bound.
    """
    x = np.asarray(counts, dtype=np.float64)
    if x.size == 0:
        raise ValueError("fit_negative_binomial needs at least one count")
    if np.any(x < 0):
        raise ValueError("counts must be nonnegative")
    m, v = float(x.mean()), float(x.var())
    if m == 0.0:
        return NegBinomFit(_R_BOUNDS[1], 1.0, x.size, m, v, True, "all counts zero")
    if v <= m:
        r = _R_BOUNDS[1]
        note = "constant sample" if v == 0.0 else "underdispersed sample (Poisson limit)"
        return NegBinomFit(r, r / (r + m), x.size, m, v, True, note)
    lo, hi = (math.log(b) for b in _R_BOUNDS)
    res = minimize_scalar(lambda s: -_profile_loglik(math.exp(s), x), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10})
    r = math.exp(res.x)
    degenerate = bool(res.x > hi - 1e-3)
    return NegBinomFit(r, r / (r + m), x.size, m, v, degenerate, "r at search bound" if degenerate else "")
