"""Empirical capacity model.

Capacity rises linearly in B with a slope set by sequence length and head
count, then saturates at a ceiling that grows with H::

    slope(N, H) = a / (N ** (b*H + c) + d) + e
    C(B, H, N)  = min(slope(N, H) * B, alpha*H + beta)

The ceiling is applied as a minimum: capacity cannot exceed the plateau, and
a maximum would make C independent of B below saturation. Both branch
values are returned by :func:`ecm_capacity`.
"""

from __future__ import annotations

import itertools
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import yaml

from .lm import levenberg_marquardt
from .model import ModelConfig, count_trainable_params

POLE_TOL = 1e-9
N_ECM_PARAMS = 7
POLY_DEGREE = 5


class PoleError(ArithmeticError):
    """The slope function's denominator vanishes."""


class FitError(RuntimeError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class EcmParams:
    a: float
    b: float
    c: float
    d: float
    e: float
    alpha: float
    beta: float
    layers: int
    provenance: str = ""
    H_range: tuple[int, int] | None = None
    N_range: tuple[int, int] | None = None

    def slope_coefficients(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d, self.e])

    def in_domain(self, H: float, N: float) -> bool:
        ok = True
        if self.H_range is not None:
            ok &= self.H_range[0] <= H <= self.H_range[1]
        if self.N_range is not None:
            ok &= self.N_range[0] <= N <= self.N_range[1]
        return bool(ok)


PRESETS: dict[int, EcmParams] = {
    1: EcmParams(145.27, -0.13, 1.29, 0.13, 0.20, 3762.70, 8741.00, layers=1,
                 provenance="preset:L1", H_range=(1, 4), N_range=(16, 128)),
    2: EcmParams(2.45, -0.002, 0.02, -0.99, -29.08, 4413.10, 14787.00, layers=2,
                 provenance="preset:L2", H_range=(1, 4), N_range=(16, 128)),
}


def preset(layers: int) -> EcmParams:
    if layers not in PRESETS:
        raise KeyError(f"no built-in capacity-model preset for L={layers}; available: {sorted(PRESETS)}")
    if layers == 2:
        warnings.warn("the L=2 preset has a large negative offset e and an unstated valid (N, H) domain; "
                      "check slope positivity before trusting predictions", stacklevel=2)
    return PRESETS[layers]


def write_params(path: str | Path, p: EcmParams) -> None:
    d = asdict(p)
    for k in ("H_range", "N_range"):
        d[k] = list(d[k]) if d[k] is not None else None
    Path(path).write_text(yaml.safe_dump(d, sort_keys=False))


def read_params(path: str | Path) -> EcmParams:
    d = yaml.safe_load(Path(path).read_text())
    for k in ("H_range", "N_range"):
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return EcmParams(**d)


# ---------------------------------------------------------------------------
# model evaluation


def _slope_array(N, H, coef) -> tuple[np.ndarray, np.ndarray]:
    a, b, c, d, e = coef
    N = np.asarray(N, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        denom = N ** (b * H + c) + d
        return denom, a / denom + e


def slope_fn(N, H, p: EcmParams):
    if np.any(np.asarray(N) < 1) or np.any(np.asarray(H) < 1):
        raise ValueError("slope_fn needs N >= 1 and H >= 1")
    denom, s = _slope_array(N, H, p.slope_coefficients())
    if np.any(np.abs(denom) < POLE_TOL):
        raise PoleError(f"slope denominator vanishes at N={N}, H={H}")
    return float(s) if np.ndim(s) == 0 else s


class EcmCapacity(NamedTuple):
    capacity: float
    linear: float
    ceiling: float
    branch: str


def ecm_capacity(B, H, N, p: EcmParams) -> EcmCapacity:
    if min(np.min(B), np.min(H), np.min(N)) < 1:
        raise ValueError("ecm_capacity needs B, H, N >= 1")
    linear = slope_fn(N, H, p) * np.asarray(B, dtype=np.float64)
    ceiling = p.alpha * np.asarray(H, dtype=np.float64) + p.beta
    cap = np.minimum(linear, ceiling)
    if np.ndim(cap) == 0:
        return EcmCapacity(float(cap), float(linear), float(ceiling), "linear" if linear < ceiling else "ceiling")
    return EcmCapacity(cap, linear, ceiling, np.where(linear < ceiling, "linear", "ceiling"))


# ---------------------------------------------------------------------------
# slope extraction


class Measurement(NamedTuple):
    B: float
    H: int
    N: int
    L: int
    C: float
    id: str | None = None


@dataclass(frozen=True)
class SlopeSample:
    H: int
    N: int
    L: int
    slope: float
    B: float
    source_ids: tuple = ()


def _as_measurements(rows: Iterable) -> list[Measurement]:
    return [m if isinstance(m, Measurement) else Measurement(*m) for m in rows]


def group_measurements(rows: Iterable) -> dict[tuple[int, int, int], list[Measurement]]:
    groups: dict[tuple[int, int, int], list[Measurement]] = defaultdict(list)
    for m in _as_measurements(rows):
        groups[(int(m.H), int(m.N), int(m.L))].append(m)
    return {k: sorted(v, key=lambda m: m.B) for k, v in sorted(groups.items())}


def saturation_mask(group: Sequence[Measurement], level: float = 0.9, flat: float = 0.1,
                    drop: float = 0.25) -> np.ndarray:
    """Flag plateau points of one (H, N, L) group, sorted by B.

    A point is saturated when its C is at least ``level`` times the group
    maximum and either the local slope (forward difference, backward for the
    last point) is below ``flat`` times the initial slope ``C[0] / B[0]``, or
    its through-origin slope ``C / B`` has dropped by more than ``drop``
    relative to the previous point. The second test catches a plateau that
    starts at the last B, where a one-sided difference straddles the kink.
    """
    B = np.array([m.B for m in group], dtype=np.float64)
    C = np.array([m.C for m in group], dtype=np.float64)
    if B.size < 2:
        return np.zeros(B.size, dtype=bool)
    local = np.empty_like(C)
    local[:-1] = np.diff(C) / np.diff(B)
    local[-1] = local[-2]
    ratio = C / B
    dropped = np.zeros(B.size, dtype=bool)
    dropped[1:] = ratio[1:] < (1.0 - drop) * ratio[:-1]
    return (C >= level * C.max()) & ((local < flat * ratio[0]) | dropped)


def extract_slopes(rows: Iterable, level: float = 0.9, flat: float = 0.1) -> list[SlopeSample]:
    """Slope through the origin at the highest pre-saturation B of each group."""
    out = []
    for (H, N, L), group in group_measurements(rows).items():
        if len({m.B for m in group}) < 2:
            warnings.warn(f"group H={H} N={N} L={L} has fewer than two distinct B values; skipped", stacklevel=2)
            continue
        sat = saturation_mask(group, level, flat)
        if sat[0]:
            warnings.warn(f"group H={H} N={N} L={L} is saturated at every B; excluded", stacklevel=2)
            continue
        last = int(np.argmax(sat)) - 1 if sat.any() else len(group) - 1
        m = group[last]
        out.append(SlopeSample(H, N, L, m.C / m.B, m.B, (m.id,) if m.id is not None else ()))
    return out


def extract_saturations(rows: Iterable, level: float = 0.9, flat: float = 0.1) -> list[tuple[int, float]]:
    """(H, median plateau capacity) for every H with at least one saturated point."""
    by_h: dict[int, list[float]] = defaultdict(list)
    for (H, _N, _L), group in group_measurements(rows).items():
        sat = saturation_mask(group, level, flat)
        by_h[H].extend(m.C for m, s in zip(group, sat) if s)
    return [(H, float(np.median(v))) for H, v in sorted(by_h.items()) if v]


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitReport:
    params: EcmParams
    slope_residuals: list[float]
    saturation_residuals: list[float]
    residual_norm: float
    converged: bool
    best_start: int
    message: str = ""
    mape_ecm: float | None = None
    mape_poly5: float | None = None
    logo_mape_ecm: float | None = None
    logo_mape_poly5: float | None = None
    n_params_ecm: int = N_ECM_PARAMS
    n_params_poly5: int = math.comb(3 + POLY_DEGREE, 3)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("H_range", "N_range"):
            if d["params"][k] is not None:
                d["params"][k] = list(d["params"][k])
        return d


# Multi-start box: a log-uniform, the rest uniform.
START_RANGES = {"a": (1.0, 1000.0), "b": (-0.5, 0.5), "c": (0.0, 2.5), "d": (-0.5, 2.0), "e": (-1.0, 1.0)}


def _start_points(n: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed))
    lo_a, hi_a = START_RANGES["a"]
    cols = [np.exp(rng.uniform(math.log(lo_a), math.log(hi_a), n))]
    for k in "bcde":
        cols.append(rng.uniform(*START_RANGES[k], n))
    return np.column_stack(cols)


def _slope_jacobian(coef, N, H) -> np.ndarray:
    a, b, c, d, _ = coef
    lnN = np.log(N)
    with np.errstate(over="ignore", invalid="ignore"):
        g = N ** (b * H + c)
        D = g + d
        dD = -a / D**2
        return np.column_stack([1.0 / D, dD * g * lnN * H, dD * g * lnN, dD, np.ones_like(N)])


def fit_saturation_line(saturations: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Ordinary least squares ``C_sat = alpha*H + beta``."""
    if len(saturations) < 2 or len({h for h, _ in saturations}) < 2:
        raise InsufficientDataError("saturation line needs points at two or more distinct H")
    H = np.array([h for h, _ in saturations], dtype=np.float64)
    C = np.array([c for _, c in saturations], dtype=np.float64)
    A = np.column_stack([H, np.ones_like(H)])
    (alpha, beta), *_ = np.linalg.lstsq(A, C, rcond=None)
    return float(alpha), float(beta)


def fit_ecm(samples: Sequence[SlopeSample], saturations: Sequence[tuple[float, float]], *, starts: int = 32,
            seed: int = 0, weighting: str = "absolute") -> FitReport:
    """Fit the slope function by multi-start LM and the ceiling line by OLS.

    ``weighting="relative"`` divides slope residuals by the observed slope.
    The start with the lowest final cost wins; ties go to the lower index.
    """
    if len(samples) < 5 or len({s.H for s in samples}) < 2:
        raise InsufficientDataError("need at least 5 slope samples spanning 2 or more H values")
    layers = {s.L for s in samples}
    if len(layers) != 1:
        raise InsufficientDataError(f"slope samples mix layer counts {sorted(layers)}")
    N = np.array([s.N for s in samples], dtype=np.float64)
    H = np.array([s.H for s in samples], dtype=np.float64)
    y = np.array([s.slope for s in samples], dtype=np.float64)
    if weighting == "absolute":
        w = np.ones_like(y)
    elif weighting == "relative":
        w = 1.0 / np.maximum(np.abs(y), 1e-12)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")

    def fun(coef):
        denom, s = _slope_array(N, H, coef)
        if np.any(np.abs(denom) < POLE_TOL):
            return np.full_like(y, np.inf)
        return w * (s - y)

    def jac(coef):
        return w[:, None] * _slope_jacobian(coef, N, H)

    best = None
    for i, x0 in enumerate(_start_points(starts, seed)):
        res = levenberg_marquardt(fun, jac, x0)
        if not np.isfinite(res.cost):
            continue
        if best is None or res.cost < best[1].cost:
            best = (i, res)
    alpha, beta = fit_saturation_line(saturations)
    notes = []
    if best is None:
        raise FitError("every multi-start produced non-finite residuals")
    i, res = best
    a, b, c, d, e = (float(v) for v in res.x)
    params = EcmParams(a, b, c, d, e, alpha, beta, layers=layers.pop(), provenance=f"fit:starts={starts},seed={seed}",
                       H_range=(int(H.min()), int(H.max())), N_range=(int(N.min()), int(N.max())))
    _, fitted = _slope_array(N, H, res.x)
    if np.any(fitted <= 0):
        notes.append("fitted slope is not positive on every sampled (N, H)")
    sat_res = [alpha * h + beta - c_ for h, c_ in saturations]
    return FitReport(params, list(fitted - y), sat_res, float(np.linalg.norm(fitted - y)), res.converged, i,
                     res.message, warnings=notes)


# ---------------------------------------------------------------------------
# polynomial baseline


def poly_exponents(degree: int = POLY_DEGREE, n_vars: int = 3) -> list[tuple[int, ...]]:
    """All exponent tuples of total degree <= ``degree``, graded order."""
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), total):
            out.append(tuple(combo.count(v) for v in range(n_vars)))
    return out


@dataclass
class Poly5Model:
    """Least-squares polynomial in standardized (H, N, B).

    Inputs are mapped to ``z = (x - mean) / std`` before the monomials are
    formed and the coefficients live in those coordinates; ``predict``
    applies the same map, so no explicit destandardization is needed.
    """

    coef: np.ndarray
    exponents: list[tuple[int, ...]]
    mean: np.ndarray
    std: np.ndarray
    regularized: bool = False

    @property
    def n_params(self) -> int:
        return len(self.exponents)

    def design(self, H, N, B) -> np.ndarray:
        X = np.column_stack([np.asarray(v, dtype=np.float64) for v in (H, N, B)])
        Z = (X - self.mean) / self.std
        return np.column_stack([np.prod(Z ** np.array(e), axis=1) for e in self.exponents])

    def predict(self, H, N, B) -> np.ndarray:
        return self.design(H, N, B) @ self.coef


def fit_poly5(rows: Iterable, degree: int = POLY_DEGREE, ridge: float = 1e-8) -> Poly5Model:
    """Fit all monomials of total degree <= 5 in (H, N, B) to C.

    A rank-deficient design (e.g. only four distinct H values) is solved
    with a small ridge term and flagged ``regularized``.
    """
    ms = _as_measurements(rows)
    exps = poly_exponents(degree)
    if len(ms) < len(exps):
        raise InsufficientDataError(f"polynomial baseline needs at least {len(exps)} measurements, got {len(ms)}")
    X = np.array([[m.H, m.N, m.B] for m in ms], dtype=np.float64)
    y = np.array([m.C for m in ms], dtype=np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    model = Poly5Model(np.zeros(len(exps)), exps, mean, std)
    A = model.design(X[:, 0], X[:, 1], X[:, 2])
    if np.linalg.matrix_rank(A) < len(exps):
        G = A.T @ A
        lam = ridge * np.trace(G) / G.shape[0]
        model.coef = np.linalg.solve(G + lam * np.eye(G.shape[0]), A.T @ y)
        model.regularized = True
    else:
        model.coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return model


# ---------------------------------------------------------------------------
# evaluation


def mape(pred, actual) -> float:
    """Mean of ``|pred - actual| / actual``; points with ``actual == 0`` are dropped."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {actual.shape}")
    if np.any(actual < 0):
        raise ValueError("actual values must be nonnegative")
    keep = actual != 0
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"mape: excluded {dropped} point(s) with zero actual value", stacklevel=2)
    if not keep.any():
        raise ValueError("mape: no nonzero actual values")
    return float(np.mean(np.abs(pred[keep] - actual[keep]) / actual[keep]))


def predict_rows(rows: Iterable, p: EcmParams) -> np.ndarray:
    ms = _as_measurements(rows)
    return np.asarray(ecm_capacity(np.array([m.B for m in ms]), np.array([m.H for m in ms]),
                                   np.array([m.N for m in ms]), p).capacity, dtype=np.float64)


def fit_measurements(rows: Iterable, *, starts: int = 32, seed: int = 0, weighting: str = "absolute",
                     level: float = 0.9, flat: float = 0.1) -> FitReport:
    """Slope extraction, ECM fit, polynomial baseline and in-sample MAPE for both."""
    ms = _as_measurements(rows)
    report = fit_ecm(extract_slopes(ms, level, flat), extract_saturations(ms, level, flat),
                     starts=starts, seed=seed, weighting=weighting)
    actual = np.array([m.C for m in ms])
    report.mape_ecm = mape(predict_rows(ms, report.params), actual)
    try:
        poly = fit_poly5(ms)
        report.mape_poly5 = mape(poly.predict([m.H for m in ms], [m.N for m in ms], [m.B for m in ms]), actual)
        if poly.regularized:
            report.warnings.append("polynomial design is rank deficient; ridge-regularized solve used")
    except InsufficientDataError as exc:
        report.warnings.append(str(exc))
    return report


@dataclass
class LogoReport:
    mape_ecm: float
    mape_poly5: float
    groups: list[tuple[int, int, int]]


def leave_one_group_out(rows: Iterable, *, starts: int = 32, seed: int = 0, weighting: str = "absolute",
                        level: float = 0.9, flat: float = 0.1) -> LogoReport:
    """Hold out each (H, N, L) group in turn; pool the held-out errors."""
    groups = group_measurements(rows)
    pe, pp, act = [], [], []
    for key, held in groups.items():
        rest = [m for k, g in groups.items() if k != key for m in g]
        p = fit_ecm(extract_slopes(rest, level, flat), extract_saturations(rest, level, flat),
                    starts=starts, seed=seed, weighting=weighting).params
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            poly = fit_poly5(rest)
        pe.append(predict_rows(held, p))
        pp.append(poly.predict([m.H for m in held], [m.N for m in held], [m.B for m in held]))
        act.append([m.C for m in held])
    actual = np.concatenate(act)
    return LogoReport(mape(np.concatenate(pe), actual), mape(np.concatenate(pp), actual), list(groups))


# ---------------------------------------------------------------------------
# architecture planning


def mpp(cfg: ModelConfig, p: EcmParams) -> float:
    """Predicted memorized sequences per trainable parameter."""
    if cfg.L != p.layers:
        raise ValueError(f"model has L={cfg.L} but capacity parameters are for L={p.layers}")
    return ecm_capacity(cfg.B, cfg.H, cfg.N, p).capacity / count_trainable_params(cfg)


class CurvePoint(NamedTuple):
    H: int
    B: int
    params: int
    capacity: float


DEFAULT_B_GRID = tuple(range(8, 4097, 8))


def size_capacity_curve(L: int, H_list: Sequence[int], N: int, p: EcmParams,
                        B_values: Sequence[int] = DEFAULT_B_GRID, **cfg_kw) -> list[CurvePoint]:
    """(trainable parameters, predicted capacity) over a B sweep for each H.

    ``cfg_kw`` sets the remaining ModelConfig fields (d_h, ffn_mult, ...);
    T does not affect either quantity and defaults to 128.
    """
    cfg_kw.setdefault("T", 128)
    out = []
    for H in H_list:
        for B in B_values:
            cfg = ModelConfig(N=N, B=int(B), H=int(H), L=L, **cfg_kw)
            out.append(CurvePoint(int(H), int(B), count_trainable_params(cfg), ecm_capacity(B, H, N, p).capacity))
    return out


def capacity_at_params(target: int, L: int, H: int, N: int, p: EcmParams, B_max: int = 1 << 15,
                       **cfg_kw) -> CurvePoint:
    """The integer-B configuration whose parameter count is closest to ``target``."""
    curve = size_capacity_curve(L, [H], N, p, B_values=range(2, B_max + 1), **cfg_kw)
    return min(curve, key=lambda c: (abs(c.params - target), c.B))

