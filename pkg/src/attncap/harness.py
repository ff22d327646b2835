"""Training loop and capacity-measurement protocols.

Capacity ``r`` is the number of library sequences whose final token the
model predicts (greedy argmax, lowest id on ties) from the preceding N-1
tokens. MAC trains on one large library and reports the best ``r`` over
restarts; MLS searches for the largest library the model shatters.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .datagen import SequenceLibrary, batches, generate_library
from .model import ModelConfig, ModelParams, forward, init_model
from .optim import Adam
from .stats import NegBinomFit, chance_probability, fit_negative_binomial

log = logging.getLogger(__name__)

RECORD_SCHEMA = "attncap.run/1"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 500
    patience: int = 20
    restarts: int = 5
    seed: int = 0
    full_sequence_loss: bool = False
    stop_at_shatter: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("TrainConfig.batch_size must be >= 1")
        if self.restarts < 1:
            raise ValueError("TrainConfig.restarts must be >= 1")
        if self.patience < 1:
            raise ValueError("TrainConfig.patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("TrainConfig.max_epochs must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class CapacityMeasurement:
    r: int
    K: int
    T: int
    c_offset: float
    r_adjusted: float
    p_chance: float
    protocol: str = "MAC"

    @classmethod
    def from_count(cls, r: int, K: int, T: int, protocol: str = "MAC") -> "CapacityMeasurement":
        if not 0 <= r <= K:
            raise ValueError(f"correct count {r} outside [0, {K}]")
        offset = K / T
        return cls(int(r), int(K), int(T), offset, r - offset, chance_probability(r, K, T), protocol)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunRecord:
    model: dict
    train: dict
    library: dict
    trace: list[int]
    losses: list[float]
    initial_r: int
    final: CapacityMeasurement
    epochs_run: int
    shatter_epoch: int | None = None
    failed: bool = False
    error: str = ""
    restart: int = 0
    wall_time: float = 0.0

    @property
    def shattered(self) -> bool:
        return self.shatter_epoch is not None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "schema": RECORD_SCHEMA,
            "model": self.model,
            "train": self.train,
            "library": self.library,
            "trace": self.trace,
            "losses": self.losses,
            "initial_r": self.initial_r,
            "final": self.final.to_dict(),
            "epochs_run": self.epochs_run,
            "shatter_epoch": self.shatter_epoch,
            "failed": self.failed,
            "error": self.error,
            "restart": self.restart,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        if d.get("schema") != RECORD_SCHEMA:
            raise ValueError(f"unsupported run record schema {d.get('schema')!r}")
        kw = {k: d[k] for k in ("model", "train", "library", "trace", "losses", "initial_r", "epochs_run",
                                "shatter_epoch", "failed", "error", "restart")}
        return cls(final=CapacityMeasurement(**d["final"]), wall_time=d.get("wall_time", 0.0), **kw)


def derive_seed(*key: int) -> int:
    """Stable 32-bit seed for a sub-run (restart, trial, ...)."""
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# measurement


Predictor = Callable[[np.ndarray], np.ndarray]


def predict_batch(params: ModelParams, prefixes: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = [np.argmax(forward(params, prefixes[i : i + chunk], last_only=True).data, axis=-1)
           for i in range(0, prefixes.shape[0], chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def count_correct(model: ModelParams | Predictor, lib: SequenceLibrary) -> int:
    if isinstance(model, ModelParams):
        pred = predict_batch(model, lib.prefixes)
    else:
        pred = np.asarray(model(lib.prefixes))
    return int(np.count_nonzero(pred == lib.targets))


def measure_capacity(model: ModelParams | Predictor, lib: SequenceLibrary, protocol: str = "MAC") -> CapacityMeasurement:
    """Capacity on ``lib``.

    ``model`` is either trained parameters or any callable mapping a
    (K, N-1) prefix array to K predicted token ids.
    """
    return CapacityMeasurement.from_count(count_correct(model, lib), lib.K, lib.T, protocol)


# ---------------------------------------------------------------------------
# training


def _loss(params: ModelParams, leaves: dict, seqs: np.ndarray, tcfg: TrainConfig, rng) -> nx.Tensor:
    if tcfg.full_sequence_loss:
        logits = forward(params, seqs[:, :-1], weights=leaves, rng=rng)
        return nx.cross_entropy(logits, seqs[:, 1:])
    logits = forward(params, seqs[:, :-1], weights=leaves, last_only=True, rng=rng)
    return nx.cross_entropy(logits, seqs[:, -1])


def train(params: ModelParams, lib: SequenceLibrary, tcfg: TrainConfig, protocol: str = "MAC") -> RunRecord:
    """Train ``params`` in place on ``lib`` with Adam.

    Capacity is evaluated after every epoch. Training stops at
    ``max_epochs``, after ``patience`` epochs without a new best, or (with
    ``stop_at_shatter``) once every sequence is memorized. On return the
    trainable tensors hold the best-capacity snapshot.
    """
    cfg = params.cfg
    if cfg.N < lib.N:
        raise ValueError(f"model context N={cfg.N} shorter than library sequences N={lib.N}")
    if cfg.T < lib.T:
        raise ValueError(f"model vocabulary T={cfg.T} smaller than library vocabulary T={lib.T}")
    t0 = time.perf_counter()
    opt = Adam(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    rng = np.random.Generator(np.random.Philox(derive_seed(tcfg.seed, 1))) if cfg.dropout > 0 else None
    names = list(params.trainable)

    initial = count_correct(params, lib)
    best_r = initial
    best = {k: params.tensors[k].copy() for k in names}
    trace: list[int] = []
    losses: list[float] = []
    stale = 0
    failed, error = False, ""
    shatter_epoch = None

    for epoch in range(tcfg.max_epochs):
        total, seen = 0.0, 0
        for idx in batches(lib, tcfg.batch_size, tcfg.seed, epoch):
            leaves = {k: nx.Tensor(params.tensors[k], requires_grad=True) for k in names}
            loss = _loss(params, leaves, lib.sequences[idx], tcfg, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                failed, error = True, f"non-finite loss at epoch {epoch + 1}"
                break
            grads = nx.grad(loss, [leaves[k] for k in names])
            opt.step(params.tensors, dict(zip(names, grads)))
            total += value * idx.size
            seen += idx.size
        if failed:
            log.warning("run diverged: %s", error)
            break
        r = count_correct(params, lib)
        trace.append(r)
        losses.append(total / max(seen, 1))
        if r > best_r:
            best_r, stale = r, 0
            best = {k: params.tensors[k].copy() for k in names}
        else:
            stale += 1
        if r == lib.K and shatter_epoch is None:
            shatter_epoch = epoch + 1
            if tcfg.stop_at_shatter:
                break
        if stale >= tcfg.patience:
            break

    for k in names:
        params.tensors[k][...] = best[k]
    return RunRecord(
        model=cfg.to_dict(),
        train=tcfg.to_dict(),
        library=lib.descriptor(),
        trace=trace,
        losses=losses,
        initial_r=initial,
        final=CapacityMeasurement.from_count(best_r, lib.K, lib.T, protocol),
        epochs_run=len(trace),
        shatter_epoch=shatter_epoch,
        failed=failed,
        error=error,
        wall_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# protocols


@dataclass
class MacResult:
    measurement: CapacityMeasurement
    runs: list[RunRecord]
    best_restart: int


def _restart_runs(mcfg: ModelConfig, tcfg: TrainConfig, lib: SequenceLibrary, protocol: str) -> list[RunRecord]:
    runs = []
    for i in range(tcfg.restarts):
        seed = derive_seed(tcfg.seed, i)
        rec = train(init_model(mcfg, seed), lib, dataclasses.replace(tcfg, seed=seed), protocol)
        rec.restart = i
        runs.append(rec)
    return runs


def best_of(runs: Sequence[RunRecord]) -> int:
    """Index of the run with the highest capacity; the earliest wins ties."""
    return max(range(len(runs)), key=lambda i: (runs[i].final.r, -i))


def run_mac(mcfg: ModelConfig, tcfg: TrainConfig, K_large: int = 16000, *, lib_seed: int = 0,
            lib: SequenceLibrary | None = None) -> MacResult:
    """Best-of-restarts capacity on one large library."""
    if lib is None:
        lib = generate_library(K_large, mcfg.N, mcfg.T, lib_seed)
    runs = _restart_runs(mcfg, tcfg, lib, "MAC")
    i = best_of(runs)
    return MacResult(runs[i].final, runs, i)


@dataclass
class MlsResult:
    K: int
    attempts: dict[int, bool] = field(default_factory=dict)
    runs: dict[int, list[RunRecord]] = field(default_factory=dict)


def run_mls(mcfg: ModelConfig, tcfg: TrainConfig, *, lib_seed: int = 0, K_max: int | None = None,
            shatters: Callable[[int], bool] | None = None) -> MlsResult:
    """Largest library size the model memorizes completely.

    Doubles K from 1 until a library is not shattered, then bisects the
    bracket. A size counts as shattered when some restart reaches r = K
    after at least one training epoch. ``shatters`` replaces the training
    run with a predicate (used for testing the search itself).
    """
    result = MlsResult(0)
    cap = mcfg.T ** (mcfg.N - 1)
    if K_max is not None:
        cap = min(cap, K_max)

    def ok(K: int) -> bool:
        if K in result.attempts:
            return result.attempts[K]
        if shatters is not None:
            success = bool(shatters(K))
        else:
            lib = generate_library(K, mcfg.N, mcfg.T, lib_seed)
            runs = _restart_runs(mcfg, tcfg, lib, "MLS")
            result.runs[K] = runs
            success = any(r.shattered for r in runs)
        result.attempts[K] = success
        return success

    lo, hi = 0, None
    K = 1
    while K <= cap:
        if not ok(K):
            hi = K
            break
        lo = K
        K *= 2
    if hi is None:
        if lo == cap or ok(cap):
            result.K = cap
            return result
        hi = cap
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    result.K = lo
    return result


@dataclass
class ShatterTrials:
    epochs: list[int | None]
    runs: list[RunRecord]
    fit: NegBinomFit | None

    @property
    def shattered(self) -> list[int]:
        return [e for e in self.epochs if e is not None]

    @property
    def censored(self) -> int:
        return sum(e is None for e in self.epochs)

    def histogram(self, bins: int | str = "auto") -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(np.asarray(self.shattered, dtype=float), bins=bins)


def epochs_to_shatter_trials(mcfg: ModelConfig, tcfg: TrainConfig, trials: int, *, K: int = 16,
                             lib_seed: int = 0) -> ShatterTrials:
    """Independent trials, each with its own library and initialization.

    Runs that never shatter within ``max_epochs`` are censored: kept as
    ``None`` in ``epochs`` and left out of the negative-binomial fit.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    tcfg = dataclasses.replace(tcfg, stop_at_shatter=True)
    runs = []
    for i in range(trials):
        lib = generate_library(K, mcfg.N, mcfg.T, derive_seed(lib_seed, i))
        seed = derive_seed(tcfg.seed, i)
        rec = train(init_model(mcfg, seed), lib, dataclasses.replace(tcfg, seed=seed), "MLS")
        rec.restart = i
        runs.append(rec)
    epochs = [r.shatter_epoch for r in runs]
    done = [e for e in epochs if e is not None]
    fit = fit_negative_binomial(done) if done else None
    return ShatterTrials(epochs, runs, fit)


@dataclass
class BatchSweepPoint:
    batch_size: int
    max_epochs: int
    result: MacResult


def batch_size_sweep(mcfg: ModelConfig, tcfg: TrainConfig, sizes: Sequence[int], *, K: int = 16000,
                     lib_seed: int = 0, normalize: str = "steps") -> list[BatchSweepPoint]:
    """One MAC measurement per batch size on a shared library.

    ``normalize="steps"`` gives every size the optimizer-step budget that
    ``tcfg.max_epochs`` epochs at ``tcfg.batch_size`` would use, rounded up
    to whole epochs. ``normalize="epochs"`` keeps ``max_epochs`` for all.
    """
    if not sizes:
        raise ValueError("sizes must be nonempty")
    if normalize not in ("steps", "epochs"):
        raise ValueError(f"normalize must be 'steps' or 'epochs', got {normalize!r}")
    lib = generate_library(K, mcfg.N, mcfg.T, lib_seed)
    budget = tcfg.max_epochs * math.ceil(K / tcfg.batch_size)
    points = []
    for size in sizes:
        epochs = tcfg.max_epochs
        if normalize == "steps":
            epochs = math.ceil(budget / math.ceil(K / size))
        cfg = dataclasses.replace(tcfg, batch_size=int(size), max_epochs=epochs)
        points.append(BatchSweepPoint(int(size), epochs, run_mac(mcfg, cfg, lib=lib)))
    return points
