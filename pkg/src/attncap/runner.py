"""Experiment specs and resumable grid execution.

A spec is one YAML document::

    protocol: MAC            # MAC | MLS | shatter-trials | batch-sweep
    grid: {B: [16, 32], H: [1, 2], N: [16], L: [1]}
    model: {d_h: 16, freeze_ffn: false, precision: float64}
    train: {max_epochs: 200, patience: 20, restarts: 3, seed: 0}
    library: {K: 2048, T: 128, seed: 0}
    trials: 20               # shatter-trials only
    batch_sizes: [16, 512]   # batch-sweep only
    normalize: steps         # batch-sweep only
    K_max: 4096              # MLS only
    output: results/mac      # optional; relative paths resolve under $ATTNCAP_OUTPUT
    workers: 1

``run_spec`` writes into the output directory:

* ``records.jsonl``: a ``run`` line per training run and a ``point`` line
  per grid point, in grid order, canonical JSON.
* ``manifest.json``: toolkit version, spec hash, per-point status.
* ``timings.jsonl``: wall-clock seconds per point (not reproducible).

Rerunning skips grid points that already have an ``ok`` point line.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from . import __version__
from .harness import TrainConfig, batch_size_sweep, epochs_to_shatter_trials, run_mac, run_mls
from .model import ModelConfig

POINT_SCHEMA = "attncap.point/1"
PROTOCOLS = ("MAC", "MLS", "shatter-trials", "batch-sweep")
OUTPUT_ENV = "ATTNCAP_OUTPUT"

_MODEL_KEYS = {"d_h": int, "ffn_mult": int, "freeze_ffn": bool, "omit_wv": bool, "dropout": float, "precision": str}
_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_LIBRARY_KEYS = {"K": int, "T": int, "seed": int}
_TOP_KEYS = {"protocol", "grid", "model", "train", "library", "trials", "batch_sizes", "normalize", "K_max",
             "output", "workers"}


class SpecError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class ExperimentSpec:
    protocol: str
    grid: dict[str, list[int]]
    model: dict[str, Any]
    train: TrainConfig
    library: dict[str, int]
    trials: int = 20
    batch_sizes: list[int] = dataclasses.field(default_factory=lambda: [16, 64, 256, 512])
    normalize: str = "steps"
    K_max: int | None = None
    output: str | None = None
    workers: int = 1

    def canonical(self) -> dict:
        """The fields that determine results (output location and worker count excluded)."""
        d = {
            "protocol": self.protocol,
            "grid": self.grid,
            "model": self.model,
            "train": self.train.to_dict(),
            "library": self.library,
        }
        if self.protocol == "shatter-trials":
            d["trials"] = self.trials
        if self.protocol == "batch-sweep":
            d["batch_sizes"] = self.batch_sizes
            d["normalize"] = self.normalize
        if self.protocol == "MLS":
            d["K_max"] = self.K_max
        return d

    @property
    def hash(self) -> str:
        return hashlib.sha256(dumps(self.canonical()).encode()).hexdigest()[:16]

    def points(self) -> list[dict[str, int]]:
        g = self.grid
        return [dict(zip("BHNL", combo)) for combo in itertools.product(g["B"], g["H"], g["N"], g["L"])]

    def model_config(self, point: dict[str, int]) -> ModelConfig:
        return ModelConfig(T=self.library["T"], **point, **self.model)


def point_key(point: dict[str, int]) -> str:
    return "B{B}-H{H}-N{N}-L{L}".format(**point)


# ---------------------------------------------------------------------------
# parsing


def _line_index(node, path=(), out=None) -> dict[tuple, int]:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            out[path + (k.value,)] = k.start_mark.line + 1
            _line_index(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (i,), out)
    return out


def _check_type(value, typ, path, lines):
    field = ".".join(str(p) for p in path)
    if typ in (int, "int") and not (isinstance(value, int) and not isinstance(value, bool)):
        raise SpecError(f"expected an integer, got {value!r}", lines.get(path), field)
    if typ in (float, "float") and not (isinstance(value, (int, float)) and not isinstance(value, bool)):
        raise SpecError(f"expected a number, got {value!r}", lines.get(path), field)
    if typ in (bool, "bool") and not isinstance(value, bool):
        raise SpecError(f"expected true or false, got {value!r}", lines.get(path), field)
    if typ in (str, "str") and not isinstance(value, str):
        raise SpecError(f"expected a string, got {value!r}", lines.get(path), field)
    return float(value) if typ in (float, "float") else value


def _section(doc, name, schema, lines, required=()) -> dict:
    raw = doc.get(name, {}) or {}
    if not isinstance(raw, dict):
        raise SpecError("expected a mapping", lines.get((name,)), name)
    out = {}
    for k, v in raw.items():
        if k not in schema:
            raise SpecError(f"unknown key (allowed: {', '.join(sorted(schema))})", lines.get((name, k)), f"{name}.{k}")
        out[k] = _check_type(v, schema[k], (name, k), lines)
    for k in required:
        if k not in out:
            raise SpecError("required key missing", lines.get((name,)), f"{name}.{k}")
    return out


def _int_list(doc, path, lines, allow_missing=False) -> list[int] | None:
    node = doc
    for p in path:
        node = node.get(p) if isinstance(node, dict) else None
    field = ".".join(path)
    if node is None:
        if allow_missing:
            return None
        raise SpecError("required key missing", lines.get(path[:-1]), field)
    values = node if isinstance(node, list) else [node]
    if not values:
        raise SpecError("list must be nonempty", lines.get(path), field)
    for i, v in enumerate(values):
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise SpecError(f"expected positive integers, got {v!r}", lines.get(path + (i,), lines.get(path)), field)
    return list(values)


def parse_spec(text: str) -> ExperimentSpec:
    try:
        root = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SpecError(f"invalid YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None) from exc
    if not isinstance(doc, dict):
        raise SpecError("spec must be a mapping")
    lines = _line_index(root)
    for k in doc:
        if k not in _TOP_KEYS:
            raise SpecError(f"unknown key (allowed: {', '.join(sorted(_TOP_KEYS))})", lines.get((k,)), k)
    protocol = doc.get("protocol")
    if protocol not in PROTOCOLS:
        raise SpecError(f"must be one of {', '.join(PROTOCOLS)}", lines.get(("protocol",)), "protocol")
    if not isinstance(doc.get("grid"), dict):
        raise SpecError("required mapping with B, H, N, L lists", lines.get(("grid",)), "grid")
    for k in doc["grid"]:
        if k not in "BHNL" or len(k) != 1:
            raise SpecError("unknown grid axis (allowed: B, H, N, L)", lines.get(("grid", k)), f"grid.{k}")
    grid = {axis: _int_list(doc, ("grid", axis), lines) for axis in "BHNL"}
    model = _section(doc, "model", _MODEL_KEYS, lines)
    library = _section(doc, "library", _LIBRARY_KEYS, lines, required=("T",))
    library.setdefault("seed", 0)
    train_kw = _section(doc, "train", _TRAIN_KEYS, lines)
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise SpecError(str(exc), lines.get(("train",)), "train") from exc
    spec = ExperimentSpec(protocol, grid, model, train, library)
    for key, typ in (("trials", int), ("K_max", int), ("workers", int), ("normalize", str), ("output", str)):
        if key in doc and doc[key] is not None:
            setattr(spec, key, _check_type(doc[key], typ, (key,), lines))
    if "batch_sizes" in doc:
        spec.batch_sizes = _int_list(doc, ("batch_sizes",), lines)
    if protocol in ("MAC", "shatter-trials", "batch-sweep") and "K" not in library:
        raise SpecError(f"protocol {protocol} needs library.K", lines.get(("library",)), "library.K")
    if spec.normalize not in ("steps", "epochs"):
        raise SpecError("must be 'steps' or 'epochs'", lines.get(("normalize",)), "normalize")
    if spec.workers < 1 or spec.trials < 1:
        raise SpecError("workers and trials must be >= 1", lines.get(("workers",)) or lines.get(("trials",)))
    for point in spec.points():
        try:
            spec.model_config(point)
        except (TypeError, ValueError) as exc:
            raise SpecError(f"grid point {point_key(point)}: {exc}", lines.get(("model",)) or lines.get(("grid",)),
                            "model") from exc
    return spec


def load_spec(path: str | Path) -> ExperimentSpec:
    return parse_spec(Path(path).read_text())


# ---------------------------------------------------------------------------
# execution


def _run_point(spec: ExperimentSpec, point: dict[str, int]) -> tuple[dict, list[dict], float]:
    """Execute one grid point; returns (point line, run lines, seconds)."""
    t0 = time.perf_counter()
    key = point_key(point)
    base = {"spec_hash": spec.hash, "version": __version__, "key": key}
    runs: list[dict] = []
    status, error, result = "ok", "", {}
    try:
        mcfg = spec.model_config(point)
        lib = spec.library
        if spec.protocol == "MAC":
            res = run_mac(mcfg, spec.train, lib["K"], lib_seed=lib["seed"])
            result = {"measurement": res.measurement.to_dict(), "best_restart": res.best_restart}
            runs = [{"context": {"restart": r.restart}, "run": r.to_dict()} for r in res.runs]
            all_runs = res.runs
        elif spec.protocol == "MLS":
            res = run_mls(mcfg, spec.train, lib_seed=lib["seed"], K_max=spec.K_max)
            result = {"K": res.K, "attempts": [[k, ok] for k, ok in res.attempts.items()]}
            runs = [{"context": {"K": k, "restart": r.restart}, "run": r.to_dict()}
                    for k, rs in res.runs.items() for r in rs]
            all_runs = [r for rs in res.runs.values() for r in rs]
        elif spec.protocol == "shatter-trials":
            res = epochs_to_shatter_trials(mcfg, spec.train, spec.trials, K=lib["K"], lib_seed=lib["seed"])
            result = {"epochs": res.epochs, "censored": res.censored,
                      "fit": res.fit.to_dict() if res.fit is not None else None}
            runs = [{"context": {"trial": i}, "run": r.to_dict()} for i, r in enumerate(res.runs)]
            all_runs = res.runs
        else:
            pts = batch_size_sweep(mcfg, spec.train, spec.batch_sizes, K=lib["K"], lib_seed=lib["seed"],
                                   normalize=spec.normalize)
            result = {"points": [{"batch_size": p.batch_size, "max_epochs": p.max_epochs,
                                  "measurement": p.result.measurement.to_dict()} for p in pts]}
            runs = [{"context": {"batch_size": p.batch_size, "restart": r.restart}, "run": r.to_dict()}
                    for p in pts for r in p.result.runs]
            all_runs = [r for p in pts for r in p.result.runs]
        if all_runs and all(r.failed for r in all_runs):
            status, error = "failed", "; ".join(sorted({r.error for r in all_runs}))
    except Exception as exc:  # noqa: BLE001 - recorded per point
        status, error = "failed", f"{type(exc).__name__}: {exc}"
    line = {"type": "point", "schema": POINT_SCHEMA, **base, "protocol": spec.protocol, "point": point,
            "status": status, "error": error, "result": result}
    run_lines = [{"type": "run", **base, **r} for r in runs]
    return line, run_lines, time.perf_counter() - t0


def read_records(path: str | Path) -> list[dict]:
    """Parse a records file, ignoring a truncated trailing line."""
    out = []
    p = Path(path)
    if not p.exists():
        return out
    for raw in p.read_text().splitlines():
        if not raw.strip():
            continue
        try:
            out.append(json.loads(raw))
        except json.JSONDecodeError:
            break
    return out


def point_lines(records: list[dict]) -> list[dict]:
    """Latest point line per key, in first-seen order."""
    latest: dict[str, dict] = {}
    for rec in records:
        if rec.get("type") == "point":
            latest[rec["key"]] = rec
    return list(latest.values())


def resolve_output(spec: ExperimentSpec, override: str | Path | None = None) -> Path:
    out = Path(override or spec.output or "results")
    if not out.is_absolute() and os.environ.get(OUTPUT_ENV):
        out = Path(os.environ[OUTPUT_ENV]) / out
    return out


@dataclass
class RunSummary:
    output: Path
    ran: list[str]
    skipped: list[str]
    failed: list[str]

    @property
    def ok(self) -> bool:
        return not self.failed


def run_spec(spec: ExperimentSpec, output: str | Path | None = None, workers: int | None = None) -> RunSummary:
    out = resolve_output(spec, output)
    out.mkdir(parents=True, exist_ok=True)
    rec_path, man_path = out / "records.jsonl", out / "manifest.json"
    if man_path.exists():
        old = json.loads(man_path.read_text())
        if old.get("spec_hash") != spec.hash:
            raise SpecError(f"{out} holds results of a different spec (hash {old.get('spec_hash')}); "
                            "choose another output directory")

    existing = [r for r in read_records(rec_path) if r.get("spec_hash") == spec.hash]
    done = {r["key"] for r in point_lines(existing) if r["status"] == "ok"}
    kept = [r for r in existing if r["key"] in done]
    rec_path.write_text("".join(dumps(r) + "\n" for r in kept))

    points = spec.points()
    todo = [p for p in points if point_key(p) not in done]
    summary = RunSummary(out, [], [point_key(p) for p in points if point_key(p) in done], [])
    n_workers = workers or spec.workers
    if n_workers > 1 and len(todo) > 1:
        pool = ProcessPoolExecutor(max_workers=n_workers)
        results = pool.map(_run_point, itertools.repeat(spec), todo)
    else:
        pool = None
        results = (_run_point(spec, p) for p in todo)
    try:
        with rec_path.open("a") as rec_f, (out / "timings.jsonl").open("a") as tim_f:
            for point, (line, run_lines, seconds) in zip(todo, results):
                rec_f.write("".join(dumps(r) + "\n" for r in run_lines) + dumps(line) + "\n")
                rec_f.flush()
                tim_f.write(dumps({"key": line["key"], "seconds": round(seconds, 3)}) + "\n")
                summary.ran.append(line["key"])
                if line["status"] != "ok":
                    summary.failed.append(line["key"])
    finally:
        if pool is not None:
            pool.shutdown()

    status = {r["key"]: r["status"] for r in point_lines(read_records(rec_path))}
    manifest = {
        "toolkit": "attncap",
        "version": __version__,
        "spec_hash": spec.hash,
        "spec": spec.canonical(),
        "points": [{"key": point_key(p), "status": status.get(point_key(p), "missing")} for p in points],
        "status": "ok" if all(status.get(point_key(p)) == "ok" for p in points) else "failed",
    }
    man_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return summary
