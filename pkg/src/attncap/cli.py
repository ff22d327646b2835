"""Command-line entry point: ``attncap <command> ...``.

Exit codes: 0 success, 2 usage error, 3 invalid spec or input file,
4 runtime failure in one or more grid points, 5 insufficient coverage
for a fit.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from pathlib import Path

from . import __version__
from . import ecm
from .datagen import InfeasibleLibraryError, generate_library, write_library
from .model import ModelConfig, count_trainable_params, quadratic_form_param_count
from .runner import SpecError, dumps, load_spec, point_lines, read_records, run_spec

EXIT_OK, EXIT_USAGE, EXIT_SPEC, EXIT_RUNTIME, EXIT_COVERAGE = 0, 2, 3, 4, 5

FIGURES = {
    "capacity-vs-B": ["H", "N", "L", "B", "C_measured", "C_predicted"],
    "mac-vs-mls": ["H", "N", "L", "B", "protocol", "C_raw", "C_adjusted"],
    "epochs-to-shatter": ["H", "N", "L", "B", "trial", "epochs", "censored"],
    "batch-size": ["H", "N", "L", "B", "batch_size", "max_epochs", "C_measured"],
    "slopes": ["H", "N", "L", "slope", "slope_predicted", "B_used"],
    "size-capacity": ["L", "H", "N", "B", "params", "C_predicted"],
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"attncap: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# loading helpers


def _load_points(paths) -> tuple[list[dict], list[str]]:
    """Ok point lines from records files (or output directories) plus their spec hashes."""
    pts, hashes = [], []
    for path in paths:
        p = Path(path)
        if p.is_dir():
            p = p / "records.jsonl"
        if not p.exists():
            raise CliError(f"{path}: no such results file", EXIT_SPEC)
        for rec in point_lines(read_records(p)):
            if rec.get("status") == "ok":
                pts.append(rec)
                if rec["spec_hash"] not in hashes:
                    hashes.append(rec["spec_hash"])
    return pts, hashes


def _measurements(points: list[dict], adjusted: bool = False) -> list[ecm.Measurement]:
    out = []
    for rec in points:
        if rec["protocol"] != "MAC":
            continue
        m = rec["result"]["measurement"]
        pt = rec["point"]
        out.append(ecm.Measurement(pt["B"], pt["H"], pt["N"], pt["L"], float(m["r_adjusted"] if adjusted else m["r"]),
                                   rec["key"]))
    return out


def _params(args, L: int | None) -> ecm.EcmParams | None:
    if getattr(args, "params", None):
        try:
            return ecm.read_params(args.params)
        except (OSError, TypeError, ValueError) as exc:
            raise CliError(f"{args.params}: cannot read capacity parameters ({exc})", EXIT_SPEC) from exc
    level = getattr(args, "preset", None) or L
    if level is None:
        return None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return ecm.preset(level)
    except KeyError:
        if getattr(args, "preset", None):
            raise CliError(f"no preset for L={level}", EXIT_SPEC) from None
        return None


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    try:
        spec = load_spec(args.spec)
    except OSError as exc:
        raise CliError(f"{args.spec}: {exc.strerror}", EXIT_SPEC) from exc
    except SpecError as exc:
        raise CliError(f"{args.spec}: {exc}", EXIT_SPEC) from exc
    try:
        summary = run_spec(spec, args.output, args.workers)
    except SpecError as exc:
        raise CliError(str(exc), EXIT_SPEC) from exc
    print(f"{spec.protocol}: {len(summary.ran)} points run, {len(summary.skipped)} skipped, "
          f"{len(summary.failed)} failed -> {summary.output}")
    if summary.failed:
        _err("failed points: " + ", ".join(summary.failed))
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_fit(args) -> int:
    points, hashes = _load_points(args.results)
    rows = _measurements(points, args.adjusted)
    layers = sorted({m.L for m in rows})
    if args.layers is not None:
        rows = [m for m in rows if m.L == args.layers]
    elif len(layers) > 1:
        raise CliError(f"results mix layer counts {layers}; pick one with --layers", EXIT_COVERAGE)
    Hs, Ns = sorted({m.H for m in rows}), sorted({m.N for m in rows})
    problems = []
    if len(Hs) < 2:
        problems.append(f"need MAC results at >= 2 distinct H values (found {Hs})")
    if len(Ns) < 3:
        problems.append(f"need MAC results at >= 3 distinct N values (found {Ns})")
    if problems:
        raise CliError("insufficient coverage: " + "; ".join(problems), EXIT_COVERAGE)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            report = ecm.fit_measurements(rows, starts=args.starts, seed=args.seed, weighting=args.weighting)
            if args.logo:
                logo = ecm.leave_one_group_out(rows, starts=args.starts, seed=args.seed, weighting=args.weighting)
                report.logo_mape_ecm, report.logo_mape_poly5 = logo.mape_ecm, logo.mape_poly5
        report.warnings.extend(str(w.message) for w in caught)
    except ecm.InsufficientDataError as exc:
        raise CliError(f"insufficient coverage: {exc}", EXIT_COVERAGE) from exc
    except ecm.FitError as exc:
        raise CliError(f"fit failed: {exc}", EXIT_RUNTIME) from exc

    ecm.write_params(args.params_out, report.params)
    doc = {"toolkit": "attncap", "version": __version__, "spec_hashes": hashes, "n_measurements": len(rows),
           "C_column": "r_adjusted" if args.adjusted else "r", **report.to_dict()}
    Path(args.report_out).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    p = report.params
    print(f"ECM (L={p.layers}, {report.n_params_ecm} params): a={p.a:.6g} b={p.b:.6g} c={p.c:.6g} d={p.d:.6g} "
          f"e={p.e:.6g} alpha={p.alpha:.6g} beta={p.beta:.6g}")
    print(f"MAPE: ECM {report.mape_ecm:.4f}  poly5 ({report.n_params_poly5} params) {report.mape_poly5}")
    if args.logo:
        print(f"LOGO MAPE: ECM {report.logo_mape_ecm:.4f}  poly5 {report.logo_mape_poly5:.4f}")
    for w in report.warnings:
        _err(f"warning: {w}")
    print(f"wrote {args.params_out} and {args.report_out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    p = _params(args, args.L)
    if p is None:
        raise CliError(f"no preset for L={args.L}; pass --params", EXIT_SPEC)
    if p.layers != args.L:
        raise CliError(f"capacity parameters are for L={p.layers}, requested L={args.L}", EXIT_SPEC)
    if p.layers == 2 and not args.params:
        _err("warning: the L=2 preset has an unstated valid domain and a large negative offset")
    if not p.in_domain(args.H, args.N):
        _err(f"warning: (H={args.H}, N={args.N}) is outside the fitted domain H in {p.H_range}, N in {p.N_range}")
    try:
        cap = ecm.ecm_capacity(args.B, args.H, args.N, p)
    except ecm.PoleError as exc:
        raise CliError(str(exc), EXIT_RUNTIME) from exc
    cfg = ModelConfig(T=128, N=args.N, B=args.B, H=args.H, L=args.L, d_h=args.d_h, ffn_mult=args.ffn_mult,
                      freeze_ffn=args.freeze_ffn, omit_wv=args.omit_wv)
    n = count_trainable_params(cfg)
    out = {"B": args.B, "H": args.H, "N": args.N, "L": args.L, "capacity": float(cap.capacity), "branch": cap.branch,
           "linear": float(cap.linear), "ceiling": float(cap.ceiling), "trainable_params": n,
           "mpp": float(cap.capacity) / n, "params_source": p.provenance}
    if args.json:
        print(dumps(out))
    else:
        for k, v in out.items():
            print(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")
    return EXIT_OK


def _export_rows(figure: str, points: list[dict], args) -> list[list]:
    rows: list[list] = []
    if figure == "capacity-vs-B":
        for m in _measurements(points, args.adjusted):
            p = _params(args, m.L)
            pred = "" if p is None or p.layers != m.L else float(ecm.ecm_capacity(m.B, m.H, m.N, p).capacity)
            rows.append([m.H, m.N, m.L, m.B, m.C, pred])
    elif figure == "mac-vs-mls":
        for rec in points:
            pt, res = rec["point"], rec["result"]
            if rec["protocol"] == "MAC":
                m = res["measurement"]
                rows.append([pt["H"], pt["N"], pt["L"], pt["B"], "MAC", m["r"], m["r_adjusted"]])
            elif rec["protocol"] == "MLS":
                rows.append([pt["H"], pt["N"], pt["L"], pt["B"], "MLS", res["K"], res["K"]])
    elif figure == "epochs-to-shatter":
        for rec in points:
            if rec["protocol"] == "shatter-trials":
                pt = rec["point"]
                for i, e in enumerate(rec["result"]["epochs"]):
                    rows.append([pt["H"], pt["N"], pt["L"], pt["B"], i, "" if e is None else e, int(e is None)])
    elif figure == "batch-size":
        for rec in points:
            if rec["protocol"] == "batch-sweep":
                pt = rec["point"]
                for q in rec["result"]["points"]:
                    rows.append([pt["H"], pt["N"], pt["L"], pt["B"], q["batch_size"], q["max_epochs"],
                                 q["measurement"]["r"]])
    elif figure == "slopes":
        ms = _measurements(points, args.adjusted)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            samples = ecm.extract_slopes(ms)
        for s in samples:
            p = _params(args, s.L)
            pred = "" if p is None or p.layers != s.L else float(ecm.slope_fn(s.N, s.H, p))
            rows.append([s.H, s.N, s.L, s.slope, pred, s.B])
    elif figure == "size-capacity":
        p = _params(args, args.L)
        if p is None:
            raise CliError(f"no preset for L={args.L}; pass --params", EXIT_SPEC)
        for N in args.N:
            for c in ecm.size_capacity_curve(args.L, args.H, N, p):
                rows.append([args.L, c.H, N, c.B, c.params, float(c.capacity)])
    rows.sort(key=lambda r: tuple((0, v) if isinstance(v, (int, float)) else (1, str(v)) for v in r))
    return rows


def cmd_export(args) -> int:
    points, hashes = _load_points(args.results)
    rows = _export_rows(args.figure, points, args)
    buf = io.StringIO()
    buf.write(f"# attncap {__version__} figure={args.figure} spec_hashes={','.join(hashes) or '-'}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIGURES[args.figure])
    w.writerows([repr(v) if isinstance(v, float) else v for v in r] for r in rows)
    if args.output:
        Path(args.output).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_gen(args) -> int:
    try:
        lib = generate_library(args.K, args.N, args.T, args.seed)
    except (InfeasibleLibraryError, ValueError) as exc:
        raise CliError(str(exc), EXIT_SPEC) from exc
    write_library(args.output, lib)
    print(f"wrote {args.output}: K={lib.K} N={lib.N} T={lib.T} seed={lib.seed}")
    return EXIT_OK


def cmd_count_params(args) -> int:
    cfg = ModelConfig(T=args.T, N=2, B=args.B, H=args.H, L=args.L, d_h=args.d_h, ffn_mult=args.ffn_mult,
                      freeze_ffn=args.freeze_ffn, omit_wv=args.omit_wv)
    print(f"trainable: {count_trainable_params(cfg)}")
    print(f"query-key (quadratic-form view): {quadratic_form_param_count(cfg)}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _arch_args(p: argparse.ArgumentParser, need_N: bool) -> None:
    p.add_argument("--B", type=int, required=True, help="embedding dimension")
    p.add_argument("--H", type=int, default=1, help="attention heads")
    p.add_argument("--L", type=int, default=1, help="layers")
    if need_N:
        p.add_argument("--N", type=int, required=True, help="sequence length")
    p.add_argument("--d-h", dest="d_h", type=int, default=128)
    p.add_argument("--ffn-mult", type=int, default=4)
    p.add_argument("--freeze-ffn", action="store_true")
    p.add_argument("--omit-wv", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="attncap", description="Memorization capacity experiments for small transformers.")
    ap.add_argument("--version", action="version", version=f"attncap {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment spec over its grid")
    p.add_argument("spec")
    p.add_argument("-o", "--output", help="output directory (overrides the spec file value; relative paths use $ATTNCAP_OUTPUT)")
    p.add_argument("-j", "--workers", type=int, help="worker processes (default: spec value, else 1)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fit", help="fit capacity-model parameters to MAC results")
    p.add_argument("results", nargs="+", help="records.jsonl files or output directories")
    p.add_argument("--params-out", default="ecm_params.yaml")
    p.add_argument("--report-out", default="fit_report.json")
    p.add_argument("--layers", type=int)
    p.add_argument("--starts", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weighting", choices=["absolute", "relative"], default="absolute")
    p.add_argument("--adjusted", action="store_true", help="fit chance-adjusted counts instead of raw r")
    p.add_argument("--logo", action="store_true", help="also report leave-one-group-out MAPE")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predicted capacity for one architecture")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--params", help="YAML file written by 'fit'")
    src.add_argument("--preset", type=int, help="built-in parameter set for this layer count")
    _arch_args(p, need_N=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export", help="write figure data as CSV")
    p.add_argument("figure", choices=sorted(FIGURES))
    p.add_argument("results", nargs="*", help="records.jsonl files or output directories")
    p.add_argument("-o", "--output")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--params")
    src.add_argument("--preset", type=int)
    p.add_argument("--adjusted", action="store_true")
    p.add_argument("--L", type=int, default=1, help="size-capacity: layer count")
    p.add_argument("--H", type=int, nargs="+", default=[1, 2, 4], help="size-capacity: head counts")
    p.add_argument("--N", type=int, nargs="+", default=[64], help="size-capacity: sequence lengths")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gen", help="write a sequence library file")
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("count-params", help="trainable parameter count")
    _arch_args(p, need_N=False)
    p.add_argument("--T", type=int, default=128)
    p.set_defaults(func=cmd_count_params)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code
    except ValueError as exc:
        _err(str(exc))
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())
