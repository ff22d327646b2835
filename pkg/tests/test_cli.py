import json

import pytest
import yaml
from ecm_fixtures import synthetic_rows

from attncap import cli, ecm
from attncap.runner import SpecError, dumps, parse_spec, point_key, read_records, run_spec

MAC_SPEC = """\
protocol: MAC
grid: {B: [8, 16], H: [1, 2], N: [4], L: [1]}
model: {d_h: 4, ffn_mult: 1}
train: {max_epochs: 3, patience: 3, restarts: 2, batch_size: 32, lr: 0.01}
library: {K: 64, T: 16, seed: 0}
"""


def write(tmp_path, text, name="spec.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def test_spec_parsing_and_hash():
    spec = parse_spec(MAC_SPEC)
    assert spec.protocol == "MAC" and len(spec.points()) == 4
    assert spec.model_config(spec.points()[0]).T == 16
    moved = parse_spec(MAC_SPEC + "output: elsewhere\nworkers: 2\n")
    assert moved.hash == spec.hash
    assert parse_spec(MAC_SPEC.replace("seed: 0", "seed: 1")).hash != spec.hash


@pytest.mark.parametrize("text,line,field", [
    (MAC_SPEC.replace("protocol: MAC", "protocol: MAX"), 1, "protocol"),
    (MAC_SPEC.replace("max_epochs: 3", "max_epoch: 3"), 4, "train.max_epoch"),
    (MAC_SPEC.replace("B: [8, 16]", "B: [8, -16]"), 2, "grid.B"),
    (MAC_SPEC.replace("d_h: 4", "d_h: four"), 3, "model.d_h"),
    (MAC_SPEC.replace("K: 64, ", ""), 5, "library.K"),
    (MAC_SPEC + "colour: red\n", 6, "colour"),
])
def test_spec_errors_name_line_and_field(text, line, field):
    with pytest.raises(SpecError) as info:
        parse_spec(text)
    assert info.value.line == line and info.value.field == field
    assert f"line {line}" in str(info.value)


def test_spec_invalid_yaml_and_bad_model():
    with pytest.raises(SpecError, match="line"):
        parse_spec("protocol: [MAC\n")
    with pytest.raises(SpecError, match="B"):
        parse_spec(MAC_SPEC.replace("B: [8, 16]", "B: [1]"))


def test_run_writes_records_and_manifest(tmp_path):
    spec = write(tmp_path, MAC_SPEC)
    out = tmp_path / "out"
    assert run_cli("run", spec, "-o", out) == 0
    recs = read_records(out / "records.jsonl")
    points = [r for r in recs if r["type"] == "point"]
    assert [p["key"] for p in points] == ["B8-H1-N4-L1", "B8-H2-N4-L1", "B16-H1-N4-L1", "B16-H2-N4-L1"]
    assert sum(r["type"] == "run" for r in recs) == 8
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["version"] == "0.1.0"
    assert all(r["spec_hash"] == manifest["spec_hash"] for r in recs)
    for line in (out / "records.jsonl").read_text().splitlines():
        assert line == dumps(json.loads(line))
    assert len((out / "timings.jsonl").read_text().splitlines()) == 4


def test_rerun_and_resume_are_byte_identical(tmp_path):
    spec = write(tmp_path, MAC_SPEC)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("run", spec, "-o", a) == 0
    full = (a / "records.jsonl").read_bytes()
    manifest = (a / "manifest.json").read_bytes()
    assert run_cli("run", spec, "-o", a) == 0
    assert (a / "records.jsonl").read_bytes() == full
    assert (a / "manifest.json").read_bytes() == manifest
    # simulate an interruption after the second point, mid-way through the third
    assert run_cli("run", spec, "-o", b) == 0
    lines = full.decode().splitlines(keepends=True)
    cut = [i for i, ln in enumerate(lines) if '"type":"point"' in ln][1] + 1
    (b / "records.jsonl").write_text("".join(lines[:cut + 1]) + lines[cut + 1][:20])
    assert run_cli("run", spec, "-o", b) == 0
    assert (b / "records.jsonl").read_bytes() == full
    assert (b / "manifest.json").read_bytes() == manifest


def test_output_env_and_foreign_directory(tmp_path, monkeypatch):
    monkeypatch.setenv("ATTNCAP_OUTPUT", str(tmp_path / "root"))
    spec = parse_spec(MAC_SPEC.replace("max_epochs: 3", "max_epochs: 0") + "output: rel\n")
    s = run_spec(spec)
    assert s.output == tmp_path / "root" / "rel" and (s.output / "manifest.json").exists()
    other = parse_spec(MAC_SPEC.replace("max_epochs: 3", "max_epochs: 1") + "output: rel\n")
    with pytest.raises(SpecError, match="different spec"):
        run_spec(other)


def test_workers_match_inline(tmp_path):
    spec = parse_spec(MAC_SPEC)
    run_spec(spec, tmp_path / "one", workers=1)
    run_spec(spec, tmp_path / "two", workers=2)
    assert (tmp_path / "one" / "records.jsonl").read_bytes() == (tmp_path / "two" / "records.jsonl").read_bytes()


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["run"])
    assert info.value.code == 2
    bad = write(tmp_path, MAC_SPEC.replace("protocol: MAC", "protocol: nope"), "bad.yaml")
    assert run_cli("run", bad) == 3
    assert "line 1" in capsys.readouterr().err
    assert run_cli("run", tmp_path / "missing.yaml") == 3
    # a point that cannot be run (library larger than the prefix space) fails at runtime
    infeasible = write(tmp_path, MAC_SPEC.replace("K: 64", "K: 5000"), "inf.yaml")
    assert run_cli("run", infeasible, "-o", tmp_path / "inf") == 4
    recs = read_records(tmp_path / "inf" / "records.jsonl")
    assert all(r["status"] == "failed" and "Infeasible" in r["error"] for r in recs)


def test_other_protocols_run(tmp_path):
    base = MAC_SPEC.replace("B: [8, 16], H: [1, 2]", "B: [8], H: [1]")
    mls = write(tmp_path, base.replace("protocol: MAC", "protocol: MLS") + "K_max: 4\n", "mls.yaml")
    assert run_cli("run", mls, "-o", tmp_path / "mls") == 0
    st = write(tmp_path, base.replace("protocol: MAC", "protocol: shatter-trials").replace("K: 64", "K: 4")
               + "trials: 3\n", "st.yaml")
    assert run_cli("run", st, "-o", tmp_path / "st") == 0
    bs = write(tmp_path, base.replace("protocol: MAC", "protocol: batch-sweep") + "batch_sizes: [16, 64]\n", "bs.yaml")
    assert run_cli("run", bs, "-o", tmp_path / "bs") == 0
    (pt,) = [r for r in read_records(tmp_path / "st" / "records.jsonl") if r["type"] == "point"]
    assert len(pt["result"]["epochs"]) == 3
    for fig, src, n in (("mac-vs-mls", "mls", 1), ("epochs-to-shatter", "st", 3), ("batch-size", "bs", 2)):
        out = tmp_path / f"{fig}.csv"
        assert run_cli("export", fig, tmp_path / src, "-o", out) == 0
        assert len(out.read_text().splitlines()) == 2 + n


def fake_results(tmp_path, rows, name="fake"):
    """Records file holding MAC point lines for synthetic measurements."""
    out = tmp_path / name
    out.mkdir()
    lines = []
    for m in rows:
        point = {"B": m.B, "H": m.H, "N": m.N, "L": m.L}
        meas = {"r": m.C, "r_adjusted": m.C, "K": 0, "T": 0, "c_offset": 0.0, "p_chance": 0.0, "protocol": "MAC"}
        lines.append(dumps({"type": "point", "key": point_key(point), "spec_hash": "synthetic", "version": "0.1.0",
                            "protocol": "MAC", "point": point, "status": "ok", "error": "",
                            "result": {"measurement": meas, "best_restart": 0}}))
    (out / "records.jsonl").write_text("\n".join(lines) + "\n")
    return out


def test_fit_predict_export_pipeline(tmp_path, capsys):
    res = fake_results(tmp_path, synthetic_rows(noise=0.01))
    params, report = tmp_path / "p.yaml", tmp_path / "r.json"
    assert run_cli("fit", res, "--params-out", params, "--report-out", report, "--starts", 8) == 0
    doc = json.loads(report.read_text())
    assert doc["n_params_ecm"] == 7 and doc["n_params_poly5"] == 56 and doc["mape_ecm"] < 0.05
    assert doc["spec_hashes"] == ["synthetic"]
    p = ecm.read_params(params)
    assert p.layers == 1 and p.provenance.startswith("fit:")
    capsys.readouterr()
    assert run_cli("predict", "--params", params, "--B", 128, "--H", 1, "--N", 32, "--json") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["capacity"] == pytest.approx(358.5, rel=0.05) and out["branch"] == "linear"
    assert out["mpp"] == pytest.approx(out["capacity"] / out["trainable_params"])
    csv_path = tmp_path / "cap.csv"
    assert run_cli("export", "capacity-vs-B", res, "--params", params, "-o", csv_path) == 0
    text = csv_path.read_text().splitlines()
    assert text[1] == "H,N,L,B,C_measured,C_predicted" and len(text) == 2 + 176
    assert run_cli("export", "capacity-vs-B", res, "--params", params, "-o", tmp_path / "again.csv") == 0
    assert (tmp_path / "again.csv").read_bytes() == csv_path.read_bytes()
    assert run_cli("export", "slopes", res, "-o", tmp_path / "s.csv") == 0
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 2 + 16


def test_fit_coverage_error(tmp_path, capsys):
    rows = [m for m in synthetic_rows() if m.H == 1 and m.N in (16, 32)]
    res = fake_results(tmp_path, rows)
    assert run_cli("fit", res, "--params-out", tmp_path / "p.yaml", "--report-out", tmp_path / "r.json") == 5
    err = capsys.readouterr().err
    assert "H values (found [1])" in err and "N values (found [16, 32])" in err


def test_predict_presets_and_domain(capsys):
    assert run_cli("predict", "--preset", 1, "--B", 8192, "--H", 1, "--N", 32) == 0
    out = capsys.readouterr()
    assert "branch: ceiling" in out.out and "capacity: 12503.7" in out.out
    assert run_cli("predict", "--preset", 1, "--B", 64, "--H", 6, "--N", 32) == 0
    assert "outside the fitted domain" in capsys.readouterr().err
    assert run_cli("predict", "--preset", 1, "--B", 64, "--H", 1, "--N", 32, "--L", 2) == 3
    assert run_cli("predict", "--preset", 2, "--B", 64, "--H", 1, "--N", 32, "--L", 2) == 0
    assert "L=2 preset" in capsys.readouterr().err


def test_export_empty_and_size_capacity(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "records.jsonl").write_text("")
    assert run_cli("export", "capacity-vs-B", empty) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("# attncap") and lines[1:] == ["H,N,L,B,C_measured,C_predicted"]
    assert run_cli("export", "size-capacity", "--H", 2, 4, "--N", 64, "-o", tmp_path / "sc.csv") == 0
    rows = (tmp_path / "sc.csv").read_text().splitlines()[2:]
    assert len(rows) == 2 * len(ecm.DEFAULT_B_GRID)
    assert run_cli("export", "slopes", tmp_path / "nothing") == 3


def test_gen_and_count_params(tmp_path, capsys):
    from attncap.datagen import generate_library, read_library

    path = tmp_path / "lib.bin"
    assert run_cli("gen", "--K", 50, "--N", 6, "--T", 9, "--seed", 4, "-o", path) == 0
    assert read_library(path) == generate_library(50, 6, 9, 4)
    assert run_cli("gen", "--K", 50, "--N", 2, "--T", 9, "-o", path) == 3
    capsys.readouterr()
    assert run_cli("count-params", "--B", 16, "--d-h", 16, "--freeze-ffn") == 0
    out = capsys.readouterr().out
    assert "trainable: 1024" in out and "quadratic-form view): 512" in out


def test_params_yaml_is_readable(tmp_path):
    path = tmp_path / "p1.yaml"
    ecm.write_params(path, ecm.PRESETS[1])
    d = yaml.safe_load(path.read_text())
    assert d["alpha"] == 3762.70 and d["layers"] == 1
