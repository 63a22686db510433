import io
import json
import subprocess
import sys
import zipfile

import pytest

from lftflat import cli
from lftflat.generate import attach_random_realizations, fixture_text, load_fixture
from lftflat.model import render_model

DUPLICATE = """
root: a
nsbs:
  - id: a
    dynamics: [{id: G, inputs: 1, outputs: 2}]
    edges:
      - {from: "G.y[0]", to: "G.u[0]"}
      - {from: "G.y[1]", to: "G.u[0]"}
"""

FEEDTHROUGH = """
root: a
nsbs:
  - id: a
    dynamics: [{id: G, inputs: 1, outputs: 1}]
    ext_in: 1
    ext_out: 2
    edges:
      - {from: "ext.in[0]", to: "G.u[0]"}
      - {from: "G.y[0]", to: "ext.out[0]"}
      - {from: "ext.in[0]", to: "ext.out[1]"}
"""


@pytest.fixture
def model_file(tmp_path):
    def write(text, name="model.yaml"):
        path = tmp_path / name
        path.write_text(text)
        return path

    return write


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_flatten_fixture_writes_bundle(capsys, model_file, tmp_path):
    src = model_file(fixture_text("nested_example"))
    out = tmp_path / "b.zip"
    code, stdout, _ = run(capsys, "flatten", src, "-o", out)
    assert code == 0
    assert "nnz: 17" in stdout
    man = json.loads(zipfile.ZipFile(out).read("manifest.json"))
    assert man["gamma_tilde"]["nnz"] == man["dims"]["m"] + man["dims"]["d"] == 17


def test_flatten_is_deterministic(capsys, model_file, tmp_path):
    src = model_file(render_model(attach_random_realizations(load_fixture("nested_example"), 4)))
    code1, out1, _ = run(capsys, "flatten", src, "-o", tmp_path / "a.zip")
    code2, out2, _ = run(capsys, "flatten", src, "-o", tmp_path / "b.zip")
    assert code1 == code2 == 0
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    assert out1.replace("a.zip", "b.zip") == out2


def test_default_output_and_mm_bundle(capsys, model_file):
    src = model_file(fixture_text("nested_example"), "net.yaml")
    assert run(capsys, "export", src)[0] == 0
    assert (src.parent / "net.lft.zip").is_file()
    assert run(capsys, "export", src, "--format", "mm-bundle")[0] == 0
    assert (src.parent / "net.lft" / "gamma_tilde.mtx").is_file()


def test_duplicate_drive_exit_3(capsys, model_file):
    code, _, err = run(capsys, "flatten", model_file(DUPLICATE))
    assert code == cli.EXIT_VALIDATION
    assert "G.u[0]" in err


def test_missing_file_exit_5(capsys, tmp_path):
    assert run(capsys, "flatten", tmp_path / "nope.yaml")[0] == cli.EXIT_IO


def test_unwritable_output_exit_5(capsys, model_file, tmp_path):
    src = model_file(fixture_text("nested_example"))
    assert run(capsys, "export", src, "-o", tmp_path / "no" / "such" / "dir.zip")[0] == cli.EXIT_IO


def test_parse_error_exit_2(capsys, model_file):
    code, _, err = run(capsys, "inspect", model_file("root: a\nnsbs: [\n"))
    assert code == cli.EXIT_PARSE
    assert "line" in err


def test_ported_model_cannot_be_exported(capsys, model_file):
    code, stdout, err = run(capsys, "flatten", model_file(fixture_text("s3_leaf")))
    assert code == cli.EXIT_FLATTEN
    assert "nnz: 5" in stdout
    assert "port-free" in err


def test_usage_errors_exit_6(capsys, model_file):
    src = model_file(fixture_text("minimal"))
    assert run(capsys, "verify", src, "--tol", "0")[0] == cli.EXIT_USAGE
    assert run(capsys, "verify", src, "--trials", "0")[0] == cli.EXIT_USAGE
    assert run(capsys, "frobnicate")[0] == cli.EXIT_USAGE
    assert run(capsys, "flatten", src, "--format", "tarball")[0] == cli.EXIT_USAGE
    assert run(capsys, "--version")[0] == 0


def test_inspect_fixture_tree(capsys, model_file):
    code, out, err = run(capsys, "inspect", model_file(fixture_text("nested_example")))
    assert code == 0 and err == ""
    lines = out.splitlines()
    assert lines[0].startswith("S0 ")
    assert lines[1].startswith("├── S1 ")
    assert lines[2].startswith("└── S2 ")
    assert lines[3].startswith("    ├── S3 ")
    assert lines[4].startswith("    └── S4 ")
    assert "gamma 5x5 rows(g=2 d=1 s=0 o=2) cols(g=3 d=1 s=0 i=1)" in lines[3]
    assert lines[5] == "valid"


def test_inspect_single_nsb(capsys, model_file):
    code, out, _ = run(capsys, "inspect", model_file(fixture_text("minimal")))
    assert code == 0
    assert out.splitlines()[1:] == ["valid"]


def test_inspect_shows_routing(capsys, model_file):
    code, out, _ = run(capsys, "inspect", model_file(fixture_text("s4_leaf")), "--gamma")
    assert code == 0
    assert "0 0 | 1 0 | 0" in out


def test_inspect_invalid_model(capsys, model_file):
    code, out, err = run(capsys, "inspect", model_file(FEEDTHROUGH))
    assert code == cli.EXIT_VALIDATION
    assert "feedthrough" in err
    assert "invalid" in out


def test_fix_feedthrough_flag(capsys, model_file):
    src = model_file(FEEDTHROUGH)
    code, out, _ = run(capsys, "inspect", src, "--fix-feedthrough")
    assert code == 0
    assert "ft_0_1(1->1)" in out


def test_verify_realized_fixture(capsys, model_file):
    src = model_file(render_model(attach_random_realizations(load_fixture("nested_example"), 2)))
    code, out, _ = run(capsys, "verify", src)
    assert code == 0
    assert "equivalence: PASS" in out


def test_verify_structural_model_exit_3(capsys, model_file):
    code, _, err = run(capsys, "verify", model_file(fixture_text("nested_example")))
    assert code == cli.EXIT_VALIDATION
    assert "no realization" in err


def test_verify_random_realizations(capsys, model_file):
    src = model_file(fixture_text("nested_example"))
    code, out, _ = run(capsys, "verify", src, "--random-realizations", "--trials", "4", "--horizon", "50")
    assert code == 0 and "trials: 4, horizon: 50" in out


def test_verify_against_corrupted_bundle(capsys, model_file, tmp_path):
    src = model_file(render_model(attach_random_realizations(load_fixture("nested_example"), 2)))
    good = tmp_path / "good.zip"
    assert run(capsys, "export", src, "-o", good)[0] == 0
    assert run(capsys, "verify", src, "--bundle", good, "--trials", "3")[0] == 0

    members = {n: zipfile.ZipFile(good).read(n) for n in zipfile.ZipFile(good).namelist()}
    lines = members["gamma_tilde.coord"].decode().splitlines()
    header, entries = lines[0], lines[1:]
    ncols = int(header.split()[1])
    r, c = entries[0].split()
    entries[0] = f"{r} {(int(c) + 1) % ncols}"
    members["gamma_tilde.coord"] = ("\n".join([header] + entries) + "\n").encode()
    bad = tmp_path / "bad.zip"
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for n, data in members.items():
            zf.writestr(n, data)
    bad.write_bytes(buf.getvalue())
    code, out, _ = run(capsys, "verify", src, "--bundle", bad, "--trials", "3")
    assert code == cli.EXIT_VERIFY_FAILED
    assert "FAIL" in out


def test_verify_missing_bundle_exit_5(capsys, model_file, tmp_path):
    src = model_file(render_model(attach_random_realizations(load_fixture("nested_example"), 2)))
    assert run(capsys, "verify", src, "--bundle", tmp_path / "missing.zip")[0] == cli.EXIT_IO


def test_module_entry_point(tmp_path):
    src = tmp_path / "m.yaml"
    src.write_text(fixture_text("minimal"))
    res = subprocess.run([sys.executable, "-m", "lftflat", "inspect", str(src)], capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.strip().endswith("valid")
