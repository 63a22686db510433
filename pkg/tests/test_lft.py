import io
import json
import zipfile

import numpy as np
import pytest
import scipy.io

from lftflat.flatten import flatten_tree
from lftflat.generate import attach_random_realizations, chain_model, load_fixture, random_tree
from lftflat.lft import (
    LftError,
    bundle_files,
    check_wellposed,
    export_lft,
    import_lft,
    static_loop_matrix,
    to_lft,
    write_export,
)
from lftflat.model import Edge, ModelTree, PortRef, build_gamma, parse_model
from lftflat.ssmodel import DynamicBlock, StateSpace, UncertaintyBlock
from lftflat.verify import sample_delta


def _scalar_loop(gain):
    """One static block in feedback with one scalar uncertainty."""
    edges = [
        Edge(PortRef("unc_out", "D", 0), PortRef("dyn_in", "G", 0)),
        Edge(PortRef("dyn_out", "G", 0), PortRef("unc_in", "D", 0)),
    ]
    g = DynamicBlock("G", 1, 1, StateSpace.static([[gain]]))
    nsb = build_gamma("a", [g], [UncertaintyBlock("D", 1)], [], [], 0, 0, edges)
    return ModelTree({"a": nsb}, "a")


def _fixture_lft(seed=2):
    tree = attach_random_realizations(load_fixture("nested_example"), seed)
    return tree, to_lft(flatten_tree(tree))


def _reference_gbar(G, d):
    """(q, u, p) -> (p, y, q) with blocks [[0,0,I],[0,G,0],[I,0,0]]."""
    p, m = G.shape
    out = np.zeros((d + p + d, d + m + d))
    out[:d, d + m:] = np.eye(d)
    out[d:d + p, d:d + m] = G
    out[d + p:, :d] = np.eye(d)
    return out


def test_structure_symbols():
    _, lft = _fixture_lft()
    m, p, d = lft.m, lft.n_outputs_G, lft.d
    assert lft.G_pq.grid == (("0",),) and lft.G_pq.shape == (d, d)
    assert lft.G_pw.grid == (("0", "I"),) and lft.G_pw.col_sizes == (m, d)
    assert lft.G_zq.grid == (("0",), ("I",)) and lft.G_zq.row_sizes == (p, d)
    assert lft.G_zw.grid == (("G", "0"), ("0", "0"))
    assert lft.dims == {"p": d, "q": d, "w": m + d, "z": p + d}
    assert lft.gamma_tilde.shape == (m + d, p + d)


def test_gbar_matches_block_form():
    _, lft = _fixture_lft()
    ss = lft.G.realization
    gbar = lft.gbar()
    assert np.array_equal(gbar.D, _reference_gbar(ss.D, lft.d))
    assert np.array_equal(gbar.A, ss.A)
    d, m = lft.d, lft.m
    assert np.array_equal(gbar.B[:, d:d + m], ss.B)
    assert not gbar.B[:, :d].any() and not gbar.B[:, d + m:].any()


def test_provenance_of_deep_block():
    _, lft = _fixture_lft()
    paths = [b.path for b in lft.dynamic_blocks]
    assert "S0/S2/S3/G31" in paths
    k = paths.index("S0/S2/S3/G31")
    offset = sum(b.n_inputs for b in lft.dynamic_blocks[:k])
    assert (lft.dynamic_blocks[k].n_inputs, lft.dynamic_blocks[k].n_outputs) == (2, 3)
    man = json.loads(bundle_files(lft)["manifest.json"])
    entry = man["dynamic_blocks"][k]
    assert entry["path"] == "S0/S2/S3/G31" and entry["input_offset"] == offset


def test_rejects_external_ports():
    with pytest.raises(LftError, match="port-free"):
        to_lft(flatten_tree(load_fixture("s3_leaf")))


@pytest.mark.parametrize("fmt", ["archive", "mm-bundle"])
def test_export_is_deterministic_and_round_trips(fmt):
    _, lft = _fixture_lft()
    first = export_lft(lft, fmt)
    assert export_lft(lft, fmt) == first
    back = import_lft(first)
    assert back.gamma_tilde == lft.gamma_tilde
    assert back.G.realization == lft.G.realization
    assert back.Delta == lft.Delta
    assert back.dynamic_blocks == lft.dynamic_blocks
    assert export_lft(back, fmt) == first


def test_structural_export_round_trips():
    lft = to_lft(flatten_tree(load_fixture("nested_example")))
    assert not lft.realized
    data = export_lft(lft)
    assert sorted(zipfile.ZipFile(io.BytesIO(data)).namelist()) == ["gamma_tilde.coord", "manifest.json"]
    assert export_lft(import_lft(data)) == data


def test_empty_model_export():
    tree = parse_model("root: a\nnsbs:\n  - id: a\n")
    lft = to_lft(flatten_tree(tree))
    assert lft.gamma_tilde.shape == (0, 0)
    data = export_lft(lft)
    back = import_lft(data)
    assert back.gamma_tilde.shape == (0, 0)
    assert export_lft(back) == data


def test_mm_bundle_directory(tmp_path):
    _, lft = _fixture_lft()
    out = write_export(lft, tmp_path / "b", "mm-bundle")
    mtx = scipy.io.mmread(out / "gamma_tilde.mtx")
    assert np.array_equal(mtx.toarray() != 0, lft.gamma_tilde.toarray().astype(bool))
    assert export_lft(import_lft(out), "mm-bundle") == export_lft(lft, "mm-bundle")


def test_import_rejects_garbage(tmp_path):
    with pytest.raises(LftError):
        import_lft(b"not a bundle")
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("other.txt", "x")
    with pytest.raises(LftError, match="manifest"):
        import_lft(buf.getvalue())


def test_import_rejects_bad_gbar_structure():
    _, lft = _fixture_lft()
    files = bundle_files(lft)
    rows = files["Gbar.D"].decode().splitlines()
    vals = rows[0].split()
    vals[0] = "1.0"  # G_pq must be zero
    rows[0] = " ".join(vals)
    files["Gbar.D"] = ("\n".join(rows) + "\n").encode()
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for k, v in files.items():
            zf.writestr(k, v)
    with pytest.raises(LftError, match="structure"):
        import_lft(buf.getvalue())


def test_random_models_round_trip():
    for seed in range(20):
        tree = random_tree(np.random.default_rng(seed), root_ports=False)
        lft = to_lft(flatten_tree(tree))
        for fmt in ("archive", "mm-bundle"):
            data = export_lft(lft, fmt)
            assert export_lft(import_lft(data), fmt) == data


def test_wellposed_random_sample():
    tree, lft = _fixture_lft()
    assert check_wellposed(lft, sample_delta(lft, 0))
    assert static_loop_matrix(lft, sample_delta(lft, 0)).shape == (2 * lft.d + lft.m,) * 2


def test_wellposedness_detects_unit_loop():
    lft = to_lft(flatten_tree(_scalar_loop(1.0)))
    assert not check_wellposed(lft, np.array([[1.0]]))
    assert check_wellposed(lft, np.array([[0.5]]))


def test_chain_lft_keeps_one_entry_per_input():
    lft = to_lft(flatten_tree(chain_model(5, realized=True)))
    assert lft.gamma_tilde.nnz == 15
    assert isinstance(lft.G.realization, StateSpace)
