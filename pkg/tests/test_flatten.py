import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lftflat.flatten import (
    FlattenError,
    flatten_tree,
    fundamental_of_leaf,
    merge_children,
    signal_labels,
    sparsity_report,
)
from lftflat.generate import chain_model, load_fixture, permute_children, random_tree
from lftflat.model import parse_model
from lftflat.sparsemat import block_diag, mul

from oracles import dense_merge

GAMMA3 = [[0, 0, 0, 1, 0], [0, 0, 0, 0, 1], [1, 0, 0, 0, 0], [0, 1, 0, 0, 0], [0, 0, 1, 0, 0]]
GAMMA4 = [[0, 0, 1, 0, 0], [0, 0, 0, 0, 1], [1, 0, 0, 0, 0], [0, 1, 0, 0, 0], [0, 0, 0, 1, 0]]


def _merges(tree):
    out = {}
    flatten_tree(tree, on_merge=lambda nid, fd: out.__setitem__(nid, fd))
    return out


def test_leaf_gammas_match_published_matrices():
    assert fundamental_of_leaf(load_fixture("s3_leaf").root_nsb).gamma.toarray().tolist() == GAMMA3
    assert fundamental_of_leaf(load_fixture("s4_leaf").root_nsb).gamma.toarray().tolist() == GAMMA4


def test_leaf_rejects_children():
    with pytest.raises(FlattenError):
        fundamental_of_leaf(load_fixture("nested_example").root_nsb)


def test_s2_merge_identities():
    tree = load_fixture("nested_example")
    fds = _merges(tree)
    s2 = tree.nsbs["S2"]
    c3, c4 = fds["S3"], fds["S4"]
    merged = fds["S2"]

    def cd(r, c):
        return block_diag([c3.block(r, c), c4.block(r, c)])

    ss = s2.block("s", "s")
    # children's u rows through the parent's s rows
    rows_u2 = s2.partition.row_block_sizes[0]
    cols_y2 = s2.partition.col_block_sizes[0]
    got = merged.block("g", "g").toarray()
    expect_cc = (cd("g", "g").toarray() + mul(cd("g", "i"), mul(ss, cd("o", "g"))).toarray())
    assert np.array_equal(got[rows_u2:, cols_y2:], expect_cc)
    assert np.array_equal(got[:rows_u2, :cols_y2], s2.block("g", "g").toarray())
    assert np.array_equal(got[:rows_u2, cols_y2:], mul(s2.block("g", "s"), cd("o", "g")).toarray())
    assert np.array_equal(got[rows_u2:, :cols_y2], mul(cd("g", "i"), s2.block("s", "g")).toarray())
    # external output row of S2
    d2 = s2.partition.col_block_sizes[1]
    od = merged.block("o", "d").toarray()
    assert np.array_equal(od[:, :d2], s2.block("o", "d").toarray())
    assert np.array_equal(od[:, d2:], mul(s2.block("o", "s"), cd("o", "d")).toarray())


def test_fixture_flattening_counts_and_provenance():
    tree = load_fixture("nested_example")
    fd = flatten_tree(tree)
    assert fd.gamma.shape == (17, 19)
    assert fd.gamma.nnz == fd.m + fd.d == 17
    assert fd.gamma.is_routing
    declared = sorted(path for path, _ in tree.iter_blocks())
    assert sorted(fd.dynamic_paths + fd.uncertainty_paths) == declared
    assert "S0/S2/S3/G31" in fd.dynamic_paths
    assert fd.dynamic_paths[0] == "S0/G01"


def test_merges_match_dense_oracle():
    n = 0
    for seed in range(40):
        tree = random_tree(np.random.default_rng(seed), realized=False, max_blocks=25)
        fds = _merges(tree)
        for nid, fd in fds.items():
            nsb = tree.nsbs[nid]
            if not nsb.children:
                continue
            ref = dense_merge(nsb, [fds[c] for c in nsb.children])
            assert np.array_equal(ref, fd.gamma.toarray()), nid
            n += 1
    assert n > 50


def test_every_intermediate_is_routing():
    for seed in range(40):
        tree = random_tree(np.random.default_rng(1000 + seed), realized=False)
        for fd in _merges(tree).values():
            g = fd.gamma
            assert g.is_routing
            assert g.nnz == g.nrows
            assert fd.block("o", "i").nnz == 0


def _relabelled(fd):
    rows, cols = signal_labels(fd)
    return {(rows[r], cols[c]) for r, c in fd.gamma.entries}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_child_permutation_invariance(seed):
    tree = random_tree(np.random.default_rng(seed), realized=False, max_blocks=20)
    shuffled, _ = permute_children(tree, np.random.default_rng(seed + 1))
    a, b = flatten_tree(tree), flatten_tree(shuffled)
    assert sorted(a.dynamic_paths) == sorted(b.dynamic_paths)
    assert _relabelled(a) == _relabelled(b)


def test_merge_checks_child_ports():
    tree = load_fixture("nested_example")
    fds = _merges(tree)
    with pytest.raises(FlattenError):
        merge_children(tree.nsbs["S2"], [fds["S4"], fds["S3"]])
    with pytest.raises(FlattenError):
        merge_children(tree.nsbs["S2"], [fds["S3"]])


def test_merge_rejects_child_feedthrough():
    text = """
root: p
nsbs:
  - id: p
    dynamics: [{id: G, inputs: 1, outputs: 1}]
    children: [c]
    edges:
      - {from: "G.y[0]", to: "c.in[0]"}
      - {from: "c.out[0]", to: "G.u[0]"}
  - id: c
    ext_in: 1
    ext_out: 1
    edges: [{from: "ext.in[0]", to: "ext.out[0]"}]
"""
    tree = parse_model(text)
    with pytest.raises(FlattenError, match=r"\(o,i\)"):
        merge_children(tree.nsbs["p"], [fundamental_of_leaf(tree.nsbs["c"])])


def test_sparsity_report_fixture():
    rep = sparsity_report(flatten_tree(load_fixture("nested_example")))
    assert rep.shape == (17, 19)
    assert rep.nnz_matches_inputs
    assert sum(rep.block_nnz.values()) == rep.nnz
    assert "nnz: 17" in rep.to_text()


def test_chain_density_scales_inversely():
    dens = {}
    for n in (10, 100):
        rep = sparsity_report(flatten_tree(chain_model(n)))
        assert rep.nnz == rep.input_width == 3 * n
        dens[n] = rep.density
    assert dens[10] / dens[100] == pytest.approx(10.0)
