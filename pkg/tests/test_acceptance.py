"""Acceptance criteria 1-7.  Each test prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from lftflat.flatten import flatten_tree, fundamental_of_leaf, signal_labels, sparsity_report
from lftflat.generate import attach_random_realizations, chain_model, load_fixture, permute_children, random_tree
from lftflat.lft import export_lft, import_lft, to_lft
from lftflat.model import insert_dummy_blocks, validate
from lftflat.ssmodel import UncertaintyBlock
from lftflat.verify import AlgebraicLoopError, equivalence_check, sample_delta, simulate_nested

from oracles import dense_merge

TOL = 1e-9
N_TREES = 200
TREE_SEED = 7000

GAMMA3 = [[0, 0, 0, 1, 0], [0, 0, 0, 0, 1], [1, 0, 0, 0, 0], [0, 1, 0, 0, 0], [0, 0, 1, 0, 0]]
GAMMA4 = [[0, 0, 1, 0, 0], [0, 0, 0, 0, 1], [1, 0, 0, 0, 0], [0, 1, 0, 0, 0], [0, 0, 0, 1, 0]]


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")


@pytest.fixture(scope="module")
def trees():
    return [random_tree(np.random.default_rng(TREE_SEED + k), max_depth=4, max_blocks=50, max_width=3)
            for k in range(N_TREES)]


def _flat_target(fd):
    return fd if (fd.n_ext_in or fd.n_ext_out) else to_lft(fd)


def _widths_ok(tree):
    for _, b in tree.iter_blocks():
        dims = (b.dim,) if isinstance(b, UncertaintyBlock) else (b.n_inputs, b.n_outputs)
        if max(dims) > 3:
            return False
    return all(max(n.n_ext_in, n.n_ext_out) <= 3 for n in tree.nsbs.values())


def test_criterion_1_leaf_gammas(capsys):
    t0 = time.perf_counter()
    g3 = fundamental_of_leaf(load_fixture("s3_leaf").root_nsb).gamma.toarray().tolist()
    g4 = fundamental_of_leaf(load_fixture("s4_leaf").root_nsb).gamma.toarray().tolist()
    elapsed = time.perf_counter() - t0
    ok = g3 == GAMMA3 and g4 == GAMMA4 and elapsed < 1.0
    report(capsys, 1, ok, f"S3/S4 leaf gammas exact match: {g3 == GAMMA3}/{g4 == GAMMA4}, {elapsed:.3f} s (< 1 s)")
    assert ok


def test_criterion_2_full_tree(capsys):
    tree = load_fixture("nested_example")
    t0 = time.perf_counter()
    fd = flatten_tree(tree)
    elapsed = time.perf_counter() - t0
    declared = sorted(path for path, _ in tree.iter_blocks())
    provenance_ok = sorted(fd.dynamic_paths + fd.uncertainty_paths) == declared
    unique = len(set(fd.dynamic_paths + fd.uncertainty_paths)) == len(declared)
    sum_m = sum(b.n_inputs for _, b in tree.iter_blocks() if not isinstance(b, UncertaintyBlock))
    sum_d = sum(b.dim for _, b in tree.iter_blocks() if isinstance(b, UncertaintyBlock))
    nnz_ok = fd.gamma.nnz == sum_m + sum_d
    ok = provenance_ok and unique and nnz_ok and elapsed < 1.0
    report(
        capsys, 2, ok,
        f"{len(declared)} blocks each once: {provenance_ok and unique}, nnz {fd.gamma.nnz} = "
        f"sum m + sum d = {sum_m + sum_d}, {elapsed:.3f} s (< 1 s)",
    )
    assert ok


def test_criterion_3_fixture_equivalence(capsys):
    tree = attach_random_realizations(load_fixture("nested_example"), seed=0)
    t0 = time.perf_counter()
    rep = equivalence_check(tree, to_lft(flatten_tree(tree)), n_trials=20, horizon=200, tol=TOL, seed=0)
    elapsed = time.perf_counter() - t0
    ok = rep.passed and elapsed < 10.0
    report(capsys, 3, ok, f"fixture max rel error {rep.max_rel_error:.2e} (tol {TOL:g}), {elapsed:.2f} s (< 10 s)")
    assert ok, rep.to_text()


def test_criterion_4_random_equivalence(capsys, trees):
    t0 = time.perf_counter()
    failures, worst, merges, small, oracle_bad = [], 0.0, 0, 0, []
    for k, tree in enumerate(trees):
        assert tree.depth() <= 4 and sum(1 for _ in tree.iter_blocks()) <= 50 and _widths_ok(tree)
        fds = {}
        fd = flatten_tree(tree, on_merge=lambda nid, f: fds.__setitem__(nid, f))
        for nid, merged in fds.items():
            nsb = tree.nsbs[nid]
            if not nsb.children:
                continue
            merges += 1
            small += merged.gamma.nrows + merged.gamma.ncols <= 40
            if not np.array_equal(dense_merge(nsb, [fds[c] for c in nsb.children]), merged.gamma.toarray()):
                oracle_bad.append((k, nid))
        rep = equivalence_check(tree, _flat_target(fd), n_trials=20, horizon=200, tol=TOL, seed=k)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failures.append(k)
    elapsed = time.perf_counter() - t0
    ok = not failures and not oracle_bad and elapsed < 300
    report(
        capsys, 4, ok,
        f"{N_TREES - len(failures)}/{N_TREES} trees pass (worst rel {worst:.2e}); dense oracle matches "
        f"{merges - len(oracle_bad)}/{merges} merges ({small} with <= 40 signals); {elapsed:.1f} s (< 300 s)",
    )
    assert ok, (failures, oracle_bad)


def _relabelled(fd):
    rows, cols = signal_labels(fd)
    return {(rows[r], cols[c]) for r, c in fd.gamma.entries}


def test_criterion_5_structural_invariants(capsys, trees):
    bad_routing, bad_perm, bad_dummy = [], [], []
    ft_compared = ft_singular = 0
    for k, tree in enumerate(trees):
        fds = []
        flatten_tree(tree, on_merge=lambda nid, f: fds.append(f))
        if not all(f.gamma.is_routing and f.gamma.nnz == f.gamma.nrows for f in fds):
            bad_routing.append(k)
        shuffled, _ = permute_children(tree, np.random.default_rng(k))
        if _relabelled(flatten_tree(shuffled)) != _relabelled(fds[-1]):
            bad_perm.append(k)
        # the generated trees are valid, so the dummy pass must be the identity
        if insert_dummy_blocks(tree) != tree:
            bad_dummy.append(k)
        # the same tree shape with planted direct wires
        ft = random_tree(np.random.default_rng(TREE_SEED + k), root_ports=True, feedthrough=3)
        fixed = insert_dummy_blocks(ft)
        if validate(fixed) or insert_dummy_blocks(fixed) != fixed:
            bad_dummy.append(k)
            continue
        rng = np.random.default_rng(k)
        u = rng.standard_normal((100, ft.root_nsb.n_ext_in))
        delta = sample_delta(ft, k)
        try:
            a = simulate_nested(ft, delta, u)
        except AlgebraicLoopError:
            # a loop made only of wires stays singular with unity blocks in it
            try:
                simulate_nested(fixed, delta, u)
                bad_dummy.append(k)
            except AlgebraicLoopError:
                ft_singular += 1
            continue
        b = simulate_nested(fixed, delta, u)
        err = max(
            [np.max(np.abs(a.outputs - b.outputs), initial=0.0)]
            + [np.max(np.abs(a.q[p] - b.q[p]), initial=0.0) for p in a.q]
        )
        ft_compared += 1
        if err > 1e-12:
            bad_dummy.append(k)
    ok = not (bad_routing or bad_perm or bad_dummy)
    report(
        capsys, 5, ok,
        f"routing intermediates ok {N_TREES - len(bad_routing)}/{N_TREES}, permutation invariance "
        f"{N_TREES - len(bad_perm)}/{N_TREES}, dummy blocks idempotent and within 1e-12 on "
        f"{ft_compared} feedthrough variants ({ft_singular} more singular before and after)",
    )
    assert ok, (bad_routing, bad_perm, bad_dummy)


def test_criterion_6_sparsity(capsys):
    rows, timing = [], {}
    for n in (10, 100, 1000):
        tree = chain_model(n)
        t0 = time.perf_counter()
        fd = flatten_tree(tree)
        timing[n] = time.perf_counter() - t0
        rep = sparsity_report(fd)
        rows.append((n, rep.nnz, rep.input_width, rep.density))
    exact = all(nnz == width for _, nnz, width, _ in rows)
    # Theta(1/n): density * n stays constant
    scaled = [d * n for n, _, _, d in rows]
    theta = max(scaled) / min(scaled) < 1.5
    decreasing = rows[0][3] > rows[1][3] > rows[2][3]
    ok = exact and theta and decreasing and timing[1000] < 5.0
    dens = ", ".join(f"n={n}: {d:.2e}" for n, _, _, d in rows)
    report(capsys, 6, ok, f"density {dens}; nnz = input width: {exact}; n=1000 in {timing[1000]:.2f} s (< 5 s)")
    assert ok


def test_criterion_7_lft_structure(capsys, trees):
    models = [attach_random_realizations(load_fixture("nested_example"), 0), load_fixture("nested_example")]
    models += [chain_model(n, realized=True) for n in (10, 100)]
    models += [t for t in trees if not (t.root_nsb.n_ext_in or t.root_nsb.n_ext_out)]
    extra = 0
    k = 0
    while len(models) < N_TREES + 4:
        models.append(random_tree(np.random.default_rng(90000 + k), root_ports=False))
        extra += 1
        k += 1
    bad_shape, bad_export = [], []
    for i, tree in enumerate(models):
        lft = to_lft(flatten_tree(tree))
        m, p, d = lft.m, lft.n_outputs_G, lft.d
        shapes = (
            lft.G_pq.grid == (("0",),) and lft.G_pq.shape == (d, d)
            and lft.G_pw.grid == (("0", "I"),) and lft.G_pw.col_sizes == (m, d) and lft.G_pw.row_sizes == (d,)
            and lft.G_zq.grid == (("0",), ("I",)) and lft.G_zq.row_sizes == (p, d) and lft.G_zq.col_sizes == (d,)
            and lft.G_zw.grid == (("G", "0"), ("0", "0"))
            and lft.G_zw.row_sizes == (p, d) and lft.G_zw.col_sizes == (m, d)
            and lft.gamma_tilde.shape == (m + d, p + d)
        )
        if not shapes:
            bad_shape.append(i)
        for fmt in ("archive", "mm-bundle"):
            data = export_lft(lft, fmt)
            if export_lft(import_lft(data), fmt) != data:
                bad_export.append((i, fmt))
    ok = not bad_shape and not bad_export
    report(
        capsys, 7, ok,
        f"{len(models) - len(bad_shape)}/{len(models)} port-free models have the LFT block structure; "
        f"export round-trips bit-exactly in both formats for {len(models) - len({i for i, _ in bad_export})}"
        f"/{len(models)} ({extra} extra random models)",
    )
    assert ok, (bad_shape, bad_export)
