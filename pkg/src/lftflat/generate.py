"""Model generators: random valid trees, the decoupled chain family,
random stable realizations, and the bundled example models."""

from __future__ import annotations

from dataclasses import replace
from importlib import resources
from typing import Optional

import numpy as np

from .model import (
    Edge,
    ModelTree,
    Nsb,
    PortRef,
    build_gamma,
    parse_model,
    tree_from_dict,
    tree_to_dict,
)
from .ssmodel import DynamicBlock, StateSpace, UncertaintyBlock

__all__ = [
    "random_realization",
    "attach_random_realizations",
    "random_tree",
    "chain_model",
    "permute_children",
    "fixture_text",
    "load_fixture",
    "FIXTURES",
]

FIXTURES = ("nested_example", "s3_leaf", "s4_leaf", "minimal")


def peak_gain(ss: StateSpace, horizon: int = 400) -> float:
    """Truncated l-infinity induced gain: max row sum of |impulse response|."""
    acc = np.abs(ss.D).sum(axis=1)
    if ss.nstates:
        Ak_B = ss.B.copy()
        for _ in range(horizon):
            acc = acc + np.abs(ss.C @ Ak_B).sum(axis=1)
            Ak_B = ss.A @ Ak_B
    return float(acc.max()) if acc.size else 0.0


def random_realization(rng, m: int, p: int, max_states: int = 3, gain: float = 0.8, rho: float = 0.7) -> StateSpace:
    """Random stable realization whose peak-to-peak gain is at most ``gain``.

    Keeping every block below unit gain (and the uncertainty samples below
    unit row-sum norm) makes every random interconnection a contraction, so
    simulations neither blow up nor hit singular algebraic loops.
    """
    n = int(rng.integers(0, max_states + 1))
    A = rng.standard_normal((n, n))
    if n:
        A *= rng.uniform(0.0, rho) / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    D = rng.standard_normal((p, m))
    ss = StateSpace(A, B, C, D)
    pk = peak_gain(ss)
    if pk > 0:
        s = gain / pk
        ss = StateSpace(A, B * s, C, D * s)
    return ss


def attach_random_realizations(tree: ModelTree, seed: int = 0, **kw) -> ModelTree:
    """Copy of ``tree`` with a random stable realization on every dynamic block."""
    rng = np.random.default_rng(seed)
    nsbs = {}
    for nid, n in tree.nsbs.items():
        dyn = tuple(
            replace(b, realization=random_realization(rng, b.n_inputs, b.n_outputs, **kw)) for b in n.dynamics
        )
        nsbs[nid] = replace(n, dynamics=dyn)
    return ModelTree(nsbs, tree.root)


def _random_edges(rng, nsb: Nsb, feedthrough: int = 0) -> list[Edge]:
    rows, cols = nsb.row_ports(), nsb.col_ports()
    internal = [c for c in cols if c.kind != "nsb_ext_in"]
    ext_in = [c for c in cols if c.kind == "nsb_ext_in"]
    edges = []
    wired = 0
    for r in rows:
        if r.kind == "nsb_ext_out":
            if wired < feedthrough and ext_in:
                src = ext_in[int(rng.integers(len(ext_in)))]
                wired += 1
            else:
                src = internal[int(rng.integers(len(internal)))]
        else:
            src = cols[int(rng.integers(len(cols)))]
        edges.append(Edge(src, r))
    return edges


def random_tree(
    rng,
    max_depth: int = 4,
    max_blocks: int = 50,
    max_width: int = 3,
    root_ports: Optional[bool] = None,
    realized: bool = True,
    feedthrough: int = 0,
) -> ModelTree:
    """Random valid model tree.

    Parameters
    ----------
    rng : numpy.random.Generator
    max_depth : int
        Maximum number of levels, root included.
    max_blocks : int
        Maximum number of fundamental blocks over the whole tree.
    max_width : int
        Maximum signal width of any block or port group.
    root_ports : bool, optional
        Force the root to have (True) or not have (False) external ports.
    realized : bool
        Attach random stable realizations.
    feedthrough : int
        Number of direct external-in to external-out wires to plant; a
        nonzero value yields a model that needs dummy blocks.
    """
    if root_ports is None:
        root_ports = bool(rng.integers(2))
    budget = [max_blocks]
    counter = [0]
    specs: dict[str, dict] = {}
    order: list[str] = []

    def make(depth: int, is_root: bool) -> str:
        nid = f"N{counter[0]}"
        counter[0] += 1
        n_dyn = int(rng.integers(0, 3))
        n_unc = int(rng.integers(0, 3))
        if n_dyn + n_unc == 0:
            n_dyn = 1
        n_dyn = min(n_dyn, max(budget[0], 1))
        n_unc = min(n_unc, max(budget[0] - n_dyn, 0))
        budget[0] -= n_dyn + n_unc
        dyn = [
            DynamicBlock(f"G{k}", int(rng.integers(1, max_width + 1)), int(rng.integers(1, max_width + 1)))
            for k in range(n_dyn)
        ]
        unc = []
        for k in range(n_unc):
            dim = int(rng.integers(1, max_width + 1))
            unc.append(UncertaintyBlock(f"D{k}", dim, 0.5 / np.sqrt(dim)))
        if is_root:
            ext_in = int(rng.integers(1, min(2, max_width) + 1)) if root_ports else 0
            ext_out = int(rng.integers(1, min(2, max_width) + 1)) if root_ports else 0
        else:
            ext_in = int(rng.integers(0, min(2, max_width) + 1))
            ext_out = int(rng.integers(0, min(2, max_width) + 1))
        children = []
        if depth < max_depth:
            for _ in range(int(rng.integers(0, 4))):
                if budget[0] < 1:
                    break
                children.append(make(depth + 1, False))
        specs[nid] = dict(dyn=dyn, unc=unc, children=children, ext_in=ext_in, ext_out=ext_out)
        order.append(nid)
        return nid

    root = make(1, True)
    nsbs: dict[str, Nsb] = {}
    remaining = feedthrough
    for nid in order:  # children are completed before their parent
        s = specs[nid]
        if realized:
            s["dyn"] = [replace(b, realization=random_realization(rng, b.n_inputs, b.n_outputs)) for b in s["dyn"]]
        child_ports = [(nsbs[c].n_ext_in, nsbs[c].n_ext_out) for c in s["children"]]
        shell = build_gamma(nid, s["dyn"], s["unc"], s["children"], child_ports, s["ext_in"], s["ext_out"], [])
        k = min(remaining, s["ext_out"]) if s["ext_in"] else 0
        remaining -= k
        edges = _random_edges(rng, shell, k)
        nsbs[nid] = build_gamma(nid, s["dyn"], s["unc"], s["children"], child_ports, s["ext_in"], s["ext_out"], edges)
    ordered = {root: nsbs[root]}
    ordered.update((k, v) for k, v in nsbs.items() if k != root)
    return ModelTree(ordered, root)


def chain_model(n: int, realized: bool = False, seed: int = 0) -> ModelTree:
    """Ring of ``n`` identical subsystems coupled through one scalar each.

    Each subsystem has a 2-input / 1-output block in feedback with a scalar
    uncertainty; its one external input and output link it to its
    neighbours.
    """
    rng = np.random.default_rng(seed)
    nsbs = {}
    children = [f"sub{k}" for k in range(n)]
    for cid in children:
        ss = random_realization(rng, 2, 1) if realized else None
        edges = [
            Edge(PortRef("unc_out", "D", 0), PortRef("dyn_in", "G", 0)),
            Edge(PortRef("nsb_ext_in", "ext", 0), PortRef("dyn_in", "G", 1)),
            Edge(PortRef("dyn_out", "G", 0), PortRef("unc_in", "D", 0)),
            Edge(PortRef("dyn_out", "G", 0), PortRef("nsb_ext_out", "ext", 0)),
        ]
        nsbs[cid] = build_gamma(cid, [DynamicBlock("G", 2, 1, ss)], [UncertaintyBlock("D", 1, 0.5)], [], [], 1, 1, edges)
    root_edges = [
        Edge(PortRef("child_ext_out", children[k], 0), PortRef("child_ext_in", children[(k + 1) % n], 0))
        for k in range(n)
    ]
    root = build_gamma("chain", [], [], children, [(1, 1)] * n, 0, 0, root_edges)
    return ModelTree({"chain": root, **nsbs}, "chain")


def permute_children(tree: ModelTree, rng) -> tuple[ModelTree, dict[str, list[int]]]:
    """Shuffle every NSB's child declaration order; returns the new tree and
    the permutation applied to each NSB's children."""
    doc = tree_to_dict(tree)
    perms = {}
    for raw in doc["nsbs"]:
        perm = rng.permutation(len(raw["children"])).tolist()
        raw["children"] = [raw["children"][i] for i in perm]
        perms[raw["id"]] = perm
    return tree_from_dict(doc), perms


def fixture_text(name: str) -> str:
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; have {FIXTURES}")
    return resources.files("lftflat.fixtures").joinpath(f"{name}.yaml").read_text(encoding="utf-8")


def load_fixture(name: str) -> ModelTree:
    return parse_model(fixture_text(name))
