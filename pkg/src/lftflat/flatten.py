"""Bottom-up elimination of NSB ports.

Each leaf NSB already is a fundamental description.  An internal NSB is
merged with the fundamental descriptions of its children by substituting
the children's external outputs into the parent's ``s`` rows and the
parent's ``s`` rows into the children's external inputs.  Because every
child has a zero ``(o, i)`` block, the children's external outputs depend
only on their own block outputs, so one substitution pass eliminates all
port variables and no fixed-point iteration is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

from .model import ModelError, ModelTree, Nsb, ValidationError, validate
from .sparsemat import (
    BlockPartition,
    SparseBinaryMatrix,
    SparseMatrixError,
    add_disjoint,
    assemble_blocks,
    block_diag,
    extract_block,
    mul,
)
from .ssmodel import (
    DynamicBlock,
    UncertaintyAggregate,
    UncertaintyBlock,
    blockdiag_dynamic,
    blockdiag_uncertainty,
)

__all__ = [
    "FlattenError",
    "FundamentalDescription",
    "fundamental_of_leaf",
    "merge_children",
    "flatten_tree",
    "SparsityReport",
    "sparsity_report",
    "signal_labels",
]

FD_ROWS = ("g", "d", "o")
FD_COLS = ("g", "d", "i")


class FlattenError(ModelError):
    """Merging failed; the model violates a merge precondition."""


@dataclass(frozen=True)
class FundamentalDescription:
    """Flat ``(G, Delta, gamma)`` over fundamental blocks only.

    ``gamma`` maps ``(y, q, u_ext)`` to ``(u, p, y_ext)``.  The two path
    tuples record where each diagonal block of ``G`` and ``Delta`` came
    from, e.g. ``"S0/S2/S3/G31"``.
    """

    dynamics: tuple[DynamicBlock, ...]
    uncertainties: tuple[UncertaintyBlock, ...]
    dynamic_paths: tuple[str, ...]
    uncertainty_paths: tuple[str, ...]
    n_ext_in: int
    n_ext_out: int
    gamma: SparseBinaryMatrix = field(compare=True)

    @cached_property
    def G(self) -> DynamicBlock:
        return blockdiag_dynamic(self.dynamics)

    @property
    def Delta(self) -> UncertaintyAggregate:
        return blockdiag_uncertainty(self.uncertainties)

    @property
    def m(self) -> int:
        return sum(b.n_inputs for b in self.dynamics)

    @property
    def p(self) -> int:
        return sum(b.n_outputs for b in self.dynamics)

    @property
    def d(self) -> int:
        return sum(b.dim for b in self.uncertainties)

    @property
    def partition(self) -> BlockPartition:
        return BlockPartition((self.m, self.d, self.n_ext_out), (self.p, self.d, self.n_ext_in), FD_ROWS, FD_COLS)

    def block(self, row: str, col: str) -> SparseBinaryMatrix:
        return extract_block(self.gamma, self.partition, row, col)

    @property
    def block_order(self) -> list[tuple[str, str]]:
        return [("dyn", p) for p in self.dynamic_paths] + [("unc", p) for p in self.uncertainty_paths]

    @property
    def realized(self) -> bool:
        return all(b.realized for b in self.dynamics)


def _check_fundamental(fd: FundamentalDescription, who: str) -> None:
    part = fd.partition
    if fd.gamma.shape != (part.nrows, part.ncols):
        raise FlattenError(f"{who}: gamma is {fd.gamma.shape}, blocks require {(part.nrows, part.ncols)}")
    if fd.block("o", "i").nnz:
        raise FlattenError(f"{who}: external inputs feed external outputs directly (nonzero (o,i) block)")


def fundamental_of_leaf(nsb: Nsb) -> FundamentalDescription:
    """Fundamental description of a leaf NSB (its ``s`` blocks are empty)."""
    if nsb.children:
        raise FlattenError(f"NSB {nsb.id} has children; use merge_children")
    fd = FundamentalDescription(
        tuple(nsb.dynamics),
        tuple(nsb.uncertainties),
        tuple(f"{nsb.id}/{b.id}" for b in nsb.dynamics),
        tuple(f"{nsb.id}/{b.id}" for b in nsb.uncertainties),
        nsb.n_ext_in,
        nsb.n_ext_out,
        nsb.gamma,
    )
    _check_fundamental(fd, f"NSB {nsb.id}")
    return fd


def merge_children(parent: Nsb, child_descs: Sequence[FundamentalDescription]) -> FundamentalDescription:
    """Merge ``parent`` with the fundamental descriptions of its children.

    ``child_descs`` must follow ``parent.children``.  The result lists the
    parent's own blocks first and then each child's blocks in order.
    """
    child_descs = list(child_descs)
    if not parent.children:
        if child_descs:
            raise FlattenError(f"NSB {parent.id} is a leaf but {len(child_descs)} child descriptions were given")
        return fundamental_of_leaf(parent)
    if len(child_descs) != len(parent.children):
        raise FlattenError(f"NSB {parent.id}: {len(parent.children)} children but {len(child_descs)} descriptions")
    for cid, ports, fd in zip(parent.children, parent.child_ports, child_descs):
        _check_fundamental(fd, f"child {cid}")
        if (fd.n_ext_in, fd.n_ext_out) != tuple(ports):
            raise FlattenError(
                f"NSB {parent.id}: child {cid} has {fd.n_ext_in} in / {fd.n_ext_out} out, "
                f"parent partition expects {ports[0]} / {ports[1]}"
            )
    pp = parent.partition
    if parent.gamma.shape != (pp.nrows, pp.ncols):
        raise FlattenError(f"NSB {parent.id}: gamma shape does not match its partition")

    def blk(r, c):
        return extract_block(parent.gamma, pp, r, c)

    def cdiag(r, c):
        return block_diag([fd.block(r, c) for fd in child_descs])

    g_ggc, g_gdc, g_gic = cdiag("g", "g"), cdiag("g", "d"), cdiag("g", "i")
    g_dgc, g_ddc, g_dic = cdiag("d", "g"), cdiag("d", "d"), cdiag("d", "i")
    g_ogc, g_odc = cdiag("o", "g"), cdiag("o", "d")

    try:
        # u_s expressed through the children's block outputs
        ss_og = mul(blk("s", "s"), g_ogc)
        ss_od = mul(blk("s", "s"), g_odc)
        # parent terms routed into the children's external inputs
        s_g, s_d, s_i = blk("s", "g"), blk("s", "d"), blk("s", "i")

        def child_rows(direct_g, direct_d, via_i):
            return [
                mul(via_i, s_g),
                add_disjoint(direct_g, mul(via_i, ss_og)),
                mul(via_i, s_d),
                add_disjoint(direct_d, mul(via_i, ss_od)),
                mul(via_i, s_i),
            ]

        def parent_rows(r):
            via_s = blk(r, "s")
            return [blk(r, "g"), mul(via_s, g_ogc), blk(r, "d"), mul(via_s, g_odc), blk(r, "i")]

        grid = [
            parent_rows("g"),
            child_rows(g_ggc, g_gdc, g_gic),
            parent_rows("d"),
            child_rows(g_dgc, g_ddc, g_dic),
            parent_rows("o"),
        ]
        gamma = assemble_blocks(grid)
    except SparseMatrixError as exc:
        raise FlattenError(f"NSB {parent.id}: {exc}") from exc

    dyn = list(parent.dynamics)
    unc = list(parent.uncertainties)
    dpaths = [f"{parent.id}/{b.id}" for b in parent.dynamics]
    upaths = [f"{parent.id}/{b.id}" for b in parent.uncertainties]
    for fd in child_descs:
        dyn += fd.dynamics
        unc += fd.uncertainties
        dpaths += [f"{parent.id}/{p}" for p in fd.dynamic_paths]
        upaths += [f"{parent.id}/{p}" for p in fd.uncertainty_paths]
    return FundamentalDescription(
        tuple(dyn), tuple(unc), tuple(dpaths), tuple(upaths), parent.n_ext_in, parent.n_ext_out, gamma
    )


def flatten_tree(
    tree: ModelTree,
    on_merge: Optional[Callable[[str, FundamentalDescription], None]] = None,
) -> FundamentalDescription:
    """Fundamental description of the whole model.

    Visits the tree in post-order; ``on_merge(nsb_id, fd)`` is called with
    every intermediate description.

    Raises
    ------
    ValidationError
        If :func:`lftflat.model.validate` reports any diagnostic.
    FlattenError
        If a merge precondition fails.
    """
    diags = validate(tree)
    if diags:
        raise ValidationError(f"model has {len(diags)} diagnostic(s): {diags[0]}", diags)
    done: dict[str, FundamentalDescription] = {}
    for nid in tree.post_order():
        nsb = tree.nsbs[nid]
        fd = merge_children(nsb, [done.pop(c) for c in nsb.children])
        if on_merge is not None:
            on_merge(nid, fd)
        done[nid] = fd
    return done[tree.root]


def signal_labels(fd: FundamentalDescription) -> tuple[list[str], list[str]]:
    """Names of the gamma rows and columns, e.g. ``S0/S2/G21.u[1]``."""
    rows = [f"{p}.u[{k}]" for p, b in zip(fd.dynamic_paths, fd.dynamics) for k in range(b.n_inputs)]
    rows += [f"{p}.p[{k}]" for p, b in zip(fd.uncertainty_paths, fd.uncertainties) for k in range(b.dim)]
    rows += [f"ext.out[{k}]" for k in range(fd.n_ext_out)]
    cols = [f"{p}.y[{k}]" for p, b in zip(fd.dynamic_paths, fd.dynamics) for k in range(b.n_outputs)]
    cols += [f"{p}.q[{k}]" for p, b in zip(fd.uncertainty_paths, fd.uncertainties) for k in range(b.dim)]
    cols += [f"ext.in[{k}]" for k in range(fd.n_ext_in)]
    return rows, cols


@dataclass
class SparsityReport:
    shape: tuple[int, int]
    nnz: int
    density: float
    input_width: int
    block_nnz: dict[tuple[str, str], int]
    n_dynamic: int
    n_uncertainty: int

    @property
    def nnz_matches_inputs(self) -> bool:
        return self.nnz == self.input_width

    def to_text(self) -> str:
        lines = [
            f"gamma: {self.shape[0]} x {self.shape[1]}",
            f"nnz: {self.nnz}",
            f"density: {self.density:.6g}",
            f"input width (u + p + y_ext): {self.input_width}",
            f"blocks: {self.n_dynamic} dynamic, {self.n_uncertainty} uncertainty",
            "nnz by block (rows g/d/o, cols g/d/i):",
        ]
        for (r, c), k in self.block_nnz.items():
            lines.append(f"  {r}{c}: {k}")
        return "\n".join(lines)


def sparsity_report(fd: FundamentalDescription) -> SparsityReport:
    rows, cols = fd.gamma.shape
    part = fd.partition
    block_nnz = {(r, c): extract_block(fd.gamma, part, r, c).nnz for r in FD_ROWS for c in FD_COLS}
    size = rows * cols
    return SparsityReport(
        shape=(rows, cols),
        nnz=fd.gamma.nnz,
        density=fd.gamma.nnz / size if size else 0.0,
        input_width=rows,
        block_nnz=block_nnz,
        n_dynamic=len(fd.dynamics),
        n_uncertainty=len(fd.uncertainties),
    )
