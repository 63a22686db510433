"""Nested sub-blocks, the model tree, and the model file format.

A model file is YAML (JSON is accepted too)::

    root: S0
    nsbs:
      - id: S3
        dynamics:
          - {id: G31, inputs: 2, outputs: 3, ss: {A: [[0.5]], B: ..., C: ..., D: ...}}
        uncertainties:
          - {id: D31, dim: 1, bound: 1.0}
        children: []
        ext_in: 1
        ext_out: 2
        edges:
          - {from: D31.q[0], to: G31.u[0]}
          - {from: ext.in[0], to: G31.u[1]}

Port references are ``block.y[k]`` / ``block.u[k]`` for dynamic blocks,
``unc.q[k]`` / ``unc.p[k]`` for uncertainty blocks, ``child.out[k]`` /
``child.in[k]`` for child NSBs and ``ext.in[k]`` / ``ext.out[k]`` for the
NSB's own external ports.  Indices are 0-based.

Inside an NSB, signals are ordered dynamic blocks first (declaration order),
then uncertainty blocks, then children, then external ports.  The routing
matrix has rows ``(u, p, u_s, y_ext)`` and columns ``(y, q, y_s, u_ext)``,
tagged ``g, d, s, o`` and ``g, d, s, i``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np
import yaml

from .sparsemat import BlockPartition, SparseBinaryMatrix, extract_block
from .ssmodel import DynamicBlock, StateSpace, UncertaintyBlock, is_stable, spectral_radius

__all__ = [
    "ModelError",
    "ParseError",
    "ValidationError",
    "DuplicateDriveError",
    "PortRef",
    "Edge",
    "Nsb",
    "ModelTree",
    "Diagnostic",
    "parse_model",
    "load_model",
    "render_model",
    "tree_to_dict",
    "tree_from_dict",
    "validate",
    "insert_dummy_blocks",
    "nsb_edges",
    "build_gamma",
]

ROW_LABELS = ("g", "d", "s", "o")
COL_LABELS = ("g", "d", "s", "i")
EXT = "ext"


class ModelError(Exception):
    """Base class for model construction errors."""


class ParseError(ModelError):
    """Malformed model text or a reference that cannot be resolved."""


class ValidationError(ModelError):
    """A structurally invalid model."""

    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


class DuplicateDriveError(ValidationError):
    """Two edges drive the same input port."""


# ports ---------------------------------------------------------------------

SOURCE_KINDS = {"y": "dyn_out", "q": "unc_out", "out": "child_ext_out", "in": "nsb_ext_in"}
SINK_KINDS = {"u": "dyn_in", "p": "unc_in", "in": "child_ext_in", "out": "nsb_ext_out"}
_KIND_SUFFIX = {
    "dyn_out": "y",
    "dyn_in": "u",
    "unc_out": "q",
    "unc_in": "p",
    "child_ext_out": "out",
    "child_ext_in": "in",
    "nsb_ext_in": "in",
    "nsb_ext_out": "out",
}
_PORT_RE = re.compile(r"^\s*([A-Za-z_][\w\-]*)\.(y|u|q|p|in|out)\[(\d+)\]\s*$")


@dataclass(frozen=True, order=True)
class PortRef:
    kind: str
    block_or_child: str
    index: int

    def __str__(self):
        return f"{self.block_or_child}.{_KIND_SUFFIX[self.kind]}[{self.index}]"

    @property
    def is_source(self) -> bool:
        return self.kind in ("dyn_out", "unc_out", "child_ext_out", "nsb_ext_in")


@dataclass(frozen=True)
class Edge:
    src: PortRef
    dst: PortRef

    def __str__(self):
        return f"{self.src} -> {self.dst}"


# tree ----------------------------------------------------------------------


@dataclass(frozen=True)
class Nsb:
    """A nested sub-block and its local routing matrix.

    ``child_ports`` holds ``(n_ext_in, n_ext_out)`` of each child, in the
    order of ``children``; it fixes the width of the ``s`` partition blocks.
    """

    id: str
    dynamics: tuple[DynamicBlock, ...]
    uncertainties: tuple[UncertaintyBlock, ...]
    children: tuple[str, ...]
    child_ports: tuple[tuple[int, int], ...]
    n_ext_in: int
    n_ext_out: int
    gamma: SparseBinaryMatrix

    @property
    def partition(self) -> BlockPartition:
        m = sum(b.n_inputs for b in self.dynamics)
        p = sum(b.n_outputs for b in self.dynamics)
        d = sum(b.dim for b in self.uncertainties)
        s_in = sum(ci for ci, _ in self.child_ports)
        s_out = sum(co for _, co in self.child_ports)
        return BlockPartition((m, d, s_in, self.n_ext_out), (p, d, s_out, self.n_ext_in), ROW_LABELS, COL_LABELS)

    def block(self, row: str, col: str) -> SparseBinaryMatrix:
        return extract_block(self.gamma, self.partition, row, col)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def row_ports(self) -> list[PortRef]:
        """Sink port of each gamma row, in canonical order."""
        out = [PortRef("dyn_in", b.id, k) for b in self.dynamics for k in range(b.n_inputs)]
        out += [PortRef("unc_in", b.id, k) for b in self.uncertainties for k in range(b.dim)]
        out += [PortRef("child_ext_in", c, k) for c, (ci, _) in zip(self.children, self.child_ports) for k in range(ci)]
        out += [PortRef("nsb_ext_out", EXT, k) for k in range(self.n_ext_out)]
        return out

    def col_ports(self) -> list[PortRef]:
        """Source port of each gamma column, in canonical order."""
        out = [PortRef("dyn_out", b.id, k) for b in self.dynamics for k in range(b.n_outputs)]
        out += [PortRef("unc_out", b.id, k) for b in self.uncertainties for k in range(b.dim)]
        out += [PortRef("child_ext_out", c, k) for c, (_, co) in zip(self.children, self.child_ports) for k in range(co)]
        out += [PortRef("nsb_ext_in", EXT, k) for k in range(self.n_ext_in)]
        return out


@dataclass(frozen=True)
class ModelTree:
    nsbs: dict[str, Nsb]
    root: str

    def __getitem__(self, nsb_id: str) -> Nsb:
        return self.nsbs[nsb_id]

    @property
    def root_nsb(self) -> Nsb:
        return self.nsbs[self.root]

    def post_order(self) -> list[str]:
        """NSB ids, children before parents.

        NSBs already visited (shared children, cycles) are skipped, so
        this terminates on malformed trees too.
        """
        order, seen, stack = [], set(), [(self.root, False)]
        while stack:
            nid, expanded = stack.pop()
            if expanded:
                order.append(nid)
                continue
            if nid in seen or nid not in self.nsbs:
                continue
            seen.add(nid)
            stack.append((nid, True))
            for c in reversed(self.nsbs[nid].children):
                stack.append((c, False))
        return order

    def pre_order(self) -> list[tuple[str, tuple[str, ...]]]:
        """``(id, path)`` pairs, parents before children; paths start at the root."""
        out, seen, stack = [], set(), [(self.root, (self.root,))]
        while stack:
            nid, path = stack.pop()
            if nid in seen or nid not in self.nsbs:
                continue
            seen.add(nid)
            out.append((nid, path))
            for c in reversed(self.nsbs[nid].children):
                stack.append((c, path + (c,)))
        return out

    def depth(self) -> int:
        return max(len(path) for _, path in self.pre_order())

    def iter_blocks(self) -> Iterator[tuple[str, DynamicBlock | UncertaintyBlock]]:
        """``(path, block)`` for every fundamental block, pre-order."""
        for nid, path in self.pre_order():
            prefix = "/".join(path)
            nsb = self.nsbs[nid]
            for b in nsb.dynamics:
                yield f"{prefix}/{b.id}", b
            for b in nsb.uncertainties:
                yield f"{prefix}/{b.id}", b

    @property
    def realized(self) -> bool:
        return all(b.realized for n in self.nsbs.values() for b in n.dynamics)

    def replace_nsb(self, nsb: Nsb) -> ModelTree:
        nsbs = dict(self.nsbs)
        nsbs[nsb.id] = nsb
        return ModelTree(nsbs, self.root)


# gamma construction --------------------------------------------------------


def _port_index(ports: list[PortRef]) -> dict[PortRef, int]:
    return {p: i for i, p in enumerate(ports)}


def build_gamma(
    nsb_id: str,
    dynamics,
    uncertainties,
    children,
    child_ports,
    n_ext_in: int,
    n_ext_out: int,
    edges,
) -> Nsb:
    """Construct an :class:`Nsb` from an edge list over named ports."""
    shell = Nsb(
        nsb_id, tuple(dynamics), tuple(uncertainties), tuple(children), tuple(child_ports),
        n_ext_in, n_ext_out, SparseBinaryMatrix(0, 0),
    )
    rows = _port_index(shell.row_ports())
    cols = _port_index(shell.col_ports())
    drive: dict[int, Edge] = {}
    for e in edges:
        if e.dst not in rows:
            raise ParseError(f"NSB {nsb_id}: dangling port reference {e.dst}")
        if e.src not in cols:
            raise ParseError(f"NSB {nsb_id}: dangling port reference {e.src}")
        r = rows[e.dst]
        if r in drive:
            raise DuplicateDriveError(
                f"NSB {nsb_id}: input {e.dst} is driven twice ({drive[r].src} and {e.src})"
            )
        drive[r] = e
    entries = [(r, cols[e.src]) for r, e in drive.items()]
    gamma = SparseBinaryMatrix.from_entries(len(rows), len(cols), entries)
    return replace(shell, gamma=gamma)


def nsb_edges(nsb: Nsb) -> list[Edge]:
    """Edge list equivalent to ``nsb.gamma``, ordered by destination."""
    rp, cp = nsb.row_ports(), nsb.col_ports()
    return [Edge(cp[c], rp[r]) for r, c in zip(nsb.gamma.rows.tolist(), nsb.gamma.cols.tolist())]


# parsing -------------------------------------------------------------------


class _MarkedDict(dict):
    line: Optional[int] = None


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    d = _MarkedDict(loader.construct_mapping(node, deep=True))
    d.line = node.start_mark.line + 1
    return d


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _where(obj, path: str) -> str:
    line = getattr(obj, "line", None)
    return f"{path} (line {line})" if line else path


def _fields(obj, path, required, optional) -> dict:
    if not isinstance(obj, dict):
        raise ParseError(f"{_where(obj, path)}: expected a mapping, got {type(obj).__name__}")
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        raise ParseError(f"{_where(obj, path)}: unknown key(s) {sorted(map(str, unknown))}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ParseError(f"{_where(obj, path)}: missing key(s) {missing}")
    out = {k: obj[k] for k in required}
    out.update({k: obj.get(k, v) for k, v in optional.items()})
    return out


def _count(v, where) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise ParseError(f"{where}: expected a nonnegative integer, got {v!r}")
    return v


def _number(v, where) -> float:
    if isinstance(v, bool):
        raise ParseError(f"{where}: expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        # YAML 1.1 reads exponent forms without a dot (1e-3) as strings
        try:
            return float(v)
        except ValueError:
            pass
    raise ParseError(f"{where}: expected a number, got {v!r}")


def _name(v, where) -> str:
    if not isinstance(v, str) or not re.fullmatch(r"[A-Za-z_][\w\-]*", v):
        raise ParseError(f"{where}: invalid identifier {v!r}")
    return v


def _list(v, where) -> list:
    if v is None:
        return []
    if not isinstance(v, list):
        raise ParseError(f"{where}: expected a list")
    return v


def _matrix(v, shape, where) -> np.ndarray:
    def flat(x):
        if isinstance(x, list):
            for y in x:
                yield from flat(y)
        else:
            yield _number(x, where)

    if not isinstance(v, list):
        raise ParseError(f"{where}: expected a numeric array")
    vals = list(flat(v))
    if len(vals) != shape[0] * shape[1]:
        raise ParseError(f"{where}: expected {shape[0]}x{shape[1]} entries, got {len(vals)}")
    return np.array(vals, dtype=float).reshape(shape)


def _parse_ss(raw, m, p, where) -> StateSpace:
    f = _fields(raw, where, ("A", "B", "C", "D"), {})
    a = f["A"]
    if not isinstance(a, list):
        raise ParseError(f"{where}.A: expected a numeric array")
    if a and all(isinstance(r, list) for r in a):
        n = len(a)
    else:
        n = int(round(np.sqrt(len(a))))
    return StateSpace(
        _matrix(a, (n, n), f"{where}.A"),
        _matrix(f["B"], (n, m), f"{where}.B"),
        _matrix(f["C"], (p, n), f"{where}.C"),
        _matrix(f["D"], (p, m), f"{where}.D"),
    )


def _parse_port(text, where, want_source: bool) -> PortRef:
    if not isinstance(text, str):
        raise ParseError(f"{where}: expected a port reference string, got {text!r}")
    mt = _PORT_RE.match(text)
    if not mt:
        raise ParseError(f"{where}: malformed port reference {text!r}")
    name, suffix, idx = mt.group(1), mt.group(2), int(mt.group(3))
    kinds = SOURCE_KINDS if want_source else SINK_KINDS
    if suffix not in kinds:
        role = "source" if want_source else "destination"
        raise ParseError(f"{where}: {text!r} cannot be an edge {role}")
    kind = kinds[suffix]
    if suffix in ("in", "out"):
        if name == EXT:
            kind = "nsb_ext_in" if suffix == "in" else "nsb_ext_out"
            if kind not in kinds.values():
                raise ParseError(f"{where}: {text!r} cannot be an edge {'source' if want_source else 'destination'}")
        else:
            kind = "child_ext_out" if suffix == "out" else "child_ext_in"
            if kind not in kinds.values():
                raise ParseError(f"{where}: {text!r} cannot be an edge {'source' if want_source else 'destination'}")
    return PortRef(kind, name, idx)


def tree_from_dict(doc) -> ModelTree:
    """Build a :class:`ModelTree` from the decoded document."""
    top = _fields(doc, "model", ("nsbs", "root"), {})
    root = _name(top["root"], "root")
    raw_nsbs = []
    seen = set()
    for i, raw in enumerate(_list(top["nsbs"], "nsbs")):
        path = f"nsbs[{i}]"
        f = _fields(
            raw, path, ("id",),
            {"dynamics": [], "uncertainties": [], "children": [], "ext_in": 0, "ext_out": 0, "edges": []},
        )
        nid = _name(f["id"], f"{path}.id")
        if nid == EXT:
            raise ParseError(f"{_where(raw, path)}: '{EXT}' is reserved")
        if nid in seen:
            raise ParseError(f"{_where(raw, path)}: duplicate NSB id {nid!r}")
        seen.add(nid)
        raw_nsbs.append((nid, path, raw, f))
    if root not in seen:
        raise ParseError(f"root: unknown NSB id {root!r}")

    ports = {
        nid: (_count(f["ext_in"], _where(raw, f"{path}.ext_in")), _count(f["ext_out"], _where(raw, f"{path}.ext_out")))
        for nid, path, raw, f in raw_nsbs
    }

    nsbs: dict[str, Nsb] = {}
    for nid, path, raw, f in raw_nsbs:
        names: set[str] = set()

        def claim(name, where):
            if name == EXT or name in names:
                raise ParseError(f"{where}: duplicate or reserved name {name!r} in NSB {nid}")
            names.add(name)

        dyn = []
        for j, rd in enumerate(_list(f["dynamics"], f"{path}.dynamics")):
            w = f"{path}.dynamics[{j}]"
            g = _fields(rd, w, ("id", "inputs", "outputs"), {"ss": None})
            bid = _name(g["id"], f"{w}.id")
            claim(bid, _where(rd, w))
            m, p = _count(g["inputs"], _where(rd, f"{w}.inputs")), _count(g["outputs"], _where(rd, f"{w}.outputs"))
            ss = None if g["ss"] is None else _parse_ss(g["ss"], m, p, f"{w}.ss")
            dyn.append(DynamicBlock(bid, m, p, ss))
        unc = []
        for j, ru in enumerate(_list(f["uncertainties"], f"{path}.uncertainties")):
            w = f"{path}.uncertainties[{j}]"
            g = _fields(ru, w, ("id", "dim"), {"bound": 1.0})
            bid = _name(g["id"], f"{w}.id")
            claim(bid, _where(ru, w))
            bound = _number(g["bound"], _where(ru, f"{w}.bound"))
            if not bound >= 0 or not np.isfinite(bound):
                raise ParseError(f"{_where(ru, w)}: bound must be finite and nonnegative")
            unc.append(UncertaintyBlock(bid, _count(g["dim"], _where(ru, f"{w}.dim")), bound))
        children = []
        for j, c in enumerate(_list(f["children"], f"{path}.children")):
            c = _name(c, f"{path}.children[{j}]")
            if c not in ports:
                raise ParseError(f"{_where(raw, path)}: unknown child NSB {c!r}")
            claim(c, _where(raw, path))
            children.append(c)
        edges = []
        for j, re_ in enumerate(_list(f["edges"], f"{path}.edges")):
            w = f"{path}.edges[{j}]"
            g = _fields(re_, w, ("from", "to"), {})
            src = _parse_port(g["from"], _where(re_, f"{w}.from"), True)
            dst = _parse_port(g["to"], _where(re_, f"{w}.to"), False)
            for ref in (src, dst):
                if ref.block_or_child != EXT and ref.block_or_child not in names:
                    raise ParseError(f"{_where(re_, w)}: unknown block or child {ref.block_or_child!r}")
            edges.append(Edge(src, dst))
        ext_in, ext_out = ports[nid]
        nsbs[nid] = build_gamma(nid, dyn, unc, children, [ports[c] for c in children], ext_in, ext_out, edges)
    return ModelTree(nsbs, root)


def parse_model(text: str) -> ModelTree:
    """Parse model-file text into a :class:`ModelTree`.

    Raises
    ------
    ParseError
        Syntax errors (with line and column), unknown keys, unresolved ids
        and dangling port references.
    DuplicateDriveError
        If two edges drive the same input.
    """
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        loc = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise ParseError(f"syntax error: {loc}{exc.problem or exc}") from None
    except yaml.YAMLError as exc:
        raise ParseError(f"syntax error: {exc}") from None
    return tree_from_dict(doc)


def load_model(path) -> ModelTree:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read())


def _matrix_to_list(a: np.ndarray) -> list:
    return [[float(v) for v in row] for row in a]


def tree_to_dict(tree: ModelTree) -> dict:
    nsbs = []
    for nid in [tree.root] + [k for k in tree.nsbs if k != tree.root]:
        n = tree.nsbs[nid]
        dyn = []
        for b in n.dynamics:
            d = {"id": b.id, "inputs": b.n_inputs, "outputs": b.n_outputs}
            if b.realization is not None:
                ss = b.realization
                d["ss"] = {k: _matrix_to_list(getattr(ss, k)) for k in "ABCD"}
            dyn.append(d)
        nsbs.append({
            "id": n.id,
            "dynamics": dyn,
            "uncertainties": [{"id": u.id, "dim": u.dim, "bound": float(u.norm_bound)} for u in n.uncertainties],
            "children": list(n.children),
            "ext_in": n.n_ext_in,
            "ext_out": n.n_ext_out,
            "edges": [{"from": str(e.src), "to": str(e.dst)} for e in nsb_edges(n)],
        })
    return {"root": tree.root, "nsbs": nsbs}


def render_model(tree: ModelTree) -> str:
    """Model-file text for ``tree``; ``parse_model`` inverts it exactly."""
    return yaml.safe_dump(tree_to_dict(tree), sort_keys=False, default_flow_style=None, width=100)


# validation ----------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    code: str
    nsb: Optional[str]
    message: str

    def __str__(self):
        where = f"[{self.nsb}] " if self.nsb else ""
        return f"{self.code}: {where}{self.message}"


def _tree_diagnostics(tree: ModelTree) -> list[Diagnostic]:
    out = []
    if tree.root not in tree.nsbs:
        return [Diagnostic("tree", None, f"root {tree.root!r} is not a defined NSB")]
    parent: dict[str, str] = {}
    for nid, n in tree.nsbs.items():
        for c in n.children:
            if c not in tree.nsbs:
                out.append(Diagnostic("tree", nid, f"unknown child {c!r}"))
            elif c in parent:
                out.append(Diagnostic("tree", nid, f"child {c!r} is shared with {parent[c]!r}"))
            else:
                parent[c] = nid
    if tree.root in parent:
        out.append(Diagnostic("tree", tree.root, f"root is a child of {parent[tree.root]!r}"))
    # reachability from the root also catches cycles not through the root
    seen, stack = set(), [tree.root]
    while stack:
        nid = stack.pop()
        if nid in seen:
            out.append(Diagnostic("tree", nid, "cycle in NSB tree"))
            continue
        seen.add(nid)
        stack.extend(c for c in tree.nsbs[nid].children if c in tree.nsbs)
    for nid in tree.nsbs:
        if nid not in seen:
            out.append(Diagnostic("tree", nid, "NSB is not reachable from the root"))
    return out


def _nsb_diagnostics(tree: ModelTree, n: Nsb) -> list[Diagnostic]:
    out = []
    if len(n.child_ports) != len(n.children):
        out.append(Diagnostic("dims", n.id, "child port table does not match the child list"))
        return out
    for c, ports in zip(n.children, n.child_ports):
        child = tree.nsbs.get(c)
        if child is not None and ports != (child.n_ext_in, child.n_ext_out):
            out.append(Diagnostic(
                "dims", n.id,
                f"child {c} declares {child.n_ext_in} in / {child.n_ext_out} out, "
                f"partition expects {ports[0]} / {ports[1]}",
            ))
    part = n.partition
    if n.gamma.shape != (part.nrows, part.ncols):
        out.append(Diagnostic(
            "dims", n.id,
            f"gamma is {n.gamma.nrows}x{n.gamma.ncols}, block dimensions require {part.nrows}x{part.ncols}",
        ))
        return out
    rows, cols = n.row_ports(), n.col_ports()
    counts = n.gamma.row_counts()
    for r in np.flatnonzero(counts == 0).tolist():
        out.append(Diagnostic("undriven", n.id, f"input {rows[r]} is not driven by any output"))
    for r in np.flatnonzero(counts > 1).tolist():
        out.append(Diagnostic("multi_drive", n.id, f"input {rows[r]} is driven by {counts[r]} outputs"))
    oi = n.block("o", "i")
    ro, ci = part.row_range("o").start, part.col_range("i").start
    for r, c in zip(oi.rows.tolist(), oi.cols.tolist()):
        out.append(Diagnostic(
            "feedthrough", n.id,
            f"Γ_oi nonzero at ({r},{c}): {cols[ci + c]} -> {rows[ro + r]} is a direct external wire",
        ))
    for b in n.dynamics:
        if b.realization is not None and not is_stable(b.realization):
            out.append(Diagnostic(
                "unstable", n.id,
                f"block {b.id} is not stable (spectral radius {spectral_radius(b.realization.A):.6g})",
            ))
    return out


def validate(tree: ModelTree) -> list[Diagnostic]:
    """All well-posedness problems of ``tree``; an empty list means valid."""
    out = _tree_diagnostics(tree)
    for n in tree.nsbs.values():
        out.extend(_nsb_diagnostics(tree, n))
    realized = [b.realized for n in tree.nsbs.values() for b in n.dynamics]
    if any(realized) and not all(realized):
        out.append(Diagnostic("realization", None, "some dynamic blocks are realized and others are not"))
    return out


def insert_dummy_blocks(tree: ModelTree) -> ModelTree:
    """Break every direct external-in to external-out wire with a unity block.

    Each nonzero entry of an NSB's ``(o, i)`` block becomes a 1x1 static
    block with ``D = 1``.  The block is realized when the rest of the model
    is, so simulation behaviour is unchanged.
    """
    realize = tree.realized
    out = tree
    for nid, n in tree.nsbs.items():
        part = n.partition
        if n.gamma.shape != (part.nrows, part.ncols):
            continue
        oi = n.block("o", "i")
        if oi.nnz == 0:
            continue
        taken = {b.id for b in n.dynamics} | {u.id for u in n.uncertainties} | set(n.children)
        dyn = list(n.dynamics)
        edges = []
        wires = set(zip(oi.rows.tolist(), oi.cols.tolist()))
        for e in nsb_edges(n):
            if e.src.kind == "nsb_ext_in" and e.dst.kind == "nsb_ext_out" and (e.dst.index, e.src.index) in wires:
                bid = f"ft_{e.src.index}_{e.dst.index}"
                while bid in taken:
                    bid += "_"
                taken.add(bid)
                dyn.append(DynamicBlock(bid, 1, 1, StateSpace.static([[1.0]]) if realize else None))
                edges.append(Edge(e.src, PortRef("dyn_in", bid, 0)))
                edges.append(Edge(PortRef("dyn_out", bid, 0), e.dst))
            else:
                edges.append(e)
        new = build_gamma(nid, dyn, n.uncertainties, n.children, n.child_ports, n.n_ext_in, n.n_ext_out, edges)
        out = out.replace_nsb(new)
    return out
