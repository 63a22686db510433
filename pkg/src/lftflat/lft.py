"""Standard LFT form of a flat model, and its export bundle.

The LFT loop is::

    p = G_pq q + G_pw w
    z = G_zq q + G_zw w
    q = Delta(p)
    w = gamma_tilde z

with ``w = (u, p)`` and ``z = (y, q)``.  The four operator blocks have the
fixed structure ``G_pq = 0``, ``G_pw = [0 I]``, ``G_zq = [0; I]`` and
``G_zw = [[G, 0], [0, 0]]``, so only ``G``, ``Delta`` and ``gamma_tilde``
carry model data.

Bundle members (the archive is a zip of the same files):

``manifest.json``
    dimensions, block provenance, Delta block boundaries.
``gamma_tilde.coord``
    header ``rows cols nnz`` then sorted 0-based ``r c`` lines.
``Gbar.A`` .. ``Gbar.D``
    realization of the operator mapping ``(q, w)`` to ``(p, z)``; one
    matrix row per line, present only for realized models.
"""

from __future__ import annotations

import io
import json
import tarfile
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import scipy.io
import scipy.sparse

from .flatten import FundamentalDescription
from .sparsemat import SparseBinaryMatrix
from .ssmodel import DynamicBlock, StateSpace, UncertaintyAggregate, UncertaintyBlock

__all__ = [
    "LftError",
    "StructuredOperator",
    "BlockInfo",
    "LftModel",
    "to_lft",
    "check_wellposed",
    "static_loop_matrix",
    "bundle_files",
    "export_lft",
    "write_export",
    "import_lft",
    "FORMATS",
]

FORMATS = ("archive", "mm-bundle")
WELLPOSED_COND_LIMIT = 1e12
_BUNDLE_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class LftError(ValueError):
    """The description cannot be put in (or read back from) LFT form."""


@dataclass(frozen=True)
class StructuredOperator:
    """Block matrix whose entries are ``"0"``, ``"I"`` or ``"G"``.

    The shape-level identities of the LFT form are checked on these symbols,
    never on numbers.
    """

    row_sizes: tuple[int, ...]
    col_sizes: tuple[int, ...]
    grid: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if len(self.grid) != len(self.row_sizes) or any(len(r) != len(self.col_sizes) for r in self.grid):
            raise LftError("operator grid does not match its block sizes")
        for i, row in enumerate(self.grid):
            for j, sym in enumerate(row):
                if sym not in ("0", "I", "G"):
                    raise LftError(f"unknown operator symbol {sym!r}")
                if sym == "I" and self.row_sizes[i] != self.col_sizes[j]:
                    raise LftError("identity block must be square")

    @property
    def shape(self) -> tuple[int, int]:
        return (sum(self.row_sizes), sum(self.col_sizes))

    def instantiate(self, G: np.ndarray) -> np.ndarray:
        """Dense matrix with ``G`` substituted for the ``"G"`` blocks."""
        out = np.zeros(self.shape)
        r0 = 0
        for i, row in enumerate(self.grid):
            c0 = 0
            for j, sym in enumerate(row):
                h, w = self.row_sizes[i], self.col_sizes[j]
                if sym == "I":
                    out[r0 : r0 + h, c0 : c0 + w] = np.eye(h)
                elif sym == "G":
                    out[r0 : r0 + h, c0 : c0 + w] = G
                c0 += w
            r0 += h
        return out

    def to_dict(self) -> dict:
        return {"rows": list(self.row_sizes), "cols": list(self.col_sizes), "blocks": [list(r) for r in self.grid]}


@dataclass(frozen=True)
class BlockInfo:
    path: str
    n_inputs: int
    n_outputs: int
    n_states: Optional[int]


@dataclass(frozen=True)
class LftModel:
    G: DynamicBlock
    Delta: UncertaintyAggregate
    gamma_tilde: SparseBinaryMatrix
    dynamic_blocks: tuple[BlockInfo, ...]
    G_pq: StructuredOperator
    G_pw: StructuredOperator
    G_zq: StructuredOperator
    G_zw: StructuredOperator

    @property
    def m(self) -> int:
        return self.G.n_inputs

    @property
    def n_outputs_G(self) -> int:
        return self.G.n_outputs

    @property
    def d(self) -> int:
        return self.Delta.dim

    @property
    def dims(self) -> dict[str, int]:
        return {
            "p": self.d,
            "q": self.d,
            "w": self.G.n_inputs + self.d,
            "z": self.G.n_outputs + self.d,
        }

    @property
    def uncertainty_paths(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.Delta.blocks)

    @property
    def realized(self) -> bool:
        return self.G.realized

    def gbar(self) -> StateSpace:
        """Realization of the map ``(q, w) -> (p, z)``."""
        ss = self.G.realization
        if ss is None:
            raise LftError("G is structural; no realization to export")
        top = [[self.G_pq, self.G_pw], [self.G_zq, self.G_zw]]
        D = np.block([[op.instantiate(ss.D) for op in row] for row in top])
        # B and C pick up G's input and output matrices at the "G" position
        B = _embed_columns(top, ss.B, ss.nstates)
        C = _embed_rows(top, ss.C, ss.nstates)
        return StateSpace(ss.A, B, C, D)


def _g_position(top):
    r0 = 0
    for brow in top:
        c0 = 0
        for op in brow:
            ri = 0
            for i, row in enumerate(op.grid):
                ci = 0
                for j, sym in enumerate(row):
                    if sym == "G":
                        return r0 + ri, c0 + ci
                    ci += op.col_sizes[j]
                ri += op.row_sizes[i]
            c0 += op.shape[1]
        r0 += brow[0].shape[0]
    raise LftError("no G block in operator")


def _embed_columns(top, B, n):
    ncols = sum(op.shape[1] for op in top[0])
    _, c = _g_position(top)
    out = np.zeros((n, ncols))
    out[:, c : c + B.shape[1]] = B
    return out


def _embed_rows(top, C, n):
    nrows = sum(row[0].shape[0] for row in top)
    r, _ = _g_position(top)
    out = np.zeros((nrows, n))
    out[r : r + C.shape[0], :] = C
    return out


def _operators(m: int, p: int, d: int):
    return (
        StructuredOperator((d,), (d,), (("0",),)),
        StructuredOperator((d,), (m, d), (("0", "I"),)),
        StructuredOperator((p, d), (d,), (("0",), ("I",))),
        StructuredOperator((p, d), (m, d), (("G", "0"), ("0", "0"))),
    )


def _lft_from_parts(G, unc_blocks, gamma_tilde, infos) -> LftModel:
    d = sum(b.dim for b in unc_blocks)
    if gamma_tilde.shape != (G.n_inputs + d, G.n_outputs + d):
        raise LftError(
            f"gamma_tilde is {gamma_tilde.shape}, expected {(G.n_inputs + d, G.n_outputs + d)}"
        )
    return LftModel(
        G, UncertaintyAggregate(tuple(unc_blocks)), gamma_tilde, tuple(infos),
        *_operators(G.n_inputs, G.n_outputs, d),
    )


def to_lft(fd: FundamentalDescription) -> LftModel:
    """LFT form of a port-free fundamental description.

    Raises
    ------
    LftError
        If the description still has external inputs or outputs.  The LFT
        identification covers the analysis-only case; models with ports
        should first be closed or have their ports dropped by the caller.
    """
    if fd.n_ext_in or fd.n_ext_out:
        raise LftError(
            f"model has {fd.n_ext_in} external input(s) and {fd.n_ext_out} external output(s); "
            "the LFT form requires a port-free model"
        )
    G = fd.G
    if not isinstance(G, DynamicBlock) or G.id != "G":
        G = DynamicBlock("G", G.n_inputs, G.n_outputs, G.realization)
    infos = [
        BlockInfo(path, b.n_inputs, b.n_outputs, b.realization.nstates if b.realized else None)
        for path, b in zip(fd.dynamic_paths, fd.dynamics)
    ]
    unc = [UncertaintyBlock(path, b.dim, b.norm_bound) for path, b in zip(fd.uncertainty_paths, fd.uncertainties)]
    return _lft_from_parts(G, unc, fd.gamma, infos)


def _delta_matrix(delta, lft: LftModel) -> np.ndarray:
    if hasattr(delta, "gain_matrix"):
        return delta.gain_matrix(lft.uncertainty_paths)
    mat = np.asarray(delta, dtype=float)
    if mat.shape != (lft.d, lft.d):
        raise LftError(f"Delta sample is {mat.shape}, expected {(lft.d, lft.d)}")
    return mat


def static_loop_matrix(lft: LftModel, delta) -> np.ndarray:
    """Matrix of the per-step linear system in ``(q, w)``."""
    gbar = lft.gbar()
    d, nw = lft.d, lft.dims["w"]
    Dl = _delta_matrix(delta, lft)
    Gt = lft.gamma_tilde.toarray(float)
    Dpq, Dpw = gbar.D[:d, :d], gbar.D[:d, d:]
    Dzq, Dzw = gbar.D[d:, :d], gbar.D[d:, d:]
    return np.block([
        [np.eye(d) - Dl @ Dpq, -Dl @ Dpw],
        [-Gt @ Dzq, np.eye(nw) - Gt @ Dzw],
    ])


def check_wellposed(lft: LftModel, delta_sample, cond_limit: float = WELLPOSED_COND_LIMIT) -> bool:
    """True when the static loop has a unique, numerically safe solution."""
    M = static_loop_matrix(lft, delta_sample)
    if M.size == 0:
        return True
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(M)
    return bool(np.isfinite(cond) and cond < cond_limit)


# export --------------------------------------------------------------------


def _fmt_matrix(a: np.ndarray) -> bytes:
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in a).encode()


def _parse_matrix(data: bytes, shape) -> np.ndarray:
    lines = data.decode().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) != shape[0]:
        raise LftError(f"matrix has {len(lines)} rows, expected {shape[0]}")
    out = np.zeros(shape)
    for i, line in enumerate(lines):
        vals = line.split()
        if len(vals) != shape[1]:
            raise LftError(f"matrix row {i} has {len(vals)} entries, expected {shape[1]}")
        out[i] = [float(v) for v in vals]
    return out


def _coord(m: SparseBinaryMatrix) -> bytes:
    lines = [f"{m.nrows} {m.ncols} {m.nnz}"]
    lines += [f"{r} {c}" for r, c in zip(m.rows.tolist(), m.cols.tolist())]
    return ("\n".join(lines) + "\n").encode()


def _parse_coord(data: bytes) -> SparseBinaryMatrix:
    lines = data.decode().split()
    try:
        nrows, ncols, nnz = (int(v) for v in lines[:3])
        vals = [int(v) for v in lines[3:]]
    except ValueError as exc:
        raise LftError(f"malformed coordinate file: {exc}") from None
    if len(vals) != 2 * nnz:
        raise LftError("coordinate file entry count does not match its header")
    return SparseBinaryMatrix(nrows, ncols, vals[0::2], vals[1::2])


def _mtx(m: SparseBinaryMatrix) -> bytes:
    buf = io.BytesIO()
    coo = scipy.sparse.coo_matrix((np.ones(m.nnz), (m.rows, m.cols)), shape=m.shape)
    scipy.io.mmwrite(buf, coo, field="pattern")
    return buf.getvalue()


def _manifest(lft: LftModel, files: Sequence[str]) -> dict:
    d_off = lft.Delta.offsets
    in_off = np.cumsum([0] + [b.n_inputs for b in lft.dynamic_blocks]).tolist()
    out_off = np.cumsum([0] + [b.n_outputs for b in lft.dynamic_blocks]).tolist()
    gbar = None
    if lft.realized:
        ss = lft.G.realization
        gbar = {
            "states": ss.nstates,
            "inputs": {"q": lft.d, "u": lft.m, "p": lft.d},
            "outputs": {"p": lft.d, "y": lft.n_outputs_G, "q": lft.d},
        }
    return {
        "format": "lftflat-bundle",
        "version": _BUNDLE_VERSION,
        "dims": {"m": lft.m, "p_out": lft.n_outputs_G, "d": lft.d, **{f"dim_{k}": v for k, v in lft.dims.items()}},
        "dynamic_blocks": [
            {
                "path": b.path,
                "inputs": b.n_inputs,
                "outputs": b.n_outputs,
                "states": b.n_states,
                "input_offset": in_off[i],
                "output_offset": out_off[i],
            }
            for i, b in enumerate(lft.dynamic_blocks)
        ],
        "uncertainty_blocks": [
            {"path": b.id, "dim": b.dim, "bound": float(b.norm_bound), "offset": d_off[i]}
            for i, b in enumerate(lft.Delta.blocks)
        ],
        "delta_boundaries": lft.Delta.boundaries,
        "gamma_tilde": {"rows": lft.gamma_tilde.nrows, "cols": lft.gamma_tilde.ncols, "nnz": lft.gamma_tilde.nnz},
        "gbar": gbar,
        "structure": {
            "G_pq": lft.G_pq.to_dict(),
            "G_pw": lft.G_pw.to_dict(),
            "G_zq": lft.G_zq.to_dict(),
            "G_zw": lft.G_zw.to_dict(),
        },
        "files": sorted(files),
    }


def bundle_files(lft: LftModel, fmt: str = "archive") -> dict[str, bytes]:
    """Bundle members by file name; ``mm-bundle`` adds a Matrix Market copy."""
    if fmt not in FORMATS:
        raise LftError(f"unknown export format {fmt!r}; choose from {FORMATS}")
    files: dict[str, bytes] = {}
    gt = lft.gamma_tilde
    if gt.nrows or gt.ncols:
        files["gamma_tilde.coord"] = _coord(gt)
        if fmt == "mm-bundle":
            files["gamma_tilde.mtx"] = _mtx(gt)
    if lft.realized and (lft.dynamic_blocks or lft.d):
        gbar = lft.gbar()
        for k in "ABCD":
            files[f"Gbar.{k}"] = _fmt_matrix(getattr(gbar, k))
    manifest = _manifest(lft, list(files) + ["manifest.json"])
    files["manifest.json"] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    return dict(sorted(files.items()))


def export_lft(lft: LftModel, fmt: str = "archive") -> bytes:
    """Deterministic bytes: a zip (``archive``) or tar (``mm-bundle``)."""
    files = bundle_files(lft, fmt)
    buf = io.BytesIO()
    if fmt == "archive":
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, data in files.items():
                info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
                info.external_attr = 0o644 << 16
                zf.writestr(info, data)
    else:
        with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tf:
            for name, data in files.items():
                info = tarfile.TarInfo(name)
                info.size = len(data)
                info.mode = 0o644
                info.mtime = 0
                tf.addfile(info, io.BytesIO(data))
    return buf.getvalue()


def write_export(lft: LftModel, path, fmt: str = "archive") -> Path:
    """Write an archive file, or a directory of plain files for ``mm-bundle``."""
    path = Path(path)
    if fmt == "archive":
        path.write_bytes(export_lft(lft, fmt))
    else:
        path.mkdir(parents=True, exist_ok=True)
        for name, data in bundle_files(lft, fmt).items():
            (path / name).write_bytes(data)
    return path


def _read_members(source: Union[bytes, str, Path]) -> dict[str, bytes]:
    if isinstance(source, (str, Path)):
        p = Path(source)
        if p.is_dir():
            return {f.name: f.read_bytes() for f in sorted(p.iterdir()) if f.is_file()}
        source = p.read_bytes()
    buf = io.BytesIO(source)
    if zipfile.is_zipfile(buf):
        with zipfile.ZipFile(buf) as zf:
            return {n: zf.read(n) for n in zf.namelist()}
    buf.seek(0)
    try:
        with tarfile.open(fileobj=buf, mode="r:") as tf:
            return {m.name: tf.extractfile(m).read() for m in tf.getmembers() if m.isfile()}
    except tarfile.TarError:
        raise LftError("not an lftflat export (neither zip, tar nor directory)") from None


def import_lft(source) -> LftModel:
    """Read an export back into an :class:`LftModel`."""
    files = _read_members(source)
    try:
        man = json.loads(files["manifest.json"])
    except KeyError:
        raise LftError("export has no manifest.json") from None
    if man.get("format") != "lftflat-bundle" or man.get("version") != _BUNDLE_VERSION:
        raise LftError("unsupported bundle format or version")
    infos = [BlockInfo(b["path"], b["inputs"], b["outputs"], b["states"]) for b in man["dynamic_blocks"]]
    unc = [UncertaintyBlock(b["path"], b["dim"], b["bound"]) for b in man["uncertainty_blocks"]]
    m, p, d = man["dims"]["m"], man["dims"]["p_out"], man["dims"]["d"]
    gt_meta = man["gamma_tilde"]
    if "gamma_tilde.coord" in files:
        gamma = _parse_coord(files["gamma_tilde.coord"])
    else:
        gamma = SparseBinaryMatrix(gt_meta["rows"], gt_meta["cols"])
    if (gamma.nrows, gamma.ncols, gamma.nnz) != (gt_meta["rows"], gt_meta["cols"], gt_meta["nnz"]):
        raise LftError("gamma_tilde does not match the manifest")
    realization = None
    gb = man["gbar"]
    if gb is not None:
        n = gb["states"]
        nin, nout = 2 * d + m, 2 * d + p
        if "Gbar.D" in files:
            A = _parse_matrix(files["Gbar.A"], (n, n))
            B = _parse_matrix(files["Gbar.B"], (n, nin))
            C = _parse_matrix(files["Gbar.C"], (nout, n))
            D = _parse_matrix(files["Gbar.D"], (nout, nin))
            realization = StateSpace(A, B[:, d : d + m], C[d : d + p, :], D[d : d + p, d : d + m])
        else:
            realization = StateSpace.static(np.zeros((p, m)))
    G = DynamicBlock("G", m, p, realization)
    lft = _lft_from_parts(G, unc, gamma, infos)
    if "Gbar.D" in files and lft.gbar() != StateSpace(A, B, C, D):
        # identity and zero blocks must match the fixed structure exactly
        raise LftError("Gbar does not have the standard LFT structure")
    return lft
