"""Behavioural oracle for the flattening.

The nested simulator never touches the flattening code.  At every time step
it writes out every NSB's block equations and local routing equations as
one dense linear system in all signals of the model (block inputs and
outputs, uncertainty channels, and every NSB's external ports) and solves
it.  The flat simulators work from a :class:`FundamentalDescription` or an
:class:`LftModel`.  Agreement of the two is the evidence that flattening
preserves behaviour.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np
import scipy.linalg

from .flatten import FundamentalDescription
from .lft import LftModel, check_wellposed, static_loop_matrix
from .model import ModelTree
from .ssmodel import UncertaintyBlock

__all__ = [
    "AlgebraicLoopError",
    "DeltaSample",
    "Trajectory",
    "EquivalenceReport",
    "sample_delta",
    "simulate_nested",
    "simulate_fundamental",
    "simulate_lft",
    "equivalence_check",
    "DEFAULT_TOL",
    "DEFAULT_ATOL",
]

DEFAULT_TOL = 1e-9
DEFAULT_ATOL = 1e-12
_SINGULAR_RCOND = 1e-13


class AlgebraicLoopError(RuntimeError):
    """The per-step static equations have no unique solution."""

    def __init__(self, message, signals=()):
        super().__init__(message)
        self.signals = list(signals)


@dataclass(frozen=True)
class DeltaSample:
    """Static gains for every uncertainty block, keyed by provenance path."""

    gains: Mapping[str, np.ndarray]
    bounds: Mapping[str, float]
    seed: Optional[int] = None

    def __post_init__(self):
        for path, g in self.gains.items():
            g = np.asarray(g, dtype=float)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise ValueError(f"gain for {path} must be square")
            if g.size and np.linalg.norm(g, 2) > self.bounds[path] * (1 + 1e-12) + 1e-300:
                raise ValueError(f"gain for {path} exceeds its norm bound {self.bounds[path]}")

    def gain_matrix(self, paths) -> np.ndarray:
        mats = [np.asarray(self.gains[p], dtype=float) for p in paths]
        n = sum(m.shape[0] for m in mats)
        out = np.zeros((n, n))
        k = 0
        for m in mats:
            out[k : k + m.shape[0], k : k + m.shape[0]] = m
            k += m.shape[0]
        return out


def _uncertainty_table(model) -> list[tuple[str, int, float]]:
    if isinstance(model, ModelTree):
        return [(path, b.dim, b.norm_bound) for path, b in model.iter_blocks() if isinstance(b, UncertaintyBlock)]
    if isinstance(model, FundamentalDescription):
        return [(p, b.dim, b.norm_bound) for p, b in zip(model.uncertainty_paths, model.uncertainties)]
    if isinstance(model, LftModel):
        return [(b.id, b.dim, b.norm_bound) for b in model.Delta.blocks]
    raise TypeError(f"cannot sample uncertainties of {type(model).__name__}")


def sample_delta(model, seed: int, fraction: float = 0.9) -> DeltaSample:
    """Random static gains with spectral norm ``fraction * bound``.

    Blocks are drawn in sorted path order, so a tree and its flattened form
    receive identical gains for the same seed.
    """
    rng = np.random.default_rng(seed)
    gains, bounds = {}, {}
    for path, dim, bound in sorted(_uncertainty_table(model)):
        raw = rng.standard_normal((dim, dim))
        if dim and bound > 0:
            gains[path] = raw * (fraction * bound / np.linalg.norm(raw, 2))
        else:
            gains[path] = np.zeros((dim, dim))
        bounds[path] = bound
    return DeltaSample(gains, bounds, seed)


@dataclass
class Trajectory:
    """Simulated signals: root external outputs and every ``q`` channel."""

    outputs: np.ndarray
    q: dict[str, np.ndarray]


def _inputs(inputs, horizon, width) -> np.ndarray:
    if inputs is None:
        return np.zeros((horizon, width))
    return np.asarray(inputs, dtype=float).reshape(horizon, width)


# nested --------------------------------------------------------------------


class _Signals:
    def __init__(self):
        self.index: dict[tuple, slice] = {}
        self.names: list[str] = []

    def add(self, key, width, label):
        start = len(self.names)
        self.index[key] = slice(start, start + width)
        self.names += [f"{label}[{k}]" for k in range(width)]

    def __getitem__(self, key) -> slice:
        return self.index[key]

    def __len__(self):
        return len(self.names)


def simulate_nested(
    tree: ModelTree,
    delta: DeltaSample,
    inputs=None,
    horizon: Optional[int] = None,
    p_injection: Optional[Mapping[str, np.ndarray]] = None,
) -> Trajectory:
    """Simulate the model by solving all NSB equations jointly at each step.

    Parameters
    ----------
    tree : ModelTree
        Fully realized model.
    delta : DeltaSample
    inputs : array_like, shape (horizon, n_ext_in), optional
        Root external inputs; zero if omitted.
    horizon : int, optional
        Number of steps; taken from ``inputs`` when omitted.
    p_injection : mapping of path to array (horizon, dim), optional
        Signals added to the uncertainty inputs ``p``.
    """
    root = tree.root_nsb
    if horizon is None:
        if inputs is None:
            raise ValueError("give inputs or a horizon")
        horizon = np.asarray(inputs).shape[0]
    w = _inputs(inputs, horizon, root.n_ext_in)
    sig = _Signals()
    dyn, unc = [], []
    for nid, path in tree.pre_order():
        nsb = tree.nsbs[nid]
        prefix = "/".join(path)
        for b in nsb.dynamics:
            if b.realization is None:
                raise ValueError(f"block {prefix}/{b.id} has no realization")
            sig.add((prefix, "u", b.id), b.n_inputs, f"{prefix}/{b.id}.u")
            sig.add((prefix, "y", b.id), b.n_outputs, f"{prefix}/{b.id}.y")
            dyn.append((prefix, b))
        for b in nsb.uncertainties:
            sig.add((prefix, "p", b.id), b.dim, f"{prefix}/{b.id}.p")
            sig.add((prefix, "q", b.id), b.dim, f"{prefix}/{b.id}.q")
            unc.append((prefix, b))
        sig.add((prefix, "in"), nsb.n_ext_in, f"{prefix}.in")
        sig.add((prefix, "out"), nsb.n_ext_out, f"{prefix}.out")

    N = len(sig)
    nx = sum(b.realization.nstates for _, b in dyn)
    M = np.zeros((N, N))
    Rx = np.zeros((N, nx))  # rhs contribution of the states
    Rw = np.zeros((N, root.n_ext_in))
    inj_rows: dict[str, slice] = {}
    A = np.zeros((nx, nx))
    Bu = np.zeros((nx, N))

    xo = 0
    for prefix, b in dyn:
        ss = b.realization
        n = ss.nstates
        ys, us = sig[(prefix, "y", b.id)], sig[(prefix, "u", b.id)]
        # y - D u = C x
        M[ys, ys] += np.eye(b.n_outputs)
        M[ys, us] -= ss.D
        Rx[ys, xo : xo + n] = ss.C
        A[xo : xo + n, xo : xo + n] = ss.A
        Bu[xo : xo + n, us] = ss.B
        xo += n
    for prefix, b in unc:
        qs, ps = sig[(prefix, "q", b.id)], sig[(prefix, "p", b.id)]
        # q - Delta p = 0
        M[qs, qs] += np.eye(b.dim)
        M[qs, ps] -= delta.gains[f"{prefix}/{b.id}"]
    for nid, path in tree.pre_order():
        nsb = tree.nsbs[nid]
        prefix = "/".join(path)

        def port_slot(ref):
            if ref.kind in ("dyn_in", "dyn_out", "unc_in", "unc_out"):
                key = {"dyn_in": "u", "dyn_out": "y", "unc_in": "p", "unc_out": "q"}[ref.kind]
                return sig[(prefix, key, ref.block_or_child)].start + ref.index
            if ref.kind in ("child_ext_in", "child_ext_out"):
                key = "in" if ref.kind == "child_ext_in" else "out"
                return sig[(f"{prefix}/{ref.block_or_child}", key)].start + ref.index
            key = "in" if ref.kind == "nsb_ext_in" else "out"
            return sig[(prefix, key)].start + ref.index

        rows, cols = nsb.row_ports(), nsb.col_ports()
        src = nsb.gamma.source_of()
        for r, c in enumerate(src.tolist()):
            i = port_slot(rows[r])
            # sink - source = 0 (an undriven sink is pinned to zero)
            M[i, i] += 1.0
            if c >= 0:
                M[i, port_slot(cols[c])] -= 1.0
        for b in nsb.uncertainties:
            inj_rows[f"{prefix}/{b.id}"] = sig[(prefix, "p", b.id)]
    root_in = sig[(tree.root, "in")]
    M[root_in, root_in] += np.eye(root.n_ext_in)
    Rw[root_in, :] = np.eye(root.n_ext_in)

    if N:
        lu = scipy.linalg.lu_factor(M, check_finite=True) if _nonsingular(M, sig.names) else None
    inj = np.zeros((horizon, N))
    if p_injection:
        for path, vals in p_injection.items():
            inj[:, inj_rows[path]] = np.asarray(vals, dtype=float).reshape(horizon, -1)

    x = np.zeros(nx)
    out_sl = sig[(tree.root, "out")]
    outputs = np.zeros((horizon, root.n_ext_out))
    qs = {f"{prefix}/{b.id}": np.zeros((horizon, b.dim)) for prefix, b in unc}
    q_slices = {f"{prefix}/{b.id}": sig[(prefix, "q", b.id)] for prefix, b in unc}
    for t in range(horizon):
        if N:
            s = scipy.linalg.lu_solve(lu, Rx @ x + Rw @ w[t] + inj[t])
        else:
            s = np.zeros(0)
        outputs[t] = s[out_sl]
        for path, sl in q_slices.items():
            qs[path][t] = s[sl]
        x = A @ x + Bu @ s
    return Trajectory(outputs, qs)


def _nonsingular(M: np.ndarray, names) -> bool:
    with np.errstate(all="ignore"):
        rcond = 1.0 / np.linalg.cond(M, 1)
    if not np.isfinite(rcond) or rcond < _SINGULAR_RCOND:
        _, s, vt = np.linalg.svd(M)
        null = vt[-1]
        loop = [names[i] for i in np.flatnonzero(np.abs(null) > 1e-8)]
        raise AlgebraicLoopError(f"singular static system; algebraic loop through {loop}", loop)
    return True


# flat ----------------------------------------------------------------------


def simulate_fundamental(
    fd: FundamentalDescription,
    delta: DeltaSample,
    inputs=None,
    horizon: Optional[int] = None,
    p_injection: Optional[Mapping[str, np.ndarray]] = None,
) -> Trajectory:
    """Simulate ``y = G u, q = Delta p, (u, p, y_ext) = gamma (y, q, u_ext)``."""
    if horizon is None:
        if inputs is None:
            raise ValueError("give inputs or a horizon")
        horizon = np.asarray(inputs).shape[0]
    ss = fd.G.realization
    if ss is None:
        raise ValueError("fundamental description is not realized")
    m, d = fd.m, fd.d
    w = _inputs(inputs, horizon, fd.n_ext_in)
    Dl = delta.gain_matrix(fd.uncertainty_paths)
    g = {(r, c): fd.block(r, c).toarray(float) for r in "gdo" for c in "gdi"}
    # unknowns (u, p):  [I - Ggg D, -Ggd Dl; -Gdg D, I - Gdd Dl]
    M = np.block([
        [np.eye(m) - g["g", "g"] @ ss.D, -g["g", "d"] @ Dl],
        [-g["d", "g"] @ ss.D, np.eye(d) - g["d", "d"] @ Dl],
    ])
    names = [f"u[{k}]" for k in range(m)] + [f"p[{k}]" for k in range(d)]
    if M.size:
        _nonsingular(M, names)
        lu = scipy.linalg.lu_factor(M)
    inj = _injection(p_injection, fd.uncertainty_paths, fd.uncertainties, horizon)
    x = np.zeros(ss.nstates)
    outputs = np.zeros((horizon, fd.n_ext_out))
    qall = np.zeros((horizon, d))
    for t in range(horizon):
        cx = ss.C @ x
        rhs = np.concatenate([
            g["g", "g"] @ cx + g["g", "i"] @ w[t],
            g["d", "g"] @ cx + g["d", "i"] @ w[t] + inj[t],
        ])
        s = scipy.linalg.lu_solve(lu, rhs) if M.size else rhs
        u, p = s[:m], s[m:]
        y = cx + ss.D @ u
        q = Dl @ p
        outputs[t] = g["o", "g"] @ y + g["o", "d"] @ q + g["o", "i"] @ w[t]
        qall[t] = q
        x = ss.A @ x + ss.B @ u
    return Trajectory(outputs, _split(qall, fd.uncertainty_paths, fd.uncertainties))


def _injection(p_injection, paths, blocks, horizon) -> np.ndarray:
    d = sum(b.dim for b in blocks)
    inj = np.zeros((horizon, d))
    if p_injection:
        k = 0
        for path, b in zip(paths, blocks):
            if path in p_injection:
                inj[:, k : k + b.dim] = np.asarray(p_injection[path], dtype=float).reshape(horizon, b.dim)
            k += b.dim
    return inj


def _split(qall, paths, blocks) -> dict[str, np.ndarray]:
    out, k = {}, 0
    for path, b in zip(paths, blocks):
        out[path] = qall[:, k : k + b.dim]
        k += b.dim
    return out


def simulate_lft(
    lft: LftModel,
    delta: DeltaSample,
    horizon: int,
    p_injection: Optional[Mapping[str, np.ndarray]] = None,
) -> Trajectory:
    """Simulate the LFT loop through the realization of ``Gbar``.

    Per step the unknowns ``(q, w)`` solve the static loop
    ``q = Delta(p + injection)``, ``w = gamma_tilde z``.
    """
    gbar = lft.gbar()
    d = lft.d
    Dl = delta.gain_matrix(lft.uncertainty_paths)
    if not check_wellposed(lft, Dl):
        raise AlgebraicLoopError("LFT loop is not well posed for this Delta sample")
    M = static_loop_matrix(lft, Dl)
    Gt = lft.gamma_tilde.toarray(float)
    Cp, Cz = gbar.C[:d], gbar.C[d:]
    lu = scipy.linalg.lu_factor(M) if M.size else None
    inj = _injection(p_injection, lft.uncertainty_paths, lft.Delta.blocks, horizon)
    x = np.zeros(gbar.nstates)
    qall = np.zeros((horizon, d))
    for t in range(horizon):
        rhs = np.concatenate([Dl @ (Cp @ x + inj[t]), Gt @ (Cz @ x)])
        s = scipy.linalg.lu_solve(lu, rhs) if lu is not None else rhs
        qall[t] = s[:d]
        x = gbar.A @ x + gbar.B @ s
    return Trajectory(np.zeros((horizon, 0)), _split(qall, lft.uncertainty_paths, lft.Delta.blocks))


# equivalence ---------------------------------------------------------------


@dataclass
class EquivalenceReport:
    max_abs_error: float
    max_rel_error: float
    horizon: int
    n_trials: int
    tolerance: float
    pass_: bool
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.pass_

    def to_text(self) -> str:
        status = "PASS" if self.pass_ else "FAIL"
        lines = [
            f"equivalence: {status}",
            f"trials: {self.n_trials}, horizon: {self.horizon}, tolerance: {self.tolerance:g}",
            f"max abs error: {self.max_abs_error:.3e}",
            f"max rel error: {self.max_rel_error:.3e}",
        ]
        lines += [f"  {f}" for f in self.failures]
        return "\n".join(lines)


def _compare(a: Trajectory, b: Trajectory) -> tuple[float, float]:
    ref = [a.outputs.ravel()] + [a.q[k].ravel() for k in sorted(a.q)]
    other = [b.outputs.ravel()] + [b.q[k].ravel() for k in sorted(a.q)]
    if sorted(a.q) != sorted(b.q) or a.outputs.shape != b.outputs.shape:
        return np.inf, np.inf
    ra, rb = np.concatenate(ref), np.concatenate(other)
    if ra.size == 0:
        return 0.0, 0.0
    err = float(np.max(np.abs(ra - rb)))
    return err, float(np.max(np.abs(ra)))


def _run_trial(tree, flat, k, seq, horizon, tol, floor) -> tuple[float, float, Optional[str]]:
    root = tree.root_nsb
    rng = np.random.default_rng(seq)
    delta = sample_delta(tree, int(rng.integers(2**31)))
    inputs, inj = None, None
    if root.n_ext_in:
        inputs = rng.standard_normal((horizon, root.n_ext_in))
    else:
        inj = {
            path: rng.standard_normal((horizon, b.dim))
            for path, b in tree.iter_blocks()
            if isinstance(b, UncertaintyBlock)
        }
    try:
        nested = simulate_nested(tree, delta, inputs, horizon, inj)
        if isinstance(flat, LftModel):
            if root.n_ext_in or root.n_ext_out:
                raise ValueError("an LFT model has no external ports; compare against the fundamental description")
            other = simulate_lft(flat, delta, horizon, inj)
            nested = Trajectory(np.zeros((horizon, 0)), nested.q)
        else:
            other = simulate_fundamental(flat, delta, inputs, horizon, inj)
    except (AlgebraicLoopError, ValueError, KeyError) as exc:
        return np.inf, np.inf, f"trial {k}: {type(exc).__name__}: {exc}"
    err, scale = _compare(nested, other)
    rel = err / max(scale, floor)
    return err, rel, None if rel <= tol else f"trial {k}: abs {err:.3e}, rel {rel:.3e}"


def equivalence_check(
    tree: ModelTree,
    flat: Union[LftModel, FundamentalDescription],
    n_trials: int = 20,
    horizon: int = 200,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
    atol: float = DEFAULT_ATOL,
    workers: int = 1,
) -> EquivalenceReport:
    """Compare nested and flat simulations under random Delta and inputs.

    With external inputs at the root, unit-variance white noise drives
    them; without, the noise is injected at every uncertainty input ``p``.
    Every root output and every ``q`` trajectory is compared.  The relative
    error of a trial is its max abs error over ``max(peak |signal|, atol / tol)``,
    so errors under ``atol`` always pass.

    Each trial draws from its own child of ``SeedSequence(seed)``, so the
    report does not depend on ``workers`` (trials run in a thread pool when
    ``workers > 1``).
    """
    seqs = np.random.SeedSequence(seed).spawn(n_trials)
    floor = atol / tol if tol > 0 else atol

    def trial(k):
        return _run_trial(tree, flat, k, seqs[k], horizon, tol, floor)

    if workers > 1 and n_trials > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(trial, range(n_trials)))
    else:
        results = [trial(k) for k in range(n_trials)]
    max_abs = max((r[0] for r in results), default=0.0)
    max_rel = max((r[1] for r in results), default=0.0)
    failures = [r[2] for r in results if r[2] is not None]
    return EquivalenceReport(max_abs, max_rel, horizon, n_trials, tol, not failures, failures)
