"""Fundamental blocks and discrete-time state-space realizations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "STABILITY_TOL",
    "StateSpace",
    "DynamicBlock",
    "UncertaintyBlock",
    "UncertaintyAggregate",
    "blockdiag_dynamic",
    "blockdiag_uncertainty",
    "simulate",
    "is_stable",
    "spectral_radius",
]

STABILITY_TOL = 1e-9


def _as_matrix(a, shape, name) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.size == 0:
        a = a.reshape(shape)
    if a.ndim == 1 and a.size == shape[0] * shape[1]:
        a = a.reshape(shape)
    if a.shape != tuple(shape):
        raise ValueError(f"{name} has shape {a.shape}, expected {tuple(shape)}")
    a.setflags(write=False)
    return a


class StateSpace:
    """Discrete-time realization ``x+ = A x + B u``, ``y = C x + D u``."""

    __slots__ = ("A", "B", "C", "D")

    def __init__(self, A, B, C, D):
        D = np.atleast_2d(np.array(D, dtype=float))
        A = np.array(A, dtype=float)
        n = A.shape[0] if A.ndim == 2 else int(round(np.sqrt(A.size)))
        p, m = D.shape
        object.__setattr__(self, "A", _as_matrix(A, (n, n), "A"))
        object.__setattr__(self, "B", _as_matrix(B, (n, m), "B"))
        object.__setattr__(self, "C", _as_matrix(C, (p, n), "C"))
        object.__setattr__(self, "D", _as_matrix(D, (p, m), "D"))

    def __setattr__(self, name, value):
        raise AttributeError("StateSpace is immutable")

    @classmethod
    def static(cls, D) -> StateSpace:
        D = np.atleast_2d(np.array(D, dtype=float))
        p, m = D.shape
        return cls(np.zeros((0, 0)), np.zeros((0, m)), np.zeros((p, 0)), D)

    @property
    def nstates(self) -> int:
        return self.A.shape[0]

    @property
    def ninputs(self) -> int:
        return self.D.shape[1]

    @property
    def noutputs(self) -> int:
        return self.D.shape[0]

    def __eq__(self, other):
        if not isinstance(other, StateSpace):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in self.__slots__)

    def __repr__(self):
        return f"StateSpace(n={self.nstates}, m={self.ninputs}, p={self.noutputs})"


@dataclass(frozen=True)
class DynamicBlock:
    """A stable LTI block with ``n_inputs`` inputs and ``n_outputs`` outputs.

    ``realization`` is optional: interconnection extraction needs only the
    dimensions, simulation needs the matrices.
    """

    id: str
    n_inputs: int
    n_outputs: int
    realization: Optional[StateSpace] = None

    def __post_init__(self):
        if self.n_inputs < 0 or self.n_outputs < 0:
            raise ValueError(f"block {self.id}: negative dimension")
        ss = self.realization
        if ss is not None and (ss.ninputs, ss.noutputs) != (self.n_inputs, self.n_outputs):
            raise ValueError(
                f"block {self.id}: realization is {ss.noutputs}x{ss.ninputs}, "
                f"declared {self.n_outputs}x{self.n_inputs}"
            )

    @property
    def realized(self) -> bool:
        return self.realization is not None


@dataclass(frozen=True)
class UncertaintyBlock:
    """Square bounded operator on ``dim`` channels."""

    id: str
    dim: int
    norm_bound: float = 1.0

    def __post_init__(self):
        if self.dim < 0:
            raise ValueError(f"uncertainty {self.id}: negative dimension")
        if not self.norm_bound >= 0:
            raise ValueError(f"uncertainty {self.id}: norm bound must be nonnegative")


@dataclass(frozen=True)
class UncertaintyAggregate:
    """Block-diagonal stack of uncertainty blocks; keeps block boundaries."""

    blocks: tuple[UncertaintyBlock, ...] = field(default_factory=tuple)

    @property
    def dim(self) -> int:
        return sum(b.dim for b in self.blocks)

    @property
    def boundaries(self) -> list[int]:
        return [b.dim for b in self.blocks]

    @property
    def offsets(self) -> list[int]:
        return np.cumsum([0] + self.boundaries).tolist()[:-1]


def blockdiag_dynamic(blocks: Sequence[DynamicBlock], id: str = "G") -> DynamicBlock:
    """Block-diagonal composition of dynamic blocks.

    Realizations are all-or-none: either every block is realized and so is
    the result, or none is and the result is structural.  The empty
    composition is a realized 0x0 block.
    """
    blocks = list(blocks)
    if len(blocks) == 1:
        return blocks[0]
    m = sum(b.n_inputs for b in blocks)
    p = sum(b.n_outputs for b in blocks)
    realized = [b.realized for b in blocks]
    if any(realized) and not all(realized):
        missing = [b.id for b in blocks if not b.realized]
        raise ValueError(f"cannot compose realized and structural blocks (unrealized: {missing})")
    if not blocks:
        return DynamicBlock(id, 0, 0, StateSpace.static(np.zeros((0, 0))))
    if not all(realized):
        return DynamicBlock(id, m, p)
    ss = [b.realization for b in blocks]
    n = sum(s.nstates for s in ss)
    A = _bdiag([s.A for s in ss], n, n)
    B = _bdiag([s.B for s in ss], n, m)
    C = _bdiag([s.C for s in ss], p, n)
    D = _bdiag([s.D for s in ss], p, m)
    return DynamicBlock(id, m, p, StateSpace(A, B, C, D))


def _bdiag(mats, nrows, ncols) -> np.ndarray:
    # handles 0-row / 0-col blocks, which scipy's block_diag treats as 1x0
    out = np.zeros((nrows, ncols))
    r = c = 0
    for a in mats:
        out[r : r + a.shape[0], c : c + a.shape[1]] = a
        r += a.shape[0]
        c += a.shape[1]
    return out


def blockdiag_uncertainty(blocks: Sequence[UncertaintyBlock]) -> UncertaintyAggregate:
    return UncertaintyAggregate(tuple(blocks))


def simulate(ss: StateSpace, inputs, x0=None) -> np.ndarray:
    """Response of ``ss`` to an input sequence.

    Parameters
    ----------
    ss : StateSpace
    inputs : array_like, shape (T, m)
        One input vector per time step.
    x0 : array_like, shape (n,), optional
        Initial state, zero by default.

    Returns
    -------
    ndarray, shape (T, p)
    """
    u = np.asarray(inputs, dtype=float)
    if u.ndim == 1 and ss.ninputs == 1:
        u = u[:, None]
    if u.ndim != 2 or u.shape[1] != ss.ninputs:
        raise ValueError(f"inputs must have shape (T, {ss.ninputs}), got {u.shape}")
    if u.shape[0] < 1:
        raise ValueError("input sequence is empty")
    x = np.zeros(ss.nstates) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (ss.nstates,):
        raise ValueError(f"x0 must have shape ({ss.nstates},), got {x.shape}")
    y = np.empty((u.shape[0], ss.noutputs))
    for t, ut in enumerate(u):
        y[t] = ss.C @ x + ss.D @ ut
        x = ss.A @ x + ss.B @ ut
    return y


def spectral_radius(A) -> float:
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def is_stable(ss: StateSpace, tol: float = STABILITY_TOL) -> bool:
    return spectral_radius(ss.A) < 1.0 - tol
