"""Canonical integrator-chain pair and the stacked homogeneous regressor.

For a sample ``(x, u, xdot)`` the row block is

    F = [ l1 | l2 | l3 ],
    l1 = Z(x)^T (x) A_c - (J_Z(x) xdot)^T (x) I_n,
    l2 = Y(x)^T (x) B_c,
    l3 = (W(x) u)^T (x) B_c,

where ``(x)`` is the Kronecker product, so that with column-major
vectorization ``F @ [vec T; vec N; vec M]`` equals

    A_c T Z(x) + B_c (N Y(x) + M W(x) u) - T J_Z(x) xdot.

A vector in the kernel of the stack of all sample blocks therefore encodes
matrices that linearize the dynamics at every sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dictionary import Dictionary
from .simulator import Dataset

__all__ = [
    "BrunovskyStructure",
    "RegressorBlock",
    "StackedRegressor",
    "SufficiencyReport",
    "brunovsky",
    "build_F",
    "data_sufficiency",
    "stack",
]


@dataclass(frozen=True, eq=False)
class BrunovskyStructure:
    """Block-diagonal integrator-chain pair (A_c, B_c) with block sizes r_i."""

    blocks: tuple[int, ...]
    a_c: np.ndarray
    b_c: np.ndarray

    @property
    def n(self) -> int:
        return self.a_c.shape[0]

    @property
    def m(self) -> int:
        return self.b_c.shape[1]


def brunovsky(blocks, n: int | None = None) -> BrunovskyStructure:
    """Build the canonical pair for the given chain lengths.

    Raises if any block is shorter than 1 or if the sizes do not sum to a
    declared ``n``.  The constructed pair is verified controllable.
    """
    blocks = tuple(int(r) for r in blocks)
    if not blocks or any(r < 1 for r in blocks):
        raise ValueError("every block size must be >= 1")
    total = sum(blocks)
    if n is not None and total != n:
        raise ValueError(f"block sizes sum to {total}, declared n={n}")
    n = total
    m = len(blocks)
    a_c = np.zeros((n, n))
    b_c = np.zeros((n, m))
    off = 0
    for i, r in enumerate(blocks):
        a_c[off:off + r - 1, off + 1:off + r] += np.eye(r - 1)
        b_c[off + r - 1, i] = 1.0
        off += r

    ctrb = np.hstack([np.linalg.matrix_power(a_c, k) @ b_c for k in range(n)])
    if np.linalg.matrix_rank(ctrb) != n:
        raise AssertionError("canonical pair failed the controllability check")
    return BrunovskyStructure(blocks, a_c, b_c)


@dataclass(frozen=True, eq=False)
class RegressorBlock:
    """Per-sample row block and its three Kronecker factors."""

    l1: np.ndarray  # (n, n*s)
    l2: np.ndarray  # (n, p*m)
    l3: np.ndarray  # (n, r*m)

    @property
    def matrix(self) -> np.ndarray:
        return np.hstack([self.l1, self.l2, self.l3])


def build_F(dic: Dictionary, bs: BrunovskyStructure, x: np.ndarray,
            u: np.ndarray, xdot: np.ndarray) -> RegressorBlock:
    """Assemble the n x mu regressor block for one sample."""
    if bs.n != dic.n or bs.m != dic.m:
        raise ValueError("canonical pair dimensions do not match the dictionary")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float).reshape(dic.m)
    xdot = np.asarray(xdot, dtype=float).reshape(dic.n)
    z = dic.eval_Z(x)
    jz_xdot = dic.jacobian_Z(x) @ xdot
    y = dic.eval_Y(x)
    wu = dic.eval_W(x) @ u
    l1 = np.kron(z[None, :], bs.a_c) - np.kron(jz_xdot[None, :], np.eye(dic.n))
    l2 = np.kron(y[None, :], bs.b_c)
    l3 = np.kron(wu[None, :], bs.b_c)
    return RegressorBlock(l1, l2, l3)


@dataclass(frozen=True, eq=False)
class StackedRegressor:
    """All sample blocks stacked, with the column-scaling record.

    ``matrix`` is the raw stack; ``col_scale`` holds the per-column divisors
    applied to obtain the solver's working matrix (all ones when
    equilibration is off).  A kernel vector ``w`` of the scaled matrix maps
    back to a kernel vector ``w / col_scale`` of the raw one, exactly.
    """

    matrix: np.ndarray
    col_scale: np.ndarray
    dims: tuple[int, int, int, int, int]  # (n, s, p, r, m)
    dataset_id: str = ""
    equilibrated: bool = False
    _scaled: np.ndarray | None = field(default=None, repr=False)

    @property
    def scaled_matrix(self) -> np.ndarray:
        if self._scaled is not None:
            return self._scaled
        out = self.matrix / self.col_scale
        object.__setattr__(self, "_scaled", out)
        return out

    @property
    def mu(self) -> int:
        return self.matrix.shape[1]

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


def stack(dic: Dictionary, bs: BrunovskyStructure, data: Dataset,
          equilibrate: bool = False) -> StackedRegressor:
    """Stack the regressor blocks of a dataset into the (L*n) x mu matrix.

    Sample ``i`` occupies block rows ``[i*n, (i+1)*n)``.  With
    ``equilibrate=True`` every column is recorded and scaled to unit max
    norm, which tames the conditioning of mixed-degree dictionaries; the
    scaling is undone when solutions are extracted.
    """
    if data.L == 0:
        raise ValueError("empty dataset")
    if data.n != dic.n or data.m != dic.m:
        raise ValueError("dataset dimensions do not match the dictionary")
    n, mu = dic.n, dic.mu
    out = np.empty((data.L * n, mu))
    for i, (x, u, xd) in enumerate(data.samples()):
        out[i * n:(i + 1) * n] = build_F(dic, bs, x, u, xd).matrix
    if equilibrate:
        scale = np.abs(out).max(axis=0)
        scale[scale == 0] = 1.0
    else:
        scale = np.ones(mu)
    ds_id = data.provenance.get("system", "") + f"/seed={data.provenance.get('seed', '')}"
    return StackedRegressor(out, scale, dic.dims, ds_id, equilibrate)


@dataclass(frozen=True)
class SufficiencyReport:
    """Row-count and rank diagnostics for the stacked regressor.

    A one-dimensional kernel needs rank mu-1, hence at least mu-1 rows; the
    report states both the count check and the numerical rank actually
    achieved.
    """

    rows: int
    mu: int
    required_rank: int
    row_count_ok: bool
    numerical_rank: int
    rank_ok: bool
    rank_tol: float

    @property
    def sufficient(self) -> bool:
        return self.row_count_ok

    def describe(self) -> str:
        verdict = "sufficient" if self.row_count_ok else "insufficient"
        return (f"{verdict}: rows={self.rows}, required >= {self.required_rank} "
                f"(mu={self.mu}); numerical rank {self.numerical_rank} vs "
                f"required {self.required_rank}")


def data_sufficiency(sr: StackedRegressor, rank_tol: float = 1e-8) -> SufficiencyReport:
    """Check the necessary data-count condition rows >= mu - 1 and the rank."""
    rows, mu = sr.rows, sr.mu
    svals = np.linalg.svd(sr.scaled_matrix, compute_uv=False)
    rank = int(np.sum(svals > rank_tol * svals[0])) if svals.size and svals[0] > 0 else 0
    required = mu - 1
    return SufficiencyReport(
        rows=rows,
        mu=mu,
        required_rank=required,
        row_count_ok=rows >= required,
        numerical_rank=rank,
        rank_ok=rank == required,
        rank_tol=rank_tol,
    )
