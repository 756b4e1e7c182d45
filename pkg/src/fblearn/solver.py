"""Kernel extraction and certification of linearizing solutions.

The data-driven route certifies a solution when the stacked regressor has a
one-dimensional kernel: numerical rank mu-1 at the working tolerance plus a
spectral-gap margin between the last retained and first discarded singular
values.  Singular values are computed with the dedicated values-only LAPACK
driver, which resolves the trailing values of near-rank-deficient matrices
more accurately than the with-vectors factorization; the kernel basis comes
from the full decomposition and its residuals are checked explicitly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .dictionary import Dictionary
from .regressor import BrunovskyStructure, StackedRegressor, data_sufficiency

__all__ = [
    "LinearizingSolution",
    "NormalizedVector",
    "NullspaceResult",
    "RegularityReport",
    "SolveOutcome",
    "SparsifyResult",
    "check_regularity",
    "normalize",
    "nullspace",
    "pack",
    "solution_from_vector",
    "solution_report",
    "solve_linearization",
    "sparsify",
    "unpack",
]


@dataclass(frozen=True, eq=False)
class NullspaceResult:
    """SVD-based rank/nullity certificate for a matrix.

    ``gap`` is the ratio sigma_rank / sigma_rank+1 (``inf`` when the first
    discarded singular value is exactly zero or absent, ``nan`` when nothing
    is discarded).
    """

    singular_values: np.ndarray    # descending, padded with zeros to mu
    rank: int
    nullity: int
    basis: np.ndarray              # (mu, nullity), orthonormal columns
    rank_tol: float
    threshold: float               # rank_tol * sigma_1
    gap: float


def nullspace(M: np.ndarray, rank_tol: float = 1e-8) -> NullspaceResult:
    """Numerical nullspace of ``M`` with rank decided at ``rank_tol * sigma_1``."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        raise ValueError("empty matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix contains non-finite entries")
    cols = M.shape[1]
    svals = np.linalg.svd(M, compute_uv=False)
    _, _, vt = np.linalg.svd(M, full_matrices=True)
    padded = np.zeros(cols)
    padded[: svals.size] = svals
    sigma1 = padded[0]
    threshold = rank_tol * sigma1
    rank = int(np.sum(padded > threshold)) if sigma1 > 0 else 0
    nullity = cols - rank
    basis = vt[rank:].T.copy() if nullity > 0 else np.zeros((cols, 0))
    if nullity == 0:
        gap = float("nan")
    elif padded[rank] == 0:
        gap = float("inf")
    else:
        gap = float(padded[rank - 1] / padded[rank]) if rank > 0 else float("inf")
    return NullspaceResult(padded, rank, nullity, basis, rank_tol, threshold, gap)


def unpack(v: np.ndarray, dims: tuple[int, int, int, int, int]):
    """Invert the column-major stacking of (T, N, M) blocks."""
    n, s, p, r, m = dims
    v = np.asarray(v, dtype=float)
    mu = n * s + p * m + r * m
    if v.shape != (mu,):
        raise ValueError(f"vector has length {v.shape}, expected ({mu},)")
    T = v[: n * s].reshape((n, s), order="F")
    N = v[n * s: n * s + p * m].reshape((m, p), order="F")
    M = v[n * s + p * m:].reshape((m, r), order="F")
    return T, N, M


def pack(T: np.ndarray, N: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Column-major stacking [vec T; vec N; vec M]."""
    return np.concatenate([
        np.asarray(T, dtype=float).flatten(order="F"),
        np.asarray(N, dtype=float).flatten(order="F"),
        np.asarray(M, dtype=float).flatten(order="F"),
    ])


@dataclass(frozen=True, eq=False)
class NormalizedVector:
    """Kernel vector scaled so its first significant entry is one."""

    v: np.ndarray
    divisor: float
    index: int


def normalize(v: np.ndarray) -> NormalizedVector:
    """Divide by the first entry exceeding 1e-9 * max|v|; fixes scale and sign.

    Idempotent and invariant under nonzero rescaling of the input.
    """
    v = np.asarray(v, dtype=float)
    vmax = np.abs(v).max() if v.size else 0.0
    if vmax == 0.0:
        raise ValueError("cannot normalize a numerically zero vector")
    idx = int(np.argmax(np.abs(v) > 1e-9 * vmax))
    divisor = float(v[idx])
    return NormalizedVector(v / divisor, divisor, idx)


@dataclass(frozen=True, eq=False)
class RegularityReport:
    """Nonsingularity checks of the coordinate Jacobian and input gain at x0."""

    t_jacobian_nonsingular: bool
    gamma_nonsingular: bool
    t_jacobian_min_sv: float
    t_jacobian_cond: float
    gamma_min_sv: float
    gamma_cond: float
    tau_at_x0: np.ndarray

    @property
    def regular(self) -> bool:
        return self.t_jacobian_nonsingular and self.gamma_nonsingular


_REG_TOL = 1e-8


def check_regularity(sol, dic: Dictionary, x0: np.ndarray) -> RegularityReport:
    """Test min singular values of T J_Z(x0) and of M W(x0) against 1e-8 * max.

    ``sol`` may be a :class:`LinearizingSolution` or a ``(T, M)`` pair of
    matrices.
    """
    if isinstance(sol, tuple):
        T, M = sol
    else:
        T, M = sol.T, sol.M
    x0 = np.asarray(x0, dtype=float)
    tj = np.asarray(T) @ dic.jacobian_Z(x0)
    gm = np.asarray(M) @ dic.eval_W(x0)
    sv_t = np.linalg.svd(tj, compute_uv=False)
    sv_g = np.linalg.svd(gm, compute_uv=False)
    t_ok = bool(sv_t[-1] > _REG_TOL * sv_t[0]) if sv_t[0] > 0 else False
    g_ok = bool(sv_g[-1] > _REG_TOL * sv_g[0]) if sv_g[0] > 0 else False
    return RegularityReport(
        t_jacobian_nonsingular=t_ok,
        gamma_nonsingular=g_ok,
        t_jacobian_min_sv=float(sv_t[-1]),
        t_jacobian_cond=float(sv_t[0] / sv_t[-1]) if sv_t[-1] > 0 else float("inf"),
        gamma_min_sv=float(sv_g[-1]),
        gamma_cond=float(sv_g[0] / sv_g[-1]) if sv_g[-1] > 0 else float("inf"),
        tau_at_x0=np.asarray(T) @ dic.eval_Z(x0),
    )


@dataclass(frozen=True, eq=False)
class LinearizingSolution:
    """Normalized kernel vector unpacked into (T, N, M) with its certificates."""

    v: np.ndarray
    T: np.ndarray
    N: np.ndarray
    M: np.ndarray
    dims: tuple[int, int, int, int, int]
    x0: np.ndarray
    normalization: NormalizedVector
    regularity: RegularityReport
    certified: bool
    warnings: tuple[str, ...] = ()

    def tau(self, dic: Dictionary, x: np.ndarray) -> np.ndarray:
        return self.T @ dic.eval_Z(x)

    def delta(self, dic: Dictionary, x: np.ndarray) -> np.ndarray:
        return self.N @ dic.eval_Y(x)

    def gamma(self, dic: Dictionary, x: np.ndarray) -> np.ndarray:
        return self.M @ dic.eval_W(x)


@dataclass(frozen=True, eq=False)
class SolveOutcome:
    """Result of a solve: certified solution, uncertified candidates or a diagnosis.

    ``status`` is one of ``certified``, ``uncertified`` or ``incomplete``
    (no kernel vector: the libraries cannot reproduce the data).
    """

    status: str
    nullspace: NullspaceResult
    solution: LinearizingSolution | None
    candidates: tuple[LinearizingSolution, ...]
    sufficiency: object | None
    messages: tuple[str, ...]

    @property
    def certified(self) -> bool:
        return self.status == "certified"


_TAU0_WARN = 1e-8


def _finalize(v_raw: np.ndarray, dic: Dictionary, x0: np.ndarray,
              certifiable: bool, gap: float, gap_threshold: float,
              extra_warnings: tuple[str, ...] = ()) -> LinearizingSolution:
    norm = normalize(v_raw)
    T, N, M = unpack(norm.v, dic.dims)
    reg = check_regularity((T, M), dic, x0)
    warnings = list(extra_warnings)
    tau0 = float(np.abs(reg.tau_at_x0).max())
    if tau0 > _TAU0_WARN * max(1.0, float(np.abs(norm.v).max())):
        warnings.append(
            f"tau(x0) = {reg.tau_at_x0.tolist()} is not zero; the feedback "
            "stabilizes the offset image of x0")
    certified = bool(certifiable and reg.regular and gap >= gap_threshold)
    if certifiable and not reg.regular:
        warnings.append("regularity failed at x0 (singular coordinate Jacobian or input gain)")
    if certifiable and not gap >= gap_threshold:
        warnings.append(f"spectral gap {gap:.3g} below certification threshold {gap_threshold:.3g}")
    return LinearizingSolution(
        v=norm.v, T=T, N=N, M=M, dims=dic.dims, x0=np.asarray(x0, dtype=float),
        normalization=norm, regularity=reg, certified=certified,
        warnings=tuple(warnings),
    )


def solve_linearization(sr: StackedRegressor, dic: Dictionary, bs: BrunovskyStructure,
                        x0: np.ndarray, rank_tol: float = 1e-8,
                        gap_threshold: float = 1e6, seed: int = 0,
                        n_candidates: int = 8) -> SolveOutcome:
    """Extract and certify a linearizing solution from the stacked regressor.

    Nullity one yields a (possibly certified) solution; nullity zero reports
    an incomplete dictionary or inconsistent data; larger nullities trigger a
    randomized search over the kernel for regular candidates, all marked
    uncertified.
    """
    messages: list[str] = []
    suff = data_sufficiency(sr, rank_tol)
    if not suff.row_count_ok:
        messages.append("insufficient data: " + suff.describe())

    ns = nullspace(sr.scaled_matrix, rank_tol)

    if ns.nullity == 0:
        messages.append("kernel is empty: dictionary incomplete or data inconsistent")
        return SolveOutcome("incomplete", ns, None, (), suff, tuple(messages))

    if ns.nullity == 1:
        v_raw = ns.basis[:, 0] / sr.col_scale
        sol = _finalize(v_raw, dic, x0, certifiable=suff.row_count_ok,
                        gap=ns.gap, gap_threshold=gap_threshold)
        messages.extend(sol.warnings)
        status = "certified" if sol.certified else "uncertified"
        return SolveOutcome(status, ns, sol, (), suff, tuple(messages))

    messages.append(
        f"kernel dimension {ns.nullity} > 1: returning uncertified candidates")
    rng = np.random.default_rng(seed)
    candidates = []
    for _ in range(n_candidates):
        coeffs = rng.standard_normal(ns.nullity)
        v_raw = (ns.basis @ coeffs) / sr.col_scale
        try:
            cand = _finalize(v_raw, dic, x0, certifiable=False,
                             gap=ns.gap, gap_threshold=gap_threshold)
        except ValueError:
            continue
        if cand.regularity.regular:
            candidates.append(cand)
    if not candidates:
        messages.append("no regular candidate found in the kernel")
    return SolveOutcome("uncertified", ns, None, tuple(candidates), suff,
                        tuple(messages))


@dataclass(frozen=True, eq=False)
class SparsifyResult:
    """Outcome of the sequential-thresholding refinement."""

    v: np.ndarray
    support: np.ndarray            # indices kept
    iterations: int
    residual: float                # ||F_scaled v_scaled||_2 with unit v_scaled
    accepted: bool
    solution: LinearizingSolution | None
    message: str = ""


def sparsify(sr: StackedRegressor, v: np.ndarray, threshold: float,
             max_iters: int = 20, dic: Dictionary | None = None,
             x0: np.ndarray | None = None,
             rank_tol: float = 1e-8) -> SparsifyResult:
    """Iteratively zero small entries of ``v`` and re-solve on the support.

    Entries below ``threshold * max|v|`` are dropped, the homogeneous problem
    restricted to the remaining columns is re-solved by its smallest right
    singular vector, and the loop runs to a support fixpoint or ``max_iters``.
    The refined vector is accepted only if its residual stays within the rank
    tolerance of the full problem.  This is a heuristic cleanup for noisy or
    overcomplete libraries, not an exact sparse recovery.
    """
    v = np.asarray(v, dtype=float).copy()
    mu = sr.mu
    if v.shape != (mu,):
        raise ValueError(f"vector has shape {v.shape}, expected ({mu},)")
    Fe = sr.scaled_matrix
    sigma1 = np.linalg.svd(Fe, compute_uv=False)[0]

    support = np.abs(v) > threshold * np.abs(v).max()
    if not support.any():
        raise ValueError("thresholding removed every entry")
    iterations = 0
    for iterations in range(1, max_iters + 1):
        cols = np.flatnonzero(support)
        _, _, vt = np.linalg.svd(Fe[:, cols], full_matrices=True)
        w = np.zeros(mu)
        w[cols] = vt[-1]
        v_new = w / sr.col_scale
        new_support = np.abs(v_new) > threshold * np.abs(v_new).max()
        if not new_support.any():
            raise ValueError("thresholding removed every entry")
        v = v_new
        if np.array_equal(new_support, support):
            break
        support = new_support

    w_scaled = v * sr.col_scale
    residual = float(np.linalg.norm(Fe @ (w_scaled / np.linalg.norm(w_scaled))))
    accepted = residual <= rank_tol * sigma1
    solution = None
    message = ""
    if not accepted:
        message = (f"restricted residual {residual:.3g} exceeds "
                   f"{rank_tol:.1g} * sigma1 = {rank_tol * sigma1:.3g}")
    elif dic is not None and x0 is not None:
        solution = _finalize(v, dic, x0, certifiable=False, gap=float("nan"),
                             gap_threshold=float("inf"))
    return SparsifyResult(
        v=normalize(v).v, support=np.flatnonzero(support),
        iterations=iterations, residual=residual, accepted=accepted,
        solution=solution, message=message,
    )


def solution_from_vector(v: np.ndarray, dic: Dictionary, x0: np.ndarray,
                         certified: bool = False) -> LinearizingSolution:
    """Rebuild a solution object from a stored kernel vector.

    The certificate flag is carried over from the caller (e.g. a solve
    report); this function re-derives normalization, unpacking and the
    regularity checks only.
    """
    sol = _finalize(v, dic, x0, certifiable=False, gap=float("nan"),
                    gap_threshold=float("inf"))
    if certified:
        sol = dataclasses.replace(sol, certified=True)
    return sol


def solution_report(outcome: SolveOutcome, dic: Dictionary,
                    method: str = "data_driven") -> dict:
    """JSON-serializable report of a solve outcome."""
    ns = outcome.nullspace
    doc = {
        "method": method,
        "status": outcome.status,
        "dimensions": {
            "n": dic.n, "m": dic.m, "s": dic.s, "p": dic.p, "r": dic.r,
            "mu": dic.mu,
        },
        "singular_values": ns.singular_values.tolist(),
        "rank": ns.rank,
        "nullity": ns.nullity,
        "rank_tol": ns.rank_tol,
        "spectral_gap": None if np.isnan(ns.gap) else ns.gap,
        "messages": list(outcome.messages),
    }
    if outcome.sufficiency is not None:
        suff = outcome.sufficiency
        doc["data_sufficiency"] = {
            "rows": suff.rows, "mu": suff.mu,
            "required_rank": suff.required_rank,
            "row_count_ok": suff.row_count_ok,
            "numerical_rank": suff.numerical_rank,
            "rank_ok": suff.rank_ok,
        }

    def sol_doc(sol: LinearizingSolution) -> dict:
        return {
            "v": sol.v.tolist(),
            "T": sol.T.tolist(),
            "N": sol.N.tolist(),
            "M": sol.M.tolist(),
            "normalization": {"divisor": sol.normalization.divisor,
                              "index": sol.normalization.index},
            "regularity": {
                "t_jacobian_nonsingular": sol.regularity.t_jacobian_nonsingular,
                "gamma_nonsingular": sol.regularity.gamma_nonsingular,
                "t_jacobian_min_sv": sol.regularity.t_jacobian_min_sv,
                "t_jacobian_cond": sol.regularity.t_jacobian_cond,
                "gamma_min_sv": sol.regularity.gamma_min_sv,
                "gamma_cond": sol.regularity.gamma_cond,
            },
            "tau_at_x0": sol.regularity.tau_at_x0.tolist(),
            "certified": sol.certified,
            "warnings": list(sol.warnings),
        }

    doc["solution"] = sol_doc(outcome.solution) if outcome.solution else None
    doc["candidates"] = [sol_doc(c) for c in outcome.candidates]
    return doc
