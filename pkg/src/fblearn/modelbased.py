"""Model-based route: express the regressor entries in a declared basis.

When the vector fields are known, every entry of ``F(x, u, f(x)+g(x)u)`` is
a fixed function of ``(x, u)``.  Writing each entry as a linear combination
of declared, linearly independent functions ``phi_k(x, u)`` turns the
functional identity ``F v = 0`` into a finite homogeneous linear system on
the coefficient table, whose kernel equals the set of linearizing solutions.
Coefficients are extracted by least squares on a deterministic sample design
rather than symbolically; a per-entry residual flags any entry the declared
basis cannot represent.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .dictionary import BasisFunction, Dictionary, _grlex_key, parse_basis_function
from .regressor import BrunovskyStructure, build_F
from .simulator import ControlAffineSystem
from .solver import SolveOutcome, _finalize, nullspace

__all__ = [
    "CoefficientTable",
    "IncompleteFitError",
    "PhiBasis",
    "SampleGrid",
    "assemble_theorem1_system",
    "fit_coefficients",
    "parse_phi",
    "solve_model_based",
    "suggest_phi_basis",
]


class IncompleteFitError(ValueError):
    """Raised when flagged fit residuals make the coefficient table unusable."""


@dataclass(frozen=True)
class PhiBasis:
    """Ordered scalar functions of (x, u), assumed linearly independent.

    Functions are basis entries over the concatenated coordinates
    ``(x1..xn, u1..um)``.  Independence is not assumed blindly: the fitting
    step verifies that the sampled Gram matrix has full rank.
    """

    n: int
    m: int
    functions: tuple[BasisFunction, ...]

    @property
    def size(self) -> int:
        return len(self.functions)

    def eval(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        z = np.concatenate([np.asarray(x, dtype=float),
                            np.asarray(u, dtype=float)])
        return np.array([f.value(z) for f in self.functions])

    def labels(self) -> list[str]:
        names = [f"x{i+1}" for i in range(self.n)] + \
            [f"u{j+1}" for j in range(self.m)]
        return [f.label(names) for f in self.functions]


def parse_phi(entries, n: int, m: int) -> PhiBasis:
    """Build a :class:`PhiBasis` from strings like ``x1^2*x2`` or ``u``."""
    if not entries:
        raise ValueError("empty phi basis")
    funcs = tuple(parse_basis_function(e, n, m) for e in entries)
    return PhiBasis(n, m, funcs)


def suggest_phi_basis(n: int, m: int, x_degree: int, u_degree: int = 1,
                      include_constant: bool = False) -> PhiBasis:
    """All monomials with x-degree <= x_degree and u-degree <= u_degree.

    A convenience superset; a richer basis than strictly needed only adds
    zero coefficients.
    """
    if x_degree < 1:
        raise ValueError("x_degree must be >= 1")
    exps = []
    for total_u in range(u_degree + 1):
        for u_combo in itertools.combinations_with_replacement(range(m), total_u):
            for total_x in range(x_degree + 1):
                for x_combo in itertools.combinations_with_replacement(range(n), total_x):
                    e = [0] * (n + m)
                    for i in x_combo:
                        e[i] += 1
                    for j in u_combo:
                        e[n + j] += 1
                    if sum(e) == 0 and not include_constant:
                        continue
                    exps.append(tuple(e))
    exps = sorted(set(exps), key=_grlex_key)
    return PhiBasis(n, m, tuple(BasisFunction.monomial(e) for e in exps))


@dataclass(frozen=True, eq=False)
class SampleGrid:
    """Deterministic sample design on the box D x [u_lower, u_upper]^m.

    ``kind='halton'`` uses an unscrambled low-discrepancy sequence of
    ``count`` points; ``kind='regular'`` takes the tensor grid with the given
    per-axis ``shape`` (length n + m).
    """

    x_lower: np.ndarray
    x_upper: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    kind: str = "halton"
    count: int = 400
    shape: tuple[int, ...] = ()

    def points(self) -> np.ndarray:
        lo = np.concatenate([np.asarray(self.x_lower, float),
                             np.asarray(self.u_lower, float)])
        hi = np.concatenate([np.asarray(self.x_upper, float),
                             np.asarray(self.u_upper, float)])
        d = lo.size
        if self.kind == "halton":
            unit = qmc.Halton(d=d, scramble=False).random(self.count)
            return lo + unit * (hi - lo)
        if self.kind == "regular":
            if len(self.shape) != d:
                raise ValueError(f"regular grid needs {d} axis counts")
            axes = [np.linspace(lo[i], hi[i], self.shape[i]) for i in range(d)]
            mesh = np.meshgrid(*axes, indexing="ij")
            return np.stack([ax.ravel() for ax in mesh], axis=1)
        raise ValueError(f"unknown grid kind {self.kind!r}")


def default_grid(dic: Dictionary, count: int = 400) -> SampleGrid:
    return SampleGrid(dic.lower, dic.upper, -np.ones(dic.m), np.ones(dic.m),
                      "halton", count)


@dataclass(frozen=True, eq=False)
class CoefficientTable:
    """Per-entry expansion coefficients of F in the phi basis.

    ``coeffs[i, j]`` is the length-``n_b`` coefficient vector of entry
    ``(i, j)``; ``residuals`` holds the max absolute fit deviation over the
    sample design, and ``incomplete`` marks entries whose residual exceeded
    the fit tolerance (the basis does not span them).
    """

    coeffs: np.ndarray          # (n, mu, n_b)
    residuals: np.ndarray       # (n, mu)
    incomplete: np.ndarray      # (n, mu) bool
    gram_condition: float
    fit_tol: float
    phi: PhiBasis = field(repr=False)

    @property
    def complete(self) -> bool:
        return not self.incomplete.any()


def fit_coefficients(sys: ControlAffineSystem, dic: Dictionary,
                     bs: BrunovskyStructure, phi: PhiBasis,
                     grid: SampleGrid | None = None,
                     fit_tol: float = 1e-8) -> CoefficientTable:
    """Least-squares extraction of the per-entry phi coefficients.

    Requires at least ``2 * n_b`` sample points and a full-rank sampled Gram
    matrix; entries whose max fit deviation exceeds ``fit_tol`` are flagged
    incomplete rather than silently accepted.
    """
    if phi.n != sys.n or phi.m != sys.m:
        raise ValueError("phi basis dimensions do not match the system")
    if grid is None:
        grid = default_grid(dic)
    pts = grid.points()
    G = pts.shape[0]
    nb = phi.size
    if G < 2 * nb:
        raise ValueError(f"sample design has {G} points, need >= {2 * nb}")

    Phi = np.empty((G, nb))
    n, mu = dic.n, dic.mu
    Fsamp = np.empty((G, n, mu))
    for k, zrow in enumerate(pts):
        x, u = zrow[:sys.n], zrow[sys.n:]
        Phi[k] = phi.eval(x, u)
        Fsamp[k] = build_F(dic, bs, x, u, sys.field_at(x, u)).matrix

    sv = np.linalg.svd(Phi, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise ValueError(
            "phi functions are not linearly independent on the sample design "
            f"(Gram condition {sv[0] / max(sv[-1], np.finfo(float).tiny):.3g})")
    gram_cond = float(sv[0] / sv[-1])

    B = Fsamp.reshape(G, n * mu)
    C, *_ = np.linalg.lstsq(Phi, B, rcond=None)
    resid = np.abs(Phi @ C - B).max(axis=0).reshape(n, mu)
    coeffs = C.reshape(nb, n, mu).transpose(1, 2, 0)
    return CoefficientTable(
        coeffs=coeffs, residuals=resid, incomplete=resid > fit_tol,
        gram_condition=gram_cond, fit_tol=fit_tol, phi=phi,
    )


def assemble_theorem1_system(ct: CoefficientTable) -> np.ndarray:
    """Stack the coefficient blocks into the (n * n_b) x mu linear system.

    Row block ``i`` holds the phi coefficients of row ``i`` of F, one column
    per unknown; the kernel of the stack is exactly the set of vectors
    annihilating F identically on the domain.
    """
    if not ct.complete:
        bad = np.argwhere(ct.incomplete)
        raise IncompleteFitError(
            f"{len(bad)} entries not spanned by the phi basis, e.g. "
            f"(i, j) = {tuple(bad[0])} with residual "
            f"{ct.residuals[tuple(bad[0])]:.3g}")
    n = ct.coeffs.shape[0]
    return np.vstack([ct.coeffs[i].T for i in range(n)])


def solve_model_based(sys: ControlAffineSystem, dic: Dictionary,
                      bs: BrunovskyStructure, phi: PhiBasis,
                      grid: SampleGrid | None = None,
                      x0: np.ndarray | None = None,
                      rank_tol: float = 1e-8, gap_threshold: float = 1e6,
                      fit_tol: float = 1e-8, seed: int = 0) -> SolveOutcome:
    """Full model-based pipeline: fit, assemble, kernel, normalize, certify."""
    if x0 is None:
        x0 = np.zeros(sys.n)
    ct = fit_coefficients(sys, dic, bs, phi, grid, fit_tol)
    system = assemble_theorem1_system(ct)
    ns = nullspace(system, rank_tol)

    messages: list[str] = []
    if ns.nullity == 0:
        messages.append("kernel is empty: the libraries admit no linearizing solution")
        return SolveOutcome("incomplete", ns, None, (), None, tuple(messages))
    if ns.nullity == 1:
        sol = _finalize(ns.basis[:, 0], dic, x0, certifiable=True,
                        gap=ns.gap, gap_threshold=gap_threshold)
        messages.extend(sol.warnings)
        status = "certified" if sol.certified else "uncertified"
        return SolveOutcome(status, ns, sol, (), None, tuple(messages))

    messages.append(
        f"kernel dimension {ns.nullity} > 1: returning uncertified candidates")
    rng = np.random.default_rng(seed)
    candidates = []
    for _ in range(8):
        v_raw = ns.basis @ rng.standard_normal(ns.nullity)
        try:
            cand = _finalize(v_raw, dic, x0, certifiable=False,
                             gap=ns.gap, gap_threshold=gap_threshold)
        except ValueError:
            continue
        if cand.regularity.regular:
            candidates.append(cand)
    return SolveOutcome("uncertified", ns, None, tuple(candidates), None,
                        tuple(messages))
