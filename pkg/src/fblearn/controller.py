"""Feedback synthesis, domain/attraction estimates and closed-loop checks.

The learned coordinates reduce stabilization to linear design: place poles
block-by-block on the integrator chains, then pull the linear law back
through ``u = gamma(x)^{-1} (K tau(x) - delta(x))``.  Domain and
region-of-attraction estimates are sample-based necessary checks, labeled
non-certified: they verify the forward images on a state grid instead of
inverting tau.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .dictionary import Dictionary
from .regressor import BrunovskyStructure
from .simulator import ControlAffineSystem, rk4_step
from .solver import LinearizingSolution

__all__ = [
    "ClosedLoopTrajectory",
    "DiffeoRegion",
    "GammaSingularError",
    "RoAEstimate",
    "StateFeedback",
    "StateGrid",
    "closed_loop_simulate",
    "control_law",
    "diffeo_domain_check",
    "estimate_roa",
    "lyapunov_solve",
    "place_poles_brunovsky",
    "write_roa_json",
    "write_trajectory_csv",
]


class GammaSingularError(RuntimeError):
    """Input gain gamma(x) is numerically singular at the reported state."""

    def __init__(self, x: np.ndarray, t: float | None = None):
        at = f" at t={t:g}" if t is not None else ""
        super().__init__(f"gamma(x) singular{at} for x={np.asarray(x).tolist()}")
        self.x = np.asarray(x, dtype=float)
        self.t = t


@dataclass(frozen=True, eq=False)
class StateFeedback:
    """Per-block companion gain with the closed-loop pair it induces."""

    K: np.ndarray                      # (m, n)
    blocks: tuple[int, ...]
    block_polys: tuple[tuple[float, ...], ...]   # (a_0 .. a_{r-1}) per block
    poles: tuple[tuple[complex, ...], ...]
    eigenvalues: np.ndarray
    a_cl: np.ndarray                   # A_c + B_c K


def place_poles_brunovsky(bs: BrunovskyStructure, poles) -> StateFeedback:
    """Exact per-block pole placement by companion-coefficient matching.

    ``poles`` lists the desired closed-loop roots for each block (conjugate
    pairs for complex roots).  The gain row of block ``i`` writes the negated
    monic polynomial coefficients into the last row of that block, so the
    requested characteristic polynomial is reproduced exactly.
    """
    pole_sets = [tuple(complex(p) for p in block) for block in poles]
    if len(pole_sets) != len(bs.blocks):
        raise ValueError(f"need one pole set per block, got {len(pole_sets)} "
                         f"for {len(bs.blocks)} blocks")
    K = np.zeros((bs.m, bs.n))
    block_polys = []
    off = 0
    for i, (r, roots) in enumerate(zip(bs.blocks, pole_sets)):
        if len(roots) != r:
            raise ValueError(f"block {i} has size {r} but {len(roots)} poles")
        if any(p.real >= 0 for p in roots):
            raise ValueError(f"requested polynomial for block {i} is not Hurwitz")
        coeffs = np.poly(np.asarray(roots))       # monic, highest power first
        if np.iscomplexobj(coeffs):
            if np.abs(coeffs.imag).max() > 1e-12:
                raise ValueError(f"poles of block {i} must close under conjugation")
            coeffs = coeffs.real
        ascending = coeffs[1:][::-1]              # (a_0, ..., a_{r-1})
        K[i, off:off + r] = -ascending
        block_polys.append(tuple(float(a) for a in ascending))
        off += r
    a_cl = bs.a_c + bs.b_c @ K
    return StateFeedback(K, bs.blocks, tuple(block_polys), tuple(pole_sets),
                         np.sort_complex(np.linalg.eigvals(a_cl)), a_cl)


_GAMMA_TOL = 1e-10


def control_law(sol: LinearizingSolution, K, dic: Dictionary,
                x: np.ndarray) -> np.ndarray:
    """Linearizing feedback ``u = gamma(x)^{-1} (K tau(x) - delta(x))``.

    The gain inversion goes through a pseudo-inverse guarded by a minimum
    singular value threshold; crossing it raises :class:`GammaSingularError`
    with the offending state.
    """
    Kmat = K.K if isinstance(K, StateFeedback) else np.asarray(K, dtype=float)
    x = np.asarray(x, dtype=float)
    gamma = sol.gamma(dic, x)
    sv = np.linalg.svd(gamma, compute_uv=False)
    if sv[0] == 0 or sv[-1] <= _GAMMA_TOL * sv[0]:
        raise GammaSingularError(x)
    tau = sol.tau(dic, x)
    delta = sol.delta(dic, x)
    return np.linalg.pinv(gamma) @ (Kmat @ tau - delta)


def lyapunov_solve(a_cl: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve ``A^T P + P A = -Q`` through the Kronecker-vectorized system.

    Requires a Hurwitz ``a_cl`` and symmetric positive definite ``Q``; the
    returned ``P`` is symmetrized and verified positive definite.
    """
    A = np.asarray(a_cl, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n):
        raise ValueError("A and Q must be square of equal size")
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise ValueError("Q must be symmetric")
    if np.any(np.linalg.eigvalsh(0.5 * (Q + Q.T)) <= 0):
        raise ValueError("Q must be positive definite")
    if np.any(np.linalg.eigvals(A).real >= 0):
        raise ValueError("closed-loop matrix is not Hurwitz")
    lhs = np.kron(np.eye(n), A.T) + np.kron(A.T, np.eye(n))
    vec_p = np.linalg.solve(lhs, -Q.flatten(order="F"))
    P = vec_p.reshape((n, n), order="F")
    P = 0.5 * (P + P.T)
    if np.any(np.linalg.eigvalsh(P) <= 0):
        raise ValueError("Lyapunov solution is not positive definite")
    return P


@dataclass(frozen=True, eq=False)
class StateGrid:
    """Axis-aligned evaluation grid over a state box."""

    lower: np.ndarray
    upper: np.ndarray
    counts: tuple[int, ...]

    def axes(self) -> list[np.ndarray]:
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        return [np.linspace(lo[i], hi[i], c) for i, c in enumerate(self.counts)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([ax.ravel() for ax in mesh], axis=1)

    def to_dict(self) -> dict:
        return {"lower": np.asarray(self.lower, float).tolist(),
                "upper": np.asarray(self.upper, float).tolist(),
                "counts": list(self.counts)}


@dataclass(frozen=True, eq=False)
class DiffeoRegion:
    """Largest sampled box around x0 where the coordinate Jacobian stays regular.

    A sampled necessary check, not a certificate: only the grid points were
    verified.
    """

    box_lower: np.ndarray
    box_upper: np.ndarray
    threshold: float
    min_sv_at_x0: float
    min_sv_max: float
    pass_fraction: float
    grid: StateGrid
    x0: np.ndarray

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        eps = 1e-12
        return np.all((x >= self.box_lower - eps) & (x <= self.box_upper + eps),
                      axis=1)


def diffeo_domain_check(sol: LinearizingSolution, dic: Dictionary,
                        grid: StateGrid) -> DiffeoRegion:
    """Expand the largest axis-aligned grid box around x0 on which the
    sampled minimum singular value of ``T J_Z(x)`` exceeds 1e-6 of its grid
    maximum."""
    axes = grid.axes()
    shape = tuple(len(a) for a in axes)
    pts = grid.points()
    minsv = np.empty(pts.shape[0])
    for k, x in enumerate(pts):
        sv = np.linalg.svd(sol.T @ dic.jacobian_Z(x), compute_uv=False)
        minsv[k] = sv[-1]
    minsv = minsv.reshape(shape)
    threshold = 1e-6 * float(minsv.max())
    passed = minsv > threshold

    x0 = np.asarray(sol.x0, dtype=float)
    idx0 = tuple(int(np.argmin(np.abs(a - x0[d]))) for d, a in enumerate(axes))
    sv0 = np.linalg.svd(sol.T @ dic.jacobian_Z(x0), compute_uv=False)[-1]
    if not passed[idx0] or sv0 <= threshold:
        raise ValueError("coordinate Jacobian fails the regularity check at x0")

    lo = list(idx0)
    hi = list(idx0)
    d = len(shape)

    def slab_ok(axis: int, index: int) -> bool:
        sl = tuple(
            index if a == axis else slice(lo[a], hi[a] + 1) for a in range(d))
        return bool(passed[sl].all())

    grew = True
    while grew:
        grew = False
        for axis in range(d):
            if lo[axis] > 0 and slab_ok(axis, lo[axis] - 1):
                lo[axis] -= 1
                grew = True
            if hi[axis] < shape[axis] - 1 and slab_ok(axis, hi[axis] + 1):
                hi[axis] += 1
                grew = True

    return DiffeoRegion(
        box_lower=np.array([axes[a][lo[a]] for a in range(d)]),
        box_upper=np.array([axes[a][hi[a]] for a in range(d)]),
        threshold=threshold,
        min_sv_at_x0=float(sv0),
        min_sv_max=float(minsv.max()),
        pass_fraction=float(passed.mean()),
        grid=grid,
        x0=x0,
    )


@dataclass(frozen=True, eq=False)
class RoAEstimate:
    """Sampled Lyapunov sublevel estimate of the region of attraction."""

    P: np.ndarray
    c: float
    Q: np.ndarray
    region: DiffeoRegion
    n_level_samples: int
    lyapunov_residual: float


def estimate_roa(sol: LinearizingSolution, sf: StateFeedback, dic: Dictionary,
                 grid: StateGrid, Q: np.ndarray | None = None,
                 region: DiffeoRegion | None = None) -> RoAEstimate:
    """Largest sampled level c such that ``tau(x)' P tau(x) <= c`` stays in
    the verified diffeomorphism box.

    Sample-based and non-certified, like the region it builds on.
    """
    n = sf.a_cl.shape[0]
    Q = np.eye(n) if Q is None else np.asarray(Q, dtype=float)
    P = lyapunov_solve(sf.a_cl, Q)
    residual = float(np.abs(sf.a_cl.T @ P + P @ sf.a_cl + Q).max())
    if region is None:
        region = diffeo_domain_check(sol, dic, grid)

    pts = grid.points()
    V = np.empty(pts.shape[0])
    for k, x in enumerate(pts):
        tau = sol.tau(dic, x)
        V[k] = float(tau @ P @ tau)
    inside = region.contains(pts)
    c_out = float(V[~inside].min()) if np.any(~inside) else np.inf
    below = V[inside & (V < c_out)]
    if below.size == 0 or float(below.max()) <= 0:
        raise ValueError("no positive sublevel set fits inside the verified box")
    c = float(below.max())
    return RoAEstimate(P, c, Q, region, int(np.sum(V <= c)), residual)


@dataclass(frozen=True, eq=False)
class ClosedLoopTrajectory:
    """Closed-loop run with the image-coordinate trace and Lyapunov values."""

    t: np.ndarray          # (L,)
    x: np.ndarray          # (L, n)
    u: np.ndarray          # (L, m)
    eta: np.ndarray        # (L, n), tau(x(t))
    eta_ref: np.ndarray    # (L, n), closed-form linear response
    v_lyap: np.ndarray     # (L,)
    P: np.ndarray
    max_eta_error: float


def closed_loop_simulate(sys: ControlAffineSystem, sol: LinearizingSolution,
                         sf: StateFeedback, dic: Dictionary, x0: np.ndarray,
                         duration: float, sample_period: float = 0.01,
                         substeps: int = 10, Q: np.ndarray | None = None,
                         escape_norm: float = 1e6) -> ClosedLoopTrajectory:
    """Integrate the closed loop and compare tau(x(t)) to the linear response.

    The feedback is re-evaluated inside every integrator stage, so the
    integration converges at the full RK4 order on the autonomous closed
    loop.  Gamma singularity anywhere along the trajectory aborts with the
    state and time recorded.
    """
    n = sys.n
    Q = np.eye(n) if Q is None else np.asarray(Q, dtype=float)
    P = lyapunov_solve(sf.a_cl, Q)

    L = int(round(duration / sample_period))
    x = np.asarray(x0, dtype=float).copy()
    ts = np.arange(L + 1) * sample_period
    xs = np.empty((L + 1, n))
    us = np.empty((L + 1, sys.m))
    etas = np.empty((L + 1, n))
    h = sample_period / substeps

    t_now = 0.0

    def field_cl(xx: np.ndarray, _u) -> np.ndarray:
        try:
            u = control_law(sol, sf, dic, xx)
        except GammaSingularError as exc:
            raise GammaSingularError(exc.x, t_now) from None
        return sys.field_at(xx, u)

    for i in range(L + 1):
        t_now = ts[i]
        try:
            u = control_law(sol, sf, dic, x)
        except GammaSingularError as exc:
            raise GammaSingularError(exc.x, t_now) from None
        xs[i] = x
        us[i] = u
        etas[i] = sol.tau(dic, x)
        if np.linalg.norm(x) > escape_norm:
            raise RuntimeError(f"closed loop diverged at t={t_now:g}")
        if i == L:
            break
        for _ in range(substeps):
            x = rk4_step(field_cl, x, u, h)

    eta0 = etas[0]
    eta_ref = np.array([expm(sf.a_cl * t) @ eta0 for t in ts])
    v_lyap = np.einsum("ij,jk,ik->i", etas, P, etas)
    return ClosedLoopTrajectory(
        t=ts, x=xs, u=us, eta=etas, eta_ref=eta_ref, v_lyap=v_lyap, P=P,
        max_eta_error=float(np.abs(etas - eta_ref).max()),
    )


_FMT = "%.17g"


def write_trajectory_csv(traj: ClosedLoopTrajectory, path) -> None:
    n = traj.x.shape[1]
    m = traj.u.shape[1]
    header = ["t"] + [f"x{i+1}" for i in range(n)] + \
        [f"u{j+1}" for j in range(m)] + [f"eta{i+1}" for i in range(n)] + ["V"]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(traj.t.size):
            row = np.concatenate(([traj.t[i]], traj.x[i], traj.u[i],
                                  traj.eta[i], [traj.v_lyap[i]]))
            fh.write(",".join(_FMT % v for v in row) + "\n")


def write_roa_json(roa: RoAEstimate, path) -> None:
    doc = {
        "P": roa.P.tolist(),
        "c": roa.c,
        "Q": roa.Q.tolist(),
        "lyapunov_residual": roa.lyapunov_residual,
        "n_level_samples": roa.n_level_samples,
        "region": {
            "box_lower": roa.region.box_lower.tolist(),
            "box_upper": roa.region.box_upper.tolist(),
            "threshold": roa.region.threshold,
            "pass_fraction": roa.region.pass_fraction,
            "grid": roa.region.grid.to_dict(),
        },
        "certified": False,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
