"""Control-affine system simulation, excitation signals and dataset capture.

Datasets store exact derivative triples ``(x_i, u_i, xdot_i)`` with
``xdot_i = f(x_i) + g(x_i) u_i`` evaluated from the model at the sample
instant, so the regression premises hold to machine precision.  Central
differencing is available only for imported trajectories that lack
derivatives; such datasets are flagged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ControlAffineSystem",
    "Dataset",
    "ExcitationSignal",
    "TrajectoryEscapeError",
    "collect_dataset",
    "estimate_derivatives",
    "make_system",
    "read_dataset_csv",
    "rk4_step",
    "write_dataset_csv",
    "write_dataset_json",
]


class TrajectoryEscapeError(RuntimeError):
    """Raised when an open-loop experiment leaves the safety box."""

    def __init__(self, message: str, t: float, x: np.ndarray):
        super().__init__(message)
        self.t = t
        self.x = x


@dataclass(frozen=True)
class ControlAffineSystem:
    """System ``xdot = f(x) + g(x) u`` with smooth fields f, g."""

    name: str
    n: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)

    def field_at(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"state has shape {x.shape}, expected ({self.n},)")
        if u.shape != (self.m,):
            raise ValueError(f"input has shape {u.shape}, expected ({self.m},)")
        return np.asarray(self.f(x), dtype=float) + np.asarray(self.g(x), dtype=float) @ u


def make_system(name: str, **params) -> ControlAffineSystem:
    """Instantiate a built-in system by name.

    ``slow_manifold``: the two-state system with a stable/unstable parameter
    pair (``mu``, ``lam``) and a quadratic coupling, both states driven by the
    scalar input.  ``linear``: ``xdot = A x + B u`` for given matrices.
    """
    if name == "slow_manifold":
        mu = float(params.get("mu", -0.5))
        lam = float(params.get("lam", 0.2))

        def f(x, mu=mu, lam=lam):
            return np.array([mu * x[0], lam * (x[1] - x[0] ** 2)])

        def g(x):
            return np.array([[1.0], [1.0]])

        return ControlAffineSystem("slow_manifold", 2, 1, f, g, {"mu": mu, "lam": lam})

    if name == "linear":
        A = np.asarray(params["A"], dtype=float)
        B = np.asarray(params["B"], dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError("linear system needs square A and conforming B")
        B = B.reshape(A.shape[0], -1)
        return ControlAffineSystem(
            "linear", A.shape[0], B.shape[1],
            lambda x, A=A: A @ x, lambda x, B=B: B,
            {"A": A.tolist(), "B": B.tolist()},
        )

    raise ValueError(f"unknown built-in system {name!r}")


@dataclass(frozen=True)
class ExcitationSignal:
    """Deterministic excitation recipe.

    ``kind`` is ``piecewise_constant_uniform``, ``multi_sine`` or ``table``.
    Realizations depend only on the seed (and the table contents), never on
    call order.
    """

    kind: str = "piecewise_constant_uniform"
    low: float = -0.1
    high: float = 0.1
    hold: float | None = None  # None: hold = sampling period
    seed: int = 0
    n_sines: int = 8
    table_times: tuple[float, ...] = ()
    table_values: tuple[tuple[float, ...], ...] = ()

    def realize(self, duration: float, sample_period: float, m: int) -> Callable[[float], np.ndarray]:
        if self.low >= self.high:
            raise ValueError("excitation needs low < high")
        hold = self.hold if self.hold is not None else sample_period
        if self.kind == "piecewise_constant_uniform":
            if hold <= 0:
                raise ValueError("hold period must be positive")
            n_holds = max(1, int(np.ceil(duration / hold - 1e-12)))
            rng = np.random.default_rng(self.seed)
            values = rng.uniform(self.low, self.high, size=(n_holds, m))

            def u(t: float) -> np.ndarray:
                k = min(int(t / hold), n_holds - 1)
                return values[k]

            return u

        if self.kind == "multi_sine":
            rng = np.random.default_rng(self.seed)
            center = 0.5 * (self.low + self.high)
            half = 0.5 * (self.high - self.low)
            amps = rng.uniform(0.5, 1.0, size=(self.n_sines, m))
            phases = rng.uniform(0, 2 * np.pi, size=(self.n_sines, m))
            base = 2 * np.pi / max(duration, hold)
            freqs = base * np.arange(1, self.n_sines + 1)
            scale = amps.sum(axis=0)

            def u(t: float) -> np.ndarray:
                s = (amps * np.sin(np.outer(freqs, np.ones(m)) * t + phases)).sum(axis=0)
                return center + half * s / scale

            return u

        if self.kind == "table":
            times = np.asarray(self.table_times, dtype=float)
            values = np.asarray(self.table_values, dtype=float).reshape(len(times), m)
            if len(times) == 0:
                raise ValueError("table excitation needs at least one entry")

            def u(t: float) -> np.ndarray:
                k = int(np.searchsorted(times, t, side="right") - 1)
                return values[max(k, 0)]

            return u

        raise ValueError(f"unknown excitation kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sampled experiment ``{(t_i, x_i, u_i, xdot_i)}`` with provenance."""

    t: np.ndarray            # (L,)
    x: np.ndarray            # (L, n)
    u: np.ndarray            # (L, m)
    xdot: np.ndarray         # (L, n)
    sample_period: float
    provenance: dict = field(default_factory=dict)
    derivative_mode: str = "exact"

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.t, dtype=float))
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        xd = np.atleast_2d(np.asarray(self.xdot, dtype=float))
        L = t.shape[0]
        if x.shape[0] != L or u.shape[0] != L or xd.shape[0] != L:
            raise ValueError("t, x, u, xdot must share the sample count")
        if xd.shape != x.shape:
            raise ValueError("xdot must match the state shape")
        if L > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        for name, arr in (("t", t), ("x", x), ("u", u), ("xdot", xd)):
            object.__setattr__(self, name, arr)

    @property
    def L(self) -> int:
        return self.t.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    def samples(self):
        """Iterate over (x_i, u_i, xdot_i) triples."""
        for i in range(self.L):
            yield self.x[i], self.u[i], self.xdot[i]


def rk4_step(field: Callable[[np.ndarray, np.ndarray], np.ndarray],
             x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    """Classical 4th-order Runge-Kutta update with u held constant over the step."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    k1 = np.asarray(field(x, u), dtype=float)
    k2 = np.asarray(field(x + 0.5 * h * k1, u), dtype=float)
    k3 = np.asarray(field(x + 0.5 * h * k2, u), dtype=float)
    k4 = np.asarray(field(x + h * k3, u), dtype=float)
    out = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite field evaluation during RK4 step")
    return out


def collect_dataset(sys: ControlAffineSystem, x0: np.ndarray, sig: ExcitationSignal,
                    duration: float, sample_period: float, substeps: int = 10,
                    safety_box: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Run one open-loop experiment and return the sampled dataset.

    Samples are taken at ``t_i = i * sample_period`` for ``i = 0..L-1`` with
    ``L = duration / sample_period``; a zero duration yields the single
    initial sample.  Stored derivatives are exact model evaluations at the
    sample instants.
    """
    if sample_period <= 0:
        raise ValueError("sample_period must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    L_float = duration / sample_period
    L = int(round(L_float))
    if abs(L_float - L) > 1e-9:
        raise ValueError("duration must be an integer multiple of sample_period")
    L = max(L, 1)

    u_of_t = sig.realize(max(duration, sample_period), sample_period, sys.m)
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (sys.n,):
        raise ValueError(f"x0 has shape {x.shape}, expected ({sys.n},)")

    lo = hi = None
    if safety_box is not None:
        lo = np.asarray(safety_box[0], dtype=float)
        hi = np.asarray(safety_box[1], dtype=float)

    h = sample_period / substeps
    ts = np.empty(L)
    xs = np.empty((L, sys.n))
    us = np.empty((L, sys.m))
    xds = np.empty((L, sys.n))
    for i in range(L):
        t = i * sample_period
        u = u_of_t(t)
        ts[i] = t
        xs[i] = x
        us[i] = u
        xds[i] = sys.field_at(x, u)
        if not np.all(np.isfinite(x)):
            raise TrajectoryEscapeError("non-finite state", t, x)
        if lo is not None and (np.any(x < lo) or np.any(x > hi)):
            raise TrajectoryEscapeError(
                f"trajectory left the safety box at t={t:g}", t, x)
        if i == L - 1:
            break
        for k in range(substeps):
            uu = u_of_t(t + k * h)
            x = rk4_step(sys.field_at, x, uu, h)

    prov = {
        "system": sys.name,
        "params": sys.params,
        "seed": sig.seed,
        "excitation": {
            "kind": sig.kind, "low": sig.low, "high": sig.high,
            "hold": sig.hold if sig.hold is not None else sample_period,
        },
        "duration": duration,
        "sample_period": sample_period,
        "substeps": substeps,
        "x0": np.asarray(x0, dtype=float).tolist(),
    }
    return Dataset(ts, xs, us, xds, sample_period, prov, "exact")


def estimate_derivatives(t: np.ndarray, x: np.ndarray,
                         u: np.ndarray, mode: str = "central") -> Dataset:
    """Differentiate a uniformly sampled trajectory that lacks derivatives.

    Central differences on interior samples, second-order one-sided stencils
    at the ends.  The result is flagged ``derivative_mode='central'``.
    """
    if mode != "central":
        raise ValueError(f"unsupported mode {mode!r}")
    t = np.asarray(t, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if t.size < 3:
        raise ValueError("need at least 3 samples for central differencing")
    dt = np.diff(t)
    h = dt[0]
    if np.any(np.abs(dt - h) > 1e-9 * max(abs(h), 1.0)):
        raise ValueError("central differencing requires uniform timestamps")
    xd = np.empty_like(x)
    xd[1:-1] = (x[2:] - x[:-2]) / (2 * h)
    xd[0] = (-3 * x[0] + 4 * x[1] - x[2]) / (2 * h)
    xd[-1] = (3 * x[-1] - 4 * x[-2] + x[-3]) / (2 * h)
    return Dataset(t, x, u, xd, h, {"system": "external"}, "central")


_FMT = "%.17g"


def write_dataset_csv(ds: Dataset, path) -> None:
    n, m = ds.n, ds.m
    header = ["t"] + [f"x{i+1}" for i in range(n)] + \
        [f"u{j+1}" for j in range(m)] + [f"dx{i+1}" for i in range(n)]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(ds.L):
            row = np.concatenate(([ds.t[i]], ds.x[i], ds.u[i], ds.xdot[i]))
            fh.write(",".join(_FMT % v for v in row) + "\n")


def read_dataset_csv(path, sample_period: float | None = None,
                     derivative_mode: str = "exact") -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [list(map(float, line.split(","))) for line in fh if line.strip()]
    n = sum(1 for c in header if c.startswith("x"))
    m = sum(1 for c in header if c.startswith("u"))
    data = np.asarray(rows, dtype=float)
    t = data[:, 0]
    x = data[:, 1:1 + n]
    u = data[:, 1 + n:1 + n + m]
    xd = data[:, 1 + n + m:1 + 2 * n + m]
    if sample_period is None:
        sample_period = float(t[1] - t[0]) if len(t) > 1 else 0.0
    return Dataset(t, x, u, xd, sample_period,
                   {"system": "file", "path": str(path)}, derivative_mode)


def write_dataset_json(ds: Dataset, path) -> None:
    doc = {
        "provenance": ds.provenance,
        "derivative_mode": ds.derivative_mode,
        "sample_period": ds.sample_period,
        "t": ds.t.tolist(),
        "x": ds.x.tolist(),
        "u": ds.u.tolist(),
        "xdot": ds.xdot.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
