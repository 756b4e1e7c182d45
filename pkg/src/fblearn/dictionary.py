"""Basis-function libraries for coordinate, drift and input-gain candidates.

A :class:`Dictionary` holds three ordered libraries of scalar functions of
the state: ``Z`` (coordinate-change candidates, length ``s``), ``Y`` (drift
candidates, length ``p``) and a grid ``W`` (input-gain candidates, ``r x m``).
Every basis function carries a closed-form gradient so that Jacobians are
analytic, never finite-differenced.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "BasisFunction",
    "Dictionary",
    "FamilySpec",
    "LibrarySpec",
    "build_family",
    "build_standard_library",
    "parse_basis_function",
]


@dataclass(frozen=True)
class BasisFunction:
    """One scalar basis function with an analytic gradient.

    ``kind`` is one of ``constant``, ``coordinate``, ``monomial``, ``sin``,
    ``cos`` or ``affine``.  ``params`` holds the kind-specific data: the
    constant value, the coordinate index, the per-coordinate exponent tuple,
    or the affine coefficients ``(c0, c1, ..., cd)``.
    """

    kind: str
    params: tuple

    @staticmethod
    def constant(value: float = 1.0) -> "BasisFunction":
        return BasisFunction("constant", (float(value),))

    @staticmethod
    def coordinate(index: int) -> "BasisFunction":
        return BasisFunction("coordinate", (int(index),))

    @staticmethod
    def monomial(exponents: Sequence[int]) -> "BasisFunction":
        exps = tuple(int(e) for e in exponents)
        if any(e < 0 for e in exps):
            raise ValueError("monomial exponents must be nonnegative")
        return BasisFunction("monomial", exps)

    @staticmethod
    def sin(index: int) -> "BasisFunction":
        return BasisFunction("sin", (int(index),))

    @staticmethod
    def cos(index: int) -> "BasisFunction":
        return BasisFunction("cos", (int(index),))

    @staticmethod
    def affine(coefficients: Sequence[float]) -> "BasisFunction":
        """Affine combination ``c0 + c1*x1 + ... + cd*xd``."""
        return BasisFunction("affine", tuple(float(c) for c in coefficients))

    def value(self, x: np.ndarray) -> float:
        k = self.kind
        if k == "constant":
            return self.params[0]
        if k == "coordinate":
            return float(x[self.params[0]])
        if k == "monomial":
            out = 1.0
            for xi, e in zip(x, self.params):
                if e:
                    out *= float(xi) ** e
            return out
        if k == "sin":
            return float(np.sin(x[self.params[0]]))
        if k == "cos":
            return float(np.cos(x[self.params[0]]))
        if k == "affine":
            c = self.params
            return c[0] + float(np.dot(c[1:], x[: len(c) - 1]))
        raise ValueError(f"unknown basis kind {k!r}")

    def gradient(self, x: np.ndarray) -> np.ndarray:
        d = len(x)
        grad = np.zeros(d)
        k = self.kind
        if k == "constant":
            return grad
        if k == "coordinate":
            grad[self.params[0]] = 1.0
            return grad
        if k == "monomial":
            for j, e in enumerate(self.params):
                if e == 0:
                    continue
                term = float(e)
                for i, ei in enumerate(self.params):
                    if i == j:
                        if ei - 1:
                            term *= float(x[i]) ** (ei - 1)
                    elif ei:
                        term *= float(x[i]) ** ei
                grad[j] = term
            return grad
        if k == "sin":
            i = self.params[0]
            grad[i] = np.cos(x[i])
            return grad
        if k == "cos":
            i = self.params[0]
            grad[i] = -np.sin(x[i])
            return grad
        if k == "affine":
            c = self.params[1:]
            grad[: len(c)] = c
            return grad
        raise ValueError(f"unknown basis kind {k!r}")

    def label(self, names: Sequence[str] | None = None) -> str:
        def nm(i: int) -> str:
            return names[i] if names is not None else f"x{i + 1}"

        k = self.kind
        if k == "constant":
            return repr(self.params[0]) if self.params[0] != 1.0 else "1"
        if k == "coordinate":
            return nm(self.params[0])
        if k == "monomial":
            parts = []
            for i, e in enumerate(self.params):
                if e == 1:
                    parts.append(nm(i))
                elif e > 1:
                    parts.append(f"{nm(i)}^{e}")
            return "*".join(parts) if parts else "1"
        if k == "sin":
            return f"sin({nm(self.params[0])})"
        if k == "cos":
            return f"cos({nm(self.params[0])})"
        if k == "affine":
            c = self.params
            parts = [f"{c[0]!r}"] if c[0] else []
            parts += [f"{ci!r}*{nm(i)}" for i, ci in enumerate(c[1:]) if ci]
            return " + ".join(parts) if parts else "0"
        return k


_FACTOR_RE = re.compile(r"^([xu])(\d*)(?:\^(\d+))?$")
_TRIG_RE = re.compile(r"^(sin|cos)\(\s*([xu])(\d*)\s*\)$")


def parse_basis_function(text: str, n: int, m: int = 0) -> BasisFunction:
    """Parse a human-readable basis entry such as ``x1^2*x2``, ``u`` or ``sin(x1)``.

    Coordinates ``x1..xn`` map to indices ``0..n-1`` and, when ``m > 0``,
    inputs ``u1..um`` to ``n..n+m-1`` (``u`` is accepted for ``u1``).
    """
    text = text.strip()
    if text in ("1", "1.0"):
        return BasisFunction.constant(1.0)

    def coord_index(var: str, num: str) -> int:
        idx = int(num) - 1 if num else 0
        if var == "x":
            if not 0 <= idx < n:
                raise ValueError(f"coordinate {var}{num or 1} out of range for n={n}")
            return idx
        if m == 0:
            raise ValueError(f"input variable in {text!r} not allowed here")
        if not 0 <= idx < m:
            raise ValueError(f"input {var}{num or 1} out of range for m={m}")
        return n + idx

    tr = _TRIG_RE.match(text)
    if tr:
        fn, var, num = tr.groups()
        idx = coord_index(var, num)
        return BasisFunction.sin(idx) if fn == "sin" else BasisFunction.cos(idx)

    exps = [0] * (n + m)
    for factor in text.split("*"):
        fm = _FACTOR_RE.match(factor.strip())
        if not fm:
            raise ValueError(f"cannot parse basis factor {factor!r} in {text!r}")
        var, num, power = fm.groups()
        exps[coord_index(var, num)] += int(power) if power else 1
    return BasisFunction.monomial(exps)


def _as_box(lower, upper, n: int) -> tuple[np.ndarray, np.ndarray]:
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(upper, dtype=float), (n,)).copy()
    if np.any(lo >= hi):
        raise ValueError("domain box must satisfy lower < upper componentwise")
    return lo, hi


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Immutable bundle of the three libraries and the domain box.

    Evaluation is pure; instances can be shared freely across threads.
    """

    n: int
    m: int
    Z: tuple[BasisFunction, ...]
    Y: tuple[BasisFunction, ...]
    W: tuple[tuple[BasisFunction, ...], ...]  # r rows, m columns
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("need n >= 1 and m >= 1")
        if len(self.Z) < self.n:
            raise ValueError(
                f"Z has {len(self.Z)} entries but needs at least n={self.n} "
                "for a rank-n coordinate Jacobian"
            )
        if not self.Y:
            raise ValueError("Y must be nonempty")
        if not self.W or any(len(row) != self.m for row in self.W):
            raise ValueError("W must be a nonempty r x m grid")
        lo, hi = _as_box(self.lower, self.upper, self.n)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def s(self) -> int:
        return len(self.Z)

    @property
    def p(self) -> int:
        return len(self.Y)

    @property
    def r(self) -> int:
        return len(self.W)

    @property
    def mu(self) -> int:
        """Total unknown count ``n*s + p*m + r*m``."""
        return self.n * self.s + self.p * self.m + self.r * self.m

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        return (self.n, self.s, self.p, self.r, self.m)

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"state has shape {x.shape}, expected ({self.n},)")
        return x

    def in_domain(self, x: np.ndarray) -> bool:
        x = self._check_x(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def eval_Z(self, x: np.ndarray) -> np.ndarray:
        x = self._check_x(x)
        return np.array([f.value(x) for f in self.Z])

    def eval_Y(self, x: np.ndarray) -> np.ndarray:
        x = self._check_x(x)
        return np.array([f.value(x) for f in self.Y])

    def eval_W(self, x: np.ndarray) -> np.ndarray:
        x = self._check_x(x)
        return np.array([[f.value(x) for f in row] for row in self.W])

    def jacobian_Z(self, x: np.ndarray) -> np.ndarray:
        """Rows are the analytic gradients of the Z entries, shape (s, n)."""
        x = self._check_x(x)
        return np.array([f.gradient(x) for f in self.Z])

    def jacobian_Y(self, x: np.ndarray) -> np.ndarray:
        x = self._check_x(x)
        return np.array([f.gradient(x) for f in self.Y])

    def z_labels(self) -> list[str]:
        return [f.label() for f in self.Z]


@dataclass(frozen=True)
class FamilySpec:
    """Which basis families make up one library.

    ``powers`` lists pure per-coordinate degrees (e.g. ``(2, 3)`` adds every
    ``x_i^2`` and ``x_i^3``); ``cross_degree`` adds all mixed monomials of
    total degree 2..d.  Ordering of the resulting library is deterministic:
    constant, coordinates, monomials in graded-lexicographic order, sines,
    cosines.
    """

    constant: bool = False
    coordinates: bool = True
    powers: tuple[int, ...] = ()
    cross_degree: int = 0
    sin: bool = False
    cos: bool = False

    def __post_init__(self):
        if any(d < 1 for d in self.powers):
            raise ValueError("power degrees must be >= 1")
        if self.cross_degree < 0:
            raise ValueError("cross_degree must be >= 0")


def _grlex_key(exps: tuple[int, ...]):
    return (sum(exps), tuple(-e for e in exps))


def build_family(spec: FamilySpec, n: int) -> list[BasisFunction]:
    out: list[BasisFunction] = []
    if spec.constant:
        out.append(BasisFunction.constant(1.0))
    if spec.coordinates:
        out.extend(BasisFunction.coordinate(i) for i in range(n))
    exp_set: set[tuple[int, ...]] = set()
    for d in spec.powers:
        if d >= 2:
            for i in range(n):
                e = [0] * n
                e[i] = d
                exp_set.add(tuple(e))
        elif not spec.coordinates:
            exp_set.update(tuple(int(i == j) for j in range(n)) for i in range(n))
    if spec.cross_degree >= 2:
        for d in range(2, spec.cross_degree + 1):
            for combo in itertools.combinations_with_replacement(range(n), d):
                e = [0] * n
                for i in combo:
                    e[i] += 1
                exp_set.add(tuple(e))
    out.extend(BasisFunction.monomial(e) for e in sorted(exp_set, key=_grlex_key))
    if spec.sin:
        out.extend(BasisFunction.sin(i) for i in range(n))
    if spec.cos:
        out.extend(BasisFunction.cos(i) for i in range(n))
    return out


@dataclass(frozen=True)
class LibrarySpec:
    """Declarative description of a full dictionary.

    ``y`` and ``w`` default to the mirror pattern used throughout: ``Y = Z``
    and ``W = [1; Z]`` (scalar input), the latter realized for ``m > 1`` by
    block-repeating the scalar list down the diagonal of the ``r x m`` grid.
    """

    n: int
    m: int
    lower: Sequence[float]
    upper: Sequence[float]
    z: FamilySpec = field(default_factory=FamilySpec)
    y: FamilySpec | None = None
    w: FamilySpec | None = None
    w_prepend_constant: bool = True


def build_standard_library(spec: LibrarySpec) -> Dictionary:
    """Construct a :class:`Dictionary` from a :class:`LibrarySpec`.

    Two calls with equal specs yield identical orderings.
    """
    z_list = build_family(spec.z, spec.n)
    if not z_list:
        raise ValueError("empty Z library")
    y_list = build_family(spec.y, spec.n) if spec.y is not None else list(z_list)

    if spec.w is not None:
        w_scalar = build_family(spec.w, spec.n)
    else:
        w_scalar = list(z_list)
    if spec.w_prepend_constant and not any(
        f.kind == "constant" for f in w_scalar
    ):
        w_scalar.insert(0, BasisFunction.constant(1.0))
    if not w_scalar:
        raise ValueError("empty W library")

    zero = BasisFunction.constant(0.0)
    rows: list[tuple[BasisFunction, ...]] = []
    for j in range(spec.m):
        for f in w_scalar:
            row = [zero] * spec.m
            row[j] = f
            rows.append(tuple(row))

    return Dictionary(
        n=spec.n,
        m=spec.m,
        Z=tuple(z_list),
        Y=tuple(y_list),
        W=tuple(rows),
        lower=np.asarray(spec.lower, dtype=float),
        upper=np.asarray(spec.upper, dtype=float),
    )
