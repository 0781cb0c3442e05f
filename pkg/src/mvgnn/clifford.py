"""Exact reference implementation of the Clifford algebra Cl(R^3).

Everything here is plain float64 numpy with value semantics; no autodiff.
This module is the oracle the differentiable layers are audited against:
it owns the structure-constant table of the geometric product and the
outermorphism (the induced O(3) action on the whole algebra).

Basis order is fixed as [1, e1, e2, e3, e12, e13, e23, e123].
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidGradeError, InvalidMapError

# blade index -> sorted tuple of generator indices (1-based)
BLADES = [(), (1,), (2,), (3,), (1, 2), (1, 3), (2, 3), (1, 2, 3)]
BLADE_INDEX = {b: i for i, b in enumerate(BLADES)}
GRADE_OF_SLOT = np.array([len(b) for b in BLADES])  # [0,1,1,1,2,2,2,3]
GRADE_SLOTS = [tuple(i for i, b in enumerate(BLADES) if len(b) == k) for k in range(4)]


def _blade_product(a, b):
    """Multiply two basis blades given as generator tuples.

    Returns (sign, blade). Generators square to +1 and anticommute, so the
    concatenation is sorted by adjacent swaps (each contributing -1) and
    equal neighbors cancel in pairs.
    """
    gens = list(a) + list(b)
    sign = 1
    # bubble sort, counting swaps
    changed = True
    while changed:
        changed = False
        i = 0
        while i < len(gens) - 1:
            if gens[i] > gens[i + 1]:
                gens[i], gens[i + 1] = gens[i + 1], gens[i]
                sign = -sign
                changed = True
            elif gens[i] == gens[i + 1]:
                del gens[i : i + 2]  # e_i e_i = +1
                changed = True
            else:
                i += 1
    return sign, tuple(gens)


def _build_table():
    t = np.zeros((8, 8, 8))
    for i, a in enumerate(BLADES):
        for j, b in enumerate(BLADES):
            sign, blade = _blade_product(a, b)
            t[i, j, BLADE_INDEX[blade]] = sign
    return t


# STRUCTURE_TABLE[i, j, k] is the e_k coefficient of e_i * e_j
STRUCTURE_TABLE = _build_table()
STRUCTURE_TABLE.setflags(write=False)

_REVERSE_SIGNS = np.array([(-1.0) ** (k * (k - 1) // 2) for k in GRADE_OF_SLOT])


class Multivector:
    """A single element of Cl(R^3), stored as 8 coefficients."""

    __slots__ = ("coeffs",)

    def __init__(self, coeffs=None):
        if coeffs is None:
            self.coeffs = np.zeros(8)
        else:
            c = np.asarray(coeffs, dtype=float)
            if c.shape != (8,):
                raise ValueError(f"Multivector needs 8 coefficients, got shape {c.shape}")
            self.coeffs = c.copy()

    @classmethod
    def basis(cls, index, value=1.0):
        c = np.zeros(8)
        c[index] = value
        return cls(c)

    def __add__(self, other):
        return Multivector(self.coeffs + other.coeffs)

    def __sub__(self, other):
        return Multivector(self.coeffs - other.coeffs)

    def __neg__(self):
        return Multivector(-self.coeffs)

    def __mul__(self, other):
        if isinstance(other, Multivector):
            return geometric_product(self, other)
        return Multivector(self.coeffs * float(other))

    __rmul__ = __mul__

    def __eq__(self, other):
        return isinstance(other, Multivector) and np.array_equal(self.coeffs, other.coeffs)

    def __repr__(self):
        names = ["1", "e1", "e2", "e3", "e12", "e13", "e23", "e123"]
        terms = [f"{c:g}*{n}" for c, n in zip(self.coeffs, names) if c != 0]
        return "MV(" + (" + ".join(terms) if terms else "0") + ")"

    def allclose(self, other, atol=1e-12):
        return np.allclose(self.coeffs, other.coeffs, atol=atol, rtol=0)


def geometric_product(a: Multivector, b: Multivector) -> Multivector:
    return Multivector(np.einsum("ijk,i,j->k", STRUCTURE_TABLE, a.coeffs, b.coeffs))


def grade_project(v: Multivector, k: int) -> Multivector:
    if k not in (0, 1, 2, 3):
        raise InvalidGradeError(f"grade must be in 0..3, got {k}")
    c = np.zeros(8)
    idx = list(GRADE_SLOTS[k])
    c[idx] = v.coeffs[idx]
    return Multivector(c)


def reverse(v: Multivector) -> Multivector:
    return Multivector(v.coeffs * _REVERSE_SIGNS)


def bilinear_form(v: Multivector, w: Multivector) -> float:
    """<reverse(v) * w>_0; for this signature equal to the coefficient dot."""
    via_product = geometric_product(reverse(v), w).coeffs[0]
    via_dot = float(v.coeffs @ w.coeffs)
    assert abs(via_product - via_dot) <= 1e-12 * max(1.0, abs(via_dot))
    return via_dot


def quadratic_form(v: Multivector) -> float:
    return bilinear_form(v, v)


def embed_vector(x) -> Multivector:
    x = np.asarray(x, dtype=float)
    c = np.zeros(8)
    c[1:4] = x
    return Multivector(c)


def embed_scalar(s: float) -> Multivector:
    c = np.zeros(8)
    c[0] = s
    return Multivector(c)


def extract_vector(v: Multivector) -> np.ndarray:
    return v.coeffs[1:4].copy()


def extract_scalar(v: Multivector) -> float:
    return float(v.coeffs[0])


class OrthogonalMap:
    """A 3x3 orthogonal matrix together with its determinant sign."""

    __slots__ = ("matrix", "det_sign")

    def __init__(self, matrix, det_sign=None):
        m = np.asarray(matrix, dtype=float)
        if m.shape != (3, 3):
            raise InvalidMapError(f"expected 3x3 matrix, got {m.shape}")
        if not np.allclose(m.T @ m, np.eye(3), atol=1e-12, rtol=0):
            raise InvalidMapError("matrix is not orthogonal within 1e-12")
        det = np.linalg.det(m)
        if det_sign is None:
            det_sign = 1 if det > 0 else -1
        if abs(det - det_sign) > 1e-12:
            raise InvalidMapError(f"det {det} does not match det_sign {det_sign}")
        self.matrix = m.copy()
        self.det_sign = int(det_sign)


def outermorphism_matrix(r: OrthogonalMap) -> np.ndarray:
    """The 8x8 matrix of the algebra automorphism induced by r.

    Grade 0 is fixed, grade-1 basis vectors go through the matrix, and each
    higher blade maps to the geometric product of its rotated generators.
    """
    rho = np.zeros((8, 8))
    rho[0, 0] = 1.0
    images = [embed_vector(r.matrix[:, a]) for a in range(3)]  # image of e_{a+1}
    for idx, blade in enumerate(BLADES):
        if not blade:
            continue
        acc = images[blade[0] - 1]
        for g in blade[1:]:
            acc = geometric_product(acc, images[g - 1])
        rho[:, idx] = acc.coeffs
    return rho


def apply_orthogonal(r: OrthogonalMap, v: Multivector) -> Multivector:
    return Multivector(outermorphism_matrix(r) @ v.coeffs)


def random_orthogonal(seed: int, det_sign: int = 1) -> OrthogonalMap:
    """Deterministic random element of O(3) with the requested determinant."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))  # fix the QR sign ambiguity
    if np.sign(np.linalg.det(q)) != det_sign:
        q = q.copy()
        q[:, 0] = -q[:, 0]
    return OrthogonalMap(q, det_sign)


def random_multivector(rng) -> Multivector:
    return Multivector(rng.standard_normal(8))
