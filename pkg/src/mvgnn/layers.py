"""Equivariant building blocks.

All layers register their weights in a ParameterStore under a dotted prefix
and operate on Tensors. Multivector arrays have shape (N, channels, 8) with
the slot order of `mvgnn.clifford`; scalar streams have shape (N, width).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

EPS_NORM = 1e-8  # guard under the square root in the rejection nonlinearity


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MVLinear:
    """Grade-wise channel mixing of multivector arrays; no bias.

    Each of the four grades carries its own (c_out, c_in) mixing matrix;
    grades are invariant subspaces of the O(3) action, so this is equivariant.
    """

    def __init__(self, store, name, c_in, c_out, rng, scale=1.0):
        self.c_in, self.c_out = c_in, c_out
        self.w = store.add(name + ".w", scale * _uniform(rng, (4, c_out, c_in), c_in))

    def __call__(self, v):
        if v.data.shape[1] != self.c_in:
            raise ShapeError("mv_linear", f"expected {self.c_in} channels, got {v.data.shape[1]}")
        return ad.grade_mix(v, self.w)


class MVNNonlinearity:
    """Rejection nonlinearity on multivector channels.

    q = Q(v), k = K(v); per channel the output is q where b(q, k) >= 0 and
    otherwise the rejection of q from the eps-normalized k.
    """

    def __init__(self, store, name, channels, rng):
        self.q = MVLinear(store, name + ".q", channels, channels, rng)
        self.k = MVLinear(store, name + ".k", channels, channels, rng)

    def __call__(self, v):
        q = self.q(v)
        k = self.k(v)
        bqk = ad.tsum(ad.mul(q, k), axis=-1, keepdims=True)   # (N, c, 1)
        bkk = ad.tsum(ad.mul(k, k), axis=-1, keepdims=True)
        mask = ad.constant((bqk.data < 0).astype(float))
        coef = ad.div(bqk, ad.add(bkk, EPS_NORM))             # b(q,k) / (b(k,k)+eps)
        return ad.sub(q, ad.mul(mask, ad.mul(coef, k)))


class GeometricProductLayer:
    """Unparameterized geometric products between two linear images of the
    input, followed by a linear output map and a linear residual path."""

    def __init__(self, store, name, c_in, c_out, rng, residual=True):
        self.lin_a = MVLinear(store, name + ".a", c_in, c_out, rng)
        self.lin_b = MVLinear(store, name + ".b", c_in, c_out, rng)
        self.lin_out = MVLinear(store, name + ".out", c_out, c_out, rng)
        self.residual = MVLinear(store, name + ".res", c_in, c_out, rng) if residual else None

    def __call__(self, v):
        prod = ad.geom_prod(self.lin_a(v), self.lin_b(v))
        out = self.lin_out(prod)
        if self.residual is not None:
            out = ad.add(out, self.residual(v))
        return out


class MVNMLP:
    """Two-layer multivector MLP: linear, rejection nonlinearity, linear."""

    def __init__(self, store, name, c_in, c_out, rng, c_mid=None):
        c_mid = c_mid or max(c_in, c_out)
        self.phi1 = MVLinear(store, name + ".phi1", c_in, c_mid, rng)
        self.sigma = MVNNonlinearity(store, name + ".sigma", c_mid, rng)
        self.phi2 = MVLinear(store, name + ".phi2", c_mid, c_out, rng)

    def __call__(self, v):
        return self.phi2(self.sigma(self.phi1(v)))


class ScalarMLP:
    """Plain MLP with two SiLU hidden layers and a linear output."""

    def __init__(self, store, name, d_in, d_hidden, d_out, rng):
        self.w1 = store.add(name + ".w1", _uniform(rng, (d_hidden, d_in), d_in))
        self.b1 = store.add(name + ".b1", np.zeros(d_hidden))
        self.w2 = store.add(name + ".w2", _uniform(rng, (d_hidden, d_hidden), d_hidden))
        self.b2 = store.add(name + ".b2", np.zeros(d_hidden))
        self.w3 = store.add(name + ".w3", _uniform(rng, (d_out, d_hidden), d_hidden))
        self.b3 = store.add(name + ".b3", np.zeros(d_out))
        self.d_out = d_out

    def __call__(self, x):
        h = ad.silu(ad.linear(x, self.w1, self.b1))
        h = ad.silu(ad.linear(h, self.w2, self.b2))
        return ad.linear(h, self.w3, self.b3)


def invariant_features(v, per_grade=False):
    """Per-channel invariants of a multivector array: quadratic form totals
    (N, c), or per-grade norms-squared (N, 4c) behind the flag."""
    sq = ad.mul(v, v)
    if not per_grade:
        return ad.tsum(sq, axis=-1)
    parts = [
        ad.tsum(ad.narrow(sq, 2, 0, 1), axis=-1),
        ad.tsum(ad.narrow(sq, 2, 1, 3), axis=-1),
        ad.tsum(ad.narrow(sq, 2, 4, 3), axis=-1),
        ad.tsum(ad.narrow(sq, 2, 7, 1), axis=-1),
    ]
    return ad.concat(parts, axis=-1)


class MVPLin:
    """Linear multivector perceptron: gated linear multivector update plus a
    scalar update fed by per-channel norms."""

    def __init__(self, store, name, s_in, s_out, c_in, c_out, d_hidden, rng):
        self.phi_mu = MVLinear(store, name + ".mu", c_in, c_out, rng)
        self.phi_h = MVLinear(store, name + ".h", c_in, c_out, rng)
        self.phi_s = ScalarMLP(store, name + ".s", c_out + s_in, d_hidden, s_out, rng)

    def __call__(self, s, v):
        v_mu = self.phi_mu(v)
        v_h = self.phi_h(v)
        s_mu = ad.mv_norm(v_mu)    # (N, c_out)
        s_h = ad.mv_norm(v_h)
        s_new = self.phi_s(ad.concat([s_h, s], axis=-1))
        gate = ad.reshape(ad.sigmoid(s_mu), s_mu.data.shape + (1,))
        return s_new, ad.mul(gate, v_mu)


class MVPGP:
    """Geometric-product multivector perceptron.

    The scalar MLP reads [s, grade-0 slots of v'] and emits the new scalar
    stream plus one value per channel that overwrites the grade-0 slots.
    """

    def __init__(self, store, name, s_in, s_out, channels, d_hidden, rng):
        self.psi = GeometricProductLayer(store, name + ".psi", channels, channels, rng)
        self.phi_v = MVLinear(store, name + ".v", channels, channels, rng)
        self.phi_s = ScalarMLP(store, name + ".s", s_in + channels, d_hidden, s_out + channels, rng)
        self.s_out = s_out
        self.channels = channels

    def __call__(self, s, v):
        w = self.psi(v)
        vp = self.phi_v(ad.add(w, v))
        g0 = ad.reshape(ad.narrow(vp, 2, 0, 1), (vp.data.shape[0], self.channels))
        out = self.phi_s(ad.concat([s, g0], axis=-1))
        s_new = ad.narrow(out, 1, 0, self.s_out)
        gates = ad.reshape(ad.narrow(out, 1, self.s_out, self.channels),
                           (vp.data.shape[0], self.channels, 1))
        v_new = ad.concat([gates, ad.narrow(vp, 2, 1, 7)], axis=2)
        return s_new, v_new
