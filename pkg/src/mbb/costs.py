"""Cost functionals on the diffusion variable and their Legendre transforms.

A cost acts on the scalar diffusion rate ``a >= 0`` (in 1D the non-negative
symmetric matrices are just the half-line).  Two families are provided:

* ``power``:    c(a) = lam * a**p            (lam > 0, p > 1)
* ``pme-dual``: c(a) = a**p / (p * (2q)**(p/q)),  q = p/(p-1),

the second one being the conjugate pair of ``c*(u) = 2 * max(u,0)**q`` that
drives the porous-medium dual machinery.  Both are strictly convex on
``a >= 0`` with ``c(0) = 0``, p-coercive and of p-growth, so a single
implementation parameterized by ``(p, lam)`` covers them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

__all__ = [
    "CostSpec",
    "DualCostSpec",
    "legendre",
    "grad_legendre",
    "smeared_cost",
    "m_p",
]

_KINDS = ("power", "pme-dual")


def _pme_dual_lambda(p: float) -> float:
    q = p / (p - 1.0)
    return 1.0 / (p * (2.0 * q) ** (p / q))


@dataclass(frozen=True)
class CostSpec:
    """Power cost ``c(a) = lam * a**p`` on ``a >= 0``.

    ``kind="pme-dual"`` fixes ``lam`` so that the conjugate is
    ``2 * (u+)**q``; an explicit ``lam`` is then rejected unless it matches.
    """

    p: float
    lam: float = 1.0
    kind: str = "power"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        if self.kind == "pme-dual":
            lam = _pme_dual_lambda(self.p)
            if self.lam not in (1.0, lam) and abs(self.lam - lam) > 1e-12 * lam:
                raise ValueError("pme-dual lambda is determined by p")
            object.__setattr__(self, "lam", lam)
        elif not self.lam > 0:
            raise ValueError("lam must be positive")

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)

    def __call__(self, a):
        a = np.asarray(a, dtype=float)
        if np.any(a < 0):
            raise ValueError("cost is defined on a >= 0")
        return self.lam * a**self.p

    def dual(self) -> "DualCostSpec":
        # c*(u) = (p-1) * lam * (u+ / (p lam))**q  =  kappa * (u+)**q
        kappa = (self.p - 1.0) * self.lam * (1.0 / (self.p * self.lam)) ** self.q
        return DualCostSpec(q=self.q, kappa=kappa)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "p": self.p, "lambda": self.lam}

    @classmethod
    def from_dict(cls, d: dict) -> "CostSpec":
        kind = d.get("kind", "power")
        if kind == "pme-dual":
            return cls(p=float(d["p"]), kind=kind)
        return cls(p=float(d["p"]), lam=float(d.get("lambda", 1.0)), kind=kind)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "CostSpec":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class DualCostSpec:
    """Conjugate ``c*(u) = kappa * (u+)**q``: convex, nondecreasing, q-growth."""

    q: float
    kappa: float

    def __post_init__(self):
        if not self.q > 1:
            raise ValueError("q must exceed 1")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")

    def __call__(self, u):
        up = np.maximum(np.asarray(u, dtype=float), 0.0)
        return self.kappa * up**self.q

    def grad(self, u):
        """Derivative ``kappa * q * (u+)**(q-1)``; the optimal a-value."""
        up = np.maximum(np.asarray(u, dtype=float), 0.0)
        return self.kappa * self.q * up ** (self.q - 1.0)


def legendre(cost: CostSpec, u):
    """Legendre transform ``c*(u) = sup_{a>=0} (a u - c(a))``."""
    return cost.dual()(u)


def grad_legendre(cost: CostSpec, u):
    """The unique maximizer ``a >= 0`` of ``a u - c(a)``; zero for ``u <= 0``."""
    return cost.dual().grad(u)


def smeared_cost(c_point, a, quad_order: int = 40):
    """Gaussian smearing ``E[c(sqrt(a) Z)]`` by Gauss-Hermite quadrature.

    Exact for polynomial ``c_point`` of degree below ``2 * quad_order``.
    ``a`` may be an array; the Gaussian integral is taken along a new last
    axis and reduced.
    """
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise ValueError("smeared cost needs a >= 0")
    z, w = hermegauss(quad_order)
    w = w / math.sqrt(2.0 * math.pi)  # probabilists' weights sum to sqrt(2 pi)
    vals = c_point(np.sqrt(a)[..., None] * z)
    out = vals @ w
    return out if a.ndim else float(out)


def m_p(p: float, u, v):
    """``integral_0^1 ((1-t) u + t v)**(1-p) dt`` for ``u, v > 0``.

    Evaluated from the antiderivative of the defining integrand,
    ``(v**(2-p) - u**(2-p)) / ((2-p)(v-u))`` away from the ``p = 2`` and
    ``v = u`` limits, with series fallbacks near them.  (The displayed
    closed form printed next to the definition in the source material is
    inconsistent with the integral; this routine follows the integral.)
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(u <= 0) or np.any(v <= 0):
        raise ValueError("m_p needs u, v > 0")
    scalar = u.ndim == 0 and v.ndim == 0
    u, v = np.broadcast_arrays(np.atleast_1d(u), np.atleast_1d(v))
    g = 2.0 - p
    L = np.log(v / u)
    # m_p = u**(1-p) * E(g*L) / E(L) with E(x) = expm1(x)/x extended by 1.
    out = u ** (1.0 - p) * _expm1_over_x(g * L) / _expm1_over_x(L)
    return float(out[0]) if scalar else out


def _expm1_over_x(x):
    small = np.abs(x) < 1e-6
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + x / 2.0 + x * x / 6.0, np.expm1(safe) / safe)
