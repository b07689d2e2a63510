"""Symmetric covariant tensor fields on the plane domain.

A rank-m field stores one scalar evaluator per symmetric multi-index over
{1, 2}; the index count of 1s determines the binomial weight when the field
is contracted with m copies of a unit tangent vector, which is how a tensor
becomes a function on the sphere bundle. The symmetrized covariant derivative
raises the rank by one and, evaluated on the bundle, agrees with the
derivative along the geodesic flow; that identity is what the gauge
construction and the transform tests lean on.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np
import sympy as sp

from .geometry import ConformalMetric, Domain
from .scalarfields import (
    X,
    Y,
    ScalarField,
    parse_expression,
    smoothstep_quintic,
)


class RankUnsupported(Exception):
    """Raised for tensor ranks outside the implemented range."""


class FieldError(Exception):
    """Raised for malformed field specifications."""


def _canonical(idx, rank):
    idx = tuple(int(i) for i in idx)
    if len(idx) != rank:
        raise FieldError(f"multi-index {idx} does not match rank {rank}")
    if any(i not in (1, 2) for i in idx):
        raise FieldError(f"multi-index {idx} has entries outside {{1, 2}}")
    return tuple(sorted(idx))


def _as_scalar_field(val):
    if isinstance(val, ScalarField):
        return val
    return ScalarField(val)


class SymTensorField:
    """Symmetric covariant tensor field of rank m over {1,2} indices."""

    def __init__(self, rank, components=None, metric: ConformalMetric | None = None):
        if rank < 0:
            raise RankUnsupported("rank must be nonnegative")
        if rank > 3:
            raise RankUnsupported(f"rank {rank} not supported (max 3)")
        self.rank = int(rank)
        self.metric = metric if metric is not None else ConformalMetric()
        self.components = {}
        if rank == 0:
            src = components if components is not None else {(): 0}
            if not isinstance(src, dict):
                src = {(): src}
            for key, val in src.items():
                if tuple(key) != ():
                    raise FieldError("rank-0 field takes the empty multi-index only")
                self.components[()] = _as_scalar_field(val)
            self.components.setdefault((), ScalarField(0))
        else:
            seen = {}
            for key, val in (components or {}).items():
                can = _canonical(key, rank)
                if can in seen and tuple(key) != seen[can]:
                    raise FieldError(f"duplicate component for index {can}")
                seen[can] = tuple(key)
                self.components[can] = _as_scalar_field(val)
            # fill the missing canonical slots with zero
            for can in _canonical_indices(rank):
                self.components.setdefault(can, ScalarField(0))

    def component(self, idx) -> ScalarField:
        return self.components[_canonical(idx, self.rank)]

    def _component_values(self, xs, ys):
        """All component values at once; one compiled call with shared CSE."""
        if not hasattr(self, "_compiled"):
            cans = sorted(self.components)
            exprs = [self.components[c].expr for c in cans]
            fn = sp.lambdify((X, Y), exprs, modules="numpy", cse=True)
            self._compiled = (cans, fn)
        cans, fn = self._compiled
        return dict(zip(cans, fn(xs, ys)))

    def evaluate(self, xs, ys, thetas):
        """Contract with m copies of the unit vector, vectorized."""
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        thetas = np.asarray(thetas, dtype=float)
        vals = self._component_values(xs, ys)
        if self.rank == 0:
            out = vals[()] * np.ones_like(thetas)
            return out
        speed = (
            np.exp(-self.metric.phi.value(xs, ys))
            if not self.metric.is_euclidean
            else 1.0
        )
        v1 = speed * np.cos(thetas)
        v2 = speed * np.sin(thetas)
        out = 0.0
        for can, v in vals.items():
            c1 = can.count(1)
            out = out + comb(self.rank, c1) * v * v1**c1 * v2 ** (self.rank - c1)
        return out

    # small algebra, enough for gauge comparisons
    def __add__(self, other):
        if not isinstance(other, SymTensorField) or other.rank != self.rank:
            return NotImplemented
        comps = {
            can: self.components[can] + other.components[can]
            for can in self.components
        }
        return SymTensorField(self.rank, comps, metric=self.metric)

    def __sub__(self, other):
        return self + (other * -1.0)

    def __mul__(self, scalar):
        comps = {can: fld * scalar for can, fld in self.components.items()}
        return SymTensorField(self.rank, comps, metric=self.metric)

    __rmul__ = __mul__


def _canonical_indices(rank):
    if rank == 0:
        return [()]
    return [tuple([1] * (rank - j) + [2] * j) for j in range(rank + 1)]


def eval_on_SM(f: SymTensorField, p) -> float:
    """Value of the tensor contracted with the unit vector at a phase point."""
    return float(f.evaluate(p.x[0], p.x[1], p.theta))


def metric_tensor_field(metric: ConformalMetric) -> SymTensorField:
    """The metric itself as a rank-2 field; evaluates to 1 on the bundle."""
    e2 = sp.exp(2 * metric.phi.expr)
    return SymTensorField(2, {(1, 1): e2, (1, 2): 0, (2, 2): e2}, metric=metric)


# ---------------------------------------------------------------------------
# covariant derivative


def _christoffels(phi_expr):
    """Christoffel symbols of exp(2*phi)*(dx^2+dy^2), keyed (up, lo, lo)."""
    px = sp.diff(phi_expr, X)
    py = sp.diff(phi_expr, Y)
    return {
        (1, 1, 1): px, (1, 1, 2): py, (1, 2, 1): py, (1, 2, 2): -px,
        (2, 1, 1): -py, (2, 1, 2): px, (2, 2, 1): px, (2, 2, 2): py,
    }


def sym_cov_derivative(h: SymTensorField, metric: ConformalMetric | None = None) -> SymTensorField:
    """Symmetrized covariant derivative; raises the rank by one.

    Evaluated on the sphere bundle, the result equals the derivative of the
    input's bundle function along the geodesic flow.
    """
    metric = metric if metric is not None else h.metric
    if h.rank >= 3:
        raise RankUnsupported("derivative of a rank-3 field leaves the supported range")
    gamma = _christoffels(metric.phi.expr)
    var = {1: X, 2: Y}
    m = h.rank

    def nabla(k, beta):
        # covariant derivative component (grad index k, tensor index beta)
        expr = sp.diff(h.component(beta).expr if m else h.components[()].expr, var[k])
        for j in range(m):
            for l in (1, 2):
                repl = beta[:j] + (l,) + beta[j + 1:]
                expr = expr - gamma[(l, k, beta[j])] * h.component(repl).expr
        return expr

    comps = {}
    for alpha in _canonical_indices(m + 1):
        total = sp.S.Zero
        for p in range(m + 1):
            beta = alpha[:p] + alpha[p + 1:]
            total = total + nabla(alpha[p], beta)
        comps[alpha] = total / (m + 1)
    return SymTensorField(m + 1, comps, metric=metric)


# ---------------------------------------------------------------------------
# admissible potentials


@dataclass
class GaugeSpec:
    """Recipe for a potential obeying the boundary conditions.

    The seed is an arbitrary smooth field; the output vanishes (to second
    order) within ``cutoff_width`` of the outer wall and has its normal-odd
    part blended away within ``blend_width`` of the obstacle wall.
    """

    seed: SymTensorField
    domain: Domain
    metric: ConformalMetric | None = None
    cutoff_width: float = 0.3
    blend_width: float = 0.3

    def __post_init__(self):
        if self.metric is None:
            self.metric = self.seed.metric
        gap = self.domain.boundary_gap()
        if not (0 < self.cutoff_width < gap) or not (0 < self.blend_width < gap):
            raise FieldError(
                f"gauge widths must lie in (0, {gap}); "
                f"got cutoff={self.cutoff_width}, blend={self.blend_width}"
            )


def make_admissible_potential(spec: GaugeSpec) -> SymTensorField:
    """Build a potential vanishing on the outer wall, reflection-even on the obstacle.

    Rank 0 needs no obstacle treatment; rank 1 has its normal component
    removed near the obstacle; rank 2 has its mixed normal-tangential
    component removed. Higher ranks are out of range.
    """
    seed = spec.seed
    if seed.rank > 2:
        raise RankUnsupported(f"potential rank {seed.rank} not supported (max 2)")
    dom = spec.domain

    # outer cutoff: quintic smoothstep in the Euclidean wall distance, so the
    # output and its first two derivatives vanish on the outer wall
    R = dom.outer.radius
    cxo, cyo = dom.outer.center
    d_out = R - sp.sqrt((X - cxo) ** 2 + (Y - cyo) ** 2)
    chi_e = smoothstep_quintic(d_out / spec.cutoff_width)

    if seed.rank == 0 or dom.obstacle is None:
        comps = {
            can: chi_e * fld.expr for can, fld in seed.components.items()
        }
        return SymTensorField(seed.rank, comps, metric=spec.metric)

    # obstacle blending frame: level-set normal and its rotation
    Gq = dom.obstacle.G_expr()
    gx, gy = sp.diff(Gq, X), sp.diff(Gq, Y)
    gn = sp.sqrt(gx**2 + gy**2)
    n1, n2 = -gx / gn, -gy / gn          # domain-outward: into the obstacle
    t1, t2 = -n2, n1
    dist = Gq / gn                        # first-order distance outside the wall
    chi_r = smoothstep_quintic(1 - dist / spec.blend_width)

    if seed.rank == 1:
        s1, s2 = seed.component((1,)).expr, seed.component((2,)).expr
        sn = s1 * n1 + s2 * n2
        comps = {
            (1,): chi_e * (s1 - chi_r * sn * n1),
            (2,): chi_e * (s2 - chi_r * sn * n2),
        }
        return SymTensorField(1, comps, metric=spec.metric)

    # rank 2: remove the mixed normal-tangential part
    s11 = seed.component((1, 1)).expr
    s12 = seed.component((1, 2)).expr
    s22 = seed.component((2, 2)).expr
    # B = h(n, t) with Euclidean-unit frame vectors; conformal factors cancel
    B = (
        s11 * n1 * t1
        + s12 * (n1 * t2 + n2 * t1)
        + s22 * n2 * t2
    )
    comps = {
        (1, 1): chi_e * (s11 - chi_r * B * 2 * n1 * t1),
        (1, 2): chi_e * (s12 - chi_r * B * (n1 * t2 + n2 * t1)),
        (2, 2): chi_e * (s22 - chi_r * B * 2 * n2 * t2),
    }
    return SymTensorField(2, comps, metric=spec.metric)


# ---------------------------------------------------------------------------
# fiber analysis


def fiber_degrees(f: SymTensorField, points=None, n_theta=64, rel_tol=1e-12):
    """Degrees present in the fiber expansion of the bundle function.

    Samples base points, expands over the fiber angle with an FFT and keeps
    the harmonics whose coefficient mass exceeds ``rel_tol`` relative to the
    total. A rank-m field can only produce m, m-2, m-4, ...
    """
    if points is None:
        points = [(1.3, 0.2), (-0.7, 1.1), (0.4, -1.2), (1.1, 1.1)]
    thetas = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
    present = set()
    for (px, py) in points:
        vals = f.evaluate(np.full(n_theta, px), np.full(n_theta, py), thetas)
        coef = np.fft.rfft(np.asarray(vals, dtype=float)) / n_theta
        mass = np.abs(coef)
        total = mass.sum()
        if total == 0.0:
            continue
        for k in range(len(mass)):
            if mass[k] > rel_tol * total:
                present.add(k)
    return sorted(present)


# ---------------------------------------------------------------------------
# config parsing


def field_from_config(cfg, metric: ConformalMetric | None = None) -> SymTensorField:
    """Build a field from ``{"rank": m, "components": {"12": <expr>, ...}}``.

    Component keys are digit strings over {1, 2} of length m (the empty
    string for rank 0); values use the scalar expression vocabulary.
    """
    if not isinstance(cfg, dict):
        raise FieldError(f"malformed field spec: {cfg!r}")
    extra = set(cfg) - {"rank", "components"}
    if extra:
        raise FieldError(f"unknown field keys: {sorted(extra)}")
    if "rank" not in cfg:
        raise FieldError("field spec needs a rank")
    rank = int(cfg["rank"])
    if rank > 3 or rank < 0:
        raise RankUnsupported(f"rank {rank} not supported (max 3)")
    comps = {}
    for key, body in (cfg.get("components") or {}).items():
        if rank == 0:
            if key != "":
                raise FieldError("rank-0 component key must be the empty string")
            idx = ()
        else:
            if not isinstance(key, str) or len(key) != rank or any(ch not in "12" for ch in key):
                raise FieldError(f"bad component key {key!r} for rank {rank}")
            idx = tuple(int(ch) for ch in key)
        comps[idx] = parse_expression(body)
    return SymTensorField(rank, comps, metric=metric)
