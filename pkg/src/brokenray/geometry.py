"""Domain geometry: conformal metrics, boundary curves, reflection.

The base manifold is a closed region of the plane bounded by an outer circle
(the emission boundary, where rays enter and exit) and an optional strictly
convex obstacle (circle or axis-aligned ellipse) whose boundary reflects rays.
The metric is conformally Euclidean, g = exp(2*phi) * (dx^2 + dy^2).

Conventions fixed here and relied on everywhere else:

* unit tangents are parametrized by the Euclidean direction angle theta,
  v = exp(-phi) * (cos theta, sin theta);
* the outward unit normal of the domain points away from the interior, i.e.
  out of the outer circle and into the obstacle;
* the scalar second fundamental form of the boundary is positive where the
  boundary curves away from the domain (outer circle) and negative on the
  obstacle wall.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import sympy as sp

from .scalarfields import X, Y, ScalarField

BOUNDARY_TOL = 1e-10


class NotOnBoundary(Exception):
    """Raised when a query point is not on any boundary component."""


class GeometryError(Exception):
    """Raised for malformed geometric configurations."""


# ---------------------------------------------------------------------------
# metric


class ConformalMetric:
    """Conformally Euclidean metric exp(2*phi) * (dx^2 + dy^2)."""

    def __init__(self, phi: ScalarField | None = None):
        self.phi = phi if phi is not None else ScalarField(0)
        self.is_euclidean = self.phi.expr == 0

    def conformal_factor(self, xs, ys):
        """exp(phi) at the points."""
        return np.exp(self.phi.value(xs, ys))

    def speed(self, xs, ys):
        """Euclidean length exp(-phi) of a unit tangent vector."""
        return np.exp(-self.phi.value(xs, ys))

    def unit_vector(self, xs, ys, thetas):
        """Coordinate components of the unit vector with direction angle theta."""
        s = self.speed(xs, ys)
        return s * np.cos(thetas), s * np.sin(thetas)

    def dot(self, xs, ys, ax, ay, bx, by):
        """Metric inner product of coordinate vectors a and b at the points."""
        return np.exp(2.0 * self.phi.value(xs, ys)) * (ax * bx + ay * by)

    def norm(self, xs, ys, ax, ay):
        return np.sqrt(self.dot(xs, ys, ax, ay, ax, ay))

    def curvature(self, xs, ys):
        """Gauss curvature K = -exp(-2*phi) * laplacian(phi)."""
        hxx, _, hyy = self.phi.hess(xs, ys)
        return -np.exp(-2.0 * self.phi.value(xs, ys)) * (hxx + hyy)


def curvature(metric: ConformalMetric, xs, ys):
    """Gauss curvature of the metric at the given points."""
    return metric.curvature(xs, ys)


def metric_from_config(cfg) -> ConformalMetric:
    """Build a metric from the config vocabulary.

    ``cfg`` is ``"zero"`` or ``{"gaussian_bump": {"amp", "center", "width"}}``
    or ``{"quadratic": {"xx", "yy", "const"}}``.
    """
    if cfg == "zero":
        return ConformalMetric(ScalarField(0))
    if not isinstance(cfg, dict) or len(cfg) != 1:
        raise GeometryError(f"malformed metric spec: {cfg!r}")
    kind, body = next(iter(cfg.items()))
    if kind == "gaussian_bump":
        extra = set(body) - {"amp", "center", "width"}
        if extra:
            raise GeometryError(f"unknown keys in gaussian_bump: {sorted(extra)}")
        cx, cy = body.get("center", (0.0, 0.0))
        w = float(body["width"])
        amp = float(body.get("amp", 0.1))
        expr = amp * sp.exp(-(((X - cx) ** 2 + (Y - cy) ** 2) / w**2))
        return ConformalMetric(ScalarField(expr))
    if kind == "quadratic":
        extra = set(body) - {"xx", "yy", "const"}
        if extra:
            raise GeometryError(f"unknown keys in quadratic: {sorted(extra)}")
        expr = (
            sp.Float(body.get("xx", 0.0)) * X**2
            + sp.Float(body.get("yy", 0.0)) * Y**2
            + sp.Float(body.get("const", 0.0))
        )
        return ConformalMetric(ScalarField(expr))
    raise GeometryError(f"unknown metric kind: {kind!r}")


# ---------------------------------------------------------------------------
# boundary curves


class Circle:
    """Circle of radius R about a center; G < 0 strictly inside the curve."""

    def __init__(self, center, radius):
        if radius <= 0:
            raise GeometryError("circle radius must be positive")
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    def G(self, xs, ys):
        return (xs - self.center[0]) ** 2 + (ys - self.center[1]) ** 2 - self.radius**2

    def grad_G(self, xs, ys):
        return 2.0 * (xs - self.center[0]), 2.0 * (ys - self.center[1])

    def hess_G(self, xs, ys):
        shape = np.broadcast_shapes(np.shape(xs), np.shape(ys))
        two = np.full(shape, 2.0)
        return two, np.zeros(shape), two.copy()

    def signed_distance(self, xs, ys):
        """Euclidean distance to the curve, negative inside."""
        r = np.hypot(xs - self.center[0], ys - self.center[1])
        return r - self.radius

    def point_at(self, s):
        """Arc-length parametrization, s in [0, perimeter)."""
        ang = np.asarray(s, dtype=float) / self.radius
        return (
            self.center[0] + self.radius * np.cos(ang),
            self.center[1] + self.radius * np.sin(ang),
        )

    @property
    def perimeter(self):
        return 2.0 * np.pi * self.radius

    def G_expr(self):
        return (X - self.center[0]) ** 2 + (Y - self.center[1]) ** 2 - self.radius**2


class Ellipse:
    """Axis-aligned ellipse; G < 0 strictly inside the curve."""

    def __init__(self, center, semi_x, semi_y):
        if semi_x <= 0 or semi_y <= 0:
            raise GeometryError("ellipse semi-axes must be positive")
        self.center = np.asarray(center, dtype=float)
        self.semi_x = float(semi_x)
        self.semi_y = float(semi_y)

    def G(self, xs, ys):
        return ((xs - self.center[0]) / self.semi_x) ** 2 + ((ys - self.center[1]) / self.semi_y) ** 2 - 1.0

    def grad_G(self, xs, ys):
        return (
            2.0 * (xs - self.center[0]) / self.semi_x**2,
            2.0 * (ys - self.center[1]) / self.semi_y**2,
        )

    def hess_G(self, xs, ys):
        shape = np.broadcast_shapes(np.shape(xs), np.shape(ys))
        return (
            np.full(shape, 2.0 / self.semi_x**2),
            np.zeros(shape),
            np.full(shape, 2.0 / self.semi_y**2),
        )

    def signed_distance(self, xs, ys):
        """First-order signed distance proxy G/|grad G|, negative inside.

        Exact on the curve and correct to first order in a collar around it,
        which is all the tracer and the cutoff profiles need.
        """
        g = self.G(xs, ys)
        gx, gy = self.grad_G(xs, ys)
        return g / np.maximum(np.hypot(gx, gy), 1e-300)

    def point_at(self, s):
        """Arc-length parametrization via a dense parameter table."""
        ts, cum = self._arc_table()
        s = np.mod(np.asarray(s, dtype=float), cum[-1])
        t = np.interp(s, cum, ts)
        return (
            self.center[0] + self.semi_x * np.cos(t),
            self.center[1] + self.semi_y * np.sin(t),
        )

    def _arc_table(self):
        if not hasattr(self, "_table"):
            ts = np.linspace(0.0, 2.0 * np.pi, 4097)
            dx = -self.semi_x * np.sin(ts)
            dy = self.semi_y * np.cos(ts)
            sp_ = np.hypot(dx, dy)
            cum = np.concatenate([[0.0], np.cumsum(0.5 * (sp_[1:] + sp_[:-1]) * np.diff(ts))])
            self._table = (ts, cum)
        return self._table

    @property
    def perimeter(self):
        return self._arc_table()[1][-1]

    def G_expr(self):
        return ((X - self.center[0]) / self.semi_x) ** 2 + ((Y - self.center[1]) / self.semi_y) ** 2 - 1


# ---------------------------------------------------------------------------
# domain


OUTER = "outer"
OBSTACLE = "obstacle"


@dataclass(frozen=True)
class BoundaryPoint:
    """Boundary data at a point: outward unit normal and curving of the wall."""

    x: np.ndarray
    nu: np.ndarray          # outward g-unit normal, coordinate components
    nu_euclid: np.ndarray   # outward Euclidean unit normal
    pi: float               # scalar second fundamental form at the point
    component: str          # OUTER or OBSTACLE
    conformal_factor: float = 1.0   # exp(phi) at x, for metric products


@dataclass(frozen=True)
class PhasePoint:
    """A point of the unit sphere bundle: base point plus direction angle."""

    x: np.ndarray
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))


class Domain:
    """Region between the outer circle and an optional convex obstacle."""

    def __init__(self, outer: Circle, obstacle: Circle | Ellipse | None = None):
        self.outer = outer
        self.obstacle = obstacle
        if obstacle is not None:
            self._validate_obstacle()

    def _validate_obstacle(self):
        ss = np.linspace(0.0, self.obstacle.perimeter, 256, endpoint=False)
        xs, ys = self.obstacle.point_at(ss)
        if np.any(self.outer.G(xs, ys) >= 0):
            raise GeometryError("obstacle is not strictly inside the outer curve")
        if self.boundary_gap() <= 0:
            raise GeometryError("obstacle touches the outer curve")

    def boundary_gap(self):
        """Minimum Euclidean distance between the two boundary components."""
        if self.obstacle is None:
            return np.inf
        ss = np.linspace(0.0, self.obstacle.perimeter, 512, endpoint=False)
        xs, ys = self.obstacle.point_at(ss)
        d = self.outer.radius - np.hypot(xs - self.outer.center[0], ys - self.outer.center[1])
        return float(np.min(d))

    # -- defining functions; F < 0 in the interior, grad F outward ----------

    def F_outer(self, xs, ys):
        return self.outer.G(xs, ys)

    def grad_F_outer(self, xs, ys):
        return self.outer.grad_G(xs, ys)

    def F_obstacle(self, xs, ys):
        if self.obstacle is None:
            raise GeometryError("domain has no obstacle")
        return -self.obstacle.G(xs, ys)

    def grad_F_obstacle(self, xs, ys):
        gx, gy = self.obstacle.grad_G(xs, ys)
        return -gx, -gy

    def contains(self, xs, ys):
        inside = self.outer.G(xs, ys) < 0
        if self.obstacle is not None:
            inside &= self.obstacle.G(xs, ys) > 0
        return inside

    def component_of(self, x, tol=BOUNDARY_TOL):
        """Boundary component on which x lies, judged by |F| <= tol."""
        x = np.asarray(x, dtype=float)
        if abs(self.F_outer(x[0], x[1])) <= tol:
            return OUTER
        if self.obstacle is not None and abs(float(self.F_obstacle(x[0], x[1]))) <= tol:
            return OBSTACLE
        raise NotOnBoundary(f"point {x} is not on the boundary (tol={tol})")


def boundary_data(domain: Domain, metric: ConformalMetric, x, tol=BOUNDARY_TOL) -> BoundaryPoint:
    """Outward normal and scalar second fundamental form at a boundary point.

    The second fundamental form of the boundary in the metric g follows the
    conformal transformation rule pi = exp(-phi) * (kappa_e + dphi/dn), with
    kappa_e the Euclidean curvature of the wall taken with respect to the
    outward Euclidean normal n.
    """
    component = domain.component_of(x, tol=tol)
    x = np.asarray(x, dtype=float)
    curve = domain.outer if component == OUTER else domain.obstacle
    sign = 1.0 if component == OUTER else -1.0

    gx, gy = curve.grad_G(x[0], x[1])
    gx, gy = sign * gx, sign * gy
    gnorm = float(np.hypot(gx, gy))
    n = np.array([gx / gnorm, gy / gnorm])

    # Euclidean curvature of the level set with respect to n = grad F / |grad F|
    hxx, hxy, hyy = curve.hess_G(x[0], x[1])
    hxx, hxy, hyy = sign * hxx, sign * hxy, sign * hyy
    fx, fy = gx, gy
    kappa_e = (hxx * fy**2 - 2.0 * hxy * fx * fy + hyy * fx**2) / gnorm**3

    phix, phiy = metric.phi.grad(x[0], x[1])
    dphi_dn = float(phix) * n[0] + float(phiy) * n[1]
    emphi = float(np.exp(-metric.phi.value(x[0], x[1])))
    pi = emphi * (float(kappa_e) + dphi_dn)

    nu = emphi * n
    return BoundaryPoint(
        x=x, nu=nu, nu_euclid=n, pi=float(pi), component=component,
        conformal_factor=1.0 / emphi,
    )


def reflect(bp: BoundaryPoint, v) -> np.ndarray:
    """Reflect a tangent vector across the boundary: v -> v - 2 <v, nu> nu.

    ``v`` holds coordinate components; the inner product is the metric one
    at the boundary point, so the map is a g-isometric involution.
    """
    v = np.asarray(v, dtype=float)
    dot_g = bp.conformal_factor**2 * float(v @ bp.nu)
    return v - 2.0 * dot_g * bp.nu


def reverse(p: PhasePoint) -> PhasePoint:
    """Reverse the direction of a phase point."""
    th = p.theta + np.pi
    th = np.arctan2(np.sin(th), np.cos(th))
    return PhasePoint(x=p.x.copy(), theta=float(th))


# ---------------------------------------------------------------------------
# admissibility


@dataclass
class AdmissibilityReport:
    curvature_ok: bool
    outer_convex: bool
    obstacle_concave: bool
    l_estimate: float
    tangential_count_max: int
    ray_errors: list = field(default_factory=list)
    max_curvature: float = 0.0
    admissible: bool = False

    def as_dict(self):
        return {
            "admissible": self.admissible,
            "curvature_ok": self.curvature_ok,
            "outer_convex": self.outer_convex,
            "obstacle_concave": self.obstacle_concave,
            "l_estimate": self.l_estimate,
            "tangential_count_max": self.tangential_count_max,
            "max_curvature": self.max_curvature,
            "ray_errors": list(self.ray_errors),
        }


def _interior_samples(domain: Domain, n=48):
    R = domain.outer.radius
    c = domain.outer.center
    ts = np.linspace(-R, R, n)
    xs, ys = np.meshgrid(c[0] + ts, c[1] + ts, indexing="ij")
    xs, ys = xs.ravel(), ys.ravel()
    keep = domain.contains(xs, ys)
    return xs[keep], ys[keep]


def check_admissibility(
    domain: Domain,
    metric: ConformalMetric,
    l_max: float = 50.0,
    tangential_threshold: float = 0.05,
    n_boundary: int = 64,
    n_angles: int = 17,
    step: float = None,
) -> AdmissibilityReport:
    """Sample curvature, boundary convexity and a ray fan for exit behaviour.

    The fan launches inward rays from the outer boundary and records the
    longest exit time, the largest number of near-tangential reflections on
    any single ray, and any tracer faults (as report entries, never raised).
    """
    from . import raytracer

    xs, ys = _interior_samples(domain)
    K = metric.curvature(xs, ys)
    curvature_ok = bool(np.all(K <= 1e-12))
    max_curvature = float(np.max(K)) if K.size else 0.0

    ss = np.linspace(0.0, domain.outer.perimeter, n_boundary, endpoint=False)
    pi_outer = []
    for s in ss:
        px, py = domain.outer.point_at(s)
        pi_outer.append(boundary_data(domain, metric, (px, py)).pi)
    outer_convex = bool(np.all(np.asarray(pi_outer) > 0))

    obstacle_concave = True
    if domain.obstacle is not None:
        so = np.linspace(0.0, domain.obstacle.perimeter, n_boundary, endpoint=False)
        pxs, pys = domain.obstacle.point_at(so)
        pi_obs = [
            boundary_data(domain, metric, (px, py)).pi for px, py in zip(pxs, pys)
        ]
        obstacle_concave = bool(np.all(np.asarray(pi_obs) < 0))

    if step is None:
        step = 1e-3 * domain.outer.radius

    x0, y0, th0 = [], [], []
    for s in ss:
        px, py = domain.outer.point_at(s)
        bp = boundary_data(domain, metric, (px, py))
        base = np.arctan2(-bp.nu_euclid[1], -bp.nu_euclid[0])
        for j in range(n_angles):
            # strictly transversal inward directions, avoiding the tangents
            ang = base + (j + 0.5) / n_angles * np.pi - np.pi / 2.0
            x0.append(px)
            y0.append(py)
            th0.append(ang)

    result = raytracer.trace_fan_arrays(
        domain,
        metric,
        np.asarray(x0),
        np.asarray(y0),
        np.asarray(th0),
        l_max=l_max,
        tangential_threshold=tangential_threshold,
        step=step,
    )

    errors = []
    for rid, status in enumerate(result.status):
        if status != raytracer.STATUS_OK:
            errors.append({"ray": rid, "error": raytracer.STATUS_NAMES[status]})
    finite = result.status == raytracer.STATUS_OK
    l_estimate = float(np.max(result.tau[finite])) if np.any(finite) else np.inf
    if not np.all(finite):
        l_estimate = np.inf
    tang_max = int(np.max(result.tangential_count)) if result.tangential_count.size else 0

    report = AdmissibilityReport(
        curvature_ok=curvature_ok,
        outer_convex=outer_convex,
        obstacle_concave=obstacle_concave,
        l_estimate=l_estimate,
        tangential_count_max=tang_max,
        ray_errors=errors,
        max_curvature=max_curvature,
    )
    report.admissible = (
        curvature_ok
        and outer_convex
        and obstacle_concave
        and np.isfinite(l_estimate)
        and l_estimate <= l_max
        and tang_max <= 1
    )
    return report


def domain_from_config(cfg) -> Domain:
    """Build a domain from ``{"outer": {"circle": ...}, "obstacle": ...}``."""
    extra = set(cfg) - {"outer", "obstacle", "metric"}
    if extra:
        raise GeometryError(f"unknown geometry keys: {sorted(extra)}")
    outer_cfg = cfg["outer"]
    if set(outer_cfg) != {"circle"}:
        raise GeometryError("outer boundary must be a circle")
    c = outer_cfg["circle"]
    extra = set(c) - {"center", "radius"}
    if extra:
        raise GeometryError(f"unknown keys in outer circle: {sorted(extra)}")
    outer = Circle(c.get("center", (0.0, 0.0)), c["radius"])

    obstacle = None
    obs_cfg = cfg.get("obstacle")
    if obs_cfg is not None:
        if not isinstance(obs_cfg, dict) or len(obs_cfg) != 1:
            raise GeometryError(f"malformed obstacle spec: {obs_cfg!r}")
        kind, body = next(iter(obs_cfg.items()))
        if kind == "circle":
            extra = set(body) - {"center", "radius"}
            if extra:
                raise GeometryError(f"unknown keys in obstacle circle: {sorted(extra)}")
            obstacle = Circle(body.get("center", (0.0, 0.0)), body["radius"])
        elif kind == "ellipse":
            extra = set(body) - {"center", "semi_x", "semi_y"}
            if extra:
                raise GeometryError(f"unknown keys in obstacle ellipse: {sorted(extra)}")
            obstacle = Ellipse(body.get("center", (0.0, 0.0)), body["semi_x"], body["semi_y"])
        else:
            raise GeometryError(f"unknown obstacle kind: {kind!r}")
    return Domain(outer, obstacle)
