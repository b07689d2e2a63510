"""Geometry layer: metric curvature, boundary data, reflection, admissibility."""

import numpy as np
import pytest
import sympy as sp

from brokenray.geometry import (
    OBSTACLE,
    OUTER,
    Circle,
    ConformalMetric,
    Domain,
    Ellipse,
    GeometryError,
    NotOnBoundary,
    PhasePoint,
    boundary_data,
    check_admissibility,
    curvature,
    domain_from_config,
    metric_from_config,
    reflect,
    reverse,
)
from brokenray.scalarfields import ScalarField, X, Y

RNG = np.random.default_rng(2024)


def annulus():
    return Domain(Circle((0.0, 0.0), 2.0), Circle((0.0, 0.0), 1.0))


# ---------------------------------------------------------------------------
# curvature


def test_euclidean_curvature_vanishes():
    met = ConformalMetric()
    xs = RNG.uniform(-2, 2, 64)
    ys = RNG.uniform(-2, 2, 64)
    assert np.all(curvature(met, xs, ys) == 0.0)
    px, py = met.phi.grad(xs, ys)
    assert np.all(px == 0.0) and np.all(py == 0.0)


def test_curvature_radial_quadratic():
    # phi = (x^2+y^2)/4 has laplacian 1, so K = -exp(-(x^2+y^2)/2) < 0
    met = metric_from_config({"quadratic": {"xx": 0.25, "yy": 0.25}})
    xs = RNG.uniform(-2, 2, 32)
    ys = RNG.uniform(-2, 2, 32)
    expected = -np.exp(-(xs**2 + ys**2) / 2.0)
    assert np.allclose(curvature(met, xs, ys), expected, rtol=0, atol=1e-14)
    assert np.all(curvature(met, xs, ys) < 0)


def test_curvature_sign_flip():
    # phi = -x^2/2 gives K(0,0) = +1, a positively curved point
    met = metric_from_config({"quadratic": {"xx": -0.5}})
    assert curvature(met, 0.0, 0.0) == pytest.approx(1.0, abs=1e-14)


def test_curvature_symbolic_oracle():
    # independent route: differentiate phi directly and apply the formula
    expr = sp.Rational(3, 10) * sp.exp(-((X - 0.3) ** 2 + (Y + 0.2) ** 2) / sp.Rational(36, 25))
    met = ConformalMetric(ScalarField(expr))
    K_expr = -sp.exp(-2 * expr) * (sp.diff(expr, X, 2) + sp.diff(expr, Y, 2))
    K_fn = sp.lambdify((X, Y), K_expr, "numpy")
    xs = RNG.uniform(-2, 2, 40)
    ys = RNG.uniform(-2, 2, 40)
    assert np.allclose(curvature(met, xs, ys), K_fn(xs, ys), rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# boundary data


def test_boundary_data_outer_circle():
    bp = boundary_data(annulus(), ConformalMetric(), (2.0, 0.0))
    assert bp.component == OUTER
    assert np.allclose(bp.nu, [1.0, 0.0], atol=1e-14)
    assert bp.pi == pytest.approx(0.5, abs=1e-12)


def test_boundary_data_obstacle_circle():
    bp = boundary_data(annulus(), ConformalMetric(), (1.0, 0.0))
    assert bp.component == OBSTACLE
    # outward normal of the domain points into the obstacle
    assert np.allclose(bp.nu, [-1.0, 0.0], atol=1e-14)
    assert bp.pi == pytest.approx(-1.0, abs=1e-12)


def test_boundary_data_interior_raises():
    with pytest.raises(NotOnBoundary):
        boundary_data(annulus(), ConformalMetric(), (0.0, 0.0))
    with pytest.raises(NotOnBoundary):
        boundary_data(annulus(), ConformalMetric(), (1.5, 0.0))


def test_boundary_data_conformal_scaling():
    # constant phi = c scales the circle curvature by exp(-c)
    c = 0.7
    met = metric_from_config({"quadratic": {"const": c}})
    dom = annulus()
    bp = boundary_data(dom, met, (0.0, 2.0))
    assert bp.pi == pytest.approx(np.exp(-c) * 0.5, rel=1e-12)
    # nu is unit in g
    norm_g = bp.conformal_factor * np.hypot(*bp.nu)
    assert norm_g == pytest.approx(1.0, abs=1e-14)


def test_boundary_data_ellipse_obstacle():
    # ellipse curvature at the axis endpoints: a/b^2 and b/a^2
    a, b = 0.8, 0.5
    dom = Domain(Circle((0.0, 0.0), 2.0), Ellipse((0.0, 0.0), a, b))
    met = ConformalMetric()
    bp = boundary_data(dom, met, (a, 0.0))
    assert bp.component == OBSTACLE
    assert bp.pi == pytest.approx(-a / b**2, rel=1e-12)
    bp2 = boundary_data(dom, met, (0.0, b))
    assert bp2.pi == pytest.approx(-b / a**2, rel=1e-12)


def test_boundary_data_gradient_term():
    # pi picks up the normal derivative of phi: exp(-phi)(kappa_e + dphi/dn)
    met = metric_from_config({"quadratic": {"xx": 0.1, "yy": 0.1}})
    dom = annulus()
    bp = boundary_data(dom, met, (2.0, 0.0))
    phi_val = 0.1 * 4.0
    dphi_dn = 2 * 0.1 * 2.0
    assert bp.pi == pytest.approx(np.exp(-phi_val) * (0.5 + dphi_dn), rel=1e-12)


# ---------------------------------------------------------------------------
# reflection and reversal


def test_reflect_normal_incidence():
    bp = boundary_data(annulus(), ConformalMetric(), (1.0, 0.0))  # nu = (-1, 0)
    assert np.allclose(reflect(bp, [-1.0, 0.0]), [1.0, 0.0], atol=1e-14)


def test_reflect_tangential_fixed():
    bp = boundary_data(annulus(), ConformalMetric(), (1.0, 0.0))
    assert np.allclose(reflect(bp, [0.0, 1.0]), [0.0, 1.0], atol=1e-14)


def test_reflect_oblique():
    bp = boundary_data(annulus(), ConformalMetric(), (0.0, 2.0))  # nu = (0, 1)
    s = np.sqrt(2.0) / 2.0
    assert np.allclose(reflect(bp, [s, s]), [s, -s], atol=1e-14)


def test_reflect_involution_isometry():
    met = metric_from_config({"quadratic": {"xx": 0.25, "yy": 0.25}})
    dom = annulus()
    for _ in range(32):
        wall, r = (dom.outer, 2.0) if RNG.random() < 0.5 else (dom.obstacle, 1.0)
        ang = RNG.uniform(0, 2 * np.pi)
        x = (r * np.cos(ang), r * np.sin(ang))
        bp = boundary_data(dom, met, x)
        th = RNG.uniform(0, 2 * np.pi)
        ephi = bp.conformal_factor
        v = np.array([np.cos(th), np.sin(th)]) / ephi  # g-unit tangent
        w = reflect(bp, v)
        assert np.max(np.abs(reflect(bp, w) - v)) < 1e-12
        # g-norm preserved
        assert abs(ephi * np.hypot(*w) - 1.0) < 1e-12
        assert wall.G(*x) == pytest.approx(0.0, abs=1e-12)


def test_reflect_reverse_commute():
    dom = annulus()
    met = metric_from_config({"quadratic": {"xx": 0.1}})
    for _ in range(16):
        ang = RNG.uniform(0, 2 * np.pi)
        bp = boundary_data(dom, met, (np.cos(ang), np.sin(ang)))
        v = RNG.normal(size=2)
        assert np.allclose(reflect(bp, -v), -reflect(bp, v), atol=1e-14)


def test_reverse():
    p = PhasePoint(x=(0.5, 0.5), theta=0.0)
    q = reverse(p)
    assert q.theta == pytest.approx(np.pi, abs=1e-15)
    assert np.all(q.x == p.x)
    for _ in range(8):
        p = PhasePoint(x=RNG.normal(size=2), theta=RNG.uniform(-10, 10))
        rr = reverse(reverse(p))
        dth = np.mod(rr.theta - p.theta + np.pi, 2 * np.pi) - np.pi
        assert abs(dth) < 1e-12


# ---------------------------------------------------------------------------
# domain bookkeeping


def test_domain_contains_and_component():
    dom = annulus()
    assert dom.contains(1.5, 0.0)
    assert not dom.contains(0.5, 0.0)  # inside obstacle
    assert not dom.contains(2.5, 0.0)
    assert dom.component_of((2.0, 0.0)) == OUTER
    assert dom.component_of((0.0, -1.0)) == OBSTACLE
    with pytest.raises(NotOnBoundary):
        dom.component_of((1.4, 0.0))


def test_domain_defining_function_signs():
    dom = annulus()
    xs = RNG.uniform(-2.2, 2.2, 256)
    ys = RNG.uniform(-2.2, 2.2, 256)
    inside = dom.contains(xs, ys)
    assert np.all(dom.F_outer(xs[inside], ys[inside]) < 0)
    assert np.all(dom.F_obstacle(xs[inside], ys[inside]) < 0)
    # gradient of F is outward on both walls
    gx, gy = dom.grad_F_outer(2.0, 0.0)
    assert gx > 0
    gx, gy = dom.grad_F_obstacle(1.0, 0.0)
    assert gx < 0


def test_domain_validation_errors():
    with pytest.raises(GeometryError):
        Domain(Circle((0, 0), 2.0), Circle((0, 0), 2.5))  # obstacle outside
    with pytest.raises(GeometryError):
        Domain(Circle((0, 0), 2.0), Circle((1.0, 0.0), 1.0))  # touches outer wall
    with pytest.raises(GeometryError):
        Circle((0, 0), -1.0)
    with pytest.raises(GeometryError):
        Ellipse((0, 0), 1.0, 0.0)


def test_boundary_gap():
    dom = annulus()
    assert dom.boundary_gap() == pytest.approx(1.0, abs=1e-10)
    assert Domain(Circle((0, 0), 2.0)).boundary_gap() == np.inf


# ---------------------------------------------------------------------------
# admissibility


def test_admissibility_euclidean_disk():
    dom = Domain(Circle((0.0, 0.0), 2.0))
    rep = check_admissibility(dom, ConformalMetric(), n_boundary=12, n_angles=5, step=4e-3)
    assert rep.admissible
    assert rep.curvature_ok and rep.outer_convex
    assert rep.l_estimate <= 4.0 + 1e-6  # chords of a radius-2 disk
    assert rep.ray_errors == []


def test_admissibility_euclidean_annulus():
    rep = check_admissibility(annulus(), ConformalMetric(), n_boundary=12, n_angles=5, step=4e-3)
    assert rep.admissible
    assert rep.obstacle_concave
    assert rep.tangential_count_max <= 1


def test_admissibility_positive_curvature_fails():
    met = metric_from_config({"quadratic": {"xx": -0.5}})
    dom = Domain(Circle((0.0, 0.0), 2.0))
    rep = check_admissibility(dom, met, n_boundary=8, n_angles=3, step=4e-3, l_max=20.0)
    assert not rep.curvature_ok
    assert not rep.admissible
    assert rep.max_curvature > 0


def test_admissibility_report_dict():
    dom = Domain(Circle((0.0, 0.0), 2.0))
    rep = check_admissibility(dom, ConformalMetric(), n_boundary=6, n_angles=3, step=4e-3)
    d = rep.as_dict()
    assert d["admissible"] is True
    assert set(d) >= {"curvature_ok", "outer_convex", "obstacle_concave", "l_estimate", "tangential_count_max"}


# ---------------------------------------------------------------------------
# config parsing


def test_metric_from_config_vocab():
    assert metric_from_config("zero").is_euclidean
    met = metric_from_config({"gaussian_bump": {"amp": 0.2, "center": [0.1, 0.0], "width": 1.0}})
    assert met.phi.value(0.1, 0.0) == pytest.approx(0.2, rel=1e-12)
    met = metric_from_config({"quadratic": {"xx": 1.0, "yy": 2.0, "const": 3.0}})
    assert met.phi.value(1.0, 1.0) == pytest.approx(6.0, rel=1e-12)


def test_metric_config_rejects_unknown_keys():
    with pytest.raises(GeometryError):
        metric_from_config({"gaussian_bump": {"amp": 0.2, "width": 1.0, "sigma": 2.0}})
    with pytest.raises(GeometryError):
        metric_from_config({"splines": {}})
    with pytest.raises(GeometryError):
        metric_from_config(42)


def test_domain_from_config():
    dom = domain_from_config(
        {
            "outer": {"circle": {"center": [0, 0], "radius": 2.0}},
            "obstacle": {"circle": {"center": [0, 0], "radius": 1.0}},
        }
    )
    assert dom.outer.radius == 2.0
    assert dom.obstacle.radius == 1.0
    dom = domain_from_config({"outer": {"circle": {"radius": 1.5}}})
    assert dom.obstacle is None
    dom = domain_from_config(
        {
            "outer": {"circle": {"radius": 2.0}},
            "obstacle": {"ellipse": {"semi_x": 0.8, "semi_y": 0.5}},
        }
    )
    assert isinstance(dom.obstacle, Ellipse)


def test_domain_config_rejects_unknown_keys():
    with pytest.raises(GeometryError):
        domain_from_config({"outer": {"circle": {"radius": 2.0}}, "wall": {}})
    with pytest.raises(GeometryError):
        domain_from_config({"outer": {"circle": {"radius": 2.0, "hue": 1}}})
    with pytest.raises(GeometryError):
        domain_from_config({"outer": {"circle": {"radius": 2.0}}, "obstacle": {"square": {}}})
