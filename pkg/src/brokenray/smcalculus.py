"""Discrete differential calculus on the unit sphere bundle of the domain.

The bundle is discretized as a polar base grid times a uniform fiber-angle
grid. Derivatives along the fiber and along the base angle are spectral
(both directions are periodic and the test functions are smooth), while the
radial direction uses fourth-order finite differences with one-sided rows at
the grid edges. With this split every operator identity that only reshuffles
fiber factors holds to rounding, and the radial truncation is the single
source of identity defects, which the refinement reports measure.

Operator conventions (fixed here, validated by the structure tests):

* ``V`` differentiates along the fiber angle;
* ``X`` is the geodesic derivative, ``exp(-phi) (cos t dx + sin t dy) + A dt``
  with connection coefficient ``A = exp(-phi)(phi_y cos t - phi_x sin t)``;
* ``Xperp`` is the rotated horizontal derivative,
  ``exp(-phi) (sin t dx - cos t dy) + B dt`` with
  ``B = exp(-phi)(phi_x cos t + phi_y sin t)``;
* commutators: [X, V] = Xperp, [Xperp, V] = -X, [X, Xperp] = -K V,
  and the vertical Laplacian is -V*V, so [X, Delta] = -(Xperp V + V Xperp).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .geometry import ConformalMetric, Domain, OBSTACLE, OUTER


class DegreeLeakage(Exception):
    """Raised when fiber mass escapes the expected degree band."""


class DomainError(Exception):
    """Raised for constant evaluations outside their validity range."""


# ---------------------------------------------------------------------------
# grids


def _radial_diff_matrix(rs):
    """Dense first-derivative matrix, 4th order, one-sided at the edges."""
    n = rs.size
    h = rs[1] - rs[0]
    if not np.allclose(np.diff(rs), h, rtol=1e-12, atol=1e-14):
        raise ValueError("radial nodes must be uniform")
    D = np.zeros((n, n))
    c = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12.0 * h)
    for i in range(2, n - 2):
        D[i, i - 2 : i + 3] = c
    # one-sided / offset 4th-order five-point rows
    e0 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / (12.0 * h)
    e1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / (12.0 * h)
    D[0, :5] = e0
    D[1, :5] = e1
    D[n - 2, n - 5 :] = -e1[::-1]
    D[n - 1, n - 5 :] = -e0[::-1]
    return D


def _spectral_wavenumbers(n):
    k = np.fft.fftfreq(n, d=1.0 / n)
    if n % 2 == 0:
        k = k.copy()
        k[n // 2] = 0.0  # drop the ambiguous Nyquist mode in derivatives
    return k


class SMGrid:
    """Polar base grid times uniform fiber grid over the domain."""

    def __init__(
        self,
        domain: Domain,
        metric: ConformalMetric,
        n_r: int,
        n_ang: int,
        n_theta: int,
        r_min: float = None,
        r_max: float = None,
    ):
        if n_theta % 2 != 0 or n_theta < 4:
            raise ValueError("fiber grid size must be even and at least 4")
        if n_r < 6:
            raise ValueError("need at least 6 radial nodes for the stencils")
        self.domain = domain
        self.metric = metric
        R = domain.outer.radius
        if r_max is None:
            r_max = R
        if r_min is None:
            r_min = domain.obstacle.radius if _is_circle(domain.obstacle) else 0.02 * R
        if not (0 < r_min < r_max <= R):
            raise ValueError(f"bad radial range [{r_min}, {r_max}]")
        self.rs = np.linspace(r_min, r_max, n_r)
        self.betas = np.linspace(0.0, 2.0 * np.pi, n_ang, endpoint=False)
        self.thetas = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
        self.shape = (n_r, n_ang, n_theta)
        cx, cy = domain.outer.center
        self.base_x = cx + self.rs[:, None] * np.cos(self.betas)[None, :]
        self.base_y = cy + self.rs[:, None] * np.sin(self.betas)[None, :]
        self.inside = domain.contains(self.base_x, self.base_y)
        # walls at the radial ends, used by the boundary forms
        self.wall_at_min = (
            domain.obstacle is not None
            and _is_circle(domain.obstacle)
            and abs(r_min - domain.obstacle.radius) < 1e-12
        )
        self.wall_at_max = abs(r_max - R) < 1e-12
        self._ops = None

    @property
    def max_resolved_degree(self):
        return self.shape[2] // 4

    def node_arrays(self):
        """Flattened (x, y, theta) node coordinates, C-order of the shape."""
        n_r, n_b, n_t = self.shape
        xs = np.broadcast_to(self.base_x[:, :, None], self.shape).ravel()
        ys = np.broadcast_to(self.base_y[:, :, None], self.shape).ravel()
        ths = np.broadcast_to(self.thetas[None, None, :], self.shape).ravel()
        return xs.copy(), ys.copy(), ths.copy()

    def ops(self):
        """Cached operator data: stencils, wavenumbers, coefficient fields."""
        if self._ops is not None:
            return self._ops
        n_r, n_b, n_t = self.shape
        Dr = _radial_diff_matrix(self.rs)
        kb = _spectral_wavenumbers(n_b)
        kt = _spectral_wavenumbers(n_t)
        phi = self.metric.phi
        pv = phi.value(self.base_x, self.base_y)
        px, py = phi.grad(self.base_x, self.base_y)
        pv = np.broadcast_to(np.asarray(pv, dtype=float), (n_r, n_b))
        px = np.broadcast_to(np.asarray(px, dtype=float), (n_r, n_b))
        py = np.broadcast_to(np.asarray(py, dtype=float), (n_r, n_b))
        emphi = np.exp(-pv)
        K = self.metric.curvature(self.base_x, self.base_y)
        K = np.broadcast_to(np.asarray(K, dtype=float), (n_r, n_b))
        cosb = np.cos(self.betas)[None, :, None]
        sinb = np.sin(self.betas)[None, :, None]
        rinv = (1.0 / self.rs)[:, None, None]
        cost = np.cos(self.thetas)[None, None, :]
        sint = np.sin(self.thetas)[None, None, :]
        self._ops = {
            "Dr": Dr,
            "ikb": (1j * kb)[None, :, None],
            "ikt": (1j * kt)[None, None, :],
            "emphi": emphi[:, :, None],
            "phix": px[:, :, None],
            "phiy": py[:, :, None],
            "K": K[:, :, None],
            "cosb": cosb,
            "sinb": sinb,
            "rinv": rinv,
            "cost": cost,
            "sint": sint,
        }
        return self._ops

    def volume_weights(self):
        """Quadrature weights for the bundle volume, shape of the grid.

        Trapezoid in r (with half end weights), uniform in the two periodic
        angles, and the conformal area factor. Exact enough for the relative
        defects measured here; interior-supported integrands see spectral
        accuracy from the periodic directions.
        """
        n_r, n_b, n_t = self.shape
        hr = self.rs[1] - self.rs[0]
        wr = np.full(n_r, hr)
        wr[0] = wr[-1] = hr / 2.0
        ops = self.ops()
        e2phi = ops["emphi"][:, :, 0] ** -2.0
        base = wr[:, None] * self.rs[:, None] * e2phi
        return (
            base[:, :, None]
            * (2.0 * np.pi / n_b)
            * (2.0 * np.pi / n_t)
            * np.ones((1, 1, n_t))
        )


def _is_circle(obstacle):
    from .geometry import Circle

    return isinstance(obstacle, Circle)


@dataclass
class SMGridFunction:
    """Values over an SMGrid plus masks carried along from the producer."""

    grid: SMGrid
    values: np.ndarray
    valid: np.ndarray = None
    tangential: np.ndarray = None
    tau: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"values shape {self.values.shape} does not match grid {self.grid.shape}"
            )
        if self.valid is None:
            self.valid = np.ones(self.grid.shape, dtype=bool)


def grid_function(grid: SMGrid, fn) -> SMGridFunction:
    """Sample a callable (x, y, theta) -> value onto the grid."""
    xs, ys, ths = grid.node_arrays()
    vals = np.asarray(fn(xs, ys, ths), dtype=float).reshape(grid.shape)
    return SMGridFunction(grid=grid, values=vals)


# ---------------------------------------------------------------------------
# first-order operators


def _dr(grid, vals):
    Dr = grid.ops()["Dr"]
    n_r = vals.shape[0]
    return (Dr @ vals.reshape(n_r, -1)).reshape(vals.shape)


def _db(grid, vals):
    ikb = grid.ops()["ikb"]
    return np.fft.ifft(ikb * np.fft.fft(vals, axis=1), axis=1).real


def _dt(grid, vals):
    ikt = grid.ops()["ikt"]
    return np.fft.ifft(ikt * np.fft.fft(vals, axis=2), axis=2).real


def _base_xy_derivatives(grid, vals):
    ops = grid.ops()
    dr = _dr(grid, vals)
    db = _db(grid, vals)
    dx = ops["cosb"] * dr - ops["sinb"] * ops["rinv"] * db
    dy = ops["sinb"] * dr + ops["cosb"] * ops["rinv"] * db
    return dx, dy


def apply_V(u: SMGridFunction) -> SMGridFunction:
    """Fiber derivative, spectral and exact on resolved modes."""
    return SMGridFunction(grid=u.grid, values=_dt(u.grid, u.values), valid=u.valid)


def apply_X(u: SMGridFunction) -> SMGridFunction:
    """Geodesic derivative on the bundle."""
    g = u.grid
    ops = g.ops()
    dx, dy = _base_xy_derivatives(g, u.values)
    dt = _dt(g, u.values)
    A = ops["emphi"] * (ops["phiy"] * ops["cost"] - ops["phix"] * ops["sint"])
    vals = ops["emphi"] * (ops["cost"] * dx + ops["sint"] * dy) + A * dt
    return SMGridFunction(grid=g, values=vals, valid=u.valid)


def apply_Xperp(u: SMGridFunction) -> SMGridFunction:
    """Rotated horizontal derivative on the bundle."""
    g = u.grid
    ops = g.ops()
    dx, dy = _base_xy_derivatives(g, u.values)
    dt = _dt(g, u.values)
    B = ops["emphi"] * (ops["phix"] * ops["cost"] + ops["phiy"] * ops["sint"])
    vals = ops["emphi"] * (ops["sint"] * dx - ops["cost"] * dy) + B * dt
    return SMGridFunction(grid=g, values=vals, valid=u.valid)


def laplacian_vertical(u: SMGridFunction) -> SMGridFunction:
    """Fiberwise Laplacian, the negative second fiber derivative."""
    g = u.grid
    return SMGridFunction(grid=g, values=-_dt(g, _dt(g, u.values)), valid=u.valid)


# ---------------------------------------------------------------------------
# norms


def inner(u: SMGridFunction, w: SMGridFunction, mask=None) -> float:
    wt = u.grid.volume_weights()
    prod = u.values * w.values * wt
    if mask is not None:
        prod = prod * mask
    return float(np.sum(prod))


def norm2(u: SMGridFunction, mask=None) -> float:
    return inner(u, u, mask=mask)


# ---------------------------------------------------------------------------
# fiber degree bookkeeping


@dataclass
class DegreeProjection:
    """One fiber Fourier mode: u_k = a_k(x) cos(k t) + b_k(x) sin(k t)."""

    k: int
    a: np.ndarray
    b: np.ndarray
    grid: SMGrid

    def to_grid_function(self) -> SMGridFunction:
        th = self.grid.thetas[None, None, :]
        vals = self.a[:, :, None] * np.cos(self.k * th) + self.b[:, :, None] * np.sin(
            self.k * th
        )
        return SMGridFunction(grid=self.grid, values=vals)


def fiber_coefficients(u: SMGridFunction):
    """Complex fiber FFT coefficients, normalized so mode k has weight 1."""
    n_t = u.grid.shape[2]
    return np.fft.fft(u.values, axis=2) / n_t


def fiber_mass(u: SMGridFunction):
    """L2 mass per fiber degree k = 0 .. n_t//2, summed over the base."""
    coef = fiber_coefficients(u)
    n_t = u.grid.shape[2]
    half = n_t // 2
    wt = u.grid.volume_weights()[:, :, 0]
    mass = np.zeros(half + 1)
    for k in range(half + 1):
        m = np.abs(coef[:, :, k]) ** 2
        if 0 < k < half or (k == half and n_t % 2 == 1):
            m = m + np.abs(coef[:, :, -k]) ** 2
        elif k == half:
            m = np.abs(coef[:, :, half]) ** 2
        mass[k] = float(np.sum(m * wt))
    return mass


def project_degree(u: SMGridFunction, k: int) -> DegreeProjection:
    """Extract the degree-k fiber mode."""
    if k < 0:
        raise ValueError("degree must be nonnegative")
    if k > u.grid.max_resolved_degree:
        raise DegreeLeakage(
            f"degree {k} beyond the resolved range {u.grid.max_resolved_degree}"
        )
    coef = fiber_coefficients(u)
    if k == 0:
        return DegreeProjection(k=0, a=coef[:, :, 0].real.copy(), b=np.zeros_like(coef[:, :, 0].real), grid=u.grid)
    a = 2.0 * coef[:, :, k].real
    b = -2.0 * coef[:, :, k].imag
    return DegreeProjection(k=k, a=a, b=b, grid=u.grid)


def _degree_band_split(w: SMGridFunction, k_keep, leak_tol=None):
    """Keep the listed degrees; optionally police mass everywhere else."""
    mass = fiber_mass(w)
    total = mass.sum()
    if leak_tol is not None and total > 0:
        keep = set(k_keep)
        outside = sum(m for k, m in enumerate(mass) if k not in keep)
        if outside > leak_tol * total:
            raise DegreeLeakage(
                f"relative fiber mass {outside / total:.3e} outside degrees {sorted(keep)}"
            )
    out = None
    for k in k_keep:
        part = project_degree(w, k).to_grid_function()
        out = part if out is None else SMGridFunction(grid=w.grid, values=out.values + part.values)
    return out


def xplus(u_k: SMGridFunction, k: int, leak_tol: float = 1e-8) -> SMGridFunction:
    """Degree-raising part of X on a pure degree-k input."""
    w = apply_X(u_k)
    _degree_band_split(w, [k + 1] if k > 0 else [1], leak_tol=None)
    bands = [k - 1, k + 1] if k >= 1 else [1]
    _police_leakage(w, bands, leak_tol)
    return project_degree(w, k + 1).to_grid_function()


def xminus(u_k: SMGridFunction, k: int, leak_tol: float = 1e-8) -> SMGridFunction:
    """Degree-lowering part of X on a pure degree-k input; zero for k = 0."""
    w = apply_X(u_k)
    bands = [k - 1, k + 1] if k >= 1 else [1]
    _police_leakage(w, bands, leak_tol)
    if k == 0:
        return SMGridFunction(grid=u_k.grid, values=np.zeros(u_k.grid.shape))
    return project_degree(w, k - 1).to_grid_function()


def split_raising_lowering(u: SMGridFunction, max_degree: int = None):
    """Split the geodesic derivative of mixed-degree u by degree direction.

    Applies the horizontal derivative to each fiber-degree component and
    regroups the output into the degree-raising and degree-lowering halves.
    Exact when u is band-limited below the resolvable degree so that the
    projections account for all of its mass.
    """
    g = u.grid
    if max_degree is None:
        max_degree = g.max_resolved_degree - 1
    up = np.zeros(g.shape)
    down = np.zeros(g.shape)
    for k in range(max_degree + 1):
        uk = project_degree(u, k).to_grid_function()
        xu = apply_X(uk)
        up += project_degree(xu, k + 1).to_grid_function().values
        if k >= 1:
            down += project_degree(xu, k - 1).to_grid_function().values
    return SMGridFunction(grid=g, values=up), SMGridFunction(grid=g, values=down)


def _police_leakage(w, bands, leak_tol):
    if leak_tol is None:
        return
    mass = fiber_mass(w)
    total = mass.sum()
    if total == 0:
        return
    keep = {abs(b) for b in bands}
    outside = sum(m for k, m in enumerate(mass) if k not in keep)
    if outside > leak_tol * total:
        raise DegreeLeakage(
            f"relative fiber mass {outside / total:.3e} outside degrees {sorted(keep)}"
        )


# ---------------------------------------------------------------------------
# structure identities


@dataclass
class StructureReport:
    sizes: list
    residuals: dict        # identity name -> list of relative residuals
    orders: dict           # identity name -> list of observed orders
    floor: float = 1e-12

    def passes(self, min_order=2.0, finest_tol=None):
        ok = True
        for name, res in self.residuals.items():
            for i, order in enumerate(self.orders[name]):
                # rounding-floor residuals cannot show an order
                if res[i + 1] > self.floor and order < min_order:
                    ok = False
            if finest_tol is not None and res[-1] > finest_tol:
                ok = False
        return ok


IDENTITY_NAMES = (
    "commutator_XV_minus_Xperp",
    "commutator_XperpV_plus_X",
    "commutator_XXperp_plus_KV",
    "commutator_Xlaplacian",
)


def structure_residuals(grid: SMGrid, u: SMGridFunction) -> dict:
    """Relative residuals of the four frame identities on one grid."""
    ops = grid.ops()
    K = ops["K"]

    Xu = apply_X(u)
    Vu = apply_V(u)
    Xp = apply_Xperp(u)

    XVu = apply_X(Vu)
    VXu = apply_V(Xu)
    r1 = XVu.values - VXu.values - Xp.values
    d1 = max(_l2(grid, XVu.values), _l2(grid, VXu.values), _l2(grid, Xp.values))

    XpVu = apply_Xperp(Vu)
    VXpu = apply_V(Xp)
    r2 = XpVu.values - VXpu.values + Xu.values
    d2 = max(_l2(grid, XpVu.values), _l2(grid, VXpu.values), _l2(grid, Xu.values))

    XXpu = apply_X(Xp)
    XpXu = apply_Xperp(Xu)
    r3 = XXpu.values - XpXu.values + K * Vu.values
    d3 = max(_l2(grid, XXpu.values), _l2(grid, XpXu.values), _l2(grid, K * Vu.values))

    Du = laplacian_vertical(u)
    XDu = apply_X(Du)
    DXu = laplacian_vertical(Xu)
    XpV = apply_Xperp(Vu).values
    VXp = apply_V(Xp).values
    r4 = (XDu.values - DXu.values) + (XpV + VXp)
    d4 = max(_l2(grid, XDu.values), _l2(grid, DXu.values), _l2(grid, XpV + VXp))

    return {
        IDENTITY_NAMES[0]: _l2(grid, r1) / d1,
        IDENTITY_NAMES[1]: _l2(grid, r2) / d2,
        IDENTITY_NAMES[2]: _l2(grid, r3) / d3,
        IDENTITY_NAMES[3]: _l2(grid, r4) / d4,
    }


def _l2(grid, vals):
    return float(np.sqrt(np.sum(vals**2 * grid.volume_weights())))


def verify_structure(
    domain: Domain,
    metric: ConformalMetric,
    u_batch,
    sizes=(32, 64, 128),
    n_theta=64,
    r_min=None,
    r_max=None,
) -> StructureReport:
    """Residuals of the frame identities across a base-grid refinement.

    ``u_batch`` is one callable (x, y, theta) -> value or a sequence of
    them; with several, each identity reports its worst residual over the
    batch at every size.
    """
    if callable(u_batch):
        u_batch = [u_batch]
    residuals = {name: [] for name in IDENTITY_NAMES}
    for n in sizes:
        grid = SMGrid(domain, metric, n, n, n_theta, r_min=r_min, r_max=r_max)
        worst = {name: 0.0 for name in IDENTITY_NAMES}
        for fn in u_batch:
            res = structure_residuals(grid, grid_function(grid, fn))
            for name in IDENTITY_NAMES:
                worst[name] = max(worst[name], res[name])
        for name in IDENTITY_NAMES:
            residuals[name].append(worst[name])
    steps = [
        float(np.log(sizes[i + 1] / sizes[i])) for i in range(len(sizes) - 1)
    ]
    orders = {
        name: [
            float(np.log(res[i] / res[i + 1]) / steps[i]) if res[i + 1] > 0 else np.inf
            for i in range(len(res) - 1)
        ]
        for name, res in residuals.items()
    }
    return StructureReport(sizes=list(sizes), residuals=residuals, orders=orders)


def make_interior_test_function(domain: Domain, margin=0.15):
    """Smooth bundle function supported away from the walls.

    Gaussian radial envelope centered in the tract between the walls; the
    tails at the walls are far below the identity-defect scales.
    """
    R = domain.outer.radius
    r_in = domain.obstacle.radius if domain.obstacle is not None else 0.0
    rc = 0.5 * (r_in + R)
    sig = (R - r_in) * margin
    cx, cy = domain.outer.center

    def fn(xs, ys, ths):
        r = np.hypot(xs - cx, ys - cy)
        beta = np.arctan2(ys - cy, xs - cx)
        env = np.exp(-(((r - rc) / sig) ** 2))
        return env * (1.0 + 0.3 * np.cos(beta) + 0.2 * np.sin(2 * beta)) * (
            0.5 + np.cos(2 * ths) + 0.4 * np.sin(ths)
        )

    return fn


# ---------------------------------------------------------------------------
# Pestov identity


@dataclass
class PestovReport:
    terms: dict
    P: float
    H: float
    defect: float
    rel_defect: float
    bdy_rel: float = None


def _wall_rings(grid: SMGrid):
    """(radial index, wall sign data) for grid edges lying on actual walls."""
    rings = []
    if grid.wall_at_min:
        rings.append((0, OBSTACLE))
    if grid.wall_at_max:
        rings.append((grid.shape[0] - 1, OUTER))
    return rings


def boundary_forms(u: SMGridFunction):
    """The two boundary forms of the energy identity, wall ring quadrature.

    The integrand of the first form reduces, after the radial-derivative
    parts cancel, to products of first derivatives; both forms use trapezoid
    quadrature in the boundary angle and exact trigonometric quadrature in
    the fiber.
    """
    g = u.grid
    dom = g.domain
    met = g.metric
    ops = g.ops()
    n_r, n_b, n_t = g.shape

    Xu = apply_X(u).values
    Xpu = apply_Xperp(u).values
    Vu = _dt(g, u.values)

    P = 0.0
    H = 0.0
    for idx, comp in _wall_rings(g):
        r_w = g.rs[idx]
        beta = g.betas[:, None]
        theta = g.thetas[None, :]
        rel = theta - beta
        if comp == OUTER:
            v_nu = np.cos(rel)
            vperp_nu = -np.sin(rel)
            kappa_e = 1.0 / r_w
            sgn = 1.0
        else:
            v_nu = -np.cos(rel)
            vperp_nu = np.sin(rel)
            kappa_e = 1.0 / r_w
            sgn = -1.0
        x_w = g.base_x[idx]
        y_w = g.base_y[idx]
        phi_w = np.broadcast_to(np.asarray(met.phi.value(x_w, y_w), dtype=float), (n_b,))
        px_w, py_w = met.phi.grad(x_w, y_w)
        px_w = np.broadcast_to(np.asarray(px_w, dtype=float), (n_b,))
        py_w = np.broadcast_to(np.asarray(py_w, dtype=float), (n_b,))
        nx = sgn * np.cos(g.betas)
        ny = sgn * np.sin(g.betas)
        dphi_dn = px_w * nx + py_w * ny
        pi_w = np.exp(-phi_w) * (sgn * kappa_e + dphi_dn)

        # measure: g-arc length of the wall times the fiber angle
        w_ring = (np.exp(phi_w) * r_w * (2 * np.pi / n_b) * (2 * np.pi / n_t))[:, None]

        bracket = -v_nu * Xpu[idx] - vperp_nu * Xu[idx]
        P += float(np.sum(bracket * Vu[idx] * w_ring))
        H += float(np.sum(pi_w[:, None] * Vu[idx] ** 2 * w_ring))
    return P, H


def boundary_pairing(u: SMGridFunction, w: SMGridFunction) -> float:
    """Wall-ring integral of <v, nu> u w, the integration-by-parts flux."""
    g = u.grid
    met = g.metric
    n_r, n_b, n_t = g.shape
    total = 0.0
    for idx, comp in _wall_rings(g):
        r_w = g.rs[idx]
        rel = g.thetas[None, :] - g.betas[:, None]
        v_nu = np.cos(rel) if comp == OUTER else -np.cos(rel)
        phi_w = np.broadcast_to(
            np.asarray(met.phi.value(g.base_x[idx], g.base_y[idx]), dtype=float), (n_b,)
        )
        w_ring = (np.exp(phi_w) * r_w * (2 * np.pi / n_b) * (2 * np.pi / n_t))[:, None]
        total += float(np.sum(v_nu * u.values[idx] * w.values[idx] * w_ring))
    return total


def pestov_check(u: SMGridFunction, domain: Domain = None) -> PestovReport:
    """Evaluate the energy identity term by term on the grid."""
    g = u.grid
    if domain is not None and domain is not g.domain:
        raise ValueError("domain does not match the grid the function lives on")
    ops = g.ops()
    Xu = apply_X(u)
    Vu = apply_V(u)
    VXu = apply_V(Xu)
    XVu = apply_X(Vu)
    K = ops["K"]

    nVX = norm2(VXu)
    nXV = norm2(XVu)
    nX = norm2(Xu)
    curv = float(np.sum(K * Vu.values**2 * g.volume_weights()))
    P, H = boundary_forms(u)

    lhs = nVX
    rhs = nXV - curv + nX + P
    defect = lhs - rhs
    scale = max(abs(nVX), abs(nXV), abs(curv), abs(nX), abs(P), 1e-300)
    bdy_rel = abs(P + H) / abs(H) if H != 0.0 else None
    return PestovReport(
        terms={
            "norm2_VXu": nVX,
            "norm2_XVu": nXV,
            "curvature_term": curv,
            "norm2_Xu": nX,
        },
        P=P,
        H=H,
        defect=float(defect),
        rel_defect=float(abs(defect) / scale),
        bdy_rel=bdy_rel,
    )


def make_ring_symmetric_function(domain: Domain, width=0.5):
    """Bundle function touching the obstacle wall, reflection-symmetric there.

    Any function of theta - beta that is even about the wall reflection
    theta -> 2 beta + pi - theta works; the radial profile starts at 1 on the
    wall and dies smoothly before the outer wall.
    """
    r_in = domain.obstacle.radius
    cx, cy = domain.outer.center

    def fn(xs, ys, ths):
        r = np.hypot(xs - cx, ys - cy)
        beta = np.arctan2(ys - cy, xs - cx)
        s = np.clip((r - r_in) / width, 0.0, 1.0)
        w = 1.0 - (6 * s**5 - 15 * s**4 + 10 * s**3)
        rel = ths - beta
        return w * (np.sin(rel) + 0.4 * np.cos(2 * rel) + 0.2)

    return fn


# ---------------------------------------------------------------------------
# projection identity


def comm_proj_check(m: int, u: SMGridFunction) -> float:
    """Relative residual of the degree-m projection identity.

    The commutator of the geodesic derivative with the vertical Laplacian,
    projected to degree m, must equal (2m+1) times the projected geodesic
    derivative when the input has no degree m-1 content.
    """
    mass = fiber_mass(u)
    if m >= 1 and mass.sum() > 0 and mass[m - 1] > 1e-20 * mass.sum():
        raise ValueError(f"input carries degree {m - 1} mass; identity needs u_(m-1) = 0")
    Du = laplacian_vertical(u)
    XDu = apply_X(Du)
    DXu = laplacian_vertical(apply_X(u))
    comm = SMGridFunction(grid=u.grid, values=XDu.values - DXu.values)
    lhs = project_degree(comm, m).to_grid_function()
    rhs = project_degree(apply_X(u), m).to_grid_function()
    coeff = 2 * m + 1
    num = _l2(u.grid, lhs.values - coeff * rhs.values)
    den = max(_l2(u.grid, lhs.values), coeff * _l2(u.grid, rhs.values), 1e-300)
    return num / den


# ---------------------------------------------------------------------------
# constants


def constant_C(k: int, n: int) -> Fraction:
    """The degree-coupling constant 1 + 2/(2k+n-3)."""
    if 2 * k + n <= 3:
        raise DomainError(f"constant undefined at k={k}, n={n} (needs 2k+n > 3)")
    return 1 + Fraction(2, 2 * k + n - 3)


def constant_B(k: int, N: int, n: int) -> Fraction:
    """Product of C(k+2l, n) for l = 1..N; empty product is 1."""
    if 2 * k + n <= 3:
        raise DomainError(f"constant undefined at k={k}, n={n} (needs 2k+n > 3)")
    out = Fraction(1)
    for l in range(1, N + 1):
        out *= constant_C(k + 2 * l, n)
    return out


@dataclass
class ConstantsTable:
    k_range: tuple
    N_range: tuple
    n_range: tuple
    checked: bool = False
    worst_margin: float = field(default=np.inf)

    def C(self, k, n):
        return constant_C(k, n)

    def B(self, k, N, n):
        return constant_B(k, N, n)


def constants(k_range=(2, 200), N_range=(0, 200), n_range=(2, 10)) -> ConstantsTable:
    return ConstantsTable(k_range=tuple(k_range), N_range=tuple(N_range), n_range=tuple(n_range))


def _big_ratio(a: int, b: int) -> float:
    """a / b as float for arbitrarily large positive ints."""
    shift = max(a.bit_length(), b.bit_length()) - 53
    if shift > 0:
        a >>= shift
        b >>= shift
    return a / b


def prodest_check(table: ConstantsTable) -> bool:
    """Entrywise bound B(k,N,n)^2 <= 1 + 4N/(2k+n-3) in exact arithmetic.

    B is kept as an unreduced integer pair and the inequality cleared of
    denominators, so the whole sweep is integer arithmetic.
    """
    k_lo, k_hi = table.k_range
    N_lo, N_hi = table.N_range
    n_lo, n_hi = table.n_range
    worst = None
    for n in range(n_lo, n_hi + 1):
        for k in range(k_lo, k_hi + 1):
            d = 2 * k + n - 3
            if d <= 0:
                raise DomainError(f"range includes k={k}, n={n} with 2k+n <= 3")
            num = 1
            den = 1
            for N in range(N_lo, N_hi + 1):
                if N > 0:
                    # C(k+2N, n) = (d + 4N + 2) / (d + 4N)
                    num *= d + 4 * N + 2
                    den *= d + 4 * N
                # bound: (num/den)^2 <= (d + 4N)/d
                lhs = num * num * d
                rhs = den * den * (d + 4 * N)
                if lhs > rhs:
                    table.checked = True
                    table.worst_margin = -np.inf
                    return False
                if N > 0:  # the N = 0 case is an equality by construction
                    margin = 1.0 - _big_ratio(lhs, rhs)
                    if worst is None or margin < worst:
                        worst = margin
    table.checked = True
    table.worst_margin = worst if worst is not None else np.inf
    return True


# ---------------------------------------------------------------------------
# Beurling relations


@dataclass
class BeurlingReport:
    matches: dict      # k -> (norm2 X+ u_k, norm2 X- u_{k+2}, relative gap)
    bounds: dict       # k -> (norm2 X- u_k, C(k,2) * norm2 X+ u_k, ratio)
    mask_fraction: float


def beurling_experiment(
    f,
    grid: SMGrid,
    *,
    step: float = None,
    match_degrees=(1, 3),
    bound_degrees=(3, 5),
    shrink: float = 0.1,
) -> BeurlingReport:
    """Check the degree-raising norm relations for a field's ray integrals.

    Traces the integral function of ``f`` from every bundle node, projects
    it onto single fiber degrees, and compares the norms of the raising and
    lowering halves of the geodesic derivative on an interior-shrunk window.
    """
    from .transform import integral_function_u

    u = integral_function_u(grid.domain, grid.metric, f, grid, step=step)
    return beurling_report_from_u(
        u, match_degrees=match_degrees, bound_degrees=bound_degrees, shrink=shrink
    )


def beurling_report_from_u(
    u: SMGridFunction,
    match_degrees=(1, 3),
    bound_degrees=(3, 5),
    shrink: float = 0.1,
) -> BeurlingReport:
    """Same relations for an integral function that is already traced.

    The radial window drops a fraction of nodes at both radial ends where
    the finite differences see either the coordinate center or the wall
    kink.
    """
    g = u.grid
    n_r = g.shape[0]
    lo = int(np.ceil(shrink * n_r))
    hi = n_r - lo
    mask = np.zeros(g.shape)
    mask[lo:hi] = 1.0

    matches = {}
    for k in match_degrees:
        uk = project_degree(u, k).to_grid_function()
        uk2 = project_degree(u, k + 2).to_grid_function()
        a = norm2(xplus(uk, k, leak_tol=None), mask=mask)
        b = norm2(xminus(uk2, k + 2, leak_tol=None), mask=mask)
        gap = abs(a - b) / max(a, b, 1e-300)
        matches[k] = (a, b, gap)

    bounds = {}
    for k in bound_degrees:
        uk = project_degree(u, k).to_grid_function()
        lo_n = norm2(xminus(uk, k, leak_tol=None), mask=mask)
        hi_n = float(constant_C(k, 2)) * norm2(xplus(uk, k, leak_tol=None), mask=mask)
        ratio = lo_n / hi_n if hi_n > 0 else np.inf
        bounds[k] = (lo_n, hi_n, ratio)

    return BeurlingReport(matches=matches, bounds=bounds, mask_fraction=(hi - lo) / n_r)
