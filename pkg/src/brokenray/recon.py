"""Discrete forward operator and regularized least-squares reconstruction.

The unknown tensor field lives on a polar grid over the annulus, one layer
per independent component. Each traced ray contributes one data row whose
entries combine the quadrature weight of a sample, the bilinear interpolation
stencil at the sample's base point, and the direction monomial of the
component. The matrix is assembled once per fan and rank; forward and
adjoint applies are then plain sparse products, so the adjoint is the exact
transpose by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import lsqr

from .geometry import ConformalMetric, Domain, PhasePoint
from .raytracer import STATUS_OK, TracerError, trace_broken_ray
from .tensorfields import RankUnsupported, _canonical_indices


class ReconError(Exception):
    pass


def _monomial_powers(rank):
    """Per canonical component: (count of 1s, count of 2s, multiplicity)."""
    out = []
    for idx in _canonical_indices(rank):
        a = sum(1 for i in idx if i == 1)
        b = rank - a
        mult = _binom(rank, a)
        out.append((a, b, mult))
    return out


def _binom(n, k):
    from math import comb

    return comb(n, k)


@dataclass
class FieldGrid:
    """Tensor components sampled on a polar base grid over the annulus."""

    rank: int
    rs: np.ndarray
    betas: np.ndarray
    center: tuple
    values: np.ndarray  # (n_components, n_r, n_ang)
    interp: str = "bilinear"

    def __post_init__(self):
        self.rs = np.asarray(self.rs, dtype=float)
        self.betas = np.asarray(self.betas, dtype=float)
        n_comp = len(_canonical_indices(self.rank))
        expect = (n_comp, self.rs.size, self.betas.size)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != expect:
            raise ReconError(f"values shape {self.values.shape}, expected {expect}")
        if not np.all(np.isfinite(self.values)):
            raise ReconError("field values must be finite")
        if self.interp != "bilinear":
            raise ReconError(f"unsupported interpolation order: {self.interp}")

    @property
    def shape(self):
        return self.values.shape

    def ravel(self):
        return self.values.ravel()

    def like(self, flat):
        vals = np.asarray(flat, dtype=float).reshape(self.values.shape)
        return FieldGrid(self.rank, self.rs, self.betas, self.center, vals)

    def node_xy(self):
        cx, cy = self.center
        xs = cx + self.rs[:, None] * np.cos(self.betas)[None, :]
        ys = cy + self.rs[:, None] * np.sin(self.betas)[None, :]
        return xs, ys

    def area_weights(self, metric: ConformalMetric = None):
        """Cell measures for L2 norms; conformal factor included if given."""
        hr = self.rs[1] - self.rs[0]
        wr = np.full(self.rs.size, hr)
        wr[0] = wr[-1] = hr / 2.0
        w = wr[:, None] * self.rs[:, None] * (2 * np.pi / self.betas.size)
        if metric is not None and not metric.is_euclidean:
            xs, ys = self.node_xy()
            w = w * np.exp(2.0 * np.asarray(metric.phi.value(xs, ys), dtype=float))
        return np.broadcast_to(w, self.values.shape[1:])

    def norm(self, metric: ConformalMetric = None):
        w = self.area_weights(metric)
        return float(np.sqrt(np.sum(self.values**2 * w)))


def field_grid_from_tensor(f, rank, rs, betas, center=(0.0, 0.0)) -> FieldGrid:
    """Sample a symbolic tensor field's components onto the grid."""
    cx, cy = center
    xs = cx + rs[:, None] * np.cos(betas)[None, :]
    ys = cy + rs[:, None] * np.sin(betas)[None, :]
    comps = []
    for idx in _canonical_indices(rank):
        comps.append(np.asarray(f.component(idx).value(xs, ys), dtype=float) * np.ones(xs.shape))
    return FieldGrid(rank, rs, betas, center, np.stack(comps))


def make_field_grid(domain: Domain, rank: int, n_r: int, n_ang: int) -> FieldGrid:
    """Empty field grid spanning the annulus between the walls."""
    if domain.obstacle is None:
        r_in = 0.02 * domain.outer.radius
    else:
        from .geometry import Circle

        if not isinstance(domain.obstacle, Circle):
            raise ReconError("field grids need a circular obstacle or none")
        r_in = domain.obstacle.radius
    rs = np.linspace(r_in, domain.outer.radius, n_r)
    betas = np.linspace(0.0, 2 * np.pi, n_ang, endpoint=False)
    n_comp = len(_canonical_indices(rank))
    return FieldGrid(rank, rs, betas, domain.outer.center, np.zeros((n_comp, n_r, n_ang)))


# ---------------------------------------------------------------------------
# system assembly


@dataclass
class RaySystem:
    """Cached traced fan plus the sparse quadrature-interpolation matrix."""

    domain: Domain
    metric: ConformalMetric
    template: FieldGrid
    matrix: sparse.csr_matrix
    tau: np.ndarray
    status: np.ndarray
    x0: np.ndarray
    y0: np.ndarray
    theta0: np.ndarray

    @property
    def n_rays(self):
        return self.matrix.shape[0]

    @property
    def ok(self):
        return self.status == STATUS_OK


@dataclass
class TracedFan:
    """Quadrature nodes of a traced fan, reusable across tensor ranks."""

    rows: list          # per ray: (x, y, theta, weight) arrays
    tau: np.ndarray
    status: np.ndarray


def trace_fan_nodes(
    domain, metric, fan, *, step=None, l_max=50.0, tangential_threshold=0.05
) -> TracedFan:
    """Per-ray Simpson nodes and weights; failed rays get empty rows."""
    x0 = np.asarray(fan.x0, dtype=float)
    y0 = np.asarray(fan.y0, dtype=float)
    th0 = np.asarray(fan.theta0, dtype=float)
    rows = []
    taus = np.zeros(x0.size)
    status = np.zeros(x0.size, dtype=np.int8)
    for i in range(x0.size):
        try:
            ray = trace_broken_ray(
                domain,
                metric,
                PhasePoint((x0[i], y0[i]), th0[i]),
                step=step,
                l_max=l_max,
                tangential_threshold=tangential_threshold,
            )
        except TracerError as err:
            rows.append((np.empty(0), np.empty(0), np.empty(0), np.empty(0)))
            status[i] = getattr(err, "status", np.int8(1))
            taus[i] = np.nan
            continue
        xs, ys, ths, ws = [], [], [], []
        for seg in ray.segments:
            t = seg.t
            if t.size < 3:
                continue
            # composite Simpson over the recorded half-step nodes
            w = np.zeros(t.size)
            span = t[2::2] - t[:-2:2]
            w[:-2:2] += span / 6.0
            w[1::2] += 4.0 * span / 6.0
            w[2::2] += span / 6.0
            xs.append(seg.x)
            ys.append(seg.y)
            ths.append(seg.theta)
            ws.append(w)
        if xs:
            rows.append(
                (np.concatenate(xs), np.concatenate(ys), np.concatenate(ths), np.concatenate(ws))
            )
        else:
            rows.append((np.empty(0), np.empty(0), np.empty(0), np.empty(0)))
        taus[i] = ray.tau
    return TracedFan(rows=rows, tau=taus, status=status)


def build_system(
    domain: Domain,
    metric: ConformalMetric,
    fan,
    template: FieldGrid,
    *,
    step: float = None,
    l_max: float = 50.0,
    tangential_threshold: float = 0.05,
    traced: TracedFan = None,
) -> RaySystem:
    """Assemble the sparse forward matrix, tracing the fan unless cached."""
    rank = template.rank
    rs = template.rs
    betas = template.betas
    n_r = rs.size
    n_b = betas.size
    hr = rs[1] - rs[0]
    hb = 2 * np.pi / n_b
    cx, cy = template.center
    powers = _monomial_powers(rank)
    n_comp = len(powers)
    layer = n_r * n_b

    if traced is None:
        traced = trace_fan_nodes(
            domain,
            metric,
            fan,
            step=step,
            l_max=l_max,
            tangential_threshold=tangential_threshold,
        )
    rows_data, taus, status = traced.rows, traced.tau, traced.status

    data_parts, row_parts, col_parts = [], [], []
    for i, (xq, yq, thq, wq) in enumerate(rows_data):
        if xq.size == 0:
            continue
        rq = np.hypot(xq - cx, yq - cy)
        bq = np.mod(np.arctan2(yq - cy, xq - cx), 2 * np.pi)
        ir = np.clip(((rq - rs[0]) / hr).astype(int), 0, n_r - 2)
        fr = (rq - rs[0]) / hr - ir
        ib = (bq / hb).astype(int) % n_b
        fb = bq / hb - (bq / hb).astype(int)
        # bilinear stencil, radial clamped, angular periodic
        corner_cols = [
            ir * n_b + ib,
            ir * n_b + (ib + 1) % n_b,
            (ir + 1) * n_b + ib,
            (ir + 1) * n_b + (ib + 1) % n_b,
        ]
        corner_wts = [
            (1 - fr) * (1 - fb),
            (1 - fr) * fb,
            fr * (1 - fb),
            fr * fb,
        ]
        if metric.is_euclidean:
            conf = 1.0
        else:
            conf = np.exp(-rank * np.asarray(metric.phi.value(xq, yq), dtype=float))
        ct = np.cos(thq)
        st = np.sin(thq)
        for c, (a, b, mult) in enumerate(powers):
            base = wq * mult * ct**a * st**b * conf
            for cols, wts in zip(corner_cols, corner_wts):
                data_parts.append(base * wts)
                row_parts.append(np.full(cols.size, i, dtype=np.int64))
                col_parts.append(c * layer + cols)

    n_dof = n_comp * layer
    if data_parts:
        A = sparse.coo_matrix(
            (
                np.concatenate(data_parts),
                (np.concatenate(row_parts), np.concatenate(col_parts)),
            ),
            shape=(len(rows_data), n_dof),
        ).tocsr()
    else:
        A = sparse.csr_matrix((len(rows_data), n_dof))
    x0 = np.asarray(fan.x0, dtype=float)
    y0 = np.asarray(fan.y0, dtype=float)
    th0 = np.asarray(fan.theta0, dtype=float)
    return RaySystem(
        domain=domain,
        metric=metric,
        template=template,
        matrix=A,
        tau=taus,
        status=status,
        x0=x0,
        y0=y0,
        theta0=th0,
    )


def forward_apply(fg: FieldGrid, system: RaySystem) -> np.ndarray:
    if fg.values.shape != system.template.values.shape:
        raise ReconError("field grid does not match the system template")
    return system.matrix @ fg.ravel()


def adjoint_apply(data: np.ndarray, system: RaySystem) -> FieldGrid:
    data = np.asarray(data, dtype=float)
    if data.shape != (system.n_rays,):
        raise ReconError(f"data length {data.shape} does not match {system.n_rays} rays")
    return system.template.like(system.matrix.T @ data)


# ---------------------------------------------------------------------------
# reconstruction


@dataclass
class ReconConfig:
    fan: dict = None           # fan spec, carried for provenance by the CLI
    lam: float = None          # default: 1e-6 * mean ray length
    max_iter: int = 500
    tol: float = 1e-10         # relative tolerance on the normal-equations residual

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ReconError("regularization weight must be nonnegative")
        if self.max_iter < 1:
            raise ReconError("iteration cap must be at least 1")


@dataclass
class ReconResult:
    field: FieldGrid
    converged: bool
    iterations: int
    # (iter, relative data residual, normal-equations residual, objective)
    log: list = field(default_factory=list)
    lam: float = 0.0


def reconstruct(data: np.ndarray, cfg: ReconConfig, system: RaySystem) -> ReconResult:
    """Conjugate gradients on the Tikhonov-regularized normal equations.

    Rows of failed rays and non-finite data entries are dropped before the
    solve. The objective 0.5 * (|Ax - d|^2 + lam |x|^2) decreases at every
    step; the stopping test is on |A^T r - lam x| relative to its start.
    """
    cfg = cfg or ReconConfig()
    data = np.asarray(data, dtype=float)
    keep = system.ok & np.isfinite(data)
    A = system.matrix[keep]
    d = data[keep]
    lam = cfg.lam
    if lam is None:
        mean_len = float(np.mean(system.tau[keep])) if keep.any() else 1.0
        lam = 1e-6 * mean_len

    x = np.zeros(A.shape[1])
    r = d.copy()
    s = A.T @ r - lam * x
    p = s.copy()
    gamma = float(s @ s)
    d_norm = float(np.linalg.norm(d)) or 1.0
    s0 = np.sqrt(gamma) or 1.0
    log = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        q = A @ p
        denom = float(q @ q) + lam * float(p @ p)
        if denom == 0.0:
            converged = True
            break
        alpha = gamma / denom
        x += alpha * p
        r -= alpha * q
        s = A.T @ r - lam * x
        gamma_new = float(s @ s)
        obj = 0.5 * (float(r @ r) + lam * float(x @ x))
        log.append((it, float(np.linalg.norm(r)) / d_norm, np.sqrt(gamma_new), obj))
        if np.sqrt(gamma_new) <= cfg.tol * s0:
            converged = True
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return ReconResult(
        field=system.template.like(x),
        converged=converged,
        iterations=it,
        log=log,
        lam=lam,
    )


# ---------------------------------------------------------------------------
# gauge comparison


def _polar_gradient_ops(rs, betas):
    """Sparse d/dr and d/dbeta on the node grid, 2nd order, periodic beta."""
    n_r = rs.size
    n_b = betas.size
    hr = rs[1] - rs[0]
    hb = 2 * np.pi / n_b
    Dr = sparse.lil_matrix((n_r, n_r))
    for i in range(1, n_r - 1):
        Dr[i, i - 1] = -0.5 / hr
        Dr[i, i + 1] = 0.5 / hr
    Dr[0, 0], Dr[0, 1], Dr[0, 2] = -1.5 / hr, 2.0 / hr, -0.5 / hr
    Dr[n_r - 1, n_r - 3], Dr[n_r - 1, n_r - 2], Dr[n_r - 1, n_r - 1] = (
        0.5 / hr,
        -2.0 / hr,
        1.5 / hr,
    )
    Db = sparse.lil_matrix((n_b, n_b))
    for j in range(n_b):
        Db[j, (j - 1) % n_b] = -0.5 / hb
        Db[j, (j + 1) % n_b] = 0.5 / hb
    Ir = sparse.identity(n_r)
    Ib = sparse.identity(n_b)
    Dr_full = sparse.kron(Dr.tocsr(), Ib).tocsr()
    Db_full = sparse.kron(Ir, Db.tocsr()).tocsr()
    cosb = np.cos(betas)
    sinb = np.sin(betas)
    cb = np.tile(cosb, n_r)
    sb = np.tile(sinb, n_r)
    rinv = np.repeat(1.0 / rs, n_b)
    Dx = sparse.diags(cb) @ Dr_full - sparse.diags(sb * rinv) @ Db_full
    Dy = sparse.diags(sb) @ Dr_full + sparse.diags(cb * rinv) @ Db_full
    return Dx.tocsr(), Dy.tocsr()


def _christoffel_grids(metric, xs, ys):
    """Christoffel symbols of the conformal metric at the nodes, flattened."""
    px, py = metric.phi.grad(xs, ys)
    px = (np.asarray(px, dtype=float) * np.ones(xs.shape)).ravel()
    py = (np.asarray(py, dtype=float) * np.ones(xs.shape)).ravel()
    zero = np.zeros_like(px)
    # gamma[(k, i, j)] with k the upper index, all in {1, 2}
    return {
        (1, 1, 1): px,
        (1, 1, 2): py,
        (1, 2, 2): -px,
        (2, 1, 1): -py,
        (2, 1, 2): px,
        (2, 2, 2): py,
        (1, 2, 1): py,
        (2, 2, 1): px,
    }, zero


def sym_derivative_matrix(template_h: FieldGrid, metric: ConformalMetric):
    """Sparse symmetrized covariant derivative from rank r to rank r+1 grids."""
    rank_h = template_h.rank
    if rank_h > 2:
        raise RankUnsupported(f"potential rank {rank_h} not supported (max 2)")
    rs, betas = template_h.rs, template_h.betas
    n_r, n_b = rs.size, betas.size
    layer = n_r * n_b
    Dx, Dy = _polar_gradient_ops(rs, betas)
    D = {1: Dx, 2: Dy}
    xs, ys = template_h.node_xy()
    gamma, zero = _christoffel_grids(metric, xs, ys)
    h_idx = _canonical_indices(rank_h)
    out_idx = _canonical_indices(rank_h + 1)
    h_pos = {idx: c for c, idx in enumerate(h_idx)}

    blocks = []
    for alpha in out_idx:
        row = [sparse.csr_matrix((layer, layer)) for _ in h_idx]
        m1 = rank_h + 1
        for p in range(m1):
            d_i = alpha[p]
            rest = tuple(sorted(alpha[:p] + alpha[p + 1 :]))
            # derivative part of nabla_{d_i} h_rest
            row[h_pos[rest]] = row[h_pos[rest]] + D[d_i] * (1.0 / m1)
            # connection part: -sum over slots of h, -Gamma^k_{d_i, rest_q} h_{rest with q -> k}
            if not metric.is_euclidean:
                for q in range(rank_h):
                    for k in (1, 2):
                        g = gamma.get((k, d_i, rest[q]))
                        if g is None:
                            g = gamma.get((k, rest[q], d_i), zero)
                        swapped = tuple(sorted(rest[:q] + (k,) + rest[q + 1 :]))
                        row[h_pos[swapped]] = row[h_pos[swapped]] - sparse.diags(g) * (
                            1.0 / m1
                        )
        blocks.append(row)
    return sparse.bmat(blocks, format="csr")


@dataclass
class GaugeCompareReport:
    residual: float       # norm of (f_a - f_b) - d^s h at the optimum
    diff_norm: float      # norm of f_a - f_b
    relative: float       # residual / diff_norm (1.0 when diff is zero-ish)
    potential: FieldGrid


def gauge_compare(f_a: FieldGrid, f_b: FieldGrid, metric: ConformalMetric = None) -> GaugeCompareReport:
    """Explain the difference of two fields as an admissible potential.

    Solves min_h || (f_a - f_b) - d^s h || over potentials one rank down,
    with h forced to zero near the outer wall row and the normal-odd parts
    suppressed on the obstacle row, via strong penalty rows.
    """
    if f_a.rank != f_b.rank:
        raise ReconError("field ranks differ")
    if f_a.rank < 1:
        raise ReconError("gauge comparison needs rank at least 1")
    if f_a.rank - 1 > 2:
        raise RankUnsupported(f"potential rank {f_a.rank - 1} not supported (max 2)")
    metric = metric or ConformalMetric()
    rs, betas = f_a.rs, f_a.betas
    n_r, n_b = rs.size, betas.size
    layer = n_r * n_b
    rank_h = f_a.rank - 1
    n_comp_h = len(_canonical_indices(rank_h))
    template_h = FieldGrid(rank_h, rs, betas, f_a.center, np.zeros((n_comp_h, n_r, n_b)))

    D = sym_derivative_matrix(template_h, metric)
    diff = (f_a.values - f_b.values).ravel()
    w = np.sqrt(f_a.area_weights(metric)).ravel()
    w_full = np.tile(w, f_a.values.shape[0])
    Dw = sparse.diags(w_full) @ D
    rhs = diff * w_full

    # boundary conditions as penalty rows
    scale = max(abs(Dw).max(), 1.0)
    pen = 1e4 * scale
    bc_rows = []
    outer_nodes = np.arange((n_r - 1) * n_b, n_r * n_b)
    for c in range(n_comp_h):
        sel = sparse.coo_matrix(
            (np.full(outer_nodes.size, pen), (np.arange(outer_nodes.size), c * layer + outer_nodes)),
            shape=(outer_nodes.size, n_comp_h * layer),
        )
        bc_rows.append(sel)
    inner_nodes = np.arange(0, n_b)
    cosb, sinb = np.cos(betas), np.sin(betas)
    if rank_h == 1:
        # normal component of h vanishes on the obstacle row
        rows = np.concatenate([np.arange(n_b), np.arange(n_b)])
        cols = np.concatenate([0 * layer + inner_nodes, 1 * layer + inner_nodes])
        vals = np.concatenate([pen * cosb, pen * sinb])
        bc_rows.append(sparse.coo_matrix((vals, (rows, cols)), shape=(n_b, n_comp_h * layer)))
    elif rank_h == 2:
        # mixed normal-tangential part h(n, t) vanishes on the obstacle row
        # h(n,t) = (h22 - h11) cos sin + h12 (cos^2 - sin^2)
        rows = np.concatenate([np.arange(n_b)] * 3)
        cols = np.concatenate([c * layer + inner_nodes for c in range(3)])
        vals = np.concatenate(
            [-pen * cosb * sinb, pen * (cosb**2 - sinb**2), pen * cosb * sinb]
        )
        bc_rows.append(sparse.coo_matrix((vals, (rows, cols)), shape=(n_b, n_comp_h * layer)))

    system = sparse.vstack([Dw] + bc_rows, format="csr")
    rhs_full = np.concatenate([rhs, np.zeros(system.shape[0] - rhs.size)])
    sol = lsqr(system, rhs_full, atol=1e-12, btol=1e-12, iter_lim=4000)[0]

    resid_vec = rhs - Dw @ sol
    residual = float(np.linalg.norm(resid_vec))
    diff_norm = float(np.linalg.norm(rhs))
    return GaugeCompareReport(
        residual=residual,
        diff_norm=diff_norm,
        relative=residual / diff_norm if diff_norm > 0 else 1.0,
        potential=template_h.like(sol),
    )
