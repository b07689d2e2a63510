"""Broken-ray tracing: geodesic integration, wall events, reflection.

Geodesics of the conformal metric are integrated in the angle chart
(x, y, theta) with classical RK4; in this chart the tangent vector is a unit
vector of the metric by construction, so unit speed is preserved exactly.
In the Euclidean case the stepper reproduces straight lines exactly.

Rays run until they exit through the outer boundary, reflecting specularly on
the obstacle wall. Wall crossings are detected by sign change of the boundary
defining function at half-step samples and located by bisection on the step.
Steps are shortened inside a collar around the walls so that a thin grazing
chord through the obstacle cannot be skipped.

All tracing is vectorized over a batch of rays; the quadrature of a field
along each ray is fused into the stepping loop (composite Simpson on step
pairs, fourth order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ConformalMetric, Domain, PhasePoint

STATUS_OK = 0
STATUS_BUDGET_EXCEEDED = 1
STATUS_SECOND_TANGENTIAL = 2
STATUS_STUCK = 3
STATUS_NAMES = {
    STATUS_OK: "ok",
    STATUS_BUDGET_EXCEEDED: "budget_exceeded",
    STATUS_SECOND_TANGENTIAL: "second_tangential_reflection",
    STATUS_STUCK: "stuck_at_boundary",
}

GRAZING_TOL = 1e-9       # |<v,nu>| below this: tangential pass-through
EVENT_F_TOL = 1e-12      # target |F| for the located crossing
ARM_TOL = 1e-11          # F must exceed this to register a crossing
BISECT_MAX_ITER = 60


class TracerError(Exception):
    pass


class BudgetExceeded(TracerError):
    """Ray did not exit within the time budget."""


class SecondTangentialReflection(TracerError):
    """More than one reflection below the transversality threshold."""


class StuckAtBoundary(TracerError):
    """Crossing location failed to converge."""


_STATUS_EXC = {
    STATUS_BUDGET_EXCEEDED: BudgetExceeded,
    STATUS_SECOND_TANGENTIAL: SecondTangentialReflection,
    STATUS_STUCK: StuckAtBoundary,
}


# ---------------------------------------------------------------------------
# stepping


def _derivs(metric: ConformalMetric, x, y, th):
    c, s = np.cos(th), np.sin(th)
    if metric.is_euclidean:
        return c, s, np.zeros_like(c)
    e = np.exp(-metric.phi.value(x, y))
    px, py = metric.phi.grad(x, y)
    return e * c, e * s, e * (py * c - px * s)


def rk4_step(metric: ConformalMetric, x, y, th, dt):
    """One classical RK4 step of the geodesic system; dt may be per-ray."""
    k1x, k1y, k1t = _derivs(metric, x, y, th)
    h2 = dt / 2.0
    k2x, k2y, k2t = _derivs(metric, x + h2 * k1x, y + h2 * k1y, th + h2 * k1t)
    k3x, k3y, k3t = _derivs(metric, x + h2 * k2x, y + h2 * k2y, th + h2 * k2t)
    k4x, k4y, k4t = _derivs(metric, x + dt * k3x, y + dt * k3y, th + dt * k3t)
    w = dt / 6.0
    return (
        x + w * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        y + w * (k1y + 2.0 * k2y + 2.0 * k3y + k4y),
        th + w * (k1t + 2.0 * k2t + 2.0 * k3t + k4t),
    )


def step_geodesic(metric: ConformalMetric, p: PhasePoint, dt: float) -> PhasePoint:
    """Advance a phase point by one RK4 step of size dt."""
    x, y, th = rk4_step(metric, np.float64(p.x[0]), np.float64(p.x[1]), np.float64(p.theta), np.float64(dt))
    return PhasePoint(x=np.array([float(x), float(y)]), theta=float(th))


# ---------------------------------------------------------------------------
# ray records


@dataclass
class GeodesicSegment:
    """Dense output between two wall events: quadrature nodes of the ray."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    start_event: str
    end_event: str


@dataclass
class Reflection:
    x: np.ndarray
    theta_in: float
    theta_out: float
    transversality: float     # |<v, nu>| at the reflection point
    grazing: bool = False


@dataclass
class BrokenRay:
    segments: list
    reflections: list
    tau: float
    start: PhasePoint
    exit: PhasePoint | None
    non_smooth: bool = False
    tangential_count: int = 0

    @property
    def n_reflections(self):
        return sum(0 if r.grazing else 1 for r in self.reflections)


@dataclass
class RayFan:
    x0: np.ndarray
    y0: np.ndarray
    theta0: np.ndarray
    spec: dict = field(default_factory=dict)

    def __len__(self):
        return self.x0.size


@dataclass
class FanResult:
    tau: np.ndarray
    integral: np.ndarray
    n_reflections: np.ndarray
    tangential_count: np.ndarray
    status: np.ndarray
    exit_x: np.ndarray
    exit_y: np.ndarray
    exit_theta: np.ndarray
    non_smooth: np.ndarray


# ---------------------------------------------------------------------------
# batch tracing


class _Recorder:
    """Collects dense output and events for single-ray traces."""

    def __init__(self):
        self.samples = [[]]
        self.reflections = []

    def sample(self, t, x, y, th):
        self.samples[-1].append((float(t), float(x), float(y), float(th)))

    def split(self):
        self.samples.append([])


def _curve_F(domain, which, x, y):
    """Defining function of the selected component (0 outer, 1 obstacle)."""
    fo = domain.F_outer(x, y)
    if domain.obstacle is None:
        return fo
    fb = domain.F_obstacle(x, y)
    return np.where(which == 0, fo, fb)


def _bisect(domain, metric, x0, y0, th0, delta, which):
    """Locate the wall crossing on a step from (x0,y0,th0) of width delta.

    The crossing is bracketed by alpha in (0, delta] with F < 0 at 0 and
    F >= 0 at delta. Returns (alpha, x, y, th, converged).
    """
    lo = np.zeros_like(delta)
    hi = delta.copy()
    x, y, th = x0.copy(), y0.copy(), th0.copy()
    fval = np.full_like(delta, np.inf)
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        x, y, th = rk4_step(metric, x0, y0, th0, mid)
        fval = _curve_F(domain, which, x, y)
        done = np.abs(fval) < EVENT_F_TOL
        if np.all(done):
            return mid, x, y, th, np.ones_like(done)
        pos = fval > 0
        hi = np.where(pos & ~done, mid, hi)
        lo = np.where(~pos & ~done, mid, lo)
        lo = np.where(done, mid, lo)
        hi = np.where(done, mid, hi)
    mid = 0.5 * (lo + hi)
    x, y, th = rk4_step(metric, x0, y0, th0, mid)
    fval = _curve_F(domain, which, x, y)
    return mid, x, y, th, np.abs(fval) < EVENT_F_TOL


def _boundary_normal(domain, which, x, y):
    """Outward Euclidean unit normal of the selected component."""
    gx_o, gy_o = domain.grad_F_outer(x, y)
    if domain.obstacle is not None:
        gx_b, gy_b = domain.grad_F_obstacle(x, y)
        gx = np.where(which == 0, gx_o, gx_b)
        gy = np.where(which == 0, gy_o, gy_b)
    else:
        gx, gy = gx_o, gy_o
    nrm = np.hypot(gx, gy)
    return gx / nrm, gy / nrm


def _wall_distance(domain, x, y):
    """Euclidean distance to the nearest wall (nonnegative inside)."""
    d = domain.outer.radius - np.hypot(x - domain.outer.center[0], y - domain.outer.center[1])
    if domain.obstacle is not None:
        d = np.minimum(d, domain.obstacle.signed_distance(x, y))
    return d


def trace_fan_arrays(
    domain: Domain,
    metric: ConformalMetric,
    x0,
    y0,
    theta0,
    *,
    l_max: float = 50.0,
    tangential_threshold: float = 0.05,
    step: float = None,
    field_eval=None,
    recorder: _Recorder = None,
) -> FanResult:
    """Trace a batch of broken rays, optionally integrating a field along them.

    ``field_eval(x, y, theta)`` must accept equally shaped arrays and return
    the integrand values; the fused quadrature is composite Simpson on step
    pairs. Per-ray faults are reported in ``status``, never raised.
    """
    if step is None:
        step = 1e-3 * domain.outer.radius
    x = np.array(x0, dtype=float).ravel().copy()
    y = np.array(y0, dtype=float).ravel().copy()
    th = np.array(theta0, dtype=float).ravel().copy()
    n = x.size
    if recorder is not None and n != 1:
        raise ValueError("recording is only supported for single-ray traces")

    t = np.zeros(n)
    tau = np.zeros(n)
    integral = np.zeros(n)
    n_refl = np.zeros(n, dtype=np.int32)
    tang_count = np.zeros(n, dtype=np.int32)
    status = np.full(n, STATUS_OK, dtype=np.int8)
    exit_x = np.full(n, np.nan)
    exit_y = np.full(n, np.nan)
    exit_th = np.full(n, np.nan)
    non_smooth = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)

    def feval(xs, ys, ths):
        if field_eval is None:
            return np.zeros_like(xs)
        return np.asarray(field_eval(xs, ys, ths), dtype=float)

    # immediate exit for rays launched on the outer wall without entering
    on_outer = np.abs(domain.F_outer(x, y)) <= 1e-10
    if np.any(on_outer):
        gx, gy = domain.grad_F_outer(x, y)
        nrm = np.hypot(gx, gy)
        inward = (np.cos(th) * gx + np.sin(th) * gy) / nrm
        trivial = on_outer & (inward >= -GRAZING_TOL)
        if np.any(trivial):
            active[trivial] = False
            exit_x[trivial] = x[trivial]
            exit_y[trivial] = y[trivial]
            exit_th[trivial] = th[trivial]
            if recorder is not None and trivial[0]:
                recorder.sample(0.0, x[0], y[0], th[0])

    # per-ray quadrature pair bookkeeping
    phase = np.zeros(n, dtype=np.int8)        # 0: at pair start, 1: at mid
    xa, ya, tha, ta = x.copy(), y.copy(), th.copy(), t.copy()
    fa = np.zeros(n)
    xm, ym, thm = x.copy(), y.copy(), th.copy()
    fm = np.zeros(n)
    dt_pair = np.full(n, step)
    f_cur = np.zeros(n)
    if field_eval is not None and np.any(active):
        f_cur[active] = feval(x[active], y[active], th[active])

    if recorder is not None and active[0]:
        recorder.sample(0.0, x[0], y[0], th[0])

    collar = 2.0 * step
    max_iter = int(np.ceil(l_max / step * 8.0)) + 10000

    def _partial_pair(w, xs, ys, ths, fs, fl):
        """Simpson over a partial interval from (xs..) to the located state."""
        xq, yq, thq = rk4_step(metric, xs, ys, ths, 0.5 * w)
        fq = feval(xq, yq, thq)
        return w / 6.0 * (fs + 4.0 * fq + fl)

    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        px, py, pth, pt = x[idx], y[idx], th[idx], t[idx]
        pphase = phase[idx]

        # pick the pair width at pair starts; shorten inside the wall collar
        starts = pphase == 0
        if np.any(starts):
            sx, sy = px[starts], py[starts]
            speed = metric.speed(sx, sy) if not metric.is_euclidean else 1.0
            near = _wall_distance(domain, sx, sy) < collar * speed
            new_dt = np.where(near, step / 4.0, step)
            dtp = dt_pair[idx]
            dtp[starts] = new_dt
            dt_pair[idx] = dtp
            # open the pair
            sub = idx[starts]
            xa[sub], ya[sub], tha[sub], ta[sub] = x[sub], y[sub], th[sub], t[sub]
            fa[sub] = f_cur[sub]

        delta = dt_pair[idx] / 2.0
        nx, ny, nth = rk4_step(metric, px, py, pth, delta)
        nt = pt + delta

        fo = domain.F_outer(nx, ny)
        cross_o = fo > ARM_TOL
        if domain.obstacle is not None:
            fb = domain.F_obstacle(nx, ny)
            cross_b = fb > ARM_TOL
        else:
            cross_b = np.zeros_like(cross_o, dtype=bool)
        crossed = cross_o | cross_b

        # --- no event: advance the quadrature pair -------------------------
        ok = ~crossed
        if np.any(ok):
            sub = idx[ok]
            x[sub], y[sub], th[sub], t[sub] = nx[ok], ny[ok], nth[ok], nt[ok]
            if field_eval is not None:
                f_cur[sub] = feval(nx[ok], ny[ok], nth[ok])
            was_mid = pphase[ok] == 1
            mids = sub[~was_mid]
            if mids.size:
                xm[mids], ym[mids], thm[mids] = x[mids], y[mids], th[mids]
                fm[mids] = f_cur[mids]
                phase[mids] = 1
            closes = sub[was_mid]
            if closes.size:
                if field_eval is not None:
                    integral[closes] += dt_pair[closes] / 6.0 * (
                        fa[closes] + 4.0 * fm[closes] + f_cur[closes]
                    )
                phase[closes] = 0
                if recorder is not None and closes[0] == 0:
                    half = dt_pair[0] / 2.0
                    recorder.sample(t[0] - half, xm[0], ym[0], thm[0])
                    recorder.sample(t[0], x[0], y[0], th[0])
            # time budget
            over = sub[t[sub] > l_max]
            if over.size:
                status[over] = STATUS_BUDGET_EXCEEDED
                tau[over] = t[over]
                active[over] = False

        # --- event: locate the crossing and resolve it ---------------------
        if np.any(crossed):
            esel = crossed
            sub = idx[esel]
            which = np.where(cross_o[esel], 0, 1)
            bx, by, bth, bt = px[esel], py[esel], pth[esel], pt[esel]
            dl = delta[esel]
            alpha, lx, ly, lth, conv = _bisect(domain, metric, bx, by, bth, dl, which)
            lt = bt + alpha

            stuck = sub[~conv]
            if stuck.size:
                status[stuck] = STATUS_STUCK
                tau[stuck] = t[stuck]
                active[stuck] = False

            good = conv
            gsub = sub[good]
            if gsub.size:
                gx_, gy_, gth, gt_ = lx[good], ly[good], lth[good], lt[good]
                galpha = alpha[good]
                gwhich = which[good]
                if field_eval is not None:
                    fl = feval(gx_, gy_, gth)
                    inc = _partial_pair(galpha, bx[good], by[good], bth[good], f_cur[gsub], fl)
                    was_mid = phase[gsub] == 1
                    if np.any(was_mid):
                        wsub = gsub[was_mid]
                        d1 = dt_pair[wsub] / 2.0
                        xq, yq, thq = rk4_step(metric, xa[wsub], ya[wsub], tha[wsub], 0.5 * d1)
                        fq = feval(xq, yq, thq)
                        integral[wsub] += d1 / 6.0 * (fa[wsub] + 4.0 * fq + fm[wsub])
                    integral[gsub] += inc
                if recorder is not None and gsub[0] == 0:
                    if phase[0] == 1:
                        d1 = dt_pair[0] / 2.0
                        xq, yq, thq = rk4_step(metric, np.float64(xa[0]), np.float64(ya[0]), np.float64(tha[0]), 0.5 * d1)
                        recorder.sample(ta[0] + 0.5 * d1, xq, yq, thq)
                        recorder.sample(ta[0] + d1, xm[0], ym[0], thm[0])
                    xq, yq, thq = rk4_step(
                        metric,
                        np.float64(bx[good][0]),
                        np.float64(by[good][0]),
                        np.float64(bth[good][0]),
                        0.5 * galpha[0],
                    )
                    recorder.sample(gt_[0] - 0.5 * galpha[0], xq, yq, thq)
                    recorder.sample(gt_[0], gx_[0], gy_[0], gth[0])

                # outer wall: exit
                is_exit = gwhich == 0
                xsub = gsub[is_exit]
                if xsub.size:
                    tau[xsub] = gt_[is_exit]
                    exit_x[xsub] = gx_[is_exit]
                    exit_y[xsub] = gy_[is_exit]
                    exit_th[xsub] = gth[is_exit]
                    active[xsub] = False

                # obstacle wall: reflect or graze
                is_refl = ~is_exit
                rsub = gsub[is_refl]
                if rsub.size:
                    rx, ry, rth, rt = gx_[is_refl], gy_[is_refl], gth[is_refl], gt_[is_refl]
                    nx_, ny_ = _boundary_normal(domain, np.ones_like(rx), rx, ry)
                    dxd, dyd = np.cos(rth), np.sin(rth)
                    dot = dxd * nx_ + dyd * ny_
                    trans = np.abs(dot)
                    grazing = trans < GRAZING_TOL
                    rdx = np.where(grazing, dxd, dxd - 2.0 * dot * nx_)
                    rdy = np.where(grazing, dyd, dyd - 2.0 * dot * ny_)
                    rth_out = np.arctan2(rdy, rdx)

                    tangential = trans < tangential_threshold
                    tang_count[rsub] += tangential.astype(np.int32)
                    n_refl[rsub] += (~grazing).astype(np.int32)
                    non_smooth[rsub] |= grazing

                    second = tang_count[rsub] >= 2
                    dead = rsub[second]
                    if dead.size:
                        status[dead] = STATUS_SECOND_TANGENTIAL
                        tau[dead] = rt[second]
                        active[dead] = False

                    live = rsub[~second]
                    if live.size:
                        keep = ~second
                        x[live], y[live], th[live], t[live] = (
                            rx[keep],
                            ry[keep],
                            rth_out[keep],
                            rt[keep],
                        )
                        phase[live] = 0
                        if field_eval is not None:
                            f_cur[live] = feval(x[live], y[live], th[live])
                        over = live[t[live] > l_max]
                        if over.size:
                            status[over] = STATUS_BUDGET_EXCEEDED
                            tau[over] = t[over]
                            active[over] = False
                    if recorder is not None and rsub.size and rsub[0] == 0:
                        recorder.reflections.append(
                            Reflection(
                                x=np.array([rx[0], ry[0]]),
                                theta_in=float(rth[0]),
                                theta_out=float(rth_out[0]),
                                transversality=float(trans[0]),
                                grazing=bool(grazing[0]),
                            )
                        )
                        if active[0]:
                            recorder.split()
                            recorder.sample(t[0], x[0], y[0], th[0])

    leftover = np.flatnonzero(active)
    if leftover.size:
        status[leftover] = STATUS_STUCK
        tau[leftover] = t[leftover]

    return FanResult(
        tau=tau,
        integral=integral,
        n_reflections=n_refl,
        tangential_count=tang_count,
        status=status,
        exit_x=exit_x,
        exit_y=exit_y,
        exit_theta=exit_th,
        non_smooth=non_smooth,
    )


# ---------------------------------------------------------------------------
# single rays


def trace_broken_ray(
    domain: Domain,
    metric: ConformalMetric,
    p0: PhasePoint,
    *,
    l_max: float = 50.0,
    tangential_threshold: float = 0.05,
    step: float = None,
) -> BrokenRay:
    """Trace one broken ray with dense output; raises typed tracer errors."""
    rec = _Recorder()
    res = trace_fan_arrays(
        domain,
        metric,
        np.array([p0.x[0]]),
        np.array([p0.x[1]]),
        np.array([p0.theta]),
        l_max=l_max,
        tangential_threshold=tangential_threshold,
        step=step,
        recorder=rec,
    )
    st = int(res.status[0])
    if st != STATUS_OK:
        raise _STATUS_EXC[st](f"ray failed: {STATUS_NAMES[st]}")

    segments = []
    n_seg = len(rec.samples)
    for i, block in enumerate(rec.samples):
        arr = np.asarray(block, dtype=float).reshape(-1, 4)
        segments.append(
            GeodesicSegment(
                t=arr[:, 0],
                x=arr[:, 1],
                y=arr[:, 2],
                theta=arr[:, 3],
                start_event="launch" if i == 0 else "reflection",
                end_event="reflection" if i < n_seg - 1 else "exit",
            )
        )
    exit_p = None
    if np.isfinite(res.exit_x[0]):
        exit_p = PhasePoint(
            x=np.array([res.exit_x[0], res.exit_y[0]]), theta=float(res.exit_theta[0])
        )
    return BrokenRay(
        segments=segments,
        reflections=rec.reflections,
        tau=float(res.tau[0]),
        start=p0,
        exit=exit_p,
        non_smooth=bool(res.non_smooth[0]),
        tangential_count=int(res.tangential_count[0]),
    )


# ---------------------------------------------------------------------------
# fan sampling


def sample_fan(domain: Domain, spec: dict, seed: int = 0) -> RayFan:
    """Deterministically sample a family of initial ray states.

    Specs: ``{"boundary": {"n_pos", "n_ang"}}`` launches inward states spread
    uniformly in arc length and aperture angle on the outer wall;
    ``{"interior_grid": {"n_r", "n_ang", "n_theta"}}`` fills a polar grid of
    base points with a full fiber of directions; ``{"random": {"n"}}`` draws
    seeded uniform interior states (rejecting points inside the obstacle).
    """
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ValueError(f"malformed fan spec: {spec!r}")
    kind, body = next(iter(spec.items()))
    R = domain.outer.radius
    cx, cy = domain.outer.center

    if kind == "boundary":
        extra = set(body) - {"n_pos", "n_ang"}
        if extra:
            raise ValueError(f"unknown keys in boundary fan: {sorted(extra)}")
        n_pos, n_ang = int(body["n_pos"]), int(body["n_ang"])
        ss = np.linspace(0.0, domain.outer.perimeter, n_pos, endpoint=False)
        pxs, pys = domain.outer.point_at(ss)
        gxs, gys = domain.grad_F_outer(pxs, pys)
        base = np.arctan2(-gys, -gxs)
        offs = (np.arange(n_ang) + 0.5) / n_ang * np.pi - np.pi / 2.0
        th = (base[:, None] + offs[None, :]).ravel()
        x0 = np.repeat(pxs, n_ang)
        y0 = np.repeat(pys, n_ang)
        return RayFan(x0=x0, y0=y0, theta0=th, spec=spec)

    if kind == "interior_grid":
        extra = set(body) - {"n_r", "n_ang", "n_theta"}
        if extra:
            raise ValueError(f"unknown keys in interior_grid fan: {sorted(extra)}")
        n_r, n_ang, n_th = int(body["n_r"]), int(body["n_ang"]), int(body["n_theta"])
        rs = np.linspace(0.05 * R, 0.95 * R, n_r)
        bs = np.linspace(0.0, 2.0 * np.pi, n_ang, endpoint=False)
        ts = np.linspace(0.0, 2.0 * np.pi, n_th, endpoint=False)
        rr, bb, tt = np.meshgrid(rs, bs, ts, indexing="ij")
        x0 = cx + rr.ravel() * np.cos(bb.ravel())
        y0 = cy + rr.ravel() * np.sin(bb.ravel())
        th = tt.ravel()
        keep = domain.contains(x0, y0)
        return RayFan(x0=x0[keep], y0=y0[keep], theta0=th[keep], spec=spec)

    if kind == "random":
        extra = set(body) - {"n"}
        if extra:
            raise ValueError(f"unknown keys in random fan: {sorted(extra)}")
        n = int(body["n"])
        rng = np.random.default_rng(seed)
        xs, ys = [], []
        while sum(len(a) for a in xs) < n:
            cand_x = rng.uniform(cx - R, cx + R, size=4 * n)
            cand_y = rng.uniform(cy - R, cy + R, size=4 * n)
            keep = domain.contains(cand_x, cand_y)
            xs.append(cand_x[keep])
            ys.append(cand_y[keep])
        x0 = np.concatenate(xs)[:n]
        y0 = np.concatenate(ys)[:n]
        th = rng.uniform(0.0, 2.0 * np.pi, size=n)
        return RayFan(x0=x0, y0=y0, theta0=th, spec=spec)

    raise ValueError(f"unknown fan kind: {kind!r}")
