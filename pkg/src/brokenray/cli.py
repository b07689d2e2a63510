"""Command-line front end running the experiments as subcommands.

Configs are JSON with block structure (geometry, metric, field, fan, trace,
verify, recon, gauge); unknown keys are rejected before any computation.
Outputs are CSV, JSON, and hand-rolled SVG files written atomically, each
embedding the sha256 of the effective config. Runs are byte-reproducible
for a fixed config and seed, independent of the worker count: parallelism
only splits ray fans into contiguous slices whose per-ray results are
assembled in fan order.

Exit codes: 0 success, 2 config or setup failure, 3 a verification run
finished but its residuals exceed the tolerance.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import sys
import tempfile

import numpy as np

from .geometry import (
    Domain,
    GeometryError,
    PhasePoint,
    check_admissibility,
    domain_from_config,
    metric_from_config,
)
from .raytracer import (
    RayFan,
    STATUS_OK,
    TracerError,
    sample_fan,
    trace_broken_ray,
    trace_fan_arrays,
)
from .tensorfields import (
    FieldError,
    RankUnsupported,
    GaugeSpec,
    SymTensorField,
    field_from_config,
    make_admissible_potential,
    sym_cov_derivative,
)
from .transform import TransformDataset, _field_callable, integral_function_u
from .smcalculus import (
    SMGrid,
    beurling_experiment,
    comm_proj_check,
    constants,
    fiber_mass,
    grid_function,
    make_interior_test_function,
    make_ring_symmetric_function,
    pestov_check,
    prodest_check,
    verify_structure,
)
from .recon import (
    ReconConfig,
    ReconError,
    TracedFan,
    build_system,
    field_grid_from_tensor,
    forward_apply,
    gauge_compare,
    make_field_grid,
    reconstruct,
    trace_fan_nodes,
)


class ConfigError(Exception):
    """Rejected config or setup; maps to exit code 2."""


class VerificationFailed(Exception):
    """A verify-style run completed with residuals above tolerance; exit 3."""


# ---------------------------------------------------------------------------
# diagnostics


_LOG_LEVELS = {"quiet": 0, "info": 1, "debug": 2}


def _log(level: str, event: str, **fields):
    threshold = _LOG_LEVELS.get(os.environ.get("BRT_LOG", "info"), 1)
    rank = {"error": 0, "info": 1, "debug": 2}[level]
    if rank > threshold:
        return
    record = {"level": level, "event": event}
    record.update(fields)
    sys.stderr.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")


def _jsonable(obj):
    """Plain-python view of nested results; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# output plumbing


def _atomic_write(path: str, data: bytes):
    folder = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _config_hash(effective: dict) -> str:
    blob = json.dumps(_jsonable(effective), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class Outputs:
    """Writes hash-stamped CSV/JSON/SVG files under one directory."""

    def __init__(self, out_dir: str, effective_config: dict):
        self.out_dir = out_dir
        self.hash = _config_hash(effective_config)
        self.config = effective_config
        self.written = []

    def _target(self, name):
        os.makedirs(self.out_dir, exist_ok=True)
        return os.path.join(self.out_dir, name)

    def write_json(self, name: str, payload: dict):
        doc = {"config_sha256": self.hash}
        doc.update(_jsonable(payload))
        doc["config"] = _jsonable(self.config)
        path = self._target(name)
        _atomic_write(path, (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode())
        self.written.append(path)
        return path

    def write_csv(self, name: str, header: str, rows):
        buf = io.StringIO()
        buf.write(f"# config_sha256={self.hash}\n")
        buf.write(header + "\n")
        for row in rows:
            buf.write(",".join(_csv_cell(v) for v in row) + "\n")
        path = self._target(name)
        _atomic_write(path, buf.getvalue().encode())
        self.written.append(path)
        return path

    def write_text(self, name: str, text: str):
        path = self._target(name)
        _atomic_write(path, text.encode())
        self.written.append(path)
        return path


def _csv_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


# ---------------------------------------------------------------------------
# deterministic SVG emission


def _fmt(v: float) -> str:
    out = f"{v:.3f}"
    return "0.000" if out == "-0.000" else out


def _diverging_color(v: float) -> str:
    """Blue-white-red map on [-1, 1], a pure function of the value."""
    v = min(1.0, max(-1.0, v))
    r = 255 - round(255 * max(-v, 0.0))
    g = 255 - round(255 * abs(v))
    b = 255 - round(255 * max(v, 0.0))
    return f"#{r:02x}{g:02x}{b:02x}"


class SvgCanvas:
    def __init__(self, width: int, height: int, config_hash: str):
        self.w = width
        self.h = height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f"<!-- config_sha256={config_hash} -->",
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        ]

    def circle(self, cx, cy, r, stroke="#000000", fill="none", width=1.5):
        self.parts.append(
            f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r)}" '
            f'stroke="{stroke}" fill="{fill}" stroke-width="{_fmt(width)}"/>'
        )

    def polyline(self, pts, stroke="#1f4f9f", width=1.0):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{stroke}" '
            f'stroke-width="{_fmt(width)}"/>'
        )

    def polygon(self, pts, fill):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
        self.parts.append(f'<polygon points="{coords}" fill="{fill}" stroke="none"/>')

    def dot(self, cx, cy, r=2.5, fill="#c02020"):
        self.parts.append(
            f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r)}" fill="{fill}"/>'
        )

    def text(self, x, y, s, size=11, anchor="start", fill="#000000"):
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
            f'font-family="monospace" text-anchor="{anchor}" fill="{fill}">{s}</text>'
        )

    def line(self, x1, y1, x2, y2, stroke="#888888", width=0.7):
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{stroke}" stroke-width="{_fmt(width)}"/>'
        )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


class _WorldMap:
    """Maps model coordinates into a square SVG viewport."""

    def __init__(self, radius, cx, cy, size=480, pad=20):
        self.scale = (size - 2 * pad) / (2 * radius)
        self.ox = size / 2 - cx * self.scale
        self.oy = size / 2 + cy * self.scale
        self.size = size

    def pt(self, x, y):
        return self.ox + x * self.scale, self.oy - y * self.scale


def _svg_domain(canvas: SvgCanvas, world: _WorldMap, domain: Domain):
    cx, cy = domain.outer.center
    px, py = world.pt(cx, cy)
    canvas.circle(px, py, domain.outer.radius * world.scale, stroke="#000000")
    if domain.obstacle is not None:
        # polygonal outline works for any convex obstacle shape
        ss = np.linspace(0.0, domain.obstacle.perimeter, 181)
        xs, ys = domain.obstacle.point_at(ss)
        canvas.polyline([world.pt(x, y) for x, y in zip(xs, ys)], stroke="#555555", width=1.2)


def _svg_polar_heatmap(rs, betas, vals, domain, config_hash, title):
    """Annular cell map of node values; cells are straight-edged quads."""
    canvas = SvgCanvas(480, 510, config_hash)
    world = _WorldMap(domain.outer.radius, *domain.outer.center)
    vmax = float(np.max(np.abs(vals))) or 1.0
    cx, cy = domain.outer.center
    n_r, n_b = vals.shape
    for i in range(n_r - 1):
        for j in range(n_b):
            j1 = (j + 1) % n_b
            corners = [
                (rs[i], betas[j]),
                (rs[i + 1], betas[j]),
                (rs[i + 1], betas[j1]),
                (rs[i], betas[j1]),
            ]
            pts = [world.pt(cx + r * np.cos(b), cy + r * np.sin(b)) for r, b in corners]
            cell = 0.25 * (vals[i, j] + vals[i + 1, j] + vals[i + 1, j1] + vals[i, j1])
            canvas.polygon(pts, _diverging_color(cell / vmax))
    _svg_domain(canvas, world, domain)
    canvas.text(12, 500, f"{title}  max|v|={vmax:.6g}", size=12)
    return canvas.render()


def _svg_loglog(series, config_hash, title, xlabel, ylabel):
    """Residual-versus-size curves on log-log axes.

    ``series`` maps a label to a list of (x, y) pairs with positive entries.
    """
    W, H, pad = 520, 400, 55
    canvas = SvgCanvas(W, H, config_hash)
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [max(y, 1e-300) for pts in series.values() for _, y in pts]
    lx0, lx1 = math.log10(min(xs)), math.log10(max(xs))
    ly0, ly1 = math.floor(math.log10(min(ys))), math.ceil(math.log10(max(ys)))
    if lx1 == lx0:
        lx1 = lx0 + 1
    if ly1 == ly0:
        ly1 = ly0 + 1

    def px(x):
        return pad + (math.log10(x) - lx0) / (lx1 - lx0) * (W - 2 * pad)

    def py(y):
        return H - pad - (math.log10(max(y, 1e-300)) - ly0) / (ly1 - ly0) * (H - 2 * pad)

    canvas.line(pad, H - pad, W - pad, H - pad, stroke="#000000", width=1.0)
    canvas.line(pad, pad, pad, H - pad, stroke="#000000", width=1.0)
    for d in range(int(ly0), int(ly1) + 1):
        canvas.line(pad, py(10.0**d), W - pad, py(10.0**d))
        canvas.text(pad - 6, py(10.0**d) + 4, f"1e{d}", size=9, anchor="end")
    for x in sorted(set(xs)):
        canvas.line(px(x), pad, px(x), H - pad)
        canvas.text(px(x), H - pad + 14, f"{x:g}", size=9, anchor="middle")
    palette = ["#1f4f9f", "#c02020", "#1f8f4f", "#8f1f9f", "#c07020"]
    for idx, (label, pts) in enumerate(sorted(series.items())):
        color = palette[idx % len(palette)]
        canvas.polyline([(px(x), py(y)) for x, y in pts], stroke=color, width=1.6)
        lx, ly = pts[-1]
        canvas.text(px(lx) - 4, py(ly) - 6, label, size=9, anchor="end", fill=color)
    canvas.text(W / 2, H - 10, xlabel, size=11, anchor="middle")
    canvas.text(12, 20, f"{title} ({ylabel})", size=12)
    return canvas.render()


# ---------------------------------------------------------------------------
# sliced parallelism over ray fans

_FORK_JOB = None


def _fork_slice(bounds):
    fn, args, arrays = _FORK_JOB
    a, b = bounds
    return fn(args, *(arr[a:b] for arr in arrays))


def _map_slices(fn, args, arrays, threads):
    """fn(args, *arrays) over contiguous slices, concatenated in order.

    Per-ray results do not depend on which slice a ray lands in, so the
    assembled output is identical to a single serial call for any worker
    count. Workers are forked; args travel by inheritance, not pickling.
    """
    n = int(np.asarray(arrays[0]).size)
    workers = max(1, min(threads, n))
    if workers == 1:
        return fn(args, *arrays)
    import multiprocessing as mp

    if "fork" not in mp.get_all_start_methods():
        _log("debug", "fork-unavailable-serial-fallback")
        return fn(args, *arrays)
    edges = np.linspace(0, n, workers + 1).astype(int)
    bounds = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    global _FORK_JOB
    _FORK_JOB = (fn, args, arrays)
    try:
        with mp.get_context("fork").Pool(len(bounds)) as pool:
            parts = pool.map(_fork_slice, bounds)
    finally:
        _FORK_JOB = None
    out = []
    for i in range(len(parts[0])):
        pieces = [p[i] for p in parts]
        if isinstance(pieces[0], list):
            out.append([item for piece in pieces for item in piece])
        else:
            out.append(np.concatenate(pieces))
    return tuple(out)


def _forward_slice(args, x0, y0, th0):
    domain, metric, field_eval, step, l_max = args
    res = trace_fan_arrays(
        domain, metric, x0, y0, th0, step=step, l_max=l_max, field_eval=field_eval
    )
    return res.tau, res.integral, res.n_reflections, res.status


def _trace_nodes_slice(args, x0, y0, th0):
    domain, metric, step, l_max = args
    traced = trace_fan_nodes(
        domain, metric, RayFan(x0=x0, y0=y0, theta0=th0), step=step, l_max=l_max
    )
    return traced.rows, traced.tau, traced.status


def _forward_fan(domain, metric, fan, f, step, threads, l_max=50.0) -> TransformDataset:
    fe = _field_callable(f)
    tau, integral, n_refl, status = _map_slices(
        _forward_slice,
        (domain, metric, fe, step, l_max),
        (np.asarray(fan.x0, float), np.asarray(fan.y0, float), np.asarray(fan.theta0, float)),
        threads,
    )
    status = np.asarray(status)
    return TransformDataset(
        ray_id=np.arange(status.size),
        x0=np.asarray(fan.x0, float),
        y0=np.asarray(fan.y0, float),
        theta0=np.asarray(fan.theta0, float),
        n_reflections=np.asarray(n_refl),
        tau=np.asarray(tau),
        value=np.where(status == STATUS_OK, np.asarray(integral), np.nan),
        status=status,
        provenance={"step": step, "threads_split_only": True},
    )


def _trace_nodes_fan(domain, metric, fan, step, threads, l_max=50.0) -> TracedFan:
    rows, tau, status = _map_slices(
        _trace_nodes_slice,
        (domain, metric, step, l_max),
        (np.asarray(fan.x0, float), np.asarray(fan.y0, float), np.asarray(fan.theta0, float)),
        threads,
    )
    return TracedFan(rows=list(rows), tau=np.asarray(tau), status=np.asarray(status, dtype=np.int8))


# ---------------------------------------------------------------------------
# config handling


_DEFAULT_GEOMETRY = {
    "outer": {"circle": {"radius": 2.0}},
    "obstacle": {"circle": {"radius": 1.0}},
}


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _check_keys(block: dict, allowed, where: str):
    extra = sorted(set(block) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys in {where}: {extra}")


_TOP_KEYS = {"geometry", "metric", "field", "fan", "trace", "verify", "recon", "gauge", "seed"}


def _build_setting(cfg: dict):
    domain = domain_from_config(cfg.get("geometry", _DEFAULT_GEOMETRY))
    metric = metric_from_config(cfg.get("metric", "zero"))
    return domain, metric


def _positive_float(block, key, default, where):
    v = block.get(key, default)
    if v is None:
        return None
    v = float(v)
    if not v > 0:
        raise ConfigError(f"{where}.{key} must be positive")
    return v


# ---------------------------------------------------------------------------
# subcommands


def _cmd_check_geometry(cfg, out: Outputs, seed, threads):
    domain, metric = _build_setting(cfg)
    report = check_admissibility(domain, metric, step=2e-3 * domain.outer.radius)
    payload = report.as_dict()
    out.write_json("check-geometry.json", payload)

    canvas = SvgCanvas(480, 510, out.hash)
    world = _WorldMap(domain.outer.radius, *domain.outer.center)
    _svg_domain(canvas, world, domain)
    verdict = "admissible" if report.admissible else "NOT admissible"
    canvas.text(12, 500, f"domain {verdict}, longest ray {report.l_estimate:.4g}", size=12)
    out.write_text("check-geometry.svg", canvas.render())
    print(
        f"check-geometry: {verdict}, l_estimate={report.l_estimate:.6g}, "
        f"max_tangential={report.tangential_count_max}"
    )
    if not report.admissible:
        raise VerificationFailed("geometry failed the admissibility checks")


def _cmd_trace(cfg, out: Outputs, seed, threads):
    domain, metric = _build_setting(cfg)
    block = cfg.get("trace", {})
    _check_keys(block, {"start", "theta", "step", "l_max"}, "trace")
    start = block.get("start", [-domain.outer.radius, 0.0])
    if not (isinstance(start, (list, tuple)) and len(start) == 2):
        raise ConfigError("trace.start must be [x, y]")
    theta = float(block.get("theta", 0.3))
    step = _positive_float(block, "step", 1e-3 * domain.outer.radius, "trace")
    l_max = _positive_float(block, "l_max", 50.0, "trace")
    try:
        ray = trace_broken_ray(
            domain, metric, PhasePoint((float(start[0]), float(start[1])), theta), step=step, l_max=l_max
        )
    except TracerError as err:
        raise ConfigError(f"ray cannot be traced: {err}") from err

    rows = []
    for si, seg in enumerate(ray.segments):
        stride = max(1, seg.t.size // 800)
        for k in range(0, seg.t.size, stride):
            rows.append((si, float(seg.t[k]), float(seg.x[k]), float(seg.y[k]), float(seg.theta[k])))
    out.write_csv("trace.csv", "segment,t,x,y,theta", rows)
    exit_info = None
    if ray.exit is not None:
        exit_info = {"x": ray.exit.x[0], "y": ray.exit.x[1], "theta": ray.exit.theta}
    out.write_json(
        "trace.json",
        {
            "tau": ray.tau,
            "reflections": len(ray.reflections),
            "tangential_count": ray.tangential_count,
            "non_smooth": bool(ray.non_smooth),
            "exit": exit_info,
        },
    )

    canvas = SvgCanvas(480, 510, out.hash)
    world = _WorldMap(domain.outer.radius, *domain.outer.center)
    _svg_domain(canvas, world, domain)
    for seg in ray.segments:
        stride = max(1, seg.t.size // 800)
        pts = [world.pt(x, y) for x, y in zip(seg.x[::stride], seg.y[::stride])]
        pts.append(world.pt(seg.x[-1], seg.y[-1]))
        canvas.polyline(pts, stroke="#1f4f9f", width=1.3)
    for refl in ray.reflections:
        canvas.dot(*world.pt(refl.x[0], refl.x[1]))
    canvas.text(12, 500, f"tau={ray.tau:.6f}, {len(ray.reflections)} reflections", size=12)
    out.write_text("trace.svg", canvas.render())
    print(f"trace: tau={ray.tau:.8f}, reflections={len(ray.reflections)}")


def _cmd_transform(cfg, out: Outputs, seed, threads):
    domain, metric = _build_setting(cfg)
    field = field_from_config(
        cfg.get("field", {"rank": 0, "components": {"": 1.0}}), metric=metric
    )
    fan_spec = cfg.get("fan", {"boundary": {"n_pos": 40, "n_ang": 5}})
    try:
        fan = sample_fan(domain, fan_spec, seed=seed)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    step = _positive_float(cfg.get("trace", {}), "step", 2e-3 * domain.outer.radius, "trace")
    ds = _forward_fan(domain, metric, fan, field, step, threads)

    buf = io.StringIO()
    buf.write(f"# config_sha256={out.hash}\n")
    ds.to_csv(buf)
    out.write_text("transform.csv", buf.getvalue())
    ok = ds.ok
    finite = ds.value[ok]
    out.write_json(
        "transform.json",
        {
            "n_rays": len(ds),
            "n_ok": int(ok.sum()),
            "max_abs_value": float(np.max(np.abs(finite))) if finite.size else None,
            "mean_value": float(np.mean(finite)) if finite.size else None,
            "max_tau": float(np.max(ds.tau[ok])) if ok.any() else None,
            "step": step,
        },
    )
    print(
        f"transform: {int(ok.sum())}/{len(ds)} rays ok, "
        f"max |I(f)| = {float(np.max(np.abs(finite))) if finite.size else float('nan'):.6g}"
    )


def _cmd_u_field(cfg, out: Outputs, seed, threads):
    domain, metric = _build_setting(cfg)
    field = field_from_config(
        cfg.get("field", {"rank": 0, "components": {"": 1.0}}), metric=metric
    )
    block = cfg.get("verify", {})
    _check_keys(block, {"n_r", "n_ang", "n_theta", "step"}, "verify")
    n_r = int(block.get("n_r", 32))
    n_ang = int(block.get("n_ang", 32))
    n_theta = int(block.get("n_theta", 32))
    step = _positive_float(block, "step", 2e-3 * domain.outer.radius, "verify")
    grid = SMGrid(domain, metric, n_r, n_ang, n_theta)
    u = integral_function_u(domain, metric, field, grid, step=step)
    # nodes whose ray failed carry NaN; zero them so the spectral masses
    # report the valid part instead of poisoning the whole sum
    from .smcalculus import SMGridFunction

    u_clean = SMGridFunction(grid=grid, values=np.where(u.valid, u.values, 0.0))
    mass = fiber_mass(u_clean)
    out.write_csv(
        "u-field.csv",
        "degree,fiber_mass",
        [(k, float(m)) for k, m in enumerate(mass)],
    )
    out.write_json(
        "u-field.json",
        {
            "grid": [n_r, n_ang, n_theta],
            "valid_fraction": float(np.mean(u.valid)),
            "max_abs": float(np.nanmax(np.abs(u.values))),
            "fiber_mass": [float(m) for m in np.asarray(mass)],
        },
    )
    slice0 = np.where(u.valid[:, :, 0], u.values[:, :, 0], 0.0)
    out.write_text(
        "u-field.svg",
        _svg_polar_heatmap(grid.rs, grid.betas, slice0, domain, out.hash, "u at theta=0"),
    )
    print(f"u-field: grid {n_r}x{n_ang}x{n_theta}, max |u| = {np.nanmax(np.abs(u.values)):.6g}")


def _verify_structure(cfg, out: Outputs, domain, metric, block):
    _check_keys(block, {"sizes", "n_theta", "min_order", "finest_tol"}, "verify")
    sizes = [int(s) for s in block.get("sizes", [32, 64, 128])]
    n_theta = int(block.get("n_theta", 64))
    min_order = float(block.get("min_order", 2.0))
    finest_tol = block.get("finest_tol")
    if finest_tol is None:
        finest_tol = 1e-6 if metric.is_euclidean else 1e-3
    finest_tol = float(finest_tol)
    rep = verify_structure(
        domain, metric, make_interior_test_function(domain), sizes=sizes, n_theta=n_theta
    )
    rows = []
    for name in rep.residuals:
        for i, n in enumerate(sizes):
            order = rep.orders[name][i - 1] if i > 0 else ""
            rows.append((name, n, rep.residuals[name][i], order))
    out.write_csv("verify-structure.csv", "identity,size,residual,order", rows)
    passed = rep.passes(min_order=min_order, finest_tol=finest_tol)
    out.write_json(
        "verify-structure.json",
        {
            "sizes": sizes,
            "n_theta": n_theta,
            "residuals": rep.residuals,
            "orders": rep.orders,
            "min_order": min_order,
            "finest_tol": finest_tol,
            "pass": passed,
        },
    )
    series = {name: list(zip(sizes, res)) for name, res in rep.residuals.items()}
    out.write_text(
        "verify-structure.svg",
        _svg_loglog(series, out.hash, "frame identity residuals", "base grid size", "relative residual"),
    )
    worst = max(res[-1] for res in rep.residuals.values())
    print(f"verify structure: finest residual {worst:.3e} (tol {finest_tol:g}), pass={passed}")
    if not passed:
        raise VerificationFailed("structure residuals above tolerance or below order")


def _verify_pestov(cfg, out: Outputs, domain, metric, block):
    _check_keys(block, {"n", "n_theta", "interior_tol", "boundary_tol"}, "verify")
    n = int(block.get("n", 64))
    n_theta = int(block.get("n_theta", 32))
    interior_tol = float(block.get("interior_tol", 1e-3))
    boundary_tol = float(block.get("boundary_tol", 1e-2))
    grid = SMGrid(domain, metric, n, n, n_theta)
    u_int = grid_function(grid, make_interior_test_function(domain))
    rep_int = pestov_check(u_int)
    interior_rel = rep_int.rel_defect

    payload = {
        "n": n,
        "n_theta": n_theta,
        "interior": {
            "terms": rep_int.terms,
            "defect": rep_int.defect,
            "relative_defect": interior_rel,
            "tolerance": interior_tol,
        },
    }
    boundary_ok = True
    if domain.obstacle is not None:
        u_ring = grid_function(grid, make_ring_symmetric_function(domain))
        rep_ring = pestov_check(u_ring)
        payload["boundary"] = {
            "P": rep_ring.P,
            "H": rep_ring.H,
            "cancellation": rep_ring.bdy_rel,
            "tolerance": boundary_tol,
        }
        boundary_ok = rep_ring.bdy_rel is not None and rep_ring.bdy_rel < boundary_tol
    passed = interior_rel < interior_tol and boundary_ok
    payload["pass"] = passed
    out.write_json("verify-pestov.json", payload)
    print(f"verify pestov: interior defect {interior_rel:.3e}, pass={passed}")
    if not passed:
        raise VerificationFailed("energy identity defect above tolerance")


def _verify_commproj(cfg, out: Outputs, domain, metric, block):
    _check_keys(block, {"n", "n_theta", "degrees", "tol"}, "verify")
    n = int(block.get("n", 32))
    n_theta = int(block.get("n_theta", 32))
    degrees = [int(m) for m in block.get("degrees", [0, 1, 2, 3])]
    tol = float(block.get("tol", 1e-6))
    grid = SMGrid(domain, metric, n, n, n_theta)
    R = domain.outer.radius
    r_in = domain.obstacle.radius if domain.obstacle is not None else 0.0
    rc, sig = 0.5 * (r_in + R), 0.18 * (R - r_in)
    rows = []
    worst = 0.0
    for m in degrees:
        def u_fn(x, y, th, m=m):
            r = np.hypot(x, y)
            env = np.exp(-(((r - rc) / sig) ** 2))
            return env * (np.cos((m + 1) * th) + 0.4 * np.sin((m + 1) * th) + 0.3 * np.cos((m + 3) * th))

        res = comm_proj_check(m, grid_function(grid, u_fn))
        rows.append((m, res))
        worst = max(worst, res)
    out.write_csv("verify-commproj.csv", "degree,relative_residual", rows)
    passed = worst < tol
    out.write_json(
        "verify-commproj.json",
        {"n": n, "n_theta": n_theta, "residuals": {str(m): r for m, r in rows}, "tol": tol, "pass": passed},
    )
    print(f"verify commproj: worst residual {worst:.3e} over degrees {degrees}, pass={passed}")
    if not passed:
        raise VerificationFailed("projection identity residual above tolerance")


def _verify_constants(cfg, out: Outputs, domain, metric, block):
    _check_keys(block, {"k_max", "N_max", "n_max"}, "verify")
    k_max = int(block.get("k_max", 200))
    N_max = int(block.get("N_max", 200))
    n_max = int(block.get("n_max", 10))
    table = constants(k_range=(2, k_max), N_range=(0, N_max), n_range=(2, n_max))
    passed = prodest_check(table)
    rows = []
    for n in range(2, min(n_max, 5) + 1):
        for k in range(2, min(k_max, 12) + 1):
            c = table.C(k, n)
            rows.append((k, n, f"{c.numerator}/{c.denominator}", float(c)))
    out.write_csv("verify-constants.csv", "k,n,C_exact,C_float", rows)
    out.write_json(
        "verify-constants.json",
        {
            "k_range": [2, k_max],
            "N_range": [0, N_max],
            "n_range": [2, n_max],
            "worst_margin": table.worst_margin,
            "pass": passed,
        },
    )
    print(f"verify constants: bound holds={passed}, worst margin {table.worst_margin:.3e}")
    if not passed:
        raise VerificationFailed("iterated constant bound violated")


def _verify_beurling(cfg, out: Outputs, domain, metric, block):
    _check_keys(block, {"n", "n_theta", "step", "shrink"}, "verify")
    if domain.obstacle is not None:
        raise ConfigError("the degree-raising experiment runs on the no-obstacle disk")
    n = int(block.get("n", 64))
    n_theta = int(block.get("n_theta", 64))
    step = _positive_float(block, "step", 0.01, "verify")
    shrink = float(block.get("shrink", 0.1))
    grid = SMGrid(domain, metric, n, n, n_theta)

    def field(x, y, th):
        r = np.hypot(x, y)
        w = np.exp(-(((r - 1.5) / 0.5) ** 2))
        z = (x + 1j * y) ** 6
        return w * (z.real * np.cos(th) + z.imag * np.sin(th))

    rep = beurling_experiment(field, grid, step=step, shrink=shrink)
    rows = [("match", k, a, b, gap) for k, (a, b, gap) in sorted(rep.matches.items())]
    rows += [("bound", k, lo, hi, ratio) for k, (lo, hi, ratio) in sorted(rep.bounds.items())]
    out.write_csv("verify-beurling.csv", "kind,degree,left,right,measure", rows)
    worst_gap = max(gap for _, _, gap in rep.matches.values())
    worst_ratio = max(ratio for _, _, ratio in rep.bounds.values())
    passed = worst_gap < 0.05 and worst_ratio <= 1.05
    out.write_json(
        "verify-beurling.json",
        {
            "grid": [n, n, n_theta],
            "step": step,
            "matches": {str(k): v for k, v in rep.matches.items()},
            "bounds": {str(k): v for k, v in rep.bounds.items()},
            "worst_gap": worst_gap,
            "worst_ratio": worst_ratio,
            "pass": passed,
        },
    )
    print(f"verify beurling: worst gap {worst_gap:.4f}, worst ratio {worst_ratio:.4f}, pass={passed}")
    if not passed:
        raise VerificationFailed("degree-raising norm relations failed")


_VERIFY_WHAT = {
    "structure": _verify_structure,
    "pestov": _verify_pestov,
    "commproj": _verify_commproj,
    "constants": _verify_constants,
    "beurling": _verify_beurling,
}


def _cmd_verify(cfg, out: Outputs, seed, threads, what):
    domain, metric = _build_setting(cfg)
    block = cfg.get("verify", {})
    _VERIFY_WHAT[what](cfg, out, domain, metric, block)


def _cmd_reconstruct(cfg, out: Outputs, seed, threads):
    domain, metric = _build_setting(cfg)
    block = cfg.get("recon", {})
    _check_keys(block, {"rank", "grid", "lam", "max_iter", "tol", "step"}, "recon")
    rank = int(block.get("rank", 0))
    grid_nn = block.get("grid", [24, 24])
    if not (isinstance(grid_nn, (list, tuple)) and len(grid_nn) == 2):
        raise ConfigError("recon.grid must be [n_r, n_ang]")
    n_r, n_ang = int(grid_nn[0]), int(grid_nn[1])
    step = _positive_float(block, "step", 0.02 * domain.outer.radius, "recon")

    default_field = {
        0: {
            "rank": 0,
            "components": {"": {"gaussian": {"amp": 1.0, "center": [0.0, 1.4], "width": 0.4}}},
        },
        1: {
            "rank": 1,
            "components": {
                "1": {"poly": [{"coef": 0.4}, {"coef": 0.3, "px": 1}]},
                "2": {"poly": [{"coef": 0.5}, {"coef": -0.2, "py": 1}]},
            },
        },
        2: {
            "rank": 2,
            "components": {
                "11": 0.6,
                "12": {"poly": [{"coef": 0.2, "px": 1}]},
                "22": {"poly": [{"coef": 0.4}, {"coef": 0.1, "py": 1}]},
            },
        },
    }.get(rank)
    if default_field is None:
        raise ConfigError("recon.rank must be 0, 1, or 2")
    f_true = field_from_config(cfg.get("field", default_field), metric=metric)
    if f_true.rank != rank:
        raise ConfigError(f"field rank {f_true.rank} does not match recon.rank {rank}")

    fan_spec = cfg.get("fan", {"boundary": {"n_pos": 60, "n_ang": 6}})
    try:
        fan = sample_fan(domain, fan_spec, seed=seed)
    except ValueError as err:
        raise ConfigError(str(err)) from err

    _log("info", "reconstruct-tracing", rays=len(fan))
    data_ds = _forward_fan(domain, metric, fan, f_true, step, threads)
    traced = _trace_nodes_fan(domain, metric, fan, step, threads)
    template = make_field_grid(domain, rank, n_r, n_ang)
    system = build_system(domain, metric, fan, template, traced=traced)

    rc = ReconConfig(
        lam=block.get("lam"),
        max_iter=int(block.get("max_iter", 500)),
        tol=float(block.get("tol", 1e-10)),
    )
    result = reconstruct(data_ds.value, rc, system)

    truth = field_grid_from_tensor(f_true, rank, template.rs, template.betas, template.center)
    ok = system.ok & np.isfinite(data_ds.value)
    pred = forward_apply(result.field, system)[ok]
    d_ok = data_ds.value[ok]
    rel_data = float(np.linalg.norm(pred - d_ok) / (np.linalg.norm(d_ok) or 1.0))
    err_field = truth.like(result.field.ravel() - truth.ravel())
    rel_field = err_field.norm(metric) / (truth.norm(metric) or 1.0)

    payload = {
        "rank": rank,
        "grid": [n_r, n_ang],
        "rays_ok": int(ok.sum()),
        "rays_total": len(fan),
        "iterations": result.iterations,
        "converged": result.converged,
        "lam": result.lam,
        "relative_data_residual": rel_data,
        "relative_field_error": rel_field,
    }
    if rank >= 1:
        gc = gauge_compare(result.field, truth, metric)
        payload["gauge_residual_over_truth"] = gc.residual / (truth.norm(metric) or 1.0)
        payload["gauge_relative"] = gc.relative
    out.write_json("reconstruct.json", payload)
    out.write_csv(
        "reconstruct-log.csv",
        "iteration,relative_data_residual,normal_residual,objective",
        [(it, rd, nr, obj) for it, rd, nr, obj in result.log],
    )
    out.write_text(
        "reconstruct.svg",
        _svg_polar_heatmap(
            template.rs,
            template.betas,
            result.field.values[0],
            domain,
            out.hash,
            f"reconstructed component 0 (rank {rank})",
        ),
    )
    print(
        f"reconstruct: rank {rank}, rel data residual {rel_data:.3e}, "
        f"rel field error {rel_field:.3e}, {result.iterations} iterations"
    )


def _cmd_gauge_test(cfg, out: Outputs, seed, threads, rank):
    domain, metric = _build_setting(cfg)
    block = cfg.get("gauge", {})
    _check_keys(block, {"n_rays", "step", "tolerance", "cutoff_width", "blend_width"}, "gauge")
    n_rays = int(block.get("n_rays", 500))
    step = _positive_float(block, "step", 1e-3, "gauge")
    tol = float(block.get("tolerance", 1e-6))
    widths = {}
    if "cutoff_width" in block:
        widths["cutoff_width"] = float(block["cutoff_width"])
    if "blend_width" in block:
        widths["blend_width"] = float(block["blend_width"])

    if rank not in (1, 2, 3):
        raise ConfigError("gauge-test rank must be 1, 2, or 3")
    rank_h = rank - 1
    idxs = {0: [()], 1: [(1,), (2,)], 2: [(1, 1), (1, 2), (2, 2)]}[rank_h]
    rng = np.random.default_rng(seed)
    comps = {}
    for idx in idxs:
        c = [float(v) for v in rng.uniform(-1.0, 1.0, size=6)]
        comps[idx] = (
            f"{c[0]!r} + {c[1]!r}*x + {c[2]!r}*y + {c[3]!r}*x*y + {c[4]!r}*x**2 + {c[5]!r}*y**2"
        )
    seed_field = SymTensorField(rank_h, comps)
    h = make_admissible_potential(GaugeSpec(seed=seed_field, domain=domain, metric=metric, **widths))
    f = sym_cov_derivative(h, metric)

    # random complete rays: launched inward from the outer wall so each one
    # runs wall to wall, which is what makes potential fields integrate to zero
    ss = rng.uniform(0.0, domain.outer.perimeter, size=n_rays)
    px, py = domain.outer.point_at(ss)
    gx, gy = domain.grad_F_outer(px, py)
    inward = np.arctan2(-gy, -gx)
    aperture = rng.uniform(-0.48 * np.pi, 0.48 * np.pi, size=n_rays)
    fan = RayFan(x0=px, y0=py, theta0=inward + aperture, spec={"random_boundary": {"n": n_rays}})
    values = {}
    for label, s in (("step", step), ("half_step", step / 2.0)):
        ds = _forward_fan(domain, metric, fan, f, s, threads)
        good = ds.value[ds.ok]
        if good.size == 0:
            raise ConfigError("no ray in the fan could be traced")
        values[label] = float(np.max(np.abs(good)))
    ratio = values["step"] / values["half_step"] if values["half_step"] > 0 else np.inf
    passed = values["step"] < tol
    out.write_json(
        "gauge-test.json",
        {
            "rank": rank,
            "n_rays": n_rays,
            "step": step,
            "max_abs_integral": values["step"],
            "max_abs_integral_half_step": values["half_step"],
            "halving_ratio": ratio,
            "tolerance": tol,
            "pass": passed,
        },
    )
    print(
        f"gauge-test: rank {rank}, max |I(d^s h)| = {values['step']:.3e} "
        f"over {n_rays} rays (halving ratio {ratio:.1f})"
    )
    if not passed:
        raise VerificationFailed("potential-field integrals above tolerance")


# ---------------------------------------------------------------------------
# entry point


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="brokenray",
        description="Broken-ray transform laboratory: tracing, transforms, operator checks, reconstruction.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="path to a JSON config")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=0, help="fan-slicing workers, 0 = auto")
    common.add_argument("--seed", type=int, default=0, help="seed for sampled fans and fields")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("check-geometry", parents=[common])
    sub.add_parser("trace", parents=[common])
    sub.add_parser("transform", parents=[common])
    sub.add_parser("u-field", parents=[common])
    p_verify = sub.add_parser("verify", parents=[common])
    p_verify.add_argument("what", choices=sorted(_VERIFY_WHAT))
    sub.add_parser("reconstruct", parents=[common])
    p_gauge = sub.add_parser("gauge-test", parents=[common])
    p_gauge.add_argument("--rank", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = args.threads if args.threads > 0 else (os.cpu_count() or 1)
    if args.seed < 0:
        _log("error", "config-invalid", message="seed must be nonnegative")
        return 2
    try:
        cfg = _load_config(args.config)
        _check_keys(cfg, _TOP_KEYS, "config")
        seed = int(cfg.get("seed", args.seed))
        effective = {"command": args.command, "seed": seed, "config": cfg}
        if args.command == "verify":
            effective["what"] = args.what
        if args.command == "gauge-test":
            effective["rank"] = args.rank
        out = Outputs(args.out, effective)
        _log("info", "run-start", command=args.command, config_sha256=out.hash, threads=threads)

        if args.command == "check-geometry":
            _cmd_check_geometry(cfg, out, seed, threads)
        elif args.command == "trace":
            _cmd_trace(cfg, out, seed, threads)
        elif args.command == "transform":
            _cmd_transform(cfg, out, seed, threads)
        elif args.command == "u-field":
            _cmd_u_field(cfg, out, seed, threads)
        elif args.command == "verify":
            _cmd_verify(cfg, out, seed, threads, args.what)
        elif args.command == "reconstruct":
            _cmd_reconstruct(cfg, out, seed, threads)
        elif args.command == "gauge-test":
            _cmd_gauge_test(cfg, out, seed, threads, args.rank)
        _log("info", "run-done", command=args.command, outputs=out.written)
        return 0
    except VerificationFailed as err:
        _log("error", "verification-failed", message=str(err))
        return 3
    except (
        ConfigError,
        GeometryError,
        FieldError,
        RankUnsupported,
        ReconError,
        TracerError,
        ValueError,
        KeyError,
        TypeError,
    ) as err:
        _log("error", "config-invalid", kind=type(err).__name__, message=str(err))
        return 2


if __name__ == "__main__":
    sys.exit(main())
