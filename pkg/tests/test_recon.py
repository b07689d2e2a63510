"""Tests for the sparse forward system, solver, and gauge comparison."""

import numpy as np
import pytest

from brokenray.geometry import Circle, Domain, Ellipse, domain_from_config, metric_from_config
from brokenray.raytracer import RayFan, sample_fan
from brokenray.recon import (
    FieldGrid,
    ReconConfig,
    ReconError,
    adjoint_apply,
    build_system,
    field_grid_from_tensor,
    forward_apply,
    gauge_compare,
    make_field_grid,
    reconstruct,
    sym_derivative_matrix,
    trace_fan_nodes,
)
from brokenray.tensorfields import (
    GaugeSpec,
    RankUnsupported,
    SymTensorField,
    make_admissible_potential,
    sym_cov_derivative,
)


def annulus():
    return domain_from_config(
        {"outer": {"circle": {"radius": 2.0}}, "obstacle": {"circle": {"radius": 1.0}}}
    )


def disk():
    return domain_from_config({"outer": {"circle": {"radius": 2.0}}})


def flat():
    return metric_from_config("zero")


def bumpy():
    return metric_from_config(
        {"gaussian_bump": {"amp": 0.25, "center": (0.4, -0.2), "width": 0.9}}
    )


@pytest.fixture(scope="module")
def annulus_system():
    """One traced 200-ray fan on the flat annulus, shared across tests."""
    dom = annulus()
    met = flat()
    fan = sample_fan(dom, {"boundary": {"n_pos": 40, "n_ang": 5}})
    traced = trace_fan_nodes(dom, met, fan, step=0.02)
    template = make_field_grid(dom, 0, 24, 24)
    system = build_system(dom, met, fan, template, traced=traced)
    return dom, met, fan, traced, system


# ---------------------------------------------------------------------------
# field grids


class TestFieldGrid:
    def test_shape_validation(self):
        rs = np.linspace(1.0, 2.0, 8)
        betas = np.linspace(0, 2 * np.pi, 12, endpoint=False)
        with pytest.raises(ReconError):
            FieldGrid(1, rs, betas, (0, 0), np.zeros((3, 8, 12)))

    def test_values_must_be_finite(self):
        rs = np.linspace(1.0, 2.0, 8)
        betas = np.linspace(0, 2 * np.pi, 12, endpoint=False)
        vals = np.zeros((1, 8, 12))
        vals[0, 3, 4] = np.nan
        with pytest.raises(ReconError):
            FieldGrid(0, rs, betas, (0, 0), vals)

    def test_interpolation_order_restricted(self):
        rs = np.linspace(1.0, 2.0, 8)
        betas = np.linspace(0, 2 * np.pi, 12, endpoint=False)
        with pytest.raises(ReconError):
            FieldGrid(0, rs, betas, (0, 0), np.zeros((1, 8, 12)), interp="cubic")

    def test_area_weights_sum_to_annulus_area(self):
        fg = make_field_grid(annulus(), 0, 24, 32)
        area = float(np.sum(fg.area_weights()))
        assert area == pytest.approx(np.pi * (4.0 - 1.0), rel=1e-12)

    def test_make_field_grid_spans_walls(self):
        fg = make_field_grid(annulus(), 2, 10, 12)
        assert fg.rs[0] == pytest.approx(1.0)
        assert fg.rs[-1] == pytest.approx(2.0)
        assert fg.values.shape == (3, 10, 12)
        fg_disk = make_field_grid(disk(), 1, 10, 12)
        assert fg_disk.rs[0] == pytest.approx(0.04)

    def test_non_circular_obstacle_rejected(self):
        dom = Domain(Circle((0, 0), 2.0), Ellipse((0, 0), 0.8, 0.5))
        with pytest.raises(ReconError):
            make_field_grid(dom, 0, 10, 12)

    def test_tensor_sampling_matches_components(self):
        f = SymTensorField(1, {(1,): "x + 2*y", (2,): "x*y"})
        rs = np.linspace(1.0, 2.0, 5)
        betas = np.linspace(0, 2 * np.pi, 8, endpoint=False)
        fg = field_grid_from_tensor(f, 1, rs, betas)
        x = rs[2] * np.cos(betas[3])
        y = rs[2] * np.sin(betas[3])
        assert fg.values[0, 2, 3] == pytest.approx(x + 2 * y, rel=1e-14)
        assert fg.values[1, 2, 3] == pytest.approx(x * y, rel=1e-14)


# ---------------------------------------------------------------------------
# tracing and assembly


class TestSystem:
    def test_simpson_weights_sum_to_ray_length(self, annulus_system):
        _, _, _, traced, _ = annulus_system
        assert np.all(traced.status == 0)
        for (xq, yq, thq, wq), tau in zip(traced.rows, traced.tau):
            assert wq.sum() == pytest.approx(tau, rel=1e-12)

    def test_constant_scalar_integrates_to_length(self, annulus_system):
        _, _, _, _, system = annulus_system
        ones = system.template.like(np.ones(system.template.ravel().size))
        data = forward_apply(ones, system)
        assert np.max(np.abs(data - system.tau)) < 1e-10

    def test_forward_is_linear(self, annulus_system):
        _, _, _, _, system = annulus_system
        rng = np.random.default_rng(0)
        a = system.template.like(rng.standard_normal(system.matrix.shape[1]))
        b = system.template.like(rng.standard_normal(system.matrix.shape[1]))
        combo = system.template.like(2.0 * a.ravel() - 3.0 * b.ravel())
        lhs = forward_apply(combo, system)
        rhs = 2.0 * forward_apply(a, system) - 3.0 * forward_apply(b, system)
        assert np.max(np.abs(lhs - rhs)) < 1e-10 * np.max(np.abs(rhs))

    def test_adjoint_identity(self, annulus_system):
        _, _, _, _, system = annulus_system
        rng = np.random.default_rng(1)
        f = system.template.like(rng.standard_normal(system.matrix.shape[1]))
        d = rng.standard_normal(system.n_rays)
        lhs = float(forward_apply(f, system) @ d)
        rhs = float(f.ravel() @ adjoint_apply(d, system).ravel())
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_adjoint_support_follows_the_ray(self, annulus_system):
        dom, met, _, _, _ = annulus_system
        fan = RayFan(x0=np.array([-2.0]), y0=np.array([0.0]), theta0=np.array([0.3]))
        traced = trace_fan_nodes(dom, met, fan, step=0.02)
        template = make_field_grid(dom, 0, 24, 24)
        system = build_system(dom, met, fan, template, traced=traced)
        bp = adjoint_apply(np.ones(1), system)
        xq, yq = traced.rows[0][0], traced.rows[0][1]
        xs, ys = template.node_xy()
        touched = np.abs(bp.values[0]) > 0
        hr = template.rs[1] - template.rs[0]
        hb = 2 * np.pi / template.betas.size
        reach = 1.5 * max(hr, 2.0 * hb)
        for xn, yn in zip(xs[touched], ys[touched]):
            assert np.min(np.hypot(xq - xn, yq - yn)) < reach
        assert 0 < touched.sum() < 0.5 * touched.size

    def test_template_mismatch_rejected(self, annulus_system):
        dom, _, _, _, system = annulus_system
        other = make_field_grid(dom, 1, 24, 24)
        with pytest.raises(ReconError):
            forward_apply(other, system)
        with pytest.raises(ReconError):
            adjoint_apply(np.zeros(3), system)

    def test_failed_rays_get_empty_rows(self):
        dom = annulus()
        met = flat()
        fan = sample_fan(dom, {"boundary": {"n_pos": 20, "n_ang": 5}})
        # the fan's most grazing apertures give chords just short of 1.3
        traced = trace_fan_nodes(dom, met, fan, step=0.02, l_max=1.3)
        assert np.any(traced.status != 0) and np.any(traced.status == 0)
        assert np.all(np.isnan(traced.tau[traced.status != 0]))
        template = make_field_grid(dom, 0, 16, 16)
        system = build_system(dom, met, fan, template, traced=traced)
        nnz = np.diff(system.matrix.indptr)
        assert np.all(nnz[traced.status != 0] == 0)
        assert np.all(nnz[traced.status == 0] > 0)
        assert np.array_equal(system.ok, traced.status == 0)

    def test_straight_ray_monomial_weights(self):
        # single diameter rays on the flat no-obstacle disk: constant
        # components integrate to chord * cos^a(t) sin^b(t) * multiplicity
        dom = disk()
        met = flat()
        c, s = np.cos(np.pi / 4), np.sin(np.pi / 4)
        fan = RayFan(
            x0=np.array([-2.0, 0.0, -2.0 * c]),
            y0=np.array([0.0, -2.0, -2.0 * s]),
            theta0=np.array([0.0, np.pi / 2, np.pi / 4]),
        )
        traced = trace_fan_nodes(dom, met, fan, step=0.01)
        assert np.allclose(traced.tau, 4.0, atol=1e-6)
        cases = {
            1: {0: [4.0, 0.0, 4 * c], 1: [0.0, 4.0, 4 * s]},
            2: {0: [4.0, 0.0, 4 * c * c], 1: [0.0, 0.0, 2 * 4 * c * s], 2: [0.0, 4.0, 4 * s * s]},
            3: {
                0: [4.0, 0.0, 4 * c**3],
                1: [0.0, 0.0, 3 * 4 * c * c * s],
                2: [0.0, 0.0, 3 * 4 * c * s * s],
                3: [0.0, 4.0, 4 * s**3],
            },
        }
        for rank, comp_expect in cases.items():
            template = make_field_grid(dom, rank, 20, 20)
            system = build_system(dom, met, fan, template, traced=traced)
            n_comp = template.values.shape[0]
            for comp, expect in comp_expect.items():
                vals = np.zeros_like(template.values)
                vals[comp] = 1.0
                data = forward_apply(template.like(vals.ravel()), system)
                assert np.allclose(data, expect, atol=1e-6), (rank, comp, data)

    def test_potential_field_data_is_small_and_shrinks(self, annulus_system):
        # exact transform of an admissible potential's derivative is zero;
        # through the bilinear matrix it is interpolation error, second order
        dom, met, fan, traced, _ = annulus_system
        seed = SymTensorField(0, {(): "0.5 + 0.2*x + 0.3*y*y"})
        h = make_admissible_potential(GaugeSpec(seed=seed, domain=dom, metric=met))
        f = sym_cov_derivative(h, met)
        gen = SymTensorField(1, {(1,): "0.4 + 0.3*x - 0.2*y", (2,): "0.1*x*y + 0.5"})
        levels = {}
        for n in (24, 48):
            template = make_field_grid(dom, 1, n, n)
            system = build_system(dom, met, fan, template, traced=traced)
            fg = field_grid_from_tensor(f, 1, template.rs, template.betas)
            levels[n] = np.max(np.abs(forward_apply(fg, system)))
            if n == 24:
                fg_gen = field_grid_from_tensor(gen, 1, template.rs, template.betas)
                generic = np.max(np.abs(forward_apply(fg_gen, system)))
        assert levels[24] < 0.05 * generic
        assert levels[48] < 0.4 * levels[24]


# ---------------------------------------------------------------------------
# solver


class TestReconstruct:
    def test_config_validation(self):
        with pytest.raises(ReconError):
            ReconConfig(lam=-1.0)
        with pytest.raises(ReconError):
            ReconConfig(max_iter=0)

    def test_zero_data_gives_zero_field(self, annulus_system):
        _, _, _, _, system = annulus_system
        out = reconstruct(np.zeros(system.n_rays), ReconConfig(), system)
        assert out.converged
        assert np.all(out.field.values == 0.0)

    def test_objective_monotone_and_data_fit(self, annulus_system):
        _, _, _, _, system = annulus_system
        fg = make_field_grid(system.domain, 0, 24, 24)
        xs, ys = fg.node_xy()
        fg = fg.like(np.exp(-((np.hypot(xs, ys) - 1.5) ** 2) / 0.1).ravel())
        data = forward_apply(fg, system)
        out = reconstruct(data, ReconConfig(lam=0.0, max_iter=400, tol=1e-12), system)
        objs = [row[3] for row in out.log]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(objs, objs[1:]))
        rel = out.log[-1][1]
        assert rel < 1e-6
        # the recovered field reproduces the data, not necessarily the field
        assert np.max(np.abs(forward_apply(out.field, system) - data)) < 1e-5

    def test_non_finite_data_rows_are_dropped(self, annulus_system):
        _, _, _, _, system = annulus_system
        data = system.tau.copy()
        data[3] = np.nan
        out = reconstruct(data, ReconConfig(max_iter=50), system)
        assert np.all(np.isfinite(out.field.values))
        assert out.iterations <= 50

    def test_regularization_default_from_ray_length(self, annulus_system):
        _, _, _, _, system = annulus_system
        out = reconstruct(np.zeros(system.n_rays), ReconConfig(max_iter=1), system)
        assert out.lam == pytest.approx(1e-6 * float(np.mean(system.tau)), rel=1e-12)


# ---------------------------------------------------------------------------
# discrete potentials and gauge comparison


class TestGauge:
    @pytest.mark.parametrize("metric_fn", [flat, bumpy])
    @pytest.mark.parametrize("rank_h", [1, 2])
    def test_derivative_matrix_converges_to_symbolic(self, metric_fn, rank_h):
        dom = annulus()
        met = metric_fn()
        if rank_h == 1:
            h = SymTensorField(1, {(1,): "sin(x) + 0.3*y", (2,): "0.2*x - cos(y)"})
        else:
            h = SymTensorField(
                2, {(1, 1): "sin(x)", (1, 2): "x*y/4", (2, 2): "cos(y)"}
            )
        errs = []
        for n in (24, 48):
            tmpl = make_field_grid(dom, rank_h, n, n)
            hg = field_grid_from_tensor(h, rank_h, tmpl.rs, tmpl.betas)
            got = (sym_derivative_matrix(tmpl, met) @ hg.ravel()).reshape(
                (rank_h + 2, n, n)
            )
            f = sym_cov_derivative(h, met)
            fg = field_grid_from_tensor(f, rank_h + 1, tmpl.rs, tmpl.betas)
            diff = np.abs(got - fg.values)[:, 1:-1, :]
            errs.append(float(diff.max() / np.abs(fg.values).max()))
        assert errs[0] / errs[1] > 3.0
        assert errs[1] < 0.06

    def test_derivative_matrix_rank_cap(self):
        tmpl = make_field_grid(annulus(), 3, 8, 8)
        with pytest.raises(RankUnsupported):
            sym_derivative_matrix(tmpl, flat())

    @pytest.mark.parametrize("metric_fn", [flat, bumpy])
    @pytest.mark.parametrize("rank", [1, 2])
    def test_potential_difference_explained(self, metric_fn, rank):
        dom = annulus()
        met = metric_fn()
        if rank == 1:
            seed = SymTensorField(0, {(): "0.5 + 0.2*x + 0.3*y*y"})
            idxs = [(1,), (2,)]
        else:
            seed = SymTensorField(1, {(1,): "0.4 + 0.3*x - 0.2*y", (2,): "0.1*x*y + 0.5"})
            idxs = [(1, 1), (1, 2), (2, 2)]
        h = make_admissible_potential(GaugeSpec(seed=seed, domain=dom, metric=met))
        dsh = sym_cov_derivative(h, met)
        tmpl = make_field_grid(dom, rank, 32, 32)
        base = SymTensorField(rank, {idx: "0.3 + 0.1*x" for idx in idxs})
        f_a = field_grid_from_tensor(base, rank, tmpl.rs, tmpl.betas)
        pert = field_grid_from_tensor(dsh, rank, tmpl.rs, tmpl.betas)
        f_b = f_a.like(f_a.ravel() + pert.ravel())
        rep = gauge_compare(f_a, f_b, met)
        assert rep.relative < 2e-2
        assert rep.potential.rank == rank - 1
        # a non-potential perturbation of the same size is not explained
        bad = field_grid_from_tensor(
            SymTensorField(rank, {idx: "sin(2*x)*cos(y)" for idx in idxs}),
            rank,
            tmpl.rs,
            tmpl.betas,
        )
        f_c = f_a.like(f_a.ravel() + bad.ravel() * (pert.norm() / bad.norm()))
        rep_bad = gauge_compare(f_a, f_c, met)
        assert rep_bad.relative > 0.3

    def test_identical_fields(self):
        tmpl = make_field_grid(annulus(), 1, 16, 16)
        f = SymTensorField(1, {(1,): "x", (2,): "y"})
        fg = field_grid_from_tensor(f, 1, tmpl.rs, tmpl.betas)
        rep = gauge_compare(fg, fg)
        assert rep.residual == 0.0
        assert rep.relative == 1.0

    def test_rank_bounds(self):
        rs = np.linspace(1.0, 2.0, 8)
        betas = np.linspace(0, 2 * np.pi, 8, endpoint=False)
        f0 = FieldGrid(0, rs, betas, (0, 0), np.zeros((1, 8, 8)))
        with pytest.raises(ReconError):
            gauge_compare(f0, f0)
        f4 = FieldGrid(4, rs, betas, (0, 0), np.zeros((5, 8, 8)))
        with pytest.raises(RankUnsupported):
            gauge_compare(f4, f4)
        f1 = FieldGrid(1, rs, betas, (0, 0), np.zeros((2, 8, 8)))
        with pytest.raises(ReconError):
            gauge_compare(f1, f0)
