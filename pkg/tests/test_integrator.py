import io
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from levyhjb.integrator import (
    ControlSignal,
    IntegrationError,
    IntegratorConfig,
    PathBudgetError,
    build_model,
    clip_to_ball,
    dump_path_csv,
    run_paths,
    simulate,
    simulate_ou,
    step_second_tangent,
    step_state,
    step_tangent,
)
from levyhjb.noise import JumpModel, MarkDistribution
from levyhjb.spectral import nonlinear_term

SHORT = IntegratorConfig(1e-3, 0.2)


@pytest.fixture(scope="module")
def noisy8(cfg):
    return replace(cfg, m=8).model()


def reference(model, x, T):
    lam = model.basis.eigenvalues

    def rhs(_, y):
        return -lam * y - nonlinear_term(y, model.tensor)

    sol = solve_ivp(rhs, (0, T), x, method="DOP853", rtol=1e-12, atol=1e-14)
    return sol.y[:, -1]


class TestConfig:
    def test_grid(self):
        c = IntegratorConfig(0.01, 0.5)
        assert c.n_steps == 50 and c.times[-1] == pytest.approx(0.5)

    @pytest.mark.parametrize("kw", [dict(dt=0), dict(T=-1), dict(dt=0.3, T=1.0), dict(scheme="rk4")])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            IntegratorConfig(**{"dt": 0.01, "T": 0.5, **kw})


class TestStep:
    def test_eigenmode_single_step_vs_reference(self):
        model = build_model(8, None)
        x = np.zeros(8)
        x[0] = 1.0
        y = step_state(x, None, model, 1e-3)
        assert np.allclose(y, reference(model, x, 1e-3), atol=1e-9)

    def test_non_finite_raises(self):
        model = build_model(4, None)
        with pytest.raises(IntegrationError):
            step_state(np.array([np.inf, 0, 0, 0]), None, model, 1e-3)

    def test_tangent_heat_decay(self):
        model = build_model(8, None)
        H = np.arange(1.0, 9.0)
        eta = H.copy()
        for _ in range(100):
            eta = step_tangent(eta, np.zeros(8), model, 1e-2)
        assert np.allclose(eta, np.exp(-model.basis.eigenvalues) * H, rtol=1e-12)

    @given(st.floats(-5, 5), st.integers(0, 2**31))
    def test_tangent_linear(self, a, seed):
        model = build_model(8, None)
        g = np.random.default_rng(seed)
        Y, H = g.standard_normal(8), g.standard_normal(8)
        assert np.allclose(step_tangent(a * H, Y, model, 1e-3), a * step_tangent(H, Y, model, 1e-3),
                           rtol=1e-12, atol=1e-12)

    @given(st.floats(-5, 5), st.integers(0, 2**31))
    def test_second_tangent_quadratic(self, a, seed):
        model = build_model(8, None)
        g = np.random.default_rng(seed)
        Y, H = g.standard_normal(8), g.standard_normal(8)
        z0 = np.zeros(8)
        lhs = step_second_tangent(z0, a * H, Y, model, 1e-3)
        rhs = a * a * step_second_tangent(z0, H, Y, model, 1e-3)
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_second_tangent_zero_source(self):
        model = build_model(8, None)
        Y = np.random.default_rng(0).standard_normal(8)
        assert not np.any(step_second_tangent(np.zeros(8), np.zeros(8), Y, model, 1e-3))


class TestDeterministic:
    def test_decay_envelope(self):
        model = build_model(8, None)
        cfg = IntegratorConfig(1e-3, 1.0)
        X = np.random.default_rng(5).standard_normal((50, 8)) * 3
        b = run_paths(model, cfg, X, [0], 0, store_path=True)
        norms = np.linalg.norm(b.path[:, :, 0], axis=-1)
        env = np.linalg.norm(X, axis=1) * np.exp(-cfg.times)[:, None] * (1 + 5 * cfg.dt)
        assert np.all(norms <= env)

    def test_terminal_matches_reference(self):
        model = build_model(8, None)
        x = np.random.default_rng(6).standard_normal(8)
        b = simulate(x, model, IntegratorConfig(1e-4, 1.0))
        assert np.linalg.norm(b.state[0, 0] - reference(model, x, 1.0)) <= 1e-4

    def test_refinement_monotone_with_jumps(self):
        jm = JumpModel.build(build_model(8).basis, 5.0, 0.5, 1.0, MarkDistribution("rademacher"))
        model = replace(build_model(8, None), jumps=jm)
        x = 2 * np.random.default_rng(7).standard_normal(8)
        ends = [run_paths(model, IntegratorConfig(dt, 1.0), x[None], [3], 9).state[0, 0]
                for dt in (0.02, 0.01, 0.005, 0.0025, 0.00125)]
        errs = [np.linalg.norm(a - b) for a, b in zip(ends, ends[1:])]
        assert all(e2 < e1 for e1, e2 in zip(errs, errs[1:]))
        assert run_paths(model, IntegratorConfig(0.01, 1.0), x[None], [3], 9).n_jumps[0] > 0


class TestTangents:
    @pytest.mark.parametrize("trial", range(20))
    def test_first_tangent_fd(self, noisy8, trial):
        g = np.random.default_rng(100 + trial)
        x, H = g.standard_normal(8), g.standard_normal(8)
        d = 1e-4
        b = run_paths(noisy8, SHORT, np.stack([x + d * H, x - d * H, x]), [trial], 21, directions=H[None])
        fd = (b.state[0, 0] - b.state[1, 0]) / (2 * d)
        eta = b.tangent[2, 0, 0]
        assert np.linalg.norm(fd - eta) <= 1e-3 * np.linalg.norm(eta)

    @pytest.mark.parametrize("trial", range(20))
    def test_second_tangent_fd(self, noisy8, trial):
        g = np.random.default_rng(200 + trial)
        x, H = 2 * g.standard_normal(8), g.standard_normal(8)
        d = 1e-3
        b = run_paths(noisy8, SHORT, np.stack([x + d * H, x, x - d * H]), [trial], 22,
                      directions=H[None], second_order=True)
        fd = (b.state[0, 0] - 2 * b.state[1, 0] + b.state[2, 0]) / d**2
        zeta = b.second_tangent[1, 0, 0]
        assert np.linalg.norm(fd - zeta) <= 1e-2 * np.linalg.norm(zeta)

    def test_bundle_linearity_and_scaling(self, noisy8):
        g = np.random.default_rng(1)
        x, H = g.standard_normal(8), g.standard_normal(8)
        b = run_paths(noisy8, SHORT, x[None], range(5), 4, directions=np.stack([H, 3 * H]),
                      second_order=True)
        assert np.allclose(b.tangent[0, :, 1], 3 * b.tangent[0, :, 0], rtol=1e-12, atol=1e-14)
        assert np.allclose(b.second_tangent[0, :, 1], 9 * b.second_tangent[0, :, 0], rtol=1e-11, atol=1e-14)
        assert np.allclose(b.i_bel[0, :, 1], 3 * b.i_bel[0, :, 0], rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("m,scale", [(8, 1.0), (8, 5.0), (16, 3.0)])
    def test_pathwise_tangent_bound(self, cfg, m, scale):
        model = replace(cfg, m=m).model()
        g = np.random.default_rng(m)
        x, H = scale * g.standard_normal(m), g.standard_normal(m)
        b = run_paths(model, SHORT, x[None], range(200), 5, directions=H[None])
        lhs = np.exp(-4 * b.enstrophy[0]) * np.sum(b.tangent[0, :, 0] ** 2, axis=-1)
        assert np.all(lhs <= H @ H * (1 + 10 * SHORT.dt))

    def test_feedback_with_tangents_rejected(self, noisy8):
        pol = ControlSignal.feedback(lambda t, X: -X, 1.0)
        with pytest.raises(ValueError):
            run_paths(noisy8, SHORT, np.zeros((1, 8)), [0], 0, control=pol, directions=np.ones((1, 8)))


class TestAccumulators:
    def test_enstrophy_trapezoid_and_monotone(self, noisy8):
        x = np.random.default_rng(2).standard_normal(8)
        steps = list(range(0, 201, 10))
        b = run_paths(noisy8, SHORT, x[None], [0], 3, record_steps=steps, store_path=True)
        lam = noisy8.basis.eigenvalues
        d = np.sum(lam * b.path[:, 0, 0] ** 2, axis=-1)
        trap = np.r_[0.0, np.cumsum(0.5 * SHORT.dt * (d[1:] + d[:-1]))]
        assert b.enstrophy[0, 0] == pytest.approx(trap[-1], rel=1e-12)
        assert np.allclose(b.record_enstrophy[:, 0, 0], trap[steps], rtol=1e-12)
        assert np.all(np.diff(b.record_enstrophy[:, 0, 0]) >= 0)
        assert np.array_equal(b.records[:, 0, 0], b.path[steps, 0, 0])

    def test_dump_csv(self, noisy8):
        b = simulate(np.ones(8), noisy8, IntegratorConfig(0.01, 0.1), rng=1)
        buf = io.StringIO()
        dump_path_csv(b, buf)
        rows = buf.getvalue().strip().splitlines()
        assert rows[0].startswith("t,c0") and len(rows) == 12
        assert float(rows[-1].split(",")[-1]) == pytest.approx(b.enstrophy[0, 0], rel=1e-12)

    def test_zero_stays_zero(self):
        b = run_paths(build_model(8, None), SHORT, np.zeros((1, 8)), range(3), 0)
        assert not np.any(b.state) and not np.any(b.cost)


class TestControls:
    @given(st.floats(0, 3), st.integers(0, 2**31))
    def test_clip_never_exceeds(self, R, seed):
        U = np.random.default_rng(seed).standard_normal((50, 8)) * 10 ** np.random.default_rng(seed).uniform(-3, 3)
        assert np.all(np.linalg.norm(clip_to_ball(U, R), axis=-1) <= R)

    @pytest.mark.parametrize("kind", ["feedback", "open_loop", "random"])
    def test_admissible(self, noisy8, kind):
        R = 0.5
        if kind == "feedback":
            pol = ControlSignal.feedback(lambda t, X: -100 * X, R)
        elif kind == "open_loop":
            pol = ControlSignal.open_loop(lambda t: np.full(8, 10.0 * math.sin(7 * t)), R)
        else:
            pol = ControlSignal.random(R)
        b = run_paths(noisy8, SHORT, np.ones((2, 8)), range(20), 6, control=pol)
        assert 0 < b.controls_max_norm <= R
        assert np.all(b.control_cost <= 0.5 * R * R * SHORT.T + 1e-12)

    def test_control_moves_state(self):
        model = build_model(4, None)
        pol = ControlSignal.open_loop(lambda t: np.array([1.0, 0, 0, 0]), 1.0)
        b = run_paths(model, IntegratorConfig(1e-3, 1.0), np.zeros((1, 4)), [0], 0, control=pol)
        # dy = (-y + K u) dt with K = 1 on the unit shell
        assert b.state[0, 0, 0] == pytest.approx(1 - math.exp(-1), rel=2e-3)


class TestOU:
    def test_stationary_variance(self):
        model = build_model(8, 1.5)
        b = simulate_ou(model, IntegratorConfig(0.02, 8.0), 3, n_paths=3000)
        lam = model.basis.eigenvalues
        target = lam ** (-2.5) / 2
        N = b.state[0]
        var = np.mean(N**2, axis=0)
        se = target * math.sqrt(2 / N.shape[0])
        assert np.all(np.abs(var - target) <= 5 * se)

    def test_starts_at_zero_and_sup_finite(self):
        b = simulate_ou(build_model(8, 1.5), IntegratorConfig(0.01, 1.0), 0, n_paths=200)
        assert not np.any(b.path[0])
        assert np.isfinite(b.sup_sq).all() and b.sup_sq.mean() > 0

    def test_matches_linear_integrator(self):
        # exponential Euler with the nonlinearity off has the same mean factor, variance O(dt) off
        model = build_model(4, 1.5)
        cfg = IntegratorConfig(1e-3, 0.5)
        a = simulate_ou(model, cfg, 5, n_paths=4000).state[0]
        b = run_paths(model, cfg, np.zeros((1, 4)), range(4000), 6, linear=True).state[0]
        va, vb = np.mean(a**2), np.mean(b**2)
        assert abs(va - vb) <= 4 * math.hypot(np.std(a**2) / 63.2, np.std(b**2) / 63.2)

    def test_needs_gaussian_forcing(self):
        with pytest.raises(ValueError):
            simulate_ou(build_model(4, None), SHORT, 0)


class TestDeterminism:
    def test_workers_and_chunking(self, noisy8, monkeypatch):
        import levyhjb.integrator as integ

        x = np.random.default_rng(3).standard_normal((2, 8))
        a = run_paths(noisy8, SHORT, x, range(64), 8)
        monkeypatch.setattr(integ, "_CHUNK_ROWS", 16)
        b = run_paths(noisy8, SHORT, x, range(64), 8, workers=4)
        assert b.meta["n_chunks"] > 1
        for name in ("state", "enstrophy", "sup_sq", "n_jumps"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_path_depends_only_on_id(self, noisy8):
        x = np.ones((1, 8))
        a = run_paths(noisy8, SHORT, x, [5, 6, 7], 8)
        b = run_paths(noisy8, SHORT, x, [7], 8)
        # same noise; batch width may change BLAS summation order in the last ulp
        assert np.allclose(a.state[0, 2], b.state[0, 0], rtol=1e-13, atol=1e-15)
        assert a.n_jumps[2] == b.n_jumps[0]

    def test_antithetic_pairs(self):
        model = build_model(4, 1.5)
        b = run_paths(model, SHORT, np.zeros((1, 4)), range(2), 0, antithetic=True, linear=True)
        assert np.allclose(b.state[0, 0], -b.state[0, 1], atol=1e-15)


class TestFailures:
    def test_blowup_budget(self):
        model = build_model(16, None)
        x0 = 1e4 * np.random.default_rng(1).standard_normal((1, 16))
        with pytest.raises(PathBudgetError) as info:
            run_paths(model, IntegratorConfig(0.05, 1.0), x0, [0], 0)
        assert info.value.path_id == 0 and 0 < info.value.time <= 1.0

    def test_bad_inputs(self, noisy8):
        with pytest.raises(ValueError):
            run_paths(noisy8, SHORT, np.ones((1, 4)), [0], 0)
        with pytest.raises(ValueError):
            run_paths(noisy8, SHORT, np.full((1, 8), np.nan), [0], 0)
        with pytest.raises(ValueError):
            run_paths(noisy8, SHORT, np.ones((1, 8)), [0], 0, second_order=True)
