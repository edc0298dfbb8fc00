import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from levyhjb import hjb
from levyhjb.feynman_kac import Sampler
from levyhjb.integrator import ControlSignal, build_model
from levyhjb.noise import RegimeWarning
from levyhjb.rng import Streams
from levyhjb.spectral import build_basis

R = 0.5
vec8 = arrays(np.float64, 8, elements=st.floats(-5, 5, allow_nan=False))
X4 = np.array([0.6, -0.5, 0.4, 0.3])


def small_cfg(**kw):
    base = dict(R=0.5, gamma=0.5, T=0.5, n_slices=10, n_mc=300, n_cloud=20)
    return hjb.HjbConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def model(cfg):
    return cfg.model()


@pytest.fixture(scope="module")
def machinery(model):
    return hjb.PicardMachinery.build(model, small_cfg(), Sampler(model, 1e-3, Streams(5)), "fp")


@pytest.fixture(scope="module")
def solved(machinery):
    return hjb.solve_value_function(machinery.cfg, machinery)


class TestHamiltonian:
    def test_examples(self):
        assert hjb.hamiltonian_F(np.zeros(4), R) == 0.0
        p = np.array([R, 0, 0, 0])
        assert hjb.hamiltonian_F(p, R) == pytest.approx(-R * R / 2, abs=1e-15)
        assert hjb.hamiltonian_F(2 * p, R) == pytest.approx(-1.5 * R * R, abs=1e-15)

    @pytest.mark.parametrize("scale", [0.0, 0.3, 0.999, 1.0, 1.5, 7.0])
    def test_bruteforce(self, scale):
        g = np.random.default_rng(int(scale * 10))
        p = g.standard_normal(8)
        p *= scale * R / np.linalg.norm(p)
        bf = hjb.hamiltonian_bruteforce(p, R, 100_000, g)
        assert abs(bf - float(hjb.hamiltonian_F(p, R))) <= 1e-12

    @given(vec8)
    def test_feedback_attains_and_admissible(self, p):
        U = hjb.feedback_G(p, R)
        assert np.linalg.norm(U) <= R
        assert float(U @ p + 0.5 * U @ U) == pytest.approx(float(hjb.hamiltonian_F(p, R)), abs=1e-12)

    def test_feedback_examples(self):
        assert not np.any(hjb.feedback_G(np.zeros(4), R))
        p = np.array([0, 3 * R, 0, 0])
        assert np.linalg.norm(hjb.feedback_G(p, R)) == pytest.approx(R, abs=1e-15)

    def test_no_sample_beats_feedback(self):
        g = np.random.default_rng(1)
        p = g.standard_normal(8)
        d = g.standard_normal((100_000, 8))
        U = R * g.random(100_000)[:, None] ** (1 / 8) * d / np.linalg.norm(d, axis=1, keepdims=True)
        best = hjb.feedback_G(p, R)
        assert np.min(U @ p + 0.5 * np.sum(U * U, 1)) >= float(best @ p + 0.5 * best @ best) - 1e-12

    @given(st.floats(0.5, 1.5), st.floats(0.5, 1.5), st.integers(0, 2**31))
    def test_seam_lipschitz(self, a, b, seed):
        d = np.random.default_rng(seed).standard_normal(8)
        d /= np.linalg.norm(d)
        p, q = a * R * d, b * R * d
        bound = (R + max(np.linalg.norm(p), np.linalg.norm(q))) * np.linalg.norm(p - q)
        assert abs(float(hjb.hamiltonian_F(p, R) - hjb.hamiltonian_F(q, R))) <= bound + 1e-15

    def test_seam_continuity(self):
        d = np.ones(4) / 2
        below = hjb.hamiltonian_F(R * (1 - 1e-13) * d, R)
        above = hjb.hamiltonian_F(R * (1 + 1e-13) * d, R)
        assert abs(float(below - above)) <= 1e-12

    def test_chi(self):
        assert (hjb.chi(-1.0), hjb.chi(0.0), hjb.chi(2.0)) == (0.0, 0.0, 4.0)


class TestCostsAndTransform:
    def test_costs_examples(self):
        b = build_basis(4)
        assert hjb.costs(np.zeros(4), b, 0.5) == (0.0, 0.0, 0.0, 0.0)
        f, g, ft, gt = hjb.costs(b.unit(0), b, 0.5)
        assert (f, g) == (1.0, 1.0)
        assert ft == pytest.approx(math.exp(-0.5)) and gt == pytest.approx(math.exp(-0.5))

    @given(vec8, st.floats(0.05, 3))
    def test_transformed_cost_envelope(self, x, gamma):
        _, _, ft, _ = hjb.costs(x, build_basis(8), gamma)
        assert ft <= 1 / (gamma * math.e) * (1 + 1e-12)

    @given(st.floats(-100, 100), vec8, st.floats(0, 2))
    def test_round_trip(self, v, x, gamma):
        w = hjb.transform_v_w(v, x, gamma, "to_w")
        assert float(hjb.transform_v_w(w, x, gamma, "to_v")) == pytest.approx(v, rel=1e-12, abs=1e-300)

    def test_identity_at_zero_and_exponential(self):
        x = np.array([0.3, 0.1, -0.2, 0.5])
        assert hjb.transform_v_w(3.0, np.zeros(4), 0.7, "to_w") == 3.0
        assert float(hjb.transform_v_w(math.exp(0.7 * x @ x), x, 0.7, "to_w")) == pytest.approx(1.0)

    def test_overflow_guard(self):
        with pytest.raises(OverflowError):
            hjb.transform_v_w(1.0, np.full(4, 30.0), 1.0, "to_v")
        with pytest.raises(ValueError):
            hjb.transform_v_w(1.0, np.zeros(4), 1.0, "sideways")


class TestConfig:
    def test_exponent_chain(self):
        with pytest.raises(ValueError, match="alpha1 < alpha"):
            hjb.HjbConfig(alpha1=0.3, alpha=0.2)
        with pytest.raises(ValueError):
            hjb.HjbConfig(alpha_tilde1=0.6)

    def test_noise_regime_warning(self):
        with pytest.warns(RegimeWarning):
            assert len(hjb.HjbConfig().check_noise_exponent(2.0)) == 1
        assert hjb.HjbConfig().check_noise_exponent(1.5) == []

    def test_control_operator(self):
        K = hjb.ControlOperatorK(0.4, build_basis(8))
        assert np.allclose(K.apply(np.ones(8)), build_basis(8).eigenvalues ** -0.4)
        with pytest.raises(ValueError):
            hjb.ControlOperatorK(0.5, build_basis(8))


class TestFeatures:
    @pytest.mark.parametrize("kind", hjb.FEATURE_SETS)
    def test_terminal_is_energy(self, kind):
        fm = hjb.FeatureMap(kind, build_basis(8))
        X = np.random.default_rng(0).standard_normal((5, 8))
        assert np.allclose(fm.design(X) @ fm.terminal(), np.sum(X * X, 1), rtol=1e-14)

    @pytest.mark.parametrize("kind", hjb.FEATURE_SETS)
    def test_quadratic_matches_design(self, kind):
        fm = hjb.FeatureMap(kind, build_basis(8))
        g = np.random.default_rng(1)
        coef = g.standard_normal(fm.n_features)
        X = g.standard_normal((6, 8))
        c, b, Q = fm.quadratic(coef)
        assert np.allclose(fm.design(X) @ coef, c + X @ b + np.einsum("ni,ij,nj->n", X, Q, X))

    def test_energy_rank_deficient_on_unit_shell(self):
        fm = hjb.FeatureMap("energy", build_basis(4))
        X = np.random.default_rng(2).standard_normal((30, 4))
        with pytest.raises(hjb.RankDeficientError, match="energy"):
            fm.fit(X, np.ones(30))

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            hjb.FeatureMap("cubic", build_basis(4))


class TestPicard:
    def test_cloud(self, machinery):
        c = machinery.cloud
        assert c.shape == (20, 4) and np.all(np.linalg.norm(c, axis=1) <= 1.5)
        again = hjb.sample_cloud(build_basis(4), 20, 1.5, 0.0, Streams(5))
        assert np.array_equal(c, again)

    def test_zero_control_reproduces_mc_exactly(self, machinery):
        # at m = 4 the dynamics are linear, so the CRN sample means are quadratic in x
        v0 = hjb.zero_control_value(machinery.cfg, machinery)
        for j in range(len(v0.slice_times)):
            assert np.allclose(v0.slice_value(j, machinery.cloud), machinery.base[j], rtol=1e-10)

    def test_slice_zero_exact(self, machinery, solved):
        v, _ = solved
        c = machinery.cloud
        assert np.allclose(v.slice_value(0, c), np.sum(c * c, 1), rtol=1e-15)
        assert np.allclose(v.value(0.0, c), np.sum(c * c, 1), rtol=1e-15)

    def test_zero_gradient_step_equals_r0(self, machinery):
        zero = replace(machinery.empty_value())
        zero = hjb.ValueFunction(zero.features, zero.basis, zero.k_diag, zero.slice_times,
                                 np.zeros_like(zero.coeffs))
        assert np.array_equal(machinery.targets(zero), machinery.targets(None))

    def test_r0_converges_in_one(self, model):
        cfg = small_cfg(R=0.0)
        mach = hjb.PicardMachinery.build(model, cfg, Sampler(model, 1e-3, Streams(5)))
        _, rep = hjb.solve_value_function(cfg, mach)
        assert rep.iterations == 1 and rep.converged and rep.residuals == [0.0]

    def test_small_r_strictly_decreasing(self, model):
        cfg = small_cfg(R=0.1)
        mach = hjb.PicardMachinery.build(model, cfg, Sampler(model, 1e-3, Streams(6)))
        _, rep = hjb.solve_value_function(cfg, mach)
        assert rep.converged
        assert all(b < a for a, b in zip(rep.residuals, rep.residuals[1:]))

    def test_default_decreasing(self, solved):
        _, rep = solved
        assert rep.converged and rep.to_dict()["strictly_decreasing"]

    def test_control_lowers_value(self, machinery, solved):
        v, _ = solved
        v0 = hjb.zero_control_value(machinery.cfg, machinery)
        c = machinery.cloud
        assert np.all(v.value(0.5, c) < v0.value(0.5, c))

    def test_value_dominance(self, model, machinery, solved):
        v, _ = solved
        for i, x in enumerate(machinery.cloud[:4]):
            s = Sampler(model, 1e-3, Streams(40 + i))
            for pol in (ControlSignal.zero(), ControlSignal.random(R)):
                est = hjb.evaluate_cost(pol, x, 0.5, 1500, s)
                assert float(v.value(0.5, x)) <= est.value + 3 * est.stderr

    def test_divergence_detected(self, machinery, monkeypatch):
        calls = {"n": 0}

        def blow_up(v_prev, cfg, mach):
            calls["n"] += 1
            base = mach.empty_value()
            return hjb.ValueFunction(base.features, base.basis, base.k_diag, base.slice_times,
                                     base.coeffs + 10.0 ** calls["n"], meta={"iteration": calls["n"]})

        monkeypatch.setattr(hjb, "picard_step", blow_up)
        with pytest.raises(hjb.PicardDivergence) as info:
            hjb.solve_value_function(machinery.cfg, machinery)
        assert len(info.value.history) >= 4

    def test_slice_grid_must_align(self, model):
        with pytest.raises(ValueError):
            hjb.PicardMachinery.build(model, small_cfg(n_slices=7), Sampler(model, 1e-3, Streams(1)))


class TestValueFile:
    def test_round_trip(self, solved):
        v, _ = solved
        back = hjb.ValueFunction.from_json(v.to_json())
        X = np.random.default_rng(0).standard_normal((5, 4))
        for t in (0.0, 0.13, 0.5):
            assert np.array_equal(back.value(t, X), v.value(t, X))
        assert back.fingerprint == "fp"

    def test_corruption_detected(self, solved):
        v, _ = solved
        data = json.loads(v.to_json())
        data["coeffs"][3][1] += 1e-9
        with pytest.raises(hjb.ChecksumError):
            hjb.ValueFunction.from_json(json.dumps(data))
        with pytest.raises(hjb.ChecksumError):
            hjb.ValueFunction.from_json(v.to_json()[:-5])

    def test_mandatory_fields(self, solved):
        data = json.loads(solved[0].to_json())
        del data["version"]
        with pytest.raises(ValueError, match="version"):
            hjb.ValueFunction.from_json(json.dumps(data))

    def test_time_range(self, solved):
        with pytest.raises(ValueError):
            solved[0].value(0.7, X4)


class TestVerification:
    def test_zero_state_zero_cost(self):
        quiet = build_model(4, None)
        est = hjb.evaluate_cost(ControlSignal.zero(), np.zeros(4), 0.5, 10, Sampler(quiet))
        assert est.value == 0.0

    @pytest.mark.parametrize("name", ["zero", "random", "feedback"])
    def test_identity_small(self, model, solved, name):
        v, _ = solved
        ic = hjb.verify_identity(hjb.policy_by_name(name, v, R), v, X4, 0.5, 3000,
                                 Sampler(model, 1e-3, Streams(77)), R)
        assert ic.passes()

    def test_identity_chi_vanishes_for_large_radius(self, model, solved):
        v, _ = solved
        s = Sampler(model, 1e-3, Streams(9))
        big = hjb.verify_identity(ControlSignal.zero(), v, X4, 0.5, 200, s, 1e6)
        # chi(|p| - R) = 0, so the correction is 1/2 int |p|^2 >= 0
        assert big.rhs >= float(v.value(0.5, X4))

    def test_dpp_empty_interval(self, model, solved):
        v, _ = solved
        est = hjb.dpp_consistency(v, X4, 0.2, 0.2, 10, Sampler(model), R)
        assert est.value == 0.0 and est.stderr == 0.0
        with pytest.raises(ValueError):
            hjb.dpp_consistency(v, X4, 0.3, 0.2, 10, Sampler(model), R)

    def test_dpp_random_policy_suboptimal(self, model, solved):
        v, _ = solved
        est = hjb.dpp_consistency(v, X4, 0.0, 0.25, 3000, Sampler(model, 1e-3, Streams(8)), R, "random")
        assert est.value > 3 * est.stderr

    def test_policy_names(self, solved):
        with pytest.raises(ValueError):
            hjb.policy_by_name("greedy", solved[0], R)
        with pytest.raises(ValueError):
            hjb.policy_by_name("feedback", None, R)


class TestTransformedEquation:
    def test_consistency_identities(self, model, solved):
        v, _ = solved
        for x in (X4, 2 * X4, np.zeros(4)):
            d = hjb.transform_consistency(v, 0.3, x, model, 0.5, R, 2000, 1)
            assert d["hamiltonian_defect"] <= 1e-12
            assert d["jump_defect"] <= 1e-12
            assert d["round_trip_defect"] <= 1e-12 * (1 + abs(float(v.value(0.3, x))))

    def test_nonlinearity_without_weights(self, model, solved):
        # gamma = theta = 0: w = v and only F(K* Dv) plus the jump increment remain
        v, _ = solved
        t = 0.3
        out = hjb.transformed_nonlinearity(X4, lambda X: v.value(t, X), lambda X: v.grad(t, X), model,
                                           0.0, 0.0, R, 4000, 2)
        assert out["drift"] == 0.0 and out["potential"] == 0.0
        assert out["hamiltonian"] == pytest.approx(float(hjb.hamiltonian_F(v.kgrad(t, X4), R)))
        assert np.isfinite(out["jump"]) and out["total"] == pytest.approx(
            out["hamiltonian"] + out["jump"])
