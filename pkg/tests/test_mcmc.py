import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invot.costs import CostKind, CostParams, CostStructure, PenaltySettings, build_cost
from invot.errors import DegenerateLatent, DomainError, EmptyChain, InitializationError
from invot.mcmc import (
    ChainConfig,
    ChainOutput,
    ForwardModel,
    LatentState,
    acceptance_probability,
    coverage,
    forward_map,
    gibbs_sweep,
    initial_state,
    log_posterior,
    make_rng,
    metropolis_probability,
    misfit,
    misfit_from_plan,
    normalize_state,
    normalized_samples,
    posterior_summary,
    run_chain,
)
from invot.transport import SinkhornSettings

TOEP2 = CostStructure(CostKind.TOEPLITZ, 2)
TOEP3 = CostStructure(CostKind.TOEPLITZ, 3)
TOEP4 = CostStructure(CostKind.TOEPLITZ, 4)


def random_state(rng, structure, low=0.05):
    n, d = structure.n, structure.n_params
    return LatentState(rng.uniform(low, 1, n), rng.uniform(low, 1, n), rng.uniform(low, 1, d))


def quick_config(**kw):
    base = dict(sigma=0.05, delta_u=0.1, delta_v=0.1, delta_theta=0.1, n_iterations=200, burn_in=50, seed=1)
    base.update(kw)
    return ChainConfig(**base)


class TestLatentState:
    def test_flat_roundtrip(self):
        s = LatentState([0.1, 0.2], [0.3, 0.4], [0.5, 0.6])
        assert LatentState.from_flat(s.flat(), 2) == s

    def test_box_is_closed(self):
        assert LatentState([1.0, 0.0], [0.5, 0.5], [1.0, 1.0]).in_box()
        assert not LatentState([1.2, 0.0], [0.5, 0.5], [1.0, 1.0]).in_box()

    def test_read_only(self):
        s = LatentState([0.1, 0.2], [0.3, 0.4], [0.5, 0.6])
        with pytest.raises(ValueError):
            s.u[0] = 1.0

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            LatentState([0.1, 0.2], [0.3], [0.5, 0.6])


class TestConfig:
    @pytest.mark.parametrize(
        "bad",
        [
            dict(sigma=0.0),
            dict(delta_u=0.0),
            dict(burn_in=200),
            dict(thinning=0),
            dict(blocks=("w",)),
            dict(blocks=()),
            dict(seed=-1),
        ],
    )
    def test_rejects(self, bad):
        with pytest.raises(DomainError):
            quick_config(**bad)

    def test_dict_roundtrip(self):
        c = quick_config(solver=SinkhornSettings(0.04), thinning=3, blocks=("u", "theta"))
        assert ChainConfig.from_dict(c.to_dict()) == c
        assert ChainConfig.from_dict(quick_config().to_dict()) == quick_config()


class TestForwardMap:
    def test_scale_invariance_dyadic(self):
        # entries and scale factors are exact in binary, so the normalized marginals are identical
        s = LatentState([0.25, 0.5, 0.125], [0.75, 0.25, 0.5], [0.5, 0.25, 0.75, 0.125])
        base = forward_map(s, TOEP3)
        for lam, mu in [(3.0, 1.0), (2.0, 0.5), (3.0, 5.0)]:
            scaled = LatentState(lam * s.u, mu * s.v, s.theta)
            assert forward_map(scaled, TOEP3).tobytes() == base.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(-8, 8), st.integers(-8, 8))
    def test_scale_invariance_power_of_two(self, seed, a, b):
        s = random_state(np.random.default_rng(seed), TOEP4)
        scaled = LatentState(2.0**a * s.u, 2.0**b * s.v, s.theta)
        assert forward_map(scaled, TOEP4).tobytes() == forward_map(s, TOEP4).tobytes()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 100), st.floats(0.01, 100))
    def test_scale_invariance_general(self, seed, lam, mu):
        s = random_state(np.random.default_rng(seed), TOEP4)
        scaled = LatentState(lam * s.u, mu * s.v, s.theta)
        np.testing.assert_allclose(forward_map(scaled, TOEP4), forward_map(s, TOEP4), atol=1e-14)
        sk = SinkhornSettings(0.05)
        np.testing.assert_allclose(forward_map(scaled, TOEP4, sk), forward_map(s, TOEP4, sk), atol=1e-9)

    def test_two_by_two_anti_diagonal(self):
        s = LatentState([0.5, 0.5], [0.5, 0.5], [0.3, 0.7])
        np.testing.assert_allclose(forward_map(s, TOEP2), [[0, 0.5], [0.5, 0]], atol=1e-15)

    def test_forced_coupling(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            s = LatentState([1.0, 0, 0], [0, 0, 1.0], rng.random(4))
            expected = np.zeros((3, 3))
            expected[0, 2] = 1.0
            np.testing.assert_array_equal(forward_map(s, TOEP3), expected)

    def test_degenerate(self):
        with pytest.raises(DegenerateLatent):
            forward_map(LatentState([0.0, 0.0], [0.5, 0.5], [0.3, 0.7]), TOEP2)

    def test_uses_built_cost(self):
        rng = np.random.default_rng(4)
        s = random_state(rng, TOEP3)
        model = ForwardModel(TOEP3)
        np.testing.assert_array_equal(model.cost(s.theta), build_cost(CostParams(TOEP3, s.theta)))


class TestMisfit:
    def test_zero_at_observation(self):
        s = random_state(np.random.default_rng(1), TOEP3)
        assert misfit(s, forward_map(s, TOEP3), 0.04, TOEP3) == 0.0

    def test_sigma_scaling(self):
        rng = np.random.default_rng(2)
        s = random_state(rng, TOEP3)
        obs = rng.random((3, 3))
        obs /= obs.sum()
        assert misfit(s, obs, 0.2, TOEP3) == pytest.approx(misfit(s, obs, 0.1, TOEP3) / 4, rel=1e-14)

    def test_arithmetic(self):
        plan = np.zeros((2, 2))
        obs = np.array([[0.1, 0.0], [0.0, -0.1]])  # squared distance 0.02
        assert misfit_from_plan(plan, obs, 0.1) == pytest.approx(1.0, rel=1e-14)

    def test_bad_sigma(self):
        s = random_state(np.random.default_rng(1), TOEP2)
        with pytest.raises(DomainError):
            misfit(s, np.full((2, 2), 0.25), 0.0, TOEP2)


class TestPosterior:
    def test_outside_box(self):
        s = LatentState([1.2, 0.5], [0.5, 0.5], [0.3, 0.7])
        assert log_posterior(s, np.full((2, 2), 0.25), quick_config(), TOEP2) == -math.inf

    def test_boundary_is_finite(self):
        s = LatentState([1.0, 0.5], [0.5, 1.0], [0.3, 1.0 - 1e-9])
        assert math.isfinite(log_posterior(s, np.full((2, 2), 0.25), quick_config(), TOEP2))

    def test_difference_is_misfit_difference(self):
        rng = np.random.default_rng(6)
        obs = rng.random((3, 3))
        obs /= obs.sum()
        a, b = random_state(rng, TOEP3), random_state(rng, TOEP3)
        cfg = quick_config()
        diff = log_posterior(b, obs, cfg, TOEP3) - log_posterior(a, obs, cfg, TOEP3)
        assert diff == pytest.approx(misfit(a, obs, cfg.sigma, TOEP3) - misfit(b, obs, cfg.sigma, TOEP3), rel=1e-12)


class TestAcceptance:
    def test_formula(self):
        assert metropolis_probability(2.0, 2.0) == 1.0
        assert metropolis_probability(2.0, 3.0) == pytest.approx(math.exp(-1))
        assert metropolis_probability(2.0, 3.0) == pytest.approx(0.3679, abs=1e-4)
        assert metropolis_probability(3.0, 1.0) == 1.0

    def test_states(self):
        rng = np.random.default_rng(8)
        a = random_state(rng, TOEP3)
        obs = forward_map(a, TOEP3)
        b = random_state(rng, TOEP3)
        cfg = quick_config()
        # moving towards the exact fit always succeeds
        assert acceptance_probability(b, a, obs, cfg, TOEP3) == 1.0
        p = acceptance_probability(a, b, obs, cfg, TOEP3)
        assert p == pytest.approx(math.exp(-misfit(b, obs, cfg.sigma, TOEP3)))
        out = LatentState(b.u, b.v, b.theta + 2.0)
        assert acceptance_probability(a, out, obs, cfg, TOEP3) == 0.0


class TestSweep:
    def test_out_of_box_block_does_not_stop_others(self):
        rng = make_rng(3)
        s = LatentState([0.98, 0.99, 0.97], [0.4, 0.5, 0.6], [0.5, 0.5, 0.5, 0.5])
        obs = forward_map(random_state(np.random.default_rng(1), TOEP3), TOEP3)
        cfg = ChainConfig(sigma=10.0, delta_u=50.0, delta_v=1e-3, delta_theta=1e-3, n_iterations=1)
        model = ForwardModel(TOEP3)
        res = gibbs_sweep(s, misfit(s, obs, 10.0, TOEP3), obs, model, cfg, rng)
        assert res.out_of_box.tolist() == [1, 0, 0]
        assert res.accepted.tolist() == [0, 1, 1]
        np.testing.assert_array_equal(res.state.u, s.u)
        assert not np.array_equal(res.state.v, s.v) and not np.array_equal(res.state.theta, s.theta)

    def test_small_steps_are_accepted(self):
        truth = random_state(np.random.default_rng(2), TOEP3)
        obs = forward_map(truth, TOEP3, SinkhornSettings(0.05))
        cfg = quick_config(delta_u=1e-7, delta_v=1e-7, delta_theta=1e-7, solver=SinkhornSettings(0.05), burn_in=0)
        out = run_chain(obs, TOEP3, cfg, start=random_state(np.random.default_rng(3), TOEP3, low=0.2))
        assert out.overall_acceptance > 0.95

    def test_stream_independent_of_frozen_blocks(self):
        # freezing a block must not shift the random stream seen by the others
        truth = random_state(np.random.default_rng(5), TOEP3)
        obs = forward_map(truth, TOEP3)
        start = random_state(np.random.default_rng(6), TOEP3)
        full = run_chain(obs, TOEP3, quick_config(n_iterations=1, burn_in=0, sigma=1e6), start=start)
        only_v = run_chain(obs, TOEP3, quick_config(n_iterations=1, burn_in=0, sigma=1e6, blocks=("v",)), start=start)
        # with a flat likelihood every in-box move is accepted, so v matches when both accepted it
        if full.accepted[1] and only_v.accepted[1]:
            assert np.array_equal(full.samples[0, 3:6], only_v.samples[0, 3:6])
        np.testing.assert_array_equal(only_v.samples[0, :3], start.u)
        np.testing.assert_array_equal(only_v.samples[0, 6:], start.theta)
        assert only_v.proposed.tolist() == [0, 1, 0]


class TestRunChain:
    def test_deterministic(self):
        truth = random_state(np.random.default_rng(11), TOEP3)
        obs = forward_map(truth, TOEP3)
        cfg = quick_config(seed=12345, thinning=3)
        a = run_chain(obs, TOEP3, cfg)
        b = run_chain(obs, TOEP3, cfg)
        assert a == b
        assert a.samples.tobytes() == b.samples.tobytes()
        assert a.misfit_trace.tobytes() == b.misfit_trace.tobytes()
        c = run_chain(obs, TOEP3, quick_config(seed=12346, thinning=3))
        assert not np.array_equal(a.samples, c.samples)

    def test_bookkeeping(self):
        obs = forward_map(random_state(np.random.default_rng(1), TOEP3), TOEP3)
        out = run_chain(obs, TOEP3, quick_config(n_iterations=103, burn_in=10, thinning=4))
        assert out.misfit_trace.shape == (103,)
        assert out.sample_iterations.tolist() == list(range(10, 103, 4))
        assert out.samples.shape == (len(range(10, 103, 4)), 3 + 3 + 4)
        assert out.proposed.tolist() == [103, 103, 103]
        assert np.all((out.acceptance_rates >= 0) & (out.acceptance_rates <= 1))
        assert np.all(out.raw_acceptance_rates <= out.acceptance_rates)
        assert len(out.labels()) == out.samples.shape[1]

    def test_start_at_truth_zero_noise(self):
        truth = random_state(np.random.default_rng(21), TOEP3)
        obs = forward_map(truth, TOEP3)
        out = run_chain(obs, TOEP3, quick_config(n_iterations=300), start=truth)
        assert out.initial_misfit == 0.0
        assert np.all(out.misfit_trace >= 0)
        assert np.all(np.minimum.accumulate(out.misfit_trace) == 0.0) or out.misfit_trace[0] == 0.0
        # running minimum including the initial point stays at zero
        assert np.all(np.minimum.accumulate(np.concatenate([[0.0], out.misfit_trace])) == 0.0)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.3, 1.0]))
    def test_samples_in_box_and_running_min(self, seed, delta):
        rng = np.random.default_rng(seed)
        obs = forward_map(random_state(rng, TOEP3), TOEP3)
        cfg = quick_config(seed=seed, delta_u=delta, delta_v=delta, delta_theta=delta, n_iterations=60, burn_in=0)
        seen = []
        out = run_chain(obs, TOEP3, cfg, callback=lambda it, s, phi: seen.append((s, phi)))
        assert np.all((out.samples >= 0) & (out.samples <= 1))
        running = np.minimum.accumulate(out.misfit_trace)
        assert np.all(np.diff(running) <= 0)
        assert [phi for _, phi in seen] == out.misfit_trace.tolist()
        for s, phi in seen[:5]:
            assert phi == pytest.approx(misfit(s, obs, cfg.sigma, TOEP3), rel=1e-12)

    def test_solver_failures_reject(self):
        # c_bar barely above the start values: proposals past it fail the dominance check
        s = CostStructure(CostKind.TOEPLITZ, 3, penalty=PenaltySettings(0.7))
        start = LatentState([0.5, 0.5, 0.5], [0.5, 0.5, 0.5], [0.6, 0.6, 0.6, 0.6])
        obs = np.full((3, 3), 1 / 9)
        out = run_chain(obs, s, quick_config(delta_theta=0.1, n_iterations=200), start=start)
        assert out.failures[2] > 0
        assert out.failures[:2].tolist() == [0, 0]
        theta = out.samples[:, 6:]
        assert np.all(theta < 0.7)

    def test_initialization_failure(self):
        obs = np.full((3, 3), 1 / 9)
        s = CostStructure(CostKind.TOEPLITZ, 3, penalty=PenaltySettings(0.01))
        with pytest.raises(InitializationError):
            run_chain(obs, s, quick_config())

    def test_initial_state_interval(self):
        rng = make_rng(0)
        for _ in range(200):
            s = initial_state(TOEP4, rng)
            x = s.flat()
            assert np.all((x > 0.05) & (x <= 1.0))

    def test_observation_shape(self):
        with pytest.raises(DomainError):
            run_chain(np.full((2, 2), 0.25), TOEP3, quick_config())


def _fake_output(samples, structure=TOEP2):
    samples = np.asarray(samples, dtype=float)
    z = np.zeros(3, dtype=np.int64)
    return ChainOutput(structure, samples, z, z, z, z, np.zeros(1), samples[0], 0.0, np.arange(len(samples)))


class TestSummary:
    def test_constant_chain(self):
        out = _fake_output([[0.2, 0.6, 0.5, 0.5, 0.3, 0.4]] * 5)
        for s in posterior_summary(out):
            assert s.std == 0.0
            assert len(set(s.quantiles.values())) == 1
            assert s.counts.sum() == 5
        u0 = posterior_summary(out)[0]
        assert u0.mean == pytest.approx(0.25) and u0.quantiles[0.5] == pytest.approx(0.25)

    def test_two_samples(self):
        a = [0.2, 0.6, 0.5, 0.5, 0.3, 0.4]
        b = [0.6, 0.2, 0.5, 0.5, 0.3, 0.4]
        out = _fake_output([a, b])
        assert posterior_summary(out)[0].mean == pytest.approx((0.25 + 0.75) / 2)

    def test_histogram_counts(self):
        rng = np.random.default_rng(0)
        out = _fake_output(rng.uniform(0.05, 1, size=(37, 6)))
        assert all(s.counts.sum() == 37 for s in posterior_summary(out, bins=7))

    def test_empty(self):
        with pytest.raises(EmptyChain):
            posterior_summary(_fake_output([[0.2, 0.6, 0.5, 0.5, 0.3, 0.4]]))

    def test_normalized_theta(self):
        out = _fake_output([[0.2, 0.6, 0.5, 0.5, 0.3, 0.4]])
        x = normalized_samples(out)
        c = build_cost(CostParams(TOEP2, [0.3, 0.4]))
        np.testing.assert_allclose(x[0, 4:], [c[1, 0], c[0, 1]])
        np.testing.assert_allclose(x[0], normalize_state(LatentState.from_flat(out.samples[0], 2), TOEP2))

    def test_coverage(self):
        rng = np.random.default_rng(1)
        out = _fake_output(rng.uniform(0.05, 1, size=(400, 6)))
        inside = LatentState([0.5, 0.5], [0.5, 0.5], [0.5, 0.5])
        covered, lo, hi, t = coverage(out, inside)
        assert covered.all()
        skewed = LatentState([1.0, 1e-4], [0.5, 0.5], [0.5, 0.5])
        covered, *_ = coverage(out, skewed)
        assert not covered[0] and not covered[1]


def test_detailed_balance_two_dim():
    """Long-run u-block histogram on n=2 matches grid quadrature of exp(-misfit)."""
    structure = TOEP2
    v = np.array([0.3, 0.7])
    theta = np.array([0.4, 0.6])
    truth = LatentState([0.6, 0.4], v, theta)
    obs = forward_map(truth, structure)
    sigma = 0.1
    cfg = ChainConfig(
        sigma=sigma, delta_u=0.3, delta_v=0.1, delta_theta=0.1,
        n_iterations=100_000, burn_in=1000, seed=7, thinning=10, blocks=("u",),
    )
    out = run_chain(obs, structure, cfg, start=LatentState([0.5, 0.5], v, theta))
    assert np.all(out.samples[:, 2:] == np.concatenate([v, theta]))
    bins = 5
    hist, _, _ = np.histogram2d(out.samples[:, 0], out.samples[:, 1], bins=bins, range=[[0, 1], [0, 1]])
    hist /= hist.sum()

    # midpoint quadrature of the unnormalized posterior density on [0, 1]^2
    m = 400
    grid = (np.arange(m) + 0.5) / m
    model = ForwardModel(structure)
    dens = np.empty((m, m))
    for i, a in enumerate(grid):
        for j, b in enumerate(grid):
            plan = model.plan(LatentState([a, b], v, theta))
            dens[i, j] = math.exp(-misfit_from_plan(plan, obs, sigma))
    ref = dens.reshape(bins, m // bins, bins, m // bins).sum(axis=(1, 3))
    ref /= ref.sum()
    tv = 0.5 * np.abs(hist - ref).sum()
    assert tv < 0.05, tv
