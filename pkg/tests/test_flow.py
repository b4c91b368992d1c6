import numpy as np
import pytest

from geomflow.data import TemplateSpec, make_dataset
from geomflow.flow import (
    CouplingPair,
    CouplingSet,
    SizeSampler,
    TrainConfig,
    align_pair,
    estimate_couplings,
    fm_loss,
    generate,
    interpolate,
    noise_rng,
    random_couplings,
    reflow,
    sample_noise,
    sample_ode,
    train,
)
from geomflow.geometry import LatentGeometry
from geomflow.nn import AdamState, VectorFieldModel, adam_step, forward
from geomflow.ode import SolverConfig


def tiny_dataset(count=60, seed=1):
    spec = TemplateSpec(
        num_templates=2, atoms_per_template=(4, 5), feature_classes=3,
        jitter_sigma=0.02, seed=seed,
    )
    return make_dataset(spec, count)


def tiny_config(**over):
    base = dict(
        epochs=2, batch_size=8, lr=2e-3, sigma0=0.01, seed=0,
        k=3, hidden=12, flow_layers=2, identity_latent=True,
        estimate_solver=SolverConfig("rk4", fixed_steps=20),
        reflow_pairs=30, reflow_epochs=1,
    )
    base.update(over)
    return TrainConfig(**base)


class TestSampleNoise:
    def test_coords_centered(self):
        for seed in range(20):
            z = sample_noise(6, 2, seed)
            assert np.abs(z.coords.mean(axis=0)).max() <= 1e-12

    def test_deterministic(self):
        a, b = sample_noise(5, 3, 42), sample_noise(5, 3, 42)
        assert np.array_equal(a.coords, b.coords)
        assert np.array_equal(a.features, b.features)

    def test_feature_moments(self):
        feats = np.stack([sample_noise(5, 2, s).features for s in range(10_000)])
        means = feats.mean(axis=0)
        assert np.abs(means).max() <= 0.03  # 3 sigma of the standard error
        var = feats.var(axis=0)
        assert np.abs(var - 1.0).max() <= 0.05

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            sample_noise(0, 2, 0)


class TestInterpolate:
    def test_endpoints_exact(self):
        z0, z1 = sample_noise(4, 2, 0), sample_noise(4, 2, 1)
        at0 = interpolate(z0, z1, 0.0)
        at1 = interpolate(z0, z1, 1.0)
        assert np.array_equal(at0.coords, z0.coords)
        assert np.array_equal(at0.features, z0.features)
        assert np.array_equal(at1.coords, z1.coords)
        assert np.array_equal(at1.features, z1.features)

    def test_midpoint_hand_case(self):
        z0 = LatentGeometry(2, np.zeros((2, 3)), np.zeros((2, 2)))
        z1 = LatentGeometry(2, 2 * np.ones((2, 3)), 2 * np.ones((2, 2)))
        mid = interpolate(z0, z1, 0.5)
        np.testing.assert_array_equal(mid.coords, np.ones((2, 3)))
        np.testing.assert_array_equal(mid.features, np.ones((2, 2)))

    def test_straight_path_derivative(self):
        z0, z1 = sample_noise(5, 2, 2), sample_noise(5, 2, 3)
        h = 1e-6
        for t in (0.2, 0.5, 0.8):
            fd = (interpolate(z0, z1, t + h).coords - interpolate(z0, z1, t - h).coords) / (2 * h)
            np.testing.assert_allclose(fd, z1.coords - z0.coords, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            interpolate(sample_noise(4, 2, 0), sample_noise(5, 2, 1), 0.5)


class TestFmLoss:
    def test_zero_model_identical_pair_zero_loss(self):
        model = VectorFieldModel(d=2, k=2, hidden=8, flow_layers=1,
                                 identity_latent=True, seed=0)
        model.set_flat(np.zeros(model.param_count))
        z = sample_noise(4, 2, 0)
        loss, _ = fm_loss(model, CouplingPair(z, z, aligned=True), 0.3)
        assert loss == 0.0

    def test_zero_model_unit_difference_single_point(self):
        model = VectorFieldModel(d=1, k=1, hidden=8, flow_layers=1,
                                 identity_latent=True, seed=0)
        model.set_flat(np.zeros(model.param_count))
        z0 = LatentGeometry(1, np.zeros((1, 3)), np.zeros((1, 1)))
        z1 = LatentGeometry(1, np.ones((1, 3)), np.ones((1, 1)))
        pair = CouplingPair(z0, z1, aligned=True)
        loss, _ = fm_loss(model, pair, 0.0)
        assert loss == 1.0

    def test_unaligned_pair_rejected(self):
        model = VectorFieldModel(d=2, k=2, hidden=8, flow_layers=1,
                                 identity_latent=True, seed=0)
        pair = CouplingPair(sample_noise(3, 2, 0), sample_noise(3, 2, 1), aligned=False)
        with pytest.raises(ValueError, match="OMT-aligned"):
            fm_loss(model, pair, 0.5)

    def test_gradient_matches_finite_differences(self):
        model = VectorFieldModel(d=2, k=2, hidden=6, flow_layers=1,
                                 identity_latent=True, seed=1)
        pair = CouplingPair(sample_noise(4, 2, 2), sample_noise(4, 2, 3), aligned=True)
        t = 0.37
        model.zero_grads()
        _, grads = fm_loss(model, pair, t)
        analytic = np.concatenate([g.ravel() for g in grads])
        flat = model.get_flat()
        step = 1e-5
        rng = np.random.default_rng(4)
        idxs = rng.choice(flat.size, size=40, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            model.set_flat(flat)
            lp, _ = fm_loss(model, pair, t, backward=False)
            flat[i] = orig - step
            model.set_flat(flat)
            lm, _ = fm_loss(model, pair, t, backward=False)
            flat[i] = orig
            fd = (lp - lm) / (2 * step)
            denom = max(abs(fd), abs(analytic[i]), 1e-3)
            assert abs(fd - analytic[i]) / denom <= 1e-4
        model.set_flat(flat)


class TestMemorization:
    # The strict endpoint criterion runs in the acceptance suite; this is the
    # quick loss-floor smoke test.
    def test_single_pair_overfit(self):
        rng = np.random.default_rng(5)
        z0 = noise_rng(4, 3, rng)
        z1 = noise_rng(4, 3, rng)
        pair, _ = align_pair(CouplingPair(z0, z1), lam=0.5, max_iters=10, restarts=4)
        model = VectorFieldModel(d=3, k=3, hidden=16, flow_layers=2,
                                 identity_latent=True, seed=6)
        params = model.flow_parameters()
        state = AdamState.init(params)
        losses = []
        for step in range(2500):
            lr = 3e-3 if step < 1500 else 3e-4
            model.zero_grads()
            loss, _ = fm_loss(model, pair, float(rng.uniform()))
            adam_step(params, model.flow_gradients(), state, lr=lr)
            losses.append(loss)
            if loss < 1e-4:
                break
        assert min(losses) < 1e-3


class TestTrain:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty dataset"):
            train([], tiny_config())

    def test_fixed_seed_bit_identical(self):
        ds = tiny_dataset(24)
        m1, l1 = train(ds, tiny_config(epochs=1))
        m2, l2 = train(ds, tiny_config(epochs=1))
        assert l1 == l2
        assert np.array_equal(m1.get_flat(), m2.get_flat())

    def test_loss_decreases_on_fixture(self):
        ds = tiny_dataset(80)
        _, losses = train(ds, tiny_config(epochs=6))
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_records_meta(self):
        ds = tiny_dataset(24)
        model, _ = train(ds, tiny_config(epochs=1))
        assert model.meta["train_size"] == 24
        assert set(model.meta["size_hist"]) == {"4", "5"}


class TestSampleOde:
    def test_zero_model_keeps_state(self):
        model = VectorFieldModel(d=2, k=2, hidden=8, flow_layers=1,
                                 identity_latent=True, seed=0)
        model.set_flat(np.zeros(model.param_count))
        z0 = sample_noise(5, 2, 7)
        z1, steps = sample_ode(model, z0, SolverConfig("euler", fixed_steps=4))
        np.testing.assert_array_equal(z1.coords, z0.coords)
        np.testing.assert_array_equal(z1.features, z0.features)
        assert steps == 4

    def test_terminal_state_zero_com(self):
        ds = tiny_dataset(24)
        model, _ = train(ds, tiny_config(epochs=1))
        for seed in range(5):
            z0 = sample_noise(6, 3, seed)
            z1, _ = sample_ode(model, z0, SolverConfig("adaptive"))
            assert np.abs(z1.coords.mean(axis=0)).max() <= 1e-8


class TestGenerate:
    def test_count_zero_empty(self):
        model = VectorFieldModel(d=2, k=2, hidden=8, flow_layers=1,
                                 identity_latent=True, seed=0)
        assert generate(model, SizeSampler.fixed(4), 0, SolverConfig("euler"), 0) == []

    def test_outputs_centered_and_deterministic(self):
        ds = tiny_dataset(24)
        model, _ = train(ds, tiny_config(epochs=1))
        sampler = SizeSampler.from_dataset(ds)
        solver = SolverConfig("rk4", fixed_steps=12)
        a = generate(model, sampler, 6, solver, seed=9)
        b = generate(model, sampler, 6, solver, seed=9)
        for (ga, sa), (gb, sb) in zip(a, b):
            assert sa == sb
            assert np.array_equal(ga.coords, gb.coords)
            assert np.abs(ga.coords.mean(axis=0)).max() <= 1e-8

    def test_threads_do_not_change_results(self):
        ds = tiny_dataset(24)
        model, _ = train(ds, tiny_config(epochs=1))
        sampler = SizeSampler.from_dataset(ds)
        solver = SolverConfig("rk4", fixed_steps=8)
        serial = generate(model, sampler, 8, solver, seed=3, threads=1)
        parallel = generate(model, sampler, 8, solver, seed=3, threads=4)
        for (ga, _), (gb, _) in zip(serial, parallel):
            assert np.array_equal(ga.coords, gb.coords)


class TestSizeSampler:
    def test_matches_histogram_frequencies(self):
        sampler = SizeSampler.from_histogram({4: 3, 6: 1})
        rng = np.random.default_rng(0)
        draws = np.array([sampler.sample(rng) for _ in range(4000)])
        assert abs((draws == 4).mean() - 0.75) < 0.03

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            SizeSampler.from_histogram({})


class TestReflow:
    def test_all_rejected_raises(self):
        ds = tiny_dataset(24)
        model, _ = train(ds, tiny_config(epochs=1))
        with pytest.raises(ValueError, match="purification rejected all samples"):
            reflow(model, tiny_config(), lambda g: False)

    def test_accept_all_returns_aligned_estimated_pairs(self):
        ds = tiny_dataset(24)
        model, _ = train(ds, tiny_config(epochs=1))
        model2, cset = reflow(model, tiny_config(), lambda g: True)
        assert len(cset) == 30
        assert all(p.aligned and p.source == "estimated" and p.valid for p in cset)

    def test_purify_keeps_only_valid(self):
        ds = tiny_dataset(24)
        model, _ = train(ds, tiny_config(epochs=1))

        def alternating(g):
            alternating.calls += 1
            return alternating.calls % 2 == 0

        alternating.calls = 0
        _, cset = reflow(model, tiny_config(), alternating)
        assert len(cset) == 15
        assert all(p.valid for p in cset)

    def test_requires_trained_model(self):
        model = VectorFieldModel(d=3, k=3, hidden=8, flow_layers=1,
                                 identity_latent=True, seed=0)
        with pytest.raises(ValueError, match="size histogram"):
            reflow(model, tiny_config(), lambda g: True)

    def test_rounds_must_be_positive(self):
        ds = tiny_dataset(24)
        model, _ = train(ds, tiny_config(epochs=1))
        with pytest.raises(ValueError, match="reflow_rounds"):
            reflow(model, tiny_config(reflow_rounds=0), lambda g: True)


class TestCouplingHelpers:
    def test_random_couplings_sizes_match(self):
        ds = tiny_dataset(24)
        model, _ = train(ds, tiny_config(epochs=1))
        cset = random_couplings(model, ds, 10, seed=4)
        assert len(cset) == 10
        assert all(p.z0.n == p.z1.n and p.source == "random" for p in cset)

    def test_estimate_couplings_deterministic(self):
        ds = tiny_dataset(24)
        model, _ = train(ds, tiny_config(epochs=1))
        sampler = SizeSampler.from_dataset(ds)
        solver = SolverConfig("rk4", fixed_steps=8)
        a = estimate_couplings(model, 5, solver, 11, sampler)
        b = estimate_couplings(model, 5, solver, 11, sampler)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.z1.coords, pb.z1.coords)

    def test_coupling_pair_validation(self):
        with pytest.raises(ValueError, match="size mismatch"):
            CouplingPair(sample_noise(3, 2, 0), sample_noise(4, 2, 1))
        with pytest.raises(ValueError, match="unknown coupling source"):
            CouplingPair(sample_noise(3, 2, 0), sample_noise(3, 2, 1), source="guessed")

    def test_coupling_set_mixed_width_rejected(self):
        p1 = CouplingPair(sample_noise(3, 2, 0), sample_noise(3, 2, 1))
        p2 = CouplingPair(sample_noise(3, 3, 2), sample_noise(3, 3, 3))
        with pytest.raises(ValueError, match="mixes latent widths"):
            CouplingSet([p1, p2])
