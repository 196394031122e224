import math

import numpy as np
import pytest

from mt2st import kernel
from mt2st.optimizer import combine, sgd_step
from mt2st.tasks import DenoiseSchedule, TaskSpec, denoise_batch, dump_suite, generate_suite, load_suite


REG3 = ["regression"] * 3


def test_same_seed_is_bitwise_identical():
    a = generate_suite(3, 12, 2, rho=[0.5, 0.2], samples=300)
    b = generate_suite(3, 12, 2, rho=[0.5, 0.2], samples=300)
    for ta, tb in zip(a.tasks, b.tasks):
        for split in ("train", "validation"):
            assert ta.view(split)[0].tobytes() == tb.view(split)[0].tobytes()
            assert ta.view(split)[1].tobytes() == tb.view(split)[1].tobytes()


def test_full_relatedness_targets_are_functions_of_shared_latent():
    suite = generate_suite(0, 16, 2, rho=1.0, samples=500, kinds=REG3, class_counts=3, target_noise_var=0.0)
    latent = suite.truth["inputs"] @ suite.truth["shared_map"].T
    train_idx = suite.truth["train_index"]
    for k, task in enumerate(suite.tasks):
        expected = latent[train_idx] @ suite.truth["heads"][k].T
        np.testing.assert_allclose(task.y_train, expected, atol=1e-12)


def test_unrelated_aux_targets_uncorrelated_with_primary():
    n = 10_000
    suite = generate_suite(1, 16, 2, rho=0.0, samples=n, kinds=REG3, class_counts=2)
    primary = np.concatenate([suite.primary.y_train, suite.primary.y_val])
    for task in suite.auxiliaries:
        aux = np.concatenate([task.y_train, task.y_val])
        for i in range(primary.shape[1]):
            for j in range(aux.shape[1]):
                r = np.corrcoef(primary[:, i], aux[:, j])[0, 1]
                assert abs(r) < 3 / math.sqrt(n)


def test_split_is_disjoint_and_covering():
    suite = generate_suite(2, 10, 1, samples=257, validation_fraction=0.3)
    tr, va = suite.truth["train_index"], suite.truth["validation_index"]
    assert not set(tr) & set(va)
    assert sorted(np.concatenate([tr, va])) == list(range(257))


def test_classification_labels_in_range():
    suite = generate_suite(4, 20, 3, class_counts=[5, 2, 3, 7], samples=400)
    for task in suite.tasks:
        y = np.concatenate([task.y_train, task.y_val])
        assert y.min() >= 0 and y.max() < task.spec.output_dim


def test_latent_capacity_guard():
    with pytest.raises(ValueError, match="latent_dim"):
        generate_suite(0, 8, 2, latent_dim=4)


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec("classification", 0)
    with pytest.raises(ValueError):
        TaskSpec("regression", 1, relatedness=1.5)
    with pytest.raises(ValueError):
        TaskSpec("denoising", 4)


class TestDenoise:
    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            DenoiseSchedule(10, 0.0, 0.0)
        with pytest.raises(ValueError):
            DenoiseSchedule(10, 0.5, 0.1)

    def test_linear_variance(self):
        s = DenoiseSchedule(10, 0.1, 1.1)
        assert s.variance(0) == 0.1
        assert s.variance(10) == pytest.approx(1.1)
        assert s.variance(5) == pytest.approx(0.6)

    def test_out_of_range_step(self):
        with pytest.raises(ValueError):
            denoise_batch(DenoiseSchedule(10), 11, np.zeros((2, 2)), 0)

    def test_vanishing_noise(self):
        clean = np.random.default_rng(0).normal(size=(50, 4))
        noisy, _ = denoise_batch(DenoiseSchedule(5, 1e-12, 1e-12), 3, clean, 1)
        np.testing.assert_allclose(noisy, clean, atol=1e-5)

    def test_returns_the_noise_it_added(self):
        s = DenoiseSchedule(4, 0.2, 0.8)
        clean = np.ones((10, 3))
        noisy, eps = denoise_batch(s, 2, clean, 7)
        np.testing.assert_allclose(noisy, clean + math.sqrt(s.variance(2)) * eps, atol=1e-15)

    @pytest.mark.parametrize("t", [0, 7, 20])
    def test_monte_carlo_moments(self, t):
        s = DenoiseSchedule(20, 0.05, 2.0)
        n = 100_000
        clean = np.random.default_rng(1).normal(size=(n, 1))
        noisy, _ = denoise_batch(s, t, clean, 11)
        diff = (noisy - clean).ravel()
        var = s.variance(t)
        assert abs(diff.mean()) < 4 * math.sqrt(var) / math.sqrt(n)
        assert abs(diff.var() - var) < 0.05 * var

    def test_provider_reads_aux_schedules(self):
        scheds = [DenoiseSchedule(10, 0.1, 1.0), DenoiseSchedule(10, 0.5, 0.6)]
        suite = generate_suite(0, 8, 2, kinds=["regression", "denoising", "denoising"], class_counts=1,
                               noise_schedules=scheds, samples=50)
        provider = suite.noise_variance_provider()
        assert provider(4) == [scheds[0].variance(4), scheds[1].variance(4)]
        assert provider(11) == provider(0)


def test_text_format_roundtrip():
    scheds = [DenoiseSchedule(9, 0.1, 0.4)]
    suite = generate_suite(5, 8, 2, kinds=["classification", "regression", "denoising"], class_counts=[3, 2, 1],
                           noise_schedules=scheds, samples=40)
    text = dump_suite(suite)
    assert text.startswith("# mt2st-suite v1\n")
    again = load_suite(text)
    assert again.input_dim == suite.input_dim and again.seed == suite.seed
    for a, b in zip(suite.tasks, again.tasks):
        assert a.spec == b.spec
        for split in ("train", "validation"):
            np.testing.assert_array_equal(a.view(split)[0], b.view(split)[0])
            np.testing.assert_array_equal(a.view(split)[1], b.view(split)[1])
    assert dump_suite(again) == text


def _train_steps(params, X, y, ks, kind, steps, lr, freeze_encoder=False):
    rng = np.random.default_rng(0)
    for _ in range(steps):
        idx = rng.integers(0, len(X), 32)
        grads = [kernel.backward(params, kernel.forward(params, X[idx]), k, y[k][idx], kind) for k in ks]
        eff = combine(grads[0], grads[1:], [1.0] * (len(grads) - 1))
        if freeze_encoder:
            eff.encoder = [kernel.Layer(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in eff.encoder]
        params = sgd_step(params, eff, lr)
    return params


def test_aux_pretraining_helps_primary_when_related():
    wins = 0
    for seed in range(10):
        suite = generate_suite(seed, 16, 2, rho=0.95, samples=1200, kinds=REG3, class_counts=3)
        X = suite.primary.X_train
        ys = [t.y_train for t in suite.tasks]
        init = kernel.init_params(16, [8], suite.output_dims, seed=seed)
        pre = _train_steps(init, X, ys, [1, 2], "squared_error", 400, 0.05)
        # identical linear probes for the primary head on frozen encoders
        probe_pre = _train_steps(pre, X, ys, [0], "squared_error", 200, 0.05, freeze_encoder=True)
        probe_init = _train_steps(init, X, ys, [0], "squared_error", 200, 0.05, freeze_encoder=True)

        def val(p):
            c = kernel.forward(p, suite.primary.X_val)
            return kernel.task_loss(c, 0, suite.primary.y_val, "squared_error")

        wins += val(probe_pre) < val(probe_init)
    assert wins >= 7
