"""Objective correctness: closed forms, brute-force evaluation, gradients."""

import numpy as np
import pytest

from tdmafl import (
    ConfigError,
    DataError,
    MlpTask,
    SamplingError,
    SoftmaxRegressionTask,
    make_clustered_dataset,
    make_quadratic,
    partition_iid,
    shard_arrays,
)
from util import central_difference, relative_error


@pytest.fixture()
def quad():
    return make_quadratic(4, 5, 1.5, np.random.default_rng(0),
                          samples_per_device=12, sample_noise=0.7,
                          eig_range=(0.5, 2.0))


@pytest.fixture()
def softmax_task():
    data = make_clustered_dataset(3, 6, 40, np.random.default_rng(1))
    shards = partition_iid(data, 4, 25, np.random.default_rng(2))
    return SoftmaxRegressionTask(*shard_arrays(shards), num_classes=3)


@pytest.fixture()
def mlp_task():
    data = make_clustered_dataset(3, 6, 40, np.random.default_rng(3))
    shards = partition_iid(data, 4, 25, np.random.default_rng(4))
    return MlpTask(*shard_arrays(shards), num_classes=3, hidden=7)


class TestQuadratic:
    def test_optimum_solves_normal_equations(self, quad):
        # Independent route: explicit inverse times the mean linear term.
        b_bar = quad.sample_offsets.mean(axis=(0, 1))
        w_direct = np.linalg.inv(quad.hessian) @ b_bar
        assert np.linalg.norm(quad.w_star - w_direct) < 1e-10
        assert np.linalg.norm(quad.grad(quad.w_star)) < 1e-10

    def test_loss_at_optimum_is_noise_floor(self):
        task = make_quadratic(3, 4, 1.0, np.random.default_rng(5),
                              sample_noise=0.0)
        # Heterogeneity without sample noise: per-device minima differ from
        # the global optimum, so the global loss there is positive but the
        # gradient vanishes; with zero heterogeneity the loss is exactly 0.
        homog = make_quadratic(3, 4, 0.0, np.random.default_rng(5), sample_noise=0.0)
        assert homog.loss(homog.w_star) == pytest.approx(0.0, abs=1e-12)
        assert np.linalg.norm(task.grad(task.w_star)) < 1e-10

    def test_brute_force_loss_and_grad(self, quad):
        rng = np.random.default_rng(6)
        hinv = np.linalg.inv(quad.hessian)
        for _ in range(5):
            w = rng.normal(size=quad.dim)
            # Sample-by-sample evaluation, no shared-moment shortcuts.
            losses, grads = [], []
            for n in range(quad.num_devices):
                for i in range(quad.shard_sizes[n]):
                    b = quad.sample_offsets[n, i]
                    losses.append(0.5 * w @ quad.hessian @ w - b @ w + 0.5 * b @ hinv @ b)
                    grads.append(quad.hessian @ w - b)
            assert abs(quad.loss(w) - np.mean(losses)) < 1e-10
            assert np.linalg.norm(quad.grad(w) - np.mean(grads, axis=0)) < 1e-10

    def test_device_loss_is_shard_mean(self, quad):
        w = np.random.default_rng(7).normal(size=quad.dim)
        per_device = [quad.loss(w, n) for n in range(quad.num_devices)]
        assert quad.loss(w) == pytest.approx(np.mean(per_device), rel=1e-12)

    def test_exact_heterogeneity(self, quad):
        w = np.random.default_rng(8).normal(size=quad.dim)
        g = quad.grad(w)
        measured = max(
            float(np.sum((g - quad.grad(w, n)) ** 2)) for n in range(quad.num_devices)
        )
        assert measured == pytest.approx(quad.heterogeneity_sq(), rel=1e-12)
        assert np.sqrt(quad.heterogeneity_sq()) == pytest.approx(1.5, rel=1e-12)

    def test_homogeneous_when_target_zero(self):
        task = make_quadratic(5, 3, 0.0, np.random.default_rng(9))
        assert task.heterogeneity_sq() == 0.0
        # Sample noise is centered per device, so dispersion stays at the
        # float-cancellation floor.
        noisy = make_quadratic(5, 3, 0.0, np.random.default_rng(9), sample_noise=0.2)
        assert noisy.heterogeneity_sq() < 1e-28

    def test_smoothness_is_top_eigenvalue(self, quad):
        assert quad.smoothness() == pytest.approx(2.0, rel=1e-12)

    def test_noise_level_is_exact(self, quad):
        assert np.sqrt(quad.noise_sq()) == pytest.approx(0.7, rel=1e-9)

    def test_batch_moments(self, quad):
        w = np.random.default_rng(10).normal(size=quad.dim)
        batch = np.array([0, 3, 5])
        manual = np.mean(
            [quad.hessian @ w - quad.sample_offsets[2, i] for i in batch], axis=0
        )
        assert np.allclose(quad.grad(w, 2, batch), manual, atol=1e-12)

    def test_rejects_bad_batches(self, quad):
        w = np.zeros(quad.dim)
        with pytest.raises(SamplingError):
            quad.grad(w, 0, np.array([99]))
        with pytest.raises(DataError):
            quad.grad(w, 9)
        with pytest.raises(SamplingError):
            quad.sample_batch(0, 1000, np.random.default_rng(0))

    def test_rejects_bad_construction(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            make_quadratic(2, 3, -1.0, rng)
        with pytest.raises(ConfigError):
            make_quadratic(2, 3, 1.0, rng, eig_range=(2.0, 1.0))


class TestGradientChecks:
    """Analytic gradients against the central finite-difference oracle."""

    def _check(self, task, points, rng, tol=1e-5):
        worst = 0.0
        for _ in range(points):
            w = rng.normal(scale=0.8, size=task.dim)
            analytic = task.grad(w)
            numeric = central_difference(lambda v: task.loss(v), w)
            worst = max(worst, relative_error(analytic, numeric))
            dev = int(rng.integers(task.num_devices))
            analytic_d = task.grad(w, dev)
            numeric_d = central_difference(lambda v: task.loss(v, dev), w)
            worst = max(worst, relative_error(analytic_d, numeric_d))
        assert worst <= tol

    def test_quadratic(self, quad):
        self._check(quad, 10, np.random.default_rng(20))

    def test_softmax(self, softmax_task):
        self._check(softmax_task, 10, np.random.default_rng(21))

    def test_mlp(self, mlp_task):
        self._check(mlp_task, 10, np.random.default_rng(22))

    def test_batch_gradients_too(self, softmax_task):
        rng = np.random.default_rng(23)
        w = rng.normal(size=softmax_task.dim)
        batch = softmax_task.sample_batch(1, 5, rng)
        analytic = softmax_task.grad(w, 1, batch)
        numeric = central_difference(lambda v: softmax_task.loss(v, 1, batch), w)
        assert relative_error(analytic, numeric) <= 1e-5


class TestSoftmax:
    def test_uniform_predictor_loss(self):
        # Balanced binary labels at zero parameters: loss is ln 2.
        x = np.random.default_rng(30).normal(size=(40, 3))
        y = np.array([0, 1] * 20)
        task = SoftmaxRegressionTask([x], [y], num_classes=2)
        assert task.loss(np.zeros(task.dim)) == pytest.approx(np.log(2.0), rel=1e-12)

    def test_global_loss_is_weighted_shard_mean(self, softmax_task):
        w = np.random.default_rng(31).normal(size=softmax_task.dim)
        sizes = softmax_task.shard_sizes
        weighted = sum(
            sz * softmax_task.loss(w, n) for n, sz in enumerate(sizes)
        ) / sum(sizes)
        assert softmax_task.loss(w) == pytest.approx(weighted, rel=1e-12)

    def test_accuracy_improves_with_training(self, softmax_task):
        w = np.zeros(softmax_task.dim)
        before = softmax_task.accuracy(w)
        for _ in range(200):
            w = w - 0.5 * softmax_task.grad(w)
        assert softmax_task.accuracy(w) > before

    def test_label_range_enforced(self):
        with pytest.raises(DataError):
            SoftmaxRegressionTask([np.zeros((2, 2))], [np.array([0, 5])], num_classes=3)


class TestMlp:
    def test_init_shape_and_loss_finite(self, mlp_task):
        w = mlp_task.init_params(np.random.default_rng(40))
        assert w.shape == (mlp_task.dim,)
        assert np.isfinite(mlp_task.loss(w))

    def test_training_reduces_loss(self, mlp_task):
        w = mlp_task.init_params(np.random.default_rng(41))
        start = mlp_task.loss(w)
        for _ in range(100):
            w = w - 0.5 * mlp_task.grad(w)
        assert mlp_task.loss(w) < start


class TestPersampleMoment:
    def test_matches_generic_loop(self, quad):
        w = np.random.default_rng(50).normal(size=quad.dim)
        fast = quad.persample_grad_sq_mean(w, 1)
        slow = sum(
            float(np.sum(quad.grad(w, 1, np.array([i])) ** 2))
            for i in range(quad.shard_sizes[1])
        ) / quad.shard_sizes[1]
        assert fast == pytest.approx(slow, rel=1e-12)

    def test_sharded_task_default_path(self, softmax_task):
        w = np.random.default_rng(51).normal(size=softmax_task.dim)
        val = softmax_task.persample_grad_sq_mean(w, 0)
        assert val > 0 and np.isfinite(val)
