"""Objective functions with analytic gradients for federated experiments.

Each task exposes the same small surface: a global mean loss over all data,
per-device losses and gradients, and mini-batch gradients addressed by sample
indices within a device shard. Devices are indexed 0..N-1 here; the scheduler
layer uses 1-based device ids and converts.

The quadratic task is the analysis workhorse: every device shares one
curvature matrix and differs only in the linear term, so the optimum, the
smoothness constant, the gradient-dispersion bound, and the sampling-noise
level are all exact closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, SamplingError


class Task:
    """Common helpers; subclasses implement loss/grad on (device, batch)."""

    dim: int
    num_devices: int

    @property
    def shard_sizes(self) -> list[int]:
        raise NotImplementedError

    def loss(self, w: np.ndarray, device: Optional[int] = None,
             batch: Optional[np.ndarray] = None) -> float:
        raise NotImplementedError

    def grad(self, w: np.ndarray, device: Optional[int] = None,
             batch: Optional[np.ndarray] = None) -> np.ndarray:
        raise NotImplementedError

    def persample_grad_sq_mean(self, w: np.ndarray, device: int) -> float:
        """Mean over the shard of the squared single-sample gradient norm."""
        total = 0.0
        for i in range(self.shard_sizes[device]):
            gi = self.grad(w, device, np.array([i]))
            total += float(gi @ gi)
        return total / self.shard_sizes[device]

    def check_batch(self, device: Optional[int], batch) -> None:
        if device is None:
            if batch is not None:
                raise DataError("batches address a device shard; pass a device index")
            return
        if not 0 <= device < self.num_devices:
            raise DataError(f"device index {device} out of range [0, {self.num_devices})")
        if batch is not None:
            size = self.shard_sizes[device]
            b = np.asarray(batch)
            if b.size == 0 or b.min() < 0 or b.max() >= size:
                raise SamplingError(f"batch indices out of range for shard of size {size}")

    def sample_batch(self, device: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform without replacement within the shard."""
        size = self.shard_sizes[device]
        if size == 0:
            raise DataError(f"device {device} has an empty shard")
        if batch_size > size:
            raise SamplingError(
                f"batch_size {batch_size} exceeds shard size {size} of device {device}"
            )
        return rng.choice(size, size=batch_size, replace=False)


@dataclass
class QuadraticTask(Task):
    """Shared-curvature quadratics: per-sample loss (1/2)|w - A^-1 b|_A^2.

    ``sample_offsets`` has shape (N, D, m); sample (n, i) contributes the
    loss (1/2) w'Aw - b_{n,i}'w + (1/2) b_{n,i}'A^-1 b_{n,i}, whose gradient
    is Aw - b_{n,i}. Device and global losses are means, so the device
    gradient is Aw - mean_i b_{n,i} and the gradient dispersion across
    devices is exactly the spread of the per-device mean offsets.
    """

    hessian: np.ndarray
    sample_offsets: np.ndarray

    def __post_init__(self) -> None:
        self.hessian = np.asarray(self.hessian, dtype=float)
        self.sample_offsets = np.asarray(self.sample_offsets, dtype=float)
        if self.sample_offsets.ndim != 3:
            raise DataError("sample_offsets must have shape (devices, samples, dim)")
        self.num_devices, self._per_device, self.dim = self.sample_offsets.shape
        if self.hessian.shape != (self.dim, self.dim):
            raise DataError("hessian shape does not match offset dimension")
        if not np.allclose(self.hessian, self.hessian.T):
            raise DataError("hessian must be symmetric")
        self._hinv = np.linalg.inv(self.hessian)
        self._device_offsets = self.sample_offsets.mean(axis=1)  # (N, m)
        self._global_offset = self._device_offsets.mean(axis=0)
        # Per-sample constant making each sample loss >= 0 with minimum 0.
        self._sample_const = 0.5 * np.einsum(
            "ndi,ij,ndj->nd", self.sample_offsets, self._hinv, self.sample_offsets
        )

    @property
    def shard_sizes(self) -> list[int]:
        return [self._per_device] * self.num_devices

    @property
    def w_star(self) -> np.ndarray:
        return np.linalg.solve(self.hessian, self._global_offset)

    def _moments(self, device, batch):
        self.check_batch(device, batch)
        if device is None:
            return self._global_offset, float(self._sample_const.mean())
        if batch is None:
            return self._device_offsets[device], float(self._sample_const[device].mean())
        b = np.asarray(batch)
        return (
            self.sample_offsets[device, b].mean(axis=0),
            float(self._sample_const[device, b].mean()),
        )

    def loss(self, w, device=None, batch=None):
        offset, const = self._moments(device, batch)
        return float(0.5 * w @ self.hessian @ w - offset @ w + const)

    def grad(self, w, device=None, batch=None):
        offset, _ = self._moments(device, batch)
        return self.hessian @ w - offset

    def persample_grad_sq_mean(self, w, device):
        g = self.hessian @ w
        diffs = g[None, :] - self.sample_offsets[device]
        return float((diffs * diffs).sum(axis=1).mean())

    # Exact scenario constants, available because the structure is synthetic.

    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.hessian)[-1])

    def heterogeneity_sq(self) -> float:
        diffs = self._device_offsets - self._global_offset
        return float((diffs * diffs).sum(axis=1).max())

    def noise_sq(self) -> float:
        """Largest per-device mean squared deviation of sample gradients."""
        diffs = self.sample_offsets - self._device_offsets[:, None, :]
        return float((diffs * diffs).sum(axis=2).mean(axis=1).max())


def make_quadratic(
    num_devices: int,
    dim: int,
    heterogeneity: float,
    rng: np.random.Generator,
    *,
    samples_per_device: int = 32,
    sample_noise: float = 0.0,
    eig_range: tuple[float, float] = (1.0, 1.0),
) -> QuadraticTask:
    """Construct a shared-curvature quadratic with exact dispersion control.

    The per-device mean offsets are centered (so the global optimum is
    unaffected) and rescaled so the largest deviation norm equals
    ``heterogeneity`` exactly. Per-sample offsets add zero-mean noise scaled
    so each device's mean squared sample deviation equals sample_noise**2.
    """
    if dim < 1 or num_devices < 1:
        raise ConfigError("need dim >= 1 and num_devices >= 1")
    if heterogeneity < 0 or sample_noise < 0:
        raise ConfigError("heterogeneity and sample_noise must be >= 0")
    lo, hi = eig_range
    if not 0 < lo <= hi:
        raise ConfigError(f"eig_range must satisfy 0 < lo <= hi, got {eig_range}")

    if dim == 1:
        basis = np.array([[1.0]])
    else:
        basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    hessian = basis @ np.diag(np.linspace(lo, hi, dim)) @ basis.T
    hessian = 0.5 * (hessian + hessian.T)

    center = rng.normal(size=dim)
    if heterogeneity > 0 and num_devices > 1:
        offsets = rng.normal(size=(num_devices, dim))
        offsets -= offsets.mean(axis=0)
        norms = np.linalg.norm(offsets, axis=1)
        if norms.max() == 0:
            raise ConfigError("degenerate offsets; try another rng state")
        offsets *= heterogeneity / norms.max()
    else:
        offsets = np.zeros((num_devices, dim))

    device_means = center + offsets
    samples = np.repeat(device_means[:, None, :], samples_per_device, axis=1)
    if sample_noise > 0:
        if samples_per_device < 2:
            raise ConfigError("sample_noise > 0 needs samples_per_device >= 2")
        noise = rng.normal(size=samples.shape)
        noise -= noise.mean(axis=1, keepdims=True)
        rms = np.sqrt((noise * noise).sum(axis=2).mean(axis=1))  # (N,)
        samples = samples + noise * (sample_noise / rms)[:, None, None]
    return QuadraticTask(hessian=hessian, sample_offsets=samples)


def _softmax_logits(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    total = expd.sum(axis=1, keepdims=True)
    return expd / total, shifted - np.log(total)


class ShardedTask(Task):
    """Base for tasks over explicit per-device (features, labels) shards."""

    def __init__(self, features, labels, num_classes: int):
        if not features or len(features) != len(labels):
            raise DataError("need one (features, labels) pair per device")
        self.features = [np.asarray(x, dtype=float) for x in features]
        self.labels = [np.asarray(y, dtype=np.int64) for y in labels]
        dims = {x.shape[1] for x in self.features}
        if len(dims) != 1:
            raise DataError("all shards must share the feature dimension")
        self.feature_dim = dims.pop()
        self.num_classes = num_classes
        self.num_devices = len(self.features)
        for x, y in zip(self.features, self.labels):
            if x.shape[0] != y.shape[0]:
                raise DataError("features and labels disagree on shard size")
            if y.size and (y.min() < 0 or y.max() >= num_classes):
                raise DataError("label outside [0, num_classes)")
        self._all_x = np.concatenate(self.features, axis=0)
        self._all_y = np.concatenate(self.labels, axis=0)

    @property
    def shard_sizes(self) -> list[int]:
        return [x.shape[0] for x in self.features]

    def _select(self, device, batch):
        self.check_batch(device, batch)
        if device is None:
            return self._all_x, self._all_y
        x, y = self.features[device], self.labels[device]
        if batch is None:
            return x, y
        b = np.asarray(batch)
        return x[b], y[b]

    def accuracy(self, w, device=None) -> float:
        x, y = self._select(device, None)
        return float((self.predict(x, w) == y).mean())

    def predict(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SoftmaxRegressionTask(ShardedTask):
    """Multinomial logistic regression; params are (C, d) weights then C biases."""

    def __init__(self, features, labels, num_classes: int):
        super().__init__(features, labels, num_classes)
        self.dim = num_classes * self.feature_dim + num_classes

    def _unpack(self, w: np.ndarray):
        c, d = self.num_classes, self.feature_dim
        return w[: c * d].reshape(c, d), w[c * d:]

    def loss(self, w, device=None, batch=None):
        x, y = self._select(device, batch)
        weights, bias = self._unpack(w)
        _, log_probs = _softmax_logits(x @ weights.T + bias)
        return float(-log_probs[np.arange(len(y)), y].mean())

    def grad(self, w, device=None, batch=None):
        x, y = self._select(device, batch)
        weights, bias = self._unpack(w)
        probs, _ = _softmax_logits(x @ weights.T + bias)
        probs[np.arange(len(y)), y] -= 1.0
        probs /= len(y)
        return np.concatenate([(probs.T @ x).ravel(), probs.sum(axis=0)])

    def predict(self, x, w):
        weights, bias = self._unpack(w)
        return (x @ weights.T + bias).argmax(axis=1)


class MlpTask(ShardedTask):
    """Two-layer perceptron (tanh hidden layer) with cross-entropy loss."""

    def __init__(self, features, labels, num_classes: int, hidden: int = 32):
        super().__init__(features, labels, num_classes)
        self.hidden = hidden
        d, h, c = self.feature_dim, hidden, num_classes
        self._shapes = [(h, d), (h,), (c, h), (c,)]
        self.dim = sum(int(np.prod(s)) for s in self._shapes)

    def _unpack(self, w: np.ndarray):
        parts, at = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            parts.append(w[at: at + size].reshape(shape))
            at += size
        return parts

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        d, h = self.feature_dim, self.hidden
        w1 = rng.normal(scale=1.0 / np.sqrt(d), size=(h, d))
        w2 = rng.normal(scale=1.0 / np.sqrt(h), size=(self.num_classes, h))
        return np.concatenate(
            [w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(self.num_classes)]
        )

    def _forward(self, x, w):
        w1, b1, w2, b2 = self._unpack(w)
        hidden = np.tanh(x @ w1.T + b1)
        return hidden, hidden @ w2.T + b2

    def loss(self, w, device=None, batch=None):
        x, y = self._select(device, batch)
        _, logits = self._forward(x, w)
        _, log_probs = _softmax_logits(logits)
        return float(-log_probs[np.arange(len(y)), y].mean())

    def grad(self, w, device=None, batch=None):
        x, y = self._select(device, batch)
        w1, b1, w2, b2 = self._unpack(w)
        hidden = np.tanh(x @ w1.T + b1)
        probs, _ = _softmax_logits(hidden @ w2.T + b2)
        probs[np.arange(len(y)), y] -= 1.0
        probs /= len(y)
        grad_w2 = probs.T @ hidden
        grad_b2 = probs.sum(axis=0)
        back = (probs @ w2) * (1.0 - hidden * hidden)
        return np.concatenate(
            [(back.T @ x).ravel(), back.sum(axis=0), grad_w2.ravel(), grad_b2]
        )

    def predict(self, x, w):
        _, logits = self._forward(x, w)
        return logits.argmax(axis=1)
