"""Reference data-parallel trainer: a bias-free ReLU MLP with softmax cross-entropy.

Weights of layer ``l`` have shape ``(rows, cols)`` = (output, input), so the
forward step is ``z = x @ W.T``.  The backward pass reports, per layer and
top-down, the per-sample output gradients ``u`` (K x M) and inputs ``v``
(K x N); the summed weight gradient of the batch is ``u.T @ v``.

Updates follow the additive convention ``theta <- theta + lr * step`` where
``step`` is the negated loss gradient.  Workers scale their per-sample
factors by ``-lr / (K * P)`` so that summing every worker's contribution is a
mean-gradient step on the global batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .modelspec import ModelSpec


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    classes: int

    def __len__(self) -> int:
        return self.x.shape[0]


def make_synthetic_dataset(seed: int, n: int, input_dim: int, classes: int,
                           separation: float = 5.0) -> Dataset:
    """Labeled Gaussian mixture with unit-variance clusters.

    Class means sit on (near-)orthogonal directions so every pair of means is
    ``separation`` standard deviations apart.
    """
    if n < classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    if classes <= input_dim:
        q, _ = np.linalg.qr(rng.standard_normal((input_dim, classes)))
        means = q.T * (separation / np.sqrt(2.0))
    else:
        d = rng.standard_normal((classes, input_dim))
        means = d / np.linalg.norm(d, axis=1, keepdims=True) * (separation / np.sqrt(2.0))
    y = rng.permutation(np.arange(n) % classes)
    x = means[y] + rng.standard_normal((n, input_dim))
    return Dataset(x.astype(np.float32), y.astype(np.int64), classes)


def parse_dataset_arg(arg: str, seed: int) -> Dataset:
    """``synthetic:<n>:<dim>:<classes>``"""
    parts = arg.split(":")
    if len(parts) != 4 or parts[0] != "synthetic":
        raise ValueError(f"dataset {arg!r} is not 'synthetic:<n>:<dim>:<classes>'")
    n, dim, classes = (int(p) for p in parts[1:])
    return make_synthetic_dataset(seed, n, dim, classes)


class WorkerData:
    """Disjoint partition of a dataset for one worker, reshuffled every epoch."""

    def __init__(self, data: Dataset, worker: int, n_workers: int, batch_size: int, seed: int):
        self.data = data
        self.indices = np.arange(worker, len(data), n_workers)
        if len(self.indices) < batch_size:
            raise ValueError(f"worker {worker} partition ({len(self.indices)}) smaller than batch {batch_size}")
        self.batch_size = batch_size
        self.seed = seed + worker
        self.per_epoch = len(self.indices) // batch_size
        self._epoch = -1
        self._order: np.ndarray | None = None

    def batch(self, iteration: int) -> tuple[np.ndarray, np.ndarray]:
        epoch, i = divmod(iteration, self.per_epoch)
        if epoch != self._epoch:
            rng = np.random.default_rng((self.seed, epoch))
            self._order = self.indices[rng.permutation(len(self.indices))]
            self._epoch = epoch
        idx = self._order[i * self.batch_size:(i + 1) * self.batch_size]
        return self.data.x[idx], self.data.y[idx]


def partition_data(data: Dataset, n_workers: int, batch_size: int, seed: int) -> list[WorkerData]:
    return [WorkerData(data, p, n_workers, batch_size, seed) for p in range(n_workers)]


@dataclass
class ForwardContext:
    inputs: list[np.ndarray]  # input of each layer
    preacts: list[np.ndarray]  # pre-activation output of each layer
    probs: np.ndarray
    labels: np.ndarray
    loss: float


@dataclass
class LayerGrad:
    layer: int
    u: np.ndarray  # (K, M) per-sample d loss / d output
    v: np.ndarray  # (K, N) per-sample input

    @property
    def dense(self) -> np.ndarray:
        """Summed loss gradient of the batch w.r.t. the layer weights."""
        return self.u.T @ self.v


def init_weights(model: ModelSpec, seed: int, dtype=np.float32) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    out = []
    for layer in model.layers:
        if not layer.has_shape:
            raise ValueError(f"layer {layer.name!r} has no dense shape; the reference engine cannot run it")
        bound = 1.0 / np.sqrt(layer.cols)
        out.append(rng.uniform(-bound, bound, size=(layer.rows, layer.cols)).astype(dtype))
    for lower, upper in zip(model.layers, model.layers[1:]):
        if upper.cols != lower.rows:
            raise ValueError(f"layer {upper.name!r} expects {upper.cols} inputs, "
                             f"{lower.name!r} produces {lower.rows}")
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class MLP:
    def __init__(self, model: ModelSpec, seed: int = 0, dtype=np.float32, weights=None):
        self.model = model
        self.dtype = np.dtype(dtype)
        self.weights = init_weights(model, seed, dtype) if weights is None else [
            np.array(w, dtype=dtype) for w in weights]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray, y: np.ndarray) -> ForwardContext:
        if x.ndim != 2 or x.shape[1] != self.weights[0].shape[1]:
            raise ValueError(f"batch shape {x.shape} does not match input dim {self.weights[0].shape[1]}")
        if y.shape[0] != x.shape[0]:
            raise ValueError("labels and inputs disagree on batch size")
        h = x.astype(self.dtype, copy=False)
        inputs, preacts = [], []
        for l, w in enumerate(self.weights):
            inputs.append(h)
            z = h @ w.T
            preacts.append(z)
            h = np.maximum(z, 0) if l < self.num_layers - 1 else z
        probs = softmax(preacts[-1])
        picked = probs[np.arange(len(y)), y]
        loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(self.dtype).tiny))))
        return ForwardContext(inputs, preacts, probs, y, loss)

    def backward(self, ctx: ForwardContext,
                 callback: Callable[[LayerGrad], None] | None = None) -> list[LayerGrad]:
        """Top-down backward pass; ``callback`` fires right after each layer's step.

        A layer's step includes propagating the error to the layer below, so
        the callback may hand the layer's weights to another thread.
        """
        K = ctx.labels.shape[0]
        delta = ctx.probs.copy()
        delta[np.arange(K), ctx.labels] -= 1
        grads: list[LayerGrad | None] = [None] * self.num_layers
        for l in range(self.num_layers - 1, -1, -1):
            g = LayerGrad(l, delta, ctx.inputs[l])
            if l > 0:
                delta = (delta @ self.weights[l]) * (ctx.preacts[l - 1] > 0)
            grads[l] = g
            if callback is not None:
                callback(g)
        return grads  # type: ignore[return-value]

    def loss_and_grads(self, x, y) -> tuple[float, list[np.ndarray]]:
        """Mean loss and the gradient of the mean loss for every layer."""
        ctx = self.forward(x, y)
        K = x.shape[0]
        return ctx.loss, [g.dense / K for g in self.backward(ctx)]

    def accuracy(self, x, y) -> float:
        h = x.astype(self.dtype, copy=False)
        for l, w in enumerate(self.weights):
            h = h @ w.T
            if l < self.num_layers - 1:
                h = np.maximum(h, 0)
        return float(np.mean(np.argmax(h, axis=1) == y))


def step_coefficient(lr: float, batch_size: int, n_workers: int, dtype=np.float32):
    return np.asarray(-lr / (batch_size * n_workers), dtype=dtype)


def descent_step(u: np.ndarray, v: np.ndarray, coef) -> np.ndarray:
    """``(coef * u).T @ v``: the additive update one batch contributes."""
    return (u * coef).T @ v


def sgd_step(params, grads, lr: float):
    """``params + lr * grads`` (grads are descent directions). Works on arrays or lists."""
    if isinstance(params, np.ndarray):
        return params + lr * grads
    return [p + lr * g for p, g in zip(params, grads)]


@dataclass
class OracleResult:
    losses: list[float] = field(default_factory=list)
    snapshots: list[list[np.ndarray]] = field(default_factory=list)
    weights: list[np.ndarray] | None = None


def train_oracle(model: ModelSpec, data: Dataset, n_workers: int, lr: float, iterations: int,
                 seed: int, *, keep_snapshots: bool = True) -> OracleResult:
    """Single-process reference: each iteration takes one step on the concatenation of
    every worker's batch, with the gradient summed over all samples."""
    net = MLP(model, seed)
    parts = partition_data(data, n_workers, model.batch_size, seed)
    coef = step_coefficient(lr, model.batch_size, n_workers)
    res = OracleResult()
    for t in range(iterations):
        batches = [p.batch(t) for p in parts]
        x = np.concatenate([b[0] for b in batches])
        y = np.concatenate([b[1] for b in batches])
        ctx = net.forward(x, y)
        res.losses.append(ctx.loss)
        for g in net.backward(ctx):
            net.weights[g.layer] += descent_step(g.u, g.v, coef)
        if keep_snapshots:
            res.snapshots.append([w.copy() for w in net.weights])
    res.weights = net.weights
    return res


def train_distributed(model, cluster, plan=None, epochs: int | None = None, **kw):
    """Run the full synchronization stack; see :func:`poseidon.runtime.train_distributed`."""
    from .runtime import train_distributed as _run

    return _run(model, cluster, plan=plan, epochs=epochs, **kw)
