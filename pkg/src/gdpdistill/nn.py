"""Small fully-connected classifiers with hand-written reverse-mode gradients.

A :class:`MLP` is a stack of feature layers followed by an optional linear
classification head. The output of the last feature layer is the representation
used for feature matching; the head output is the logit vector used by the expert.

Gradients are computed layer by layer. :func:`backward` returns gradients with
respect to both the parameters and the inputs, because distillation optimises the
inputs while training optimises the parameters. Per-example parameter gradients
(needed for DP-SGD clipping) are materialised explicitly; that is fine for the
batch sizes and widths used here.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .errors import ContractError, DomainError, ParseError, ShapeError

Activation = Literal["relu", "linear"]
Output = Literal["features", "logits"]

CHECKPOINT_MAGIC = b"GDPMLP\x00\x01"
CHECKPOINT_VERSION = 1
_ACTIVATION_CODES = {"relu": 0, "linear": 1}


@dataclass
class MLP:
    """Weights are stored as (fan_in, fan_out) so a batch forward pass is ``x @ W + b``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    n_feature_layers: int
    activation: Activation = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases must have the same number of layers")
        if not 0 <= self.n_feature_layers <= len(self.weights):
            raise ShapeError("n_feature_layers out of range")
        if len(self.weights) - self.n_feature_layers > 1:
            raise ShapeError("at most one head layer may follow the feature layers")
        if self.activation not in _ACTIVATION_CODES:
            raise DomainError(f"unknown activation {self.activation!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"layer {i}: fan-in {w.shape[0]} != previous fan-out")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        if self.n_feature_layers == 0:
            return self.input_dim
        return self.weights[self.n_feature_layers - 1].shape[1]

    @property
    def has_head(self) -> bool:
        return len(self.weights) > self.n_feature_layers

    @property
    def num_classes(self) -> int:
        if not self.has_head:
            raise ContractError("model has no classification head")
        return self.weights[-1].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MLP":
        return MLP(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.n_feature_layers,
            self.activation,
        )

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.extend((w.ravel(), b.ravel()))
        return np.concatenate(parts)

    def with_flat(self, vector: np.ndarray) -> "MLP":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {vector.shape}")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vector[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(vector[pos:pos + b.size].copy())
            pos += b.size
        return MLP(ws, bs, self.n_feature_layers, self.activation)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (*self.weights, *self.biases))


def init_mlp(
    input_dim: int,
    hidden: Sequence[int] = (64, 64),
    num_classes: int | None = None,
    rng: np.random.Generator | None = None,
    activation: Activation = "relu",
) -> MLP:
    """He-initialised MLP. ``num_classes=None`` builds a feature extractor without a head."""
    rng = rng if rng is not None else np.random.default_rng(0)
    dims = [int(input_dim), *map(int, hidden)]
    if num_classes is not None:
        dims.append(int(num_classes))
    if len(dims) < 2:
        raise ShapeError("model needs at least one layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases, len(hidden), activation)


def identity_extractor(dim: int) -> MLP:
    """A single linear feature layer initialised to the identity map."""
    return MLP([np.eye(dim)], [np.zeros(dim)], 1, "linear")


# ---------------------------------------------------------------------------
# Forward and backward


@dataclass
class ForwardCache:
    output: Output
    out_shape: tuple[int, ...] = ()
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activations


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.extend((w.ravel(), b.ravel()))
        return np.concatenate(parts)


def _as_batch(model: MLP, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected inputs of dimension {model.input_dim}, got shape {x.shape}")
    return x, single


def _act(model: MLP, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if model.activation == "relu" else z


def forward(model: MLP, x: np.ndarray, output: Output = "logits") -> tuple[np.ndarray, ForwardCache]:
    """Batch forward pass returning the requested output and the cache for :func:`backward`."""
    if output == "logits" and not model.has_head:
        raise ContractError("model has no classification head")
    n_layers = model.n_feature_layers + (1 if output == "logits" else 0)
    cache = ForwardCache(output)
    h = x
    for i in range(n_layers):
        cache.inputs.append(h)
        z = h @ model.weights[i] + model.biases[i]
        cache.pre.append(z)
        h = _act(model, z) if i < model.n_feature_layers else z
    cache.out_shape = h.shape
    return h, cache


def forward_features(model: MLP, x) -> np.ndarray:
    """Penultimate representation; accepts one vector or a batch."""
    xb, single = _as_batch(model, x)
    out, _ = forward(model, xb, "features")
    return out[0] if single else out


def forward_logits(model: MLP, x) -> np.ndarray:
    xb, single = _as_batch(model, x)
    out, _ = forward(model, xb, "logits")
    return out[0] if single else out


def backward(model: MLP, cache: ForwardCache, grad_output: np.ndarray, per_example: bool = False) -> Gradients:
    """Pull ``grad_output`` (d loss / d output, one row per example) back through the network.

    With ``per_example=True`` parameter gradients keep a leading batch axis instead of
    being summed over the batch.
    """
    delta = np.asarray(grad_output, dtype=np.float64)
    n_layers = len(cache.inputs)
    if delta.shape != cache.out_shape:
        raise ShapeError(f"gradient shape {delta.shape} does not match the forward output")
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in reversed(range(n_layers)):
        if i < model.n_feature_layers and model.activation == "relu":
            delta = delta * (cache.pre[i] > 0)
        a = cache.inputs[i]
        if per_example:
            gw[i] = np.einsum("bi,bo->bio", a, delta)
            gb[i] = delta.copy()
        else:
            gw[i] = a.T @ delta
            gb[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i].T
    return Gradients(gw, gb, delta)


def value_and_grad(
    model: MLP,
    x: np.ndarray,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    output: Output = "logits",
) -> tuple[float, Gradients]:
    """Evaluate a scalar loss of the model output and its gradients.

    ``loss_fn`` maps the output batch to ``(loss, d loss / d output)``.
    """
    xb, _ = _as_batch(model, x)
    out, cache = forward(model, xb, output)
    loss, g_out = loss_fn(out)
    if np.ndim(loss) != 0:
        raise ContractError(f"loss must be a scalar, got shape {np.shape(loss)}")
    return float(loss), backward(model, cache, g_out)


# ---------------------------------------------------------------------------
# Losses on logits. Each returns (value, gradient w.r.t. logits).


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    lp = log_softmax(logits)
    loss = -lp[np.arange(n), labels].mean()
    grad = np.exp(lp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def kl_to_target(logits: np.ndarray, target_logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean KL(softmax(logits) || softmax(target_logits)) over the batch; target is constant."""
    logits = np.atleast_2d(logits)
    target_logits = np.broadcast_to(target_logits, logits.shape)
    n = logits.shape[0]
    lp = log_softmax(logits)
    p = np.exp(lp)
    ratio = lp - log_softmax(target_logits)
    kl = (p * ratio).sum(axis=1)
    grad = p * (ratio - kl[:, None])
    return float(kl.mean()), grad / n


def accuracy(model: MLP, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise DomainError("cannot compute accuracy on an empty set")
    return float(np.mean(forward_logits(model, x).argmax(axis=1) == np.asarray(y)))


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class GradClipSpec:
    """Per-example clip norm C, noise multiplier sigma and (expected) batch size b."""

    clip_norm: float
    noise_multiplier: float
    batch_size: int

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise DomainError(f"clip norm must be positive, got {self.clip_norm!r}")
        if not self.noise_multiplier >= 0:
            raise DomainError(f"noise multiplier must be non-negative, got {self.noise_multiplier!r}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise DomainError(f"batch size must be a positive integer, got {self.batch_size!r}")


def per_example_grads(model: MLP, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flattened cross-entropy gradient of every example, shape (batch, n_params), and per-example losses."""
    out, cache = forward(model, x, "logits")
    lp = log_softmax(out)
    n = len(y)
    losses = -lp[np.arange(n), y]
    g_out = np.exp(lp)
    g_out[np.arange(n), y] -= 1.0
    g = backward(model, cache, g_out, per_example=True)
    parts = []
    for w, b in zip(g.weights, g.biases):
        parts.extend((w.reshape(n, -1), b.reshape(n, -1)))
    return np.concatenate(parts, axis=1), losses


def clip_rows(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale each row by min(1, C / ||row||)."""
    norms = np.linalg.norm(grads, axis=1, keepdims=True)
    scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return grads * scale


def _noisy_clipped_gradient(model, x, y, spec: GradClipSpec, rng) -> np.ndarray:
    if len(y):
        g, _ = per_example_grads(model, x, y)
        total = clip_rows(g, spec.clip_norm).sum(axis=0)
    else:
        total = np.zeros(model.n_params)
    noise = rng.standard_normal(model.n_params) if spec.noise_multiplier > 0 else 0.0
    return (total + spec.noise_multiplier * spec.clip_norm * noise) / spec.batch_size


def dp_sgd_step(
    model: MLP, x: np.ndarray, y: np.ndarray, spec: GradClipSpec, lr: float, rng: np.random.Generator
) -> MLP:
    """One sanitized step: clip each example's gradient to C, average over b, add N(0, (sigma C / b)^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise DomainError("DP-SGD step needs a non-empty batch")
    g_hat = _noisy_clipped_gradient(model, x, y, spec, rng)
    return model.with_flat(model.flat() - lr * g_hat)


def sgd_step(model: MLP, x: np.ndarray, y: np.ndarray, lr: float) -> tuple[MLP, float]:
    loss, g = value_and_grad(model, x, lambda z: cross_entropy(z, y))
    return model.with_flat(model.flat() - lr * g.flat()), loss


@dataclass
class TrainResult:
    model: MLP
    trace: list[tuple[int, float, float]]  # (epoch, loss, accuracy) on the training data
    steps: int = 0

    def trace_csv(self) -> str:
        lines = ["epoch,loss,accuracy"]
        lines += [f"{e},{loss!r},{acc!r}" for e, loss, acc in self.trace]
        return "\n".join(lines) + "\n"


def dp_steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, int(round(n / batch_size)))


def _epoch_metrics(model: MLP, x, y) -> tuple[float, float]:
    logits = forward_logits(model, x)
    loss, _ = cross_entropy(logits, y)
    return loss, float(np.mean(logits.argmax(axis=1) == y))


def train(
    model: MLP,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 64,
    clip: GradClipSpec | None = None,
    fixed_size_batches: bool = False,
    on_read: Callable[[int], None] | None = None,
    trace_data: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainResult:
    """Plain minibatch SGD over shuffled epochs, or DP-SGD when ``clip`` is given.

    DP-SGD draws each batch by Poisson sampling at rate b/n (``clip.batch_size`` is b)
    and runs round(n/b) steps per epoch. ``fixed_size_batches=True`` switches to
    uniformly drawn batches of exactly b examples, which the subsampled-Gaussian
    accounting does not strictly cover. ``on_read`` is called with the number of
    examples touched at every step, for access auditing.

    The per-epoch trace is measured on ``trace_data`` when given, else on the
    training data (which, for DP-SGD on private data, is itself a release).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise DomainError("training data is empty")
    model = model.copy()
    trace: list[tuple[int, float, float]] = []
    steps = 0
    for epoch in range(1, int(epochs) + 1):
        if clip is None:
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                if on_read:
                    on_read(len(idx))
                model, _ = sgd_step(model, x[idx], y[idx], lr)
                steps += 1
        else:
            b = clip.batch_size
            for _ in range(dp_steps_per_epoch(n, b)):
                if fixed_size_batches:
                    idx = rng.choice(n, size=min(b, n), replace=False)
                else:
                    idx = np.flatnonzero(rng.random(n) < min(1.0, b / n))
                if on_read:
                    on_read(len(idx))
                g_hat = _noisy_clipped_gradient(model, x[idx], y[idx], clip, rng)
                model = model.with_flat(model.flat() - lr * g_hat)
                steps += 1
        if trace_data is None:
            if on_read:
                on_read(n)
            loss, acc = _epoch_metrics(model, x, y)
        else:
            loss, acc = _epoch_metrics(model, *trace_data)
        trace.append((epoch, loss, acc))
    return TrainResult(model, trace, steps)


# ---------------------------------------------------------------------------
# Checkpoints: magic, header of little-endian u32s, then float64 parameters


def save_model(model: MLP, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> MLP:
    return model_from_bytes(Path(path).read_bytes())


def model_to_bytes(model: MLP) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    dims = [model.input_dim] + [w.shape[1] for w in model.weights]
    header = [CHECKPOINT_VERSION, _ACTIVATION_CODES[model.activation], model.n_feature_layers, len(dims), *dims]
    buf.write(struct.pack(f"<{len(header)}I", *header))
    buf.write(model.flat().astype("<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> MLP:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ParseError("not a model checkpoint (bad magic bytes)")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, act, n_feat, n_dims = struct.unpack_from("<4I", data, pos)
        pos += 16
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        dims = struct.unpack_from(f"<{n_dims}I", data, pos)
        pos += 4 * n_dims
    except struct.error as exc:
        raise ParseError(f"truncated checkpoint header: {exc}") from None
    activation = {v: k for k, v in _ACTIVATION_CODES.items()}.get(act)
    if activation is None:
        raise ParseError(f"unknown activation code {act}")
    template = MLP(
        [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
        [np.zeros(b) for b in dims[1:]],
        n_feat,
        activation,
    )
    payload = data[pos:]
    if len(payload) != 8 * template.n_params:
        raise ParseError(f"expected {template.n_params} parameters, found {len(payload) // 8}")
    return template.with_flat(np.frombuffer(payload, dtype="<f8"))
