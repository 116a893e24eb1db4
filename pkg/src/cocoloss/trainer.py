"""Toy-scale embedding training with a COCO or softmax head.

A small MLP maps inputs to D-dim embeddings; the head is either a
:class:`~cocoloss.losses.CentroidSet` (COCO loss) or a :class:`SoftmaxHead`
(plain affine classifier + cross-entropy, the baseline). Backprop, the
optimizers and the learning-rate schedule are written out by hand on numpy.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, NoPairs, NonFiniteLoss, PlacementFailure
from .losses import (
    DEFAULT_EPSILON,
    CentroidMode,
    CentroidSet,
    EmbeddingBatch,
    batch_centroids,
    coco_backward,
    coco_forward,
    cosine_matrix,
    softmax_ce_baseline,
)
from .numerics import finite_difference_grad, relative_error

ACTIVATIONS = ("relu", "tanh")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    means: np.ndarray = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs must be (N, dim) with one label per row")

    def __len__(self):
        return self.labels.shape[0]


def make_blobs(num_classes, per_class, input_dim, spread, seed, sample_seed=None,
               max_attempts=10_000):
    """Isotropic Gaussian blobs around well-separated uniform means.

    Means are drawn in ``[-1, 1]^input_dim`` and rejected until every pair is
    at least ``4 * spread`` apart. Rows are ordered class by class. Means
    depend on ``seed`` only; samples use ``sample_seed`` (default ``seed``),
    so a held-out set around the same means is one extra call away.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    if not spread > 0:
        raise ValueError("spread must be positive")

    rng = np.random.default_rng(seed)
    means = []
    attempts = 0
    while len(means) < num_classes:
        if attempts >= max_attempts:
            raise PlacementFailure(
                f"placed {len(means)}/{num_classes} means {4 * spread:g} apart "
                f"in {max_attempts} attempts")
        attempts += 1
        cand = rng.uniform(-1.0, 1.0, size=input_dim)
        if all(np.linalg.norm(cand - m) >= 4 * spread for m in means):
            means.append(cand)
    means = np.array(means)

    srng = rng if sample_seed is None else np.random.default_rng(sample_seed)
    noise = srng.normal(0.0, spread, size=(num_classes, per_class, input_dim))
    inputs = (means[:, None, :] + noise).reshape(-1, input_dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(inputs, labels, num_classes, means)


# --------------------------------------------------------------------------
# model

@dataclass
class MlpModel:
    layer_dims: list
    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise DimMismatch(f"layer {i}: weight {w.shape}, bias {b.shape}, want {shape}")

    @classmethod
    def init(cls, layer_dims, activation="relu", seed=0):
        """He-style init for relu, Glorot for tanh; zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            gain = 2.0 if activation == "relu" else 1.0
            std = math.sqrt(gain / fan_in) if activation == "relu" else math.sqrt(2.0 / (fan_in + fan_out))
            weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_dims), weights, biases, activation)

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    def params(self):
        """Parameter arrays in declaration order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_names(self):
        names = []
        for i in range(len(self.weights)):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return names

    def copy(self):
        return MlpModel(self.layer_dims, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.activation)


def _act(a, kind):
    return np.maximum(a, 0) if kind == "relu" else np.tanh(a)


def _act_grad(a, out, kind):
    return (a > 0).astype(a.dtype) if kind == "relu" else 1.0 - out * out


def forward(model, inputs, cache=None):
    """Embed ``inputs`` (N x input_dim). Hidden layers use the model's
    activation, the last layer is linear. Pass a list as ``cache`` to keep
    the per-layer (input, pre-activation, output) triples for backprop."""
    h = np.asarray(inputs)
    if h.ndim != 2 or h.shape[1] != model.input_dim:
        raise DimMismatch(f"inputs of shape {h.shape} for model input dim {model.input_dim}")
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ w.T + b
        out = a if i == last else _act(a, model.activation)
        if cache is not None:
            cache.append((h, a, out))
        h = out
    return h


def backward(model, cache, grad_out):
    """Gradients of all model parameters given d(loss)/d(embeddings)."""
    grads = []
    g = grad_out
    last = len(model.weights) - 1
    for i in range(last, -1, -1):
        h_in, a, out = cache[i]
        if i != last:
            g = g * _act_grad(a, out, model.activation)
        grads.append((g.T @ h_in, g.sum(axis=0)))
        g = g @ model.weights[i]
    flat = []
    for gw, gb in reversed(grads):
        flat += [gw, gb]
    return flat


@dataclass
class SoftmaxHead:
    """Affine classifier ``z = f W^T + b`` used by the softmax baseline."""
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, num_classes, dim, seed=0):
        rng = np.random.default_rng(seed)
        std = math.sqrt(2.0 / (num_classes + dim))
        return cls(rng.normal(0.0, std, size=(num_classes, dim)), np.zeros(num_classes))

    @property
    def num_classes(self):
        return self.weight.shape[0]


def init_centroids(model, dataset, mode=CentroidMode.PARAMETRIC, epsilon=DEFAULT_EPSILON):
    """Class averages of the current embeddings, unit-normalised in
    Parametric mode."""
    emb = forward(model, dataset.inputs)
    cents = batch_centroids(EmbeddingBatch(emb, dataset.labels, dataset.num_classes), epsilon)
    cents.mode = CentroidMode(mode)
    if cents.mode == CentroidMode.PARAMETRIC:
        cents.renormalize()
    return cents


# --------------------------------------------------------------------------
# objective and gradients

def head_loss_and_grads(model, head, inputs, labels, num_classes, temperature=1.0,
                        epsilon=DEFAULT_EPSILON, with_grads=True):
    """Loss on one batch plus gradients for every trainable array.

    Returns ``(loss, logits, grads)`` where ``grads`` lines up with
    :func:`trainable_arrays`. In BatchComputed mode the centroids are
    rebuilt from this batch and the gradient flows through that average.
    """
    cache = [] if with_grads else None
    emb = forward(model, inputs, cache)
    if not np.all(np.isfinite(emb)):
        # diverged parameters; let the caller report it as a non-finite loss
        return float("nan"), None, None
    batch = EmbeddingBatch(emb, labels, num_classes)

    if isinstance(head, SoftmaxHead):
        logits = emb @ head.weight.T + head.bias
        if not np.all(np.isfinite(logits)):
            return float("nan"), None, None
        loss, dz = softmax_ce_baseline(logits, labels)
        if not with_grads:
            return loss, logits, None
        head_grads = [dz.T @ emb, dz.sum(axis=0)]
        grad_emb = dz @ head.weight
        return loss, logits, backward(model, cache, grad_emb) + head_grads

    if head.mode == CentroidMode.BATCH_COMPUTED:
        cents = batch_centroids(batch, epsilon)
    else:
        cents = head
    if not with_grads:
        res = coco_forward(batch, cents, temperature)
        return res.loss, res.logits, None
    res = coco_backward(batch, cents, temperature)
    grad_emb = res.grad_features
    if head.mode == CentroidMode.BATCH_COMPUTED:
        counts = np.bincount(labels, minlength=num_classes).astype(emb.dtype)
        grad_emb = grad_emb + res.grad_centroids[labels] / (counts[labels] + epsilon)[:, None]
        return res.loss, res.logits, backward(model, cache, grad_emb)
    return res.loss, res.logits, backward(model, cache, grad_emb) + [res.grad_centroids]


def trainable_arrays(model, head):
    arrays = model.params()
    names = model.param_names()
    if isinstance(head, SoftmaxHead):
        arrays += [head.weight, head.bias]
        names += ["head.weight", "head.bias"]
    elif head.mode == CentroidMode.PARAMETRIC:
        arrays.append(head.centroids)
        names.append("centroids")
    return arrays, names


def _decayed(name):
    # L2 on weight matrices only; biases and unit-norm centroids are exempt
    return name.endswith("weight")


# --------------------------------------------------------------------------
# optimisation

@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    lr_decay_factor: float = 0.2
    lr_decay_every: int = 10
    weight_decay: float = 0.005
    momentum: float = 0.9
    optimizer: str = "adam"
    epochs: int = 30
    batch_size: int = 32
    centroid_mode: str = "parametric"
    temperature: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    seed: int = 0
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.centroid_mode = CentroidMode(self.centroid_mode).value
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in [0, 1]")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError("optimizer must be 'adam' or 'sgd_momentum'")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def lr_at(self, epoch):
        """Step decay: the rate shrinks by ``lr_decay_factor`` every
        ``lr_decay_every`` epochs (repeatedly, not once)."""
        return self.learning_rate * (1.0 - self.lr_decay_factor) ** (epoch // self.lr_decay_every)


FACE_PRESET = dict(learning_rate=0.001, lr_decay_factor=0.1, lr_decay_every=20)
BODY_PRESET = dict(learning_rate=0.005, lr_decay_factor=0.2, lr_decay_every=10)


class Optimizer:
    """Adam or SGD with momentum over a fixed list of arrays, updated in place."""

    def __init__(self, arrays, config):
        self.kind = config.optimizer
        self.momentum = config.momentum
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays] if self.kind == "adam" else None
        self.t = 0

    def step(self, arrays, grads, lr):
        self.t += 1
        for i, (p, g) in enumerate(zip(arrays, grads)):
            if self.kind == "adam":
                self.m[i] = self.momentum * self.m[i] + (1 - self.momentum) * g
                self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
                m_hat = self.m[i] / (1 - self.momentum ** self.t)
                v_hat = self.v[i] / (1 - self.beta2 ** self.t)
                p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            else:
                self.m[i] = self.momentum * self.m[i] + g
                p -= lr * self.m[i]


def _batches(labels, num_classes, batch_size, balanced, rng):
    n = labels.shape[0]
    if not balanced:
        order = rng.permutation(n)
        return [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # every class in every batch so the per-batch averages are defined
    per = math.ceil(batch_size / num_classes)
    pools = [rng.permutation(np.flatnonzero(labels == k)) for k in range(num_classes)]
    cursors = [0] * num_classes
    out = []
    for _ in range(math.ceil(n / (per * num_classes))):
        idx = []
        for k, pool in enumerate(pools):
            take = [pool[(cursors[k] + j) % pool.size] for j in range(per)]
            cursors[k] += per
            idx += take
        out.append(np.array(idx))
    return out


def evaluate(model, head, dataset, temperature=1.0, epsilon=DEFAULT_EPSILON):
    """Mean per-sample loss and argmax accuracy on the whole dataset."""
    loss, logits, _ = head_loss_and_grads(model, head, dataset.inputs, dataset.labels,
                                          dataset.num_classes, temperature, epsilon,
                                          with_grads=False)
    if logits is None:
        return float("nan"), float("nan")
    if not isinstance(head, SoftmaxHead):
        loss /= len(dataset)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return float(loss), acc


def train(model, head, dataset, config, log=None):
    """Train ``model`` and ``head`` in place; return per-epoch stats.

    Each entry is ``{"epoch", "loss", "train_accuracy", "lr"}`` measured on
    the full dataset after the epoch. Batch order, and everything else,
    is fixed by ``config.seed``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if head.num_classes != dataset.num_classes:
        raise ValueError(f"head has {head.num_classes} classes, dataset {dataset.num_classes}")
    if dataset.inputs.shape[1] != model.input_dim:
        raise DimMismatch("dataset input dim does not match the model")

    is_coco = isinstance(head, CentroidSet)
    balanced = is_coco and head.mode == CentroidMode.BATCH_COMPUTED
    rng = np.random.default_rng(config.seed)
    arrays, names = trainable_arrays(model, head)
    opt = Optimizer(arrays, config)
    history = []

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for b, idx in enumerate(_batches(dataset.labels, dataset.num_classes,
                                         config.batch_size, balanced, rng)):
            loss, _, grads = head_loss_and_grads(
                model, head, dataset.inputs[idx], dataset.labels[idx],
                dataset.num_classes, config.temperature, config.epsilon)
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, b, loss)
            if config.weight_decay:
                grads = [g + config.weight_decay * p if _decayed(n) else g
                         for p, g, n in zip(arrays, grads, names)]
            opt.step(arrays, grads, lr)
            if is_coco and head.mode == CentroidMode.PARAMETRIC:
                head.renormalize()
                # renormalize() rebinds the array; keep the optimizer pointed at it
                arrays[-1] = head.centroids

        if is_coco and head.mode == CentroidMode.BATCH_COMPUTED:
            head.centroids = init_centroids(model, dataset, head.mode, config.epsilon).centroids
        loss, acc = evaluate(model, head, dataset, config.temperature, config.epsilon)
        if not np.isfinite(loss):
            raise NonFiniteLoss(epoch, -1, loss)
        history.append({"epoch": epoch + 1, "loss": loss, "train_accuracy": acc, "lr": lr})
        if log is not None:
            log(history[-1])
    return history


# --------------------------------------------------------------------------
# gradient verification

@dataclass
class GradCheckReport:
    max_rel_err: float
    location: tuple
    num_params: int
    tol: float
    per_array: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def _flatten(arrays):
    return np.concatenate([a.ravel() for a in arrays])


def _unflatten(vec, like):
    out, pos = [], 0
    for a in like:
        out.append(vec[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    return out


def _rebuild(model, head, arrays):
    n = len(model.weights)
    m = MlpModel(model.layer_dims, arrays[0:2 * n:2], arrays[1:2 * n:2], model.activation)
    if isinstance(head, SoftmaxHead):
        h = SoftmaxHead(arrays[2 * n], arrays[2 * n + 1])
    elif head.mode == CentroidMode.PARAMETRIC:
        h = CentroidSet(arrays[2 * n], head.mode)
    else:
        h = CentroidSet(head.centroids.astype(arrays[0].dtype), head.mode)
    return m, h


def grad_check(model, head, inputs, labels, num_classes, step=1e-6, tol=1e-5,
               temperature=1.0, epsilon=DEFAULT_EPSILON, analytic=None, max_params=10_000):
    """Compare backprop against central differences of the batch loss.

    The finite-difference objective is evaluated in ``np.longdouble`` so
    its roundoff (~1e-19 relative) stays far below the tolerance; the
    analytic side is the float64 training path. ``analytic`` lets a caller
    substitute a flat gradient vector (used to self-test the checker).
    """
    arrays, names = trainable_arrays(model, head)
    x0 = _flatten(arrays)
    if x0.size > max_params:
        raise ValueError(f"{x0.size} parameters; grad_check is meant for <= {max_params}")
    if analytic is None:
        _, _, grads = head_loss_and_grads(model, head, inputs, labels, num_classes,
                                          temperature, epsilon)
        analytic = _flatten(grads)
    analytic = np.asarray(analytic, dtype=np.float64)

    inputs_ld = np.asarray(inputs, dtype=np.longdouble)

    def objective(vec):
        m, h = _rebuild(model, head, _unflatten(vec.astype(np.longdouble), arrays))
        loss, _, _ = head_loss_and_grads(m, h, inputs_ld, labels, num_classes,
                                         temperature, epsilon, with_grads=False)
        return loss

    numeric = finite_difference_grad(objective, x0, step)
    err = relative_error(analytic, numeric)
    worst = int(np.argmax(err))
    pos, per_array, location = 0, {}, None
    for a, name in zip(arrays, names):
        seg = err[pos:pos + a.size]
        per_array[name] = float(seg.max())
        if pos <= worst < pos + a.size:
            location = (name, np.unravel_index(worst - pos, a.shape))
        pos += a.size
    location = (location[0], tuple(int(i) for i in location[1]))
    return GradCheckReport(float(err[worst]), location, int(x0.size), tol, per_array)


# --------------------------------------------------------------------------
# separation statistics

@dataclass
class SeparationStats:
    mean_intra_cosine: float
    mean_inter_cosine: float
    histogram_intra: np.ndarray
    histogram_inter: np.ndarray
    bin_edges: np.ndarray

    @property
    def margin(self):
        return self.mean_intra_cosine - self.mean_inter_cosine


def separation_stats(embeddings, labels, bins=64):
    """Cosine over all unordered pairs, split by label equality."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = emb.shape[0]
    if n < 2 or labels.shape[0] != n:
        raise NoPairs("need at least two labelled embeddings")
    cos = cosine_matrix(emb, emb)
    iu = np.triu_indices(n, k=1)
    vals = cos[iu]
    same = labels[iu[0]] == labels[iu[1]]
    if not same.any():
        raise NoPairs("no intra-class pairs")
    if same.all():
        raise NoPairs("no inter-class pairs")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    h_intra, _ = np.histogram(vals[same], bins=edges)
    h_inter, _ = np.histogram(vals[~same], bins=edges)
    return SeparationStats(float(vals[same].mean()), float(vals[~same].mean()),
                           h_intra, h_inter, edges)
