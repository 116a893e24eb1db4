"""Congenerous cosine (COCO) loss, its pairwise ancestor, and a softmax baseline.

Notation used in the code: ``f`` raw features (M x D), ``c`` raw centroids
(K x D), hats denote unit-normalised rows, ``z`` logits (M x K) and ``p``
their softmax.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ZeroNormError
from .numerics import NORM_EPSILON, as_matrix, normalize_rows, scalar, working_dtype

DEFAULT_EPSILON = 1e-8


class CentroidMode(str, enum.Enum):
    BATCH_COMPUTED = "batch"
    PARAMETRIC = "parametric"


@dataclass
class EmbeddingBatch:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        m, d = self.features.shape
        if m < 1 or d < 1:
            raise ValueError("batch needs M >= 1 and D >= 1")
        if self.labels.shape[0] != m:
            raise ValueError(f"{self.labels.shape[0]} labels for {m} features")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def size(self):
        return self.features.shape[0]


@dataclass
class CentroidSet:
    centroids: np.ndarray
    mode: CentroidMode = CentroidMode.PARAMETRIC

    def __post_init__(self):
        self.centroids = as_matrix(self.centroids, "centroids")
        self.mode = CentroidMode(self.mode)

    @property
    def num_classes(self):
        return self.centroids.shape[0]

    def renormalize(self):
        """Project every row back onto the unit sphere (Parametric update)."""
        self.centroids, _ = normalize_rows(self.centroids, name="centroid rows")
        return self


@dataclass
class LossResult:
    loss: float
    probs: np.ndarray
    logits: np.ndarray
    grad_features: np.ndarray = field(default=None, repr=False)
    grad_centroids: np.ndarray = field(default=None, repr=False)


def cosine_similarity(f, g, norm_epsilon=NORM_EPSILON):
    f = np.asarray(f, dtype=working_dtype(f))
    g = np.asarray(g, dtype=working_dtype(g))
    nf, ng = np.sqrt(np.dot(f, f)), np.sqrt(np.dot(g, g))
    if not (nf > norm_epsilon and ng > norm_epsilon):
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    return scalar(np.clip(np.dot(f, g) / (nf * ng), -1.0, 1.0))


def cosine_matrix(a, b, norm_epsilon=NORM_EPSILON):
    """All-pairs cosine between the rows of ``a`` and ``b``."""
    a_hat, _ = normalize_rows(a, norm_epsilon, "rows of a")
    b_hat, _ = normalize_rows(b, norm_epsilon, "rows of b")
    return np.clip(a_hat @ b_hat.T, -1.0, 1.0)


def batch_centroids(batch, epsilon=DEFAULT_EPSILON):
    """Per-class feature average with an ``epsilon``-padded count.

    Classes missing from the batch come out as exact zero rows.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    k = batch.num_classes
    sums = np.zeros((k, batch.features.shape[1]), dtype=batch.features.dtype)
    np.add.at(sums, batch.labels, batch.features)
    counts = np.bincount(batch.labels, minlength=k).astype(batch.features.dtype)
    return CentroidSet(sums / (counts + epsilon)[:, None], CentroidMode.BATCH_COMPUTED)


def naive_pairwise_loss(batch, epsilon=DEFAULT_EPSILON):
    """Pairwise ratio over ordered pairs ``i != j``, evaluated literally.

    With the indicator in both numerator and denominator, a same-class pair
    contributes ``C / epsilon`` and a cross-class pair contributes 0. Kept
    as a reference point, not as a training objective.
    """
    if batch.size < 2:
        raise ValueError("naive pairwise loss needs at least two samples")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    cos = cosine_matrix(batch.features, batch.features)
    same = (batch.labels[:, None] == batch.labels[None, :]).astype(np.float64)
    terms = same * cos / ((1.0 - same) * cos + epsilon)
    np.fill_diagonal(terms, 0.0)
    return scalar(terms.sum())


def coco_output_exclusive(batch, cents):
    """Per-sample output whose denominator skips the sample's own class.

    Diagnostic only: values are not probabilities and may exceed 1.
    """
    _check_classes(batch, cents)
    # every class is in some numerator or denominator, so every row must be usable
    e = np.exp(cosine_matrix(batch.features, cents.centroids))
    own = e[np.arange(batch.size), batch.labels]
    return own / (e.sum(axis=1) - own)


def softmax(z):
    z = np.asarray(z, dtype=working_dtype(z))
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_classes(batch, cents):
    if cents.num_classes != batch.num_classes:
        raise ValueError(f"{cents.num_classes} centroids for {batch.num_classes} classes")
    if cents.centroids.shape[1] != batch.features.shape[1]:
        raise ValueError("centroid and feature dimensions differ")


def coco_forward(batch, cents, temperature=1.0, reduction="sum"):
    """Loss, softmax probabilities and cosine logits of the COCO head.

    Logits are ``temperature * c_hat_k . f_hat_i``; the loss is
    ``-sum_i log p[i, l_i]`` (divided by M when ``reduction="mean"``).
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    _check_classes(batch, cents)
    f_hat, _ = normalize_rows(batch.features, name="feature rows")
    c_hat, _ = normalize_rows(cents.centroids, name="centroid rows")
    z = temperature * (f_hat @ c_hat.T)
    logp = _log_softmax(z)
    loss = -logp[np.arange(batch.size), batch.labels].sum()
    if reduction == "mean":
        loss /= batch.size
    return LossResult(scalar(loss), np.exp(logp), z)


def _project_out(g, unit, norms):
    """Backprop through row normalisation: ``(g - (g . u) u) / ||x||``."""
    radial = np.einsum("ij,ij->i", g, unit)
    return (g - radial[:, None] * unit) / norms[:, None]


def coco_backward(batch, cents, temperature=1.0, reduction="sum"):
    """Forward pass plus gradients w.r.t. raw features and raw centroids.

    Centroids are treated as constants for the feature gradient and vice
    versa. Chaining through a batch-computed centroid is the caller's job.
    """
    res = coco_forward(batch, cents, temperature, reduction)
    f_hat, f_norm = normalize_rows(batch.features)
    c_hat, c_norm = normalize_rows(cents.centroids)

    dz = res.probs.copy()
    dz[np.arange(batch.size), batch.labels] -= 1.0
    dz *= temperature
    if reduction == "mean":
        dz /= batch.size

    grad_f_hat = dz @ c_hat        # M x D, gradient w.r.t. unit features
    grad_c_hat = dz.T @ f_hat      # K x D, gradient w.r.t. unit centroids
    res.grad_features = _project_out(grad_f_hat, f_hat, f_norm)
    res.grad_centroids = _project_out(grad_c_hat, c_hat, c_norm)
    return res


def softmax_ce_baseline(logits, labels):
    """Mean cross-entropy of unnormalised logits and its gradient."""
    z = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    m, k = z.shape
    if labels.shape[0] != m:
        raise ValueError(f"{labels.shape[0]} labels for {m} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    logp = _log_softmax(z)
    loss = -logp[np.arange(m), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(m), labels] -= 1.0
    grad /= m
    return scalar(loss), grad
