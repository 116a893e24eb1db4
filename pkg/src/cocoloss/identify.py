"""Gallery/probe identification by fused per-region cosine scores.

For each region: cosine between every probe and gallery embedding, a
two-parameter logistic squashing, then a gamma-weighted combination across
regions. Each probe takes the label of its best-scoring gallery instance.
"""

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import Degenerate, EmptyFusion, EmptyRow, LengthMismatch, UniverseMismatch
from .numerics import NORM_EPSILON, row_norms


class MissingRegionPolicy(str, enum.Enum):
    RENORMALIZE_GAMMA = "renormalize"
    ZERO_SCORE = "zero"


@dataclass
class RegionEmbeddingStore:
    """Gallery and probe embeddings extracted by one region model.

    ``probe_labels`` is optional ground truth, only used for scoring
    predictions.
    """
    region_id: int
    gallery_ids: list
    gallery_labels: list
    gallery_features: np.ndarray
    probe_ids: list
    probe_features: np.ndarray
    probe_labels: list = None

    def __post_init__(self):
        self.gallery_ids = list(self.gallery_ids)
        self.probe_ids = list(self.probe_ids)
        self.gallery_labels = list(self.gallery_labels)
        self.gallery_features = np.asarray(self.gallery_features, dtype=np.float64)
        self.probe_features = np.asarray(self.probe_features, dtype=np.float64)
        for name, ids, feats in (("gallery", self.gallery_ids, self.gallery_features),
                                 ("probe", self.probe_ids, self.probe_features)):
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate {name} instance ids in region {self.region_id}")
            if feats.ndim != 2 or feats.shape[0] != len(ids):
                raise ValueError(f"{name} features must be ({len(ids)}, D)")
        if len(self.gallery_labels) != len(self.gallery_ids):
            raise ValueError("one label per gallery instance required")
        if self.gallery_features.shape[1] != self.probe_features.shape[1]:
            raise ValueError("gallery and probe dims differ")
        if self.probe_labels is not None:
            self.probe_labels = list(self.probe_labels)
            if len(self.probe_labels) != len(self.probe_ids):
                raise ValueError("one truth label per probe required")


@dataclass
class ScoreMatrix:
    """Probe x gallery scores. ``mask`` is True where an entry exists."""
    values: np.ndarray
    mask: np.ndarray
    probe_ids: list
    gallery_ids: list
    kind: str = "raw"
    region_id: int = None


@dataclass
class RegionParams:
    beta0: float = 0.0
    beta1: float = 1.0
    gamma: float = 1.0


@dataclass
class FusionConfig:
    regions: dict = field(default_factory=dict)  # region_id -> RegionParams
    missing_region_policy: MissingRegionPolicy = MissingRegionPolicy.RENORMALIZE_GAMMA

    def __post_init__(self):
        self.missing_region_policy = MissingRegionPolicy(self.missing_region_policy)
        gammas = [p.gamma for p in self.regions.values()]
        if gammas:
            if any(g < 0 or not np.isfinite(g) for g in gammas):
                raise ValueError("gamma weights must be finite and >= 0")
            if not any(g > 0 for g in gammas):
                raise ValueError("at least one gamma must be positive")

    @classmethod
    def uniform(cls, region_ids, beta0=0.0, beta1=1.0, policy=MissingRegionPolicy.RENORMALIZE_GAMMA):
        region_ids = list(region_ids)
        g = 1.0 / len(region_ids)
        return cls({r: RegionParams(beta0, beta1, g) for r in region_ids}, policy)

    def params(self, region_id):
        try:
            return self.regions[region_id]
        except KeyError:
            raise UniverseMismatch(f"no fusion parameters for region {region_id}") from None


def raw_scores(store, probe_ids=None, gallery_ids=None):
    """Cosine of every probe/gallery pair seen by this region.

    ``probe_ids``/``gallery_ids`` fix the row/column universe (defaults:
    the store's own lists); instances the region lacks are masked, as are
    zero-norm features (with a warning).
    """
    probe_ids = store.probe_ids if probe_ids is None else list(probe_ids)
    gallery_ids = store.gallery_ids if gallery_ids is None else list(gallery_ids)
    if not probe_ids or not gallery_ids:
        raise ValueError("need at least one probe and one gallery instance")

    def place(ids, own_ids, feats, what):
        pos = {i: k for k, i in enumerate(own_ids)}
        unknown = set(own_ids) - set(ids)
        if unknown:
            raise UniverseMismatch(f"{what} ids {sorted(map(str, unknown))[:5]} outside the universe")
        out = np.zeros((len(ids), feats.shape[1]))
        ok = np.zeros(len(ids), dtype=bool)
        for r, i in enumerate(ids):
            if i in pos:
                out[r] = feats[pos[i]]
                ok[r] = True
        norms = row_norms(out)
        degenerate = ok & ~(norms > NORM_EPSILON)
        if degenerate.any():
            bad = [ids[k] for k in np.flatnonzero(degenerate)]
            warnings.warn(f"region {store.region_id}: masking zero-norm {what} features {bad[:5]}")
            ok &= ~degenerate
        unit = np.zeros_like(out)
        unit[ok] = out[ok] / norms[ok, None]
        return unit, ok

    p_unit, p_ok = place(probe_ids, store.probe_ids, store.probe_features, "probe")
    g_unit, g_ok = place(gallery_ids, store.gallery_ids, store.gallery_features, "gallery")
    mask = p_ok[:, None] & g_ok[None, :]
    values = np.where(mask, np.clip(p_unit @ g_unit.T, -1.0, 1.0), 0.0)
    return ScoreMatrix(values, mask, list(probe_ids), list(gallery_ids), "raw", store.region_id)


def logistic(s, beta0, beta1):
    return expit(beta0 + beta1 * np.asarray(s, dtype=np.float64))


def normalize_scores(raw, beta0, beta1):
    values = np.where(raw.mask, logistic(raw.values, beta0, beta1), 0.0)
    return ScoreMatrix(values, raw.mask.copy(), raw.probe_ids, raw.gallery_ids,
                       "normalized", raw.region_id)


def fuse_scores(per_region, config):
    """Gamma-weighted sum of normalised region scores.

    Where every region is present the result is ``sum_r gamma_r * s_r``.
    Under RENORMALIZE_GAMMA an entry seen by only some regions is rescaled
    by ``sum(all gammas) / sum(available gammas)`` so it stays on the same
    scale; under ZERO_SCORE the missing regions simply add nothing. Entries
    no region sees stay masked.
    """
    if not per_region:
        raise ValueError("no regions to fuse")
    first = per_region[0]
    for sm in per_region[1:]:
        if sm.probe_ids != first.probe_ids or sm.gallery_ids != first.gallery_ids:
            raise UniverseMismatch("region score matrices index different instances")

    total = np.zeros_like(first.values)
    avail_gamma = np.zeros_like(first.values)
    mask = np.zeros_like(first.mask)
    gamma_sum = 0.0
    for sm in per_region:
        g = config.params(sm.region_id).gamma
        gamma_sum += g
        total += np.where(sm.mask, g * sm.values, 0.0)
        avail_gamma += np.where(sm.mask, g, 0.0)
        mask |= sm.mask

    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise EmptyFusion(f"probes {[first.probe_ids[i] for i in empty[:5]]} have no scores in any region")

    if config.missing_region_policy == MissingRegionPolicy.RENORMALIZE_GAMMA:
        scale = np.divide(gamma_sum, avail_gamma, out=np.zeros_like(avail_gamma),
                          where=avail_gamma > 0)
        total = total * scale
    return ScoreMatrix(np.where(mask, total, 0.0), mask, first.probe_ids,
                       first.gallery_ids, "fused")


def predict_identity(fused, gallery_labels, tie_tol=1e-12):
    """Label of the highest-scoring gallery instance per probe.

    Scores within ``tie_tol`` (relative, floored at 1) of the row maximum
    count as tied, and ties go to the lowest gallery index, so rounding
    noise in the fusion cannot reorder equal scores. Returns ``(labels,
    best_index, best_score)``.
    """
    gallery_labels = list(gallery_labels)
    if len(gallery_labels) != fused.values.shape[1]:
        raise LengthMismatch("one label per gallery column required")
    empty = np.flatnonzero(~fused.mask.any(axis=1))
    if empty.size:
        raise EmptyRow(f"probe rows {empty[:5].tolist()} have no available scores")
    masked = np.where(fused.mask, fused.values, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    best = np.argmax(masked >= top - tie_tol * np.maximum(1.0, np.abs(top)), axis=1)
    scores = masked[np.arange(best.size), best]
    return [gallery_labels[j] for j in best], best, scores


def accuracy(predictions, truth):
    predictions, truth = list(predictions), list(truth)
    if len(predictions) != len(truth):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truth)} labels")
    if not predictions:
        raise LengthMismatch("accuracy of an empty set")
    return sum(p == t for p, t in zip(predictions, truth)) / len(truth)


def fit_logistic(positive_scores, negative_scores, iterations=5000, learning_rate=1.0,
                 tol=1e-12):
    """Fit ``P(match | s) = sigmoid(b0 + b1 s)`` by full-batch gradient
    descent on the mean binary cross-entropy, projecting ``b1`` onto
    ``b1 >= 0`` after every step. Stops early once a step moves both
    parameters by less than ``tol``.

    Descent runs on standardised scores (zero mean, unit variance), which
    leaves the optimum unchanged but keeps the two directions comparably
    conditioned; the result is mapped back to raw-score coefficients.
    """
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    neg = np.asarray(negative_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need both positive and negative scores")
    if pos.size == neg.size and np.array_equal(np.sort(pos), np.sort(neg)):
        raise Degenerate("positive and negative scores are identical")
    raw = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    mu, sd = raw.mean(), raw.std()
    sd = sd if sd > 0 else 1.0
    s = (raw - mu) / sd
    b0 = b1 = 0.0
    for _ in range(iterations):
        r = expit(b0 + b1 * s) - y
        n0 = b0 - learning_rate * float(r.mean())
        n1 = max(0.0, b1 - learning_rate * float(r @ s) / s.size)
        done = abs(n0 - b0) < tol and abs(n1 - b1) < tol
        b0, b1 = n0, n1
        if done:
            break
    return float(b0 - b1 * mu / sd), float(b1 / sd)


def pair_scores(scores, probe_labels, gallery_labels):
    """Split available entries of a raw score matrix into same-identity
    (positive) and different-identity (negative) samples."""
    same = np.array(probe_labels, dtype=object)[:, None] == np.array(gallery_labels, dtype=object)[None, :]
    return scores.values[scores.mask & same], scores.values[scores.mask & ~same]


def build_universe(stores):
    """Union of probe and gallery ids over regions, in first-seen order.

    Gallery labels (and probe truth labels, where given) must agree across
    regions.
    """
    if not stores:
        raise ValueError("no region stores")
    region_ids = [s.region_id for s in stores]
    if len(set(region_ids)) != len(region_ids):
        raise UniverseMismatch(f"duplicate region ids {region_ids}")
    gallery, probes = {}, {}
    for st in stores:
        for i, lab in zip(st.gallery_ids, st.gallery_labels):
            if gallery.setdefault(i, lab) != lab:
                raise UniverseMismatch(f"gallery {i!r} labelled {gallery[i]!r} and {lab!r}")
        truth = st.probe_labels if st.probe_labels is not None else [None] * len(st.probe_ids)
        for i, lab in zip(st.probe_ids, truth):
            prev = probes.setdefault(i, lab)
            if prev is None:
                probes[i] = lab
            elif lab is not None and prev != lab:
                raise UniverseMismatch(f"probe {i!r} labelled {prev!r} and {lab!r}")
    return list(probes), list(probes.values()), list(gallery), list(gallery.values())


@dataclass
class Identification:
    probe_ids: list
    predictions: list
    scores: np.ndarray
    fused: ScoreMatrix
    truth: list = None

    @property
    def accuracy(self):
        if self.truth is None or any(t is None for t in self.truth):
            return None
        return accuracy(self.predictions, self.truth)


def identify(stores, config=None, normalize=True):
    """Full pipeline over one or more regions; returns :class:`Identification`."""
    probe_ids, truth, gallery_ids, gallery_labels = build_universe(stores)
    if config is None:
        config = FusionConfig.uniform([s.region_id for s in stores])
    per_region = []
    for st in stores:
        raw = raw_scores(st, probe_ids, gallery_ids)
        if normalize:
            p = config.params(st.region_id)
            per_region.append(normalize_scores(raw, p.beta0, p.beta1))
        else:
            per_region.append(raw)
    fused = fuse_scores(per_region, config)
    labels, _, scores = predict_identity(fused, gallery_labels)
    return Identification(probe_ids, labels, scores, fused, truth)
