"""Keypoint alignment: affine and similarity transforms onto a base shape.

Points are ``(m, 2)`` arrays; a transform maps each row ``p`` to
``linear @ p + translation``.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import CountMismatch, DegenerateConfiguration

_COLLINEAR_TOL = 1e-9
_DET_TOL = 1e-12


class TransformKind(str, enum.Enum):
    AFFINE = "affine"
    SIMILARITY = "similarity"


@dataclass(frozen=True)
class AlignmentTransform:
    linear: np.ndarray
    translation: np.ndarray
    kind: TransformKind = TransformKind.AFFINE

    def __post_init__(self):
        linear = np.asarray(self.linear, dtype=np.float64).reshape(2, 2)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(2)
        if abs(np.linalg.det(linear)) <= _DET_TOL:
            raise DegenerateConfiguration("transform is not invertible")
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "kind", TransformKind(self.kind))

    @property
    def scale(self):
        """Isotropic scale; only meaningful for similarity transforms."""
        return float(np.sqrt(abs(np.linalg.det(self.linear))))

    @property
    def rotation(self):
        return self.linear / self.scale

    @classmethod
    def identity(cls):
        return cls(np.eye(2), np.zeros(2), TransformKind.SIMILARITY)


def as_keypoints(points, name="keypoints"):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
        raise ValueError(f"{name} must have shape (m, 2) with m >= 1, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} contain non-finite coordinates")
    return pts


def _paired(src, dst, min_points):
    src = as_keypoints(src, "src")
    dst = as_keypoints(dst, "dst")
    if src.shape[0] != dst.shape[0]:
        raise CountMismatch(f"{src.shape[0]} source vs {dst.shape[0]} target points")
    if src.shape[0] < min_points:
        raise DegenerateConfiguration(f"need at least {min_points} point pairs")
    return src, dst


def estimate_affine(src, dst):
    """Least-squares affine map via the normal equations of ``[p, 1] W = q``."""
    src, dst = _paired(src, dst, 3)
    centered = src - src.mean(axis=0)
    if np.linalg.svd(centered, compute_uv=False)[-1] <= _COLLINEAR_TOL:
        raise DegenerateConfiguration("source points are collinear or coincident")
    x = np.hstack([src, np.ones((src.shape[0], 1))])
    w = np.linalg.solve(x.T @ x, x.T @ dst)
    return AlignmentTransform(w[:2].T, w[2], TransformKind.AFFINE)


def estimate_similarity(src, dst):
    """Least-squares scale, rotation and translation (no reflection).

    Closed-form orthogonal Procrustes on the centred point sets; when the
    optimal orthogonal factor is a reflection the smallest singular
    direction is flipped to keep ``det R = +1``.
    """
    src, dst = _paired(src, dst, 2)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    ps, qs = src - mu_s, dst - mu_d
    var_s = np.mean(np.sum(ps * ps, axis=1))
    if var_s <= _COLLINEAR_TOL**2:
        raise DegenerateConfiguration("source points are all coincident")

    cov = qs.T @ ps / src.shape[0]
    u, sing, vt = np.linalg.svd(cov)
    d = np.array([1.0, np.sign(np.linalg.det(u) * np.linalg.det(vt)) or 1.0])
    rot = u @ np.diag(d) @ vt
    scale = float(sing @ d) / var_s
    if scale <= _DET_TOL:
        raise DegenerateConfiguration("target points carry no spread to match")
    linear = scale * rot
    return AlignmentTransform(linear, mu_d - linear @ mu_s, TransformKind.SIMILARITY)


def apply_transform(t, points):
    pts = as_keypoints(points)
    return pts @ t.linear.T + t.translation


def compose(outer, inner):
    """Transform equivalent to applying ``inner`` first, then ``outer``."""
    kind = (TransformKind.SIMILARITY
            if outer.kind == inner.kind == TransformKind.SIMILARITY
            else TransformKind.AFFINE)
    return AlignmentTransform(outer.linear @ inner.linear,
                              outer.linear @ inner.translation + outer.translation,
                              kind)


def residual_rms(t, src, dst):
    diff = apply_transform(t, src) - as_keypoints(dst)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def load_keypoints(path):
    """Read whitespace-separated ``x y`` pairs, one per line; ``#`` starts a comment."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected two coordinates")
            rows.append([float(parts[0]), float(parts[1])])
    return as_keypoints(np.array(rows).reshape(-1, 2), str(path))


def save_keypoints(path, points):
    pts = as_keypoints(points)
    with open(path, "w") as fh:
        for x, y in pts:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
