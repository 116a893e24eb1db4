"""Small dense kernels and a central-difference gradient oracle.

Everything here works on float64 numpy arrays; dense matrices are plain
``ndarray`` objects of shape ``(rows, cols)``. ``np.longdouble`` inputs are
carried through unchanged so that gradient oracles can evaluate objectives
below float64 roundoff.
"""

import numpy as np

from .errors import NonFiniteEvaluation, ZeroNormError

NORM_EPSILON = 1e-12


def working_dtype(*arrays):
    """float64, unless any input is already extended precision."""
    if any(np.asarray(a).dtype == np.longdouble for a in arrays):
        return np.longdouble
    return np.float64


def scalar(x):
    """Plain float for float64 results; extended-precision scalars pass through."""
    x = np.asarray(x)
    return x[()] if x.dtype == np.longdouble else float(x)


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite, C-contiguous 2-D array of the working dtype."""
    m = np.ascontiguousarray(a, dtype=working_dtype(a))
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf")
    return m


def l2_normalize(v, norm_epsilon=NORM_EPSILON):
    """Scale ``v`` to unit Euclidean length.

    Raises :class:`ZeroNormError` when ``||v|| <= norm_epsilon``; a
    degenerate vector never silently maps to zero.
    """
    v = np.asarray(v, dtype=working_dtype(v))
    n = np.sqrt(np.dot(v.ravel(), v.ravel()))
    if not n > norm_epsilon:
        raise ZeroNormError(f"cannot normalize vector with norm {n:.3g}")
    return v / n


def row_norms(m):
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def normalize_rows(m, norm_epsilon=NORM_EPSILON, name="rows"):
    """Row-wise :func:`l2_normalize`. Returns ``(unit_rows, norms)``."""
    m = np.asarray(m, dtype=working_dtype(m))
    norms = row_norms(m)
    bad = np.flatnonzero(~(norms > norm_epsilon))
    if bad.size:
        raise ZeroNormError(f"{name} {bad.tolist()} have norm <= {norm_epsilon:g}")
    return m / norms[:, None], norms


def finite_difference_grad(func, point, step=1e-6):
    """Central-difference gradient of a scalar function.

    ``point`` may have any shape; the result has the same shape (float64).
    Each coordinate costs two evaluations of ``func``. The difference
    quotient divides by the step actually taken after rounding ``x +/- step``
    and is formed in whatever precision ``func`` returns, so an objective
    evaluated in ``np.longdouble`` gives an oracle far below float64 noise.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=working_dtype(point), copy=True)
    grad = np.empty(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        xp = flat[j]
        fp = np.asarray(func(x))[()]
        flat[j] = orig - step
        xm = flat[j]
        fm = np.asarray(func(x))[()]
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteEvaluation(f"non-finite value probing coordinate {j}")
        gflat[j] = (fp - fm) / (xp - xm)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
