"""Feature-space and input-space augmentation operators.

Feature-space operators act on encoder outputs (context vectors); input-space
operators act on standardized return windows.  Every operator takes an
explicit ``numpy.random.Generator`` where randomness is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.interpolate import CubicSpline

FEATURE_KINDS = ("feat_interpolate", "feat_extrapolate", "feat_noise", "feat_jitter")
INPUT_KINDS = ("inp_magnify", "inp_jitter", "inp_pool", "inp_timewarp")
KINDS = FEATURE_KINDS + INPUT_KINDS


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    lam: float = 0.2
    gamma: float = 0.5
    sigma: float = 0.05
    k_neighbors: int = 2
    pool_window: int = 3
    magnify_low: float = 0.4
    magnify_high: float = 0.8
    knots: int = 4
    warp_sigma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.kind == "feat_interpolate" and not 0.0 <= self.lam <= 1.0:
            raise ValueError("interpolation lambda must lie in [0, 1]")
        if self.kind == "feat_extrapolate" and self.lam < 0:
            raise ValueError("extrapolation lambda must be non-negative")
        if self.sigma < 0 or self.gamma < 0 or self.warp_sigma < 0:
            raise ValueError("noise scales must be non-negative")
        if self.pool_window < 1:
            raise ValueError("pool_window must be at least 1")
        if self.k_neighbors < 1 or self.knots < 1:
            raise ValueError("k_neighbors and knots must be at least 1")
        if not 0.0 < self.magnify_low <= self.magnify_high <= 1.0:
            raise ValueError("magnify range must satisfy 0 < low <= high <= 1")

    @property
    def space(self) -> str:
        return "feature" if self.kind in FEATURE_KINDS else "input"

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# feature space
# ---------------------------------------------------------------------------

def knn_intraclass(features, labels, k: int, chunk: int = 1024) -> np.ndarray:
    """Indices of the ``k`` nearest same-label neighbours of every sample.

    Euclidean distance, self excluded, ties broken by the lower sample index.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.empty((len(labels), k), dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size <= k:
            raise ValueError(f"class {cls} has {idx.size} members, need more than k={k}")
        pts = features[idx]
        sq = np.einsum("ij,ij->i", pts, pts)
        for start in range(0, idx.size, chunk):
            rows = np.arange(start, min(start + chunk, idx.size))
            d2 = sq[rows, None] + sq[None, :] - 2.0 * pts[rows] @ pts.T
            np.maximum(d2, 0.0, out=d2)
            d2[np.arange(rows.size), rows] = np.inf
            kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
            for r, row in enumerate(rows):
                cand = np.flatnonzero(d2[r] <= kth[r])
                # exact distances on the small candidate set, then (dist, index)
                exact = np.sum((pts[cand] - pts[row]) ** 2, axis=1)
                order = np.lexsort((cand, exact))[:k]
                out[idx[row]] = idx[cand[order]]
    return out


def feat_interpolate(c_j, c_k, lam):
    c_j = np.asarray(c_j, dtype=np.float64)
    return (np.asarray(c_k, dtype=np.float64) - c_j) * lam + c_j


def feat_extrapolate(c_j, c_k, lam):
    c_j = np.asarray(c_j, dtype=np.float64)
    return (c_j - np.asarray(c_k, dtype=np.float64)) * lam + c_j


def feat_noise(features, gamma, rng):
    """Add ``gamma * N(0, sigma_i^2)`` with per-dimension dataset std ``sigma_i``."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise ValueError("feat_noise needs a non-empty feature set")
    sigma = features.std(axis=0)
    return features + gamma * sigma * rng.standard_normal(features.shape)


def feat_jitter(features, sigma, rng):
    features = np.asarray(features, dtype=np.float64)
    return features + sigma * rng.standard_normal(features.shape)


# ---------------------------------------------------------------------------
# input space
# ---------------------------------------------------------------------------

def inp_magnify(window, rng, low=0.4, high=0.8):
    """Keep a random trailing fraction of the window, stretch it back to full length."""
    window = np.asarray(window, dtype=np.float64)
    n = window.shape[-1]
    frac = rng.uniform(low, high)
    keep = max(2, int(round(frac * n)))
    tail = window[n - keep:]
    grid = np.linspace(0.0, keep - 1.0, n)
    return np.interp(grid, np.arange(keep, dtype=np.float64), tail)


def inp_jitter(window, sigma, rng):
    window = np.asarray(window, dtype=np.float64)
    return window + sigma * rng.standard_normal(window.shape)


def inp_pool(window, pool_window=3):
    """Replace each block of ``pool_window`` consecutive values by the block mean."""
    window = np.asarray(window, dtype=np.float64)
    n = window.shape[-1]
    out = np.empty_like(window)
    for start in range(0, n, pool_window):
        block = window[..., start:start + pool_window]
        out[..., start:start + pool_window] = block.mean(axis=-1, keepdims=True)
    return out


def inp_timewarp(window, rng, knots=4, warp_sigma=0.2):
    """Resample along a smooth random monotone time map with pinned endpoints.

    Local speeds ~ N(1, warp_sigma^2) at ``knots + 2`` evenly spaced points are
    joined by a cubic spline, integrated, and rescaled onto ``[0, n-1]``.
    """
    window = np.asarray(window, dtype=np.float64)
    n = window.shape[-1]
    t = np.arange(n, dtype=np.float64)
    knot_x = np.linspace(0.0, n - 1.0, knots + 2)
    speeds = rng.normal(1.0, warp_sigma, knots + 2)
    if warp_sigma == 0:
        return window.copy()
    speed = np.clip(CubicSpline(knot_x, speeds)(t), 1e-3, None)
    warped = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]))])
    warped = warped / warped[-1] * (n - 1.0)
    warped[-1] = n - 1.0
    return np.interp(warped, t, window)


# ---------------------------------------------------------------------------
# dataset level
# ---------------------------------------------------------------------------

@dataclass
class AugmentedSet:
    originals: np.ndarray
    augmented: np.ndarray
    labels: np.ndarray
    next_return: np.ndarray
    sources: np.ndarray | None = None  # (N, 2) index pairs for neighbour methods

    def combined(self):
        """Originals followed by augmented copies, with duplicated labels/returns."""
        return (np.concatenate([self.originals, self.augmented]),
                np.concatenate([self.labels, self.labels]),
                np.concatenate([self.next_return, self.next_return]))

    def __len__(self):
        return 2 * len(self.originals)


def augment_dataset(data, labels, next_return, spec: AugmentationSpec,
                    space: str | None = None) -> AugmentedSet:
    """One augmented copy per sample, labels and next returns carried over.

    ``data`` is an (N, H) feature matrix for feature-space kinds or an (N, T)
    window matrix for input-space kinds; ``space`` may be given to assert which.
    """
    data = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels)
    next_return = np.asarray(next_return, dtype=np.float64)
    if space is not None and space != spec.space:
        raise ValueError(f"{spec.kind} expects {spec.space}-space data, got {space}-space")
    if data.ndim != 2 or len(data) != len(labels) or len(labels) != len(next_return):
        raise ValueError("data, labels and next_return must align")
    rng = np.random.default_rng(spec.seed)
    sources = None
    kind = spec.kind
    if kind in ("feat_interpolate", "feat_extrapolate"):
        nbrs = knn_intraclass(data, labels, spec.k_neighbors)
        pick = rng.integers(0, spec.k_neighbors, size=len(data))
        partner = nbrs[np.arange(len(data)), pick]
        op = feat_interpolate if kind == "feat_interpolate" else feat_extrapolate
        augmented = op(data, data[partner], spec.lam)
        sources = np.column_stack([np.arange(len(data)), partner])
    elif kind == "feat_noise":
        augmented = feat_noise(data, spec.gamma, rng)
    elif kind == "feat_jitter":
        augmented = feat_jitter(data, spec.sigma, rng)
    elif kind == "inp_jitter":
        augmented = inp_jitter(data, spec.sigma, rng)
    elif kind == "inp_pool":
        augmented = inp_pool(data, spec.pool_window)
    elif kind == "inp_magnify":
        augmented = np.stack([inp_magnify(w, rng, spec.magnify_low, spec.magnify_high)
                              for w in data]) if len(data) else data.copy()
    elif kind == "inp_timewarp":
        augmented = np.stack([inp_timewarp(w, rng, spec.knots, spec.warp_sigma)
                              for w in data]) if len(data) else data.copy()
    else:  # pragma: no cover - guarded by AugmentationSpec
        raise ValueError(kind)
    return AugmentedSet(data, np.ascontiguousarray(augmented), labels.copy(),
                        next_return.copy(), sources)


def describe(spec: AugmentationSpec) -> str:
    parts = [spec.kind]
    if spec.kind in ("feat_interpolate", "feat_extrapolate"):
        parts.append(f"lam={spec.lam:g},k={spec.k_neighbors}")
    elif spec.kind == "feat_noise":
        parts.append(f"gamma={spec.gamma:g}")
    elif spec.kind in ("feat_jitter", "inp_jitter"):
        parts.append(f"sigma={spec.sigma:g}")
    elif spec.kind == "inp_pool":
        parts.append(f"window={spec.pool_window}")
    elif spec.kind == "inp_timewarp":
        parts.append(f"knots={spec.knots},sigma={spec.warp_sigma:g}")
    else:
        parts.append(f"range=({spec.magnify_low:g},{spec.magnify_high:g})")
    return " ".join(parts)

