"""Device-side compression: k-means++ codebook, popularity ordering,
nearest-neighbour VQ and error-feedback accumulation.

The quantisation codebook is rebuilt by the base station every round from
its own update fragments and broadcast; devices never see raw data from
each other.  QuantCodebook instances are immutable once ordered, and each
device's ErrorAccumulator is independent state, so devices can be
simulated in parallel.
"""

from dataclasses import dataclass

import numpy as np

# Lloyd iteration cap; assignment fixpoints are usually reached well before.
DEFAULT_KMEANS_ITERS = 100

# Scale of the jitter applied to padded duplicate centroids when there are
# fewer distinct fragments than requested centroids.
PAD_NOISE_SCALE = 1e-6


@dataclass(frozen=True)
class QuantCodebook:
    """Centroid matrix Q (n x d) plus the popularity distribution pi."""

    Q: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        Q = np.ascontiguousarray(np.asarray(self.Q, dtype=np.float64))
        pi = np.ascontiguousarray(np.asarray(self.pi, dtype=np.float64))
        if Q.ndim != 2:
            raise ValueError(f"Q must be 2-D, got shape {Q.shape}")
        if pi.shape != (Q.shape[0],):
            raise ValueError(f"pi must have length {Q.shape[0]}, got shape {pi.shape}")
        if np.any(pi < 0) or abs(float(pi.sum()) - 1.0) > 1e-9:
            raise ValueError("pi must be non-negative and sum to 1 +/- 1e-9")
        Q.setflags(write=False)
        pi.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "pi", pi)

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def d(self):
        return self.Q.shape[1]


@dataclass(frozen=True)
class ErrorAccumulator:
    """Per-device quantisation residual carried between rounds."""

    e: np.ndarray
    device_id: int

    def __post_init__(self):
        e = np.asarray(self.e, dtype=np.float64)
        if not np.all(np.isfinite(e)):
            raise ValueError(f"accumulator for device {self.device_id} is non-finite")
        object.__setattr__(self, "e", e)

    @classmethod
    def zeros(cls, length, device_id):
        return cls(np.zeros(length), device_id)


def _sq_dists(points, centers):
    """Pairwise squared Euclidean distances, (m, k)."""
    # (a-b)^2 expansion; clip tiny negatives from cancellation.
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_seed(points, k, rng):
    m = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(m))
    centers[0] = points[first]
    d2 = _sq_dists(points, centers[:1])[:, 0]
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # All remaining mass on existing centers; fall back to uniform.
            idx = int(rng.integers(m))
        else:
            idx = int(rng.choice(m, p=d2 / total))
        centers[j] = points[idx]
        d2 = np.minimum(d2, _sq_dists(points, centers[j : j + 1])[:, 0])
    return centers


def _lloyd(points, centers, max_iters):
    """Lloyd iterations to an assignment fixpoint, with empty-cluster repair
    by splitting the highest-inertia cluster."""
    k = centers.shape[0]
    assign = np.full(points.shape[0], -1)
    for _ in range(max_iters):
        d2 = _sq_dists(points, centers)
        new_assign = np.argmin(d2, axis=1)
        # Repair empty clusters one at a time, deterministically.
        while True:
            counts = np.bincount(new_assign, minlength=k)
            empties = np.flatnonzero(counts == 0)
            if empties.size == 0:
                break
            inertia = np.bincount(new_assign, weights=d2[np.arange(points.shape[0]), new_assign], minlength=k)
            donor = int(np.argmax(inertia))
            members = np.flatnonzero(new_assign == donor)
            far = members[int(np.argmax(d2[members, donor]))]
            centers[empties[0]] = points[far]
            d2[:, empties[0]] = _sq_dists(points, centers[empties[0] : empties[0] + 1])[:, 0]
            new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = points[members].mean(axis=0)
    return centers, assign


def build_codebook(fragments, n, seed, max_iters=DEFAULT_KMEANS_ITERS):
    """Cluster calibration fragments into an n-centroid codebook.

    k-means++ seeding followed by Lloyd iterations until the assignment
    stops changing (or max_iters).  With fewer distinct fragments than n,
    the remaining rows are filled with jittered copies of the most popular
    centroid so downstream shapes stay fixed.  pi starts uniform;
    popularity_order sets the real distribution.
    """
    F = np.asarray(fragments, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] == 0:
        raise ValueError("need at least one fragment")
    if not np.all(np.isfinite(F)):
        raise ValueError("fragments contain non-finite entries")
    rng = np.random.default_rng(seed)
    distinct = np.unique(F, axis=0)
    k = min(n, distinct.shape[0])

    centers = _kmeanspp_seed(F, k, rng)
    centers, assign = _lloyd(F, centers, max_iters)

    if k < n:
        counts = np.bincount(assign, minlength=k)
        top = int(np.argmax(counts))
        pad = centers[top][None, :] + PAD_NOISE_SCALE * rng.standard_normal((n - k, F.shape[1]))
        centers = np.vstack([centers, pad])
    pi = np.full(n, 1.0 / n)
    return QuantCodebook(centers, pi)


def quantize(u, codebook):
    """Index of the nearest centroid; ties go to the smallest index."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (codebook.d,):
        raise ValueError(f"expected a length-{codebook.d} vector, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("input vector is non-finite")
    return int(np.argmin(_sq_dists(u[None, :], codebook.Q)[0]))


def quantize_batch(U, codebook):
    """Vectorised quantize over rows of U, same tie-break rule."""
    U = np.asarray(U, dtype=np.float64)
    return np.argmin(_sq_dists(U, codebook.Q), axis=1)


def popularity_order(codebook, fragments):
    """Measure centroid usage on fragments and sort rows most-popular first.

    Popularity is the normalised assignment count; the permutation is a
    stable sort so tied centroids keep their relative order.
    """
    F = np.asarray(fragments, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] == 0:
        raise ValueError("need at least one fragment")
    idx = quantize_batch(F, codebook)
    counts = np.bincount(idx, minlength=codebook.n)
    pi = counts / counts.sum()
    order = np.argsort(-pi, kind="stable")
    return QuantCodebook(codebook.Q[order], pi[order])


def fragment(vec, frag_len):
    """Split a vector into length-frag_len rows, zero-padding the tail."""
    vec = np.asarray(vec, dtype=np.float64)
    n_frag = -(-vec.size // frag_len)
    padded = np.zeros(n_frag * frag_len)
    padded[: vec.size] = vec
    return padded.reshape(n_frag, frag_len)


def apply_error_feedback(delta_w, acc, codebook, frag_len):
    """Quantise delta_w + carried error; return indices and the new accumulator.

    The compensated update s = delta_w + e is fragmented (zero-padded on
    the right), each fragment quantised, and the new residual is
    e' = s - dequantised(s) restricted to the unpadded length, so the
    telescoping identity sum_t Q(s_t) = sum_t delta_t + e_0 - e_T holds
    exactly in exact arithmetic.
    """
    delta_w = np.asarray(delta_w, dtype=np.float64)
    if not np.all(np.isfinite(delta_w)):
        raise ValueError("delta_w contains non-finite entries")
    if frag_len != codebook.d:
        raise ValueError(f"frag_len {frag_len} does not match codebook d {codebook.d}")
    if delta_w.shape != acc.e.shape:
        raise ValueError(f"delta_w shape {delta_w.shape} does not match accumulator {acc.e.shape}")
    s = delta_w + acc.e
    frags = fragment(s, frag_len)
    idx = quantize_batch(frags, codebook)
    recon = codebook.Q[idx].reshape(-1)[: s.size]
    new_acc = ErrorAccumulator(s - recon, acc.device_id)
    return idx, new_acc


def dequantize(counts, codebook):
    """Sum of centroids weighted by integer counts (unnormalised aggregate)."""
    counts = np.asarray(counts)
    if counts.shape != (codebook.n,):
        raise ValueError(f"counts must have length {codebook.n}, got shape {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    return counts.astype(np.float64) @ codebook.Q
