"""Shared URA codebook: construction, synthesis and coherence analysis.

Codewords are ROWS: row i of the synthesized codebook is the length-d
waveform transmitted by any device whose quantised fragment maps to
index i.  The received superposition is y = x @ C for a count vector x.
Codebooks are immutable after construction and safe to share across
simulation workers.
"""

from dataclasses import dataclass

import numpy as np

INIT_SCHEMES = ("gaussian", "bernoulli", "data_driven_pinv")

# Rows whose pre-normalisation norm falls below this would amplify
# numerical noise unboundedly when renormalised.
DEGENERATE_ROW_NORM = 1e-12

ROW_NORM_TOL = 1e-9


def _readonly(a):
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BaseMatrix:
    """Base codeword vectors D (n x d) plus the scheme that produced them."""

    D: np.ndarray
    init_scheme: str

    def __post_init__(self):
        D = _readonly(self.D)
        if D.ndim != 2 or D.shape[0] < 1 or D.shape[1] < 1:
            raise ValueError(f"base matrix must be 2-D with n,d >= 1, got shape {D.shape}")
        if not np.all(np.isfinite(D)):
            raise ValueError("base matrix contains non-finite entries")
        object.__setattr__(self, "D", D)

    @property
    def shape(self):
        return self.D.shape


@dataclass(frozen=True)
class ShearMatrix:
    """Learnt d x d shear/rotation applied to the base matrix."""

    W: np.ndarray

    def __post_init__(self):
        W = _readonly(self.W)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError(f"shear matrix must be square, got shape {W.shape}")
        if not np.all(np.isfinite(W)):
            raise ValueError("shear matrix contains non-finite entries")
        object.__setattr__(self, "W", W)

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d))


@dataclass(frozen=True)
class UraCodebook:
    """Synthesized codebook C (n x d); every row has unit l2 norm."""

    C: np.ndarray

    def __post_init__(self):
        C = _readonly(self.C)
        if C.ndim != 2:
            raise ValueError(f"codebook must be 2-D, got shape {C.shape}")
        norms = np.linalg.norm(C, axis=1)
        if not np.all(np.abs(norms - 1.0) <= ROW_NORM_TOL):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(
                f"codebook row {worst} has norm {norms[worst]!r}, expected 1 +/- {ROW_NORM_TOL}"
            )
        object.__setattr__(self, "C", C)

    @property
    def n(self):
        return self.C.shape[0]

    @property
    def d(self):
        return self.C.shape[1]


def init_base(n, d, scheme, seed, fragments=None):
    """Draw an n x d base matrix D under one of the supported schemes.

    gaussian / bernoulli draw i.i.d. entries; data_driven_pinv shapes the
    row distribution with the second moment of a calibration fragment set
    so that codeword directions concentrate where the data does (recipe:
    D = M @ sqrt(F'F/m + eps*I) for a seeded standard-normal M, which is
    the matched whitening counterpart of a pseudo-inverse sensing init).
    Deterministic given (scheme, seed, fragments).
    """
    if n < 1 or d < 1:
        raise ValueError(f"n and d must be >= 1, got n={n}, d={d}")
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}, expected one of {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    if scheme == "gaussian":
        D = rng.standard_normal((n, d))
    elif scheme == "bernoulli":
        D = rng.integers(0, 2, size=(n, d)).astype(np.float64) * 2.0 - 1.0
    else:  # data_driven_pinv
        if fragments is None or len(fragments) == 0:
            raise ValueError("missing calibration data: data_driven_pinv needs fragments")
        F = np.asarray(fragments, dtype=np.float64)
        if F.ndim != 2 or F.shape[1] != d:
            raise ValueError(f"fragments must be length-{d} vectors, got shape {F.shape}")
        if not np.all(np.isfinite(F)):
            raise ValueError("fragments contain non-finite entries")
        second_moment = F.T @ F / F.shape[0] + 1e-6 * np.eye(d)
        # Symmetric PSD square root via eigendecomposition.
        evals, evecs = np.linalg.eigh(second_moment)
        root = (evecs * np.sqrt(np.maximum(evals, 0.0))) @ evecs.T
        M = rng.standard_normal((n, d))
        D = M @ root
    return BaseMatrix(D, scheme)


def synthesize(base, shear):
    """Synthesize the unit-row-norm codebook C from D and W."""
    D, W = base.D, shear.W
    if D.shape[1] != W.shape[0]:
        raise ValueError(f"shape mismatch: D is {D.shape}, W is {W.shape}")
    C = D @ W
    norms = np.linalg.norm(C, axis=1)
    if np.any(norms < DEGENERATE_ROW_NORM):
        bad = int(np.argmin(norms))
        raise ValueError(f"degenerate codeword: row {bad} has norm {norms[bad]:.3e}")
    return UraCodebook(C / norms[:, None])


@dataclass(frozen=True)
class CoherenceReport:
    max_cross_corr: float
    mean_cross_corr: float
    top_max_cross_corr: float
    top_mean_cross_corr: float
    top_fraction: float
    sigma_max: float
    sigma_min: float
    sigma_ratio: float


def _offdiag_abs(gram):
    n = gram.shape[0]
    mask = ~np.eye(n, dtype=bool)
    return np.abs(gram[mask])


def coherence_stats(codebook, pi=None, top_fraction=0.1):
    """Cross-correlation and singular-value spread of a codebook.

    The 'top' statistics restrict to the most popular rows: the top
    `top_fraction` share by pi when given, otherwise the leading rows
    (codebooks are popularity-ordered by convention).
    """
    C = codebook.C
    n = C.shape[0]
    if n < 2:
        raise ValueError("coherence stats need at least 2 codewords")
    if pi is not None:
        pi = np.asarray(pi, dtype=np.float64)
        if pi.shape != (n,):
            raise ValueError(f"pi must have length {n}, got shape {pi.shape}")
        if abs(float(pi.sum()) - 1.0) > 1e-9:
            raise ValueError(f"pi must sum to 1 +/- 1e-9, got {pi.sum()!r}")

    gram = C @ C.T
    off = _offdiag_abs(gram)

    p = max(2, int(np.ceil(top_fraction * n)))
    if pi is not None:
        top_idx = np.argsort(-pi, kind="stable")[:p]
    else:
        top_idx = np.arange(p)
    top_off = _offdiag_abs(gram[np.ix_(top_idx, top_idx)])

    svals = np.linalg.svd(C, compute_uv=False)
    smax, smin = float(svals.max()), float(svals.min())
    return CoherenceReport(
        max_cross_corr=float(off.max()),
        mean_cross_corr=float(off.mean()),
        top_max_cross_corr=float(top_off.max()),
        top_mean_cross_corr=float(top_off.mean()),
        top_fraction=p / n,
        sigma_max=smax,
        sigma_min=smin,
        sigma_ratio=smax / smin if smin > 0 else np.inf,
    )
