"""Uplink model: simultaneous codeword transmission, linear superposition,
and AWGN at a configured SNR.

SNR convention: codeword rows are unit-norm, so K_a near-orthogonal
concurrent transmissions carry per-symbol signal power K_a/d, and
snr_db = 10*log10((K_a/d)/sigma^2).  Noise is drawn fresh per call from
the configured seed; the noiseless part is exactly x @ C.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ActivityVector:
    """Per-codeword device counts for one fragment slot."""

    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x)
        if x.ndim != 1:
            raise ValueError(f"activity vector must be 1-D, got shape {x.shape}")
        if not np.issubdtype(x.dtype, np.integer):
            as_int = np.rint(x).astype(np.int64)
            if not np.allclose(x, as_int):
                raise ValueError("activity vector entries must be integers")
            x = as_int
        else:
            x = x.astype(np.int64)
        if np.any(x < 0):
            raise ValueError("activity vector entries must be non-negative")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def k_a(self):
        return int(self.x.sum())

    @property
    def support_size(self):
        return int(np.count_nonzero(self.x))


@dataclass(frozen=True)
class ChannelConfig:
    """snr_db and seed; sigma2_override forces an exact noise variance
    (0.0 gives a noiseless channel for degenerate-point tests)."""

    snr_db: float
    seed: int
    sigma2_override: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db!r}")


def noise_variance(snr_db, k_a, d):
    """Per-symbol noise variance for the stated SNR convention."""
    if k_a < 1 or d < 1:
        raise ValueError(f"k_a and d must be >= 1, got k_a={k_a}, d={d}")
    return (k_a / d) / 10.0 ** (snr_db / 10.0)


def transmit(activity, codebook, cfg):
    """Superpose the selected codewords and add white Gaussian noise.

    The variance follows noise_variance with the TRUE per-round K_a
    (sum of the activity vector).  Deterministic given cfg.seed.
    """
    x = activity.x
    C = codebook.C
    if x.shape[0] != C.shape[0]:
        raise ValueError(f"activity length {x.shape[0]} does not match codebook n {C.shape[0]}")
    k_a = activity.k_a
    if k_a < 1:
        raise ValueError("no active devices")
    clean = x.astype(np.float64) @ C
    if cfg.sigma2_override is not None:
        sigma2 = cfg.sigma2_override
    else:
        sigma2 = noise_variance(cfg.snr_db, k_a, C.shape[1])
    if sigma2 == 0.0:
        return clean
    rng = np.random.default_rng(cfg.seed)
    return clean + rng.normal(0.0, np.sqrt(sigma2), size=C.shape[1])
