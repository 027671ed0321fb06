"""Activity-vector recovery from the noisy superposition.

The decoder unrolls a fixed number of message-passing layers.  Each layer
runs an output block (measurement-domain residual/variance update with a
learnable gain and damping), an input block (scalar pseudo-channel,
spike-and-Poisson-slab posterior, optional CNN refinement), and smoothed
EM refreshes of the active-device count, popularity distribution and
noise variance.  A final post-processing stage projects the relaxed
estimate onto non-negative integers with the right total.

Two modes share the same code path: "learnt" uses per-layer trained
scalars plus the CNN; "baseline" pins gain=1, damping=0.5,
precision scale=1, temperature=1, skips the CNN, and keeps EM step sizes
at 0.5 — the un-learnt comparator.

decode() is a pure function of its inputs; decode_batch() is the
vectorised fast path used by the round loop and is checked against
decode() element-by-element in the tests.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .channel import ActivityVector

SIGMA2_FLOOR = 1e-8
L1_FLOOR = 1e-12
VAR1_FLOOR = 1e-12
DIVERGENCE_NORM = 1e6

CNN_IN, CNN_HIDDEN, CNN_OUT, CNN_KERNEL = 6, 32, 1, 3


class DecoderError(RuntimeError):
    """Raised on non-finite intermediates or divergence; carries the layer."""

    def __init__(self, message, layer):
        super().__init__(f"{message} (layer {layer})")
        self.layer = layer


def gamma_from_raw(gamma_raw):
    """Centred tanh map restricting the gain to [0.3, 2]."""
    return 0.3 + 1.7 * (np.tanh(gamma_raw) + 1.0) / 2.0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    return float(np.log(np.expm1(y)))


def zero_cnn_weights():
    return (
        np.zeros((CNN_HIDDEN, CNN_IN, CNN_KERNEL)),
        np.zeros(CNN_HIDDEN),
        np.zeros((CNN_OUT, CNN_HIDDEN, CNN_KERNEL)),
        np.zeros(CNN_OUT),
    )


@dataclass(frozen=True)
class LayerParams:
    """Raw (pre-squash) per-layer scalars plus the CNN denoiser weights.

    Box constraints are enforced by squashing maps (tanh for the gain,
    sigmoid for damping/blend/EM steps, softplus for the precision scale
    and temperature), never by clipping.
    """

    gamma_raw: float = 0.0
    eta_raw: float = 0.0
    alpha_raw: float = inv_softplus(1.0)
    tau_raw: float = inv_softplus(1.0)
    rho_raw: float = 0.0
    sk_raw: float = 0.0
    spi_raw: float = 0.0
    ssig_raw: float = 0.0
    conv1_w: np.ndarray = field(default_factory=lambda: np.zeros((CNN_HIDDEN, CNN_IN, CNN_KERNEL)))
    conv1_b: np.ndarray = field(default_factory=lambda: np.zeros(CNN_HIDDEN))
    conv2_w: np.ndarray = field(default_factory=lambda: np.zeros((CNN_OUT, CNN_HIDDEN, CNN_KERNEL)))
    conv2_b: np.ndarray = field(default_factory=lambda: np.zeros(CNN_OUT))

    def __post_init__(self):
        shapes = {
            "conv1_w": (CNN_HIDDEN, CNN_IN, CNN_KERNEL),
            "conv1_b": (CNN_HIDDEN,),
            "conv2_w": (CNN_OUT, CNN_HIDDEN, CNN_KERNEL),
            "conv2_b": (CNN_OUT,),
        }
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != want:
                raise ValueError(f"shape mismatch: {name} is {arr.shape}, expected {want}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def gamma(self):
        return float(gamma_from_raw(self.gamma_raw))

    @property
    def eta(self):
        return float(sigmoid(self.eta_raw))

    @property
    def alpha_scale(self):
        return float(softplus(self.alpha_raw))

    @property
    def tau(self):
        return float(softplus(self.tau_raw))

    @property
    def rho(self):
        return float(sigmoid(self.rho_raw))

    @property
    def s_k(self):
        return float(sigmoid(self.sk_raw))

    @property
    def s_pi(self):
        return float(sigmoid(self.spi_raw))

    @property
    def s_sigma(self):
        return float(sigmoid(self.ssig_raw))

    @classmethod
    def baseline(cls):
        """Fixed un-learnt layer: gain 1, damping 0.5, scale 1, temperature 1,
        EM steps 0.3, zero CNN (skipped anyway in baseline mode)."""
        gamma_raw = float(np.arctanh((1.0 - 0.3) / 1.7 * 2.0 - 1.0))
        em_raw = float(np.log(0.3 / 0.7))
        return cls(gamma_raw=gamma_raw, sk_raw=em_raw, spi_raw=em_raw, ssig_raw=em_raw)


@dataclass(frozen=True)
class PostProcConfig:
    top_k: int | None = None  # None: support size = min(round(K_a_hat), n)
    refit_iters: int = 1


@dataclass(frozen=True)
class DecoderParams:
    """Layer stack plus mode and posterior truncation.

    The learnt unroll runs its trained depth (10 by default); the
    un-learnt comparator is an iterative algorithm and uses a longer
    fixed stack with moderate EM step sizes (0.3), which it needs to warm
    up past the weak-evidence phase.
    """

    layers: tuple
    mode: str = "learnt"
    k_max: int | None = None  # None: truncation derived from the initial count estimate
    postproc: PostProcConfig = field(default_factory=PostProcConfig)

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("decoder needs at least one layer")
        if self.mode not in ("learnt", "baseline"):
            raise ValueError(f"unknown decoder mode {self.mode!r}")
        object.__setattr__(self, "layers", tuple(self.layers))

    @classmethod
    def baseline(cls, t_layers=30, k_max=32):
        return cls(
            layers=tuple(LayerParams.baseline() for _ in range(t_layers)),
            mode="baseline",
            k_max=k_max,
        )


@dataclass
class DecoderState:
    x_hat: np.ndarray  # (n,) count estimate
    nu: np.ndarray  # (n,) codeword-domain variance proxy
    Z: np.ndarray  # (d,) measurement-domain residual
    V: np.ndarray  # (d,) measurement variance proxy
    k_a_hat: float
    pi: np.ndarray  # (n,) popularity simplex vector
    sigma2: float
    layer: int = 0
    m: np.ndarray | None = None  # last posterior means (EM input)


@dataclass
class DecodeDiagnostics:
    residual_norms: list = field(default_factory=list)
    ka_trajectory: list = field(default_factory=list)
    sigma2_trajectory: list = field(default_factory=list)
    var1_floor_events: int = 0
    layers_run: int = 0
    x_hat_relaxed: np.ndarray | None = None  # final estimate before integer projection


def init_state(y, pi0, sigma2_0, k_a_0=None):
    """Fresh decoder state: x_hat=0, nu=1, Z=y, V=1.

    The default initial device-count estimate is max(1, ||y||^2 - d*sigma2_0),
    which matches the unit-row-norm power convention of the channel.
    """
    y = np.asarray(y, dtype=np.float64)
    pi0 = np.asarray(pi0, dtype=np.float64)
    n, d = pi0.shape[0], y.shape[0]
    if abs(float(pi0.sum()) - 1.0) > 1e-6 or np.any(pi0 < 0):
        raise ValueError("pi0 must lie on the simplex")
    if k_a_0 is None:
        k_a_0 = max(1.0, float(y @ y) - d * sigma2_0)
    return DecoderState(
        x_hat=np.zeros(n),
        nu=np.ones(n),
        Z=y.copy(),
        V=np.ones(d),
        k_a_hat=float(k_a_0),
        pi=pi0.copy(),
        sigma2=max(float(sigma2_0), SIGMA2_FLOOR),
        layer=0,
    )


PRIOR_MIX = 0.05


def decoder_prior(pi, eps=PRIOR_MIX):
    """Broadcast popularity mixed with uniform for use as the decode prior.

    The raw popularity histogram can contain exact zeros (codewords the
    base station never used), which would pin the spike-and-slab posterior
    at zero no matter the evidence; the uniform floor keeps every codeword
    recoverable.  Training uses the same mix.
    """
    pi = np.asarray(pi, dtype=np.float64)
    return (1.0 - eps) * pi + eps / pi.shape[-1]


def default_k_max(k_a_hat):
    """Posterior truncation: the Poisson tail beyond this is negligible.

    Capped so a wildly overestimated initial count cannot blow up the
    posterior grid.
    """
    return int(min(1024, max(32, np.ceil(k_a_hat + 10.0 * np.sqrt(k_a_hat + 1.0)))))


def output_block(state, C, y, p):
    """Measurement-domain residual/variance update with gain and damping."""
    gamma, eta = p.gamma, p.eta
    Z_tmp = state.x_hat @ C
    V_new = state.nu @ (C * C)
    Z_tilde = Z_tmp - gamma * ((y - state.Z) * V_new / (state.sigma2 + state.V))
    Z_plus = eta * state.Z + (1.0 - eta) * Z_tilde
    V_plus = eta * state.V + (1.0 - eta) * V_new
    if not (np.all(np.isfinite(Z_plus)) and np.all(np.isfinite(V_plus))):
        raise DecoderError("non-finite output-block update", state.layer)
    return DecoderState(
        x_hat=state.x_hat,
        nu=state.nu,
        Z=Z_plus,
        V=V_plus,
        k_a_hat=state.k_a_hat,
        pi=state.pi,
        sigma2=state.sigma2,
        layer=state.layer,
        m=state.m,
    )


def pseudo_channel(state, C, y, p):
    """Per-codeword pseudo-observation R and pseudo-noise variance.

    Returns (R, Sigma_pc, n_floored) where n_floored counts precision
    entries caught by the degeneracy floor.
    """
    g_inv = p.alpha_scale / (state.sigma2 + state.V)
    var1 = (C * C) @ g_inv
    n_floored = int(np.count_nonzero(var1 < VAR1_FLOOR))
    var1 = np.maximum(var1, VAR1_FLOOR)
    var2 = ((y - state.Z) * g_inv) @ C.T
    R = state.x_hat + var2 / var1
    return R, 1.0 / var1, n_floored


def spike_slab_posterior(R, Sigma, lam, tau, k_max):
    """Posterior mean/variance of an integer count under a spike-and-slab
    prior (point mass at zero, Poisson slab) and tempered Gaussian
    pseudo-likelihood.

    alpha = 1 - exp(-lam) is the activity probability; the temperature tau
    scales the pseudo-likelihood variance, so tau -> 0 is MAP-like and
    large tau flattens the likelihood.  Supports scalars or same-shape
    arrays for (R, Sigma, lam).
    """
    R = np.asarray(R, dtype=np.float64)
    Sigma = np.asarray(Sigma, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    scalar = R.ndim == 0
    R, Sigma, lam = np.atleast_1d(R), np.atleast_1d(Sigma), np.atleast_1d(lam)

    ks = np.arange(k_max + 1, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_lam = np.where(lam > 0, np.log(np.where(lam > 0, lam, 1.0)), -np.inf)
        # log prior over k: spike folds into k=0; slab is alpha * Pois(k; lam).
        log_pois = ks[:, None] * log_lam[None, :] - lam[None, :] - gammaln(ks + 1.0)[:, None]
        log_pois[0] = -lam  # 0 * log(0) guard: Pois(0; lam) = exp(-lam)
        alpha = -np.expm1(-lam)
        log_alpha = np.where(alpha > 0, np.log(np.where(alpha > 0, alpha, 1.0)), -np.inf)
        log_prior = log_alpha[None, :] + log_pois
        # prior(0) = (1 - alpha) + alpha * Pois(0; lam)
        log_prior[0] = np.log(np.exp(-lam) + np.exp(log_prior[0]))

    log_w = log_prior - (R[None, :] - ks[:, None]) ** 2 / (2.0 * tau * Sigma[None, :])
    log_w -= log_w.max(axis=0, keepdims=True)
    w = np.exp(log_w)
    w /= w.sum(axis=0, keepdims=True)
    m = ks @ w
    v = np.maximum((ks**2) @ w - m**2, 0.0)
    if scalar:
        return float(m[0]), float(v[0])
    return m, v


def cnn_forward(phi, weights):
    """1-D CNN denoiser: conv(6->32, k=3, zero pad) -> ReLU -> conv(32->1, k=3).

    phi is the (6, n) feature map; returns a length-n refinement.  The
    convolution is cross-correlation with zero padding (stride 1), matching
    the training-side convention.
    """
    w1, b1, w2, b2 = weights
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2 or phi.shape[0] != CNN_IN:
        raise ValueError(f"feature map must be ({CNN_IN}, n), got shape {phi.shape}")
    if not np.all(np.isfinite(phi)):
        raise ValueError("feature map contains non-finite entries")
    if w1.shape != (CNN_HIDDEN, CNN_IN, CNN_KERNEL) or w2.shape != (CNN_OUT, CNN_HIDDEN, CNN_KERNEL):
        raise ValueError("shape mismatch: conv weights do not match the declared 6->32->1 stack")
    h = _conv1d_same(phi, w1, b1)
    h = np.maximum(h, 0.0)
    out = _conv1d_same(h, w2, b2)
    return out[0]


def _conv1d_same(x, w, b):
    """Cross-correlation along the last axis with zero 'same' padding.

    x: (c_in, n), w: (c_out, c_in, k), b: (c_out,) -> (c_out, n).
    """
    k = w.shape[2]
    pad = k // 2
    n = x.shape[1]
    xp = np.zeros((x.shape[0], n + 2 * pad))
    xp[:, pad : pad + n] = x
    windows = np.stack([xp[:, i : i + n] for i in range(k)])  # (k, c_in, n)
    return np.einsum("ock,kcn->on", w, windows) + b[:, None]


def input_block(state, C, y, p, mode="learnt", k_max=None):
    """Codeword-domain denoising: pseudo-channel, posterior, CNN blend."""
    R, Sigma_pc, n_floored = pseudo_channel(state, C, y, p)
    lam = state.k_a_hat * state.pi
    if k_max is None:
        k_max = default_k_max(state.k_a_hat)
    m, v = spike_slab_posterior(R, Sigma_pc, lam, p.tau, k_max)
    if mode == "baseline":
        x_new = m
    else:
        alpha = -np.expm1(-lam)
        phi = np.stack([R, np.sqrt(Sigma_pc), m, np.sqrt(v), alpha, lam])
        x_tilde = m + cnn_forward(phi, (p.conv1_w, p.conv1_b, p.conv2_w, p.conv2_b))
        rho = p.rho
        x_new = (1.0 - rho) * m + rho * x_tilde
    if not np.all(np.isfinite(x_new)):
        raise DecoderError("non-finite input-block update", state.layer)
    new = DecoderState(
        x_hat=x_new,
        nu=v,
        Z=state.Z,
        V=state.V,
        k_a_hat=state.k_a_hat,
        pi=state.pi,
        sigma2=state.sigma2,
        layer=state.layer,
        m=m,
    )
    return new, n_floored


def em_update(state, m, p, C, y):
    """Smoothed EM refresh of K_a_hat, pi and the noise variance.

    The count estimate moves toward sum(m), the popularity toward the
    normalised posterior means, and the noise variance moment-matches the
    residual energy in the log domain.
    """
    s_k, s_pi, s_sig = p.s_k, p.s_pi, p.s_sigma
    k_new = max(1.0, (1.0 - s_k) * state.k_a_hat + s_k * float(m.sum()))
    pi_new = (1.0 - s_pi) * state.pi + s_pi * m / max(float(np.abs(m).sum()), L1_FLOOR)
    pi_new = np.maximum(pi_new, 0.0)
    pi_new /= pi_new.sum()
    resid = y - state.x_hat @ C
    target = max(SIGMA2_FLOOR, float(resid @ resid) / y.shape[0] - float(state.V.mean()))
    log_sig = (1.0 - s_sig) * np.log(state.sigma2) + s_sig * np.log(target)
    sigma2_new = max(float(np.exp(log_sig)), SIGMA2_FLOOR)
    return DecoderState(
        x_hat=state.x_hat,
        nu=state.nu,
        Z=state.Z,
        V=state.V,
        k_a_hat=k_new,
        pi=pi_new,
        sigma2=sigma2_new,
        layer=state.layer,
        m=m,
    )


def _greedy_round(values, total):
    """Round non-negative values to integers summing to total.

    Floor first, then hand out the remaining units by largest fractional
    part (ties: larger value, then smaller index).  If the floors already
    exceed the total, remove units from positive entries by smallest
    fractional part instead.
    """
    floors = np.floor(values)
    frac = values - floors
    out = floors.astype(np.int64)
    deficit = int(total - out.sum())
    if deficit > 0:
        order = np.lexsort((np.arange(values.size), -values, -frac))
        i = 0
        while deficit > 0:
            out[order[i % values.size]] += 1
            deficit -= 1
            i += 1
    elif deficit < 0:
        order = np.lexsort((np.arange(values.size), values, frac))
        i = 0
        while deficit < 0 and out.sum() > 0:
            j = order[i % values.size]
            if out[j] > 0:
                out[j] -= 1
                deficit += 1
            i += 1
    return out


def postprocess(x_hat, k_a_hat, C, y, top_k=None, refit_iters=1):
    """Project the relaxed estimate onto a valid activity vector.

    Clamp negatives, keep the top-K support (K = min(round(K_a_hat), n)
    unless overridden), least-squares refit on the support (clamped
    non-negative), then greedily round so the total equals round(K_a_hat).
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if not np.all(np.isfinite(x_hat)):
        raise ValueError("estimate contains non-finite entries")
    n = x_hat.shape[0]
    total = max(1, int(np.rint(k_a_hat)))
    k = min(total, n) if top_k is None else min(int(top_k), n)

    x = np.maximum(x_hat, 0.0)
    for _ in range(max(1, int(refit_iters))):
        order = np.lexsort((np.arange(n), -x))
        support = np.sort(order[:k])
        refit = np.zeros(n)
        coef, *_ = np.linalg.lstsq(C[support].T, y, rcond=None)
        refit[support] = np.maximum(coef, 0.0)
        x = refit
    out = np.zeros(n, dtype=np.int64)
    out[support] = _greedy_round(x[support], total)
    return ActivityVector(out)


def decode(y, codebook, pi0, params, sigma2_0, k_a_0=None):
    """Run the unrolled decoder on one received vector.

    Returns (activity, k_a_hat, diagnostics) where activity is the integer
    count vector, k_a_hat the unrounded device-count estimate, and
    diagnostics record per-layer residual norms and the K_a/sigma^2
    trajectories.  Raises DecoderError on divergence.
    """
    C = codebook.C
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (C.shape[1],):
        raise ValueError(f"y must have length {C.shape[1]}, got shape {y.shape}")
    state = init_state(y, pi0, sigma2_0, k_a_0)
    k_max = params.k_max if params.k_max is not None else default_k_max(state.k_a_hat)
    diag = DecodeDiagnostics()
    for t, p in enumerate(params.layers):
        state.layer = t
        state = output_block(state, C, y, p)
        state, n_floored = input_block(state, C, y, p, mode=params.mode, k_max=k_max)
        diag.var1_floor_events += n_floored
        state = em_update(state, state.m, p, C, y)
        resid = float(np.linalg.norm(y - state.x_hat @ C))
        diag.residual_norms.append(resid)
        diag.ka_trajectory.append(state.k_a_hat)
        diag.sigma2_trajectory.append(state.sigma2)
        diag.layers_run = t + 1
        if not np.isfinite(resid) or resid > DIVERGENCE_NORM:
            raise DecoderError("decoder diverged", t)
    diag.x_hat_relaxed = state.x_hat.copy()
    activity = postprocess(
        state.x_hat, state.k_a_hat, C, y,
        top_k=params.postproc.top_k, refit_iters=params.postproc.refit_iters,
    )
    return activity, state.k_a_hat, diag


def _posterior_batch(R, Sigma_pc, lam, tau, ks, log_fact):
    """Batched spike-and-slab posterior over counts 0..k_max.

    Same weights as spike_slab_posterior: the likelihood term constant in
    k is dropped (it cancels in the normalisation), leaving
    log w_k = k*A - k^2*B - log k! + log alpha - lam for k >= 1 with
    A = log lam + R/(tau*Sigma) and B = 1/(2*tau*Sigma).
    """
    inv = 1.0 / (tau * Sigma_pc)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_lam = np.where(lam > 0, np.log(np.where(lam > 0, lam, 1.0)), -np.inf)
        A = log_lam + R * inv
        const = np.where(lam > 0, np.log(np.where(lam > 0, -np.expm1(-lam), 1.0)), -np.inf) - lam
        log_w = (
            ks[None, None, 1:] * A[:, :, None]
            - (ks[None, None, 1:] ** 2) * (0.5 * inv)[:, :, None]
            - log_fact[None, None, 1:]
            + const[:, :, None]
        )
    spike0 = np.log(np.exp(-lam) * (2.0 - np.exp(-lam)))  # log prior(0); k=0 likelihood term dropped too
    log_w = np.concatenate([spike0[:, :, None], log_w], axis=2)
    log_w -= log_w.max(axis=2, keepdims=True)
    w = np.exp(log_w)
    w /= w.sum(axis=2, keepdims=True)
    m_post = w @ ks
    v_post = np.maximum(w @ (ks**2) - m_post**2, 0.0)
    return m_post, v_post


def decode_batch(Y, codebook, pi0, params, sigma2_0, k_a_0=None):
    """Vectorised decode over the rows of Y (one fragment slot per row).

    Identical math to decode(); pi0 may be shared (n,) or per-slot (m, n).
    Returns (X, k_hat, diag) with X (m, n) integer counts and k_hat (m,)
    unrounded estimates.  Raises DecoderError if any slot diverges.
    """
    C = codebook.C
    C2 = C * C
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != C.shape[1]:
        raise ValueError(f"Y must be (m, {C.shape[1]}), got shape {Y.shape}")
    m_slots, d = Y.shape
    n = C.shape[0]
    pi0 = np.asarray(pi0, dtype=np.float64)
    pi = np.broadcast_to(pi0, (m_slots, n)).copy()

    if k_a_0 is None:
        k_hat = np.maximum(1.0, np.einsum("md,md->m", Y, Y) - d * sigma2_0)
    else:
        k_hat = np.broadcast_to(np.asarray(k_a_0, dtype=np.float64), (m_slots,)).copy()
    if params.k_max is not None:
        k_max = params.k_max
    else:
        k_max = default_k_max(float(k_hat.max()))
    ks = np.arange(k_max + 1, dtype=np.float64)
    log_fact = gammaln(ks + 1.0)

    x_hat = np.zeros((m_slots, n))
    nu = np.ones((m_slots, n))
    Z = Y.copy()
    V = np.ones((m_slots, d))
    sigma2 = np.full(m_slots, max(float(sigma2_0), SIGMA2_FLOOR))

    diag = DecodeDiagnostics()
    learnt = params.mode == "learnt"
    for t, p in enumerate(params.layers):
        gamma, eta, tau = p.gamma, p.eta, p.tau
        # Output block
        Z_tmp = x_hat @ C
        V_new = nu @ C2
        Z_tilde = Z_tmp - gamma * ((Y - Z) * V_new / (sigma2[:, None] + V))
        Z = eta * Z + (1.0 - eta) * Z_tilde
        V = eta * V + (1.0 - eta) * V_new
        # Pseudo-channel
        g_inv = p.alpha_scale / (sigma2[:, None] + V)
        var1 = g_inv @ C2.T
        diag.var1_floor_events += int(np.count_nonzero(var1 < VAR1_FLOOR))
        var1 = np.maximum(var1, VAR1_FLOOR)
        var2 = ((Y - Z) * g_inv) @ C.T
        R = x_hat + var2 / var1
        Sigma_pc = 1.0 / var1
        lam = k_hat[:, None] * pi
        m_post, v_post = _posterior_batch(R, Sigma_pc, lam, tau, ks, log_fact)
        # CNN refinement + blend
        if learnt:
            alpha = -np.expm1(-lam)
            phi = np.stack(
                [R, np.sqrt(Sigma_pc), m_post, np.sqrt(v_post), alpha, lam], axis=1
            )  # (m, 6, n)
            x_tilde = m_post + _conv1d_same_batch(phi, p)
            x_hat = (1.0 - p.rho) * m_post + p.rho * x_tilde
        else:
            x_hat = m_post
        nu = v_post
        # EM refresh
        s_k, s_pi, s_sig = p.s_k, p.s_pi, p.s_sigma
        k_hat = np.maximum(1.0, (1.0 - s_k) * k_hat + s_k * m_post.sum(axis=1))
        pi = (1.0 - s_pi) * pi + s_pi * m_post / np.maximum(
            np.abs(m_post).sum(axis=1, keepdims=True), L1_FLOOR
        )
        pi = np.maximum(pi, 0.0)
        pi /= pi.sum(axis=1, keepdims=True)
        resid = Y - x_hat @ C
        target = np.maximum(SIGMA2_FLOOR, np.einsum("md,md->m", resid, resid) / d - V.mean(axis=1))
        sigma2 = np.maximum(
            np.exp((1.0 - s_sig) * np.log(sigma2) + s_sig * np.log(target)), SIGMA2_FLOOR
        )
        norms = np.linalg.norm(resid, axis=1)
        if not np.all(np.isfinite(norms)) or np.any(norms > DIVERGENCE_NORM):
            raise DecoderError("decoder diverged", t)
        diag.residual_norms.append(float(norms.mean()))
        diag.ka_trajectory.append(k_hat.copy())
        diag.sigma2_trajectory.append(sigma2.copy())
        diag.layers_run = t + 1

    diag.x_hat_relaxed = x_hat.copy()
    X = np.zeros((m_slots, n), dtype=np.int64)
    for i in range(m_slots):
        X[i] = postprocess(
            x_hat[i], k_hat[i], C, Y[i],
            top_k=params.postproc.top_k, refit_iters=params.postproc.refit_iters,
        ).x
    return X, k_hat, diag


def _conv1d_same_batch(phi, p):
    """Batched CNN denoiser: phi (m, 6, n) -> (m, n)."""
    k = CNN_KERNEL
    pad = k // 2
    m, c, n = phi.shape
    xp = np.zeros((m, c, n + 2 * pad))
    xp[:, :, pad : pad + n] = phi
    win = np.stack([xp[:, :, i : i + n] for i in range(k)], axis=1)  # (m, k, c, n)
    h = np.einsum("ock,mkcn->mon", p.conv1_w, win) + p.conv1_b[None, :, None]
    h = np.maximum(h, 0.0)
    hp = np.zeros((m, CNN_HIDDEN, n + 2 * pad))
    hp[:, :, pad : pad + n] = h
    win2 = np.stack([hp[:, :, i : i + n] for i in range(k)], axis=1)
    out = np.einsum("ock,mkcn->mon", p.conv2_w, win2) + p.conv2_b[None, :, None]
    return out[:, 0, :]
