"""Federated learning loop over the digital uplink.

One round: the base station trains on its own shard, clusters its update
fragments into a fresh quantisation codebook, popularity-orders it and
broadcasts; each active device runs local SGD, applies error feedback,
quantises its fragments; per-slot activity vectors cross the channel and
are decoded (or passed through exactly in perfect-aggregation mode); the
de-quantised aggregate, scaled by the estimated device count, updates the
global model.

Rounds are strictly sequential; devices within a round are independent.
All randomness is derived from (seed, domain, round) tuples so runs are
bit-identical regardless of execution history.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .channel import noise_variance
from .decoder import DecoderError, DecoderParams, decode_batch, decoder_prior
from .quantizer import (
    ErrorAccumulator,
    apply_error_feedback,
    build_codebook,
    fragment,
    popularity_order,
    quantize_batch,
)
from .ura_codebook import ShearMatrix, init_base, synthesize

log = logging.getLogger("airfeel")

# Sub-stream labels, combined as (seed, domain, round, stream, ...).
_DOMAIN_DATA = 0
_DOMAIN_MODEL = 1
_DOMAIN_ROUND = 2


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass
class GlobalModel:
    """Small feed-forward classifier with a built-in backward pass.

    tanh hidden layer and softmax cross-entropy; parameters live in one
    flat vector so the federated loop can treat the model as a vector.
    """

    sizes: tuple
    w: np.ndarray

    @classmethod
    def init(cls, sizes, seed):
        n_in, n_hidden, n_out = sizes
        rng = _rng(seed, _DOMAIN_MODEL)
        W1 = rng.standard_normal((n_in, n_hidden)) / np.sqrt(n_in)
        b1 = np.zeros(n_hidden)
        W2 = rng.standard_normal((n_hidden, n_out)) / np.sqrt(n_hidden)
        b2 = np.zeros(n_out)
        return cls(tuple(sizes), np.concatenate([W1.ravel(), b1, W2.ravel(), b2]))

    @property
    def n_params(self):
        n_in, n_h, n_out = self.sizes
        return n_in * n_h + n_h + n_h * n_out + n_out

    def _unpack(self, w):
        n_in, n_h, n_out = self.sizes
        i = 0
        W1 = w[i : i + n_in * n_h].reshape(n_in, n_h)
        i += n_in * n_h
        b1 = w[i : i + n_h]
        i += n_h
        W2 = w[i : i + n_h * n_out].reshape(n_h, n_out)
        i += n_h * n_out
        b2 = w[i : i + n_out]
        return W1, b1, W2, b2

    def logits(self, w, X):
        W1, b1, W2, b2 = self._unpack(w)
        return np.tanh(X @ W1 + b1) @ W2 + b2

    def loss_and_grad(self, w, X, y):
        W1, b1, W2, b2 = self._unpack(w)
        B = X.shape[0]
        a1 = np.tanh(X @ W1 + b1)
        z2 = a1 @ W2 + b2
        z2 -= z2.max(axis=1, keepdims=True)
        expz = np.exp(z2)
        p = expz / expz.sum(axis=1, keepdims=True)
        loss = -float(np.mean(np.log(p[np.arange(B), y] + 1e-300)))
        dz2 = p.copy()
        dz2[np.arange(B), y] -= 1.0
        dz2 /= B
        gW2 = a1.T @ dz2
        gb2 = dz2.sum(axis=0)
        dz1 = (dz2 @ W2.T) * (1.0 - a1 * a1)
        gW1 = X.T @ dz1
        gb1 = dz1.sum(axis=0)
        return loss, np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def accuracy(self, w, X, y):
        return float(np.mean(np.argmax(self.logits(w, X), axis=1) == y))


@dataclass(frozen=True)
class DeviceShard:
    device_id: int
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.X.shape[0]


@dataclass
class RoundRecord:
    """Transcript of one round: ground truth, codebook snapshot, metrics."""

    t: int
    k_a: int
    pi: np.ndarray
    quant_codebook: np.ndarray
    counts_true: np.ndarray  # (slots, n) uint16
    channel_seed: tuple
    test_acc: float
    ka_mae: float
    frag_recovery: float
    sigma2_hat: float
    failed: bool = False
    device_updates: dict | None = None


def partition_dataset(X, y, k_t, iid_fraction, shard_labels, seed):
    """Split a dataset into k_t equal-size device shards.

    iid_fraction of each shard is drawn uniformly at random; the rest is
    label-sorted, cut into k_t*shard_labels contiguous shards, and dealt
    to devices one shard per device per pass.  Tail samples that do not
    divide evenly are dropped.
    """
    if not 0.0 <= iid_fraction <= 1.0:
        raise ValueError(f"iid_fraction must be in [0, 1], got {iid_fraction}")
    X = np.asarray(X)
    y = np.asarray(y)
    total = (X.shape[0] // k_t) * k_t
    B = total // k_t
    b_iid = int(round(iid_fraction * B))
    b_non = B - b_iid
    rng = _rng(seed, _DOMAIN_DATA, 1)
    perm = rng.permutation(X.shape[0])[:total]
    iid_pool = perm[: b_iid * k_t]
    rest = perm[b_iid * k_t : b_iid * k_t + b_non * k_t]

    assigned = [list(iid_pool[k * b_iid : (k + 1) * b_iid]) for k in range(k_t)]
    order = rest[np.argsort(y[rest], kind="stable")]
    passes = max(1, int(shard_labels))
    pos = 0
    for j in range(passes):
        sz = b_non // passes + (1 if j < b_non % passes else 0)
        for k in range(k_t):
            assigned[k].extend(order[pos : pos + sz])
            pos += sz
    shards = []
    for k in range(k_t):
        idx = np.asarray(assigned[k], dtype=np.int64)
        shards.append(DeviceShard(k, X[idx], y[idx]))
    return shards


def local_train(model, shard, steps, lr, seed, batch_size=16):
    """Run `steps` minibatch SGD steps from the current global model.

    Returns the parameter delta; the model itself is not mutated.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    w0 = model.w.copy()
    w = w0.copy()
    m = len(shard)
    for _ in range(steps):
        idx = rng.choice(m, size=min(batch_size, m), replace=False)
        loss, g = model.loss_and_grad(w, shard.X[idx], shard.y[idx])
        if not np.isfinite(loss):
            raise RuntimeError("local divergence: non-finite loss")
        w = w - lr * g
    return w - w0


def load_digits_dataset(seed, test_count):
    """The bundled 8x8 digits set, shuffled and split into pool/test."""
    from sklearn.datasets import load_digits

    X, y = load_digits(return_X_y=True)
    X = X / 16.0
    perm = _rng(seed, _DOMAIN_DATA, 0).permutation(X.shape[0])
    test_idx, pool_idx = perm[:test_count], perm[test_count:]
    return (X[pool_idx], y[pool_idx]), (X[test_idx], y[test_idx])


class FeelSimulation:
    """State and round loop for one (config, snr, mode) run.

    mode 'pa' bypasses the channel entirely; 'baseline' uses a fixed
    codebook, uniform prior and the un-learnt decoder; 'learnt' uses the
    provided trained codebook and decoder parameters with the broadcast
    popularity prior.
    """

    def __init__(self, cfg, snr_db, mode, codebook=None, decoder_params=None,
                 shards=None, bs_shard=None, test_set=None):
        self.cfg = cfg
        self.snr_db = snr_db
        self.mode = mode
        if mode not in ("pa", "baseline", "learnt"):
            raise ValueError(f"unknown mode {mode!r}")

        if shards is None:
            (pool_X, pool_y), (test_X, test_y) = load_digits_dataset(cfg.seed, cfg.test_count)
            all_shards = partition_dataset(
                pool_X, pool_y, cfg.devices + 1, cfg.iid_fraction, cfg.shard_labels, cfg.seed
            )
            shards, bs_shard = all_shards[: cfg.devices], all_shards[cfg.devices]
            test_set = (test_X, test_y)
        self.shards = shards
        self.bs_shard = bs_shard
        self.test_X, self.test_y = test_set

        n_in = self.shards[0].X.shape[1]
        n_out = int(max(s.y.max() for s in self.shards + [self.bs_shard])) + 1
        self.model = GlobalModel.init((n_in, cfg.hidden, n_out), cfg.seed)
        W = self.model.n_params
        self.accumulators = [ErrorAccumulator.zeros(W, k) for k in range(len(self.shards))]
        self.bs_accumulator = ErrorAccumulator.zeros(W, -1)

        if mode == "learnt":
            if codebook is None or decoder_params is None:
                raise ValueError("learnt mode needs a codebook and decoder parameters")
        elif mode == "baseline":
            if codebook is None:
                base = init_base(cfg.n, cfg.codeword_len, cfg.codebook_scheme, (cfg.seed, 99))
                codebook = synthesize(base, ShearMatrix.identity(cfg.codeword_len))
            if decoder_params is None:
                decoder_params = DecoderParams.baseline()
        self.codebook = codebook
        self.decoder_params = decoder_params
        self.ka_nominal = int(round((cfg.ka_min + cfg.ka_max) / 2))

    def _sigma2(self, k_a):
        if self.cfg.sigma2_override is not None:
            return self.cfg.sigma2_override
        return noise_variance(self.snr_db, k_a, self.cfg.codeword_len)

    def run_round(self, t):
        cfg = self.cfg
        seed = cfg.seed
        ka_rng = _rng(seed, _DOMAIN_ROUND, t, 0)
        active_rng = _rng(seed, _DOMAIN_ROUND, t, 1)
        k_a = int(ka_rng.integers(cfg.ka_min, cfg.ka_max + 1))
        active = np.sort(active_rng.choice(len(self.shards), size=k_a, replace=False))

        # Base-station side: local update, fresh codebook, popularity order.
        delta_bs = local_train(
            self.model, self.bs_shard, cfg.local_steps, cfg.local_lr,
            (seed, _DOMAIN_ROUND, t, 2), cfg.local_batch,
        )
        s_bs = delta_bs + self.bs_accumulator.e
        frags_bs = fragment(s_bs, cfg.frag_len)
        quant = build_codebook(frags_bs, cfg.n, (seed, _DOMAIN_ROUND, t, 4), cfg.kmeans_iters)
        ordering = self.mode != "baseline"
        if ordering:
            quant = popularity_order(quant, frags_bs)
        _, self.bs_accumulator = apply_error_feedback(
            delta_bs, self.bs_accumulator, quant, cfg.frag_len
        )

        # Device side: local updates, error feedback, per-slot indices.
        slots = frags_bs.shape[0]
        n = cfg.n
        counts = np.zeros((slots, n), dtype=np.int64)
        device_updates = {} if cfg.record_device_updates else None
        for k in active:
            delta_k = local_train(
                self.model, self.shards[k], cfg.local_steps, cfg.local_lr,
                (seed, _DOMAIN_ROUND, t, 10 + int(k)), cfg.local_batch,
            )
            idx_k, self.accumulators[k] = apply_error_feedback(
                delta_k, self.accumulators[k], quant, cfg.frag_len
            )
            counts[np.arange(slots), idx_k] += 1
            if device_updates is not None:
                device_updates[int(k)] = (delta_k, quant.Q[idx_k].reshape(-1)[: delta_k.size].copy())

        channel_seed = (seed, _DOMAIN_ROUND, t, 3)
        failed = False
        if self.mode == "pa":
            decoded = counts
            k_hats = np.full(slots, float(k_a))
            scale = k_a
            sigma2_hat = 0.0
        else:
            sigma2 = self._sigma2(k_a)
            Y = counts.astype(np.float64) @ self.codebook.C
            if sigma2 > 0.0:
                Y = Y + _rng(*channel_seed).normal(0.0, np.sqrt(sigma2), size=Y.shape)
            pi0 = decoder_prior(quant.pi) if ordering else np.full(n, 1.0 / n)
            sigma2_0 = self._sigma2(self.ka_nominal)
            try:
                decoded, k_hats, diag = decode_batch(
                    Y, self.codebook, pi0, self.decoder_params, sigma2_0
                )
                sigma2_hat = float(np.mean(diag.sigma2_trajectory[-1]))
            except DecoderError as err:
                log.warning("round %d failed: %s", t, err)
                failed = True
                decoded = counts
                k_hats = np.full(slots, np.nan)
                sigma2_hat = float("nan")
            scale = max(1, int(np.rint(np.median(k_hats)))) if not failed else 1

        if not failed:
            agg = (decoded.astype(np.float64) @ quant.Q).reshape(-1)[: self.model.n_params]
            self.model.w = self.model.w + cfg.global_lr * agg / scale

        test_acc = self.model.accuracy(self.model.w, self.test_X, self.test_y)
        ka_mae = float(np.mean(np.abs(k_hats - k_a))) if not failed else float("nan")
        frag_rec = float(np.mean(np.all(decoded == counts, axis=1))) if self.mode != "pa" else 1.0
        if failed:
            frag_rec = 0.0
        return RoundRecord(
            t=t,
            k_a=k_a,
            pi=quant.pi,
            quant_codebook=quant.Q,
            counts_true=counts.astype(np.uint16),
            channel_seed=channel_seed,
            test_acc=test_acc,
            ka_mae=ka_mae,
            frag_recovery=frag_rec,
            sigma2_hat=sigma2_hat,
            failed=failed,
            device_updates=device_updates,
        )

    def run(self, rounds=None):
        rounds = self.cfg.rounds if rounds is None else rounds
        records = [self.run_round(t) for t in range(rounds)]
        metrics = {
            "round": np.arange(rounds),
            "test_acc": np.array([r.test_acc for r in records]),
            "ka_mae": np.array([r.ka_mae for r in records]),
            "frag_recovery": np.array([r.frag_recovery for r in records]),
            "sigma2_hat": np.array([r.sigma2_hat for r in records]),
        }
        return records, metrics


def run_experiment(cfg, codebook=None, decoder_params=None):
    """Run cfg.rounds rounds at every SNR point; returns {snr: (records, metrics)}."""
    results = {}
    for snr in cfg.snr_db:
        sim = FeelSimulation(cfg, snr, cfg.mode, codebook=codebook, decoder_params=decoder_params)
        results[snr] = sim.run()
    return results


def _dataset_header(cfg, slots):
    return {"version": 1, "n": cfg.n, "d": cfg.codeword_len, "fragment_count": slots}


def collect_dataset(cfg, out_dir):
    """Run the perfect-aggregation pipeline and export decoder training data.

    For every round and fragment slot, one sample (round, K_a, pi, x) is
    written; rounds are split disjointly into train/validation/test files
    with the last rounds held out for testing.
    """
    import pathlib

    if cfg.rounds <= cfg.collect_val_rounds + cfg.collect_test_rounds:
        raise ValueError(
            "config fields 'rounds' vs 'collect_val_rounds'+'collect_test_rounds': "
            "need at least one training round"
        )
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = FeelSimulation(cfg, snr_db=None, mode="pa")
    records, _ = sim.run()
    slots = records[0].counts_true.shape[0]
    header = _dataset_header(cfg, slots)

    test_from = cfg.rounds - cfg.collect_test_rounds
    val_from = test_from - cfg.collect_val_rounds
    paths = {name: out / f"{name}.jsonl" for name in ("train", "val", "test")}
    handles = {name: path.open("w", encoding="utf-8") for name, path in paths.items()}
    try:
        for h in handles.values():
            h.write(json.dumps(header) + "\n")
        for rec in records:
            split = "test" if rec.t >= test_from else ("val" if rec.t >= val_from else "train")
            pi_txt = json.dumps([float(p) for p in rec.pi])
            for slot in range(slots):
                x_txt = json.dumps(rec.counts_true[slot].tolist())
                handles[split].write(
                    '{"round": %d, "ka": %d, "pi": %s, "x": %s}\n' % (rec.t, rec.k_a, pi_txt, x_txt)
                )
    finally:
        for h in handles.values():
            h.close()
    return paths
