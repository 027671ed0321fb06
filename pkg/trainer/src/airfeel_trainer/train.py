"""Offline joint training of decoder parameters and the URA codebook.

Each visited sample simulates its own uplink: the stored activity vector
is modulated with the current synthesized codebook, noise is drawn at an
SNR sampled uniformly from the configured range, and the unrolled decoder
reconstructs the counts.  The loss combines count reconstruction (MSE), a
normalised l1 sparsity penalty, a conditioning regulariser on the shear
matrix, and the squared device-count error.  Gradients are accumulated
over per-round blocks with one optimiser step per block; the exported
checkpoint is the best-validation state.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import load_split
from .network import UnrolledDecoder
from .weight_io import read_weight_file, write_weight_file


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 20
    tol: float = 1e-6
    lr: float = 1e-4
    lr_halving_patience: int = 10
    lambda_l1: float = 0.01
    lambda_w: float = 0.001
    lambda_k: float = 0.01
    t_layers: int = 10
    k_max: int = 32
    rho_init: float = 0.85
    em_init: float = 0.3
    snr_min_db: float = 0.0
    snr_max_db: float = 20.0
    ka_nominal: int = 10
    prior_mix: float = 0.05  # uniform floor mixed into the popularity prior
    seed: int = 0
    detach_em: bool = False  # optional: cut gradients at the EM refreshes
    dtype: str = "float64"
    use_compile: bool = False
    log_every: int = 10

    def validate(self):
        for name in ("batch_size", "max_epochs", "patience", "t_layers", "k_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"train config field {name!r} must be >= 1")
        for name in ("lr", "tol", "lambda_l1", "lambda_w", "lambda_k"):
            if not (getattr(self, name) > 0 and math.isfinite(getattr(self, name))):
                raise ValueError(f"train config field {name!r} must be positive and finite")
        if not 0.0 < self.rho_init < 1.0:
            raise ValueError("train config field 'rho_init' must lie in (0, 1)")
        return self


def noise_variance(snr_db, k_a, d):
    return (k_a / d) / 10.0 ** (snr_db / 10.0)


def sample_loss(model, C, x, pi, ka, snr_db, noise, cfg):
    """Loss of one batch given pre-drawn standard-normal noise.

    The decode prior is the stored popularity mixed with a uniform floor,
    matching how the engine constructs priors at deployment.
    """
    d = C.shape[1]
    sigma2 = noise_variance(snr_db, ka, d)  # per-sample true variance
    y = x @ C + noise * sigma2.sqrt()[:, None]
    sigma2_0 = noise_variance(snr_db, torch.full_like(ka, float(cfg.ka_nominal)), d)
    prior = (1.0 - cfg.prior_mix) * pi + cfg.prior_mix / pi.shape[1]
    x_hat, k_hat = model(y, prior, sigma2_0, C=C)
    mse = ((x_hat - x) ** 2).sum(dim=1)
    l1 = x_hat.abs().sum(dim=1) / x.abs().sum(dim=1).clamp_min(1.0)
    k_err = (k_hat - ka) ** 2
    return (mse + cfg.lambda_l1 * l1 + cfg.lambda_k * k_err).sum()


def shear_regulariser(model):
    d = model.W.shape[0]
    eye = torch.eye(d, dtype=model.W.dtype)
    return ((model.W.T @ model.W - eye) ** 2).sum()


def evaluate_loss(model, rounds, cfg, noise_bank, snr_bank):
    """Mean per-sample loss over a split with frozen noise/SNR draws."""
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        C = model.codebook()
        reg = float(shear_regulariser(model))
        for i, block in enumerate(rounds):
            x, pi, ka = block["x"], block["pi"], block["ka"]
            loss = sample_loss(model, C, x, pi, ka, snr_bank[i], noise_bank[i], cfg)
            total += float(loss)
            count += x.shape[0]
    model.train()
    return total / count + cfg.lambda_w * reg


_EVAL_TAGS = {"val": 1, "test": 2}


def _frozen_eval_draws(rounds, d, cfg, tag, dtype):
    """Deterministic per-round noise and SNR draws for stable validation."""
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + _EVAL_TAGS[tag])
    noise, snrs = [], []
    for block in rounds:
        b = block["x"].shape[0]
        noise.append(torch.randn((b, d), generator=gen, dtype=dtype))
        snrs.append(
            torch.rand((b,), generator=gen, dtype=dtype) * (cfg.snr_max_db - cfg.snr_min_db)
            + cfg.snr_min_db
        )
    return noise, snrs


@dataclass
class TrainResult:
    best_val: float
    init_val: float
    epochs_run: int
    history: list = field(default_factory=list)
    cond_w_max: float = 1.0


def train(dataset_dir, out_path, cfg=None, init_weights=None, progress=print):
    """Train on a collected dataset and export the best checkpoint.

    Returns a TrainResult with the validation trace; raises RuntimeError
    with the epoch/batch index if the loss goes non-finite.
    """
    cfg = (cfg or TrainConfig()).validate()
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)

    dtype = getattr(torch, cfg.dtype)
    header, train_rounds = load_split(dataset_dir, "train")
    _, val_rounds = load_split(dataset_dir, "val")
    n, d = header["n"], header["d"]
    for rounds in (train_rounds, val_rounds):
        for block in rounds:
            for key in ("x", "pi", "ka"):
                block[key] = block[key].to(dtype)

    model = UnrolledDecoder(n, d, cfg.t_layers, cfg.k_max, cfg.rho_init, cfg.em_init, cfg.seed,
                            dtype=dtype)
    init_scheme = "gaussian"
    if init_weights:
        payload = read_weight_file(init_weights)
        model.load_weight_dict(payload)
        init_scheme = payload.get("extra", {}).get("init_scheme", "gaussian")

    if cfg.use_compile:
        try:
            model.forward = torch.compile(model.forward, dynamic=False)
            progress("compiled forward")
        except Exception as err:  # fall back to eager on any compile issue
            progress(f"compile unavailable ({type(err).__name__}); running eager")

    val_noise, val_snrs = _frozen_eval_draws(val_rounds, d, cfg, "val", dtype)
    init_val = evaluate_loss(model, val_rounds, cfg, val_noise, val_snrs)
    progress(f"epoch 0 (init): val={init_val:.6f}")

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    best_val = init_val
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    since_best = 0
    since_lr_drop = 0
    cond_w_max = float(np.linalg.cond(model.W.detach().numpy()))
    history = [init_val]
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    epochs_run = 0
    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        order = torch.randperm(len(train_rounds), generator=gen).tolist()
        for bi, ri in enumerate(order):
            block = train_rounds[ri]
            x, pi, ka = block["x"], block["pi"], block["ka"]
            block_size = x.shape[0]
            opt.zero_grad()
            for s in range(0, block_size, cfg.batch_size):
                sl = slice(s, min(s + cfg.batch_size, block_size))
                bs = x[sl].shape[0]
                noise = torch.randn((bs, d), generator=gen, dtype=dtype)
                snr = (
                    torch.rand((bs,), generator=gen, dtype=dtype)
                    * (cfg.snr_max_db - cfg.snr_min_db) + cfg.snr_min_db
                )
                C = model.codebook()
                loss = sample_loss(model, C, x[sl], pi[sl], ka[sl], snr, noise, cfg) / block_size
                if not torch.isfinite(loss):
                    raise RuntimeError(f"non-finite loss at epoch {epoch}, block {bi}")
                loss.backward()
            reg = cfg.lambda_w * shear_regulariser(model)
            reg.backward()
            opt.step()
        cond_w_max = max(cond_w_max, float(np.linalg.cond(model.W.detach().numpy())))

        val = evaluate_loss(model, val_rounds, cfg, val_noise, val_snrs)
        history.append(val)
        if val < best_val - cfg.tol:
            best_val = val
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            since_best = 0
            since_lr_drop = 0
            _export(model, best_state, out_path, cfg, init_scheme, best_val, init_val)
        else:
            since_best += 1
            since_lr_drop += 1
        if epoch % cfg.log_every == 0 or since_best == 0:
            progress(f"epoch {epoch}: val={val:.6f} best={best_val:.6f} "
                     f"lr={opt.param_groups[0]['lr']:.2e}")
        if since_lr_drop >= cfg.lr_halving_patience:
            for g in opt.param_groups:
                g["lr"] *= 0.5
            since_lr_drop = 0
            progress(f"epoch {epoch}: halving lr to {opt.param_groups[0]['lr']:.2e}")
        if since_best >= cfg.patience:
            progress(f"early stop at epoch {epoch}")
            break

    _export(model, best_state, out_path, cfg, init_scheme, best_val, init_val)
    progress(f"wrote {out_path} (best val {best_val:.6f}, init {init_val:.6f})")
    return TrainResult(best_val=best_val, init_val=init_val, epochs_run=epochs_run,
                       history=history, cond_w_max=cond_w_max)


def _export(model, state, out_path, cfg, init_scheme, best_val, init_val):
    """Atomically export a checkpointed state as the weight file."""
    current = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.load_state_dict(state)
    D, W, layers = model.to_weight_entries()
    write_weight_file(
        out_path, D, W, layers, k_max=cfg.k_max, mode="learnt",
        extra={"init_scheme": init_scheme, "trained": True,
               "best_val": best_val, "init_val": init_val},
    )
    model.load_state_dict(current)
