"""Differentiable unrolled decoder with a jointly trained codebook.

The forward pass mirrors the deployment decoder layer for layer: output
block (gain + damping), scalar pseudo-channel, spike-and-Poisson-slab
posterior, CNN refinement blended with the Bayesian mean, and smoothed EM
refreshes of the device count, popularity and noise variance.  Everything
runs in float64 so exported weights reproduce the deployment forward pass
to tight tolerance.

The codebook is parametrised as C = row_normalise(D @ W): a base matrix
plus a learnt shear, which keeps gradients flowing to rarely used
codewords.  All box constraints use squashing maps (tanh / sigmoid /
softplus), never clipping.
"""

import math

import numpy as np
import torch
from torch import nn

from .weight_io import CNN_HIDDEN, CNN_IN, CNN_KERNEL, CNN_OUT, SCALAR_FIELDS

SIGMA2_FLOOR = 1e-8
L1_FLOOR = 1e-12
VAR1_FLOOR = 1e-12
LAM_FLOOR = 1e-12


def inv_softplus(y):
    return math.log(math.expm1(y))


def logit(p):
    return math.log(p / (1.0 - p))


class DecoderLayer(nn.Module):
    def __init__(self, rho_init=0.85, em_init=0.3, conv_rng=None, dtype=torch.float64):
        super().__init__()
        self.gamma_raw = nn.Parameter(torch.tensor(0.0, dtype=dtype))
        self.eta_raw = nn.Parameter(torch.tensor(0.0, dtype=dtype))
        self.alpha_raw = nn.Parameter(torch.tensor(inv_softplus(1.0), dtype=dtype))
        self.tau_raw = nn.Parameter(torch.tensor(inv_softplus(1.0), dtype=dtype))
        self.rho_raw = nn.Parameter(torch.tensor(logit(rho_init), dtype=dtype))
        self.sk_raw = nn.Parameter(torch.tensor(logit(em_init), dtype=dtype))
        self.spi_raw = nn.Parameter(torch.tensor(logit(em_init), dtype=dtype))
        self.ssig_raw = nn.Parameter(torch.tensor(logit(em_init), dtype=dtype))
        self.conv1 = nn.Conv1d(CNN_IN, CNN_HIDDEN, CNN_KERNEL, padding=1).to(dtype)
        self.conv2 = nn.Conv1d(CNN_HIDDEN, CNN_OUT, CNN_KERNEL, padding=1).to(dtype)
        conv_rng = conv_rng or np.random.default_rng(0)
        with torch.no_grad():
            self.conv1.weight.copy_(torch.tensor(0.1 * conv_rng.standard_normal(self.conv1.weight.shape)))
            self.conv1.bias.zero_()
            # zero last layer: the net starts exactly at the Bayesian decoder
            self.conv2.weight.zero_()
            self.conv2.bias.zero_()

    @property
    def gamma(self):
        return 0.3 + 1.7 * (torch.tanh(self.gamma_raw) + 1.0) / 2.0

    def cnn(self, phi):
        return self.conv2(torch.relu(self.conv1(phi)))[:, 0, :]


class UnrolledDecoder(nn.Module):
    def __init__(self, n, d, t_layers=10, k_max=32, rho_init=0.85, em_init=0.3, seed=0,
                 dtype=torch.float64):
        super().__init__()
        self.n, self.d, self.k_max = n, d, k_max
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.D = nn.Parameter(torch.tensor(rng.standard_normal((n, d)), dtype=dtype))
        self.W = nn.Parameter(torch.eye(d, dtype=dtype))
        self.layers = nn.ModuleList(
            DecoderLayer(rho_init, em_init, conv_rng=rng, dtype=dtype) for _ in range(t_layers)
        )
        self.register_buffer("ks", torch.arange(k_max + 1, dtype=dtype))
        self.register_buffer("log_fact", torch.lgamma(self.ks + 1.0))

    def codebook(self):
        C = self.D @ self.W
        norms = torch.linalg.norm(C, dim=1, keepdim=True).clamp_min(1e-12)
        return C / norms

    def set_base(self, D, W=None):
        with torch.no_grad():
            self.D.copy_(torch.tensor(np.asarray(D, dtype=np.float64)))
            if W is not None:
                self.W.copy_(torch.tensor(np.asarray(W, dtype=np.float64)))

    def _posterior(self, R, Sigma, lam, tau):
        ks = self.ks
        lam_safe = lam.clamp_min(LAM_FLOOR)
        exp_neg = torch.exp(-lam_safe)
        log_alpha = torch.log(-torch.expm1(-lam_safe))
        log_pois = (
            ks[None, None, :] * torch.log(lam_safe)[:, :, None]
            - lam_safe[:, :, None]
            - self.log_fact[None, None, :]
        )
        log_prior = log_alpha[:, :, None] + log_pois
        spike0 = torch.log(exp_neg * (2.0 - exp_neg))
        log_prior = torch.cat([spike0[:, :, None], log_prior[:, :, 1:]], dim=2)
        log_w = log_prior - (R[:, :, None] - ks[None, None, :]) ** 2 / (2.0 * tau * Sigma[:, :, None])
        w = torch.softmax(log_w, dim=2)
        m = w @ ks
        v = (w @ ks**2 - m**2).clamp_min(0.0)
        return m, v

    def forward(self, y, pi0, sigma2_0, C=None, k0=None):
        """Relaxed decode of a batch: y (B, d), pi0 (B, n) or (n,).

        sigma2_0 is a scalar or (B,) initial noise-variance guess; returns
        (x_hat, k_hat) with the pre-projection count estimates.
        """
        if C is None:
            C = self.codebook()
        y = y.to(self.dtype)
        C2 = C * C
        B, d = y.shape
        pi = torch.broadcast_to(pi0.to(self.dtype), (B, self.n)).clone()
        sigma2_0 = torch.as_tensor(sigma2_0, dtype=self.dtype)
        sigma2 = torch.broadcast_to(sigma2_0, (B,)).clamp_min(SIGMA2_FLOOR)
        if k0 is None:
            k_hat = ((y * y).sum(dim=1) - d * sigma2_0).clamp_min(1.0)
        else:
            k_hat = torch.broadcast_to(torch.as_tensor(k0, dtype=self.dtype), (B,)).clone()

        x_hat = torch.zeros((B, self.n), dtype=self.dtype, device=y.device)
        nu = torch.ones_like(x_hat)
        Z = y.clone()
        V = torch.ones_like(y)

        for layer in self.layers:
            gamma = layer.gamma
            eta = torch.sigmoid(layer.eta_raw)
            alpha_scale = torch.nn.functional.softplus(layer.alpha_raw)
            tau = torch.nn.functional.softplus(layer.tau_raw)
            rho = torch.sigmoid(layer.rho_raw)
            s_k = torch.sigmoid(layer.sk_raw)
            s_pi = torch.sigmoid(layer.spi_raw)
            s_sig = torch.sigmoid(layer.ssig_raw)
            # output block
            Z_tmp = x_hat @ C
            V_new = nu @ C2
            Z_tilde = Z_tmp - gamma * ((y - Z) * V_new / (sigma2[:, None] + V))
            Z = eta * Z + (1.0 - eta) * Z_tilde
            V = eta * V + (1.0 - eta) * V_new
            # pseudo-channel
            g_inv = alpha_scale / (sigma2[:, None] + V)
            var1 = (g_inv @ C2.T).clamp_min(VAR1_FLOOR)
            var2 = ((y - Z) * g_inv) @ C.T
            R = x_hat + var2 / var1
            Sigma_pc = 1.0 / var1
            lam = k_hat[:, None] * pi
            m, v = self._posterior(R, Sigma_pc, lam, tau)
            # CNN refinement blended with the Bayesian mean
            alpha_j = -torch.expm1(-lam)
            phi = torch.stack(
                [R, Sigma_pc.sqrt(), m, v.clamp_min(1e-30).sqrt(), alpha_j, lam], dim=1
            )
            x_tilde = m + layer.cnn(phi)
            x_hat = (1.0 - rho) * m + rho * x_tilde
            nu = v
            # EM refreshes
            k_hat = ((1.0 - s_k) * k_hat + s_k * m.sum(dim=1)).clamp_min(1.0)
            pi = (1.0 - s_pi) * pi + s_pi * m / m.abs().sum(dim=1, keepdim=True).clamp_min(L1_FLOOR)
            pi = pi.clamp_min(0.0)
            pi = pi / pi.sum(dim=1, keepdim=True)
            resid = y - x_hat @ C
            target = ((resid * resid).sum(dim=1) / d - V.mean(dim=1)).clamp_min(SIGMA2_FLOOR)
            sigma2 = torch.exp((1.0 - s_sig) * torch.log(sigma2) + s_sig * torch.log(target)).clamp_min(SIGMA2_FLOOR)
        return x_hat, k_hat

    # ---- weight-file interchange -------------------------------------
    def load_weight_dict(self, payload):
        if payload["n"] != self.n or payload["d"] != self.d:
            raise ValueError("shape mismatch: weight file does not match model dims")
        if len(payload["layers"]) != len(self.layers):
            raise ValueError("shape mismatch: layer count differs")
        self.set_base(payload["D"], payload["W"])
        with torch.no_grad():
            for layer, entry in zip(self.layers, payload["layers"]):
                for name in SCALAR_FIELDS:
                    getattr(layer, name).fill_(entry[name])
                layer.conv1.weight.copy_(torch.tensor(entry["conv1_w"]))
                layer.conv1.bias.copy_(torch.tensor(entry["conv1_b"]))
                layer.conv2.weight.copy_(torch.tensor(entry["conv2_w"]))
                layer.conv2.bias.copy_(torch.tensor(entry["conv2_b"]))
        new_k = payload.get("k_max", self.k_max)
        if new_k != self.k_max:
            self.k_max = new_k
            self.ks = torch.arange(new_k + 1, dtype=self.dtype)
            self.log_fact = torch.lgamma(self.ks + 1.0)

    def to_weight_entries(self):
        layers = []
        for layer in self.layers:
            layers.append({
                **{name: float(getattr(layer, name).item()) for name in SCALAR_FIELDS},
                "conv1_w": layer.conv1.weight.detach().numpy(),
                "conv1_b": layer.conv1.bias.detach().numpy(),
                "conv2_w": layer.conv2.weight.detach().numpy(),
                "conv2_b": layer.conv2.bias.detach().numpy(),
            })
        return self.D.detach().numpy().copy(), self.W.detach().numpy().copy(), layers
