import json
import math

import numpy as np
import pytest
import torch

from airfeel_trainer.network import UnrolledDecoder, inv_softplus, logit
from airfeel_trainer.train import TrainConfig, noise_variance, sample_loss, shear_regulariser

from conftest import PRIMARY_ROOT


def small_model(n=16, d=8, t_layers=2, seed=0):
    return UnrolledDecoder(n, d, t_layers=t_layers, k_max=16, seed=seed)


def make_batch(model, b=5, seed=0, snr=10.0):
    rng = np.random.default_rng(seed)
    n, d = model.n, model.d
    profile = 1.0 / (np.arange(n) + 1.0)
    profile /= profile.sum()
    x = np.array([np.bincount(rng.choice(n, 3, p=profile), minlength=n) for _ in range(b)])
    x = torch.tensor(x, dtype=torch.float64)
    pi = torch.tensor(np.tile(profile, (b, 1)))
    ka = x.sum(dim=1)
    noise = torch.tensor(rng.standard_normal((b, d)))
    snr_t = torch.full((b,), snr, dtype=torch.float64)
    return x, pi, ka, snr_t, noise


class TestCodebook:
    def test_rows_unit_norm(self):
        model = small_model()
        C = model.codebook().detach().numpy()
        np.testing.assert_allclose(np.linalg.norm(C, axis=1), 1.0, atol=1e-12)

    def test_identity_shear_regulariser_is_zero(self):
        model = small_model()
        assert float(shear_regulariser(model).detach()) == 0.0

    def test_perturbed_shear_regulariser_positive(self):
        model = small_model()
        with torch.no_grad():
            model.W += 0.1
        assert float(shear_regulariser(model).detach()) > 0.0


class TestForward:
    def test_zero_cnn_initialisation_is_bayesian(self):
        # conv2 is zero-initialised, so the blend weight is irrelevant and
        # the net starts exactly at the Bayesian decoder
        m1 = small_model(seed=1)
        m2 = small_model(seed=1)
        with torch.no_grad():
            m2.rho_change = None
            for layer in m2.layers:
                layer.rho_raw.fill_(-40.0)  # rho = 0: pure Bayesian mean
        x, pi, ka, snr, noise = make_batch(m1, seed=2)
        C = m1.codebook()
        sigma2 = noise_variance(snr, ka, m1.d)
        y = x @ C + noise * sigma2.sqrt()[:, None]
        out1, k1 = m1(y, pi, sigma2)
        out2, k2 = m2(y, pi, sigma2)
        np.testing.assert_allclose(out1.detach(), out2.detach(), atol=1e-12)
        np.testing.assert_allclose(k1.detach(), k2.detach(), atol=1e-12)

    def test_first_loss_equals_bayesian_decoder_loss(self):
        cfg = TrainConfig()
        m1 = small_model(seed=3)
        m2 = small_model(seed=3)
        with torch.no_grad():
            for layer in m2.layers:
                layer.rho_raw.fill_(-40.0)
        x, pi, ka, snr, noise = make_batch(m1, seed=4)
        l1 = sample_loss(m1, m1.codebook(), x, pi, ka, snr, noise, cfg)
        l2 = sample_loss(m2, m2.codebook(), x, pi, ka, snr, noise, cfg)
        assert float(l1) == pytest.approx(float(l2), abs=1e-12)

    def test_forward_deterministic(self):
        model = small_model(seed=5)
        x, pi, ka, snr, noise = make_batch(model, seed=6)
        C = model.codebook()
        sigma2 = noise_variance(snr, ka, model.d)
        y = x @ C + noise * sigma2.sqrt()[:, None]
        a = model(y, pi, sigma2)[0].detach().numpy()
        b = model(y, pi, sigma2)[0].detach().numpy()
        np.testing.assert_array_equal(a, b)

    def test_zero_pi_entries_are_safe(self):
        model = small_model(seed=7)
        x, pi, ka, snr, noise = make_batch(model, seed=8)
        pi[:, -4:] = 0.0
        pi = pi / pi.sum(dim=1, keepdim=True)
        C = model.codebook()
        sigma2 = noise_variance(snr, ka, model.d)
        y = x @ C + noise * sigma2.sqrt()[:, None]
        out, k = model(y, pi, sigma2)
        assert torch.all(torch.isfinite(out))
        loss = out.square().sum()
        loss.backward()
        for p in model.parameters():
            if p.grad is not None:
                assert torch.all(torch.isfinite(p.grad))


class TestGradientCheck:
    def test_loss_gradients_match_finite_differences(self):
        # [SECONDARY] acceptance: central finite differences on 20 random
        # parameters, relative error < 1e-4
        cfg = TrainConfig()
        model = small_model(n=16, d=8, t_layers=2, seed=9)
        with torch.no_grad():
            for layer in model.layers:
                layer.conv2.weight.normal_(0.0, 0.05, generator=torch.Generator().manual_seed(1))
        x, pi, ka, snr, noise = make_batch(model, b=4, seed=10)

        def full_loss():
            C = model.codebook()
            return sample_loss(model, C, x, pi, ka, snr, noise, cfg) / x.shape[0] \
                + cfg.lambda_w * shear_regulariser(model)

        model.zero_grad()
        loss = full_loss()
        loss.backward()
        params = [p for p in model.parameters() if p.grad is not None]
        rng = np.random.default_rng(11)
        checked = 0
        failures = []
        while checked < 20:
            p = params[rng.integers(len(params))]
            flat = p.data.view(-1)
            idx = int(rng.integers(flat.numel()))
            h = 1e-6 * max(1.0, abs(float(flat[idx])))
            orig = float(flat[idx])
            flat[idx] = orig + h
            lp = float(full_loss())
            flat[idx] = orig - h
            lm = float(full_loss())
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = float(p.grad.view(-1)[idx])
            if abs(fd) < 1e-10 and abs(an) < 1e-10:
                continue  # flat direction: both zero, uninformative
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-12)
            if rel >= 1e-4:
                failures.append((rel, fd, an))
            checked += 1
        assert not failures, failures


class TestWeightInterchange:
    def test_round_trip_through_file(self, tmp_path):
        from airfeel_trainer.weight_io import read_weight_file, write_weight_file

        model = small_model(seed=12)
        D, W, layers = model.to_weight_entries()
        path = tmp_path / "w.json"
        write_weight_file(path, D, W, layers, k_max=16)
        payload = read_weight_file(path)
        model2 = small_model(seed=99)
        model2.load_weight_dict(payload)
        x, pi, ka, snr, noise = make_batch(model, seed=13)
        C = model.codebook()
        sigma2 = noise_variance(snr, ka, model.d)
        y = x @ C + noise * sigma2.sqrt()[:, None]
        out1 = model(y, pi, sigma2)[0].detach().numpy()
        out2 = model2(y, pi, sigma2)[0].detach().numpy()
        np.testing.assert_allclose(out1, out2, atol=1e-12)

    def test_shape_mismatch_rejected(self, tmp_path):
        from airfeel_trainer.weight_io import read_weight_file, write_weight_file

        model = small_model(seed=14)
        D, W, layers = model.to_weight_entries()
        path = tmp_path / "w.json"
        write_weight_file(path, D, W, layers)
        payload = json.loads(path.read_text())
        payload["layers"][0]["conv1_b"] = [0.0] * 3
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError, match="shape mismatch"):
            read_weight_file(path)


class TestCrossComponent:
    def test_forward_matches_primary_engine_fixture(self):
        # [SECONDARY] acceptance: agreement with the deployment decoder on
        # exported fixtures, <= 1e-5 elementwise
        fixture_path = PRIMARY_ROOT / "fixtures" / "decoder_forward.json"
        assert fixture_path.exists(), "run tools/make_fixtures.py in the engine repo first"
        payload = json.loads(fixture_path.read_text())
        from airfeel_trainer.weight_io import read_weight_file

        weights = read_weight_file(PRIMARY_ROOT / payload["weights"])
        model = UnrolledDecoder(weights["n"], weights["d"], weights["t_layers"],
                                weights["k_max"])
        model.load_weight_dict(weights)
        model.eval()
        worst = 0.0
        with torch.no_grad():
            for case in payload["cases"]:
                y = torch.tensor([case["y"]], dtype=torch.float64)
                pi0 = torch.tensor([case["pi0"]], dtype=torch.float64)
                x_hat, k_hat = model(y, pi0, torch.tensor(case["sigma2_0"], dtype=torch.float64))
                dx = float(np.abs(x_hat.numpy()[0] - np.array(case["x_hat_relaxed"])).max())
                dk = abs(float(k_hat[0]) - case["k_hat"])
                worst = max(worst, dx, dk)
        assert worst <= 1e-5, worst
