"""Point embedding codec: feature layout, smoothness, and capacity."""

import math

import numpy as np
import pytest
import torch

from trajtok.pointcodec import (
    FEATURE_DIM,
    N_BANDS,
    POINT_SCALE,
    PointEncoder,
    PointHead,
    fourier_features,
)


def features_oracle(x, y, n_bands=N_BANDS, scale=POINT_SCALE):
    """Scalar reimplementation of the feature layout."""
    out = []
    for c in (x, y):
        for k in range(n_bands):
            ang = (2.0**k) * math.pi * c / scale
            out.extend([math.sin(ang), math.cos(ang)])
    return out


class TestFourierFeatures:
    def test_shape_and_dtype(self):
        pts = torch.zeros(5, 3, 2)
        f = fourier_features(pts)
        assert f.shape == (5, 3, FEATURE_DIM)
        assert f.dtype == torch.float64

    def test_origin_features(self):
        f = fourier_features(torch.zeros(1, 2))[0]
        assert torch.allclose(f[0::2], torch.zeros(16, dtype=torch.float64))
        assert torch.allclose(f[1::2], torch.ones(16, dtype=torch.float64))

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x, y = rng.uniform(-30, 30, size=2)
            got = fourier_features(torch.tensor([[x, y]]))[0]
            want = torch.tensor(features_oracle(x, y), dtype=torch.float64)
            assert torch.allclose(got, want, atol=1e-12)

    def test_band_frequencies_double(self):
        # moving by scale/2^k flips the sign of band k's sine
        x = 1.234
        base = fourier_features(torch.tensor([[x, 0.0]], dtype=torch.float64))[0]
        for k in range(N_BANDS):
            shifted = fourier_features(
                torch.tensor([[x + POINT_SCALE / 2.0**k, 0.0]], dtype=torch.float64)
            )[0]
            assert abs(shifted[2 * k].item() + base[2 * k].item()) < 1e-9

    def test_periodic_beyond_scale(self):
        a = fourier_features(torch.tensor([[25.0, -3.0]]))
        b = fourier_features(torch.tensor([[25.0 - 2 * POINT_SCALE, -3.0]]))
        assert torch.allclose(a, b, atol=1e-9)

    def test_rejects_bad_trailing_dim(self):
        with pytest.raises(ValueError):
            fourier_features(torch.zeros(4, 3))


class TestEncoder:
    def test_output_shape(self):
        torch.manual_seed(0)
        enc = PointEncoder(dim=128)
        out = enc(torch.randn(7, 2, dtype=torch.float64))
        assert out.shape == (7, 128)
        assert out.dtype == torch.float64

    def test_seeded_init_is_deterministic(self):
        torch.manual_seed(11)
        a = PointEncoder(dim=32)
        torch.manual_seed(11)
        b = PointEncoder(dim=32)
        x = torch.full((3, 2), 0.7, dtype=torch.float64)
        assert torch.equal(a(x), b(x))

    def test_distinct_points_get_distinct_embeddings(self):
        torch.manual_seed(1)
        enc = PointEncoder(dim=64)
        xs = torch.linspace(-18, 18, 25, dtype=torch.float64)
        grid = torch.cartesian_prod(xs, xs)
        emb = enc(grid)
        d = torch.cdist(emb, emb) + torch.eye(len(emb), dtype=torch.float64) * 1e9
        assert d.min().item() > 1e-6

    def test_jacobian_matches_finite_differences(self):
        torch.manual_seed(2)
        enc = PointEncoder(dim=24)
        p = torch.tensor([[3.7, -8.1]], dtype=torch.float64)
        jac = torch.autograd.functional.jacobian(lambda q: enc(q).squeeze(0), p)
        jac = jac.squeeze(1)  # (24, 2)
        h = 1e-6
        for c in range(2):
            e = torch.zeros_like(p)
            e[0, c] = h
            fd = (enc(p + e) - enc(p - e)).squeeze(0) / (2 * h)
            rel = (jac[:, c] - fd).norm() / (fd.norm() + 1e-12)
            assert rel.item() < 1e-6

    def test_lipschitz_bound(self):
        # features: |d sin(2^k pi c/s)/dc| <= 2^k pi/s per band, both coords
        torch.manual_seed(4)
        enc = PointEncoder(dim=48)
        per_coord = math.sqrt(sum((2.0**k * math.pi / POINT_SCALE) ** 2 for k in range(N_BANDS)))
        w1 = torch.linalg.matrix_norm(enc.net[0].weight, ord=2).item()
        w2 = torch.linalg.matrix_norm(enc.net[2].weight, ord=2).item()
        bound = per_coord * math.sqrt(2) * w1 * w2 * 1.13  # gelu slope peaks near 1.13
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = torch.tensor(rng.uniform(-15, 15, size=(1, 2)))
            q = p + torch.tensor(rng.normal(scale=0.1, size=(1, 2)))
            lhs = (enc(p) - enc(q)).norm().item()
            assert lhs <= bound * (p - q).norm().item() + 1e-12


class TestHead:
    def test_output_shape_and_scale(self):
        torch.manual_seed(0)
        head = PointHead(dim=32)
        out = head(torch.randn(5, 32, dtype=torch.float64))
        assert out.shape == (5, 2)
        raw = head.net(torch.randn(5, 32, dtype=torch.float64))
        assert head.scale == POINT_SCALE
        assert raw.abs().max().item() * POINT_SCALE < 1e3  # sane init magnitudes

    def test_jacobian_matches_finite_differences(self):
        torch.manual_seed(3)
        head = PointHead(dim=16)
        h0 = torch.randn(16, dtype=torch.float64)
        jac = torch.autograd.functional.jacobian(head, h0)  # (2, 16)
        h = 1e-6
        for c in range(5):
            e = torch.zeros_like(h0)
            e[c] = h
            fd = (head(h0 + e) - head(h0 - e)) / (2 * h)
            rel = (jac[:, c] - fd).norm() / (fd.norm() + 1e-12)
            assert rel.item() < 1e-6


class TestCapacity:
    def test_encoder_head_can_represent_identity(self):
        # decode(encode(p)) learnable to sub-centimeter on 256 fixed points
        torch.manual_seed(7)
        enc, head = PointEncoder(dim=32), PointHead(dim=32)
        rng = np.random.default_rng(7)
        pts = torch.tensor(rng.uniform(-POINT_SCALE, POINT_SCALE, size=(256, 2)))
        opt = torch.optim.Adam(list(enc.parameters()) + list(head.parameters()), lr=1e-2)
        steps = 3000
        loss = None
        for step in range(steps):
            for group in opt.param_groups:
                group["lr"] = 1e-2 * 0.5 * (1 + math.cos(math.pi * step / steps))
            opt.zero_grad()
            loss = (head(enc(pts)) - pts).abs().mean()
            if loss.item() < 0.01:
                break
            loss.backward()
            opt.step()
        assert loss.item() < 0.01, f"identity fit stalled at L1 {loss.item():.4f}"
