import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cad.codec import (
    Bitstream,
    CodecConfig,
    LatentPair,
    RasterImage,
    ScaleHyperprior,
    compression_loss,
    round_half_away,
)
from cad.codec.bitstream import HEADER_BYTES
from cad.codec.entropy import (
    FactorizedPrior,
    GaussianConditional,
    bits_from_likelihood,
    unzigzag,
    zigzag,
)
from cad.codec.rangecoder import RangeDecoder, RangeEncoder, cumulative, quantize_pmf
from cad.distort import ToyDatasetSpec, make_toy_dataset
from cad.errors import (
    CorruptStreamError,
    DimensionMismatchError,
    ModelMismatchError,
    ModelNotInitializedError,
    SymbolOutOfRangeError,
)
from oracles import directional_fd_check, gaussian_uniform_mass

SMALL = CodecConfig(latent_channels=8, hyper_channels=8, hidden_channels=8, tap_channels=8)


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return ScaleHyperprior().eval()


@pytest.fixture(scope="module")
def small_codec():
    torch.manual_seed(1)
    return ScaleHyperprior(SMALL).eval().freeze()


# ------------------------------------------------------------------ shapes

def test_shapes_64(codec):
    lat = codec.encode(torch.rand(1, 3, 64, 64))
    assert lat.y.shape == (1, 150, 4, 4)
    assert lat.z.shape == (1, 225, 1, 1)


def test_shapes_512(codec):
    with torch.no_grad():
        lat = codec.encode(torch.rand(1, 3, 512, 512))
        assert lat.y.shape == (1, 150, 32, 32)
        assert lat.z.shape == (1, 225, 8, 8)
        x_hat, tap = codec.decode(codec.quantize(lat))
    assert tap.shape == (1, 32, 256, 256)
    assert x_hat.shape == (1, 3, 512, 512)


def test_padding_is_recorded_and_cropped(small_codec):
    img = RasterImage(torch.rand(3, 48, 80))
    lat = small_codec.encode(img)
    assert lat.orig_size == (48, 80) and lat.padded_size == (64, 128)
    x_hat, tap = small_codec.decode(small_codec.quantize(lat))
    assert x_hat.shape == (1, 3, 48, 80) and tap.shape == (1, 8, 24, 40)


def test_odd_dims_rejected(small_codec):
    with pytest.raises(DimensionMismatchError):
        small_codec.encode(torch.rand(1, 3, 63, 64))


def test_zero_image_gives_bias_latent():
    cfg = CodecConfig(latent_channels=4, hyper_channels=4, hidden_channels=4, tap_channels=4,
                      stages=2, hyper_stages=1)
    m = ScaleHyperprior(cfg)
    with torch.no_grad():
        m.g_a[-1].weight.zero_()
        m.g_a[-1].bias.copy_(torch.tensor([0.5, -1.0, 2.0, 0.0]))
        y = m.encode(torch.zeros(1, 3, 8, 8)).y
    expected = torch.tensor([0.5, -1.0, 2.0, 0.0])[None, :, None, None].expand_as(y)
    assert torch.equal(y, expected)


def test_raster_image_validation():
    with pytest.raises(ValueError):
        RasterImage(torch.full((3, 8, 8), 1.5))
    with pytest.raises(ValueError):
        RasterImage(torch.full((3, 8, 8), float("nan")))
    img = RasterImage.from_uint8(np.full((4, 4, 3), 255, np.uint8))
    assert img.data.max() == 1.0 and img.shape == (3, 4, 4)


# ------------------------------------------------------------------ quantisation

def test_round_examples():
    assert torch.equal(round_half_away(torch.tensor([0.4, -1.6])), torch.tensor([0.0, -2.0]))
    assert round_half_away(torch.tensor(2.5)) == 3
    assert round_half_away(torch.tensor(-2.5)) == -3


def test_eval_quantize_is_integral(small_codec):
    q = small_codec.quantize(small_codec.encode(torch.rand(2, 3, 64, 64)), "eval")
    assert q.quantized
    assert torch.equal(q.y, torch.round(q.y)) and torch.equal(q.z, torch.round(q.z))


def test_train_noise_monte_carlo(small_codec):
    g = torch.Generator().manual_seed(0)
    lat = LatentPair(torch.zeros(100_000), torch.zeros(1))
    q = small_codec.quantize(lat, "train", generator=g)
    assert not q.quantized
    assert q.y.min() > -0.5 and q.y.max() < 0.5
    assert abs(float(q.y.mean())) < 0.005


def test_quantize_mode_validated(small_codec):
    with pytest.raises(ValueError):
        small_codec.quantize(LatentPair(torch.zeros(1), torch.zeros(1)), "bogus")


# ------------------------------------------------------------------ rate model

def test_bits_of_known_probabilities():
    assert float(bits_from_likelihood(torch.tensor([1 / 256]))) == pytest.approx(8.0)
    assert float(bits_from_likelihood(torch.tensor([1.0]))) == 0.0
    assert float(bits_from_likelihood(torch.tensor([0.0]))) == pytest.approx(32.0)


def test_gaussian_mass_matches_quadrature():
    gc = GaussianConditional()
    y = torch.tensor([0.0, 0.0, 1.0, -1.0], dtype=torch.float64)
    lik = gc.likelihood(y, torch.ones_like(y))
    bits = -torch.log2(lik).sum().item()
    oracle = -sum(math.log2(gaussian_uniform_mass(v, 1.0)) for v in [0, 0, 1, -1])
    assert abs(bits - oracle) / oracle <= 1e-6


def test_scales_floor_clamped():
    gc = GaussianConditional()
    y = torch.tensor([0.0])
    assert torch.equal(gc.likelihood(y, torch.tensor([1e-6])), gc.likelihood(y, torch.tensor([0.11])))


def test_factorized_likelihood_sums_to_one():
    torch.manual_seed(0)
    fp = FactorizedPrior(3).double()
    z = torch.arange(-300, 301, dtype=torch.float64).reshape(1, 1, 1, -1).expand(1, 3, 1, -1)
    total = fp.likelihood(z).sum(-1)
    assert torch.allclose(total, torch.ones_like(total), atol=1e-6)


def test_tables_required_before_coding():
    with pytest.raises(ModelNotInitializedError):
        GaussianConditional().encode(np.zeros(4, np.int64), np.zeros(4, np.int64))
    with pytest.raises(ModelNotInitializedError):
        FactorizedPrior(2).encode(np.zeros((2, 1, 1), np.int64))


# ------------------------------------------------------------------ range coder

def test_uniform_byte_model_overhead():
    rng = np.random.default_rng(0)
    cdf = cumulative(quantize_pmf(np.ones(256)))
    syms = rng.integers(0, 256, 1024)
    enc = RangeEncoder()
    for s in syms:
        enc.encode_symbol(cdf, int(s))
    data = enc.finish()
    assert 1024 <= len(data) <= 1024 + 8
    dec = RangeDecoder(data)
    assert [dec.decode_symbol(cdf) for _ in syms] == syms.tolist()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=40), st.integers(0, 2**31 - 1))
def test_range_coder_round_trip(weights, seed):
    freq = quantize_pmf(np.array(weights) + 1e-9)
    assert freq.sum() == 1 << 16 and freq.min() >= 1
    cdf = cumulative(freq)
    syms = np.random.default_rng(seed).integers(0, len(weights), 200).tolist()
    enc = RangeEncoder()
    for s in syms:
        enc.encode_symbol(cdf, s)
    dec = RangeDecoder(enc.finish())
    assert [dec.decode_symbol(cdf) for _ in syms] == syms


@given(st.integers(-(2**20), 2**20))
def test_zigzag_inverse(v):
    assert unzigzag(zigzag(v)) == v
    assert zigzag(v) >= 0


def test_escape_and_out_of_range():
    gc = GaussianConditional()
    gc.build_tables()
    idx = np.zeros(3, np.int64)
    y = np.array([0, 500, -20000])
    assert np.array_equal(gc.decode(gc.encode(y, idx), idx), y)
    with pytest.raises(SymbolOutOfRangeError):
        gc.encode(np.array([40000]), np.zeros(1, np.int64))


# ------------------------------------------------------------------ bitstreams

def test_thousand_random_latents_round_trip(small_codec):
    rng = np.random.default_rng(0)
    for i in range(1000):
        y = torch.tensor(rng.integers(-6, 7, (1, 8, 4, 4)) * rng.integers(0, 2), dtype=torch.float32)
        z = torch.tensor(rng.integers(-4, 5, (1, 8, 1, 1)), dtype=torch.float32)
        if i % 100 == 0:
            y[0, 0, 0, 0] = 1000  # escape path
        lat = LatentPair(y, z, True, (64, 64), (64, 64))
        bs = small_codec.entropy_encode(lat)
        back = small_codec.entropy_decode(bs.to_bytes())
        assert torch.equal(back.y, y) and torch.equal(back.z, z)


def test_all_zero_latent_is_short(codec):
    codec.freeze()
    lat = LatentPair(torch.zeros(1, 150, 4, 4), torch.zeros(1, 225, 1, 1), True, (64, 64), (64, 64))
    bs = codec.entropy_encode(lat)
    assert len(bs.y_payload) < 150 * 16 / 8
    est = codec.estimate_rate(lat).item()
    assert len(bs.y_payload + bs.z_payload) * 8 <= est + 64


def test_truncated_stream_rejected(small_codec):
    data = small_codec.compress(RasterImage(torch.rand(3, 64, 64))).to_bytes()
    for cut in (len(data) - 1, HEADER_BYTES + 1, 10):
        with pytest.raises(CorruptStreamError):
            small_codec.entropy_decode(data[:cut])


def test_checksum_and_magic(small_codec):
    data = bytearray(small_codec.compress(RasterImage(torch.rand(3, 64, 64))).to_bytes())
    flipped = bytearray(data)
    flipped[-1] ^= 0x01
    with pytest.raises(CorruptStreamError):
        Bitstream.from_bytes(bytes(flipped))
    data[0:4] = b"XXXX"
    with pytest.raises(CorruptStreamError):
        Bitstream.from_bytes(bytes(data))


def test_model_mismatch(small_codec):
    bs = small_codec.compress(RasterImage(torch.rand(3, 64, 64)))
    torch.manual_seed(99)
    other = ScaleHyperprior(SMALL).eval().freeze()
    assert other.model_id != small_codec.model_id
    with pytest.raises(ModelMismatchError):
        other.entropy_decode(bs)


def test_bpp_accounting(small_codec):
    bs = small_codec.compress(RasterImage(torch.rand(3, 64, 64)))
    assert bs.bpp == len(bs.to_bytes()) * 8 / (64 * 64)


def test_header_fields(small_codec):
    img = RasterImage(torch.rand(3, 48, 64))
    bs = Bitstream.from_bytes(small_codec.compress(img).to_bytes())
    h = bs.header
    assert (h.orig_h, h.orig_w, h.padded_h, h.padded_w) == (48, 64, 64, 64)
    assert h.model_id == small_codec.model_id


def test_rate_model_consistency_64(codec):
    codec.freeze()
    ds = make_toy_dataset(ToyDatasetSpec(num_pairs=4))
    for x in ds.x1:
        lat = codec.quantize(codec.encode(x[None]))
        est = codec.estimate_rate(lat).item()
        actual = codec.entropy_encode(lat).num_bits
        assert abs(actual - est) <= 0.02 * est + 512


def test_decompress_matches_eval_path(small_codec):
    x = torch.rand(3, 64, 64)
    rec, tap = small_codec.decompress(small_codec.compress(RasterImage(x)))
    with torch.no_grad():
        ref, ref_tap = small_codec.decode(small_codec.quantize(small_codec.encode(x[None])))
    assert torch.equal(rec.data, ref[0]) and torch.equal(tap.data, ref_tap[0])


def test_eval_path_deterministic(small_codec):
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a = small_codec.decode(small_codec.quantize(small_codec.encode(x)))[0]
        b = small_codec.decode(small_codec.quantize(small_codec.encode(x)))[0]
    assert torch.equal(a, b)


def test_output_clamped():
    m = ScaleHyperprior(SMALL)
    with torch.no_grad():
        m.g_s_out.weight.zero_()
        m.g_s_out.bias.fill_(-0.2)
        x_hat, _ = m.decode(LatentPair(torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 1, 1), True))
    assert torch.equal(x_hat, torch.zeros_like(x_hat))


# ------------------------------------------------------------------ loss and training

def test_compression_loss_examples():
    assert compression_loss(2.0, 0.01, 0.05) == pytest.approx(0.11)
    assert compression_loss(2.0, 0.01, 0.0) == 0.01


def test_encoder_gradient_matches_finite_differences():
    cfg = CodecConfig(in_channels=2, latent_channels=4, hyper_channels=4, hidden_channels=4,
                      tap_channels=4, stages=2, hyper_stages=1)
    torch.manual_seed(0)
    m = ScaleHyperprior(cfg).double()
    x = torch.rand(1, 2, 8, 8, dtype=torch.float64)

    def loss():
        g = torch.Generator().manual_seed(3)
        out = m(x, generator=g)
        return compression_loss(out["bpp"].mean(), torch.mean((out["x_hat"] - x) ** 2), 0.01)

    params = [p for layer in m.g_a for p in layer.parameters()]
    assert directional_fd_check(loss, params) <= 1e-4


def test_distortion_falls_during_pretraining():
    torch.manual_seed(0)
    ds = make_toy_dataset(ToyDatasetSpec(num_pairs=16))
    m = ScaleHyperprior(CodecConfig(latent_channels=16, hyper_channels=16, hidden_channels=16, tap_channels=8))
    opt = torch.optim.Adam(m.parameters(), lr=1e-3)
    x = ds.x1

    def distortion():
        m.eval()
        with torch.no_grad():
            d = float(torch.mean((m.decode(m.quantize(m.encode(x)))[0] - x) ** 2))
        m.train()
        return d

    start = distortion()
    g = torch.Generator().manual_seed(0)
    for _ in range(200):
        idx = torch.randint(0, 16, (8,), generator=g)
        out = m(x[idx], generator=g)
        loss = compression_loss(out["bpp"].mean(), torch.mean((out["x_hat"] - x[idx]) ** 2), 0.001)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert distortion() < start
