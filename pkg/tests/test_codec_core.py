import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from icm_codec.checkpoint import codec_state_hash, load_codec, save_codec
from icm_codec.codec_core import (
    LIKELIHOOD_FLOOR,
    PARTITION_LABELS,
    CodecConfig,
    ParameterSet,
    build_codec,
    decode_forward,
    encode_forward,
    latent_likelihood,
    pad_to_stride,
    partition_label,
    partition_parameters,
    quantize,
)
from icm_codec.errors import ConfigurationError


def test_pad_keeps_multiple_of_eight():
    img = torch.rand(1, 3, 512, 512)
    out, size = pad_to_stride(img)
    assert out.shape == (1, 3, 512, 512)
    assert size == (512, 512)
    assert torch.equal(out, img)


def test_pad_rounds_up_to_multiple_of_eight():
    img = torch.rand(1, 3, 500, 300)
    out, size = pad_to_stride(img)
    assert out.shape[-2:] == (504, 304)
    assert size == (500, 300)
    assert torch.equal(out[..., :500, :300], img)
    # reflection: row 500 mirrors row 498
    assert torch.equal(out[..., 500, :300], img[..., 498, :])
    assert torch.equal(out[..., :500, 300], img[..., :, 298])


def test_pad_single_pixel_is_constant():
    img = torch.tensor([0.1, 0.5, 0.9]).view(1, 3, 1, 1)
    out, size = pad_to_stride(img)
    assert out.shape == (1, 3, 8, 8)
    assert size == (1, 1)
    assert torch.equal(out, img.expand(1, 3, 8, 8))


@given(h=st.integers(1, 40), w=st.integers(1, 40))
@settings(max_examples=40, deadline=None)
def test_pad_is_smallest_multiple(h, w):
    out, size = pad_to_stride(torch.rand(1, 3, h, w))
    ph, pw = out.shape[-2:]
    assert ph % 8 == 0 and pw % 8 == 0
    assert ph - h < 8 and pw - w < 8
    assert size == (h, w)


def test_tiny_latent_shape_and_determinism(tiny_codec):
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    y1 = encode_forward(tiny_codec, x)
    y2 = encode_forward(tiny_codec, x)
    assert y1.shape == (1, 32, 8, 8)
    assert torch.equal(y1, y2)


def test_paper_latent_shape():
    codec = build_codec(CodecConfig.from_profile("paper"), seed=0)
    with torch.no_grad():
        y = encode_forward(codec, torch.rand(1, 3, 512, 512))
        x_hat = decode_forward(codec, torch.zeros(1, 128, 64, 64))
    assert y.shape == (1, 128, 64, 64)
    assert x_hat.shape == (1, 3, 512, 512)


def test_tiny_profile_parameter_count(tiny_codec):
    assert sum(p.numel() for p in tiny_codec.parameters()) == 237_900


def test_encode_rejects_unpadded(tiny_codec):
    with pytest.raises(ConfigurationError):
        encode_forward(tiny_codec, torch.rand(1, 3, 60, 64))


def test_round_ties_to_even():
    y = torch.tensor([0.4, -1.6, 2.5])
    assert torch.equal(quantize(y, "round"), torch.tensor([0.0, -2.0, 2.0]))


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=64))
@settings(max_examples=60, deadline=None)
def test_round_bound_and_idempotence(values):
    y = torch.tensor(values, dtype=torch.float64)
    q = quantize(y, "round")
    assert float((q - y).abs().max()) <= 0.5
    assert torch.equal(quantize(q, "round"), q)


def test_noisy_within_half():
    y = torch.randn(4, 32, 8, 8, generator=torch.Generator().manual_seed(3)) * 5
    noisy = quantize(y, "noisy", torch.Generator().manual_seed(0))
    assert float((noisy - y).abs().max()) <= 0.5
    again = quantize(y, "noisy", torch.Generator().manual_seed(0))
    assert torch.equal(noisy, again)


def test_unknown_quantize_mode():
    with pytest.raises(ConfigurationError):
        quantize(torch.zeros(3), "floor")


def test_decode_shape_and_range(tiny_codec):
    with torch.no_grad():
        out = decode_forward(tiny_codec, torch.zeros(1, 32, 8, 8))
    assert out.shape == (1, 3, 64, 64)
    assert torch.isfinite(out).all()
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_decode_channel_mismatch(tiny_codec):
    with pytest.raises(ConfigurationError):
        decode_forward(tiny_codec, torch.zeros(1, 16, 8, 8))


@given(h=st.integers(1, 4), w=st.integers(1, 4))
@settings(max_examples=10, deadline=None)
def test_shape_round_trip(h, w):
    codec = build_codec(CodecConfig.from_profile("tiny"), seed=0)
    x = torch.rand(1, 3, 8 * h, 8 * w)
    with torch.no_grad():
        out = decode_forward(codec, quantize(encode_forward(codec, x), "round"))
    assert out.shape == x.shape


def test_fresh_pmf_in_unit_interval(tiny_codec):
    pm = tiny_codec.probability_model
    with torch.no_grad():
        p0 = pm.pmf(torch.zeros(32, 1))
        support = torch.arange(-64, 65, dtype=torch.float32).expand(32, -1)
        total = pm.pmf(support).sum(dim=1)
    assert ((p0 > 0) & (p0 < 1)).all()
    assert float(total.max()) <= 1 + 1e-6


def test_pmf_vanishes_far_out(tiny_codec):
    with torch.no_grad():
        far = tiny_codec.probability_model.pmf(torch.full((32, 1), 1e4))
    assert float(far.max()) < 1e-9


def test_cdf_strictly_increasing(tiny_codec):
    v = torch.linspace(-30, 30, 601, dtype=torch.float64).expand(32, -1)
    with torch.no_grad():
        c = tiny_codec.probability_model.cdf(v)
    assert (c[:, 1:] > c[:, :-1]).all()
    with torch.no_grad():
        lo = tiny_codec.probability_model.cdf(torch.full((32, 1), -1e6, dtype=torch.float64))
        hi = tiny_codec.probability_model.cdf(torch.full((32, 1), 1e6, dtype=torch.float64))
    assert float(lo.max()) < 1e-12 and float(hi.min()) > 1 - 1e-12


def test_pmf_sum_matches_cdf_mass(tiny_codec):
    # perturb the prior so the check is not run on initial values only
    pm = tiny_codec.probability_model
    g = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for p in pm.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=g))
        support = torch.arange(-64, 65, dtype=torch.float64).expand(32, -1)
        brute = pm.pmf(support).sum(dim=1)
        mass = pm.cdf(torch.full((32, 1), 64.5, dtype=torch.float64)) - pm.cdf(
            torch.full((32, 1), -64.5, dtype=torch.float64)
        )
    assert torch.allclose(brute, mass.squeeze(1), atol=1e-3)


def test_likelihood_floor_and_shape(tiny_codec):
    latent = torch.tensor([0.0, 1.0, 500.0, -500.0]).view(1, 4, 1, 1).repeat(2, 8, 3, 5)
    with torch.no_grad():
        p = latent_likelihood(latent, tiny_codec.probability_model)
    assert p.shape == latent.shape
    assert float(p.min()) >= LIKELIHOOD_FLOOR
    assert float(p.max()) <= 1.0


def test_likelihood_floor_passes_gradient_upwards(tiny_codec):
    latent = torch.full((1, 32, 1, 1), 500.0, requires_grad=True)
    p = latent_likelihood(latent, tiny_codec.probability_model)
    assert torch.all(p == LIKELIHOOD_FLOOR)
    (-torch.log(p).sum()).backward()
    # gradient descent moves the value back towards the bulk of the prior
    assert (latent.grad > 0).all()


def test_partition_labels(tiny_codec):
    assert partition_label("decoder.layer0.conv1.weight") == "decoder_head"
    assert partition_label("decoder.layer1.shortcut.0.weight") == "decoder_head"
    assert partition_label("decoder.layer2.conv1.weight") == "decoder_tail"
    assert partition_label("decoder.layer5.0.bias") == "decoder_tail"
    assert partition_label("encoder.layer4.weight") == "encoder"
    ps = ParameterSet.from_modules(tiny_codec)
    assert set(ps.labels.values()) == {"encoder", "probability_model", "decoder_head", "decoder_tail"}
    assert len(ps) == len(list(tiny_codec.parameters()))


def test_partition_head_tail_split(tiny_codec):
    ps = ParameterSet.from_modules(tiny_codec, torch.nn.Conv2d(3, 1, 4))
    trainable, frozen = partition_parameters(ps, {"decoder_head", "discriminator"})
    assert {ps.labels[n] for n in trainable} == {"decoder_head", "discriminator"}
    assert {ps.labels[n] for n in frozen} == {"encoder", "probability_model", "decoder_tail"}
    assert set(trainable).isdisjoint(frozen)
    assert len(trainable) + len(frozen) == len(ps)
    assert all(p.requires_grad for p in trainable.values())
    assert not any(p.requires_grad for p in frozen.values())


def test_partition_nothing_and_everything(tiny_codec):
    ps = ParameterSet.from_modules(tiny_codec)
    trainable, frozen = partition_parameters(ps, set())
    assert not trainable and len(frozen) == len(ps)
    trainable, frozen = partition_parameters(ps, set(PARTITION_LABELS))
    assert not frozen and len(trainable) == len(ps)


def test_partition_unknown_label(tiny_codec):
    with pytest.raises(ConfigurationError):
        partition_parameters(ParameterSet.from_modules(tiny_codec), {"decoder"})


def test_build_codec_is_seeded(tiny_cfg):
    a = build_codec(tiny_cfg, seed=7)
    b = build_codec(tiny_cfg, seed=7)
    c = build_codec(tiny_cfg, seed=8)
    assert codec_state_hash(a) == codec_state_hash(b)
    assert codec_state_hash(a) != codec_state_hash(c)


def test_checkpoint_round_trip(tmp_path, tiny_codec):
    manifest = save_codec(tmp_path / "ck", tiny_codec, step=3)
    loaded, read = load_codec(tmp_path / "ck")
    assert read["step"] == 3
    assert read["content_hash"] == manifest["content_hash"] == codec_state_hash(tiny_codec)
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(encode_forward(loaded, x), encode_forward(tiny_codec, x))


def test_checkpoint_detects_corruption(tmp_path, tiny_codec):
    save_codec(tmp_path / "ck", tiny_codec)
    blob = tmp_path / "ck" / "encoder.layer0.conv1.weight.f32"
    data = bytearray(blob.read_bytes())
    data[0] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(ConfigurationError):
        load_codec(tmp_path / "ck")


def test_image_tensor_helpers_round_trip():
    from icm_codec.codec_core import image_to_tensor, tensor_to_image

    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    t = image_to_tensor(img)
    assert t.shape == (1, 3, 5, 7)
    back = np.round(tensor_to_image(t) * 255).astype(np.uint8)
    assert np.array_equal(back, img)
