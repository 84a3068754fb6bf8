import pytest
import torch
from hypothesis import given, settings, strategies as st

from rccyclegan.config import TrainConfig
from rccyclegan.errors import ConfigError, LoadError, ShapeError
from rccyclegan.models import (
    FeatureNetwork,
    RainIntensity,
    build_discriminator,
    build_feature_network,
    build_generator,
    build_rmi,
    count_params,
    discriminator_forward,
    encode_level,
    feature_forward,
    generator_forward,
    label_plane,
    param_checksum,
    rmi_forward,
)


def rand_image(h, w, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, h, w, generator=g) * 2 - 1


def test_intensity_levels_ordered():
    assert list(RainIntensity) == sorted(RainIntensity)
    assert len(RainIntensity) == 4
    assert [encode_level(lv) for lv in RainIntensity] == [0.0, 1 / 3, 2 / 3, 1.0]


def test_label_plane_constant():
    p = label_plane([RainIntensity.MEDIUM, RainIntensity.HEAVY], 8, 12)
    assert p.shape == (2, 1, 8, 12)
    assert torch.all(p[0] == 2 / 3) and torch.all(p[1] == 1.0)


def test_generator_deterministic_init():
    cfg = TrainConfig(image_size=32, ngf=8)
    a, b = build_generator(cfg, 7), build_generator(cfg, 7)
    assert count_params(a) == count_params(b)
    assert param_checksum(a) == param_checksum(b)
    assert param_checksum(a) != param_checksum(build_generator(cfg, 8))


def test_generator_layer_counts():
    g = build_generator(TrainConfig(ngf=4), 0)
    enc_convs = [m for m in g.encoder if isinstance(m, torch.nn.Conv2d)]
    assert [c.kernel_size for c in enc_convs] == [(7, 7), (3, 3), (3, 3)]
    assert [c.stride for c in enc_convs] == [(1, 1), (2, 2), (2, 2)]
    assert sum(isinstance(m, torch.nn.Conv2d) for m in g.transformer.modules()) == 10
    dec = [m for m in g.decoder if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d))]
    assert len(dec) == 3 and isinstance(g.decoder[-1], torch.nn.Tanh)
    assert enc_convs[0].in_channels == 5 and dec[-1].out_channels == 3


def test_generator_full_size_shape():
    g = build_generator(TrainConfig(ngf=2), 0)
    with torch.no_grad():
        out = generator_forward(g, rand_image(256, 256), torch.zeros(1, 256, 256),
                                label_plane(RainIntensity.LIGHT, 256, 256)[0])
    assert out.shape == (3, 256, 256)


@settings(max_examples=10, deadline=None)
@given(h=st.integers(2, 12), w=st.integers(2, 12))
def test_generator_shape_preservation(h, w):
    g = build_generator(TrainConfig(ngf=2, n_res_blocks=1), 0)
    H, W = 4 * h, 4 * w
    with torch.no_grad():
        out = g(rand_image(H, W), torch.zeros(1, H, W), label_plane(1, H, W)[0])
    assert out.shape == (3, H, W)
    assert out.abs().max() < 1


def test_generator_purity_and_conditioning():
    g = build_generator(TrainConfig(ngf=8), 11)
    x, m = rand_image(32, 32), torch.rand(1, 32, 32)
    with torch.no_grad():
        a = g(x, m, label_plane(RainIntensity.LIGHT, 32, 32)[0])
        b = g(x, m, label_plane(RainIntensity.LIGHT, 32, 32)[0])
        c = g(x, m, label_plane(RainIntensity.HEAVY, 32, 32)[0])
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert (a - c).abs().max() > 1e-4


def test_generator_shape_errors():
    g = build_generator(TrainConfig(ngf=2), 0)
    with pytest.raises(ShapeError):
        g(rand_image(32, 32), torch.zeros(1, 16, 16), label_plane(1, 32, 32)[0])
    with pytest.raises(ShapeError):
        g(rand_image(30, 30), torch.zeros(1, 30, 30), label_plane(1, 30, 30)[0])
    with pytest.raises(ConfigError):
        TrainConfig(image_size=30)


def test_unlabeled_generator_channels():
    cfg = TrainConfig(use_labels=False, ngf=4)
    g = build_generator(cfg, 0)
    assert g.encoder[1].in_channels == 4
    assert build_discriminator(cfg, 0).branches[0].net[0].in_channels == 3
    with torch.no_grad():
        assert g(rand_image(16, 16), torch.zeros(1, 16, 16)).shape == (3, 16, 16)


@pytest.mark.parametrize("size,expected", [(256, [16, 8, 4]), (64, [4, 2, 1])])
def test_discriminator_map_shapes(size, expected):
    d = build_discriminator(TrainConfig(ndf=2), 0)
    with torch.no_grad():
        maps = discriminator_forward(d, rand_image(size, size), label_plane(2, size, size)[0])
    assert [tuple(m.shape) for m in maps] == [(1, e, e) for e in expected]
    assert all(((m > 0) & (m < 1)).all() for m in maps)


def test_discriminator_scale_inputs_are_pooled():
    d = build_discriminator(TrainConfig(ndf=2), 0)
    x, lab = rand_image(32, 32), label_plane(1, 32, 32)[0]
    inputs = d.scale_inputs(x, lab)
    full = torch.cat([x, lab]).unsqueeze(0)
    assert torch.equal(inputs[0], full)
    expect = full.reshape(1, 4, 16, 2, 16, 2).mean(dim=(3, 5))
    torch.testing.assert_close(inputs[1], expect, rtol=0, atol=1e-6)


def test_discriminator_independent_branches_and_purity():
    d = build_discriminator(TrainConfig(ndf=2), 0)
    w = [b.net[0].weight for b in d.branches]
    assert not torch.equal(w[0], w[1])
    x, lab = torch.zeros(3, 32, 32), label_plane(3, 32, 32)[0]
    with torch.no_grad():
        a, b = d(x, lab), d(x, lab)
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    assert all(torch.isfinite(m).all() for m in a)


def test_discriminator_leakyrelu_and_errors():
    d = build_discriminator(TrainConfig(ndf=2, activation="leakyrelu"), 0)
    assert any(isinstance(m, torch.nn.LeakyReLU) for m in d.modules())
    assert not any(isinstance(m, torch.nn.Sigmoid) for m in d.modules())
    with pytest.raises(ConfigError):
        TrainConfig(activation="relu")
    with pytest.raises(ShapeError):
        d(rand_image(32, 32), label_plane(1, 16, 16)[0])


def test_rmi_mask_range_and_steps():
    rmi = build_rmi(TrainConfig(rmi_channels=4), 2)
    x = rand_image(24, 20)
    with torch.no_grad():
        m = rmi_forward(rmi, x)
        m2 = rmi_forward(build_rmi(TrainConfig(rmi_channels=4), 2), x)
    assert m.shape == (1, 24, 20)
    assert m.min() >= 0 and m.max() <= 1
    assert rmi.steps_run == 6
    assert torch.equal(m, m2)


def test_feature_network_frozen():
    f = build_feature_network(TrainConfig())
    x = rand_image(32, 32)
    before = param_checksum(f)
    f.train()
    assert not f.training
    a, b = feature_forward(f, x), feature_forward(f, x)
    assert torch.equal(a, b)
    assert a.shape[-2] <= 32 and a.shape[-1] <= 32
    assert all(not p.requires_grad for p in f.parameters())
    assert param_checksum(f) == before


def test_feature_network_missing_weights(tmp_path):
    with pytest.raises(LoadError):
        FeatureNetwork(tmp_path / "vgg16.pth")
    with pytest.raises(LoadError):
        build_feature_network(TrainConfig(feature_weights=str(tmp_path / "nope.pth")))


def test_feature_network_loads_vgg_state(tmp_path):
    torchvision = pytest.importorskip("torchvision")
    torch.manual_seed(1)
    vgg = torchvision.models.vgg16()
    path = tmp_path / "vgg16.pth"
    torch.save(vgg.state_dict(), path)
    f = FeatureNetwork(path)
    torch.testing.assert_close(f.body[0].weight, vgg.features[0].weight)
    assert f(rand_image(32, 32)).shape == (256, 8, 8)
