import pytest
import torch

from llgan.models import (Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, count_parameters,
                          init_weights, sample_latent)


def conv_params(cin, cout, k, bn):
    return cin * cout * k * k + cout + (2 * cout if bn else 0)


# hand-summed per layer: weights + bias (+ BatchNorm gamma/beta)
G_PARAMS = (conv_params(500, 1024, 8, True) + conv_params(1024, 512, 4, True) + conv_params(512, 256, 4, True)
            + conv_params(256, 128, 4, True) + conv_params(128, 64, 2, True) + conv_params(64, 3, 2, False))
D_PARAMS = (conv_params(3, 64, 4, False) + conv_params(64, 128, 3, True) + conv_params(128, 256, 3, True)
            + conv_params(256, 512, 3, True) + conv_params(512, 1024, 3, True) + 1024 * 9 * 9 + 1)


def test_generator_spatial_chain():
    assert GeneratorConfig().spatial_chain() == [1, 8, 18, 36, 72, 142, 282]


def test_discriminator_spatial_chain():
    assert DiscriminatorConfig().spatial_chain() == [282, 141, 71, 36, 18, 9]


def test_generator_output_shape():
    G = Generator(GeneratorConfig(channel_scale=0.25))
    out = G(torch.randn(2, 500))
    assert out.shape == (2, 3, 282, 282)
    assert out.abs().max() <= 1.0


def test_generator_accepts_4d_latent():
    G = Generator(GeneratorConfig(channel_scale=0.125)).eval()
    z = torch.randn(2, 500)
    assert torch.equal(G(z), G(z[:, :, None, None]))


def test_generator_rejects_wrong_latent():
    with pytest.raises(ValueError):
        Generator(GeneratorConfig(channel_scale=0.125))(torch.randn(2, 499))


def test_discriminator_logits():
    D = Discriminator(DiscriminatorConfig(channel_scale=0.25))
    assert D(torch.randn(4, 3, 282, 282)).shape == (4,)


def test_discriminator_rejects_wrong_size():
    with pytest.raises(ValueError):
        Discriminator(DiscriminatorConfig(channel_scale=0.25))(torch.randn(2, 3, 128, 128))


def test_fc_input_features():
    assert Discriminator().fc_in_features == 1024 * 9 * 9


def test_parameter_counts_full_scale():
    assert count_parameters(Generator()) == G_PARAMS == 43_817_539
    assert count_parameters(Discriminator()) == D_PARAMS == 6_358_721


def test_generator_count_close_to_reference():
    assert abs(G_PARAMS - 43.83e6) / 43.83e6 < 0.05


def test_l3_depth_override():
    d = Discriminator(DiscriminatorConfig(d_l3_depth=123))
    assert d.features[2].out_channels == 123


def test_channel_scale_bounds():
    with pytest.raises(ValueError):
        GeneratorConfig(channel_scale=0.0)
    with pytest.raises(ValueError):
        DiscriminatorConfig(channel_scale=1.5)


def test_rgb_layer_never_scaled():
    assert GeneratorConfig(channel_scale=0.25).depths == (256, 128, 64, 32, 16, 3)


class TestInit:
    def test_same_seed_same_weights(self):
        a = init_weights(Generator(GeneratorConfig(channel_scale=0.125)), 3)
        b = init_weights(Generator(GeneratorConfig(channel_scale=0.125)), 3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_statistics(self):
        G = init_weights(Generator(), 0)
        w = G.net[0].weight  # 32.7M samples
        assert abs(w.mean().item()) < 3 * 0.02 / w.numel() ** 0.5
        assert w.std().item() == pytest.approx(0.02, rel=1e-2)
        bn = G.net[1]
        assert torch.equal(bn.bias, torch.zeros_like(bn.bias))
        assert abs(bn.weight.mean().item() - 1.0) < 3 * 0.02 / bn.weight.numel() ** 0.5

    def test_small_layer_mean_within_clt_bound(self):
        D = init_weights(Discriminator(), 1)
        w = D.features[2].weight.flatten()[:10000]
        assert abs(w.mean().item()) < 3 * 0.02 / 100


def test_sample_latent_seeded():
    a = sample_latent(3, 500, torch.Generator().manual_seed(1))
    b = sample_latent(3, 500, torch.Generator().manual_seed(1))
    assert a.shape == (3, 500) and torch.equal(a, b)
