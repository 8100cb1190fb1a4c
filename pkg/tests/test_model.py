import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from disentangle import autodiff as ad
from disentangle.autodiff import Tensor
from disentangle.model import (
    VAEGAN, ArchConfig, adversary_loss, generator_loss, kl_divergence, reconstruction_loss, reparameterize,
)

SMALL = dict(channels=(4, 6, 8), disc_channels=(4, 6, 8), dim_s=5, dim_z=3, num_labels=4)


def model_for(side, channels=1, variant="shallow", **kw):
    args = {**SMALL, **kw}
    if variant == "deep":
        args["channels"] = (4, 4, 6, 6, 8, 8)
    return VAEGAN(ArchConfig(variant=variant, image_side=side, image_channels=channels, **args), seed=0)


@pytest.mark.parametrize("side,channels,variant", [(28, 1, "shallow"), (32, 1, "shallow"), (32, 3, "shallow"),
                                                   (28, 1, "deep"), (32, 3, "deep"), (8, 1, "shallow")])
def test_encoder_decoder_shapes(side, channels, variant):
    m = model_for(side, channels, variant)
    x = Tensor(np.random.default_rng(0).random((3, channels, side, side)))
    codes = m.encode(x)
    assert codes.s.shape == (3, 5) and codes.mu.shape == (3, 3) and codes.sigma.shape == (3, 3)
    assert np.all(codes.sigma.data > 0)
    out = m.decode(codes.mu, codes.s)
    assert out.shape == x.shape
    assert np.all((out.data > 0) & (out.data < 1))
    p = m.discriminate(x, [0, 1, 3])
    assert p.shape == (3,) and np.all((p.data > 0) & (p.data < 1))


def test_default_code_size_is_sixteen():
    a = ArchConfig()
    assert a.dim_s == 16 and a.dim_z == 16


def test_encoder_rejects_wrong_image_shape():
    m = model_for(28)
    with pytest.raises(ad.ShapeError, match=r"\(2, 1, 32, 32\)"):
        m.encode(Tensor(np.zeros((2, 1, 32, 32))))


def test_decoder_rejects_wrong_code_size():
    m = model_for(28)
    with pytest.raises(ad.ShapeError):
        m.decode(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 5))))


def test_discriminator_label_range_and_count():
    m = model_for(28)
    x = Tensor(np.zeros((2, 1, 28, 28)))
    with pytest.raises(IndexError):
        m.discriminate(x, [0, 4])
    with pytest.raises(ad.ShapeError):
        m.discriminate(x, [0])


def test_discriminator_depends_on_label():
    m = model_for(28)
    x = Tensor(np.random.default_rng(1).random((2, 1, 28, 28)))
    m.eval()
    assert not np.array_equal(m.discriminate(x, [0, 0]).data, m.discriminate(x, [1, 1]).data)


def test_bad_arch_is_rejected():
    with pytest.raises(ValueError):
        ArchConfig(variant="wide")
    with pytest.raises(ValueError):
        ArchConfig(variant="deep", channels=(1, 2, 3))
    with pytest.raises(ValueError):
        ArchConfig(image_side=0)


def test_separate_encoders_give_independent_trunks():
    m = model_for(28, separate_encoders=True)
    names = {n for n, _ in m.named_parameters()}
    assert any(n.startswith("enc.trunk_z.") for n in names)
    x = Tensor(np.random.default_rng(2).random((3, 1, 28, 28)))
    s_before = m.encode(x).s.data.copy()
    m.enc.trunk_z.conv1.weight.data[...] += 1.0
    np.testing.assert_array_equal(m.encode(x).s.data, s_before)


def test_same_seed_same_weights():
    a, b = model_for(28), model_for(28)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()


# ---------------------------------------------------------------- losses

def test_kl_standard_normal_is_zero():
    assert kl_divergence(Tensor(np.zeros((2, 4))), Tensor(np.ones((2, 4)))).item() == 0.0


def test_kl_known_value():
    mu, sigma = np.array([[1.0, -2.0]]), np.array([[0.5, 2.0]])
    ref = 0.5 * np.sum(mu ** 2 + sigma ** 2 - np.log(sigma ** 2) - 1)
    assert kl_divergence(Tensor(mu), Tensor(sigma)).item() == pytest.approx(ref, rel=1e-14)


def test_kl_batch_average():
    rng = np.random.default_rng(3)
    mu, sigma = rng.normal(size=(5, 3)), rng.uniform(0.2, 2, (5, 3))
    per = [kl_divergence(Tensor(mu[i]), Tensor(sigma[i])).item() for i in range(5)]
    assert kl_divergence(Tensor(mu), Tensor(sigma)).item() == pytest.approx(np.mean(per), rel=1e-13)


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        kl_divergence(Tensor(np.zeros(2)), Tensor(np.array([1.0, 0.0])))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-4, 4)), arrays(np.float64, 4, elements=st.floats(0.05, 5)))
def test_kl_nonnegative(mu, sigma):
    assert kl_divergence(Tensor(mu), Tensor(sigma)).item() >= -1e-12


def test_reparameterize_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        reparameterize(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))), np.zeros((2, 4)))


def test_reparameterize_value():
    z = reparameterize(Tensor(np.array([1.0, 2.0])), Tensor(np.array([0.5, 3.0])), np.array([2.0, -1.0]))
    assert z.data.tolist() == [2.0, -1.0]


def test_bernoulli_reconstruction_matches_bce():
    rng = np.random.default_rng(4)
    x, logits = rng.random((3, 1, 4, 4)), rng.normal(size=(3, 1, 4, 4))
    p = 1 / (1 + np.exp(-logits))
    ref = -np.sum(x * np.log(p) + (1 - x) * np.log(1 - p)) / 3
    via_logits = reconstruction_loss(x, ad.sigmoid(Tensor(logits))).item()
    via_probs = reconstruction_loss(x, Tensor(p)).item()
    assert via_logits == pytest.approx(ref, rel=1e-12)
    assert via_probs == pytest.approx(ref, rel=1e-12)


def test_gaussian_reconstruction():
    x, y = np.zeros((2, 3)), np.ones((2, 3))
    assert reconstruction_loss(x, Tensor(y), "gaussian").item() == pytest.approx(1.5)


def test_reconstruction_rejects_bad_input():
    with pytest.raises(ad.ShapeError):
        reconstruction_loss(np.zeros((2, 3)), Tensor(np.full((2, 4), 0.5)))
    with pytest.raises(ValueError):
        reconstruction_loss(np.zeros((2, 3)), Tensor(np.full((2, 3), 0.5)), "laplace")


def test_saturated_decoder_output_stays_finite():
    out = ad.sigmoid(Tensor(np.array([[60.0, -60.0]])))
    assert np.isfinite(reconstruction_loss(np.array([[0.0, 1.0]]), out).item())


def test_gan_losses_values():
    real, fake = np.array([0.9, 0.8]), np.array([0.1, 0.3])
    adv, _ = adversary_loss(Tensor(real), Tensor(fake))
    gen, _ = generator_loss(Tensor(fake))
    assert adv.item() == pytest.approx(-np.mean(np.log(real)) - np.mean(np.log(1 - fake)), rel=1e-13)
    assert gen.item() == pytest.approx(-np.mean(np.log(fake)), rel=1e-13)


def test_gan_losses_clamp_and_count():
    fake = Tensor(np.array([0.0, 0.5]))
    gen, n = generator_loss(fake)
    assert np.isfinite(gen.item()) and n == 1


def test_gan_losses_from_logits_are_exact_when_saturated():
    p = ad.sigmoid(Tensor(np.array([-40.0])))
    gen, n = generator_loss(p)
    assert gen.item() == pytest.approx(40.0, rel=1e-12) and n == 1
