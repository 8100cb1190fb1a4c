"""Encoder / decoder / conditional discriminator and the training losses.

The encoder splits an image into a *specified* code ``s`` (what the class
label determines) and a diagonal Gaussian posterior ``(mu, sigma)`` over the
*unspecified* code ``z``. The decoder adds FC projections of ``z`` and ``s``
and runs a transposed-conv stack mirroring the encoder trunk. The
discriminator scores an image as a genuine member of a given class.
"""
from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, LookupTable, Module, init_parameters

PROB_EPS = 1e-7


@dataclasses.dataclass
class ArchConfig:
    """Network shapes.

    ``shallow`` uses three 5x5 stride-2 convs; ``deep`` six 3x3 convs with
    stride 2 on every other layer. ``channels`` lists the encoder conv widths
    (3 or 6 entries); the decoder mirrors them.
    """

    variant: str = "shallow"
    image_channels: int = 1
    image_side: int = 32
    dim_s: int = 16
    dim_z: int = 16
    num_labels: int = 10
    channels: tuple = (64, 128, 256)
    disc_channels: tuple = (64, 128, 256)
    separate_encoders: bool = False
    classifier_hidden: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        if self.variant not in ("shallow", "deep"):
            raise ValueError(f"unknown architecture variant {self.variant!r}")
        need = 3 if self.variant == "shallow" else 6
        if len(self.channels) != need:
            raise ValueError(f"{self.variant} encoder needs {need} channel widths, got {len(self.channels)}")
        if len(self.disc_channels) != 3:
            raise ValueError("discriminator needs 3 channel widths")
        for name in ("image_channels", "image_side", "dim_s", "dim_z", "num_labels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def conv_layers(self) -> list[tuple[int, int, int, int, int]]:
        """(cin, cout, kernel, stride, padding) for each encoder conv."""
        cins = (self.image_channels,) + self.channels[:-1]
        if self.variant == "shallow":
            return [(ci, co, 5, 2, 2) for ci, co in zip(cins, self.channels)]
        return [(ci, co, 3, 1 + (i % 2), 1) for i, (ci, co) in enumerate(zip(cins, self.channels))]

    def spatial_sizes(self) -> list[int]:
        sizes = [self.image_side]
        for _, _, k, s, p in self.conv_layers():
            nxt = (sizes[-1] + 2 * p - k) // s + 1
            if nxt < 1:
                raise ValueError(f"image side {self.image_side} too small for the {self.variant} encoder")
            sizes.append(nxt)
        return sizes


class LatentCodes(NamedTuple):
    s: Tensor
    mu: Tensor
    sigma: Tensor


def _flatten(x: Tensor) -> Tensor:
    return ad.reshape(x, (x.shape[0], -1))


class _Trunk(Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.n_layers = len(arch.conv_layers())
        for i, (ci, co, k, s, p) in enumerate(arch.conv_layers(), start=1):
            setattr(self, f"conv{i}", Conv2d(ci, co, k, stride=s, padding=p))
            setattr(self, f"bn{i}", BatchNorm2d(co))

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i in range(1, self.n_layers + 1):
            h = ad.relu(getattr(self, f"bn{i}")(getattr(self, f"conv{i}")(h)))
        return _flatten(h)


class Encoder(Module):
    """Shared conv trunk feeding an ``s`` head and a ``(mu, log-variance)`` head.

    With ``separate_encoders`` the two heads get their own trunks so the
    specified branch can be pre-trained and frozen independently.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        side = arch.spatial_sizes()[-1]
        feat = arch.channels[-1] * side * side
        self.trunk = _Trunk(arch)
        if arch.separate_encoders:
            self.trunk_z = _Trunk(arch)
        self.fc_s = Linear(feat, arch.dim_s)
        self.fc_z = Linear(feat, 2 * arch.dim_z)

    def encode_specified(self, x: Tensor) -> Tensor:
        return self.fc_s(self.trunk(x))

    def forward(self, x: Tensor) -> LatentCodes:
        a = self.arch
        if x.ndim != 4 or x.shape[1:] != (a.image_channels, a.image_side, a.image_side):
            raise ad.ShapeError(f"encoder expects (N, {a.image_channels}, {a.image_side}, {a.image_side}), got {x.shape}")
        h = self.trunk(x)
        s = self.fc_s(h)
        hz = self.trunk_z(x) if a.separate_encoders else h
        stats = self.fc_z(hz)
        mu = stats[:, : a.dim_z]
        sigma = ad.exp(ad.scale(stats[:, a.dim_z :], 0.5))
        if not sigma.data.all():
            raise ad.NonFiniteError("posterior scale underflowed to zero")
        return LatentCodes(s, mu, sigma)


class Decoder(Module):
    """FC(z) + FC(s) merged by addition, then a transposed-conv mirror of the trunk."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        sizes = arch.spatial_sizes()
        layers = arch.conv_layers()
        self.base_shape = (arch.channels[-1], sizes[-1], sizes[-1])
        width = int(np.prod(self.base_shape))
        self.fc_z = Linear(arch.dim_z, width)
        self.fc_s = Linear(arch.dim_s, width)
        self.bn0 = BatchNorm2d(arch.channels[-1])
        self.n_layers = len(layers)
        for j, i in enumerate(reversed(range(len(layers))), start=1):
            ci, co, k, s, p = layers[i]
            op = sizes[i] - ((sizes[i + 1] - 1) * s - 2 * p + k)
            if not 0 <= op < s:
                raise ValueError(f"cannot mirror encoder layer {i}: output_padding {op}")
            setattr(self, f"deconv{j}", ConvTranspose2d(co, ci, k, stride=s, padding=p, output_padding=op))
            if j < len(layers):
                setattr(self, f"bn{j}", BatchNorm2d(ci))

    def logits(self, z: Tensor, s: Tensor) -> Tensor:
        a = self.arch
        if z.ndim != 2 or z.shape[1] != a.dim_z or s.ndim != 2 or s.shape[1] != a.dim_s or z.shape[0] != s.shape[0]:
            raise ad.ShapeError(f"decoder expects z (N, {a.dim_z}) and s (N, {a.dim_s}), got {z.shape} and {s.shape}")
        h = ad.add(self.fc_z(z), self.fc_s(s))
        h = ad.relu(self.bn0(ad.reshape(h, (z.shape[0],) + self.base_shape)))
        for j in range(1, self.n_layers + 1):
            h = getattr(self, f"deconv{j}")(h)
            if j < self.n_layers:
                h = ad.relu(getattr(self, f"bn{j}")(h))
        return h

    def forward(self, z: Tensor, s: Tensor) -> Tensor:
        return ad.sigmoid(self.logits(z, s))


class Discriminator(Module):
    """Label-conditioned DCGAN discriminator.

    Each of the three conv layers gets the label's row from its own lookup
    table added (broadcast over space) after batch normalization.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        cins = (arch.image_channels,) + arch.disc_channels[:-1]
        side = arch.image_side
        for i, (ci, co) in enumerate(zip(cins, arch.disc_channels), start=1):
            setattr(self, f"conv{i}", Conv2d(ci, co, 5, stride=2, padding=2))
            setattr(self, f"bn{i}", BatchNorm2d(co))
            setattr(self, f"embed{i}", LookupTable(arch.num_labels, co))
            side = (side + 4 - 5) // 2 + 1
        self.fc = Linear(arch.disc_channels[-1] * side * side, 1)

    def forward(self, x: Tensor, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.shape[0] != x.shape[0]:
            raise ad.ShapeError(f"{x.shape[0]} images but {ids.shape[0]} labels")
        h = x
        for i in range(1, 4):
            h = getattr(self, f"bn{i}")(getattr(self, f"conv{i}")(h))
            emb = getattr(self, f"embed{i}")(ids)
            h = ad.leaky_relu(ad.add(h, ad.reshape(emb, emb.shape + (1, 1))), 0.2)
        logit = ad.reshape(self.fc(_flatten(h)), (x.shape[0],))
        return ad.sigmoid(logit)


class LabelClassifier(Module):
    """Two-layer head on ``s`` used to pre-train the specified encoder."""

    def __init__(self, dim_in: int, hidden: int, num_labels: int):
        super().__init__()
        self.fc1 = Linear(dim_in, hidden)
        self.fc2 = Linear(hidden, num_labels)

    def forward(self, s: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(s)))


class VAEGAN(Module):
    def __init__(self, arch: ArchConfig, seed: int = 0):
        super().__init__()
        self.arch = arch
        self.enc = Encoder(arch)
        self.dec = Decoder(arch)
        self.disc = Discriminator(arch)
        if arch.classifier_hidden:
            self.cls = LabelClassifier(arch.dim_s, arch.classifier_hidden, arch.num_labels)
        init_parameters(self, seed)

    def encode(self, x: Tensor) -> LatentCodes:
        return self.enc(x)

    def decode(self, z: Tensor, s: Tensor) -> Tensor:
        return self.dec(z, s)

    def discriminate(self, x: Tensor, ids) -> Tensor:
        return self.disc(x, ids)

    def generator_modules(self) -> list[Module]:
        return [self.enc, self.dec]


# ---------------------------------------------------------------- sampling and losses

def reparameterize(mu: Tensor, sigma: Tensor, noise) -> Tensor:
    """``z = mu + sigma * noise``."""
    noise = ad.as_tensor(noise)
    if mu.shape != sigma.shape or mu.shape != noise.shape:
        raise ad.ShapeError(f"reparameterize: mu {mu.shape}, sigma {sigma.shape}, noise {noise.shape}")
    return ad.add(mu, ad.mul(sigma, noise))


def kl_divergence(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)).

    Summed over latent dimensions; for a batch ``(N, d)`` the per-sample
    values are averaged over ``N``.
    """
    if (sigma.data <= 0).any():
        raise ValueError("kl_divergence requires strictly positive sigma")
    if mu.shape != sigma.shape:
        raise ad.ShapeError(f"kl_divergence: mu {mu.shape} vs sigma {sigma.shape}")
    sig2 = ad.mul(sigma, sigma)
    terms = ad.sub(ad.add(ad.mul(mu, mu), sig2), ad.add(ad.log(sig2), 1.0))
    total = ad.scale(ad.tsum(terms), 0.5)
    if mu.ndim == 2:
        total = ad.scale(total, 1.0 / mu.shape[0])
    return total


def reconstruction_loss(x, x_tilde: Tensor, likelihood: str = "bernoulli") -> Tensor:
    """Negative log-likelihood of ``x`` under the decoder output, summed over
    pixels and averaged over the batch.

    ``bernoulli`` is binary cross-entropy; when ``x_tilde`` came out of a
    sigmoid the logits are used directly so saturated pixels stay finite.
    ``gaussian`` is half the squared error (unit variance, constant dropped).
    """
    x = ad.as_tensor(x)
    if x.shape != x_tilde.shape:
        raise ad.ShapeError(f"reconstruction_loss: target {x.shape} vs output {x_tilde.shape}")
    n = x.shape[0]
    if likelihood == "gaussian":
        d = ad.sub(x_tilde, x)
        return ad.scale(ad.tsum(ad.mul(d, d)), 0.5 / n)
    if likelihood != "bernoulli":
        raise ValueError(f"unknown likelihood {likelihood!r}")
    if x_tilde._logits is not None:
        return ad.scale(ad.tsum(ad.bce_with_logits(x_tilde._logits, x)), 1.0 / n)
    p = x_tilde.data
    if (p <= 0).any() or (p >= 1).any():
        raise ValueError("reconstruction_loss needs decoder outputs strictly inside (0, 1)")
    one_minus = ad.sub(1.0, x_tilde)
    ll = ad.add(ad.mul(x, ad.log(x_tilde)), ad.mul(ad.sub(1.0, x), ad.log(one_minus)))
    return ad.scale(ad.tsum(ll), -1.0 / n)


def _count_clamped(p: Tensor) -> int:
    return int(((p.data < PROB_EPS) | (p.data > 1.0 - PROB_EPS)).sum())


def log_prob(p: Tensor) -> tuple[Tensor, int]:
    """``log p`` for discriminator probabilities, plus the number of clamp events."""
    n = _count_clamped(p)
    if p._logits is not None:
        return ad.scale(ad.softplus(ad.scale(p._logits, -1.0)), -1.0), n
    return ad.log(ad.clamp(p, PROB_EPS, 1.0 - PROB_EPS)), n


def log1m_prob(p: Tensor) -> tuple[Tensor, int]:
    """``log(1 - p)``, plus the number of clamp events."""
    n = _count_clamped(p)
    if p._logits is not None:
        return ad.scale(ad.softplus(p._logits), -1.0), n
    return ad.log(ad.sub(1.0, ad.clamp(p, PROB_EPS, 1.0 - PROB_EPS))), n


class GanLosses(NamedTuple):
    adversary: Tensor | None
    generator: Tensor | None
    clamped: int


def generator_loss(fake_prob: Tensor) -> tuple[Tensor, int]:
    """Non-saturating generator loss ``-mean log D(fake)``."""
    lp, n = log_prob(fake_prob)
    return ad.scale(ad.mean(lp), -1.0), n


def adversary_loss(real_prob: Tensor, fake_prob: Tensor) -> tuple[Tensor, int]:
    """``-mean[log D(real)] - mean[log(1 - D(fake))]``."""
    lr, n1 = log_prob(real_prob)
    lf, n2 = log1m_prob(fake_prob)
    return ad.scale(ad.add(ad.mean(lr), ad.mean(lf)), -1.0), n1 + n2


def gan_losses(real_prob: Tensor, fake_prob: Tensor) -> GanLosses:
    adv, n1 = adversary_loss(real_prob, fake_prob)
    gen, n2 = generator_loss(fake_prob)
    return GanLosses(adv, gen, n1 + n2)

