"""Finite-difference checks over every primitive and every model loss.

Used by the ``gradcheck`` command and the test suite. Everything runs on
tiny shapes so the full sweep takes seconds.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, check_gradients
from .model import ArchConfig, VAEGAN, adversary_loss, kl_divergence, reconstruction_loss
from .nn import BatchNorm2d, frozen

TINY_ARCH = dict(variant="shallow", image_channels=1, image_side=8, dim_s=4, dim_z=4, num_labels=3,
                 channels=(2, 3, 4), disc_channels=(2, 3, 4))


def _leaf(rng, shape, low=None, name=None, away_from_zero=False):
    v = rng.normal(size=shape)
    if away_from_zero:
        # keep piecewise-linear inputs clear of their breakpoint
        v = np.sign(v) * (0.1 + np.abs(v))
    if low is not None:
        v = low + np.abs(v)
    return Tensor(v, requires_grad=True, name=name)


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict]]:
    """name -> (builder, params) for each differentiable primitive."""
    rng = np.random.default_rng(seed)
    cases = {}

    def add_case(name, fn, **params):
        w = Tensor(rng.normal(size=fn(**params).shape))  # fixed random projection
        cases[name] = (lambda: ad.tsum(ad.mul(fn(**params), w)), params)

    a, b = _leaf(rng, (3, 4), name="a"), _leaf(rng, (3, 4), name="b")
    pos = _leaf(rng, (3, 4), low=0.5, name="pos")
    row = _leaf(rng, (4,), name="row")
    add_case("add", lambda a, row: ad.add(a, row), a=a, row=row)
    add_case("sub", lambda a, b: ad.sub(a, b), a=a, b=b)
    add_case("mul", lambda a, b: ad.mul(a, b), a=a, b=b)
    add_case("div", lambda a, pos: ad.div(a, pos), a=a, pos=pos)
    add_case("scale", lambda a: ad.scale(a, -1.7), a=a)
    add_case("exp", lambda a: ad.exp(a), a=a)
    add_case("log", lambda pos: ad.log(pos), pos=pos)
    kinked = _leaf(rng, (3, 4), name="x", away_from_zero=True)
    add_case("relu", lambda x: ad.relu(x), x=kinked)
    add_case("leaky_relu", lambda x: ad.leaky_relu(x, 0.2), x=kinked)
    add_case("sigmoid", lambda a: ad.sigmoid(a), a=a)
    add_case("tanh", lambda a: ad.tanh(a), a=a)
    add_case("softplus", lambda a: ad.softplus(a), a=a)
    add_case("reshape", lambda a: ad.reshape(a, (2, 6)), a=a)
    add_case("getitem", lambda a: a[1:, ::2], a=a)
    add_case("concat", lambda a, b: ad.concat([a, b], axis=1), a=a, b=b)
    add_case("sum", lambda a: ad.tsum(a, axis=0), a=a)
    add_case("mean", lambda a: ad.mean(a, axis=1), a=a)
    m1, m2 = _leaf(rng, (2, 3), name="m1"), _leaf(rng, (3, 4), name="m2")
    add_case("matmul", lambda m1, m2: ad.matmul(m1, m2), m1=m1, m2=m2)
    xl, wl, bl = _leaf(rng, (5, 3), name="x"), _leaf(rng, (2, 3), name="weight"), _leaf(rng, (2,), name="bias")
    add_case("linear", lambda x, weight, bias: ad.linear(x, weight, bias), x=xl, weight=wl, bias=bl)
    table = _leaf(rng, (4, 3), name="table")
    add_case("embedding", lambda table: ad.embedding(table, np.array([2, 0, 2])), table=table)
    xc = _leaf(rng, (2, 2, 7, 7), name="x")
    wc, bc = _leaf(rng, (3, 2, 5, 5), name="weight"), _leaf(rng, (3,), name="bias")
    add_case("conv2d", lambda x, weight, bias: ad.conv2d(x, weight, bias, 2, 2), x=xc, weight=wc, bias=bc)
    xt = _leaf(rng, (2, 3, 4, 4), name="x")
    wt, bt = _leaf(rng, (3, 2, 5, 5), name="weight"), _leaf(rng, (2,), name="bias")
    add_case("conv_transpose2d", lambda x, weight, bias: ad.conv_transpose2d(x, weight, bias, 2, 2, 1),
             x=xt, weight=wt, bias=bt)
    xb = _leaf(rng, (3, 2, 3, 3), name="x")
    gb, bb = _leaf(rng, (2,), low=0.5, name="gamma"), _leaf(rng, (2,), name="beta")
    rm, rv = np.zeros(2), np.ones(2)
    add_case("batch_norm2d_train",
             lambda x, gamma, beta: ad.batch_norm2d(x, gamma, beta, rm, rv, training=True, update_running=False),
             x=xb, gamma=gb, beta=bb)
    rm2, rv2 = rng.normal(size=2), 0.5 + rng.random(2)
    add_case("batch_norm2d_eval",
             lambda x, gamma, beta: ad.batch_norm2d(x, gamma, beta, rm2, rv2, training=False),
             x=xb, gamma=gb, beta=bb)
    target = rng.random((3, 4))
    add_case("bce_with_logits", lambda a: ad.bce_with_logits(a, target), a=a)
    add_case("log_softmax", lambda a: ad.log_softmax(a), a=a)
    labels = np.array([0, 3, 1])
    cases["cross_entropy"] = (lambda: ad.cross_entropy(a, labels), {"a": a})
    return cases


def _tiny_batch(arch: ArchConfig, n: int, rng):
    x = rng.random((n, arch.image_channels, arch.image_side, arch.image_side))
    ids = rng.integers(0, arch.num_labels, size=n)
    return x, ids


def model_cases(seed: int = 0, lambda_gan: float = 1.0, kl_weight: float = 1.0, batch: int = 8,
                weight_std: float = 0.3):
    """Loss builders for the tiny model: full generator objective (w.r.t.
    encoder + decoder), adversary loss (w.r.t. discriminator), KL and
    reconstruction on their own.

    ``weight_std`` redraws conv, linear and lookup weights at that scale.
    """
    from .datasets import TripletBatch
    from .trainer import TrainConfig, Trainer

    arch = ArchConfig(**TINY_ARCH)
    cfg = TrainConfig(arch=arch, lambda_gan=lambda_gan, kl_weight=kl_weight, batch_size=3, iterations=1)
    trainer = Trainer(cfg)
    model = trainer.model
    # freeze running moments so repeated forward passes see identical state
    for m in model.modules():
        if isinstance(m, BatchNorm2d):
            object.__setattr__(m, "frozen", True)
    rng = np.random.default_rng(seed)
    if weight_std != 0.02:
        for m in model.modules():
            w = getattr(m, "weight", None) if not isinstance(m, BatchNorm2d) else None
            w = getattr(m, "table", w)
            if w is not None:
                w.data[...] = rng.normal(0.0, weight_std, size=w.shape)
    n = batch
    x1, id1 = _tiny_batch(arch, n, rng)
    x1p, _ = _tiny_batch(arch, n, rng)
    x2, id2 = _tiny_batch(arch, n, rng)
    batch = TripletBatch(x1, x1p, x2, id1, id1.copy(), id2)
    noise = rng.normal(size=(n, arch.dim_z))
    prior = rng.normal(size=(n, arch.dim_z))
    gen_params = {n_: p for n_, p in model.named_parameters() if n_.startswith(("enc.", "dec."))}
    disc_params = {n_: p for n_, p in model.named_parameters() if n_.startswith("disc.")}
    enc_params = {n_: p for n_, p in gen_params.items() if n_.startswith("enc.")}

    def composite():
        with frozen(model.disc):
            return trainer.generator_objective(batch, noise, prior)[0]

    fake = rng.random(x2.shape)

    def adversary():
        return adversary_loss(model.discriminate(Tensor(x2), id2), model.discriminate(Tensor(fake), id2))[0]

    def kl_only():
        c = model.encode(Tensor(x1))
        return kl_divergence(c.mu, c.sigma)

    def rec_only():
        c = model.encode(Tensor(x1))
        return reconstruction_loss(x1, model.decode(c.mu, c.s))

    return {
        "combined_objective": (composite, gen_params),
        "adversary_loss": (adversary, disc_params),
        "encoder_kl": (kl_only, enc_params),
        "reconstruction": (rec_only, gen_params),
    }


def run_all(seed: int = 0, tolerance: float = 1e-5) -> dict[str, GradCheckReport]:
    """Every primitive and every model loss, keyed by case name."""
    out = {}
    for name, (builder, params) in primitive_cases(seed).items():
        out[f"primitive.{name}"] = check_gradients(builder, params, tolerance=tolerance)
    for name, (builder, params) in model_cases(seed).items():
        out[f"model.{name}"] = check_gradients(builder, params, tolerance=tolerance)
    return out
