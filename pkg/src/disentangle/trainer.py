"""Alternating generator / adversary training, checkpoints and step diagnostics.

Each iteration runs one generator step on a triplet (x1, x1', x2) followed by
one adversary step on a fresh pair. The generator step minimises

    0.5 * (rec(x1 | z1, s1) + rec(x1 | z1, s1')) + kl_weight * KL(q(z|x1) || N(0, I))
    + lambda_gan * (gen(Dec(z1, s2), id2) + gen(Dec(z, s2), id2)),   z ~ N(0, I)

with the discriminator held fixed; the adversary step trains the
discriminator to tell ``x2`` from ``Dec(z1, s2)`` with encoder and decoder
held fixed.
"""
from __future__ import annotations

import dataclasses
import io
import logging
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import LabeledImageSet, TripletBatch, TripletSampler
from .model import (
    ArchConfig,
    VAEGAN,
    adversary_loss,
    generator_loss,
    kl_divergence,
    reconstruction_loss,
    reparameterize,
)
from .nn import frozen, sgd_step
from .serialization import (
    TruncatedError,
    dump_kv,
    parse_kv,
    read_exact,
    read_tensor,
    read_text_block,
    write_tensor,
    write_text_block,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DVC1"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- configuration

@dataclasses.dataclass
class TrainConfig:
    lambda_gan: float = 1.0
    kl_weight: float = 1.0
    lr_gen: float = 0.01
    lr_adv: float = 0.01
    momentum: float = 0.0
    iterations: int = 1000
    batch_size: int = 64
    seed: int = 0
    arch: ArchConfig = dataclasses.field(default_factory=ArchConfig)
    likelihood: str = "bernoulli"
    enable_prior_sample_gan_term: bool = True
    distinct_labels: bool = True
    freeze_specified_encoder: bool = False
    pretrain_iterations: int = 0
    pretrain_lr: float = 0.05
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lambda_gan >= 0:
            raise ValueError(f"lambda_gan must be non-negative, got {self.lambda_gan}")
        if not self.kl_weight >= 0:
            raise ValueError(f"kl_weight must be non-negative, got {self.kl_weight}")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.pretrain_iterations < 0:
            raise ValueError("pretrain_iterations must be non-negative")
        if self.pretrain_iterations and not self.arch.classifier_hidden:
            raise ValueError("pretrain_iterations > 0 needs arch classifier_hidden > 0")

    def to_kv(self) -> "OrderedDict[str, str]":
        out = OrderedDict()
        for f in dataclasses.fields(self):
            if f.name != "arch":
                out[f.name] = _fmt(getattr(self, f.name))
        for f in dataclasses.fields(self.arch):
            out[f"arch.{f.name}"] = _fmt(getattr(self.arch, f.name))
        return out

    @classmethod
    def from_kv(cls, kv: dict) -> "TrainConfig":
        arch_kw, kw = {}, {}
        arch_types = {f.name: f.default for f in dataclasses.fields(ArchConfig)}
        own_types = {f.name: f.default for f in dataclasses.fields(cls) if f.name != "arch"}
        for key, raw in kv.items():
            if key.startswith("arch."):
                name = key[5:]
                if name not in arch_types:
                    raise KeyError(f"unknown key {key!r}")
                arch_kw[name] = _parse(raw, arch_types[name], key)
            elif key in own_types:
                kw[key] = _parse(raw, own_types[key], key)
            else:
                raise KeyError(f"unknown key {key!r}")
        return cls(arch=ArchConfig(**arch_kw), **kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw.strip()
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


# ---------------------------------------------------------------- diagnostics

@dataclasses.dataclass
class StepDiagnostics:
    rec11: float = 0.0
    rec11p: float = 0.0
    kl: float = 0.0
    gen_swap: float = 0.0
    gen_prior: float = 0.0
    total: float = 0.0
    adversary: float = 0.0
    real_prob: float = float("nan")
    fake_prob: float = float("nan")
    clamped: int = 0

    def merge(self, other: "StepDiagnostics") -> "StepDiagnostics":
        """Generator fields from ``self``, adversary fields from ``other``."""
        return dataclasses.replace(self, adversary=other.adversary, real_prob=other.real_prob,
                                   fake_prob=other.fake_prob, clamped=self.clamped + other.clamped)

    def is_finite(self) -> bool:
        vals = [self.rec11, self.rec11p, self.kl, self.gen_swap, self.gen_prior, self.total, self.adversary]
        return all(np.isfinite(v) for v in vals)

    def as_line(self, iteration: int) -> str:
        fields = dataclasses.asdict(self)
        return f"iter={iteration} " + " ".join(
            f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in fields.items())


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; ``last_good`` holds the last finite checkpoint."""

    def __init__(self, message: str, last_good: "ModelCheckpoint | None", path: Path | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.path = path


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _rng_to_bytes(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError("only PCG64 generators can be checkpointed")
    if st["has_uint32"]:
        raise ValueError("generator holds a buffered 32-bit draw; call _flush_rng first")
    s, inc = st["state"]["state"], st["state"]["inc"]
    return s.to_bytes(16, "little") + inc.to_bytes(16, "little")


def _rng_from_bytes(raw: bytes) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64",
                "state": {"state": int.from_bytes(raw[:16], "little"), "inc": int.from_bytes(raw[16:], "little")},
                "has_uint32": 0, "uinteger": 0}
    return np.random.Generator(bg)


def _flush_rng(rng: np.random.Generator):
    # drop any buffered half-word so the 32-byte state is complete
    st = rng.bit_generator.state
    if st["has_uint32"]:
        st["has_uint32"] = 0
        st["uinteger"] = 0
        rng.bit_generator.state = st


@dataclasses.dataclass
class ModelCheckpoint:
    """Named arrays (parameters, BN running moments, optimizer velocity),
    training config, iteration counter and sampler RNG state."""

    tensors: "OrderedDict[str, np.ndarray]"
    config: TrainConfig
    iteration: int
    rng_state: bytes

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        buf.write(struct.pack("<Q", len(self.tensors)))
        for name, arr in self.tensors.items():
            write_tensor(buf, name, arr)
        kv = self.config.to_kv()
        kv["iteration"] = str(self.iteration)
        write_text_block(buf, dump_kv(kv))
        if len(self.rng_state) != 32:
            raise ValueError("RNG state must be 32 bytes")
        buf.write(self.rng_state)
        return buf.getvalue()

    def save(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def from_bytes(cls, raw: bytes, origin: str = "<bytes>") -> "ModelCheckpoint":
        f = io.BytesIO(raw)
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"{origin}: not a DVC1 checkpoint")
        try:
            (version,) = struct.unpack("<I", read_exact(f, 4))
            if version != CHECKPOINT_VERSION:
                raise CheckpointVersionError(f"{origin}: unsupported checkpoint version {version}")
            (count,) = struct.unpack("<Q", read_exact(f, 8))
            tensors = OrderedDict(read_tensor(f) for _ in range(count))
            kv = parse_kv(read_text_block(f))
            rng_state = read_exact(f, 32)
        except TruncatedError as exc:
            raise CheckpointTruncatedError(f"{origin}: truncated checkpoint ({exc})") from None
        iteration = int(kv.pop("iteration", "0"))
        return cls(tensors, TrainConfig.from_kv(kv), iteration, rng_state)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes(), str(path))

    def build_model(self) -> VAEGAN:
        """Instantiate the networks from the stored config and fill in the weights."""
        model = VAEGAN(self.config.arch, seed=self.config.seed)
        load_model_state(model, self.tensors)
        return model


def load_model_state(model: VAEGAN, tensors: dict):
    own = model.state_dict()
    missing = [k for k in own if k not in tensors]
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks {len(missing)} entries, e.g. {missing[0]!r}")
    for name, arr in own.items():
        if tensors[name].shape != arr.shape:
            raise CheckpointShapeError(f"{name}: stored shape {tensors[name].shape}, config expects {arr.shape}")
    model.load_state_dict(tensors)


# ---------------------------------------------------------------- trainer

def _to_batch(t: TripletBatch | tuple) -> TripletBatch:
    if isinstance(t, TripletBatch):
        return t
    x1, x1p, x2, id1, id2 = t
    x1, x1p, x2 = (np.asarray(a)[None] if np.ndim(a) == 3 else np.asarray(a) for a in (x1, x1p, x2))
    id1 = np.atleast_1d(id1)
    return TripletBatch(x1, x1p, x2, id1, id1.copy(), np.atleast_1d(id2))


class Trainer:
    """Owns the model, the optimizer state and the sampler RNG."""

    def __init__(self, config: TrainConfig, model: VAEGAN | None = None, rng: np.random.Generator | None = None):
        self.config = config
        self.model = model if model is not None else VAEGAN(config.arch, seed=config.seed)
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.iteration = 0
        self.pretrained = False
        self.velocity: dict[str, np.ndarray] = {}
        if config.momentum:
            for name, p in self._all_named():
                self.velocity[name] = np.zeros_like(p.data)

    # -- parameter groups

    def _all_named(self):
        return list(self.model.named_parameters())

    def _group(self, prefixes) -> list:
        return [(n, p) for n, p in self.model.named_parameters() if n.startswith(prefixes)]

    def generator_params(self) -> list:
        params = self._group(("enc.", "dec."))
        if self.config.freeze_specified_encoder:
            params = [(n, p) for n, p in params if not n.startswith(("enc.trunk.", "enc.fc_s."))]
        return params

    def adversary_params(self) -> list:
        return self._group(("disc.",))

    def _specified_modules(self):
        return [self.model.enc.trunk, self.model.enc.fc_s]

    def _update(self, params, lr):
        sgd_step(params, lr, self.config.momentum, self.velocity)

    # -- steps

    def generator_objective(self, triplet, noise, prior_noise=None) -> tuple[Tensor, StepDiagnostics]:
        """Build the generator-side loss graph for one triplet batch.

        Returns the scalar total and its components. The caller decides which
        modules are held fixed; :meth:`generator_step` holds the discriminator.
        """
        cfg, m = self.config, self.model
        b = _to_batch(triplet)
        if not np.array_equal(b.id1, b.id1p):
            raise ValueError("triplet precondition violated: x1 and x1' must share a label")
        use_gan = cfg.lambda_gan > 0
        use_prior = use_gan and cfg.enable_prior_sample_gan_term
        c1 = m.encode(Tensor(b.x1))
        s1p = m.enc.encode_specified(Tensor(b.x1p))
        z1 = reparameterize(c1.mu, c1.sigma, noise)
        rec11 = reconstruction_loss(b.x1, m.decode(z1, c1.s), cfg.likelihood)
        rec11p = reconstruction_loss(b.x1, m.decode(z1, s1p), cfg.likelihood)
        kl = kl_divergence(c1.mu, c1.sigma)
        total = ad.add(ad.scale(ad.add(rec11, rec11p), 0.5), ad.scale(kl, cfg.kl_weight))
        diag = StepDiagnostics(rec11=rec11.item(), rec11p=rec11p.item(), kl=kl.item())
        if use_gan:
            s2 = m.enc.encode_specified(Tensor(b.x2))
            g_swap, c_a = generator_loss(m.discriminate(m.decode(z1, s2), b.id2))
            adv_terms = g_swap
            diag.gen_swap, diag.clamped = g_swap.item(), c_a
            if use_prior:
                if prior_noise is None:
                    raise ValueError("prior-sample term enabled but no prior noise supplied")
                g_prior, c_b = generator_loss(m.discriminate(m.decode(Tensor(prior_noise), s2), b.id2))
                adv_terms = ad.add(adv_terms, g_prior)
                diag.gen_prior = g_prior.item()
                diag.clamped += c_b
            total = ad.add(total, ad.scale(adv_terms, cfg.lambda_gan))
        diag.total = total.item()
        return total, diag

    def generator_step(self, triplet, noise=None, prior_noise=None) -> StepDiagnostics:
        """One update of encoder and decoder on a triplet.

        ``noise`` / ``prior_noise`` override the posterior and prior draws
        (shape ``(B, dim_z)``); by default both come from the trainer RNG.
        """
        cfg, m = self.config, self.model
        b = _to_batch(triplet)
        shape = (len(b), cfg.arch.dim_z)
        if noise is None:
            noise = self.rng.standard_normal(shape)
        if cfg.lambda_gan > 0 and cfg.enable_prior_sample_gan_term and prior_noise is None:
            prior_noise = self.rng.standard_normal(shape)
        held = [m.disc]
        if cfg.freeze_specified_encoder:
            held += self._specified_modules()
        with frozen(*held):
            total, diag = self.generator_objective(b, noise, prior_noise)
            ad.backward(total)
        self._update(self.generator_params(), cfg.lr_gen)
        return diag

    def adversary_step(self, pair, noise=None) -> StepDiagnostics:
        """One discriminator update: real ``x2`` vs the swap ``Dec(z1, s2)``.

        ``pair`` is ``(x1, x2, id2)`` batches (a TripletBatch also works).
        """
        cfg, m = self.config, self.model
        if isinstance(pair, TripletBatch):
            x1, x2, id2 = pair.x1, pair.x2, pair.id2
        else:
            x1, x2, id2 = pair
        if noise is None:
            noise = self.rng.standard_normal((len(x1), cfg.arch.dim_z))
        with frozen(m.enc, m.dec):
            with ad.no_grad():
                c1 = m.encode(Tensor(x1))
                s2 = m.enc.encode_specified(Tensor(x2))
                fake = m.decode(reparameterize(c1.mu, c1.sigma, noise), s2)
            fake = Tensor(fake.data)
            real_p = m.discriminate(Tensor(x2), id2)
            fake_p = m.discriminate(fake, id2)
            loss, clamped = adversary_loss(real_p, fake_p)
            diag = StepDiagnostics(adversary=loss.item(), real_prob=float(real_p.data.mean()),
                                   fake_prob=float(fake_p.data.mean()), clamped=clamped)
            ad.backward(loss)
        self._update(self.adversary_params(), cfg.lr_adv)
        return diag

    def pretrain_specified(self, data: LabeledImageSet, iterations: int | None = None) -> list[float]:
        """Supervised warm-up of the specified branch through a label classifier."""
        cfg, m = self.config, self.model
        if getattr(m, "cls", None) is None:
            raise ValueError("model has no label classifier; set arch classifier_hidden > 0")
        iterations = cfg.pretrain_iterations if iterations is None else iterations
        params = self._group(("enc.trunk.", "enc.fc_s.", "cls."))
        losses = []
        for _ in range(iterations):
            idx = self.rng.integers(0, len(data), size=cfg.batch_size)
            s = m.enc.encode_specified(Tensor(data.images[idx]))
            loss = ad.cross_entropy(m.cls(s), data.labels[idx])
            losses.append(loss.item())
            ad.backward(loss)
            sgd_step(params, cfg.pretrain_lr, cfg.momentum, self.velocity)
        _flush_rng(self.rng)
        self.pretrained = True
        return losses

    def iterate(self, sampler: TripletSampler) -> StepDiagnostics:
        bs = self.config.batch_size
        gen = self.generator_step(sampler.sample(bs))
        i1, _, i2 = sampler.sample_indices(bs)
        d = sampler.data
        adv = self.adversary_step((d.images[i1], d.images[i2], d.labels[i2]))
        _flush_rng(self.rng)
        self.iteration += 1
        return gen.merge(adv)

    def train(self, data: LabeledImageSet, iterations: int | None = None, run_dir: str | Path | None = None,
              callback=None) -> tuple[ModelCheckpoint, list[StepDiagnostics]]:
        """Run the alternating loop and return the final checkpoint plus the
        per-iteration diagnostics.

        With ``run_dir`` set, a diagnostics line is appended to ``train.log``
        every ``log_every`` iterations and ``checkpoint.dvc`` is refreshed
        every ``checkpoint_every`` iterations. A non-finite loss raises
        :class:`TrainingDiverged` and leaves the last good checkpoint in place.
        """
        cfg = self.config
        if len(np.unique(data.labels)) < 2:
            raise ValueError("training needs at least two labels")
        sampler = TripletSampler(data, self.rng, cfg.distinct_labels)
        if cfg.pretrain_iterations and self.iteration == 0 and not self.pretrained:
            self.pretrain_specified(data)
        iterations = cfg.iterations if iterations is None else iterations
        run_dir = Path(run_dir) if run_dir is not None else None
        ckpt_path = run_dir / "checkpoint.dvc" if run_dir else None
        log_file = open(run_dir / "train.log", "a") if run_dir else None
        history: list[StepDiagnostics] = []
        last_good = self.checkpoint()
        try:
            for _ in range(iterations):
                try:
                    diag = self.iterate(sampler)
                except (ad.NonFiniteError, FloatingPointError) as exc:
                    diag = None
                    err = str(exc)
                if diag is None or not diag.is_finite():
                    msg = f"non-finite loss at iteration {self.iteration + 1}" + (f": {err}" if diag is None else "")
                    if ckpt_path is not None:
                        last_good.save(ckpt_path)
                    raise TrainingDiverged(msg, last_good, ckpt_path)
                history.append(diag)
                it = self.iteration
                if cfg.log_every and it % cfg.log_every == 0:
                    line = diag.as_line(it)
                    log.info(line)
                    if log_file:
                        log_file.write(line + "\n")
                        log_file.flush()
                if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                    last_good = self.checkpoint()
                    if ckpt_path is not None:
                        last_good.save(ckpt_path)
                if callback is not None:
                    callback(self, diag)
        finally:
            if log_file:
                log_file.close()
        final = self.checkpoint()
        if ckpt_path is not None:
            final.save(ckpt_path)
        return final, history

    # -- persistence

    def checkpoint(self) -> ModelCheckpoint:
        _flush_rng(self.rng)
        tensors = OrderedDict((k, v.copy()) for k, v in self.model.state_dict().items())
        for name, v in self.velocity.items():
            tensors[f"optim.velocity.{name}"] = v.copy()
        return ModelCheckpoint(tensors, self.config, self.iteration, _rng_to_bytes(self.rng))

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "Trainer":
        trainer = cls(ckpt.config, ckpt.build_model(), _rng_from_bytes(ckpt.rng_state))
        trainer.iteration = ckpt.iteration
        for name in trainer.velocity:
            key = f"optim.velocity.{name}"
            if key in ckpt.tensors:
                trainer.velocity[name][...] = ckpt.tensors[key]
        return trainer


def save_checkpoint(trainer: Trainer, path):
    trainer.checkpoint().save(path)


def load_checkpoint(path) -> ModelCheckpoint:
    return ModelCheckpoint.load(path)
