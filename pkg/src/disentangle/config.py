"""Run configuration: ``key=value`` lines with ``#`` comments.

Keys fall into four groups: dataset selection (``dataset``, ``mnist.*``,
``synthetic.*``, ``split*``, ``data_seed``), training (every
:class:`~disentangle.trainer.TrainConfig` field), architecture (``arch.*``)
and bookkeeping (``out``). Command-line overrides win over file values.
"""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from pathlib import Path

from .datasets import SyntheticFactorSpec
from .model import ArchConfig
from .trainer import TrainConfig, _fmt, _parse


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and its source line."""


_RUN_DEFAULTS = OrderedDict([
    ("dataset", "synthetic"),
    ("mnist.images", ""),
    ("mnist.labels", ""),
    ("mnist.limit", 0),
    ("synthetic.cache", ""),
    ("data_seed", 0),
    ("split", "sample"),
    ("split.held_out", ""),
    ("split.seed", 0),
    ("out", "runs"),
])
_PATH_KEYS = ("mnist.images", "mnist.labels", "synthetic.cache", "out")


@dataclasses.dataclass
class RunConfig:
    run: "OrderedDict[str, object]"
    synthetic: SyntheticFactorSpec
    train: TrainConfig

    @property
    def dataset(self) -> str:
        return self.run["dataset"]

    @property
    def seed(self) -> int:
        return self.train.seed

    def __getitem__(self, key):
        return self.run[key]

    def to_kv(self) -> "OrderedDict[str, str]":
        out = OrderedDict((k, _fmt(v)) for k, v in self.run.items())
        for k, v in self.synthetic.to_kv().items():
            out[f"synthetic.{k}"] = _fmt(v)
        out.update(self.train.to_kv())
        return out

    def echo(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_kv().items())


def _lines(text: str, source: str):
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{n}: expected key=value, got {stripped!r}")
        yield key.strip(), value.strip(), f"{source}:{n}"


def parse_config(path=None, overrides=(), text: str | None = None) -> RunConfig:
    """Merge defaults, the file at ``path`` (or ``text``) and ``overrides``.

    Relative paths in the file resolve against the file's directory;
    relative paths in overrides resolve against the working directory.
    """
    entries: "OrderedDict[str, tuple[str, str, Path]]" = OrderedDict()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        base = path.parent
        source = str(path)
    else:
        base = Path.cwd()
        source = "<config>"
    for key, value, where in _lines(text or "", source):
        entries[key] = (value, where, base)
    for i, ov in enumerate(overrides, start=1):
        for key, value, _ in _lines(ov, "override"):
            entries[key] = (value, f"override {i} ({ov!r})", Path.cwd())

    spec_defaults = {f.name: f.default for f in dataclasses.fields(SyntheticFactorSpec)}
    train_defaults = TrainConfig().to_kv()
    run = OrderedDict(_RUN_DEFAULTS)
    spec_kw, train_kv = {}, OrderedDict()
    for key, (value, where, kbase) in entries.items():
        try:
            if key in run:
                v = _parse(value, _RUN_DEFAULTS[key], key)
                if key in _PATH_KEYS and v:
                    v = str((kbase / v).resolve())
                run[key] = v
            elif key.startswith("synthetic.") and key[10:] in spec_defaults:
                spec_kw[key[10:]] = _parse(value, spec_defaults[key[10:]], key)
            elif key in train_defaults:
                _parse(value, _train_default(key), key)
                train_kv[key] = value
            else:
                raise ConfigError(f"{where}: unknown key {key!r}")
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"{where}: {key}: {exc}") from None

    for key in _PATH_KEYS:
        if run[key] and not Path(run[key]).is_absolute():
            run[key] = str(Path(run[key]).resolve())

    if run["dataset"] not in ("synthetic", "mnist"):
        raise ConfigError(f"{_where(entries, 'dataset')}: dataset must be 'synthetic' or 'mnist'")
    if run["split"] not in ("sample", "identity"):
        raise ConfigError(f"{_where(entries, 'split')}: split must be 'sample' or 'identity'")
    if run["dataset"] == "mnist":
        for key in ("mnist.images", "mnist.labels"):
            if not run[key]:
                raise ConfigError(f"missing required key {key!r} for dataset=mnist")
    if run["split"] == "identity" and not run["split.held_out"]:
        raise ConfigError("missing required key 'split.held_out' for split=identity")

    try:
        spec = SyntheticFactorSpec(**spec_kw)
    except ValueError as exc:
        raise ConfigError(f"synthetic spec: {exc}") from None
    try:
        train = TrainConfig.from_kv(train_kv)
    except (ValueError, KeyError) as exc:
        key = next((k for k in train_kv if k.split(".")[-1] in str(exc)), None)
        where = _where(entries, key) if key else source
        raise ConfigError(f"{where}: {exc}") from None
    return RunConfig(run, spec, train)


def _train_default(key: str):
    if key.startswith("arch."):
        return getattr(ArchConfig(), key[5:])
    return getattr(TrainConfig(), key)


def _where(entries, key) -> str:
    return entries[key][1] if key in entries else "<default>"


def held_out_ids(cfg: RunConfig) -> list[int]:
    return [int(x) for x in str(cfg["split.held_out"]).split(",") if x.strip()]
