"""Qualitative protocols (swap and interpolation grids, retrieval, conditional
samples) and the probe-classifier disentanglement metric.

All deterministic visualizations use the posterior mean for ``z`` and run the
networks in inference mode (BN running moments).
"""
from __future__ import annotations

import contextlib
import copy
import dataclasses
import warnings
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.neural_network import MLPClassifier
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import LabeledImageSet
from .model import VAEGAN

SEPARATOR = 2
SEPARATOR_VALUE = 0.5


@contextlib.contextmanager
def inference(model: VAEGAN):
    """Eval-mode BN and no tape recording; restores the previous mode."""
    prev = {id(m): m.training for m in model.modules()}
    model.eval()
    try:
        with ad.no_grad():
            yield model
    finally:
        for m in model.modules():
            object.__setattr__(m, "training", prev[id(m)])


# ---------------------------------------------------------------- grids

@dataclasses.dataclass
class GridImage:
    """``cells`` has shape (rows, cols, C, H, W); empty cells hold NaN and
    render as separator gray."""

    cells: np.ndarray

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def cell_shape(self) -> tuple:
        return self.cells.shape[2:]

    def cell(self, i: int, j: int) -> np.ndarray:
        return self.cells[i, j]

    def raster(self) -> np.ndarray:
        """Assembled (C, rows*(H+2)+2, cols*(W+2)+2) image with 2-pixel gray separators."""
        c, h, w = self.cell_shape
        p = SEPARATOR
        out = np.full((c, self.rows * (h + p) + p, self.cols * (w + p) + p), SEPARATOR_VALUE)
        for i in range(self.rows):
            for j in range(self.cols):
                cell = self.cells[i, j]
                if np.isnan(cell).any():
                    continue
                y, x = p + i * (h + p), p + j * (w + p)
                out[:, y : y + h, x : x + w] = cell
        return out


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def encode_images(model: VAEGAN, images, chunk: int = 256):
    """Posterior means and specified codes for a stack of images, in inference mode.

    ``chunk=1`` encodes images one at a time, which makes an image's codes
    independent of whatever else is in the stack.
    """
    x = _as_batch(images)
    mus, ss = [], []
    with inference(model):
        for k in range(0, len(x), chunk):
            c = model.encode(Tensor(x[k : k + chunk]))
            mus.append(c.mu.data)
            ss.append(c.s.data)
    return np.concatenate(mus), np.concatenate(ss)


def _decode_one(model: VAEGAN, z: np.ndarray, s: np.ndarray) -> np.ndarray:
    with inference(model):
        return model.decode(Tensor(z[None]), Tensor(s[None])).data[0]


def reconstruct(model: VAEGAN, images) -> np.ndarray:
    """``Dec(mu(x), s(x))`` per image (posterior mean, inference mode)."""
    mu, s = encode_images(model, images, chunk=1)
    return np.stack([_decode_one(model, mu[i], s[i]) for i in range(len(mu))])


def swap_grid(model: VAEGAN, images) -> GridImage:
    """(n+1) x (n+1) grid: row 0 / column 0 hold the originals, cell (i, j)
    decodes ``z`` of image i with ``s`` of image j; the diagonal holds the
    reconstructions."""
    x = _as_batch(images)
    n = len(x)
    if n < 2:
        raise ValueError("swap grid needs at least 2 images")
    mu, s = encode_images(model, x, chunk=1)
    cells = np.full((n + 1, n + 1) + x.shape[1:], np.nan)
    for k in range(n):
        cells[0, k + 1] = x[k]
        cells[k + 1, 0] = x[k]
    for i in range(n):
        for j in range(n):
            cells[i + 1, j + 1] = _decode_one(model, mu[i], s[j])
    return GridImage(cells)


def interpolation_grid(model: VAEGAN, xa, xb, steps: int) -> GridImage:
    """steps x steps grid; row i interpolates ``z`` and column j interpolates
    ``s`` from image a (weight 0) to image b (weight 1)."""
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    mu, s = encode_images(model, np.stack([np.asarray(xa), np.asarray(xb)]), chunk=1)
    alphas = np.linspace(0.0, 1.0, steps)
    cells = np.empty((steps, steps) + np.shape(xa))
    for i, a in enumerate(alphas):
        z = (1.0 - a) * mu[0] + a * mu[1]
        for j, b in enumerate(alphas):
            cells[i, j] = _decode_one(model, z, (1.0 - b) * s[0] + b * s[1])
    return GridImage(cells)


# ---------------------------------------------------------------- retrieval and sampling

class Neighbor(NamedTuple):
    index: int
    distance: float


def retrieve(model: VAEGAN, query, gallery, space: str = "specified", k: int = 5) -> list[Neighbor]:
    """k nearest gallery images by Euclidean distance in the chosen code space.

    ``specified`` compares ``s``; ``unspecified`` compares the posterior mean.
    Ties go to the lower gallery index.
    """
    if space not in ("specified", "unspecified"):
        raise ValueError(f"space must be 'specified' or 'unspecified', got {space!r}")
    g = _as_batch(gallery)
    if len(g) == 0:
        raise ValueError("empty gallery")
    if k > len(g):
        warnings.warn(f"k={k} exceeds gallery size {len(g)}; returning all {len(g)}", stacklevel=2)
        k = len(g)
    if k <= 0:
        return []
    gmu, gs = encode_images(model, g, chunk=1)
    qmu, qs = encode_images(model, query, chunk=1)
    feats, q = (gs, qs[0]) if space == "specified" else (gmu, qmu[0])
    d = np.sqrt(((feats - q) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(d)), d))[:k]
    return [Neighbor(int(i), float(d[i])) for i in order]


def conditional_samples(model: VAEGAN, x, count: int, seed: int = 0, z=None) -> np.ndarray:
    """``Dec(z_i, s(x))`` with ``z_i ~ N(0, I)`` drawn from ``seed`` (or the supplied ``z``)."""
    if count < 1:
        raise ValueError("count must be at least 1")
    _, s = encode_images(model, x, chunk=1)
    if z is None:
        z = np.random.default_rng(seed).standard_normal((count, model.arch.dim_z))
    z = np.asarray(z, dtype=np.float64).reshape(count, model.arch.dim_z)
    with inference(model):
        return model.decode(Tensor(z), Tensor(np.repeat(s[:1], count, axis=0))).data


# ---------------------------------------------------------------- probe metric

class ProbeClassifier(ClassifierMixin, BaseEstimator):
    """Two-layer ReLU MLP trained with plain SGD and early stopping on an
    explicit validation set.

    Features are centred per dimension and divided by one global RMS, both
    measured on the training set, which keeps SGD stable without inflating
    near-constant dimensions (``scaling="per_feature"`` standardizes every
    dimension instead). After
    each epoch the validation error is measured; training stops after
    ``patience`` epochs without improvement and the best weights are kept.
    """

    def __init__(self, hidden: int = 256, learning_rate: float = 0.1, max_epochs: int = 200,
                 patience: int = 10, batch_size: int = 64, scaling: str = "global", random_state: int = 0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.scaling = scaling
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y)
        if X_val is None:
            X_val, y_val = X, y
        X_val, y_val = check_X_y(X_val, y_val)
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("probe needs at least two classes in the training split")
        if self.scaling not in ("global", "per_feature"):
            raise ValueError(f"scaling must be 'global' or 'per_feature', got {self.scaling!r}")
        self.scaler_ = (StandardScaler() if self.scaling == "per_feature" else _GlobalScaler()).fit(X)
        Xs, Vs = self.scaler_.transform(X), self.scaler_.transform(X_val)
        mlp = MLPClassifier(hidden_layer_sizes=(self.hidden,), activation="relu", solver="sgd",
                            learning_rate_init=self.learning_rate, momentum=0.0, alpha=0.0,
                            batch_size=min(self.batch_size, len(X)), random_state=self.random_state,
                            shuffle=True)
        best, best_err, since = None, np.inf, 0
        self.val_curve_ = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            for epoch in range(1, self.max_epochs + 1):
                mlp.partial_fit(Xs, y, classes=self.classes_)
                err = float(np.mean(mlp.predict(Vs) != y_val))
                self.val_curve_.append(err)
                if err < best_err:
                    best, best_err, since = copy.deepcopy(mlp), err, 0
                    self.best_epoch_ = epoch
                else:
                    since += 1
                    if since >= self.patience:
                        break
        self.epochs_ = epoch
        self.best_val_error_ = best_err
        self.mlp_ = best
        return self

    def predict(self, X):
        check_is_fitted(self, "mlp_")
        return self.mlp_.predict(self.scaler_.transform(check_array(X)))

    def error(self, X, y) -> float:
        return float(np.mean(self.predict(X) != np.asarray(y)))


class _GlobalScaler:
    def fit(self, X):
        self.mean_ = X.mean(axis=0)
        rms = np.sqrt(((X - self.mean_) ** 2).mean())
        self.scale_ = rms if rms > 0 else 1.0
        return self

    def transform(self, X):
        return (X - self.mean_) / self.scale_


@dataclasses.dataclass
class ProbeResult:
    train_error: float
    val_error: float
    test_error: float
    epochs: int
    best_epoch: int


@dataclasses.dataclass
class EvalReport:
    """Identity-probe error rates for each representation plus chance level."""

    results: dict
    chance: float

    def error(self, rep: str, split: str = "test") -> float:
        return getattr(self.results[rep], f"{split}_error")

    def to_text(self) -> str:
        lines = [f"{'code':<6}{'train err':>11}{'test err':>11}{'epochs':>8}{'best':>6}"]
        for rep, r in self.results.items():
            lines.append(f"{rep:<6}{100 * r.train_error:>10.1f}%{100 * r.test_error:>10.1f}%"
                         f"{r.epochs:>8}{r.best_epoch:>6}")
        lines.append(f"chance{100 * self.chance:>21.1f}%")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        out = [f"chance={self.chance!r}"]
        for rep, r in self.results.items():
            for k, v in dataclasses.asdict(r).items():
                out.append(f"{rep}.{k}={v!r}")
        return "\n".join(out) + "\n"


def chance_error(labels) -> float:
    """Error of always predicting the most frequent class."""
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    return float(1.0 - counts.max() / counts.sum())


def disentanglement_metric(model: VAEGAN, train: LabeledImageSet, val: LabeledImageSet, test: LabeledImageSet,
                           target: str = "both", seed: int = 0, **probe_kw) -> EvalReport:
    """Train an identity probe on the frozen codes and report its error rates.

    ``target`` is ``z`` (posterior mean), ``s`` or ``both``.
    """
    reps = {"both": ("z", "s"), "z": ("z",), "s": ("s",)}.get(target)
    if reps is None:
        raise ValueError(f"target must be 'z', 's' or 'both', got {target!r}")
    for part in (train, val, test):
        if len(np.unique(part.labels)) < 2:
            raise ValueError(f"{part.split} split has a single class; the probe is undefined")
    feats = {}
    for name, part in (("train", train), ("val", val), ("test", test)):
        mu, s = encode_images(model, part.images)
        feats[name] = {"z": mu, "s": s}
    results = {}
    for rep in reps:
        probe = ProbeClassifier(random_state=seed, **probe_kw)
        probe.fit(feats["train"][rep], train.labels, feats["val"][rep], val.labels)
        results[rep] = ProbeResult(probe.error(feats["train"][rep], train.labels), probe.best_val_error_,
                                   probe.error(feats["test"][rep], test.labels), probe.epochs_, probe.best_epoch_)
    return EvalReport(results, chance_error(test.labels))
