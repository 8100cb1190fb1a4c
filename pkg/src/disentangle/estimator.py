"""scikit-learn style wrapper around the trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import LabeledImageSet
from .evaluation import encode_images, inference
from .autodiff import Tensor
from .model import ArchConfig
from .trainer import TrainConfig, Trainer


class DisentanglingVAEGAN(TransformerMixin, BaseEstimator):
    """Learns a label-specified code ``s`` and an unspecified code ``z`` from
    labelled images.

    ``fit(X, y)`` takes images shaped (N, H, W), (N, C, H, W) or flattened
    (N, H*W) square grayscale, with values in [0, 1]. ``transform`` returns
    ``[s, mu]`` per image. ``predict`` assigns the class whose mean ``s`` on
    the training set is nearest.
    """

    def __init__(self, lambda_gan=1.0, kl_weight=1.0, lr_gen=0.002, lr_adv=0.002, momentum=0.0,
                 iterations=1000, batch_size=16, dim_s=16, dim_z=16, channels=(8, 16, 32),
                 disc_channels=(8, 16, 32), variant="shallow", enable_prior_sample_gan_term=True,
                 random_state=0):
        self.lambda_gan = lambda_gan
        self.kl_weight = kl_weight
        self.lr_gen = lr_gen
        self.lr_adv = lr_adv
        self.momentum = momentum
        self.iterations = iterations
        self.batch_size = batch_size
        self.dim_s = dim_s
        self.dim_z = dim_z
        self.channels = channels
        self.disc_channels = disc_channels
        self.variant = variant
        self.enable_prior_sample_gan_term = enable_prior_sample_gan_term
        self.random_state = random_state

    def _images(self, X, reset: bool) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim == 2:
            side = int(round(np.sqrt(X.shape[1])))
            if side * side != X.shape[1]:
                raise ValueError(f"cannot reshape {X.shape[1]} features into a square image")
            X = X.reshape(len(X), 1, side, side)
        elif X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4:
            raise ValueError(f"expected images with 2 to 4 dimensions, got {X.ndim}")
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if reset:
            self.image_shape_ = X.shape[1:]
        elif X.shape[1:] != self.image_shape_:
            raise ValueError(f"images of shape {X.shape[1:]} do not match the fitted shape {self.image_shape_}")
        return X

    def fit(self, X, y):
        X_flat, y = check_X_y(np.asarray(X).reshape(len(X), -1), y)
        X = self._images(X, reset=True)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        ids = self.label_encoder_.transform(y)
        c, h, w = self.image_shape_
        if h != w:
            raise ValueError("images must be square")
        arch = ArchConfig(variant=self.variant, image_channels=c, image_side=h, dim_s=self.dim_s,
                          dim_z=self.dim_z, num_labels=len(self.classes_), channels=tuple(self.channels),
                          disc_channels=tuple(self.disc_channels))
        cfg = TrainConfig(lambda_gan=self.lambda_gan, kl_weight=self.kl_weight, lr_gen=self.lr_gen,
                          lr_adv=self.lr_adv, momentum=self.momentum, iterations=self.iterations,
                          batch_size=self.batch_size, seed=self.random_state, arch=arch, log_every=0,
                          enable_prior_sample_gan_term=self.enable_prior_sample_gan_term)
        self.trainer_ = Trainer(cfg)
        data = LabeledImageSet(X, ids, len(self.classes_))
        self.checkpoint_, self.history_ = self.trainer_.train(data)
        self.model_ = self.trainer_.model
        _, s = encode_images(self.model_, X)
        self.centroids_ = np.stack([s[ids == k].mean(axis=0) for k in range(len(self.classes_))])
        self.n_features_in_ = X_flat.shape[1]
        return self

    def encode(self, X):
        """Return ``(s, mu)`` arrays."""
        check_is_fitted(self, "model_")
        mu, s = encode_images(self.model_, self._images(X, reset=False))
        return s, mu

    def transform(self, X):
        s, mu = self.encode(X)
        return np.hstack([s, mu])

    def inverse_transform(self, codes):
        """Decode ``[s, mu]`` rows back to images (N, C, H, W)."""
        check_is_fitted(self, "model_")
        codes = check_array(codes)
        ds = self.model_.arch.dim_s
        with inference(self.model_):
            return self.model_.decode(Tensor(codes[:, ds:]), Tensor(codes[:, :ds])).data

    def swap(self, X_z, X_s):
        """Decode ``z`` of each image in ``X_z`` with ``s`` of the paired image in ``X_s``."""
        _, mu = self.encode(X_z)
        s, _ = self.encode(X_s)
        return self.inverse_transform(np.hstack([s, mu]))

    def predict(self, X):
        s, _ = self.encode(X)
        d = ((s[:, None, :] - self.centroids_[None]) ** 2).sum(axis=2)
        return self.classes_[np.argmin(d, axis=1)]
