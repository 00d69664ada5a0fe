"""Scikit-learn style estimator wrapping the joint training pipeline.

fit(X, y) trains one supernet plus its layer-pruned subnets on variable
length feature sequences; predict/score decode at any trained size. The
estimator composes with sklearn tooling (get_params/set_params/clone).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .ctc import corpus_label_error_rate
from .data import Utterance
from .encoder import EncoderConfig, param_count
from .pipeline import (JointTrainer, MetricsWriter, TrainConfig,
                       decode_dataset)


def check_sequences(X, feature_dim: int | None = None) -> list[np.ndarray]:
    """Validate a dataset of [T, F] float sequences; returns float64 copies."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    out = []
    for i, x in enumerate(X):
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(
                f"sequence {i}: expected a [T, F] array with T >= 1, "
                f"got shape {arr.shape}")
        if feature_dim is None:
            feature_dim = arr.shape[1]
        elif arr.shape[1] != feature_dim:
            raise ValueError(
                f"sequence {i}: feature dim {arr.shape[1]} != {feature_dim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"sequence {i}: non-finite features")
        out.append(arr)
    if not out:
        raise ValueError("X must contain at least one sequence")
    return out


def check_label_sequences(y, n: int | None = None) -> list[list[int]]:
    """Validate integer label sequences; 0 is reserved for the CTC blank."""
    out = []
    for i, labels in enumerate(y):
        seq = [int(s) for s in labels]
        if any(s < 1 for s in seq):
            raise ValueError(
                f"label sequence {i}: symbols must be >= 1 (0 is blank)")
        out.append(seq)
    if n is not None and len(out) != n:
        raise ValueError(f"got {len(out)} label sequences for {n} inputs")
    return out


class DynamicDepthCTC(BaseEstimator):
    """CTC sequence labeler trained jointly at multiple depths.

    After fitting, `predict(X, size=k)` decodes with the k-layer subnet;
    the default is the full-size supernet. `score` returns 1 - label error
    rate. See `TrainConfig` for the training-schedule parameters.
    """

    def __init__(self, subnet_layers=(32, 16, 8), method="simple_topk",
                 blocks=8, dim=64, ff_dim=256, heads=4, conv_kernel=7,
                 subsample=2, total_steps=6000, step1_fraction=0.6,
                 iterations=32, subnet_loss_scale=0.3, sparsity_scale=0.3,
                 layer_dropout=0.3, temperature=1.0, lr_peak=4e-4,
                 lr_floor=4e-6, lr_final=1e-7, warm_fraction=0.45,
                 decay_fraction=0.45, batch_size=4, seed=0):
        self.subnet_layers = subnet_layers
        self.method = method
        self.blocks = blocks
        self.dim = dim
        self.ff_dim = ff_dim
        self.heads = heads
        self.conv_kernel = conv_kernel
        self.subsample = subsample
        self.total_steps = total_steps
        self.step1_fraction = step1_fraction
        self.iterations = iterations
        self.subnet_loss_scale = subnet_loss_scale
        self.sparsity_scale = sparsity_scale
        self.layer_dropout = layer_dropout
        self.temperature = temperature
        self.lr_peak = lr_peak
        self.lr_floor = lr_floor
        self.lr_final = lr_final
        self.warm_fraction = warm_fraction
        self.decay_fraction = decay_fraction
        self.batch_size = batch_size
        self.seed = seed

    # -- configuration ----------------------------------------------------------

    def _encoder_config(self, input_dim: int, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            blocks=self.blocks, dim=self.dim, ff_dim=self.ff_dim,
            heads=self.heads, conv_kernel=self.conv_kernel,
            subsample=self.subsample, input_dim=input_dim,
            vocab_size=vocab_size)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            total_steps=self.total_steps,
            step1_fraction=self.step1_fraction,
            iterations=self.iterations,
            subnet_loss_scale=self.subnet_loss_scale,
            sparsity_scale=self.sparsity_scale,
            layer_dropout=self.layer_dropout,
            method=self.method,
            temperature=self.temperature,
            lr_peak=self.lr_peak, lr_floor=self.lr_floor,
            lr_final=self.lr_final,
            warm_fraction=self.warm_fraction,
            decay_fraction=self.decay_fraction,
            batch_size=self.batch_size,
            seed=self.seed,
            subnet_layers=tuple(self.subnet_layers))

    # -- sklearn API ---------------------------------------------------------------

    def fit(self, X, y):
        feats = check_sequences(X)
        labels = check_label_sequences(y, n=len(feats))
        vocab = max((max(seq) for seq in labels if seq), default=1) + 1
        self.encoder_config_ = self._encoder_config(feats[0].shape[1], vocab)
        utts = [Utterance(f, lab, f"fit-{i}")
                for i, (f, lab) in enumerate(zip(feats, labels))]
        metrics = MetricsWriter()
        trainer = JointTrainer(self.encoder_config_, self._train_config(),
                               utts, metrics=metrics)
        state = trainer.run()
        self.params_ = state.params
        self.scores_ = state.scores
        self.masks_ = state.masks
        self.sizes_ = tuple(int(m.sum()) for m in state.masks)
        self.metrics_ = metrics.records
        return self

    def _gate_for(self, size: int | None) -> np.ndarray | None:
        if size is None:
            return None
        for k, mask in zip(self.sizes_, self.masks_):
            if k == size:
                return mask
        raise ValueError(f"size {size} not trained; available: {self.sizes_}")

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "This DynamicDepthCTC instance is not fitted yet.")

    def predict(self, X, size: int | None = None) -> list[list[int]]:
        """Greedy-decoded label sequences at the requested subnet size."""
        self._check_fitted()
        feats = check_sequences(X, feature_dim=self.encoder_config_.input_dim)
        utts = [Utterance(f, [1], f"predict-{i}") for i, f in enumerate(feats)]
        res = decode_dataset(self.encoder_config_, self.params_, utts,
                             gate=self._gate_for(size))
        return res.hyps

    def score(self, X, y, size: int | None = None) -> float:
        """1 - corpus label error rate (higher is better)."""
        self._check_fitted()
        labels = check_label_sequences(y)
        hyps = self.predict(X, size=size)
        return 1.0 - corpus_label_error_rate(hyps, labels)

    def parameter_count(self, size: int | None = None) -> int:
        """Scalar parameter count of the chosen size category."""
        self._check_fitted()
        gate = self._gate_for(size)
        if gate is None:
            gate = np.ones(self.encoder_config_.num_layers)
        return param_count(self.encoder_config_, gate)
