"""scikit-learn style wrapper around :class:`~cplab.trainer.Trainer`.

``fit(X, y)`` takes a list of (T, F) feature matrices and a parallel list
of token transcripts in which ``None`` marks an unlabeled utterance. The
labeled ones train the acoustic model directly; the unlabeled ones are
pseudo-labeled through the cache. With no unlabeled utterances the fit is
plain supervised CTC training.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import ctc
from .metrics import batch_ter
from .model import AugmentConfig, EncoderConfig, LRSchedule, forward
from .trainer import Trainer, TrainerConfig
from .validation import check_sequences, check_transcripts


class PseudoLabelCTC(BaseEstimator):
    """Semi-supervised CTC transcriber trained by continuous pseudo-labeling.

    Parameters mirror the encoder, trainer and learning-rate configs; see
    :class:`EncoderConfig`, :class:`TrainerConfig` and :class:`LRSchedule`.
    ``n_tokens`` is the number of non-blank tokens; by default it is one
    more than the largest id seen in ``y``. ``augment=False`` disables
    input masking.
    """

    def __init__(
        self,
        n_tokens=None,
        conv_kernel=7,
        conv_stride=3,
        conv_channels=48,
        hidden_dims=(48,),
        context=1,
        M=0,
        C=64,
        lam=5.0,
        pout="dynamic_then_one:identity",
        pl_writeback="new",
        tau="linear:1:0.1",
        K=2000,
        max_steps=2400,
        batch_size=8,
        dropout_high=0.3,
        dropout_low=0.1,
        base_lr=0.05,
        warmup_steps=100,
        augment=True,
        word_boundary=0,
        random_state=0,
    ):
        self.n_tokens = n_tokens
        self.conv_kernel = conv_kernel
        self.conv_stride = conv_stride
        self.conv_channels = conv_channels
        self.hidden_dims = hidden_dims
        self.context = context
        self.M = M
        self.C = C
        self.lam = lam
        self.pout = pout
        self.pl_writeback = pl_writeback
        self.tau = tau
        self.K = K
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.dropout_high = dropout_high
        self.dropout_low = dropout_low
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.augment = augment
        self.word_boundary = word_boundary
        self.random_state = random_state

    def _seed(self) -> int:
        rs = self.random_state
        if rs is None:
            return int(np.random.SeedSequence().generate_state(1)[0])
        if isinstance(rs, np.random.Generator):
            return int(rs.integers(2**31))
        return int(rs)

    def fit(self, X, y=None):
        X = check_sequences(X, min_frames=self.conv_kernel)
        y = check_transcripts(y, len(X), self.n_tokens)
        lab = [i for i, t in enumerate(y) if t is not None]
        unl = [i for i, t in enumerate(y) if t is None]
        if not lab:
            raise ValueError("fit needs at least one labeled utterance (y[i] is not None)")
        n_tokens = self.n_tokens
        if n_tokens is None:
            n_tokens = max((max(y[i]) for i in lab if y[i]), default=0) + 1
        if n_tokens < 1:
            raise ValueError("n_tokens must be >= 1")
        self.n_features_in_ = X[0].shape[1]
        self.n_tokens_ = int(n_tokens)
        self.blank_ = self.n_tokens_
        enc = EncoderConfig(
            feat_dim=self.n_features_in_,
            vocab_size=self.n_tokens_ + 1,
            conv_kernel=self.conv_kernel,
            conv_stride=self.conv_stride,
            conv_channels=self.conv_channels,
            hidden_dims=list(self.hidden_dims),
            context=self.context,
            dropout=self.dropout_low,
        )
        supervised = not unl
        cfg = TrainerConfig(
            M=self.M, C=self.C, lam=self.lam, pout=self.pout, pl_writeback=self.pl_writeback,
            tau=self.tau, K=self.K, max_steps=self.max_steps, batch_size=self.batch_size,
            dropout_high=self.dropout_high, dropout_low=self.dropout_low,
            supervised_only=supervised, seed=self._seed(),
        )
        aug = AugmentConfig() if self.augment else AugmentConfig(0, 0, 0, 0, 0.0, 0)
        trainer = Trainer(
            enc, cfg,
            {f"l{i}": X[i] for i in lab}, {f"l{i}": y[i] for i in lab},
            {f"u{i}": X[i] for i in unl},
            augment_cfg=aug,
            lr_schedule=LRSchedule(self.base_lr, self.warmup_steps),
            word_boundary=self.word_boundary,
        )
        result = trainer.run()
        self.state_ = result.state
        self.records_ = result.records
        self.status_ = result.status
        self.n_labeled_, self.n_unlabeled_ = len(lab), len(unl)
        return self

    def _logits(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "state_")
        X = check_sequences(X, self.n_features_in_, self.conv_kernel)
        logits, _ = forward(self.state_, X)
        return logits

    def transform(self, X) -> list[np.ndarray]:
        """Per-frame class posteriors, one (T', n_tokens + 1) array per utterance."""
        return [ctc.apply_temperature(lg, 1.0) for lg in self._logits(X)]

    predict_proba = transform

    def predict(self, X) -> list[list[int]]:
        """Greedy CTC transcripts."""
        return [ctc.greedy_decode(lg, self.blank_) for lg in self._logits(X)]

    def score(self, X, y) -> float:
        """``1 - TER`` pooled over all utterances (can be negative)."""
        hyps = self.predict(X)
        refs = check_transcripts(y, len(hyps), allow_missing=False)
        return 1.0 - batch_ter(refs, hyps)
