"""Scikit-learn style facade over training, prediction, and pruning.

``GatedFusionClassifier`` follows the estimator protocol (``fit`` /
``predict`` / ``predict_proba`` / ``score``, ``get_params`` / ``set_params``
via :class:`sklearn.base.BaseEstimator`), with X as a 4-D array of
multimodal windows ``(n_samples, n_modalities, seq_len, input_dim)``.
Pruning returns a new fitted estimator so compressed deployments compose
with the same API.
"""

from __future__ import annotations

import numpy as np
from scipy.special import softmax as _softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .backbone import Backbone, BackboneConfig
from .gating import GateTable
from .harness import missing_masks
from .pruning import (
    materialize,
    score_magnitude,
    score_random,
    score_sentrygate,
    score_sentrygate_average,
    score_synflow,
    select_by_budget,
)
from .training import TrainConfig, train
from .validation import check_labels, check_mask, check_streams


class GatedFusionClassifier(BaseEstimator, ClassifierMixin):
    """Multimodal time-series classifier with modality-aware prunability."""

    def __init__(self, model_dim=64, enc_depth=1, fusion_depth=1, ffn_dim=16,
                 n_experts=2, top_k=1, n_heads=4, n_kv_groups=2,
                 sparsity_const=5, sparse_attention=True, epochs=30,
                 warmup_epochs=6, p_max=0.4, alpha=1.0, lambda_bin=0.1,
                 lr_backbone=0.05, lr_gates=0.2, momentum=0.9, batch_size=32,
                 seed=0):
        self.model_dim = model_dim
        self.enc_depth = enc_depth
        self.fusion_depth = fusion_depth
        self.ffn_dim = ffn_dim
        self.n_experts = n_experts
        self.top_k = top_k
        self.n_heads = n_heads
        self.n_kv_groups = n_kv_groups
        self.sparsity_const = sparsity_const
        self.sparse_attention = sparse_attention
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.p_max = p_max
        self.alpha = alpha
        self.lambda_bin = lambda_bin
        self.lr_backbone = lr_backbone
        self.lr_gates = lr_gates
        self.momentum = momentum
        self.batch_size = batch_size
        self.seed = seed

    # -- estimator protocol --------------------------------------------------

    def fit(self, X, y):
        X = check_streams(X)
        y = check_labels(y, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        n, m, t, d_in = X.shape
        bcfg = BackboneConfig(
            n_modalities=m, seq_len=t, input_dim=d_in,
            model_dim=self.model_dim, n_classes=len(self.classes_),
            enc_depth=self.enc_depth, fusion_depth=self.fusion_depth,
            ffn_dim=self.ffn_dim, n_experts=self.n_experts, top_k=self.top_k,
            n_heads=self.n_heads, n_kv_groups=self.n_kv_groups,
            sparsity_const=self.sparsity_const,
            sparse_attention=self.sparse_attention,
        )
        tcfg = TrainConfig(
            epochs=self.epochs, warmup_epochs=self.warmup_epochs,
            p_max=self.p_max, alpha=self.alpha, lambda_bin=self.lambda_bin,
            lr_backbone=self.lr_backbone, lr_gates=self.lr_gates,
            momentum=self.momentum, batch_size=self.batch_size, seed=self.seed,
        )
        self.model_, self.gates_, self.report_ = train(X, encoded, bcfg, tcfg)
        return self

    def _require_fitted(self) -> Backbone:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit (or adopt a pruned model) first")
        return self.model_

    def _mask_for(self, modality_mask) -> np.ndarray:
        m = self._require_fitted().cfg.n_modalities
        if modality_mask is None:
            return np.ones(m, dtype=np.int64)
        return check_mask(modality_mask, m)

    def decision_function(self, X, modality_mask=None) -> np.ndarray:
        model = self._require_fitted()
        X = check_streams(X, model.cfg.n_modalities, model.cfg.seq_len,
                          model.cfg.input_dim)
        return model.forward(X, self._mask_for(modality_mask)).values

    def predict_proba(self, X, modality_mask=None) -> np.ndarray:
        return _softmax(self.decision_function(X, modality_mask), axis=-1)

    def predict(self, X, modality_mask=None) -> np.ndarray:
        idx = np.argmax(self.decision_function(X, modality_mask), axis=-1)
        return self.classes_[idx]

    def score(self, X, y, modality_mask=None) -> float:
        return float((self.predict(X, modality_mask) == np.asarray(y)).mean())

    # -- compression ----------------------------------------------------------

    def unit_scores(self, scorer: str = "sentrygate", platform_mask=None,
                    missing_count: int | None = None, seed: int = 0):
        """Scores for every prunable unit under a deployment scenario."""
        model = self._require_fitted()
        if scorer == "sentrygate":
            if self.gates_ is None:
                raise NotFittedError("no gate table on this estimator")
            if missing_count is not None:
                masks = missing_masks(model.cfg.n_modalities, missing_count)
                return score_sentrygate_average(self.gates_, masks, model.structure)
            return score_sentrygate(self.gates_, self._mask_for(platform_mask),
                                    model.structure)
        if scorer == "random":
            return score_random(model.structure, seed)
        if scorer == "magnitude":
            return score_magnitude(model)
        if scorer == "synflow":
            return score_synflow(model)
        raise ValueError(f"unknown scorer {scorer!r}")

    def prune(self, ratio: float, scorer: str = "sentrygate", platform_mask=None,
              missing_count: int | None = None, seed: int = 0) -> "GatedFusionClassifier":
        """Zero-shot surgery: returns a new fitted estimator wrapping the
        compact model (no gradient step, surviving weights bit-identical)."""
        model = self._require_fitted()
        scores = self.unit_scores(scorer, platform_mask, missing_count, seed)
        plan = select_by_budget(scores, ratio, model.structure)
        pruned = clone_estimator_with_model(self, materialize(model, plan))
        pruned.plan_ = plan
        return pruned


def clone_estimator_with_model(source: GatedFusionClassifier,
                               model: Backbone,
                               gates: GateTable | None = None) -> GatedFusionClassifier:
    est = GatedFusionClassifier(**source.get_params())
    est.model_ = model
    est.gates_ = gates if gates is not None else getattr(source, "gates_", None)
    est.classes_ = getattr(source, "classes_",
                           np.arange(model.cfg.n_classes))
    est.report_ = getattr(source, "report_", None)
    return est
