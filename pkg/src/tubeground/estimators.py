"""Estimator-style entry points: the full grounder and the confidence baseline."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import List, Optional

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import GroundingPrediction
from .nn import load_checkpoint, save_checkpoint
from .spatial import SpatialModel
from .sps import (ConfidenceSelector, NeuralSpatialGrounder, NeuralTemporalGrounder, TrainPlan, evaluate,
                  predict_sample, selection_accuracy, train)
from .temporal import TemporalModel, Vocabulary
from .validation import check_positive_int, check_samples, feature_dims

logger = logging.getLogger(__name__)


class CoSPaLGrounder(BaseEstimator):
    """Weakly supervised spatio-temporal grounder.

    ``fit`` takes a list of :class:`GroundingSample` (ground truth is never
    read during training) and trains the spatial and temporal modules under
    the self-paced curriculum. ``predict`` returns one
    :class:`GroundingPrediction` per sample, or None for a video without
    tubelets.
    """

    def __init__(self, d=256, hidden=256, temporal_d=256, epochs=10, total_steps=None, batch_size=32,
                 spatial_lr=1e-4, temporal_lr=4e-4, use_crg=True, sps_enabled=True, bounds=(4, 7, None),
                 frames=32, max_tubelets=10, denominator="exclusive", negatives="batch", word_value="auto",
                 max_len=64, clip_len=16, tau=0.5, train_temporal=True, seed=0):
        self.d = d
        self.hidden = hidden
        self.temporal_d = temporal_d
        self.epochs = epochs
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.spatial_lr = spatial_lr
        self.temporal_lr = temporal_lr
        self.use_crg = use_crg
        self.sps_enabled = sps_enabled
        self.bounds = bounds
        self.frames = frames
        self.max_tubelets = max_tubelets
        self.denominator = denominator
        self.negatives = negatives
        self.word_value = word_value
        self.max_len = max_len
        self.clip_len = clip_len
        self.tau = tau
        self.train_temporal = train_temporal
        self.seed = seed

    def _plan(self) -> TrainPlan:
        return TrainPlan(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed, use_crg=self.use_crg,
            sps_enabled=self.sps_enabled, bounds=tuple(self.bounds), total_steps=self.total_steps,
            spatial_lr=self.spatial_lr, temporal_lr=self.temporal_lr, frames=self.frames,
            max_tubelets=self.max_tubelets, denominator=self.denominator, negatives=self.negatives,
            max_len=self.max_len, clip_len=self.clip_len, tau=self.tau, train_temporal=self.train_temporal,
        )

    def _build(self, samples):
        d_o, d_c, d_w = feature_dims(samples)
        check_positive_int("d", self.d)
        check_positive_int("temporal_d", self.temporal_d)
        self.vocab_ = Vocabulary.from_samples(samples)
        self.spatial_model_ = SpatialModel(d_o, d_w, d=self.d, hidden=self.hidden, seed=self.seed,
                                           word_value=self.word_value)
        self.temporal_model_ = TemporalModel(d_c, d_w, self.vocab_, d=self.temporal_d, seed=self.seed + 1,
                                             max_len=self.max_len)

    def fit(self, X, y=None, eval_samples=None):
        samples = check_samples(X, min_samples=2)
        self.plan_ = self._plan()
        self._build(samples)
        self.log_ = train(self.plan_, samples, self.spatial_model_,
                          self.temporal_model_ if self.train_temporal else None, eval_samples)
        return self

    def _grounders(self):
        check_is_fitted(self, ["spatial_model_", "temporal_model_"])
        plan = getattr(self, "plan_", None) or self._plan()
        temporal = NeuralTemporalGrounder(self.temporal_model_, plan) if self.train_temporal else None
        return NeuralSpatialGrounder(self.spatial_model_, plan), temporal

    def predict(self, X) -> List[Optional[GroundingPrediction]]:
        samples = check_samples(X)
        spatial, temporal = self._grounders()
        out = []
        for s in samples:
            res = predict_sample(s, spatial, temporal)
            out.append(None if res is None else res[0])
        return out

    def evaluate(self, X):
        """``(MetricsReport, per-video records)`` on labelled samples."""
        samples = check_samples(X, require_gt=True)
        spatial, temporal = self._grounders()
        return evaluate(samples, spatial, temporal)

    def selection_accuracy(self, X) -> float:
        samples = check_samples(X, require_gt=True)
        return selection_accuracy(samples, self._grounders()[0])

    def score(self, X, y=None) -> float:
        """Mean vIoU."""
        return self.evaluate(X)[0].m_vIoU

    # -- persistence -----------------------------------------------------------

    def save(self, directory) -> None:
        check_is_fitted(self, ["spatial_model_", "temporal_model_"])
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(directory / "spatial", self.spatial_model_.named_tensors(),
                        extra={"config": self.spatial_model_.config})
        save_checkpoint(directory / "temporal", self.temporal_model_.named_tensors(),
                        extra={"config": self.temporal_model_.config})
        self.vocab_.save(directory / "vocab.txt")
        params = self.get_params()
        params["bounds"] = ["inf" if b is None else b for b in params["bounds"]]
        with open(directory / "estimator.json", "w") as fh:
            json.dump(params, fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, directory) -> "CoSPaLGrounder":
        directory = Path(directory)
        with open(directory / "estimator.json") as fh:
            params = json.load(fh)
        params["bounds"] = tuple(None if b == "inf" else b for b in params["bounds"])
        est = cls(**params)
        est.vocab_ = Vocabulary.load(directory / "vocab.txt")
        s_params, _, s_meta = load_checkpoint(directory / "spatial")
        t_params, _, t_meta = load_checkpoint(directory / "temporal")
        sc, tc = s_meta["config"], t_meta["config"]
        est.spatial_model_ = SpatialModel(sc["d_object"], sc["d_word"], d=sc["d"], hidden=sc["hidden"],
                                          word_value=sc["word_value"])
        est.temporal_model_ = TemporalModel(tc["d_clip"], tc["d_word"], est.vocab_, d=tc["d"],
                                            max_len=tc["max_len"], n_layers=tc["n_layers"])
        with torch.no_grad():
            for model, loaded in ((est.spatial_model_, s_params), (est.temporal_model_, t_params)):
                for name, tensor in loaded.items():
                    model.p[name].copy_(tensor)
        est.plan_ = est._plan()
        return est


class WGDinoBaseline(BaseEstimator):
    """Mean detector confidence picks the tubelet; its full span is the temporal prediction."""

    def fit(self, X=None, y=None):
        return self

    def predict(self, X) -> List[Optional[GroundingPrediction]]:
        samples = check_samples(X)
        out = []
        for s in samples:
            res = predict_sample(s, ConfidenceSelector(), None)
            out.append(None if res is None else res[0])
        return out

    def evaluate(self, X):
        return evaluate(check_samples(X, require_gt=True), ConfidenceSelector(), None)

    def score(self, X, y=None) -> float:
        return self.evaluate(X)[0].m_vIoU


class QueryDecomposer(BaseEstimator):
    """Transformer attaching a query decomposition to each sample.

    Stateless; ``transform`` fills ``sample.decomposition`` in place and
    returns the decompositions.
    """

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        from .crg import decompose

        out = []
        for s in check_samples(X):
            s.decomposition = decompose(s.query)
            out.append(s.decomposition)
        return out

    def fit_transform(self, X, y=None):
        return self.fit(X, y).transform(X)
