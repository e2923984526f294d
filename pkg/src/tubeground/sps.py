"""Self-paced scene curriculum: difficulty, stages, the training loop and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import ContractError, GroundingPrediction, GroundingSample, MetricsReport, VideoRecord
from .crg import decompose
from .metrics import report_from_scores, video_iou
from .nn import NumericalError, OptimizerState, adam_step, zero_grad
from .spatial import SpatialModel, featurize_spatial, item_attention, select_tubelet, spatial_loss
from .temporal import TemporalModel, featurize_temporal, item_salience, predict_bounds, reconstruction_loss

logger = logging.getLogger(__name__)

UNBOUNDED = None
DEFAULT_BOUNDS = (4, 7, UNBOUNDED)


def difficulty(video: VideoRecord) -> int:
    """Scene complexity is the tubelet count."""
    return len(video.tubelets)


def _bound_value(bound) -> float:
    return math.inf if bound is None or bound == math.inf else bound


@dataclass
class CurriculumStage:
    stage_index: int
    tubelet_bound: Optional[int]
    video_ids: frozenset

    def __post_init__(self):
        if self.stage_index < 1:
            raise ContractError("stage_index is 1-based")


def build_stages(videos: Sequence, bounds: Sequence = DEFAULT_BOUNDS) -> List[CurriculumStage]:
    """Stage ``i`` holds every video with at most ``bounds[i]`` tubelets.

    ``videos`` may hold :class:`VideoRecord` or :class:`GroundingSample`
    objects. The final bound is forced to be unbounded.
    """
    if not bounds:
        raise ContractError("at least one stage bound is required")
    bounds = [None if b is None or b == math.inf else int(b) for b in bounds]
    if bounds[-1] is not None:
        logger.warning("final stage bound %s replaced by unbounded", bounds[-1])
        bounds[-1] = None
    vals = [_bound_value(b) for b in bounds]
    if any(b < a for a, b in zip(vals, vals[1:])):
        raise ContractError(f"stage bounds must be non-decreasing, got {bounds}")
    recs = [v.video if isinstance(v, GroundingSample) else v for v in videos]
    stages = []
    for i, b in enumerate(bounds):
        ids = frozenset(v.video_id for v in recs if difficulty(v) <= _bound_value(b))
        if not ids:
            raise ContractError(f"curriculum stage {i + 1} (bound {b}) is empty; raise the bound or drop the stage")
        stages.append(CurriculumStage(i + 1, b, ids))
    return stages


@dataclass
class TrainPlan:
    """Training budget, curriculum and loss switches.

    The step budget is ``epochs`` passes over the full training set at
    ``batch_size``, unless ``total_steps`` is given, and is divided evenly
    across stages.
    """

    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    use_crg: bool = True
    sps_enabled: bool = True
    bounds: Tuple = DEFAULT_BOUNDS
    total_steps: Optional[int] = None
    spatial_lr: float = 1e-4
    temporal_lr: float = 4e-4
    frames: int = 32
    max_tubelets: Optional[int] = 10
    denominator: str = "exclusive"
    negatives: str = "batch"
    max_len: int = 64
    clip_len: Optional[int] = 16
    tau: float = 0.5
    train_temporal: bool = True

    def __post_init__(self):
        if self.epochs <= 0 and not self.total_steps:
            raise ContractError("the plan needs a positive epoch or step budget")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 for contrastive negatives")
        if self.total_steps is not None and self.total_steps <= 0:
            raise ContractError("total_steps must be positive")

    def stage_bounds(self) -> List:
        return list(self.bounds) if self.sps_enabled else [UNBOUNDED]

    def step_budget(self, n_videos: int) -> int:
        if self.total_steps:
            return int(self.total_steps)
        return self.epochs * max(1, math.ceil(n_videos / self.batch_size))

    def steps_per_stage(self, n_videos: int) -> List[int]:
        n = len(self.stage_bounds())
        total = self.step_budget(n_videos)
        base = [total // n] * n
        base[-1] += total - sum(base)
        return base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = ["inf" if b is None else b for b in self.bounds]
        return d


@dataclass
class TrainLog:
    epochs: List[dict] = field(default_factory=list)
    stages: List[dict] = field(default_factory=list)
    total_steps: int = 0


def ensure_decomposed(samples: Sequence[GroundingSample]) -> None:
    for s in samples:
        if s.decomposition is None:
            s.decomposition = decompose(s.query)


def spatial_positions(sample: GroundingSample, use_crg: bool, purpose: str = "train"):
    """Word positions fed to the spatial module.

    Training uses the global phrase followed by the local phrases; selection
    at inference uses the global phrase alone so background nouns cannot pull
    attention toward other subjects.
    """
    if not use_crg:
        return None
    dq = sample.decomposition
    if dq is None or dq.is_empty:
        return None
    if purpose == "select" and dq.global_positions:
        return list(dq.global_positions)
    return dq.word_positions()


def temporal_positions(sample: GroundingSample, use_crg: bool):
    if not use_crg:
        return None
    dq = sample.decomposition
    if dq is None or dq.is_empty:
        return None
    return dq.word_positions()


def _batches(order: Sequence[int], batch_size: int) -> List[List[int]]:
    """Consecutive minibatches; a trailing singleton joins the previous batch."""
    out = [list(order[i:i + batch_size]) for i in range(0, len(order), batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2].extend(out.pop())
    return out


def train(plan: TrainPlan, samples: Sequence[GroundingSample], spatial: SpatialModel,
          temporal: Optional[TemporalModel] = None, eval_samples: Optional[Sequence[GroundingSample]] = None,
          spatial_state: Optional[OptimizerState] = None, temporal_state: Optional[OptimizerState] = None) -> TrainLog:
    """Run the curriculum, updating ``spatial`` and ``temporal`` in place.

    Both modules step once per minibatch with independent Adam states.
    Raises :class:`NumericalError` with stage/epoch/batch context on a
    non-finite loss or gradient.
    """
    if not samples:
        raise ContractError("no training samples")
    if plan.use_crg:
        ensure_decomposed(samples)
        if eval_samples:
            ensure_decomposed(eval_samples)
    torch.manual_seed(plan.seed)
    rng = np.random.default_rng(plan.seed)
    spatial_state = spatial_state or OptimizerState(learning_rate=plan.spatial_lr)
    temporal_state = temporal_state or OptimizerState(learning_rate=plan.temporal_lr)
    use_temporal = temporal is not None and plan.train_temporal

    usable = [i for i, s in enumerate(samples) if s.video.tubelets]
    if len(usable) < len(samples):
        logger.warning("%d training videos have no tubelets and are skipped", len(samples) - len(usable))
    s_items = {i: featurize_spatial(samples[i], plan.frames, plan.max_tubelets,
                                    spatial_positions(samples[i], plan.use_crg)) for i in usable}
    t_items = {}
    if use_temporal:
        t_items = {i: featurize_temporal(samples[i], temporal.vocab, temporal_positions(samples[i], plan.use_crg),
                                         plan.max_len) for i in usable}

    stage_samples = [samples[i] for i in usable]
    stages = build_stages(stage_samples, plan.stage_bounds())
    budgets = plan.steps_per_stage(len(usable))
    log = TrainLog()
    logger.info("plan %s", plan.to_dict())
    for stage, budget in zip(stages, budgets):
        members = [i for i in usable if samples[i].video_id in stage.video_ids]
        if len(members) < 2:
            raise ContractError(f"stage {stage.stage_index} has fewer than 2 videos; raise its bound")
        logger.info("stage %d: bound %s, %d videos, %d steps", stage.stage_index, stage.tubelet_bound,
                    len(members), budget)
        steps, epoch = 0, 0
        while steps < budget:
            epoch += 1
            order = [members[j] for j in rng.permutation(len(members))]
            s_losses, t_losses = [], []
            for b_idx, batch in enumerate(_batches(order, plan.batch_size)):
                if steps >= budget:
                    break
                ctx = f"stage {stage.stage_index} epoch {epoch} batch {b_idx}"
                s_losses.append(_step(spatial, spatial_state, ctx, "spatial",
                                      lambda: spatial_loss(spatial, [s_items[i] for i in batch],
                                                           plan.denominator, plan.negatives)))
                if use_temporal:
                    t_batch = [t_items[i] for i in batch if t_items[i] is not None]
                    if t_batch:
                        t_losses.append(_step(temporal, temporal_state, ctx, "temporal",
                                              lambda: reconstruction_loss(temporal, t_batch)))
                steps += 1
            entry = {
                "stage": stage.stage_index, "epoch": epoch, "steps": steps,
                "spatial_loss": float(np.mean(s_losses)) if s_losses else None,
                "temporal_loss": float(np.mean(t_losses)) if t_losses else None,
            }
            log.epochs.append(entry)
            logger.info("stage %d epoch %d: spatial %.6f temporal %s", stage.stage_index, epoch,
                        entry["spatial_loss"] or float("nan"), entry["temporal_loss"])
        log.total_steps += steps
        stage_entry = {"stage": stage.stage_index, "bound": stage.tubelet_bound,
                       "videos": len(members), "steps": steps}
        if eval_samples:
            report, _ = evaluate(eval_samples, NeuralSpatialGrounder(spatial, plan),
                                 NeuralTemporalGrounder(temporal, plan) if temporal is not None else None)
            stage_entry["metrics"] = report.as_dict()
            stage_entry["selection_accuracy"] = selection_accuracy(eval_samples, NeuralSpatialGrounder(spatial, plan))
        log.stages.append(stage_entry)
    return log


def _step(model, state, ctx, name, loss_fn) -> float:
    params = model.named_tensors()
    zero_grad(params)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite {name} loss at {ctx}")
    loss.backward()
    try:
        adam_step(params, state)
    except NumericalError as exc:
        raise NumericalError(f"{exc} at {ctx}") from exc
    return float(loss.detach())


# -- inference -----------------------------------------------------------------

class NeuralSpatialGrounder:
    """Selects a tubelet by mean word attention under a trained spatial model."""

    def __init__(self, model: SpatialModel, plan: Optional[TrainPlan] = None):
        self.model = model
        self.plan = plan or TrainPlan()

    def select(self, sample: GroundingSample) -> int:
        p = self.plan
        if p.use_crg and sample.decomposition is None:
            sample.decomposition = decompose(sample.query)
        item = featurize_spatial(sample, p.frames, p.max_tubelets, spatial_positions(sample, p.use_crg, "select"))
        return item.tubelet_ids[select_tubelet(item_attention(self.model, item))]


class NeuralTemporalGrounder:
    """Predicts ``[t_s, t_e)`` from the highlighter's clip salience."""

    def __init__(self, model: TemporalModel, plan: Optional[TrainPlan] = None):
        self.model = model
        self.plan = plan or TrainPlan()

    def salience(self, sample: GroundingSample) -> np.ndarray:
        p = self.plan
        if p.use_crg and sample.decomposition is None:
            sample.decomposition = decompose(sample.query)
        pos = temporal_positions(sample, p.use_crg)
        words = sample.query.embeddings if pos is None else sample.query.embeddings[pos]
        item = featurize_temporal(sample, self.model.vocab, pos, p.max_len)
        if item is None:
            from .temporal import TemporalItem
            n = words.shape[0]
            item = TemporalItem(sample.video.clip_features, words, np.zeros(n, int), np.zeros(n, bool),
                                np.zeros(n, bool))
        return item_salience(self.model, item)

    def bounds(self, sample: GroundingSample) -> Tuple[int, int]:
        return predict_bounds(self.salience(sample), sample.video.length, self.plan.clip_len, self.plan.tau)


def clip_to_tubelet(bounds: Tuple[int, int], tube) -> Tuple[int, int]:
    """Intersect predicted bounds with the tubelet span; fall back to the full span when disjoint."""
    s, e = max(bounds[0], tube.start), min(bounds[1], tube.end)
    if s >= e:
        return tube.start, tube.end
    return s, e


def predict_sample(sample: GroundingSample, spatial, temporal=None) -> Optional[Tuple[GroundingPrediction, object]]:
    """``(prediction, tubelet)`` for one sample, or None when the video has no tubelets.

    ``spatial`` needs ``select(sample) -> tubelet_id``; ``temporal`` needs
    ``bounds(sample) -> (t_s, t_e)``. Without a temporal grounder the
    tubelet's own span is used.
    """
    video = sample.video
    if not video.tubelets:
        logger.warning("video %s has no tubelets; scored as 0", video.video_id)
        return None
    tube = video.tubelet(spatial.select(sample))
    span = (tube.start, tube.end) if temporal is None else clip_to_tubelet(temporal.bounds(sample), tube)
    return GroundingPrediction(video.video_id, tube.tubelet_id, span[0], span[1]), tube


def evaluate(samples: Sequence[GroundingSample], spatial, temporal=None,
             thresholds=(0.3, 0.5)) -> Tuple[MetricsReport, List[dict]]:
    """Metrics over a split plus one record per video."""
    if not samples:
        raise ContractError("cannot evaluate an empty split")
    scores, records = [], []
    for s in samples:
        if s.gt is None:
            raise ContractError(f"sample {s.video_id} has no ground truth")
        out = predict_sample(s, spatial, temporal)
        if out is None:
            scores.append((0.0, 0.0))
            records.append({"video_id": s.video_id, "query_id": s.query_id, "tubelet_id": None,
                            "t_s": None, "t_e": None, "viou": 0.0, "tiou": 0.0})
            continue
        pred, tube = out
        from .metrics import temporal_iou

        v = video_iou(pred, tube, s.gt)
        t, _, _ = temporal_iou((pred.t_s, pred.t_e), (s.gt.t_s, s.gt.t_e))
        scores.append((v, t))
        records.append({"video_id": s.video_id, "query_id": s.query_id, "tubelet_id": pred.tubelet_id,
                        "t_s": pred.t_s, "t_e": pred.t_e, "viou": v, "tiou": t})
    return report_from_scores(scores, thresholds), records


def selection_accuracy(samples: Sequence[GroundingSample], spatial, targets: Optional[Dict[str, int]] = None) -> float:
    """Fraction of samples whose selected tubelet is the reference one.

    The reference defaults to the tubelet with the highest achievable vIoU.
    """
    from .metrics import upper_bound_selection

    if not samples:
        raise ContractError("cannot score an empty split")
    hits = 0
    for s in samples:
        if not s.video.tubelets:
            continue
        if targets is not None:
            ref = targets[s.video_id]
        else:
            _, tube, _ = upper_bound_selection(s.video, s.gt)
            ref = None if tube is None else tube.tubelet_id
        hits += int(spatial.select(s) == ref)
    return hits / len(samples)


class ConfidenceSelector:
    """Selects the tubelet with the highest mean detector confidence (first on ties)."""

    def select(self, sample: GroundingSample) -> int:
        tubes = sample.video.tubelets
        scores = [t.mean_confidence for t in tubes]
        return tubes[int(np.argmax(scores))].tubelet_id


def baseline(samples: Sequence[GroundingSample], thresholds=(0.3, 0.5)):
    """Mean-confidence tubelet with its full span as the temporal prediction."""
    return evaluate(samples, ConfidenceSelector(), None, thresholds)
