"""Label assignment (EMTA / WTA), losses and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .decoder import ModelConfig, ModeSeqModel, ModeSequence, RefinementStack
from .encoder import SceneBatch, collate
from .matching import MatchCriterion, match_modes, step_thresholds
from .numerics import NumericalError, OptimizerState, adamw_step, backward, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)

POSITIVE, NEGATIVE, IGNORED = 1, 0, -1
FOCAL_GAMMA = 2.0


class DivergenceError(NumericalError):
    def __init__(self, batch_id: str, what: str = "loss"):
        super().__init__(f"{what} became non-finite at {batch_id}")
        self.batch_id = batch_id


@dataclass
class LabelAssignment:
    match_set: list[int]
    positive: int
    labels: list[int]


def label_modes(matched, ade, strategy: str = "emta", ignore_variant: str = "none") -> LabelAssignment:
    """Pick the positive mode from per-mode match flags and average errors."""
    matched = np.asarray(matched, dtype=bool)
    ade = np.asarray(ade, dtype=float)
    g = [int(k) for k in np.flatnonzero(matched)]
    if strategy == "emta" and g:
        pos = g[0]
    elif strategy in ("emta", "wta"):
        pos = int(np.argmin(ade))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    labels = [NEGATIVE] * len(matched)
    if ignore_variant == "other_matches":
        for k in g:
            labels[k] = IGNORED
    elif ignore_variant == "early_mismatches":
        for k in range(pos):
            labels[k] = IGNORED
    elif ignore_variant != "none":
        raise ValueError(f"unknown ignore variant {ignore_variant!r}")
    labels[pos] = POSITIVE
    return LabelAssignment(g, pos, labels)


def assign_labels(trajectories, y, criterion: MatchCriterion, strategy="emta", ignore_variant="none") -> LabelAssignment:
    """Label K predicted trajectories [K, T, 2] against the ground truth [T, 2]."""
    trajectories = np.asarray(trajectories, dtype=float)
    y = np.asarray(y, dtype=float)
    ade = np.linalg.norm(trajectories - y, axis=-1).mean(-1)
    return label_modes(match_modes(trajectories, y, criterion), ade, strategy, ignore_variant)


def threshold_tensors(speeds: torch.Tensor, horizon: int, family: str, step_duration: float):
    lat, lon = [], []
    for v in speeds.tolist():
        a, b = step_thresholds(MatchCriterion(family, v, 0.0, step_duration), horizon)
        lat.append(a)
        lon.append(b)
    dtype = speeds.dtype
    return torch.as_tensor(np.stack(lat), dtype=dtype), torch.as_tensor(np.stack(lon), dtype=dtype)


def batch_matches(loc, future, lat_thr, lon_thr, family: str) -> torch.Tensor:
    """[B, K] match flags in the focal frame (x is longitudinal, y lateral)."""
    d = loc.detach() - future.unsqueeze(1)
    if family == "linear":
        return (d.norm(dim=-1) <= lat_thr.unsqueeze(1)).all(-1)
    ok = (d[..., 1].abs() <= lat_thr.unsqueeze(1)) & (d[..., 0].abs() <= lon_thr.unsqueeze(1))
    return ok.all(-1)


def batch_labels(matched: torch.Tensor, ade: torch.Tensor, strategy: str, ignore_variant: str):
    """Batched ``label_modes``: returns (positive [B], labels [B, K])."""
    b, k = matched.shape
    idx = torch.arange(k).expand(b, k)
    first_match = torch.where(matched, idx, torch.full_like(idx, k)).min(-1).values
    best = ade.argmin(-1)
    if strategy == "emta":
        pos = torch.where(first_match < k, first_match, best)
    else:
        pos = best
    labels = torch.full((b, k), NEGATIVE, dtype=torch.long)
    if ignore_variant == "other_matches":
        labels[matched] = IGNORED
    elif ignore_variant == "early_mismatches":
        labels[idx < pos.unsqueeze(1)] = IGNORED
    labels[torch.arange(b), pos] = POSITIVE
    return pos, labels


def laplace_nll(loc, scale, y, sign=None):
    """Mean over steps and coordinates of |y - loc| / b + log(2b).

    ``sign`` replays the sign of ``y - loc`` from an earlier pass.
    """
    if (scale <= 0).any():
        raise ValueError("Laplace scales must be positive")
    residual = y - loc
    err = residual.abs() if sign is None else residual * sign
    return (err / scale + torch.log(2 * scale)).mean(dim=(-1, -2))


def regression_loss(loc, scale, y, sign=None):
    return laplace_nll(loc, scale, y, sign).mean()


def focal_terms(logits, labels, gamma: float = FOCAL_GAMMA):
    """Per-mode binary focal loss; zero where ignored."""
    log_p = F.logsigmoid(logits)
    log_q = F.logsigmoid(-logits)
    p = log_p.exp()
    pos = -((1 - p) ** gamma) * log_p
    neg = -(p ** gamma) * log_q
    terms = torch.where(labels == POSITIVE, pos, neg)
    return torch.where(labels == IGNORED, torch.zeros_like(terms), terms)


def confidence_loss(logits, labels, gamma: float = FOCAL_GAMMA):
    """Focal loss averaged over non-ignored modes of each sample, then over samples."""
    terms = focal_terms(logits, labels, gamma)
    counts = (labels != IGNORED).sum(-1).clamp_min(1).to(terms.dtype)
    return (terms.sum(-1) / counts).mean()


@dataclass
class LayerLoss:
    regression: torch.Tensor
    confidence: torch.Tensor
    positive: torch.Tensor
    labels: torch.Tensor
    matched: torch.Tensor
    sign: torch.Tensor  # sign of the positive mode's residual

    @property
    def assignment(self):
        return self.matched, self.positive, self.labels, self.sign


@dataclass
class LossBreakdown:
    total: torch.Tensor
    regression: torch.Tensor
    confidence: torch.Tensor
    layers: list[LayerLoss] = field(default_factory=list)


def layer_loss(seq: ModeSequence, future, lat_thr, lon_thr, cfg: TrainConfig, assignment=None) -> LayerLoss:
    """Regression + confidence loss of one layer.

    ``assignment`` (a previous ``LayerLoss.assignment``) replays the labels
    and residual signs of an earlier pass instead of recomputing them.
    """
    rows = torch.arange(seq.loc.shape[0])
    with torch.no_grad():
        if assignment is None:
            ade = (seq.loc - future.unsqueeze(1)).norm(dim=-1).mean(-1)
            matched = batch_matches(seq.loc, future, lat_thr, lon_thr, cfg.match_family)
            pos, labels = batch_labels(matched, ade, cfg.strategy, cfg.ignore_variant)
            sign = torch.sign(future - seq.loc[rows, pos])
            replay = None
        else:
            matched, pos, labels, sign = assignment
            replay = sign
    reg = regression_loss(seq.loc[rows, pos], seq.scale[rows, pos], future, replay)
    conf = confidence_loss(seq.conf_logits, labels)
    return LayerLoss(reg, conf, pos, labels, matched, sign)


def compute_loss(stack: RefinementStack, batch: SceneBatch, cfg: TrainConfig, assignments=None) -> LossBreakdown:
    """Sum over layers of regression + confidence loss; labels are per layer."""
    future = batch.future
    lat_thr, lon_thr = threshold_tensors(batch.speeds, future.shape[1], cfg.match_family, cfg.step_duration)
    if assignments is None:
        assignments = [None] * len(stack.layers)
    parts = [layer_loss(seq, future, lat_thr, lon_thr, cfg, a) for seq, a in zip(stack.layers, assignments)]
    reg = sum(p.regression for p in parts)
    conf = sum(p.confidence for p in parts)
    return LossBreakdown(reg + conf, reg, conf, parts)


def model_config(cfg: TrainConfig, future_steps: int) -> ModelConfig:
    return ModelConfig(
        hidden=cfg.D,
        heads=cfg.heads,
        layers=cfg.L,
        future_steps=future_steps,
        dropout=cfg.dropout,
        step_duration=cfg.step_duration,
    )


def no_decay_names(model) -> frozenset[str]:
    # biases, norm gains and the shared initial mode embedding
    return frozenset(n for n, p in model.named_parameters() if p.dim() < 2)


@dataclass
class TrainState:
    model: ModeSeqModel
    optimizer: OptimizerState
    config: TrainConfig
    epoch: int = 0  # completed epochs
    history: list[dict] = field(default_factory=list)
    rng_state: torch.Tensor | None = None


def init_state(cfg: TrainConfig, future_steps: int) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = ModeSeqModel(model_config(cfg, future_steps))
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    return TrainState(model, opt, cfg)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train(
    scenarios,
    cfg: TrainConfig,
    eval_scenarios=None,
    state: TrainState | None = None,
    stop_after: int | None = None,
    eval_every: int = 1,
    on_epoch=None,
) -> TrainState:
    """Train (or resume) a model; one log row per epoch.

    ``stop_after`` ends the call after that many epochs in total, which is how
    an interrupted run is simulated; resuming continues the same schedule.
    """
    from .inference import evaluate  # avoids an import cycle

    if not scenarios:
        raise ValueError("training needs a non-empty dataset")
    data = collate(scenarios)
    if data.future is None:
        raise ValueError("all training scenarios need a future of the same length")
    if state is None:
        state = init_state(cfg, data.future.shape[1])
    elif state.rng_state is not None:
        torch.set_rng_state(state.rng_state)
    model = state.model
    params = dict(model.named_parameters())
    skip_decay = no_decay_names(model)
    per_epoch = steps_per_epoch(len(scenarios), cfg.batch_size)
    total_steps = per_epoch * cfg.epochs
    last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    for epoch in range(state.epoch, last_epoch):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(scenarios))
        sums = np.zeros(3)
        for j in range(per_epoch):
            idx = order[j * cfg.batch_size : (j + 1) * cfg.batch_size]
            batch = data.select(idx)
            batch_id = f"epoch {epoch} batch {j}"
            try:
                stack = model(batch, cfg.K, rearrange_modes=cfg.rearrange)
                loss = compute_loss(stack, batch, cfg)
            except NumericalError:
                raise DivergenceError(batch_id, "forward pass") from None
            if not torch.isfinite(loss.total):
                raise DivergenceError(batch_id)
            grads = backward(loss.total, params)
            clip_grad_norm(grads, cfg.grad_clip)
            lr = cosine_lr(epoch * per_epoch + j, total_steps, cfg.lr)
            try:
                adamw_step(state.optimizer, params, grads, lr=lr, no_decay=skip_decay)
            except NumericalError:
                raise DivergenceError(batch_id, "gradient") from None
            if not all(torch.isfinite(p).all() for p in params.values()):
                raise DivergenceError(batch_id, "parameters")
            sums += [loss.total.item(), loss.regression.item(), loss.confidence.item()]
        row = {
            "epoch": epoch + 1,
            "train_loss": sums[0] / per_epoch,
            "reg_loss": sums[1] / per_epoch,
            "conf_loss": sums[2] / per_epoch,
        }
        if eval_scenarios and ((epoch + 1) % eval_every == 0 or epoch + 1 == cfg.epochs):
            _, report = evaluate(model, eval_scenarios, cfg.K, rearrange=cfg.rearrange,
                                 family=cfg.match_family, step_duration=cfg.step_duration)
            row.update(report.as_dict())
        state.history.append(row)
        state.epoch = epoch + 1
        state.rng_state = torch.get_rng_state()
        log.info("epoch %d loss %.4f", epoch + 1, row["train_loss"])
        if on_epoch is not None:
            on_epoch(state)
    return state
