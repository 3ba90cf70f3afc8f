"""Multi-task objective and the plateau-decay SGD loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from peter import autodiff as ad
from peter.autodiff import Tensor
from peter.corpus import Batch, EncodedSample, batch_iter
from peter.model import ForwardOutput, ModelParams, PeterConfig, forward_batch, save_checkpoint

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
ABLATIONS = ("disable_Lc", "disable_Lr", "left_to_right")


class NumericError(RuntimeError):
    pass


def _nll(picked: Tensor, weights: np.ndarray) -> Tensor:
    return ad.scale(ad.sum_all(ad.mul(ad.log(picked, floor=PROB_FLOOR), Tensor(weights))), -1.0)


def _per_sample_weights(mask: np.ndarray) -> np.ndarray:
    # mean over each sample's active positions, then mean over the batch
    counts = mask.sum(axis=1, keepdims=True)
    return np.where(mask, 1.0 / np.maximum(counts, 1), 0.0) / mask.shape[0]


def explanation_loss(out: ForwardOutput, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean NLL of each target word under the distribution one step before it."""
    b, t = targets.shape
    rows = np.broadcast_to(np.arange(b)[:, None], (b, t))
    cols = np.broadcast_to(np.arange(t)[None, :], (b, t))
    picked = ad.take(out.word_probs, (rows, cols, targets))
    return _nll(picked, _per_sample_weights(loss_mask))


def context_loss(out: ForwardOutput, targets: np.ndarray, word_mask: np.ndarray) -> Tensor:
    """Bag-of-words NLL of the explanation words under position 2's distribution."""
    b, t = targets.shape
    rows = np.broadcast_to(np.arange(b)[:, None], (b, t))
    picked = ad.take(out.context_probs, (rows, targets))
    return _nll(picked, _per_sample_weights(word_mask))


def rating_loss(pred: Tensor, ratings) -> Tensor:
    diff = ad.sub(pred, Tensor(np.asarray(ratings, dtype=np.float64)))
    return ad.mean_all(ad.mul(diff, diff))


@dataclass
class LossBreakdown:
    L_e: float
    L_c: float
    L_r: float
    J: float


def objective(out: ForwardOutput, batch: Batch, config: PeterConfig) -> tuple[Tensor, LossBreakdown]:
    le = explanation_loss(out, batch.targets, batch.loss_mask)
    lc = context_loss(out, batch.targets, batch.context_mask)
    lr = rating_loss(out.rating, batch.ratings)
    j = ad.add(ad.add(ad.scale(le, config.lambda_e), ad.scale(lc, config.lambda_c)), ad.scale(lr, config.lambda_r))
    return j, LossBreakdown(le.item(), lc.item(), lr.item(), j.item())


def ablate(config: PeterConfig, mode: str) -> PeterConfig:
    if mode == "disable_Lc":
        return dataclasses.replace(config, lambda_c=0.0)
    if mode == "disable_Lr":
        return dataclasses.replace(config, lambda_r=0.0)
    if mode == "left_to_right":
        return dataclasses.replace(config, mask_mode="left_to_right")
    raise ValueError(f"unknown ablation {mode!r}; expected one of {ABLATIONS}")


# ---------------------------------------------------------------- schedule


@dataclass
class TrainSchedule:
    lr: float = 1.0
    clip: float = 1.0
    batch_size: int = 128
    decay: float = 0.25
    max_decays: int = 5
    max_epochs: int = 100
    monitor: str = "J"  # or "L_e"
    seed: int = 0


@dataclass
class PlateauDecay:
    """Decay the learning rate whenever validation loss fails to improve."""

    initial_lr: float
    factor: float = 0.25
    max_decays: int = 5
    lr: float = field(init=False)
    best: float = field(init=False, default=math.inf)
    decays: int = field(init=False, default=0)

    def __post_init__(self):
        self.lr = self.initial_lr

    @property
    def done(self) -> bool:
        return self.decays >= self.max_decays

    def step(self, valid_loss: float) -> bool:
        """Returns True when ``valid_loss`` is a new best."""
        if valid_loss < self.best:
            self.best = valid_loss
            return True
        self.decays += 1
        self.lr = self.initial_lr * self.factor**self.decays
        return False


@dataclass
class TrainState:
    epoch: int
    lr: float
    best_valid: float
    decay_count: int
    seed: int
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    steps: list[LossBreakdown] = field(default_factory=list)


def evaluate_loss(
    params: ModelParams, samples: Sequence[EncodedSample], pad_id: int, batch_size: int = 256
) -> LossBreakdown:
    """Sample-weighted average of each loss term over ``samples``."""
    tot = np.zeros(4)
    n = 0
    with ad.no_grad():
        for batch in batch_iter(samples, batch_size, shuffle=False):
            _, parts = objective(forward_batch(params, batch, pad_id), batch, params.config)
            tot += len(batch) * np.array([parts.L_e, parts.L_c, parts.L_r, parts.J])
            n += len(batch)
    return LossBreakdown(*(tot / max(n, 1)).tolist())


def train(
    params: ModelParams,
    train_samples: Sequence[EncodedSample],
    valid_samples: Sequence[EncodedSample],
    pad_id: int,
    schedule: TrainSchedule = TrainSchedule(),
    checkpoint_path=None,
    log_path=None,
    validate: Callable[[ModelParams], LossBreakdown] | None = None,
) -> TrainState:
    """SGD with global-norm clipping and plateau decay.

    The best-on-validation parameters are restored before returning. With
    ``checkpoint_path`` set they are also written to disk at each improvement.
    """
    cfg = params.config
    validate = validate or (lambda p: evaluate_loss(p, valid_samples, pad_id))
    sched = PlateauDecay(schedule.lr, schedule.decay, schedule.max_decays)
    state = TrainState(0, sched.lr, math.inf, 0, schedule.seed, params)
    best_state = params.state()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(schedule.max_epochs):
            lr = sched.lr
            sums = np.zeros(4)
            n = 0
            for batch in batch_iter(train_samples, schedule.batch_size, schedule.seed, epoch):
                out = forward_batch(params, batch, pad_id)
                j, parts = objective(out, batch, cfg)
                if not all(math.isfinite(v) for v in dataclasses.astuple(parts)):
                    raise NumericError(
                        f"non-finite loss {parts} at epoch {epoch}, lr {lr}, batch users {batch.users[:8].tolist()}"
                    )
                ad.backward(j)
                ad.sgd_step_with_clip(params.parameters(), lr, schedule.clip)
                state.steps.append(parts)
                sums += len(batch) * np.array(dataclasses.astuple(parts))
                n += len(batch)
            train_avg = sums / max(n, 1)
            valid = validate(params)
            monitored = valid.J if schedule.monitor == "J" else valid.L_e
            if not math.isfinite(monitored):
                raise NumericError(f"non-finite validation loss at epoch {epoch}, lr {lr}")
            improved = sched.step(monitored)
            if improved:
                best_state = params.state()
                if checkpoint_path:
                    save_checkpoint(params, checkpoint_path, {"epoch": epoch, "valid": monitored})
            entry = {
                "epoch": epoch,
                "lr": lr,
                "train_L_e": train_avg[0],
                "train_L_c": train_avg[1],
                "train_L_r": train_avg[2],
                "train_J": train_avg[3],
                "valid_J": valid.J,
                "decayed": not improved,
            }
            state.history.append(entry)
            log.info("epoch %d lr %.4g train J %.4f valid J %.4f%s", epoch, lr, train_avg[3], valid.J,
                     "" if improved else " (decay)")
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            state.epoch = epoch + 1
            if sched.done:
                break
    finally:
        if log_fh:
            log_fh.close()
    params.load_state(best_state)
    state.lr, state.best_valid, state.decay_count = sched.lr, sched.best, sched.decays
    return state
