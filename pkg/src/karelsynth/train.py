"""Training loops: supervised pretraining and RL fine-tuning."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluation, objectives, search
from .datagen import Sample
from .model import SynthModel
from .nn import Adam
from .nn.tensor import Tensor

RL_OBJECTIVES = ("reinforce", "beam", "beam_div", "beam_div_opt")


class TrainLog:
    """JSONL training log, one line per optimizer step."""

    def __init__(self, path=None):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, **fields) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(fields, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


@dataclass
class MleOptions:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-4
    w_syntax: float = 1.0
    seed: int = 0
    eval_every: int = 0          # optimizer steps between validation decodes (0 = off)
    eval_beam: int = 16
    eval_limit: int = 100        # validation tasks per periodic decode
    patience: int = 5            # early stop after this many non-improving evals
    target_top1: float | None = None   # stop as soon as validation reaches this
    max_seconds: float | None = None
    max_len: int = search.DEFAULT_MAX_LEN


@dataclass
class MleResult:
    steps: int = 0
    epochs: int = 0
    best_val_top1: float | None = None
    stopped: str = "epochs"
    history: list = field(default_factory=list)


def train_mle(model: SynthModel, train_samples: list[Sample],
              val_samples: list[Sample] | None = None,
              options: MleOptions | None = None, log: TrainLog | None = None) -> MleResult:
    opt = options or MleOptions()
    log = log or TrainLog()
    adam = Adam(model.params, lr=opt.lr)
    order_rng = np.random.default_rng(np.random.SeedSequence((opt.seed, 0xB417)))
    result = MleResult()
    started = time.monotonic()
    best = -1.0
    stale = 0
    step = 0

    for epoch in range(opt.epochs):
        perm = order_rng.permutation(len(train_samples))
        for lo in range(0, len(perm), opt.batch_size):
            batch = [train_samples[i] for i in perm[lo:lo + opt.batch_size]]
            loss, aux = objectives.mle_losses(batch, model)
            total = loss if aux is None else loss + Tensor(
                np.asarray(opt.w_syntax, dtype=np.float64)) * aux
            adam.zero_grad()
            total.backward()
            adam.step()
            step += 1
            log.write(step=step, objective_name="mle", loss=loss.item(),
                      aux_loss=None if aux is None else aux.item(),
                      mean_reward=None, beam_size=None, C=None)

            if opt.eval_every and val_samples and step % opt.eval_every == 0:
                top1 = _val_top1(model, val_samples, opt)
                result.history.append({"step": step, "val_top1": top1})
                log.write(step=step, objective_name="val", loss=None,
                          mean_reward=top1, beam_size=opt.eval_beam, C=None)
                if top1 > best:
                    best, stale = top1, 0
                else:
                    stale += 1
                if opt.target_top1 is not None and top1 >= opt.target_top1:
                    result.stopped = "target"
                    _finish(result, step, epoch + 1, best)
                    return result
                if stale >= opt.patience:
                    result.stopped = "patience"
                    _finish(result, step, epoch + 1, best)
                    return result
            if opt.max_seconds is not None and time.monotonic() - started > opt.max_seconds:
                result.stopped = "time"
                _finish(result, step, epoch + 1, best)
                return result
        result.epochs = epoch + 1
    _finish(result, step, result.epochs, best)
    return result


def _finish(result: MleResult, step, epochs, best):
    result.steps = step
    result.epochs = epochs
    result.best_val_top1 = None if best < 0 else best


def _val_top1(model, val_samples, opt: MleOptions) -> float:
    subset = val_samples[:opt.eval_limit]
    report = evaluation.evaluate(model, subset, ks=(1,), beam_size=opt.eval_beam,
                                 max_len=opt.max_len)
    return report.generalization(1)


@dataclass
class RlOptions:
    objective: str = "beam"
    steps: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    beam_size: int = objectives.DEFAULT_BEAM
    rollouts: int = objectives.DEFAULT_ROLLOUTS
    bag_c: int = objectives.DEFAULT_BAG
    seed: int = 0
    max_len: int = search.DEFAULT_MAX_LEN
    max_seconds: float | None = None

    def __post_init__(self):
        if self.objective not in RL_OBJECTIVES:
            raise ValueError(f"unknown RL objective {self.objective!r}")


@dataclass
class RlResult:
    steps: int = 0
    mean_rewards: list = field(default_factory=list)
    stopped: str = "steps"


def _sample_loss(sample: Sample, model: SynthModel, opt: RlOptions,
                 rng: np.random.Generator):
    """Per-sample RL loss node (or None) plus the logged reward."""
    if opt.objective == "reinforce":
        return objectives.reinforce_loss(sample, model, opt.rollouts, rng, opt.max_len)
    try:
        if opt.objective == "beam":
            return objectives.beam_rl_loss(sample, model, opt.beam_size, opt.max_len)
        kind = "generalization" if opt.objective == "beam_div" else "generalization_with_speed"
        dist, rewards = objectives.rescored_beam(sample, model, opt.beam_size,
                                                 opt.max_len, kind)
        if opt.objective == "beam_div":
            loss = objectives.bag_loss_binary(dist, rewards, opt.bag_c)
        else:
            loss = objectives.bag_loss_general(dist, rewards, opt.bag_c)
        return loss, {"mean_reward": float((dist.q * rewards).sum())}
    except objectives.EmptyBeamError:
        return None, {"mean_reward": 0.0}


def train_rl(model: SynthModel, train_samples: list[Sample],
             options: RlOptions | None = None, log: TrainLog | None = None) -> RlResult:
    opt = options or RlOptions()
    log = log or TrainLog()
    adam = Adam(model.params, lr=opt.lr)
    rng = np.random.default_rng(np.random.SeedSequence((opt.seed, 0x51)))
    result = RlResult()
    started = time.monotonic()

    for step in range(1, opt.steps + 1):
        idx = rng.choice(len(train_samples), size=opt.batch_size,
                         replace=len(train_samples) < opt.batch_size)
        adam.zero_grad()
        rewards = []
        for i in idx:
            loss, stats = _sample_loss(train_samples[int(i)], model, opt, rng)
            rewards.append(stats["mean_reward"])
            if loss is not None:
                scaled = loss * Tensor(np.asarray(1.0 / opt.batch_size, dtype=np.float64))
                scaled.backward()
        adam.step()
        mean_reward = float(np.mean(rewards))
        result.mean_rewards.append(mean_reward)
        result.steps = step
        log.write(step=step, objective_name=opt.objective, loss=None,
                  mean_reward=mean_reward, beam_size=opt.beam_size,
                  C=opt.bag_c if "div" in opt.objective else None)
        if opt.max_seconds is not None and time.monotonic() - started > opt.max_seconds:
            result.stopped = "time"
            break
    return result
