"""Training losses and rewards.

Supervised: negative log-likelihood of reference programs, optionally
with an auxiliary term that pushes the learned syntax model's penalties
on known-valid tokens toward zero. Reinforcement: REINFORCE over sampled
rollouts, and beam-based surrogates where the expected reward is computed
exactly over the renormalized beam distribution, including the closed
form for the best-of-C bag objective (the probability of drawing C
programs and keeping the best reward, via CDF powers).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lang, search, vm
from .datagen import Sample
from .model import ModeError, SynthModel
from .nn import ops
from .nn.tensor import Tensor

REWARD_KINDS = ("generalization", "generalization_with_speed")
DEFAULT_ROLLOUTS = 100
DEFAULT_BEAM = 64
DEFAULT_BAG = 5
DEFAULT_SPEED_BONUS = 0.1


class EmptyBeamError(RuntimeError):
    pass


@dataclass(frozen=True)
class Reward:
    value: float
    kind: str

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.value < 0:
            raise ValueError("rewards are non-negative")


def reward(token_ids, sample: Sample, kind: str = "generalization",
           speed_bonus: float = DEFAULT_SPEED_BONUS,
           max_steps: int = vm.DEFAULT_MAX_STEPS) -> Reward:
    """1 iff the program reproduces all six pairs exactly, else 0.

    The speed variant adds speed_bonus / max(1, total action steps) on top
    of a correct program, so faster correct programs score strictly higher.
    """
    try:
        prog = lang.parse(list(token_ids))
    except (lang.ParseError, lang.IncompleteProgramError):
        return Reward(0.0, kind)
    total_steps = 0
    for gin, gout in sample.examples:
        res = vm.run_program(prog, gin, max_steps)
        if res.outcome is not vm.Outcome.OK or res.grid != gout:
            return Reward(0.0, kind)
        total_steps += res.steps
    if kind == "generalization":
        return Reward(1.0, kind)
    return Reward(1.0 + speed_bonus / max(1, total_steps), kind)


# -- supervised -----------------------------------------------------------------


def _batch_arrays(batch: list[Sample], model: SynthModel):
    k = len(batch[0].spec_pairs)
    ins = np.stack([np.stack([g.to_tensor() for g, _ in s.spec_pairs]) for s in batch])
    outs = np.stack([np.stack([g.to_tensor() for _, g in s.spec_pairs]) for s in batch])
    length = max(len(s.program) for s in batch)
    tokens = np.zeros((len(batch), length), dtype=np.int64)
    valid = np.zeros((len(batch), length), dtype=np.float64)
    for i, s in enumerate(batch):
        tokens[i, :len(s.program)] = s.program
        valid[i, :len(s.program)] = 1.0
    return ins, outs, tokens, valid


def mle_loss(batch: list[Sample], model: SynthModel) -> Tensor:
    """Mean negative log-likelihood of the reference programs."""
    loss, _ = mle_losses(batch, model)
    return loss


def mle_losses(batch: list[Sample], model: SynthModel):
    """(mle loss, syntax aux loss or None) in one pass over the batch."""
    ins, outs, tokens, valid = _batch_arrays(batch, model)
    io_embed = model.encode_pairs(ins, outs)
    if model.cfg.syntax_mode == "learned":
        logps, syn_scores = model.teacher_logprobs(tokens, valid, io_embed,
                                                   return_syntax_scores=True)
        aux = ops.mul(ops.sum_all(syn_scores), -1.0 / len(batch))
    else:
        logps = model.teacher_logprobs(tokens, valid, io_embed)
        aux = None
    loss = ops.mul(ops.sum_all(logps), -1.0 / len(batch))
    return loss, aux


def syntax_aux_loss(batch: list[Sample], model: SynthModel) -> Tensor:
    """Positive penalty mass the syntax model assigns to reference tokens."""
    if model.cfg.syntax_mode != "learned":
        raise ModeError("syntax_aux_loss requires syntax_mode='learned'")
    length = max(len(s.program) for s in batch)
    tokens = np.zeros((len(batch), length), dtype=np.int64)
    valid = np.zeros((len(batch), length), dtype=np.float64)
    for i, s in enumerate(batch):
        tokens[i, :len(s.program)] = s.program
        valid[i, :len(s.program)] = 1.0
    rows = model.syntax_penalties_batch(tokens)
    total = Tensor(np.zeros(len(batch), dtype=model.dtype))
    for t, pen in enumerate(rows):
        picked = ops.gather_last(pen, tokens[:, t])
        total = ops.add(total, ops.mul(picked, Tensor(valid[:, t].astype(model.dtype))))
    return ops.mul(ops.sum_all(total), -1.0 / len(batch))


# -- REINFORCE ---------------------------------------------------------------------


def sample_rollouts(sample: Sample, model: SynthModel, rollouts: int,
                    rng: np.random.Generator, max_len: int = search.DEFAULT_MAX_LEN):
    return search.sample_programs(model, sample.spec_pairs, rng, rollouts,
                                  max_len=max_len)


def reinforce_loss(sample: Sample, model: SynthModel,
                   rollouts: int = DEFAULT_ROLLOUTS,
                   rng: np.random.Generator | None = None,
                   max_len: int = search.DEFAULT_MAX_LEN,
                   reward_kind: str = "generalization"):
    """(loss or None, stats): minus the sampled expected-reward surrogate.

    Incomplete rollouts earn zero reward, and zero-reward rollouts carry
    no gradient, so only distinct rewarded programs are rescored (with
    multiplicity weights), which leaves the estimator unchanged.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    draws = sample_rollouts(sample, model, rollouts, rng, max_len)
    rewards = np.zeros(rollouts)
    weights: dict[tuple, float] = {}
    for i, drawn in enumerate(draws):
        if not drawn.complete:
            continue
        r = reward(drawn.tokens, sample, reward_kind).value
        rewards[i] = r
        if r > 0:
            weights[drawn.tokens] = weights.get(drawn.tokens, 0.0) + r / rollouts
    stats = {"mean_reward": float(rewards.mean()),
             "complete_fraction": sum(d.complete for d in draws) / rollouts}
    if not weights:
        return None, stats
    seqs = sorted(weights)
    logps = model.rescore_logprobs(seqs, sample.spec_pairs)
    w = Tensor(np.array([weights[s] for s in seqs], dtype=np.float64))
    loss = ops.neg(ops.sum_all(ops.mul(logps, w)))
    return loss, stats


def reinforce_grad(sample: Sample, model: SynthModel,
                   rollouts: int = DEFAULT_ROLLOUTS,
                   rng: np.random.Generator | None = None,
                   max_len: int = search.DEFAULT_MAX_LEN,
                   reward_kind: str = "generalization"):
    """Sampled REINFORCE estimator of the expected-reward ascent gradient."""
    loss, stats = reinforce_loss(sample, model, rollouts, rng, max_len, reward_kind)
    grads = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    if loss is not None:
        for p in model.params.values():
            p.grad = None
        loss.backward()
        for name, p in model.params.items():
            if p.grad is not None:
                grads[name] = -p.grad  # ascent direction
            p.grad = None
    return grads, stats


def reinforce_grad_exhaustive(model: SynthModel, io_pairs, programs, rewards,
                              mask_source=None):
    """REINFORCE estimator summed over an explicit program space.

    Each program is weighted by its model probability (detached), so with
    a constant reward over an exhaustive space the estimate is exactly the
    gradient of the total probability mass.
    """
    logps = model.rescore_logprobs([tuple(p) for p in programs], io_pairs,
                                   mask_source=mask_source)
    probs = np.exp(logps.data.astype(np.float64))
    w = Tensor(probs * np.asarray(rewards, dtype=np.float64))
    surrogate = ops.sum_all(ops.mul(logps, w))
    for p in model.params.values():
        p.grad = None
    surrogate.backward()
    grads = {}
    for name, p in model.params.items():
        grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        p.grad = None
    return grads


# -- beam objectives -----------------------------------------------------------------


def rescored_beam(sample: Sample, model: SynthModel, beam_size: int = DEFAULT_BEAM,
                  max_len: int = search.DEFAULT_MAX_LEN,
                  reward_kind: str = "generalization"):
    """Beam search plus differentiable rescoring: (distribution, rewards)."""
    try:
        dist = search.beam_search(model, sample.spec_pairs, beam_size, max_len)
    except search.NoCompleteProgramError as err:
        raise EmptyBeamError(str(err)) from err
    seqs = [e.tokens for e in dist.entries]
    logps = model.rescore_logprobs(seqs, sample.spec_pairs)
    dist.logprob_tensor = logps
    dist.q_tensor = ops.softmax(logps)
    rewards = np.array([reward(s, sample, reward_kind).value for s in seqs])
    return dist, rewards


def expected_beam_reward(dist: search.BeamDistribution, rewards) -> Tensor:
    q = dist.q_tensor if dist.q_tensor is not None else Tensor(np.asarray(dist.q))
    return ops.dot(q, Tensor(np.asarray(rewards, dtype=np.float64)))


def beam_rl_loss(sample: Sample, model: SynthModel, beam_size: int = DEFAULT_BEAM,
                 max_len: int = search.DEFAULT_MAX_LEN,
                 reward_kind: str = "generalization"):
    """(loss, stats): minus the expected reward over the renormalized beam."""
    dist, rewards = rescored_beam(sample, model, beam_size, max_len, reward_kind)
    loss = ops.neg(expected_beam_reward(dist, rewards))
    stats = {"mean_reward": float((dist.q * rewards).sum()), "beam": len(dist.entries)}
    return loss, stats


def bag_loss_binary(dist: search.BeamDistribution, rewards, c: int = DEFAULT_BAG) -> Tensor:
    """Minus P(at least one of C independent draws from q is rewarded).

    Closed form 1 - q_incorrect^C for {0,1} rewards.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if not set(np.unique(rewards)) <= {0.0, 1.0}:
        raise ValueError("bag_loss_binary needs rewards in {0, 1}")
    q = dist.q_tensor if dist.q_tensor is not None else Tensor(np.asarray(dist.q))
    q_incorrect = ops.dot(q, Tensor((rewards == 0.0).astype(np.float64)))
    objective = ops.sub(Tensor(np.asarray(1.0, dtype=np.float64)),
                        ops.pow_int(q_incorrect, c))
    return ops.neg(objective)


def bag_loss_general(dist: search.BeamDistribution, rewards, c: int = DEFAULT_BAG) -> Tensor:
    """Minus the expected best reward among C independent draws from q.

    P(best = r_i) = F(r_i)^C - F(r_{i-1})^C for the ascending distinct
    rewards r_i with CDF F under q; the expectation telescopes into a dot
    product with the CDF powers, which stays differentiable through q.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    q = dist.q_tensor if dist.q_tensor is not None else Tensor(np.asarray(dist.q))
    levels = np.unique(rewards)  # ascending distinct values
    indic = (rewards[None, :] <= levels[:, None]).astype(np.float64)
    cdf = ops.reshape(ops.matmul(Tensor(indic), ops.reshape(q, (len(rewards), 1))),
                      (len(levels),))
    powers = ops.pow_int(cdf, c)
    w = np.empty_like(levels)
    w[:-1] = levels[:-1] - levels[1:]
    w[-1] = levels[-1]
    objective = ops.dot(Tensor(w), powers)
    return ops.neg(objective)
