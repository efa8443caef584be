"""Beam-search decoding, ancestral sampling, and end-to-end synthesis.

At each beam step all alphabet extensions of every live prefix are scored;
the most likely prefixes survive, and any prefix that structurally
completes a program (its top-level run block closes) retires from the
beam into the result set. Completion is tracked by the syntax checker
when a mask source is active, otherwise by a delimiter-balance tracker so
that unconstrained models remain decodable. The retired programs define a
renormalized distribution over the beam (their probabilities rescaled to
sum to one).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lang, vm
from .model import DecodeSession, SynthModel

DEFAULT_MAX_LEN = 45  # covers generator programs at default budgets, with margin


class NoCompleteProgramError(RuntimeError):
    pass


class NoCandidateError(RuntimeError):
    pass


@dataclass(frozen=True)
class BeamEntry:
    tokens: tuple
    logprob: float


@dataclass
class BeamDistribution:
    """Completed beam programs with renormalized probabilities."""

    entries: list          # BeamEntry, sorted by descending logprob
    size: int              # requested beam size S
    q: np.ndarray          # renormalized probabilities, aligned with entries
    q_tensor: object = None        # graph q (set by rescoring objectives)
    logprob_tensor: object = None  # graph per-entry logprobs

    def __post_init__(self):
        if len(self.q) != len(self.entries):
            raise ValueError("q and entries must align")


def renormalize(logprobs) -> np.ndarray:
    arr = np.asarray(logprobs, dtype=np.float64)
    shifted = np.exp(arr - arr.max())
    return shifted / shifted.sum()


# -- structural completion -----------------------------------------------------


@dataclass(frozen=True)
class BalanceState:
    stack: tuple = ()
    opened: bool = False
    dead: bool = False

    @property
    def complete(self) -> bool:
        return self.opened and not self.stack and not self.dead


class BalanceTracker:
    """Typed delimiter balance; weaker than parsing but enough to spot the
    moment a candidate's top-level block closes (or can never close)."""

    def initial(self) -> BalanceState:
        return BalanceState()

    def advance(self, state: BalanceState, token_id: int) -> BalanceState:
        if state.dead or state.complete:
            # Anything after completion can never re-complete.
            return BalanceState(state.stack, state.opened, True)
        closer = lang.OPENER_IDS.get(token_id)
        if closer is not None:
            return BalanceState(state.stack + (closer,), True, False)
        if token_id in lang.CLOSER_IDS:
            if state.stack and state.stack[-1] == token_id:
                return BalanceState(state.stack[:-1], state.opened, False)
            return BalanceState(state.stack, state.opened, True)
        return state

    def is_complete(self, state: BalanceState) -> bool:
        return state.complete


def _completion_tracker(session: DecodeSession):
    if session.mask_source is not None:
        return session.mask_source
    return BalanceTracker()


# -- beam search -----------------------------------------------------------------


def beam_search(model: SynthModel, io_pairs, beam_size: int,
                max_len: int = DEFAULT_MAX_LEN, mask_source="auto",
                session: DecodeSession | None = None) -> BeamDistribution:
    """Top-S completed programs under the model's next-token distribution.

    Ties in cumulative log-probability break toward the lexicographically
    smaller token sequence, making results deterministic.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 5:
        raise ValueError("max_len must cover the smallest program")
    if session is None:
        session = DecodeSession(model, io_pairs, mask_source=mask_source)
    tracker = _completion_tracker(session)

    state = session.initial_state(1)
    live = [((), 0.0, tracker.initial())]
    prev_ids = None
    completed: list[BeamEntry] = []
    vocab = model.cfg.alphabet_size

    for _ in range(max_len):
        logits, allowed, state = session.step(state, prev_ids)
        logprobs = _log_softmax_np(logits)
        ranked = []
        for i, (tokens, logp, tstate) in enumerate(live):
            row = logprobs[i]
            ok = allowed[i] if allowed is not None else None
            for tid in range(vocab):
                if ok is not None and not ok[tid]:
                    continue
                ranked.append((-(logp + row[tid]), tokens + (tid,), i, tid, tstate))
        ranked.sort(key=lambda item: (item[0], item[1]))

        # Keep the S most likely extensions; those that complete a program
        # retire from the beam, the rest stay live for the next step.
        next_live = []
        parent_idx = []
        for negscore, tokens, i, tid, tstate in ranked[:beam_size]:
            nstate = tracker.advance(tstate, tid)
            if tracker.is_complete(nstate):
                completed.append(BeamEntry(tokens, -negscore))
            else:
                next_live.append((tokens, -negscore, nstate))
                parent_idx.append(i)
        live = next_live
        if len(completed) >= beam_size or not live:
            break
        state = state.select(parent_idx)
        prev_ids = np.array([t[0][-1] for t in live], dtype=np.int64)

    if not completed:
        raise NoCompleteProgramError(
            f"no complete program within {max_len} tokens at beam size {beam_size}")
    completed.sort(key=lambda e: (-e.logprob, e.tokens))
    completed = completed[:beam_size]
    q = renormalize([e.logprob for e in completed])
    return BeamDistribution(completed, beam_size, q)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits.astype(np.float64) - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# -- sampling ---------------------------------------------------------------------


@dataclass(frozen=True)
class SampledProgram:
    tokens: tuple
    complete: bool


def sample_program(model: SynthModel, io_pairs, rng: np.random.Generator,
                   max_len: int = DEFAULT_MAX_LEN, mask_source="auto",
                   session: DecodeSession | None = None) -> SampledProgram:
    """Ancestral sampling of one token sequence (Incomplete if the cap hits)."""
    results = sample_programs(model, io_pairs, rng, n=1, max_len=max_len,
                              mask_source=mask_source, session=session)
    return results[0]


def sample_programs(model: SynthModel, io_pairs, rng: np.random.Generator, n: int,
                    max_len: int = DEFAULT_MAX_LEN, mask_source="auto",
                    session: DecodeSession | None = None) -> list[SampledProgram]:
    """Sample n sequences in parallel streams from one task's distribution."""
    if session is None:
        session = DecodeSession(model, io_pairs, mask_source=mask_source)
    tracker = _completion_tracker(session)
    state = session.initial_state(n)
    prev_ids = None
    tokens = [[] for _ in range(n)]
    tstates = [tracker.initial() for _ in range(n)]
    alive = list(range(n))   # positions into the original n, aligned with state rows
    results: list[SampledProgram | None] = [None] * n
    vocab = model.cfg.alphabet_size

    for _ in range(max_len):
        logits, allowed, state = session.step(state, prev_ids)
        probs = _softmax_np(logits)
        if allowed is not None:
            probs = probs * allowed
            probs /= probs.sum(axis=-1, keepdims=True)
        draws = np.empty(len(alive), dtype=np.int64)
        for row in range(len(alive)):
            draws[row] = rng.choice(vocab, p=probs[row])
        keep_rows = []
        for row, stream in enumerate(alive):
            tid = int(draws[row])
            tokens[stream].append(tid)
            tstates[stream] = tracker.advance(tstates[stream], tid)
            if tracker.is_complete(tstates[stream]):
                results[stream] = SampledProgram(tuple(tokens[stream]), True)
            else:
                keep_rows.append(row)
        alive = [alive[r] for r in keep_rows]
        if not alive:
            break
        state = state.select(keep_rows)
        prev_ids = np.array([tokens[s][-1] for s in alive], dtype=np.int64)

    for stream in range(n):
        if results[stream] is None:
            results[stream] = SampledProgram(tuple(tokens[stream]), False)
    return results


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits.astype(np.float64) - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


# -- synthesis -------------------------------------------------------------------


@dataclass
class SynthCandidate:
    tokens: tuple
    logprob: float
    q: float
    spec_consistent: bool
    generalizes: bool | None

    def to_json(self) -> dict:
        return {
            "tokens": lang.names(self.tokens),
            "logprob": self.logprob,
            "q": self.q,
            "spec_consistent": self.spec_consistent,
            "generalizes": self.generalizes,
        }


def _consistent(tokens, pairs, max_steps: int) -> bool:
    try:
        prog = lang.parse(tokens)
    except (lang.ParseError, lang.IncompleteProgramError):
        return False
    for gin, gout in pairs:
        res = vm.run_program(prog, gin, max_steps)
        if res.outcome is not vm.Outcome.OK or res.grid != gout:
            return False
    return True


def synthesize(model: SynthModel, spec_pairs, beam_size: int,
               max_len: int = DEFAULT_MAX_LEN, prune: bool = False,
               held_out=None, max_steps: int = vm.DEFAULT_MAX_STEPS) -> list[SynthCandidate]:
    """Ranked candidate programs for a specification of IO pairs.

    Non-parsing beam output is always dropped. With prune on, candidates
    that crash, time out, or mismatch any specification pair are dropped
    too (off by default so rankings stay comparable across modes).
    """
    beam = beam_search(model, spec_pairs, beam_size, max_len)
    out = []
    for entry, q in zip(beam.entries, beam.q):
        if not lang.parses(entry.tokens):
            continue
        consistent = _consistent(entry.tokens, spec_pairs, max_steps)
        if prune and not consistent:
            continue
        generalizes = None
        if held_out is not None:
            generalizes = consistent and _consistent(entry.tokens, [held_out], max_steps)
        out.append(SynthCandidate(entry.tokens, entry.logprob, float(q),
                                  consistent, generalizes))
    if not out:
        raise NoCandidateError("no syntactically valid candidate survived")
    return out
