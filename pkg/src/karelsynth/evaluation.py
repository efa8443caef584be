"""Evaluation metrics: top-k generalization, exact match, syntactic rate.

Each task is decoded once per setting; the per-task candidate lists are
cached so every top-k metric is pure post-processing over the same beam.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import lang, search, vm
from .datagen import Sample
from .model import DecodeSession, SynthModel


@dataclass
class TaskResult:
    task_id: int
    candidates: list            # BeamEntry, descending logprob
    generalizes: list           # bool per candidate (parses + all 6 pairs)
    spec_consistent: list       # bool per candidate (parses + 5 spec pairs)
    exact: list                 # bool per candidate
    parses: list                # bool per candidate


@dataclass
class EvalReport:
    ks: tuple
    tasks: list = field(default_factory=list)

    def generalization(self, k: int) -> float:
        return _fraction(self.tasks, lambda t: any(t.generalizes[:k]))

    def exact_match(self, k: int) -> float:
        return _fraction(self.tasks, lambda t: any(t.exact[:k]))

    def spec_consistency(self, k: int) -> float:
        return _fraction(self.tasks, lambda t: any(t.spec_consistent[:k]))

    def syntactic_rate(self, k: int) -> float:
        # A task with fewer than k decoded programs cannot have all k parse.
        return _fraction(self.tasks, lambda t: len(t.parses) >= k and all(t.parses[:k]))

    def summary(self) -> dict:
        return {
            str(k): {
                "generalization": self.generalization(k),
                "exact_match": self.exact_match(k),
                "spec_consistency": self.spec_consistency(k),
                "syntactic_rate": self.syntactic_rate(k),
            }
            for k in self.ks
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task_id", "k", "generalization", "exact_match",
                             "syntactic_rate"])
            for task in self.tasks:
                for k in self.ks:
                    writer.writerow([
                        task.task_id, k,
                        int(any(task.generalizes[:k])),
                        int(any(task.exact[:k])),
                        int(len(task.parses) >= k and all(task.parses[:k])),
                    ])

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fraction(tasks, predicate) -> float:
    if not tasks:
        return 0.0
    return sum(bool(predicate(t)) for t in tasks) / len(tasks)


def _judge(tokens, sample: Sample, max_steps: int):
    try:
        prog = lang.parse(tokens)
    except (lang.ParseError, lang.IncompleteProgramError):
        return False, False, False
    ok = []
    for gin, gout in sample.examples:
        res = vm.run_program(prog, gin, max_steps)
        ok.append(res.outcome is vm.Outcome.OK and res.grid == gout)
    spec_ok = all(ok[:len(sample.spec_pairs)])
    return True, spec_ok, all(ok)


def evaluate(model: SynthModel, samples: list[Sample], ks=(1, 5, 50),
             beam_size: int = 64, max_len: int = search.DEFAULT_MAX_LEN,
             apply_learned_syntax: bool = True,
             max_steps: int = vm.DEFAULT_MAX_STEPS) -> EvalReport:
    """Decode every task once and score all requested k cutoffs.

    apply_learned_syntax=False ablates the learned penalties at decode
    time (only meaningful for learned-syntax checkpoints).
    """
    ks = tuple(sorted(ks))
    if max(ks) > beam_size:
        raise ValueError("beam_size must be at least the largest k")
    report = EvalReport(ks)
    for sample in samples:
        session = DecodeSession(model, sample.spec_pairs,
                                apply_learned_syntax=apply_learned_syntax)
        try:
            dist = search.beam_search(model, sample.spec_pairs, beam_size,
                                      max_len, session=session)
            entries = dist.entries
        except search.NoCompleteProgramError:
            entries = []
        parses, spec_ok, gen, exact = [], [], [], []
        for entry in entries:
            p, s, g = _judge(entry.tokens, sample, max_steps)
            parses.append(p)
            spec_ok.append(s)
            gen.append(g)
            exact.append(tuple(entry.tokens) == tuple(sample.program))
        report.tasks.append(TaskResult(sample.id, entries, gen, spec_ok, exact, parses))
    return report


def generalization_top_k(model, samples, k: int, beam_size: int = 64, **kw) -> float:
    return evaluate(model, samples, ks=(k,), beam_size=beam_size, **kw).generalization(k)


def exact_match_top_k(model, samples, k: int, beam_size: int = 64, **kw) -> float:
    return evaluate(model, samples, ks=(k,), beam_size=beam_size, **kw).exact_match(k)


def syntactic_rate_top_k(model, samples, k: int, mask_applied: bool = True,
                         beam_size: int = 64, **kw) -> float:
    """Fraction of tasks whose top-k decodes all parse.

    mask_applied toggles the learned penalties at decode time; requires a
    learned-syntax model.
    """
    if model.cfg.syntax_mode != "learned":
        from .model import ModeError
        raise ModeError("syntactic_rate_top_k requires syntax_mode='learned'")
    report = evaluate(model, samples, ks=(k,), beam_size=beam_size,
                      apply_learned_syntax=mask_applied, **kw)
    return report.syntactic_rate(k)
