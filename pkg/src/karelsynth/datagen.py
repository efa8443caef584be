"""Synthetic dataset generation: random programs plus covering IO examples.

Programs are sampled from the grammar under token/nesting budgets, with
rejection of spurious no-op patterns (e.g. a turnLeft right after a
turnRight). For each program, random input grids are executed until six
crash-free pairs are found whose union exercises every conditional guard
at least once and where at least one pair visibly changes the world.
Pairs 1..5 form the specification, pair 6 is the held-out test.

Generation is deterministic: each sample id derives its own RNG stream
from (master seed, id), so output is independent of worker count.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from . import lang, vm
from .lang import Action, Cond, If, IfElse, Prog, Repeat, While
from .vm import Grid, Outcome

SPEC_PAIRS = 5
TOTAL_PAIRS = 6

# Reference dataset sizes: the full-scale corpus and the reduced one used
# for data-efficiency comparisons. Both share the 5000-sample held-out pool
# that is split evenly into validation and test.
FULL_TRAIN_COUNT = 1_000_000
SMALL_TRAIN_COUNT = 10_000
HELDOUT_COUNT = 5_000

_STMT_KINDS = ("action", "while", "repeat", "if", "ifelse")
# Fixed token overhead per construct (keyword + delimiters, before condition
# and body tokens): repeat = kw + cste + r( + r); while/if = kw + c( c) + body
# pair; ifelse additionally carries t( t) else e( e).
_MIN_COST = {"action": 1, "repeat": 5, "while": 7, "if": 7, "ifelse": 11}


class GenerationExhausted(RuntimeError):
    pass


class CoverageUnsatisfiableError(RuntimeError):
    pass


@dataclass
class GenConfig:
    max_tokens: int = 40
    max_nesting_depth: int = 4
    stmt_probs: dict = field(default_factory=lambda: {
        "action": 0.55, "while": 0.12, "repeat": 0.15, "if": 0.10, "ifelse": 0.08,
    })
    continue_prob: float = 0.5        # chance of another statement in a body
    not_prob: float = 0.2
    repeat_low: int = 0
    repeat_high: int = 19             # inclusive
    obstacle_prob: float = 0.1
    marker_prob: float = 0.1
    marker_geom_p: float = 0.5
    max_marker_count: int = 10        # initial pile cap, <= vm.MAX_MARKERS
    max_steps: int = vm.DEFAULT_MAX_STEPS
    io_attempts: int = 200            # candidate grids per program
    program_attempts: int = 50        # spuriousness rejections per program
    sample_attempts: int = 200        # program retries per dataset sample
    require_both_branches: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.max_tokens < 5:
            raise ValueError("max_tokens must be at least 5 (smallest program)")
        if set(self.stmt_probs) != set(_STMT_KINDS):
            raise ValueError(f"stmt_probs must have keys {_STMT_KINDS}")
        total = sum(self.stmt_probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"stmt_probs must sum to 1, got {total}")
        if not (lang.REPEAT_MIN <= self.repeat_low <= self.repeat_high <= lang.REPEAT_MAX):
            raise ValueError("repeat constant range out of bounds")
        if not 1 <= self.max_marker_count <= vm.MAX_MARKERS:
            raise ValueError("max_marker_count must lie in 1..10")
        for name in ("continue_prob", "not_prob", "obstacle_prob", "marker_prob",
                     "marker_geom_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0 or (name == "marker_geom_p" and p == 0.0):
                raise ValueError(f"{name} out of range: {p}")

    @classmethod
    def mini(cls) -> "GenConfig":
        """Small, learnable distribution for desk-scale training runs."""
        return cls(
            max_tokens=20,
            max_nesting_depth=2,
            stmt_probs={"action": 0.70, "while": 0.08, "repeat": 0.12,
                        "if": 0.06, "ifelse": 0.04},
            continue_prob=0.65,
            not_prob=0.15,
            repeat_low=1,
            repeat_high=9,
        )

    def to_json(self) -> dict:
        return asdict(self)

    def config_sha256(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @classmethod
    def from_json(cls, obj: dict) -> "GenConfig":
        return cls(**obj)


# --------------------------------------------------------------------------
# Program sampling
# --------------------------------------------------------------------------


def _feasible_kinds(cfg: GenConfig, budget: int, depth: int) -> list[str]:
    kinds = [k for k in _STMT_KINDS if _MIN_COST[k] <= budget]
    if depth >= cfg.max_nesting_depth:
        kinds = [k for k in kinds if k == "action"]
    return kinds


def _pick(rng: np.random.Generator, cfg: GenConfig, kinds: list[str]) -> str:
    weights = np.array([cfg.stmt_probs[k] for k in kinds])
    weights /= weights.sum()
    return kinds[int(rng.choice(len(kinds), p=weights))]


def _sample_cond(rng: np.random.Generator, cfg: GenConfig, budget_after_fixed: int) -> Cond:
    # A negated condition costs one extra token; only take it if it fits.
    negated = budget_after_fixed >= 2 and rng.random() < cfg.not_prob
    name = lang.CONDITIONS[int(rng.integers(len(lang.CONDITIONS)))]
    return Cond(name, negated)


def _sample_stmts(rng, cfg: GenConfig, budget: int, depth: int):
    """Sample a non-empty statement list using at most `budget` tokens."""
    stmts = []
    used = 0
    while True:
        remaining = budget - used
        kinds = _feasible_kinds(cfg, remaining, depth)
        if stmts and (not kinds or rng.random() >= cfg.continue_prob):
            break
        if not kinds:
            break
        kind = _pick(rng, cfg, kinds)
        stmt, cost = _sample_stmt(rng, cfg, kind, remaining, depth)
        stmts.append(stmt)
        used += cost
    return tuple(stmts), used


def _sample_stmt(rng, cfg: GenConfig, kind: str, budget: int, depth: int):
    if kind == "action":
        return Action(lang.ACTIONS[int(rng.integers(len(lang.ACTIONS)))]), 1
    if kind == "repeat":
        times = int(rng.integers(cfg.repeat_low, cfg.repeat_high + 1))
        body, used = _sample_stmts(rng, cfg, budget - 4, depth + 1)
        return Repeat(times, body), 4 + used
    if kind in ("while", "if"):
        cond = _sample_cond(rng, cfg, budget - 6)
        cond_cost = 2 if cond.negated else 1
        body, used = _sample_stmts(rng, cfg, budget - 5 - cond_cost, depth + 1)
        node = While(cond, body) if kind == "while" else If(cond, body)
        return node, 5 + cond_cost + used
    # ifelse: reserve one token so the else body is never starved
    cond = _sample_cond(rng, cfg, budget - 10)
    cond_cost = 2 if cond.negated else 1
    then_body, then_used = _sample_stmts(rng, cfg, budget - 8 - cond_cost - 1, depth + 1)
    else_body, else_used = _sample_stmts(rng, cfg, budget - 8 - cond_cost - then_used, depth + 1)
    return IfElse(cond, then_body, else_body), 8 + cond_cost + then_used + else_used


_TURNS = ("turnLeft", "turnRight")
_NOOP_PAIRS = {
    ("turnLeft", "turnRight"),
    ("turnRight", "turnLeft"),
    ("pickMarker", "putMarker"),
    ("putMarker", "pickMarker"),
}


def has_spurious_pattern(prog: Prog) -> bool:
    """True if any body contains a pruned no-op pattern."""

    def bad(body) -> bool:
        run_name, run_len = None, 0
        prev = None
        for stmt in body:
            name = stmt.name if isinstance(stmt, Action) else None
            if prev is not None and name is not None and (prev, name) in _NOOP_PAIRS:
                return True
            if name in _TURNS:
                run_len = run_len + 1 if name == run_name else 1
                run_name = name
                if run_len >= 4:
                    return True
            else:
                run_name, run_len = None, 0
            prev = name
            for sub in _sub_bodies(stmt):
                if bad(sub):
                    return True
        return False

    return bad(prog.body)


def _sub_bodies(stmt):
    if isinstance(stmt, (While, If, Repeat)):
        yield stmt.body
    elif isinstance(stmt, IfElse):
        yield stmt.then_body
        yield stmt.else_body


def sample_program(cfg: GenConfig, rng: np.random.Generator) -> Prog:
    """Draw one program within the configured budgets; rejects spurious ones."""
    for _ in range(cfg.program_attempts):
        body, _ = _sample_stmts(rng, cfg, cfg.max_tokens - 4, depth=0)
        prog = Prog(body)
        if not has_spurious_pattern(prog):
            return prog
    raise GenerationExhausted(
        f"no acceptable program after {cfg.program_attempts} attempts")


# --------------------------------------------------------------------------
# World sampling and IO pairs
# --------------------------------------------------------------------------


def random_grid(cfg: GenConfig, rng: np.random.Generator) -> Grid:
    rows, cols = vm.ROWS, vm.COLS
    obstacles = np.zeros((rows, cols), dtype=bool)
    obstacles[1:-1, 1:-1] = rng.random((rows - 2, cols - 2)) < cfg.obstacle_prob
    free = np.argwhere(~obstacles[1:-1, 1:-1]) + 1
    if len(free) == 0:  # pathological obstacle_prob ~ 1
        obstacles[1:-1, 1:-1] = False
        free = np.argwhere(~obstacles[1:-1, 1:-1]) + 1
    hero_row, hero_col = (int(v) for v in free[int(rng.integers(len(free)))])
    facing = int(rng.integers(4))
    markers = np.zeros((rows, cols), dtype=np.int8)
    place = np.zeros((rows, cols), dtype=bool)
    place[1:-1, 1:-1] = rng.random((rows - 2, cols - 2)) < cfg.marker_prob
    place &= ~obstacles
    counts = rng.geometric(cfg.marker_geom_p, size=(rows, cols))
    markers[place] = np.minimum(counts[place], cfg.max_marker_count).astype(np.int8)
    return Grid(hero_row, hero_col, facing, obstacles, markers)


def sample_io(prog: Prog, cfg: GenConfig, rng: np.random.Generator):
    """Six (input, output) pairs with full guard coverage and a visible effect."""
    n_conds = len(vm.conditional_nodes(prog))
    if cfg.require_both_branches:
        required = {(i, b) for i in range(n_conds) for b in (False, True)}
    else:
        required = set(range(n_conds))

    covered: set = set()
    cores: list = []    # records that added new coverage when kept
    fillers: list = []

    for _ in range(cfg.io_attempts):
        grid = random_grid(cfg, rng)
        res = vm.run_program(prog, grid, cfg.max_steps)
        if res.outcome is not Outcome.OK:
            continue
        if cfg.require_both_branches:
            seen = {(i, b) for i, outs in res.coverage.items() for b in outs}
        else:
            seen = set(res.coverage)
        changed = res.grid != grid
        record = (grid, res.grid, changed)
        if seen - covered:
            covered |= seen
            cores.append(record)
        elif len(fillers) < 2 * TOTAL_PAIRS:
            fillers.append(record)
        selection = _select_pairs(cores, fillers)
        if covered >= required and selection is not None:
            return selection
    raise CoverageUnsatisfiableError(
        f"could not cover {len(required)} guard outcomes within "
        f"{cfg.io_attempts} candidate grids")


def _select_pairs(cores, fillers):
    if len(cores) > TOTAL_PAIRS:
        return None
    chosen = list(cores)
    rest = list(fillers)
    if not any(changed for _, _, changed in chosen):
        for i, rec in enumerate(rest):
            if rec[2]:
                chosen.append(rec)
                del rest[i]
                break
        else:
            return None
    chosen += rest[: TOTAL_PAIRS - len(chosen)]
    if len(chosen) < TOTAL_PAIRS:
        return None
    return [(gin, gout) for gin, gout, _ in chosen[:TOTAL_PAIRS]]


# --------------------------------------------------------------------------
# Samples and dataset files
# --------------------------------------------------------------------------


@dataclass
class Sample:
    id: int
    program: tuple          # token ids
    examples: tuple         # TOTAL_PAIRS of (Grid, Grid)
    split: str              # train / val / test

    @property
    def spec_pairs(self):
        return self.examples[:SPEC_PAIRS]

    @property
    def held_out_pair(self):
        return self.examples[SPEC_PAIRS]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "program": lang.names(self.program),
            "examples": [
                {"input": gin.to_json(), "output": gout.to_json()}
                for gin, gout in self.examples
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Sample":
        program = tuple(lang.TOKEN_INDEX[name] for name in obj["program"])
        examples = tuple(
            (Grid.from_json(ex["input"]), Grid.from_json(ex["output"]))
            for ex in obj["examples"]
        )
        return cls(int(obj["id"]), program, examples, obj["split"])


def sample_rng(master_seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((master_seed, sample_id)))


def generate_sample(cfg: GenConfig, master_seed: int, sample_id: int, split: str) -> Sample:
    rng = sample_rng(master_seed, sample_id)
    for _ in range(cfg.sample_attempts):
        try:
            prog = sample_program(cfg, rng)
            pairs = sample_io(prog, cfg, rng)
        except CoverageUnsatisfiableError:
            continue
        return Sample(sample_id, tuple(lang.emit(prog)), tuple(pairs), split)
    raise GenerationExhausted(
        f"sample {sample_id}: no program with satisfiable coverage after "
        f"{cfg.sample_attempts} attempts")


def _split_for(index: int, count: int) -> str:
    if index < count:
        return "train"
    return "val" if (index - count) % 2 == 0 else "test"


def iter_samples(count: int, cfg: GenConfig, seed: int, heldout: int = 0) -> Iterator[Sample]:
    for i in range(count + heldout):
        yield generate_sample(cfg, seed, i, _split_for(i, count))


def dataset_header(count: int, cfg: GenConfig, seed: int, heldout: int) -> dict:
    return {
        "format": "karel-dataset-v1",
        "alphabet": list(lang.TOKENS),
        "alphabet_sha256": lang.alphabet_sha256(),
        "grid": {"rows": vm.ROWS, "cols": vm.COLS, "channels": vm.CHANNELS},
        "config": cfg.to_json(),
        "config_sha256": cfg.config_sha256(),
        "count": count,
        "heldout": heldout,
        "seed": seed,
    }


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def build_dataset(count: int, cfg: GenConfig, seed: int, out_path, heldout: int = 0,
                  progress=None) -> dict:
    """Write the dataset as JSONL (header line first); returns the header."""
    header = dataset_header(count, cfg, seed, heldout)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(_dumps(header) + "\n")
        for i, sample in enumerate(iter_samples(count, cfg, seed, heldout)):
            fh.write(_dumps(sample.to_json()) + "\n")
            if progress is not None and (i + 1) % 500 == 0:
                progress(i + 1, count + heldout)
    return header


def read_dataset(path, splits=None):
    """Load (header, samples); optionally filter to the given split names."""
    keep = set(splits) if splits is not None else None
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("alphabet_sha256") != lang.alphabet_sha256():
            raise ValueError("dataset alphabet does not match this build")
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if keep is None or obj["split"] in keep:
                samples.append(Sample.from_json(obj))
    return header, samples


def revalidate(sample: Sample, max_steps: int = vm.DEFAULT_MAX_STEPS) -> bool:
    """Check the dataset invariants for one sample by re-execution."""
    prog = lang.parse(sample.program)
    required = set(range(len(vm.conditional_nodes(prog))))
    covered: set = set()
    changed = False
    for gin, gout in sample.examples:
        res = vm.run_program(prog, gin, max_steps)
        if res.outcome is not Outcome.OK or res.grid != gout:
            return False
        covered |= set(res.coverage)
        changed = changed or gout != gin
    return covered >= required and changed
