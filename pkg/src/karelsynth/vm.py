"""Gridworld state and deterministic interpreter for Karel programs.

The world is an 18x18 grid whose outer ring is an impassable boundary;
the hero walks the 16x16 interior among obstacles and marker piles
(1..10 markers per cell). Execution is pure: the input grid is never
mutated, and results carry step counts plus which way every conditional
guard evaluated (for dataset coverage checks).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .lang import Action, Cond, If, IfElse, Prog, Repeat, While

ROWS = 18
COLS = 18
CHANNELS = 16
MAX_MARKERS = 10
DEFAULT_MAX_STEPS = 250

# Facing index doubles as the channel index of the hero plane.
NORTH, SOUTH, WEST, EAST = 0, 1, 2, 3
DIR_NAMES = ("N", "S", "W", "E")
DIR_INDEX = {n: i for i, n in enumerate(DIR_NAMES)}
_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1))
_LEFT = (WEST, EAST, SOUTH, NORTH)   # left of N is W, of S is E, of W is S, of E is N
_RIGHT = (EAST, WEST, NORTH, SOUTH)

CH_OBSTACLE = 4
CH_BOUNDARY = 5
CH_MARKER_BASE = 6  # channels 6..15 are marker counts 1..10


class GridError(ValueError):
    pass


@dataclass
class Grid:
    """World state: hero pose plus obstacle and marker occupancy."""

    hero_row: int
    hero_col: int
    facing: int
    obstacles: np.ndarray  # (18, 18) bool
    markers: np.ndarray    # (18, 18) int8, counts 0..10

    def copy(self) -> "Grid":
        return Grid(self.hero_row, self.hero_col, self.facing,
                    self.obstacles.copy(), self.markers.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.hero_row == other.hero_row
            and self.hero_col == other.hero_col
            and self.facing == other.facing
            and bool(np.array_equal(self.obstacles, other.obstacles))
            and bool(np.array_equal(self.markers, other.markers))
        )

    def validate(self) -> None:
        if self.obstacles.shape != (ROWS, COLS) or self.markers.shape != (ROWS, COLS):
            raise GridError("grid arrays must be 18x18")
        if not (1 <= self.hero_row <= ROWS - 2 and 1 <= self.hero_col <= COLS - 2):
            raise GridError("hero must stand on an interior cell")
        if self.facing not in (NORTH, SOUTH, WEST, EAST):
            raise GridError(f"bad facing {self.facing}")
        if self.obstacles[self.hero_row, self.hero_col]:
            raise GridError("hero standing on an obstacle")
        ring = np.zeros((ROWS, COLS), dtype=bool)
        ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
        if (self.obstacles & ring).any() or (self.markers[ring] != 0).any():
            raise GridError("obstacles/markers may only occupy interior cells")
        if (self.markers < 0).any() or (self.markers > MAX_MARKERS).any():
            raise GridError("marker counts must lie in 0..10")
        if (self.markers[self.obstacles] != 0).any():
            raise GridError("markers may not sit on obstacles")

    # -- encodings ---------------------------------------------------------

    def to_tensor(self) -> np.ndarray:
        """Dense (16, 18, 18) float32 occupancy tensor."""
        t = np.zeros((CHANNELS, ROWS, COLS), dtype=np.float32)
        t[self.facing, self.hero_row, self.hero_col] = 1.0
        t[CH_OBSTACLE] = self.obstacles
        t[CH_BOUNDARY, 0, :] = t[CH_BOUNDARY, -1, :] = 1.0
        t[CH_BOUNDARY, :, 0] = t[CH_BOUNDARY, :, -1] = 1.0
        for count in range(1, MAX_MARKERS + 1):
            t[CH_MARKER_BASE + count - 1] = self.markers == count
        return t

    def to_json(self) -> dict:
        """Sparse form: hero pose plus obstacle and marker coordinate lists."""
        obs = [[int(r), int(c)] for r, c in np.argwhere(self.obstacles)]
        mks = [[int(r), int(c), int(self.markers[r, c])] for r, c in np.argwhere(self.markers > 0)]
        return {
            "hero": {"row": int(self.hero_row), "col": int(self.hero_col),
                     "dir": DIR_NAMES[self.facing]},
            "obstacles": obs,
            "markers": mks,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Grid":
        obstacles = np.zeros((ROWS, COLS), dtype=bool)
        markers = np.zeros((ROWS, COLS), dtype=np.int8)
        for r, c in obj["obstacles"]:
            obstacles[r, c] = True
        for r, c, n in obj["markers"]:
            markers[r, c] = n
        hero = obj["hero"]
        grid = cls(int(hero["row"]), int(hero["col"]), DIR_INDEX[hero["dir"]],
                   obstacles, markers)
        grid.validate()
        return grid

    @classmethod
    def empty(cls, hero_row: int = 1, hero_col: int = 1, facing: int = EAST) -> "Grid":
        return cls(hero_row, hero_col, facing,
                   np.zeros((ROWS, COLS), dtype=bool),
                   np.zeros((ROWS, COLS), dtype=np.int8))

    def render(self) -> str:
        """ASCII view for demos and debugging."""
        glyph = {NORTH: "^", SOUTH: "v", WEST: "<", EAST: ">"}
        rows = []
        for r in range(ROWS):
            row = []
            for c in range(COLS):
                if r in (0, ROWS - 1) or c in (0, COLS - 1):
                    row.append("#")
                elif (r, c) == (self.hero_row, self.hero_col):
                    row.append(glyph[self.facing])
                elif self.obstacles[r, c]:
                    row.append("#")
                elif self.markers[r, c]:
                    row.append(str(self.markers[r, c]) if self.markers[r, c] < 10 else "X")
                else:
                    row.append(".")
            rows.append("".join(row))
        return "\n".join(rows)


def _blocked(grid: Grid, r: int, c: int) -> bool:
    # Boundary ring and obstacles are equally impassable.
    if r <= 0 or r >= ROWS - 1 or c <= 0 or c >= COLS - 1:
        return True
    return bool(grid.obstacles[r, c])


def eval_cond(cond: Cond, grid: Grid) -> bool:
    """Evaluate one condition against the grid (negation applied)."""
    name = cond.name
    if name == "markersPresent":
        value = grid.markers[grid.hero_row, grid.hero_col] > 0
    elif name == "noMarkersPresent":
        value = grid.markers[grid.hero_row, grid.hero_col] == 0
    else:
        if name == "frontIsClear":
            d = grid.facing
        elif name == "leftIsClear":
            d = _LEFT[grid.facing]
        else:  # rightIsClear
            d = _RIGHT[grid.facing]
        dr, dc = _DELTAS[d]
        value = not _blocked(grid, grid.hero_row + dr, grid.hero_col + dc)
    return (not value) if cond.negated else bool(value)


class Outcome(enum.Enum):
    OK = "ok"
    CRASH = "crash"
    TIMEOUT = "timeout"


@dataclass
class ExecResult:
    outcome: Outcome
    grid: Grid | None          # output state, only for OK
    steps: int                 # executed action count
    crash_reason: str | None = None
    crash_step: int | None = None
    coverage: dict[int, set] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.OK


class _Crash(Exception):
    def __init__(self, reason: str):
        self.reason = reason


class _Timeout(Exception):
    pass


def conditional_nodes(prog: Prog) -> list:
    """Guarded nodes (while/if/ifelse) in preorder; index is the coverage id."""
    out = []

    def visit(body):
        for stmt in body:
            if isinstance(stmt, (While, If)):
                out.append(stmt)
                visit(stmt.body)
            elif isinstance(stmt, IfElse):
                out.append(stmt)
                visit(stmt.then_body)
                visit(stmt.else_body)
            elif isinstance(stmt, Repeat):
                visit(stmt.body)

    visit(prog.body)
    return out


def _annotate(body, counter):
    # Pair every statement with its coverage id (conditionals only, preorder)
    # and pre-annotated sub-bodies, so ids depend on position, not identity.
    out = []
    for stmt in body:
        if isinstance(stmt, (While, If)):
            nid = counter[0]
            counter[0] += 1
            out.append((stmt, nid, _annotate(stmt.body, counter), None))
        elif isinstance(stmt, IfElse):
            nid = counter[0]
            counter[0] += 1
            then_a = _annotate(stmt.then_body, counter)
            else_a = _annotate(stmt.else_body, counter)
            out.append((stmt, nid, then_a, else_a))
        elif isinstance(stmt, Repeat):
            out.append((stmt, None, _annotate(stmt.body, counter), None))
        else:
            out.append((stmt, None, None, None))
    return out


class _Machine:
    def __init__(self, grid: Grid, max_steps: int, max_ticks: int):
        self.grid = grid
        self.max_steps = max_steps
        self.max_ticks = max_ticks
        self.steps = 0
        self.ticks = 0
        self.coverage: dict[int, set] = {}
        self._next_cond_id = 0

    def tick(self):
        self.ticks += 1
        if self.ticks > self.max_ticks:
            raise _Timeout

    def guard(self, node_id: int, cond: Cond) -> bool:
        self.tick()
        value = eval_cond(cond, self.grid)
        self.coverage.setdefault(node_id, set()).add(value)
        return value

    def act(self, name: str):
        if self.steps >= self.max_steps:
            raise _Timeout
        self.tick()
        self.steps += 1
        g = self.grid
        if name == "move":
            dr, dc = _DELTAS[g.facing]
            r, c = g.hero_row + dr, g.hero_col + dc
            if _blocked(g, r, c):
                raise _Crash("move-blocked")
            g.hero_row, g.hero_col = r, c
        elif name == "turnLeft":
            g.facing = _LEFT[g.facing]
        elif name == "turnRight":
            g.facing = _RIGHT[g.facing]
        elif name == "pickMarker":
            if g.markers[g.hero_row, g.hero_col] == 0:
                raise _Crash("pick-empty")
            g.markers[g.hero_row, g.hero_col] -= 1
        else:  # putMarker
            if g.markers[g.hero_row, g.hero_col] >= MAX_MARKERS:
                raise _Crash("put-full")
            g.markers[g.hero_row, g.hero_col] += 1

    def run_body(self, annotated):
        for item in annotated:
            self.run_stmt(item)

    def run_stmt(self, item):
        stmt, node_id, sub_a, sub_b = item
        if isinstance(stmt, Action):
            self.act(stmt.name)
        elif isinstance(stmt, Repeat):
            for _ in range(stmt.times):
                self.tick()
                self.run_body(sub_a)
        elif isinstance(stmt, While):
            while self.guard(node_id, stmt.cond):
                self.run_body(sub_a)
        elif isinstance(stmt, If):
            if self.guard(node_id, stmt.cond):
                self.run_body(sub_a)
        elif isinstance(stmt, IfElse):
            if self.guard(node_id, stmt.cond):
                self.run_body(sub_a)
            else:
                self.run_body(sub_b)
        else:
            raise TypeError(f"not a statement: {stmt!r}")


def run_program(prog: Prog, grid: Grid, max_steps: int = DEFAULT_MAX_STEPS,
                max_ticks: int | None = None) -> ExecResult:
    """Execute a program on a copy of the grid.

    Actions cost one step each; condition checks are free but counted as
    ticks so that action-free infinite loops still time out. A move into
    a blocked cell, picking on an empty cell, or putting on a full cell
    crashes; exceeding the step budget (or the tick safety cap) times out.
    """
    if max_ticks is None:
        max_ticks = 8 * max_steps + 256
    machine = _Machine(grid.copy(), max_steps, max_ticks)
    annotated = _annotate(prog.body, [0])
    try:
        machine.run_body(annotated)
    except _Crash as crash:
        return ExecResult(Outcome.CRASH, None, machine.steps,
                          crash_reason=crash.reason, crash_step=machine.steps,
                          coverage=machine.coverage)
    except _Timeout:
        return ExecResult(Outcome.TIMEOUT, None, machine.steps, coverage=machine.coverage)
    return ExecResult(Outcome.OK, machine.grid, machine.steps, coverage=machine.coverage)
