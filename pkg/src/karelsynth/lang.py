"""The Karel DSL: token alphabet, lexer, parser, typed AST, and emitter.

A program is a whitespace-separated token string such as::

    DEF run m( while c( frontIsClear c) w( move w) m)

The surface syntax is fully delimiter-driven: every construct owns a
bracket pair, so parsing is deterministic with one token of lookahead
and ``parse``/``emit`` are exact inverses.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

ACTIONS = ("move", "turnLeft", "turnRight", "pickMarker", "putMarker")
CONDITIONS = (
    "frontIsClear",
    "leftIsClear",
    "rightIsClear",
    "markersPresent",
    "noMarkersPresent",
)
CONTROL_KEYWORDS = ("while", "repeat", "if", "ifelse", "else")
REPEAT_MIN = 0
REPEAT_MAX = 19

# Canonical alphabet order. Serialized into dataset and checkpoint headers;
# changing it is a file-format break.
TOKENS: tuple[str, ...] = (
    "DEF",
    "run",
    "m(",
    "m)",
    *ACTIONS,
    "while",
    "w(",
    "w)",
    "repeat",
    "r(",
    "r)",
    *tuple(f"R={k}" for k in range(REPEAT_MIN, REPEAT_MAX + 1)),
    "if",
    "i(",
    "i)",
    "ifelse",
    "t(",
    "t)",
    "else",
    "e(",
    "e)",
    "c(",
    "c)",
    "not",
    *CONDITIONS,
)

ALPHABET_SIZE = len(TOKENS)
TOKEN_INDEX: dict[str, int] = {name: i for i, name in enumerate(TOKENS)}

ACTION_IDS = tuple(TOKEN_INDEX[a] for a in ACTIONS)
CONDITION_IDS = tuple(TOKEN_INDEX[c] for c in CONDITIONS)
REPEAT_CONSTANT_IDS = tuple(TOKEN_INDEX[f"R={k}"] for k in range(REPEAT_MIN, REPEAT_MAX + 1))
DELIMITER_PAIRS = (("m(", "m)"), ("w(", "w)"), ("r(", "r)"), ("i(", "i)"), ("t(", "t)"), ("e(", "e)"), ("c(", "c)"))
OPENER_IDS = {TOKEN_INDEX[o]: TOKEN_INDEX[c] for o, c in DELIMITER_PAIRS}
CLOSER_IDS = {TOKEN_INDEX[c] for _, c in DELIMITER_PAIRS}


def token_id(name: str) -> int:
    return TOKEN_INDEX[name]


def token_name(tid: int) -> str:
    return TOKENS[tid]


def alphabet_sha256() -> str:
    """Hash of the serialized alphabet order, embedded in file headers."""
    return hashlib.sha256("\n".join(TOKENS).encode("utf-8")).hexdigest()


class UnknownTokenError(ValueError):
    def __init__(self, name: str, position: int):
        self.token = name
        self.position = position
        super().__init__(f"unknown token {name!r} at position {position}")


class ParseError(ValueError):
    def __init__(self, position: int, expected: Iterable[str], found: str):
        self.position = position
        self.expected = frozenset(expected)
        self.found = found
        super().__init__(
            f"parse error at position {position}: found {found!r}, "
            f"expected one of {sorted(self.expected)}"
        )


class IncompleteProgramError(ValueError):
    def __init__(self, expected: Iterable[str]):
        self.expected = frozenset(expected)
        super().__init__(f"program ended early, expected one of {sorted(self.expected)}")


def tokenize(source: str) -> list[int]:
    """Split on whitespace and map token names to ids."""
    ids = []
    for pos, word in enumerate(source.split()):
        tid = TOKEN_INDEX.get(word)
        if tid is None:
            raise UnknownTokenError(word, pos)
        ids.append(tid)
    return ids


def names(ids: Sequence[int]) -> list[str]:
    return [TOKENS[t] for t in ids]


def unparse(ids: Sequence[int]) -> str:
    return " ".join(TOKENS[t] for t in ids)


# --------------------------------------------------------------------------
# AST
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Action:
    name: str

    def __post_init__(self):
        if self.name not in ACTIONS:
            raise ValueError(f"not an action: {self.name!r}")


@dataclass(frozen=True)
class Cond:
    name: str
    negated: bool = False

    def __post_init__(self):
        if self.name not in CONDITIONS:
            raise ValueError(f"not a condition: {self.name!r}")


def _check_body(body):
    if not body:
        raise ValueError("statement body must be non-empty")
    return tuple(body)


@dataclass(frozen=True)
class While:
    cond: Cond
    body: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "body", _check_body(self.body))


@dataclass(frozen=True)
class Repeat:
    times: int
    body: tuple = field(default=())

    def __post_init__(self):
        if not REPEAT_MIN <= self.times <= REPEAT_MAX:
            raise ValueError(f"repeat constant out of range: {self.times}")
        object.__setattr__(self, "body", _check_body(self.body))


@dataclass(frozen=True)
class If:
    cond: Cond
    body: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "body", _check_body(self.body))


@dataclass(frozen=True)
class IfElse:
    cond: Cond
    then_body: tuple = field(default=())
    else_body: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "then_body", _check_body(self.then_body))
        object.__setattr__(self, "else_body", _check_body(self.else_body))


@dataclass(frozen=True)
class Prog:
    body: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "body", _check_body(self.body))


Stmt = Union[Action, While, Repeat, If, IfElse]


# --------------------------------------------------------------------------
# Parser (recursive descent; the grammar is LL(1) over the delimiter tokens)
# --------------------------------------------------------------------------

_STMT_STARTER_NAMES = ACTIONS + ("while", "repeat", "if", "ifelse")
STMT_STARTER_IDS = tuple(TOKEN_INDEX[n] for n in _STMT_STARTER_NAMES)


class _Cursor:
    def __init__(self, ids: Sequence[int]):
        self.ids = list(ids)
        self.pos = 0

    def peek(self) -> int | None:
        return self.ids[self.pos] if self.pos < len(self.ids) else None

    def take(self, expected: Iterable[str]) -> int:
        exp = tuple(expected)
        tid = self.peek()
        if tid is None:
            raise IncompleteProgramError(exp)
        if TOKENS[tid] not in exp:
            raise ParseError(self.pos, exp, TOKENS[tid])
        self.pos += 1
        return tid


def parse(ids: Sequence[int]) -> Prog:
    """Parse a full token sequence into a program tree.

    Raises ParseError at the first offending token, IncompleteProgramError
    if the sequence is a strict prefix of a valid program.
    """
    cur = _Cursor(ids)
    cur.take(("DEF",))
    cur.take(("run",))
    cur.take(("m(",))
    body = _parse_body(cur, closer="m)")
    prog = Prog(body)
    if cur.peek() is not None:
        raise ParseError(cur.pos, (), TOKENS[cur.peek()])
    return prog


def _parse_body(cur: _Cursor, closer: str) -> tuple:
    stmts = []
    while True:
        allowed = _STMT_STARTER_NAMES + ((closer,) if stmts else ())
        tid = cur.take(allowed)
        name = TOKENS[tid]
        if name == closer:
            return tuple(stmts)
        stmts.append(_parse_stmt_tail(cur, name))


def _parse_stmt_tail(cur: _Cursor, keyword: str) -> Stmt:
    if keyword in ACTIONS:
        return Action(keyword)
    if keyword == "repeat":
        cste = cur.take(tuple(f"R={k}" for k in range(REPEAT_MIN, REPEAT_MAX + 1)))
        cur.take(("r(",))
        return Repeat(int(TOKENS[cste][2:]), _parse_body(cur, "r)"))
    cond = _parse_cond(cur)
    if keyword == "while":
        cur.take(("w(",))
        return While(cond, _parse_body(cur, "w)"))
    if keyword == "if":
        cur.take(("i(",))
        return If(cond, _parse_body(cur, "i)"))
    # ifelse
    cur.take(("t(",))
    then_body = _parse_body(cur, "t)")
    cur.take(("else",))
    cur.take(("e(",))
    return IfElse(cond, then_body, _parse_body(cur, "e)"))


def _parse_cond(cur: _Cursor) -> Cond:
    cur.take(("c(",))
    tid = cur.take(("not",) + CONDITIONS)
    negated = TOKENS[tid] == "not"
    if negated:
        tid = cur.take(CONDITIONS)
    cur.take(("c)",))
    return Cond(TOKENS[tid], negated)


# --------------------------------------------------------------------------
# Emitter
# --------------------------------------------------------------------------


def emit(prog: Prog) -> list[int]:
    """Serialize a program tree back to token ids; inverse of parse."""
    out = [TOKEN_INDEX["DEF"], TOKEN_INDEX["run"], TOKEN_INDEX["m("]]
    _emit_body(prog.body, out)
    out.append(TOKEN_INDEX["m)"])
    return out


def _emit_body(body: tuple, out: list[int]) -> None:
    for stmt in body:
        _emit_stmt(stmt, out)


def _emit_stmt(stmt: Stmt, out: list[int]) -> None:
    ix = TOKEN_INDEX
    if isinstance(stmt, Action):
        out.append(ix[stmt.name])
    elif isinstance(stmt, Repeat):
        out += [ix["repeat"], ix[f"R={stmt.times}"], ix["r("]]
        _emit_body(stmt.body, out)
        out.append(ix["r)"])
    elif isinstance(stmt, While):
        out.append(ix["while"])
        _emit_cond(stmt.cond, out)
        out.append(ix["w("])
        _emit_body(stmt.body, out)
        out.append(ix["w)"])
    elif isinstance(stmt, If):
        out.append(ix["if"])
        _emit_cond(stmt.cond, out)
        out.append(ix["i("])
        _emit_body(stmt.body, out)
        out.append(ix["i)"])
    elif isinstance(stmt, IfElse):
        out.append(ix["ifelse"])
        _emit_cond(stmt.cond, out)
        out.append(ix["t("])
        _emit_body(stmt.then_body, out)
        out += [ix["t)"], ix["else"], ix["e("]]
        _emit_body(stmt.else_body, out)
        out.append(ix["e)"])
    else:
        raise TypeError(f"not a statement: {stmt!r}")


def _emit_cond(cond: Cond, out: list[int]) -> None:
    ix = TOKEN_INDEX
    out.append(ix["c("])
    if cond.negated:
        out.append(ix["not"])
    out += [ix[cond.name], ix["c)"]]


def program_token_count(prog: Prog) -> int:
    return len(emit(prog))


def parses(ids: Sequence[int]) -> bool:
    """True iff the token sequence is a complete valid program."""
    try:
        parse(ids)
        return True
    except (ParseError, IncompleteProgramError):
        return False
