"""Incremental syntax checker: exact next-token masks for program prefixes.

The checker is a pushdown machine over expectation symbols. A token is
allowed at a prefix exactly when the extended prefix can still be
completed into a full program (of any length). Masks are exposed both as
boolean vectors and as additive logits (0 for allowed, a large negative
constant for forbidden) for use in front of a softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lang
from .lang import TOKEN_INDEX, TOKENS

MASK_NEG = -1.0e9  # additive stand-in for -inf; never materializes Inf arithmetic

# Expectation symbols (top of stack decides the allowed set):
#   ("lit", tid)          exactly this token
#   ("body0", closer_tid) statement body, nothing emitted yet (closer forbidden)
#   ("body", closer_tid)  statement body with >= 1 statement (closer allowed)
#   ("cond",)             `not` or a condition name
#   ("condname",)         a condition name (after `not`)
#   ("cste",)             a repeat constant
_LIT = "lit"
_BODY0 = "body0"
_BODY = "body"
_COND = "cond"
_CONDNAME = "condname"
_CSTE = "cste"

_ix = TOKEN_INDEX
_STARTERS = lang.STMT_STARTER_IDS
_ACTION_SET = frozenset(lang.ACTION_IDS)
_COND_SET = frozenset(lang.CONDITION_IDS)
_CSTE_SET = frozenset(lang.REPEAT_CONSTANT_IDS)

_WHILE, _REPEAT, _IF, _IFELSE = (_ix["while"], _ix["repeat"], _ix["if"], _ix["ifelse"])
_NOT = _ix["not"]

# Symbols pushed when a statement keyword is consumed (top of stack first).
_EXPANSIONS = {
    _WHILE: ((_LIT, _ix["c("]), (_COND,), (_LIT, _ix["c)"]), (_LIT, _ix["w("]), (_BODY0, _ix["w)"])),
    _REPEAT: ((_CSTE,), (_LIT, _ix["r("]), (_BODY0, _ix["r)"])),
    _IF: ((_LIT, _ix["c("]), (_COND,), (_LIT, _ix["c)"]), (_LIT, _ix["i("]), (_BODY0, _ix["i)"])),
    _IFELSE: (
        (_LIT, _ix["c("]),
        (_COND,),
        (_LIT, _ix["c)"]),
        (_LIT, _ix["t("]),
        (_BODY0, _ix["t)"]),
        (_LIT, _ix["else"]),
        (_LIT, _ix["e("]),
        (_BODY0, _ix["e)"]),
    ),
}

_INITIAL_STACK = (
    (_LIT, _ix["DEF"]),
    (_LIT, _ix["run"]),
    (_LIT, _ix["m("]),
    (_BODY0, _ix["m)"]),
)


class IllegalTokenError(ValueError):
    """Raised when advance() is fed a token the mask forbids."""

    def __init__(self, token_id: int):
        self.token_id = token_id
        super().__init__(f"token {TOKENS[token_id]!r} is not valid in the current context")


@dataclass(frozen=True)
class Mask:
    """Per-token allowance vector over the whole alphabet."""

    allowed: np.ndarray  # (ALPHABET_SIZE,) bool, read-only

    def allows(self, token_id: int) -> bool:
        return bool(self.allowed[token_id])

    def allowed_ids(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.allowed))

    def to_logits(self, dtype=np.float32) -> np.ndarray:
        """Additive logits: 0 where allowed, MASK_NEG where forbidden."""
        out = np.where(self.allowed, 0.0, MASK_NEG)
        return out.astype(dtype)

    def to_csv_row(self) -> str:
        return ",".join("1" if a else "0" for a in self.allowed)


@dataclass(frozen=True)
class CheckerState:
    """Immutable pushdown configuration; cheap to clone per beam candidate."""

    stack: tuple = _INITIAL_STACK

    @property
    def complete(self) -> bool:
        return not self.stack


def init() -> CheckerState:
    return CheckerState()


def _allowed_set(stack: tuple) -> frozenset[int]:
    if not stack:
        return frozenset()
    sym = stack[0]
    kind = sym[0]
    if kind == _LIT:
        return frozenset((sym[1],))
    if kind == _BODY0:
        return frozenset(_STARTERS)
    if kind == _BODY:
        return frozenset(_STARTERS) | {sym[1]}
    if kind == _COND:
        return _COND_SET | {_NOT}
    if kind == _CONDNAME:
        return _COND_SET
    return _CSTE_SET  # _CSTE


_MASK_CACHE: dict[tuple, Mask] = {}


def valid_next(state: CheckerState) -> Mask:
    """Mask of tokens that keep the prefix extendable to a complete program."""
    cached = _MASK_CACHE.get(state.stack)
    if cached is not None:
        return cached
    allowed = np.zeros(lang.ALPHABET_SIZE, dtype=bool)
    for tid in _allowed_set(state.stack):
        allowed[tid] = True
    allowed.setflags(write=False)
    mask = Mask(allowed)
    _MASK_CACHE[state.stack] = mask
    return mask


def advance(state: CheckerState, token_id: int) -> CheckerState:
    """Consume one token. The token must be allowed by valid_next."""
    stack = state.stack
    if not stack or token_id not in _allowed_set(stack):
        raise IllegalTokenError(token_id)
    sym = stack[0]
    kind = sym[0]
    if kind in (_LIT, _CSTE):
        return CheckerState(stack[1:])
    if kind == _COND:
        if token_id == _NOT:
            return CheckerState(((_CONDNAME,),) + stack[1:])
        return CheckerState(stack[1:])
    if kind == _CONDNAME:
        return CheckerState(stack[1:])
    # body frame: statement starter or closer
    closer = sym[1]
    if token_id == closer:
        return CheckerState(stack[1:])
    rest = ((_BODY, closer),) + stack[1:]
    if token_id in _ACTION_SET:
        return CheckerState(rest)
    return CheckerState(_EXPANSIONS[token_id] + rest)


def walk(state: CheckerState, token_ids) -> CheckerState:
    for tid in token_ids:
        state = advance(state, tid)
    return state


def min_completion_tokens(state: CheckerState) -> int:
    """Fewest further tokens needed to reach a complete program."""
    cost = 0
    for sym in state.stack:
        kind = sym[0]
        if kind == _BODY0:
            cost += 2  # one action plus the closer
        else:
            cost += 1  # literal / constant / condition name / pending closer
    return cost


def masks_for_program(token_ids) -> list[Mask]:
    """The mask seen before each token of a valid program (teacher forcing)."""
    out = []
    state = init()
    for tid in token_ids:
        out.append(valid_next(state))
        state = advance(state, tid)
    return out
