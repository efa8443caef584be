"""Independent grammar-expansion oracles used to cross-check the package.

Everything here is derived directly from the surface grammar by recursive
expansion, sharing no code with karelsynth.oracle, so it can serve as the
ground truth for prefix-validity and enumeration-based tests.
"""

from __future__ import annotations

from karelsynth import lang

_ix = lang.TOKEN_INDEX
_DEF, _RUN, _MOPEN, _MCLOSE = _ix["DEF"], _ix["run"], _ix["m("], _ix["m)"]
COMPLETE = -1  # trie marker key


def conditions(max_cond_tokens: int):
    """Condition token tuples: plain names, plus negated if budget allows."""
    for name in lang.CONDITIONS:
        yield (_ix[name],)
    if max_cond_tokens >= 2:
        for name in lang.CONDITIONS:
            yield (_ix["not"], _ix[name])


def statements(budget: int):
    """Yield (tokens, length) for every single statement of <= budget tokens."""
    if budget >= 1:
        for name in lang.ACTIONS:
            yield (_ix[name],), 1
    if budget >= 5:
        for k in range(lang.REPEAT_MIN, lang.REPEAT_MAX + 1):
            head = (_ix["repeat"], _ix[f"R={k}"], _ix["r("])
            for body in bodies(budget - 4):
                toks = head + body + (_ix["r)"],)
                yield toks, len(toks)
    if budget >= 7:
        for kw, opener, closer in (("while", "w(", "w)"), ("if", "i(", "i)")):
            for cond in conditions(budget - 6):
                head = (_ix[kw], _ix["c("]) + cond + (_ix["c)"], _ix[opener])
                for body in bodies(budget - 5 - len(cond)):
                    toks = head + body + (_ix[closer],)
                    yield toks, len(toks)
    if budget >= 11:
        for cond in conditions(budget - 10):
            head = (_ix["ifelse"], _ix["c("]) + cond + (_ix["c)"], _ix["t("])
            avail = budget - 8 - len(cond)
            for then_body in bodies(avail - 1):
                mid = head + then_body + (_ix["t)"], _ix["else"], _ix["e("])
                for else_body in bodies(avail - len(then_body)):
                    toks = mid + else_body + (_ix["e)"],)
                    yield toks, len(toks)


def bodies(budget: int):
    """Yield token tuples for every non-empty statement list of <= budget tokens."""
    for first, used in statements(budget):
        yield first
        for rest in bodies(budget - used):
            yield first + rest


def all_programs(max_tokens: int):
    """Every complete program whose token count is <= max_tokens."""
    for body in bodies(max_tokens - 4):
        yield (_DEF, _RUN, _MOPEN) + body + (_MCLOSE,)


def build_prefix_trie(max_tokens: int) -> dict:
    """Trie over all complete programs of <= max_tokens tokens.

    Nodes are dicts keyed by token id; the COMPLETE key marks a node at
    which some enumerated program ends.
    """
    root: dict = {}
    for program in all_programs(max_tokens):
        node = root
        for tid in program:
            node = node.setdefault(tid, {})
        node[COMPLETE] = True
    return root


def count_programs(max_tokens: int) -> int:
    return sum(1 for _ in all_programs(max_tokens))
