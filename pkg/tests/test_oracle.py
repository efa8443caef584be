import numpy as np
import pytest

from karelsynth import datagen, lang, oracle
from karelsynth.lang import TOKEN_INDEX, TOKENS

from tests import bruteforce


def _allowed_names(state):
    return {TOKENS[t] for t in oracle.valid_next(state).allowed_ids()}


def test_init_allows_only_def():
    assert _allowed_names(oracle.init()) == {"DEF"}


def test_def_run_prefix():
    st = oracle.advance(oracle.init(), TOKEN_INDEX["DEF"])
    assert _allowed_names(st) == {"run"}
    st = oracle.advance(st, TOKEN_INDEX["run"])
    assert _allowed_names(st) == {"m("}


def test_body_start_forbids_closer():
    st = oracle.walk(oracle.init(), lang.tokenize("DEF run m("))
    assert _allowed_names(st) == set(lang.ACTIONS) | {"while", "repeat", "if", "ifelse"}


def test_after_repeat_only_constants():
    st = oracle.walk(oracle.init(), lang.tokenize("DEF run m( repeat"))
    assert _allowed_names(st) == {f"R={k}" for k in range(20)}


def test_complete_state_forbids_everything():
    st = oracle.walk(oracle.init(), lang.tokenize("DEF run m( move m)"))
    assert st.complete
    assert oracle.valid_next(st).allowed_ids() == ()


def test_full_walk_reaches_complete():
    ids = lang.tokenize(
        "DEF run m( ifelse c( not leftIsClear c) t( move t) else e( turnLeft e) "
        "while c( markersPresent c) w( pickMarker w) m)"
    )
    st = oracle.walk(oracle.init(), ids)
    assert st.complete


def test_advance_on_forbidden_token_raises():
    st = oracle.init()
    with pytest.raises(oracle.IllegalTokenError):
        oracle.advance(st, TOKEN_INDEX["move"])


def test_mask_logits_values():
    mask = oracle.valid_next(oracle.init())
    logits = mask.to_logits()
    assert logits.shape == (52,)
    assert logits[TOKEN_INDEX["DEF"]] == 0.0
    assert (logits[1:] == oracle.MASK_NEG).all()
    assert np.isfinite(logits).all()


def test_mask_csv_row():
    row = oracle.valid_next(oracle.init()).to_csv_row()
    cells = row.split(",")
    assert len(cells) == 52 and set(cells) <= {"0", "1"}


def test_generator_programs_walk_to_complete():
    rng = np.random.default_rng(5)
    cfg = datagen.GenConfig()
    for _ in range(1000):
        ids = lang.emit(datagen.sample_program(cfg, rng))
        st = oracle.walk(oracle.init(), ids)
        assert st.complete


def test_prefix_closure_under_random_walks():
    # If a token is allowed, the successor state is complete or allows something.
    rng = np.random.default_rng(11)
    for _ in range(300):
        st = oracle.init()
        for _ in range(80):
            ids = oracle.valid_next(st).allowed_ids()
            if not ids:
                assert st.complete
                break
            st = oracle.advance(st, int(rng.choice(ids)))
            assert st.complete or oracle.valid_next(st).allowed_ids()


def _random_masked_completion(rng, cap=250):
    # Weight closers/actions heavily so walks terminate quickly; soundness
    # is distribution-independent.
    st = oracle.init()
    out = []
    heavy = set(lang.ACTION_IDS) | set(lang.CLOSER_IDS)
    while len(out) < cap:
        ids = oracle.valid_next(st).allowed_ids()
        if not ids:
            return out if st.complete else None
        weights = np.array([4.0 if t in heavy else 1.0 for t in ids])
        tid = int(rng.choice(ids, p=weights / weights.sum()))
        out.append(tid)
        st = oracle.advance(st, tid)
        if st.complete:
            return out
    return None


def test_masked_walks_always_parse():
    rng = np.random.default_rng(23)
    done = 0
    attempts = 0
    while done < 2000 and attempts < 20000:
        attempts += 1
        walk = _random_masked_completion(rng)
        if walk is None:
            continue
        assert lang.parses(walk)
        done += 1
    assert done == 2000


def check_against_enumeration(max_tokens: int) -> int:
    """Exact-equivalence walk of the oracle against the grammar-expansion trie.

    Returns the number of prefixes checked. Any disagreement raises.
    """
    trie = bruteforce.build_prefix_trie(max_tokens)
    checked = 0
    stack = [(trie, oracle.init(), 0)]
    while stack:
        node, state, depth = stack.pop()
        checked += 1
        allowed = set(oracle.valid_next(state).allowed_ids())
        children = {t for t in node if t != bruteforce.COMPLETE}
        assert (bruteforce.COMPLETE in node) == state.complete
        extra = children - allowed
        assert not extra, f"oracle forbids enumerated continuations: {sorted(extra)}"
        for tid in allowed - children:
            nxt = oracle.advance(state, tid)
            need = depth + 1 + oracle.min_completion_tokens(nxt)
            assert need > max_tokens, (
                f"oracle allows token {TOKENS[tid]} at depth {depth} but enumeration "
                f"has no such continuation and completion fits in {need} tokens")
        for tid in children:
            stack.append((node[tid], oracle.advance(state, tid), depth + 1))
    return checked


def test_oracle_matches_enumeration_small():
    # Fast sanity slice; the full budget-12 closure runs in the acceptance suite.
    assert check_against_enumeration(9) > 1000


def test_min_completion_tokens_smallest_program():
    st = oracle.init()
    assert oracle.min_completion_tokens(st) == 5
    st = oracle.walk(st, lang.tokenize("DEF run m( while"))
    # c( cond c) w( stmt w) m)
    assert oracle.min_completion_tokens(st) == 7
