import numpy as np
import pytest

from karelsynth import datagen, lang, vm
from karelsynth.lang import Action, Cond, If, IfElse, Prog, Repeat, While
from karelsynth.vm import EAST, Grid, NORTH, Outcome, SOUTH, WEST

from tests.reference_vm import RefBudget, RefCrash, reference_exec


def grid_with(hero=(5, 5), facing=EAST, obstacles=(), markers=()):
    g = Grid.empty(hero[0], hero[1], facing)
    for r, c in obstacles:
        g.obstacles[r, c] = True
    for r, c, n in markers:
        g.markers[r, c] = n
    g.validate()
    return g


def prog(src: str) -> Prog:
    return lang.parse(lang.tokenize(src))


# --- golden, hand-traced cases (every action, every condition, crash, timeout)


def test_golden_move_east():
    res = vm.run_program(prog("DEF run m( move m)"), grid_with())
    assert res.outcome is Outcome.OK and res.steps == 1
    assert (res.grid.hero_row, res.grid.hero_col, res.grid.facing) == (5, 6, EAST)


def test_golden_turns_cancel():
    g = grid_with(facing=NORTH)
    res = vm.run_program(prog("DEF run m( turnLeft turnRight m)"), g)
    assert res.outcome is Outcome.OK and res.steps == 2
    assert res.grid == g


def test_golden_turn_left_cycle():
    g = grid_with(facing=NORTH)
    res = vm.run_program(prog("DEF run m( repeat R=3 r( turnLeft r) m)"), g)
    # N -> W -> S -> E in three left turns, three action steps
    assert res.steps == 3 and res.grid.facing == EAST


def test_golden_put_then_pick_markers():
    g = grid_with(markers=((5, 5, 2),))
    res = vm.run_program(prog("DEF run m( putMarker m)"), g)
    assert res.grid.markers[5, 5] == 3
    res = vm.run_program(prog("DEF run m( pickMarker pickMarker m)"), g)
    assert res.grid.markers[5, 5] == 0 and res.steps == 2


def test_golden_while_front_is_clear_walks_to_wall():
    g = grid_with(hero=(3, 14), facing=EAST)
    res = vm.run_program(prog("DEF run m( while c( frontIsClear c) w( move w) m)"), g)
    # Cells 15 and 16 are free; 17 is boundary: exactly two moves.
    assert res.outcome is Outcome.OK and res.steps == 2
    assert (res.grid.hero_row, res.grid.hero_col) == (3, 16)
    assert res.coverage[0] == {True, False}


def test_golden_if_markers_present_picks():
    p = prog("DEF run m( if c( markersPresent c) i( pickMarker i) m)")
    res = vm.run_program(p, grid_with(markers=((5, 5, 1),)))
    assert res.grid.markers[5, 5] == 0 and res.coverage[0] == {True}
    res = vm.run_program(p, grid_with())
    assert res.grid.markers[5, 5] == 0 and res.steps == 0 and res.coverage[0] == {False}


def test_golden_ifelse_branches():
    p = prog("DEF run m( ifelse c( noMarkersPresent c) t( putMarker t) "
             "else e( pickMarker e) m)")
    res = vm.run_program(p, grid_with())
    assert res.grid.markers[5, 5] == 1 and res.coverage[0] == {True}
    res = vm.run_program(p, grid_with(markers=((5, 5, 5),)))
    assert res.grid.markers[5, 5] == 4 and res.coverage[0] == {False}


def test_golden_left_right_clear():
    # Facing north at (5,5): left is (5,4), right is (5,6).
    g = grid_with(facing=NORTH, obstacles=((5, 4),))
    assert vm.eval_cond(Cond("leftIsClear"), g) is False
    assert vm.eval_cond(Cond("rightIsClear"), g) is True
    p = prog("DEF run m( if c( not leftIsClear c) i( turnRight i) m)")
    res = vm.run_program(p, g)
    assert res.grid.facing == EAST and res.steps == 1


def test_golden_crash_move_blocked():
    res = vm.run_program(prog("DEF run m( move m)"),
                         grid_with(obstacles=((5, 6),)))
    assert res.outcome is Outcome.CRASH
    assert res.crash_reason == "move-blocked" and res.crash_step == 1
    assert res.grid is None


def test_golden_crash_boundary():
    res = vm.run_program(prog("DEF run m( move move m)"), grid_with(hero=(5, 15)))
    assert res.outcome is Outcome.CRASH and res.crash_step == 2


def test_golden_crash_pick_empty_and_put_full():
    res = vm.run_program(prog("DEF run m( pickMarker m)"), grid_with())
    assert res.outcome is Outcome.CRASH and res.crash_reason == "pick-empty"
    res = vm.run_program(prog("DEF run m( putMarker m)"),
                         grid_with(markers=((5, 5, 10),)))
    assert res.outcome is Outcome.CRASH and res.crash_reason == "put-full"


def test_golden_timeout_corridor():
    g = grid_with(hero=(3, 1), facing=EAST)  # 16 interior cells in the row
    res = vm.run_program(prog("DEF run m( while c( frontIsClear c) w( move w) m)"),
                         g, max_steps=10)
    assert res.outcome is Outcome.TIMEOUT and res.steps == 10


def test_actionless_infinite_loop_times_out():
    p = prog("DEF run m( while c( noMarkersPresent c) w( "
             "if c( markersPresent c) i( move i) w) m)")
    res = vm.run_program(p, grid_with(), max_steps=50)
    assert res.outcome is Outcome.TIMEOUT
    assert res.steps <= 50


# --- properties


def test_exec_is_pure_and_deterministic():
    g = grid_with(markers=((5, 5, 2), (4, 4, 1)))
    before = g.copy()
    p = prog("DEF run m( putMarker move m)")
    a = vm.run_program(p, g)
    assert g == before  # input untouched
    b = vm.run_program(p, g)
    assert a.outcome == b.outcome and a.steps == b.steps and a.grid == b.grid


def test_condition_complementarity_and_negation():
    rng = np.random.default_rng(3)
    cfg = datagen.GenConfig()
    for _ in range(1000):
        g = datagen.random_grid(cfg, rng)
        mp = vm.eval_cond(Cond("markersPresent"), g)
        nmp = vm.eval_cond(Cond("noMarkersPresent"), g)
        assert mp != nmp
        for name in lang.CONDITIONS:
            assert vm.eval_cond(Cond(name, negated=True), g) == (
                not vm.eval_cond(Cond(name), g))


def test_marker_conservation_random():
    rng = np.random.default_rng(17)
    cfg = datagen.GenConfig()
    for _ in range(300):
        p = datagen.sample_program(cfg, rng)
        g = datagen.random_grid(cfg, rng)
        res = vm.run_program(p, g)
        if res.outcome is Outcome.OK:
            res.grid.validate()
            delta = int(res.grid.markers.sum()) - int(g.markers.sum())
            assert abs(delta) <= res.steps


def test_single_marker_action_changes_one_cell_by_one():
    g = grid_with(markers=((5, 5, 4),))
    res = vm.run_program(prog("DEF run m( putMarker m)"), g)
    diff = res.grid.markers.astype(int) - g.markers.astype(int)
    assert diff.sum() == 1 and (diff != 0).sum() == 1
    res = vm.run_program(prog("DEF run m( pickMarker m)"), g)
    diff = res.grid.markers.astype(int) - g.markers.astype(int)
    assert diff.sum() == -1 and (diff != 0).sum() == 1


def test_agrees_with_reference_interpreter():
    rng = np.random.default_rng(99)
    cfg = datagen.GenConfig()
    compared = 0
    for _ in range(1000):
        p = datagen.sample_program(cfg, rng)
        g = datagen.random_grid(cfg, rng)
        res = vm.run_program(p, g)
        try:
            (r, c, d), markers, actions = reference_exec(p, g)
        except RefCrash:
            # The production budget may expire before reaching the crash.
            assert res.outcome is not Outcome.OK
            continue
        except RefBudget:
            continue
        if res.outcome is not Outcome.OK:
            continue  # step budget differs from the reference's raw cap
        assert (res.grid.hero_row, res.grid.hero_col, "NSWE"[res.grid.facing]) == (r, c, d)
        got = {(rr, cc): int(n) for (rr, cc), n in markers.items()}
        want = {(int(rr), int(cc)): int(res.grid.markers[rr, cc])
                for rr, cc in zip(*res.grid.markers.nonzero())}
        assert got == want
        assert res.steps == actions
        compared += 1
    assert compared > 500


def test_grid_tensor_encoding():
    g = grid_with(hero=(2, 3), facing=SOUTH, obstacles=((4, 4),), markers=((2, 3, 7),))
    t = g.to_tensor()
    assert t.shape == (16, 18, 18) and t.dtype == np.float32
    assert t[SOUTH, 2, 3] == 1.0
    assert t[0:4].sum() == 1.0  # exactly one hero plane cell
    assert t[vm.CH_OBSTACLE, 4, 4] == 1.0
    assert t[vm.CH_BOUNDARY].sum() == 4 * 18 - 4
    assert t[vm.CH_MARKER_BASE + 6, 2, 3] == 1.0  # seven markers -> channel index 12
    assert t[vm.CH_MARKER_BASE:].sum() == 1.0


def test_grid_json_roundtrip():
    g = grid_with(hero=(9, 2), facing=WEST, obstacles=((3, 3), (4, 5)),
                  markers=((7, 7, 10),))
    assert Grid.from_json(g.to_json()) == g


def test_grid_validation_errors():
    with pytest.raises(vm.GridError):
        Grid.empty(0, 5).validate()  # hero on boundary
    g = Grid.empty(5, 5)
    g.obstacles[5, 5] = True
    with pytest.raises(vm.GridError):
        g.validate()
    g = Grid.empty(5, 5)
    g.markers[8, 8] = 11
    with pytest.raises(vm.GridError):
        g.validate()
