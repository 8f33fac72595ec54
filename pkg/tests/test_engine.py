import datetime
import random

import pytest

from adelite import dsl
from adelite.engine import Engine


def fixed_clock():
    tick = [0]

    def clock():
        tick[0] += 1
        return datetime.datetime(1993, 5, 1) + datetime.timedelta(seconds=tick[0])

    return clock


def make_engine(text="", user="u"):
    engine = Engine(allow_external=False, clock=fixed_clock())
    if text:
        dsl.load(engine, text, user=user)
    return engine


PHILO = open(__file__.replace("test_engine.py", "data/philosophers.adl")).read()


def philosophers(n=2):
    eng = make_engine(PHILO)
    for i in range(1, n + 1):
        eng.create_object(f"Philo{i}", "Philo", user="u")
        eng.create_object(f"F{i}", "Fork", user="u")
    for i in range(1, n + 1):
        eng.create_relation(f"Philo{i}", "Use", f"F{i}", user="u")
        eng.create_relation(f"Philo{i}", "Use", f"F{(i % n) + 1}", user="u")
    return eng


# ---------------------------------------------------------------------------
# invoke pipeline


def test_eat_with_occupied_fork_aborts_and_errors_set_hungry():
    eng = philosophers()
    assert eng.invoke("Philo1", "eat", user="u").ok
    res = eng.invoke("Philo2", "eat", user="u")
    assert res.status == "aborted"
    assert "fork is occupied" in res.message
    assert eng.get_attribute("Philo2", "STATE") == "hungry"
    # forks still held by Philo1 only
    assert eng.get_attribute("F1", "STATE") == "occupied"


def test_think_releases_forks_and_hungry_neighbor_retries():
    eng = philosophers()
    eng.invoke("Philo1", "eat", user="u")
    eng.invoke("Philo2", "eat", user="u")  # aborts, goes hungry
    res = eng.invoke("Philo1", "think", user="u")
    assert res.ok
    assert res.spawned  # decoupled retry ran
    assert eng.get_attribute("Philo2", "STATE") == "eat"
    assert eng.get_attribute("Philo1", "STATE") == "think"


def test_invoke_without_triggers_is_plain_commit():
    eng = make_engine("""
OBJECT box;
  DEFATTRIBUTE
    n : integer := 0 ;
  METHOD bump DO mda self -a n 1 ;
END box;
""")
    eng.create_object("B", "box", user="u")
    res = eng.invoke("B", "bump", user="u")
    assert res.ok
    assert eng.get_attribute("B", "n") == 1


def test_unresolvable_method_is_an_error():
    eng = philosophers()
    res = eng.invoke("Philo1", "ghost", user="u")
    assert res.status == "error"
    assert "unresolvable" in res.message


def test_coupling_order_in_trace():
    eng = philosophers()
    eng.invoke("Philo1", "eat", user="u")
    phases = [line.split("|")[0] for line in eng.last_trace]
    # PRE* METHOD ... POST* COMMIT AFTER*
    assert phases[0] == "PRE"
    assert "COMMIT" in phases
    commit_at = phases.index("COMMIT")
    assert all(p in ("PRE", "METHOD", "POST") for p in phases[:commit_at])
    assert all(p in ("AFTER",) for p in phases[commit_at + 1:])


def test_abort_trace_shows_rollback_then_error():
    eng = philosophers()
    eng.invoke("Philo1", "eat", user="u")
    eng.invoke("Philo2", "eat", user="u")
    phases = [line.split("|")[0] for line in eng.last_trace]
    assert "ROLLBACK" in phases
    assert phases.index("ROLLBACK") < phases.index("ERROR")
    assert "COMMIT" not in phases


# ---------------------------------------------------------------------------
# trigger collection and ordering


def test_priority_order_highest_first():
    eng = make_engine("""
EVENT low = (!cmd = poke) ; PRIORITY 1;
EVENT high = (!cmd = poke) ; PRIORITY 5;
OBJECT thing;
  DEFATTRIBUTE
    log : string := "" ;
  METHOD poke DO { } ;
  PRE ON low DO print "low" ;
  PRE ON high DO print "high" ;
END thing;
""")
    eng.create_object("T", "thing", user="u")
    res = eng.invoke("T", "poke", user="u")
    assert res.outputs == ("high", "low")
    pre = [line for line in eng.last_trace if line.startswith("PRE|")]
    priorities = [int(line.split("|")[2]) for line in pre]
    assert priorities == sorted(priorities, reverse=True)


def test_inheritance_order_most_specific_first_within_priority():
    eng = make_engine("""
OBJECT A;
  METHOD poke DO { } ;
  PRE ON poke DO print "from A" ;
END A;
OBJECT B IS A;
  PRE ON poke DO print "from B" ;
END B;
OBJECT C IS B;
  PRE ON poke DO print "from C" ;
END C;
""")
    eng.create_object("X", "C", user="u")
    res = eng.invoke("X", "poke", user="u")
    assert res.outputs == ("from C", "from B", "from A")


def test_subtype_never_suppresses_supertype_trigger():
    eng = make_engine("""
OBJECT A;
  DEFATTRIBUTE
    hits : integer := 0 ;
  METHOD poke DO { } ;
  POST ON poke DO mda self -a hits 1 ;
END A;
OBJECT B IS A;
  POST ON poke DO print "extra" ;
END B;
""")
    eng.create_object("X", "B", user="u")
    res = eng.invoke("X", "poke", user="u")
    assert eng.get_attribute("X", "hits") == 1  # supertype trigger still ran
    assert res.outputs == ("extra",)


def test_local_trigger_skipped_when_relation_invisible_global_runs():
    text = """
EVENT touched = (!cmd = poke) ;
OBJECT item;
  DEFATTRIBUTE
    state : (fresh, stale) := fresh ;
  METHOD poke DO { } ;
END item;
OBJECT holder;
  DEFATTRIBUTE
    state : (ok, obsolete) := ok ;
END holder;
RELTYPE watch;
  POST DEST touched DO { !O%state = obsolete } ;
END watch;
"""
    global_text = text.replace("POST DEST touched", "POST GLOBAL DEST touched")
    for source, expect in ((text, "ok"), (global_text, "obsolete")):
        eng = make_engine(source)
        eng.create_object("H", "holder", user="u")
        eng.create_object("I", "item", user="u")
        eng.create_object("lonely", "item", user="u")
        eng.create_relation("H", "watch", "I", user="u")
        from adelite import workspace

        workspace.make_context(eng, "narrow", ["I"], user="u")
        eng.current_context = "narrow"  # H invisible: relation not visible
        assert eng.invoke("I", "poke", user="u").ok
        assert eng.get_attribute("H", "state") == expect


def test_two_relation_types_defining_same_method_is_an_error():
    eng = make_engine("""
OBJECT node;
END node;
RELTYPE r1;
  ON ORIGIN METHOD wiggle ; { print "r1" } ;
END r1;
RELTYPE r2;
  ON ORIGIN METHOD wiggle ; { print "r2" } ;
END r2;
""")
    eng.create_object("A", "node", user="u")
    eng.create_object("B", "node", user="u")
    eng.create_relation("A", "r1", "B", user="u")
    eng.create_relation("A", "r2", "B", user="u")
    res = eng.invoke("A", "wiggle", user="u")
    assert res.status == "error"
    assert "two relation types" in res.message


def test_relation_method_dynamically_overloads_entity_method():
    eng = make_engine("""
OBJECT node;
  METHOD wiggle DO print "entity" ;
END node;
RELTYPE r1;
  ON ORIGIN METHOD wiggle ; { print "relation" } ;
END r1;
""")
    eng.create_object("A", "node", user="u")
    eng.create_object("B", "node", user="u")
    assert eng.invoke("A", "wiggle", user="u").outputs == ("entity",)
    eng.create_relation("A", "r1", "B", user="u")
    assert eng.invoke("A", "wiggle", user="u").outputs == ("relation",)
    # destination side is not overloaded
    assert eng.invoke("B", "wiggle", user="u").outputs == ("entity",)


# ---------------------------------------------------------------------------
# composition aggregate semantics


COMPOSITION = """
OBJECT node;
  DEFATTRIBUTE
    state : (official, plain) := plain ;
END node;
RELTYPE composition; COMPOSITION ;
  ON ORIGIN delete DO {delete !D} ;
  ON DEST delete DO
    {print "you must delete first its container !O";
    ABORT};
END composition;
"""


def test_delete_aggregate_head_cascades():
    eng = make_engine(COMPOSITION)
    for name in ("A", "X", "Y", "Z"):
        eng.create_object(name, "node", user="u")
        if name != "A":
            pass
    for child in ("X", "Y", "Z"):
        eng.create_relation("A", "composition", child, user="u")
    res = eng.delete("A", user="u")
    assert res.ok
    for name in ("A", "X", "Y", "Z"):
        assert eng.store.objects[name].deleted


def test_delete_component_directly_aborts():
    eng = make_engine(COMPOSITION)
    eng.create_object("A", "node", user="u")
    eng.create_object("X", "node", user="u")
    eng.create_relation("A", "composition", "X", user="u")
    res = eng.delete("X", user="u")
    assert res.status == "aborted"
    assert "delete first its container" in res.outputs[0]
    assert not eng.store.objects["X"].deleted


def test_duplicate_method_copies_head_and_relations():
    eng = make_engine("""
OBJECT node;
  DEFATTRIBUTE
    color : string ;
END node;
RELTYPE composition; COMPOSITION ;
  ON ORIGIN METHOD duplicate -d %new ;
    { copy !O -d %new };
  ON ORIGIN copy DO
    {makerel %new -r composition -d !D} ;
END composition;
""")
    eng.create_object("A", "node", user="u")
    eng.set_attribute("A", "color", "red", user="u")
    for child in ("X", "Y", "Z"):
        eng.create_object(child, "node", user="u")
        eng.create_relation("A", "composition", child, user="u")
    res = eng.invoke("A", "duplicate", [], {"d": "Acopy"}, user="u")
    assert res.ok, res.message
    assert eng.get_attribute("Acopy", "color") == "red"
    # content shared: the copy points at the same destinations
    copies = eng.store.live_rels("Acopy", "composition", None)
    assert [k[2] for k in copies] == ["X", "Y", "Z"]


# ---------------------------------------------------------------------------
# atomicity


def test_abort_restores_store_digest():
    eng = philosophers()
    eng.invoke("Philo1", "eat", user="u")
    # remove the ERROR side effect from the comparison by measuring around it:
    # digest before, digest after rollback but before ERROR effects
    seen = {}

    def observer(entry):
        if entry["kind"] == "abort-digest":
            pass

    before = eng.store.digest()
    res = eng.invoke("Philo1", "eat", user="u")  # own fork occupied -> abort
    assert res.status == "aborted"
    # ERROR trigger: STATE != eat is false (still eat) so nothing ran
    assert eng.store.digest() == before


def test_abort_with_no_prior_writes_is_noop():
    eng = make_engine("""
OBJECT t;
  METHOD fail DO ABORT ;
END t;
""")
    eng.create_object("T", "t", user="u")
    before = eng.store.digest()
    res = eng.invoke("T", "fail", user="u")
    assert res.status == "aborted"
    assert eng.store.digest() == before


def test_random_abort_injection_keeps_atomicity():
    eng = make_engine("""
OBJECT cell;
  DEFATTRIBUTE
    v : integer := 0 ;
  METHOD work (a, b) DO {
    mda self -a v %a ;
    IF v = %b THEN ABORT ;
    mda self -a v %b ;
  } ;
END cell;
""")
    rng = random.Random(11)
    for i in range(10):
        eng.create_object(f"c{i}", "cell", user="u")
    for trial in range(200):
        target = f"c{rng.randrange(10)}"
        a, b = rng.randrange(5), rng.randrange(5)
        before = eng.store.digest()
        res = eng.invoke(target, "work", [a, b], user="u")
        if res.status == "aborted":
            assert eng.store.digest() == before
        else:
            assert res.ok
            assert eng.get_attribute(target, "v") == b


def test_cascade_depth_limit():
    eng = make_engine("""
OBJECT pingpong;
  DEFATTRIBUTE
    n : integer := 0 ;
  METHOD hit DO mda self -a n 1 ;
  AFTER ON hit DO hit (self) ;
END pingpong;
""")
    eng.cascade_limit = 5
    eng.create_object("P", "pingpong", user="u")
    with pytest.raises(Exception, match="cascade"):
        eng.invoke("P", "hit", user="u")


def test_error_triggers_cannot_abort():
    eng = make_engine("""
OBJECT t;
  DEFATTRIBUTE
    mark : integer := 0 ;
  METHOD fail DO ABORT ;
  ERROR ON fail DO { mda self -a mark 9 ; ABORT ; mda self -a mark 7 } ;
END t;
""")
    eng.create_object("T", "t", user="u")
    res = eng.invoke("T", "fail", user="u")
    assert res.status == "aborted"
    # the ERROR program ran outside the transaction; its ABORT was a no-op
    assert eng.get_attribute("T", "mark") == 7


def test_multi_valued_statement_fans_out():
    eng = make_engine("""
OBJECT bag;
  DEFATTRIBUTE
    count : integer := 0 ;
  METHOD zap DO print "zap" ;
  METHOD sweep DO zap (self\\holds) ;
END bag;
RELTYPE holds;
END holds;
""")
    eng.create_object("B", "bag", user="u")
    for i in range(3):
        eng.create_object(f"H{i}", "bag", user="u")
        eng.create_relation(f"H{i}", "holds", "B", user="u")
    res = eng.invoke("B", "sweep", user="u")
    assert res.ok, res.message
    assert res.outputs == ("zap", "zap", "zap")


def test_empty_action_program_has_no_effect():
    eng = make_engine("""
OBJECT t;
  METHOD nothing DO { } ;
END t;
""")
    eng.create_object("T", "t", user="u")
    before = eng.store.digest()
    res = eng.invoke("T", "nothing", user="u")
    assert res.ok
    # only the event log entry differs
    after_events = eng.store.event_log
    assert after_events[-1]["event"] == "nothing"
    del before


def test_event_log_and_trace_format():
    eng = philosophers()
    eng.invoke("Philo1", "eat", user="u")
    line = eng.last_trace[0]
    parts = line.split("|")
    assert len(parts) == 5  # phase|event|priority|source|action
    assert parts[0] == "PRE"
    assert parts[1] == "eat"


def test_delete_sensible_event_end_to_end():
    eng = make_engine("""
EVENT delete_sensible = (!cmd = remove and (!object\\comp/state = released or !object@(status = validated))) ; PRIORITY 5;
OBJECT component;
  DEFATTRIBUTE
    status : (fresh, validated) := fresh ;
  PRE ON delete_sensible DO { print "sensible!"; ABORT } ;
END component;
OBJECT conf;
  DEFATTRIBUTE
    state : (draft, released) := draft ;
END conf;
""")
    eng.create_object("C", "conf", user="u")
    eng.create_object("X", "component", user="u")
    eng.create_object("lone", "component", user="u")
    eng.create_relation("C", "comp", "X", user="u")
    eng.set_attribute("C", "state", "released", user="u")
    # component of a released configuration: the guarded delete aborts
    res = eng.delete("X", user="u")
    assert res.status == "aborted"
    assert res.outputs == ("sensible!",)
    assert int(eng.last_trace[0].split("|")[2]) == 5  # priority carried into the trace
    # navigation reading: origins of comp with dest X expose state released
    assert eng.navigate("X\\comp/state") == ["released"]
    # unrelated object never validated: event false, delete commits
    assert eng.delete("lone", user="u").ok
    # once validated in the past, even after invalidation, the delete aborts
    eng.create_object("Y", "component", user="u")
    eng.set_attribute("Y", "status", "validated", user="u")
    eng.set_attribute("Y", "status", "fresh", user="u")
    res = eng.delete("Y", user="u")
    assert res.status == "aborted"


def test_computed_attribute_runs_command_with_session_cache(tmp_path):
    eng = Engine(clock=fixed_clock())  # external commands allowed
    dsl.load(eng, """
OBJECT host;
  DEFATTRIBUTE
    machine COMP := "echo box-1" ;
END host;
""", user="u")
    eng.create_object("H", "host", user="u")
    assert eng.get_attribute("H", "machine") == "box-1"
    # failures surface as unset
    dsl.load(eng, """
OBJECT broken;
  DEFATTRIBUTE
    machine COMP := "certainly-not-a-command-xyz" ;
END broken;
""", user="u")
    eng.create_object("B", "broken", user="u")
    from adelite.values import UNSET

    assert eng.get_attribute("B", "machine") is UNSET


def test_collect_triggers_surface_orders_by_priority_then_specificity():
    eng = make_engine("""
EVENT low = (!cmd = poke) ; PRIORITY 1;
EVENT high = (!cmd = poke) ; PRIORITY 9;
OBJECT A;
  METHOD poke DO { } ;
  PRE ON low DO print "A-low" ;
END A;
OBJECT B IS A;
  PRE ON high DO print "B-high" ;
  PRE ON low DO print "B-low" ;
END B;
""")
    eng.create_object("X", "B", user="u")
    cands = eng.collect_triggers("X", "poke")
    keyed = [(c.priority, c.block.owner) for c in cands]
    assert keyed == [(9, "B"), (1, "B"), (1, "A")]
    priorities = [c.priority for c in cands]
    assert priorities == sorted(priorities, reverse=True)


def test_setting_computed_attribute_stores_new_command():
    eng = Engine(clock=fixed_clock())  # external runner enabled
    dsl.load(eng, """
OBJECT host;
  DEFATTRIBUTE
    machine COMP := "echo original" ;
END host;
""", user="u")
    eng.create_object("H", "host", user="u")
    assert eng.get_attribute("H", "machine") == "original"
    res = eng.set_attribute("H", "machine", "echo overridden", user="u")
    assert res.ok
    assert eng.get_attribute("H", "machine") == "overridden"


def test_philosophers_protocol_independent_of_instance_count():
    for n in (3, 7):
        eng = philosophers(n)
        rng = random.Random(n)
        for _ in range(150):
            who = rng.randint(1, n)
            state = eng.store.objects[f"Philo{who}"].attributes.get("STATE")
            eng.invoke(f"Philo{who}", "think" if state == "eat" else "eat", user="u")
            states = [eng.store.objects[f"Philo{i}"].attributes.get("STATE")
                      for i in range(1, n + 1)]
            for i in range(n):
                assert not (states[i] == "eat" and states[(i + 1) % n] == "eat")
