import datetime
import os
import random

import pytest

from adelite import dsl
from adelite.engine import Engine
from adelite.tempo import TempoError
from adelite.values import UNSET

DATA = os.path.join(os.path.dirname(__file__), "data")


def fixed_clock():
    tick = [0]

    def clock():
        tick[0] += 1
        return datetime.datetime(1992, 7, 1) + datetime.timedelta(seconds=tick[0])

    return clock


def make_engine(tmp_path=None):
    eng = Engine(allow_external=False, clock=fixed_clock(),
                 ws_base=str(tmp_path) if tmp_path else None)
    dsl.load(eng, open(os.path.join(DATA, "release.adl")).read(), user="pm")
    return eng


def add_modules(eng, spec):
    """spec: {name: responsible-set}"""
    for name, owners in spec.items():
        eng.create_object(name, "module", user="pm")
        eng.set_attribute(name, "content", f"line a of {name}\nline b of {name}\n", user="pm")
        eng.new_revision(name, user="pm")
        if owners:
            eng.set_attribute(name, "responsible", frozenset(owners), user="pm")


# ---------------------------------------------------------------------------
# process types map onto the kernel


def test_process_type_registers_as_object_type_with_role_relationships():
    eng = make_engine()
    schema = eng.store.schema
    dev = schema.effective("development")
    assert dev.kind == "object" and dev.is_process
    # every role materializes as an active relationship
    for role in ("to_consult", "to_change"):
        rel = schema.effective(f"development.{role}")
        assert rel.kind == "relation"
        assert rel.role_of == "development"
    # every rule materializes as triggers on the process type
    release = schema.effective("release")
    assert any(t.coupling == "RULE" and t.event == "ready" for t in release.triggers)
    assert release.user_role == "PMmanager"


def test_unknown_role_base_rejected():
    eng = Engine(allow_external=False)
    with pytest.raises(Exception, match="unknown role base"):
        dsl.load(eng, "PROCESS p;\n  ROLE r = ghost ;\nEND p;")


def test_undeclared_connection_kind_rejected_at_definition():
    eng = Engine(allow_external=False)
    with pytest.raises(Exception, match="unknown connection kind"):
        dsl.load(eng, """
OBJECT m;
END m;
PROCESS p;
  ROLE r = m ;
  TYPECONNECTION c IS teleport ;
    CONNECT r WITH r WHEN r.name = r.name ;
  END ;
END p;
""")


def test_library_kind_declared_but_unimplemented_errors_on_use(tmp_path):
    eng = Engine(allow_external=False, clock=fixed_clock(), ws_base=str(tmp_path))
    dsl.load(eng, """
OBJECT m IS document;
  DEFATTRIBUTE
    state : (idle, go) := idle ;
END m;
EVENT fire = (state := go) ;
PROCESS child ;
  ROLE r = m ;
END child;
PROCESS parent ;
  ROLE kids = child ;
  TYPECONNECTION hold IS deadline ;
    CONNECT kids WITH kids WHEN r.name = r.name ;
    EVENT deadline_when = fire ;
  END ;
END parent;
""")
    for name in ("MA",):
        eng.create_object(name, "m", user="u")
        eng.new_revision(name, user="u")
    c1 = eng.tempo.instantiate_process("child", "u1", ["MA"])
    c2 = eng.tempo.instantiate_process("child", "u2", ["MA"])
    parent = eng.tempo.instantiate_process("parent", "pm", [c1.name, c2.name])
    with pytest.raises(TempoError, match="not implemented"):
        eng.tempo.role_attr(c1.name, "r", "MA", "state", "go")


# ---------------------------------------------------------------------------
# instantiation and binding


def test_responsible_filter_splits_roles():
    eng = make_engine()
    add_modules(eng, {"M1": {"u1"}, "M2": set()})
    we = eng.tempo.instantiate_process("development", "u1", ["M1", "M2"])
    bindings = eng.tempo.bindings(we.name)
    assert bindings == {"to_change": ["M1"], "to_consult": ["M2"]}


def test_empty_object_set_gives_empty_bindings():
    eng = make_engine()
    we = eng.tempo.instantiate_process("development", "u1", [])
    assert eng.tempo.bindings(we.name) == {}


def test_role_exclusivity_one_role_per_object():
    eng = make_engine()
    add_modules(eng, {"M1": {"u1"}, "M2": {"u1"}, "M3": set()})
    we = eng.tempo.instantiate_process("development", "u1", ["M1", "M2", "M3"])
    bindings = eng.tempo.bindings(we.name)
    for obj in ("M1", "M2", "M3"):
        roles = [role for role, objs in bindings.items() if obj in objs]
        assert len(roles) == 1


def test_sibling_filtered_roles_without_precedence_error():
    eng = Engine(allow_external=False)
    dsl.load(eng, """
OBJECT thing;
  DEFATTRIBUTE
    kind : string ;
END thing;
PROCESS clash ;
  ROLE left = thing/(kind=stuff) ;
  ROLE right = thing/(kind=stuff) ;
END clash;
""")
    eng.create_object("T", "thing", user="u")
    eng.set_attribute("T", "kind", "stuff", user="u")
    with pytest.raises(TempoError, match="sibling roles"):
        eng.tempo.instantiate_process("clash", "u", ["T"])


def test_derived_role_wins_over_its_base():
    eng = make_engine()
    add_modules(eng, {"M1": {"u1"}})
    we = eng.tempo.instantiate_process("development", "u1", ["M1"])
    assert eng.tempo.bindings(we.name) == {"to_change": ["M1"]}


# ---------------------------------------------------------------------------
# role-local attributes: the WE overlay


def test_role_local_write_invisible_in_other_we():
    eng = make_engine()
    add_modules(eng, {"M1": {"u1", "u2"}})
    we1 = eng.tempo.instantiate_process("development", "u1", ["M1"])
    we2 = eng.tempo.instantiate_process("development", "u2", ["M1"])
    eng.tempo.role_attr(we1.name, "to_change", "M1", "state", "compiled")
    assert eng.tempo.role_attr(we1.name, "to_change", "M1", "state") == "compiled"
    # the other process sees the shared value, not "compiled"
    assert eng.tempo.role_attr(we2.name, "to_change", "M1", "state") is UNSET
    assert "state" not in eng.store.objects["M1"].attributes


def test_read_without_local_write_falls_through_to_shared():
    eng = make_engine()
    add_modules(eng, {"M1": {"u1"}})
    eng.set_attribute("M1", "state", "tested", user="pm")
    we = eng.tempo.instantiate_process("development", "u1", ["M1"])
    assert eng.tempo.role_attr(we.name, "to_change", "M1", "state") == "tested"


def test_two_wes_keep_independent_overlays():
    eng = make_engine()
    add_modules(eng, {"M1": {"u1", "u2"}})
    we1 = eng.tempo.instantiate_process("development", "u1", ["M1"])
    we2 = eng.tempo.instantiate_process("development", "u2", ["M1"])
    eng.tempo.role_attr(we1.name, "to_change", "M1", "state", "edited")
    eng.tempo.role_attr(we2.name, "to_change", "M1", "state", "compiled")
    # oracle: two independent overlay maps
    assert eng.tempo.role_attr(we1.name, "to_change", "M1", "state") == "edited"
    assert eng.tempo.role_attr(we2.name, "to_change", "M1", "state") == "compiled"


def test_unbound_object_role_attr_errors():
    eng = make_engine()
    add_modules(eng, {"M1": set()})
    we = eng.tempo.instantiate_process("development", "u1", ["M1"])
    with pytest.raises(TempoError, match="not bound"):
        eng.tempo.role_attr(we.name, "to_change", "M1", "state", "edited")


# ---------------------------------------------------------------------------
# invoke inside a WE


def test_process_compile_variant_overloads_base():
    eng = make_engine()
    add_modules(eng, {"M1": {"u1"}})
    we = eng.tempo.instantiate_process("development", "u1", ["M1"])
    res = eng.tempo.invoke_in_we(we.name, "to_change", "M1", "compile")
    assert res.ok, res.message
    # inside the development WE, compile uses the debug variant (role-local)
    assert eng.tempo.role_attr(we.name, "to_change", "M1", "last_build") == "debug_variant"
    # outside, the base variant runs and writes the shared attribute
    res = eng.invoke("M1", "compile", user="pm")
    assert res.ok
    assert eng.store.objects["M1"].attributes["last_build"] == "base_variant"


def test_after_on_compile_runs_test():
    eng = make_engine()
    add_modules(eng, {"M1": {"u1"}})
    we = eng.tempo.instantiate_process("development", "u1", ["M1"])
    res = eng.tempo.invoke_in_we(we.name, "to_change", "M1", "compile")
    assert res.ok
    assert res.spawned  # AFTER ON compile DO test
    assert eng.tempo.role_attr(we.name, "to_change", "M1", "test_mark") == "done"


def test_tool_permit_set_enforced():
    eng = make_engine()
    add_modules(eng, {"M1": {"u1"}})
    we = eng.tempo.instantiate_process("development", "u1", ["M1"], tools=("compile",))
    assert eng.tempo.invoke_in_we(we.name, "to_change", "M1", "compile").ok
    with pytest.raises(TempoError, match="not permitted"):
        eng.tempo.invoke_in_we(we.name, "to_change", "M1", "test")


# ---------------------------------------------------------------------------
# connections


def release_setup(eng, modules, users=("u1", "u2", "u3")):
    add_modules(eng, modules)
    wes = [eng.tempo.instantiate_process("development", user, sorted(modules)) for user in users]
    parent = eng.tempo.instantiate_process(
        "release", "pm", sorted(modules) + [w.name for w in wes], we_name="we_release")
    return wes, parent


def test_shared_module_yields_one_consult_change_connection(tmp_path):
    eng = make_engine(tmp_path)
    wes, parent = release_setup(eng, {"M1": {"u2"}}, users=("u1", "u2"))
    conns = eng.tempo.connect_roles(parent.name)
    consult = [c for c in conns if c.ctype == "consult_change"]
    assert len(consult) == 1
    conn = consult[0]
    assert conn.source == (wes[1].name, "to_change", "M1")
    assert conn.dest == (wes[0].name, "to_consult", "M1")


def test_three_to_change_holders_give_six_ordered_pairs(tmp_path):
    eng = make_engine(tmp_path)
    wes, parent = release_setup(eng, {"M1": {"u1", "u2", "u3"}})
    conns = [c for c in eng.tempo.connect_roles(parent.name) if c.ctype == "change_change"]
    assert len(conns) == 6  # oracle: ordered pairs of 3 WEs
    assert all(c.source[0] != c.dest[0] for c in conns)


def test_single_we_no_pairs(tmp_path):
    eng = make_engine(tmp_path)
    wes, parent = release_setup(eng, {"M1": {"u1"}}, users=("u1",))
    assert eng.tempo.connect_roles(parent.name) == []


# ---------------------------------------------------------------------------
# deliveries


def ws_file(eng, we_name, obj):
    ws = eng.store.workspaces[eng.store.work_envs[we_name].workspace]
    relpath = next(p for p, e in ws.mapping.items() if e.object == obj)
    return os.path.join(ws.root, relpath)


def test_ready_resynchs_consult_copy_with_notification(tmp_path):
    eng = make_engine(tmp_path)
    wes, parent = release_setup(eng, {"M1": {"u2"}}, users=("u1", "u2"))
    with open(ws_file(eng, wes[1].name, "M1"), "w") as fh:
        fh.write("line a of M1\nline b of M1\nnew work by u2\n")
    eng.tempo.role_attr(wes[1].name, "to_change", "M1", "state", "ready")
    with open(ws_file(eng, wes[0].name, "M1")) as fh:
        assert fh.read() == "line a of M1\nline b of M1\nnew work by u2\n"
    assert any("resynch" in m for m in eng.store.inboxes.get("u1", []))
    assert any("notify" in m for m in eng.store.inboxes.get("u1", []))


def test_ready_merges_between_to_change_pairs(tmp_path):
    eng = make_engine(tmp_path)
    wes, parent = release_setup(eng, {"M1": {"u1", "u2"}}, users=("u1", "u2"))
    # non-overlapping edits: u1 touches line a, u2 touches line b
    with open(ws_file(eng, wes[0].name, "M1"), "w") as fh:
        fh.write("line a edited by u1\nline b of M1\n")
    with open(ws_file(eng, wes[1].name, "M1"), "w") as fh:
        fh.write("line a of M1\nline b edited by u2\n")
    eng.tempo.role_attr(wes[1].name, "to_change", "M1", "state", "ready")
    with open(ws_file(eng, wes[0].name, "M1")) as fh:
        merged = fh.read()
    assert merged == "line a edited by u1\nline b edited by u2\n"
    assert any(d["kind"] == "merge" and d["status"] == "done" for d in eng.tempo.deliveries)
    # the source WE is never mutated by its own delivery
    with open(ws_file(eng, wes[1].name, "M1")) as fh:
        assert fh.read() == "line a of M1\nline b edited by u2\n"


def test_conflicting_merge_flags_conflict_and_notifies(tmp_path):
    eng = make_engine(tmp_path)
    wes, parent = release_setup(eng, {"M1": {"u1", "u2"}}, users=("u1", "u2"))
    with open(ws_file(eng, wes[0].name, "M1"), "w") as fh:
        fh.write("line a edited by u1\nline b of M1\n")
    with open(ws_file(eng, wes[1].name, "M1"), "w") as fh:
        fh.write("line a edited by u2\nline b of M1\n")
    eng.tempo.role_attr(wes[1].name, "to_change", "M1", "state", "ready")
    with open(ws_file(eng, wes[0].name, "M1")) as fh:
        text = fh.read()
    assert "<<<<<<<" in text and ">>>>>>>" in text
    assert any(d["status"] == "conflict" for d in eng.tempo.deliveries)
    assert any("conflict" in m for m in eng.store.inboxes.get("u1", []))


def test_non_matching_event_delivers_nothing(tmp_path):
    eng = make_engine(tmp_path)
    wes, parent = release_setup(eng, {"M1": {"u2"}}, users=("u1", "u2"))
    eng.tempo.role_attr(wes[1].name, "to_change", "M1", "state", "edited")
    assert eng.tempo.deliveries == []
    assert eng.store.inboxes.get("u1", []) == []


# ---------------------------------------------------------------------------
# process rules: the release protocol


def test_available_only_after_all_copies_ready(tmp_path):
    eng = make_engine(tmp_path)
    wes, parent = release_setup(eng, {"M1": {"u1", "u2"}}, users=("u1", "u2"))
    eng.tempo.role_attr(wes[0].name, "to_change", "M1", "state", "ready")
    assert eng.tempo.role_attr(wes[0].name, "to_change", "M1", "state") == "ready"
    # one copy still not ready: no transition
    assert eng.tempo.role_attr(wes[1].name, "to_change", "M1", "state") is UNSET
    eng.tempo.role_attr(wes[1].name, "to_change", "M1", "state", "ready")
    for we in wes:
        assert eng.tempo.role_attr(we.name, "to_change", "M1", "state") == "available"


def test_validation_we_created_once_when_all_available(tmp_path):
    eng = make_engine(tmp_path)
    wes, parent = release_setup(eng, {"M1": {"u1"}, "M2": {"u1"}}, users=("u1",))
    eng.tempo.role_attr(wes[0].name, "to_change", "M1", "state", "ready")
    assert not [w for w in eng.store.work_envs.values() if w.ptype == "validation"]
    eng.tempo.role_attr(wes[0].name, "to_change", "M2", "state", "ready")
    valids = [w for w in eng.store.work_envs.values() if w.ptype == "validation"]
    assert len(valids) == 1
    # the validation WE binds the modules through its component role
    assert eng.tempo.bindings(valids[0].name) == {"component": ["M1", "M2"]}
    # idempotence: another ready event never creates a second one
    eng.tempo.role_attr(wes[0].name, "to_change", "M1", "state", "ready")
    valids = [w for w in eng.store.work_envs.values() if w.ptype == "validation"]
    assert len(valids) == 1
    assert eng.tempo.bindings(parent.name)["valid"] == [valids[0].name]


def test_isolation_under_random_interleavings(tmp_path):
    eng = make_engine(tmp_path)
    add_modules(eng, {"M1": {"u1", "u2", "u3"}, "M2": {"u1", "u2", "u3"}})
    wes = [eng.tempo.instantiate_process("development", u, ["M1", "M2"])
           for u in ("u1", "u2", "u3")]
    rng = random.Random(17)
    mirror = {}
    for step in range(300):
        we = rng.choice(wes)
        obj = rng.choice(["M1", "M2"])
        if rng.random() < 0.5:
            value = rng.choice(["edited", "compiled"])
            eng.tempo.role_attr(we.name, "to_change", obj, "state", value)
            mirror[(we.name, obj)] = value
        else:
            got = eng.tempo.role_attr(we.name, "to_change", obj, "state")
            expect = mirror.get((we.name, obj), UNSET)
            assert got == expect, f"cross-WE leak at step {step}"
