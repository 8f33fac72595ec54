import os

import pytest

from adelite import dsl
from adelite.engine import Engine
from adelite.values import Domain

DATA = os.path.join(os.path.dirname(__file__), "data")


def read(name):
    with open(os.path.join(DATA, name)) as fh:
        return fh.read()


def decls_by_kind(decls, kind):
    return [d for d in decls if d[0] == kind]


# ---------------------------------------------------------------------------
# The three programs parse unmodified (keyword spellings are accepted aliases)


def test_philosophers_program_parses():
    decls = dsl.parse(read("philosophers.adl"))
    types = {d[1].name: d[1] for d in decls_by_kind(decls, "type")}
    assert set(types) == {"Philo", "Fork", "Use"}
    assert types["Philo"].supertypes == ("rset",)
    assert types["Use"].kind == "relation"
    assert types["Use"].cardinality == "N:N"
    assert [t.coupling for t in types["Use"].triggers] == ["PRE", "POST", "AFTER"]
    assert [t.scope for t in types["Use"].triggers] == ["ORIGIN", "ORIGIN", "DEST"]
    philo_methods = {m.name for m in types["Philo"].methods}
    assert philo_methods == {"eat", "think"}
    assert [t.coupling for t in types["Philo"].triggers] == ["ERROR"]
    free = decls_by_kind(decls, "method")
    assert [m[1].name for m in free] == ["newstate"]
    assert free[0][1].params == ("state",)
    state = next(a for a in types["Philo"].attributes if a.name == "STATE")
    assert state.domain == Domain("enum", ("eat", "think", "hungry"))
    assert state.default == "think" and state.initial == "think"


def test_change_management_program_parses():
    decls = dsl.parse(read("change_mgmt_listing.adl"))
    events = {d[1].name: d[1] for d in decls_by_kind(decls, "event")}
    assert events["Delete_Official"].priority == 1
    types = {d[1].name: d[1] for d in decls_by_kind(decls, "type")}
    assert set(types) == {"prog", "RefWS"}
    prog = types["prog"]
    assert [t.coupling for t in prog.triggers] == ["PRE", "AFTER"]
    assert [t.event for t in prog.triggers] == ["Delete_Official", "validate"]
    assert {m.name for m in prog.methods} == {"Check_Official"}
    refws = types["RefWS"]
    assert refws.kind == "relation"
    couplings = [(t.coupling, t.event) for t in refws.triggers]
    assert couplings == [
        ("POST", "replace"),
        ("POST", "validate"),
        ("POST", "invalidate"),
        ("AFTER", "officialize"),
    ]
    assert all(t.scope == "DEST" for t in refws.triggers)


def test_release_program_parses():
    decls = dsl.parse(read("release_listing.adl"))
    types = {d[1].name: d[1] for d in decls_by_kind(decls, "type")}
    release = types["release"]
    assert release.is_process
    assert release.user_role == "PMmanager"
    assert {r.name for r in release.roles} == {"implement", "valid", "components"}
    assert {r.name: r.base for r in release.roles} == {
        "implement": "development", "valid": "validation", "components": "module",
    }
    rules = [t for t in release.triggers if t.coupling == "RULE"]
    assert len(rules) == 1 and rules[0].event == "ready"
    conns = {c.name: c for c in release.connections}
    assert conns["consult_change"].kinds == ("notify", "resynch")
    assert conns["consult_change"].when_a == ("to_consult", "name")
    assert conns["consult_change"].when_b == ("to_change", "name")
    assert dict(conns["consult_change"].events) == {"notify_when": "ready", "resynch_when": "ready"}
    assert conns["change_change"].kinds == ("notify", "merge")
    assert dict(conns["change_change"].events) == {"notify_when": "ready", "merge_when": "ready"}
    events = {e.name for e in release.events}
    assert events == {"ready"}


# ---------------------------------------------------------------------------
# Loading


def test_philosophers_load_report():
    eng = Engine(allow_external=False)
    report = dsl.load(eng, read("philosophers.adl"))
    assert len(report.object_types) == 2
    assert len(report.relation_types) == 1
    assert len(report.methods) == 1


def test_empty_file_loads_with_empty_report():
    eng = Engine(allow_external=False)
    report = dsl.load(eng, "")
    assert report.summary() == "nothing to define"


def test_undefined_base_registers_nothing():
    eng = Engine(allow_external=False)
    before = eng.store.digest()
    with pytest.raises(dsl.DslError):
        dsl.load(eng, "OBJECT a IS ghost;\nEND a;\nOBJECT ok;\nEND ok;")
    assert eng.store.digest() == before  # the whole load aborted


def test_load_is_one_transaction_for_all_declarations():
    eng = Engine(allow_external=False)
    before = eng.store.digest()
    text = read("philosophers.adl") + "\nOBJECT bad IS missing;\nEND bad;\n"
    with pytest.raises(dsl.DslError):
        dsl.load(eng, text)
    assert eng.store.digest() == before


def test_attribute_forms():
    eng = Engine(allow_external=False)
    dsl.load(eng, """
OBJECT kit;
  DEFATTRIBUTE
    suffix: (p, c, h, y, l) := c ;
    system : set_of (MSDOS, Unix*, VMS);
    size : integer DEFAULT 3 ;
    born : date ;
    ready : boolean := false ;
    state = tested, untested, available ;
END kit;
""")
    eff = eng.store.schema.effective("kit")
    suffix = eff.attributes["suffix"]
    assert suffix.domain.values == ("p", "c", "h", "y", "l")
    assert suffix.default == "c" and suffix.initial == "c"
    system = eff.attributes["system"]
    assert system.multiplicity == "set"
    assert system.default == frozenset({"Unix"})
    assert eff.attributes["size"].default == 3
    assert eff.attributes["size"].initial is None
    assert eff.attributes["ready"].default is False
    assert eff.attributes["state"].domain.values == ("tested", "untested", "available")


def test_computed_attribute_marker():
    eng = Engine(allow_external=False)
    dsl.load(eng, """
OBJECT host;
  DEFATTRIBUTE
    machine COMP := "uname -n" ;
END host;
""")
    adef = eng.store.schema.effective("host").attributes["machine"]
    assert adef.computed == "uname -n"


def test_partition_declaration_and_scoped_type():
    eng = Engine(allow_external=False)
    dsl.load(eng, """
PARTITION sub UNDER project SUBPROJECT ;
OBJECT widget;
END widget;
""")
    assert "sub" in eng.store.schema.partitions
    assert eng.store.schema.partitions["sub"].subproject


def test_alias_keywords_accepted():
    for kw in ("OBJECT", "TYPEOBJET", "TYPEOBJECT"):
        eng = Engine(allow_external=False)
        dsl.load(eng, f"{kw} thing;\nEND thing;")
        assert "thing" in eng.store.schema.partitions["project"].types
    for kw in ("RELTYPE", "TYPERELATION", "RELATION"):
        eng = Engine(allow_external=False)
        dsl.load(eng, f"{kw} link;\nEND link;")
        assert eng.store.schema.partitions["project"].types["link"].kind == "relation"


def test_parse_error_has_position():
    with pytest.raises(Exception) as err:
        dsl.parse("OBJECT ;")
    assert "line" in str(err.value)


def test_domain_pairs_with_or_separator():
    decls = dsl.parse("""
RELTYPE dep;
DOMAIN
  type = prog -> type = interface OR
  type = interface -> type = interface ;
CARD N:N; DAG ;
END dep ;
""")
    dep = decls[0][1]
    assert dep.domain_pairs == (
        ("type = prog", "type = interface"),
        ("type = interface", "type = interface"),
    )
    assert dep.cardinality == "N:N"
    assert dep.structure == "DAG"


def test_stub_bodies_and_comments():
    decls = dsl.parse("""
OBJECT Module ;
  ATTRIBUTE
    state = tested, untested, available ;
  METHOD
    compile ...;    -- with -C option
END Module;
""")
    module = decls[0][1]
    assert [m.name for m in module.methods] == ["compile"]
    assert module.methods[0].body == ""


def test_type_local_event_declaration_registers_globally():
    eng = Engine(allow_external=False)
    dsl.load(eng, """
OBJECT gadget;
  EVENT wobble = (!cmd = shake) ; PRIORITY 3;
  METHOD shake DO { } ;
  PRE ON wobble DO print "wobbling" ;
END gadget;
""")
    assert eng.store.events["wobble"].priority == 3
    eng.create_object("G", "gadget", user="u")
    res = eng.invoke("G", "shake", user="u")
    assert res.outputs == ("wobbling",)


def test_role_block_with_local_members():
    eng = Engine(allow_external=False)
    dsl.load(eng, """
OBJECT module IS document;
END module;
PROCESS review ;
  ROLE under_review = module {
    ATTRIBUTE verdict = accepted, rejected ;
    METHOD judge DO mda self -a verdict accepted ;
  } ;
END review;
""")
    role_type = eng.store.schema.effective("review.under_review")
    assert "verdict" in role_type.attributes
    assert "judge" in role_type.methods
    eng.create_object("M", "module", user="u")
    we = eng.tempo.instantiate_process("review", "u", ["M"])
    res = eng.tempo.invoke_in_we(we.name, "under_review", "M", "judge")
    assert res.ok, res.message
    assert eng.tempo.role_attr(we.name, "under_review", "M", "verdict") == "accepted"
