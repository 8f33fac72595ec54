import json
import os
import subprocess
import sys

import pytest

PHILO = os.path.join(os.path.dirname(__file__), "data", "philosophers.adl")
CHANGE = os.path.join(os.path.dirname(__file__), "data", "change_mgmt.adl")


def adl(store, *args, user="u"):
    proc = subprocess.run(
        [sys.executable, "-m", "adelite.cli", "--store", store, "--user", user, *args],
        capture_output=True, text=True, timeout=60,
    )
    return proc


@pytest.fixture
def store(tmp_path):
    path = str(tmp_path / "db")
    assert adl(path, "init").returncode == 0
    return path


def test_init_then_load_registers_types(store):
    proc = adl(store, "load", PHILO)
    assert proc.returncode == 0
    assert "2 object types" in proc.stdout
    assert "1 relation types" in proc.stdout
    assert "1 free methods" in proc.stdout


def test_no_store_is_usage_error(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "adelite.cli", "new", "x", "y"],
                          capture_output=True, text=True, env={**os.environ, "ADL_STORE": ""})
    assert proc.returncode == 2


def test_unknown_command_exits_2(store):
    assert adl(store, "frobnicate").returncode == 2


def test_philosophers_fork_occupied_message_and_exit_code(store):
    adl(store, "load", PHILO)
    for i in (1, 2):
        assert adl(store, "new", f"Philo{i}", "Philo").returncode == 0
        assert adl(store, "new", f"F{i}", "Fork").returncode == 0
    for pair in (("Philo1", "F1"), ("Philo1", "F2"), ("Philo2", "F2"), ("Philo2", "F1")):
        assert adl(store, "mkrel", pair[0], "Use", pair[1]).returncode == 0
    assert adl(store, "invoke", "Philo1", "eat").returncode == 0
    proc = adl(store, "invoke", "Philo2", "eat")
    assert proc.returncode == 1
    assert "The F1 fork is occupied" in proc.stdout
    assert adl(store, "get", "Philo2", "STATE").stdout.strip() == "hungry"


def test_failed_command_leaves_store_digest_unchanged(store, tmp_path):
    adl(store, "load", PHILO)
    adl(store, "new", "Philo1", "Philo")

    def digest():
        from adelite.journal import Journal

        return Journal(store).recover().digest()

    before = digest()
    proc = adl(store, "new", "Philo1", "Philo")  # duplicate name
    assert proc.returncode == 1
    assert digest() == before


def test_output_is_deterministic_and_json_mirrors(store):
    adl(store, "load", PHILO)
    adl(store, "new", "Philo1", "Philo")
    one = adl(store, "get", "Philo1", "STATE")
    two = adl(store, "get", "Philo1", "STATE")
    assert one.stdout == two.stdout
    as_json = adl(store, "--format", "json-lines", "get", "Philo1", "STATE")
    record = json.loads(as_json.stdout.splitlines()[0])
    assert record["value"] == "think"
    assert record["text"] == one.stdout.strip()


def test_tx_last_prints_stable_trace(store):
    adl(store, "load", PHILO)
    for i in (1, 2):
        adl(store, "new", f"Philo{i}", "Philo")
        adl(store, "new", f"F{i}", "Fork")
    for pair in (("Philo1", "F1"), ("Philo1", "F2"), ("Philo2", "F2"), ("Philo2", "F1")):
        adl(store, "mkrel", pair[0], "Use", pair[1])
    adl(store, "invoke", "Philo1", "eat")
    proc = adl(store, "tx", "last")
    assert proc.returncode == 0
    lines = proc.stdout.strip().splitlines()
    get_summary = ('{IF STATE = occupied THEN {Print "The %name fork is occupied"; ABORT}'
                   " ELSE newstate self occupied}")
    golden = [
        "PRE|eat|0|rel:Use(Philo1->F1)|{get !D}",
        f"METHOD|get|0|Fork|{get_summary}",
        "METHOD|newstate|0|global|{{mda self state -a STATE}}",
        "PRE|eat|0|rel:Use(Philo1->F2)|{get !D}",
        f"METHOD|get|0|Fork|{get_summary}",
        "METHOD|newstate|0|global|{{mda self state -a STATE}}",
        "METHOD|eat|0|Philo|{newstate self eat}",
        "METHOD|newstate|0|global|{{mda self state -a STATE}}",
        "COMMIT||0||",
    ]
    assert lines == golden


def test_event_log_tail(store):
    adl(store, "load", PHILO)
    adl(store, "new", "Philo1", "Philo")
    adl(store, "invoke", "Philo1", "think")
    proc = adl(store, "event-log", "--tail", "5")
    assert proc.returncode == 0
    assert "think|Philo1|think|u" in proc.stdout


def test_history_and_set_and_get(store):
    adl(store, "load", CHANGE)
    adl(store, "new", "P", "prog")
    assert adl(store, "set", "P", "state", "official").returncode == 0
    assert adl(store, "get", "P", "state").stdout.strip() == "official"
    assert adl(store, "history", "P", "state=edited").stdout.strip() == "true"
    assert adl(store, "history", "P", "state=official").stdout.strip() == "true"
    assert adl(store, "history", "P", "ghost=1").returncode == 1  # unknown attribute


def test_change_management_via_cli(store):
    adl(store, "load", CHANGE)
    adl(store, "new", "P", "prog", user="pm")
    for u in ("ua", "ub"):
        adl(store, "new", f"ws_{u}", "workspace", user=u)
        adl(store, "set", f"ws_{u}", "author", u, user=u)
        adl(store, "mkrel", f"ws_{u}", "RefWS", "P", user=u)
    assert adl(store, "invoke", "P", "validate", user="ua").returncode == 0
    assert adl(store, "get", "P", "state").stdout.strip() == "edited"
    assert adl(store, "invoke", "P", "validate", user="ub").returncode == 0
    assert adl(store, "get", "P", "state").stdout.strip() == "official"
    proc = adl(store, "delete", "P", user="pm")
    assert proc.returncode == 1
    inbox = adl(store, "inbox", "ua")
    assert "1 message(s)" in inbox.stdout
    # inbox file mirror exists for committed notifications
    assert os.path.exists(os.path.join(store, "inbox", "ua"))


def test_workspace_cycle_via_cli(store, tmp_path):
    adl(store, "load", os.path.join(os.path.dirname(__file__), "data", "release.adl"))
    adl(store, "new", "V23", "document", user="pm")
    adl(store, "new", "M1", "module", user="pm")
    adl(store, "set", "M1", "content", "hello", user="pm")
    adl(store, "mkrel", "V23", "part", "M1", user="pm")
    assert adl(store, "ctx", "new", "work", "V23").returncode == 0
    wsdir = str(tmp_path / "ws")
    proc = adl(store, "co", "--ctx", "work", "--dir", wsdir, "--ws", "wsA", user="alice")
    assert proc.returncode == 0, proc.stderr
    relpath = next(os.path.join(d, f) for d, _, fs in os.walk(wsdir) for f in fs)
    rel = os.path.relpath(relpath, wsdir)
    proc = adl(store, "resolve", "--ws", "wsA", rel)
    assert proc.returncode == 0
    assert "M1" in proc.stdout
    with open(relpath, "w") as fh:
        fh.write("edited body")
    proc = adl(store, "ci", "--ws", "wsA", rel, user="alice")
    assert proc.returncode == 0
    assert "M1@" in proc.stdout
    assert adl(store, "get", "M1", "content").stdout.strip() == "edited body"
    proc = adl(store, "sync", "--ws", "wsA", "--to-ws", user="alice")
    assert proc.returncode == 0
    assert "no changes" in proc.stdout


def test_build_sm_bind_smcheck_via_cli(store):
    adl(store, "new", "famA", "family")
    adl(store, "new", "I1", "interface")
    adl(store, "mkrel", "famA", "has_interface", "I1")
    for real, system in (("R1", "unix"), ("R2", "VMS")):
        adl(store, "new", real, "realization")
        adl(store, "mkrel", "I1", "is_realized", real)
    proc = adl(store, "build-sm", "--root", "I1", "--name", "sm1")
    assert proc.returncode == 0
    assert "famA/I1/R1" in proc.stdout
    proc = adl(store, "sm-check", "sm1")
    assert proc.returncode == 0
    assert "consistent" in proc.stdout
    proc = adl(store, "bind", "--sm", "sm1", "--select", "")
    assert proc.returncode == 0
    assert "famA/I1/R1@1" in proc.stdout


def test_proc_and_we_via_cli(store):
    adl(store, "load", os.path.join(os.path.dirname(__file__), "data", "release.adl"))
    adl(store, "new", "M1", "module", user="pm")
    adl(store, "set", "M1", "content", "body", user="pm")
    adl(store, "set", "M1", "responsible", "u1", user="pm")
    proc = adl(store, "proc", "new", "development", "--user", "u1", "--objects", "M1",
               "--name", "dev1")
    assert proc.returncode == 0, proc.stderr
    proc = adl(store, "we", "status", "dev1")
    assert proc.returncode == 0
    assert "to_change: M1" in proc.stdout
    proc = adl(store, "we", "invoke", "dev1", "to_change", "M1", "compile", user="u1")
    assert proc.returncode == 0
    proc = adl(store, "we", "set", "dev1", "to_change", "M1", "state", "edited", user="u1")
    assert proc.returncode == 0
    proc = adl(store, "we", "status", "dev1")
    assert "state=edited" in proc.stdout


def test_navigate_via_cli(store):
    adl(store, "load", CHANGE)
    adl(store, "new", "P", "prog")
    for u in ("ua", "ub"):
        adl(store, "new", f"ws_{u}", "workspace", user=u)
        adl(store, "mkrel", f"ws_{u}", "RefWS", "P", user=u)
    proc = adl(store, "navigate", "(**|RefWS|**)")
    assert proc.returncode == 0
    assert "2 match(es)" in proc.stdout
    proc = adl(store, "navigate", "(self|RefWS|**)", "--from", "ws_ua")
    assert "1 match(es)" in proc.stdout


def test_partition_scoped_definitions_via_cli(store, tmp_path):
    schema = tmp_path / "part.adl"
    schema.write_text("""
PARTITION maint UNDER project SUBPROJECT ;
OBJECT gadget;
  DEFATTRIBUTE
    state : (dev, frozen) := dev ;
END gadget;
""")
    assert adl(store, "load", str(schema)).returncode == 0
    assert adl(store, "new", "G", "gadget", "--partition", "maint").returncode == 0
    assert adl(store, "get", "G", "state").stdout.strip() == "dev"
