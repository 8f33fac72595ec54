"""adl: the command-line front end.

One invocation = one engine session over a locked store directory =
(at most) one transaction. Exit codes: 0 success, 1 domain error (including
an ABORTed transaction), 2 usage error.

The store directory comes from --store or ADL_STORE; the acting user from
--user or ADL_USER. Output is deterministic text, or one JSON object per
line under --format json-lines (same fields); timestamps only appear with
--verbose.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys

from . import configs, dsl, workspace
from .engine import Engine
from .journal import Journal, JournalError, open_store
from .store import StoreError, obj_ref
from .values import coerce_literal, value_repr


class Output:
    def __init__(self, fmt: str, verbose: bool):
        self.fmt = fmt
        self.verbose = verbose
        self.records: list[dict] = []

    def emit(self, text: str, **fields):
        record = {"text": text, **fields}
        self.records.append(record)
        if self.fmt == "json-lines":
            print(json.dumps(record, sort_keys=True))
        else:
            print(text)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adl", description="process-centered SE database engine")
    p.add_argument("--store", default=os.environ.get("ADL_STORE", ""), help="store directory")
    p.add_argument("--user", default=os.environ.get("ADL_USER", ""), help="acting user")
    p.add_argument("--format", choices=["text", "json-lines"], default="text")
    p.add_argument("--verbose", action="store_true", help="include timestamps in output")
    p.add_argument("--seed", type=int, default=None, help="fix randomized orderings")
    p.add_argument("--ctx", default=None, help="session context (relation visibility)")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("init", help="create an empty store")

    sp = sub.add_parser("load", help="load a .adl declaration file")
    sp.add_argument("file")

    sp = sub.add_parser("new", help="create an object")
    sp.add_argument("name")
    sp.add_argument("type")
    sp.add_argument("--partition", default="project")

    sp = sub.add_parser("mkrel", help="create a relation instance")
    sp.add_argument("origin")
    sp.add_argument("reltype")
    sp.add_argument("dest")

    sp = sub.add_parser("set", help="set an attribute")
    sp.add_argument("object")
    sp.add_argument("attr")
    sp.add_argument("value")

    sp = sub.add_parser("get", help="read an attribute (with scoping)")
    sp.add_argument("object")
    sp.add_argument("attr")

    sp = sub.add_parser("invoke", help="invoke a method as one transaction")
    sp.add_argument("object")
    sp.add_argument("method")
    sp.add_argument("args", nargs="*")

    sp = sub.add_parser("delete", help="delete an entity (trigger-mediated)")
    sp.add_argument("object")

    sp = sub.add_parser("newrev", help="snapshot a new revision")
    sp.add_argument("object")
    sp.add_argument("--branch", default="main")

    sp = sub.add_parser("history", help="has the attribute ever matched?")
    sp.add_argument("object")
    sp.add_argument("predicate", help="attr=value")

    sp = sub.add_parser("navigate", help="evaluate a path pattern")
    sp.add_argument("pattern")
    sp.add_argument("--from", dest="start", default=None)

    sp = sub.add_parser("build-sm", help="build a System Model")
    sp.add_argument("--root", required=True)
    sp.add_argument("--where", default="")
    sp.add_argument("--name", default="")

    sp = sub.add_parser("sm-check", help="check a stored System Model")
    sp.add_argument("name")

    sp = sub.add_parser("bind", help="instantiate a bound configuration")
    sp.add_argument("--sm", required=True)
    sp.add_argument("--select", default="")
    sp.add_argument("--as", dest="materialize_as", default="")

    sp = sub.add_parser("ctx", help="contexts")
    ctx_sub = sp.add_subparsers(dest="ctx_command", required=True)
    cnew = ctx_sub.add_parser("new")
    cnew.add_argument("name")
    cnew.add_argument("roots", nargs="+")
    cshow = ctx_sub.add_parser("show")
    cshow.add_argument("name")

    sp = sub.add_parser("co", help="checkout a context into a directory")
    sp.add_argument("--ctx", required=True, dest="context")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--ws", default=None)
    sp.add_argument("--link", nargs="+", action="append", default=[],
                    metavar=("static|dynamic", "obj"))

    sp = sub.add_parser("ci", help="check in modified files")
    sp.add_argument("--ws", required=True)
    sp.add_argument("paths", nargs="+")
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("sync", help="propagate between context and workspace")
    sp.add_argument("--ws", required=True)
    direction = sp.add_mutually_exclusive_group(required=True)
    direction.add_argument("--to-ws", action="store_true")
    direction.add_argument("--to-db", action="store_true")

    sp = sub.add_parser("resolve", help="map a workspace path to its object")
    sp.add_argument("--ws", required=True)
    sp.add_argument("path")

    sp = sub.add_parser("proc", help="process types and instances")
    proc_sub = sp.add_subparsers(dest="proc_command", required=True)
    pdef = proc_sub.add_parser("define")
    pdef.add_argument("file")
    pnew = proc_sub.add_parser("new")
    pnew.add_argument("type")
    pnew.add_argument("--user", dest="we_user", required=True)
    pnew.add_argument("--objects", required=True, help="comma-separated object names")
    pnew.add_argument("--name", default=None)
    pnew.add_argument("--dir", default=None)
    pnew.add_argument("--tools", default="", help="comma-separated permit-set")

    sp = sub.add_parser("we", help="work environments")
    we_sub = sp.add_subparsers(dest="we_command", required=True)
    winv = we_sub.add_parser("invoke")
    winv.add_argument("we")
    winv.add_argument("role")
    winv.add_argument("object")
    winv.add_argument("method")
    winv.add_argument("args", nargs="*")
    wset = we_sub.add_parser("set")
    wset.add_argument("we")
    wset.add_argument("role")
    wset.add_argument("object")
    wset.add_argument("attr")
    wset.add_argument("value")
    wstat = we_sub.add_parser("status")
    wstat.add_argument("we")

    sp = sub.add_parser("inbox", help="show a user's notifications")
    sp.add_argument("inbox_user")

    sp = sub.add_parser("event-log", help="committed event occurrences")
    sp.add_argument("--tail", type=int, nargs="?", const=20, default=None)

    sp = sub.add_parser("tx", help="transaction traces")
    sp.add_argument("tx_command", choices=["last"])

    sub.add_parser("snapshot", help="write a snapshot now")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if args.seed is not None:
        random.seed(args.seed)
    out = Output(args.format, args.verbose)
    store_dir = args.store
    if not store_dir:
        print("adl: no store given (--store or ADL_STORE)", file=sys.stderr)
        return 2
    if args.command == "init":
        Journal.init_store(store_dir)
        out.emit(f"initialized store at {os.path.abspath(store_dir)}",
                 store=os.path.abspath(store_dir))
        return 0
    try:
        store, journal = open_store(store_dir)
    except JournalError as err:
        print(f"adl: {err}", file=sys.stderr)
        return 1
    engine = Engine(store=store, journal=journal, ws_base=os.path.join(store_dir, "ws"))
    engine.current_context = args.ctx
    try:
        code = _dispatch(args, engine, out)
        journal.maybe_snapshot(store)
        _write_mirrors(engine, store_dir)
        return code
    except (StoreError, dsl.DslError, configs.ConfigError, workspace.WorkspaceError, ValueError) as err:
        print(f"adl: {err}", file=sys.stderr)
        return 1
    finally:
        journal.unlock()


def _write_mirrors(engine, store_dir: str):
    trace_path = os.path.join(store_dir, "last_tx.trace")
    if engine.last_trace:
        with open(trace_path, "w") as fh:
            fh.write("\n".join(engine.last_trace) + "\n")
    inbox_dir = os.path.join(store_dir, "inbox")
    for user, messages in engine.store.inboxes.items():
        os.makedirs(inbox_dir, exist_ok=True)
        with open(os.path.join(inbox_dir, user), "w") as fh:
            fh.write("\n".join(messages) + ("\n" if messages else ""))


def _fail_result(result, out) -> int:
    for line in result.outputs:
        out.emit(line)
    message = result.message or "command failed"
    print(f"adl: {message}", file=sys.stderr)
    return 1


def _dispatch(args, engine: Engine, out: Output) -> int:
    store = engine.store
    command = args.command

    if command == "load":
        with open(args.file) as fh:
            text = fh.read()
        report = dsl.load(engine, text, user=args.user)
        out.emit(report.summary(),
                 object_types=report.object_types, relation_types=report.relation_types,
                 process_types=report.process_types, events=report.events,
                 methods=report.methods)
        return 0

    if command == "new":
        result = engine.create_object(args.name, args.type, args.partition, user=args.user)
        if not result.ok:
            return _fail_result(result, out)
        out.emit(f"created {args.name} : {args.type}", object=args.name, type=args.type)
        return 0

    if command == "mkrel":
        result = engine.create_relation(args.origin, args.reltype, args.dest, user=args.user)
        if not result.ok:
            return _fail_result(result, out)
        out.emit(f"created ({args.origin}|{args.reltype}|{args.dest})",
                 origin=args.origin, reltype=args.reltype, dest=args.dest)
        return 0

    if command == "set":
        result = engine.set_attribute(args.object, args.attr, coerce_literal(args.value),
                                      user=args.user)
        if not result.ok:
            return _fail_result(result, out)
        out.emit(f"{args.object}.{args.attr} = {args.value}",
                 object=args.object, attr=args.attr, value=args.value)
        return 0

    if command == "get":
        value = engine.get_attribute(args.object, args.attr)
        out.emit(value_repr(value), object=args.object, attr=args.attr,
                 value=value_repr(value))
        return 0

    if command == "invoke":
        result = engine.invoke(args.object, args.method,
                               [coerce_literal(a) for a in args.args], user=args.user)
        for line in result.outputs:
            out.emit(line)
        if not result.ok:
            print(f"adl: {result.message}", file=sys.stderr)
            return 1
        out.emit(f"{args.method} on {args.object}: committed",
                 object=args.object, method=args.method, status=result.status)
        return 0

    if command == "delete":
        result = engine.delete(args.object, user=args.user)
        for line in result.outputs:
            out.emit(line)
        if not result.ok:
            print(f"adl: {result.message}", file=sys.stderr)
            return 1
        out.emit(f"deleted {args.object}", object=args.object, status=result.status)
        return 0

    if command == "newrev":
        result = engine.new_revision(args.object, args.branch, user=args.user)
        if not result.ok:
            return _fail_result(result, out)
        number = store.objects[args.object].branches[args.branch].revisions[-1].number
        out.emit(f"{args.object}@{number}", object=args.object, revision=number)
        return 0

    if command == "history":
        attr, _, value = args.predicate.partition("=")
        hit = engine.history_query(args.object, attr, coerce_literal(value))
        out.emit("true" if hit else "false", object=args.object, predicate=args.predicate,
                 result=hit)
        return 0

    if command == "navigate":
        items = engine.navigate(args.pattern, subject=args.start, user=args.user)
        for item in items:
            if isinstance(item, tuple) and item[0] == "rel":
                text = "(" + "|".join(item[1]) + ")"
            elif isinstance(item, tuple) and item[0] == "obj":
                text = item[1]
            else:
                text = value_repr(item)
            out.emit(text, item=text)
        out.emit(f"{len(items)} match(es)", count=len(items))
        return 0

    if command == "build-sm":
        model = configs.build_system_model(store, args.root, args.where, args.name)
        payload = json.dumps({
            "root": model.root, "constraint": model.constraint_text,
            "interfaces": model.interfaces, "realizations": model.realizations,
        }, sort_keys=True)

        def save():
            if model.name not in store.objects:
                engine.create_object_in_tx(model.name, "system_model", "project", user=args.user)
            ctx = engine._base_ctx(obj_ref(model.name), "build-sm", args.user)
            engine.write_attr(ctx, obj_ref(model.name), "root", model.root, command="build-sm")
            engine.write_attr(ctx, obj_ref(model.name), "constraints",
                              model.constraint_text, command="build-sm")
            engine.write_attr(ctx, obj_ref(model.name), "selection", payload, command="build-sm")

        result = engine.run_in_tx("build-sm", model.name, args.user, save)
        if not result.ok:
            return _fail_result(result, out)
        for line in model.listing(store):
            out.emit(line, component=line)
        out.emit(f"system model {model.name} saved", model=model.name)
        return 0

    if command in ("sm-check", "bind"):
        sm_name = args.name if command == "sm-check" else args.sm
        model = _load_model(store, sm_name)
        if command == "sm-check":
            violations = configs.check_model_consistency(store, model)
            for v in violations:
                out.emit(v, violation=v)
            out.emit("consistent" if not violations else f"{len(violations)} violation(s)",
                     model=sm_name, violations=len(violations))
            return 0 if not violations else 1
        bound = configs.instantiate_configuration(store, model, args.select)
        if args.materialize_as:
            configs.materialize_configuration(engine, bound, args.materialize_as, user=args.user)
        for line in bound.listing():
            out.emit(line, component=line)
        return 0

    if command == "ctx":
        if args.ctx_command == "new":
            members = workspace.make_context(engine, args.name, args.roots, user=args.user)
            out.emit(f"context {args.name}: {len(members)} member(s)",
                     context=args.name, members=members)
            return 0
        members = store.context_membership(args.name)
        for m in members:
            out.emit(m, member=m)
        out.emit(f"{len(members)} member(s)", context=args.name, count=len(members))
        return 0

    if command == "co":
        mode_map = {}
        for group in args.link:
            if len(group) < 2 or group[0] not in ("static", "dynamic"):
                raise StoreError("--link needs: static|dynamic <object>...")
            for obj in group[1:]:
                mode_map[obj] = f"{group[0]}-link"
        ws = workspace.checkout(engine, args.context, args.dir, args.user or "anonymous",
                                mode_map, ws_name=args.ws)
        out.emit(f"workspace {ws.name}: {len(ws.mapping)} file(s) under {ws.root}",
                 workspace=ws.name, files=sorted(ws.mapping))
        return 0

    if command == "ci":
        created = workspace.checkin(engine, args.ws, args.paths, args.user or "anonymous",
                                    force=args.force)
        for obj, number in created:
            out.emit(f"{obj}@{number}", object=obj, revision=number)
        out.emit(f"{len(created)} revision(s) created", count=len(created))
        return 0

    if command == "sync":
        direction = "context-to-ws" if args.to_ws else "ws-to-context"
        report = workspace.sync(engine, args.ws, direction, args.user or "anonymous")
        for label in ("added", "removed", "updated", "new_objects", "conflicts"):
            for item in getattr(report, label):
                out.emit(f"{label}: {item}", kind=label, item=item)
        out.emit("no changes" if report.empty() else "sync complete",
                 empty=report.empty())
        return 0

    if command == "resolve":
        entry = workspace.resolve_path(store, args.ws, args.path)
        text = f"{entry.object} branch={entry.branch} revision={entry.revision} mode={entry.mode}"
        out.emit(text, object=entry.object, branch=entry.branch,
                 revision=entry.revision, mode=entry.mode)
        return 0

    if command == "proc":
        if args.proc_command == "define":
            with open(args.file) as fh:
                report = dsl.load(engine, fh.read(), user=args.user)
            out.emit(report.summary(), process_types=report.process_types)
            return 0
        objects = [o for o in args.objects.split(",") if o]
        tools = tuple(t for t in args.tools.split(",") if t)
        wrec = engine.tempo.instantiate_process(args.type, args.we_user, objects,
                                                we_name=args.name, directory=args.dir,
                                                tools=tools)
        bindings = engine.tempo.bindings(wrec.name)
        out.emit(f"work environment {wrec.name} for {args.we_user}",
                 we=wrec.name, bindings=bindings)
        return 0

    if command == "we":
        if args.we_command == "invoke":
            result = engine.tempo.invoke_in_we(args.we, args.role, args.object, args.method,
                                               [coerce_literal(a) for a in args.args])
            for line in result.outputs:
                out.emit(line)
            if not result.ok:
                print(f"adl: {result.message}", file=sys.stderr)
                return 1
            out.emit(f"{args.method} on {args.object} in {args.we}: committed",
                     we=args.we, status=result.status)
            return 0
        if args.we_command == "set":
            engine.tempo.role_attr(args.we, args.role, args.object, args.attr,
                                   coerce_literal(args.value))
            out.emit(f"{args.we}/{args.role}/{args.object}.{args.attr} = {args.value}",
                     we=args.we, role=args.role, object=args.object, attr=args.attr)
            return 0
        wrec = store.work_envs.get(args.we)
        if wrec is None:
            raise StoreError(f"unknown work environment {args.we!r}")
        bindings = engine.tempo.bindings(args.we)
        out.emit(f"{args.we}: process={wrec.ptype} user={wrec.user} ws={wrec.workspace}",
                 we=args.we, process=wrec.ptype, user=wrec.user)
        for role in sorted(bindings):
            for obj in bindings[role]:
                rel = engine.tempo.binding_rel(args.we, role, obj)
                overlay = " ".join(f"{k}={value_repr(v)}" for k, v in sorted(rel.attributes.items()))
                text = f"  {role}: {obj}" + (f" [{overlay}]" if overlay else "")
                out.emit(text, role=role, object=obj,
                         overlay={k: value_repr(v) for k, v in sorted(rel.attributes.items())})
        parents = [p for p, _, _ in engine.tempo._parent_candidates()]
        shown = 0
        for parent in parents:
            for conn in engine.tempo.connect_roles(parent):
                if args.we in (conn.source[0], conn.dest[0]):
                    text = (f"  connection {conn.ctype}: {conn.source[0]}/{conn.source[1]}"
                            f"/{conn.source[2]} -> {conn.dest[0]}/{conn.dest[1]}/{conn.dest[2]}")
                    out.emit(text, connection=conn.ctype, source=list(conn.source),
                             dest=list(conn.dest))
                    shown += 1
        out.emit(f"{shown} connection(s)", connections=shown)
        return 0

    if command == "inbox":
        messages = store.inboxes.get(args.inbox_user, [])
        for message in messages:
            out.emit(message, message=message)
        out.emit(f"{len(messages)} message(s)", user=args.inbox_user, count=len(messages))
        return 0

    if command == "event-log":
        entries = store.event_log
        if args.tail is not None:
            entries = entries[-args.tail:]
        for entry in entries:
            text = f"{entry['event']}|{entry['target']}|{entry['command']}|{entry['user']}"
            if out.verbose:
                text += f"|{entry['ts']}"
            out.emit(text, **entry)
        out.emit(f"{len(entries)} event(s)", count=len(entries))
        return 0

    if command == "tx":
        trace_path = os.path.join(args.store, "last_tx.trace")
        try:
            with open(trace_path) as fh:
                for line in fh.read().splitlines():
                    out.emit(line, trace=line)
        except FileNotFoundError:
            out.emit("no transaction recorded", trace=None)
        return 0

    if command == "snapshot":
        engine.journal.snapshot(store)
        out.emit(f"snapshot written at seq {engine.journal.seq}", seq=engine.journal.seq)
        return 0

    raise StoreError(f"unknown command {command!r}")


def _load_model(store, name: str) -> configs.SystemModel:
    obj = store.live_object(name)
    payload = obj.attributes.get("selection")
    if not payload:
        raise configs.ConfigError(f"{name!r} is not a stored system model")
    data = json.loads(payload)
    return configs.SystemModel(
        name=name, root=data["root"], constraint_text=data["constraint"],
        interfaces=dict(data["interfaces"]), realizations=dict(data["realizations"]),
    )


if __name__ == "__main__":
    sys.exit(main())
