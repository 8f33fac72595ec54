"""Transactional command engine with ECA trigger coupling.

One engine owns one store and one serialized command stream. A top-level
command runs as a transaction:

    PRE* METHOD POST* COMMIT AFTER*          (success)
    ... ABORT ROLLBACK ERROR*                (failure)

PRE and POST triggers run inside the transaction (POST may still ABORT);
AFTER triggers are decoupled: queued during the transaction and executed
after commit, each as a fresh transaction on the same stream (cascade depth
bounded). ERROR triggers run after rollback, non-transactionally: their
writes apply directly, nested calls raise no further events, and ABORT
inside them is a logged no-op.

Nested method calls run inside the enclosing transaction and contribute
their events to it; an ABORT anywhere before commit undoes the whole
command, including workspace file changes (before-images).

Trigger candidates for a command are collected at command start against the
current view: entity triggers from the resolved schema, ORIGIN/DEST triggers
of live relation instances touching the target (LOCAL ones only when the
relation is visible in the session context, GLOBAL ones always and with
administrator rights), and role/process triggers when running inside a work
environment. Order: event priority descending, then most-specific-first,
then a stable key.
"""

from __future__ import annotations

import datetime
import os
import shlex
import subprocess
from dataclasses import dataclass, field

from . import actions, lang
from .schema import MethodDef, SchemaError, TriggerBlock
from .store import (
    DEFAULT_BRANCH,
    EvalContext,
    Store,
    StoreError,
    WriteRecord,
    obj_ref,
    ref_text,
    rel_ref,
)
from .values import UNSET, encode_value, value_repr


class EngineError(ValueError):
    pass


class AbortSignal(Exception):
    def __init__(self, message=""):
        self.message = message
        super().__init__(message or "ABORT")


BUILTIN_COMMANDS = {"delete", "copy", "replace", "set"}


@dataclass
class Candidate:
    block: TriggerBlock
    priority: int
    rank: int  # 0 role, 1 process, 2 entity, 3 relation
    spec_idx: int  # inheritance position, most specific first
    subject: tuple  # evaluation subject (the command target)
    bindings: dict
    source: str
    admin: bool = False
    key: tuple = ()
    action_subject: tuple | None = None  # `self` in the action (relation instance
    # for relation-scoped triggers), defaults to the command target

    def sort_key(self):
        return (-self.priority, self.rank, self.spec_idx) + self.key


@dataclass
class Transaction:
    id: int
    command: str
    target: str
    user: str
    ts: datetime.datetime
    depth: int = 0
    parent: int | None = None
    status: str = "running"
    message: str = ""
    undo: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    writes: list = field(default_factory=list)
    after_queue: list = field(default_factory=list)
    error_queue: list = field(default_factory=list)
    file_undo: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    commands: list = field(default_factory=list)  # (command, target-ref) seen
    trace: list = field(default_factory=list)


@dataclass
class TxResult:
    status: str  # committed | aborted | error
    tx_id: int
    message: str = ""
    outputs: tuple = ()
    spawned: tuple = ()

    @property
    def ok(self):
        return self.status == "committed"


class Engine:
    def __init__(
        self,
        store: Store | None = None,
        journal=None,
        clock=None,
        external_errors: str = "abort",
        cascade_limit: int = 100,
        allow_external: bool = True,
        ws_base: str | None = None,
    ):
        self.store = store or Store()
        self.journal = journal
        self.clock = clock or datetime.datetime.now
        self.external_errors = external_errors
        self.cascade_limit = cascade_limit
        self.allow_external = allow_external
        self.ws_base = ws_base
        self.store.command_runner = self._computed_runner
        self.current_tx: Transaction | None = None
        self.current_context: str | None = None
        self.error_mode = False
        self.tx_seq = 0
        self._pipeline_cache: dict = {}
        self._touch_cache: dict = {}
        self.session_log: list[dict] = []
        self.last_trace: list[str] = []
        self.post_commit_hooks = []
        from .tempo import TempoManager  # circular by design: tempo rides the engine

        self.tempo = TempoManager(self)

    # ------------------------------------------------------------------
    # Low-level transaction plumbing

    def log(self, kind: str, **fields):
        entry = {"kind": kind, **fields}
        self.session_log.append(entry)
        return entry

    def apply(self, delta: dict):
        if self.error_mode:
            self.store.apply(delta)
            self._error_effects.append(delta)
            self.log("error-delta", delta=delta)
            return
        tx = self.current_tx
        if tx is None:
            raise EngineError("mutation outside a transaction")
        undo = self.store.apply(delta)
        tx.undo.append(undo)
        tx.deltas.append(delta)
        self.log("delta", tx=tx.id, delta=delta)

    def file_write(self, path: str, data: bytes):
        tx = self.current_tx
        if tx is not None and path not in tx.file_undo:
            tx.file_undo[path] = _read_file(path)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(data)

    def file_delete(self, path: str):
        tx = self.current_tx
        if tx is not None and path not in tx.file_undo:
            tx.file_undo[path] = _read_file(path)
        if os.path.exists(path):
            os.remove(path)

    def trace(self, tx: Transaction, phase: str, event="", priority=0, source="", action="", target=""):
        line = f"{phase}|{event}|{priority}|{source}|{action}"
        tx.trace.append(line)
        self.log("trace", tx=tx.id, phase=phase, event=event, priority=priority,
                 source=source, action=action, target=target)

    def begin(self, command: str, target: str, user: str, depth=0, parent=None) -> Transaction:
        if self.current_tx is not None:
            raise EngineError("transaction already running")
        self.tx_seq += 1
        tx = Transaction(
            id=self.tx_seq, command=command, target=target, user=user or "",
            ts=self.clock(), depth=depth, parent=parent,
        )
        self.current_tx = tx
        self.log("begin", tx=tx.id, command=command, target=target, user=tx.user,
                 parent=parent, depth=depth)
        return tx

    def _rollback(self, tx: Transaction, message: str):
        for undo in reversed(tx.undo):
            self.store.apply(undo)
        for path, before in reversed(list(tx.file_undo.items())):
            if before is None:
                if os.path.exists(path):
                    os.remove(path)
            else:
                os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
                with open(path, "wb") as fh:
                    fh.write(before)
        tx.status = "aborted"
        tx.message = message
        self.trace(tx, "ROLLBACK", action=message)

    def _commit(self, tx: Transaction):
        raised = self._raised_events(tx)
        for event_name, subject in raised:
            self.apply({
                "op": "evlog", "event": event_name, "target": ref_text(subject),
                "command": tx.command, "user": tx.user, "ts": tx.ts.isoformat(),
            })
        tx.status = "committed"
        self.trace(tx, "COMMIT")
        if self.journal is not None and tx.deltas:
            self.journal.append_group(tx.deltas, tx.ts, tx.user, tx.command)
        self.log("commit", tx=tx.id)
        return raised

    def _raised_events(self, tx: Transaction):
        """Named event rules plus the top-level command event for this tx.

        (Sub-command events drive triggers directly; the committed event log
        records the command plus named rules to keep it readable.)
        """
        raised = []
        for command, target, _we in tx.commands[:1]:
            raised.append((lang.canonical_command(command), target))
        subjects = []
        for w in tx.writes:
            if w.subject not in subjects:
                subjects.append(w.subject)
        for name in sorted(self.store.events):
            rule = self.store.events[name]
            ast = _cached_event(rule.source)
            for subject in subjects:
                ctx = EvalContext(self.store, subject=subject, command=tx.command,
                                  user=tx.user, writes=tx.writes)
                if lang.eval_event(ast, ctx):
                    raised.append((name, subject))
        return raised

    # ------------------------------------------------------------------
    # Public command entry points

    def run_in_tx(self, command: str, target: str, user: str, fn, depth=0, parent=None) -> TxResult:
        """Run fn inside a fresh transaction (or join the running one)."""
        if self.current_tx is not None:
            fn()
            return TxResult("committed", self.current_tx.id)
        tx = self.begin(command, target, user, depth=depth, parent=parent)
        try:
            fn()
        except AbortSignal as sig:
            message = sig.message or (tx.outputs[-1] if tx.outputs else "aborted")
            self._rollback(tx, message)
            self.current_tx = None
            self._run_error_queue(tx)
            self.last_trace = tx.trace
            return TxResult("aborted", tx.id, message, tuple(tx.outputs))
        except (StoreError, SchemaError, lang.LangError, actions.ActionError, EngineError) as err:
            self._rollback(tx, str(err))
            self.current_tx = None
            self.last_trace = tx.trace
            return TxResult("error", tx.id, str(err), tuple(tx.outputs))
        raised = self._commit(tx)
        self.current_tx = None
        spawned = self._run_after_queue(tx)
        for hook in self.post_commit_hooks:
            hook(tx, raised)
        self.last_trace = tx.trace
        return TxResult("committed", tx.id, tx.message, tuple(tx.outputs), tuple(spawned))

    def invoke(self, target, method: str, args=(), flags=None, user="", we=None) -> TxResult:
        """Execute a method on an object or relation as one transaction."""
        ref = self.to_ref(target)
        return self.run_in_tx(
            method, ref_text(ref), user,
            lambda: self._invoke_inner(ref, method, list(args), dict(flags or {}), user=user, we=we),
        )

    def create_object(self, name: str, type_name: str, partition: str = "project", user="") -> TxResult:
        return self.run_in_tx("create", name, user,
                              lambda: self.create_object_in_tx(name, type_name, partition, user))

    def create_relation(self, origin: str, reltype: str, dest: str, user="") -> TxResult:
        ctx = self._base_ctx(None, "mkrel", user)
        return self.run_in_tx(
            "mkrel", f"({origin}|{reltype}|{dest})", user,
            lambda: self.create_relation_in_tx(ctx, origin, reltype, dest),
        )

    def set_attribute(self, target, attr: str, value, user="") -> TxResult:
        ref = self.to_ref(target)
        declared = [WriteRecord(ref, ref, attr, None, value)]
        return self.run_in_tx(
            "set", ref_text(ref), user,
            lambda: self._invoke_inner(ref, "set", [attr, value], {}, user=user, declared=declared),
        )

    def delete(self, target, user="") -> TxResult:
        ref = self.to_ref(target)
        return self.run_in_tx("delete", ref_text(ref), user,
                              lambda: self._invoke_inner(ref, "delete", [], {}, user=user))

    def new_revision(self, name: str, branch: str = DEFAULT_BRANCH, user="") -> TxResult:
        return self.run_in_tx("newrev", name, user,
                              lambda: self.new_revision_in_tx(name, branch, user))

    def get_attribute(self, target, attr: str, we=None):
        return self.store.read_attr(self.to_ref(target), attr, we=we)

    def history_query(self, target, attr: str, value, op: str = "=") -> bool:
        ref = self.to_ref(target)
        if self.store.resolved_for(ref).attr_def(attr) is None:
            raise StoreError(f"unknown attribute {attr!r} on {ref_text(ref)}")
        return self.store.history_matches(ref, attr, op, value)

    def navigate(self, pattern: str, subject=None, user="", we=None):
        operand = lang.parse_path(pattern)
        ctx = self._base_ctx(subject if subject is None else self.to_ref(subject), None, user, we=we)
        return lang.eval_operand(operand, ctx, role="lhs")

    def collect_triggers(self, target, command: str, we=None):
        """Ordered trigger candidates for a command on a target: priority
        descending, then most-specific-first, then a stable key."""
        ref = self.to_ref(target)
        _resolution, candidates = self._pipeline(ref, command, lang.canonical_command(command), we)
        return candidates

    # ------------------------------------------------------------------
    # In-transaction operations

    def create_object_in_tx(self, name: str, type_name: str, partition: str, user=""):
        store = self.store
        if name in store.objects and not store.objects[name].deleted:
            raise StoreError(f"duplicate name {name!r}")
        if name in store.objects:
            raise StoreError(f"name {name!r} is tombstoned and cannot be reused")
        if not store.schema.visible(type_name, partition):
            raise StoreError(f"unknown type {type_name!r}")
        resolved = store.schema.effective(type_name, partition)
        if resolved.kind != "object":
            raise StoreError(f"{type_name!r} is a relation type")
        self.apply({"op": "newobj", "name": name, "type": type_name, "partition": partition})
        tx = self.current_tx
        ctx = self._base_ctx(obj_ref(name), "create", user)
        for attr in sorted(resolved.attributes):
            adef = resolved.attributes[attr]
            if adef.initial is not None:
                self.write_attr(ctx, obj_ref(name), attr, adef.initial, command="create")
        self.apply({"op": "newbranch", "object": name, "branch": DEFAULT_BRANCH})
        self.apply({
            "op": "newrev", "object": name, "branch": DEFAULT_BRANCH, "number": 1,
            "snapshot": {k: encode_value(v) for k, v in store.objects[name].attributes.items()},
            "ts": tx.ts.isoformat(), "author": user or tx.user,
        })
        return obj_ref(name)

    def new_revision_in_tx(self, name: str, branch: str = DEFAULT_BRANCH, user=""):
        obj = self.store.live_object(name)
        if branch not in obj.branches:
            raise StoreError(f"unknown branch {branch!r} on {name!r}")
        number = obj.branches[branch].revisions[-1].number + 1 if obj.branches[branch].revisions else 1
        tx = self.current_tx
        self.apply({
            "op": "newrev", "object": name, "branch": branch, "number": number,
            "snapshot": {k: encode_value(v) for k, v in obj.attributes.items()},
            "ts": tx.ts.isoformat(), "author": user or tx.user,
        })
        return number

    def create_relation_in_tx(self, ctx, origin, reltype, dest):
        store = self.store
        origin_name = self._entity_name(origin)
        dest_name = self._entity_name(dest)
        reltype = store.schema.resolve_name(str(reltype))
        store.live_object(origin_name)
        store.live_object(dest_name)
        partition = store.objects[origin_name].partition
        if not store.schema.visible(reltype, partition):
            raise StoreError(f"unknown relation type {reltype!r}")
        resolved = store.schema.effective(reltype, partition)
        if resolved.kind != "relation":
            raise StoreError(f"{reltype!r} is not a relation type")
        key = (origin_name, reltype, dest_name)
        existing = store.relations.get(key)
        if existing is not None and not existing.deleted:
            raise StoreError(f"duplicate relation ({origin_name}|{reltype}|{dest_name})")
        self._check_domain(resolved, origin_name, dest_name)
        self._check_cardinality(resolved, origin_name, dest_name)
        self._check_structure(resolved, origin_name, dest_name)
        if existing is not None:
            self.apply({"op": "untombrel", "origin": origin_name, "reltype": reltype, "dest": dest_name})
        else:
            self.apply({"op": "newrel", "origin": origin_name, "reltype": reltype, "dest": dest_name})
        return rel_ref(origin_name, reltype, dest_name)

    def _check_domain(self, resolved, origin_name, dest_name):
        if not resolved.domain_pairs:
            return
        for opred, dpred in resolved.domain_pairs:
            if self._pred_holds(opred, origin_name) and self._pred_holds(dpred, dest_name):
                return
        raise StoreError(
            f"DOMAIN violation: ({origin_name} -> {dest_name}) not allowed by {resolved.name}"
        )

    def _pred_holds(self, source: str, obj_name: str) -> bool:
        if not source.strip():
            return True
        ctx = EvalContext(self.store, subject=obj_ref(obj_name))
        return lang.eval_event(_cached_event(source), ctx)

    def _check_cardinality(self, resolved, origin_name, dest_name):
        card = resolved.cardinality or "N:N"
        live = self.store.live_rels
        if card in ("1:1", "1:N") or resolved.structure == "TREE":
            others = [k for k in live(None, resolved.name, dest_name) if k[0] != origin_name]
            if others:
                raise StoreError(
                    f"cardinality {card or 'TREE'}: {dest_name!r} already has an origin via {resolved.name}"
                )
        if card in ("1:1", "N:1"):
            others = [k for k in live(origin_name, resolved.name, None) if k[2] != dest_name]
            if others:
                raise StoreError(
                    f"cardinality {card}: {origin_name!r} already has a destination via {resolved.name}"
                )

    def _check_structure(self, resolved, origin_name, dest_name):
        if resolved.structure not in ("DAG", "TREE"):
            return
        # adding origin -> dest creates a cycle iff origin is reachable from dest
        seen = set()
        stack = [dest_name]
        while stack:
            cursor = stack.pop()
            if cursor == origin_name:
                raise StoreError(f"cycle in {resolved.structure} relation {resolved.name!r}")
            if cursor in seen:
                continue
            seen.add(cursor)
            for key in self.store.live_rels(cursor, resolved.name, None):
                stack.append(key[2])

    def write_attr(self, ctx, ref, attr: str, value, command=None):
        """Domain-checked attribute write with history; WE writes go to the
        role-local overlay of the bound object."""
        store = self.store
        holder = ref
        subject = ref
        adef = None
        if ctx is not None and ctx.we and ref[0] == "obj":
            overlay = store.role_overlay(ctx.we, ref[1])
            if overlay is not None:
                holder = rel_ref(*overlay.key)
                adef = store.resolved_for(holder).attr_def(attr)
        if ref[0] == "rel":
            reltype = store.schema.effective(ref[1][1], store.entity_partition(ref))
            if reltype.role_of:
                subject = obj_ref(ref[1][2])
        if adef is None:
            resolved = store.resolved_for(holder if holder[0] == "obj" else holder)
            adef = resolved.attr_def(attr)
        if adef is None and holder[0] == "rel":
            # role overlays may extend the base object's schema
            base = store.resolved_for(subject)
            adef = base.attr_def(attr)
        if adef is None:
            raise StoreError(f"unknown attribute {attr!r} on {ref_text(holder)}")
        coerced = _coerce_for(adef, value)
        if not adef.accepts(coerced):
            raise StoreError(
                f"value {value_repr(coerced)} outside domain of {attr!r} ({adef.domain.describe()})"
            )
        entity = store.entity(holder)
        old = entity.attributes.get(attr, UNSET)
        tx = self.current_tx
        ts = tx.ts if tx is not None else self.clock()
        user = (ctx.user if ctx else "") or (tx.user if tx else "")
        cmd = command or (ctx.command if ctx else None) or (tx.command if tx else "")
        self.apply({
            "op": "setattr", "entity": _entity_field_of(holder), "attr": attr,
            "old": _enc_opt(old), "new": _enc_opt(coerced),
        })
        self.apply({
            "op": "hist", "entity": _entity_field_of(holder), "ts": ts.isoformat(),
            "attr": attr, "old": _enc_opt(old), "new": _enc_opt(coerced),
            "command": cmd, "user": user,
        })
        record = WriteRecord(subject, holder, attr, old, coerced)
        if self.error_mode:
            return record
        tx.writes.append(record)
        return record

    # ------------------------------------------------------------------
    # Invocation pipeline

    def _base_ctx(self, subject, command, user, params=None, bindings=None, we=None, admin=False):
        tx = self.current_tx
        return EvalContext(
            self.store, subject=subject, command=command, user=user or (tx.user if tx else ""),
            params=params or {}, bindings=bindings or {},
            writes=tx.writes if tx is not None else [], we=we, admin=admin,
        )

    def to_ref(self, target):
        if isinstance(target, tuple) and target and target[0] in ("obj", "rel"):
            return target
        name = str(target)
        if name in self.store.objects and not self.store.objects[name].deleted:
            return obj_ref(name)
        raise StoreError(f"unknown object {name!r}")

    def _entity_name(self, item):
        if isinstance(item, tuple) and item and item[0] == "obj":
            return item[1]
        if isinstance(item, tuple) and item and item[0] == "rel":
            raise StoreError("expected an object, found a relation")
        return str(item)

    def invoke_nested(self, ctx, target, command, args, flags):
        ref = self.to_ref(target)
        return self._invoke_inner(ref, command, list(args), dict(flags), user=ctx.user, we=ctx.we)

    def _invoke_inner(self, ref, command, args, flags, user="", we=None, declared=None):
        if self.error_mode:
            return self._invoke_in_error_mode(ref, command, args, flags, user, we)
        tx = self.current_tx
        if tx is None:
            raise EngineError("invoke outside a transaction")
        canonical = lang.canonical_command(command)
        tx.commands.append((canonical, ref, we))
        resolution, candidates = self._pipeline(ref, command, canonical, we)
        if resolution is None:
            raise StoreError(f"unresolvable method {command!r} on {ref_text(ref)}")
        kind, method, owner, mbinds = resolution
        params = _bind_params(method, args, flags) if kind != "builtin" else dict(flags)
        bindings_base = dict(mbinds)
        ctx = self._base_ctx(ref, canonical, user, params=params, bindings=bindings_base, we=we)
        pre_ctx = ctx.child(writes=tx.writes + list(declared)) if declared else ctx
        for cand in candidates:
            # queued now so an abort during PRE/METHOD still sees them
            if cand.block.coupling == "AFTER":
                tx.after_queue.append((cand, ctx))
            elif cand.block.coupling == "ERROR":
                tx.error_queue.append((cand, ctx))
        for cand in candidates:
            if cand.block.coupling != "PRE":
                continue
            pri, truth = self._event_true(cand, pre_ctx)
            if truth:
                self.trace(tx, "PRE", cand.block.event, pri, cand.source,
                           actions.cached_summary(cand.block.action), ref_text(ref))
                self._run_trigger(cand, ctx)
        self.trace(tx, "METHOD", canonical, 0, owner,
                   command if kind == "builtin" else actions.cached_summary(method.body),
                   ref_text(ref))
        if kind == "builtin":
            self._run_builtin(ctx, ref, canonical, args, flags)
        else:
            runner = actions.Runner(self, ctx.child(subject=ref, bindings={**bindings_base, "this": ref}))
            runner.run(actions.cached_program(method.body))
        for cand in candidates:
            if cand.block.coupling != "POST":
                continue
            pri, truth = self._event_true(cand, ctx)
            if truth:
                self.trace(tx, "POST", cand.block.event, pri, cand.source,
                           actions.cached_summary(cand.block.action), ref_text(ref))
                self._run_trigger(cand, ctx)
        return ref

    def _run_trigger(self, cand: Candidate, ctx):
        sub = ctx.child(subject=cand.action_subject or cand.subject,
                        bindings={**ctx.bindings, **cand.bindings},
                        admin=ctx.admin or cand.admin)
        actions.Runner(self, sub).run(actions.cached_program(cand.block.action))

    def _event_true(self, cand: Candidate, ctx) -> tuple[int, bool]:
        rule = self.store.events.get(cand.block.event)
        if rule is None:
            return 0, lang.canonical_command(cand.block.event) == ctx.command
        local = ctx.child(subject=cand.subject, bindings={**ctx.bindings, **cand.bindings})
        return rule.priority, lang.eval_event(_cached_event(rule.source), local)

    def _pipeline(self, ref, command, canonical, we):
        """Cached (method resolution, trigger candidates) for one target.

        The key carries everything the answer depends on: the touching
        relation instances (role bindings included), both registries'
        versions, and the session context.
        """
        touching = self._touching(ref)
        key = (ref, command, we, self.current_context,
               self.store.schema.version, self.store.events_version, touching)
        hit = self._pipeline_cache.get(key)
        if hit is not None:
            return hit
        resolution = self._resolve_method(ref, command, we, touching)
        candidates = self._collect(ref, canonical, we, touching)
        if len(self._pipeline_cache) > 20000:
            self._pipeline_cache.clear()
        self._pipeline_cache[key] = (resolution, candidates)
        return resolution, candidates

    def _resolve_method(self, ref, command, we, touching=None):
        """Resolution order: role-local, process-local, relation overload,
        entity schema (most specific), free methods, engine builtins."""
        store = self.store
        if we is not None and ref[0] == "obj":
            overlay = store.role_overlay(we, ref[1])
            if overlay is not None:
                role_type = store.schema.effective(overlay.reltype, store.entity_partition(ref))
                if command in role_type.methods:
                    mdef, owner = role_type.methods[command]
                    return ("method", mdef, owner, {"we": obj_ref(we), "O": obj_ref(we), "D": ref, "S": ref})
            wrec = store.work_envs.get(we)
            if wrec is not None:
                ptype = store.schema.effective(wrec.ptype, store.entity_partition(ref))
                if command in ptype.methods:
                    mdef, owner = ptype.methods[command]
                    return ("method", mdef, owner, {"we": obj_ref(we)})
        hits = []
        for key in (touching if touching is not None else self._touching(ref)):
            side = "ORIGIN" if key[0] == _name_of(ref) else "DEST"
            resolved = store.schema.effective(key[1], store.entity_partition(ref))
            for block in resolved.triggers:
                if block.coupling == "METHOD" and block.scope == side and block.event == command:
                    hits.append((key, block, resolved.name))
        if hits:
            reltypes = {key[1] for key, _, _ in hits}
            if len(reltypes) > 1:
                raise StoreError(
                    f"method {command!r} defined by two relation types on {ref_text(ref)}: "
                    + ", ".join(sorted(reltypes))
                )
            key, block, owner = hits[0]
            mdef = MethodDef(command, (), block.mflags, block.action)
            bindings = _rel_bindings(key, _name_of(ref))
            return ("method", mdef, owner, bindings)
        try:
            resolved = store.resolved_for(ref)
        except (StoreError, SchemaError):
            resolved = None
        if resolved is not None and command in resolved.methods:
            mdef, owner = resolved.methods[command]
            return ("method", mdef, owner, {})
        if command in store.free_methods:
            return ("method", store.free_methods[command], "global", {})
        if lang.canonical_command(command) in BUILTIN_COMMANDS:
            return ("builtin", None, "engine", {})
        return None

    def _touching(self, ref):
        if ref[0] != "obj":
            return ()
        name = ref[1]
        cached = self._touch_cache.get(name)
        if cached is not None and cached[0] == self.store.rel_version:
            return cached[1]
        keys = sorted(self.store.rels_by_origin.get(name, set()) | self.store.rels_by_dest.get(name, set()))
        live = tuple(k for k in keys if not self.store.relations[k].deleted)
        self._touch_cache[name] = (self.store.rel_version, live)
        return live

    def _visible(self, key) -> bool:
        if self.current_context is None:
            return True
        members = set(self.store.context_membership(self.current_context))
        return key[0] in members and key[2] in members

    def _collect(self, ref, command, we, touching=None) -> list[Candidate]:
        store = self.store
        cands: list[Candidate] = []
        if we is not None and ref[0] == "obj":
            overlay = store.role_overlay(we, ref[1])
            if overlay is not None:
                role_type = store.schema.effective(overlay.reltype, store.entity_partition(ref))
                for idx, block in enumerate(role_type.triggers):
                    if block.coupling in ("METHOD", "RULE"):
                        continue
                    cands.append(Candidate(
                        block, 0, 0, idx, ref,
                        {**_rel_bindings(overlay.key, ref[1]), "we": obj_ref(we)},
                        f"role:{overlay.reltype}", key=(block.event, overlay.reltype)))
            wrec = store.work_envs.get(we)
            if wrec is not None:
                ptype = store.schema.effective(wrec.ptype, store.entity_partition(ref))
                for block in ptype.triggers:
                    if block.coupling in ("METHOD", "RULE"):
                        continue
                    spec = ptype.spec_index(block.owner)
                    cands.append(Candidate(
                        block, 0, 1, spec, ref, {"we": obj_ref(we)},
                        f"process:{wrec.ptype}", key=(block.event, wrec.ptype)))
        try:
            resolved = store.resolved_for(ref)
        except (StoreError, SchemaError):
            resolved = None
        if resolved is not None:
            for block in resolved.triggers:
                if block.scope != "ENTITY" or block.coupling in ("METHOD", "RULE"):
                    continue
                spec = resolved.spec_index(block.owner)
                cands.append(Candidate(
                    block, 0, 2, spec, ref, {}, f"type:{block.owner}",
                    key=(block.event, block.owner)))
        for key in (touching if touching is not None else self._touching(ref)):
            side = "ORIGIN" if key[0] == _name_of(ref) else "DEST"
            rel_type = store.schema.effective(key[1], store.entity_partition(ref))
            if rel_type.role_of:
                continue  # role relationships fire through the WE path
            for block in rel_type.triggers:
                if block.coupling in ("METHOD", "RULE") or block.scope != side:
                    continue
                if block.visibility == "LOCAL" and not self._visible(key):
                    continue
                spec = rel_type.spec_index(block.owner)
                cands.append(Candidate(
                    block, 0, 3, spec, ref, _rel_bindings(key, _name_of(ref)),
                    f"rel:{key[1]}({key[0]}->{key[2]})",
                    admin=block.visibility == "GLOBAL",
                    key=(block.event, key[1], key[0], key[2]),
                    action_subject=rel_ref(*key)))
        for cand in cands:
            rule = store.events.get(cand.block.event)
            if rule is not None:
                cand.priority = rule.priority
        cands.sort(key=Candidate.sort_key)
        return cands

    # ------------------------------------------------------------------
    # Builtin command bodies

    def _run_builtin(self, ctx, ref, command, args, flags):
        if command == "delete":
            self._builtin_delete(ctx, ref)
        elif command == "copy":
            self._builtin_copy(ctx, ref, flags)
        elif command == "replace":
            self._builtin_replace(ctx, ref, flags)
        elif command == "set":
            if len(args) < 2:
                raise StoreError("set needs an attribute and a value")
            self.write_attr(ctx, ref, str(args[0]), args[1])
        else:
            raise EngineError(f"no builtin body for {command!r}")

    def _builtin_delete(self, ctx, ref):
        if ref[0] == "obj":
            name = ref[1]
            self.store.live_object(name)
            for key in self._touching(ref):
                self.apply({"op": "tombrel", "origin": key[0], "reltype": key[1], "dest": key[2]})
            self.apply({"op": "tombobj", "name": name})
        else:
            key = tuple(ref[1])
            if key not in self.store.relations or self.store.relations[key].deleted:
                raise StoreError(f"unknown relation {ref_text(ref)}")
            self.apply({"op": "tombrel", "origin": key[0], "reltype": key[1], "dest": key[2]})

    def _builtin_copy(self, ctx, ref, flags):
        newname = str(flags.get("new") or flags.get("d") or "")
        if not newname:
            raise StoreError("copy needs a new object name")
        obj = self.store.live_object(_name_of(ref))
        self.create_object_in_tx(newname, obj.type, obj.partition, user=ctx.user)
        for attr, value in sorted(obj.attributes.items()):
            self.write_attr(ctx, obj_ref(newname), attr, value, command="copy")

    def _builtin_replace(self, ctx, ref, flags):
        content = flags.get("content")
        branch = str(flags.get("branch") or DEFAULT_BRANCH)
        if content is not None:
            self.write_attr(ctx, ref, "content", content, command="replace")
        self.new_revision_in_tx(_name_of(ref), branch, user=ctx.user)

    # ------------------------------------------------------------------
    # Decoupled phases

    def _run_after_queue(self, tx: Transaction):
        spawned = []
        for cand, ctx in tx.after_queue:
            pri, truth = self._event_true(cand, ctx)
            if not truth:
                continue
            if tx.depth + 1 > self.cascade_limit:
                self.log("cascade-limit", tx=tx.id, event=cand.block.event)
                raise EngineError(
                    f"AFTER cascade exceeded depth {self.cascade_limit} (event {cand.block.event})"
                )
            self.trace(tx, "AFTER", cand.block.event, pri, cand.source,
                       actions.cached_summary(cand.block.action),
                       ref_text(cand.subject))
            program = actions.cached_program(cand.block.action)
            if self._after_condition_false(program, cand, tx):
                continue  # single-IF action over committed state: nothing would run
            result = self.run_in_tx(
                f"after:{cand.block.event}", ref_text(cand.subject), tx.user,
                lambda c=cand: self._run_trigger(
                    c, self._base_ctx(c.subject, tx.command, tx.user, bindings=c.bindings,
                                      we=_we_name(c.bindings), admin=c.admin)),
                depth=tx.depth + 1, parent=tx.id,
            )
            spawned.append(result.tx_id)
        return spawned

    def _after_condition_false(self, program, cand: Candidate, tx: Transaction) -> bool:
        """Skip the decoupled transaction when the whole action is one IF
        (no ELSE) whose condition is false against the committed state; the
        stream is serialized, so the evaluation is the same either way."""
        stmts = program.stmts if isinstance(program, actions.Block) else (program,)
        if len(stmts) != 1 or not isinstance(stmts[0], actions.IfStmt) or stmts[0].els is not None:
            return False
        probe = EvalContext(self.store, subject=cand.action_subject or cand.subject,
                            command=tx.command, user=tx.user, bindings=cand.bindings,
                            we=_we_name(cand.bindings), admin=cand.admin)
        return not lang.eval_event(stmts[0].cond, probe)

    def _run_error_queue(self, tx: Transaction):
        self.error_mode = True
        self._error_effects = []
        try:
            for cand, ctx in tx.error_queue:
                pri, truth = self._event_true(cand, ctx)
                if not truth:
                    continue
                self.trace(tx, "ERROR", cand.block.event, pri, cand.source,
                           actions.cached_summary(cand.block.action),
                           ref_text(cand.subject))
                try:
                    self._run_trigger(cand, ctx)
                except AbortSignal:
                    self.log("error-abort-ignored", tx=tx.id, event=cand.block.event)
                except (StoreError, SchemaError, actions.ActionError, lang.LangError) as err:
                    self.log("error-trigger-failed", tx=tx.id, message=str(err))
            if self.journal is not None and self._error_effects:
                self.journal.append_group(self._error_effects, tx.ts, tx.user, "error-effects")
        finally:
            self.error_mode = False
            self._error_effects = []

    def _invoke_in_error_mode(self, ref, command, args, flags, user, we):
        resolution = self._resolve_method(ref, command, we)
        if resolution is None:
            raise StoreError(f"unresolvable method {command!r} on {ref_text(ref)}")
        kind, method, owner, mbinds = resolution
        ctx = EvalContext(self.store, subject=ref, command=lang.canonical_command(command),
                          user=user, params=_bind_params(method, args, flags) if kind != "builtin" else {},
                          bindings=mbinds, we=we)
        if kind == "builtin":
            self._run_builtin(ctx, ref, lang.canonical_command(command), args, flags)
        else:
            actions.Runner(self, ctx).run(actions.cached_program(method.body))
        return ref

    # ------------------------------------------------------------------
    # Action-language services

    def raise_abort(self, message=""):
        if self.error_mode:
            self.log("error-abort-ignored", tx=self.current_tx.id if self.current_tx else 0)
            return
        raise AbortSignal(message)

    def emit_output(self, ctx, text: str):
        tx = self.current_tx
        if tx is not None:
            tx.outputs.append(text)
        self.log("output", tx=tx.id if tx else 0, text=text)

    def send_mail(self, ctx, args):
        if args:
            recipient = args[0]
            if isinstance(recipient, tuple) and recipient[0] == "obj":
                recipient = self._owner_of(recipient) or recipient[1]
            recipient = str(recipient)
            message = " ".join(value_repr(a) for a in args[1:])
        else:
            recipient = None
            if "O" in ctx.bindings:
                origin = ctx.bindings["O"]
                recipient = self._owner_of(origin)
            if recipient is None and ctx.we and ctx.we in self.store.work_envs:
                recipient = self.store.work_envs[ctx.we].user
            if recipient is None:
                recipient = ctx.user or "nobody"
            message = ""
        if not message:
            subject = ref_text(ctx.subject) if ctx.subject is not None else ""
            message = f"{ctx.command or 'event'} on {subject}".strip()
        delta = {"op": "inbox", "user": recipient, "message": message}
        if self.error_mode:
            self.store.apply(delta)
            self._error_effects.append(delta)
        else:
            self.apply(delta)

    def _owner_of(self, ref):
        if not (isinstance(ref, tuple) and ref and ref[0] == "obj"):
            return None
        for attr in ("author", "owner", "user"):
            try:
                value = self.store.read_attr(ref, attr)
            except StoreError:
                continue
            if value is not UNSET and value:
                return str(value)
        name = ref[1]
        if name in self.store.workspaces:
            return self.store.workspaces[name].owner
        if name in self.store.work_envs:
            return self.store.work_envs[name].user
        return None

    def call_method(self, ctx, name, args, flags):
        if args:
            first = self._maybe_ref(args[0])
            if first is not None:
                if self._resolvable(first, name, ctx.we, len(args) - 1):
                    return self._invoke_inner(first, name, list(args[1:]), dict(flags),
                                              user=ctx.user, we=ctx.we)
        if ctx.subject is not None and self._resolvable(ctx.subject, name, ctx.we, len(args)):
            return self._invoke_inner(ctx.subject, name, list(args), dict(flags),
                                      user=ctx.user, we=ctx.we)
        return self.run_external(ctx, name, args, flags)

    def _maybe_ref(self, item):
        if isinstance(item, tuple) and item and item[0] in ("obj", "rel"):
            return item
        if isinstance(item, str) and item in self.store.objects and not self.store.objects[item].deleted:
            return obj_ref(item)
        return None

    def _resolvable(self, ref, name, we, arity) -> bool:
        try:
            resolution, _ = self._pipeline(ref, name, lang.canonical_command(name), we)
        except StoreError:
            return False
        if resolution is None:
            return False
        kind, method, _, _ = resolution
        if kind == "builtin":
            return True
        return len(method.params) == arity or (not method.params and arity == 0)

    def run_external(self, ctx, name, args, flags):
        argv = [name] + [value_repr(a) for a in args]
        for flag, value in flags.items():
            argv.append(f"-{flag}")
            if value not in ("", None):
                argv.append(value_repr(value))
        if not self.allow_external:
            self.log("external-skipped", command=" ".join(argv))
            return
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=30)
            code = proc.returncode
        except (OSError, subprocess.SubprocessError) as err:
            code = -1
            self.log("external-failed", command=" ".join(argv), message=str(err))
        if code != 0:
            if self.external_errors == "abort":
                self.raise_abort(f"external command failed: {' '.join(argv)}")
            else:
                ctx.diagnostic(f"external command failed: {' '.join(argv)}")

    def new_role_instance(self, ctx, role_name: str):
        self.tempo.new_role_instance(ctx, role_name)

    def _computed_runner(self, command: str):
        if not self.allow_external:
            return None
        try:
            proc = subprocess.run(shlex.split(command), capture_output=True, text=True, timeout=10)
        except (OSError, subprocess.SubprocessError, ValueError):
            return None
        if proc.returncode != 0:
            return None
        return proc.stdout.strip()


def _cached_event(source: str):
    ast = _EVENT_CACHE.get(source)
    if ast is None:
        ast = lang.parse_event(source)
        _EVENT_CACHE[source] = ast
    return ast


_EVENT_CACHE: dict[str, object] = {}


def _bind_params(method: MethodDef, args, flags) -> dict:
    params: dict = {}
    names = list(method.params)
    for i, value in enumerate(args):
        if i < len(names):
            params[names[i]] = value
        else:
            params[f"arg{i}"] = value
    for flag, pname in method.flags:
        if flag in flags:
            params[pname] = flags[flag]
    for flag, value in flags.items():
        mapped = dict(method.flags).get(flag)
        params.setdefault(mapped or flag, value)
    return params


def _rel_bindings(key, target_name) -> dict:
    origin, reltype, dest = key
    other = dest if target_name == origin else origin
    return {
        "O": obj_ref(origin),
        "D": obj_ref(dest),
        "S": obj_ref(other),
        "rel": rel_ref(*key),
        "self_rel": rel_ref(*key),
    }


def _we_name(bindings) -> str | None:
    we = bindings.get("we")
    if isinstance(we, tuple) and we and we[0] == "obj":
        return we[1]
    return we


def _name_of(ref) -> str:
    return ref[1] if ref[0] == "obj" else ref[1][0]


def _enc_opt(value):
    if value is UNSET or value is None:
        return None
    return encode_value(value)


def _entity_field_of(ref):
    return [ref[0], list(ref[1])] if ref[0] == "rel" else [ref[0], ref[1]]


def _coerce_for(adef, value):
    if adef.multiplicity == "set" and isinstance(value, (list, set, tuple)):
        return frozenset(str(v) for v in value)
    if adef.multiplicity == "set" and isinstance(value, str):
        return frozenset(v.strip() for v in value.split(",") if v.strip())
    if adef.domain.kind == "integer" and isinstance(value, str) and value.lstrip("-").isdigit():
        return int(value)
    if adef.domain.kind == "boolean" and isinstance(value, str):
        if value in ("true", "false"):
            return value == "true"
    if adef.domain.kind == "date" and isinstance(value, str):
        from .values import parse_date_literal

        try:
            return parse_date_literal(value)
        except Exception:
            return value
    return value


def _read_file(path: str):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        return None
