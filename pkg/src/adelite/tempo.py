"""Process layer: process types, roles, work environments, and connections.

Everything maps onto the kernel: a process type registers as an ordinary
object type; each role becomes an active relationship named
``<process>.<role>`` from the process instance (WE object) to the bound
objects; role-local attributes live on those relation instances, which gives
work-environment isolation for free (another WE has its own instance).

Instantiating a process binds every object first to the unfiltered role its
type is compatible with, then moves it to the most-derived filtered role
whose predicate holds. One object plays at most one role per WE.

Connections derive from CONNECT ... WITH ... WHEN clauses: for each ordered
pair of distinct instances bound to the two parent roles, each object pair
matching the WHEN equation yields one directional connection whose source is
the right-hand (event-producing) endpoint. Deliveries and process rules run
as decoupled transactions after the commit that raised the watched event, in
deterministic name order, and never mutate the source WE.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from . import lang, merge, workspace
from .schema import AttributeDef, SchemaError, TypeDef, typedef_to_dict
from .store import EvalContext, StoreError, obj_ref, ref_text, rel_ref
from .values import UNSET

CONNECTION_LIBRARY = ("notify", "resynch", "merge", "duplicate", "share", "deadline", "protect")
IMPLEMENTED_KINDS = ("notify", "resynch", "merge")


class TempoError(StoreError):
    pass


@dataclass(frozen=True)
class ConnectionInstance:
    ctype: str
    kinds: tuple
    source: tuple  # (we, role, object)
    dest: tuple
    events: dict = field(default_factory=dict, hash=False, compare=False)

    def sort_key(self):
        return (self.ctype, self.source, self.dest)


class TempoManager:
    def __init__(self, engine):
        self.engine = engine
        engine.post_commit_hooks.append(self.handle_commit)
        self._delivering = False
        self.deliveries: list[dict] = []  # session-level delivery journal

    @property
    def store(self):
        return self.engine.store

    # ------------------------------------------------------------------
    # Definition

    def role_reltype(self, ptype: str, role: str) -> str:
        return f"{ptype}.{role}"

    def define_process_type(self, tdef: TypeDef, partition="project", user="") -> str:
        """Register a process type plus one active relationship per role."""
        if not tdef.is_process:
            raise TempoError(f"{tdef.name!r} is not a process type")
        engine = self.engine

        def run():
            self._define_in_tx(tdef, partition)

        result = engine.run_in_tx("proc-define", tdef.name, user, run)
        if not result.ok:
            raise TempoError(result.message)
        return tdef.name

    def _define_in_tx(self, tdef: TypeDef, partition: str):
        engine, store = self.engine, self.store
        for role in tdef.roles:
            if role.name == "USER":
                continue
            self._base_of_role(tdef, role.name)  # validates the base chain
        for conn in tdef.connections:
            for kind in conn.kinds:
                if kind not in CONNECTION_LIBRARY:
                    raise TempoError(f"unknown connection kind {kind!r} in {conn.name!r}")
        engine.apply({"op": "deftype", "partition": partition, "tdef": typedef_to_dict(tdef)})
        for rule in tdef.events:
            engine.apply({"op": "defevent", "name": rule.name, "source": rule.source,
                          "priority": rule.priority})
        process_attrs = tdef.attributes
        for role in tdef.roles:
            if role.name == "USER":
                continue
            merged_attrs: dict[str, AttributeDef] = {}
            base_type = self._base_object_type(tdef, role.name)
            for attr in process_attrs:
                merged_attrs[attr.name] = self._widen_against_base(store, base_type, attr)
            for attr in role.attributes:
                merged_attrs[attr.name] = self._widen_against_base(store, base_type, attr)
            rel_def = TypeDef(
                name=self.role_reltype(tdef.name, role.name),
                kind="relation",
                attributes=tuple(merged_attrs.values()),
                methods=role.methods,
                triggers=role.triggers,
                cardinality="N:N",
                role_of=tdef.name,
            )
            engine.apply({"op": "deftype", "partition": partition, "tdef": typedef_to_dict(rel_def)})

    def _widen_against_base(self, store, base_type: str, attr: AttributeDef) -> AttributeDef:
        """Role-local enum attrs accept the base type's values too."""
        if attr.domain.kind not in ("enum", "set_of") or not base_type:
            return attr
        try:
            base = store.schema.effective(base_type)
        except SchemaError:
            return attr
        base_def = base.attr_def(attr.name)
        if base_def is None or base_def.domain.kind not in ("enum", "set_of"):
            return attr
        values = tuple(dict.fromkeys(attr.domain.values + base_def.domain.values))
        from .values import Domain

        return AttributeDef(attr.name, Domain(attr.domain.kind, values), attr.default,
                            attr.initial, attr.multiplicity, attr.computed)

    def _role_def(self, ptype_name: str, role_name: str):
        resolved = self.store.schema.effective(ptype_name)
        role = resolved.roles.get(role_name)
        if role is None:
            raise TempoError(f"unknown role {role_name!r} in process {ptype_name!r}")
        return role

    def _base_of_role(self, tdef: TypeDef, role_name: str, _seen=None):
        """The role's base chain (list of RoleDefs, most derived first)."""
        _seen = _seen or set()
        if role_name in _seen:
            raise TempoError(f"cycle in role derivation at {role_name!r}")
        _seen.add(role_name)
        roles = {r.name: r for r in tdef.roles}
        role = roles.get(role_name)
        if role is None:
            raise TempoError(f"unknown role {role_name!r}")
        chain = [role]
        base = role.base
        if base in roles and base != role_name:
            chain.extend(self._base_of_role(tdef, base, _seen))
        else:
            if not self.store.schema.defining_partitions(base):
                raise TempoError(f"unknown role base {base!r} for role {role_name!r}")
        return chain

    def _base_object_type(self, tdef, role_name: str) -> str:
        chain = self._base_of_role(tdef, role_name)
        return chain[-1].base

    # ------------------------------------------------------------------
    # Instantiation and role binding

    def instantiate_process(self, ptype: str, user: str, objects, we_name=None,
                            directory=None, tools=()):
        """Create a WE: workspace over the object set plus role bindings."""
        engine, store = self.engine, self.store
        resolved = store.schema.effective(ptype)
        if not resolved.is_process:
            raise TempoError(f"{ptype!r} is not a process type")
        for name in objects:
            store.live_object(name)
        count = sum(1 for w in store.work_envs.values() if w.ptype == ptype)
        we_name = we_name or f"we_{ptype}_{count + 1}"
        if we_name in store.work_envs or we_name in store.objects:
            raise TempoError(f"work environment {we_name!r} already exists")

        def run():
            engine.create_object_in_tx(we_name, ptype, "project", user=user)
            ctx_name = f"ctx_{we_name}"
            engine.apply({"op": "newctx", "name": ctx_name, "roots": list(objects)})
            ws_root = directory
            if ws_root is None and engine.ws_base:
                ws_root = os.path.join(engine.ws_base, we_name)
            engine.apply({
                "op": "newws", "name": f"ws_{we_name}", "root": ws_root or f"::{we_name}",
                "context": ctx_name, "owner": user,
            })
            engine.apply({
                "op": "newwe", "name": we_name, "ptype": ptype, "user": user,
                "workspace": f"ws_{we_name}", "tools": list(tools),
            })
            if ws_root:
                self._materialize(we_name, ws_root)
            self._bind_roles(we_name, ptype, objects, user)

        result = engine.run_in_tx("proc-new", we_name, user, run)
        if not result.ok:
            raise TempoError(result.message)
        return store.work_envs[we_name]

    def _materialize(self, we_name: str, root: str):
        engine, store = self.engine, self.store
        ws = store.workspaces[f"ws_{we_name}"]
        os.makedirs(root, exist_ok=True)
        plan = workspace.plan_tree(store, ws.context)
        from .store import MapEntry

        for relpath in sorted(plan):
            name = plan[relpath]
            if store.resolved_for(obj_ref(name)).attr_def("content") is None:
                continue  # not file-backed (child WEs, plain process objects)
            content, number = workspace._revision_content(store, name, "main", None)
            engine.file_write(os.path.join(root, relpath), str(content).encode())
            engine.apply({
                "op": "wsmap", "ws": ws.name, "path": relpath,
                "entry": MapEntry(name, "main", number, "copy").to_list(),
            })

    def _bind_roles(self, we_name: str, ptype: str, objects, user: str):
        """Unfiltered role first, then move to the filtered role whose
        predicate holds; most-derived role wins, unrelated ties error."""
        store = self.store
        resolved = store.schema.effective(ptype)
        role_names = [r for r in resolved.roles if r != "USER"]
        assignments: dict[str, str] = {}
        for obj in sorted(objects):
            obj_type = store.objects[obj].type
            unfiltered: list[str] = []
            filtered: list[str] = []
            for rname in role_names:
                chain = self._base_of_role_resolved(resolved, rname)
                base = chain[-1].base
                if not (store.schema.defining_partitions(base)
                        and store.schema.is_subtype(obj_type, base)):
                    continue
                if any(r.filter for r in chain):
                    if self._filters_hold(resolved, rname, obj, user):
                        filtered.append(rname)
                else:
                    unfiltered.append(rname)
            chosen = self._pick_role(resolved, unfiltered, obj)
            moved = self._pick_role(resolved, filtered, obj)
            if moved is not None:
                chosen = moved
            if chosen is not None:
                assignments[obj] = chosen
        for obj, role in sorted(assignments.items()):
            reltype = self.role_reltype(ptype, role)
            ctx = self.engine._base_ctx(obj_ref(we_name), "bind", user)
            self.engine.create_relation_in_tx(ctx, we_name, reltype, obj)

    def _base_of_role_resolved(self, resolved, role_name: str):
        chain = []
        cursor = role_name
        seen = set()
        while cursor in resolved.roles and cursor not in seen:
            seen.add(cursor)
            role = resolved.roles[cursor]
            chain.append(role)
            cursor = role.base
        return chain

    def _pick_role(self, resolved, candidates: list[str], obj: str) -> str | None:
        """Most-derived role wins; unrelated ties are an error."""
        if not candidates:
            return None
        if len(candidates) == 1:
            return candidates[0]
        survivors = []
        for rname in candidates:
            if any(other != rname and rname in
                   {r.name for r in self._base_of_role_resolved(resolved, other)}
                   for other in candidates):
                continue  # rname is a base of a more derived candidate
            survivors.append(rname)
        if len(survivors) == 1:
            return survivors[0]
        names = sorted(survivors) or sorted(candidates)
        raise TempoError(f"object {obj!r} is bindable to sibling roles with no precedence: "
                         + ", ".join(names))

    def _filters_hold(self, resolved, role_name: str, obj: str, user: str) -> bool:
        for role in self._base_of_role_resolved(resolved, role_name):
            if not role.filter:
                continue
            ctx = EvalContext(self.store, subject=obj_ref(obj), user=user)
            if not lang.eval_event(_cached_filter(role.filter), ctx):
                return False
        return True

    # ------------------------------------------------------------------
    # WE-scoped access

    def bindings(self, we_name: str) -> dict[str, list[str]]:
        """role name -> bound object names."""
        store = self.store
        wrec = store.work_envs.get(we_name)
        if wrec is None:
            raise TempoError(f"unknown work environment {we_name!r}")
        out: dict[str, list[str]] = {}
        for key in sorted(store.rels_by_origin.get(we_name, set())):
            rel = store.relations[key]
            if rel.deleted:
                continue
            tdef = store.schema.effective(rel.reltype)
            if tdef.role_of:
                role = rel.reltype.split(".", 1)[1]
                out.setdefault(role, []).append(rel.dest)
        return out

    def binding_rel(self, we_name: str, role: str, obj: str):
        wrec = self.store.work_envs.get(we_name)
        if wrec is None:
            raise TempoError(f"unknown work environment {we_name!r}")
        key = (we_name, self.role_reltype(wrec.ptype, role), obj)
        rel = self.store.relations.get(key)
        if rel is None or rel.deleted:
            raise TempoError(f"object {obj!r} is not bound to role {role!r} in {we_name!r}")
        return rel

    def role_attr(self, we_name: str, role: str, obj: str, attr: str, value=UNSET, user=""):
        """Read or write a role-local attribute (write goes to the overlay)."""
        rel = self.binding_rel(we_name, role, obj)
        if value is UNSET:
            if attr in rel.attributes:
                return rel.attributes[attr]
            return self.store.read_attr(obj_ref(obj), attr)
        engine = self.engine
        holder = rel_ref(*rel.key)

        def run():
            ctx = engine._base_ctx(obj_ref(obj), "set", user or self.store.work_envs[we_name].user,
                                   we=we_name)
            engine.write_attr(ctx, holder, attr, value)

        result = engine.run_in_tx("set", ref_text(holder), user or self.store.work_envs[we_name].user, run)
        if not result.ok:
            raise TempoError(result.message)
        return value

    def invoke_in_we(self, we_name: str, role: str, obj: str, method: str, args=(), flags=None):
        wrec = self.store.work_envs.get(we_name)
        if wrec is None:
            raise TempoError(f"unknown work environment {we_name!r}")
        self.binding_rel(we_name, role, obj)
        if wrec.tools and method not in wrec.tools:
            raise TempoError(f"tool {method!r} not permitted in {we_name!r}")
        return self.engine.invoke(obj, method, args, flags, user=wrec.user, we=we_name)

    # ------------------------------------------------------------------
    # Connections

    def _parent_candidates(self):
        for name in sorted(self.store.work_envs):
            wrec = self.store.work_envs[name]
            resolved = self.store.schema.effective(wrec.ptype)
            if resolved.connections or any(t.coupling == "RULE" for t in resolved.triggers):
                yield name, wrec, resolved

    def connect_roles(self, parent_we: str) -> list[ConnectionInstance]:
        """Derive the connection instances of one parent WE from its state."""
        store = self.store
        wrec = store.work_envs.get(parent_we)
        if wrec is None:
            raise TempoError(f"unknown work environment {parent_we!r}")
        resolved = store.schema.effective(wrec.ptype)
        bindings = self.bindings(parent_we)
        out: list[ConnectionInstance] = []
        for cname in sorted(resolved.connections):
            conn = resolved.connections[cname]
            if not conn.role_a or not conn.when_a or not conn.when_b:
                continue
            holders_a = bindings.get(conn.role_a, [])
            holders_b = bindings.get(conn.role_b, [])
            role_a, attr_a = conn.when_a[0], conn.when_a[-1]
            role_b, attr_b = conn.when_b[0], conn.when_b[-1]
            events = dict(conn.events)
            for wa in holders_a:
                for wb in holders_b:
                    if wa == wb:
                        continue
                    for oa in self.bindings(wa).get(role_a, []) if wa in store.work_envs else []:
                        for ob in self.bindings(wb).get(role_b, []) if wb in store.work_envs else []:
                            va = self._when_value(wa, role_a, oa, attr_a)
                            vb = self._when_value(wb, role_b, ob, attr_b)
                            if va is UNSET or vb is UNSET or va != vb:
                                continue
                            out.append(ConnectionInstance(
                                ctype=cname, kinds=conn.kinds,
                                source=(wb, role_b, ob), dest=(wa, role_a, oa),
                                events=events,
                            ))
        out.sort(key=ConnectionInstance.sort_key)
        return out

    def _when_value(self, we, role, obj, attr):
        if attr == "name":
            return obj
        rel = self.store.relations.get((we, self.role_reltype(self.store.work_envs[we].ptype, role), obj))
        if rel is not None and attr in rel.attributes:
            return rel.attributes[attr]
        try:
            return self.store.read_attr(obj_ref(obj), attr)
        except StoreError:
            return UNSET

    # ------------------------------------------------------------------
    # Post-commit processing: deliveries and process rules

    def handle_commit(self, tx, raised):
        if self._delivering:
            return
        hits = self._event_hits(tx)
        if not hits:
            return
        self._delivering = True
        try:
            for parent, wrec, resolved in list(self._parent_candidates()):
                for conn_inst in self.connect_roles(parent):
                    self._deliver_if_due(conn_inst, hits, tx)
                self._run_process_rules(parent, wrec, resolved, hits, tx)
        finally:
            self._delivering = False

    def _event_hits(self, tx):
        """(event-name, object-name, we-name) triples raised by the tx."""
        store = self.store
        hits: list[tuple[str, str, str | None]] = []
        seen = set()
        for entry in tx.commands:
            command, ref = entry[0], entry[1]
            we = entry[2] if len(entry) > 2 else None
            if ref[0] == "obj":
                item = (command, ref[1], we)
                if item not in seen:
                    seen.add(item)
                    hits.append(item)
        for name in sorted(store.events):
            rule = store.events[name]
            ast = _cached_rule(rule.source)
            for w in tx.writes:
                if w.subject[0] != "obj":
                    continue
                we = None
                if w.holder[0] == "rel":
                    origin = w.holder[1][0]
                    if origin in store.work_envs:
                        we = origin
                ctx = EvalContext(store, subject=w.subject, command=tx.command,
                                  user=tx.user, writes=[w])
                if lang.eval_event(ast, ctx):
                    item = (name, w.subject[1], we)
                    if item not in seen:
                        seen.add(item)
                        hits.append(item)
        return hits

    def _deliver_if_due(self, conn_inst: ConnectionInstance, hits, tx):
        src_we, _src_role, src_obj = conn_inst.source
        for kind in conn_inst.kinds:
            watched = conn_inst.events.get(f"{kind}_when")
            if not watched:
                continue
            if kind not in IMPLEMENTED_KINDS:
                raise TempoError(f"connection kind {kind!r} is declared but not implemented")
            # the event must originate in the source WE (non-originating
            # endpoints receive, they never echo)
            due = any(ev == watched and obj == src_obj and we == src_we
                      for ev, obj, we in hits)
            if due:
                self.deliver(conn_inst, kind, watched, tx)

    def deliver(self, conn_inst: ConnectionInstance, kind: str, event: str, tx):
        """Run one delivery as a decoupled transaction toward the destination."""
        engine, store = self.engine, self.store
        src_we, src_role, obj = conn_inst.source
        dst_we, dst_role, dst_obj = conn_inst.dest
        user = store.work_envs[dst_we].user
        record = {"connection": conn_inst.ctype, "kind": kind, "event": event,
                  "source": src_we, "dest": dst_we, "object": obj, "status": "done"}

        def run():
            if kind == "notify":
                engine.apply({"op": "inbox", "user": user,
                              "message": f"notify: {obj} {event} in {src_we}"})
                return
            src_ws = store.workspaces.get(store.work_envs[src_we].workspace)
            dst_ws = store.workspaces.get(store.work_envs[dst_we].workspace)
            src_path = _path_of(src_ws, obj)
            dst_path = _path_of(dst_ws, dst_obj)
            if src_ws is None or dst_ws is None or src_path is None or dst_path is None:
                engine.apply({"op": "inbox", "user": user,
                              "message": f"{kind}: {obj} {event} in {src_we} (no file transfer)"})
                return
            src_file = os.path.join(src_ws.root, src_path)
            dst_file = os.path.join(dst_ws.root, dst_path)
            with open(src_file, "rb") as fh:
                incoming = fh.read().decode()
            if kind == "resynch":
                engine.file_write(dst_file, incoming.encode())
                engine.apply({"op": "inbox", "user": user,
                              "message": f"resynch: {obj} replaced in {dst_we} from {src_we}"})
                return
            with open(dst_file, "rb") as fh:
                local = fh.read().decode()
            entry = dst_ws.mapping[dst_path]
            try:
                ancestor, _ = workspace._revision_content(store, dst_obj, entry.branch, entry.revision)
                result = merge.merge3(str(ancestor), local, incoming)
            except StoreError:
                result = merge.merge2(local, incoming)
                result = merge.MergeResult(result.lines, max(result.conflicts, 1))
            engine.file_write(dst_file, result.text().encode())
            if result.clean:
                engine.apply({"op": "inbox", "user": user,
                              "message": f"merge: {obj} merged in {dst_we} from {src_we}"})
            else:
                record["status"] = "conflict"
                engine.apply({"op": "inbox", "user": user,
                              "message": f"merge conflict: {obj} in {dst_we} from {src_we}"})

        result = engine.run_in_tx(f"deliver:{conn_inst.ctype}:{kind}", dst_obj, user, run,
                                  depth=tx.depth + 1, parent=tx.id)
        record["tx"] = result.tx_id
        if not result.ok:
            record["status"] = "error"
        self.deliveries.append(record)

    def _run_process_rules(self, parent, wrec, resolved, hits, tx):
        rules = [t for t in resolved.triggers if t.coupling == "RULE"]
        if not rules:
            return
        scope = {parent}
        for objs in self.bindings(parent).values():
            scope.update(objs)
        ran = set()
        for block in rules:
            for ev, obj, we in hits:
                if ev != block.event:
                    continue
                in_scope = (we in scope) if we is not None else (obj in self._all_bound_under(parent))
                if not in_scope:
                    continue
                key = (block.event, block.action, obj)
                if key in ran:
                    continue
                ran.add(key)
                self._run_rule(parent, wrec, block, obj, tx)

    def _all_bound_under(self, parent) -> set:
        out = set()
        for objs in self.bindings(parent).values():
            for obj in objs:
                out.add(obj)
                if obj in self.store.work_envs:
                    for inner in self.bindings(obj).values():
                        out.update(inner)
        return out

    def _run_rule(self, parent, wrec, block, obj, tx):
        from . import actions

        engine = self.engine

        def run():
            ctx = RolePathContext(self, parent, engine.store, subject=obj_ref(obj),
                                  command=tx.command, user=wrec.user,
                                  params={"name": obj}, writes=engine.current_tx.writes)
            actions.Runner(engine, ctx).run(actions.cached_program(block.action))

        engine.run_in_tx(f"rule:{block.event}", obj, wrec.user, run,
                         depth=tx.depth + 1, parent=tx.id)

    def new_role_instance(self, ctx, role_name: str):
        """`new <role>`: create a WE for a process-typed role, at most once."""
        parent = getattr(ctx, "parent_we", None)
        if parent is None and ctx.we:
            parent = ctx.we
        if parent is None:
            raise TempoError("`new <role>` needs an enclosing work environment")
        store = self.store
        wrec = store.work_envs[parent]
        resolved = store.schema.effective(wrec.ptype)
        role = resolved.roles.get(role_name)
        if role is None:
            raise TempoError(f"unknown role {role_name!r} in {wrec.ptype!r}")
        if self.bindings(parent).get(role_name):
            return None  # idempotence guard: instance already created
        base = role.base
        base_eff = store.schema.effective(base)
        if not base_eff.is_process:
            raise TempoError(f"`new {role_name}` needs a process-typed role base")
        objects = []
        for rname, objs in sorted(self.bindings(parent).items()):
            if rname == role_name:
                continue
            for obj in objs:
                if obj not in store.work_envs and obj not in objects:
                    objects.append(obj)
        count = sum(1 for w in store.work_envs.values() if w.ptype == base)
        we_name = f"we_{base}_{count + 1}"
        engine = self.engine
        engine.create_object_in_tx(we_name, base, "project", user=wrec.user)
        engine.apply({"op": "newctx", "name": f"ctx_{we_name}", "roots": list(objects)})
        ws_root = os.path.join(engine.ws_base, we_name) if engine.ws_base else f"::{we_name}"
        engine.apply({"op": "newws", "name": f"ws_{we_name}", "root": ws_root,
                      "context": f"ctx_{we_name}", "owner": wrec.user})
        engine.apply({"op": "newwe", "name": we_name, "ptype": base, "user": wrec.user,
                      "workspace": f"ws_{we_name}", "tools": []})
        if engine.ws_base:
            self._materialize(we_name, ws_root)
        self._bind_roles(we_name, base, objects, wrec.user)
        bctx = engine._base_ctx(obj_ref(parent), "new", wrec.user)
        engine.create_relation_in_tx(bctx, parent, self.role_reltype(wrec.ptype, role_name), we_name)
        return we_name


class RolePathContext(EvalContext):
    """Evaluation context for process rules: dotted role paths.

    ``P.role.%name.attr`` resolves against the parent WE: a role name yields
    its bound objects (child WEs for process-typed roles), a further role
    name steps into those WEs' bindings as role relation instances, %name
    filters by bound-object name, and an attribute step reads the role-local
    overlay with fallback to the shared object.
    """

    def __init__(self, tempo: TempoManager, parent_we: str, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.tempo = tempo
        self.parent_we = parent_we

    def resolve_unit(self, name: str):
        bindings = self.tempo.bindings(self.parent_we)
        if name in bindings:
            return [obj_ref(o) for o in bindings[name]]
        return super().resolve_unit(name)

    def step(self, items, step):
        kind = step[0]
        if kind != "dot":
            return super().step(items, step)
        unit = step[1]
        store = self.store
        if unit[0] == "param":
            wanted = self.param_value(unit[1])
            out = []
            for item in items:
                if isinstance(item, tuple) and item[0] == "rel" and item[1][2] == wanted:
                    out.append(item)
                elif isinstance(item, tuple) and item[0] == "obj" and item[1] == wanted:
                    out.append(item)
            return out
        seg = unit[1]
        out = []
        for item in items:
            if isinstance(item, tuple) and item[0] == "obj" and item[1] in store.work_envs:
                wrec = store.work_envs[item[1]]
                reltype = self.tempo.role_reltype(wrec.ptype, seg)
                for key in sorted(store.rels_by_origin.get(item[1], set())):
                    rel = store.relations[key]
                    if not rel.deleted and rel.reltype == reltype:
                        out.append(rel_ref(*key))
                continue
            if isinstance(item, tuple) and item[0] == "rel":
                rel = store.relations[tuple(item[1])]
                if seg in rel.attributes:
                    out.append(rel.attributes[seg])
                else:
                    # unset copies stay visible: a copy with no state is not
                    # "ready", so the set must not collapse to the set ones
                    out.append(store.read_attr(obj_ref(rel.dest), seg))
                continue
            if isinstance(item, tuple) and item[0] == "obj":
                value = self.attr_value(item, seg)
                if value is not UNSET:
                    out.append(value)
                continue
        return out


def _cached_filter(source: str):
    ast = _FILTER_CACHE.get(source)
    if ast is None:
        ast = lang.parse_event(source)
        _FILTER_CACHE[source] = ast
    return ast


def _cached_rule(source: str):
    return _cached_filter(source)


_FILTER_CACHE: dict[str, object] = {}


def _path_of(ws, obj: str):
    if ws is None:
        return None
    for relpath in sorted(ws.mapping):
        if ws.mapping[relpath].object == obj:
            return relpath
    return None
