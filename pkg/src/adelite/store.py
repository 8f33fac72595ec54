"""Typed object/relation store with versioning, history, and delta journal.

Every mutation is a delta: a JSON-serializable dict applied through
``Store.apply``, which returns the inverse delta. Transactions (owned by the
engine) buffer applied deltas for the journal and keep the inverses for
rollback; recovery replays journal deltas against an empty store. The store
therefore never needs copy-on-write views: a transaction mutates in place and
aborts by applying inverses in reverse order.

Identity: objects by symbolic name, relations by the (origin | type |
destination) triple. Deletion tombstones; history is append-only and
retained for deleted entities.

Object names are enforced unique across the whole store (one global
sub-project name space).
"""

from __future__ import annotations

import datetime
import hashlib
import json
from dataclasses import dataclass, field

from . import lang
from .schema import (
    AttributeDef,
    EventRule,
    MethodDef,
    SchemaRegistry,
    TypeDef,
    typedef_from_dict,
    typedef_to_dict,
)
from .values import UNSET, Domain, decode_value, encode_value


class StoreError(ValueError):
    """Domain-level store error (unknown entity, constraint violation...)."""


def obj_ref(name: str) -> tuple:
    return ("obj", name)


def rel_ref(origin: str, reltype: str, dest: str) -> tuple:
    return ("rel", (origin, reltype, dest))


def ref_text(ref) -> str:
    if ref[0] == "obj":
        return ref[1]
    origin, reltype, dest = ref[1]
    return f"({origin}|{reltype}|{dest})"


def _entity_field(ref):
    return [ref[0], list(ref[1])] if ref[0] == "rel" else [ref[0], ref[1]]


def _entity_ref(data):
    return ("rel", tuple(data[1])) if data[0] == "rel" else ("obj", data[1])


def _enc(value):
    return None if value is UNSET or value is None else encode_value(value)


def _dec(text):
    return UNSET if text is None else decode_value(text)


@dataclass
class Revision:
    number: int
    snapshot: dict
    timestamp: datetime.datetime
    author: str

    def view(self) -> dict:
        """Attribute view for selection predicates (adds date/author/number)."""
        view = dict(self.snapshot)
        view.setdefault("date", self.timestamp.date())
        view.setdefault("author", self.author)
        view.setdefault("number", self.number)
        return view


@dataclass
class Branch:
    name: str
    revisions: list = field(default_factory=list)


@dataclass
class ObjectInstance:
    name: str
    type: str
    partition: str
    attributes: dict = field(default_factory=dict)
    branches: dict = field(default_factory=dict)
    deleted: bool = False


@dataclass
class RelationInstance:
    origin: str
    reltype: str
    dest: str
    attributes: dict = field(default_factory=dict)
    deleted: bool = False

    @property
    def key(self):
        return (self.origin, self.reltype, self.dest)


@dataclass
class HistoryRecord:
    timestamp: datetime.datetime
    attr: str
    old: object
    new: object
    command: str
    user: str


@dataclass
class ContextRec:
    name: str
    roots: tuple


@dataclass
class MapEntry:
    object: str
    branch: str = "main"
    revision: int | None = None  # None = dynamic link
    mode: str = "copy"  # copy | static-link | dynamic-link

    def to_list(self):
        return [self.object, self.branch, self.revision, self.mode]


@dataclass
class WorkspaceRec:
    name: str
    root: str
    context: str
    owner: str
    mapping: dict = field(default_factory=dict)  # relpath -> MapEntry


@dataclass
class WorkEnvRec:
    name: str
    ptype: str
    user: str
    workspace: str
    tools: tuple = ()


DEFAULT_BRANCH = "main"


class Store:
    """In-memory state; all mutations flow through ``apply``."""

    def __init__(self):
        self.schema = SchemaRegistry()
        self.events: dict[str, EventRule] = {}
        self.free_methods: dict[str, MethodDef] = {}
        self.objects: dict[str, ObjectInstance] = {}
        self.relations: dict[tuple, RelationInstance] = {}
        self.rels_by_origin: dict[str, set] = {}
        self.rels_by_dest: dict[str, set] = {}
        self.rels_by_type: dict[str, set] = {}
        self.history: dict[str, list[HistoryRecord]] = {}
        self.contexts: dict[str, ContextRec] = {}
        self.workspaces: dict[str, WorkspaceRec] = {}
        self.work_envs: dict[str, WorkEnvRec] = {}
        self.inboxes: dict[str, list[str]] = {}
        self.event_log: list[dict] = []
        self.events_version = 0
        self.rel_version = 0
        self.command_runner = None  # set by the engine (computed attributes)
        self._computed_cache: dict[str, object] = {}
        self._comp_cache = None
        self._handlers: dict = {}
        install_builtins(self)

    # ------------------------------------------------------------------
    # Delta application

    def apply(self, delta: dict) -> dict:
        """Apply one delta, return its inverse."""
        op = delta["op"]
        try:
            handler = self._handlers[op]
        except KeyError:
            handler = getattr(self, f"_apply_{op}", None)
            if handler is None:
                raise StoreError(f"unknown delta op {op!r}") from None
            self._handlers[op] = handler
        return handler(delta)

    def _apply_defpart(self, d):
        self.schema.define_partition(d["name"], d["parent"], d["subproject"])
        return {"op": "rmpart", "name": d["name"]}

    def _apply_rmpart(self, d):
        self.schema.partitions.pop(d["name"])
        self.schema.version += 1
        return d  # not re-invertible; only used as an undo

    def _apply_deftype(self, d):
        partition = d["partition"]
        tdef = typedef_from_dict(d["tdef"])
        prev = self.schema.partitions[partition].types.get(tdef.name)
        self.schema.define_type(tdef, partition)
        return {
            "op": "rmtype",
            "partition": partition,
            "name": tdef.name,
            "prev": None if prev is None else typedef_to_dict(prev),
        }

    def _apply_rmtype(self, d):
        part = self.schema.partitions[d["partition"]]
        if d["prev"] is None:
            part.types.pop(d["name"], None)
        else:
            part.types[d["name"]] = typedef_from_dict(d["prev"])
        self.schema.version += 1
        return d

    def _apply_defevent(self, d):
        prev = self.events.get(d["name"])
        self.events[d["name"]] = EventRule(d["name"], d["source"], d["priority"])
        self.events_version += 1
        return {
            "op": "rmevent",
            "name": d["name"],
            "prev": None if prev is None else {"source": prev.source, "priority": prev.priority},
        }

    def _apply_rmevent(self, d):
        if d["prev"] is None:
            self.events.pop(d["name"], None)
        else:
            self.events[d["name"]] = EventRule(d["name"], d["prev"]["source"], d["prev"]["priority"])
        self.events_version += 1
        return d

    def _apply_defmethod(self, d):
        prev = self.free_methods.get(d["name"])
        self.events_version += 1
        self.free_methods[d["name"]] = MethodDef(
            d["name"], tuple(d["params"]), tuple(tuple(f) for f in d["flags"]), d["body"]
        )
        return {
            "op": "rmmethod",
            "name": d["name"],
            "prev": None
            if prev is None
            else {"params": list(prev.params), "flags": [list(f) for f in prev.flags], "body": prev.body},
        }

    def _apply_rmmethod(self, d):
        self.events_version += 1
        if d["prev"] is None:
            self.free_methods.pop(d["name"], None)
        else:
            p = d["prev"]
            self.free_methods[d["name"]] = MethodDef(
                d["name"], tuple(p["params"]), tuple(tuple(f) for f in p["flags"]), p["body"]
            )
        return d

    def _apply_newobj(self, d):
        name = d["name"]
        self.objects[name] = ObjectInstance(name, d["type"], d["partition"])
        return {"op": "rmobj", "name": name}

    def _apply_rmobj(self, d):
        self.objects.pop(d["name"], None)
        return d

    def _apply_tombobj(self, d):
        self.objects[d["name"]].deleted = True
        return {"op": "untombobj", "name": d["name"]}

    def _apply_untombobj(self, d):
        self.objects[d["name"]].deleted = False
        return {"op": "tombobj", "name": d["name"]}

    def _apply_newrel(self, d):
        key = (d["origin"], d["reltype"], d["dest"])
        self.relations[key] = RelationInstance(*key)
        self.rels_by_origin.setdefault(key[0], set()).add(key)
        self.rels_by_dest.setdefault(key[2], set()).add(key)
        self.rels_by_type.setdefault(key[1], set()).add(key)
        self.rel_version += 1
        return {"op": "rmrel", "origin": key[0], "reltype": key[1], "dest": key[2]}

    def _apply_rmrel(self, d):
        key = (d["origin"], d["reltype"], d["dest"])
        self.relations.pop(key, None)
        self.rels_by_origin.get(key[0], set()).discard(key)
        self.rels_by_dest.get(key[2], set()).discard(key)
        self.rels_by_type.get(key[1], set()).discard(key)
        self.rel_version += 1
        return d

    def _apply_tombrel(self, d):
        key = (d["origin"], d["reltype"], d["dest"])
        self.relations[key].deleted = True
        self.rel_version += 1
        return {"op": "untombrel", **{k: d[k] for k in ("origin", "reltype", "dest")}}

    def _apply_untombrel(self, d):
        key = (d["origin"], d["reltype"], d["dest"])
        self.relations[key].deleted = False
        self.rel_version += 1
        return {"op": "tombrel", **{k: d[k] for k in ("origin", "reltype", "dest")}}

    def _apply_setattr(self, d):
        ref = _entity_ref(d["entity"])
        entity = self.entity(ref)
        attr = d["attr"]
        new = _dec(d["new"])
        old_field = d["old"]
        if new is UNSET:
            entity.attributes.pop(attr, None)
        else:
            entity.attributes[attr] = new
        return {"op": "setattr", "entity": d["entity"], "attr": attr, "old": d["new"], "new": old_field}

    def _apply_hist(self, d):
        key = self.history_key(_entity_ref(d["entity"]))
        self.history.setdefault(key, []).append(
            HistoryRecord(
                timestamp=datetime.datetime.fromisoformat(d["ts"]),
                attr=d["attr"],
                old=_dec(d["old"]),
                new=_dec(d["new"]),
                command=d["command"],
                user=d["user"],
            )
        )
        return {"op": "pophist", "entity": d["entity"]}

    def _apply_pophist(self, d):
        self.history[self.history_key(_entity_ref(d["entity"]))].pop()
        return d

    def _apply_newbranch(self, d):
        self.objects[d["object"]].branches[d["branch"]] = Branch(d["branch"])
        return {"op": "rmbranch", "object": d["object"], "branch": d["branch"]}

    def _apply_rmbranch(self, d):
        self.objects[d["object"]].branches.pop(d["branch"], None)
        return d

    def _apply_newrev(self, d):
        branch = self.objects[d["object"]].branches[d["branch"]]
        branch.revisions.append(
            Revision(
                number=d["number"],
                snapshot={k: decode_value(v) for k, v in d["snapshot"].items()},
                timestamp=datetime.datetime.fromisoformat(d["ts"]),
                author=d["author"],
            )
        )
        return {"op": "poprev", "object": d["object"], "branch": d["branch"]}

    def _apply_poprev(self, d):
        self.objects[d["object"]].branches[d["branch"]].revisions.pop()
        return d

    def _apply_inbox(self, d):
        self.inboxes.setdefault(d["user"], []).append(d["message"])
        return {"op": "popinbox", "user": d["user"]}

    def _apply_popinbox(self, d):
        self.inboxes[d["user"]].pop()
        return d

    def _apply_evlog(self, d):
        self.event_log.append({k: d[k] for k in ("event", "target", "command", "user", "ts")})
        return {"op": "popevlog"}

    def _apply_popevlog(self, d):
        self.event_log.pop()
        return d

    def _apply_newctx(self, d):
        self.contexts[d["name"]] = ContextRec(d["name"], tuple(d["roots"]))
        return {"op": "rmctx", "name": d["name"]}

    def _apply_rmctx(self, d):
        self.contexts.pop(d["name"], None)
        return d

    def _apply_setctx(self, d):
        ctx = self.contexts[d["name"]]
        old = list(ctx.roots)
        ctx.roots = tuple(d["roots"])
        return {"op": "setctx", "name": d["name"], "roots": old}

    def _apply_newws(self, d):
        self.workspaces[d["name"]] = WorkspaceRec(d["name"], d["root"], d["context"], d["owner"])
        return {"op": "rmws", "name": d["name"]}

    def _apply_rmws(self, d):
        self.workspaces.pop(d["name"], None)
        return d

    def _apply_wsmap(self, d):
        ws = self.workspaces[d["ws"]]
        old = ws.mapping.get(d["path"])
        if d["entry"] is None:
            ws.mapping.pop(d["path"], None)
        else:
            obj, branch, rev, mode = d["entry"]
            ws.mapping[d["path"]] = MapEntry(obj, branch, rev, mode)
        return {
            "op": "wsmap",
            "ws": d["ws"],
            "path": d["path"],
            "entry": None if old is None else old.to_list(),
        }

    def _apply_newwe(self, d):
        self.work_envs[d["name"]] = WorkEnvRec(
            d["name"], d["ptype"], d["user"], d["workspace"], tuple(d["tools"])
        )
        return {"op": "rmwe", "name": d["name"]}

    def _apply_rmwe(self, d):
        self.work_envs.pop(d["name"], None)
        return d

    # ------------------------------------------------------------------
    # Lookup helpers

    def entity(self, ref):
        if ref[0] == "obj":
            inst = self.objects.get(ref[1])
        else:
            inst = self.relations.get(tuple(ref[1]))
        if inst is None:
            raise StoreError(f"unknown entity {ref_text(ref)}")
        return inst

    def live_object(self, name: str) -> ObjectInstance:
        obj = self.objects.get(name)
        if obj is None or obj.deleted:
            raise StoreError(f"unknown object {name!r}")
        return obj

    def history_key(self, ref) -> str:
        if ref[0] == "obj":
            return f"obj:{ref[1]}"
        return "rel:" + "|".join(ref[1])

    def entity_type(self, ref) -> str:
        return self.entity(ref).type if ref[0] == "obj" else ref[1][1]

    def entity_partition(self, ref) -> str:
        if ref[0] == "obj":
            return self.entity(ref).partition
        try:
            return self.objects[ref[1][0]].partition
        except KeyError:
            return SchemaRegistry.ROOT

    def resolved_for(self, ref):
        return self.schema.effective(self.entity_type(ref), self.entity_partition(ref))

    def live_rels(self, origin=None, reltype=None, dest=None):
        """Live relation instances matching the (partial) triple, sorted."""
        if reltype is not None:
            reltype = self.schema.resolve_name(reltype)
        keysets = []
        if origin is not None:
            keysets.append(self.rels_by_origin.get(origin, set()))
        if dest is not None:
            keysets.append(self.rels_by_dest.get(dest, set()))
        if reltype is not None:
            keysets.append(self.rels_by_type.get(reltype, set()))
        if keysets:
            keys = set.intersection(*keysets)
        else:
            keys = set(self.relations)
        out = [k for k in keys if not self.relations[k].deleted]
        out.sort()
        return out

    def composition_reltypes(self) -> list[str]:
        cached = self._comp_cache
        if cached is not None and cached[0] == self.schema.version:
            return cached[1]
        names = []
        for part in self.schema.partitions.values():
            for tdef in part.types.values():
                if tdef.kind == "relation":
                    eff = self.schema.effective(tdef.name, part.name)
                    if eff.composition and tdef.name not in names:
                        names.append(tdef.name)
        names.sort()
        self._comp_cache = (self.schema.version, names)
        return names

    def composition_children(self, name: str) -> list[tuple[str, str]]:
        """(child, reltype) pairs for live composition edges from ``name``."""
        out = []
        comp = set(self.composition_reltypes())
        for key in sorted(self.rels_by_origin.get(name, set())):
            if key in self.relations and not self.relations[key].deleted and key[1] in comp:
                out.append((key[2], key[1]))
        return out

    def composition_parents(self, name: str) -> list[str]:
        out = []
        comp = set(self.composition_reltypes())
        for key in sorted(self.rels_by_dest.get(name, set())):
            if key in self.relations and not self.relations[key].deleted and key[1] in comp:
                out.append(key[0])
        return out

    def aggregate_closure(self, root: str) -> list[str]:
        """Root plus everything reachable over composition relations."""
        if root not in self.objects or self.objects[root].deleted:
            raise StoreError(f"unknown aggregate root {root!r}")
        seen = [root]
        queue = [root]
        while queue:
            cursor = queue.pop(0)
            for child, _rel in self.composition_children(cursor):
                if child not in seen:
                    seen.append(child)
                    queue.append(child)
        return seen

    def context_membership(self, name: str) -> list[str]:
        ctx = self.contexts.get(name)
        if ctx is None:
            raise StoreError(f"unknown context {name!r}")
        members: list[str] = []
        for root in ctx.roots:
            for member in self.aggregate_closure(root):
                if member not in members:
                    members.append(member)
        return members

    # ------------------------------------------------------------------
    # Attribute reads

    def role_overlay(self, we_name: str, obj_name: str):
        """Role binding relation for an object inside a WE, if any."""
        we = self.work_envs.get(we_name)
        if we is None:
            return None
        for key in sorted(self.rels_by_origin.get(we_name, set())):
            rel = self.relations.get(key)
            if rel is None or rel.deleted or rel.dest != obj_name:
                continue
            try:
                tdef = self.schema.effective(rel.reltype, self.entity_partition(("obj", we_name)))
            except Exception:
                continue
            if tdef.role_of:
                return rel
        return None

    def read_attr(self, ref, name: str, we: str | None = None):
        """Scoped attribute read: WE overlay, own value, containment ancestors,
        default, computed command, else UNSET."""
        entity = self.entity(ref)
        if we is not None and ref[0] == "obj":
            overlay = self.role_overlay(we, ref[1])
            if overlay is not None and name in overlay.attributes:
                return overlay.attributes[name]
        if name in entity.attributes:
            value = entity.attributes[name]
            return self._computed_or_value(ref, name, value)
        resolved = self.resolved_for(ref)
        adef = resolved.attr_def(name)
        if ref[0] == "obj":
            for ancestor in self._scoping_ancestors(ref[1]):
                holder = self.objects[ancestor]
                if name in holder.attributes:
                    return self._computed_or_value(("obj", ancestor), name, holder.attributes[name])
        if adef is not None:
            if adef.computed:
                return self._run_computed(adef.computed)
            if adef.default is not None:
                return adef.default
        if adef is None:
            raise StoreError(f"unknown attribute {name!r} on {ref_text(ref)}")
        return UNSET

    def _computed_or_value(self, ref, name, value):
        resolved = self.resolved_for(ref)
        adef = resolved.attr_def(name)
        if adef is not None and adef.computed:
            command = value if isinstance(value, str) and value else adef.computed
            return self._run_computed(command)
        return value

    def _run_computed(self, command: str):
        if command in self._computed_cache:
            return self._computed_cache[command]
        result = UNSET
        if self.command_runner is not None:
            try:
                out = self.command_runner(command)
                result = out if out is not None else UNSET
            except Exception:
                result = UNSET
        self._computed_cache[command] = result
        return result

    def _scoping_ancestors(self, name: str) -> list[str]:
        """Containment ancestors, nearest first (BFS over composition parents)."""
        out: list[str] = []
        frontier = [name]
        seen = {name}
        while frontier:
            nxt: list[str] = []
            for member in frontier:
                for parent in self.composition_parents(member):
                    if parent not in seen:
                        seen.add(parent)
                        out.append(parent)
                        nxt.append(parent)
            frontier = nxt
        return out

    def history_matches(self, ref, attr: str, op: str, value) -> bool:
        """True iff a history record or the current state ever matched."""
        key = self.history_key(ref)
        for rec in self.history.get(key, []):
            if rec.attr != attr:
                continue
            if _value_matches(rec.new, op, value) or _value_matches(rec.old, op, value):
                return True
        entity = self.entity(ref)
        current = entity.attributes.get(attr, UNSET)
        return _value_matches(current, op, value)

    # ------------------------------------------------------------------
    # Serialization / digest

    def serialize(self) -> dict:
        def attrs(mapping):
            return {k: encode_value(v) for k, v in sorted(mapping.items())}

        return {
            "partitions": {
                p.name: {
                    "parent": p.parent,
                    "subproject": p.subproject,
                    "types": {n: typedef_to_dict(t) for n, t in sorted(p.types.items())},
                }
                for p in sorted(self.schema.partitions.values(), key=lambda p: p.name)
            },
            "events": {
                n: {"source": e.source, "priority": e.priority} for n, e in sorted(self.events.items())
            },
            "free_methods": {
                n: {"params": list(m.params), "flags": [list(f) for f in m.flags], "body": m.body}
                for n, m in sorted(self.free_methods.items())
            },
            "objects": {
                o.name: {
                    "type": o.type,
                    "partition": o.partition,
                    "deleted": o.deleted,
                    "attributes": attrs(o.attributes),
                    "branches": {
                        b.name: [
                            {
                                "number": r.number,
                                "snapshot": attrs(r.snapshot),
                                "ts": r.timestamp.isoformat(),
                                "author": r.author,
                            }
                            for r in b.revisions
                        ]
                        for b in sorted(o.branches.values(), key=lambda b: b.name)
                    },
                }
                for o in sorted(self.objects.values(), key=lambda o: o.name)
            },
            "relations": {
                "|".join(r.key): {"deleted": r.deleted, "attributes": attrs(r.attributes)}
                for r in sorted(self.relations.values(), key=lambda r: r.key)
            },
            "history": {
                key: [
                    {
                        "ts": rec.timestamp.isoformat(),
                        "attr": rec.attr,
                        "old": _enc(rec.old),
                        "new": _enc(rec.new),
                        "command": rec.command,
                        "user": rec.user,
                    }
                    for rec in records
                ]
                for key, records in sorted(self.history.items())
            },
            "contexts": {c.name: list(c.roots) for c in sorted(self.contexts.values(), key=lambda c: c.name)},
            "workspaces": {
                w.name: {
                    "root": w.root,
                    "context": w.context,
                    "owner": w.owner,
                    "mapping": {p: e.to_list() for p, e in sorted(w.mapping.items())},
                }
                for w in sorted(self.workspaces.values(), key=lambda w: w.name)
            },
            "work_envs": {
                w.name: {"ptype": w.ptype, "user": w.user, "workspace": w.workspace, "tools": list(w.tools)}
                for w in sorted(self.work_envs.values(), key=lambda w: w.name)
            },
            "inboxes": {u: list(msgs) for u, msgs in sorted(self.inboxes.items())},
            "event_log": list(self.event_log),
        }

    def digest(self) -> str:
        payload = json.dumps(self.serialize(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    @classmethod
    def deserialize(cls, data: dict) -> "Store":
        store = cls.__new__(cls)
        store.schema = SchemaRegistry()
        store.schema.partitions.clear()
        ordered = sorted(data["partitions"].items(), key=lambda kv: _partition_depth(data, kv[0]))
        for name, pdata in ordered:
            from .schema import Partition

            store.schema.partitions[name] = Partition(
                name, pdata["parent"], pdata["subproject"],
                {n: typedef_from_dict(t) for n, t in pdata["types"].items()},
            )
        store.schema.version += 1
        store.events = {
            n: EventRule(n, e["source"], e["priority"]) for n, e in data["events"].items()
        }
        store.free_methods = {
            n: MethodDef(n, tuple(m["params"]), tuple(tuple(f) for f in m["flags"]), m["body"])
            for n, m in data["free_methods"].items()
        }
        store.objects = {}
        for name, odata in data["objects"].items():
            obj = ObjectInstance(
                name, odata["type"], odata["partition"],
                {k: decode_value(v) for k, v in odata["attributes"].items()},
                deleted=odata["deleted"],
            )
            for bname, revs in odata["branches"].items():
                obj.branches[bname] = Branch(bname, [
                    Revision(r["number"], {k: decode_value(v) for k, v in r["snapshot"].items()},
                             datetime.datetime.fromisoformat(r["ts"]), r["author"])
                    for r in revs
                ])
            store.objects[name] = obj
        store.relations = {}
        store.rels_by_origin = {}
        store.rels_by_dest = {}
        store.rels_by_type = {}
        for keytext, rdata in data["relations"].items():
            key = tuple(keytext.split("|"))
            rel = RelationInstance(*key, {k: decode_value(v) for k, v in rdata["attributes"].items()},
                                   rdata["deleted"])
            store.relations[key] = rel
            store.rels_by_origin.setdefault(key[0], set()).add(key)
            store.rels_by_dest.setdefault(key[2], set()).add(key)
            store.rels_by_type.setdefault(key[1], set()).add(key)
        store.history = {
            key: [
                HistoryRecord(datetime.datetime.fromisoformat(r["ts"]), r["attr"],
                              _dec(r["old"]), _dec(r["new"]), r["command"], r["user"])
                for r in records
            ]
            for key, records in data["history"].items()
        }
        store.contexts = {n: ContextRec(n, tuple(roots)) for n, roots in data["contexts"].items()}
        store.workspaces = {}
        for name, wdata in data["workspaces"].items():
            ws = WorkspaceRec(name, wdata["root"], wdata["context"], wdata["owner"])
            ws.mapping = {p: MapEntry(*entry) for p, entry in wdata["mapping"].items()}
            store.workspaces[name] = ws
        store.work_envs = {
            n: WorkEnvRec(n, w["ptype"], w["user"], w["workspace"], tuple(w["tools"]))
            for n, w in data["work_envs"].items()
        }
        store.inboxes = {u: list(msgs) for u, msgs in data["inboxes"].items()}
        store.event_log = list(data["event_log"])
        store.events_version = 0
        store.rel_version = 0
        store.command_runner = None
        store._computed_cache = {}
        store._comp_cache = None
        store._handlers = {}
        return store


def _partition_depth(data, name) -> tuple:
    depth = 0
    cursor = name
    while cursor is not None:
        parent = data["partitions"][cursor]["parent"]
        cursor = parent
        depth += 1
        if depth > 100:
            break
    return (depth, name)


def _value_matches(stored, op: str, wanted) -> bool:
    if stored is UNSET or stored is None:
        return False
    if isinstance(stored, frozenset):
        if op in ("=", "=="):
            return wanted in stored if op == "=" else stored == {wanted}
        if op == "!=":
            return wanted not in stored
        return False
    return lang.compare_values(stored, op, wanted)


# ---------------------------------------------------------------------------
# Evaluation context


@dataclass
class WriteRecord:
    subject: tuple  # logical subject (object the write is "about")
    holder: tuple  # entity actually written (may be a role relation)
    attr: str
    old: object
    new: object


class EvalContext:
    """Bridges the expression language to the store and a running command."""

    def __init__(
        self,
        store: Store,
        subject=None,
        command: str | None = None,
        user: str | None = None,
        params: dict | None = None,
        bindings: dict | None = None,
        writes=None,
        we: str | None = None,
        admin: bool = False,
    ):
        self.store = store
        self.subject = subject
        self.command = command
        self.user = user
        self.params = params or {}
        self.bindings = bindings or {}
        self.writes = writes if writes is not None else []
        self.we = we
        self.admin = admin
        self.diags: list[str] = []

    def child(self, **overrides):
        fields = dict(
            store=self.store,
            subject=self.subject,
            command=self.command,
            user=self.user,
            params=self.params,
            bindings=self.bindings,
            writes=self.writes,
            we=self.we,
            admin=self.admin,
        )
        fields.update(overrides)
        ctx = EvalContext(**fields)
        ctx.diags = self.diags
        return ctx

    def diagnostic(self, message: str):
        self.diags.append(message)

    # -- bindings, params

    def binding_value(self, name: str):
        if name in self.bindings:
            return self.bindings[name]
        raise lang.LangError(f"unresolved binding !{name}")

    def param_value(self, name: str):
        if name in self.params:
            return self.params[name]
        if self.subject is not None:
            value = self.attr_of_subject(name)
            if value is not UNSET:
                return value
        raise lang.LangError(f"unresolved parameter %{name}")

    def attr_of_subject(self, name: str):
        if self.subject is None:
            raise lang.LangError(f"no subject for attribute {name!r}")
        return self.attr_value(self.subject, name)

    def attr_value(self, ref, name: str):
        try:
            return self.store.read_attr(ref, name, we=self.we)
        except StoreError:
            if name == "name":
                return ref[1] if ref[0] == "obj" else "|".join(ref[1])
            if name == "type":
                return lang._TypeName(self.store.entity_type(ref))
            return UNSET

    # -- subject predicates

    def subject_modified(self) -> bool:
        return any(w.subject == self.subject for w in self.writes)

    def subject_type(self):
        if self.subject is None:
            return None
        return self.store.entity_type(self.subject)

    def type_matches(self, actual: str, wanted: str) -> bool:
        try:
            return self.store.schema.is_subtype(actual, wanted)
        except Exception:
            return actual == wanted

    def transition_matches(self, attr: str, value) -> bool:
        """attr := v means the attribute actually becomes v in this command
        (a write with the new value differing from the old)."""
        for w in self.writes:
            if w.attr != attr:
                continue
            if self.subject is not None and w.subject != self.subject:
                continue
            if _value_matches(w.new, "=", value) and w.old != w.new:
                return True
        return False

    def history_matches(self, item, attr, op, value) -> bool:
        ref = item if isinstance(item, tuple) and item and item[0] in ("obj", "rel") else None
        if ref is None and isinstance(item, str) and item in self.store.objects:
            ref = ("obj", item)
        if ref is None:
            return False
        return self.store.history_matches(ref, attr, op, value)

    # -- navigation

    def resolve_unit(self, name: str):
        if name in self.store.objects and not self.store.objects[name].deleted:
            return [("obj", name)]
        return []

    def match_triple(self, origin, reltype, dest):
        def as_name(term):
            if term is None:
                return None
            if isinstance(term, tuple) and term[0] == "obj":
                return term[1]
            return str(term)

        rel = None if reltype is None else as_name(reltype)
        keys = self.store.live_rels(as_name(origin), rel, as_name(dest))
        return [("rel", k) for k in keys]

    def step(self, items, step):
        kind = step[0]
        out = []
        if kind == "origins":
            for item in items:
                name = item[1] if isinstance(item, tuple) and item[0] == "obj" else item
                if isinstance(item, tuple) and item[0] == "rel":
                    name = item[1][2]
                for key in self.store.live_rels(None, step[1], str(name)):
                    out.append(("obj", key[0]))
            return out
        if kind == "attr":
            for item in items:
                if isinstance(item, tuple) and item[0] in ("obj", "rel"):
                    out.append(self.attr_value(item, step[1]))
                else:
                    raise lang.LangError(f"cannot read attribute {step[1]!r} of a value")
            # unset reads stay in the result: a collected set over matches
            # must not collapse to just the instantiated ones
            return out
        if kind == "dot":
            unit = step[1]
            if unit[0] == "name":
                return self.step(items, ("attr", unit[1]))
            raise lang.LangError("role paths are only available in process rules")
        raise lang.LangError(f"unknown path step {step!r}")

    def as_value(self, item):
        if isinstance(item, tuple) and item and item[0] == "obj":
            return item[1]
        if isinstance(item, tuple) and item and item[0] == "rel":
            return "|".join(item[1])
        return item

    # -- entry points

    def eval_event(self, ast) -> bool:
        return lang.eval_event(ast, self)

    def navigate(self, operand: lang.Operand):
        return lang.eval_operand(operand, self, role="lhs")


# ---------------------------------------------------------------------------
# Builtin schema


def install_builtins(store: Store):
    reg = store.schema
    S = lambda *names: tuple(names)  # noqa: E731

    def deftype(**kw):
        reg.define_type(TypeDef(**kw))

    deftype(name="object", kind="object")
    deftype(name="rset", kind="object", supertypes=S("object"))
    deftype(name="family", kind="object", supertypes=S("object"))
    deftype(name="interface", kind="object", supertypes=S("object"))
    deftype(
        name="realization",
        kind="object",
        supertypes=S("object"),
        attributes=(AttributeDef("constraints", Domain("string")),),
    )
    deftype(name="configuration", kind="object", supertypes=S("realization"))
    deftype(
        name="workspace",
        kind="object",
        supertypes=S("object"),
        attributes=(AttributeDef("author", Domain("string")),),
    )
    deftype(
        name="document",
        kind="object",
        supertypes=S("object"),
        attributes=(
            AttributeDef("content", Domain("string")),
            AttributeDef("suffix", Domain("string")),
        ),
    )
    deftype(
        name="system_model",
        kind="object",
        supertypes=S("object"),
        attributes=(
            AttributeDef("root", Domain("string")),
            AttributeDef("constraints", Domain("string")),
            AttributeDef("selection", Domain("string")),
        ),
    )
    deftype(
        name="part",
        kind="relation",
        cardinality="1:N",
        structure="DAG",
        composition=True,
    )
    deftype(
        name="has_interface",
        kind="relation",
        cardinality="1:N",
        structure="DAG",
        domain_pairs=(("type = family", "type = interface"),),
    )
    deftype(
        name="is_realized",
        kind="relation",
        cardinality="1:N",
        structure="DAG",
        domain_pairs=(("type = interface", "type = realization"),),
    )
    deftype(
        name="depends_on",
        kind="relation",
        cardinality="N:N",
        structure="DAG",
    )
    deftype(
        name="composed_of",
        kind="relation",
        cardinality="N:N",
        composition=True,
    )
    deftype(
        name="RefWS",
        kind="relation",
        cardinality="N:N",
        domain_pairs=(("type = workspace", ""),),
    )
