"""Type system: object/relation/process types, multiple inheritance, partitions.

Types live in partition overlays. A partition chain (root "project" down to a
leaf sub-project) can refine an inherited type definition: add attributes,
override attribute defaults (widening an enumeration is allowed, narrowing is
not), override method bodies, and add triggers. Nothing inherited can be
deleted, and triggers accumulate: a resolved trigger list is always a
superset of every ancestor's.

Inheritance linearization is depth-first over the supertype DAG in
left-to-right declaration order, keeping the first (most specific)
occurrence. Methods and attribute defaults resolve most-specific-first;
trigger lists concatenate most-specific-first.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .values import Domain, DomainError, decode_value, encode_value


class SchemaError(ValueError):
    """Schema definition or resolution error."""


@dataclass(frozen=True)
class AttributeDef:
    name: str
    domain: Domain
    default: object = None
    initial: object = None
    multiplicity: str = "single"  # single | set
    computed: str | None = None

    def __post_init__(self):
        if self.domain.kind == "set_of" and self.multiplicity != "set":
            object.__setattr__(self, "multiplicity", "set")
        for label, value in (("default", self.default), ("initial", self.initial)):
            if value is None:
                continue
            if not self._accepts(value):
                raise DomainError(
                    f"{label} {value!r} of attribute {self.name!r} is outside its domain"
                )

    def _accepts(self, value) -> bool:
        if self.multiplicity == "set":
            if not isinstance(value, frozenset):
                return False
            element = self.domain if self.domain.kind != "set_of" else Domain("enum", self.domain.values)
            return all(element.contains(v) for v in value)
        return self.domain.contains(value)

    def accepts(self, value) -> bool:
        return self._accepts(value)


@dataclass(frozen=True)
class MethodDef:
    name: str
    params: tuple[str, ...] = ()
    flags: tuple[tuple[str, str], ...] = ()  # (flag, parameter) pairs
    body: str = ""


@dataclass(frozen=True)
class TriggerBlock:
    coupling: str  # PRE | POST | AFTER | ERROR (also METHOD and RULE markers)
    event: str  # event rule name, or a method/command name (implicit event)
    action: str
    scope: str = "ENTITY"  # ENTITY | ORIGIN | DEST
    visibility: str = "LOCAL"  # LOCAL | GLOBAL
    owner: str = ""  # defining type, filled at registration
    mflags: tuple = ()  # METHOD coupling only: (flag, parameter) pairs

    def __post_init__(self):
        if self.visibility == "GLOBAL" and self.scope == "ENTITY":
            raise SchemaError("GLOBAL is only meaningful on relation-scoped triggers")


@dataclass(frozen=True)
class EventRule:
    name: str
    source: str
    priority: int = 0


@dataclass(frozen=True)
class RoleDef:
    name: str
    base: str
    filter: str = ""  # constraint/event text, empty = unfiltered
    attributes: tuple[AttributeDef, ...] = ()
    methods: tuple[MethodDef, ...] = ()
    triggers: tuple[TriggerBlock, ...] = ()


@dataclass(frozen=True)
class ConnectionDef:
    name: str
    kinds: tuple[str, ...]  # notify | resynch | merge | ... (library members)
    role_a: str = ""
    role_b: str = ""
    when_a: tuple[str, ...] = ()  # role path on the first endpoint
    when_b: tuple[str, ...] = ()  # role path on the second endpoint
    events: tuple[tuple[str, str], ...] = ()  # (notify_when, event-name), ...


@dataclass(frozen=True)
class TypeDef:
    name: str
    kind: str  # object | relation
    supertypes: tuple[str, ...] = ()
    attributes: tuple[AttributeDef, ...] = ()
    methods: tuple[MethodDef, ...] = ()
    triggers: tuple[TriggerBlock, ...] = ()
    events: tuple[EventRule, ...] = ()
    domain_pairs: tuple[tuple[str, str], ...] = ()  # relation: (origin pred, dest pred)
    cardinality: str = ""  # relation: 1:1 | 1:N | N:1 | N:N
    structure: str = ""  # relation: DAG | TREE
    composition: bool = False
    is_process: bool = False
    roles: tuple[RoleDef, ...] = ()
    connections: tuple[ConnectionDef, ...] = ()
    user_role: str = ""  # ROLE USER = <name>
    role_of: str = ""  # set on relation types that implement a process role

    def __post_init__(self):
        if self.kind not in ("object", "relation"):
            raise SchemaError(f"type kind must be object or relation, not {self.kind!r}")
        dedup = tuple(dict.fromkeys(self.supertypes))
        object.__setattr__(self, "supertypes", dedup)
        if self.kind == "object" and (self.domain_pairs or self.cardinality or self.structure):
            raise SchemaError(f"object type {self.name!r} carries relation-only fields")
        seen = set()
        for attr in self.attributes:
            if attr.name in seen:
                raise SchemaError(f"duplicate attribute {attr.name!r} in type {self.name!r}")
            seen.add(attr.name)


@dataclass
class Partition:
    name: str
    parent: str | None = None
    subproject: bool = False
    types: dict[str, TypeDef] = field(default_factory=dict)


@dataclass(frozen=True)
class ResolvedType:
    name: str
    kind: str
    linearization: tuple[str, ...]
    attributes: dict[str, AttributeDef]
    methods: dict[str, tuple[MethodDef, str]]  # name -> (def, owner type)
    triggers: tuple[TriggerBlock, ...]  # most-specific-first
    domain_pairs: tuple[tuple[str, str], ...] = ()
    cardinality: str = "N:N"
    structure: str = ""
    composition: bool = False
    is_process: bool = False
    roles: dict[str, RoleDef] = field(default_factory=dict)
    connections: dict[str, ConnectionDef] = field(default_factory=dict)
    user_role: str = ""
    role_of: str = ""
    owner_index: dict[str, int] = field(default_factory=dict)  # linearization positions

    def attr_def(self, name: str) -> AttributeDef | None:
        return self.attributes.get(name)

    def spec_index(self, owner: str) -> int:
        return self.owner_index.get(owner, 0)


TYPE_NAME_ALIASES = {"comp": "composed_of"}


class SchemaRegistry:
    """Partition tree plus per-partition type overlays."""

    ROOT = "project"

    def __init__(self):
        self.partitions: dict[str, Partition] = {
            self.ROOT: Partition(self.ROOT, None, subproject=True)
        }
        self.version = 0
        self._cache: dict[tuple, ResolvedType] = {}

    # -- partitions

    def define_partition(self, name: str, parent: str | None = None, subproject=False):
        parent = parent or self.ROOT
        if name in self.partitions:
            raise SchemaError(f"partition {name!r} already exists")
        if parent not in self.partitions:
            raise SchemaError(f"unknown parent partition {parent!r}")
        self.partitions[name] = Partition(name, parent, subproject)
        self.version += 1

    def chain(self, partition: str) -> list[str]:
        """Partition names root-first down to the given partition."""
        if partition not in self.partitions:
            raise SchemaError(f"unknown partition {partition!r}")
        names = []
        cursor: str | None = partition
        while cursor is not None:
            names.append(cursor)
            cursor = self.partitions[cursor].parent
        names.reverse()
        return names

    def namespace(self, partition: str) -> str:
        """Nearest enclosing sub-project partition (object name scope)."""
        for name in reversed(self.chain(partition)):
            if self.partitions[name].subproject:
                return name
        return self.ROOT

    # -- type definition

    def resolve_name(self, name: str) -> str:
        return TYPE_NAME_ALIASES.get(name, name)

    def defining_partitions(self, name: str) -> list[str]:
        name = self.resolve_name(name)
        return [p.name for p in self.partitions.values() if name in p.types]

    def visible(self, name: str, partition: str) -> bool:
        name = self.resolve_name(name)
        return any(name in self.partitions[p].types for p in self.chain(partition))

    def merged_def(self, name: str, partition: str) -> TypeDef:
        """Overlay merge of a type along the partition chain, leaf wins."""
        name = self.resolve_name(name)
        layers = [
            self.partitions[p].types[name]
            for p in self.chain(partition)
            if name in self.partitions[p].types
        ]
        if not layers:
            raise SchemaError(f"type {name!r} is not visible from partition {partition!r}")
        merged = layers[0]
        for layer in layers[1:]:
            merged = _merge_layer(merged, layer)
        return merged

    def define_type(self, tdef: TypeDef, partition: str = ROOT) -> str:
        if partition not in self.partitions:
            raise SchemaError(f"unknown partition {partition!r}")
        name = tdef.name
        for sup in tdef.supertypes:
            if not self.visible(sup, partition):
                raise SchemaError(f"unknown supertype {sup!r} for type {name!r}")
            sup_def = self.merged_def(sup, partition)
            if sup_def.kind != tdef.kind:
                raise SchemaError(
                    f"kind mismatch: supertype {sup!r} is a {sup_def.kind} type"
                    f" but {name!r} is a {tdef.kind} type"
                )
        if self.visible(name, partition):
            base = self.merged_def(name, partition)
            _check_refinement(base, tdef)
        elif self.defining_partitions(name):
            raise SchemaError(f"type {name!r} already defined in an unrelated partition")
        self._check_supertype_cycle(tdef, partition)
        local = self.partitions[partition].types.get(name)
        if local is not None:
            tdef = _merge_layer(local, tdef)  # same-partition redefinition refines in place
        self.partitions[partition].types[name] = tdef
        self.version += 1
        return name

    def _check_supertype_cycle(self, tdef: TypeDef, partition: str):
        seen = {tdef.name}
        stack = list(tdef.supertypes)
        while stack:
            cursor = stack.pop()
            if cursor == tdef.name:
                raise SchemaError(f"cycle in supertypes of {tdef.name!r}")
            if cursor in seen:
                continue
            seen.add(cursor)
            if self.visible(cursor, partition):
                stack.extend(self.merged_def(cursor, partition).supertypes)

    # -- resolution

    def linearize(self, name: str, partition: str = ROOT) -> tuple[str, ...]:
        """Most-specific-first type order: self, then supertypes left-to-right."""
        name = self.resolve_name(name)
        order: list[str] = []

        def visit(tname: str):
            if tname in order:
                return
            order.append(tname)
            for sup in self.merged_def(tname, partition).supertypes:
                visit(sup)

        visit(name)
        return tuple(order)

    def effective(self, name: str, partition: str = ROOT) -> ResolvedType:
        """Resolved schema: inheritance union with leaf/most-specific overrides."""
        name = self.resolve_name(name)
        key = (name, partition, self.version)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        order = self.linearize(name, partition)
        merged = {tname: self.merged_def(tname, partition) for tname in order}
        attributes: dict[str, AttributeDef] = {}
        methods: dict[str, tuple[MethodDef, str]] = {}
        roles: dict[str, RoleDef] = {}
        connections: dict[str, ConnectionDef] = {}
        for tname in reversed(order):  # general -> specific, specific wins
            tdef = merged[tname]
            for attr in tdef.attributes:
                attributes[attr.name] = attr
            for meth in tdef.methods:
                methods[meth.name] = (meth, tname)
            for role in tdef.roles:
                roles[role.name] = role
            for conn in tdef.connections:
                connections[conn.name] = conn
        triggers = []
        for tname in order:  # most-specific-first, accumulated
            tdef = merged[tname]
            for trig in tdef.triggers:
                triggers.append(replace(trig, owner=trig.owner or tname))
        own = merged[name]
        domain_pairs = own.domain_pairs
        cardinality = own.cardinality
        structure = own.structure
        composition = own.composition
        user_role = own.user_role
        for tname in order[1:]:
            sup = merged[tname]
            domain_pairs = domain_pairs or sup.domain_pairs
            cardinality = cardinality or sup.cardinality
            structure = structure or sup.structure
            composition = composition or sup.composition
            user_role = user_role or sup.user_role
        resolved = ResolvedType(
            name=name,
            kind=own.kind,
            linearization=order,
            attributes=attributes,
            methods=methods,
            triggers=tuple(triggers),
            domain_pairs=domain_pairs,
            cardinality=cardinality or "N:N",
            structure=structure,
            composition=composition,
            is_process=any(merged[t].is_process for t in order),
            roles=roles,
            connections=connections,
            user_role=user_role,
            role_of=own.role_of or next((merged[t].role_of for t in order if merged[t].role_of), ""),
            owner_index={tname: i for i, tname in enumerate(order)},
        )
        self._cache[key] = resolved
        return resolved

    def is_subtype(self, a: str, b: str, partition: str = ROOT) -> bool:
        a, b = self.resolve_name(a), self.resolve_name(b)
        if a == b:
            return True
        if not self.defining_partitions(a) or not self.defining_partitions(b):
            raise SchemaError(f"is_subtype over undefined type: {a!r} / {b!r}")
        home = self.defining_partitions(a)[0]
        seen = set()
        stack = [a]
        while stack:
            cursor = stack.pop()
            if cursor == b:
                return True
            if cursor in seen:
                continue
            seen.add(cursor)
            if self.visible(cursor, home) or self.defining_partitions(cursor):
                where = home if self.visible(cursor, home) else self.defining_partitions(cursor)[0]
                stack.extend(self.merged_def(cursor, where).supertypes)
        return False

    def event_rules(self, partition: str = ROOT) -> dict[str, EventRule]:
        rules: dict[str, EventRule] = {}
        for pname in self.chain(partition):
            for tdef in self.partitions[pname].types.values():
                for rule in tdef.events:
                    rules[rule.name] = rule
        return rules


def _merge_layer(base: TypeDef, overlay: TypeDef) -> TypeDef:
    attrs = {a.name: a for a in base.attributes}
    for attr in overlay.attributes:
        attrs[attr.name] = attr
    methods = {m.name: m for m in base.methods}
    for meth in overlay.methods:
        methods[meth.name] = meth
    roles = {r.name: r for r in base.roles}
    for role in overlay.roles:
        roles[role.name] = role
    conns = {c.name: c for c in base.connections}
    for conn in overlay.connections:
        conns[conn.name] = conn
    return replace(
        base,
        supertypes=tuple(dict.fromkeys(base.supertypes + overlay.supertypes)),
        attributes=tuple(attrs.values()),
        methods=tuple(methods.values()),
        triggers=base.triggers + overlay.triggers,
        events=base.events + overlay.events,
        domain_pairs=overlay.domain_pairs or base.domain_pairs,
        cardinality=overlay.cardinality or base.cardinality,
        structure=overlay.structure or base.structure,
        composition=base.composition or overlay.composition,
        is_process=base.is_process or overlay.is_process,
        roles=tuple(roles.values()),
        connections=tuple(conns.values()),
        user_role=overlay.user_role or base.user_role,
        role_of=overlay.role_of or base.role_of,
    )


def _check_refinement(base: TypeDef, overlay: TypeDef):
    if overlay.kind != base.kind:
        raise SchemaError(f"refinement of {base.name!r} changes its kind")
    inherited = {a.name: a for a in base.attributes}
    for attr in overlay.attributes:
        old = inherited.get(attr.name)
        if old is None:
            continue
        if attr.multiplicity != old.multiplicity:
            raise SchemaError(f"refinement changes multiplicity of {attr.name!r}")
        if not attr.domain.widens(old.domain):
            raise SchemaError(
                f"refinement narrows the domain of attribute {attr.name!r} on {base.name!r}"
            )


# ---------------------------------------------------------------------------
# Serialization (journal payloads)


def _domain_to_dict(domain: Domain) -> dict:
    return {"kind": domain.kind, "values": list(domain.values)}


def _domain_from_dict(data: dict) -> Domain:
    return Domain(data["kind"], tuple(data["values"]))


def attr_to_dict(attr: AttributeDef) -> dict:
    return {
        "name": attr.name,
        "domain": _domain_to_dict(attr.domain),
        "default": None if attr.default is None else encode_value(attr.default),
        "initial": None if attr.initial is None else encode_value(attr.initial),
        "multiplicity": attr.multiplicity,
        "computed": attr.computed,
    }


def attr_from_dict(data: dict) -> AttributeDef:
    return AttributeDef(
        name=data["name"],
        domain=_domain_from_dict(data["domain"]),
        default=None if data["default"] is None else decode_value(data["default"]),
        initial=None if data["initial"] is None else decode_value(data["initial"]),
        multiplicity=data["multiplicity"],
        computed=data["computed"],
    )


def typedef_to_dict(tdef: TypeDef) -> dict:
    return {
        "name": tdef.name,
        "kind": tdef.kind,
        "supertypes": list(tdef.supertypes),
        "attributes": [attr_to_dict(a) for a in tdef.attributes],
        "methods": [
            {"name": m.name, "params": list(m.params), "flags": [list(f) for f in m.flags], "body": m.body}
            for m in tdef.methods
        ],
        "triggers": [
            {
                "coupling": t.coupling,
                "event": t.event,
                "action": t.action,
                "scope": t.scope,
                "visibility": t.visibility,
                "owner": t.owner,
                "mflags": [list(f) for f in t.mflags],
            }
            for t in tdef.triggers
        ],
        "events": [{"name": e.name, "source": e.source, "priority": e.priority} for e in tdef.events],
        "domain_pairs": [list(p) for p in tdef.domain_pairs],
        "cardinality": tdef.cardinality,
        "structure": tdef.structure,
        "composition": tdef.composition,
        "is_process": tdef.is_process,
        "roles": [
            {
                "name": r.name,
                "base": r.base,
                "filter": r.filter,
                "attributes": [attr_to_dict(a) for a in r.attributes],
                "methods": [
                    {"name": m.name, "params": list(m.params), "flags": [list(f) for f in m.flags], "body": m.body}
                    for m in r.methods
                ],
                "triggers": [
                    {
                        "coupling": t.coupling,
                        "event": t.event,
                        "action": t.action,
                        "scope": t.scope,
                        "visibility": t.visibility,
                        "owner": t.owner,
                        "mflags": [list(f) for f in t.mflags],
                    }
                    for t in r.triggers
                ],
            }
            for r in tdef.roles
        ],
        "connections": [
            {
                "name": c.name,
                "kinds": list(c.kinds),
                "role_a": c.role_a,
                "role_b": c.role_b,
                "when_a": list(c.when_a),
                "when_b": list(c.when_b),
                "events": [list(e) for e in c.events],
            }
            for c in tdef.connections
        ],
        "user_role": tdef.user_role,
        "role_of": tdef.role_of,
    }


def typedef_from_dict(data: dict) -> TypeDef:
    def meth(m):
        return MethodDef(m["name"], tuple(m["params"]), tuple(tuple(f) for f in m["flags"]), m["body"])

    def trig(t):
        return TriggerBlock(
            coupling=t["coupling"],
            event=t["event"],
            action=t["action"],
            scope=t["scope"],
            visibility=t["visibility"],
            owner=t["owner"],
            mflags=tuple(tuple(f) for f in t.get("mflags", [])),
        )

    return TypeDef(
        name=data["name"],
        kind=data["kind"],
        supertypes=tuple(data["supertypes"]),
        attributes=tuple(attr_from_dict(a) for a in data["attributes"]),
        methods=tuple(meth(m) for m in data["methods"]),
        triggers=tuple(trig(t) for t in data["triggers"]),
        events=tuple(EventRule(e["name"], e["source"], e["priority"]) for e in data["events"]),
        domain_pairs=tuple(tuple(p) for p in data["domain_pairs"]),
        cardinality=data["cardinality"],
        structure=data["structure"],
        composition=data["composition"],
        is_process=data["is_process"],
        roles=tuple(
            RoleDef(
                name=r["name"],
                base=r["base"],
                filter=r["filter"],
                attributes=tuple(attr_from_dict(a) for a in r["attributes"]),
                methods=tuple(meth(m) for m in r["methods"]),
                triggers=tuple(trig(t) for t in r["triggers"]),
            )
            for r in data["roles"]
        ),
        connections=tuple(
            ConnectionDef(
                name=c["name"],
                kinds=tuple(c["kinds"]),
                role_a=c["role_a"],
                role_b=c["role_b"],
                when_a=tuple(c["when_a"]),
                when_b=tuple(c["when_b"]),
                events=tuple(tuple(e) for e in c["events"]),
            )
            for c in data["connections"]
        ),
        user_role=data["user_role"],
        role_of=data.get("role_of", ""),
    )
