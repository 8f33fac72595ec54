"""Configuration builder: System Models and bound configurations.

The product model lives in the store as ordinary objects and relations:
family objects group interfaces (``has_interface``), an interface owns its
realizations (``is_realized``), and ``depends_on`` edges run between
variants. A node's own requirements on its graph descendants sit in its
``constraints`` attribute as constraint text.

Building a System Model selects one realization per reached interface such
that (1) at most one interface per family is selected, (2) every selected
node satisfies the global constraint, and (3) every selected node satisfies
the conjunction of the constraints of all its ancestors along the selected
closure. depends_on closes conjunctively (all destinations selected),
is_realized disjunctively (exactly one realization). The search is
depth-first backtracking over realization choices in lexicographic name
order; the first solution in that order is returned, which makes the result
deterministic.

A bound configuration picks, per variant, the highest-numbered revision
whose view (snapshot plus date/author/number) satisfies a selection
predicate (filter-then-max).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import lang
from .store import StoreError, obj_ref
from .values import UNSET


class ConfigError(StoreError):
    pass


def node_satisfies(ast, get) -> bool:
    """Node check for rules 2 and 3: three-valued, pass-unless-false.

    Selection runs over heterogeneous nodes (interfaces next to
    realizations); an atom over an attribute the node does not carry is
    unknown, not failing, so "[system=unix]" still lets an interface with no
    system property through while rejecting a VMS realization.
    """
    return _eval3(ast, get) is not False


def _eval3(ast, get):
    if isinstance(ast, lang.CTrue):
        return True
    if isinstance(ast, lang.CAtom):
        value = get(ast.attr)
        if value is UNSET or value is None:
            return None
        if isinstance(value, frozenset):
            if ast.op in ("=", "=="):
                return ast.value in value if ast.op == "=" else value == {ast.value}
            if ast.op == "!=":
                return ast.value not in value
            return False
        return lang.compare_values(value, ast.op, ast.value)
    if isinstance(ast, lang.CNot):
        inner = _eval3(ast.item, get)
        return None if inner is None else not inner
    if isinstance(ast, lang.CAnd):
        results = [_eval3(i, get) for i in ast.items]
        if False in results:
            return False
        return None if None in results else True
    if isinstance(ast, lang.COr):
        results = [_eval3(i, get) for i in ast.items]
        if True in results:
            return True
        return None if None in results else False
    if isinstance(ast, lang.CIf):
        return _eval3(lang.COr((lang.CNot(ast.cond), ast.then)), get)
    raise TypeError(f"not a constraint node: {ast!r}")


@dataclass
class SystemModel:
    name: str
    root: str
    constraint_text: str
    interfaces: dict[str, str] = field(default_factory=dict)  # family -> interface
    realizations: dict[str, str] = field(default_factory=dict)  # interface -> realization
    closure: list[tuple[str, str, str]] = field(default_factory=list)  # selected edges

    def selected_nodes(self) -> list[str]:
        nodes = set(self.interfaces.values()) | set(self.realizations.values())
        return sorted(nodes)

    def variants(self) -> list[str]:
        return sorted(self.realizations.values())

    def listing(self, store) -> list[str]:
        """Deterministic component listing family/interface/realization."""
        out = []
        for family in sorted(self.interfaces):
            iface = self.interfaces[family]
            real = self.realizations.get(iface, "")
            out.append(f"{family}/{iface}/{real}" if real else f"{family}/{iface}")
        return out


@dataclass
class BoundConfiguration:
    model: SystemModel
    predicate_text: str
    revisions: dict[str, int] = field(default_factory=dict)  # variant -> revision number

    def listing(self) -> list[str]:
        sm = self.model
        out = []
        for family in sorted(sm.interfaces):
            iface = sm.interfaces[family]
            real = sm.realizations.get(iface)
            if real is None:
                out.append(f"{family}/{iface}")
            else:
                out.append(f"{family}/{iface}/{real}@{self.revisions[real]}")
        return out


class ProductView:
    """Read snapshot of the store's product model."""

    def __init__(self, store):
        self.store = store
        self.family_of: dict[str, str] = {}
        self.interfaces_of: dict[str, list[str]] = {}
        self.realizations_of: dict[str, list[str]] = {}
        self.interface_of: dict[str, str] = {}
        self.depends: dict[str, list[str]] = {}
        for key in store.live_rels(None, "has_interface", None):
            family, _, iface = key
            self.interfaces_of.setdefault(family, []).append(iface)
            self.family_of[iface] = family
        for key in store.live_rels(None, "is_realized", None):
            iface, _, real = key
            self.realizations_of.setdefault(iface, []).append(real)
            self.interface_of[real] = iface
        for key in store.live_rels(None, "depends_on", None):
            self.depends.setdefault(key[0], []).append(key[2])
        for seq in (*self.interfaces_of.values(), *self.realizations_of.values(),
                    *self.depends.values()):
            seq.sort()
        self.check_invariants()

    def check_invariants(self):
        for iface, family in self.family_of.items():
            owners = [f for f, members in self.interfaces_of.items() if iface in members]
            if len(owners) != 1:
                raise ConfigError(f"interface {iface!r} belongs to {len(owners)} families")
        for real, iface in self.interface_of.items():
            owners = [i for i, members in self.realizations_of.items() if real in members]
            if len(owners) != 1:
                raise ConfigError(f"realization {real!r} belongs to {len(owners)} interfaces")

    def attrs(self, name: str):
        def get(attr):
            try:
                return self.store.read_attr(obj_ref(name), attr)
            except StoreError:
                return UNSET

        return get

    def constraint_of(self, name: str):
        try:
            text = self.store.read_attr(obj_ref(name), "constraints")
        except StoreError:
            return None
        if text is UNSET or not str(text).strip():
            return None
        return str(text)


def build_system_model(store, root: str, constraint_text: str = "", name: str = "") -> SystemModel:
    """Backtracking selection; ConfigError when no consistent selection exists.

    Candidates are generated by resolving the lexicographically smallest
    pending interface first and trying its realizations in name order;
    rule 1 (one interface per family) and closure conflicts prune during
    descent, rules 2 and 3 validate each complete candidate. The first
    candidate passing all rules wins.
    """
    view = ProductView(store)
    if root not in view.family_of:
        raise ConfigError(f"{root!r} is not an interface in the product model")
    failure: list[str] = ["unsatisfiable"]

    def add_node(node, interfaces, realizations, pending) -> bool:
        """Force one node (and its closure) into the partial selection."""
        if node in view.family_of:  # an interface
            family = view.family_of[node]
            current = interfaces.get(family)
            if current is None:
                interfaces[family] = node
                if node not in realizations:
                    pending.add(node)
                for dep in view.depends.get(node, []):
                    if not add_node(dep, interfaces, realizations, pending):
                        return False
                return True
            if current != node:
                failure[0] = f"family {family} would provide both {current} and {node}"
                return False
            return True
        if node in view.interface_of:  # a realization
            iface = view.interface_of[node]
            family = view.family_of.get(iface)
            if family is None:
                raise ConfigError(f"realization {node!r} has no family")
            current_iface = interfaces.get(family)
            if current_iface is not None and current_iface != iface:
                failure[0] = f"family {family} would provide both {current_iface} and {iface}"
                return False
            current_real = realizations.get(iface)
            if current_real is not None and current_real != node:
                failure[0] = f"interface {iface} needs both {current_real} and {node}"
                return False
            if current_iface is None:
                interfaces[family] = iface
                for dep in view.depends.get(iface, []):
                    if not add_node(dep, interfaces, realizations, pending):
                        return False
            if current_real is None:
                realizations[iface] = node
                pending.discard(iface)
                for dep in view.depends.get(node, []):
                    if not add_node(dep, interfaces, realizations, pending):
                        return False
            return True
        failure[0] = f"{node!r} is not part of the product model"
        return False

    def finish(interfaces, realizations) -> SystemModel | None:
        closure = sorted(
            [(i, "is_realized", r) for i, r in realizations.items()]
            + [
                (node, "depends_on", dep)
                for node in set(interfaces.values()) | set(realizations.values())
                for dep in view.depends.get(node, [])
            ]
        )
        model = SystemModel(
            name=name or f"sm_{root}",
            root=root,
            constraint_text=constraint_text or "",
            interfaces=dict(sorted(interfaces.items())),
            realizations=dict(sorted(realizations.items())),
            closure=closure,
        )
        violations = check_model_consistency(store, model, view)
        if violations:
            failure[0] = violations[0]
            return None
        return model

    def attempt(interfaces, realizations, pending) -> SystemModel | None:
        if not pending:
            return finish(interfaces, realizations)
        iface = min(pending)
        rest = pending - {iface}
        candidates = view.realizations_of.get(iface, [])
        if not candidates:
            failure[0] = f"interface {iface} has no realization"
            return None
        for real in candidates:
            new_i = dict(interfaces)
            new_r = dict(realizations)
            new_p = set(rest)
            if not add_node(real, new_i, new_r, new_p):
                continue
            found = attempt(new_i, new_r, new_p)
            if found is not None:
                return found
        return None

    interfaces: dict[str, str] = {}
    realizations: dict[str, str] = {}
    pending: set[str] = set()
    if not add_node(root, interfaces, realizations, pending):
        raise ConfigError(f"no consistent selection: {failure[0]}")
    model = attempt(interfaces, realizations, pending)
    if model is None:
        raise ConfigError(f"no consistent selection: {failure[0]}")
    return model


def check_model_consistency(store, model: SystemModel, view: ProductView | None = None) -> list[str]:
    """Empty list iff the three selection rules hold; each violation names
    the rule, the node, and the failing constraint."""
    view = view or ProductView(store)
    violations: list[str] = []
    by_family: dict[str, set] = {}
    for iface in model.interfaces.values():
        by_family.setdefault(view.family_of.get(iface, "?"), set()).add(iface)
    for family, members in sorted(by_family.items()):
        if len(members) > 1:
            violations.append(
                f"rule 1: family {family} provides {len(members)} interfaces ({', '.join(sorted(members))})"
            )
    global_ast = _cached_constraint(model.constraint_text or "")
    nodes = model.selected_nodes()
    selected = set(nodes)
    edges: list[tuple[str, str]] = []
    for iface, real in model.realizations.items():
        edges.append((iface, real))
    for node in nodes:
        for dep in view.depends.get(node, []):
            if dep in selected:
                edges.append((node, dep))
            else:
                violations.append(f"closure: {node} depends on unselected {dep}")
    for node in nodes:
        if not node_satisfies(global_ast, view.attrs(node)):
            violations.append(f"rule 2: {node} fails the model constraint")
    ancestors: dict[str, set] = {n: set() for n in nodes}
    changed = True
    while changed:
        changed = False
        for src, dst in edges:
            if dst not in ancestors or src not in ancestors:
                continue
            want = ancestors[src] | {src}
            if not want <= ancestors[dst]:
                ancestors[dst] |= want
                changed = True
    for node in nodes:
        for anc_node in sorted(ancestors.get(node, ())):
            text = view.constraint_of(anc_node)
            if text is None:
                continue
            if not node_satisfies(_cached_constraint(text), view.attrs(node)):
                violations.append(f"rule 3: {node} fails the constraint of ancestor {anc_node}: {text}")
    return violations


def instantiate_configuration(store, model: SystemModel, predicate_text: str = "") -> BoundConfiguration:
    """Filter-then-max revision selection per variant."""
    predicate = lang.parse_constraint(predicate_text or "")
    revisions: dict[str, int] = {}
    for variant in model.variants():
        obj = store.live_object(variant)
        best = None
        for branch in sorted(obj.branches):
            for rev in obj.branches[branch].revisions:
                if lang.eval_constraint(predicate, rev.view()):
                    if best is None or rev.number > best:
                        best = rev.number
        if best is None:
            raise ConfigError(
                f"variant {variant!r} has no revision satisfying: {predicate_text or '<none>'}"
            )
        revisions[variant] = best
    return BoundConfiguration(model=model, predicate_text=predicate_text or "",
                              revisions=revisions)


def materialize_configuration(engine, bound: BoundConfiguration, name: str, user=""):
    """Record the bound configuration as an ordinary object with composed_of
    edges to its components, so it versions like any realization."""
    store = engine.store

    def run():
        if name not in store.objects:
            engine.create_object_in_tx(name, "configuration", "project", user=user)
        ctx = engine._base_ctx(obj_ref(name), "bind", user)
        engine.write_attr(ctx, obj_ref(name), "constraints", bound.predicate_text, command="bind")
        for variant in bound.model.variants():
            key = (name, "composed_of", variant)
            if key not in store.relations or store.relations[key].deleted:
                engine.create_relation_in_tx(ctx, name, "composed_of", variant)
        engine.new_revision_in_tx(name, user=user)

    result = engine.run_in_tx("bind", name, user, run)
    if not result.ok:
        raise ConfigError(result.message)
    return name


def build_object_closure(store, root: str, relation_names, predicate_text: str = "") -> list[str]:
    """Generalized built-object closure: BFS over the named relations with a
    candidate filter; {depends_on, is_realized} reduces to the System Model."""
    names = [store.schema.resolve_name(r) for r in relation_names]
    for rel in names:
        if not store.schema.defining_partitions(rel):
            raise ConfigError(f"unknown relation type {rel!r}")
    if sorted(names) == ["depends_on", "is_realized"]:
        model = build_system_model(store, root, predicate_text)
        return sorted(set(model.selected_nodes()))
    predicate = lang.parse_constraint(predicate_text or "")
    store.live_object(root)

    def get(node):
        def read(attr):
            try:
                return store.read_attr(obj_ref(node), attr)
            except StoreError:
                return UNSET

        return read

    seen = [root]
    queue = [root]
    while queue:
        cursor = queue.pop(0)
        for rel in names:
            for key in store.live_rels(cursor, rel, None):
                dest = key[2]
                if dest in seen:
                    continue
                if not lang.eval_constraint(predicate, get(dest)):
                    continue
                seen.append(dest)
                queue.append(dest)
    return sorted(seen)


def _cached_constraint(text: str):
    ast = _CONSTRAINT_CACHE.get(text)
    if ast is None:
        ast = lang.parse_constraint(text)
        _CONSTRAINT_CACHE[text] = ast
    return ast


_CONSTRAINT_CACHE: dict[str, object] = {}
