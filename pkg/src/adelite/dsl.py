"""The .adl declaration language.

Declarations (keywords are case-insensitive; END names optional):

    OBJECT name [IS super, ...] ;  members...  [END name ;]
    RELTYPE name [IS ...] ;        members...  [END name ;]
    PROCESS name [IS ...] ;        members...  END name ;
    METHOD name [(params)|-f %p]  (DO stmt | ; stmts END name ; | ... ;)
    DEFEVENT  name = expr [PRIORITY n] ; ...
    EVENT name = expr ; [PRIORITY n ;]
    DEFATTRIBUTE  attr-entries        (top level: extends the root object type)
    PARTITION name [UNDER parent] [SUBPROJECT] ;

Type members: DEFATTRIBUTE/ATTRIBUTE sections (``name : (a, b) := dflt ;``,
``name = a, b ;``, ``name COMP := "cmd" ;``, DEFAULT/INIT/SET clauses),
METHOD declarations, DOMAIN pred -> pred [OR ...] ;, CARD 1:N ;, DAG/TREE ;,
COMPOSITION ;, EVENT entries, and triggers:

    [PRE|POST|AFTER|ERROR] [GLOBAL] [ORIGIN|DEST] [ON] event DO stmt

A coupling keyword is sticky: it applies to following ON-entries until the
next one (POST ... several ON lines ... AFTER ...). Unmarked triggers default
to POST; unmarked scope on a relation is DEST; an unmarked ON-rule in a
PROCESS is a process rule evaluated after commit. Accepted alias spellings:
TYPEOBJET/TYPEOBJECT for OBJECT, TYPERELATION/RELATION for RELTYPE,
TYPEPROCESS for PROCESS, TYPECONNECTION/CONNECTION inside processes.

PROCESS members add ROLE name = base[/(filter)] [{ members }] ; and
TYPECONNECTION name IS kinds ; CONNECT a WITH b WHEN r.attr = r.attr ;
EVENT kind_when = event ; END ;.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import actions, lang
from .schema import (
    AttributeDef,
    ConnectionDef,
    EventRule,
    MethodDef,
    RoleDef,
    TriggerBlock,
    TypeDef,
)
from .values import Domain


class DslError(ValueError):
    pass


OBJ_KWS = {"object", "typeobjet", "typeobject", "objtype"}
REL_KWS = {"reltype", "typerelation", "relation"}
PROC_KWS = {"process", "typeprocess"}
CONN_KWS = {"typeconnection", "connection"}
TOP_KWS = OBJ_KWS | REL_KWS | PROC_KWS | {"method", "defevent", "event", "defattribute", "partition"}
MEMBER_KWS = {
    "defattribute", "attribute", "method", "domain", "card", "dag", "tree", "composition",
    "event", "pre", "post", "after", "error", "global", "on", "origin", "dest", "role",
    "connect", "priority", "end",
} | CONN_KWS
COUPLINGS = {"pre": "PRE", "post": "POST", "after": "AFTER", "error": "ERROR"}
SCOPES = {"origin": "ORIGIN", "dest": "DEST", "destination": "DEST"}


@dataclass
class LoadReport:
    object_types: list = field(default_factory=list)
    relation_types: list = field(default_factory=list)
    process_types: list = field(default_factory=list)
    events: list = field(default_factory=list)
    methods: list = field(default_factory=list)
    partitions: list = field(default_factory=list)

    def summary(self) -> str:
        parts = []
        for label, items in (
            ("object types", self.object_types),
            ("relation types", self.relation_types),
            ("process types", self.process_types),
            ("events", self.events),
            ("free methods", self.methods),
            ("partitions", self.partitions),
        ):
            if items:
                parts.append(f"{len(items)} {label}: {', '.join(items)}")
        return "; ".join(parts) if parts else "nothing to define"


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.ts = lang.TokenStream(lang.tokenize(text))
        self.decls: list[tuple] = []
        self._last_event: EventRule | None = None

    # -- helpers

    def _kw(self) -> str:
        tok = self.ts.peek()
        return tok.text.lower() if tok.kind == "ID" else ""

    def _expect_name(self, what="name") -> str:
        tok = self.ts.peek()
        if tok.kind != "ID":
            self.ts.error(f"expected a {what}")
        self.ts.next()
        return tok.text

    def _skip_semis(self):
        while self.ts.at(";"):
            self.ts.next()

    def _slice(self, start_tok: lang.Token, end_pos: int) -> str:
        return self.text[start_tok.pos : end_pos].strip()

    def _statement_text(self) -> str:
        start = self.ts.peek()
        actions.parse_statement(self.ts)
        end = self.ts.toks[self.ts.pos - 1].endpos if self.ts.pos > 0 else start.endpos
        return self._slice(start, end)

    def _event_text(self) -> str:
        start = self.ts.peek()
        lang.parse_event_tokens(self.ts)
        end = self.ts.toks[self.ts.pos - 1].endpos if self.ts.pos > 0 else start.endpos
        return self._slice(start, end)

    def _consume_end(self, name: str):
        if self._kw() == "end":
            self.ts.next()
            tok = self.ts.peek()
            if tok.kind == "ID" and tok.text.lower() not in TOP_KWS:
                self.ts.next()  # trailing name, case-insensitive match tolerated
            self._skip_semis()

    # -- entry

    def parse(self) -> list[tuple]:
        while self.ts.peek().kind != "EOF":
            self._skip_semis()
            if self.ts.peek().kind == "EOF":
                break
            kw = self._kw()
            if kw in OBJ_KWS:
                self._parse_type("object")
            elif kw in REL_KWS:
                self._parse_type("relation")
            elif kw in PROC_KWS:
                self._parse_type("object", is_process=True)
            elif kw == "method":
                name, mdef = self._parse_method()
                self.decls.append(("method", mdef))
            elif kw == "defevent":
                self.ts.next()
                self._parse_defevent_section()
            elif kw == "event":
                self.ts.next()
                self._parse_event_entry()
            elif kw == "priority":
                self._parse_priority()
            elif kw == "defattribute":
                self.ts.next()
                attrs = self._parse_attr_section()
                self.decls.append(("rootattrs", attrs))
            elif kw == "partition":
                self.ts.next()
                name = self._expect_name("partition name")
                parent = None
                subproject = False
                while self._kw() in ("under", "in", "subproject"):
                    word = self._kw()
                    self.ts.next()
                    if word in ("under", "in"):
                        parent = self._expect_name("parent partition")
                    else:
                        subproject = True
                self._skip_semis()
                self.decls.append(("partition", name, parent, subproject))
            else:
                self.ts.error("expected a declaration")
        return self.decls

    # -- events

    def _parse_event_entry(self):
        name = self._expect_name("event name")
        self.ts.expect("=")
        source = self._event_text()
        priority = 0
        if self._kw() == "priority":
            self.ts.next()
            tok = self.ts.peek()
            if tok.kind != "NUM":
                self.ts.error("expected a priority number")
            self.ts.next()
            priority = int(tok.text)
        self._skip_semis()
        rule = EventRule(name, source, priority)
        self._last_event = rule
        self.decls.append(("event", rule))
        return rule

    def _parse_defevent_section(self):
        while True:
            self._skip_semis()
            tok = self.ts.peek()
            if tok.kind != "ID" or tok.text.lower() in TOP_KWS or tok.text.lower() == "end":
                break
            if tok.text.lower() == "priority":
                self._parse_priority()
                continue
            if self.ts.peek(1).kind == "OP" and self.ts.peek(1).text == "=":
                self.ts.next()
                self.ts.expect("=")
                source = self._event_text()
                priority = 0
                if self._kw() == "priority":
                    self.ts.next()
                    num = self.ts.peek()
                    if num.kind != "NUM":
                        self.ts.error("expected a priority number")
                    self.ts.next()
                    priority = int(num.text)
                self._skip_semis()
                rule = EventRule(tok.text, source, priority)
                self._last_event = rule
                self.decls.append(("event", rule))
            else:
                break

    def _parse_priority(self):
        self.ts.next()
        tok = self.ts.peek()
        if tok.kind != "NUM":
            self.ts.error("expected a priority number")
        self.ts.next()
        self._skip_semis()
        if self._last_event is None:
            raise DslError("PRIORITY without a preceding event")
        self._parse_priority_backpatch(int(tok.text))

    # -- methods

    def _parse_method(self) -> tuple[str, MethodDef]:
        self.ts.next()  # METHOD
        name = self._expect_name("method name")
        params: list[str] = []
        flags: list[tuple[str, str]] = []
        if self.ts.at("("):
            self.ts.next()
            while not self.ts.at(")"):
                tok = self.ts.peek()
                if tok.kind == "ID":
                    params.append(tok.text)
                    self.ts.next()
                elif tok.kind == "OP" and tok.text == "%":
                    self.ts.next()
                    params.append(self._expect_name("parameter"))
                elif tok.kind == "OP" and tok.text == ",":
                    self.ts.next()
                else:
                    self.ts.error("expected a parameter name")
            self.ts.expect(")")
        while self.ts.peek().kind == "FLAG":
            flag = self.ts.next().text[1:]
            if self.ts.at("%"):
                self.ts.next()
                flags.append((flag, self._expect_name("parameter")))
            elif self.ts.peek().kind == "ID":
                flags.append((flag, self.ts.next().text))
            else:
                flags.append((flag, flag))
        body = self._parse_method_body(name)
        return name, MethodDef(name, tuple(params), tuple(flags), body)

    def _parse_method_body(self, name: str) -> str:
        if self._kw() == "do":
            self.ts.next()
            text = self._statement_text()
            self._skip_semis()
            return text
        if self.ts.peek().kind == "STUB":
            self.ts.next()
            self._skip_semis()
            return ""
        if self.ts.at(";"):
            self.ts.next()
            start = self.ts.peek()
            end = start.pos
            while True:
                tok = self.ts.peek()
                if tok.kind == "EOF":
                    break
                if tok.kind == "ID" and tok.text.lower() == "end":
                    self.ts.next()
                    trailer = self.ts.peek()
                    if trailer.kind == "ID" and trailer.text.lower() not in TOP_KWS:
                        self.ts.next()
                    self._skip_semis()
                    break
                if tok.kind == "ID" and tok.text.lower() in MEMBER_KWS - {"on"}:
                    break  # stub body, block never opened
                if self.ts.at(";"):
                    self.ts.next()
                    continue
                actions.parse_statement(self.ts)
                end = self.ts.toks[self.ts.pos - 1].endpos
            return self.text[start.pos : end].strip()
        self.ts.error("expected DO, ';' or '...' after method signature")

    # -- attributes

    def _parse_attr_section(self) -> list[AttributeDef]:
        out: list[AttributeDef] = []
        while True:
            self._skip_semis()
            tok = self.ts.peek()
            if tok.kind != "ID" or tok.text.lower() in MEMBER_KWS or tok.text.lower() in TOP_KWS:
                break
            if self.ts.peek(1).kind == "ID" and self.ts.peek(1).text.upper() == "COMP":
                name = self.ts.next().text
                self.ts.next()  # COMP
                self.ts.expect(":=")
                cmd = self.ts.peek()
                if cmd.kind != "STR":
                    self.ts.error("computed attribute needs a quoted command")
                self.ts.next()
                self._skip_semis()
                out.append(AttributeDef(name, Domain("string"), computed=cmd.text))
                continue
            if self.ts.peek(1).kind == "OP" and self.ts.peek(1).text in (":", "="):
                out.append(self._parse_attr_entry())
                continue
            break
        return out

    def _parse_attr_entry(self) -> AttributeDef:
        name = self._expect_name("attribute name")
        multiplicity = "single"
        starred: str | None = None
        if self.ts.at("="):
            self.ts.next()
            values, starred = self._parse_value_list(stop_at_semi=True)
            self._skip_semis()
            default = starred
            return AttributeDef(name, Domain("enum", tuple(values)), default=default,
                                initial=None, multiplicity="single")
        self.ts.expect(":")
        domain, starred = self._parse_domain()
        if domain.kind == "set_of":
            multiplicity = "set"
        default = initial = None
        if starred is not None:
            default = frozenset({starred}) if multiplicity == "set" else starred
        while True:
            if self.ts.at(":="):
                self.ts.next()
                value = self._parse_attr_literal(domain, multiplicity)
                default = value
                initial = value
            elif self._kw() == "default":
                self.ts.next()
                default = self._parse_attr_literal(domain, multiplicity)
            elif self._kw() == "init":
                self.ts.next()
                initial = self._parse_attr_literal(domain, multiplicity)
            elif self._kw() == "set":
                self.ts.next()
                multiplicity = "set"
            else:
                break
        self._skip_semis()
        return AttributeDef(name, domain, default=default, initial=initial,
                            multiplicity=multiplicity)

    def _parse_attr_literal(self, domain: Domain, multiplicity: str):
        tok = self.ts.peek()
        if multiplicity == "set":
            values, _ = self._parse_value_list(stop_at_semi=True)
            return frozenset(values)
        if tok.kind == "STR":
            self.ts.next()
            return tok.text
        if tok.kind == "NUM":
            self.ts.next()
            return int(tok.text)
        if tok.kind == "DATE":
            self.ts.next()
            from .values import parse_date_literal

            return parse_date_literal(tok.text)
        if tok.kind == "ID":
            self.ts.next()
            if domain.kind == "boolean":
                return tok.text == "true"
            return tok.text
        self.ts.error("expected a literal")

    def _parse_value_list(self, stop_at_semi=False) -> tuple[list[str], str | None]:
        values: list[str] = []
        starred = None
        while True:
            tok = self.ts.peek()
            if tok.kind in ("ID", "NUM", "STR"):
                self.ts.next()
                word = tok.text
                if self.ts.at("*"):
                    self.ts.next()
                    starred = word
                values.append(word)
            elif tok.kind == "OP" and tok.text == ",":
                self.ts.next()
                continue
            else:
                break
            if not self.ts.at(","):
                break
        return values, starred

    def _parse_domain(self) -> tuple[Domain, str | None]:
        tok = self.ts.peek()
        if tok.kind == "ID" and tok.text.lower() in ("integer", "int"):
            self.ts.next()
            return Domain("integer"), None
        if tok.kind == "ID" and tok.text.lower() == "date":
            self.ts.next()
            return Domain("date"), None
        if tok.kind == "ID" and tok.text.lower() in ("boolean", "bool"):
            self.ts.next()
            return Domain("boolean"), None
        if tok.kind == "ID" and tok.text.lower() == "string":
            self.ts.next()
            return Domain("string"), None
        if tok.kind == "ID" and tok.text.lower() in ("set_of", "setof"):
            self.ts.next()
            self.ts.expect("(")
            values, starred = self._parse_value_list()
            self.ts.expect(")")
            return Domain("set_of", tuple(values)), starred
        if tok.kind == "OP" and tok.text == "(":
            self.ts.next()
            values, starred = self._parse_value_list()
            self.ts.expect(")")
            return Domain("enum", tuple(values)), starred
        self.ts.error("expected an attribute domain")

    # -- types

    def _parse_type(self, kind: str, is_process=False):
        self.ts.next()  # keyword
        name = self._expect_name("type name")
        supertypes: list[str] = []
        if self._kw() == "is":
            self.ts.next()
            supertypes.append(self._expect_name("supertype"))
            while self.ts.at(","):
                self.ts.next()
                supertypes.append(self._expect_name("supertype"))
        self._skip_semis()
        body = _TypeBody(kind, is_process)
        self._parse_members(body, name)
        tdef = body.build(name, supertypes)
        self.decls.append(("type", tdef))

    def _parse_members(self, body: "_TypeBody", type_name: str):
        sticky = "RULE" if body.is_process else "POST"
        default_scope = "DEST" if body.kind == "relation" else "ENTITY"
        group_depth = 0
        while True:
            self._skip_semis()
            tok = self.ts.peek()
            if tok.kind == "EOF":
                break
            if tok.kind == "OP" and tok.text == "{":
                self.ts.next()
                group_depth += 1
                continue
            if tok.kind == "OP" and tok.text == "}":
                if group_depth > 0:
                    self.ts.next()
                    group_depth -= 1
                    continue
                break
            if tok.kind == "STUB":
                self.ts.next()
                continue
            kw = self._kw()
            if kw == "end":
                self.ts.next()
                trailer = self.ts.peek()
                if trailer.kind == "ID" and (trailer.text.lower() == type_name.lower()
                                             or trailer.text.lower() not in TOP_KWS):
                    self.ts.next()
                self._skip_semis()
                break
            if kw in OBJ_KWS | REL_KWS | PROC_KWS | {"partition"}:
                break  # next top-level declaration closes the block (END omitted)
            if kw in ("defattribute", "attribute"):
                self.ts.next()
                body.attributes.extend(self._parse_attr_section())
                continue
            if kw == "method":
                mname, mdef = self._parse_method()
                body.methods.append(mdef)
                continue
            if kw == "domain":
                self.ts.next()
                body.domain_pairs.extend(self._parse_domain_pairs())
                continue
            if kw == "card":
                self.ts.next()
                body.cardinality = self._parse_card()
                continue
            if kw in ("dag", "tree"):
                self.ts.next()
                body.structure = kw.upper()
                self._skip_semis()
                continue
            if kw == "composition":
                self.ts.next()
                body.composition = True
                self._skip_semis()
                continue
            if kw == "defevent":
                self.ts.next()
                mark = len(self.decls)
                self._parse_defevent_section()
                for decl in self.decls[mark:]:
                    if decl[0] == "event":
                        body.events.append(decl[1])
                del self.decls[mark:]
                continue
            if kw == "event":
                self.ts.next()
                self._parse_type_events(body)
                continue
            if kw == "priority":
                self._parse_priority_for(body)
                continue
            if kw == "role" and body.is_process:
                self.ts.next()
                body.roles.append(self._parse_role())
                continue
            if kw in CONN_KWS and body.is_process:
                self.ts.next()
                body.connections.append(self._parse_connection())
                continue
            if kw in COUPLINGS or kw in ("global", "on") or kw in SCOPES:
                sticky = self._parse_trigger(body, sticky, default_scope)
                continue
            break
        return

    def _parse_type_events(self, body: "_TypeBody"):
        while True:
            name = self._expect_name("event name")
            self.ts.expect("=")
            source = self._event_text()
            priority = 0
            if self._kw() == "priority":
                self.ts.next()
                num = self.ts.peek()
                if num.kind != "NUM":
                    self.ts.error("expected a priority number")
                self.ts.next()
                priority = int(num.text)
            self._skip_semis()
            rule = EventRule(name, source, priority)
            body.events.append(rule)
            self._last_event = rule
            nxt = self.ts.peek()
            if (nxt.kind == "ID" and nxt.text.lower() not in MEMBER_KWS
                    and nxt.text.lower() not in TOP_KWS
                    and self.ts.peek(1).kind == "OP" and self.ts.peek(1).text == "="):
                continue
            break

    def _parse_priority_for(self, body: "_TypeBody"):
        self.ts.next()
        tok = self.ts.peek()
        if tok.kind != "NUM":
            self.ts.error("expected a priority number")
        self.ts.next()
        self._skip_semis()
        if body.events:
            last = body.events[-1]
            body.events[-1] = EventRule(last.name, last.source, int(tok.text))
        elif self._last_event is not None:
            self._parse_priority_backpatch(int(tok.text))

    def _parse_priority_backpatch(self, priority: int):
        updated = EventRule(self._last_event.name, self._last_event.source, priority)
        for i, decl in enumerate(self.decls):
            if decl[0] == "event" and decl[1].name == updated.name:
                self.decls[i] = ("event", updated)
        self._last_event = updated

    def _parse_domain_pairs(self) -> list[tuple[str, str]]:
        # DOMAIN p1 -> p2 OR p3 -> p4 ... ;  (OR separates pairs)
        start = self.ts.pos
        depth = 0
        while True:
            tok = self.ts.peek()
            if tok.kind == "EOF" or (depth == 0 and tok.kind == "OP" and tok.text == ";"):
                break
            if tok.kind == "OP" and tok.text in "([{":
                depth += 1
            if tok.kind == "OP" and tok.text in ")]}":
                depth -= 1
            self.ts.next()
        toks = self.ts.toks[start : self.ts.pos]
        self._skip_semis()
        segments: list[list[lang.Token]] = [[]]
        depth = 0
        for tok in toks:
            if tok.kind == "OP" and tok.text in "([{":
                depth += 1
            if tok.kind == "OP" and tok.text in ")]}":
                depth -= 1
            if depth == 0 and tok.kind == "OP" and tok.text == "->":
                segments.append([])
                continue
            segments[-1].append(tok)
        if len(segments) < 2:
            raise DslError("DOMAIN needs 'origin-pred -> dest-pred'")
        pairs: list[tuple[str, str]] = []
        pending = _tok_text(self.text, segments[0])
        for segment in segments[1:-1]:
            left, right = _rsplit_or(segment)
            pairs.append((pending, _tok_text(self.text, left)))
            pending = _tok_text(self.text, right)
        pairs.append((pending, _tok_text(self.text, segments[-1])))
        return pairs

    def _parse_card(self) -> str:
        left = self.ts.peek()
        if left.kind not in ("ID", "NUM"):
            self.ts.error("expected a cardinality like N:N")
        self.ts.next()
        self.ts.expect(":")
        right = self.ts.peek()
        if right.kind not in ("ID", "NUM"):
            self.ts.error("expected a cardinality like N:N")
        self.ts.next()
        self._skip_semis()
        return f"{left.text.upper()}:{right.text.upper()}"

    def _parse_trigger(self, body: "_TypeBody", sticky: str, default_scope: str) -> str:
        coupling = None
        visibility = "LOCAL"
        scope = None
        saw_on = False
        while True:
            kw = self._kw()
            if kw in COUPLINGS and coupling is None:
                coupling = COUPLINGS[kw]
                self.ts.next()
                continue
            if kw == "global":
                visibility = "GLOBAL"
                self.ts.next()
                continue
            if kw in SCOPES and scope is None:
                scope = SCOPES[kw]
                self.ts.next()
                continue
            if kw == "on" and not saw_on:
                saw_on = True
                self.ts.next()
                continue
            break
        if coupling is None:
            coupling = sticky
        else:
            sticky = coupling
        if self._kw() == "method":
            # relation-defined method on one side: ON ORIGIN METHOD name ... ; { body }
            mname, mdef = self._parse_relation_method(scope or default_scope)
            body.triggers.append(mdef)
            return sticky
        event = self._expect_name("event or method name")
        if self._kw() == "do":
            self.ts.next()
        action = self._statement_text()
        self._skip_semis()
        if scope is None:
            scope = default_scope
        body.triggers.append(TriggerBlock(
            coupling=coupling, event=event, action=action, scope=scope, visibility=visibility,
        ))
        return sticky

    def _parse_relation_method(self, scope: str) -> tuple[str, TriggerBlock]:
        self.ts.next()  # METHOD
        name = self._expect_name("method name")
        flags: list[tuple[str, str]] = []
        while self.ts.peek().kind == "FLAG":
            flag = self.ts.next().text[1:]
            if self.ts.at("%"):
                self.ts.next()
                flags.append((flag, self._expect_name("parameter")))
            elif self.ts.peek().kind == "ID":
                flags.append((flag, self.ts.next().text))
            else:
                flags.append((flag, flag))
        if self._kw() == "do":
            self.ts.next()
        else:
            self._skip_semis()
        action = self._statement_text()
        self._skip_semis()
        return name, TriggerBlock(coupling="METHOD", event=name, action=action, scope=scope,
                                  mflags=tuple(flags))

    # -- process members

    def _parse_role(self) -> RoleDef:
        name = self._expect_name("role name")
        self.ts.expect("=")
        base = self._expect_name("role base")
        filter_src = ""
        if self.ts.at("/"):
            self.ts.next()
            self.ts.expect("(")
            filter_src = self._event_text()
            self.ts.expect(")")
        attrs: list[AttributeDef] = []
        methods: list[MethodDef] = []
        triggers: list[TriggerBlock] = []
        if self.ts.at("{"):
            self.ts.next()
            inner = _TypeBody("relation", False)
            # reuse the member loop inside the braces
            while not self.ts.at("}"):
                if self.ts.peek().kind == "EOF":
                    self.ts.error("unterminated role block")
                kw = self._kw()
                if kw in ("defattribute", "attribute"):
                    self.ts.next()
                    inner.attributes.extend(self._parse_attr_section())
                elif kw == "method":
                    _, mdef = self._parse_method()
                    inner.methods.append(mdef)
                elif kw in COUPLINGS or kw in ("on", "global") or kw in SCOPES:
                    self._parse_trigger(inner, "POST", "DEST")
                elif self.ts.at(";"):
                    self.ts.next()
                else:
                    self.ts.error("unexpected role member")
            self.ts.expect("}")
            attrs, methods, triggers = inner.attributes, inner.methods, inner.triggers
        self._skip_semis()
        return RoleDef(name=name, base=base, filter=filter_src, attributes=tuple(attrs),
                       methods=tuple(methods), triggers=tuple(triggers))

    def _parse_connection(self) -> ConnectionDef:
        name = self._expect_name("connection name")
        kinds: list[str] = []
        if self._kw() == "is":
            self.ts.next()
            kinds.append(self._expect_name("connection kind").lower())
            while self.ts.at(","):
                self.ts.next()
                kinds.append(self._expect_name("connection kind").lower())
        self._skip_semis()
        role_a = role_b = ""
        when_a: tuple[str, ...] = ()
        when_b: tuple[str, ...] = ()
        events: list[tuple[str, str]] = []
        while True:
            self._skip_semis()
            kw = self._kw()
            if kw == "connect":
                self.ts.next()
                role_a = self._expect_name("role")
                if self._kw() == "with":
                    self.ts.next()
                role_b = self._expect_name("role")
                if self._kw() == "when":
                    self.ts.next()
                    when_a = self._parse_dotted()
                    self.ts.expect("=")
                    when_b = self._parse_dotted()
                self._skip_semis()
                continue
            if kw == "event":
                self.ts.next()
                while True:
                    ename = self._expect_name("event binding")
                    self.ts.expect("=")
                    target = self._expect_name("event name")
                    events.append((ename, target))
                    self._skip_semis()
                    nxt = self.ts.peek()
                    if (nxt.kind == "ID" and nxt.text.lower() not in MEMBER_KWS
                            and self.ts.peek(1).kind == "OP" and self.ts.peek(1).text == "="):
                        continue
                    break
                continue
            if kw == "end":
                self.ts.next()
                trailer = self.ts.peek()
                if trailer.kind == "ID" and trailer.text.lower() not in TOP_KWS:
                    self.ts.next()
                self._skip_semis()
                break
            self.ts.error("expected CONNECT, EVENT or END in connection type")
        return ConnectionDef(name=name, kinds=tuple(kinds), role_a=role_a, role_b=role_b,
                             when_a=when_a, when_b=when_b, events=tuple(events))

    def _parse_dotted(self) -> tuple[str, ...]:
        parts = [self._expect_name("role path")]
        while self.ts.at("."):
            self.ts.next()
            parts.append(self._expect_name("role path"))
        return tuple(parts)


class _TypeBody:
    def __init__(self, kind: str, is_process: bool):
        self.kind = kind
        self.is_process = is_process
        self.attributes: list[AttributeDef] = []
        self.methods: list[MethodDef] = []
        self.triggers: list = []
        self.events: list[EventRule] = []
        self.domain_pairs: list[tuple[str, str]] = []
        self.cardinality = ""
        self.structure = ""
        self.composition = False
        self.roles: list[RoleDef] = []
        self.connections: list[ConnectionDef] = []

    def build(self, name: str, supertypes: list[str]) -> TypeDef:
        user_role = ""
        roles = []
        for role in self.roles:
            if role.name.upper() == "USER":
                user_role = role.base
            else:
                roles.append(role)
        return TypeDef(
            name=name,
            kind=self.kind,
            supertypes=tuple(supertypes),
            attributes=tuple(self.attributes),
            methods=tuple(self.methods),
            triggers=tuple(self.triggers),
            events=tuple(self.events),
            domain_pairs=tuple(self.domain_pairs),
            cardinality=self.cardinality,
            structure=self.structure,
            composition=self.composition,
            is_process=self.is_process,
            roles=tuple(roles),
            connections=tuple(self.connections),
            user_role=user_role,
        )


def _tok_text(source: str, toks: list[lang.Token]) -> str:
    if not toks:
        return ""
    return source[toks[0].pos : toks[-1].endpos].strip()


def _rsplit_or(segment: list[lang.Token]):
    depth = 0
    for i in range(len(segment) - 1, -1, -1):
        tok = segment[i]
        if tok.kind == "OP" and tok.text in ")]}":
            depth += 1
        if tok.kind == "OP" and tok.text in "([{":
            depth -= 1
        if depth == 0 and tok.kind == "ID" and tok.text.lower() == "or":
            return segment[:i], segment[i + 1 :]
    raise DslError("DOMAIN pairs must be separated by OR")


def parse(text: str) -> list[tuple]:
    """Parse .adl source into a declaration list (no side effects)."""
    return _Parser(text).parse()


def load(engine, text: str, user: str = "", partition: str = "project") -> LoadReport:
    """Register all declarations in one transaction; any error registers nothing."""
    decls = parse(text)
    report = LoadReport()

    def run():
        for decl in decls:
            kind = decl[0]
            if kind == "type":
                tdef: TypeDef = decl[1]
                if tdef.is_process:
                    engine.tempo._define_in_tx(tdef, partition)
                    report.process_types.append(tdef.name)
                else:
                    from .schema import typedef_to_dict

                    engine.apply({"op": "deftype", "partition": partition,
                                  "tdef": typedef_to_dict(tdef)})
                    if tdef.kind == "object":
                        report.object_types.append(tdef.name)
                    else:
                        report.relation_types.append(tdef.name)
                for rule in tdef.events:
                    engine.apply({"op": "defevent", "name": rule.name, "source": rule.source,
                                  "priority": rule.priority})
                    report.events.append(rule.name)
            elif kind == "event":
                rule: EventRule = decl[1]
                engine.apply({"op": "defevent", "name": rule.name, "source": rule.source,
                              "priority": rule.priority})
                report.events.append(rule.name)
            elif kind == "method":
                mdef: MethodDef = decl[1]
                engine.apply({"op": "defmethod", "name": mdef.name, "params": list(mdef.params),
                              "flags": [list(f) for f in mdef.flags], "body": mdef.body})
                report.methods.append(mdef.name)
            elif kind == "rootattrs":
                from .schema import typedef_to_dict

                overlay = TypeDef(name="object", kind="object", attributes=tuple(decl[1]))
                engine.apply({"op": "deftype", "partition": partition,
                              "tdef": typedef_to_dict(overlay)})
            elif kind == "partition":
                _, name, parent, subproject = decl
                engine.apply({"op": "defpart", "name": name, "parent": parent or "project",
                              "subproject": subproject})
                report.partitions.append(name)

    result = engine.run_in_tx("load", "dsl", user, run)
    if not result.ok:
        raise DslError(result.message)
    return report
