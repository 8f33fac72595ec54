"""Constraint, event, and path expression language.

Three sub-languages share one lexer:

* selection constraints over attribute views:
    expr := andexpr { "or" andexpr }
    andexpr := term { "and" term }
    term := "not" term | "if" expr "then" expr | "(" expr ")" | atom
    atom := "[" ident op literal "]"
  "and" binds tighter than "or"; "if A then B" desugars to (not A) or B.
  An atom over an unset attribute is false; comparing mismatched types is
  false.

* event expressions, a superset adding command predicates (!cmd = name),
  bindings (!object, !O, !D, !S, !username, !modified, !type), parameter
  references (%x), navigation paths, history predicates (path@(attr op v)),
  transition predicates (attr := v), bracketed comma-conjunctions, and the
  ~ set collector with == set equality.

* navigation paths: a start unit followed by steps.
    (X|R|Y)   relation instances matching the triple, ** as wildcard
    p \\ R     origins of R-relations whose destination is in p
    p / a      attribute read (also p % a)
    p . seg    role-path step (tempo) or attribute read
  ~p collects the values of p over all matches, deduplicated to a set; a
  collected set compared with == to a scalar v means set == {v} (so an
  empty set never equals a scalar).
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass

from .values import UNSET, format_date_literal, parse_date_literal


class LangError(ValueError):
    """Syntax error with position information."""

    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        where = f" at line {line}, col {col}" if line is not None else ""
        super().__init__(f"{message}{where}")


# ---------------------------------------------------------------------------
# Lexer

KEYWORD_OPS = {":=", "==", "!=", "<=", ">=", "->"}
SINGLE_OPS = "()[]{};,|\\/%!@~.:=<>*-"


@dataclass(frozen=True)
class Token:
    kind: str  # ID NUM DATE STR OP STUB FLAG EOF
    text: str
    line: int
    col: int
    pos: int = -1  # absolute source offset
    endpos: int = -1

    @property
    def end(self):
        return self.col + len(self.text)


def tokenize(text: str) -> list[Token]:
    toks: list[Token] = []
    line, col = 1, 1
    i, n = 0, len(text)

    def emit(kind, word, start, end):
        toks.append(Token(kind, word, line, col, start, end))

    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "-" and i + 1 < n and text[i + 1] == "-":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch == '"':
            j = i + 1
            while j < n and text[j] != '"':
                j += 1
            if j >= n:
                raise LangError("unterminated string", line, col)
            emit("STR", text[i + 1 : j], i, j + 1)
            col += j + 1 - i
            i = j + 1
            continue
        if ch == ".":
            j = i
            while j < n and text[j] == ".":
                j += 1
            if j - i >= 2:
                emit("STUB", text[i:j], i, j)
            else:
                emit("OP", ".", i, j)
            col += j - i
            i = j
            continue
        two = text[i : i + 2]
        if two in KEYWORD_OPS or two == "**":
            emit("OP", two, i, i + 2)
            i += 2
            col += 2
            continue
        if ch == "-" and i + 1 < n and text[i + 1].isdigit():
            j = i + 1
            while j < n and (text[j].isdigit() or text[j] == "_"):
                j += 1
            emit("NUM", text[i:j], i, j)
            col += j - i
            i = j
            continue
        if ch == "-" and i + 1 < n and (text[i + 1].isalpha() or text[i + 1] == "_"):
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            emit("FLAG", text[i:j], i, j)
            col += j - i
            i = j
            continue
        if ch.isdigit():
            j = i
            while j < n and (text[j].isdigit() or text[j] == "_"):
                j += 1
            word = text[i:j]
            emit("DATE" if "_" in word else "NUM", word, i, j)
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            emit("ID", text[i:j], i, j)
            col += j - i
            i = j
            continue
        if ch in SINGLE_OPS:
            emit("OP", ch, i, i + 1)
            i += 1
            col += 1
            continue
        raise LangError(f"unexpected character {ch!r}", line, col)
    toks.append(Token("EOF", "", line, col, n, n))
    return toks


class TokenStream:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.pos = 0

    def peek(self, ahead=0) -> Token:
        return self.toks[min(self.pos + ahead, len(self.toks) - 1)]

    def next(self) -> Token:
        tok = self.peek()
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def at(self, *texts, kind="OP") -> bool:
        tok = self.peek()
        return tok.kind == kind and tok.text in texts

    def at_word(self, *words) -> bool:
        tok = self.peek()
        return tok.kind == "ID" and tok.text.lower() in words

    def expect(self, text, kind="OP") -> Token:
        tok = self.peek()
        if tok.kind != kind or tok.text != text:
            raise LangError(f"expected {text!r}, found {tok.text!r}", tok.line, tok.col)
        return self.next()

    def error(self, message):
        tok = self.peek()
        raise LangError(message + f" (found {tok.text!r})", tok.line, tok.col)


# ---------------------------------------------------------------------------
# AST nodes

COMPARE_OPS = ("=", "!=", "<", ">", "<=", ">=", "==")


@dataclass(frozen=True)
class CTrue:
    pass


@dataclass(frozen=True)
class CAtom:
    attr: str
    op: str
    value: object


@dataclass(frozen=True)
class CNot:
    item: object


@dataclass(frozen=True)
class CAnd:
    items: tuple


@dataclass(frozen=True)
class COr:
    items: tuple


@dataclass(frozen=True)
class CIf:
    cond: object
    then: object


# Event / path nodes.  Operand units:
#   ("bind", name)  ("param", name)  ("name", ident)  ("self",)
#   ("lit", value)  ("triple", (term, term, term)) with term like units
# Steps: ("origins", rel)  ("attr", name)  ("dot", unit-like)


@dataclass(frozen=True)
class Operand:
    unit: tuple
    steps: tuple = ()
    collect: bool = False


@dataclass(frozen=True)
class EAtom:
    lhs: Operand
    op: str
    rhs: Operand


@dataclass(frozen=True)
class ETrans:
    attr: str
    value: object


@dataclass(frozen=True)
class EHistory:
    target: Operand
    attr: str
    op: str
    value: object


@dataclass(frozen=True)
class ENot:
    item: object


@dataclass(frozen=True)
class EAnd:
    items: tuple


@dataclass(frozen=True)
class EOr:
    items: tuple


@dataclass(frozen=True)
class EIf:
    cond: object
    then: object


COMMAND_ALIASES = {"remove": "delete", "rm": "delete", "ci": "replace", "checkin": "replace"}


def canonical_command(name: str) -> str:
    return COMMAND_ALIASES.get(name, name)


# ---------------------------------------------------------------------------
# Constraint parsing


def _parse_literal(ts: TokenStream):
    """A typed literal; adjacent ID/NUM joined by dots form one string."""
    tok = ts.peek()
    if tok.kind == "STR":
        ts.next()
        return tok.text
    if tok.kind == "DATE":
        ts.next()
        return parse_date_literal(tok.text)
    if tok.kind == "NUM":
        ts.next()
        return int(tok.text)
    if tok.kind == "ID":
        ts.next()
        word = tok.text
        last = tok
        while ts.at(".") and ts.peek().col == last.end:
            dot = ts.next()
            part = ts.peek()
            if part.kind not in ("ID", "NUM") or part.col != dot.end:
                ts.error("bad dotted literal")
            ts.next()
            word += "." + part.text
            last = part
        if word == "true":
            return True
        if word == "false":
            return False
        return word
    ts.error("expected a literal")


def _parse_catom(ts: TokenStream) -> CAtom:
    ts.expect("[")
    name = ts.peek()
    if name.kind != "ID":
        ts.error("expected an attribute name")
    ts.next()
    op = ts.peek()
    if op.kind != "OP" or op.text not in COMPARE_OPS:
        ts.error("expected a comparison operator")
    ts.next()
    value = _parse_literal(ts)
    ts.expect("]")
    return CAtom(name.text, op.text, value)


def _parse_cterm(ts: TokenStream):
    if ts.at_word("not"):
        ts.next()
        return CNot(_parse_cterm(ts))
    if ts.at_word("if"):
        ts.next()
        cond = _parse_cexpr(ts)
        if not ts.at_word("then"):
            ts.error("expected 'then'")
        ts.next()
        return CIf(cond, _parse_cexpr(ts))
    if ts.at("("):
        ts.next()
        inner = _parse_cexpr(ts)
        ts.expect(")")
        return inner
    return _parse_catom(ts)


def _parse_cand(ts: TokenStream):
    items = [_parse_cterm(ts)]
    while ts.at_word("and"):
        ts.next()
        items.append(_parse_cterm(ts))
    return items[0] if len(items) == 1 else CAnd(tuple(items))


def _parse_cexpr(ts: TokenStream):
    items = [_parse_cand(ts)]
    while ts.at_word("or"):
        ts.next()
        items.append(_parse_cand(ts))
    return items[0] if len(items) == 1 else COr(tuple(items))


def parse_constraint(text: str):
    """Parse a selection constraint; empty text is the constant-true constraint."""
    ts = TokenStream(tokenize(text))
    if ts.peek().kind == "EOF":
        return CTrue()
    ast = _parse_cexpr(ts)
    if ts.peek().kind != "EOF":
        ts.error("trailing input after constraint")
    return ast


def compare_values(a, op: str, b) -> bool:
    """Typed scalar comparison; mismatched types compare false."""
    if a is UNSET or b is UNSET:
        return op == "!=" and not (a is UNSET and b is UNSET)
    if isinstance(a, bool) != isinstance(b, bool):
        return op == "!="
    groups = [(bool, bool), (int, int), (str, str), (datetime.date, datetime.date)]
    same = any(isinstance(a, ta) and isinstance(b, tb) for ta, tb in groups)
    if not same:
        return op == "!="
    if op in ("=", "=="):
        return a == b
    if op == "!=":
        return a != b
    if isinstance(a, bool):
        return False
    if op == "<":
        return a < b
    if op == ">":
        return a > b
    if op == "<=":
        return a <= b
    if op == ">=":
        return a >= b
    return False


def eval_constraint(ast, view) -> bool:
    """Evaluate against an attribute view (mapping or callable).

    An atom whose attribute is unset is false; "if A then B" is (not A) or B.
    """
    get = view if callable(view) else lambda name: view.get(name, UNSET)
    return _eval_c(ast, get)


def _eval_c(ast, get) -> bool:
    if isinstance(ast, CTrue):
        return True
    if isinstance(ast, CAtom):
        value = get(ast.attr)
        if value is UNSET or value is None:
            return False
        if isinstance(value, frozenset):
            if ast.op in ("=", "=="):
                hit = ast.value in value
                return value == {ast.value} if ast.op == "==" else hit
            if ast.op == "!=":
                return ast.value not in value
            return False
        return compare_values(value, ast.op, ast.value)
    if isinstance(ast, CNot):
        return not _eval_c(ast.item, get)
    if isinstance(ast, CAnd):
        return all(_eval_c(i, get) for i in ast.items)
    if isinstance(ast, COr):
        return any(_eval_c(i, get) for i in ast.items)
    if isinstance(ast, CIf):
        return (not _eval_c(ast.cond, get)) or _eval_c(ast.then, get)
    raise TypeError(f"not a constraint node: {ast!r}")


def constraint_atoms(ast) -> list[CAtom]:
    out = []

    def walk(node):
        if isinstance(node, CAtom):
            out.append(node)
        elif isinstance(node, CNot):
            walk(node.item)
        elif isinstance(node, (CAnd, COr)):
            for i in node.items:
                walk(i)
        elif isinstance(node, CIf):
            walk(node.cond)
            walk(node.then)

    walk(ast)
    return out


def print_literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, datetime.date):
        return format_date_literal(value)
    if isinstance(value, int):
        return str(value)
    text = str(value)
    if text and all(c.isalnum() or c in "_." for c in text) and not text[0].isdigit():
        return text
    return f'"{text}"'


def print_constraint(ast) -> str:
    """Canonical text form (dates year-first); parse(print(x)) == x."""
    if isinstance(ast, CTrue):
        return ""
    if isinstance(ast, CAtom):
        return f"[{ast.attr} {ast.op} {print_literal(ast.value)}]"
    if isinstance(ast, CNot):
        return f"not ({print_constraint(ast.item)})"
    if isinstance(ast, CAnd):
        return " and ".join(f"({print_constraint(i)})" for i in ast.items)
    if isinstance(ast, COr):
        return " or ".join(f"({print_constraint(i)})" for i in ast.items)
    if isinstance(ast, CIf):
        return f"if ({print_constraint(ast.cond)}) then ({print_constraint(ast.then)})"
    raise TypeError(f"not a constraint node: {ast!r}")


# ---------------------------------------------------------------------------
# Event / path parsing

EVENT_KEYWORDS = {"and", "or", "not", "if", "then"}


def _parse_unit(ts: TokenStream, literal_ok=True):
    tok = ts.peek()
    if tok.kind == "OP" and tok.text == "!":
        ts.next()
        name = ts.next()
        if name.kind != "ID":
            ts.error("expected a binding name after '!'")
        return ("bind", name.text)
    if tok.kind == "OP" and tok.text == "%":
        ts.next()
        name = ts.next()
        if name.kind != "ID":
            ts.error("expected a name after '%'")
        return ("param", name.text)
    if tok.kind == "OP" and tok.text == "**":
        ts.next()
        return ("any",)
    if tok.kind == "ID":
        ts.next()
        if tok.text == "self":
            return ("self",)
        return ("name", tok.text)
    if literal_ok and tok.kind in ("NUM", "DATE", "STR"):
        ts.next()
        if tok.kind == "NUM":
            return ("lit", int(tok.text))
        if tok.kind == "DATE":
            return ("lit", parse_date_literal(tok.text))
        return ("lit", tok.text)
    ts.error("expected a value or path")


def _parse_operand(ts: TokenStream):
    collect = False
    if ts.at("~"):
        ts.next()
        collect = True
    if ts.at("("):
        # Could be a triple pattern; only consume if a '|' shows up at depth 1.
        mark = ts.pos
        ts.next()
        try:
            first = _parse_unit(ts)
            if ts.at("|"):
                ts.next()
                rel = _parse_unit(ts)
                ts.expect("|")
                third = _parse_unit(ts)
                ts.expect(")")
                unit = ("triple", (first, rel, third))
                steps = _parse_steps(ts)
                return Operand(unit, steps, collect)
        except LangError:
            pass
        ts.pos = mark
        ts.error("expected a triple pattern after '('")
    unit = _parse_unit(ts)
    steps = _parse_steps(ts)
    return Operand(unit, steps, collect)


def _parse_steps(ts: TokenStream) -> tuple:
    steps = []
    while True:
        tok = ts.peek()
        # step punctuation binds only when glued to the previous token, so
        # "mda self -a v %a" stays four arguments while "!S%STATE" is a path
        if ts.pos > 0 and tok.pos != ts.toks[ts.pos - 1].endpos:
            break
        if tok.kind == "OP" and tok.text == "\\":
            ts.next()
            rel = ts.next()
            if rel.kind != "ID":
                ts.error("expected a relation type after '\\'")
            steps.append(("origins", rel.text))
        elif tok.kind == "OP" and tok.text in ("/", "%"):
            ts.next()
            name = ts.next()
            if name.kind != "ID":
                ts.error("expected an attribute name")
            steps.append(("attr", name.text))
        elif tok.kind == "OP" and tok.text == ".":
            nxt = ts.peek(1)
            if nxt.kind == "OP" and nxt.text == "%":
                ts.next()
                ts.next()
                name = ts.next()
                if name.kind != "ID":
                    ts.error("expected a name after '%'")
                steps.append(("dot", ("param", name.text)))
            elif nxt.kind == "ID":
                ts.next()
                steps.append(("dot", ("name", ts.next().text)))
            else:
                break
        else:
            break
    return tuple(steps)


def _operand_is_bare_ident(op: Operand) -> bool:
    return op.unit[0] == "name" and not op.steps and not op.collect


def _parse_eatom(ts: TokenStream, in_bracket=False):
    lhs = _parse_operand(ts)
    if ts.at("@"):
        ts.next()
        ts.expect("(")
        attr = ts.next()
        if attr.kind != "ID":
            ts.error("expected an attribute name in history predicate")
        op = ts.next()
        if op.kind != "OP" or op.text not in COMPARE_OPS:
            ts.error("expected a comparison in history predicate")
        value = _parse_literal(ts)
        ts.expect(")")
        return EHistory(lhs, attr.text, op.text, value)
    tok = ts.peek()
    if tok.kind == "OP" and tok.text == ":=":
        ts.next()
        if not _operand_is_bare_ident(lhs):
            ts.error("transition predicates take a plain attribute name")
        value = _parse_literal(ts)
        return ETrans(lhs.unit[1], value)
    if tok.kind == "OP" and tok.text in COMPARE_OPS:
        ts.next()
        if in_bracket:
            nxt = ts.peek()
            if nxt.kind == "ID" and ts.peek(1).kind == "OP" and ts.peek(1).text in (",", "]"):
                ts.next()
                return EAtom(lhs, tok.text, Operand(("name", nxt.text)))
            if nxt.kind in ("NUM", "DATE", "STR"):
                return EAtom(lhs, tok.text, Operand(("lit", _parse_literal(ts))))
        rhs = _parse_operand(ts)
        return EAtom(lhs, tok.text, rhs)
    # Bare operand: truthy test, canonically "x = true".
    return EAtom(lhs, "=", Operand(("lit", True)))


def _parse_eterm(ts: TokenStream):
    if ts.at_word("not"):
        ts.next()
        return ENot(_parse_eterm(ts))
    if ts.at_word("if"):
        ts.next()
        cond = _parse_eexpr(ts)
        if not ts.at_word("then"):
            ts.error("expected 'then'")
        ts.next()
        return EIf(cond, _parse_eexpr(ts))
    if ts.at("["):
        ts.next()
        items = [_parse_eatom(ts, in_bracket=True)]
        while ts.at(","):
            ts.next()
            items.append(_parse_eatom(ts, in_bracket=True))
        ts.expect("]")
        return items[0] if len(items) == 1 else EAnd(tuple(items))
    if ts.at("("):
        mark = ts.pos
        ts.next()
        try:
            inner = _parse_eexpr(ts)
            ts.expect(")")
            return inner
        except LangError:
            ts.pos = mark
            return _parse_eatom(ts)  # triple pattern
    return _parse_eatom(ts)


def _parse_eand(ts: TokenStream):
    items = [_parse_eterm(ts)]
    while ts.at_word("and"):
        ts.next()
        items.append(_parse_eterm(ts))
    return items[0] if len(items) == 1 else EAnd(tuple(items))


def _parse_eexpr(ts: TokenStream):
    items = [_parse_eand(ts)]
    while ts.at_word("or"):
        ts.next()
        items.append(_parse_eand(ts))
    return items[0] if len(items) == 1 else EOr(tuple(items))


def parse_event(text: str):
    """Parse an event expression."""
    ts = TokenStream(tokenize(text))
    if ts.peek().kind == "EOF":
        raise LangError("empty event expression")
    ast = _parse_eexpr(ts)
    if ts.peek().kind != "EOF":
        ts.error("trailing input after event expression")
    return ast


def parse_event_tokens(ts: TokenStream):
    """Parse an event expression from an existing stream (for the DSL)."""
    return _parse_eexpr(ts)


def parse_path(text: str) -> Operand:
    """Parse a navigation path pattern."""
    ts = TokenStream(tokenize(text))
    op = _parse_operand(ts)
    if ts.peek().kind != "EOF":
        ts.error("trailing input after path")
    return op


# ---------------------------------------------------------------------------
# Event / path evaluation


class CollectedSet(frozenset):
    """Result of the ~ collector; == against a scalar means {scalar}."""


def _unit_text(unit) -> str:
    kind = unit[0]
    if kind == "bind":
        return "!" + unit[1]
    if kind == "param":
        return "%" + unit[1]
    if kind == "name":
        return unit[1]
    if kind == "self":
        return "self"
    if kind == "any":
        return "**"
    if kind == "lit":
        return print_literal(unit[1])
    if kind == "triple":
        return "(" + "|".join(_unit_text(t) for t in unit[1]) + ")"
    raise TypeError(f"bad unit {unit!r}")


def print_operand(op: Operand) -> str:
    text = ("~" if op.collect else "") + _unit_text(op.unit)
    for step in op.steps:
        if step[0] == "origins":
            text += "\\" + step[1]
        elif step[0] == "attr":
            text += "%" + step[1]
        else:
            text += "." + _unit_text(step[1])
    return text


def print_event(ast) -> str:
    if isinstance(ast, EAtom):
        return f"{print_operand(ast.lhs)} {ast.op} {print_operand(ast.rhs)}"
    if isinstance(ast, ETrans):
        return f"{ast.attr} := {print_literal(ast.value)}"
    if isinstance(ast, EHistory):
        return f"{print_operand(ast.target)}@({ast.attr} {ast.op} {print_literal(ast.value)})"
    if isinstance(ast, ENot):
        return f"not ({print_event(ast.item)})"
    if isinstance(ast, EAnd):
        return " and ".join(f"({print_event(i)})" for i in ast.items)
    if isinstance(ast, EOr):
        return " or ".join(f"({print_event(i)})" for i in ast.items)
    if isinstance(ast, EIf):
        return f"if ({print_event(ast.cond)}) then ({print_event(ast.then)})"
    raise TypeError(f"not an event node: {ast!r}")


class _TypeName(str):
    """Type-of-subject value: equality against a name uses subtype inclusion."""


def eval_operand(op: Operand, ctx, role="rhs"):
    """Evaluate an operand to a list of items (values or entity refs).

    `role` distinguishes a bare identifier on the left (attribute of the
    subject) from one on the right (a literal string).
    """
    unit = op.unit
    kind = unit[0]
    if kind == "lit":
        items = [unit[1]]
    elif kind == "bind":
        items = _eval_binding(unit[1], ctx)
    elif kind == "param":
        items = [ctx.param_value(unit[1])]
    elif kind == "self":
        items = [ctx.subject] if ctx.subject is not None else []
    elif kind == "triple":
        items = ctx.match_triple(*(_triple_term(t, ctx) for t in unit[1]))
    elif kind == "name":
        if op.steps:
            items = ctx.resolve_unit(unit[1])
        elif role == "lhs":
            items = [ctx.attr_of_subject(unit[1])]
        else:
            items = [unit[1]]
    else:
        raise LangError(f"cannot evaluate unit {unit!r}")
    for step in op.steps:
        items = ctx.step(items, step)
    if op.collect:
        return [CollectedSet(ctx.as_value(i) for i in items)]
    return items


def _triple_term(term, ctx):
    kind = term[0]
    if kind == "any":
        return None
    if kind == "self":
        return ctx.subject
    if kind == "bind":
        vals = _eval_binding(term[1], ctx)
        return vals[0] if vals else None
    if kind == "param":
        return ctx.param_value(term[1])
    if kind == "name":
        return term[1]
    raise LangError(f"bad triple term {term!r}")


def _eval_binding(name, ctx):
    lowered = name.lower()
    if lowered == "cmd":
        return [canonical_command(ctx.command)] if ctx.command else [UNSET]
    if lowered == "object":
        return [ctx.subject] if ctx.subject is not None else [UNSET]
    if lowered in ("username", "curentuser", "currentuser", "user"):
        return [ctx.user] if ctx.user else [UNSET]
    if lowered == "modified":
        return [ctx.subject_modified()]
    if lowered == "type":
        tname = ctx.subject_type()
        return [_TypeName(tname)] if tname else [UNSET]
    value = ctx.binding_value(name)
    if isinstance(value, list):
        return value
    return [value]


def _flatten_values(items, ctx):
    out = []
    for item in items:
        if isinstance(item, CollectedSet):
            out.append(item)
        elif isinstance(item, frozenset):
            out.extend(sorted(item))
        else:
            out.append(ctx.as_value(item))
    return out


def _compare_sets(lhs, op, rhs, ctx):
    lvals = _flatten_values(lhs, ctx)
    rvals = _flatten_values(rhs, ctx)
    lcollected = any(isinstance(v, CollectedSet) for v in lvals)
    rcollected = any(isinstance(v, CollectedSet) for v in rvals)
    if lcollected or rcollected:
        lset = set().union(*(v if isinstance(v, CollectedSet) else {v} for v in lvals)) if lvals else set()
        rset = set().union(*(v if isinstance(v, CollectedSet) else {v} for v in rvals)) if rvals else set()
        if op == "==":
            return lset == rset and bool(lset)
        if op == "=":
            return any(compare_values(a, "=", b) for a in lset for b in rset)
        if op == "!=":
            return not any(compare_values(a, "=", b) for a in lset for b in rset)
        return False
    if op == "==":
        return bool(lvals) and bool(rvals) and set(lvals) == set(rvals)
    if not lvals or not rvals:
        return False
    if op == "!=":
        return not any(_scalar_eq(a, b, ctx) for a in lvals for b in rvals)
    if op == "=":
        return any(_scalar_eq(a, b, ctx) for a in lvals for b in rvals)
    return any(compare_values(a, op, b) for a in lvals for b in rvals)


def _scalar_eq(a, b, ctx):
    if isinstance(a, _TypeName) and isinstance(b, str):
        return ctx.type_matches(str(a), str(b))
    if isinstance(b, _TypeName) and isinstance(a, str):
        return ctx.type_matches(str(b), str(a))
    return compare_values(a, "=", b)


def eval_event(ast, ctx) -> bool:
    """Evaluate an event expression; failures yield false plus a diagnostic."""
    try:
        return _eval_e(ast, ctx)
    except Exception as err:  # evaluation failure is "false", not an error
        ctx.diagnostic(f"event evaluation failed: {err}")
        return False


def _eval_e(ast, ctx) -> bool:
    if isinstance(ast, EAtom):
        lhs = eval_operand(ast.lhs, ctx, role="lhs")
        rhs = eval_operand(ast.rhs, ctx, role="rhs")
        if ast.lhs.unit == ("bind", "cmd") or ast.rhs.unit == ("bind", "cmd"):
            lhs = [canonical_command(v) if isinstance(v, str) else v for v in lhs]
            rhs = [canonical_command(v) if isinstance(v, str) else v for v in rhs]
        return _compare_sets(lhs, ast.op, rhs, ctx)
    if isinstance(ast, ETrans):
        return ctx.transition_matches(ast.attr, ast.value)
    if isinstance(ast, EHistory):
        targets = eval_operand(ast.target, ctx, role="lhs")
        return any(ctx.history_matches(t, ast.attr, ast.op, ast.value) for t in targets)
    if isinstance(ast, ENot):
        return not _eval_e(ast.item, ctx)
    if isinstance(ast, EAnd):
        return all(_eval_e(i, ctx) for i in ast.items)
    if isinstance(ast, EOr):
        return any(_eval_e(i, ctx) for i in ast.items)
    if isinstance(ast, EIf):
        return (not _eval_e(ast.cond, ctx)) or _eval_e(ast.then, ctx)
    raise TypeError(f"not an event node: {ast!r}")
