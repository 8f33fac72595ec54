"""Action program parser and interpreter.

An action is the DO-part of a method or trigger: an imperative list of
statements executed against the current transaction. Statements:

    { s; s; ... }                     block
    IF <event-expr> THEN s [ELSE s]   conditional
    ABORT ["message"]                 roll the whole command back
    print args... / mail user args... output and notification
    delete <entity>                   trigger-mediated removal
    mda <target> -a <ATTR> <value>    attribute write
    makerel <origin> -r <type> -d <dest>
    copy <origin> -d <newname>        duplicate an aggregate head
    new <role>                        create a role instance (process layer)
    <path> = value | <path> := value  attribute assignment (fans out over
                                      every match of a multi-valued path)
    name (a, b) / name a -f b         method call, else external command

Late binding: bare words in argument position resolve to method parameters
first, then stay literal; %x inside strings substitutes parameters or
attributes of self. A statement whose argument evaluates to several items
runs once per item.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

from . import lang
from .values import UNSET, value_repr


class ActionError(ValueError):
    pass


STOP_WORDS = {"on", "pre", "post", "after", "error", "end", "else", "then", "do", "method",
              "role", "event", "connect", "typeconnection", "defattribute", "attribute",
              "domain", "card"}

BUILTIN_COMMANDS = {"print", "mail", "delete", "remove", "makerel", "mkrel", "copy", "mda", "new"}


@dataclass(frozen=True)
class Block:
    stmts: tuple


@dataclass(frozen=True)
class IfStmt:
    cond: object
    then: object
    els: object = None


@dataclass(frozen=True)
class AbortStmt:
    message: str = ""


@dataclass(frozen=True)
class AssignStmt:
    target: lang.Operand
    value: object  # arg


@dataclass(frozen=True)
class CallStmt:
    name: str
    args: tuple  # of ("operand", Operand) | ("string", text)
    flags: tuple  # of (flag-name, arg)


@dataclass(frozen=True)
class NopStmt:
    pass


def _at_stop(ts: lang.TokenStream) -> bool:
    tok = ts.peek()
    if tok.kind == "EOF":
        return True
    if tok.kind == "OP" and tok.text in (";", "}"):
        return True
    if tok.kind == "ID" and tok.text.lower() in STOP_WORDS:
        return True
    return False


def _parse_arg(ts: lang.TokenStream):
    tok = ts.peek()
    if tok.kind == "STR":
        ts.next()
        return ("string", tok.text)
    if tok.kind == "STUB":
        ts.next()
        return ("stub", "")
    return ("operand", lang._parse_operand(ts))


def _parse_call_args(ts: lang.TokenStream):
    args: list = []
    flags: list = []
    if ts.at("("):
        ts.next()
        if not ts.at(")"):
            args.append(_parse_arg(ts))
            while ts.at(","):
                ts.next()
                args.append(_parse_arg(ts))
        ts.expect(")")
        return args, flags
    while not _at_stop(ts):
        tok = ts.peek()
        if tok.kind == "FLAG":
            ts.next()
            if _at_stop(ts) or ts.peek().kind == "FLAG":
                flags.append((tok.text[1:], ("string", "")))
            else:
                flags.append((tok.text[1:], _parse_arg(ts)))
            continue
        if tok.kind == "OP" and tok.text == ")":
            ts.next()  # a lone unmatched ')' in command arguments is noise
            continue
        args.append(_parse_arg(ts))
    return args, flags


def parse_statement(ts: lang.TokenStream):
    tok = ts.peek()
    if tok.kind == "OP" and tok.text == "{":
        ts.next()
        stmts = []
        while not ts.at("}"):
            if ts.peek().kind == "EOF":
                ts.error("unterminated block")
            if ts.at(";"):
                ts.next()
                continue
            stmts.append(parse_statement(ts))
        ts.expect("}")
        return Block(tuple(stmts))
    if tok.kind == "STUB":
        ts.next()
        return NopStmt()
    if tok.kind == "ID" and tok.text.lower() == "if":
        ts.next()
        cond = lang.parse_event_tokens(ts)
        if not ts.at_word("then"):
            ts.error("expected THEN")
        ts.next()
        then = parse_statement(ts)
        els = None
        if ts.at_word("else"):
            ts.next()
            els = parse_statement(ts)
        return IfStmt(cond, then, els)
    if tok.kind == "ID" and tok.text.lower() == "abort":
        ts.next()
        message = ""
        if ts.peek().kind == "STR":
            message = ts.next().text
        return AbortStmt(message)
    # Operand-led: assignment or command.
    mark = ts.pos
    operand = lang._parse_operand(ts)
    nxt = ts.peek()
    if nxt.kind == "OP" and nxt.text in ("=", ":="):
        ts.next()
        return AssignStmt(operand, _parse_arg(ts))
    if operand.unit[0] == "name" and not operand.steps and not operand.collect:
        args, flags = _parse_call_args(ts)
        return CallStmt(operand.unit[1], tuple(args), tuple(flags))
    ts.pos = mark
    ts.error("expected a statement")


def parse_program(text: str) -> Block:
    ts = lang.TokenStream(lang.tokenize(text))
    stmts = []
    while ts.peek().kind != "EOF":
        if ts.at(";"):
            ts.next()
            continue
        stmts.append(parse_statement(ts))
    return Block(tuple(stmts))


@lru_cache(maxsize=4096)
def cached_program(text: str) -> Block:
    return parse_program(text)


@lru_cache(maxsize=4096)
def cached_summary(text: str) -> str:
    return summarize(cached_program(text))


def summarize(stmt) -> str:
    """One-line action summary for traces."""
    if isinstance(stmt, Block):
        inner = "; ".join(summarize(s) for s in stmt.stmts)
        return "{" + inner + "}"
    if isinstance(stmt, IfStmt):
        text = f"IF {lang.print_event(stmt.cond)} THEN {summarize(stmt.then)}"
        if stmt.els is not None:
            text += f" ELSE {summarize(stmt.els)}"
        return text
    if isinstance(stmt, AbortStmt):
        return "ABORT"
    if isinstance(stmt, AssignStmt):
        return f"{lang.print_operand(stmt.target)} := {_arg_text(stmt.value)}"
    if isinstance(stmt, CallStmt):
        parts = [stmt.name] + [_arg_text(a) for a in stmt.args]
        parts += [f"-{f} {_arg_text(v)}" for f, v in stmt.flags]
        return " ".join(parts)
    if isinstance(stmt, NopStmt):
        return "nop"
    return repr(stmt)


def _arg_text(arg) -> str:
    kind, payload = arg
    if kind == "string":
        return f'"{payload}"'
    if kind == "stub":
        return "..."
    return lang.print_operand(payload)


_SUBST = re.compile(r"%([A-Za-z_][A-Za-z0-9_]*)")


class Runner:
    """Executes action programs through the engine against a live context."""

    def __init__(self, engine, ctx):
        self.engine = engine
        self.ctx = ctx

    def run(self, program):
        self.exec_stmt(program)

    def exec_stmt(self, stmt):
        cls = type(stmt)
        if cls is CallStmt:
            self._exec_call(stmt)
        elif cls is IfStmt:
            if lang.eval_event(stmt.cond, self.ctx):
                self.exec_stmt(stmt.then)
            elif stmt.els is not None:
                self.exec_stmt(stmt.els)
        elif cls is Block:
            for s in stmt.stmts:
                self.exec_stmt(s)
        elif cls is AssignStmt:
            self._exec_assign(stmt)
        elif cls is AbortStmt:
            self.engine.raise_abort(self._subst(stmt.message))
        elif cls is NopStmt:
            pass
        else:
            raise ActionError(f"unknown statement {stmt!r}")

    # -- argument evaluation

    def _subst(self, template: str) -> str:
        def repl(match):
            try:
                return value_repr(self.ctx.param_value(match.group(1)))
            except Exception:
                return match.group(0)

        return _SUBST.sub(repl, template)

    def _eval_arg(self, arg) -> list:
        kind, payload = arg
        if kind == "string":
            return [self._subst(payload)]
        if kind == "stub":
            return []
        operand: lang.Operand = payload
        if operand.unit[0] == "name" and not operand.steps and not operand.collect:
            word = operand.unit[1]
            if word == "self":
                return [self.ctx.subject]
            if word in self.ctx.params:
                return [self.ctx.params[word]]
            return [word]
        return lang.eval_operand(operand, self.ctx, role="lhs")

    def _scalar_arg(self, arg):
        items = self._eval_arg(arg)
        if not items:
            return UNSET
        if len(items) == 1:
            return items[0]
        return items

    # -- statements

    def _exec_assign(self, stmt: AssignStmt):
        target = stmt.target
        if not target.steps:
            if target.unit[0] != "name":
                raise ActionError(f"cannot assign to {lang.print_operand(target)}")
            holders = [self.ctx.subject]
            attr = target.unit[1]
        else:
            last = target.steps[-1]
            if last[0] == "attr":
                attr = last[1]
            elif last[0] == "dot" and last[1][0] == "name":
                attr = last[1][1]
            else:
                raise ActionError(f"assignment target must end in an attribute")
            prefix = lang.Operand(target.unit, target.steps[:-1], False)
            holders = lang.eval_operand(prefix, self.ctx, role="lhs")
        value = self._scalar_arg(stmt.value)
        for holder in holders:
            if not (isinstance(holder, tuple) and holder and holder[0] in ("obj", "rel")):
                raise ActionError(f"cannot assign attribute {attr!r} to value {holder!r}")
            self.engine.write_attr(self.ctx, holder, attr, value)

    def _exec_call(self, stmt: CallStmt):
        name = stmt.name
        lowered = name.lower()
        arg_lists = [self._eval_arg(a) for a in stmt.args]
        flag_map = {f: self._scalar_arg(v) for f, v in stmt.flags}
        # fan out over multi-valued arguments, one execution per element
        combos = [[]]
        for items in arg_lists:
            if len(items) <= 1:
                combos = [c + [items[0] if items else UNSET] for c in combos]
            else:
                combos = [c + [item] for c in combos for item in items]
        for combo in combos:
            self._dispatch(lowered, name, combo, flag_map)

    def _dispatch(self, lowered, name, args, flags):
        engine, ctx = self.engine, self.ctx
        if lowered == "print":
            engine.emit_output(ctx, " ".join(value_repr(a) for a in args))
            return
        if lowered == "mail":
            engine.send_mail(ctx, args)
            return
        if lowered in ("delete", "remove"):
            if not args:
                raise ActionError("delete needs a target")
            engine.invoke_nested(ctx, args[0], "delete", [], {})
            return
        if lowered in ("makerel", "mkrel"):
            origin = args[0] if args else ctx.subject
            reltype = flags.get("r")
            dest = flags.get("d")
            if reltype is None or dest is None:
                raise ActionError("makerel needs -r <type> and -d <dest>")
            engine.create_relation_in_tx(ctx, origin, reltype, dest)
            return
        if lowered == "copy":
            src = args[0] if args else ctx.subject
            newname = flags.get("d")
            if newname is None:
                raise ActionError("copy needs -d <newname>")
            engine.invoke_nested(ctx, src, "copy", [], {"new": newname})
            return
        if lowered == "mda":
            target = args[0] if args else ctx.subject
            attr = flags.get("a")
            if attr is None or len(args) < 2:
                raise ActionError("mda needs a target, -a <attr> and a value")
            engine.write_attr(ctx, engine.to_ref(target), str(attr), args[1])
            return
        if lowered == "new":
            if not args:
                raise ActionError("new needs a role name")
            engine.new_role_instance(ctx, str(args[0]))
            return
        engine.call_method(ctx, name, args, flags)
