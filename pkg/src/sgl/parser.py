"""Recursive-descent parser producing a CompilationUnit.

Syntax errors carry the expected-token set and the offending location.
Duplicate class and field names are reported here as well; everything
else (name resolution, access rules, typing) is the analyzer's job.
"""

from __future__ import annotations

from .diagnostics import (
    CompileError,
    Diagnostic,
    DiagnosticSink,
    E_BAD_COMBINATOR,
    E_DUP_CLASS,
    E_DUP_FIELD,
    E_SYNTAX,
)
from .lexer import TokKind, Token, string_value, tokenize
from .nodes import (
    AccumLoop,
    Atomic,
    Binary,
    ClassDef,
    CompilationUnit,
    Destroy,
    EffectAssign,
    EffectDecl,
    Expr,
    FieldAccess,
    FieldDecl,
    HandlerDef,
    If,
    Let,
    Literal,
    Name,
    Restart,
    ScriptDef,
    Spawn,
    Stmt,
    Unary,
    UpdateRule,
    WaitNextTick,
)
from . import typesys
from .typesys import COMBINATOR_NAMES, Combinator, Type


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.i = 0
        self.sink = DiagnosticSink()

    # -- token plumbing ----------------------------------------------------

    @property
    def cur(self) -> Token:
        return self.tokens[self.i]

    def at(self, kind: TokKind, lexeme: str | None = None) -> bool:
        t = self.cur
        return t.kind is kind and (lexeme is None or t.lexeme == lexeme)

    def accept(self, kind: TokKind, lexeme: str | None = None) -> Token | None:
        if self.at(kind, lexeme):
            t = self.cur
            self.i += 1
            return t
        return None

    def expect(self, kind: TokKind, lexeme: str | None = None) -> Token:
        t = self.accept(kind, lexeme)
        if t is None:
            self.fail(lexeme or kind.value)
        return t

    def fail(self, expected: str) -> None:
        t = self.cur
        got = t.lexeme if t.kind is not TokKind.EOF else "end of input"
        raise CompileError(
            self.sink.diagnostics
            + [Diagnostic("error", E_SYNTAX, f"expected {expected}, got {got!r}", t.line, t.column)]
        )

    def pos(self) -> tuple[int, int]:
        return (self.cur.line, self.cur.column)

    # -- top level ---------------------------------------------------------

    def unit(self) -> CompilationUnit:
        classes: list[ClassDef] = []
        scripts: list[ScriptDef] = []
        handlers: list[HandlerDef] = []
        while not self.at(TokKind.EOF):
            if self.at(TokKind.KW, "class"):
                classes.append(self.class_def())
            elif self.at(TokKind.KW, "run"):
                scripts.append(self.script_def())
            elif self.at(TokKind.KW, "on"):
                handlers.append(self.handler_def())
            else:
                self.fail("'class', 'run' or 'on'")
        unit = CompilationUnit(classes, scripts, handlers)
        self._check_duplicates(unit)
        self.sink.check()
        return unit

    def _check_duplicates(self, unit: CompilationUnit) -> None:
        seen: dict[str, ClassDef] = {}
        for c in unit.classes:
            if c.name in seen:
                self.sink.error(E_DUP_CLASS, f"duplicate class {c.name!r}", c.pos)
            seen[c.name] = c
            names: dict[str, tuple[int, int]] = {}
            for f in list(c.state_fields) + list(c.effect_fields):
                if f.name in names:
                    self.sink.error(E_DUP_FIELD, f"duplicate field {f.name!r} in class {c.name}", f.pos)
                names[f.name] = f.pos

    def class_def(self) -> ClassDef:
        pos = self.pos()
        self.expect(TokKind.KW, "class")
        name = self.ident("class name")
        self.expect(TokKind.PUNCT, "{")
        state: list[FieldDecl] = []
        effects: list[EffectDecl] = []
        rules: list[UpdateRule] = []
        constraints: list[Expr] = []
        while not self.accept(TokKind.PUNCT, "}"):
            if self.accept(TokKind.KW, "state"):
                self.expect(TokKind.PUNCT, ":")
                while self._at_type():
                    state.append(self.state_decl())
            elif self.accept(TokKind.KW, "effects"):
                self.expect(TokKind.PUNCT, ":")
                while self._at_type():
                    effects.append(self.effect_decl())
            elif self.accept(TokKind.KW, "update"):
                self.expect(TokKind.PUNCT, ":")
                while self.at(TokKind.IDENT):
                    rules.append(self.update_rule())
            elif self.accept(TokKind.KW, "constraints"):
                self.expect(TokKind.PUNCT, ":")
                while not self._at_section_or_close():
                    constraints.append(self.expression())
                    self.expect(TokKind.PUNCT, ";")
            else:
                self.fail("'state:', 'effects:', 'update:', 'constraints:' or '}'")
        return ClassDef(name, state, effects, rules, constraints, pos)

    def _at_type(self) -> bool:
        t = self.cur
        if t.kind is TokKind.KW and t.lexeme in ("number", "int", "bool", "string", "ref", "set"):
            return True
        return t.kind is TokKind.IDENT and self.tokens[self.i + 1].kind is TokKind.IDENT

    def _at_section_or_close(self) -> bool:
        t = self.cur
        if t.is_punct("}") or t.kind is TokKind.EOF:
            return True
        return t.kind is TokKind.KW and t.lexeme in ("state", "effects", "update", "constraints")

    def state_decl(self) -> FieldDecl:
        pos = self.pos()
        ty = self.type_expr()
        name = self.ident("field name")
        init = None
        if self.accept(TokKind.PUNCT, "="):
            init = self.expression()
        self.expect(TokKind.PUNCT, ";")
        return FieldDecl(name, ty, init, pos)

    def effect_decl(self) -> EffectDecl:
        pos = self.pos()
        ty = self.type_expr()
        name = self.ident("effect name")
        self.expect(TokKind.PUNCT, ":")
        comb_tok = self.cur
        comb_name = self.ident("combinator")
        comb = COMBINATOR_NAMES.get(comb_name)
        if comb is None:
            raise CompileError(
                self.sink.diagnostics
                + [Diagnostic("error", E_BAD_COMBINATOR,
                              f"unknown combinator {comb_name!r}; one of {sorted(COMBINATOR_NAMES)}",
                              comb_tok.line, comb_tok.column)]
            )
        self.expect(TokKind.PUNCT, ";")
        return EffectDecl(name, ty, comb, pos)

    def update_rule(self) -> UpdateRule:
        pos = self.pos()
        target = self.ident("state field")
        self.expect(TokKind.PUNCT, "=")
        value = self.expression()
        self.expect(TokKind.PUNCT, ";")
        return UpdateRule(target, value, pos)

    def script_def(self) -> ScriptDef:
        pos = self.pos()
        self.expect(TokKind.KW, "run")
        name = self.ident("script name")
        self.expect(TokKind.PUNCT, "(")
        self.expect(TokKind.KW, "this")
        self.expect(TokKind.PUNCT, ":")
        cls = self.ident("class name")
        self.expect(TokKind.PUNCT, ")")
        body = self.block()
        return ScriptDef(name, cls, body, pos)

    def handler_def(self) -> HandlerDef:
        pos = self.pos()
        self.expect(TokKind.KW, "on")
        cls = self.ident("class name")
        self.expect(TokKind.KW, "when")
        self.expect(TokKind.PUNCT, "(")
        cond = self.expression()
        self.expect(TokKind.PUNCT, ")")
        body = self.block()
        return HandlerDef(cls, cond, body, pos)

    # -- types ---------------------------------------------------------------

    def type_expr(self) -> Type:
        t = self.cur
        if t.kind is TokKind.KW and t.lexeme in ("number", "int", "bool", "string"):
            self.i += 1
            return {"number": typesys.NUMBER, "int": typesys.INT,
                    "bool": typesys.BOOL, "string": typesys.STRING}[t.lexeme]
        if self.accept(TokKind.KW, "ref"):
            self.expect(TokKind.PUNCT, "<")
            cls = self.ident("class name")
            self.expect(TokKind.PUNCT, ">")
            return typesys.ref(cls)
        if self.accept(TokKind.KW, "set"):
            self.expect(TokKind.PUNCT, "<")
            elem = self.type_expr()
            self.expect(TokKind.PUNCT, ">")
            return typesys.set_of(elem)
        if t.kind is TokKind.IDENT:
            # Bare class name is shorthand for ref<Class> (paper-style `over unit w`).
            self.i += 1
            return typesys.ref(t.lexeme)
        self.fail("a type")
        raise AssertionError  # unreachable

    def ident(self, what: str) -> str:
        t = self.cur
        if t.kind is TokKind.IDENT:
            self.i += 1
            return t.lexeme
        self.fail(what)
        raise AssertionError

    # -- statements ------------------------------------------------------------

    def block(self) -> list[Stmt]:
        self.expect(TokKind.PUNCT, "{")
        out: list[Stmt] = []
        while not self.accept(TokKind.PUNCT, "}"):
            out.append(self.statement())
        return out

    def statement(self) -> Stmt:
        pos = self.pos()
        if self.accept(TokKind.KW, "let"):
            name = self.ident("variable name")
            self.expect(TokKind.PUNCT, "=")
            value = self.expression()
            self.expect(TokKind.PUNCT, ";")
            return Let(name, value, pos)
        if self.at(TokKind.KW, "if"):
            return self.if_stmt()
        if self.at(TokKind.KW, "accum"):
            return self.accum_stmt()
        if self.accept(TokKind.KW, "waitNextTick"):
            self.expect(TokKind.PUNCT, ";")
            return WaitNextTick(pos)
        if self.accept(TokKind.KW, "atomic"):
            return Atomic(self.block(), pos)
        if self.accept(TokKind.KW, "spawn"):
            cls = self.ident("class name")
            self.expect(TokKind.PUNCT, "{")
            fields: list[tuple[str, Expr]] = []
            if not self.at(TokKind.PUNCT, "}"):
                while True:
                    fname = self.ident("field name")
                    self.expect(TokKind.PUNCT, "=")
                    fields.append((fname, self.expression()))
                    if not self.accept(TokKind.PUNCT, ","):
                        break
            self.expect(TokKind.PUNCT, "}")
            self.expect(TokKind.PUNCT, ";")
            return Spawn(cls, fields, pos)
        if self.accept(TokKind.KW, "destroy"):
            target = None
            if not self.at(TokKind.PUNCT, ";"):
                target = self.expression()
            self.expect(TokKind.PUNCT, ";")
            return Destroy(target, pos)
        if self.accept(TokKind.KW, "restart"):
            self.expect(TokKind.PUNCT, ";")
            return Restart(pos)
        if self.at(TokKind.IDENT) or self.at(TokKind.KW, "this"):
            target = self.lvalue()
            if self.accept(TokKind.PUNCT, "<-"):
                value = self.expression()
                self.expect(TokKind.PUNCT, ";")
                return EffectAssign(target, value, "<-", pos)
            if self.accept(TokKind.PUNCT, "<="):
                value = self.expression()
                self.expect(TokKind.PUNCT, ";")
                return EffectAssign(target, value, "<=", pos)
            self.fail("'<-' or '<='")
        self.fail("a statement")
        raise AssertionError

    def lvalue(self) -> Name | FieldAccess:
        pos = self.pos()
        if self.accept(TokKind.KW, "this"):
            self.expect(TokKind.PUNCT, ".")
            return FieldAccess(Name("this", pos), self.ident("field name"), pos)
        base = Name(self.ident("identifier"), pos)
        if self.accept(TokKind.PUNCT, "."):
            return FieldAccess(base, self.ident("field name"), pos)
        return base

    def if_stmt(self) -> If:
        pos = self.pos()
        self.expect(TokKind.KW, "if")
        self.expect(TokKind.PUNCT, "(")
        cond = self.expression()
        self.expect(TokKind.PUNCT, ")")
        then = self.block()
        els: list[Stmt] = []
        if self.accept(TokKind.KW, "else"):
            els = [self.if_stmt()] if self.at(TokKind.KW, "if") else self.block()
        return If(cond, then, els, pos)

    def accum_stmt(self) -> AccumLoop:
        pos = self.pos()
        self.expect(TokKind.KW, "accum")
        acc_type = self.type_expr()
        acc_name = self.ident("accumulator name")
        self.expect(TokKind.KW, "with")
        comb_tok = self.cur
        comb_name = self.ident("combinator")
        comb = COMBINATOR_NAMES.get(comb_name)
        if comb is None:
            raise CompileError(
                self.sink.diagnostics
                + [Diagnostic("error", E_BAD_COMBINATOR, f"unknown combinator {comb_name!r}",
                              comb_tok.line, comb_tok.column)]
            )
        self.expect(TokKind.KW, "over")
        var_type = self.type_expr()
        var_name = self.ident("loop variable")
        self.expect(TokKind.KW, "from")
        source = self.expression()
        block1 = self.block()
        self.expect(TokKind.KW, "in")
        block2 = self.block()
        return AccumLoop(acc_name, acc_type, comb, var_name, var_type, source, block1, block2, pos)

    # -- expressions -------------------------------------------------------

    def expression(self) -> Expr:
        return self.or_expr()

    def or_expr(self) -> Expr:
        e = self.and_expr()
        while self.at(TokKind.PUNCT, "||"):
            pos = self.pos()
            self.i += 1
            e = Binary("||", e, self.and_expr(), pos)
        return e

    def and_expr(self) -> Expr:
        e = self.cmp_expr()
        while self.at(TokKind.PUNCT, "&&"):
            pos = self.pos()
            self.i += 1
            e = Binary("&&", e, self.cmp_expr(), pos)
        return e

    def cmp_expr(self) -> Expr:
        e = self.add_expr()
        for op in ("==", "!=", "<=", ">=", "<", ">"):
            if self.at(TokKind.PUNCT, op):
                pos = self.pos()
                self.i += 1
                return Binary(op, e, self.add_expr(), pos)
        return e

    def add_expr(self) -> Expr:
        e = self.mul_expr()
        while self.at(TokKind.PUNCT, "+") or self.at(TokKind.PUNCT, "-"):
            op = self.cur.lexeme
            pos = self.pos()
            self.i += 1
            e = Binary(op, e, self.mul_expr(), pos)
        return e

    def mul_expr(self) -> Expr:
        e = self.unary_expr()
        while self.at(TokKind.PUNCT, "*") or self.at(TokKind.PUNCT, "/"):
            op = self.cur.lexeme
            pos = self.pos()
            self.i += 1
            e = Binary(op, e, self.unary_expr(), pos)
        return e

    def unary_expr(self) -> Expr:
        pos = self.pos()
        if self.accept(TokKind.PUNCT, "-"):
            return Unary("-", self.unary_expr(), pos)
        if self.accept(TokKind.PUNCT, "!"):
            return Unary("!", self.unary_expr(), pos)
        return self.primary()

    def primary(self) -> Expr:
        t = self.cur
        pos = self.pos()
        if t.kind is TokKind.INT:
            self.i += 1
            return Literal(int(t.lexeme), typesys.INT, pos)
        if t.kind is TokKind.NUMBER:
            self.i += 1
            return Literal(float(t.lexeme), typesys.NUMBER, pos)
        if t.kind is TokKind.STRING:
            self.i += 1
            return Literal(string_value(t.lexeme), typesys.STRING, pos)
        if self.accept(TokKind.KW, "true"):
            return Literal(True, typesys.BOOL, pos)
        if self.accept(TokKind.KW, "false"):
            return Literal(False, typesys.BOOL, pos)
        if self.accept(TokKind.KW, "null"):
            return Literal(None, typesys.NULL, pos)
        if self.accept(TokKind.PUNCT, "("):
            e = self.expression()
            self.expect(TokKind.PUNCT, ")")
            return e
        if self.accept(TokKind.KW, "this"):
            self.expect(TokKind.PUNCT, ".")
            return FieldAccess(Name("this", pos), self.ident("field name"), pos)
        if t.kind is TokKind.IDENT:
            self.i += 1
            e: Expr = Name(t.lexeme, pos)
            while self.accept(TokKind.PUNCT, "."):
                e = FieldAccess(e, self.ident("field name"), pos)
            return e
        self.fail("an expression")
        raise AssertionError


def parse_unit(tokens: list[Token]) -> CompilationUnit:
    """Parse a token stream; raises CompileError carrying diagnostics."""
    return _Parser(tokens).unit()


def parse_source(source: str) -> CompilationUnit:
    return parse_unit(tokenize(source))


def parse_expression(source: str) -> Expr:
    """Parse a standalone expression (used for breakpoint conditions)."""
    p = _Parser(tokenize(source))
    e = p.expression()
    if not p.at(TokKind.EOF):
        p.fail("end of expression")
    return e
