"""Lexer for `.sgl` sources.

Tokens record line/column of their first character plus the leading trivia
(whitespace and `//` comments) so that concatenating trivia and lexemes
reproduces the source exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .diagnostics import CompileError, Diagnostic, E_LEX


class TokKind(Enum):
    KW = "kw"
    IDENT = "ident"
    INT = "int"
    NUMBER = "number"
    STRING = "string"
    PUNCT = "punct"
    EOF = "eof"


KEYWORDS = frozenset(
    """class state effects update constraints run on when let if else
    accum with over from in waitNextTick atomic spawn destroy restart
    true false null number int bool string ref set this""".split()
)

# Longest-match first.
PUNCTUATION = (
    "<-", "<=", ">=", "==", "!=", "&&", "||",
    "{", "}", "(", ")", ";", ":", ",", ".",
    "<", ">", "=", "+", "-", "*", "/", "!",
)


@dataclass
class Token:
    kind: TokKind
    lexeme: str
    line: int
    column: int
    leading: str = field(default="", repr=False)  # trivia preceding this token

    def is_kw(self, word: str) -> bool:
        return self.kind is TokKind.KW and self.lexeme == word

    def is_punct(self, p: str) -> bool:
        return self.kind is TokKind.PUNCT and self.lexeme == p

    def __str__(self) -> str:
        return f"{self.kind.value}({self.lexeme})@{self.line}:{self.column}"


def tokenize(source: str) -> list[Token]:
    """Lex `source` into a token stream ending with an EOF token.

    Raises CompileError with an E_LEX diagnostic on any character outside
    the token alphabet.
    """
    tokens: list[Token] = []
    i = 0
    line, col = 1, 1
    n = len(source)

    def advance(text: str) -> None:
        nonlocal line, col
        for ch in text:
            if ch == "\n":
                line += 1
                col = 1
            else:
                col += 1

    while True:
        # Trivia: whitespace and // comments.
        start = i
        while i < n:
            ch = source[i]
            if ch in " \t\r\n":
                i += 1
            elif ch == "/" and i + 1 < n and source[i + 1] == "/":
                while i < n and source[i] != "\n":
                    i += 1
            else:
                break
        leading = source[start:i]
        advance(leading)

        if i >= n:
            tokens.append(Token(TokKind.EOF, "", line, col, leading))
            return tokens

        tline, tcol = line, col
        ch = source[i]

        if ch.isdigit():
            j = i
            while j < n and source[j].isdigit():
                j += 1
            is_number = False
            if j < n and source[j] == "." and j + 1 < n and source[j + 1].isdigit():
                is_number = True
                j += 1
                while j < n and source[j].isdigit():
                    j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    is_number = True
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            lexeme = source[i:j]
            kind = TokKind.NUMBER if is_number else TokKind.INT
            tokens.append(Token(kind, lexeme, tline, tcol, leading))
            advance(lexeme)
            i = j
            continue

        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            lexeme = source[i:j]
            kind = TokKind.KW if lexeme in KEYWORDS else TokKind.IDENT
            tokens.append(Token(kind, lexeme, tline, tcol, leading))
            advance(lexeme)
            i = j
            continue

        if ch == '"':
            j = i + 1
            while j < n:
                if source[j] == "\\" and j + 1 < n:
                    j += 2
                    continue
                if source[j] == '"':
                    j += 1
                    break
                if source[j] == "\n":
                    break
                j += 1
            else:
                j = n
            lexeme = source[i:j]
            if not (len(lexeme) >= 2 and lexeme.endswith('"') and not lexeme.endswith('\\"')):
                raise CompileError([Diagnostic("error", E_LEX, "unterminated string literal", tline, tcol)])
            tokens.append(Token(TokKind.STRING, lexeme, tline, tcol, leading))
            advance(lexeme)
            i = j
            continue

        for p in PUNCTUATION:
            if source.startswith(p, i):
                tokens.append(Token(TokKind.PUNCT, p, tline, tcol, leading))
                advance(p)
                i += len(p)
                break
        else:
            raise CompileError(
                [Diagnostic("error", E_LEX, f"unexpected character {ch!r}", tline, tcol)]
            )


def string_value(lexeme: str) -> str:
    """Decode a string literal lexeme (with surrounding quotes) to its value."""
    body = lexeme[1:-1]
    out: list[str] = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\" and i + 1 < len(body):
            esc = body[i + 1]
            out.append({"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(esc, esc))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def escape_string(value: str) -> str:
    """Encode a string value as a quoted literal."""
    body = value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t")
    return f'"{body}"'
