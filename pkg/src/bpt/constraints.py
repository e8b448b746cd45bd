"""Symbolic ground constraints over E/C/U atoms: parsing, rendering, evaluation.

Grammar (case-insensitive connectives, case-sensitive predicates)::

    expr := atom | "(" ("and"|"or") expr expr+ ")"
               | "(" "not" expr ")"
               | "(" "implies" expr expr ")"
    atom := "(" ("E"|"C"|"U") INT QSTRING ")"
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Union

from .corpus import TruthLabel

PREDICATE_LABELS = {
    "E": TruthLabel.ENTAILED,
    "C": TruthLabel.CONTRADICTED,
    "U": TruthLabel.UNKNOWN,
}

Assignment = Mapping[tuple[int, str], TruthLabel]


class ConstraintError(Exception):
    """Syntax error (with byte offset) or evaluation failure."""


@dataclass(frozen=True)
class Atom:
    predicate: str  # "E" | "C" | "U"
    breakpoint_index: int
    proposition_text: str


@dataclass(frozen=True)
class And:
    children: tuple["ConstraintExpr", ...]


@dataclass(frozen=True)
class Or:
    children: tuple["ConstraintExpr", ...]


@dataclass(frozen=True)
class Not:
    child: "ConstraintExpr"


@dataclass(frozen=True)
class Implies:
    lhs: "ConstraintExpr"
    rhs: "ConstraintExpr"


ConstraintExpr = Union[Atom, And, Or, Not, Implies]

_CONNECTIVES = {"and", "or", "not", "implies"}


class _Scanner:
    def __init__(self, src: str):
        self.src = src
        self.pos = 0

    def error(self, msg: str, at: int | None = None) -> ConstraintError:
        return ConstraintError(f"byte {self.pos if at is None else at}: {msg}")

    def skip_ws(self) -> None:
        while self.pos < len(self.src) and self.src[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        return self.src[self.pos] if self.pos < len(self.src) else ""

    def expect(self, ch: str) -> None:
        self.skip_ws()
        if self.peek() != ch:
            raise self.error(f"expected {ch!r}, found {self.peek()!r}")
        self.pos += 1

    def symbol(self) -> tuple[str, int]:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.src) and not self.src[self.pos].isspace() \
                and self.src[self.pos] not in '()"':
            self.pos += 1
        if self.pos == start:
            raise self.error("expected a symbol")
        return self.src[start : self.pos], start

    def integer(self) -> int:
        sym, start = self.symbol()
        try:
            return int(sym)
        except ValueError:
            raise self.error(f"expected an integer, found {sym!r}", at=start) from None

    def qstring(self) -> str:
        self.skip_ws()
        if self.peek() != '"':
            raise self.error(f'expected \'"\', found {self.peek()!r}')
        self.pos += 1
        out: list[str] = []
        while True:
            if self.pos >= len(self.src):
                raise self.error("unterminated string")
            ch = self.src[self.pos]
            self.pos += 1
            if ch == '"':
                return "".join(out)
            if ch == "\\":
                if self.pos >= len(self.src):
                    raise self.error("dangling escape")
                esc = self.src[self.pos]
                self.pos += 1
                mapped = {'"': '"', "\\": "\\", "n": "\n", "t": "\t"}.get(esc)
                if mapped is None:
                    raise self.error(f"unsupported escape \\{esc}", at=self.pos - 1)
                out.append(mapped)
            else:
                out.append(ch)


def _parse_expr(sc: _Scanner) -> ConstraintExpr:
    sc.skip_ws()
    sc.expect("(")
    head, head_at = sc.symbol()
    lowered = head.lower()
    if head in PREDICATE_LABELS:
        index = sc.integer()
        if index < 1:
            raise sc.error(f"breakpoint index must be >= 1, got {index}", at=head_at)
        text = sc.qstring()
        sc.expect(")")
        return Atom(predicate=head, breakpoint_index=index, proposition_text=text)
    if lowered in PREDICATE_LABELS and lowered not in _CONNECTIVES:
        raise sc.error(f"unknown predicate {head!r} (predicates are case-sensitive)", at=head_at)
    if lowered not in _CONNECTIVES:
        raise sc.error(f"unknown connective or predicate {head!r}", at=head_at)
    children: list[ConstraintExpr] = []
    while True:
        sc.skip_ws()
        if sc.peek() == ")":
            sc.pos += 1
            break
        if sc.peek() == "":
            raise sc.error("unterminated expression")
        children.append(_parse_expr(sc))
    if lowered == "not":
        if len(children) != 1:
            raise sc.error(f"not takes 1 argument, got {len(children)}", at=head_at)
        return Not(children[0])
    if lowered == "implies":
        if len(children) != 2:
            raise sc.error(f"implies takes 2 arguments, got {len(children)}", at=head_at)
        return Implies(children[0], children[1])
    if len(children) < 2:
        raise sc.error(f"{lowered} takes at least 2 arguments, got {len(children)}", at=head_at)
    return And(tuple(children)) if lowered == "and" else Or(tuple(children))


def parse_constraint(src: str) -> ConstraintExpr:
    sc = _Scanner(src)
    expr = _parse_expr(sc)
    sc.skip_ws()
    if sc.pos != len(sc.src):
        raise sc.error("trailing input after expression")
    return expr


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def render_constraint(c: ConstraintExpr) -> str:
    """Canonical s-expression: lowercase connectives, single spaces."""
    if isinstance(c, Atom):
        return f'({c.predicate} {c.breakpoint_index} "{_escape(c.proposition_text)}")'
    if isinstance(c, Not):
        return f"(not {render_constraint(c.child)})"
    if isinstance(c, Implies):
        return f"(implies {render_constraint(c.lhs)} {render_constraint(c.rhs)})"
    name = "and" if isinstance(c, And) else "or"
    inner = " ".join(render_constraint(ch) for ch in c.children)
    return f"({name} {inner})"


def atoms_of(c: ConstraintExpr) -> Iterator[Atom]:
    if isinstance(c, Atom):
        yield c
    elif isinstance(c, Not):
        yield from atoms_of(c.child)
    elif isinstance(c, Implies):
        yield from atoms_of(c.lhs)
        yield from atoms_of(c.rhs)
    else:
        for ch in c.children:
            yield from atoms_of(ch)


def _atom_value(atom: Atom, a: Assignment) -> bool:
    key = (atom.breakpoint_index, atom.proposition_text)
    if key not in a:
        raise ConstraintError(
            f"assignment does not cover atom ({atom.predicate} {atom.breakpoint_index} "
            f"{atom.proposition_text!r})"
        )
    return a[key] == PREDICATE_LABELS[atom.predicate]


def eval_constraint(c: ConstraintExpr, a: Assignment) -> bool:
    """Two-valued semantics with short-circuiting; Implies(x,y) == (not x) or y."""
    if isinstance(c, Atom):
        return _atom_value(c, a)
    if isinstance(c, Not):
        return not eval_constraint(c.child, a)
    if isinstance(c, Implies):
        return (not eval_constraint(c.lhs, a)) or eval_constraint(c.rhs, a)
    if isinstance(c, And):
        return all(eval_constraint(ch, a) for ch in c.children)
    return any(eval_constraint(ch, a) for ch in c.children)


def brute_force_eval(c: ConstraintExpr, a: Assignment) -> bool:
    """Oracle evaluator: arithmetic on {0,1}, every child always evaluated."""

    def walk(node: ConstraintExpr) -> int:
        if isinstance(node, Atom):
            return 1 if _atom_value(node, a) else 0
        if isinstance(node, Not):
            return 1 - walk(node.child)
        if isinstance(node, Implies):
            values = [walk(node.lhs), walk(node.rhs)]
            return max(1 - values[0], values[1])
        values = [walk(ch) for ch in node.children]
        if isinstance(node, And):
            return min(values)
        return max(values)

    return walk(c) == 1


def story_violations(e, a: Assignment) -> tuple[int, int]:
    """(number of violated constraints, total constraints) for one example."""
    violated = 0
    for src in e.constraints:
        if not eval_constraint(parse_constraint(src), a):
            violated += 1
    return violated, len(e.constraints)
