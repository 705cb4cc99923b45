"""Scalar expression language used in system files.

Grammar (``^`` is right-associative and binds tighter than unary minus,
so ``-2^2`` is ``-4`` and ``2^-1`` is ``0.5``)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := ('-' | '+') factor | power
    power  := atom ('^' factor)?
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Expressions evaluate elementwise on numpy arrays.  They can also be lowered
to a flat postfix program (see :func:`compile_programs`) which the compiled
kernels interpret without touching Python objects.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import ParseError

FUNCTIONS = ("exp", "ln", "sin", "cos", "sqrt", "tanh", "abs")
_NUMPY_FUNCS = {
    "exp": np.exp,
    "ln": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
}

# Opcodes shared with the kernels; keep in sync with kernels/_core.pyx.
OP_CONST, OP_VAR, OP_NEG, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW = range(8)
OP_FUNC = {name: 8 + i for i, name in enumerate(FUNCTIONS)}
_BINARY_OPCODES = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}

_STATE_NAME = re.compile(r"x([1-9][0-9]*)\Z")


# --- AST ---------------------------------------------------------------------


class Expr:
    __slots__ = ()

    def evaluate(self, env: Mapping[str, object]):
        with np.errstate(all="ignore"):
            return _eval(self, env)

    def variables(self) -> set[str]:
        out: set[str] = set()
        _collect_vars(self, out)
        return out

    def __str__(self):
        return to_source(self)


@dataclass(frozen=True, slots=True)
class Const(Expr):
    value: float


@dataclass(frozen=True, slots=True)
class Var(Expr):
    name: str


@dataclass(frozen=True, slots=True)
class Neg(Expr):
    operand: Expr


@dataclass(frozen=True, slots=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True, slots=True)
class Call(Expr):
    func: str
    arg: Expr


def _eval(node, env):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, BinOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        if node.op == "+":
            return np.add(a, b)
        if node.op == "-":
            return np.subtract(a, b)
        if node.op == "*":
            return np.multiply(a, b)
        if node.op == "/":
            return np.divide(np.asarray(a, dtype=float), b)
        return np.power(np.asarray(a, dtype=float), b)
    return _NUMPY_FUNCS[node.func](np.asarray(_eval(node.arg, env), dtype=float))


def _collect_vars(node, out):
    if isinstance(node, Var):
        out.add(node.name)
    elif isinstance(node, Neg):
        _collect_vars(node.operand, out)
    elif isinstance(node, BinOp):
        _collect_vars(node.left, out)
        _collect_vars(node.right, out)
    elif isinstance(node, Call):
        _collect_vars(node.arg, out)


# --- printing ----------------------------------------------------------------


def to_source(node: Expr) -> str:
    """Fully parenthesized source text; parses back to an equivalent tree."""
    if isinstance(node, Const):
        text = repr(float(node.value))
        return f"({text})" if node.value < 0 or text.startswith("-") else text
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_source(node.operand)})"
    if isinstance(node, BinOp):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    return f"{node.func}({to_source(node.arg)})"


# --- lexing and parsing -------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True, slots=True)
class Token:
    kind: str
    text: str
    offset: int


def tokenize(source: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", _byte_offset(source, pos))
        if m.lastgroup != "ws":
            tokens.append(Token(m.lastgroup, m.group(), _byte_offset(source, pos)))
        pos = m.end()
    tokens.append(Token("end", "", _byte_offset(source, len(source))))
    return tokens


def _byte_offset(source, index):
    return len(source[:index].encode("utf-8"))


def is_state_name(name: str) -> bool:
    return _STATE_NAME.match(name) is not None


def default_variable_check(name: str) -> bool:
    return name in ("t", "n") or is_state_name(name)


class _Parser:
    def __init__(self, source, allowed, constants):
        self.tokens = tokenize(source)
        self.pos = 0
        self.allowed = allowed
        self.constants = constants

    @property
    def tok(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text):
        if self.tok.text != text or self.tok.kind == "end":
            raise ParseError(f"unexpected {self._describe(self.tok)}", self.tok.offset, repr(text))
        return self.advance()

    @staticmethod
    def _describe(tok):
        return "end of input" if tok.kind == "end" else f"token {tok.text!r}"

    def parse(self):
        node = self.expr()
        if self.tok.kind != "end":
            raise ParseError(f"unexpected {self._describe(self.tok)}", self.tok.offset, "operator or end of input")
        return node

    def expr(self):
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            node = BinOp(op, node, self.factor())
        return node

    def factor(self):
        if self.tok.kind == "op" and self.tok.text == "-":
            self.advance()
            return Neg(self.factor())
        if self.tok.kind == "op" and self.tok.text == "+":
            self.advance()
            return self.factor()
        return self.power()

    def power(self):
        node = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.advance()
            node = BinOp("^", node, self.factor())
        return node

    def atom(self):
        tok = self.tok
        if tok.kind == "number":
            self.advance()
            return Const(float(tok.text))
        if tok.kind == "name":
            self.advance()
            if tok.text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(tok.text, arg)
            if self.tok.kind == "op" and self.tok.text == "(":
                raise ParseError(f"unknown function {tok.text!r}", tok.offset, "one of " + ", ".join(FUNCTIONS))
            if tok.text in self.constants:
                return Const(float(self.constants[tok.text]))
            if not self.allowed(tok.text):
                raise ParseError(f"unknown identifier {tok.text!r}", tok.offset, "a declared variable")
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        raise ParseError(f"unexpected {self._describe(tok)}", tok.offset, "number, name or '('")


def parse_expr(
    source: str,
    variables: Iterable[str] | None = None,
    constants: Mapping[str, float] | None = None,
) -> Expr:
    """Parse ``source`` into an expression tree.

    ``variables`` restricts the admissible free names (default: ``t``, ``n``
    and state names ``x1``, ``x2``, ...).  Names in ``constants`` are replaced
    by their numeric value at parse time.
    """
    if variables is None:
        allowed = default_variable_check
    else:
        names = frozenset(variables)
        allowed = names.__contains__
    return _Parser(source, allowed, dict(constants or {})).parse()


# --- bytecode ----------------------------------------------------------------


@dataclass(frozen=True)
class Program:
    """A batch of postfix programs sharing one constant pool.

    ``code`` holds ``(opcode, argument)`` pairs, ``offsets[p]:offsets[p+1]``
    delimits program ``p``.  Variable slot 0 is the time variable, slots
    ``1..dim`` the state components.
    """

    code: np.ndarray
    offsets: np.ndarray
    consts: np.ndarray
    n_vars: int
    max_stack: int

    @property
    def count(self):
        return len(self.offsets) - 1


def _emit(node, slots, code, consts):
    """Append postfix code for ``node``; returns the stack depth it needs."""
    if isinstance(node, Const):
        consts.append(float(node.value))
        code.append((OP_CONST, len(consts) - 1))
        return 1
    if isinstance(node, Var):
        code.append((OP_VAR, slots[node.name]))
        return 1
    if isinstance(node, Neg):
        depth = _emit(node.operand, slots, code, consts)
        code.append((OP_NEG, 0))
        return depth
    if isinstance(node, BinOp):
        left = _emit(node.left, slots, code, consts)
        right = _emit(node.right, slots, code, consts)
        code.append((_BINARY_OPCODES[node.op], 0))
        return max(left, right + 1)
    depth = _emit(node.arg, slots, code, consts)
    code.append((OP_FUNC[node.func], 0))
    return depth


def compile_programs(exprs: Sequence[Expr], time_name: str, dim: int) -> Program:
    slots = {"t": 0, "n": 0}
    slots[time_name] = 0
    for i in range(dim):
        slots[f"x{i + 1}"] = i + 1
    code: list[tuple[int, int]] = []
    consts: list[float] = []
    offsets = [0]
    max_stack = 1
    for e in exprs:
        unknown = e.variables() - slots.keys()
        if unknown:
            raise ParseError(f"variable {sorted(unknown)[0]!r} outside the state dimension", 0)
        max_stack = max(max_stack, _emit(e, slots, code, consts))
        offsets.append(len(code))
    code_arr = np.asarray(code, dtype=np.int32).reshape(-1, 2)
    return Program(
        code=np.ascontiguousarray(code_arr),
        offsets=np.asarray(offsets, dtype=np.int64),
        consts=np.asarray(consts if consts else [0.0], dtype=np.float64),
        n_vars=dim + 1,
        max_stack=max_stack,
    )
