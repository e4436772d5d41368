"""Expression trees in prefix form.

Trees are stored as a prefix-ordered arena of tokens; every descendant of a
node has a larger index than the node itself, which lets most traversals run
as a single reversed pass.  Skeletons carry a placeholder token ``c`` for
each free constant; concrete values live in a separate vector consumed in
left-to-right prefix order.  Literal constants (``c=<decimal>`` in the text
format) are only introduced by rewrites such as scaling substitution.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

BINARY_OPS: tuple[str, ...] = ("add", "mul", "sub", "div")
UNARY_OPS: tuple[str, ...] = (
    "inv",
    "pow2",
    "exp",
    "sin",
    "cos",
    "tan",
    "arcsin",
    "arccos",
    "arctan",
    "log",
)
# No trig or exponential node may sit below another one of these.
NESTING_RESTRICTED: frozenset[str] = frozenset(
    {"sin", "cos", "tan", "arcsin", "arccos", "arctan", "exp"}
)
CONST_SYMBOL = "c"
PAD, BOS, EOS = "PAD", "BOS", "EOS"

# Any intermediate beyond this magnitude is treated as an overflow; well
# inside double range so downstream sums stay finite.
OVERFLOW_LIMIT = 1e12

_VAR_RE = re.compile(r"^x_\{([ij]),(\d+)\}$")

VIOLATION_TOO_LONG = "too-long"
VIOLATION_TOO_MANY_OPS = "too-many-ops"
VIOLATION_DIMENSION = "dimension"
VIOLATION_NESTED = "nested-trig-exp"
VIOLATION_MISSING_XJ = "missing-xj"


class ExprError(Exception):
    """Base class for expression-level failures."""


class Malformed(ExprError):
    """Prefix sequence cannot be assembled into a tree."""


class UnknownToken(ExprError):
    """Symbol outside the vocabulary."""


class DomainError(ExprError):
    """Evaluation hit an argument outside an operator's domain."""


class Overflow(ExprError):
    """Evaluation produced a non-finite or out-of-range intermediate."""


class TokenKind(Enum):
    BINARY = "binary-op"
    UNARY = "unary-op"
    VARIABLE = "variable"
    CONST = "constant-placeholder"
    CONST_LIT = "constant-literal"
    SPECIAL = "special"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    symbol: str
    value: float | None = None

    @property
    def arity(self) -> int:
        if self.kind is TokenKind.BINARY:
            return 2
        if self.kind is TokenKind.UNARY:
            return 1
        return 0

    def text(self) -> str:
        if self.kind is TokenKind.CONST_LIT:
            return f"c={self.value!r}"
        return self.symbol


def var_symbol(role: str, component: int) -> str:
    if role not in ("i", "j") or component < 0:
        raise ValueError(f"bad variable spec ({role}, {component})")
    return f"x_{{{role},{component}}}"


def var_parts(symbol: str) -> tuple[str, int]:
    """Split a variable symbol into (role, component index)."""
    m = _VAR_RE.match(symbol)
    if m is None:
        raise UnknownToken(f"not a variable symbol: {symbol!r}")
    return m.group(1), int(m.group(2))


def token_from_symbol(text: str) -> Token:
    if text in BINARY_OPS:
        return Token(TokenKind.BINARY, text)
    if text in UNARY_OPS:
        return Token(TokenKind.UNARY, text)
    if text == CONST_SYMBOL:
        return Token(TokenKind.CONST, CONST_SYMBOL)
    if text in (PAD, BOS, EOS):
        return Token(TokenKind.SPECIAL, text)
    if _VAR_RE.match(text):
        return Token(TokenKind.VARIABLE, text)
    if text.startswith("c="):
        try:
            return Token(TokenKind.CONST_LIT, CONST_SYMBOL, float(text[2:]))
        except ValueError as exc:
            raise UnknownToken(f"bad constant literal {text!r}") from exc
    raise UnknownToken(f"unknown token {text!r}")


class ExprTree:
    """Immutable expression tree over a prefix-ordered token arena.

    The empty tree (no tokens) is a valid value and stands for an absent
    self-part; it evaluates to 0 and serializes to an empty sequence.
    """

    __slots__ = ("tokens", "children", "_program")

    def __init__(self, tokens: tuple[Token, ...], children: tuple[tuple[int, ...], ...]):
        self.tokens = tokens
        self.children = children
        self._program: list[tuple] | None = None

    @classmethod
    def empty(cls) -> "ExprTree":
        return cls((), ())

    @property
    def is_empty(self) -> bool:
        return not self.tokens

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ExprTree) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def __repr__(self) -> str:
        return f"ExprTree({' '.join(serialize_prefix(self)) or '<empty>'})"

    @property
    def n_placeholders(self) -> int:
        return sum(1 for t in self.tokens if t.kind is TokenKind.CONST)

    @property
    def variables(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for t in self.tokens:
            if t.kind is TokenKind.VARIABLE:
                seen.setdefault(t.symbol, None)
        return tuple(seen)

    def count(self, kind: TokenKind) -> int:
        return sum(1 for t in self.tokens if t.kind is kind)

    def depth(self) -> int:
        if self.is_empty:
            return 0
        depths = [1] * len(self.tokens)
        for i in range(len(self.tokens) - 1, -1, -1):
            if self.children[i]:
                depths[i] = 1 + max(depths[c] for c in self.children[i])
        return depths[0]


def parse_prefix(tokens: Sequence[str | Token]) -> ExprTree:
    """Assemble a prefix token sequence into a tree.

    Raises Malformed on arity underflow/overflow or trailing tokens and
    UnknownToken for symbols outside the vocabulary.
    """
    toks = tuple(
        t if isinstance(t, Token) else token_from_symbol(t) for t in tokens
    )
    if not toks:
        raise Malformed("empty token sequence")
    children: list[list[int]] = [[] for _ in toks]
    stack: list[int] = []  # nodes still missing children
    remaining: list[int] = [0] * len(toks)
    for idx, tok in enumerate(toks):
        if tok.kind is TokenKind.SPECIAL:
            raise Malformed(f"special token {tok.symbol} inside an expression")
        if idx > 0:
            if not stack:
                raise Malformed(f"trailing tokens starting at position {idx}")
            parent = stack[-1]
            children[parent].append(idx)
            remaining[parent] -= 1
            if remaining[parent] == 0:
                stack.pop()
        if tok.arity > 0:
            stack.append(idx)
            remaining[idx] = tok.arity
    if stack:
        raise Malformed("arity underflow: sequence ended before operands")
    return ExprTree(toks, tuple(tuple(c) for c in children))


def serialize_prefix(tree: ExprTree) -> list[str]:
    """Prefix traversal as text symbols; inverse of parse_prefix."""
    return [t.text() for t in tree.tokens]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _compile(tree: ExprTree) -> list[tuple]:
    """Flatten a tree into a postfix instruction list (cached per tree)."""
    if tree._program is not None:
        return tree._program
    order: list[int] = []
    stack = [0]
    while stack:
        i = stack.pop()
        order.append(i)
        stack.extend(tree.children[i])
    order.reverse()  # children now precede parents
    const_index = {}
    k = 0
    for i, tok in enumerate(tree.tokens):
        if tok.kind is TokenKind.CONST:
            const_index[i] = k
            k += 1
    prog: list[tuple] = []
    for i in order:
        tok = tree.tokens[i]
        if tok.kind is TokenKind.VARIABLE:
            prog.append(("var", tok.symbol))
        elif tok.kind is TokenKind.CONST:
            prog.append(("const", const_index[i]))
        elif tok.kind is TokenKind.CONST_LIT:
            prog.append(("lit", float(tok.value)))
        else:
            prog.append(("op", tok.symbol))
    tree._program = prog
    return prog


class EvalResult:
    """Values plus per-element domain/overflow failure masks."""

    __slots__ = ("values", "domain_bad", "overflow_bad")

    def __init__(self, values: np.ndarray, domain_bad: np.ndarray, overflow_bad: np.ndarray):
        self.values = values
        self.domain_bad = domain_bad
        self.overflow_bad = overflow_bad

    @property
    def ok(self) -> np.ndarray:
        return ~(self.domain_bad | self.overflow_bad)


def eval_batch(
    tree: ExprTree,
    binding: Mapping[str, np.ndarray | float],
    constants: Sequence[float] | np.ndarray = (),
    shape: tuple[int, ...] | None = None,
) -> EvalResult:
    """Evaluate elementwise over array bindings.

    ``constants[k]`` may be a scalar or an array broadcastable against the
    binding arrays (per-sample constants).  The empty tree evaluates to 0.
    """
    if shape is None:
        shape = ()
        for v in binding.values():
            shape = np.broadcast_shapes(shape, np.shape(v))
    if tree.is_empty:
        z = np.zeros(shape)
        return EvalResult(z, np.zeros(shape, bool), np.zeros(shape, bool))
    prog = _compile(tree)
    false = np.zeros(shape, dtype=bool)
    stack: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    with np.errstate(all="ignore"):
        for ins in prog:
            op = ins[0]
            if op == "var":
                try:
                    v = binding[ins[1]]
                except KeyError:
                    raise DomainError(f"unbound variable {ins[1]}") from None
                stack.append((np.broadcast_to(np.asarray(v, float), shape), false, false))
                continue
            if op == "const":
                idx = ins[1]
                if idx >= len(constants):
                    raise DomainError(
                        f"constants vector too short ({len(constants)} given)"
                    )
                stack.append(
                    (np.broadcast_to(np.asarray(constants[idx], float), shape), false, false)
                )
                continue
            if op == "lit":
                stack.append((np.broadcast_to(np.float64(ins[1]), shape), false, false))
                continue
            sym = ins[1]
            if sym in BINARY_OPS:
                b, domb, ovfb = stack.pop()
                a, doma, ovfa = stack.pop()
                dom = doma | domb
                if sym == "add":
                    val = a + b
                elif sym == "sub":
                    val = a - b
                elif sym == "mul":
                    val = a * b
                else:  # div
                    dom = dom | (b == 0)
                    val = a / np.where(b == 0, 1.0, b)
                ovf = ovfa | ovfb
            else:
                a, dom, ovf = stack.pop()
                if sym == "inv":
                    dom = dom | (a == 0)
                    val = 1.0 / np.where(a == 0, 1.0, a)
                elif sym == "pow2":
                    val = a * a
                elif sym == "exp":
                    val = np.exp(a)
                elif sym == "sin":
                    val = np.sin(a)
                elif sym == "cos":
                    val = np.cos(a)
                elif sym == "tan":
                    val = np.tan(a)
                elif sym == "arcsin":
                    dom = dom | (np.abs(a) > 1)
                    val = np.arcsin(np.clip(a, -1, 1))
                elif sym == "arccos":
                    dom = dom | (np.abs(a) > 1)
                    val = np.arccos(np.clip(a, -1, 1))
                elif sym == "arctan":
                    val = np.arctan(a)
                elif sym == "log":
                    dom = dom | (a <= 0)
                    val = np.log(np.where(a <= 0, 1.0, a))
                else:
                    raise UnknownToken(f"unknown operator {sym}")
            bad = dom | ovf
            ovf = ovf | (~bad & (~np.isfinite(val) | (np.abs(val) > OVERFLOW_LIMIT)))
            stack.append((np.asarray(val, float), dom, ovf))
    values, dom, ovf = stack.pop()
    return EvalResult(np.array(values, float), np.asarray(dom), np.asarray(ovf))


def evaluate(
    tree: ExprTree,
    binding: Mapping[str, float],
    constants: Sequence[float] = (),
) -> float:
    """Evaluate to a single finite real; raises DomainError / Overflow."""
    res = eval_batch(tree, binding, constants, shape=())
    if res.domain_bad:
        raise DomainError(f"domain violation evaluating {tree!r}")
    if res.overflow_bad:
        raise Overflow(f"non-finite or oversized value evaluating {tree!r}")
    return float(res.values)


# ---------------------------------------------------------------------------
# Validity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidityReport:
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def check_skeleton(tree: ExprTree, cfg, role: str) -> ValidityReport:
    """Check the structural rules for a generated skeleton.

    ``cfg`` needs attributes max_tokens, b_max, u_max and D.  ``role`` is
    "self" or "inter"; interaction skeletons must reference at least one
    x_j leaf.  The empty tree is a valid self skeleton.
    """
    if role not in ("self", "inter"):
        raise ValueError(f"role must be 'self' or 'inter', got {role!r}")
    violations: list[str] = []
    if tree.is_empty:
        if role == "inter":
            violations.append(VIOLATION_MISSING_XJ)
        return ValidityReport(tuple(violations))
    if len(tree) > cfg.max_tokens:
        violations.append(VIOLATION_TOO_LONG)
    if tree.count(TokenKind.BINARY) > cfg.b_max or tree.count(TokenKind.UNARY) > cfg.u_max:
        violations.append(VIOLATION_TOO_MANY_OPS)
    has_xj = False
    dim_ok = True
    for tok in tree.tokens:
        if tok.kind is TokenKind.VARIABLE:
            r, k = var_parts(tok.symbol)
            if k >= cfg.D:
                dim_ok = False
            if r == "j":
                has_xj = True
    if not dim_ok:
        violations.append(VIOLATION_DIMENSION)
    # nested trig/exp: walk with a flag for restricted ancestors
    nested = False
    stack: list[tuple[int, bool]] = [(0, False)]
    while stack:
        i, under = stack.pop()
        restricted = tree.tokens[i].symbol in NESTING_RESTRICTED
        if restricted and under:
            nested = True
            break
        for ch in tree.children[i]:
            stack.append((ch, under or restricted))
    if nested:
        violations.append(VIOLATION_NESTED)
    if role == "inter" and not has_xj:
        violations.append(VIOLATION_MISSING_XJ)
    return ValidityReport(tuple(violations))


def check_instance(
    tree: ExprTree,
    constants: Sequence[float],
    samples: Sequence[Mapping[str, float]],
    limit: float | None = None,
) -> bool:
    """True iff evaluation is finite and in-domain on every sample binding.

    ``limit`` optionally tightens the overflow bound below the evaluator's
    own threshold (generation uses headroom so borderline instances are
    rejected rather than admitted on a lucky draw).
    """
    if not samples:
        raise ValueError("check_instance needs at least one sample")
    if tree.is_empty:
        return True
    names = tree.variables
    binding = {
        name: np.array([s[name] for s in samples], float) for name in names
    }
    res = eval_batch(tree, binding, constants, shape=(len(samples),))
    ok = res.ok
    if limit is not None:
        ok = ok & (np.abs(res.values) <= limit)
    return bool(ok.all())


# ---------------------------------------------------------------------------
# Canonical and human-readable forms
# ---------------------------------------------------------------------------


def canonical_form(tree: ExprTree) -> str:
    """Deterministic structural key: commutative children sorted, all
    constants collapsed to the placeholder symbol."""
    if tree.is_empty:
        return ""
    canon: list[str] = [""] * len(tree.tokens)
    for i in range(len(tree.tokens) - 1, -1, -1):
        tok = tree.tokens[i]
        if tok.kind is TokenKind.VARIABLE:
            canon[i] = tok.symbol
        elif tok.kind in (TokenKind.CONST, TokenKind.CONST_LIT):
            canon[i] = CONST_SYMBOL
        elif tok.kind is TokenKind.UNARY:
            canon[i] = f"{tok.symbol}({canon[tree.children[i][0]]})"
        else:
            a, b = (canon[c] for c in tree.children[i])
            if tok.symbol in ("add", "mul") and b < a:
                a, b = b, a
            canon[i] = f"{tok.symbol}({a},{b})"
    return canon[0]


def canonicalize_tree(tree: ExprTree) -> ExprTree:
    """Normal form for commutative structure: maximal add/mul chains are
    flattened, operands sorted by canonical key, and rebuilt left-deep.

    The result computes the same function; generation emits this form so an
    equation family maps to one token sequence.
    """
    if tree.is_empty:
        return tree

    def rebuild(i: int) -> list[Token]:
        tok = tree.tokens[i]
        if tok.kind is TokenKind.BINARY and tok.symbol in ("add", "mul"):
            operands: list[list[Token]] = []
            stack = list(tree.children[i])[::-1]
            while stack:
                j = stack.pop()
                if tree.tokens[j].symbol == tok.symbol and tree.tokens[j].kind is TokenKind.BINARY:
                    stack.extend(reversed(tree.children[j]))
                else:
                    operands.append(rebuild(j))
            operands.sort(key=lambda toks: tuple(t.text() for t in toks))
            out = operands[0]
            for nxt in operands[1:]:
                out = [tok] + out + nxt
            return out
        kids = [rebuild(c) for c in tree.children[i]]
        return [tok] + [t for kid in kids for t in kid]

    return parse_prefix(rebuild(0))


_INFIX_BIN = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


def to_infix(tree: ExprTree, constants: Sequence[float] | None = None) -> str:
    """Render for humans; the prefix form stays authoritative."""
    if tree.is_empty:
        return "0"
    const_texts: list[str] = []
    k = 0
    for tok in tree.tokens:
        if tok.kind is TokenKind.CONST:
            const_texts.append(f"{constants[k]:.6g}" if constants is not None else "c")
            k += 1
    next_const = iter(const_texts)
    ph_text = {
        i: next(next_const)
        for i, tok in enumerate(tree.tokens)
        if tok.kind is TokenKind.CONST
    }
    texts: list[str] = [""] * len(tree.tokens)
    for i in range(len(tree.tokens) - 1, -1, -1):
        tok = tree.tokens[i]
        if tok.kind is TokenKind.VARIABLE:
            texts[i] = tok.symbol
        elif tok.kind is TokenKind.CONST:
            texts[i] = ph_text[i]
        elif tok.kind is TokenKind.CONST_LIT:
            texts[i] = f"{tok.value:.6g}"
        elif tok.kind is TokenKind.UNARY:
            arg = texts[tree.children[i][0]]
            if tok.symbol == "inv":
                texts[i] = f"1/({arg})"
            elif tok.symbol == "pow2":
                texts[i] = f"({arg})^2"
            else:
                texts[i] = f"{tok.symbol}({arg})"
        else:
            ca, cb = tree.children[i]
            a, b = texts[ca], texts[cb]
            ka, kb = tree.tokens[ca], tree.tokens[cb]
            if tok.symbol in ("mul", "div"):
                if ka.kind is TokenKind.BINARY and ka.symbol in ("add", "sub"):
                    a = f"({a})"
                if kb.kind is TokenKind.BINARY:
                    b = f"({b})"
            elif tok.symbol == "sub" and kb.kind is TokenKind.BINARY:
                b = f"({b})"
            texts[i] = f"{a} {_INFIX_BIN[tok.symbol]} {b}"
    return texts[0]


# ---------------------------------------------------------------------------
# Pair-level helpers
# ---------------------------------------------------------------------------


def predict_pair(pair, triplets) -> np.ndarray:
    """Predicted y for each triplet under an equation pair.

    ``pair`` needs f_self/f_inter trees plus self_constants/inter_constants;
    each triplet needs x_i, neighbors and weights.  Entries where evaluation
    fails are NaN.
    """
    n = len(triplets)
    out = np.full(n, np.nan)
    if n == 0:
        return out
    dim = len(np.atleast_1d(triplets[0].x_i))
    groups: dict[int, list[int]] = {}
    for idx, t in enumerate(triplets):
        groups.setdefault(len(t.neighbors), []).append(idx)
    for k, idxs in groups.items():
        xi = np.stack([np.atleast_1d(triplets[i].x_i) for i in idxs])
        bind_self = {var_symbol("i", d): xi[:, d] for d in range(dim)}
        rs = eval_batch(pair.f_self, bind_self, pair.self_constants, shape=(len(idxs),))
        total = rs.values.copy()
        ok = rs.ok.copy()
        if k > 0:
            nb = np.stack([np.asarray(triplets[i].neighbors, float) for i in idxs])
            w = np.stack([np.asarray(triplets[i].weights, float) for i in idxs])
            bind = {var_symbol("i", d): np.repeat(xi[:, d], k) for d in range(dim)}
            bind.update(
                {var_symbol("j", d): nb[:, :, d].reshape(-1) for d in range(dim)}
            )
            ri = eval_batch(
                pair.f_inter, bind, pair.inter_constants, shape=(len(idxs) * k,)
            )
            ok &= ri.ok.reshape(len(idxs), k).all(axis=1)
            total = total + (w * ri.values.reshape(len(idxs), k)).sum(axis=1)
        ok &= np.isfinite(total)
        out[np.asarray(idxs)] = np.where(ok, total, np.nan)
    return out


def simplify_coefficients(pair, threshold: float = 1e-4, obs=None):
    """Zero near-zero fitted constants and prune the dead terms.

    Constants with magnitude below the threshold are zeroed one at a time
    (smallest first); a pruning step is kept only when R^2 on ``obs``
    degrades by less than 1e-4.
    """
    if obs is None:
        raise ValueError("simplify_coefficients needs an observation set")
    triplets = list(obs.triplets)
    y = np.array([np.atleast_1d(t.y_i)[0] for t in triplets])
    if len(y) < 2 or np.allclose(y, y[0]):
        return pair
    ss_tot = float(((y - y.mean()) ** 2).sum())

    def r2_of(p) -> float:
        pred = predict_pair(p, triplets)
        if not np.isfinite(pred).all():
            return -np.inf
        return 1.0 - float(((y - pred) ** 2).sum()) / ss_tot

    best = pair
    best_r2 = r2_of(pair)
    changed = True
    rejected: set[str] = set()
    while changed:
        changed = False
        n_self = len(best.self_constants)
        consts = list(best.self_constants) + list(best.inter_constants)
        for idx in sorted(range(len(consts)), key=lambda i: abs(consts[i])):
            if abs(consts[idx]) >= threshold:
                break
            key = f"{idx}:{consts[idx]!r}:{n_self}"
            if key in rejected:
                continue
            try:
                cand = _prune_constant(best, idx, n_self)
            except ValueError:
                rejected.add(key)
                continue
            r2 = r2_of(cand)
            if r2 >= best_r2 - 1e-4:
                best = cand
                best_r2 = max(best_r2, r2)
                changed = True
                break
            rejected.add(key)
    return best


def _prune_constant(pair, flat_idx: int, n_self: int):
    if flat_idx < n_self:
        tree, kept = _zero_placeholder(pair.f_self, flat_idx)
        return dataclasses.replace(
            pair,
            f_self=tree,
            self_constants=tuple(
                c for j, c in enumerate(pair.self_constants) if j in kept
            ),
        )
    tree, kept = _zero_placeholder(pair.f_inter, flat_idx - n_self)
    return dataclasses.replace(
        pair,
        f_inter=tree,
        inter_constants=tuple(
            c for j, c in enumerate(pair.inter_constants) if j in kept
        ),
    )


_ZERO = Token(TokenKind.CONST_LIT, CONST_SYMBOL, 0.0)
_ONE = Token(TokenKind.CONST_LIT, CONST_SYMBOL, 1.0)


def _zero_placeholder(tree: ExprTree, placeholder_idx: int) -> tuple[ExprTree, set[int]]:
    """Replace one placeholder with literal 0 and fold dead branches.

    Returns the pruned tree plus the surviving original placeholder indices
    (folding a branch may take other placeholders with it).  A tree that
    folds to plain 0 comes back empty.
    """
    ph_pos: dict[int, int] = {}
    k = 0
    for i, tok in enumerate(tree.tokens):
        if tok.kind is TokenKind.CONST:
            ph_pos[i] = k
            k += 1

    def is_zero(node) -> bool:
        tok, kids, _ = node
        return tok.kind is TokenKind.CONST_LIT and tok.value == 0.0 and not kids

    def fold(i: int):
        tok = tree.tokens[i]
        if tok.kind is TokenKind.CONST and ph_pos[i] == placeholder_idx:
            return (_ZERO, [], None)
        kids = [fold(c) for c in tree.children[i]]
        if tok.kind is TokenKind.UNARY and is_zero(kids[0]):
            if tok.symbol in ("pow2", "sin", "tan", "arcsin", "arctan"):
                return (_ZERO, [], None)
            if tok.symbol == "exp":
                return (_ONE, [], None)
        if tok.kind is TokenKind.BINARY:
            a, b = kids
            if tok.symbol == "mul" and (is_zero(a) or is_zero(b)):
                return (_ZERO, [], None)
            if tok.symbol == "div" and is_zero(a):
                return (_ZERO, [], None)
            if tok.symbol == "add":
                if is_zero(a):
                    return b
                if is_zero(b):
                    return a
            if tok.symbol == "sub" and is_zero(b):
                return a
        return (tok, kids, ph_pos.get(i))

    root = fold(0)
    tokens: list[Token] = []
    kept: set[int] = set()

    def collect(node):
        tok, kids, orig = node
        tokens.append(tok)
        if orig is not None:
            kept.add(orig)
        for child in kids:
            collect(child)

    collect(root)
    if is_zero(root):
        return ExprTree.empty(), kept
    return parse_prefix(tokens), kept
