"""Random equation-pair generation and observation synthesis.

A pair couples a self skeleton (a node's own evolution, possibly absent)
with an interaction skeleton (pairwise neighbor coupling, always containing
at least one x_j).  Generation draws operator counts uniformly, samples a
tree shape uniformly over all shapes with that many binary nodes, fills
operators and leaves from the configured distributions, grafts unary
operators onto shallow subtrees, and keeps only skeletons that survive the
structural and numeric checks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import expr
from .expr import ExprTree, Token, TokenKind
from .sampling import ObservationSet, Triplet
from .topology import Adjacency

DEFAULT_P_BINARY: dict[str, float] = {"add": 0.375, "mul": 0.375, "sub": 0.125, "div": 0.125}
# Listed trig probabilities are group totals, split uniformly inside each group.
DEFAULT_P_UNARY: dict[str, float] = {
    "inv": 0.5,
    "pow2": 0.3,
    "exp": 0.1,
    "sin": 0.04 / 3,
    "cos": 0.04 / 3,
    "tan": 0.04 / 3,
    "arcsin": 0.04 / 3,
    "arccos": 0.04 / 3,
    "arctan": 0.04 / 3,
    "log": 0.02,
}


class RetryExhausted(Exception):
    """Generation kept failing the validity rules."""


class DegenerateEquation(Exception):
    """Too many sampling draws failed while synthesizing observations."""


@dataclass(frozen=True)
class GenConfig:
    """Knobs for corpus generation."""

    D: int = 3
    b_max: int = 5
    u_max: int = 5
    c_min: float = -20.0
    c_max: float = 20.0
    d_depth: int = 8
    p_binary: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_P_BINARY))
    p_unary: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_P_UNARY))
    max_tokens: int = 60
    p_empty_self: float = 0.1
    p_const_leaf: float = 0.5
    n_check_samples: int = 50

    def __post_init__(self):
        for name, table, allowed in (
            ("p_binary", self.p_binary, expr.BINARY_OPS),
            ("p_unary", self.p_unary, expr.UNARY_OPS),
        ):
            if set(table) - set(allowed):
                raise ValueError(f"{name} has unknown operators: {set(table) - set(allowed)}")
            total = sum(table.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"{name} sums to {total}, expected 1")
        if self.D < 1 or self.b_max < 0 or self.u_max < 0:
            raise ValueError("bad operator/dimension bounds")
        if self.c_min >= self.c_max:
            raise ValueError("empty constant range")


@dataclass(frozen=True)
class EquationPair:
    """Coupled self/interaction skeletons with their constant vectors."""

    f_self: ExprTree
    f_inter: ExprTree
    self_constants: tuple[float, ...]
    inter_constants: tuple[float, ...]
    dim: int
    provenance: tuple[int, ...] = ()  # lineage of the generating stream

    def __post_init__(self):
        if len(self.self_constants) != self.f_self.n_placeholders:
            raise ValueError("self constants do not match placeholder count")
        if len(self.inter_constants) != self.f_inter.n_placeholders:
            raise ValueError("inter constants do not match placeholder count")
        if not any(
            t.kind is TokenKind.VARIABLE and expr.var_parts(t.symbol)[0] == "j"
            for t in self.f_inter.tokens
        ):
            raise ValueError("interaction skeleton must reference x_j")
        for tree in (self.f_self, self.f_inter):
            for name in tree.variables:
                if expr.var_parts(name)[1] >= self.dim:
                    raise ValueError(f"variable {name} outside dim={self.dim}")

    @classmethod
    def from_prefix(
        cls,
        f_self: str | Sequence[str],
        f_inter: str | Sequence[str],
        self_constants: Sequence[float] = (),
        inter_constants: Sequence[float] = (),
        dim: int = 1,
        provenance: Sequence[int] = (),
    ) -> "EquationPair":
        def tree(src) -> ExprTree:
            toks = src.split() if isinstance(src, str) else list(src)
            return expr.parse_prefix(toks) if toks else ExprTree.empty()

        return cls(
            tree(f_self),
            tree(f_inter),
            tuple(float(c) for c in self_constants),
            tuple(float(c) for c in inter_constants),
            dim,
            tuple(int(p) for p in provenance),
        )

    @property
    def total_tokens(self) -> int:
        return len(self.f_self) + len(self.f_inter)

    def canonical(self) -> tuple[str, str]:
        return expr.canonical_form(self.f_self), expr.canonical_form(self.f_inter)


@dataclass(frozen=True)
class Corpus:
    pairs: tuple[EquationPair, ...]
    config: GenConfig
    seed: int

    def __len__(self) -> int:
        return len(self.pairs)


# ---------------------------------------------------------------------------
# Skeleton sampling
# ---------------------------------------------------------------------------


_OP_TABLES: dict[int, tuple] = {}


def _op_table(table: Mapping[str, float]) -> tuple:
    key = id(table)
    cached = _OP_TABLES.get(key)
    if cached is None:
        names = tuple(table)
        probs = np.array([table[n] for n in names], float)
        cached = (names, np.cumsum(probs / probs.sum()))
        _OP_TABLES[key] = cached
    return cached


def draw_binary_op(cfg: GenConfig, rng: np.random.Generator) -> str:
    """One draw from the binary-operator distribution."""
    names, cum = _op_table(cfg.p_binary)
    return names[int(np.searchsorted(cum, rng.random(), side="right"))]


def draw_unary_op(cfg: GenConfig, rng: np.random.Generator) -> str:
    """One draw from the unary-operator distribution."""
    names, cum = _op_table(cfg.p_unary)
    return names[int(np.searchsorted(cum, rng.random(), side="right"))]


class _Node:
    __slots__ = ("token", "children")

    def __init__(self, token: Token | None, children: list):
        self.token = token
        self.children = children

    def height(self) -> int:
        if not self.children:
            return 1
        return 1 + max(c.height() for c in self.children)

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    def tokens(self) -> list[Token]:
        return [n.token for n in self.walk()]


_CATALAN: list[int] = [1]
_SPLIT_CDF: dict[int, np.ndarray] = {}


def _catalan(n: int) -> int:
    while len(_CATALAN) <= n:
        m = len(_CATALAN)
        _CATALAN.append(sum(_CATALAN[k] * _CATALAN[m - 1 - k] for k in range(m)))
    return _CATALAN[n]


def _split_cdf(b: int) -> np.ndarray:
    cdf = _SPLIT_CDF.get(b)
    if cdf is None:
        weights = np.array([_catalan(k) * _catalan(b - 1 - k) for k in range(b)], float)
        cdf = np.cumsum(weights / weights.sum())
        _SPLIT_CDF[b] = cdf
    return cdf


def _sample_shape(b: int, rng: np.random.Generator) -> _Node:
    """Uniform binary tree shape with b internal nodes (Catalan split)."""
    if b == 0:
        return _Node(None, [])
    k = int(np.searchsorted(_split_cdf(b), rng.random(), side="right"))
    return _Node(None, [_sample_shape(k, rng), _sample_shape(b - 1 - k, rng)])


def _fill_nodes(shape: _Node, cfg: GenConfig, rng: np.random.Generator, role: str, dim: int) -> None:
    for node in shape.walk():
        if node.children:
            node.token = Token(TokenKind.BINARY, draw_binary_op(cfg, rng))
        elif rng.random() < cfg.p_const_leaf:
            node.token = Token(TokenKind.CONST, expr.CONST_SYMBOL)
        else:
            var_role = "i"
            if role == "inter" and rng.random() < 0.5:
                var_role = "j"
            node.token = Token(
                TokenKind.VARIABLE, expr.var_symbol(var_role, int(rng.integers(dim)))
            )


def _insert_unaries(root: _Node, u: int, cfg: GenConfig, rng: np.random.Generator) -> _Node:
    for _ in range(u):
        # one bottom-up pass for heights, then a uniform pick of the shallow nodes
        order: list[tuple[_Node, _Node | None]] = []
        stack: list[tuple[_Node, _Node | None]] = [(root, None)]
        while stack:
            node, parent = stack.pop()
            order.append((node, parent))
            for c in node.children:
                stack.append((c, node))
        heights: dict[int, int] = {}
        for node, _parent in reversed(order):
            heights[id(node)] = 1 + max(
                (heights[id(c)] for c in node.children), default=0
            )
        eligible = [(n, p) for n, p in order if heights[id(n)] < cfg.d_depth]
        if not eligible:
            raise RetryExhausted("no node shallow enough for unary insertion")
        node, parent = eligible[int(rng.integers(len(eligible)))]
        wrapper = _Node(Token(TokenKind.UNARY, draw_unary_op(cfg, rng)), [node])
        if parent is None:
            root = wrapper
        else:
            parent.children[parent.children.index(node)] = wrapper
    return root


def _token_spans(tree: ExprTree) -> list[int]:
    """End index (exclusive) of each node's subtree in prefix order."""
    end = [0] * len(tree.tokens)

    def walk(i: int) -> int:
        j = i + 1
        for c in tree.children[i]:
            j = walk(c)
        end[i] = j
        return j

    walk(0)
    return end


def _degenerate_structure(tree: ExprTree) -> bool:
    """Structural redundancy that makes a skeleton a disguised duplicate:
    operator subtrees without variables (fold to a bare constant), inv(inv(.))
    wrappers, and div/sub of two identical subtrees (constants in disguise)."""
    toks = tree.tokens
    has_var = [False] * len(toks)
    for i in range(len(toks) - 1, -1, -1):
        if toks[i].kind is TokenKind.VARIABLE:
            has_var[i] = True
        for c in tree.children[i]:
            has_var[i] = has_var[i] or has_var[c]
    end = _token_spans(tree)
    for i, tok in enumerate(toks):
        if tok.arity and not has_var[i]:
            return True
        if tok.symbol == "inv" and toks[tree.children[i][0]].symbol == "inv":
            return True
        if tok.kind is TokenKind.BINARY and tok.symbol in ("div", "sub"):
            a, b = tree.children[i]
            if toks[a:end[a]] == toks[b:end[b]]:
                return True
    return False


def sample_skeleton(
    cfg: GenConfig,
    rng: np.random.Generator,
    role: str,
    dim: int | None = None,
    max_attempts: int = 100,
) -> ExprTree:
    """One valid skeleton: shape, operators, leaves, unary grafts, checks."""
    if role not in ("self", "inter"):
        raise ValueError(f"role must be 'self' or 'inter', got {role!r}")
    d = int(rng.integers(1, cfg.D + 1)) if dim is None else dim
    for _ in range(max_attempts):
        b = int(rng.integers(0, cfg.b_max + 1))
        u = int(rng.integers(0, cfg.u_max + 1))
        shape = _sample_shape(b, rng)
        _fill_nodes(shape, cfg, rng, role, d)
        try:
            shape = _insert_unaries(shape, u, cfg, rng)
        except RetryExhausted:
            continue
        tree = expr.canonicalize_tree(expr.parse_prefix(shape.tokens()))
        if _degenerate_structure(tree):
            continue
        if expr.check_skeleton(tree, cfg, role).ok:
            return tree
    raise RetryExhausted(f"no valid {role} skeleton after {max_attempts} attempts")


def _normal_bindings(
    trees: Sequence[ExprTree], n: int, rng: np.random.Generator, scale: float = 1.0
) -> list[dict[str, float]]:
    names = sorted({v for t in trees for v in t.variables})
    draws = scale * rng.standard_normal((n, len(names)))
    return [dict(zip(names, row)) for row in draws]


# Generation rejects instances whose values exceed this, leaving headroom to
# the evaluator's own overflow bound for unlucky downstream draws.
_GEN_VALUE_LIMIT = expr.OVERFLOW_LIMIT / 1e3


def _content_rng(pair: EquationPair) -> np.random.Generator:
    """Deterministic stream derived from the pair's own content; used for the
    pair's canonical instance-check samples."""
    text = json.dumps(
        [
            pair.dim,
            expr.serialize_prefix(pair.f_self),
            expr.serialize_prefix(pair.f_inter),
            [repr(c) for c in pair.self_constants],
            [repr(c) for c in pair.inter_constants],
        ]
    )
    digest = hashlib.sha256(text.encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def validate_pair(pair: EquationPair, cfg: GenConfig) -> bool:
    """The pair's validity contract: structural rules plus finite evaluation
    on its content-derived sample set.  Generation enforces this as its final
    gate, so stored corpus pairs always re-validate."""
    if not expr.check_skeleton(pair.f_self, cfg, "self").ok:
        return False
    if not expr.check_skeleton(pair.f_inter, cfg, "inter").ok:
        return False
    samples = _normal_bindings(
        (pair.f_self, pair.f_inter), cfg.n_check_samples, _content_rng(pair)
    )
    for tree, consts in ((pair.f_self, pair.self_constants), (pair.f_inter, pair.inter_constants)):
        if tree.is_empty:
            continue
        if not expr.check_instance(tree, consts, samples):
            return False
    return True


def _instance_ok(pair_trees, constants, rng: np.random.Generator, n: int) -> bool:
    """Validity with safety margins: standard-normal samples plus an equal
    share of wider 1.25-sigma samples, with a tightened value bound, so
    near-threshold instances (poles, log/arcsin edges, steep powers) are
    rejected rather than admitted on a lucky draw."""
    names = sorted({v for t in pair_trees for v in t.variables})
    draws = rng.standard_normal((2 * n, len(names)))
    draws[n:] *= 1.25
    samples = [dict(zip(names, row)) for row in draws]
    for tree, consts in zip(pair_trees, constants):
        if tree.is_empty:
            continue
        if not expr.check_instance(tree, consts, samples, limit=_GEN_VALUE_LIMIT):
            return False
    return True


def generate_pair(
    cfg: GenConfig,
    rng: np.random.Generator,
    max_attempts: int = 100,
    provenance: Sequence[int] = (),
) -> EquationPair:
    """One pair passing the structural and instance checks."""
    for _ in range(max_attempts):
        dim = int(rng.integers(1, cfg.D + 1))
        if rng.random() < cfg.p_empty_self:
            f_self = ExprTree.empty()
        else:
            f_self = sample_skeleton(cfg, rng, "self", dim)
        f_inter = sample_skeleton(cfg, rng, "inter", dim)
        self_c = tuple(rng.uniform(cfg.c_min, cfg.c_max, f_self.n_placeholders))
        inter_c = tuple(rng.uniform(cfg.c_min, cfg.c_max, f_inter.n_placeholders))
        if not _instance_ok(
            (f_self, f_inter), (self_c, inter_c), rng, cfg.n_check_samples
        ):
            continue
        pair = EquationPair(f_self, f_inter, self_c, inter_c, dim, tuple(provenance))
        if not validate_pair(pair, cfg):
            continue
        return pair
    raise RetryExhausted(f"no valid pair after {max_attempts} attempts")


def resample_constants(
    pair: EquationPair,
    cfg: GenConfig,
    rng: np.random.Generator,
    max_attempts: int = 20,
) -> EquationPair:
    """Fresh uniform constants for an existing pair, re-verified; falls back
    to the stored constants when no valid draw is found."""
    for _ in range(max_attempts):
        self_c = tuple(rng.uniform(cfg.c_min, cfg.c_max, len(pair.self_constants)))
        inter_c = tuple(rng.uniform(cfg.c_min, cfg.c_max, len(pair.inter_constants)))
        if not _instance_ok(
            (pair.f_self, pair.f_inter), (self_c, inter_c), rng, cfg.n_check_samples
        ):
            continue
        out = EquationPair(
            pair.f_self, pair.f_inter, self_c, inter_c, pair.dim, pair.provenance
        )
        if validate_pair(out, cfg):
            return out
    return pair


def _child_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def build_corpus(cfg: GenConfig, n: int, seed: int) -> Corpus:
    """n unique pairs; uniqueness is canonical-form equality on both parts.

    Every pair derives its own child seed from (seed, index, attempt), so
    the result is independent of generation order or thread count.
    """
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    seen: set[tuple[str, str]] = set()
    pairs: list[EquationPair] = []
    for idx in range(n):
        for attempt in range(200):
            pair = generate_pair(
                cfg, _child_rng(seed, idx, attempt), provenance=(seed, idx, attempt)
            )
            key = pair.canonical()
            if key not in seen:
                seen.add(key)
                pairs.append(pair)
                break
        else:
            raise RetryExhausted(f"could not find a fresh pair for index {idx}")
    return Corpus(tuple(pairs), cfg, seed)


# ---------------------------------------------------------------------------
# Observation synthesis
# ---------------------------------------------------------------------------


def synthesize_observations(
    pair: EquationPair,
    adj: Adjacency,
    n_centers: int,
    rng: np.random.Generator,
    n_points: int = 200,
) -> ObservationSet:
    """Draw standard-normal states and record (x_i, {x_j}, y_i) triplets.

    Centers are sampled without replacement and capped at a tenth of the
    graph (at least one).  Failed evaluations are redrawn per point up to 20
    times, after which the center is skipped; if more than half of all draws
    fail the equation is considered degenerate for this domain.
    """
    cap = max(1, adj.n // 10)
    if n_centers > cap:
        raise ValueError(f"n_centers={n_centers} exceeds cap {cap} for n={adj.n}")
    if n_centers < 1 or n_points < 1:
        raise ValueError("need at least one center and one point")
    centers = sorted(int(c) for c in rng.choice(adj.n, size=n_centers, replace=False))
    base, extra = divmod(n_points, n_centers)
    counts = [base + (1 if i < extra else 0) for i in range(n_centers)]
    dim = pair.dim
    triplets: list[Triplet] = []
    draws = fails = 0
    for center, m in zip(centers, counts):
        if m == 0:
            continue
        nbrs = adj.in_neighbors(center)
        w = np.array([wt for _, wt in nbrs], float)
        k = len(nbrs)
        xi = rng.standard_normal((m, dim))
        nb = rng.standard_normal((m, k, dim))
        ok = np.zeros(m, bool)
        y = np.zeros(m)
        for _round in range(21):
            todo = np.flatnonzero(~ok)
            if todo.size == 0:
                break
            draws += todo.size
            vals, good = _eval_rows(pair, xi[todo], nb[todo], w)
            y[todo] = vals
            ok[todo] = good
            fails += int((~good).sum())
            bad = todo[~good]
            if bad.size and _round < 20:
                xi[bad] = rng.standard_normal((bad.size, dim))
                nb[bad] = rng.standard_normal((bad.size, k, dim))
        if not ok.all():
            continue  # center skipped
        for r in range(m):
            triplets.append(
                Triplet(
                    center=center,
                    x_i=xi[r].copy(),
                    neighbors=nb[r].copy(),
                    weights=w.copy(),
                    y_i=np.array([y[r]]),
                )
            )
    if draws and fails / draws > 0.5:
        raise DegenerateEquation(
            f"{fails}/{draws} draws failed for pair {pair.canonical()}"
        )
    if not triplets:
        raise DegenerateEquation("all centers were skipped")
    return ObservationSet(tuple(triplets), dim=dim, scaler=None)


def _eval_rows(
    pair: EquationPair, xi: np.ndarray, nb: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    m, k = nb.shape[0], nb.shape[1]
    dim = pair.dim
    bind_self = {expr.var_symbol("i", d): xi[:, d] for d in range(dim)}
    rs = expr.eval_batch(pair.f_self, bind_self, pair.self_constants, shape=(m,))
    total = rs.values.copy()
    ok = rs.ok.copy()
    if k:
        bind = {expr.var_symbol("i", d): np.repeat(xi[:, d], k) for d in range(dim)}
        bind.update({expr.var_symbol("j", d): nb[:, :, d].reshape(-1) for d in range(dim)})
        ri = expr.eval_batch(pair.f_inter, bind, pair.inter_constants, shape=(m * k,))
        ok &= ri.ok.reshape(m, k).all(axis=1)
        total = total + (w * ri.values.reshape(m, k)).sum(axis=1)
    ok &= np.isfinite(total) & (np.abs(total) <= expr.OVERFLOW_LIMIT)
    return total, ok


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Line-delimited records; the header carries config and seed."""
    cfg = corpus.config
    header = {
        "format": "netsr-corpus",
        "version": 1,
        "seed": corpus.seed,
        "n": len(corpus.pairs),
        "config": {
            "D": cfg.D,
            "b_max": cfg.b_max,
            "u_max": cfg.u_max,
            "c_min": cfg.c_min,
            "c_max": cfg.c_max,
            "d_depth": cfg.d_depth,
            "p_binary": dict(cfg.p_binary),
            "p_unary": dict(cfg.p_unary),
            "max_tokens": cfg.max_tokens,
            "p_empty_self": cfg.p_empty_self,
            "p_const_leaf": cfg.p_const_leaf,
            "n_check_samples": cfg.n_check_samples,
        },
    }
    lines = [json.dumps(header, sort_keys=True)]
    for pair in corpus.pairs:
        lines.append(
            json.dumps(
                {
                    "dim": pair.dim,
                    "self": " ".join(expr.serialize_prefix(pair.f_self)),
                    "inter": " ".join(expr.serialize_prefix(pair.f_inter)),
                    "self_constants": list(pair.self_constants),
                    "inter_constants": list(pair.inter_constants),
                    "provenance": list(pair.provenance),
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    lines = Path(path).read_text().strip().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "netsr-corpus":
        raise ValueError(f"{path}: not a corpus file")
    cfg = GenConfig(**header["config"])
    pairs = []
    for line in lines[1:]:
        rec = json.loads(line)
        pairs.append(
            EquationPair.from_prefix(
                rec["self"],
                rec["inter"],
                rec["self_constants"],
                rec["inter_constants"],
                rec["dim"],
                rec.get("provenance", ()),
            )
        )
    return Corpus(tuple(pairs), cfg, header["seed"])
