"""Derivation trees and depth-bounded construction.

Trees are immutable values. Construction is driven by a ``DecisionSource`` so
the same algorithm serves random generation (tree-based GP) and codon-driven
genotype-to-phenotype mapping (GE): every point of non-determinism is one
``choose`` or ``random_real`` call against the source.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field
from typing import Any, Callable, List, Tuple, Union

from .grammar import (
    Annotated,
    Grammar,
    Leaf,
    LeafKind,
    ListOf,
    NonTerminalRef,
    OptionalOf,
    SymbolRef,
)


class GenerationError(Exception):
    """Raised when a tree cannot be built within the requested depth budget."""


class EvaluationError(Exception):
    """Raised when a semantic action fails or is missing."""


class ReplacementError(Exception):
    """Raised when a replacement subtree does not match the site's symbol."""


# ---------------------------------------------------------------------------
# Tree nodes
# ---------------------------------------------------------------------------

class TreeNode:
    __slots__ = ()


@dataclass(frozen=True)
class ProductionNode(TreeNode):
    production_id: str
    children: tuple[TreeNode, ...] = ()


@dataclass(frozen=True)
class LeafNode(TreeNode):
    kind: LeafKind
    value: Any


@dataclass(frozen=True)
class ListNode(TreeNode):
    elements: tuple[TreeNode, ...] = ()


@dataclass(frozen=True)
class OptionalNode(TreeNode):
    present: bool
    inner: TreeNode | None = None


Path = Tuple[int, ...]


# ---------------------------------------------------------------------------
# Decision sources
# ---------------------------------------------------------------------------

class DecisionSource:
    """Supplies every choice made during tree construction.

    ``choose(n, weights)`` returns an index in [0, n); with weights, the
    random implementation selects proportionally to them. ``random_real()``
    returns a real in [0, 1). Sources are single-owner: do not share one
    across concurrent generations.
    """

    def choose(self, n: int, weights: list[float] | None = None) -> int:
        raise NotImplementedError

    def random_real(self) -> float:
        raise NotImplementedError


class RandomDecisionSource(DecisionSource):
    """Backed by a seeded ``random.Random`` for reproducible runs."""

    def __init__(self, rng):
        self.rng = rng

    def choose(self, n: int, weights: list[float] | None = None) -> int:
        if n < 1:
            raise ValueError("choose requires n >= 1")
        if weights is None:
            return self.rng.randrange(n)
        total = sum(weights)
        r = self.rng.random() * total
        acc = 0.0
        last_positive = 0
        for i, w in enumerate(weights):
            if w > 0:
                last_positive = i
            acc += w
            if r < acc:
                return i
        return last_positive  # float round-off at the top end

    def random_real(self) -> float:
        return self.rng.random()


class CodonExhausted(Exception):
    """Internal: the genotype ran out of codons past the wrap allowance."""


class CodonDecisionSource(DecisionSource):
    """Consumes one codon per decision, wrapping around up to ``max_wraps``
    times. Weights are ignored: codon choice is the plain mod rule, keeping
    genotypes portable across weighted and unweighted grammars.
    """

    CODON_SPAN = 2**32

    def __init__(self, codons, max_wraps: int = 0):
        if len(codons) == 0:
            raise ValueError("genotype must be non-empty")
        self.codons = codons
        self.max_wraps = max_wraps
        self.position = 0
        self.wraps = 0
        self.consumed = 0

    def _next(self) -> int:
        if self.position >= len(self.codons):
            if self.wraps >= self.max_wraps:
                raise CodonExhausted()
            self.wraps += 1
            self.position = 0
        value = self.codons[self.position]
        self.position += 1
        self.consumed += 1
        return value

    def choose(self, n: int, weights: list[float] | None = None) -> int:
        if n < 1:
            raise ValueError("choose requires n >= 1")
        return self._next() % n

    def random_real(self) -> float:
        return (self._next() % self.CODON_SPAN) / self.CODON_SPAN


# ---------------------------------------------------------------------------
# Genotypes
# ---------------------------------------------------------------------------

@dataclass
class Genotype:
    """Variable-length GE genome of unsigned codons."""

    codons: tuple[int, ...]
    used_codons: int = 0

    def __post_init__(self):
        if len(self.codons) == 0:
            raise ValueError("genotype must be non-empty")
        if any(c < 0 for c in self.codons):
            raise ValueError("codons must be non-negative")


@dataclass(frozen=True)
class MappingFailure:
    """Genotype could not finish mapping within the wrap allowance."""

    reason: str
    wraps_used: int = 0


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass
class GenerationContext:
    """What a meta-handler sees when asked to build a field's subtree."""

    grammar: Grammar
    base: SymbolRef
    budget: int
    decisions: DecisionSource
    recurse: Callable[[SymbolRef, int], TreeNode]


_LOWERCASE = string.ascii_lowercase


def eligible_alternatives(
    grammar: Grammar, nt_name: str, budget: int
) -> tuple[list[str], list[float]]:
    """Productions of ``nt_name`` that fit the budget, with their weights
    normalized to sum to 1 over the eligible set."""
    nt = grammar.nonterminals[nt_name]
    ids = [pid for pid in nt.production_ids if grammar.min_depth[pid] <= budget]
    raw = [grammar.productions[pid].weight for pid in ids]
    total = sum(raw)
    return ids, [w / total for w in raw] if total else []


def generate_tree(
    grammar: Grammar, symbol: SymbolRef, depth_budget: int, decisions: DecisionSource
) -> TreeNode:
    """Build a well-typed tree of depth <= ``depth_budget`` for ``symbol``.

    Alternatives that cannot complete within the budget are filtered out
    before choosing; annotated fields are delegated wholly to their handler;
    leaves use the default value generators. Raises ``GenerationError`` if
    the budget is below the symbol's minimum depth.
    """
    if depth_budget < grammar.min_depth_of(symbol):
        raise GenerationError(
            f"depth budget {depth_budget} is below the minimum depth "
            f"{grammar.min_depth_of(symbol)} of {symbol!r}"
        )
    return _generate(grammar, symbol, depth_budget, decisions)


def _generate(
    grammar: Grammar, ref: SymbolRef, budget: int, decisions: DecisionSource
) -> TreeNode:
    if isinstance(ref, NonTerminalRef):
        ids, weights = eligible_alternatives(grammar, ref.name, budget)
        if not ids:
            raise GenerationError(
                f"no production of {ref.name!r} fits depth budget {budget}"
            )
        pid = ids[decisions.choose(len(ids), weights)]
        prod = grammar.productions[pid]
        children = tuple(
            _generate(grammar, fref, budget - 1, decisions) for _, fref in prod.fields
        )
        return ProductionNode(pid, children)

    if isinstance(ref, Leaf):
        return _generate_leaf(ref.kind, decisions)

    if isinstance(ref, OptionalOf):
        if budget - 1 >= grammar.min_depth_of(ref.inner):
            present = decisions.choose(2) == 1
        else:
            present = False  # forced; no decision consumed
        if present:
            return OptionalNode(True, _generate(grammar, ref.inner, budget - 1, decisions))
        return OptionalNode(False, None)

    if isinstance(ref, ListOf):
        if budget - 1 >= grammar.min_depth_of(ref.inner):
            length = decisions.choose(budget)
        else:
            length = 0  # forced; no decision consumed
        return ListNode(
            tuple(_generate(grammar, ref.inner, budget - 1, decisions) for _ in range(length))
        )

    if isinstance(ref, Annotated):
        ctx = GenerationContext(
            grammar=grammar,
            base=ref.base,
            budget=budget,
            decisions=decisions,
            recurse=lambda r, b: _recurse_for_handler(grammar, r, b, decisions),
        )
        return ref.handler.generate(ctx)

    raise GenerationError(f"cannot generate for reference {ref!r}")


def _recurse_for_handler(
    grammar: Grammar, ref: SymbolRef, budget: int, decisions: DecisionSource
) -> TreeNode:
    if budget < grammar.min_depth_of(ref):
        raise GenerationError(
            f"handler recursed into {ref!r} with budget {budget}, below its minimum depth"
        )
    return _generate(grammar, ref, budget, decisions)


def _generate_leaf(kind: LeafKind, decisions: DecisionSource) -> LeafNode:
    if kind is LeafKind.INTEGER:
        return LeafNode(kind, -128 + decisions.choose(257))
    if kind is LeafKind.REAL:
        return LeafNode(kind, -1.0 + 2.0 * decisions.random_real())
    if kind is LeafKind.BOOLEAN:
        return LeafNode(kind, decisions.choose(2) == 1)
    if kind is LeafKind.TEXT:
        length = decisions.choose(8)
        return LeafNode(kind, "".join(_LOWERCASE[decisions.choose(26)] for _ in range(length)))
    raise GenerationError(f"unknown leaf kind {kind!r}")


def map_genotype(
    grammar: Grammar,
    genotype: Genotype,
    max_depth: int,
    max_wraps: int = 0,
    start: str | None = None,
) -> Union[TreeNode, MappingFailure]:
    """Decode a codon genome into a tree (the GE genotype-phenotype map).

    Each decision consumes one codon and applies the mod rule; on exhaustion
    the genome is re-read from the start up to ``max_wraps`` times, after
    which a ``MappingFailure`` is returned. ``used_codons`` is recorded on
    the genotype. Mapping is a pure function of (grammar, codons, max_depth,
    max_wraps).
    """
    source = CodonDecisionSource(genotype.codons, max_wraps)
    root = NonTerminalRef(start if start is not None else grammar.start)
    try:
        tree = generate_tree(grammar, root, max_depth, source)
    except CodonExhausted:
        genotype.used_codons = source.consumed
        return MappingFailure(
            reason=f"codons exhausted after {source.wraps} wraps", wraps_used=source.wraps
        )
    genotype.used_codons = source.consumed
    return tree


# ---------------------------------------------------------------------------
# Structural operations
# ---------------------------------------------------------------------------

def depth(node: TreeNode) -> int:
    """Number of nodes on the longest root-to-leaf path (a leaf is depth 1)."""
    if isinstance(node, ProductionNode):
        return 1 + max((depth(c) for c in node.children), default=0)
    if isinstance(node, ListNode):
        return 1 + max((depth(e) for e in node.elements), default=0)
    if isinstance(node, OptionalNode):
        return 1 + (depth(node.inner) if node.present else 0)
    return 1


def count_nodes(node: TreeNode) -> int:
    if isinstance(node, ProductionNode):
        return 1 + sum(count_nodes(c) for c in node.children)
    if isinstance(node, ListNode):
        return 1 + sum(count_nodes(e) for e in node.elements)
    if isinstance(node, OptionalNode):
        return 1 + (count_nodes(node.inner) if node.present else 0)
    return 1


def _children_with_refs(
    node: TreeNode, ref: SymbolRef, grammar: Grammar
) -> list[tuple[TreeNode, SymbolRef]]:
    """Child nodes paired with their governing references.

    Handler-generated subtrees are walked structurally: an annotated site's
    children are governed by the annotation's base reference.
    """
    if isinstance(ref, Annotated):
        ref = ref.base
    if isinstance(node, ProductionNode):
        prod = grammar.productions[node.production_id]
        return [(child, fref) for child, (_, fref) in zip(node.children, prod.fields)]
    if isinstance(node, ListNode):
        if not isinstance(ref, ListOf):
            raise ReplacementError(f"list node at a non-list site {ref!r}")
        return [(e, ref.inner) for e in node.elements]
    if isinstance(node, OptionalNode):
        if node.present:
            if not isinstance(ref, OptionalOf):
                raise ReplacementError(f"optional node at a non-optional site {ref!r}")
            return [(node.inner, ref.inner)]
        return []
    return []


def root_ref(node: TreeNode, grammar: Grammar) -> SymbolRef:
    """The governing reference of a standalone tree."""
    if isinstance(node, ProductionNode):
        return NonTerminalRef(grammar.productions[node.production_id].implements)
    if isinstance(node, LeafNode):
        return Leaf(node.kind)
    raise ReplacementError(
        "cannot derive the governing symbol of a bare list/optional node; pass it explicitly"
    )


def collect_sites(
    node: TreeNode, grammar: Grammar, ref: SymbolRef | None = None
) -> list[tuple[Path, SymbolRef]]:
    """Every subtree position with its governing symbol, in pre-order."""
    if ref is None:
        ref = root_ref(node, grammar)
    sites: list[tuple[Path, SymbolRef]] = []

    def walk(n: TreeNode, r: SymbolRef, path: Path) -> None:
        sites.append((path, r))
        for i, (child, cref) in enumerate(_children_with_refs(n, r, grammar)):
            walk(child, cref, path + (i,))

    walk(node, ref, ())
    return sites


def node_at(root: TreeNode, path: Path) -> TreeNode:
    node = root
    for i in path:
        if isinstance(node, ProductionNode):
            node = node.children[i]
        elif isinstance(node, ListNode):
            node = node.elements[i]
        elif isinstance(node, OptionalNode):
            if i != 0 or not node.present:
                raise IndexError(f"no child {i} under optional node")
            node = node.inner
        else:
            raise IndexError(f"no child {i} under leaf node")
    return node


def conforms(node: TreeNode, ref: SymbolRef, grammar: Grammar) -> bool:
    """Structural type check of a whole subtree against a reference."""
    if isinstance(ref, Annotated):
        return conforms(node, ref.base, grammar)
    if isinstance(ref, NonTerminalRef):
        if not isinstance(node, ProductionNode):
            return False
        prod = grammar.productions.get(node.production_id)
        if prod is None or prod.implements != ref.name:
            return False
        if len(node.children) != len(prod.fields):
            return False
        return all(
            conforms(child, fref, grammar)
            for child, (_, fref) in zip(node.children, prod.fields)
        )
    if isinstance(ref, Leaf):
        if not isinstance(node, LeafNode) or node.kind is not ref.kind:
            return False
        expected = {
            LeafKind.INTEGER: int,
            LeafKind.REAL: float,
            LeafKind.BOOLEAN: bool,
            LeafKind.TEXT: str,
        }[ref.kind]
        return type(node.value) is expected
    if isinstance(ref, OptionalOf):
        if not isinstance(node, OptionalNode):
            return False
        return (not node.present) or conforms(node.inner, ref.inner, grammar)
    if isinstance(ref, ListOf):
        if not isinstance(node, ListNode):
            return False
        return all(conforms(e, ref.inner, grammar) for e in node.elements)
    return False


def ref_at(
    root: TreeNode, path: Path, grammar: Grammar, ref: SymbolRef | None = None
) -> SymbolRef:
    """Governing reference of the subtree at ``path``."""
    if ref is None:
        ref = root_ref(root, grammar)
    node = root
    for i in path:
        pairs = _children_with_refs(node, ref, grammar)
        node, ref = pairs[i]
    return ref


def replace_subtree(
    root: TreeNode,
    path: Path,
    replacement: TreeNode,
    grammar: Grammar,
    ref: SymbolRef | None = None,
) -> TreeNode:
    """Return a new tree with the subtree at ``path`` swapped out.

    The replacement must conform to the site's governing symbol; the original
    tree is untouched (nodes are immutable, unmodified parts are shared).
    """
    site_ref = ref_at(root, path, grammar, ref)
    if not conforms(replacement, site_ref, grammar):
        raise ReplacementError(
            f"replacement does not conform to site symbol {site_ref!r}"
        )

    def rebuild(node: TreeNode, remaining: Path) -> TreeNode:
        if not remaining:
            return replacement
        i, rest = remaining[0], remaining[1:]
        if isinstance(node, ProductionNode):
            children = list(node.children)
            children[i] = rebuild(children[i], rest)
            return ProductionNode(node.production_id, tuple(children))
        if isinstance(node, ListNode):
            elements = list(node.elements)
            elements[i] = rebuild(elements[i], rest)
            return ListNode(tuple(elements))
        if isinstance(node, OptionalNode):
            return OptionalNode(True, rebuild(node.inner, rest))
        raise IndexError(f"path {path!r} does not exist in tree")

    return rebuild(root, path)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(node: TreeNode, grammar: Grammar) -> Any:
    """Bottom-up evaluation: children first, then the production's semantic
    action on the child values. Leaves evaluate to their stored value, lists
    to Python lists, absent optionals to None."""
    if isinstance(node, LeafNode):
        return node.value
    if isinstance(node, ListNode):
        return [evaluate(e, grammar) for e in node.elements]
    if isinstance(node, OptionalNode):
        return evaluate(node.inner, grammar) if node.present else None
    if isinstance(node, ProductionNode):
        prod = grammar.productions[node.production_id]
        if prod.semantic_action is None:
            raise EvaluationError(f"production {prod.name!r} has no semantic action")
        args = [evaluate(c, grammar) for c in node.children]
        try:
            return prod.semantic_action(*args)
        except EvaluationError:
            raise
        except Exception as exc:
            raise EvaluationError(f"semantic action of {prod.name!r} failed: {exc}") from exc
    raise EvaluationError(f"cannot evaluate node {node!r}")


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------

def format_real(value: float) -> str:
    return f"{value:.17g}"


def serialize_tree(node: TreeNode) -> str:
    """Canonical s-expression text; stable across runs and platforms."""
    if isinstance(node, LeafNode):
        if node.kind is LeafKind.REAL:
            rendered = format_real(node.value)
        elif node.kind is LeafKind.BOOLEAN:
            rendered = "true" if node.value else "false"
        elif node.kind is LeafKind.TEXT:
            escaped = node.value.replace("\\", "\\\\").replace('"', '\\"')
            rendered = f'"{escaped}"'
        else:
            rendered = str(node.value)
        return f"{node.kind.value}:{rendered}"
    if isinstance(node, ProductionNode):
        parts = "".join(" " + serialize_tree(c) for c in node.children)
        return f"({node.production_id}{parts})"
    if isinstance(node, ListNode):
        return "[" + " ".join(serialize_tree(e) for e in node.elements) + "]"
    if isinstance(node, OptionalNode):
        return f"(? {serialize_tree(node.inner)})" if node.present else "(?)"
    raise ValueError(f"cannot serialize {node!r}")
