"""Grammar declaration and extraction.

A grammar is declared by registering node kinds: non-terminals are abstract
node kinds, productions are concrete node kinds with typed fields. Extraction
validates the registry and computes the derived tables (minimum depths,
recursion flags) that make depth-bounded generation terminate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterable, Sequence


class GrammarError(Exception):
    """Raised for invalid registrations or an inconsistent grammar."""


class GrammarWarning(UserWarning):
    """Non-fatal grammar diagnostics (e.g. symbols unreachable from start)."""


class LeafKind(Enum):
    INTEGER = "integer"
    REAL = "real"
    BOOLEAN = "boolean"
    TEXT = "text"


# ---------------------------------------------------------------------------
# Symbol references
# ---------------------------------------------------------------------------

class SymbolRef:
    """Base class for a field's type reference."""

    __slots__ = ()


@dataclass(frozen=True)
class NonTerminalRef(SymbolRef):
    """Reference to an abstract node kind by name."""

    name: str


@dataclass(frozen=True)
class Leaf(SymbolRef):
    """A native leaf value of one of the four built-in kinds."""

    kind: LeafKind

    def __post_init__(self):
        if not isinstance(self.kind, LeafKind):
            raise GrammarError(f"invalid leaf kind: {self.kind!r}")


@dataclass(frozen=True)
class OptionalOf(SymbolRef):
    """Zero-or-one occurrence of the inner reference."""

    inner: SymbolRef

    def __post_init__(self):
        if isinstance(self.inner, Annotated):
            raise GrammarError("OptionalOf cannot wrap an Annotated reference")


@dataclass(frozen=True)
class ListOf(SymbolRef):
    """Zero-or-more occurrences of the inner reference."""

    inner: SymbolRef

    def __post_init__(self):
        if isinstance(self.inner, Annotated):
            raise GrammarError("ListOf cannot wrap an Annotated reference")


@dataclass(frozen=True)
class Annotated(SymbolRef):
    """A reference whose generation is delegated to a meta-handler.

    The handler must be hashable and provide at least ``generate(ctx)``; see
    :mod:`grammargp.handlers` for the contract and the built-in catalog.
    """

    base: SymbolRef
    handler: Any

    def __post_init__(self):
        if isinstance(self.base, Annotated):
            raise GrammarError("Annotated cannot wrap another Annotated (one handler per field)")


INTEGER = Leaf(LeafKind.INTEGER)
REAL = Leaf(LeafKind.REAL)
BOOLEAN = Leaf(LeafKind.BOOLEAN)
TEXT = Leaf(LeafKind.TEXT)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

@dataclass
class NonTerminal:
    """An abstract node kind; its productions are the alternatives."""

    name: str
    production_ids: list[str] = field(default_factory=list)


@dataclass
class Production:
    """A concrete node kind: named, typed fields plus an evaluation callback.

    ``semantic_action`` receives one positional argument per field, in field
    order, and returns the node's value. The engine never inspects it.
    """

    name: str
    implements: str
    fields: tuple[tuple[str, SymbolRef], ...]
    weight: float = 1.0
    semantic_action: Callable[..., Any] | None = None


class GrammarBuilder:
    """Mutable registry of node kinds. Definitions are validated by
    :func:`extract_grammar`, not at registration time, so forward references
    between productions and non-terminals are fine.
    """

    def __init__(self):
        self.nonterminals: dict[str, NonTerminal] = {}
        self.productions: dict[str, Production] = {}

    def _check_fresh(self, name: str) -> None:
        if not name or not isinstance(name, str):
            raise GrammarError(f"symbol name must be a non-empty string, got {name!r}")
        if name in self.nonterminals or name in self.productions:
            raise GrammarError(f"duplicate symbol name: {name!r}")

    def register_nonterminal(self, name: str) -> "GrammarBuilder":
        self._check_fresh(name)
        self.nonterminals[name] = NonTerminal(name)
        return self

    def register_production(
        self,
        name: str,
        implements: str,
        fields: Sequence[tuple[str, SymbolRef]] = (),
        weight: float = 1.0,
        semantic_action: Callable[..., Any] | None = None,
    ) -> "GrammarBuilder":
        self._check_fresh(name)
        if not (weight > 0):
            raise GrammarError(f"production {name!r}: weight must be > 0, got {weight!r}")
        seen = set()
        for fname, ref in fields:
            if fname in seen:
                raise GrammarError(f"production {name!r}: duplicate field name {fname!r}")
            seen.add(fname)
            if not isinstance(ref, SymbolRef):
                raise GrammarError(f"production {name!r}: field {fname!r} is not a SymbolRef")
        self.productions[name] = Production(
            name=name,
            implements=implements,
            fields=tuple((fname, ref) for fname, ref in fields),
            weight=float(weight),
            semantic_action=semantic_action,
        )
        return self


def register_nonterminal(registry: GrammarBuilder, name: str) -> GrammarBuilder:
    return registry.register_nonterminal(name)


def register_production(
    registry: GrammarBuilder,
    name: str,
    implements: str,
    fields: Sequence[tuple[str, SymbolRef]] = (),
    weight: float = 1.0,
    semantic_action: Callable[..., Any] | None = None,
) -> GrammarBuilder:
    return registry.register_production(name, implements, fields, weight, semantic_action)


# ---------------------------------------------------------------------------
# Extracted grammar
# ---------------------------------------------------------------------------

@dataclass
class Grammar:
    """A validated grammar. Immutable after extraction; safe to share.

    ``min_depth`` maps every non-terminal and production name to the smallest
    depth of a complete tree rooted there (the same depth measure
    :func:`grammargp.trees.depth` reports). ``recursive`` flags non-terminals
    that derive themselves directly or transitively.
    """

    nonterminals: dict[str, NonTerminal]
    productions: dict[str, Production]
    start: str
    min_depth: dict[str, int] = field(default_factory=dict)
    recursive: dict[str, bool] = field(default_factory=dict)
    _ref_depths: dict[SymbolRef, int] = field(default_factory=dict, repr=False)

    def min_depth_of(self, ref: SymbolRef) -> int:
        """Smallest achievable tree depth for a subtree of type ``ref``."""
        cached = self._ref_depths.get(ref)
        if cached is not None:
            return cached
        d = _ref_min_depth(ref, lambda r: self.min_depth_of(r), self.min_depth)
        if math.isinf(d):
            raise GrammarError(f"reference {ref!r} is non-productive")
        return int(d)


def _iter_nonterminal_names(ref: SymbolRef) -> Iterable[str]:
    """All non-terminal names mentioned anywhere inside a reference."""
    if isinstance(ref, NonTerminalRef):
        yield ref.name
    elif isinstance(ref, (OptionalOf, ListOf)):
        yield from _iter_nonterminal_names(ref.inner)
    elif isinstance(ref, Annotated):
        yield from _iter_nonterminal_names(ref.base)


def _ref_min_depth(ref: SymbolRef, resolve, nt_depths: dict[str, int | float]) -> float:
    """Minimum tree depth contributed by one field reference.

    Leaves occupy a single node. Optionals and lists admit the empty case, so
    the wrapper node alone (depth 1) is always achievable. Annotated fields
    defer to the handler, which defaults to 1 when it declares nothing.
    """
    if isinstance(ref, Leaf):
        return 1
    if isinstance(ref, NonTerminalRef):
        return nt_depths.get(ref.name, math.inf)
    if isinstance(ref, (OptionalOf, ListOf)):
        return 1
    if isinstance(ref, Annotated):
        contribution = getattr(ref.handler, "min_depth_contribution", None)
        if contribution is None:
            return 1
        return contribution(ref.base, resolve)
    raise GrammarError(f"unknown SymbolRef: {ref!r}")


def _fixpoint_min_depths(
    nonterminals: dict[str, NonTerminal], productions: dict[str, Production]
) -> dict[str, float]:
    """Iterate the min-depth equations to a fixpoint.

    Symbols left at infinity have no finite derivation (non-productive).
    """
    depths: dict[str, float] = {name: math.inf for name in nonterminals}
    depths.update({name: math.inf for name in productions})

    def resolve(ref: SymbolRef) -> float:
        return _ref_min_depth(ref, resolve, depths)

    changed = True
    while changed:
        changed = False
        for prod in productions.values():
            if prod.fields:
                candidate = 1 + max(resolve(ref) for _, ref in prod.fields)
            else:
                candidate = 1
            if candidate < depths[prod.name]:
                depths[prod.name] = candidate
                changed = True
        for nt in nonterminals.values():
            if nt.production_ids:
                candidate = min(depths[pid] for pid in nt.production_ids)
                if candidate < depths[nt.name]:
                    depths[nt.name] = candidate
                    changed = True
    return depths


def compute_min_depths(grammar: Grammar) -> Grammar:
    """Return a copy of ``grammar`` with min-depth and recursion tables
    recomputed from its productions."""
    depths = _fixpoint_min_depths(grammar.nonterminals, grammar.productions)
    finite = {name: int(d) for name, d in depths.items() if not math.isinf(d)}
    g = replace(grammar, min_depth=finite, recursive=_recursion_flags(grammar))
    g._ref_depths = _precompute_ref_depths(g)
    return g


def _recursion_flags(grammar: Grammar) -> dict[str, bool]:
    derives: dict[str, set[str]] = {name: set() for name in grammar.nonterminals}
    for prod in grammar.productions.values():
        if prod.implements in derives:
            for _, ref in prod.fields:
                derives[prod.implements].update(_iter_nonterminal_names(ref))
    flags = {}
    for name in grammar.nonterminals:
        seen: set[str] = set()
        stack = list(derives[name])
        hit = False
        while stack:
            current = stack.pop()
            if current == name:
                hit = True
                break
            if current in seen:
                continue
            seen.add(current)
            stack.extend(derives.get(current, ()))
        flags[name] = hit
    return flags


def _precompute_ref_depths(grammar: Grammar) -> dict[SymbolRef, int]:
    table: dict[SymbolRef, int] = {}

    def resolve(ref: SymbolRef) -> float:
        return _ref_min_depth(ref, resolve, grammar.min_depth)

    for prod in grammar.productions.values():
        for _, ref in prod.fields:
            d = resolve(ref)
            if not math.isinf(d):
                table[ref] = int(d)
    start_ref = NonTerminalRef(grammar.start)
    table[start_ref] = grammar.min_depth[grammar.start]
    return table


def extract_grammar(registry: GrammarBuilder, start: str) -> Grammar:
    """Validate the registry and return the grammar rooted at ``start``.

    Errors: unknown start, unresolved references, non-terminals with no
    production, and non-productive symbols. Symbols unreachable from the
    start are only warned about, so partially used library grammars stay
    usable.
    """
    if start not in registry.nonterminals:
        raise GrammarError(f"start symbol {start!r} is not a registered non-terminal")

    nonterminals = {name: NonTerminal(name) for name in registry.nonterminals}
    productions = dict(registry.productions)

    for prod in productions.values():
        if prod.implements not in nonterminals:
            raise GrammarError(
                f"production {prod.name!r} implements unknown non-terminal {prod.implements!r}"
            )
        nonterminals[prod.implements].production_ids.append(prod.name)
        for fname, ref in prod.fields:
            for nt_name in _iter_nonterminal_names(ref):
                if nt_name not in nonterminals:
                    raise GrammarError(
                        f"production {prod.name!r}, field {fname!r}: "
                        f"unresolved non-terminal {nt_name!r}"
                    )
            _check_handlers(prod.name, fname, ref)

    for nt in nonterminals.values():
        if not nt.production_ids:
            raise GrammarError(f"non-terminal {nt.name!r} has no productions")

    depths = _fixpoint_min_depths(nonterminals, productions)
    dead = sorted(name for name, d in depths.items() if math.isinf(d))
    if dead:
        raise GrammarError(f"non-productive symbols (no finite derivation): {', '.join(dead)}")

    grammar = Grammar(
        nonterminals=nonterminals,
        productions=productions,
        start=start,
        min_depth={name: int(d) for name, d in depths.items()},
    )
    grammar.recursive = _recursion_flags(grammar)
    grammar._ref_depths = _precompute_ref_depths(grammar)

    unreachable = _unreachable_symbols(grammar)
    if unreachable:
        warnings.warn(
            f"symbols unreachable from {start!r}: {', '.join(sorted(unreachable))}",
            GrammarWarning,
            stacklevel=2,
        )
    return grammar


def _check_handlers(prod_name: str, field_name: str, ref: SymbolRef) -> None:
    if isinstance(ref, Annotated):
        check = getattr(ref.handler, "check_base", None)
        if check is not None:
            try:
                check(ref.base)
            except GrammarError as exc:
                raise GrammarError(
                    f"production {prod_name!r}, field {field_name!r}: {exc}"
                ) from None
    elif isinstance(ref, (OptionalOf, ListOf)):
        _check_handlers(prod_name, field_name, ref.inner)


def _unreachable_symbols(grammar: Grammar) -> set[str]:
    reached: set[str] = set()
    stack = [grammar.start]
    while stack:
        name = stack.pop()
        if name in reached:
            continue
        reached.add(name)
        for pid in grammar.nonterminals[name].production_ids:
            reached.add(pid)
            for _, ref in grammar.productions[pid].fields:
                stack.extend(_iter_nonterminal_names(ref))
    all_names = set(grammar.nonterminals) | set(grammar.productions)
    return all_names - reached


# ---------------------------------------------------------------------------
# BNF-style rendering
# ---------------------------------------------------------------------------

def render_ref(ref: SymbolRef) -> str:
    if isinstance(ref, NonTerminalRef):
        return ref.name
    if isinstance(ref, Leaf):
        return ref.kind.value
    if isinstance(ref, OptionalOf):
        return f"optional<{render_ref(ref.inner)}>"
    if isinstance(ref, ListOf):
        return f"list<{render_ref(ref.inner)}>"
    if isinstance(ref, Annotated):
        describe = getattr(ref.handler, "describe", None)
        label = describe() if describe is not None else type(ref.handler).__name__
        return f"{render_ref(ref.base)}{{{label}}}"
    raise GrammarError(f"unknown SymbolRef: {ref!r}")


def pretty_print_bnf(grammar: Grammar) -> str:
    """Render the grammar one rule per line, in registration order.

    Format (stable, golden-test friendly):
    ``NonTerminal ::= Prod(field:ref, ...) | BareProd | ...`` with a trailing
    newline. Productions without fields print as a bare name.
    """
    lines = []
    for nt in grammar.nonterminals.values():
        alts = []
        for pid in nt.production_ids:
            prod = grammar.productions[pid]
            if prod.fields:
                rendered = ", ".join(f"{fname}:{render_ref(ref)}" for fname, ref in prod.fields)
                alts.append(f"{prod.name}({rendered})")
            else:
                alts.append(prod.name)
        lines.append(f"{nt.name} ::= {' | '.join(alts)}")
    return "\n".join(lines) + "\n"
