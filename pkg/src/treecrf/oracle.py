"""Brute-force reference implementations over exhaustive tree enumeration.

These functions certify the chart dynamic programs on small instances.
:func:`enumerate_full_trees` yields every labeled full binary tree, which
is feasible only while ``Catalan(n-1) * |labels|^(2n-1)`` stays tiny.  The
scoring oracles instead enumerate every BRACKETING exhaustively (there are
``Catalan(n-1)`` of them) and reduce the label choices per node in closed
form: for a fixed structure the label of each node is chosen independently,
so summing over labelings of a product of node weights is the product of
per-node label sums, and maximizing is the per-node max.  That keeps the
oracles exact while reaching sizes (n = 6, four labels) where the labeled
enumeration would exceed a hundred million trees.  The two views are
cross-checked against each other in the test suite at sizes where both run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .chart import LabelSchema, NodeKind, PartialTree, Span, SymbolTree, _spans_cross
from .errors import TooLarge
from .inference import FullTree, MarginalChart, ScoreChart, _lse

ENUMERATION_LIMIT = 10_000_000
MAX_ORACLE_N = 8

# A structure is a preorder tuple of (start, end, split); leaves use -1.
Structure = tuple[tuple[int, int, int], ...]


def catalan(k: int) -> int:
    return math.comb(2 * k, k) // (k + 1)


def _structures(i: int, j: int) -> Iterator[Structure]:
    """All binary bracketings of the span (i, j), in canonical split order."""
    if i == j:
        yield ((i, i, -1),)
        return
    for m in range(i, j):
        for left in _structures(i, m):
            for right in _structures(m + 1, j):
                yield ((i, j, m),) + left + right


def _check_structure_guard(n: int) -> None:
    if not 1 <= n <= MAX_ORACLE_N:
        raise TooLarge(f"oracle supports 1 <= n <= {MAX_ORACLE_N}, got {n}")


@dataclass
class TreeEnumeration:
    """Lazy sequence of every full labeled binary tree over ``n`` tokens."""

    n: int
    total: int
    trees: Iterator[FullTree]

    def __iter__(self) -> Iterator[FullTree]:
        return self.trees


def enumerate_full_trees(n: int, schema: LabelSchema) -> TreeEnumeration:
    """Every (bracketing, labeling) pair exactly once, deterministically.

    Bracketings recurse on split points; labelings run as an odometer over
    preorder nodes (first node slowest).  Guarded so the full enumeration
    stays below ``ENUMERATION_LIMIT`` trees.
    """
    _check_structure_guard(n)
    n_labels = schema.n_labels
    total = catalan(n - 1) * n_labels ** (2 * n - 1)
    if total > ENUMERATION_LIMIT:
        raise TooLarge(
            f"{total} labeled trees exceeds the enumeration limit {ENUMERATION_LIMIT}"
        )

    def gen() -> Iterator[FullTree]:
        import itertools

        for structure in _structures(0, n - 1):
            spans = [(i, j) for i, j, _ in structure]
            for labels in itertools.product(range(n_labels), repeat=len(spans)):
                yield FullTree(
                    n=n,
                    nodes=tuple(
                        (i, j, k) for (i, j), k in zip(spans, labels)
                    ),
                )

    return TreeEnumeration(n=n, total=total, trees=gen())


def _label_lse(chart: ScoreChart) -> np.ndarray:
    """Per-cell log-sum over all labels, upper triangle only."""
    n = chart.n
    out = np.full((n, n), np.nan)
    for i in range(n):
        out[i, i:] = _lse(chart.s[i, i:, :], axis=1)
    return out


def _restricted_label_lse(
    chart: ScoreChart, symbols: SymbolTree
) -> np.ndarray:
    """Per-cell log-sum over admissible labels; NaN marks rejected cells."""
    n = chart.n
    n_observed = chart.schema.n_observed
    out = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i, n):
            kind = symbols.node_kind[i, j]
            if kind == NodeKind.REJECTED:
                continue
            if kind == NodeKind.OBSERVED:
                ks = list(symbols.observed_label[(i, j)])
                out[i, j] = _lse(chart.s[i, j, ks], axis=0)
            else:
                out[i, j] = _lse(chart.s[i, j, n_observed:], axis=0)
    return out


def brute_force_log_z(chart: ScoreChart) -> float:
    """Log partition function by exhaustive enumeration of bracketings."""
    _check_structure_guard(chart.n)
    lab = _label_lse(chart)
    weights = [
        sum(lab[i, j] for i, j, _ in structure)
        for structure in _structures(0, chart.n - 1)
    ]
    return float(_lse(np.array(weights), axis=0))


def _compatible_structures(
    chart: ScoreChart, symbols: SymbolTree
) -> Iterator[tuple[Structure, float]]:
    """Structures embedding every observed span and no rejected span."""
    lab = _restricted_label_lse(chart, symbols)
    observed = set(symbols.observed_label.keys())
    for structure in _structures(0, chart.n - 1):
        spans = {(i, j) for i, j, _ in structure}
        if not observed <= spans:
            continue
        if any(not np.isfinite(lab[i, j]) for i, j in spans):
            continue
        yield structure, float(sum(lab[i, j] for i, j, _ in structure))


def brute_force_partial_score(chart: ScoreChart, symbols: SymbolTree) -> float:
    """Log-sum over full trees compatible with the partial annotation.

    A full tree is compatible iff every observed span is present carrying
    one of its annotated labels, every other node carries a latent label,
    and no node's span is rejected.
    """
    _check_structure_guard(chart.n)
    weights = [w for _, w in _compatible_structures(chart, symbols)]
    if not weights:
        return float("-inf")
    return float(_lse(np.array(weights), axis=0))


def brute_force_marginals(
    chart: ScoreChart, symbols: SymbolTree | None = None
) -> MarginalChart:
    """Posterior span-label probabilities by normalized counting."""
    _check_structure_guard(chart.n)
    n = chart.n
    n_labels = chart.schema.n_labels
    s = chart.s
    if symbols is None:
        lab = _label_lse(chart)
        pairs = [
            (structure, float(sum(lab[i, j] for i, j, _ in structure)))
            for structure in _structures(0, n - 1)
        ]
        admissible = np.ones((n, n, n_labels), dtype=bool)
    else:
        lab = _restricted_label_lse(chart, symbols)
        pairs = list(_compatible_structures(chart, symbols))
        admissible = np.zeros((n, n, n_labels), dtype=bool)
        n_observed = chart.schema.n_observed
        for i in range(n):
            for j in range(i, n):
                kind = symbols.node_kind[i, j]
                if kind == NodeKind.OBSERVED:
                    admissible[i, j, list(symbols.observed_label[(i, j)])] = True
                elif kind == NodeKind.LATENT:
                    admissible[i, j, n_observed:] = True
    log_z = _lse(np.array([w for _, w in pairs]), axis=0)
    mu = np.zeros((n, n, n_labels))
    for structure, w in pairs:
        p_structure = math.exp(w - log_z)
        for i, j, _ in structure:
            ks = np.nonzero(admissible[i, j])[0]
            p_label = np.exp(s[i, j, ks] - lab[i, j])
            mu[i, j, ks] += p_structure * p_label
    return MarginalChart(mu=np.clip(mu, 0.0, 1.0))


def _structure_score_and_labels(
    chart: ScoreChart, structure: Structure
) -> tuple[float, tuple[int, ...], tuple[tuple[int, ...], ...]]:
    """Best score for a structure plus its decision key for tie-breaking.

    The best labeling of a fixed structure takes each node's first-argmax
    label independently.  The decision key lists (label, split) per
    preorder node, so comparing keys reproduces the decoder's
    lowest-label-then-lowest-split tie-break.
    """
    s = chart.s
    labels = []
    key = []
    for i, j, m in structure:
        k = int(np.argmax(s[i, j, :]))
        labels.append(k)
        key.append((k, m if m >= 0 else i))
    score_of = {(i, j): (s[i, j, k], m) for (i, j, m), k in zip(structure, labels)}

    def rec(i: int, j: int) -> float:
        v, m = score_of[(i, j)]
        if i == j:
            return float(v)
        return float(v + (rec(i, m) + rec(m + 1, j)))

    return rec(structure[0][0], structure[0][1]), tuple(labels), tuple(key)


def brute_force_best_tree(chart: ScoreChart) -> FullTree:
    """Exhaustive argmax tree with the decoder's deterministic tie-break."""
    _check_structure_guard(chart.n)
    best = None
    for structure in _structures(0, chart.n - 1):
        score, labels, key = _structure_score_and_labels(chart, structure)
        if best is None or score > best[0] or (score == best[0] and key < best[1]):
            best = (score, key, structure, labels)
    assert best is not None
    _, _, structure, labels = best
    return FullTree(
        n=chart.n,
        nodes=tuple((i, j, k) for (i, j, _), k in zip(structure, labels)),
    )


def is_compatible(tree: FullTree, symbols: SymbolTree, schema: LabelSchema) -> bool:
    """Definitional compatibility of a full tree with a partial annotation."""
    labels = tree.label_of()
    spans = set(labels)
    for (i, j), ks in symbols.observed_label.items():
        if (i, j) not in spans or labels[(i, j)] not in ks:
            return False
    for (i, j), k in labels.items():
        kind = symbols.node_kind[i, j]
        if kind == NodeKind.REJECTED:
            return False
        if kind == NodeKind.LATENT and k < schema.n_observed:
            return False
        if kind == NodeKind.OBSERVED and k not in symbols.observed_label[(i, j)]:
            return False
    return True


def random_chart(
    n: int,
    schema: LabelSchema,
    rng: np.random.Generator,
    low: float = -2.0,
    high: float = 2.0,
) -> ScoreChart:
    """Random score chart with uniform potentials on the upper triangle."""
    s = rng.uniform(low, high, size=(n, n, schema.n_labels))
    if n > 1:
        s[np.tril_indices(n, k=-1)] = 0.0
    return ScoreChart(s=s, schema=schema)


def random_partial_tree(
    n: int,
    schema: LabelSchema,
    rng: np.random.Generator,
    multilabel_prob: float = 0.0,
) -> PartialTree:
    """Random laminar annotation for harness and property tests.

    Proposes random spans, keeping each one that neither crosses nor
    duplicates the spans accepted so far; labels are drawn uniformly from
    the observed set, with an optional chance of a second label on the
    same span.
    """
    accepted: list[tuple[int, int]] = []
    for _ in range(int(rng.integers(0, n + 1))):
        a = int(rng.integers(0, n))
        b = int(rng.integers(a, n))
        if (a, b) in accepted:
            continue
        if any(_spans_cross((a, b), other) for other in accepted):
            continue
        accepted.append((a, b))
    entities: list[Span] = []
    for a, b in accepted:
        k = int(rng.integers(0, schema.n_observed))
        entities.append(Span(a, b, k))
        if schema.n_observed > 1 and rng.random() < multilabel_prob:
            k2 = int(rng.integers(0, schema.n_observed))
            if k2 != k:
                entities.append(Span(a, b, k2))
    return PartialTree(n=n, entities=tuple(entities))
