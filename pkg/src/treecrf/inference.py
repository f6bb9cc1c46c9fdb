"""Chart dynamic programming over labeled binary trees.

All algorithms work in the log semiring on ``n x n x |labels|`` charts of
log potentials.  A full tree over ``n`` tokens is a binary bracketing with
exactly ``2n - 1`` labeled spans; its score is the sum of its node
potentials.  The core recursion factorizes each cell into a label part and
a split part::

    beta[i, i] = LSE_k s[i, i, k]
    beta[i, j] = LSE_k s[i, j, k] + LSE_m (beta[i, m] + beta[m+1, j])

which is valid because the label choice at a node is independent of where
the node splits.  Masked marginalization adds ``log M`` to the potentials
first, substituting ``LOG_ZERO`` for ``log 0``; with an all-ones mask this
is bit-identical to the plain recursion, and with a mask built from a full
tree it degenerates to evaluating that tree.

Cells below the diagonal are never read; tests poison them with NaN to
prove it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chart import ChartMask, LabelSchema, NodeKind, Span, SymbolTree
from .errors import DegenerateChart, DimensionMismatch

# Substitute for log 0 when masking in the logarithm scale.  Large enough
# that exp(LOG_ZERO) underflows to exactly 0.0 in double precision, so
# masked-out structures contribute nothing detectable to any sum.
LOG_ZERO = -1.0e6

_split_sign_fault = False


def set_fault_injection(enabled: bool) -> None:
    """Flip the sign of the split sum inside the DP (selfcheck harness).

    Used only to demonstrate that the selfcheck command actually detects a
    broken dynamic program; never enable during real work.
    """
    global _split_sign_fault
    _split_sign_fault = bool(enabled)


# Smallest positive double; lets log() skip the undefined log(0) lanes
# without an errstate context (the -inf branch is selected separately).
_TINY = 5e-324


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    """Max-shifted log-sum-exp that maps all-(-inf) slices to -inf."""
    m = x.max(axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    total = np.exp(x - shift).sum(axis=axis)
    out = np.where(total > 0.0, np.log(np.maximum(total, _TINY)), -np.inf)
    return out + np.squeeze(shift, axis=axis)


_triu_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
_tril_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def triu_cells(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Cached index arrays of the meaningful (upper-triangular) cells."""
    if n not in _triu_cache:
        _triu_cache[n] = np.triu_indices(n)
    return _triu_cache[n]


def tril_cells(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Cached index arrays of the strictly-lower (unused) cells."""
    if n not in _tril_cache:
        _tril_cache[n] = np.tril_indices(n, k=-1)
    return _tril_cache[n]


@dataclass(frozen=True)
class ScoreChart:
    """Log potentials ``s[i, j, k]`` for spans ``i <= j`` and labels ``k``.

    Only the upper triangle is meaningful; entries there must be finite.
    """

    s: np.ndarray
    schema: LabelSchema

    def __post_init__(self) -> None:
        if self.s.ndim != 3 or self.s.shape[0] != self.s.shape[1]:
            raise DimensionMismatch(f"score array has shape {self.s.shape}")
        if self.s.shape[2] != self.schema.n_labels:
            raise DimensionMismatch(
                f"chart has {self.s.shape[2]} labels, schema {self.schema.n_labels}"
            )
        n = self.s.shape[0]
        if n:
            iu, ju = triu_cells(n)
            if not np.isfinite(self.s[iu, ju, :]).all():
                raise ValueError("non-finite score in an upper-triangular cell")
        self.s.flags.writeable = False

    @property
    def n(self) -> int:
        return self.s.shape[0]


@dataclass(frozen=True)
class InsideChart:
    """Log inside scores ``beta[i, j]`` for every span."""

    beta: np.ndarray


@dataclass(frozen=True)
class MarginalChart:
    """Posterior span-label probabilities ``mu[i, j, k]``."""

    mu: np.ndarray


@dataclass(frozen=True)
class FullTree:
    """A full labeled binary bracketing: exactly ``2n - 1`` labeled spans.

    Nodes are stored in document order (start ascending, end descending),
    which coincides with preorder traversal.  Construction validates that
    the spans form a binary tree whose children exactly partition their
    parent, and records each internal span's split point.
    """

    n: int
    nodes: tuple[tuple[int, int, int], ...]
    splits: dict[tuple[int, int], int] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self) -> None:
        nodes = tuple(sorted(self.nodes, key=lambda t: (t[0], -t[1])))
        object.__setattr__(self, "nodes", nodes)
        n = self.n
        if len(nodes) != 2 * n - 1:
            raise ValueError(f"expected {2 * n - 1} nodes, got {len(nodes)}")
        spans = [(i, j) for i, j, _ in nodes]
        span_set = set(spans)
        if len(span_set) != len(spans):
            raise ValueError("duplicate spans in tree")
        for i, j, k in nodes:
            if not (0 <= i <= j < n) or k < 0:
                raise ValueError(f"bad node ({i}, {j}, {k})")
        ends_by_start: dict[int, list[int]] = {}
        for i, j in spans:
            ends_by_start.setdefault(i, []).append(j)
        splits: dict[tuple[int, int], int] = {}
        stack = [(0, n - 1)]
        if (0, n - 1) not in span_set:
            raise ValueError("root span missing")
        visited = 0
        while stack:
            i, j = stack.pop()
            visited += 1
            if i == j:
                continue
            inner = [e for e in ends_by_start.get(i, ()) if e < j]
            if not inner:
                raise ValueError(f"span ({i}, {j}) has no left child")
            m = max(inner)
            if (m + 1, j) not in span_set:
                raise ValueError(f"span ({i}, {j}) has no right child at {m + 1}")
            splits[(i, j)] = m
            stack.append((i, m))
            stack.append((m + 1, j))
        if visited != len(nodes):
            raise ValueError("spans do not form a single binary bracketing")
        object.__setattr__(self, "splits", splits)

    def label_of(self) -> dict[tuple[int, int], int]:
        return {(i, j): k for i, j, k in self.nodes}


def _require_nonempty(n: int) -> None:
    if n == 0:
        raise DegenerateChart("chart over zero tokens")


def _check_mask(chart: ScoreChart, mask: ChartMask) -> None:
    if mask.m.shape != chart.s.shape:
        raise DimensionMismatch(
            f"mask shape {mask.m.shape} does not match chart shape {chart.s.shape}"
        )


def _apply_mask(s: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Offset potentials by log-mask, with LOG_ZERO substituted for log 0."""
    logm = np.where(m > 0.0, np.log(np.maximum(m, _TINY)), LOG_ZERO)
    return s + logm


_inside_index_cache: dict[int, list[tuple]] = {}
_outside_index_cache: dict[int, list[tuple]] = {}


def _inside_indices(n: int) -> list[tuple]:
    """Per-width gather indices for the inside recursion (cached by n)."""
    if n not in _inside_index_cache:
        plan = []
        for w in range(1, n + 1):
            i = np.arange(n - w + 1)
            j = i + w - 1
            if w == 1:
                plan.append((i, j, None, None, None, None))
                continue
            t = np.arange(w - 1)
            li = i[:, None] + np.zeros_like(t)[None, :]
            lj = i[:, None] + t[None, :]
            ri = lj + 1
            rj = j[:, None] + np.zeros_like(t)[None, :]
            plan.append((i, j, li, lj, ri, rj))
        _inside_index_cache[n] = plan
    return _inside_index_cache[n]


def _inside_dp(sp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run the inside recursion; return (beta, per-cell label LSE).

    Processes one span-width diagonal at a time, vectorized over all start
    positions.  Reads only upper-triangular cells of ``sp``.
    """
    n = sp.shape[0]
    beta = np.full((n, n), np.nan)
    lab = np.full((n, n), np.nan)
    for i, j, li, lj, ri, rj in _inside_indices(n):
        a = _lse(sp[i, j, :], axis=1)
        lab[i, j] = a
        if li is None:
            beta[i, j] = a
            continue
        left = beta[li, lj]
        right = beta[ri, rj]
        cand = left - right if _split_sign_fault else left + right
        beta[i, j] = a + _lse(cand, axis=1)
    return beta, lab


def _outside_dp(beta: np.ndarray, lab: np.ndarray) -> np.ndarray:
    """Log outside scores.

    Cells are processed in decreasing width; every parent of a cell is
    strictly wider, so each cell gathers from already-final values.  A
    span (i, j) is reached either as a left child of a parent (i, jp)
    with sibling (j+1, jp), or as a right child of a parent (ip, j) with
    sibling (ip, i-1); both gathers vectorize over one diagonal, padding
    out-of-range parents with -inf.
    """
    n = beta.shape[0]
    alpha = np.full((n, n), -np.inf)
    alpha[0, n - 1] = 0.0
    if n == 1:
        return alpha
    # alpha + lab of finalized cells, the quantity every child gathers.
    plab = np.full((n, n), -np.inf)
    plab[0, n - 1] = lab[0, n - 1]
    for i, j, ok_l, jp_c, sib_row, ok_r, ip_c, sib_col in _outside_indices(n):
        left = np.where(ok_l, plab[i[:, None], jp_c] + beta[sib_row, jp_c], -np.inf)
        right = np.where(ok_r, plab[ip_c, j[:, None]] + beta[ip_c, sib_col], -np.inf)
        alpha[i, j] = _lse(np.concatenate([left, right], axis=1), axis=1)
        plab[i, j] = alpha[i, j] + lab[i, j]
    return alpha


def _outside_indices(n: int) -> list[tuple]:
    """Per-width gather indices for the outside recursion (cached by n)."""
    if n not in _outside_index_cache:
        plan = []
        for w in range(n - 1, 0, -1):
            i = np.arange(n - w + 1)
            j = i + w - 1
            t = np.arange(n - w)
            jp = j[:, None] + 1 + t[None, :]
            ok_l = jp <= n - 1
            jp_c = np.minimum(jp, n - 1)
            sib_row = np.minimum(j + 1, n - 1)[:, None] + np.zeros_like(t)[None, :]
            ip = i[:, None] - 1 - t[None, :]
            ok_r = ip >= 0
            ip_c = np.maximum(ip, 0)
            sib_col = np.maximum(i - 1, 0)[:, None] + np.zeros_like(t)[None, :]
            plan.append((i, j, ok_l, jp_c, sib_row, ok_r, ip_c, sib_col))
        _outside_index_cache[n] = plan
    return _outside_index_cache[n]


def _posterior(sp: np.ndarray, beta: np.ndarray, lab: np.ndarray) -> np.ndarray:
    """Span-label posteriors: gradient of the root log-sum w.r.t. ``sp``."""
    n = sp.shape[0]
    log_z = beta[0, n - 1]
    alpha = _outside_dp(beta, lab)
    log_mu = (alpha + beta - lab)[:, :, None] + sp - log_z
    with np.errstate(invalid="ignore", over="ignore"):
        mu = np.exp(log_mu)
    mu[tril_cells(n)] = 0.0
    # exp can overshoot 1 by an ulp; the posterior is a probability.
    return np.clip(mu, 0.0, 1.0)


def inside(chart: ScoreChart) -> float:
    """Log partition function over all full labeled binary trees."""
    _require_nonempty(chart.n)
    beta, _ = _inside_dp(chart.s)
    return float(beta[0, chart.n - 1])


def inside_chart(chart: ScoreChart, mask: ChartMask | None = None) -> InsideChart:
    """Full table of log inside scores, optionally masked."""
    _require_nonempty(chart.n)
    sp = chart.s
    if mask is not None:
        _check_mask(chart, mask)
        sp = _apply_mask(chart.s, mask.m)
    beta, _ = _inside_dp(sp)
    return InsideChart(beta=beta)


def masked_inside(chart: ScoreChart, mask: ChartMask) -> float:
    """Log-sum of scores of all full trees compatible with the mask.

    Computed exactly as ``inside(s + log M)`` with LOG_ZERO substituted
    for ``log 0``; an all-ones mask reproduces :func:`inside` bit for bit.
    """
    _require_nonempty(chart.n)
    _check_mask(chart, mask)
    sp = _apply_mask(chart.s, mask.m)
    beta, _ = _inside_dp(sp)
    return float(beta[0, chart.n - 1])


def vanilla_partial_marginalization(chart: ScoreChart, symbols: SymbolTree) -> float:
    """Reference partial marginalization with per-cell branching.

    Walks the chart cell by cell: observed cells contribute only their
    annotated label(s), latent cells sum over latent labels, rejected
    cells are truly excluded (log-score -inf, no LOG_ZERO approximation).
    Slow on purpose; it is the per-sentence baseline the batched masked
    path is checked and benchmarked against.
    """
    _require_nonempty(chart.n)
    if symbols.n != chart.n:
        raise DimensionMismatch(
            f"symbols over {symbols.n} tokens but chart over {chart.n}"
        )
    s = chart.s
    n = chart.n
    n_observed = chart.schema.n_observed
    beta = np.full((n, n), np.nan)
    for w in range(1, n + 1):
        for i in range(n - w + 1):
            j = i + w - 1
            kind = symbols.node_kind[i, j]
            if kind == NodeKind.REJECTED:
                beta[i, j] = -np.inf
                continue
            if kind == NodeKind.OBSERVED:
                ks = list(symbols.observed_label[(i, j)])
                a = _lse(s[i, j, ks], axis=0)
            else:
                a = _lse(s[i, j, n_observed:], axis=0)
            if w == 1:
                beta[i, j] = a
            else:
                cand = beta[i, i:j] + beta[i + 1 : j + 1, j]
                beta[i, j] = a + _lse(cand, axis=0)
    return float(beta[0, n - 1])


def log_prob(chart: ScoreChart, mask: ChartMask) -> float:
    """Log conditional probability of the partial tree the mask encodes."""
    return masked_inside(chart, mask) - inside(chart)


def marginals(chart: ScoreChart, mask: ChartMask | None = None) -> MarginalChart:
    """Posterior probability of each span-label pair under the (masked) model.

    Equals the gradient of the (masked) log partition function with
    respect to each potential ``s[i, j, k]``.
    """
    _require_nonempty(chart.n)
    sp = chart.s
    if mask is not None:
        _check_mask(chart, mask)
        sp = _apply_mask(chart.s, mask.m)
    beta, lab = _inside_dp(sp)
    return MarginalChart(mu=_posterior(sp, beta, lab))


def loss_and_score_gradient(
    chart: ScoreChart, mask: ChartMask
) -> tuple[float, np.ndarray]:
    """Negative log conditional probability and its exact score gradient.

    The gradient at each cell is the unmasked posterior minus the masked
    posterior; the two node-count identities make it sum to zero.
    """
    _require_nonempty(chart.n)
    _check_mask(chart, mask)
    beta_u, lab_u = _inside_dp(chart.s)
    sp_m = _apply_mask(chart.s, mask.m)
    beta_m, lab_m = _inside_dp(sp_m)
    root = (0, chart.n - 1)
    loss = float(beta_u[root] - beta_m[root])
    grad = _posterior(chart.s, beta_u, lab_u) - _posterior(sp_m, beta_m, lab_m)
    return loss, grad


def cky_decode(chart: ScoreChart) -> FullTree:
    """Highest-scoring full labeled binary tree.

    Ties break deterministically: lowest label index first, then lowest
    split point (numpy argmax picks the first maximum).
    """
    _require_nonempty(chart.n)
    s = chart.s
    n = chart.n
    beta = np.full((n, n), np.nan)
    best_label = np.zeros((n, n), dtype=np.int64)
    best_split = np.zeros((n, n), dtype=np.int64)
    for w in range(1, n + 1):
        i = np.arange(n - w + 1)
        j = i + w - 1
        cell = s[i, j, :]
        kstar = np.argmax(cell, axis=1)
        a = cell[np.arange(len(i)), kstar]
        best_label[i, j] = kstar
        if w == 1:
            beta[i, j] = a
            continue
        t = np.arange(w - 1)
        cand = (
            beta[i[:, None], i[:, None] + t[None, :]]
            + beta[i[:, None] + t[None, :] + 1, j[:, None]]
        )
        tstar = np.argmax(cand, axis=1)
        best_split[i, j] = i + tstar
        beta[i, j] = a + cand[np.arange(len(i)), tstar]
    nodes: list[tuple[int, int, int]] = []
    stack = [(0, n - 1)]
    while stack:
        i0, j0 = stack.pop()
        nodes.append((i0, j0, int(best_label[i0, j0])))
        if i0 < j0:
            m = int(best_split[i0, j0])
            stack.append((m + 1, j0))
            stack.append((i0, m))
    return FullTree(n=n, nodes=tuple(nodes))


def extract_entities(tree: FullTree, schema: LabelSchema) -> list[Span]:
    """Tree nodes carrying observed labels, in document order."""
    return [
        Span(i, j, k) for i, j, k in tree.nodes if k < schema.n_observed
    ]


def tree_score(chart: ScoreChart, tree: FullTree) -> float:
    """Sum of a tree's node potentials.

    Associates the sum exactly as the chart recursions do
    (node + (left subtree + right subtree)), so a decoded tree's score is
    bit-identical to the decoder's root value.
    """
    if tree.n != chart.n:
        raise DimensionMismatch(f"tree over {tree.n} tokens, chart over {chart.n}")
    s = chart.s
    label = tree.label_of()

    def rec(i: int, j: int) -> float:
        v = s[i, j, label[(i, j)]]
        if i == j:
            return float(v)
        m = tree.splits[(i, j)]
        return float(v + (rec(i, m) + rec(m + 1, j)))

    return rec(0, tree.n - 1)


def mask_from_full_tree(tree: FullTree, schema: LabelSchema) -> ChartMask:
    """Mask admitting exactly one full tree: 1 at each node, 0 elsewhere.

    Feeding this to :func:`masked_inside` recovers plain bottom-up
    evaluation of that tree.
    """
    m = np.zeros((tree.n, tree.n, schema.n_labels))
    for i, j, k in tree.nodes:
        m[i, j, k] = 1.0
    return ChartMask(n=tree.n, m=m)


def batched_masked_inside(
    charts: Sequence[ScoreChart],
    masks: Sequence[ChartMask],
    threads: int = 1,
) -> np.ndarray:
    """Masked inside over a batch of sentences in one padded computation.

    Sentences are padded to the longest length; padded cells carry all-zero
    masks (LOG_ZERO potentials) and cannot influence any in-range cell,
    because a cell's split sum only reads cells inside its own span.  Each
    sentence's result is read at its own root cell, so values are bitwise
    identical to the per-sentence computation regardless of batch
    composition or thread count.
    """
    if len(charts) != len(masks):
        raise DimensionMismatch("need one mask per chart")
    if not charts:
        return np.zeros(0)
    n_labels = charts[0].s.shape[2]
    lengths = []
    for chart, mask in zip(charts, masks):
        _require_nonempty(chart.n)
        _check_mask(chart, mask)
        if chart.s.shape[2] != n_labels:
            raise DimensionMismatch("charts in a batch must share a label count")
        lengths.append(chart.n)
    n_max = max(lengths)
    batch = len(charts)
    sp = np.full((batch, n_max, n_max, n_labels), LOG_ZERO)
    for b, (chart, mask) in enumerate(zip(charts, masks)):
        nb = chart.n
        sp[b, :nb, :nb, :] = _apply_mask(chart.s, mask.m)

    def run(block: np.ndarray) -> np.ndarray:
        bs = block.shape[0]
        beta = np.full((bs, n_max, n_max), LOG_ZERO)
        for w in range(1, n_max + 1):
            i = np.arange(n_max - w + 1)
            j = i + w - 1
            a = _lse(block[:, i, j, :], axis=2)
            if w == 1:
                beta[:, i, j] = a
                continue
            t = np.arange(w - 1)
            left = beta[:, i[:, None], i[:, None] + t[None, :]]
            right = beta[:, i[:, None] + t[None, :] + 1, j[:, None]]
            beta[:, i, j] = a + _lse(left + right, axis=2)
        return beta

    if threads <= 1 or batch == 1:
        beta_all = run(sp)
    else:
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.arange(batch), min(threads, batch))
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(lambda ix: run(sp[ix]), chunks))
        beta_all = np.concatenate(parts, axis=0)
    return np.array(
        [beta_all[b, 0, lengths[b] - 1] for b in range(batch)], dtype=np.float64
    )
