"""Semiring chart parser for projective dependency trees with valence.

The generative story: ROOT picks exactly one token (``root`` scores),
every head emits dependents outward in each direction, paying a
CONTINUE score before each emission and one STOP score when done;
valence distinguishes the first emission in a direction (adjacent) from
later ones (non-adjacent). A tree's score is the sum of its root,
attach, and stop/continue terms.

The dynamic program uses a split-head decomposition: each head owns a
left and a right cone that grow independently, so the full recursion
stays O(n^3) with a constant factor for the two valence states. Cells:

  ro[v][i][j]  head i, right cone over i..j, v = min(#right deps, 1), no stop yet
  lo[v][i][j]  head j, left cone over i..j
  rc[i][j]     right cone closed by its STOP term (lc mirrors)
  ir[i][j]     arc i->j just built: paid CONTINUE + attach, dependent's
               left side closed; the dependent's right side is attached
               when the item extends the head's cone (il mirrors)

Everything is log-space double precision. Impossible items carry a
large negative sentinel rather than -inf so sums never produce NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

NEG = -1.0e30
_IMPOSSIBLE = -1.0e25
LEFT, RIGHT = 0, 1
ADJ, NONADJ = 0, 1

_ENUM_CAP = 8


def _lse(values) -> float:
    m = max(values)
    if m <= _IMPOSSIBLE:
        return NEG
    acc = 0.0
    for v in values:
        if v > _IMPOSSIBLE:
            acc += math.exp(v - m)
    return m + math.log(acc)


@dataclass(frozen=True)
class DmvScores:
    """Log-score tables for one sentence of length n.

    ``attach[h][d]`` scores head h taking dependent d (1-based; row 0 is
    unused, ROOT attachment is scored by ``root`` alone). ``stop`` and
    ``cont`` are indexed [head][direction][valence] with direction 0 =
    left, 1 = right and valence 0 = adjacent, 1 = non-adjacent.
    """

    attach: np.ndarray
    stop: np.ndarray
    cont: np.ndarray
    root: np.ndarray

    def __post_init__(self):
        n = self.n
        if self.attach.shape != (n + 1, n + 1):
            raise ValueError(f"attach must be square over n+1={n + 1}")
        if self.stop.shape != (n + 1, 2, 2) or self.cont.shape != (n + 1, 2, 2):
            raise ValueError("stop/cont must have shape (n+1, 2, 2)")
        for name, arr in (("attach", self.attach), ("stop", self.stop),
                          ("cont", self.cont), ("root", self.root)):
            if np.isnan(arr).any() or np.isposinf(arr).any():
                raise ValueError(f"{name} contains NaN or +inf")

    @property
    def n(self) -> int:
        return self.root.shape[0] - 1


def random_scores(n: int, rng: np.random.Generator, scale: float = 1.0) -> DmvScores:
    """Dense random score tables, handy for oracle tests and benchmarks."""
    return DmvScores(
        attach=rng.normal(0.0, scale, (n + 1, n + 1)),
        stop=rng.normal(0.0, scale, (n + 1, 2, 2)),
        cont=rng.normal(0.0, scale, (n + 1, 2, 2)),
        root=rng.normal(0.0, scale, (n + 1,)),
    )


def score_tree(scores: DmvScores, heads: Sequence[int]) -> float:
    """Score one tree directly from the generative story.

    Independent of the chart recursion; the oracle tests rely on that.
    """
    n = len(heads)
    roots = [d for d in range(1, n + 1) if heads[d - 1] == 0]
    if len(roots) != 1:
        raise ValueError("tree must have exactly one root")
    total = float(scores.root[roots[0]])
    ndeps = [[0, 0] for _ in range(n + 1)]
    for d in range(1, n + 1):
        h = heads[d - 1]
        if h == 0:
            continue
        total += float(scores.attach[h][d])
        ndeps[h][RIGHT if d > h else LEFT] += 1
    for h in range(1, n + 1):
        for direction in (LEFT, RIGHT):
            k = ndeps[h][direction]
            if k == 0:
                total += float(scores.stop[h][direction][ADJ])
            else:
                total += float(scores.cont[h][direction][ADJ])
                total += (k - 1) * float(scores.cont[h][direction][NONADJ])
                total += float(scores.stop[h][direction][NONADJ])
    return total


@dataclass
class Chart:
    """Inside tables plus the log partition; backpointers only for Viterbi."""

    n: int
    log_partition: float
    tables: dict = field(default_factory=dict)
    backpointers: Optional[dict] = None


def _grids(n: int):
    return [[[NEG] * (n + 1) for _ in range(n + 1)] for _ in range(2)], \
           [[[NEG] * (n + 1) for _ in range(n + 1)] for _ in range(2)], \
           [[NEG] * (n + 1) for _ in range(n + 1)], \
           [[NEG] * (n + 1) for _ in range(n + 1)], \
           [[NEG] * (n + 1) for _ in range(n + 1)], \
           [[NEG] * (n + 1) for _ in range(n + 1)]


def inside(scores: DmvScores, n: Optional[int] = None) -> tuple[float, Chart]:
    """Log-sum over all single-root projective trees.

    Matches brute-force enumeration over :func:`enumerate_projective_trees`
    within 1e-9 for all n the enumerator supports.
    """
    if n is None:
        n = scores.n
    if n < 1:
        raise ValueError("need at least one token")
    if scores.n != n:
        raise ValueError(f"scores dimensioned for n={scores.n}, asked for n={n}")
    att = scores.attach.tolist()
    stp = scores.stop.tolist()
    cnt = scores.cont.tolist()
    rro, llo, rc, lc, ir, il = _grids(n)

    for i in range(1, n + 1):
        rro[ADJ][i][i] = 0.0
        llo[ADJ][i][i] = 0.0
        rc[i][i] = stp[i][RIGHT][ADJ]
        lc[i][i] = stp[i][LEFT][ADJ]

    for span in range(1, n):
        for i in range(1, n + 1 - span):
            j = i + span
            # arc i -> j
            acc = []
            for k in range(i, j):
                closed = lc[k + 1][j]
                if closed <= _IMPOSSIBLE:
                    continue
                for v in (ADJ, NONADJ):
                    open_cone = rro[v][i][k]
                    if open_cone > _IMPOSSIBLE:
                        acc.append(open_cone + cnt[i][RIGHT][v] + closed)
            ir[i][j] = _lse(acc) + att[i][j] if acc else NEG
            # arc j -> i
            acc = []
            for k in range(i + 1, j + 1):
                closed = rc[i][k - 1]
                if closed <= _IMPOSSIBLE:
                    continue
                for v in (ADJ, NONADJ):
                    open_cone = llo[v][k][j]
                    if open_cone > _IMPOSSIBLE:
                        acc.append(open_cone + cnt[j][LEFT][v] + closed)
            il[i][j] = _lse(acc) + att[j][i] if acc else NEG
            # extend head cones with the new dependent's remaining half
            acc = [ir[i][m] + rc[m][j] for m in range(i + 1, j + 1)
                   if ir[i][m] > _IMPOSSIBLE and rc[m][j] > _IMPOSSIBLE]
            rro[NONADJ][i][j] = _lse(acc) if acc else NEG
            acc = [il[m][j] + lc[i][m] for m in range(i, j)
                   if il[m][j] > _IMPOSSIBLE and lc[i][m] > _IMPOSSIBLE]
            llo[NONADJ][i][j] = _lse(acc) if acc else NEG
            rc[i][j] = rro[NONADJ][i][j] + stp[i][RIGHT][NONADJ]
            lc[i][j] = llo[NONADJ][i][j] + stp[j][LEFT][NONADJ]

    rt = scores.root.tolist()
    terms = [rt[r] + lc[1][r] + rc[r][n] for r in range(1, n + 1)
             if lc[1][r] > _IMPOSSIBLE and rc[r][n] > _IMPOSSIBLE]
    log_z = _lse(terms) if terms else NEG
    chart = Chart(n=n, log_partition=log_z,
                  tables={"ro": rro, "lo": llo, "rc": rc, "lc": lc, "ir": ir, "il": il})
    return log_z, chart


def arc_posteriors(scores: DmvScores, n: Optional[int] = None,
                   chart: Optional[Chart] = None) -> np.ndarray:
    """Marginal arc probabilities P[h][d] under the chart distribution.

    Row 0 holds ROOT-arc posteriors. Computed as the adjoint of the
    inside recursion, i.e. the derivative of the log partition with
    respect to each attach/root score; columns sum to 1 over heads.
    """
    if n is None:
        n = scores.n
    if chart is None:
        _, chart = inside(scores, n)
    grads = inside_adjoint(scores, chart)
    post = np.zeros((n + 1, n + 1))
    post[1:, 1:] = grads["attach"][1:, 1:]
    post[0, 1:] = grads["root"][1:]
    return post


def inside_adjoint(scores: DmvScores, chart: Chart) -> dict[str, np.ndarray]:
    """d log_partition / d score for every score table.

    The returned attach/root gradients are exactly the arc posteriors;
    stop/cont gradients are expected decision counts. This is the chart
    half of the training-time gradient cross-check.
    """
    n = chart.n
    log_z = chart.log_partition
    t = chart.tables
    rro, llo, rc, lc, ir, il = t["ro"], t["lo"], t["rc"], t["lc"], t["ir"], t["il"]
    att = scores.attach.tolist()
    stp = scores.stop.tolist()
    cnt = scores.cont.tolist()
    rt = scores.root.tolist()

    g_ro = [[[0.0] * (n + 1) for _ in range(n + 1)] for _ in range(2)]
    g_lo = [[[0.0] * (n + 1) for _ in range(n + 1)] for _ in range(2)]
    g_rc = [[0.0] * (n + 1) for _ in range(n + 1)]
    g_lc = [[0.0] * (n + 1) for _ in range(n + 1)]
    g_ir = [[0.0] * (n + 1) for _ in range(n + 1)]
    g_il = [[0.0] * (n + 1) for _ in range(n + 1)]
    g_att = np.zeros((n + 1, n + 1))
    g_stop = np.zeros((n + 1, 2, 2))
    g_cont = np.zeros((n + 1, 2, 2))
    g_root = np.zeros(n + 1)

    if log_z <= _IMPOSSIBLE:
        return {"attach": g_att, "stop": g_stop, "cont": g_cont, "root": g_root}

    for r in range(1, n + 1):
        if lc[1][r] <= _IMPOSSIBLE or rc[r][n] <= _IMPOSSIBLE:
            continue
        w = math.exp(rt[r] + lc[1][r] + rc[r][n] - log_z)
        g_root[r] += w
        g_lc[1][r] += w
        g_rc[r][n] += w

    for span in range(n - 1, -1, -1):
        for i in range(1, n + 1 - span):
            j = i + span
            # closed cones distribute into open cones + their stop terms
            g = g_rc[i][j]
            if g > 0.0 and rc[i][j] > _IMPOSSIBLE:
                for v in (ADJ, NONADJ):
                    if rro[v][i][j] > _IMPOSSIBLE:
                        w = g * math.exp(rro[v][i][j] + stp[i][RIGHT][v] - rc[i][j])
                        g_ro[v][i][j] += w
                        g_stop[i][RIGHT][v] += w
            g = g_lc[i][j]
            if g > 0.0 and lc[i][j] > _IMPOSSIBLE:
                for v in (ADJ, NONADJ):
                    if llo[v][i][j] > _IMPOSSIBLE:
                        w = g * math.exp(llo[v][i][j] + stp[j][LEFT][v] - lc[i][j])
                        g_lo[v][i][j] += w
                        g_stop[j][LEFT][v] += w
            if span == 0:
                continue
            # cone extensions distribute into arc items + dependent halves
            g = g_ro[NONADJ][i][j]
            if g > 0.0 and rro[NONADJ][i][j] > _IMPOSSIBLE:
                for m in range(i + 1, j + 1):
                    if ir[i][m] > _IMPOSSIBLE and rc[m][j] > _IMPOSSIBLE:
                        w = g * math.exp(ir[i][m] + rc[m][j] - rro[NONADJ][i][j])
                        g_ir[i][m] += w
                        g_rc[m][j] += w
            g = g_lo[NONADJ][i][j]
            if g > 0.0 and llo[NONADJ][i][j] > _IMPOSSIBLE:
                for m in range(i, j):
                    if il[m][j] > _IMPOSSIBLE and lc[i][m] > _IMPOSSIBLE:
                        w = g * math.exp(il[m][j] + lc[i][m] - llo[NONADJ][i][j])
                        g_il[m][j] += w
                        g_lc[i][m] += w
            # arc items distribute into head cones, continue terms, attach
            g = g_ir[i][j]
            if g > 0.0 and ir[i][j] > _IMPOSSIBLE:
                g_att[i][j] += g
                for k in range(i, j):
                    closed = lc[k + 1][j]
                    if closed <= _IMPOSSIBLE:
                        continue
                    for v in (ADJ, NONADJ):
                        if rro[v][i][k] > _IMPOSSIBLE:
                            w = g * math.exp(rro[v][i][k] + cnt[i][RIGHT][v]
                                             + closed + att[i][j] - ir[i][j])
                            g_ro[v][i][k] += w
                            g_cont[i][RIGHT][v] += w
                            g_lc[k + 1][j] += w
            g = g_il[i][j]
            if g > 0.0 and il[i][j] > _IMPOSSIBLE:
                g_att[j][i] += g
                for k in range(i + 1, j + 1):
                    closed = rc[i][k - 1]
                    if closed <= _IMPOSSIBLE:
                        continue
                    for v in (ADJ, NONADJ):
                        if llo[v][k][j] > _IMPOSSIBLE:
                            w = g * math.exp(llo[v][k][j] + cnt[j][LEFT][v]
                                             + closed + att[j][i] - il[i][j])
                            g_lo[v][k][j] += w
                            g_cont[j][LEFT][v] += w
                            g_rc[i][k - 1] += w

    return {"attach": g_att, "stop": g_stop, "cont": g_cont, "root": g_root}


def viterbi(scores: DmvScores, n: Optional[int] = None) -> tuple[list[int], float]:
    """Best tree and its score under the max semiring.

    Ties are broken by a fixed candidate order (smaller split point,
    adjacent valence, nearer dependent, smaller root index), so results
    are deterministic and reproducible.
    """
    if n is None:
        n = scores.n
    if n < 1:
        raise ValueError("need at least one token")
    if scores.n != n:
        raise ValueError(f"scores dimensioned for n={scores.n}, asked for n={n}")
    att = scores.attach.tolist()
    stp = scores.stop.tolist()
    cnt = scores.cont.tolist()
    rro, llo, rc, lc, ir, il = _grids(n)
    bp_ir = [[None] * (n + 1) for _ in range(n + 1)]
    bp_il = [[None] * (n + 1) for _ in range(n + 1)]
    bp_ro = [[None] * (n + 1) for _ in range(n + 1)]
    bp_lo = [[None] * (n + 1) for _ in range(n + 1)]

    for i in range(1, n + 1):
        rro[ADJ][i][i] = 0.0
        llo[ADJ][i][i] = 0.0
        rc[i][i] = stp[i][RIGHT][ADJ]
        lc[i][i] = stp[i][LEFT][ADJ]

    for span in range(1, n):
        for i in range(1, n + 1 - span):
            j = i + span
            best, arg = NEG, None
            for k in range(i, j):
                closed = lc[k + 1][j]
                if closed <= _IMPOSSIBLE:
                    continue
                for v in (ADJ, NONADJ):
                    if rro[v][i][k] <= _IMPOSSIBLE:
                        continue
                    cand = rro[v][i][k] + cnt[i][RIGHT][v] + closed
                    if cand > best:
                        best, arg = cand, (k, v)
            if arg is not None:
                ir[i][j] = best + att[i][j]
                bp_ir[i][j] = arg
            best, arg = NEG, None
            for k in range(i + 1, j + 1):
                closed = rc[i][k - 1]
                if closed <= _IMPOSSIBLE:
                    continue
                for v in (ADJ, NONADJ):
                    if llo[v][k][j] <= _IMPOSSIBLE:
                        continue
                    cand = llo[v][k][j] + cnt[j][LEFT][v] + closed
                    if cand > best:
                        best, arg = cand, (k, v)
            if arg is not None:
                il[i][j] = best + att[j][i]
                bp_il[i][j] = arg
            best, arg = NEG, None
            for m in range(i + 1, j + 1):
                if ir[i][m] <= _IMPOSSIBLE or rc[m][j] <= _IMPOSSIBLE:
                    continue
                cand = ir[i][m] + rc[m][j]
                if cand > best:
                    best, arg = cand, m
            if arg is not None:
                rro[NONADJ][i][j] = best
                bp_ro[i][j] = arg
            best, arg = NEG, None
            for m in range(i, j):
                if il[m][j] <= _IMPOSSIBLE or lc[i][m] <= _IMPOSSIBLE:
                    continue
                cand = il[m][j] + lc[i][m]
                if cand > best:
                    best, arg = cand, m
            if arg is not None:
                llo[NONADJ][i][j] = best
                bp_lo[i][j] = arg
            rc[i][j] = rro[NONADJ][i][j] + stp[i][RIGHT][NONADJ]
            lc[i][j] = llo[NONADJ][i][j] + stp[j][LEFT][NONADJ]

    rt = scores.root.tolist()
    best, best_r = NEG, None
    for r in range(1, n + 1):
        if lc[1][r] <= _IMPOSSIBLE or rc[r][n] <= _IMPOSSIBLE:
            continue
        cand = rt[r] + lc[1][r] + rc[r][n]
        if cand > best:
            best, best_r = cand, r
    if best_r is None:
        raise ValueError("no valid tree under the given scores")

    heads = [0] * (n + 1)

    def expand_rc(i, j):
        if i != j:
            expand_ro(i, j)

    def expand_lc(i, j):
        if i != j:
            expand_lo(i, j)

    def expand_ro(i, j):
        m = bp_ro[i][j]
        heads[m] = i
        k, _ = bp_ir[i][m]
        # the head's earlier right cone spans i..k; base cone when k == i
        if k > i:
            expand_ro(i, k)
        expand_lc(k + 1, m)
        expand_rc(m, j)

    def expand_lo(i, j):
        m = bp_lo[i][j]
        heads[m] = j
        k, _ = bp_il[m][j]
        if k < j:
            expand_lo(k, j)
        expand_rc(m, k - 1)
        expand_lc(i, m)

    heads[best_r] = 0
    expand_lc(1, best_r)
    expand_rc(best_r, n)
    return heads[1:], best


def enumerate_projective_trees(n: int) -> list[list[int]]:
    """All single-root projective head arrays for n tokens.

    Span-recursive construction: a head's children tile each side of it
    with consecutive blocks, each block rooted at one child. This is
    structurally independent of the parsing recursion, which is the
    point: it is the test oracle.
    """
    if n < 1:
        raise ValueError("need at least one token")
    if n > _ENUM_CAP:
        raise ValueError(f"enumeration capped at n={_ENUM_CAP} to avoid blowup")

    def tile(lo: int, hi: int, parent: int):
        if lo > hi:
            yield {}
            return
        for b in range(lo, hi + 1):
            for c in range(lo, b + 1):
                for inner in span_trees(lo, b, c):
                    base = dict(inner)
                    base[c] = parent
                    for rest in tile(b + 1, hi, parent):
                        out = dict(base)
                        out.update(rest)
                        yield out

    def span_trees(i: int, j: int, h: int):
        for left in tile(i, h - 1, h):
            for right in tile(h + 1, j, h):
                out = dict(left)
                out.update(right)
                yield out

    trees = []
    for r in range(1, n + 1):
        for assignment in span_trees(1, n, r):
            heads = [0] * n
            for d, h in assignment.items():
                heads[d - 1] = h
            trees.append(heads)
    return trees
