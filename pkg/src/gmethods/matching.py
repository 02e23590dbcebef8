"""Optimal full matching on the logit of the propensity score.

A full match partitions every unit into subclasses that each hold one treated
unit with one or more controls, or one control with one or more treated units.
The total within-subclass distance is the sum of the star edges, so an optimal
full match is a minimum-weight edge cover of the complete bipartite
treated-by-control graph.

Two exact solvers are provided. The default treats the cover as a min-cost
flow on the sorted line of scores: every treated unit emits at least one unit,
every control absorbs at least one, and flow pays the gap it crosses. A
dynamic program over the net flow across each gap solves it in
``O(n * bound)``. The ``"assignment"`` solver uses the classical reduction to
maximum-weight bipartite matching (gains ``m_u + m_v - d(u, v)``, with ``m_v``
the cheapest edge at ``v``) on a dense distance matrix and is meant for
small samples and cross-checks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import logit

from .glm import clip_prob


class Estimand(str, enum.Enum):
    ATE = "ATE"
    ATT = "ATT"


@dataclass(frozen=True)
class FullMatch:
    subclass: np.ndarray
    n_subclasses: int
    total_distance: float
    method: str = "optimal"


@dataclass(frozen=True)
class MatchWeights:
    w: np.ndarray
    estimand: Estimand


def _validate(ps_hat, a):
    ps_hat = np.asarray(ps_hat, dtype=float)
    a = np.asarray(a).astype(int)
    if ps_hat.shape != a.shape or ps_hat.ndim != 1:
        raise ValueError("ps_hat and a must be 1-D arrays of equal length")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("treatment must be binary")
    if a.sum() == 0 or a.sum() == a.size:
        raise ValueError("full matching needs at least one treated and one control unit")
    return ps_hat, a


def _canonical_order(score, a):
    # sort by score, then arm, then original index so row permutations only
    # matter when two units agree on both score and arm
    return np.lexsort((np.arange(score.size), a, score))


def _label_components(n, edges, order):
    rows = np.array([e[0] for e in edges], dtype=np.int64)
    cols = np.array([e[1] for e in edges], dtype=np.int64)
    graph = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    # relabel 0..K-1 by first appearance in canonical order
    relabel = {}
    out = np.empty(n, dtype=np.int64)
    for i in order:
        c = comp[i]
        if c not in relabel:
            relabel[c] = len(relabel)
        out[i] = relabel[c]
    return out


def _prune_to_stars(edges, n):
    # an edge whose ends both have degree >= 2 is redundant in a cover; only
    # zero-length ties can leave such edges behind
    edges = list(edges)
    deg = np.zeros(n, dtype=np.int64)
    for u, v, _ in edges:
        deg[u] += 1
        deg[v] += 1
    changed = True
    while changed:
        changed = False
        for k, (u, v, d) in enumerate(edges):
            if deg[u] >= 2 and deg[v] >= 2:
                deg[u] -= 1
                deg[v] -= 1
                edges.pop(k)
                changed = True
                break
    return edges


def full_match(ps_hat, a, solver: str = "flow", max_optimal_size: Optional[int] = None) -> FullMatch:
    """Optimal full match on ``|logit(ps_i) - logit(ps_j)|``.

    Samples larger than ``max_optimal_size`` fall back to
    :func:`greedy_full_match`; by default the optimal solver is always used.
    """
    ps_hat, a = _validate(ps_hat, a)
    if max_optimal_size is not None and a.size > max_optimal_size:
        return greedy_full_match(ps_hat, a)
    score = logit(clip_prob(ps_hat))
    order = _canonical_order(score, a)
    if solver == "flow":
        edges = _line_flow_cover(score, a, order)
    elif solver == "assignment":
        edges = _assignment_cover(score, a, order)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    n = a.size
    edges = _prune_to_stars(sorted(set((int(u), int(v), float(d)) for u, v, d in edges)), n)
    subclass = _label_components(n, edges, order)
    total = float(sum(d for _, _, d in edges))
    return FullMatch(subclass=subclass, n_subclasses=int(subclass.max()) + 1, total_distance=total)


def _assignment_cover(score, a, order):
    t_idx = order[a[order] == 1]
    c_idx = order[a[order] == 0]
    dist = np.abs(score[t_idx][:, None] - score[c_idx][None, :])
    # argmin returns the first minimum, i.e. the lowest canonical position
    t_near = np.argmin(dist, axis=1)
    c_near = np.argmin(dist, axis=0)
    m_t = dist[np.arange(t_idx.size), t_near]
    m_c = dist[c_near, np.arange(c_idx.size)]
    gain = m_t[:, None] + m_c[None, :] - dist
    np.maximum(gain, 0.0, out=gain)
    rows, cols = linear_sum_assignment(gain, maximize=True)
    keep = gain[rows, cols] > 0
    rows, cols = rows[keep], cols[keep]

    edges = []
    covered_t = np.zeros(t_idx.size, dtype=bool)
    covered_c = np.zeros(c_idx.size, dtype=bool)
    for r, c in zip(rows, cols):
        edges.append((t_idx[r], c_idx[c], dist[r, c]))
        covered_t[r] = covered_c[c] = True
    for r in np.flatnonzero(~covered_t):
        c = t_near[r]
        edges.append((t_idx[r], c_idx[c], dist[r, c]))
    for c in np.flatnonzero(~covered_c):
        r = c_near[c]
        edges.append((t_idx[r], c_idx[c], dist[r, c]))
    return edges


def _line_flow_dp(x, treated, bound):
    """Net flow across each gap of the sorted line, or None if ``bound`` binds.

    ``flow[i]`` is the net flow to the right between sorted positions i-1 and
    i (``flow[0] = flow[n] = 0``). Treated positions raise it by at least
    one, controls lower it by at least one; the cost is the sum of
    ``gap * |flow|``. Pointers keep the argmin for backtracking.
    """
    n = x.size
    m = 2 * bound + 1
    pos = np.arange(m)
    absf = np.abs(pos - bound).astype(float)
    gaps = np.diff(x)
    inf = np.inf
    V = np.full(m, inf)
    V[bound] = 0.0
    ptr = np.empty((n, m), dtype=np.int32)
    W = np.empty(m)
    for i in range(n):
        if treated[i]:
            P = np.minimum.accumulate(V)
            arg = np.maximum.accumulate(np.where(V <= P, pos, 0))
            W[0] = inf
            W[1:] = P[:-1]
            ptr[i, 0] = 0
            ptr[i, 1:] = arg[:-1]
        else:
            Vr = V[::-1]
            P = np.minimum.accumulate(Vr)
            arg = (m - 1 - np.maximum.accumulate(np.where(Vr <= P, pos, 0)))[::-1]
            P = P[::-1]
            W[-1] = inf
            W[:-1] = P[1:]
            ptr[i, -1] = m - 1
            ptr[i, :-1] = arg[1:]
        V = W + gaps[i] * absf if i < n - 1 else W.copy()
    if not np.isfinite(V[bound]):
        return None
    flow = np.zeros(n + 1, dtype=np.int64)
    j = bound
    for i in range(n - 1, -1, -1):
        flow[i + 1] = j - bound
        j = ptr[i, j]
    if np.max(np.abs(flow)) >= bound:
        return None
    return flow


def _line_flow_cover(score, a, order):
    x = score[order]
    treated = a[order] == 1
    n = x.size
    bound = 16
    while True:
        bound = min(bound, n)
        flow = _line_flow_dp(x, treated, bound)
        # a solution strictly inside the box is optimal for the unbounded
        # convex problem too
        if flow is not None or bound >= n:
            break
        bound *= 2
    if flow is None:
        raise RuntimeError("line flow solver failed to find a feasible cover")
    net = np.diff(flow)
    edges = []
    stack = []  # pending (sorted position, units); all of one arm at any time
    for i in range(n):
        units = int(abs(net[i]))
        while units and stack and treated[stack[-1][0]] != treated[i]:
            j, k = stack[-1]
            take = min(k, units)
            ti, ci = (order[j], order[i]) if treated[j] else (order[i], order[j])
            edges.append((ti, ci, float(x[i] - x[j])))
            units -= take
            if take == k:
                stack.pop()
            else:
                stack[-1] = (j, k - take)
        if units:
            stack.append((i, units))
    if stack:
        raise RuntimeError("unbalanced flow decomposition")
    return edges


def greedy_full_match(ps_hat, a) -> FullMatch:
    """Sweep over sorted logit-PS, closing a subclass whenever both arms are present.

    Trailing single-arm units join the nearest subclass. Satisfies the same
    structural guarantees as the optimal match but not its optimality.
    """
    ps_hat, a = _validate(ps_hat, a)
    score = logit(clip_prob(ps_hat))
    order = _canonical_order(score, a)
    n = a.size
    subclass = np.full(n, -1, dtype=np.int64)
    blocks = []
    current = []
    for i in order:
        current.append(i)
        arms = {int(a[j]) for j in current}
        if len(arms) == 2:
            blocks.append(current)
            current = []
    if current:
        if blocks:
            blocks[-1].extend(current)
        else:
            blocks.append(current)
    for k, b in enumerate(blocks):
        subclass[b] = k
    total = 0.0
    for b in blocks:
        b = np.asarray(b)
        t = score[b[a[b] == 1]]
        c = score[b[a[b] == 0]]
        # star cost: hub is the singleton side, or the best hub when both sides are plural
        if t.size == 1:
            total += float(np.abs(c - t[0]).sum())
        elif c.size == 1:
            total += float(np.abs(t - c[0]).sum())
        else:
            total += float(np.abs(t[:, None] - c[None, :]).sum())
    return FullMatch(subclass=subclass, n_subclasses=len(blocks), total_distance=total, method="greedy")


def subclass_counts(subclass, a):
    subclass = np.asarray(subclass)
    a = np.asarray(a).astype(int)
    k = int(subclass.max()) + 1
    n1 = np.bincount(subclass, weights=a, minlength=k)
    nk = np.bincount(subclass, minlength=k).astype(float)
    return n1, nk - n1, nk


def match_weights(m: FullMatch, a, estimand) -> MatchWeights:
    """Stratum weights from the within-subclass share of treated units.

    ATE: treated ``n_k / n_1k``, controls ``n_k / n_0k``.
    ATT: treated 1, controls ``n_1k / n_0k``.
    """
    estimand = Estimand(estimand)
    a = np.asarray(a).astype(int)
    n1, n0, nk = subclass_counts(m.subclass, a)
    s = m.subclass
    if estimand is Estimand.ATE:
        w = np.where(a == 1, nk[s] / n1[s], nk[s] / n0[s])
    else:
        w = np.where(a == 1, 1.0, n1[s] / n0[s])
    return MatchWeights(w=w, estimand=estimand)
