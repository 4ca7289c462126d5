"""Max-flow/min-cut on directed graphs and multi-label alpha-expansion for
grid MRFs with metric pairwise costs."""

from __future__ import annotations

import numpy as np
from numba import njit

SOURCE = -1
SINK = -2
MAX_PASSES = 10


class FlowGraph:
    """Directed flow network over integer nodes plus source/sink terminals.

    Every arc is stored with a paired zero-capacity reverse arc so residual
    updates are index arithmetic (arc i pairs with i ^ 1).
    """

    def __init__(self, n_nodes: int):
        if n_nodes < 0:
            raise ValueError("node count must be nonnegative")
        self.n_nodes = n_nodes
        self._from: list[int] = []
        self._to: list[int] = []
        self._cap: list[float] = []
        self.base_flow = 0.0  # direct source->sink arcs are trivially saturated

    def _resolve(self, node: int) -> int:
        if node == SOURCE:
            return self.n_nodes
        if node == SINK:
            return self.n_nodes + 1
        if not 0 <= node < self.n_nodes:
            raise ValueError(f"node {node} out of range")
        return node

    def add_edge(self, u: int, v: int, capacity: float, rev_capacity: float = 0.0):
        if capacity < 0 or rev_capacity < 0:
            raise ValueError("capacities must be nonnegative")
        if u == v:
            raise ValueError("self-loops are not allowed")
        if {u, v} == {SOURCE, SINK}:
            self.base_flow += capacity if u == SOURCE else rev_capacity
            return
        ui, vi = self._resolve(u), self._resolve(v)
        self._from += [ui, vi]
        self._to += [vi, ui]
        self._cap += [float(capacity), float(rev_capacity)]

    def arrays(self):
        n = self.n_nodes + 2
        m = len(self._to)
        head = np.full(n, -1, dtype=np.int64)
        nxt = np.full(m, -1, dtype=np.int64)
        to = np.array(self._to, dtype=np.int64) if m else np.empty(0, np.int64)
        cap = np.array(self._cap, dtype=np.float64) if m else np.empty(0)
        for e in range(m - 1, -1, -1):
            u = self._from[e]
            nxt[e] = head[u]
            head[u] = e
        return head, nxt, to, cap


@njit(cache=True)
def _bfs_levels(n, head, nxt, to, cap, s, t, level, queue):
    level[:] = -1
    level[s] = 0
    queue[0] = s
    qh, qt = 0, 1
    while qh < qt:
        v = queue[qh]
        qh += 1
        e = head[v]
        while e != -1:
            w = to[e]
            if cap[e] > 1e-12 and level[w] == -1:
                level[w] = level[v] + 1
                queue[qt] = w
                qt += 1
            e = nxt[e]
    return level[t] != -1


@njit(cache=True)
def _dinic(n, head, nxt, to, cap, s, t):
    level = np.empty(n, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    iters = np.empty(n, dtype=np.int64)
    stack = np.empty(n + 1, dtype=np.int64)  # edge indices along the path
    flow = 0.0
    while _bfs_levels(n, head, nxt, to, cap, s, t, level, queue):
        for i in range(n):
            iters[i] = head[i]
        while True:
            # grow a path from s through the level graph
            depth = 0
            v = s
            reached = False
            while True:
                if v == t:
                    reached = True
                    break
                e = iters[v]
                found = False
                while e != -1:
                    if cap[e] > 1e-12 and level[to[e]] == level[v] + 1:
                        found = True
                        break
                    e = nxt[e]
                iters[v] = e
                if found:
                    stack[depth] = e
                    depth += 1
                    v = to[e]
                else:
                    if depth == 0:
                        break
                    level[v] = -1  # dead end: prune from the level graph
                    depth -= 1
                    v = s if depth == 0 else to[stack[depth - 1]]
                    e2 = stack[depth]
                    iters[v] = nxt[e2] if v != s else iters[s]
                    if v == s:
                        iters[s] = nxt[e2]
            if not reached:
                break
            bottleneck = np.inf
            for i in range(depth):
                e = stack[i]
                if cap[e] < bottleneck:
                    bottleneck = cap[e]
            for i in range(depth):
                e = stack[i]
                cap[e] -= bottleneck
                cap[e ^ 1] += bottleneck
            flow += bottleneck
    return flow


def max_flow(g: FlowGraph):
    """Maximum s-t flow and the source-side indicator of a minimum cut.

    The returned flow is checked against the capacity of the induced cut
    (max-flow = min-cut) before returning.
    """
    head, nxt, to, cap = g.arrays()
    n = g.n_nodes + 2
    s, t = g.n_nodes, g.n_nodes + 1
    residual = cap.copy()
    flow = _dinic(n, head, nxt, to, residual, s, t) if len(to) else 0.0
    # source side = nodes reachable in the residual network
    level = np.empty(n, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    _bfs_levels(n, head, nxt, to, residual, s, t, level, queue)
    side = level[:g.n_nodes] != -1
    reach = level != -1
    frm = np.array(g._from, dtype=np.int64) if len(to) else np.empty(0, np.int64)
    cut = float(np.sum(cap[(reach[frm]) & (~reach[to])])) if len(to) else 0.0
    if abs(cut - flow) > 1e-6 * max(1.0, abs(flow)):
        raise AssertionError(f"max-flow {flow} != min-cut {cut}")
    return flow + g.base_flow, side


def smoothness_cost(l1: int, l2: int, r: float = 0.8) -> float:
    """Label-difference penalty 1 - r^|l1 - l2| (0 for equal labels)."""
    return 1.0 - r ** abs(int(l1) - int(l2))


def _check_metric(pairwise, n_labels: int):
    for a in range(n_labels):
        if pairwise(a, a) != 0:
            raise ValueError("pairwise cost must vanish on equal labels")
        for b in range(n_labels):
            v = pairwise(a, b)
            if a != b and v <= 0:
                raise ValueError("pairwise cost must be positive for a != b")
            if abs(v - pairwise(b, a)) > 1e-12:
                raise ValueError("pairwise cost must be symmetric")
            for c in range(n_labels):
                if v > pairwise(a, c) + pairwise(c, b) + 1e-12:
                    raise ValueError("pairwise cost violates the triangle "
                                     "inequality (not a metric)")


def mrf_energy(labels: np.ndarray, data_costs: np.ndarray, pairwise,
               lam: float) -> float:
    """Total MRF energy: data terms plus 4-neighborhood pairwise terms."""
    h, w = labels.shape
    ii, jj = np.mgrid[0:h, 0:w]
    energy = float(data_costs[ii, jj, labels].sum())
    n_labels = data_costs.shape[2]
    table = np.array([[pairwise(a, b) for b in range(n_labels)]
                      for a in range(n_labels)])
    energy += lam * float(table[labels[:, :-1], labels[:, 1:]].sum())
    energy += lam * float(table[labels[:-1, :], labels[1:, :]].sum())
    return energy


def _expansion_move(labels, data_costs, table, lam, alpha):
    """One alpha-expansion as a binary min-cut; returns the proposed labels."""
    h, w = labels.shape
    n = h * w
    flat = labels.ravel()
    idx = np.arange(n).reshape(h, w)
    g = FlowGraph(n)
    # unary terms: theta(0) = keep current label, theta(1) = switch to alpha
    theta0 = data_costs.reshape(n, -1)[np.arange(n), flat].astype(float)
    theta1 = data_costs.reshape(n, -1)[:, alpha].astype(float)
    # pairwise reduction: E00=A, E01=B, E10=C, E11=0 with edge cap B+C-A
    for p, q in ((idx[:, :-1].ravel(), idx[:, 1:].ravel()),
                 (idx[:-1, :].ravel(), idx[1:, :].ravel())):
        A = lam * table[flat[p], flat[q]]
        B = lam * table[flat[p], alpha]
        C = lam * table[alpha, flat[q]]
        theta1[p] += C - A
        theta1[q] += 0.0 - C
        edge = B + C - A  # submodular for a metric, so nonnegative
        for pp, qq, ww in zip(p, q, edge):
            if ww > 1e-15:
                g.add_edge(int(pp), int(qq), float(ww))
    shift = np.minimum(theta0, np.minimum(theta1, 0.0))
    t0 = theta0 - shift
    t1 = theta1 - shift
    for i in range(n):
        if t1[i] > 1e-15:
            g.add_edge(SOURCE, int(i), float(t1[i]))
        if t0[i] > 1e-15:
            g.add_edge(int(i), SINK, float(t0[i]))
    _, side = max_flow(g)
    out = flat.copy()
    out[~side] = alpha  # sink side takes the new label
    return out.reshape(h, w)


def alpha_expansion(data_costs: np.ndarray, pairwise, lam: float,
                    init_labels: np.ndarray | None = None,
                    max_passes: int = MAX_PASSES) -> np.ndarray:
    """Minimize data + lam * pairwise over a 4-connected grid.

    data_costs is (H, W, L). Labels are expanded in ascending order until a
    full pass accepts no move; moves are accepted only when they strictly
    decrease the energy.
    """
    data_costs = np.asarray(data_costs, dtype=float)
    if data_costs.ndim != 3:
        raise ValueError("data_costs must be (H, W, n_labels)")
    n_labels = data_costs.shape[2]
    _check_metric(pairwise, n_labels)
    table = np.array([[pairwise(a, b) for b in range(n_labels)]
                      for a in range(n_labels)])
    if init_labels is None:
        labels = np.argmin(data_costs, axis=2).astype(np.int64)
    else:
        labels = np.asarray(init_labels, dtype=np.int64).copy()
    if lam == 0 or n_labels == 1:
        return np.argmin(data_costs, axis=2).astype(np.int64)
    energy = mrf_energy(labels, data_costs, pairwise, lam)
    for _ in range(max_passes):
        changed = False
        for alpha in range(n_labels):
            proposal = _expansion_move(labels, data_costs, table, lam, alpha)
            new_energy = mrf_energy(proposal, data_costs, pairwise, lam)
            if new_energy < energy - 1e-12:
                labels, energy = proposal, new_energy
                changed = True
        if not changed:
            break
    return labels
