"""Cluster identification from converged replicas.

1. Similarity graph over replicas augmented with their potential value.
2. Louvain modularity communities (deterministic sweep order).
3. Centroids, and directed energy barriers between them: the lowest pass
   over a neighbour network of observations and centroids (or, on request,
   the highest point of the Euclidean shortest path).
4. Merging of wells whose barrier is below an energy threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import breadth_first_order, dijkstra, minimum_spanning_tree
from scipy.spatial.distance import cdist

DEFAULT_NEIGHBOURS = 10
EDGE_SAMPLES = 3


class AllocationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Clustering:
    assignment: np.ndarray
    centroids: np.ndarray
    member_sets: tuple
    energy_matrix: np.ndarray
    e_th_used: float = 0.0

    @property
    def k(self) -> int:
        return len(self.member_sets)

    def to_json(self) -> dict:
        E = np.where(np.isfinite(self.energy_matrix), self.energy_matrix, None)
        return {"k": self.k, "centroids": self.centroids.tolist(),
                "energy_matrix": E.tolist(), "e_th_used": self.e_th_used,
                "sizes": [len(s) for s in self.member_sets]}


def _knn_edges(P, m):
    """Symmetric m-NN adjacency (index ties resolved by row order) and distances."""
    n = P.shape[0]
    m = min(m, n - 1)
    D = cdist(P, P)
    np.fill_diagonal(D, np.inf)
    nbr = np.argsort(D, axis=1, kind="stable")[:, :m]
    rows = np.repeat(np.arange(n), m)
    cols = nbr.ravel()
    A = sparse.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
    A = ((A + A.T) > 0).tocoo()
    return A.row, A.col, D[A.row, A.col], D[np.arange(n)[:, None], nbr]


def build_similarity_graph(points, potentials, m: int = DEFAULT_NEIGHBOURS):
    """Gaussian-weighted symmetric m-NN graph over (y_i, V(y_i))."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if n < 2:
        raise AllocationError("similarity graph needs at least two replicas")
    Z = np.column_stack([points, np.asarray(potentials, dtype=float)])
    rows, cols, dist, nn_dist = _knn_edges(Z, m)
    h = float(nn_dist.mean())
    if h <= 0:
        w = np.ones_like(dist)
    else:
        w = np.exp(-dist ** 2 / (2 * h * h))
    return sparse.csr_matrix((w, (rows, cols)), shape=(n, n))


# ---------------------------------------------------------------------------
# Louvain

def _one_level(adj, node_w, total):
    """Local moving phase; returns the community of each node and whether any moved."""
    n = len(adj)
    comm = list(range(n))
    tot = list(node_w)
    two_m = 2.0 * total
    improved = False
    moved = True
    while moved:
        moved = False
        for i in range(n):
            ci = comm[i]
            ki = node_w[i]
            links = {}
            for j, w in adj[i].items():
                if j != i:
                    links[comm[j]] = links.get(comm[j], 0.0) + w
            tot[ci] -= ki
            # staying wins ties; among the others the lowest id wins
            best_c = ci
            best_gain = links.get(ci, 0.0) - tot[ci] * ki / two_m
            for c in sorted(links):
                gain = links[c] - tot[c] * ki / two_m
                if gain > best_gain + 1e-12:
                    best_c, best_gain = c, gain
            tot[best_c] += ki
            if best_c != ci:
                comm[i] = best_c
                moved = improved = True
    return comm, improved


def _renumber(labels):
    mapping = {}
    out = np.empty(len(labels), dtype=int)
    for i, c in enumerate(labels):
        out[i] = mapping.setdefault(c, len(mapping))
    return out


def detect_communities(graph) -> np.ndarray:
    """Louvain modularity maximisation (resolution 1).

    Nodes are swept in ascending id order; a node moves only on a strict gain
    and equal gains favour the lower community id.  Community ids are
    contiguous and ordered by their lowest member.
    """
    G = sparse.csr_matrix(graph)
    n = G.shape[0]
    G = ((G + G.T) * 0.5).tocsr()
    total = G.sum() / 2.0
    if n == 0:
        return np.zeros(0, dtype=int)
    if total <= 0:
        return np.arange(n)
    part = np.arange(n)
    W = G.tocoo()
    while True:
        k = W.shape[0]
        adj = [dict() for _ in range(k)]
        for a, b, w in zip(W.row, W.col, W.data):
            adj[a][b] = adj[a].get(b, 0.0) + w
        node_w = np.asarray(W.sum(axis=1)).ravel().tolist()
        comm, improved = _one_level(adj, node_w, total)
        if not improved:
            break
        comm = _renumber(comm)
        part = comm[part]
        c = comm.max() + 1
        P = sparse.csr_matrix((np.ones(k), (np.arange(k), comm)), shape=(k, c))
        W = (P.T @ W.tocsr() @ P).tocoo()
    return _renumber(part)


def modularity(graph, labels) -> float:
    G = sparse.csr_matrix(graph)
    G = (G + G.T) * 0.5
    two_m = G.sum()
    if two_m <= 0:
        return 0.0
    labels = np.asarray(labels)
    k = np.asarray(G.sum(axis=1)).ravel()
    P = sparse.csr_matrix((np.ones(len(labels)), (np.arange(len(labels)), labels)))
    inner = (P.T @ G @ P).diagonal().sum()
    tot = P.T @ k
    return float(inner / two_m - (tot ** 2).sum() / two_m ** 2)


# ---------------------------------------------------------------------------

def compute_centroids(assignment, points) -> np.ndarray:
    assignment = np.asarray(assignment)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    k = int(assignment.max()) + 1 if assignment.size else 0
    counts = np.bincount(assignment, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise AllocationError(f"empty cluster id(s) {empty.tolist()}")
    C = np.zeros((k, points.shape[1]))
    np.add.at(C, assignment, points)
    return C / counts[:, None]


def path_network(observations, centroids, m: int = DEFAULT_NEIGHBOURS):
    """Nodes and symmetric edges (both directions listed) of the barrier network.

    All nodes (observations, then centroids) are joined by symmetric m-NN
    edges.  Each centroid is also joined to its m nearest observations:
    several communities of one well share a centroid position, and through
    m-NN edges alone they would form a clique cut off from the data.
    """
    X = np.atleast_2d(np.asarray(observations, dtype=float))
    C = np.atleast_2d(np.asarray(centroids, dtype=float))
    n, k = X.shape[0], C.shape[0]
    nodes = np.vstack([X, C])
    N = n + k
    if N < 2:
        return nodes, np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    r, c, _, _ = _knn_edges(nodes, m)
    rows, cols = [r], [c]
    if n and k:
        D = cdist(C, X)
        mm = min(m, n)
        nbr = np.argsort(D, axis=1, kind="stable")[:, :mm]
        cr = np.repeat(n + np.arange(k), mm)
        rows += [cr, nbr.ravel()]
        cols += [nbr.ravel(), cr]
    A = sparse.coo_matrix((np.ones(sum(x.size for x in rows)),
                           (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
    A = (A.tocsr() > 0).tocoo()
    dist = np.linalg.norm(nodes[A.row] - nodes[A.col], axis=1)
    return nodes, A.row.astype(int), A.col.astype(int), dist


def _edge_weights(nodes, V, rows, cols, edge_peak):
    """Highest potential met on each directed edge (end nodes and interior)."""
    w = np.maximum(V[rows], V[cols])
    if edge_peak is not None and rows.size:
        upper = rows < cols
        peak = np.asarray(edge_peak(nodes[rows[upper]], nodes[cols[upper]]), dtype=float)
        N = nodes.shape[0]
        M = sparse.csr_matrix((np.concatenate([peak, peak]),
                               (np.concatenate([rows[upper], cols[upper]]),
                                np.concatenate([cols[upper], rows[upper]]))), shape=(N, N))
        w = np.maximum(w, np.asarray(M[rows, cols]).ravel())
    return w


def pass_barriers(nodes, potentials, sources, rows, cols, edge_peak=None) -> np.ndarray:
    """Mountain-pass barriers between the ``sources`` nodes of a network.

    The barrier from i to j is the lowest achievable maximum potential over
    all network paths from i to j, minus the potential at i, floored at zero.
    A path's maximum covers its nodes and, through ``edge_peak(P, Q)`` (the
    highest potential strictly inside each segment P[e]->Q[e]), the interior
    of its edges.  All minimax paths lie on a minimum spanning tree of the
    edge maxima, so one tree walk per source suffices.  Unreachable pairs get
    +inf.
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    V = np.asarray(potentials, dtype=float)
    sources = np.asarray(sources, dtype=int)
    k = sources.size
    out = np.zeros((k, k))
    if k <= 1:
        return out
    N = nodes.shape[0]
    w = _edge_weights(nodes, V, rows, cols, edge_peak)
    # spanning-tree routines ignore zero weights: shift to strictly positive
    base = (w.min() if w.size else 0.0) - 1.0
    T = minimum_spanning_tree(sparse.csr_matrix((w - base, (rows, cols)), shape=(N, N)))
    T = (T + T.T).tocsr()
    for a, s in enumerate(sources):
        order, pred = breadth_first_order(T, s, directed=False, return_predecessors=True)
        peak = np.full(N, np.inf)
        peak[s] = V[s]
        for node in order[1:]:
            p = pred[node]
            peak[node] = max(peak[p], T[p, node] + base)
        out[a] = np.maximum(peak[sources] - V[s], 0.0)
        out[a, a] = 0.0
    return out


def path_barriers(nodes, potentials, sources, rows, cols, dist, edge_peak=None) -> np.ndarray:
    """Barriers along Euclidean shortest paths.

    For each ordered pair (i, j) the Dijkstra shortest path from node i to
    node j is found and the barrier is the highest potential met on it
    (nodes, plus edge interiors when ``edge_peak`` is given) minus the
    potential at i, floored at zero.  Unreachable pairs get +inf.
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    V = np.asarray(potentials, dtype=float)
    sources = np.asarray(sources, dtype=int)
    k = sources.size
    out = np.zeros((k, k))
    if k <= 1:
        return out
    N = nodes.shape[0]
    # csgraph drops explicit zeros, so coincident nodes get a tiny positive length
    G = sparse.csr_matrix((np.maximum(dist, 1e-300), (rows, cols)), shape=(N, N))
    D, pred = dijkstra(G, directed=False, indices=sources, return_predecessors=True)
    W = sparse.csr_matrix((_edge_weights(nodes, V, rows, cols, edge_peak), (rows, cols)),
                          shape=(N, N))
    for a, s in enumerate(sources):
        peak = np.full(N, np.nan)
        peak[s] = V[s]
        for t in sources:
            if not np.isfinite(D[a, t]):
                peak[t] = np.inf
                continue
            chain = []
            node = t
            while np.isnan(peak[node]):
                chain.append(node)
                node = pred[a, node]
            top = peak[node]
            for node in reversed(chain):
                top = max(top, W[pred[a, node], node])
                peak[node] = top
        out[a] = np.maximum(peak[sources] - V[s], 0.0)
        out[a, a] = 0.0
    return out


def segment_peak(field, samples: int = EDGE_SAMPLES):
    """Edge probe: the highest potential at ``samples`` evenly spaced interior
    points of each segment."""
    t = np.arange(1, samples + 1) / (samples + 1)

    def probe(P, Q):
        if samples <= 0 or len(P) == 0:
            return np.full(len(P), -np.inf)
        pts = P[:, None, :] + t[None, :, None] * (Q - P)[:, None, :]
        return field.values(pts.reshape(-1, P.shape[1])).reshape(len(P), samples).max(axis=1)
    return probe


def energy_barriers(observations, observation_potentials, centroids, field,
                    m: int = DEFAULT_NEIGHBOURS, edge_samples: int = EDGE_SAMPLES,
                    route: str = "pass") -> np.ndarray:
    """Centroid-to-centroid barriers through a network of observations and centroids.

    ``route="pass"`` takes the lowest pass between wells; ``"shortest"``
    reads the barrier off the Euclidean shortest path.
    """
    centroids = np.atleast_2d(np.asarray(centroids, dtype=float))
    nodes, rows, cols, dist = path_network(observations, centroids, m)
    V = np.concatenate([np.asarray(observation_potentials, dtype=float),
                        field.values(centroids)])
    sources = nodes.shape[0] - centroids.shape[0] + np.arange(centroids.shape[0])
    probe = segment_peak(field, edge_samples) if edge_samples > 0 else None
    if route == "pass":
        return pass_barriers(nodes, V, sources, rows, cols, probe)
    if route == "shortest":
        return path_barriers(nodes, V, sources, rows, cols, dist, probe)
    raise ValueError(f"unknown route {route!r}")


def _absorb(E, centroids, sizes, e_th):
    """Fold the shallowest cluster into its cheapest neighbour until every
    cluster's lowest outgoing barrier exceeds ``e_th``.

    Returns the group of each input cluster and the reduced barrier matrix.
    A merged cluster keeps the outgoing barriers of the absorbing cluster;
    the barrier into it is the cheaper of the barriers into its parts.
    """
    E = E.copy()
    k = E.shape[0]
    alive = list(range(k))
    owner = np.arange(k)
    sizes = np.asarray(sizes, dtype=float).copy()
    while len(alive) > 1:
        sub = E[np.ix_(alive, alive)].copy()
        np.fill_diagonal(sub, np.inf)
        depth = sub.min(axis=1)
        # shallowest first; ties: smaller cluster, then higher id
        order = sorted(range(len(alive)), key=lambda a: (depth[a], sizes[alive[a]], -alive[a]))
        a = order[0]
        # disconnected wells (infinite barrier) are never merged
        if not (np.isfinite(depth[a]) and depth[a] <= e_th):
            break
        cand = np.flatnonzero(sub[a] == depth[a])
        dist = np.linalg.norm(centroids[[alive[c] for c in cand]] - centroids[alive[a]], axis=1)
        t = alive[cand[min(range(len(cand)), key=lambda c: (dist[c], alive[cand[c]]))]]
        src = alive[a]
        E[:, t] = np.minimum(E[:, t], E[:, src])
        sizes[t] += sizes[src]
        owner[owner == src] = t
        alive.remove(src)
    return owner, E[np.ix_(alive, alive)], alive


def merge_by_threshold(clustering: Clustering, e_th: float, points=None) -> Clustering:
    """Merge wells separated by barriers no higher than ``e_th``.

    Clusters are absorbed shallowest first into the neighbour they reach
    most cheaply, so a shallow pocket that drains into several wells joins
    only one of them.  The order of absorption does not depend on ``e_th``,
    hence a larger threshold never yields more clusters, and merging the
    result again at the same threshold changes nothing.  Centroids are
    recomputed from ``points`` when given, otherwise as size-weighted means
    of the merged centroids.
    """
    k = clustering.k
    sizes = np.array([len(s) for s in clustering.member_sets], dtype=float)
    owner, E2, alive = _absorb(clustering.energy_matrix, clustering.centroids, sizes, e_th)
    # order merged groups by their lowest observation index
    first = [min(s) for s in clustering.member_sets]
    keyed = sorted(range(len(alive)),
                   key=lambda i: min(first[a] for a in range(k) if owner[a] == alive[i]))
    pos = {alive[i]: r for r, i in enumerate(keyed)}
    group = np.array([pos[o] for o in owner], dtype=int)
    E2 = E2[np.ix_(keyed, keyed)]
    k2 = len(alive)
    assignment = group[clustering.assignment]
    members = tuple(np.flatnonzero(assignment == c) for c in range(k2))
    if points is not None:
        centroids = compute_centroids(assignment, points)
    else:
        centroids = np.zeros((k2, clustering.centroids.shape[1]))
        np.add.at(centroids, group, clustering.centroids * sizes[:, None])
        centroids /= np.bincount(group, weights=sizes)[:, None]
    np.fill_diagonal(E2, 0.0)
    return Clustering(assignment=assignment, centroids=centroids, member_sets=members,
                      energy_matrix=E2, e_th_used=float(e_th))


def allocate(result, field, observations, m: int = DEFAULT_NEIGHBOURS,
             observation_potentials=None) -> Clustering:
    """Unmerged clustering of converged replicas (barriers populated, e_th = 0)."""
    Y = result.final_points
    labels = detect_communities(build_similarity_graph(Y, result.final_potentials, m))
    centroids = compute_centroids(labels, Y)
    obs = np.atleast_2d(np.asarray(getattr(observations, "X", observations), dtype=float))
    if observation_potentials is None:
        observation_potentials = field.values(obs)
    E = energy_barriers(obs, observation_potentials, centroids, field, m)
    members = tuple(np.flatnonzero(labels == c) for c in range(centroids.shape[0]))
    return Clustering(assignment=labels, centroids=centroids, member_sets=members,
                      energy_matrix=E, e_th_used=0.0)


def export(clustering: Clustering, csv_path, json_path) -> None:
    with open(csv_path, "w") as fh:
        fh.write("index,cluster\n")
        for i, c in enumerate(clustering.assignment):
            fh.write(f"{i},{int(c)}\n")
    with open(json_path, "w") as fh:
        json.dump(clustering.to_json(), fh, indent=2)
