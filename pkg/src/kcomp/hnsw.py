"""Numba kernels for a hierarchical navigable-small-world graph over unit vectors.

Distance is ``1 - <a, b>``. Layer 0 keeps up to ``2 * M`` links per node,
upper layers up to ``M``. Neighbour selection uses the usual diversity
heuristic (keep a candidate only if it is closer to the base node than to
every neighbour already kept). Everything here is single-threaded and
deterministic for a fixed level assignment.
"""
from __future__ import annotations

import heapq

import numpy as np
from numba import njit


@njit(cache=True)
def _dot(a, b):
    s = 0.0
    for j in range(a.shape[0]):
        s += a[j] * b[j]
    return s


@njit(cache=True)
def _neighbors(node, layer, nbr0, cnt0, nbru, cntu, slot):
    if layer == 0:
        return nbr0[node, : cnt0[node]]
    s = slot[node]
    return nbru[s, layer - 1, : cntu[s, layer - 1]]


@njit(cache=True)
def _search_layer(q, vecs, ep, ep_dist, ef, layer, nbr0, cnt0, nbru, cntu, slot, visited, tag):
    cand = [(ep_dist, ep)]
    res = [(-ep_dist, ep)]
    visited[ep] = tag
    while len(cand) > 0:
        d, c = heapq.heappop(cand)
        if len(res) >= ef and d > -res[0][0]:
            break
        for e in _neighbors(c, layer, nbr0, cnt0, nbru, cntu, slot):
            if visited[e] == tag:
                continue
            visited[e] = tag
            de = 1.0 - _dot(q, vecs[e])
            if len(res) < ef or de < -res[0][0]:
                heapq.heappush(cand, (de, e))
                heapq.heappush(res, (-de, e))
                if len(res) > ef:
                    heapq.heappop(res)
    n = len(res)
    out_i = np.empty(n, dtype=np.int64)
    out_d = np.empty(n, dtype=np.float64)
    for j in range(n - 1, -1, -1):
        nd, i = heapq.heappop(res)
        out_d[j] = -nd
        out_i[j] = i
    return out_i, out_d


@njit(cache=True)
def _select(vecs, ids, dists, m):
    # ids must be sorted by ascending distance to the base node
    keep = np.empty(m, dtype=np.int64)
    nk = 0
    for i in range(ids.shape[0]):
        if nk >= m:
            break
        c = ids[i]
        ok = True
        for j in range(nk):
            if 1.0 - _dot(vecs[c], vecs[keep[j]]) < dists[i]:
                ok = False
                break
        if ok:
            keep[nk] = c
            nk += 1
    return keep[:nk]


@njit(cache=True)
def _link(base, new, layer, mmax, vecs, nbr0, cnt0, nbru, cntu, slot):
    """Add ``new`` to ``base``'s list at ``layer``, pruning with the heuristic on overflow."""
    if layer == 0:
        lst = nbr0[base]
        n = cnt0[base]
    else:
        lst = nbru[slot[base], layer - 1]
        n = cntu[slot[base], layer - 1]
    if n < mmax:
        lst[n] = new
        n += 1
    else:
        ids = np.empty(n + 1, dtype=np.int64)
        ds = np.empty(n + 1, dtype=np.float64)
        for j in range(n):
            ids[j] = lst[j]
            ds[j] = 1.0 - _dot(vecs[base], vecs[lst[j]])
        ids[n] = new
        ds[n] = 1.0 - _dot(vecs[base], vecs[new])
        order = np.argsort(ds, kind="mergesort")
        chosen = _select(vecs, ids[order], ds[order], mmax)
        n = chosen.shape[0]
        for j in range(n):
            lst[j] = chosen[j]
    if layer == 0:
        cnt0[base] = n
    else:
        cntu[slot[base], layer - 1] = n


@njit(cache=True)
def build_graph(vecs, levels, m, ef_construction, nbr0, cnt0, nbru, cntu, slot):
    """Insert nodes 0..n-1 in order. Returns (entry point, top level)."""
    n = vecs.shape[0]
    m0 = 2 * m
    visited = np.zeros(n, dtype=np.int64)
    tag = 0
    entry = 0
    top = levels[0]
    for x in range(1, n):
        q = vecs[x]
        lx = levels[x]
        ep = entry
        ep_d = 1.0 - _dot(q, vecs[ep])
        layer = top
        while layer > lx:
            changed = True
            while changed:
                changed = False
                for e in _neighbors(ep, layer, nbr0, cnt0, nbru, cntu, slot):
                    de = 1.0 - _dot(q, vecs[e])
                    if de < ep_d:
                        ep_d = de
                        ep = e
                        changed = True
            layer -= 1
        layer = min(lx, top)
        while layer >= 0:
            tag += 1
            ids, ds = _search_layer(q, vecs, ep, ep_d, ef_construction, layer,
                                    nbr0, cnt0, nbru, cntu, slot, visited, tag)
            chosen = _select(vecs, ids, ds, m)
            k = chosen.shape[0]
            if layer == 0:
                for j in range(k):
                    nbr0[x, j] = chosen[j]
                cnt0[x] = k
            else:
                for j in range(k):
                    nbru[slot[x], layer - 1, j] = chosen[j]
                cntu[slot[x], layer - 1] = k
            mmax = m0 if layer == 0 else m
            for j in range(k):
                _link(chosen[j], x, layer, mmax, vecs, nbr0, cnt0, nbru, cntu, slot)
            ep = ids[0]
            ep_d = ds[0]
            layer -= 1
        if lx > top:
            top = lx
            entry = x
    return entry, top


@njit(cache=True)
def search_graph(q, vecs, entry, top, ef, nbr0, cnt0, nbru, cntu, slot, visited):
    ep = entry
    ep_d = 1.0 - _dot(q, vecs[ep])
    layer = top
    while layer > 0:
        changed = True
        while changed:
            changed = False
            for e in _neighbors(ep, layer, nbr0, cnt0, nbru, cntu, slot):
                de = 1.0 - _dot(q, vecs[e])
                if de < ep_d:
                    ep_d = de
                    ep = e
                    changed = True
        layer -= 1
    return _search_layer(q, vecs, ep, ep_d, ef, 0, nbr0, cnt0, nbru, cntu, slot, visited, 1)


def draw_levels(n: int, m: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ml = 1.0 / np.log(m)
    u = 1.0 - rng.random(n)  # (0, 1]
    return np.minimum(np.floor(-np.log(u) * ml), 16).astype(np.int64)


def allocate(levels: np.ndarray, m: int):
    n = levels.shape[0]
    nbr0 = np.full((n, 2 * m), -1, dtype=np.int64)
    cnt0 = np.zeros(n, dtype=np.int64)
    upper = np.flatnonzero(levels > 0)
    slot = np.full(n, -1, dtype=np.int64)
    slot[upper] = np.arange(upper.size)
    depth = max(int(levels.max()), 1)
    nbru = np.full((max(upper.size, 1), depth, m), -1, dtype=np.int64)
    cntu = np.zeros((max(upper.size, 1), depth), dtype=np.int64)
    return nbr0, cnt0, nbru, cntu, slot
