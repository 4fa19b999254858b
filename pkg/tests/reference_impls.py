"""Independent reference implementations used as test oracles.

These deliberately avoid the package's own numeric helpers: they are the
other side of every dual-route check.
"""

from collections import deque

import numpy as np


def dense_masked_attention_f64(q, k, v, admissible):
    """Direct per-row softmax-over-admissible attention in f64."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    Lq, d = q.shape
    out = np.zeros((Lq, v.shape[1]))
    for i in range(Lq):
        cols = np.flatnonzero(admissible[i])
        scores = np.array([q[i] @ k[j] / np.sqrt(d) for j in cols])
        scores -= scores.max()
        w = np.exp(scores)
        w /= w.sum()
        for wj, j in zip(w, cols):
            out[i] += wj * v[j]
    return out


def bfs_shortest_paths(start, goal, width, height):
    """All shortest move sequences start -> goal on the open grid."""
    if start == goal:
        return [[]]
    deltas = {"U": (-1, 0), "D": (1, 0), "L": (0, -1), "R": (0, 1)}
    dist = {start: 0}
    frontier = deque([start])
    while frontier:
        cell = frontier.popleft()
        for dr, dc in deltas.values():
            nxt = (cell[0] + dr, cell[1] + dc)
            if 0 <= nxt[0] < height and 0 <= nxt[1] < width and nxt not in dist:
                dist[nxt] = dist[cell] + 1
                frontier.append(nxt)
    paths = []

    def walk(cell, moves):
        if cell == goal:
            paths.append(list(moves))
            return
        for name, (dr, dc) in deltas.items():
            nxt = (cell[0] + dr, cell[1] + dc)
            if 0 <= nxt[0] < height and 0 <= nxt[1] < width and dist.get(nxt) == dist[cell] + 1 and dist[nxt] <= dist[goal]:
                moves.append(name)
                walk(nxt, moves)
                moves.pop()

    walk(start, [])
    return paths


def row_first_shortest_path(start, goal, width, height):
    """The unique shortest path that spends all vertical moves first."""
    candidates = bfs_shortest_paths(start, goal, width, height)
    vertical = {"U", "D"}

    def row_first(path):
        seen_horizontal = False
        for m in path:
            if m in vertical and seen_horizontal:
                return False
            if m not in vertical:
                seen_horizontal = True
        return True

    matching = [p for p in candidates if row_first(p)]
    assert len(matching) == 1, f"row-first path not unique: {matching}"
    return matching[0]


def softmax_f64(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def restricted_confidence_f64(logits_row, admissible_ids):
    """Reference: mask inadmissible logits to -inf, softmax, take the max."""
    z = np.full(len(logits_row), -np.inf)
    z[admissible_ids] = np.asarray(logits_row, dtype=np.float64)[admissible_ids]
    e = np.exp(z - z[admissible_ids].max())
    return float(e.max() / e[admissible_ids].sum())
