"""Minimum-cost assignment (Hungarian method, shortest augmenting paths)."""
from __future__ import annotations

from collections import deque

import numpy as np

from ..errors import DataError


def _solve_square(cost: np.ndarray):
    """Kuhn-Munkres with row/column potentials on a square matrix.

    Returns (col_of_row, u, v) with ``cost[i, j] - u[i] - v[j] >= 0`` everywhere
    and equality on the assignment.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.int64)  # 1-based row matched to each 1-based column; 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of = np.empty(n, dtype=np.int64)
    col_of[row_of[1:] - 1] = np.arange(n)
    return col_of, u[1:], v[1:]


def _lexicographic(tight: np.ndarray, col_of: np.ndarray, rows: int) -> np.ndarray:
    """Smallest perfect matching of the tight graph in row-major lexicographic order.

    Every optimal assignment uses only tight edges, so this picks the
    lexicographically smallest minimizer. Rows are fixed one at a time; moving
    row i to a smaller column j succeeds iff an alternating path reconnects the
    displaced row to the column row i gives up.
    """
    n = len(col_of)
    col_of = col_of.copy()
    row_of = np.empty(n, dtype=np.int64)
    row_of[col_of] = np.arange(n)
    fixed_col = np.zeros(n, dtype=bool)
    for i in range(rows):
        for j in np.flatnonzero(tight[i]):
            if j >= col_of[i]:
                break
            if fixed_col[j]:
                continue
            start, target = row_of[j], col_of[i]
            # BFS over rows from `start`; parent[col] = row that reached it
            parent = {}
            queue = deque([start])
            visited_rows = {start, i}
            found = False
            while queue and not found:
                r = queue.popleft()
                for y in np.flatnonzero(tight[r] & ~fixed_col):
                    if y == j or y in parent:
                        continue
                    parent[y] = r
                    if y == target:
                        found = True
                        break
                    nxt = row_of[y]
                    if nxt not in visited_rows:
                        visited_rows.add(nxt)
                        queue.append(nxt)
            if not found:
                continue
            y = target
            while True:
                r = parent[y]
                prev = col_of[r]
                col_of[r], row_of[y] = y, r
                if r == start:
                    break
                y = prev
            col_of[i], row_of[j] = j, i
            break
        fixed_col[col_of[i]] = True
    return col_of


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Optimal one-to-one assignment of min(rows, cols) pairs.

    Returns ``(pairs, total)`` with ``pairs`` sorted by row. Among several
    minimizers the one whose column sequence (read over the shorter side) is
    lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DataError(f"cost must be a matrix, got shape {cost.shape}")
    if cost.size == 0:
        return [], 0.0
    if not np.all(np.isfinite(cost)):
        raise DataError("cost matrix must be finite")
    transposed = cost.shape[0] > cost.shape[1]
    work = cost.T if transposed else cost
    n, m = work.shape
    square = np.zeros((m, m))
    square[:n] = work
    col_of, u, v = _solve_square(square)
    scale = max(1.0, float(np.abs(square).max()))
    tight = np.abs(square - u[:, None] - v[None, :]) <= 1e-11 * scale * m
    col_of = _lexicographic(tight, col_of, n)
    pairs = [(i, int(col_of[i])) for i in range(n)]
    if transposed:
        pairs = sorted((c, r) for r, c in pairs)
    total = float(sum(cost[r, c] for r, c in pairs))
    return pairs, total
