"""Exhaustive brute-force counterparts of the alignment dynamic programs.

These enumerate every feasible solution instead of recursing, so they are
exponential and only usable on tiny inputs. They exist to pin down the DP
semantics independently: the coverage oracle walks all nondecreasing index
tuples, and the global-alignment oracle walks all monotone lattice paths,
replicating the production backtrace tie preference (diagonal, vertical,
horizontal) when several paths share the optimal score.
"""

from __future__ import annotations

from itertools import combinations_with_replacement

import numpy as np

from .align import AlignConfig, NwAlignment

_MOVE_RANK = {"d": 0, "v": 1, "h": 2}


def mono_coverage_exhaustive(W: np.ndarray) -> float:
    """Max mean of W[i, k_i] over all nondecreasing index tuples."""
    W = np.asarray(W, dtype=np.float64)
    M, L = W.shape
    if M == 0 or L == 0:
        raise ValueError("empty similarity matrix")
    rows: list[list[float]] = W.tolist()
    best = -np.inf
    for combo in combinations_with_replacement(range(L), M):
        total = 0.0
        for i, k in enumerate(combo):
            total += rows[i][k]
        if total > best:
            best = total
    return best / M


def _enumerate_paths(M: int, L: int):
    """Yield (moves, cells) for every monotone lattice path (0,0) -> (M,L).

    moves is a string over {d, v, h}; cells lists the (i, k) pair consumed by
    each diagonal move, aligned with the move positions.
    """
    stack: list[tuple[int, int, str]] = [(0, 0, "")]
    while stack:
        i, k, moves = stack.pop()
        if i == M and k == L:
            yield moves
            continue
        if i < M and k < L:
            stack.append((i + 1, k + 1, moves + "d"))
        if i < M:
            stack.append((i + 1, k, moves + "v"))
        if k < L:
            stack.append((i, k + 1, moves + "h"))


def _path_score(moves: str, W: list[list[float]], g: float) -> float:
    # accumulate left to right, matching the stepwise additions of the DP
    total = 0.0
    i = k = 0
    for mv in moves:
        if mv == "d":
            total = total + W[i][k]
            i += 1
            k += 1
        else:
            total = total + g
            if mv == "v":
                i += 1
            else:
                k += 1
    return total


def nw_exhaustive(W: np.ndarray, cfg: AlignConfig) -> NwAlignment:
    """Optimal global alignment by full path enumeration.

    Among paths sharing the best score, selects the one the production
    backtrace would produce: walking from (M, L) backwards, prefer diagonal,
    then vertical, then horizontal. That is the path whose reversed move
    sequence is lexicographically smallest under that ranking.
    """
    W = np.asarray(W, dtype=np.float64)
    M, L = W.shape
    if M == 0 or L == 0:
        raise ValueError("empty similarity matrix")
    rows: list[list[float]] = W.tolist()
    g = float(cfg.gap_penalty)

    best_score = -np.inf
    optimal: list[str] = []
    for moves in _enumerate_paths(M, L):
        score = _path_score(moves, rows, g)
        if score > best_score:
            best_score = score
            optimal = [moves]
        elif score == best_score:
            optimal.append(moves)

    chosen = min(optimal, key=lambda mv: [_MOVE_RANK[c] for c in reversed(mv)])
    nodes = [(0, 0)]
    i = k = 0
    for mv in chosen:
        if mv == "d":
            i, k = i + 1, k + 1
        elif mv == "v":
            i += 1
        else:
            k += 1
        nodes.append((i, k))
    normalized = min(
        max(best_score / max(len(chosen), 1), cfg.nw_clip_lo), cfg.nw_clip_hi
    )
    return NwAlignment(best_score, tuple(nodes), normalized)
