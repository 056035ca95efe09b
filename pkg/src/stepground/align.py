"""Two-stage grounding score for step sequences against a narration corpus.

Stage 1 scans every narration record with a monotonic-coverage score: the
best achievable mean of per-step similarities when each step picks one
segment and the chosen segment indices never decrease. The top-K records by
this score form a candidate pool.

Stage 2 re-scores the pool with a Needleman-Wunsch global alignment over the
same cosine similarities, using a fixed gap penalty for skipped or inserted
steps. The table value at the far corner is divided by the backtraced
optimal path length (each diagonal, vertical, or horizontal move counts as
one step) and clipped to [clip_lo, clip_hi]. The grounding score of a
sequence is the maximum normalized Stage 2 score over the pool.

Determinism contract: per-record scores are bitwise identical whether the
corpus is scanned record by record or in vectorized batches, and regardless
of worker count. All dot products route through embedding.dot_rows, whose
per-element accumulation does not depend on operand row counts; chunk
boundaries in the batched scan are a pure function of the index.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import CorpusIndex
from .embedding import Embedder, dot_rows, similarity_matrix

# row budget per batched-scan chunk; fixed so chunking (and therefore every
# intermediate array shape) never depends on worker count
_CHUNK_ROWS = 65536


@dataclass(frozen=True, eq=False)
class StepSequence:
    """Ordered natural-language steps with their unit-norm embedding rows."""

    steps: tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings)
        if emb.ndim != 2:
            raise ValueError("embeddings must be a 2-D (steps x dim) matrix")
        if emb.shape[0] != len(self.steps):
            raise ValueError(
                f"{len(self.steps)} steps but {emb.shape[0]} embedding rows"
            )
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "embeddings", emb)

    def __len__(self) -> int:
        return len(self.steps)

    @classmethod
    def from_texts(cls, texts: Sequence[str], embedder: Embedder) -> "StepSequence":
        rows = np.empty((len(texts), embedder.dim), dtype=np.float32)
        for i, t in enumerate(texts):
            rows[i] = embedder.embed(t)
        return cls(tuple(texts), rows)


@dataclass(frozen=True)
class AlignConfig:
    top_k: int = 25
    gap_penalty: float = -0.05
    nw_clip_lo: float = 1e-6
    nw_clip_hi: float = 1.0

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.gap_penalty > 0:
            raise ValueError(f"gap_penalty must be <= 0, got {self.gap_penalty}")
        if not 0 < self.nw_clip_lo < self.nw_clip_hi <= 1:
            raise ValueError(
                f"require 0 < nw_clip_lo < nw_clip_hi <= 1, got "
                f"({self.nw_clip_lo}, {self.nw_clip_hi})"
            )


@dataclass(frozen=True)
class AlignmentOutcome:
    """Per-record scores for one pool member, plus the optimal path."""

    record_idx: int
    stage1_score: float
    stage2_score: float
    path: tuple[tuple[int, int], ...] | None = None

    def to_dict(self) -> dict:
        d = {
            "record_idx": self.record_idx,
            "stage1_score": self.stage1_score,
            "stage2_score": self.stage2_score,
        }
        if self.path is not None:
            d["path"] = [list(p) for p in self.path]
        return d


class NwAlignment(NamedTuple):
    score: float                            # table value at (M, L)
    path: tuple[tuple[int, int], ...]       # lattice nodes (0,0) .. (M,L)
    normalized: float                       # score / |path moves|, clipped


def mono_coverage(W: np.ndarray) -> float:
    """Length-normalized monotonic-coverage score of a similarity matrix.

    Maximizes sum_i W[i, k_i] over nondecreasing k_1 <= ... <= k_M via the
    forward recursion D[i, k] = W[i, k] + max_{k' <= k} D[i-1, k'], using a
    rolling row and a running prefix maximum (O(ML) time, O(L) memory).
    Returns max_k D[M, k] / M.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] == 0 or W.shape[1] == 0:
        raise ValueError(f"similarity matrix must be non-empty 2-D, got {W.shape}")
    M = W.shape[0]
    prev = np.zeros(W.shape[1], dtype=np.float64)
    for i in range(M):
        prev = W[i] + np.maximum.accumulate(prev)
    return float(prev.max()) / M


def mono_coverage_scan(
    step_embeddings: np.ndarray, index: CorpusIndex, workers: int = 1
) -> np.ndarray:
    """Stage 1 coverage score for every record in the corpus.

    Records are grouped by segment count and scored in vectorized chunks;
    results are bitwise equal to calling mono_coverage on each record's
    similarity matrix individually.
    """
    steps = np.ascontiguousarray(step_embeddings, dtype=np.float64)
    if steps.ndim != 2 or steps.shape[0] == 0:
        raise ValueError("step embeddings must be a non-empty 2-D matrix")
    if len(index) == 0:
        raise ValueError("cannot scan an empty corpus")
    if steps.shape[1] != index.dim:
        raise ValueError(f"dimension mismatch: {steps.shape[1]} vs {index.dim}")
    M = steps.shape[0]
    starts = index.offsets[:, 0]
    scores = np.empty(len(index), dtype=np.float64)

    tasks: list[tuple[int, np.ndarray]] = []
    for length, rec_idx in index.length_buckets().items():
        per_chunk = max(1, _CHUNK_ROWS // length)
        for s in range(0, len(rec_idx), per_chunk):
            tasks.append((length, rec_idx[s : s + per_chunk]))

    def run(task: tuple[int, np.ndarray]) -> None:
        length, recs = task
        row_idx = (starts[recs][:, None] + np.arange(length)).ravel()
        rows = index.embeddings[row_idx]
        sims = dot_rows(steps, rows)
        np.clip(sims, -1.0, 1.0, out=sims)
        sims = sims.reshape(M, len(recs), length)
        prev = np.zeros((len(recs), length), dtype=np.float64)
        for i in range(M):
            prev = sims[i] + np.maximum.accumulate(prev, axis=1)
        scores[recs] = prev.max(axis=1) / M

    if workers <= 1:
        for task in tasks:
            run(task)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, tasks))
    return scores


def stage1_retrieve(
    s: StepSequence, index: CorpusIndex, cfg: AlignConfig, workers: int = 1
) -> list[tuple[int, float]]:
    """Top-K records by coverage score, descending; ties keep lower index."""
    if len(s) == 0:
        raise ValueError("cannot retrieve for an empty step sequence")
    scores = mono_coverage_scan(s.embeddings, index, workers=workers)
    order = np.lexsort((np.arange(len(scores)), -scores))
    top = order[: min(cfg.top_k, len(scores))]
    return [(int(i), float(scores[i])) for i in top]


def nw_align(W: np.ndarray, cfg: AlignConfig) -> NwAlignment:
    """Global alignment of steps to segments over a similarity matrix.

    Table recursion with gap penalty g on vertical and horizontal moves:

        F[i, k] = max(F[i-1, k-1] + W[i-1, k-1], F[i-1, k] + g, F[i, k-1] + g)

    with F[0, 0] = 0 and leading gaps paying the penalty along the first row
    and column. One optimal path is backtraced from (M, L) with a fixed tie
    preference (diagonal, then vertical, then horizontal) so results are
    deterministic; the boundary cells are built by repeated addition so the
    backtrace equality tests hold exactly in floating point.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] == 0 or W.shape[1] == 0:
        raise ValueError(f"similarity matrix must be non-empty 2-D, got {W.shape}")
    M, L = W.shape
    g = float(cfg.gap_penalty)
    Wl: list[list[float]] = W.tolist()

    row0 = [0.0] * (L + 1)
    for k in range(1, L + 1):
        row0[k] = row0[k - 1] + g
    table = [row0]
    for i in range(1, M + 1):
        wrow = Wl[i - 1]
        above = table[i - 1]
        cur = [above[0] + g] + [0.0] * L
        for k in range(1, L + 1):
            best = above[k - 1] + wrow[k - 1]
            up = above[k] + g
            if up > best:
                best = up
            left = cur[k - 1] + g
            if left > best:
                best = left
            cur[k] = best
        table.append(cur)

    i, k = M, L
    nodes = [(M, L)]
    while i > 0 or k > 0:
        v = table[i][k]
        if i > 0 and k > 0 and v == table[i - 1][k - 1] + Wl[i - 1][k - 1]:
            i, k = i - 1, k - 1
        elif i > 0 and v == table[i - 1][k] + g:
            i -= 1
        else:
            k -= 1
        nodes.append((i, k))
    nodes.reverse()

    score = table[M][L]
    moves = len(nodes) - 1
    normalized = min(max(score / max(moves, 1), cfg.nw_clip_lo), cfg.nw_clip_hi)
    return NwAlignment(score, tuple(nodes), normalized)


def grounding_score(
    s: StepSequence, index: CorpusIndex, cfg: AlignConfig, workers: int = 1
) -> tuple[float, AlignmentOutcome, list[AlignmentOutcome]]:
    """Best normalized Stage 2 score over the Stage 1 pool.

    Returns (score, best outcome, full pool in retrieval order). Ties on the
    Stage 2 score keep the lowest record index.
    """
    pool_pairs = stage1_retrieve(s, index, cfg, workers=workers)
    outcomes: list[AlignmentOutcome] = []
    for rec_idx, s1 in pool_pairs:
        W = similarity_matrix(s.embeddings, index.segment_embeddings(rec_idx))
        aln = nw_align(W, cfg)
        outcomes.append(AlignmentOutcome(rec_idx, s1, aln.normalized, aln.path))
    best = min(outcomes, key=lambda o: (-o.stage2_score, o.record_idx))
    return best.stage2_score, best, outcomes
