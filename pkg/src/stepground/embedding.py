"""Text-to-unit-vector front-end and cosine similarity kernels.

The alignment machinery only ever sees unit-norm embedding rows; this module
provides the pluggable encoder seam, a deterministic feature-hashing encoder
used for tests and simulation, and the canonical dot-product routine shared
by every scoring path.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class Embedder(Protocol):
    """Maps text to a deterministic unit-norm vector.

    Implementations must be stateless after construction: the same text must
    produce an identical vector on every call, across runs and platforms.
    """

    name: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class HashFeatureEmbedder:
    """Signed feature hashing over lowercase word tokens.

    Each token is hashed (keyed blake2b, so results are stable across
    platforms and Python processes) into a bucket with a +/-1 sign; the
    bucket sums are L2-normalized. Texts with no tokens map to the fixed
    basis vector e0. Similar bags of words land near each other in cosine
    space, which is the only property the alignment math relies on.
    """

    dim: int = 64
    seed: int = 0
    name: str = field(init=False)

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        object.__setattr__(self, "name", f"feathash-d{self.dim}-s{self.seed}")

    def _key(self) -> bytes:
        return self.seed.to_bytes(8, "little", signed=True)

    def embed(self, text: str) -> np.ndarray:
        acc = np.zeros(self.dim, dtype=np.float64)
        key = self._key()
        for tok in _TOKEN_RE.findall(text.lower()):
            h = hashlib.blake2b(tok.encode("utf-8"), key=key, digest_size=8)
            v = int.from_bytes(h.digest(), "little")
            sign = 1.0 if v & 1 else -1.0
            acc[(v >> 1) % self.dim] += sign
        norm = float(np.linalg.norm(acc))
        if norm == 0.0:
            out = np.zeros(self.dim, dtype=np.float32)
            out[0] = 1.0
            return out
        out = (acc / norm).astype(np.float32)
        # renormalize after the float32 cast so the stored row is unit to ~1e-7
        out /= np.float32(np.linalg.norm(out))
        return out

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        """Stack embed() over texts into an (n, dim) float32 matrix."""
        if not texts:
            return np.empty((0, self.dim), dtype=np.float32)
        return np.stack([self.embed(t) for t in texts])


def embedder_from_tag(tag: str) -> HashFeatureEmbedder | None:
    """Reconstruct a built-in embedder from its manifest tag, if possible.

    Returns None for tags of external encoders; callers must then be given
    precomputed vectors instead of raw text.
    """
    m = re.fullmatch(r"feathash-d(\d+)-s(-?\d+)", tag)
    if m is None:
        return None
    return HashFeatureEmbedder(dim=int(m.group(1)), seed=int(m.group(2)))


def dot_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise row dot products, (m, d) x (n, d) -> (m, n), float64.

    Deliberately routed through einsum with optimize=False: its per-element
    accumulation order depends only on d and the row strides, never on how
    many rows are in the operands. Every scoring path in the package uses
    this routine, so per-record scores are bitwise identical whether rows
    are scored one record at a time or in large batches.
    """
    return np.einsum(
        "md,nd->mn",
        np.ascontiguousarray(a, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
        optimize=False,
    )


def similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity matrix between two sets of unit-norm rows.

    Entries are clamped to [-1, 1]; rounding in the dot products can
    otherwise leak past the bound and downstream score ranges depend on it.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("expected 2-D row matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    w = dot_rows(a, b)
    np.clip(w, -1.0, 1.0, out=w)
    return w
