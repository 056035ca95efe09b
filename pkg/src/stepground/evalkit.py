"""Deterministic evaluation arithmetic over already-judged transcripts.

The kit never calls a judge model: it consumes line-delimited JSON records
of per-example criterion scores, applies the penalty rules, and aggregates.
Per-example scores are the sum of six 0-5 criteria normalized by the
30-point maximum; datasets average their examples and splits average their
datasets with equal weight regardless of example counts.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import Embedder, similarity_matrix

logger = logging.getLogger(__name__)

CRITERIA = (
    "logical_progression",
    "temporal_alignment",
    "spatial_grounding",
    "continuation",
    "clarity",
    "semantic_alignment",
)
# verbose or padded predictions cap these criteria at 2
FLUFF_CAPPED = ("semantic_alignment", "clarity")
MAX_POINTS = 30

_ALLOWED_PAIR_VALUES = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class JudgedExample:
    dataset: str
    scores: dict[str, int]

    def __post_init__(self) -> None:
        missing = set(CRITERIA) - set(self.scores)
        if missing:
            raise ValueError(f"missing criteria: {sorted(missing)}")
        for name in CRITERIA:
            v = self.scores[name]
            if not isinstance(v, int) or not 0 <= v <= 5:
                raise ValueError(f"{name} must be an integer in 0..5, got {v!r}")

    @property
    def total(self) -> int:
        return sum(self.scores[name] for name in CRITERIA)

    @property
    def percent(self) -> float:
        return self.total / MAX_POINTS * 100.0


def apply_penalties(
    dataset: str, raw_scores: dict[str, int], fluff: bool = False, fatal: bool = False
) -> JudgedExample:
    """Apply the fatal and fluff rules to raw criterion scores.

    Fatal (empty or non-actionable prediction) zeroes every criterion and
    dominates fluff; fluff caps the capped criteria at 2, leaving the rest
    untouched.
    """
    for name in CRITERIA:
        v = raw_scores.get(name)
        if not isinstance(v, int) or not 0 <= v <= 5:
            raise ValueError(f"{name} must be an integer in 0..5, got {v!r}")
    if fatal:
        return JudgedExample(dataset, {name: 0 for name in CRITERIA})
    scores = {name: raw_scores[name] for name in CRITERIA}
    if fluff:
        for name in FLUFF_CAPPED:
            scores[name] = min(scores[name], 2)
    return JudgedExample(dataset, scores)


def macro_accuracy(
    examples: Sequence[JudgedExample], split_map: dict[str, str]
) -> tuple[dict[str, float], dict[str, float]]:
    """Per-dataset means and unweighted per-split macro averages (percent).

    Every example's dataset must appear in ``split_map``; a split's score is
    the plain mean of its datasets' scores, so duplicating examples within
    one dataset never moves the macro.
    """
    if not examples:
        raise ValueError("no examples to aggregate")
    by_dataset: dict[str, list[float]] = {}
    for ex in examples:
        if ex.dataset not in split_map:
            raise ValueError(f"dataset {ex.dataset!r} missing from the split map")
        by_dataset.setdefault(ex.dataset, []).append(ex.percent)
    dataset_scores = {
        name: float(np.mean(vals)) for name, vals in sorted(by_dataset.items())
    }
    by_split: dict[str, list[float]] = {}
    for name, score in dataset_scores.items():
        by_split.setdefault(split_map[name], []).append(score)
    split_scores = {
        split: float(np.mean(vals)) for split, vals in sorted(by_split.items())
    }
    return dataset_scores, split_scores


def diversity_score(pairwise: np.ndarray) -> float:
    """Mean pairwise judged difference over all unordered generation pairs.

    The input is an N x N symmetric matrix of judged values from
    {0, 0.25, 0.5, 0.75, 1}; the diagonal is ignored. Asymmetry is an error,
    with no tolerance, because the judged values are exact.
    """
    m = np.asarray(pairwise, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"pairwise matrix must be square, got {m.shape}")
    n = m.shape[0]
    if n < 2:
        raise ValueError("need at least 2 generations")
    off = ~np.eye(n, dtype=bool)
    if not np.array_equal(m, m.T):
        raise ValueError("pairwise matrix is not symmetric")
    bad = sorted(set(np.round(m[off], 4)) - set(_ALLOWED_PAIR_VALUES))
    if bad:
        raise ValueError(f"pairwise values outside the judged scale: {bad}")
    iu = np.triu_indices(n, k=1)
    return float(m[iu].sum() * 2.0 / (n * (n - 1)))


def model_diversity(matrices: Iterable[np.ndarray]) -> float:
    """Mean per-prompt diversity over a collection of prompts."""
    scores = [diversity_score(m) for m in matrices]
    if not scores:
        raise ValueError("no prompts to aggregate")
    return float(np.mean(scores))


@dataclass(frozen=True)
class Taxonomy:
    """Closed action inventory with unit-norm embedding rows."""

    actions: tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings)
        if len(self.actions) == 0:
            raise ValueError("taxonomy must be non-empty")
        if emb.ndim != 2 or emb.shape[0] != len(self.actions):
            raise ValueError("embeddings rows must match action count")

    @classmethod
    def from_actions(cls, actions: Sequence[str], embedder: Embedder) -> "Taxonomy":
        rows = np.stack([embedder.embed(a) for a in actions])
        return cls(tuple(actions), rows)


def remap_to_taxonomy(step: str, taxonomy: Taxonomy, embedder: Embedder) -> int:
    """Index of the closest admissible action by cosine; ties take the lowest."""
    v = embedder.embed(step).reshape(1, -1)
    sims = similarity_matrix(v, taxonomy.embeddings)[0]
    return int(np.argmax(sims))


# ---------------------------------------------------------------------------
# judged-transcript ingestion


_KV_RE = re.compile(r"([a-z_]+)\s*[:=]\s*(-?\d+)")


def parse_judge_text(dataset: str, text: str) -> tuple[JudgedExample, list[str]]:
    """Fallback key-value parse of malformed judge output.

    Integer values are extracted per criterion name and clamped to [0, 5];
    missing criteria score 0 and are reported back as warnings.
    """
    found = {k: int(v) for k, v in _KV_RE.findall(text.lower())}
    scores: dict[str, int] = {}
    missing: list[str] = []
    for name in CRITERIA:
        if name in found:
            scores[name] = min(max(found[name], 0), 5)
        else:
            scores[name] = 0
            missing.append(name)
    if missing:
        logger.warning(
            "judge output for %s missing %s; scored 0", dataset, ", ".join(missing)
        )
    return JudgedExample(dataset, scores), missing


def read_transcript(path: str | Path) -> list[JudgedExample]:
    """Load judged examples from a line-delimited JSON transcript.

    Each line carries a ``dataset`` tag plus either a ``scores`` object with
    the six criteria (optionally ``fluff``/``fatal`` flags applied here) or
    a raw ``judge_output`` string routed through the fallback parser.
    """
    examples: list[JudgedExample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {line_no}: malformed JSON: {exc}") from exc
            if not isinstance(obj, dict) or "dataset" not in obj:
                raise ValueError(f"line {line_no}: expected an object with a dataset")
            dataset = obj["dataset"]
            try:
                if "scores" in obj:
                    examples.append(
                        apply_penalties(
                            dataset,
                            obj["scores"],
                            fluff=bool(obj.get("fluff", False)),
                            fatal=bool(obj.get("fatal", False)),
                        )
                    )
                elif "judge_output" in obj:
                    example, _ = parse_judge_text(dataset, obj["judge_output"])
                    examples.append(example)
                else:
                    raise ValueError("needs either scores or judge_output")
            except (TypeError, ValueError) as exc:
                raise ValueError(f"line {line_no}: {exc}") from exc
    return examples


def write_report(
    dataset_scores: dict[str, float],
    split_scores: dict[str, float],
    json_path: str | Path | None = None,
    csv_path: str | Path | None = None,
) -> dict:
    """Emit the aggregation as JSON and a per-dataset CSV table."""
    report = {"datasets": dataset_scores, "splits": split_scores}
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("kind,name,macro_accuracy\n")
            for name, score in dataset_scores.items():
                fh.write(f"dataset,{name},{score:.4f}\n")
            for name, score in split_scores.items():
                fh.write(f"split,{name},{score:.4f}\n")
    return report
