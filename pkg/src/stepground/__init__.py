"""Corpus-grounded verification and reward scoring for procedural step plans."""

from .align import (
    AlignConfig,
    AlignmentOutcome,
    NwAlignment,
    StepSequence,
    grounding_score,
    mono_coverage,
    mono_coverage_scan,
    nw_align,
    stage1_retrieve,
)
from .corpus import (
    CorpusFormatError,
    CorpusIndex,
    IndexIntegrityError,
    Manifest,
    NarrationRecord,
    NarrationSegment,
    build_index,
    ingest_corpus,
    read_embedding_blob,
    read_index,
    write_embedding_blob,
    write_index,
)
from .embedding import (
    Embedder,
    HashFeatureEmbedder,
    embedder_from_tag,
    similarity_matrix,
)
from .reward import (
    AdvantageGroup,
    RewardBreakdown,
    RewardConfig,
    compute_reward,
    concat_steps,
    group_advantages,
    reward_from_scores,
)
from .simulate import (
    ProcedureGrammar,
    Prompt,
    SimConfig,
    TaskTemplate,
    ToyPolicy,
    TrainResult,
    default_grammar,
    generate_world,
    grpo_step,
    rollout,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AlignConfig",
    "AlignmentOutcome",
    "AdvantageGroup",
    "CorpusFormatError",
    "CorpusIndex",
    "Embedder",
    "HashFeatureEmbedder",
    "IndexIntegrityError",
    "Manifest",
    "NarrationRecord",
    "NarrationSegment",
    "NwAlignment",
    "ProcedureGrammar",
    "Prompt",
    "RewardBreakdown",
    "RewardConfig",
    "SimConfig",
    "StepSequence",
    "TaskTemplate",
    "ToyPolicy",
    "TrainResult",
    "build_index",
    "compute_reward",
    "concat_steps",
    "default_grammar",
    "embedder_from_tag",
    "generate_world",
    "grounding_score",
    "group_advantages",
    "grpo_step",
    "ingest_corpus",
    "mono_coverage",
    "mono_coverage_scan",
    "nw_align",
    "read_embedding_blob",
    "read_index",
    "reward_from_scores",
    "rollout",
    "similarity_matrix",
    "stage1_retrieve",
    "train",
    "write_embedding_blob",
    "write_index",
]
