"""Desk-scale GRPO training loop over a synthetic procedure world.

A small grammar of household procedures stands in for a narration corpus: a
few fixed task templates, optional swappable adjacent step pairs (so several
orderings are valid), and paraphrase/drop noise when narrations are emitted.
A tabular softmax policy over (task, position, action) is optimized with
clipped-ratio policy gradients, within-group standardized rewards from the
grounding verifier, and a KL penalty to the reference policy. The point of
the simulator is to demonstrate end to end that the corpus-grounded reward
drives policy improvement without any learned critic.

Rollout randomness is keyed by (seed, prompt, slot) and deliberately not by
iteration: with a zero learning rate the policy, the sampled completions,
and therefore the whole training curve are exactly constant, and two runs
with the same seed are identical everywhere.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .align import AlignConfig, StepSequence, grounding_score
from .corpus import CorpusIndex, NarrationRecord, NarrationSegment, build_index
from .embedding import Embedder, HashFeatureEmbedder, embedder_from_tag
from .reward import RewardConfig, group_advantages, reward_from_scores

SIM_EMBED_DIM = 128


@dataclass(frozen=True)
class TaskTemplate:
    name: str
    steps: tuple[int, ...]
    swappable: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if len(self.steps) < 3:
            raise ValueError(f"task {self.name!r} needs >= 3 steps")
        used: set[int] = set()
        for a, b in self.swappable:
            if b != a + 1 or not 0 <= a < len(self.steps) - 1:
                raise ValueError(
                    f"task {self.name!r}: swappable pair ({a}, {b}) is not an "
                    f"adjacent in-range pair"
                )
            if a in used or b in used:
                raise ValueError(f"task {self.name!r}: swappable pairs overlap")
            used.update((a, b))


@dataclass(frozen=True)
class ProcedureGrammar:
    tasks: tuple[TaskTemplate, ...]
    vocab: dict[int, tuple[str, ...]]   # step id -> (primary text, *paraphrases)
    noise: float = 0.0
    intro: str = "hello everyone welcome back tutorial"

    def __post_init__(self) -> None:
        if not 0 <= self.noise < 1:
            raise ValueError(f"noise must be in [0, 1), got {self.noise}")
        if not self.intro:
            raise ValueError("intro text must be non-empty")
        for task in self.tasks:
            for sid in task.steps:
                if sid not in self.vocab or not self.vocab[sid]:
                    raise ValueError(f"step id {sid} missing from vocab")

    @property
    def n_step_ids(self) -> int:
        return max(self.vocab) + 1

    @property
    def stop_id(self) -> int:
        return self.n_step_ids

    @property
    def n_actions(self) -> int:
        return self.n_step_ids + 1

    @property
    def max_template_len(self) -> int:
        return max(len(t.steps) for t in self.tasks)

    def step_text(self, sid: int) -> str:
        return self.vocab[sid][0]


@dataclass(frozen=True)
class Prompt:
    prompt_id: int
    task_id: int
    cut: int
    history_ids: tuple[int, ...]
    history_texts: tuple[str, ...]


@dataclass(frozen=True)
class SimConfig:
    group_size: int = 4
    kl_beta: float = 0.04
    clip_ratio: float = 0.30
    learning_rate: float = 5.0
    iterations: int = 600
    seed: int = 0
    horizon: int = 4            # max completion length in steps
    n_narrations: int = 500
    batch_size: int = 0         # 0 = every prompt each iteration
    prompt_repeats: int = 6     # copies of each (task, cut) prompt per epoch
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if self.kl_beta < 0:
            raise ValueError(f"kl_beta must be >= 0, got {self.kl_beta}")
        if not 0 < self.clip_ratio < 1:
            raise ValueError(f"clip_ratio must be in (0, 1), got {self.clip_ratio}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")


class ToyPolicy:
    """Tabular softmax policy over (task, position, action) logits."""

    def __init__(self, logits: np.ndarray, temperature: float = 1.0) -> None:
        if temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        self.logits = np.asarray(logits, dtype=np.float64)
        self.temperature = float(temperature)

    @classmethod
    def uniform(
        cls, n_tasks: int, n_positions: int, n_actions: int, temperature: float = 1.0
    ) -> "ToyPolicy":
        return cls(np.zeros((n_tasks, n_positions, n_actions)), temperature)

    @property
    def n_positions(self) -> int:
        return self.logits.shape[1]

    def probs(self, task_id: int, position: int) -> np.ndarray:
        z = self.logits[task_id, position]
        if self.temperature == 0.0:
            p = np.zeros_like(z)
            p[int(np.argmax(z))] = 1.0
            return p
        z = z / self.temperature
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()


# ---------------------------------------------------------------------------
# world generation


def default_grammar(noise: float = 0.15) -> ProcedureGrammar:
    """Three 3-step household tasks over a 9-step vocabulary.

    Step texts within a task share almost no tokens, so a completion that
    merely restates earlier steps gains nothing from accidental similarity
    to the remaining narration segments. Two tasks allow their final two
    steps in either order; the third is strictly ordered. Keeping the
    swappable pair at the tail means every prefix of either ordering is
    itself a valid partial execution, so the two orderings stay
    reward-symmetric at every length.
    """
    vocab: dict[int, tuple[str, ...]] = {
        # brew tea
        0: ("fill kettle cold water", "fill kettle icy water", "refill kettle cold water"),
        1: ("spoon loose tea leaves", "spoon fragrant tea leaves", "measure loose tea leaves"),
        2: ("pour steaming liquid over", "stream steaming liquid over", "pour steaming liquid gently"),
        # make omelet
        3: ("crack eggs mixing bowl", "break eggs mixing bowl", "crack eggs ceramic bowl"),
        4: ("whisk yolks salt pepper", "beat yolks salt pepper", "whisk yolks pinch salt"),
        5: ("melt butter skillet medium", "warm butter skillet medium", "melt butter skillet slowly"),
        # pot a seedling
        6: ("dig shallow planting hole", "carve shallow planting hole", "dig small planting hole"),
        7: ("lower seedling roots inside", "settle seedling roots inside", "lower seedling roots carefully"),
        8: ("firm soil around stem", "press soil around stem", "firm damp soil stem"),
    }
    tasks = (
        TaskTemplate("brew-tea", (0, 1, 2), swappable=((1, 2),)),
        TaskTemplate("make-omelet", (3, 4, 5), swappable=((1, 2),)),
        TaskTemplate("pot-seedling", (6, 7, 8)),
    )
    return ProcedureGrammar(tasks, vocab, noise=noise)


def _emit_order(task: TaskTemplate, rng: np.random.Generator) -> list[int]:
    order = list(task.steps)
    for a, b in task.swappable:
        if rng.random() < 0.5:
            order[a], order[b] = order[b], order[a]
    return order


def generate_world(
    grammar: ProcedureGrammar,
    n_narrations: int,
    seed: int,
    embedder: Embedder | None = None,
    n_prompts: int | None = None,
) -> tuple[CorpusIndex, list[Prompt]]:
    """Emit a noisy narration corpus plus training prompts.

    Each narration samples a task and a stop point (the corpus covers
    partial executions as well as complete ones), applies the allowed
    swaps within the emitted range, then walks the chosen order emitting
    one time-stamped segment per step; with probability ``noise`` a
    segment is perturbed, half the time by dropping it and half the time
    by swapping in a paraphrase. Every narration opens with a fixed
    noise-exempt intro segment, so no narration ever equals a bare step
    prefix. Prompts are (task, history prefix) pairs; by default every
    cut point of every task is enumerated once, or ``n_prompts`` of them
    are sampled.
    """
    if n_narrations < 1:
        raise ValueError(f"n_narrations must be >= 1, got {n_narrations}")
    if embedder is None:
        embedder = HashFeatureEmbedder(dim=SIM_EMBED_DIM, seed=0)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0)))

    records: list[NarrationRecord] = []
    for j in range(n_narrations):
        task_id = int(rng.integers(len(grammar.tasks)))
        order = _emit_order(grammar.tasks[task_id], rng)
        stop = int(rng.integers(1, len(order) + 1))
        segments = [NarrationSegment(0.0, 1.0, grammar.intro)]
        t = 1
        for sid in order[:stop]:
            variants = grammar.vocab[sid]
            text = variants[0]
            if rng.random() < grammar.noise:
                if rng.random() < 0.5:
                    continue  # dropped segment
                if len(variants) > 1:
                    text = variants[1 + int(rng.integers(len(variants) - 1))]
            segments.append(NarrationSegment(float(t), float(t + 1), text))
            t += 1
        if len(segments) == 1:
            segments.append(NarrationSegment(1.0, 2.0, grammar.vocab[order[0]][0]))
        records.append(
            NarrationRecord(f"sim-t{task_id}-k{stop}-{j:06d}", tuple(segments))
        )

    index = build_index(records, embedder)

    all_cuts = [
        (task_id, cut)
        for task_id, task in enumerate(grammar.tasks)
        for cut in range(1, len(task.steps))
    ]
    if n_prompts is None:
        chosen = all_cuts
    else:
        picks = rng.integers(len(all_cuts), size=n_prompts)
        chosen = [all_cuts[int(i)] for i in picks]
    prompts = []
    for pid, (task_id, cut) in enumerate(chosen):
        ids = grammar.tasks[task_id].steps[:cut]
        prompts.append(
            Prompt(
                prompt_id=pid,
                task_id=task_id,
                cut=cut,
                history_ids=ids,
                history_texts=tuple(grammar.step_text(s) for s in ids),
            )
        )
    return index, prompts


# ---------------------------------------------------------------------------
# rollouts


def _sample_trace(
    policy: ToyPolicy,
    grammar: ProcedureGrammar,
    prompt: Prompt,
    slot: int,
    seed: int | tuple[int, ...],
    horizon: int,
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Sample one completion; returns (positions, actions) including any stop."""
    key = seed if isinstance(seed, tuple) else (seed,)
    rng = np.random.default_rng(
        np.random.SeedSequence((*key, prompt.prompt_id, slot))
    )
    positions: list[int] = []
    actions: list[int] = []
    n_actions = policy.logits.shape[2]
    for off in range(horizon):
        pos = prompt.cut + off
        if pos >= policy.n_positions:
            break
        p = policy.probs(prompt.task_id, pos)
        a = int(rng.choice(n_actions, p=p))
        positions.append(pos)
        actions.append(a)
        if a == grammar.stop_id:
            break
    return tuple(positions), tuple(actions)


def rollout(
    policy: ToyPolicy,
    grammar: ProcedureGrammar,
    prompt: Prompt,
    group_size: int,
    seed: int | tuple[int, ...],
    horizon: int,
) -> list[list[int]]:
    """Sample a group of completions (step id lists, stop token stripped)."""
    if group_size < 2:
        raise ValueError(f"group_size must be >= 2, got {group_size}")
    out = []
    for g in range(group_size):
        _, actions = _sample_trace(policy, grammar, prompt, g, seed, horizon)
        out.append([a for a in actions if a != grammar.stop_id])
    return out


def history_echo_completion(prompt: Prompt) -> list[int]:
    """Canned reward-hacking probe: re-emit the history verbatim."""
    return list(prompt.history_ids)


# ---------------------------------------------------------------------------
# surrogate objective and its exact gradient


@dataclass(frozen=True)
class SampledCompletion:
    task_id: int
    positions: tuple[int, ...]
    actions: tuple[int, ...]
    advantage: float


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - math.log(float(np.exp(z).sum()))


def surrogate_objective(
    logits: np.ndarray,
    samples: Sequence[SampledCompletion],
    old_logits: np.ndarray,
    ref_logits: np.ndarray,
    temperature: float,
    kl_beta: float,
    clip_ratio: float,
) -> float:
    """Clipped-ratio policy objective with an exact KL penalty to the reference.

    Per completion, token terms min(r * A, clip(r, 1-e, 1+e) * A) are averaged
    over its tokens, the categorical KL(pi || ref) at each visited position is
    averaged the same way, and completions are averaged uniformly:

        mean_g [ mean_t term(g, t) - kl_beta * mean_t KL(g, t) ]

    Written as a pure function of ``logits`` so its gradient can be checked
    by finite differences.
    """
    total = 0.0
    for s in samples:
        term = 0.0
        kl_sum = 0.0
        for pos, a in zip(s.positions, s.actions):
            lp_new = _log_softmax(logits[s.task_id, pos] / temperature)
            lp_old = _log_softmax(old_logits[s.task_id, pos] / temperature)
            ratio = math.exp(lp_new[a] - lp_old[a])
            clipped = min(max(ratio, 1.0 - clip_ratio), 1.0 + clip_ratio)
            term += min(ratio * s.advantage, clipped * s.advantage)
            lp_ref = _log_softmax(ref_logits[s.task_id, pos] / temperature)
            p_new = np.exp(lp_new)
            kl_sum += float(np.dot(p_new, lp_new - lp_ref))
        n = max(len(s.positions), 1)
        total += (term - kl_beta * kl_sum) / n
    return total / max(len(samples), 1)


def surrogate_gradient(
    samples: Sequence[SampledCompletion],
    logits: np.ndarray,
    ref_logits: np.ndarray,
    temperature: float,
    kl_beta: float,
) -> tuple[np.ndarray, float]:
    """Exact gradient of the surrogate at the rollout policy itself.

    With a single inner epoch the ratios are 1 where the gradient is taken,
    so the clip term is inactive and the policy-gradient part reduces to
    advantage-weighted score functions. Returns (gradient, mean token KL).
    """
    grad = np.zeros_like(logits)
    kl_total = 0.0
    n_tokens = 0
    n = max(len(samples), 1)
    for s in samples:
        t_count = max(len(s.positions), 1)
        for pos, a in zip(s.positions, s.actions):
            lp = _log_softmax(logits[s.task_id, pos] / temperature)
            p = np.exp(lp)
            lp_ref = _log_softmax(ref_logits[s.task_id, pos] / temperature)
            pg = -p.copy()
            pg[a] += 1.0
            cell = (s.advantage / (t_count * n)) * pg
            log_ratio = lp - lp_ref
            kl = float(np.dot(p, log_ratio))
            cell -= (kl_beta / (t_count * n)) * p * (log_ratio - kl)
            grad[s.task_id, pos] += cell / temperature
            kl_total += kl
            n_tokens += 1
    return grad, kl_total / max(n_tokens, 1)


# ---------------------------------------------------------------------------
# GRPO step and training loop


@dataclass(frozen=True)
class StepStats:
    mean_reward: float
    mean_kl: float
    gate_rate: float


class _HistCache:
    """Memoized grounding scores for the training loop.

    Histories recur across iterations and duplicated prompts, and the
    policy resamples the same completions constantly once it concentrates;
    both lookups are pure functions of their text, so the cache is exact.
    """

    def __init__(
        self,
        index: CorpusIndex,
        embedder: Embedder,
        acfg: AlignConfig,
    ) -> None:
        self.index = index
        self.embedder = embedder
        self.acfg = acfg
        self._seqs: dict[tuple, StepSequence] = {}
        self._scores: dict[tuple, tuple[float, int]] = {}
        self._rewards: dict[tuple, tuple[float, bool]] = {}

    def history(self, prompt: Prompt) -> tuple[StepSequence, float, int]:
        key = (prompt.task_id, prompt.history_ids)
        if key not in self._scores:
            seq = StepSequence.from_texts(prompt.history_texts, self.embedder)
            a_hist, best, _ = grounding_score(seq, self.index, self.acfg)
            self._seqs[key] = seq
            self._scores[key] = (a_hist, best.record_idx)
        return self._seqs[key], self._scores[key][0], self._scores[key][1]

    def reward_memo(self) -> dict[tuple, tuple[float, bool]]:
        return self._rewards


def _completion_reward(
    cache: _HistCache,
    prompt: Prompt,
    step_texts: list[str],
    acfg: AlignConfig,
    rcfg: RewardConfig,
) -> tuple[float, bool]:
    memo_key = (
        prompt.task_id,
        prompt.history_ids,
        tuple(step_texts),
        (rcfg.tau, rcfg.alpha, rcfg.eps),
    )
    memo = cache.reward_memo()
    if memo_key in memo:
        return memo[memo_key]
    hist_seq, a_hist, _ = cache.history(prompt)
    if not step_texts:
        a_full = a_hist
    else:
        comp = StepSequence.from_texts(step_texts, cache.embedder)
        full = StepSequence(
            hist_seq.steps + comp.steps,
            np.concatenate([hist_seq.embeddings, comp.embeddings], axis=0),
        )
        a_full, _, _ = grounding_score(full, cache.index, acfg)
    _, reward, gated = reward_from_scores(a_full, a_hist, rcfg)
    memo[memo_key] = (reward, gated)
    return reward, gated


def grpo_step(
    policy: ToyPolicy,
    ref_policy: ToyPolicy,
    prompts: Sequence[Prompt],
    index: CorpusIndex,
    grammar: ProcedureGrammar,
    acfg: AlignConfig,
    rcfg: RewardConfig,
    scfg: SimConfig,
    seed: int | tuple[int, ...],
    hist_cache: _HistCache | None = None,
) -> tuple[ToyPolicy, StepStats]:
    """One GRPO update over a prompt batch; returns the new policy and stats."""
    embedder = embedder_from_tag(index.manifest.embedder)
    if embedder is None:
        raise ValueError(
            f"index embedder tag {index.manifest.embedder!r} is not a built-in "
            f"embedder; the simulator needs to embed sampled completions"
        )
    if hist_cache is None:
        hist_cache = _HistCache(index, embedder, acfg)

    samples: list[SampledCompletion] = []
    rewards_all: list[float] = []
    gated_count = 0
    for prompt in prompts:
        traces = [
            _sample_trace(policy, grammar, prompt, g, seed, scfg.horizon)
            for g in range(scfg.group_size)
        ]
        rewards = []
        for positions, actions in traces:
            texts = [grammar.step_text(a) for a in actions if a != grammar.stop_id]
            reward, gated = _completion_reward(hist_cache, prompt, texts, acfg, rcfg)
            rewards.append(reward)
            gated_count += int(gated)
        adv = group_advantages(rewards)
        for (positions, actions), a in zip(traces, adv.advantages):
            if positions:
                samples.append(
                    SampledCompletion(prompt.task_id, positions, actions, a)
                )
        rewards_all.extend(rewards)

    grad, mean_kl = surrogate_gradient(
        samples, policy.logits, ref_policy.logits, policy.temperature, scfg.kl_beta
    )
    new_policy = ToyPolicy(
        policy.logits + scfg.learning_rate * grad, policy.temperature
    )
    stats = StepStats(
        mean_reward=float(np.mean(rewards_all)),
        mean_kl=mean_kl,
        gate_rate=gated_count / max(len(rewards_all), 1),
    )
    return new_policy, stats


def evaluate_policy(
    policy: ToyPolicy,
    prompts: Sequence[Prompt],
    grammar: ProcedureGrammar,
    scfg: SimConfig,
    hist_cache: _HistCache,
    acfg: AlignConfig,
    rcfg: RewardConfig,
    seed: int | tuple[int, ...],
) -> tuple[float, float]:
    """Mean reward and gate rate of sampled completions under a fixed seed.

    The seed does not vary across training iterations, so this is a pure
    function of the policy: a frozen policy yields an exactly constant
    evaluation, which is what the training curve records.
    """
    rewards: list[float] = []
    gated = 0
    for prompt in prompts:
        for g in range(scfg.group_size):
            _, actions = _sample_trace(policy, grammar, prompt, g, seed, scfg.horizon)
            texts = [grammar.step_text(a) for a in actions if a != grammar.stop_id]
            r, gate = _completion_reward(hist_cache, prompt, texts, acfg, rcfg)
            rewards.append(r)
            gated += int(gate)
    return float(np.mean(rewards)), gated / max(len(rewards), 1)


@dataclass
class TrainResult:
    curve: np.ndarray                 # evaluation mean reward per iteration
    policy: ToyPolicy
    ref_policy: ToyPolicy
    index: CorpusIndex
    prompts: list[Prompt]
    grammar: ProcedureGrammar
    stats: list[StepStats]
    config: SimConfig


def train(
    scfg: SimConfig,
    grammar: ProcedureGrammar | None = None,
    acfg: AlignConfig | None = None,
    rcfg: RewardConfig | None = None,
) -> TrainResult:
    """Run the GRPO loop on a generated world; deterministic given the seed.

    Training rollouts draw fresh exploration noise each iteration; the
    recorded curve is a fixed-seed evaluation of the updated policy, so it
    depends only on the policy trajectory (a zero learning rate gives an
    exactly flat curve).
    """
    grammar = grammar if grammar is not None else default_grammar()
    acfg = acfg if acfg is not None else AlignConfig()
    rcfg = rcfg if rcfg is not None else RewardConfig()
    embedder = HashFeatureEmbedder(dim=SIM_EMBED_DIM, seed=0)
    index, base_prompts = generate_world(grammar, scfg.n_narrations, scfg.seed, embedder)

    # replicate each prompt so every update averages more sampled groups;
    # copies get distinct ids and therefore independent rollout noise
    prompts: list[Prompt] = []
    for _ in range(max(scfg.prompt_repeats, 1)):
        for p in base_prompts:
            prompts.append(
                Prompt(len(prompts), p.task_id, p.cut, p.history_ids, p.history_texts)
            )

    n_positions = grammar.max_template_len + scfg.horizon
    policy = ToyPolicy.uniform(
        len(grammar.tasks), n_positions, grammar.n_actions, scfg.temperature
    )
    ref_policy = ToyPolicy(policy.logits.copy(), scfg.temperature)
    hist_cache = _HistCache(index, embedder, acfg)

    curve = np.empty(scfg.iterations, dtype=np.float64)
    stats_list: list[StepStats] = []
    for it in range(scfg.iterations):
        if scfg.batch_size <= 0 or scfg.batch_size >= len(prompts):
            batch = prompts
        else:
            b = scfg.batch_size
            batch = [prompts[(it * b + j) % len(prompts)] for j in range(b)]
        policy, stats = grpo_step(
            policy,
            ref_policy,
            batch,
            index,
            grammar,
            acfg,
            rcfg,
            scfg,
            seed=(scfg.seed, 1 + it),
            hist_cache=hist_cache,
        )
        curve[it], _ = evaluate_policy(
            policy, prompts, grammar, scfg, hist_cache, acfg, rcfg,
            seed=(scfg.seed, 0),
        )
        stats_list.append(stats)
    return TrainResult(
        curve=curve,
        policy=policy,
        ref_policy=ref_policy,
        index=index,
        prompts=prompts,
        grammar=grammar,
        stats=stats_list,
        config=scfg,
    )


# ---------------------------------------------------------------------------
# diversity probes


def valid_completions(
    grammar: ProcedureGrammar, task_id: int, cut: int
) -> list[tuple[int, ...]]:
    """Distinct template-consistent completions of a canonical history prefix."""
    task = grammar.tasks[task_id]
    canonical = task.steps
    suffixes: set[tuple[int, ...]] = set()
    for flips in itertools.product([False, True], repeat=len(task.swappable)):
        order = list(canonical)
        for flip, (a, b) in zip(flips, task.swappable):
            if flip:
                order[a], order[b] = order[b], order[a]
        if tuple(order[:cut]) == canonical[:cut]:
            suffixes.add(tuple(order[cut:]))
    return sorted(suffixes)


def completion_probability(
    policy: ToyPolicy,
    grammar: ProcedureGrammar,
    prompt: Prompt,
    completion: Sequence[int],
    horizon: int,
) -> float:
    """Exact probability that the policy emits this completion, then stops."""
    if len(completion) > horizon:
        return 0.0
    prob = 1.0
    pos = prompt.cut
    for sid in completion:
        if pos >= policy.n_positions:
            return 0.0
        prob *= float(policy.probs(prompt.task_id, pos)[sid])
        pos += 1
    if len(completion) < horizon and pos < policy.n_positions:
        prob *= float(policy.probs(prompt.task_id, pos)[grammar.stop_id])
    return prob
