"""Group rollouts under the behavior policy and dynamic-sampling batch filling."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from concise_rl import rng as rng_mod
from concise_rl.policy_core import (
    PolicyParams,
    forward,
    log_softmax,
    sample_from,
    sampling_probs,
)
from concise_rl.task_env import ParsedResponse, Question, accuracy_reward, parse_response

log = logging.getLogger(__name__)


class FilterMode(str, enum.Enum):
    STAGE1 = "STAGE1"  # keep iff 0 < c < G
    STAGE2 = "STAGE2"  # keep iff c > 0
    NONE = "NONE"

    def admits(self, c: int, G: int) -> bool:
        if self is FilterMode.STAGE1:
            return 0 < c < G
        if self is FilterMode.STAGE2:
            return c > 0
        return True


class BatchStarvation(RuntimeError):
    def __init__(self, mode: FilterMode, wanted: int, collected: int, discarded: int,
                 attempts: int):
        self.mode, self.wanted, self.collected = mode, wanted, collected
        self.discarded, self.attempts = discarded, attempts
        super().__init__(
            f"dynamic sampling ({mode.value}) collected {collected}/{wanted} groups after "
            f"{attempts} attempts; {discarded} groups discarded"
        )


@dataclass(frozen=True, eq=False)
class Rollout:
    token_ids: np.ndarray
    tokens: tuple[str, ...]
    behavior_logp: np.ndarray
    truncated: bool
    parsed: ParsedResponse
    reward: int

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass(eq=False)
class RolloutGroup:
    question: Question
    prompt_ids: np.ndarray
    rollouts: list[Rollout]
    shaped_rewards: np.ndarray | None = field(default=None)

    @property
    def G(self) -> int:
        return len(self.rollouts)

    @property
    def correct_count(self) -> int:
        return sum(r.reward for r in self.rollouts)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts], dtype=np.float64)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([r.length for r in self.rollouts], dtype=np.int64)


def generate(params: PolicyParams, prompts: Sequence[Sequence[int]], keys: Sequence[tuple],
             L_max: int, temperature: float, top_p: float, seed: int, purpose: str = "rollout"):
    """Sample one response per prompt, all rows advanced in lock-step.

    Row ``i`` draws its uniforms from the stream keyed by ``keys[i]``; the
    uniform at position ``t`` drives token ``t``.  Returns a list of
    ``(token_ids, behavior_logp, truncated)``.
    """
    if L_max < 1:
        raise ValueError("L_max must be >= 1")
    n, k = len(prompts), params.k
    eos, pad = params.vocab.eos_id, params.vocab.pad_id
    u = np.stack([rng_mod.stream(seed, purpose, *key).random(L_max) for key in keys]) if n else \
        np.zeros((0, L_max))
    ctx = np.full((n, k), pad, dtype=np.int64)
    for i, p in enumerate(prompts):
        tail = list(p)[-k:]
        if tail:
            ctx[i, k - len(tail):] = tail
    toks = np.full((n, L_max), -1, dtype=np.int64)
    logps = np.zeros((n, L_max))
    lengths = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for t in range(L_max):
        rows = np.nonzero(active)[0]
        if rows.size == 0:
            break
        _, _, logits = forward(params, ctx[rows])
        probs = sampling_probs(logits, temperature, top_p)
        tok = sample_from(probs, u[rows, t])
        toks[rows, t] = tok
        logps[rows, t] = log_softmax(logits)[np.arange(rows.size), tok]
        lengths[rows] += 1
        ctx[rows, :-1] = ctx[rows, 1:]
        ctx[rows, -1] = tok
        active[rows[tok == eos]] = False
    return [(toks[i, :lengths[i]].copy(), logps[i, :lengths[i]].copy(),
             bool(active[i])) for i in range(n)]


def _make_rollout(params: PolicyParams, q: Question, ids, logp, truncated) -> Rollout:
    symbols = tuple(params.vocab.symbols(ids))
    parsed = parse_response(symbols)
    ids.flags.writeable = False
    logp.flags.writeable = False
    return Rollout(ids, symbols, logp, truncated, parsed, accuracy_reward(parsed, q.answer))


def rollout_groups(params: PolicyParams, questions: Sequence[Question], G: int, L_max: int,
                   temperature: float, top_p: float, seed: int, step: int = 0,
                   draw_indices: Sequence[int] | None = None,
                   purpose: str = "rollout") -> list[RolloutGroup]:
    """Roll out ``G`` responses for each question in one vectorized pass.

    Rollout ``j`` of the question drawn at position ``d`` uses the random
    stream keyed by (seed, purpose, step, d, question id, j).
    """
    if G < 2:
        raise ValueError("group size G must be >= 2")
    if draw_indices is None:
        draw_indices = range(len(questions))
    prompts, keys = [], []
    prompt_ids = [np.asarray(params.vocab.ids(q.prompt_tokens), dtype=np.int64) for q in questions]
    for q, d, p in zip(questions, draw_indices, prompt_ids):
        for j in range(G):
            prompts.append(p)
            keys.append((step, d, q.id, j))
    out = generate(params, prompts, keys, L_max, temperature, top_p, seed, purpose)
    groups = []
    for gi, q in enumerate(questions):
        rolls = [_make_rollout(params, q, *out[gi * G + j]) for j in range(G)]
        groups.append(RolloutGroup(q, prompt_ids[gi], rolls))
    return groups


def rollout_group(params: PolicyParams, q: Question, G: int, L_max: int, temperature: float,
                  top_p: float, seed: int, step: int = 0, draw_index: int = 0) -> RolloutGroup:
    return rollout_groups(params, [q], G, L_max, temperature, top_p, seed, step, [draw_index])[0]


@dataclass
class FilledBatch:
    groups: list[RolloutGroup]
    discarded: int
    sampled: list[RolloutGroup]

    @property
    def groups_sampled(self) -> int:
        return len(self.sampled)


def fill_filtered_batch(params: PolicyParams, questions: Iterator[Question], B: int, G: int,
                        mode: FilterMode, max_attempts: int, L_max: int, temperature: float,
                        top_p: float, seed: int, step: int = 0,
                        fill: str = "resample") -> FilledBatch:
    """Collect ``B`` groups that satisfy ``mode``, resampling fresh questions.

    Each round draws exactly as many questions as are still missing, so at
    most ``B`` groups are kept and every sampled group is either kept or
    counted as discarded.  With ``fill="mask"`` a single round of ``B``
    groups is drawn and violating groups are dropped without refilling.
    """
    mode = FilterMode(mode)
    if B < 1 or max_attempts < B:
        raise ValueError("need B >= 1 and max_attempts >= B")
    if fill not in ("resample", "mask"):
        raise ValueError(f"unknown fill strategy {fill!r}")
    kept: list[RolloutGroup] = []
    sampled: list[RolloutGroup] = []
    discarded = 0
    draws = 0
    while len(kept) < B and draws < max_attempts:
        n = min(B - len(kept), max_attempts - draws)
        qs = [next(questions) for _ in range(n)]
        groups = rollout_groups(params, qs, G, L_max, temperature, top_p, seed, step,
                                range(draws, draws + n))
        draws += n
        for g in groups:
            sampled.append(g)
            if mode.admits(g.correct_count, g.G):
                kept.append(g)
            else:
                discarded += 1
        if fill == "mask":
            break
    if fill == "resample" and len(kept) < B:
        raise BatchStarvation(mode, B, len(kept), discarded, draws)
    if discarded:
        log.debug("step %d: %s discarded %d groups", step, mode.value, discarded)
    return FilledBatch(kept, discarded, sampled)


def dump_rows(groups: Sequence[RolloutGroup], **extra) -> Iterator[dict]:
    """Rows in the response-corpus JSONL format (plus any ``extra`` fields)."""
    for g in groups:
        shaped = g.shaped_rewards
        for i, r in enumerate(g.rollouts):
            row = {"question_id": g.question.id, "tokens": list(r.tokens),
                   "reward": r.reward, "length": r.length}
            row.update(extra)
            if shaped is not None:
                row["shaped_reward"] = float(shaped[i])
                row["group_correct"] = g.correct_count
            yield row


def write_jsonl(rows, fh) -> None:
    for row in rows:
        fh.write(json.dumps(row) + "\n")
