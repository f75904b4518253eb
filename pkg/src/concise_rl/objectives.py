"""Clipped surrogate objectives, the k3 KL estimator and the entropy bonus.

All objectives are *maximized*.  Each returns its value together with the
exact gradient, assembled as per-token log-prob coefficients plus per-context
entropy coefficients and pushed through one backward pass of the policy.

Aggregation modes for the group objectives:

``TOKEN``
    ratio and clipping per token; the clipped terms of every generated
    token in the batch are averaged (token-level loss).
``SEQUENCE``
    one ratio per response, ``pi(o|q) / pi_old(o|q)``, clipped once; the
    response terms are summed and divided by the batch token count.

The shared ``1 / n_tokens`` weight makes the two modes coincide in gradient
when ``params == old_params``, and keeps the entropy and KL coefficients on
the same per-token scale as the policy term.  KL and entropy are per-token
quantities averaged over every generated token in the batch.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from concise_rl.policy_core import (
    PolicyParams,
    _entropy_from_logp,
    contexts,
    forward,
    log_softmax,
    policy_grad,
    token_logprobs,
)
from concise_rl.reward_shaping import group_advantages, shaped_rewards
from concise_rl.rollout_engine import RolloutGroup

log = logging.getLogger(__name__)

RATIO_CAP = 1e6
_LOG_RATIO_CAP = float(np.log(RATIO_CAP))


class Aggregation(str, enum.Enum):
    TOKEN = "TOKEN"
    SEQUENCE = "SEQUENCE"


class Branch(str, enum.Enum):
    UNCLIPPED = "UNCLIPPED"
    CLIPPED = "CLIPPED"


class ContractViolation(ValueError):
    """Objective called on groups that the required filter would have removed."""


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28

    def __post_init__(self) -> None:
        if not 0 < self.eps_low < 1 or self.eps_high < self.eps_low:
            raise ValueError(f"need 0 < eps_low < 1 and eps_high >= eps_low, got {self}")


SYMMETRIC_CLIP = ClipConfig(0.2, 0.2)


@dataclass(frozen=True)
class ObjectiveCoeffs:
    alpha: float = 0.001  # entropy bonus
    beta: float = 0.01  # KL penalty
    lam: float = 2e-6  # length reward

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ValueError("objective coefficients must be non-negative")


@dataclass
class ObjectiveReport:
    value: float
    grad: np.ndarray
    clip_fraction: float
    mean_kl: float
    mean_entropy: float
    aggregation: Aggregation
    ratios: np.ndarray
    advantages: list[np.ndarray] | None = None


# ---------------------------------------------------------------------------
# scalar pieces


def importance_ratio(new_logp, old_logp):
    """``exp(new - old)`` computed in log space, capped at ``RATIO_CAP``."""
    delta = np.asarray(new_logp, dtype=np.float64) - np.asarray(old_logp, dtype=np.float64)
    if np.any(delta > _LOG_RATIO_CAP):
        log.warning("importance ratio overflow: capped %d values at %g",
                    int(np.sum(delta > _LOG_RATIO_CAP)), RATIO_CAP)
    out = np.exp(np.minimum(delta, _LOG_RATIO_CAP))
    return float(out) if out.ndim == 0 else out


def clipped_terms(tau, A, clip: ClipConfig):
    """Vectorized ``min(tau*A, clip(tau)*A)``.

    Returns ``(values, unclipped)``; ``unclipped`` is True where the
    unclipped product attains the minimum (ties count as unclipped), which is
    exactly where the term has non-zero derivative ``A`` in ``tau``.
    """
    tau = np.asarray(tau, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    raw = tau * A
    clipped = np.clip(tau, 1.0 - clip.eps_low, 1.0 + clip.eps_high) * A
    unclipped = raw <= clipped
    return np.where(unclipped, raw, clipped), unclipped


def clipped_term(tau: float, A: float, clip: ClipConfig) -> tuple[float, Branch]:
    value, unclipped = clipped_terms(tau, A, clip)
    return float(value), Branch.UNCLIPPED if bool(unclipped) else Branch.CLIPPED


def kl_k3(logp_ref, logp_new):
    """k3 estimator of KL(pi || pi_ref): ``exp(u) - u - 1`` with ``u = ref - new``."""
    u = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_new, dtype=np.float64)
    out = np.expm1(u) - u
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def kl_k3_coeff(logp_ref, logp_new):
    """d kl_k3 / d logp_new."""
    u = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_new, dtype=np.float64)
    return -np.expm1(u)


# ---------------------------------------------------------------------------
# batch flattening


@dataclass(frozen=True, eq=False)
class TokenBatch:
    ctx: np.ndarray  # (N, k)
    tokens: np.ndarray  # (N,)
    seq: np.ndarray  # (N,) response index of each token
    seq_group: np.ndarray  # (R,) group index of each response
    seq_weight: np.ndarray  # (R,) 1 / n_tokens
    lengths: np.ndarray  # (R,)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def n_seqs(self) -> int:
        return len(self.lengths)


def token_batch(groups: Sequence[RolloutGroup], k: int, pad_id: int) -> TokenBatch:
    ctxs, toks, seq, seq_group, lengths = [], [], [], [], []
    r = 0
    for gi, g in enumerate(groups):
        for ro in g.rollouts:
            ctxs.append(contexts(g.prompt_ids, ro.token_ids, k, pad_id))
            toks.append(ro.token_ids)
            seq.append(np.full(ro.length, r, dtype=np.int64))
            seq_group.append(gi)
            lengths.append(ro.length)
            r += 1
    if not groups:
        return TokenBatch(np.zeros((0, k), np.int64), np.zeros(0, np.int64),
                          np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0))
    n_tokens = sum(lengths)
    return TokenBatch(np.concatenate(ctxs), np.concatenate(toks).astype(np.int64),
                      np.concatenate(seq), np.array(seq_group),
                      np.full(len(lengths), 1.0 / n_tokens), np.array(lengths))


def batch_logprobs(params: PolicyParams, batch: TokenBatch) -> np.ndarray:
    if batch.n_tokens == 0:
        return np.zeros(0)
    return token_logprobs(params, batch.ctx, batch.tokens)


# ---------------------------------------------------------------------------
# core


def surrogate(params: PolicyParams, batch: TokenBatch, old_logp: np.ndarray,
              seq_adv: np.ndarray, clip: ClipConfig,
              aggregation: Aggregation = Aggregation.TOKEN, alpha: float = 0.0,
              beta: float = 0.0, ref_logp: np.ndarray | None = None) -> ObjectiveReport:
    """Group-weighted clipped surrogate ``- beta*KL + alpha*H`` and its gradient."""
    aggregation = Aggregation(aggregation)
    N = batch.n_tokens
    if N == 0:
        return ObjectiveReport(0.0, np.zeros(params.param_count), 0.0, 0.0, 0.0, aggregation,
                               np.zeros(0))
    cache = forward(params, batch.ctx)
    logp_all = log_softmax(cache[2])
    logp = logp_all[np.arange(N), batch.tokens]
    w_tok = batch.seq_weight[batch.seq]

    if aggregation is Aggregation.TOKEN:
        tau = importance_ratio(logp, old_logp)
        terms, unclipped = clipped_terms(tau, seq_adv[batch.seq], clip)
        pg_value = float(np.sum(w_tok * terms))
        coeff = np.where(unclipped, w_tok * seq_adv[batch.seq] * tau, 0.0)
        ratios = tau
    else:
        delta = np.bincount(batch.seq, weights=logp - old_logp, minlength=batch.n_seqs)
        tau = importance_ratio(delta, np.zeros_like(delta))
        terms, unclipped = clipped_terms(tau, seq_adv, clip)
        pg_value = float(np.sum(batch.seq_weight * terms))
        coeff = np.where(unclipped, batch.seq_weight * seq_adv * tau, 0.0)[batch.seq]
        ratios = tau
    clip_fraction = float(np.mean(~unclipped))

    mean_kl = 0.0
    if ref_logp is not None:
        mean_kl = float(np.mean(kl_k3(ref_logp, logp)))
        if beta:
            coeff = coeff - (beta / N) * kl_k3_coeff(ref_logp, logp)

    H = _entropy_from_logp(logp_all)
    mean_entropy = float(np.mean(H))
    ent = np.full(N, alpha / N) if alpha else None
    grad = policy_grad(params, batch.ctx, batch.tokens, coeff, ent, forward_cache=cache)
    value = pg_value - beta * mean_kl + alpha * mean_entropy
    return ObjectiveReport(value, grad, clip_fraction, mean_kl, mean_entropy, aggregation, ratios)


def _old_and_ref(params, old_params, ref_params, batch, old_logp, ref_logp):
    if old_logp is None:
        old_logp = batch_logprobs(old_params, batch)
    if ref_logp is None and ref_params is not None:
        ref_logp = batch_logprobs(ref_params, batch)
    return old_logp, ref_logp


def _group_adv(groups, rewards=None) -> list[np.ndarray]:
    rewards = [g.rewards for g in groups] if rewards is None else rewards
    return [group_advantages(r).A for r in rewards]


def objective_from_advantages(groups: Sequence[RolloutGroup], params: PolicyParams,
                              old_params: PolicyParams, advantages: Sequence[np.ndarray],
                              clip: ClipConfig, aggregation=Aggregation.TOKEN,
                              alpha: float = 0.0, beta: float = 0.0,
                              ref_params: PolicyParams | None = None, batch: TokenBatch | None = None,
                              old_logp=None, ref_logp=None) -> ObjectiveReport:
    batch = batch or token_batch(groups, params.k, params.vocab.pad_id)
    old_logp, ref_logp = _old_and_ref(params, old_params, ref_params, batch, old_logp, ref_logp)
    seq_adv = np.concatenate([np.asarray(a, dtype=np.float64) for a in advantages]) \
        if advantages else np.zeros(0)
    report = surrogate(params, batch, old_logp, seq_adv, clip, aggregation, alpha, beta, ref_logp)
    report.advantages = [np.asarray(a) for a in advantages]
    return report


# ---------------------------------------------------------------------------
# named objectives


def ppo_surrogate(groups: Sequence[RolloutGroup], params: PolicyParams,
                  old_params: PolicyParams, advantages, clip: ClipConfig = SYMMETRIC_CLIP,
                  batch: TokenBatch | None = None, old_logp=None) -> ObjectiveReport:
    """Per-token clipped surrogate averaged over all tokens.

    ``advantages`` holds one value per generated token (flat, in rollout
    order); there is no value model, so they come from the caller.
    """
    batch = batch or token_batch(groups, params.k, params.vocab.pad_id)
    A = np.asarray(advantages, dtype=np.float64).reshape(-1)
    if A.size != batch.n_tokens:
        raise ValueError(f"expected {batch.n_tokens} per-token advantages, got {A.size}")
    if old_logp is None:
        old_logp = batch_logprobs(old_params, batch)
    N = batch.n_tokens
    if N == 0:
        return ObjectiveReport(0.0, np.zeros(params.param_count), 0.0, 0.0, 0.0,
                               Aggregation.TOKEN, np.zeros(0))
    cache = forward(params, batch.ctx)
    logp_all = log_softmax(cache[2])
    logp = logp_all[np.arange(N), batch.tokens]
    tau = importance_ratio(logp, old_logp)
    terms, unclipped = clipped_terms(tau, A, clip)
    coeff = np.where(unclipped, A * tau / N, 0.0)
    grad = policy_grad(params, batch.ctx, batch.tokens, coeff, forward_cache=cache)
    return ObjectiveReport(float(np.mean(terms)), grad, float(np.mean(~unclipped)), 0.0,
                           float(np.mean(_entropy_from_logp(logp_all))), Aggregation.TOKEN, tau)


def grpo_objective(groups: Sequence[RolloutGroup], params: PolicyParams,
                   old_params: PolicyParams, ref_params: PolicyParams | None, beta: float,
                   clip: ClipConfig = SYMMETRIC_CLIP, aggregation=Aggregation.TOKEN,
                   rewards=None, **cached) -> ObjectiveReport:
    """Clipped surrogate with group-normalized advantages minus ``beta`` * k3 KL."""
    return objective_from_advantages(groups, params, old_params, _group_adv(groups, rewards),
                                     clip, aggregation, 0.0, beta, ref_params, **cached)


def check_filter(groups: Sequence[RolloutGroup], stage: int) -> None:
    for g in groups:
        c = g.correct_count
        if stage == 1 and not 0 < c < g.G:
            raise ContractViolation(
                f"question {g.question.id}: {c}/{g.G} correct; GRPO++ needs 0 < c < G")
        if stage == 2 and c == 0:
            raise ContractViolation(
                f"question {g.question.id}: no correct rollout; L-GRPO needs c > 0")


def grpopp_objective(groups: Sequence[RolloutGroup], params: PolicyParams,
                     old_params: PolicyParams, alpha: float, clip: ClipConfig = ClipConfig(),
                     aggregation=Aggregation.TOKEN, **cached) -> ObjectiveReport:
    """Clip-higher surrogate plus ``alpha`` * entropy; no KL term."""
    check_filter(groups, 1)
    return objective_from_advantages(groups, params, old_params, _group_adv(groups), clip,
                                     aggregation, alpha, 0.0, None, **cached)


def lgrpo_rewards(groups: Sequence[RolloutGroup], L_max: int, lam: float,
                  shaping: str = "lgrpo") -> list[np.ndarray]:
    return [shaped_rewards(shaping, g.rewards, g.lengths, L_max, lam) for g in groups]


def lgrpo_objective(groups: Sequence[RolloutGroup], params: PolicyParams,
                    old_params: PolicyParams, ref_params: PolicyParams | None,
                    coeffs: ObjectiveCoeffs, clip: ClipConfig, L_max: int,
                    aggregation=Aggregation.TOKEN, shaping: str = "lgrpo",
                    **cached) -> ObjectiveReport:
    """Length-shaped advantages, clip-higher surrogate, KL penalty and entropy bonus."""
    check_filter(groups, 2)
    rewards = lgrpo_rewards(groups, L_max, coeffs.lam, shaping)
    return objective_from_advantages(groups, params, old_params, _group_adv(groups, rewards),
                                     clip, aggregation, coeffs.alpha, coeffs.beta, ref_params,
                                     **cached)
