"""Two-stage training: GRPO++ for accuracy, then L-GRPO for conciseness.

Sign convention: every objective is maximized, so the optimizer performs
gradient *ascent* (``params + lr * m_hat / (sqrt(v_hat) + eps)``).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

from concise_rl import rng as rng_mod
from concise_rl import task_env
from concise_rl.checkpoint import load_checkpoint, save_checkpoint
from concise_rl.config import RunConfig, StageConfig
from concise_rl.objectives import (
    Aggregation,
    ClipConfig,
    ObjectiveCoeffs,
    grpo_objective,
    grpopp_objective,
    lgrpo_objective,
    lgrpo_rewards,
    ppo_surrogate,
    token_batch,
)
from concise_rl.policy_core import (
    NumericalError,
    PolicyParams,
    Vocab,
    contexts,
    init_policy,
    policy_grad,
)
from concise_rl.reward_shaping import group_advantages
from concise_rl.rollout_engine import (
    FilterMode,
    RolloutGroup,
    dump_rows,
    fill_filtered_batch,
    rollout_groups,
    write_jsonl,
)
from concise_rl.task_env import Question

log = logging.getLogger(__name__)

__all__ = [
    "AdamState", "adam_step", "MetricsRow", "EvalResult", "evaluate", "warm_start",
    "train_stage", "run_two_stage", "save_checkpoint", "load_checkpoint",
]


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: PolicyParams, grad: np.ndarray, state: AdamState,
              lr: float) -> tuple[PolicyParams, AdamState]:
    """One bias-corrected Adam *ascent* step; inputs are left untouched."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape:
        raise ValueError(f"gradient has {grad.size} entries, expected {state.m.size}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient at Adam step {state.t + 1}")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = params.weights + lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_weights(new), AdamState(m, v, t, state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    stage: str
    step: int
    pass_rate: float
    mean_reward: float
    mean_len: float
    mean_len_correct: float
    mean_len_incorrect: float
    mean_entropy: float
    mean_kl: float
    clip_fraction: float
    groups_discarded: int
    grad_norm: float
    empty_think_frac: float


METRICS_HEADER = [f.name for f in fields(MetricsRow)]


@dataclass
class EvalResult:
    pass_at_1: float
    mean_len: float
    empty_think_frac: float
    rows: list[dict] = field(default_factory=list)
    corpus: list[dict] = field(default_factory=list, repr=False)


# Every evaluation reuses one sampling stream key, so successive checkpoints are
# compared on the same questions and the same uniforms (paired comparison).
EVAL_KEY = 0

EVAL_HEADER = ["stage", "step", "pass_at_1", "mean_len", "empty_think_frac"]


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "nan" if math.isnan(value) else f"{float(value):.9g}"
    return str(value)


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([_fmt(getattr(r, name)) for name in METRICS_HEADER])
    return buf.getvalue()


def evals_csv(rows: Sequence[tuple[str, int, EvalResult]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_HEADER)
    for stage, step, ev in rows:
        w.writerow([stage, step, _fmt(ev.pass_at_1), _fmt(ev.mean_len),
                    _fmt(ev.empty_think_frac)])
    return buf.getvalue()


def _mean(xs) -> float:
    xs = list(xs)
    return float(np.mean(xs)) if xs else float("nan")


def _rollout_stats(groups: Sequence[RolloutGroup]) -> dict:
    rolls = [r for g in groups for r in g.rollouts]
    wf = [r for r in rolls if r.parsed.well_formed]
    return dict(
        pass_rate=_mean(r.reward for r in rolls),
        mean_len=_mean(r.length for r in rolls),
        mean_len_correct=_mean(r.length for r in rolls if r.reward),
        mean_len_incorrect=_mean(r.length for r in rolls if not r.reward),
        empty_think_frac=_mean(r.parsed.empty_think for r in wf) if wf else 0.0,
    )


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params: PolicyParams, eval_set: Sequence[Question], samples_per_question: int,
             temperature: float, top_p: float, L_max: int, seed: int,
             key: int = 0) -> EvalResult:
    """Pass@1 = mean over questions of the mean reward over samples."""
    if samples_per_question < 1:
        raise ValueError("samples_per_question must be >= 1")
    if not eval_set:
        return EvalResult(float("nan"), float("nan"), float("nan"))
    n = samples_per_question
    if n == 1:
        # rollout_groups needs G >= 2; draw 2 and keep the first
        groups = rollout_groups(params, eval_set, 2, L_max, temperature, top_p, seed, key,
                                purpose="eval")
        for g in groups:
            g.rollouts = g.rollouts[:1]
    else:
        groups = rollout_groups(params, eval_set, n, L_max, temperature, top_p, seed, key,
                                purpose="eval")
    rows = []
    for g in groups:
        rows.append({"question_id": g.question.id,
                     "pass": float(np.mean([r.reward for r in g.rollouts])),
                     "mean_len": float(np.mean([r.length for r in g.rollouts]))})
    stats = _rollout_stats(groups)
    return EvalResult(float(np.mean([r["pass"] for r in rows])), stats["mean_len"],
                      stats["empty_think_frac"], rows, list(dump_rows(groups)))


# ---------------------------------------------------------------------------
# base-model warm start


def demo_response(q: Question, gen: np.random.Generator, max_reflections: int,
                  modulus: int, ops: Sequence[str]) -> list[str]:
    """A format-correct response whose answer is a random plausible value.

    The think span restates the question ``r`` times, each restatement led
    by a reflection word.
    """
    r = int(gen.integers(0, max_reflections + 1))
    reasoning = []
    for _ in range(r):
        word = task_env.REFLECTION_WORDS[int(gen.integers(len(task_env.REFLECTION_WORDS)))]
        reasoning += task_env.reflection_block(q, word)
    a, b = task_env._draw_operands(q.difficulty, gen)
    guess = task_env.evaluate_expression(q.op, a, b, modulus)
    return task_env.response_tokens(guess, reasoning)


def warm_start(params: PolicyParams, steps: int, batch: int, lr: float, max_reflections: int,
               mix: dict, seed: int, ops: Sequence[str] = task_env.OPS,
               modulus: int = task_env.DEFAULT_MODULUS) -> PolicyParams:
    """Maximum-likelihood fit to format-only demonstrations.

    Stands in for a pretrained base model: it learns the response template
    and the shape of the answer space, not the arithmetic.
    """
    vocab = params.vocab
    state = AdamState.zeros(params.param_count)
    for step in range(steps):
        gen = rng_mod.stream(seed, "demo", step)
        ctxs, toks = [], []
        for i in range(batch):
            q = task_env.draw_question(i, seed, step * batch + i, mix, ops, modulus,
                                       purpose="demo")
            resp = vocab.ids(demo_response(q, gen, max_reflections, modulus, ops))
            ctxs.append(contexts(vocab.ids(q.prompt_tokens), resp, params.k, vocab.pad_id))
            toks.append(resp)
        ctx = np.concatenate(ctxs)
        tok = np.concatenate(toks)
        grad = policy_grad(params, ctx, tok, np.full(len(tok), 1.0 / len(tok)))
        params, state = adam_step(params, grad, state, lr)
    return params


# ---------------------------------------------------------------------------
# stage loop


@dataclass
class StageResult:
    params: PolicyParams
    metrics: list[MetricsRow]
    evals: list[tuple[str, int, EvalResult]]
    checkpoints: list[str]


def _stage_objective(cfg: StageConfig, groups, params, old_params, ref_params, batch,
                     old_logp, ref_logp):
    agg = Aggregation(cfg.aggregation)
    cached = dict(batch=batch, old_logp=old_logp)
    if cfg.algorithm == "GRPOPP":
        return grpopp_objective(groups, params, old_params, cfg.alpha,
                                ClipConfig(cfg.eps_low, cfg.eps_high), agg, **cached)
    if cfg.algorithm == "LGRPO":
        return lgrpo_objective(groups, params, old_params, ref_params,
                               ObjectiveCoeffs(cfg.alpha, cfg.beta, cfg.lam),
                               ClipConfig(cfg.eps_low, cfg.eps_high), cfg.L_max, agg,
                               cfg.reward_shaping, ref_logp=ref_logp, **cached)
    if cfg.algorithm == "GRPO":
        return grpo_objective(groups, params, old_params, ref_params, cfg.beta,
                              ClipConfig(cfg.eps_low, cfg.eps_low), agg, ref_logp=ref_logp,
                              **cached)
    # PPO diagnostic: each token inherits its response's group advantage
    adv = np.concatenate([np.repeat(group_advantages(g.rewards).A, g.lengths) for g in groups])
    return ppo_surrogate(groups, params, old_params, adv, ClipConfig(cfg.eps_low, cfg.eps_low),
                         **cached)


def _shaped_for_log(cfg: StageConfig, groups) -> list[np.ndarray]:
    if cfg.algorithm == "LGRPO":
        return lgrpo_rewards(groups, cfg.L_max, cfg.lam, cfg.reward_shaping)
    return [g.rewards for g in groups]


def train_stage(cfg: StageConfig, params: PolicyParams, ref_params: PolicyParams | None,
                tasks: Iterator[Question], seed: int, stage_key: int = 1,
                output_dir: str | None = None, eval_set: Sequence[Question] | None = None,
                eval_cfg: dict | None = None, dump_rollouts: bool = False) -> StageResult:
    """Run ``cfg.steps`` policy updates; see module docstring for the sign convention."""
    cfg.validate()
    mode = FilterMode(cfg.filter_mode)
    state = AdamState.zeros(params.param_count)
    metrics: list[MetricsRow] = []
    evals: list[tuple[str, int, EvalResult]] = []
    ckpts: list[str] = []
    ckpt_dir = os.path.join(output_dir, "checkpoints") if output_dir else None
    dump = None
    if dump_rollouts and output_dir:
        os.makedirs(output_dir, exist_ok=True)
        dump = open(os.path.join(output_dir, f"rollouts_{cfg.name}.jsonl"), "w")
    eval_cfg = eval_cfg or {}

    def run_eval(step: int) -> None:
        if not eval_set:
            return
        ev = evaluate(params, eval_set, int(eval_cfg.get("samples_per_question", 16)),
                      float(eval_cfg.get("temperature", 0.6)), float(eval_cfg.get("top_p", 0.95)),
                      int(eval_cfg.get("L_max", cfg.L_max)), seed, EVAL_KEY)
        evals.append((cfg.name, step, ev))
        log.info("%s step %d: eval pass@1 %.3f mean_len %.2f", cfg.name, step, ev.pass_at_1,
                 ev.mean_len)

    def checkpoint(step: int, tag: str | None = None) -> str | None:
        if ckpt_dir is None:
            return None
        name = f"{cfg.name}_{tag}.ckpt" if tag else f"{cfg.name}_step{step:05d}.ckpt"
        path = os.path.join(ckpt_dir, name)
        save_checkpoint(path, params, seed, cfg.name, step)
        ckpts.append(path)
        return path

    try:
        run_eval(0)
        for step in range(cfg.steps):
            try:
                filled = fill_filtered_batch(
                    params, tasks, cfg.batch_groups, cfg.G, mode, cfg.max_attempts, cfg.L_max,
                    cfg.temperature, cfg.top_p, seed, stage_key * 1_000_000 + step, cfg.fill)
            except Exception as exc:
                exc.args = (f"{cfg.name} step {step}: {exc.args[0] if exc.args else exc}",)
                raise
            groups = filled.groups
            for g, r in zip(groups, _shaped_for_log(cfg, groups)):
                g.shaped_rewards = r
            stats = _rollout_stats(filled.sampled)
            reports = []
            if groups:
                batch = token_batch(groups, params.k, params.vocab.pad_id)
                old_params = params
                old_logp = np.concatenate([r.behavior_logp for g in groups for r in g.rollouts])
                ref_logp = None
                if ref_params is not None and cfg.algorithm in ("LGRPO", "GRPO"):
                    ref_logp = _logp(ref_params, batch)
                try:
                    for _ in range(cfg.inner_epochs):
                        rep = _stage_objective(cfg, groups, params, old_params, ref_params,
                                               batch, old_logp, ref_logp)
                        if not math.isfinite(rep.value):
                            raise NumericalError("non-finite objective")
                        params, state = adam_step(params, rep.grad, state, cfg.lr)
                        reports.append(rep)
                except NumericalError as exc:
                    params = old_params
                    where = checkpoint(step, tag="lastgood")
                    raise TrainingAborted(
                        f"{cfg.name} step {step}: {exc}"
                        + (f"; last good parameters saved to {where}" if where else "")) from exc
            if dump is not None:
                write_jsonl(dump_rows(groups, stage=cfg.name, step=step), dump)
            metrics.append(MetricsRow(
                stage=cfg.name, step=step, pass_rate=stats["pass_rate"],
                mean_reward=_mean(float(x) for g in groups for x in g.shaped_rewards),
                mean_len=stats["mean_len"], mean_len_correct=stats["mean_len_correct"],
                mean_len_incorrect=stats["mean_len_incorrect"],
                mean_entropy=_mean(r.mean_entropy for r in reports),
                mean_kl=_mean(r.mean_kl for r in reports),
                clip_fraction=_mean(r.clip_fraction for r in reports) if reports else 0.0,
                groups_discarded=filled.discarded,
                grad_norm=_mean(float(np.linalg.norm(r.grad)) for r in reports),
                empty_think_frac=stats["empty_think_frac"],
            ))
            done = step + 1
            if done % cfg.eval_interval == 0 and done != cfg.steps:
                run_eval(done)
            if done % cfg.checkpoint_interval == 0:
                checkpoint(done)
        if cfg.steps:
            run_eval(cfg.steps)
        checkpoint(cfg.steps, tag="final")
    finally:
        if dump is not None:
            dump.close()
    return StageResult(params, metrics, evals, ckpts)


def _logp(params: PolicyParams, batch) -> np.ndarray:
    from concise_rl.objectives import batch_logprobs

    return batch_logprobs(params, batch)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class RunResult:
    params: PolicyParams
    base_params: PolicyParams
    stage1_params: PolicyParams
    metrics: list[MetricsRow]
    evals: list[tuple[str, int, EvalResult]]
    output_dir: str | None
    seconds: dict = field(default_factory=dict)  # wall time per phase, not logged to CSV


def build_vocab(cfg: RunConfig) -> Vocab:
    return Vocab(tuple(cfg.vocab)) if cfg.vocab else task_env.default_vocab()


def eval_questions(cfg: RunConfig) -> list[Question]:
    e = cfg.eval
    return task_env.generate_questions(
        int(e.get("n_questions", 64)), int(e.get("seed", 1)), e.get("mix", cfg.stage1.mix),
        cfg.task.get("ops", task_env.OPS), int(cfg.task.get("modulus", 10)), purpose="eval")


def base_policy(cfg: RunConfig) -> PolicyParams:
    vocab = build_vocab(cfg)
    p = cfg.policy
    params = init_policy(vocab, int(p["k"]), int(p["h"]), cfg.seed, e=int(p["e"]))
    b = cfg.base
    if b and int(b.get("steps", 0)) > 0:
        params = warm_start(params, int(b["steps"]), int(b.get("batch", 64)),
                            float(b.get("lr", 3e-3)), int(b.get("max_reflections", 3)),
                            b.get("mix", cfg.stage1.mix), cfg.seed,
                            cfg.task.get("ops", task_env.OPS), int(cfg.task.get("modulus", 10)))
    return params


def _stream(cfg: RunConfig, stage: StageConfig, salt: int) -> Iterator[Question]:
    return task_env.question_stream(cfg.seed, stage.mix, cfg.task.get("ops", task_env.OPS),
                                    int(cfg.task.get("modulus", 10)), salt=salt)


def run_two_stage(cfg: RunConfig, output_dir: str | None = None,
                  base_params: PolicyParams | None = None) -> RunResult:
    """Stage 1 (GRPO++) then stage 2 (L-GRPO) with the stage-1 policy as KL reference."""
    cfg.validate()
    out = output_dir if output_dir is not None else cfg.output_dir
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.json"), "w") as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
    t0 = time.perf_counter()
    base = base_params if base_params is not None else base_policy(cfg)
    t1 = time.perf_counter()
    if out:
        save_checkpoint(os.path.join(out, "checkpoints", "base.ckpt"), base, cfg.seed, "base", 0)
    ev = eval_questions(cfg)
    s1 = train_stage(cfg.stage1, base, base, _stream(cfg, cfg.stage1, 1), cfg.seed, 1, out, ev,
                     cfg.eval, cfg.dump_rollouts)
    t2 = time.perf_counter()
    s2 = train_stage(cfg.stage2, s1.params, s1.params, _stream(cfg, cfg.stage2, 2), cfg.seed, 2,
                     out, ev, cfg.eval, cfg.dump_rollouts)
    t3 = time.perf_counter()
    metrics = s1.metrics + s2.metrics
    evals = s1.evals + s2.evals
    if out:
        with open(os.path.join(out, "metrics.csv"), "w") as f:
            f.write(metrics_csv(metrics))
        with open(os.path.join(out, "eval.csv"), "w") as f:
            f.write(evals_csv(evals))
        save_checkpoint(os.path.join(out, "final.ckpt"), s2.params, cfg.seed, cfg.stage2.name,
                        cfg.stage2.steps)
    return RunResult(s2.params, base, s1.params, metrics, evals, out,
                     {"base": t1 - t0, "stage1": t2 - t1, "stage2": t3 - t2})
