"""Synthetic arithmetic questions, the prompt template, and the rule-based reward.

Questions are ``a + b``, ``a - b`` or ``(a * b) mod m`` over small integers.
Responses must follow::

    <think> ...reasoning... </think> <answer> \\boxed [-] digits </answer> [<eos>]

Difficulty bands (operand ranges):

    EASY    a, b in [0, 4]
    MEDIUM  a, b in [0, 9], max(a, b) >= 5
    HARD    a, b in [10, 19]
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from concise_rl import rng as rng_mod
from concise_rl.policy_core import (
    ANSWER_CLOSE,
    ANSWER_OPEN,
    BOXED,
    EOS,
    PAD,
    THINK_CLOSE,
    THINK_OPEN,
    Vocab,
)

DIGITS = tuple(str(d) for d in range(10))
PLUS, MINUS, TIMES_MOD = "+", "-", "*mod"
SYSTEM, USER, ASSISTANT = "<system>", "<user>", "<assistant>"
REFLECTION_WORDS = ("wait", "check", "verify", "so")
TAGS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, BOXED)

OPS = ("ADD", "SUB", "MUL")
OP_SYMBOL = {"ADD": PLUS, "SUB": MINUS, "MUL": TIMES_MOD}
DIFFICULTIES = ("EASY", "MEDIUM", "HARD")
DEFAULT_MODULUS = 10


def default_vocab() -> Vocab:
    return Vocab(
        DIGITS
        + (PLUS, MINUS, TIMES_MOD)
        + TAGS
        + (EOS, PAD, SYSTEM, USER, ASSISTANT)
        + REFLECTION_WORDS
    )


@dataclass(frozen=True)
class Question:
    id: int
    op: str
    a: int
    b: int
    answer: int
    difficulty: str
    prompt_tokens: tuple[str, ...]

    def to_json(self) -> dict:
        return {"id": self.id, "op": self.op, "a": self.a, "b": self.b,
                "answer": self.answer, "difficulty": self.difficulty}


@dataclass(frozen=True)
class ParsedResponse:
    well_formed: bool
    think_span: tuple[int, int] | None
    answer_span: tuple[int, int] | None
    boxed_value: int | None
    length_tokens: int

    @property
    def empty_think(self) -> bool:
        return self.well_formed and self.think_span[0] == self.think_span[1]


def evaluate_expression(op: str, a: int, b: int, modulus: int = DEFAULT_MODULUS) -> int:
    if op == "ADD":
        return a + b
    if op == "SUB":
        return a - b
    if op == "MUL":
        return (a * b) % modulus
    raise ValueError(f"unknown op {op!r}")


def number_tokens(n: int) -> list[str]:
    return ([MINUS] if n < 0 else []) + list(str(abs(n)))


def question_tokens(op: str, a: int, b: int) -> list[str]:
    return number_tokens(a) + [OP_SYMBOL[op]] + number_tokens(b)


def render_prompt(q: Question) -> list[str]:
    return render_prompt_for(q.op, q.a, q.b)


def render_prompt_for(op: str, a: int, b: int) -> list[str]:
    # system cue, tag instructions, user turn, assistant cue
    return ([SYSTEM, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, BOXED, ANSWER_CLOSE, USER]
            + question_tokens(op, a, b) + [ASSISTANT])


def make_question(qid: int, op: str, a: int, b: int, modulus: int = DEFAULT_MODULUS) -> Question:
    return Question(
        id=qid, op=op, a=a, b=b,
        answer=evaluate_expression(op, a, b, modulus),
        difficulty=difficulty_of(a, b),
        prompt_tokens=tuple(render_prompt_for(op, a, b)),
    )


def difficulty_of(a: int, b: int) -> str:
    if max(a, b) <= 4:
        return "EASY"
    if max(a, b) <= 9:
        return "MEDIUM"
    return "HARD"


def _draw_operands(difficulty: str, gen: np.random.Generator) -> tuple[int, int]:
    if difficulty == "EASY":
        a, b = gen.integers(0, 5, size=2)
    elif difficulty == "MEDIUM":
        while True:
            a, b = gen.integers(0, 10, size=2)
            if max(a, b) >= 5:
                break
    elif difficulty == "HARD":
        a, b = gen.integers(10, 20, size=2)
    else:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    return int(a), int(b)


def _normalize_mix(mix: Mapping[str, float]) -> tuple[list[str], np.ndarray]:
    names = [d for d in DIFFICULTIES if mix.get(d, 0.0) > 0]
    unknown = set(mix) - set(DIFFICULTIES)
    if unknown or not names:
        raise ValueError(f"bad difficulty mix {dict(mix)!r}")
    w = np.array([mix[d] for d in names], dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"difficulty weights must sum to 1, got {w.sum()}")
    return names, w


def draw_question(qid: int, seed: int, index: int, mix: Mapping[str, float],
                  ops: Iterable[str] = OPS, modulus: int = DEFAULT_MODULUS,
                  purpose: str = "questions", salt: int = 0) -> Question:
    """The ``index``-th question of the stream keyed by (seed, purpose, salt)."""
    names, w = _normalize_mix(mix)
    ops = tuple(ops)
    gen = rng_mod.stream(seed, purpose, salt, index)
    difficulty = names[int(gen.choice(len(names), p=w))]
    op = ops[int(gen.integers(len(ops)))]
    a, b = _draw_operands(difficulty, gen)
    return make_question(qid, op, a, b, modulus)


def generate_questions(n: int, seed: int, mix: Mapping[str, float] | None = None,
                       ops: Iterable[str] = OPS, modulus: int = DEFAULT_MODULUS,
                       purpose: str = "questions") -> list[Question]:
    if n < 1:
        raise ValueError("n must be >= 1")
    mix = {"EASY": 1.0} if mix is None else mix
    return [draw_question(i, seed, i, mix, ops, modulus, purpose) for i in range(n)]


def question_stream(seed: int, mix: Mapping[str, float], ops: Iterable[str] = OPS,
                    modulus: int = DEFAULT_MODULUS, salt: int = 0) -> Iterator[Question]:
    """Endless training questions; the i-th has id i."""
    ops = tuple(ops)
    i = 0
    while True:
        yield draw_question(i, seed, i, mix, ops, modulus, "questions", salt)
        i += 1


def parse_response(tokens) -> ParsedResponse:
    """Single left-to-right pass over the response grammar.  Never raises."""
    toks = list(tokens)
    n = len(toks)
    bad = ParsedResponse(False, None, None, None, n)
    structural = set(TAGS) | {EOS, PAD}
    if n == 0 or toks[0] != THINK_OPEN:
        return bad
    i = 1
    while i < n and toks[i] != THINK_CLOSE:
        if toks[i] in structural:
            return bad
        i += 1
    if i == n:
        return bad
    think = (1, i)
    i += 1
    if i + 1 >= n or toks[i] != ANSWER_OPEN or toks[i + 1] != BOXED:
        return bad
    ans_start = i + 1
    i += 2
    negative = i < n and toks[i] == MINUS
    if negative:
        i += 1
    digits_start = i
    while i < n and toks[i] in DIGITS:
        i += 1
    if i == digits_start or i == n or toks[i] != ANSWER_CLOSE:
        return bad
    value = int("".join(toks[digits_start:i]))
    answer = (ans_start, i)
    i += 1
    if i < n and toks[i] == EOS:
        i += 1
    if i != n:
        return bad
    return ParsedResponse(True, think, answer, -value if negative else value, n)


def is_equivalent(p: ParsedResponse, answer: int) -> bool:
    return p.well_formed and p.boxed_value is not None and p.boxed_value == int(answer)


def accuracy_reward(p: ParsedResponse, answer: int) -> int:
    return 1 if is_equivalent(p, answer) else 0


def response_tokens(answer: int, reasoning=(), eos: bool = True) -> list[str]:
    """A well-formed response carrying ``reasoning`` in the think span."""
    out = [THINK_OPEN, *reasoning, THINK_CLOSE, ANSWER_OPEN, BOXED, *number_tokens(answer),
           ANSWER_CLOSE]
    return out + [EOS] if eos else out


def reflection_block(q: Question, word: str) -> list[str]:
    return [word] + question_tokens(q.op, q.a, q.b)


def write_questions_jsonl(questions: Iterable[Question], path) -> None:
    with open(path, "w") as f:
        for q in questions:
            f.write(json.dumps(q.to_json()) + "\n")


def read_questions_jsonl(path, modulus: int = DEFAULT_MODULUS) -> list[Question]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                row = json.loads(line)
                out.append(make_question(int(row["id"]), row["op"], int(row["a"]), int(row["b"]),
                                         modulus))
    return out
