"""Trace diagnostics over response corpora.

A corpus is JSONL with one response per line::

    {"question_id": 3, "tokens": ["<think>", "wait", ...], "reward": 1, "length": 9}

Keyword matching runs on the symbols joined by single spaces, lowercased.
Phrases match at word boundaries (letters, digits, ``_`` and ``-`` are word
characters).  By default matches are longest-first and non-overlapping, so
``double-check`` is not also counted as ``check``.
"""

from __future__ import annotations

import csv
import json
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator

DEFAULT_POOL = (
    "check", "rethink", "reassess", "evaluate", "re-evaluate", "evaluation", "examine",
    "however", "reconsider", "analyze", "double-check", "check again", "recheck", "verify",
    "wait",
)

_WORD = r"[\w-]"


class CorpusError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def read_corpus(path) -> Iterator[dict]:
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(row, dict) or not isinstance(row.get("tokens"), list):
                raise CorpusError(f"{path}:{lineno}: expected an object with a 'tokens' list")
            row["_line"] = lineno
            yield row


def render_text(tokens: Iterable[str]) -> str:
    return " ".join(str(t) for t in tokens)


def load_pool(path=None, extras: Iterable[str] = ()) -> tuple[str, ...]:
    if path is None:
        phrases = list(DEFAULT_POOL)
    else:
        with open(path) as f:
            text = f.read()
        try:
            phrases = json.loads(text)
        except json.JSONDecodeError:
            phrases = [line.strip() for line in text.splitlines() if line.strip()]
    phrases = [" ".join(p.lower().split()) for p in list(phrases) + list(extras)]
    out = []
    for p in phrases:
        if p and p not in out:
            out.append(p)
    return tuple(out)


def _phrase_regex(phrase: str) -> str:
    return r"\s+".join(re.escape(w) for w in phrase.split(" "))


def _pool_regex(pool: Iterable[str]) -> re.Pattern:
    ordered = sorted(pool, key=lambda p: (-len(p), p))
    alt = "|".join(f"(?:{_phrase_regex(p)})" for p in ordered)
    return re.compile(rf"(?<!{_WORD})({alt})(?!{_WORD})")


def count_in_text(text: str, pool: Iterable[str], overlapping: bool = False) -> dict[str, int]:
    pool = tuple(pool)
    counts = {p: 0 for p in pool}
    text = text.lower()
    if overlapping:
        for p in pool:
            counts[p] = len(re.findall(rf"(?<!{_WORD})(?={_phrase_regex(p)}(?!{_WORD}))", text))
        return counts
    if not pool:
        return counts
    for m in _pool_regex(pool).finditer(text):
        counts[" ".join(m.group(1).split())] += 1
    return counts


def count_keywords(corpus, pool: Iterable[str] = DEFAULT_POOL,
                   overlapping: bool = False) -> dict[str, int]:
    """Total phrase counts over a corpus (path or iterable of rows)."""
    pool = tuple(pool)
    rows = read_corpus(corpus) if isinstance(corpus, (str, os.PathLike)) else corpus
    totals = {p: 0 for p in pool}
    for row in rows:
        for p, c in count_in_text(render_text(row["tokens"]), pool, overlapping).items():
            totals[p] += c
    return totals


def word_count(text: str) -> int:
    return len(re.findall(rf"{_WORD}+", text.lower()))


@dataclass
class LengthReport:
    unit: str
    n_total: int
    n_correct: int
    n_incorrect: int
    mean_len_total: float | None
    mean_len_correct: float | None
    mean_len_incorrect: float | None
    paired: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "unit": self.unit,
            "n_total": self.n_total, "n_correct": self.n_correct,
            "n_incorrect": self.n_incorrect,
            "mean_len_total": self.mean_len_total, "mean_len_correct": self.mean_len_correct,
            "mean_len_incorrect": self.mean_len_incorrect,
            "average_output_length": {"Total": self.mean_len_total,
                                      "Correct": self.mean_len_correct,
                                      "Incorrect": self.mean_len_incorrect},
            "paired": self.paired,
        }


def _row_length(row: dict, unit: str) -> int:
    if unit == "chars":
        return len(render_text(row["tokens"]))
    if "length" in row:
        return int(row["length"])
    return len(row["tokens"])


def _mean_or_none(xs: list) -> float | None:
    return sum(xs) / len(xs) if xs else None


def length_stats(corpus, unit: str = "tokens") -> LengthReport:
    """Mean lengths of correct and incorrect responses, overall and per question.

    Per-question pairs only include questions with at least one correct and
    one incorrect response.  Missing sides are reported as ``None``.
    """
    unit = unit.lower()
    if unit not in ("tokens", "chars"):
        raise ValueError("unit must be 'tokens' or 'chars'")
    rows = read_corpus(corpus) if isinstance(corpus, (str, os.PathLike)) else corpus
    correct, incorrect = [], []
    per_q: dict = defaultdict(lambda: ([], []))
    for row in rows:
        if "reward" not in row:
            raise CorpusError(f"line {row.get('_line', '?')}: missing 'reward'")
        n = _row_length(row, unit)
        ok = float(row["reward"]) > 0
        (correct if ok else incorrect).append(n)
        per_q[row.get("question_id")][0 if ok else 1].append(n)
    paired = []
    for qid in sorted(per_q, key=lambda q: (str(type(q)), q)):
        c, i = per_q[qid]
        if c and i:
            paired.append({"question_id": qid, "mean_len_correct": sum(c) / len(c),
                           "mean_len_incorrect": sum(i) / len(i)})
    return LengthReport(unit, len(correct) + len(incorrect), len(correct), len(incorrect),
                        _mean_or_none(correct + incorrect), _mean_or_none(correct),
                        _mean_or_none(incorrect), paired)


CURVE_COLUMNS = ("step", "pass_rate", "mean_len")


def emit_curves(metrics_csv, out_dir) -> list[str]:
    """Write (step, pass_rate) and (step, mean_len) TSVs per stage.

    Values are copied verbatim from the metrics CSV.
    """
    with open(metrics_csv, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        for col in CURVE_COLUMNS:
            if col not in header:
                raise SchemaError(f"{metrics_csv}: missing column {col!r}")
        rows = list(reader)
    by_stage: dict[str, list[dict]] = {}
    for row in rows:
        by_stage.setdefault(row.get("stage") or "", []).append(row)
    if not by_stage:
        by_stage[""] = []
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for stage, srows in by_stage.items():
        for col in ("pass_rate", "mean_len"):
            name = f"{stage}_{col}.tsv" if stage else f"{col}.tsv"
            path = os.path.join(out_dir, name)
            with open(path, "w") as f:
                f.write(f"step\t{col}\n")
                for r in srows:
                    f.write(f"{r['step']}\t{r[col]}\n")
            written.append(path)
    return written

