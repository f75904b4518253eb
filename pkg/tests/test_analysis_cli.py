import csv
import json
import os
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concise_rl.analysis_cli import (
    DEFAULT_POOL,
    CorpusError,
    SchemaError,
    count_in_text,
    count_keywords,
    emit_curves,
    length_stats,
    load_pool,
    render_text,
    word_count,
)
from concise_rl.cli import main

FIX = Path(__file__).parent / "fixtures"

# hand counts for fixtures/keywords.jsonl under longest-first, non-overlapping rules
KEYWORD_COUNTS = {
    "check": 1, "rethink": 1, "reassess": 0, "evaluate": 1, "re-evaluate": 1,
    "evaluation": 1, "examine": 0, "however": 1, "reconsider": 1, "analyze": 0,
    "double-check": 1, "check again": 1, "recheck": 1, "verify": 1, "wait": 2,
}


def test_default_pool_exact():
    assert DEFAULT_POOL == (
        "check", "rethink", "reassess", "evaluate", "re-evaluate", "evaluation", "examine",
        "however", "reconsider", "analyze", "double-check", "check again", "recheck", "verify",
        "wait")
    assert load_pool() == DEFAULT_POOL


def test_sentence_example():
    counts = count_in_text("Wait, let me double-check. wait.", DEFAULT_POOL)
    assert counts["wait"] == 2 and counts["double-check"] == 1 and counts["check"] == 0


def test_longest_match_hyphenated():
    counts = count_in_text("re-evaluate", DEFAULT_POOL)
    assert counts["re-evaluate"] == 1 and counts["evaluate"] == 0


def test_word_boundaries():
    counts = count_in_text("waiting checks rechecked awaits <think> wait_", DEFAULT_POOL)
    assert sum(counts.values()) == 0
    assert count_in_text("check  again", DEFAULT_POOL)["check again"] == 1


def test_overlapping_mode():
    counts = count_in_text("check again", DEFAULT_POOL, overlapping=True)
    assert counts["check again"] == 1 and counts["check"] == 1
    assert count_in_text("check again", DEFAULT_POOL)["check"] == 0


def test_keyword_fixture_golden():
    assert count_keywords(FIX / "keywords.jsonl") == KEYWORD_COUNTS


def test_empty_corpus():
    assert count_keywords(FIX / "empty.jsonl") == {p: 0 for p in DEFAULT_POOL}


def test_malformed_line_is_named():
    with pytest.raises(CorpusError, match=r"malformed\.jsonl:2"):
        count_keywords(FIX / "malformed.jsonl")


def test_pool_loading(tmp_path):
    (tmp_path / "pool.json").write_text(json.dumps(["Wait", "python", "wait"]))
    assert load_pool(tmp_path / "pool.json") == ("wait", "python")
    (tmp_path / "pool.txt").write_text("check again\n\nHmm\n")
    assert load_pool(tmp_path / "pool.txt", extras=["python"]) == ("check again", "hmm", "python")


rows_strategy = st.lists(
    st.lists(st.sampled_from(["wait", "Wait,", "check", "again", "double-check", "so", "x",
                              "re-evaluate", "evaluate", "verify."]), max_size=12),
    max_size=8)


@settings(max_examples=100, deadline=None)
@given(rows_strategy, st.randoms())
def test_counts_order_independent_and_bounded(token_rows, rnd):
    rows = [{"tokens": t} for t in token_rows]
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    a = count_keywords(rows)
    assert a == count_keywords(shuffled)
    words = sum(word_count(render_text(r["tokens"])) for r in rows)
    assert sum(a.values()) <= words


# --- lengths ---------------------------------------------------------------------


def test_length_fixture_golden():
    rep = length_stats(FIX / "lengths.jsonl")
    assert (rep.n_total, rep.n_correct, rep.n_incorrect) == (4, 2, 2)
    assert rep.mean_len_correct == 15 and rep.mean_len_incorrect == 50
    assert rep.mean_len_total == 32.5
    assert rep.paired == [{"question_id": 1, "mean_len_correct": 10.0,
                           "mean_len_incorrect": 40.0}]


def test_all_correct_corpus():
    rep = length_stats(FIX / "all_correct.jsonl")
    assert rep.n_incorrect == 0 and rep.mean_len_incorrect is None and rep.paired == []
    assert rep.mean_len_correct == 2.5


def test_char_unit():
    rep = length_stats(FIX / "keywords.jsonl", unit="chars")
    correct = [len("Wait, let me double-check. wait."),
               len("I will CHECK the evaluation and evaluate it; reconsider? Rethink!")]
    incorrect = [len("re-evaluate"),
                 len("<think> check again </think> Verify recheck however waiting")]
    assert correct == [32, 65] and incorrect == [11, 59]
    assert rep.mean_len_correct == 48.5 and rep.mean_len_incorrect == 35.0
    tokens = length_stats(FIX / "keywords.jsonl")
    assert tokens.mean_len_correct == 7.5 and tokens.mean_len_incorrect == 4.5


def test_report_schema():
    out = length_stats(FIX / "lengths.jsonl").to_json()
    assert set(out["average_output_length"]) == {"Total", "Correct", "Incorrect"}
    assert out["average_output_length"]["Total"] == 32.5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1), st.integers(0, 500)),
                min_size=1, max_size=40))
def test_length_totals_identity(rows):
    corpus = [{"question_id": q, "tokens": [], "reward": r, "length": n} for q, r, n in rows]
    rep = length_stats(corpus)
    assert rep.n_total == rep.n_correct + rep.n_incorrect
    lhs = rep.mean_len_total * rep.n_total
    rhs = (rep.mean_len_correct or 0) * rep.n_correct + \
        (rep.mean_len_incorrect or 0) * rep.n_incorrect
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


def test_lengths_require_reward(tmp_path):
    (tmp_path / "c.jsonl").write_text('{"tokens": ["a"], "length": 1}\n')
    with pytest.raises(CorpusError, match="reward"):
        length_stats(tmp_path / "c.jsonl")


# --- curves ----------------------------------------------------------------------


def read_tsv(path):
    with open(path) as f:
        return list(csv.reader(f, delimiter="\t"))


def test_curves_three_rows_verbatim(tmp_path):
    written = emit_curves(FIX / "metrics_three_rows.csv", tmp_path)
    assert sorted(os.path.basename(p) for p in written) == ["mean_len.tsv", "pass_rate.tsv"]
    assert read_tsv(tmp_path / "pass_rate.tsv") == [
        ["step", "pass_rate"], ["0", "0.1"], ["10", "0.123456789"], ["20", "0.2"]]
    assert read_tsv(tmp_path / "mean_len.tsv")[1:] == [["0", "20"], ["10", "19.5"], ["20", "18"]]


def test_curves_two_stages(tmp_path):
    written = emit_curves(FIX / "metrics_two_stage.csv", tmp_path)
    assert sorted(os.path.basename(p) for p in written) == [
        "stage1_mean_len.tsv", "stage1_pass_rate.tsv", "stage2_mean_len.tsv",
        "stage2_pass_rate.tsv"]
    assert read_tsv(tmp_path / "stage2_mean_len.tsv") == [
        ["step", "mean_len"], ["0", "15.125"], ["1", "12"]]


def test_curves_empty(tmp_path):
    written = emit_curves(FIX / "metrics_empty.csv", tmp_path)
    assert len(written) == 2
    for p in written:
        assert len(read_tsv(p)) == 1


def test_curves_missing_column(tmp_path):
    with pytest.raises(SchemaError, match="mean_len"):
        emit_curves(FIX / "metrics_missing.csv", tmp_path)


# --- command line ----------------------------------------------------------------


def test_cli_keywords(capsys):
    assert main(["analyze", "keywords", "--corpus", str(FIX / "keywords.jsonl")]) == 0
    assert json.loads(capsys.readouterr().out) == KEYWORD_COUNTS


def test_cli_keywords_extra(capsys):
    assert main(["analyze", "keywords", "--corpus", str(FIX / "keywords.jsonl"),
                 "--extra", "python", "let me"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["python"] == 0 and out["let me"] == 1


def test_cli_lengths(capsys):
    assert main(["analyze", "lengths", "--corpus", str(FIX / "lengths.jsonl"),
                 "--unit", "tokens"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["average_output_length"] == {"Total": 32.5, "Correct": 15.0, "Incorrect": 50.0}


def test_cli_curves(tmp_path, capsys):
    assert main(["analyze", "curves", "--metrics", str(FIX / "metrics_two_stage.csv"),
                 "--out", str(tmp_path)]) == 0
    assert len(capsys.readouterr().out.split()) == 4


def test_cli_errors(tmp_path, capsys):
    assert main(["analyze", "keywords", "--corpus", str(FIX / "malformed.jsonl")]) == 1
    assert main(["analyze", "curves", "--metrics", str(FIX / "metrics_missing.csv"),
                 "--out", str(tmp_path)]) == 1
    (tmp_path / "bad.json").write_text(json.dumps({"stage1": {"inner_epochs": 0}}))
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    assert "config error" in capsys.readouterr().err
