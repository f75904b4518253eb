import numpy as np
import pytest

from concise_rl.policy_core import EOS, PAD, PolicyParams, Vocab, param_count


def tiny_vocab(V: int = 8) -> Vocab:
    return Vocab(tuple(f"t{i}" for i in range(V - 2)) + (EOS, PAD))


def random_policy(V=8, k=2, e=3, h=4, seed=0, scale=0.5, vocab=None) -> PolicyParams:
    vocab = vocab or tiny_vocab(V)
    n = param_count(vocab.size, k, e, h)
    w = np.random.default_rng(seed).normal(scale=scale, size=n)
    return PolicyParams(vocab, k, e, h, w)


def central_fd(f, w: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``w``."""
    g = np.zeros_like(w)
    for i in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[i] += eps
        wm[i] -= eps
        g[i] = (f(wp) - f(wm)) / (2 * eps)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs deviation relative to the numeric gradient's largest entry."""
    scale = max(np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@pytest.fixture
def tiny_policy():
    return random_policy()


def bigram_policy(vocab: Vocab, table: dict, k: int = 3) -> PolicyParams:
    """Exact bigram model: next-token probabilities depend only on the last token.

    ``table`` maps a previous symbol to {next symbol: probability}.  Unlisted
    successors get logit -60; unlisted previous symbols give uniform output.
    """
    V = vocab.size
    p = PolicyParams(vocab, k, V, V, np.zeros(param_count(V, k, V, V)))
    w = p.weights.copy()
    E, W1, b1, W2, b2 = p.unpack(w)
    E[:] = np.eye(V)
    W1[(k - 1) * V:, :] = 40.0 * np.eye(V)  # tanh(40) == 1.0 in float64
    for prev, nxt in table.items():
        row = np.full(V, -60.0)
        for sym, prob in nxt.items():
            row[vocab.index[sym]] = np.log(prob)
        W2[vocab.index[prev]] = row
    return p.with_weights(w)


def answering_policy(answers: dict, vocab: Vocab | None = None) -> PolicyParams:
    """Bigram policy that is always well formed with an empty think span and
    draws the answer digit from ``answers``."""
    from concise_rl.task_env import ASSISTANT, default_vocab
    from concise_rl.policy_core import (
        ANSWER_CLOSE, ANSWER_OPEN, BOXED, EOS, THINK_CLOSE, THINK_OPEN)

    return bigram_policy(vocab or default_vocab(), {
        ASSISTANT: {THINK_OPEN: 1.0},
        THINK_OPEN: {THINK_CLOSE: 1.0},
        THINK_CLOSE: {ANSWER_OPEN: 1.0},
        ANSWER_OPEN: {BOXED: 1.0},
        BOXED: answers,
        **{d: {ANSWER_CLOSE: 1.0} for d in answers},
        ANSWER_CLOSE: {EOS: 1.0},
    })


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE_LINES: dict[str, str] = {}


def report(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
