"""A fixed-window autoregressive token policy with exact gradients.

The model embeds the last ``k`` tokens, concatenates the embeddings, applies
one tanh hidden layer and a linear read-out to ``V`` logits.  Everything is
float64 numpy.  Forward passes use row-independent contractions so a
log-probability is bit-identical whether it was computed for one context or
inside a large batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from concise_rl import rng as rng_mod

log = logging.getLogger(__name__)

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
BOXED = "\\boxed"
EOS = "<eos>"
PAD = "<pad>"

INIT_SCALE = 0.05


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class NumericalError(FloatingPointError):
    """Non-finite values appeared in a forward or backward pass."""


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary symbols must be distinct")
        if EOS not in self.tokens or PAD not in self.tokens:
            raise ConfigError("vocabulary must contain EOS and PAD")
        if len(self.tokens) < 8:
            raise ConfigError(f"vocabulary needs at least 8 symbols, got {len(self.tokens)}")
        object.__setattr__(self, "index", {s: i for i, s in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    def ids(self, symbols) -> list[int]:
        try:
            return [self.index[s] for s in symbols]
        except KeyError as exc:
            raise ValueError(f"unknown symbol {exc.args[0]!r}") from None

    def symbols(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


def param_count(V: int, k: int, e: int, h: int) -> int:
    return V * e + (k * e * h + h) + (h * V + V)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    vocab: Vocab
    k: int
    e: int
    h: int
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 1 or w.size != self.param_count:
            raise ConfigError(
                f"expected {self.param_count} weights for V={self.vocab.size}, "
                f"k={self.k}, e={self.e}, h={self.h}; got shape {w.shape}"
            )
        if not np.all(np.isfinite(w)):
            raise NumericalError("policy weights contain non-finite values")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def param_count(self) -> int:
        return param_count(self.vocab.size, self.k, self.e, self.h)

    def _slices(self):
        V, k, e, h = self.vocab.size, self.k, self.e, self.h
        sizes = [V * e, k * e * h, h, h * V, V]
        bounds = np.cumsum([0] + sizes)
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def unpack(self, flat: np.ndarray | None = None):
        """Views (E, W1, b1, W2, b2) into ``flat`` (default: the weights)."""
        flat = self.weights if flat is None else flat
        V, k, e, h = self.vocab.size, self.k, self.e, self.h
        s = self._slices()
        return (
            flat[s[0]].reshape(V, e),
            flat[s[1]].reshape(k * e, h),
            flat[s[2]],
            flat[s[3]].reshape(h, V),
            flat[s[4]],
        )

    def with_weights(self, weights: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.vocab, self.k, self.e, self.h, weights)


def init_policy(vocab: Vocab, k: int, h: int, seed: int, e: int = 4) -> PolicyParams:
    if k < 1 or h < 1 or e < 1:
        raise ConfigError(f"policy dims must be positive (k={k}, e={e}, h={h})")
    n = param_count(vocab.size, k, e, h)
    w = rng_mod.stream(seed, "init", k, e, h).uniform(-INIT_SCALE, INIT_SCALE, size=n)
    return PolicyParams(vocab, k, e, h, w)


# ---------------------------------------------------------------------------
# forward pass


def contexts(prompt, response, k: int, pad_id: int) -> np.ndarray:
    """Context windows for every response position, shape (len(response), k).

    Row ``t`` holds the last ``k`` tokens of ``prompt + response[:t]``,
    left-padded with ``pad_id``.
    """
    seq = np.concatenate(
        [np.full(k, pad_id, dtype=np.int64), np.asarray(prompt, dtype=np.int64),
         np.asarray(response, dtype=np.int64)]
    )
    P, L = len(prompt), len(response)
    windows = np.lib.stride_tricks.sliding_window_view(seq, k)
    return np.ascontiguousarray(windows[P:P + L])


def _check_ctx(params: PolicyParams, ctx: np.ndarray) -> np.ndarray:
    ctx = np.asarray(ctx, dtype=np.int64)
    if ctx.ndim == 1:
        ctx = ctx[None, :]
    if ctx.shape[1] != params.k:
        raise ValueError(f"context width {ctx.shape[1]} != k={params.k}")
    if ctx.size and (ctx.min() < 0 or ctx.max() >= params.vocab.size):
        raise ValueError("token id out of range in context")
    return ctx


def forward(params: PolicyParams, ctx: np.ndarray):
    """Return (x, hidden, logits) for a batch of contexts."""
    ctx = _check_ctx(params, ctx)
    E, W1, b1, W2, b2 = params.unpack()
    x = E[ctx].reshape(ctx.shape[0], params.k * params.e)
    hid = np.tanh(np.einsum("ni,ij->nj", x, W1) + b1)
    logits = np.einsum("ni,ij->nj", hid, W2) + b2
    if not np.all(np.isfinite(logits)):
        bad = np.nonzero(~np.all(np.isfinite(logits), axis=1))[0][:3]
        raise NumericalError(
            f"non-finite logits for contexts {ctx[bad].tolist()}: {logits[bad].tolist()}"
        )
    return x, hid, logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def token_distribution(params: PolicyParams, ctx, temperature: float = 1.0) -> np.ndarray:
    """Next-token probabilities; 1-D for a single context, else (N, V)."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    single = np.asarray(ctx).ndim == 1
    _, _, logits = forward(params, ctx)
    p = np.exp(log_softmax(logits / temperature))
    return p[0] if single else p


def nucleus(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Restrict ``probs`` (N, V) to each row's top-p nucleus and renormalize.

    Tokens are ranked by probability (ties by token id); the kept set is the
    shortest prefix whose cumulative mass reaches ``top_p``.
    """
    if not 0.0 < top_p <= 1.0:
        raise ValueError("top_p must lie in (0, 1]")
    probs = np.atleast_2d(probs)
    if top_p >= 1.0:
        return probs / probs.sum(axis=1, keepdims=True)
    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=1)
    cum = np.cumsum(sorted_p, axis=1)
    # number of tokens kept: first index where the cumulative mass reaches top_p
    n_keep = np.minimum((cum < top_p - 1e-12).sum(axis=1) + 1, probs.shape[1])
    keep_sorted = np.arange(probs.shape[1])[None, :] < n_keep[:, None]
    mask = np.zeros_like(keep_sorted)
    np.put_along_axis(mask, order, keep_sorted, axis=1)
    out = np.where(mask, probs, 0.0)
    return out / out.sum(axis=1, keepdims=True)


def sample_from(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling: one token per row of ``probs`` using uniforms ``u``."""
    cum = np.cumsum(probs, axis=1)
    tok = (cum <= (u * cum[:, -1])[:, None]).sum(axis=1)
    # u * total can land on the last bucket edge; never pick a zero-mass token
    tok = np.minimum(tok, probs.shape[1] - 1)
    while True:
        zero = probs[np.arange(len(tok)), tok] == 0.0
        if not zero.any():
            return tok
        tok = np.where(zero, tok - 1, tok)


def sampling_probs(logits: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return nucleus(np.exp(log_softmax(logits / temperature)), top_p)


def sample_token(params: PolicyParams, ctx, temperature: float, top_p: float,
                 rng: np.random.Generator) -> int:
    _, _, logits = forward(params, ctx)
    probs = sampling_probs(logits, temperature, top_p)
    return int(sample_from(probs, np.array([rng.random()]))[0])


def sequence_log_prob(params: PolicyParams, prompt, response):
    """Log-probability of ``response`` given ``prompt`` at temperature 1.

    Returns ``(total, per_token)``.
    """
    if len(response) == 0:
        raise ValueError("response must be non-empty")
    V = params.vocab.size
    resp = np.asarray(response, dtype=np.int64)
    if resp.min() < 0 or resp.max() >= V or (len(prompt) and (min(prompt) < 0 or max(prompt) >= V)):
        raise ValueError("token id out of range")
    ctx = contexts(prompt, resp, params.k, params.vocab.pad_id)
    _, _, logits = forward(params, ctx)
    per_token = log_softmax(logits)[np.arange(len(resp)), resp]
    total = 0.0
    for v in per_token:
        total += float(v)
    return total, per_token


def token_logprobs(params: PolicyParams, ctx: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    _, _, logits = forward(params, ctx)
    return log_softmax(logits)[np.arange(len(tokens)), tokens]


def _entropy_from_logp(logp: np.ndarray) -> np.ndarray:
    return -(np.exp(logp) * logp).sum(axis=-1)


def token_entropy(params: PolicyParams, ctx) -> float | np.ndarray:
    single = np.asarray(ctx).ndim == 1
    _, _, logits = forward(params, ctx)
    H = np.maximum(_entropy_from_logp(log_softmax(logits)), 0.0)
    return float(H[0]) if single else H


# ---------------------------------------------------------------------------
# gradients


def _backward(params: PolicyParams, ctx: np.ndarray, x: np.ndarray, hid: np.ndarray,
              dlogits: np.ndarray) -> np.ndarray:
    grad = np.zeros(params.param_count)
    dE, dW1, db1, dW2, db2 = params.unpack(grad)
    _, W1, _, W2, _ = params.unpack()
    dW2[...] = hid.T @ dlogits
    db2[...] = dlogits.sum(axis=0)
    dpre = (dlogits @ W2.T) * (1.0 - hid * hid)
    dW1[...] = x.T @ dpre
    db1[...] = dpre.sum(axis=0)
    dx = (dpre @ W1.T).reshape(ctx.shape[0], params.k, params.e)
    np.add.at(dE, ctx.reshape(-1), dx.reshape(-1, params.e))
    return grad


def policy_grad(params: PolicyParams, ctx, tokens, token_coeffs, entropy_coeffs=None,
                forward_cache=None) -> np.ndarray:
    """Gradient of ``sum_i c_i log pi(tok_i|ctx_i) + sum_i a_i H(pi(.|ctx_i))``.

    ``entropy_coeffs`` may be None (no entropy term).  All objectives reduce
    to this single backward pass.
    """
    ctx = _check_ctx(params, ctx)
    n = ctx.shape[0]
    if n == 0:
        return np.zeros(params.param_count)
    tokens = np.asarray(tokens, dtype=np.int64)
    c = np.asarray(token_coeffs, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise NumericalError("non-finite log-prob coefficients")
    x, hid, logits = forward_cache if forward_cache is not None else forward(params, ctx)
    logp = log_softmax(logits)
    p = np.exp(logp)
    dlogits = -c[:, None] * p
    dlogits[np.arange(n), tokens] += c
    if entropy_coeffs is not None:
        a = np.broadcast_to(np.asarray(entropy_coeffs, dtype=np.float64), (n,))
        H = _entropy_from_logp(logp)
        dlogits += a[:, None] * (-p * (logp + H[:, None]))
    return _backward(params, ctx, x, hid, dlogits)


def weighted_logprob_grad(params: PolicyParams, ctxs, tokens, coeffs) -> np.ndarray:
    ctxs = np.asarray(ctxs, dtype=np.int64).reshape(-1, params.k)
    return policy_grad(params, ctxs, tokens, coeffs)


def entropy_grad(params: PolicyParams, ctxs, coeff: float) -> np.ndarray:
    """Gradient of ``coeff * mean_ctx H(pi(.|ctx))``."""
    ctxs = np.asarray(ctxs, dtype=np.int64).reshape(-1, params.k)
    n = ctxs.shape[0]
    if n == 0 or coeff == 0:
        return np.zeros(params.param_count)
    zeros = np.zeros(n)
    return policy_grad(params, ctxs, np.zeros(n, dtype=np.int64), zeros, np.full(n, coeff / n))
