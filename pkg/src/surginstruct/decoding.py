"""Greedy, multinomial-sampling and beam-search caption generation.

PAD and BOS are never emitted: their logits get the same -1e9 bias the
attention mask uses, so every decoder and the self-critical loss share one
output distribution.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .text import BOS, EOS, PAD
from .transformer import MASK_BIAS

MAX_DECODE = 17


def banned_bias(vocab_size: int) -> np.ndarray:
    b = np.zeros(vocab_size)
    b[[PAD, BOS]] = MASK_BIAS
    return b


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _batch(features):
    f = np.asarray(features, dtype=np.float64)
    return f[None] if f.ndim == 2 else f


def next_token_logits(model, state, prefixes: np.ndarray) -> np.ndarray:
    """Final-position logits (B, V) for BOS-led prefixes, banned ids masked."""
    lg = model.logits(state, prefixes).data[:, -1, :]
    return lg + banned_bias(lg.shape[-1])


def greedy_decode(model, features, max_len: int = MAX_DECODE, state=None):
    """Argmax decoding (lowest id wins ties) until EOS or ``max_len`` tokens."""
    with ad.no_grad():
        if state is None:
            state = model.prepare(_batch(features))
        B = state[0].shape[0] if isinstance(state, tuple) else state.shape[0]
        seq = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out = [[] for _ in range(B)]
        for _ in range(max_len):
            nxt = np.argmax(_log_softmax(next_token_logits(model, state, seq)), axis=-1)
            for b in np.flatnonzero(~done):
                out[b].append(int(nxt[b]))
            done |= nxt == EOS
            if done.all():
                break
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out


def sample_decode(model, features, rng: np.random.Generator, max_len: int = MAX_DECODE, state=None):
    """Temperature-1 multinomial decoding.

    Returns (ids, logps): per sequence the drawn ids and the log-probability
    of each drawn id under the (PAD/BOS-masked) softmax.
    """
    with ad.no_grad():
        if state is None:
            state = model.prepare(_batch(features))
        B = state[0].shape[0] if isinstance(state, tuple) else state.shape[0]
        seq = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out = [[] for _ in range(B)]
        lps = [[] for _ in range(B)]
        for _ in range(max_len):
            logp = _log_softmax(next_token_logits(model, state, seq))
            cdf = np.cumsum(np.exp(logp), axis=-1)
            u = rng.random(B) * cdf[:, -1]
            nxt = np.array([min(int(np.searchsorted(cdf[b], u[b], side="right")), cdf.shape[1] - 1)
                            for b in range(B)], dtype=np.int64)
            for b in np.flatnonzero(~done):
                out[b].append(int(nxt[b]))
                lps[b].append(float(logp[b, nxt[b]]))
            done |= nxt == EOS
            if done.all():
                break
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out, [np.array(x) for x in lps]


def length_normalized(logp_sum: float, length: int, alpha: float) -> float:
    return logp_sum / (max(length, 1) ** alpha)


def sequence_logprob(model, features, ids) -> float:
    """Sum of per-token log-probabilities of ``ids`` under teacher forcing."""
    if not ids:
        return 0.0
    with ad.no_grad():
        state = model.prepare(_batch(features))
        inp = np.array([[BOS] + list(ids[:-1])], dtype=np.int64)
        lg = model.logits(state, inp).data[0]
        logp = _log_softmax(lg + banned_bias(lg.shape[-1]))
    return float(sum(logp[t, w] for t, w in enumerate(ids)))


def beam_decode(model, features, beam: int = 3, max_len: int = MAX_DECODE, alpha: float = 0.7,
                return_score: bool = False):
    """Beam search over summed log-probs, ranked at the end by sum / len**alpha.

    Each step keeps the ``beam`` best extensions (ties: lower score loses,
    then lexicographically smaller id sequence wins); extensions ending in
    EOS retire as finished hypotheses.  Hypotheses still alive at
    ``max_len`` compete as capped outputs.
    """
    if beam < 1:
        raise ValueError(f"beam width must be >= 1, got {beam}")
    with ad.no_grad():
        state0 = model.prepare(_batch(features)[:1])
        alive = [((), 0.0)]
        finished = []
        for _ in range(max_len):
            prefixes = np.array([(BOS,) + seq for seq, _ in alive], dtype=np.int64)
            st = model.select(state0, np.zeros(len(alive), dtype=np.int64))
            logp = _log_softmax(next_token_logits(model, st, prefixes))
            cands = []
            for k, (seq, score) in enumerate(alive):
                for w in np.argsort(-logp[k], kind="stable")[:beam]:
                    cands.append((score + float(logp[k, w]), seq + (int(w),)))
            cands.sort(key=lambda c: (-c[0], c[1]))
            alive = []
            for score, seq in cands[:beam]:
                (finished if seq[-1] == EOS else alive).append((seq, score))
            if not alive:
                break
        pool = finished + alive
        best_seq, best_score = min(
            pool, key=lambda h: (-length_normalized(h[1], len(h[0]), alpha), h[0]))
    ids = list(best_seq)
    return (ids, length_normalized(best_score, len(ids), alpha)) if return_score else ids
