"""LSTM captioning baselines: pooled-feature LSTM and LSTM with soft attention."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .transformer import Captioner, xavier

MODES = ("plain", "soft_attn")


@dataclass
class LstmConfig:
    mode: str = "plain"
    hidden: int = 512
    feature_dim: int = 2048
    n_regions: int = 196
    vocab_size: int = 2216
    dropout_p: float = 0.1
    max_len: int = 18
    out_init_gain: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown LSTM mode {self.mode!r}; expected one of {MODES}")
        for name in ("hidden", "feature_dim", "n_regions", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {"kind": "lstm", **asdict(self)}


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor):
    """One step; gate columns of W are ordered input, forget, output, candidate."""
    H = h.shape[-1]
    z = ad.matmul(ad.concat([x, h], axis=-1), W) + b
    i = ad.sigmoid(z[..., :H])
    f = ad.sigmoid(z[..., H:2 * H])
    o = ad.sigmoid(z[..., 2 * H:3 * H])
    g = ad.tanh(z[..., 3 * H:])
    c2 = f * c + i * g
    return o * ad.tanh(c2), c2


def pooled_feature(grid) -> np.ndarray:
    """Average over regions: (..., R, D) -> (..., D)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape[-2] == 0:
        raise ValueError("empty feature grid")
    return grid.mean(axis=-2)


def soft_attention(h: Tensor, regions: Tensor, regions_proj: Tensor, W_h: Tensor, w: Tensor, trace=None):
    """Additive attention e_r = wᵀ tanh(W_h h + W_v v_r); returns (context, weights).

    ``regions`` is (B, R, E) and ``regions_proj`` its precomputed W_v projection.
    """
    e = ad.tanh(ad.reshape(ad.matmul(h, W_h), (h.shape[0], 1, -1)) + regions_proj)
    scores = ad.reshape(ad.matmul(e, ad.reshape(w, (-1, 1))), e.shape[:2])
    weights = ad.softmax(scores, axis=-1)
    if trace is not None:
        trace.append(weights.data)
    ctx = ad.reshape(ad.matmul(ad.reshape(weights, (weights.shape[0], 1, -1)), regions),
                     (regions.shape[0], regions.shape[2]))
    return ctx, weights


class LstmCaptioner(Captioner):
    """Single-layer LSTM decoder.

    ``plain``: the linearly embedded average-pooled feature is fed as the
    step-0 input ahead of BOS.  ``soft_attn``: each step concatenates the
    word embedding with an attention context over embedded regions.
    """

    def __init__(self, config: LstmConfig, seed: int = 0):
        super().__init__()
        self.config = c = config
        rng = ad.make_rng(seed)
        H = c.hidden
        self._param("img.W", xavier(rng, c.feature_dim, H))
        self._param("img.b", np.zeros(H))
        self._param("tok_embed", xavier(rng, c.vocab_size, H))
        n_in = H if c.mode == "plain" else 2 * H
        self._param("lstm.W", xavier(rng, n_in + H, 4 * H))
        self._param("lstm.b", np.zeros(4 * H))
        if c.mode == "soft_attn":
            self._param("att.Wh", xavier(rng, H, H))
            self._param("att.Wv", xavier(rng, H, H))
            self._param("att.w", xavier(rng, H, 1)[:, 0])
        self._param("out.W", xavier(rng, H, c.vocab_size, gain=c.out_init_gain))
        self._param("out.b", np.zeros(c.vocab_size))

    def prepare(self, features, training: bool = False, rng=None):
        c, p = self.config, self.params
        grid = np.asarray(features, dtype=np.float64)
        if grid.ndim == 2:
            grid = grid[None]
        if grid.shape[1:] != (c.n_regions, c.feature_dim):
            raise ValueError(f"feature grid shape {grid.shape[1:]} does not match "
                             f"config ({c.n_regions}, {c.feature_dim})")
        if c.mode == "plain":
            x = Tensor(pooled_feature(grid))
        else:
            x = Tensor(grid)
        emb = ad.dropout(ad.relu(ad.matmul(x, p["img.W"]) + p["img.b"]), c.dropout_p, training, rng)
        if c.mode == "plain":
            return emb
        return emb, ad.matmul(emb, p["att.Wv"])

    def select(self, state, idx):
        if isinstance(state, tuple):
            return tuple(Tensor(s.data[idx]) for s in state)
        return Tensor(state.data[idx])

    def logits(self, state, tokens, training: bool = False, rng=None, trace=None) -> Tensor:
        c, p = self.config, self.params
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        B, T = tokens.shape
        if not 1 <= T <= c.max_len:
            raise ValueError(f"decoder length {T} outside 1..{c.max_len}")
        h = Tensor(np.zeros((B, c.hidden)))
        cell = Tensor(np.zeros((B, c.hidden)))
        words = ad.dropout(ad.embedding_lookup(p["tok_embed"], tokens), c.dropout_p, training, rng)
        if c.mode == "plain":
            h, cell = lstm_cell(state, h, cell, p["lstm.W"], p["lstm.b"])
        outs = []
        for t in range(T):
            x = words[:, t]
            if c.mode == "soft_attn":
                ctx, _ = soft_attention(h, state[0], state[1], p["att.Wh"], p["att.w"], trace)
                x = ad.concat([x, ctx], axis=-1)
            h, cell = lstm_cell(x, h, cell, p["lstm.W"], p["lstm.b"])
            outs.append(ad.reshape(h, (B, 1, c.hidden)))
        hs = ad.dropout(ad.concat(outs, axis=1), c.dropout_p, training, rng)
        return ad.matmul(hs, p["out.W"]) + p["out.b"]


def baseline_forward(model: LstmCaptioner, features, tokens, mode: str, training: bool = False, rng=None):
    """Teacher-forced logits (B, T, V); ``mode`` must match the model's configuration."""
    if mode not in MODES:
        raise ValueError(f"unknown LSTM mode {mode!r}; expected one of {MODES}")
    if mode != model.config.mode:
        raise ValueError(f"model was built for mode {model.config.mode!r}, not {mode!r}")
    return model.forward(features, tokens, training, rng)
