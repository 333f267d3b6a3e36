"""Transformer encoder-decoder captioner over image-region features.

Region features (R x D) are embedded to d_model with a linear map, ReLU and
dropout, run through a stack of self-attention encoder blocks, and attended
to by a stack of causally masked decoder blocks.  Blocks are post-norm:
``LayerNorm(x + Dropout(sublayer(x)))``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_BIAS = -1e9


@dataclass
class ModelConfig:
    d_model: int = 512
    n_heads: int = 8
    n_enc_blocks: int = 6
    n_dec_blocks: int = 6
    d_ff: int = 2048
    dropout_p: float = 0.1
    feature_dim: int = 2048
    n_regions: int = 196
    vocab_size: int = 2216
    max_len: int = 18
    encoder_pe: bool = True
    ln_eps: float = 1e-5
    out_init_gain: float = 0.1

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_enc_blocks", "n_dec_blocks", "d_ff",
                     "feature_dim", "n_regions", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {"kind": "transformer", **asdict(self)}


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def sinusoidal_encoding(n_pos: int, d: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n_pos, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, trace=None) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d) + bias) V, with bias -1e9 where ``mask`` is False.

    Works over any leading batch/head axes.  ``mask`` broadcasts to
    (..., n_q, n_k); a row with nothing allowed is rejected.
    """
    d = k.shape[-1]
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("attention mask has a fully masked row")
        scores = scores + np.where(mask, 0.0, MASK_BIAS)
    weights = ad.softmax(scores, axis=-1)
    if trace is not None:
        trace.append(weights.data)
    return ad.matmul(weights, v)


class Captioner:
    """Common surface shared by the transformer and the LSTM baselines.

    ``prepare`` turns a feature batch (B, R, D) into an image state,
    ``logits`` scores a batch of decoder input ids (B, T) against that state
    and returns (B, T, V) logits for the next token at each position.
    """

    config = None

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self):
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def prepare(self, features, training: bool = False, rng=None):
        raise NotImplementedError

    def logits(self, state, tokens, training: bool = False, rng=None, trace=None) -> Tensor:
        raise NotImplementedError

    def select(self, state, idx):
        """Reindex an image state along the batch axis (beam expansion)."""
        return Tensor(state.data[idx])

    def forward(self, features, tokens, training: bool = False, rng=None) -> Tensor:
        return self.logits(self.prepare(features, training, rng), tokens, training, rng)


class Transformer(Captioner):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = c = config
        rng = ad.make_rng(seed)
        d = c.d_model
        self._param("feat.W", xavier(rng, c.feature_dim, d))
        for i in range(c.n_enc_blocks):
            self._attn_params(f"enc{i}.self", rng)
            self._ln_params(f"enc{i}.ln1")
            self._ffn_params(f"enc{i}.ffn", rng)
            self._ln_params(f"enc{i}.ln2")
        self._param("tok_embed", xavier(rng, c.vocab_size, d))
        for i in range(c.n_dec_blocks):
            self._attn_params(f"dec{i}.self", rng)
            self._ln_params(f"dec{i}.ln1")
            self._attn_params(f"dec{i}.cross", rng)
            self._ln_params(f"dec{i}.ln2")
            self._ffn_params(f"dec{i}.ffn", rng)
            self._ln_params(f"dec{i}.ln3")
        self._param("out.W", xavier(rng, d, c.vocab_size, gain=c.out_init_gain))
        self._param("out.b", np.zeros(c.vocab_size))
        self.enc_pe = sinusoidal_encoding(c.n_regions, d)
        self.dec_pe = sinusoidal_encoding(c.max_len, d)

    def _attn_params(self, prefix, rng):
        d = self.config.d_model
        # column block h of W_q/W_k/W_v is head h's projection
        for name in ("q", "k", "v", "o"):
            self._param(f"{prefix}.W{name}", xavier(rng, d, d))

    def _ffn_params(self, prefix, rng):
        d, f = self.config.d_model, self.config.d_ff
        self._param(f"{prefix}.W1", xavier(rng, d, f))
        self._param(f"{prefix}.b1", np.zeros(f))
        self._param(f"{prefix}.W2", xavier(rng, f, d))
        self._param(f"{prefix}.b2", np.zeros(d))

    def _ln_params(self, prefix):
        d = self.config.d_model
        self._param(f"{prefix}.g", np.ones(d))
        self._param(f"{prefix}.b", np.zeros(d))

    @staticmethod
    def count_params(c: ModelConfig) -> int:
        """Closed-form parameter count."""
        d, f, V = c.d_model, c.d_ff, c.vocab_size
        ffn = 2 * d * f + f + d
        enc = 4 * d * d + ffn + 4 * d
        dec = 8 * d * d + ffn + 6 * d
        return c.feature_dim * d + c.n_enc_blocks * enc + c.n_dec_blocks * dec + V * d + d * V + V

    # ------------------------------------------------------------ building blocks

    def multi_head_attention(self, x_q: Tensor, x_kv: Tensor, prefix: str, mask=None, trace=None):
        """Per-head projections, scaled dot attention, concat, output projection."""
        c, p = self.config, self.params
        B, Tq, _ = x_q.shape
        Tk = x_kv.shape[1]
        h, dh = c.n_heads, c.d_head

        def heads(x, W, T):
            return ad.swapaxes(ad.reshape(ad.matmul(x, W), (B, T, h, dh)), 1, 2)

        q = heads(x_q, p[f"{prefix}.Wq"], Tq)
        k = heads(x_kv, p[f"{prefix}.Wk"], Tk)
        v = heads(x_kv, p[f"{prefix}.Wv"], Tk)
        o = scaled_dot_attention(q, k, v, mask, trace)
        o = ad.reshape(ad.swapaxes(o, 1, 2), (B, Tq, c.d_model))
        return ad.matmul(o, p[f"{prefix}.Wo"])

    def _ffn(self, x, prefix):
        p = self.params
        hdn = ad.relu(ad.matmul(x, p[f"{prefix}.W1"]) + p[f"{prefix}.b1"])
        return ad.matmul(hdn, p[f"{prefix}.W2"]) + p[f"{prefix}.b2"]

    def _sublayer(self, x, y, ln, training, rng):
        p, c = self.params, self.config
        y = ad.dropout(y, c.dropout_p, training, rng)
        return ad.layer_norm(x + y, p[f"{ln}.g"], p[f"{ln}.b"], c.ln_eps)

    def embed_features(self, features, training: bool = False, rng=None) -> Tensor:
        """dropout(relu(grid @ W_e)) plus optional region positional encoding."""
        c = self.config
        x = ad.as_tensor(features)
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        if x.shape[1:] != (c.n_regions, c.feature_dim):
            raise ValueError(f"feature grid shape {x.shape[1:]} does not match "
                             f"config ({c.n_regions}, {c.feature_dim})")
        e = ad.dropout(ad.relu(ad.matmul(x, self.params["feat.W"])), c.dropout_p, training, rng)
        if c.encoder_pe:
            e = e + self.enc_pe
        return e

    def encode(self, x: Tensor, training: bool = False, rng=None, trace=None) -> Tensor:
        for i in range(self.config.n_enc_blocks):
            a = self.multi_head_attention(x, x, f"enc{i}.self", None, trace)
            x = self._sublayer(x, a, f"enc{i}.ln1", training, rng)
            x = self._sublayer(x, self._ffn(x, f"enc{i}.ffn"), f"enc{i}.ln2", training, rng)
        return x

    def decode_step(self, tokens, memory: Tensor, training: bool = False, rng=None, trace=None):
        """Logits (B, T, V) for every prefix position of ``tokens`` (B, T)."""
        c, p = self.config, self.params
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        B, T = tokens.shape
        if not 1 <= T <= c.max_len:
            raise ValueError(f"decoder length {T} outside 1..{c.max_len}")
        x = ad.embedding_lookup(p["tok_embed"], tokens) * math.sqrt(c.d_model) + self.dec_pe[:T]
        x = ad.dropout(x, c.dropout_p, training, rng)
        mask = causal_mask(T)
        for i in range(c.n_dec_blocks):
            a = self.multi_head_attention(x, x, f"dec{i}.self", mask, trace)
            x = self._sublayer(x, a, f"dec{i}.ln1", training, rng)
            a = self.multi_head_attention(x, memory, f"dec{i}.cross", None, trace)
            x = self._sublayer(x, a, f"dec{i}.ln2", training, rng)
            x = self._sublayer(x, self._ffn(x, f"dec{i}.ffn"), f"dec{i}.ln3", training, rng)
        return ad.matmul(x, p["out.W"]) + p["out.b"]

    # ------------------------------------------------------------ Captioner surface

    def prepare(self, features, training: bool = False, rng=None, trace=None):
        return self.encode(self.embed_features(features, training, rng), training, rng, trace)

    def logits(self, state, tokens, training: bool = False, rng=None, trace=None) -> Tensor:
        return self.decode_step(tokens, state, training, rng, trace)
