"""Teacher-forced cross-entropy training and self-critical (SCST) fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .decoding import MAX_DECODE, banned_bias, greedy_decode, sample_decode
from .metrics import CiderD, evaluate
from .text import BOS, PAD, Vocabulary, decode

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    phase: str = "xe"
    epochs: int = 30
    batch_size: int = 5
    peak_lr_xe: float = 3e-4
    warmup_steps: int = 20000
    lr_scst: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.phase not in ("xe", "scst"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.peak_lr_xe < 0 or self.lr_scst < 0:
            raise ValueError("learning rates must be non-negative")
        if self.warmup_steps < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("warmup_steps and batch_size must be >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then peak * sqrt(warmup / step)."""
    if step < 1:
        raise ValueError("schedule steps start at 1")
    w = cfg.warmup_steps
    if step <= w:
        return cfg.peak_lr_xe * step / w
    return cfg.peak_lr_xe * math.sqrt(w / step)


class Adam:
    """Bias-corrected Adam with per-parameter moment buffers keyed by name."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        bad = [k for k, p in self.params.items()
               if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            raise FloatingPointError(f"non-finite gradients in {bad}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(state["m"][k], dtype=np.float64) for k in self.params}
        self.v = {k: np.array(state["v"][k], dtype=np.float64) for k in self.params}


def adam_step(params: dict, state: Adam, lr: float) -> None:
    state.step(lr)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass
class CaptionData:
    """Feature grids (N, R, D), encoded ids (N, L + 2) and reference token lists."""
    features: np.ndarray
    tokens: np.ndarray
    refs: list
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.features))]
        if not (len(self.features) == len(self.tokens) == len(self.refs) == len(self.ids)):
            raise ValueError("CaptionData fields differ in length")

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx) -> "CaptionData":
        idx = list(idx)
        return CaptionData(self.features[idx], self.tokens[idx],
                           [self.refs[i] for i in idx], [self.ids[i] for i in idx])


def xe_loss(model, features, tokens, training=False, rng=None) -> ad.Tensor:
    """Teacher forcing: the decoder reads the ground-truth prefix, never its own output."""
    inp, tgt = tokens[:, :-1], tokens[:, 1:]
    logits = model.forward(features, inp, training, rng)
    return ad.cross_entropy(logits, tgt, tgt != PAD)


def scst_surrogate(model, features, sampled, advantages) -> ad.Tensor:
    """-mean_b A_b * sum_t log p(sampled_bt), with log p from one teacher-forced pass."""
    B = len(sampled)
    T = max(len(s) for s in sampled)
    inp = np.full((B, T), PAD, dtype=np.int64)
    tgt = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T))
    for b, s in enumerate(sampled):
        inp[b, 0] = BOS
        inp[b, 1:len(s)] = s[:-1]
        tgt[b, :len(s)] = s
        mask[b, :len(s)] = 1.0
    logits = model.forward(features, inp, training=False)
    logp = ad.log_softmax(logits + banned_bias(logits.shape[-1]), axis=-1)
    tok = ad.pick(logp, tgt)
    weight = -np.asarray(advantages, dtype=np.float64)[:, None] * mask / B
    return ad.tsum(tok * weight)


def scst_step(model, features, refs, reward_fn, rng, vocab: Vocabulary, max_len: int = MAX_DECODE):
    """Sample, greedy-decode the baseline, score both, and build the policy-gradient loss.

    Returns (loss, info) with per-sample rewards in ``info``; the caller runs backward.
    """
    with ad.no_grad():
        state = model.prepare(features)
        sampled, _ = sample_decode(model, None, rng, max_len, state=state)
        greedy = greedy_decode(model, None, max_len, state=state)
    try:
        r_s = np.array([reward_fn(decode(s, vocab), r) for s, r in zip(sampled, refs)])
        r_g = np.array([reward_fn(decode(g, vocab), r) for g, r in zip(greedy, refs)])
    except Exception as exc:
        raise RuntimeError(f"reward function failed on SCST batch: {exc}") from exc
    adv = r_s - r_g
    loss = scst_surrogate(model, features, sampled, adv)
    return loss, {"reward_sampled": r_s, "reward_greedy": r_g, "advantage": adv,
                  "sampled": sampled, "greedy": greedy}


def cider_reward(scorer: CiderD):
    return lambda hyp, ref: scorer.sentence_score(hyp, ref)


class Trainer:
    """Owns a model, its optimiser and the seeded generator for one training run.

    Batch order in epoch ``e`` depends only on (seed, e), so a run restored
    from an end-of-epoch checkpoint continues bit-identically.
    """

    def __init__(self, model, train: CaptionData, cfg: TrainConfig, vocab: Vocabulary,
                 val: CaptionData | None = None, log_fn=None):
        if len(train) == 0:
            raise ValueError("empty training set")
        self.model, self.train, self.cfg, self.vocab, self.val = model, train, cfg, vocab, val
        self.opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.eps)
        self.rng = ad.make_rng(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.log_fn = log_fn
        self.history: list[dict] = []
        self.scorer: CiderD | None = None

    def batches(self, epoch: int):
        ss = np.random.SeedSequence([int(self.cfg.seed), int(epoch)])
        order = np.random.Generator(np.random.Philox(ss)).permutation(len(self.train))
        bs = self.cfg.batch_size
        for i in range(0, len(order), bs):
            yield np.sort(order[i:i + bs])

    def _emit(self, rec: dict) -> None:
        if self.log_fn is not None:
            self.log_fn(rec)

    def _update(self, loss, lr) -> None:
        self.model.zero_grad()
        ad.backward(loss)
        clip_grad_norm(self.model.parameters(), self.cfg.clip_norm)
        self.opt.step(lr)

    def xe_epoch(self) -> dict:
        losses = []
        for idx in self.batches(self.epoch):
            self.step += 1
            lr = lr_schedule(self.step, self.cfg)
            loss = xe_loss(self.model, self.train.features[idx], self.train.tokens[idx],
                           training=True, rng=self.rng)
            self._update(loss, lr)
            losses.append(loss.item())
            self._emit({"step": self.step, "phase": "xe", "lr": lr, "loss": losses[-1]})
        self.epoch += 1
        rec = {"epoch": self.epoch, "phase": "xe", "train_loss": float(np.mean(losses))}
        if self.val is not None:
            rec["val_loss"] = self.val_loss()
        self.history.append(rec)
        log.info("xe epoch %d: %s", self.epoch, rec)
        return rec

    def scst_epoch(self) -> dict:
        if self.scorer is None:
            # document frequencies frozen from training references
            self.scorer = CiderD(self.train.refs)
        reward = cider_reward(self.scorer)
        rs, rg = [], []
        for idx in self.batches(self.epoch):
            self.step += 1
            loss, info = scst_step(self.model, self.train.features[idx],
                                   [self.train.refs[i] for i in idx], reward, self.rng, self.vocab)
            self._update(loss, self.cfg.lr_scst)
            rs.extend(info["reward_sampled"])
            rg.extend(info["reward_greedy"])
            self._emit({"step": self.step, "phase": "scst", "lr": self.cfg.lr_scst,
                        "loss": loss.item(),
                        "reward_sampled": float(np.mean(info["reward_sampled"])),
                        "reward_greedy": float(np.mean(info["reward_greedy"]))})
        self.epoch += 1
        rec = {"epoch": self.epoch, "phase": "scst", "reward_sampled": float(np.mean(rs)),
               "reward_greedy": float(np.mean(rg)),
               "advantage": float(np.mean(rs) - np.mean(rg))}
        self.history.append(rec)
        log.info("scst epoch %d: %s", self.epoch, rec)
        return rec

    def val_loss(self, batch: int = 100) -> float:
        total, n = 0.0, 0
        with ad.no_grad():
            for i in range(0, len(self.val), batch):
                tok = self.val.tokens[i:i + batch]
                k = int((tok[:, 1:] != PAD).sum())
                total += xe_loss(self.model, self.val.features[i:i + batch], tok).item() * k
                n += k
        return total / n

    def state(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "optimizer": self.opt.state(),
                "rng": ad.rng_state(self.rng)}

    def restore(self, state: dict) -> None:
        self.step, self.epoch = int(state["step"]), int(state["epoch"])
        if state.get("optimizer") is not None:
            self.opt.load(state["optimizer"])
        if state.get("rng") is not None:
            self.rng = ad.restore_rng(state["rng"])


def generate_captions(model, data: CaptionData, vocab: Vocabulary, batch: int = 100,
                      max_len: int = MAX_DECODE):
    """Greedy captions (token lists) for every record of ``data``."""
    out = []
    for i in range(0, len(data), batch):
        out.extend(decode(s, vocab) for s in greedy_decode(model, data.features[i:i + batch], max_len))
    return out


def evaluate_model(model, data: CaptionData, vocab: Vocabulary, scorer: CiderD | None = None):
    hyps = generate_captions(model, data, vocab)
    return evaluate(hyps, data.refs, scorer, ids=data.ids), hyps


def train_xe(model, train: CaptionData, cfg: TrainConfig, vocab: Vocabulary,
             val: CaptionData | None = None, log_fn=None, on_epoch=None) -> Trainer:
    """Run ``cfg.epochs`` teacher-forced epochs; ``on_epoch(trainer)`` fires after each."""
    trainer = Trainer(model, train, cfg, vocab, val, log_fn)
    for _ in range(cfg.epochs):
        trainer.xe_epoch()
        if on_epoch is not None:
            on_epoch(trainer)
    return trainer


def train_scst(model, train: CaptionData, cfg: TrainConfig, vocab: Vocabulary,
               val: CaptionData | None = None, log_fn=None, on_epoch=None) -> Trainer:
    trainer = Trainer(model, train, cfg, vocab, val, log_fn)
    for _ in range(cfg.epochs):
        trainer.scst_epoch()
        if on_epoch is not None:
            on_epoch(trainer)
    return trainer
