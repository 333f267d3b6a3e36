"""The six-regime comparison: each model family trained with XE, then fine-tuned with SCST.

One CIDEr-D scorer, with document frequencies frozen from the training
references, serves as both the self-critical reward and the evaluation
metric, so the two can never disagree.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .io import save_checkpoint, write_jsonl
from .metrics import CiderD, MetricReport
from .pipeline import Corpus, build_model, synthetic_corpus, train_config
from .training import Trainer, evaluate_model

REGIMES = ("LSTM", "LSTM+rl", "LSTM+attn", "LSTM+attn+rl", "Transformer", "Transformer+rl")
FAMILIES = {"LSTM": "lstm", "LSTM+attn": "lstm_attn", "Transformer": "transformer"}
COLUMNS = MetricReport.COLUMNS


class StageError(RuntimeError):
    """A regime stage failed; the message names the stage."""


@dataclass
class RegimeResult:
    regime: str
    test: MetricReport
    val: MetricReport
    seconds: float


@dataclass
class ExperimentResult:
    seed: int
    results: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)

    def row(self, regime: str) -> dict:
        return dict(zip(COLUMNS, self.results[regime].test.row()))

    def table(self) -> list[dict]:
        return [{"regime": r, **self.row(r)} for r in self.results]


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except Exception as exc:
        raise StageError(f"stage {name!r} failed: {exc}") from exc


def _family_regimes(regimes):
    wanted = {}
    for r in regimes:
        if r not in REGIMES:
            raise ValueError(f"unknown regime {r!r}; expected one of {REGIMES}")
        base = r[:-3] if r.endswith("+rl") else r
        wanted.setdefault(base, set()).add(r)
    return wanted


def run_family(base: str, corpus: Corpus, cfg: dict, seed: int, scorer: CiderD, wanted: set,
               out_dir: Path | None = None, log_rows: list | None = None):
    """XE phase (shared), optionally followed by SCST from the XE weights."""
    kind = FAMILIES[base]
    model = _stage(f"{base}/build", build_model, kind, cfg, len(corpus.vocab), seed)
    history = []
    results = {}
    t0 = time.perf_counter()

    def emit(rec):
        if log_rows is not None:
            log_rows.append({"regime": base, **rec})

    xe_cfg = train_config(cfg, "xe", len(corpus.train), seed)
    tr = Trainer(model, corpus.train, xe_cfg, corpus.vocab, corpus.val, emit)
    for _ in range(xe_cfg.epochs):
        history.append(_stage(f"{base}/train-xe", tr.xe_epoch))
    if out_dir is not None:
        save_checkpoint(out_dir / f"{kind}_xe.ckpt", model, xe_cfg, tr.state(), {"phase": "xe", "regime": base},
                        corpus.vocab)
    val, _ = _stage(f"{base}/evaluate", evaluate_model, model, corpus.val, corpus.vocab, scorer)
    test, _ = _stage(f"{base}/evaluate", evaluate_model, model, corpus.test, corpus.vocab, scorer)
    history[-1]["val_cider"] = val.cider
    if base in wanted:
        results[base] = RegimeResult(base, test, val, time.perf_counter() - t0)
    rl = base + "+rl"
    if rl in wanted:
        sc_cfg = train_config(cfg, "scst", len(corpus.train), seed)
        tr = Trainer(model, corpus.train, sc_cfg, corpus.vocab, corpus.val, emit)
        tr.scorer = scorer
        for _ in range(sc_cfg.epochs):
            history.append(_stage(f"{rl}/train-scst", tr.scst_epoch))
        if out_dir is not None:
            save_checkpoint(out_dir / f"{kind}_scst.ckpt", model, sc_cfg, tr.state(), {"phase": "scst", "regime": rl},
                            corpus.vocab)
        val, _ = _stage(f"{rl}/evaluate", evaluate_model, model, corpus.val, corpus.vocab, scorer)
        test, _ = _stage(f"{rl}/evaluate", evaluate_model, model, corpus.test, corpus.vocab, scorer)
        history[-1]["val_cider"] = val.cider
        results[rl] = RegimeResult(rl, test, val, time.perf_counter() - t0)
    return results, history


def run_experiment(cfg: dict, seed: int, regimes=REGIMES, corpus: Corpus | None = None,
                   out_dir=None) -> ExperimentResult:
    """Run the requested regimes on one seed; rows come back in ``REGIMES`` order."""
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        corpus = _stage("data", synthetic_corpus, cfg["data"], seed)
    scorer = CiderD(corpus.train.refs)
    res = ExperimentResult(seed)
    log_rows: list = []
    for base, wanted in _family_regimes(regimes).items():
        results, history = run_family(base, corpus, cfg, seed, scorer, wanted, out_dir, log_rows)
        res.results.update(results)
        res.histories[base] = history
    res.results = {r: res.results[r] for r in REGIMES if r in res.results}
    if out_dir is not None:
        write_jsonl(out_dir / "train_log.jsonl", log_rows)
    return res


def write_report(res: ExperimentResult, out_dir) -> dict:
    """TSV table, per-regime MetricReport JSON and figures; returns the written paths."""
    from .plotting import plot_metric_bars, plot_rewards, plot_xe_curves

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "table.tsv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("regime",) + COLUMNS + ("val_C",))
        for r, rr in res.results.items():
            row = rr.test.row()
            w.writerow([r] + ["null" if v is None else f"{v:.1f}" for v in row] + [f"{100 * rr.val.cider:.1f}"])
    reports = out_dir / "reports.json"
    reports.write_text(json.dumps({r: {"test": rr.test.summary(), "val": rr.val.summary(),
                                       "table_row": res.row(r), "seconds": rr.seconds}
                                   for r, rr in res.results.items()}, indent=2) + "\n")
    figs = [plot_xe_curves(res.histories, out_dir / "xe_loss.png"),
            plot_rewards(res.histories, out_dir / "scst_reward.png"),
            plot_metric_bars({r: res.row(r) for r in res.results}, out_dir / "metrics.png")]
    return {"table": str(table), "reports": str(reports), "figures": [str(f) for f in figs]}
