"""Command-line entry point.

Every subcommand takes ``--config``, ``--seed`` and ``--out``; all outputs go
under ``--out`` together with ``manifest.json`` listing inputs, resolved
configuration and output checksums.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .io import (FormatError, load_checkpoint, load_features, read_jsonl, save_checkpoint, save_features,
                 write_jsonl)
from .text import Vocabulary, build_vocabulary, clean_text, decode, split_dataset

log = logging.getLogger("surginstruct")


# ---------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, args, cfg: dict, started: float, extra: dict | None = None) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": args.seed,
        "config_path": args.config,
        "config": cfg,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seconds": round(time.time() - started, 3),
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_records(path: Path, cfg: dict) -> list[dict]:
    """Read a split JSONL whose ``features`` fields point at FGRD files."""
    d = cfg["data"]
    shape = (d["n_regions"], d["feature_dim"])
    out = []
    for r in read_jsonl(path):
        fp = Path(r["features"])
        if not fp.is_absolute():
            fp = path.parent / fp
        out.append({**r, "features": load_features(fp, shape)})
    return out


def _caption_data(data_dir: Path, split: str, vocab: Vocabulary, cfg: dict):
    from .pipeline import to_caption_data
    recs = _load_records(data_dir / f"{split}.jsonl", cfg)
    return to_caption_data(recs, vocab, cfg["data"]["max_tokens"])


def _vocab_for(args, data_dir: Path) -> Vocabulary:
    path = Path(args.vocab) if getattr(args, "vocab", None) else data_dir / "vocab.txt"
    if not path.exists():
        raise SystemExit(f"vocabulary file {path} not found; run build-vocab first or pass --vocab")
    return Vocabulary.load(path)


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg, out):
    from .synthetic import synth_dataset
    d = cfg["data"]
    n = args.n if args.n is not None else d["n"]
    noise = args.noise if args.noise is not None else d["noise"]
    recs, scenes = synth_dataset(n, noise, args.seed, d["n_regions"], d["feature_dim"])
    (out / "features").mkdir(exist_ok=True)
    rows, latents = [], []
    for r, s in zip(recs, scenes):
        rel = f"features/{r['id']}.fgrd"
        save_features(out / rel, r["features"])
        rows.append({"id": r["id"], "caption": r["caption"], "features": rel})
        latents.append({"id": r["id"], **s.to_dict()})
    write_jsonl(out / "captions.jsonl", rows)
    write_jsonl(out / "latents.jsonl", latents)
    return {"n": n, "noise": noise}


def cmd_preprocess(args, cfg, out):
    src = Path(args.captions)
    rows = read_jsonl(src)
    d = cfg["data"]
    kept, dropped = [], 0
    for r in rows:
        toks = clean_text(r["caption"])
        if not toks:
            dropped += 1
            continue
        fp = Path(r["features"])
        if not fp.is_absolute():
            fp = (src.parent / fp).resolve()
        kept.append({"id": r["id"], "caption": r["caption"], "tokens": toks, "features": str(fp)})
    splits = split_dataset(kept, tuple(d["split"]), args.seed)
    counts = {"input": len(rows), "dropped_blank": dropped}
    for name, part in zip(("train", "val", "test"), splits):
        write_jsonl(out / f"{name}.jsonl", part)
        counts[name] = len(part)
    (out / "counts.json").write_text(json.dumps(counts, indent=2) + "\n")
    log.info("preprocess: %s", counts)
    return {"counts": counts}


def cmd_build_vocab(args, cfg, out):
    rows = read_jsonl(Path(args.train))
    vocab = build_vocabulary([r["tokens"] for r in rows], cfg["data"]["min_count"])
    vocab.save(out / "vocab.txt")
    (out / "vocab_counts.json").write_text(json.dumps(vocab.counts, indent=1, sort_keys=True) + "\n")
    return {"vocab_size": len(vocab)}


def _train(args, cfg, out, phase):
    from .pipeline import build_model, train_config
    from .training import Trainer

    data_dir = Path(args.data)
    vocab = _vocab_for(args, data_dir)
    train = _caption_data(data_dir, "train", vocab, cfg)
    val = _caption_data(data_dir, "val", vocab, cfg)
    tc = train_config(cfg, phase, len(train), args.seed)
    if args.epochs is not None:
        tc.epochs = args.epochs
    state = None
    if phase == "xe" and args.resume is None:
        model = build_model(args.model, cfg, len(vocab), args.seed)
    else:
        src = args.resume if args.resume is not None else args.checkpoint
        if src is None:
            raise SystemExit("train-scst needs --checkpoint (an XE checkpoint)")
        model, _, state, meta = load_checkpoint(src)
        if meta.get("vocab") is not None and meta["vocab"] != vocab.itos[4:]:
            raise SystemExit(f"checkpoint {src} was trained with a different vocabulary")
        if phase == "scst" and meta.get("phase") == "xe":
            state = None    # fresh optimiser and step count for the new phase
    log_rows = []
    tr = Trainer(model, train, tc, vocab, val, log_rows.append)
    if state is not None:
        tr.restore(state)
    start = tr.epoch
    for _ in range(start, tc.epochs):
        rec = tr.xe_epoch() if phase == "xe" else tr.scst_epoch()
        log.info("%s epoch %d: %s", phase, tr.epoch, rec)
        save_checkpoint(out / f"{phase}_epoch{tr.epoch:03d}.ckpt", model, tc, tr.state(),
                        {"phase": phase}, vocab)
    save_checkpoint(out / f"{phase}_last.ckpt", model, tc, tr.state(), {"phase": phase}, vocab)
    write_jsonl(out / "train_log.jsonl", log_rows)
    write_jsonl(out / "history.jsonl", tr.history)
    from .plotting import plot_rewards, plot_xe_curves
    (plot_xe_curves if phase == "xe" else plot_rewards)({args.model if phase == "xe" else "model": tr.history},
                                                        out / f"{phase}_curve.png")
    return {"epochs": tc.epochs, "steps": tr.step}


def cmd_train_xe(args, cfg, out):
    return _train(args, cfg, out, "xe")


def cmd_train_scst(args, cfg, out):
    return _train(args, cfg, out, "scst")


def cmd_generate(args, cfg, out):
    from .decoding import beam_decode, greedy_decode, sequence_logprob

    model, _, _, meta = load_checkpoint(args.checkpoint)
    vocab = Vocabulary(meta["vocab"])
    data_dir = Path(args.data)
    recs = _load_records(data_dir / f"{args.split}.jsonl", cfg)
    beam = args.beam if args.beam is not None else cfg["decode"]["beam"]
    alpha = args.alpha if args.alpha is not None else cfg["decode"]["alpha"]
    max_len = cfg["decode"]["max_len"]
    rows = []
    for r in recs:
        if beam == 0:
            ids = greedy_decode(model, r["features"], max_len)[0]
            score = sequence_logprob(model, r["features"], ids)
        else:
            ids, score = beam_decode(model, r["features"], beam, max_len, alpha, return_score=True)
        rows.append({"id": r["id"], "caption": " ".join(decode(ids, vocab)), "score": score})
    write_jsonl(out / "captions.jsonl", rows)
    return {"n": len(rows), "beam": beam, "alpha": alpha}


def cmd_evaluate(args, cfg, out):
    from .metrics import CiderD, evaluate

    hyps = {str(r["id"]): r for r in read_jsonl(Path(args.hyps))}
    refs = {str(r["id"]): r for r in read_jsonl(Path(args.refs))}
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise SystemExit(f"{len(missing)} reference ids have no hypothesis, e.g. {missing[:3]}")
    ids = sorted(refs)

    def toks(r):
        return r["tokens"] if "tokens" in r else clean_text(r["caption"])

    scorer = None
    if args.idf_refs:
        scorer = CiderD([toks(r) for r in read_jsonl(Path(args.idf_refs))])
    rep = evaluate([toks(hyps[i]) for i in ids], [toks(refs[i])[:cfg["data"]["max_tokens"]] for i in ids],
                   scorer, ids)
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    row = dict(zip(rep.COLUMNS, rep.row()))
    print("\t".join(rep.COLUMNS))
    print("\t".join("null" if row[c] is None else f"{row[c]:.1f}" for c in rep.COLUMNS))
    return {"table_row": row}


def cmd_gradcheck(args, cfg, out):
    from .gradcheck_suite import run_suite
    results = run_suite(seed=args.seed)
    (out / "gradcheck.json").write_text(json.dumps(results, indent=2) + "\n")
    worst = {k: v for k, v in results.items() if not v["passed"]}
    for name, r in results.items():
        print(f"{'PASS' if r['passed'] else 'FAIL'}\t{name}\t{r['rel_error']:.2e}\t<= {r['tol']:.0e}")
    if worst:
        raise SystemExit(f"{len(worst)} gradient checks failed")
    return {"checks": len(results)}


def cmd_experiment(args, cfg, out):
    from .experiment import REGIMES, run_experiment, write_report
    regimes = args.regimes.split(",") if args.regimes else cfg["experiment"].get("regimes", REGIMES)
    res = run_experiment(cfg, args.seed, regimes, out_dir=out)
    paths = write_report(res, out)
    print((out / "table.tsv").read_text(), end="")
    return {"report": paths}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON run configuration (desk defaults if omitted)")
    common.add_argument("--seed", type=int, default=0, help="seed for every random stream")
    common.add_argument("--out", required=True, help="output directory (created if missing)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="surginstruct", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic captioning task")
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--noise", type=float, default=None)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("preprocess", parents=[common], help="clean captions and split train/val/test")
    s.add_argument("--captions", required=True, help="JSONL with id, caption, features (FGRD path)")
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("build-vocab", parents=[common], help="vocabulary from the training split")
    s.add_argument("--train", required=True, help="train.jsonl written by preprocess")
    s.set_defaults(fn=cmd_build_vocab)

    for name, fn, help_ in (("train-xe", cmd_train_xe, "teacher-forced cross-entropy training"),
                            ("train-scst", cmd_train_scst, "self-critical CIDEr-D fine-tuning")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--data", required=True, help="directory written by preprocess")
        s.add_argument("--vocab", default=None, help="vocab.txt (default: <data>/vocab.txt)")
        s.add_argument("--model", choices=("transformer", "lstm", "lstm_attn"), default="transformer")
        s.add_argument("--epochs", type=int, default=None)
        s.add_argument("--checkpoint", default=None, help="starting checkpoint (required for train-scst)")
        s.add_argument("--resume", default=None, help="continue an interrupted run from its epoch checkpoint")
        s.set_defaults(fn=fn)

    s = sub.add_parser("generate", parents=[common], help="caption a split with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--beam", type=int, default=None, help="beam width; 0 means greedy")
    s.add_argument("--alpha", type=float, default=None, help="length-normalisation exponent")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="score hypotheses against references")
    s.add_argument("--hyps", required=True, help="JSONL with id and caption")
    s.add_argument("--refs", required=True, help="JSONL with id and caption or tokens")
    s.add_argument("--idf-refs", default=None, help="JSONL whose captions fix the CIDEr-D document frequencies")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every op and tiny models")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("experiment", parents=[common], help="six-regime comparison table and figures")
    s.add_argument("--regimes", default=None, help="comma-separated subset of the six regimes")
    s.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        extra = args.fn(args, cfg, out)
    except (FormatError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_manifest(out, args, cfg, started, extra)
    return 0


if __name__ == "__main__":
    sys.exit(main())
