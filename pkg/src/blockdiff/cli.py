"""Command-line entry point: ``blockdiff <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .corruption import schedule_stats
from .decoding import DecodeConfig, decode_ar, decode_blockwise, exact_match
from .gradcheck import run_suite
from .knowledge import (ArithmeticCorpusConfig, BlockMasking, ContextQuery, FullMasking, analyze,
                        gen_arithmetic, mask_regime_census)
from .model import load_model
from .trainer import ArithmeticData, DataConfig, run_curriculum
from .vocab import Vocab

log = logging.getLogger("blockdiff")


class CliError(Exception):
    pass


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------------- corpus


def write_corpus(path, vocab: Vocab, corpus) -> None:
    with open(path, "w") as fh:
        for seq in corpus:
            fh.write(vocab.decode(seq) + "\n")


def read_corpus(path, max_value: int | None = None) -> tuple[Vocab, list[np.ndarray]]:
    """One sequence of whitespace-separated symbols per line. The vocabulary
    covers numbers up to ``max_value`` (default: the largest one present)."""
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise CliError(f"{path}: empty corpus")
    if max_value is None:
        nums = [int(t) for ln in lines for t in ln if t.isdigit()]
        max_value = max(nums) if nums else 0
    vocab = Vocab.arithmetic(max_value)
    try:
        corpus = [np.asarray([vocab.id(t) for t in ln], dtype=np.int64) for ln in lines]
    except KeyError as e:
        raise CliError(f"{path}: {e}") from None
    return vocab, corpus


def cmd_gen_data(args) -> int:
    cc = ArithmeticCorpusConfig(args.lo, args.hi, args.min_clauses, args.max_clauses)
    corpus = gen_arithmetic(cc, args.n, seed=args.seed)
    write_corpus(args.out, cc.vocab, corpus)
    _emit({"out": str(args.out), "n_sequences": len(corpus), "vocab_size": len(cc.vocab)})
    return 0


# -------------------------------------------------------------------- train


def cmd_train(args) -> int:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        run, init = cfgmod.run_from_flat(cfgmod.parse_flat(manifest["config"]), manifest["seed"])
        if args.seed is not None and args.seed != manifest["seed"]:
            raise CliError("--seed conflicts with the manifest's seed")
    elif args.config:
        run, init = cfgmod.load_run(args.config, args.seed)
    else:
        raise CliError("train needs --config or --manifest")
    out = Path(args.out)
    if (out / "manifest.json").exists():
        raise CliError(f"{out} already holds a run; pick a fresh --out directory")
    model = None
    if init:
        model, _ = load_model(init)
        if model.config.vocab_size != run.model.vocab_size:
            raise CliError("initial checkpoint vocabulary does not match the data config")
    snapshot = cfgmod.dump_run(run, init)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(snapshot)
    result = run_curriculum(run, model=model, out_dir=out)
    files = [out / "run.cfg", out / "metrics.jsonl", out / "eval.jsonl", *result.stage_checkpoints]
    manifest = {
        "run_id": hashlib.sha256(f"{snapshot}|{run.seed}".encode()).hexdigest()[:16],
        "config": snapshot,
        "seed": run.seed,
        "checkpoints": [str(p) for p in result.stage_checkpoints],
        "metrics": str(out / "metrics.jsonl"),
        "hashes": {p.name: _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    last = result.metrics[-1]
    _emit({"run_id": manifest["run_id"], "steps": last.step, "final_loss": last.loss,
           "checkpoint": manifest["checkpoints"][-1]})
    return 0


# ------------------------------------------------------------------- decode


def _checkpoint_vocab(meta: dict) -> Vocab:
    if "vocab" not in meta:
        raise CliError("checkpoint carries no vocabulary")
    return Vocab(tuple(meta["vocab"]))


def cmd_decode(args) -> int:
    model, meta = load_model(args.checkpoint)
    vocab = _checkpoint_vocab(meta)
    text = Path(args.prompt_file).read_text() if args.prompt_file else args.prompt
    if text is None:
        raise CliError("decode needs --prompt or --prompt-file")
    prompt = vocab.encode(text)
    if not args.no_bos:
        prompt = [vocab.bos_id] + prompt
    eos = None if args.keep_eos else vocab.eos_id
    if args.ar:
        out = decode_ar(model.with_parametrization("shifted"), prompt, args.max_new_tokens, eos)
    else:
        visibility = args.visibility or ("block_causal" if model.config.parametrization == "unshifted" else "causal")
        dc = DecodeConfig(block_size=args.B, commits_per_step=args.k, steps_per_block=args.steps_per_block,
                          max_new_tokens=args.max_new_tokens, visibility=visibility, eos_id=eos)
        out = decode_blockwise(model, prompt, dc)
    gen = out[len(prompt):]
    print("ids:", " ".join(str(int(t)) for t in out))
    print("text:", vocab.decode(out))
    print("generated:", vocab.decode(gen))
    return 0


def cmd_eval(args) -> int:
    model, meta = load_model(args.checkpoint)
    vocab = _checkpoint_vocab(meta)
    numbers = [int(t) for t in vocab.tokens if t.isdigit()]
    dc = DataConfig(lo=args.lo, hi=args.hi, min_clauses=args.min_clauses, max_clauses=args.max_clauses,
                    n_train=1, n_eval=args.n_prompts, max_value=max(numbers))
    data = ArithmeticData(dc, args.seed)
    if data.vocab != vocab:
        raise CliError("checkpoint vocabulary does not match the evaluation corpus")
    visibility = args.visibility or ("block_causal" if model.config.parametrization == "unshifted" else "causal")
    for B in args.block_sizes:
        em = exact_match(model, data.prompts, data.targets, B, visibility, vocab.eos_id)
        _emit({"checkpoint": str(args.checkpoint), "block_size": B, "visibility": visibility,
               "n_prompts": len(data.prompts), "exact_match": em})
    return 0


# ------------------------------------------------------------------ analyze


def cmd_analyze(args) -> int:
    vocab, corpus = read_corpus(args.corpus, args.max_value)
    if args.mode == "query":
        if not args.query:
            raise CliError("--query is required in query mode")
        query = ContextQuery.parse(vocab, args.query, anchored=args.anchored)
        report = analyze(corpus, query, args.epsilon, len(vocab))
        if report is None:
            _emit({"query": args.query, "empty": True})
        else:
            _emit({"query": args.query, "empty": False, **report.to_record(vocab)})
        return 0
    mode = FullMasking(args.t) if args.mode == "full" else BlockMasking(args.B, args.u, not args.unclipped)
    rng = np.random.default_rng(args.seed)
    census = mask_regime_census(corpus, mode, args.samples, rng, vocab.mask_id, args.epsilon, len(vocab))
    _emit({"mode": args.mode, "masking": vars(mode), "epsilon": args.epsilon, "samples": args.samples,
           **census.to_record()})
    return 0


# --------------------------------------------------------- verification


def cmd_schedule_stats(args) -> int:
    for B in args.B:
        rng = np.random.default_rng([args.seed, B])
        rep = schedule_stats(B, args.clipped, args.samples, rng)
        rec = rep.to_record()
        if not args.clipped:
            rec["analytic"] = 1.0 / (B + 1)
        _emit(rec)
    return 0


def cmd_grad_check(args) -> int:
    worst = None
    for s in range(args.seed, args.seed + args.n_seeds):
        for r in run_suite(s):
            if args.per_check:
                _emit({"seed": s, "check": r.name, "rel_error": r.error})
            if worst is None or r.error > worst[1].error:
                worst = (s, r)
    ok = worst[1].error < args.tol
    print(f"max relative gradient error {worst[1].error:.3e} ({worst[1].name}, seed {worst[0]}): "
          f"{'ok' if ok else 'FAIL'} (tolerance {args.tol:g})")
    return 0 if ok else 1


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockdiff", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic arithmetic corpus")
    g.add_argument("--lo", type=int, default=0)
    g.add_argument("--hi", type=int, default=9)
    g.add_argument("--min-clauses", type=int, default=1)
    g.add_argument("--max-clauses", type=int, default=1)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run a curriculum from a config file or a manifest")
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="generate from a checkpoint")
    d.add_argument("checkpoint")
    d.add_argument("--prompt")
    d.add_argument("--prompt-file")
    d.add_argument("--B", type=int, default=1, help="block size")
    d.add_argument("--k", type=int, default=1, help="commits per denoising step")
    d.add_argument("--steps-per-block", type=int)
    d.add_argument("--max-new-tokens", type=int, default=8)
    d.add_argument("--visibility", choices=("block_causal", "bidirectional", "causal"))
    d.add_argument("--ar", action="store_true", help="greedy next-token decoding instead")
    d.add_argument("--no-bos", action="store_true")
    d.add_argument("--keep-eos", action="store_true", help="do not stop at end-of-sequence")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="held-out exact match of sums")
    e.add_argument("checkpoint")
    e.add_argument("--lo", type=int, default=0)
    e.add_argument("--hi", type=int, default=9)
    e.add_argument("--min-clauses", type=int, default=1)
    e.add_argument("--max-clauses", type=int, default=1)
    e.add_argument("--n-prompts", type=int, default=100)
    e.add_argument("--block-sizes", type=int, nargs="+", default=[1])
    e.add_argument("--visibility", choices=("block_causal", "bidirectional", "causal"))
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="candidate sets and regime census")
    a.add_argument("corpus")
    a.add_argument("--mode", choices=("query", "full", "block"), default="query")
    a.add_argument("--query", help="pattern with '▁' for masked slots, e.g. 'a = 1 , b = ▁ , a + b = ▁'")
    a.add_argument("--anchored", action="store_true", help="match whole sequences only")
    a.add_argument("--epsilon", type=float, default=0.1)
    a.add_argument("--max-value", type=int)
    a.add_argument("--t", type=float, default=0.8)
    a.add_argument("--B", type=int, default=1)
    a.add_argument("--u", type=float, default=0.5)
    a.add_argument("--unclipped", action="store_true")
    a.add_argument("--samples", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("schedule-stats", help="Monte-Carlo statistics of block corruption")
    s.add_argument("--B", type=int, nargs="+", default=[2, 4, 8])
    s.add_argument("--samples", type=int, default=1_000_000)
    s.add_argument("--clipped", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_schedule_stats)

    c = sub.add_parser("grad-check", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-seeds", type=int, default=1)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--per-check", action="store_true", help="one record per check")
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, cfgmod.ConfigError, ValueError, KeyError, OSError) as e:
        print(f"blockdiff {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
