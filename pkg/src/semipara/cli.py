"""``semipara`` command line: toy data, vocab, prior, pretrain, finetune, generate, evaluate.

Exit codes: 0 success, 1 internal error, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import toy
from .config import ConfigError, RunConfig
from .data import (
    DataError,
    SemiSplit,
    Vocab,
    build_vocab,
    decode_ids,
    encode_text,
    load_mono,
    load_parallel_tsv,
    load_reference_tsv,
    read_lines,
    tokenize,
)
from .metrics import (
    MetricsReport,
    bounds_rows,
    evaluate_checkpoint,
    format_table,
    metrics_report,
    sentence_scores,
    wilcoxon_signed_rank,
)
from .plots import metric_bars, training_curves
from .prior import train_prior
from .trainer import (
    CheckpointError,
    JsonlLog,
    TrainingDiverged,
    krl_finetune,
    krl_pretrain,
    load_checkpoint,
    load_model,
    load_prior,
    save_checkpoint,
    save_prior,
)

log = logging.getLogger("semipara")


class MissingArtifact(ConfigError):
    pass


def _vocab(cfg: RunConfig) -> Vocab:
    path = cfg.path("vocab")
    if not path.exists():
        raise MissingArtifact(f"vocabulary {path} not found; run `semipara build-vocab` first")
    return Vocab.load(path)


def _max_len(cfg: RunConfig) -> int:
    return cfg["model"]["max_len"]


def _checkpoint(cfg: RunConfig, name: str, hint: str) -> Path:
    path = cfg.artifact(name)
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run `semipara {hint}` (cmd_{hint.replace('-', '_')}) first")
    return path


def _finetune_name(seed: int, prior: bool) -> str:
    return f"finetune-{seed}.pt" if prior else f"finetune-noprior-{seed}.pt"


def cmd_make_toy(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_pool = max(args.labelled, args.mono)
    pairs = toy.make_pairs(n_pool + args.val + args.test, args.seed, args.zipf)
    test, val = pairs[: args.test], pairs[args.test: args.test + args.val]
    pool = pairs[args.test + args.val:]
    toy.write_tsv(pool[: args.labelled], out / "train.tsv")
    toy.write_tsv(val, out / "val.tsv")
    toy.write_tsv(test, out / "test.tsv")
    (out / "mono.txt").write_text("".join(s + "\n" for s, _ in pool[: args.mono]), encoding="utf-8")
    print(f"wrote {args.labelled} labelled, {args.mono} unlabelled, {args.val} val, "
          f"{args.test} test sentences to {out}")


def cmd_build_vocab(cfg: RunConfig, args) -> None:
    cfg.require("train")
    corpus = []
    for line in read_lines(cfg.path("train")):
        corpus += line.split("\t")
    if cfg.path("mono").exists():
        corpus += read_lines(cfg.path("mono"))
    vocab = build_vocab(corpus, cfg["vocab"]["min_freq"], cfg["vocab"]["max_size"])
    path = cfg.path("vocab")
    path.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(path)
    print(f"vocab size {len(vocab)} -> {path}")


def cmd_train_prior(cfg: RunConfig, args) -> None:
    cfg.require("mono")
    vocab = _vocab(cfg)
    mono = load_mono(cfg.path("mono"), vocab, _max_len(cfg))
    for seed in cfg["seeds"]:
        pc = cfg.prior_config(len(vocab), seed)
        prior, history = train_prior(mono, pc)
        path = cfg.artifact(f"prior-{seed}.pt")
        save_prior(prior, pc, history, path)
        logger = JsonlLog(cfg.artifact(f"prior-{seed}.jsonl"))
        for epoch, ppl in enumerate(history):
            logger.write({"stage": "prior", "epoch": epoch, "heldout_ppl": ppl})
        print(f"seed {seed}: prior held-out ppl {min(history):.3f} -> {path}")


def _split(cfg: RunConfig, vocab: Vocab, unlabelled: bool) -> SemiSplit:
    cfg.require("train", "val", *(("mono",) if unlabelled else ()))
    n = _max_len(cfg)
    labelled = load_parallel_tsv(cfg.path("train"), vocab, n)
    val = load_parallel_tsv(cfg.path("val"), vocab, n)
    mono = load_mono(cfg.path("mono"), vocab, n) if unlabelled else []
    return SemiSplit(labelled=labelled, unlabelled=mono, val=val, test=[])


def cmd_pretrain(cfg: RunConfig, args) -> None:
    vocab = _vocab(cfg)
    split = _split(cfg, vocab, unlabelled=False)
    for seed in cfg["seeds"]:
        tc = cfg.train_config("pretrain", seed)
        logger = JsonlLog(cfg.artifact(f"pretrain-{seed}.jsonl"))
        meta = krl_pretrain(split, cfg.model_config(len(vocab)), tc, logger)
        path = cfg.artifact(f"pretrain-{seed}.pt")
        save_checkpoint(meta.params, meta, path)
        training_curves(logger.records, path.with_suffix(".png"), f"pretrain seed {seed}")
        print(f"seed {seed}: best epoch {meta.epoch} validation L2 {meta.validation_l2:.4f} -> {path}")


def cmd_finetune(cfg: RunConfig, args) -> None:
    vocab = _vocab(cfg)
    split = _split(cfg, vocab, unlabelled=True)
    for seed in cfg["seeds"]:
        tc = cfg.train_config("finetune", seed)
        _, init = load_checkpoint(_checkpoint(cfg, f"pretrain-{seed}.pt", "pretrain"))
        prior = None
        if tc.prior and tc.mode != "ddl":
            prior = load_prior(_checkpoint(cfg, f"prior-{seed}.pt", "train-prior"))
        path = cfg.artifact(_finetune_name(seed, tc.prior))
        logger = JsonlLog(path.with_suffix(".jsonl"))
        meta = krl_finetune(init, split, tc, prior=prior, logger=logger)
        save_checkpoint(meta.params, meta, path)
        training_curves(logger.records, path.with_suffix(".png"), f"finetune seed {seed}")
        print(f"seed {seed}: best epoch {meta.epoch} validation L2 {meta.validation_l2:.4f} -> {path}")


def _default_model_path(cfg: RunConfig) -> Path:
    seed = cfg["seeds"][0]
    for name in (_finetune_name(seed, True), _finetune_name(seed, False), f"pretrain-{seed}.pt"):
        if cfg.artifact(name).exists():
            return cfg.artifact(name)
    raise MissingArtifact(f"no checkpoint for seed {seed} in {cfg.path('checkpoint_dir')}; "
                          "run `semipara pretrain` (cmd_pretrain) first")


def cmd_generate(cfg: RunConfig, args) -> None:
    vocab = _vocab(cfg)
    path = Path(args.checkpoint) if args.checkpoint else _default_model_path(cfg)
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    model, _ = load_model(path)
    if not Path(args.input).exists():
        raise ConfigError(f"input file not found: {args.input}")
    sources = []
    for lineno, line in enumerate(read_lines(args.input), start=1):
        if not tokenize(line):
            raise DataError(f"{args.input}:{lineno}: empty line")
        sources.append(encode_text(vocab, line, _max_len(cfg)))
    bs = cfg["eval"]["batch_size"]
    lines = []
    for i in range(0, len(sources), bs):
        lines += [decode_ids(vocab, h) for h in model.greedy_decode(sources[i:i + bs])]
    text = "".join(t + "\n" for t in lines)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    k = len(reports)
    avg = lambda name: sum(getattr(r, name) for r in reports) / k  # noqa: E731
    return MetricsReport({n: sum(r.bleu[n] for r in reports) / k for n in range(1, 5)},
                         avg("self_bleu"), avg("i_bleu"), avg("rouge1"), avg("rouge2"),
                         avg("rougeL"), reports[0].n_examples)


def _write_reports(rows: dict[str, MetricsReport], out: Path, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {name: json.loads(rep.to_json()) for name, rep in rows.items()}
    if extra:
        payload.update(extra)
    (out / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n")
    table = format_table(rows)
    (out / "metrics.txt").write_text(table)
    (out / "metrics.tsv").write_text(format_table(rows, delimiter="\t"))
    metric_bars(rows, out / "metrics.png")
    sys.stdout.write(table)


def _read_scores(path: str) -> list[float]:
    if not Path(path).exists():
        raise ConfigError(f"score file not found: {path}")
    try:
        return [float(x) for x in read_lines(path) if x.strip()]
    except ValueError as err:
        raise DataError(f"{path}: {err}") from None


def cmd_evaluate(cfg: RunConfig, args) -> None:
    out = Path(args.out) if args.out else cfg.artifact("eval")
    alpha = cfg["eval"]["alpha"]
    if args.compare:
        a, b = (_read_scores(p) for p in args.compare)
        if len(a) != len(b):
            raise DataError(f"score files are misaligned: {len(a)} vs {len(b)} lines")
        p = wilcoxon_signed_rank(a, b)
        result = {"a": args.compare[0], "b": args.compare[1], "n": len(a),
                  "mean_a": sum(a) / len(a), "mean_b": sum(b) / len(b), "p_value": p}
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(json.dumps(result, indent=2) + "\n")
        print(f"wilcoxon n={len(a)} mean {result['mean_a']:.3f} vs {result['mean_b']:.3f} p={p:.3g}")
        return
    if args.candidates:
        if not args.references:
            raise ConfigError("--candidates needs --references")
        for p in (args.candidates, args.references, *([args.sources] if args.sources else [])):
            if not Path(p).exists():
                raise ConfigError(f"file not found: {p}")
        cands = [" ".join(tokenize(x)) for x in read_lines(args.candidates)]
        refs = [[" ".join(tokenize(r)) for r in line.split("\t")] for line in read_lines(args.references)]
        if len(cands) != len(refs):
            raise DataError(f"misaligned files: {len(cands)} candidates vs {len(refs)} references")
        srcs = cands
        if args.sources:
            srcs = [" ".join(tokenize(x)) for x in read_lines(args.sources)]
            if len(srcs) != len(cands):
                raise DataError(f"misaligned files: {len(cands)} candidates vs {len(srcs)} sources")
        rep = metrics_report(cands, refs, srcs, alpha)
        out.mkdir(parents=True, exist_ok=True)
        (out / "scores-candidates.txt").write_text(
            "".join(f"{s:.10g}\n" for s in sentence_scores(cands, refs)))
        _write_reports({Path(args.candidates).stem: rep}, out)
        return
    cfg.require("test")
    vocab = _vocab(cfg)
    rows_in = load_reference_tsv(cfg.path("test"), vocab, _max_len(cfg))
    sources = [decode_ids(vocab, s.ids) for s, _ in rows_in]
    refs = [r for _, r in rows_in]
    rows: dict[str, MetricsReport] = {}
    per_seed: dict[str, dict] = {}
    for stage in args.stage:
        reports = []
        for seed in cfg["seeds"]:
            name = (f"pretrain-{seed}.pt" if stage == "pretrain"
                    else _finetune_name(seed, stage == "finetune"))
            model, _ = load_model(_checkpoint(cfg, name, "pretrain" if stage == "pretrain" else "finetune"))
            rep, cands = evaluate_checkpoint(model, vocab, rows_in, alpha, cfg["eval"]["batch_size"])
            reports.append(rep)
            per_seed[f"{stage}-{seed}"] = json.loads(rep.to_json())
            out.mkdir(parents=True, exist_ok=True)
            (out / f"candidates-{stage}-{seed}.txt").write_text("".join(c + "\n" for c in cands))
            (out / f"scores-{stage}-{seed}.txt").write_text(
                "".join(f"{s:.10g}\n" for s in sentence_scores(cands, refs)))
        rows[stage] = mean_report(reports)
    upper, lower = bounds_rows(sources, refs, cfg["eval"]["bounds_seed"], alpha)
    rows["copy-source"], rows["random-select"] = upper, lower
    _write_reports(rows, out, {"per_seed": per_seed})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semipara", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    toy_p = sub.add_parser("make-toy", help="write the synthetic synonym-bijection corpus")
    toy_p.add_argument("--out", default="data")
    toy_p.add_argument("--labelled", type=int, default=2000)
    toy_p.add_argument("--mono", type=int, default=2000)
    toy_p.add_argument("--val", type=int, default=200)
    toy_p.add_argument("--test", type=int, default=400)
    toy_p.add_argument("--seed", type=int, default=7)
    toy_p.add_argument("--zipf", type=float, default=2.5)

    def with_config(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, allow_abbrev=False,
                           epilog="Any config key can be overridden with --section.key value.")
        p.add_argument("--config", "-c", help="YAML run config")
        p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        return p

    with_config("build-vocab", "build the vocabulary from train + mono text")
    with_config("train-prior", "train the language-model prior on mono text")
    with_config("pretrain", "supervised pre-training on labelled pairs")
    ft = with_config("finetune", "semi-supervised fine-tuning from the pretrained checkpoint")
    ft.add_argument("--no-prior", action="store_true", help="drop the KL term")
    gen = with_config("generate", "greedy paraphrases for one sentence per line")
    gen.add_argument("--input", "-i", required=True)
    gen.add_argument("--output", "-o")
    gen.add_argument("--checkpoint")
    ev = with_config("evaluate", "metrics table for checkpoints or a candidates file")
    ev.add_argument("--stage", nargs="+", default=["pretrain", "finetune"],
                    choices=["pretrain", "finetune", "finetune-noprior"])
    ev.add_argument("--candidates")
    ev.add_argument("--references", help="one line per example, tab-separated references")
    ev.add_argument("--sources", help="sources for self-BLEU (defaults to the candidates)")
    ev.add_argument("--compare", nargs=2, metavar=("A", "B"),
                    help="Wilcoxon signed-rank test between two per-example score files")
    ev.add_argument("--out")
    return parser


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "train-prior": cmd_train_prior,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "make-toy":
            if rest:
                parser.error(f"unrecognized arguments: {' '.join(rest)}")
            cmd_make_toy(args)
            return 0
        cfg = RunConfig.load(args.config, rest)
        if args.seed is not None:
            cfg = RunConfig({**cfg.data, "seeds": [args.seed]}, cfg.base_dir)
        if getattr(args, "no_prior", False):
            cfg = RunConfig({**cfg.data, "finetune": {**cfg["finetune"], "prior": False}},
                            cfg.base_dir)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, DataError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2 if not str(err).startswith("integrity:") else 1
    except TrainingDiverged as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
