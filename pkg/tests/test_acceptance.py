"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The two toy training fixtures (about 20 minutes on one CPU core in total) are
shared by several criteria, so run the file as a whole.
"""
import itertools
import math
import time

import pytest
import torch

from semipara import toy
from semipara.data import (
    BOS,
    EOS,
    PAD,
    ParallelPair,
    batch_iter,
    build_vocab,
    decode_ids,
    encode_text,
    make_semi_split,
    pad_batch,
)
from semipara.metrics import (
    corpus_bleu,
    i_bleu,
    rouge_scores,
    self_bleu,
    sentence_scores,
    wilcoxon_signed_rank,
)
from semipara.model import ModelConfig, SharedSeq2Seq, teacher_forced_logprob
from semipara.objectives import LATENT_BANNED_IDS, combined_loss, vsar_loss
from semipara.prior import PriorConfig, PriorLM, prior_token_logprobs, train_prior
from semipara.sampling import gumbel_noise, gumbel_topk_sample, straight_through
from semipara.trainer import JsonlLog, TrainConfig, decode_sources, krl_finetune, krl_pretrain

torch.set_num_threads(1)

SEEDS = (1000, 2000, 3000)
TOY = dict(n=2600, seed=7, zipf=2.5)
REDUCED = dict(layers=2, hidden=128, heads=4, dropout=0.1)


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


def toy_pairs():
    text = toy.make_pairs(TOY["n"], seed=TOY["seed"], zipf=TOY["zipf"])
    vocab = build_vocab([s for s, _ in text] + [t for _, t in text])
    return vocab, [ParallelPair(encode_text(vocab, s), encode_text(vocab, t)) for s, t in text]


def decode_test(model, vocab, test):
    hyp = decode_sources(model, [p.source for p in test])
    return [decode_ids(vocab, h) for h in hyp], [[decode_ids(vocab, p.target.ids)] for p in test]


# ---------------------------------------------------------------- fixtures


@pytest.fixture(scope="module")
def supervised():
    """2000 labelled toy pairs: DDL and single-direction runs for each seed."""
    vocab, pairs = toy_pairs()
    start = time.time()
    runs = {}
    for seed in SEEDS:
        split = make_semi_split(pairs, 2000, 2000, seed=seed, n_val=200, n_test=400)
        mc = ModelConfig(vocab_size=len(vocab), **REDUCED)
        for mode in ("ddl", "single"):
            log = JsonlLog()
            cfg = TrainConfig(lr=1e-3, batch_size=64, max_epochs=20, seed=seed, mode=mode)
            runs[seed, mode] = (krl_pretrain(split, mc, cfg, log), log, split)
    return vocab, runs, time.time() - start


class PseudoLabelAudit:
    """Probe run on every unlabelled step: records contract violations."""

    def __init__(self):
        self.steps = self.rows = 0
        self.violations: list[str] = []

    def __call__(self, source, pseudo):
        self.steps += 1
        self.rows += source.shape[0]
        if pseudo.shape != source.shape:
            self.violations.append(f"shape {tuple(pseudo.shape)} vs {tuple(source.shape)}")
        if not torch.equal((pseudo != PAD).sum(-1), (source != PAD).sum(-1)):
            self.violations.append(f"length mismatch at step {self.steps}")
        if pseudo.requires_grad or pseudo.grad_fn is not None or pseudo.is_floating_point():
            self.violations.append(f"pseudo-labels carry a graph at step {self.steps}")


@pytest.fixture(scope="module")
def semi():
    """200 labelled + 2000 unlabelled: DDL pretrain, prior, then KRL fine-tuning with the prior."""
    vocab, pairs = toy_pairs()
    start = time.time()
    audit = PseudoLabelAudit()
    runs = {}
    for seed in SEEDS:
        split = make_semi_split(pairs, 200, 2000, seed=seed, n_val=200, n_test=400)
        mc = ModelConfig(vocab_size=len(vocab), **REDUCED)
        pre_log = JsonlLog()
        pre = krl_pretrain(split, mc, TrainConfig(lr=3e-4, batch_size=32, max_epochs=200,
                                                  seed=seed, mode="ddl"), pre_log)
        prior, _ = train_prior(split.unlabelled, PriorConfig(vocab_size=len(vocab), epochs=10, seed=seed))
        probe_batch = torch.stack([torch.tensor(p.source.ids[:4]) for p in split.val[:8]])
        step0 = {}

        def on_start(model, batch=probe_batch, out=step0):
            was = model.training
            model.eval()
            with torch.no_grad():
                out["logits"] = model.decode_logits(model.encode(batch), batch)
            model.train(was)

        ft_log = JsonlLog()
        ft_cfg = TrainConfig(lr=1e-4, batch_size=32, unlabelled_batch_size=64, max_epochs=10,
                             seed=seed, mode="semi", prior=True)
        ft = krl_finetune(pre, split, ft_cfg, prior=prior, logger=ft_log, probe=audit, on_start=on_start)
        runs[seed] = dict(split=split, pre=pre, pre_log=pre_log, ft=ft, ft_log=ft_log, prior=prior,
                          probe_batch=probe_batch, step0=step0["logits"])
    return vocab, runs, audit, time.time() - start


# ---------------------------------------------------------------- 1


def _exact_log_marginal(model, prior, src, n, content):
    """log sum_t p(t) p(s|t) over every length-n latent sentence of content tokens."""
    seqs = torch.tensor([[BOS, *t, EOS] for t in itertools.product(content, repeat=n)])
    recon, _ = teacher_forced_logprob(model, seqs, src.expand(len(seqs), -1))
    lp = prior_token_logprobs(prior, seqs[:, :n])
    allowed = torch.tensor(content)
    lp = lp[..., allowed].log_softmax(-1)
    idx = (seqs[:, 1:n + 1] - content[0]).unsqueeze(-1)
    log_prior = lp.gather(-1, idx).squeeze(-1).sum(-1)
    return float(torch.logsumexp(log_prior + recon, 0))


def test_c1_elbo_bounds_exact_marginal(capsys):
    start = time.time()
    vocab_size = 4 + 6
    content = [i for i in range(vocab_size) if i not in LATENT_BANNED_IDS]
    assert len(content) == 6
    draws, worst, failures = 10_000, -math.inf, []
    for inst in range(20):
        torch.manual_seed(inst)
        model = SharedSeq2Seq(ModelConfig(vocab_size=vocab_size, layers=1, hidden=32, heads=2,
                                          dropout=0.0)).double().eval()
        prior = PriorLM(vocab_size, layers=1, hidden=16, heads=2, dropout=0.0).double()
        prior.trained = True
        prior.freeze()
        g = torch.Generator().manual_seed(10_000 + inst)
        n = 1 + inst % 3
        src = torch.tensor([[BOS, *torch.randint(4, vocab_size, (n,), generator=g).tolist(), EOS]])
        with torch.no_grad():
            exact = _exact_log_marginal(model, prior, src, n, content)
            out = vsar_loss(model, prior, src.expand(draws, -1), 1.0, len(content), g)
        elbo = out.extras["recon_seq"] - out.extras["kl_seq"]
        mean, se = float(elbo.mean()), float(elbo.std()) / math.sqrt(draws)
        worst = max(worst, (mean - exact) / max(se, 1e-12))
        if mean > exact + 3 * se:
            failures.append(f"instance {inst}: ELBO {mean:.5f} > log p(s) {exact:.5f} + 3*{se:.2g}")
    elapsed = time.time() - start
    ok = not failures and elapsed < 120
    report(capsys, "C1 ELBO oracle", ok,
           f"20 instances, max (ELBO - log p(s)) / se = {worst:.2f}, {elapsed:.0f}s"
           + (f"; {failures}" if failures else ""))


# ---------------------------------------------------------------- 2


def test_c2_gumbel_max_marginal(capsys):
    start = time.time()
    logits = torch.randn(10, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    draws = 200_000
    s = gumbel_topk_sample(logits.expand(draws, -1), 1.0, 10, torch.Generator().manual_seed(1))
    freq = torch.bincount(s.hard_ids, minlength=10).double() / draws
    err = float((freq - logits.softmax(-1)).abs().max())
    elapsed = time.time() - start
    report(capsys, "C2 Gumbel-max marginal", err < 0.01 and elapsed < 30,
           f"max |freq - softmax| = {err:.4f} over {draws} draws, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def test_c3_straight_through_gradient(capsys):
    start = time.time()
    worst = 0.0
    for tau in (0.1, 1.0, 10.0):
        for seed in range(3):
            g = torch.Generator().manual_seed(seed)
            logits = torch.randn(5, dtype=torch.float64, generator=g)
            noise = gumbel_noise((5,), g, torch.float64)
            probe = torch.randn(5, dtype=torch.float64, generator=g)
            x = logits.clone().requires_grad_(True)
            s = gumbel_topk_sample(x, tau, 5, noise=noise)
            (straight_through(s) * probe[s.candidate_ids]).sum().backward()

            def relaxed(v):
                t = gumbel_topk_sample(v, tau, 5, noise=noise)
                return float((t.weights * probe[t.candidate_ids]).sum())

            eps = 1e-6
            fd = torch.zeros(5, dtype=torch.float64)
            for i in range(5):
                e = torch.zeros(5, dtype=torch.float64)
                e[i] = eps
                fd[i] = (relaxed(logits + e) - relaxed(logits - e)) / (2 * eps)
            # relative error of the gradient vector; single components can be ~1e-10,
            # below the rounding noise of a central difference
            worst = max(worst, float((fd - x.grad).norm() / fd.norm()))
    elapsed = time.time() - start
    report(capsys, "C3 straight-through gradient", worst < 1e-3 and elapsed < 10,
           f"max relative error {worst:.2e} at tau in (0.1, 1, 10), {elapsed:.2f}s")


# ---------------------------------------------------------------- 4


def test_c4_ddl_toy_convergence(supervised, capsys):
    vocab, runs, elapsed = supervised
    bleus, ddl_l2, single_l2 = [], [], []
    for seed in SEEDS:
        meta, _, split = runs[seed, "ddl"]
        cands, refs = decode_test(meta.build_model(), vocab, split.test)
        bleus.append(corpus_bleu(cands, refs, 4))
        ddl_l2.append(meta.validation_l2)
        single_l2.append(runs[seed, "single"][0].validation_l2)
    bleu = sum(bleus) / 3
    a, b = sum(ddl_l2) / 3, sum(single_l2) / 3
    ok = bleu >= 90 and a > b and elapsed < 15 * 60
    report(capsys, "C4 DDL toy convergence", ok,
           f"vocab {len(vocab)}, BLEU-4 {bleu:.2f} (seeds {[round(x, 2) for x in bleus]}), "
           f"val L2 DDL {a:.4f} vs single {b:.4f}, {elapsed / 60:.1f} min")


def test_toy_exact_match(supervised, capsys):
    vocab, runs, _ = supervised
    rates = []
    for seed in SEEDS:
        meta, _, split = runs[seed, "ddl"]
        cands, refs = decode_test(meta.build_model(), vocab, split.test)
        rates.append(sum(c == r[0] for c, r in zip(cands, refs)) / len(cands))
    rate = sum(rates) / 3
    report(capsys, "toy exact-match", rate > 0.9, f"exact-match {rate:.3f} averaged over seeds")


# ---------------------------------------------------------------- 5


def test_c5_semi_supervised_direction(semi, capsys):
    vocab, runs, _, elapsed = semi
    semi_b, ddl_b, semi_s, ddl_s = [], [], [], []
    for seed in SEEDS:
        r = runs[seed]
        for meta, bleus, scores in ((r["ft"], semi_b, semi_s), (r["pre"], ddl_b, ddl_s)):
            cands, refs = decode_test(meta.build_model(), vocab, r["split"].test)
            bleus.append(corpus_bleu(cands, refs, 4))
            scores += sentence_scores(cands, refs)
    gain = sum(semi_b) / 3 - sum(ddl_b) / 3
    p = wilcoxon_signed_rank(semi_s, ddl_s)
    ok = gain >= 2.0 and p < 0.05 and elapsed < 30 * 60
    report(capsys, "C5 semi-supervised direction", ok,
           f"DDL+VSAR {sum(semi_b) / 3:.2f} vs DDL-only {sum(ddl_b) / 3:.2f} BLEU-4 "
           f"(gain {gain:+.2f}, need >= 2), Wilcoxon p = {p:.3g} over {len(semi_s)} sentences, "
           f"{elapsed / 60:.1f} min")


# ---------------------------------------------------------------- 6


def _selected_from_log(meta, log):
    vals = [(r["validation_l2"], r["epoch"]) for r in log.records if "validation_l2" in r]
    best = max(v for v, _ in vals)
    return (meta.validation_l2 == best == max(meta.history)
            and meta.epoch == next(e for v, e in vals if v == best)
            and [v for v, _ in vals] == meta.history)


def test_c6_krl_initialisation_contract(semi, supervised, capsys):
    _, runs, _, _ = semi
    bitwise, selection = [], []
    for seed in SEEDS:
        r = runs[seed]
        model = r["pre"].build_model().eval()
        with torch.no_grad():
            ref = model.decode_logits(model.encode(r["probe_batch"]), r["probe_batch"])
        bitwise.append(torch.equal(ref, r["step0"]))
        selection += [_selected_from_log(r["pre"], r["pre_log"]), _selected_from_log(r["ft"], r["ft_log"])]
    for meta, log, _ in supervised[1].values():
        selection.append(_selected_from_log(meta, log))
    ok = all(bitwise) and all(selection)
    report(capsys, "C6 KRL initialisation contract", ok,
           f"step-0 logits bitwise equal {sum(bitwise)}/{len(bitwise)}, "
           f"kept checkpoint = best logged validation L2 {sum(selection)}/{len(selection)}")


# ---------------------------------------------------------------- 7


def _brute_wilcoxon(a, b):
    d = [x - y for x, y in zip(a, b)]
    mag = [abs(x) for x in d]
    # Pratt: rank all |d| including zeros, then drop the zeros
    ranks = [1 + sum(m < x for m in mag) + (sum(m == x for m in mag) - 1) / 2 for x in mag]
    kept = [(r, x > 0) for r, x in zip(ranks, d) if x != 0]
    w = sum(r for r, pos in kept if pos)
    lo = hi = 0
    for signs in itertools.product((False, True), repeat=len(kept)):
        s = sum(r for (r, _), pos in zip(kept, signs) if pos)
        lo += s <= w + 1e-9
        hi += s >= w - 1e-9
    total = 2 ** len(kept)
    return min(1.0, 2 * min(lo, hi) / total)


def test_c7_metric_oracles(capsys):
    checks = {
        "identity BLEU-1..4 = 100": all(abs(corpus_bleu(["a b c d e"], [["a b c d e"]], n) - 100) < 1e-6
                                        for n in range(1, 5)),
        "BLEU-1 'a b c d' vs 'a b c e' = 75": abs(corpus_bleu(["a b c d"], [["a b c e"]], 1) - 75) < 1e-6,
        "smoothed zero 4-gram overlap > 0": 0 < corpus_bleu(["a b c d"], [["a b c e"]], 4) < 1,
        "self-BLEU of a copy = 100": abs(self_bleu(["x y z w"], ["x y z w"]) - 100) < 1e-6,
        "i-BLEU(100, 100, 0.9) = 80": abs(i_bleu(100, 100, 0.9) - 80) < 1e-6,
        "i-BLEU(28.16, 39.07, 0.9) = 21.437": abs(i_bleu(28.16, 39.07, 0.9) - 21.437) < 1e-6,
        "ROUGE 'a b c' vs 'a c' = 80/0/80": all(
            abs(x - y) < 1e-6 for x, y in zip(rouge_scores(["a b c"], [["a c"]]), (80.0, 0.0, 80.0))),
        "ROUGE identity = 100": all(abs(x - 100) < 1e-6 for x in rouge_scores(["p q r"], [["p q r"]])),
        "ROUGE disjoint = 0": rouge_scores(["a b"], [["c d"]]) == (0.0, 0.0, 0.0),
    }
    g = torch.Generator().manual_seed(0)
    mismatches = 0
    for trial in range(200):
        n = 6 + trial % 5
        a = torch.randint(0, 6, (n,), generator=g).tolist()
        b = torch.randint(0, 6, (n,), generator=g).tolist()
        if a == b:
            continue
        mismatches += abs(wilcoxon_signed_rank(a, b) - _brute_wilcoxon(a, b)) > 1e-12
    checks["Wilcoxon exact = sign enumeration (n 6..10, ties and zeros)"] = mismatches == 0
    failed = [k for k, v in checks.items() if not v]
    report(capsys, "C7 metric oracles", not failed,
           f"{len(checks) - len(failed)}/{len(checks)} oracle checks" + (f"; failed {failed}" if failed else ""))


# ---------------------------------------------------------------- 8


def test_c8_no_prior_ablation_mechanics(semi, capsys):
    _, runs, _, _ = semi
    r = runs[SEEDS[0]]
    with_prior = [x for x in r["ft_log"].records if x.get("kind") == "vsar"]
    kl_ok = bool(with_prior) and all(x["kl"] >= 0 for x in with_prior)
    log = JsonlLog()
    cfg = TrainConfig(lr=1e-4, batch_size=32, unlabelled_batch_size=64, max_epochs=3,
                      seed=SEEDS[0], mode="semi", prior=False)
    ft = krl_finetune(r["pre"], r["split"], cfg, prior=None, logger=log)
    no_prior = [x for x in log.records if x.get("kind") == "vsar"]
    recon_only = bool(no_prior) and all("kl" not in x and x["l1"] == -x["recon_nll"] == x["combined"]
                                        for x in no_prior)
    finite = all(math.isfinite(v) for rec in r["ft_log"].records + r["pre_log"].records + log.records
                 for v in rec.values() if isinstance(v, float))
    model = ft.build_model().eval()
    split = r["split"]
    pairs = next(batch_iter(split.labelled, 16, 0, 0))
    mono = pad_batch(split.unlabelled[:16])
    with torch.no_grad():
        both = combined_loss(model, None, pairs, mono, 1.0, 10, torch.Generator().manual_seed(0))
    exact = torch.equal(both.combined, both.l1 + both.l2) and torch.equal(both.l1, -both.recon_nll)
    ok = kl_ok and recon_only and finite and exact
    report(capsys, "C8 no-prior ablation mechanics", ok,
           f"with-prior kl >= 0 on {len(with_prior)} steps: {kl_ok}; no-prior l1 = -recon on "
           f"{len(no_prior)} steps: {recon_only}; combined = l1 + l2 exactly: {exact}; "
           f"all losses finite: {finite}")


# ---------------------------------------------------------------- 9


def test_c9_pseudo_label_contract(semi, capsys):
    _, runs, audit, _ = semi
    expected = sum(sum(1 for x in r["ft_log"].records if x.get("kind") == "vsar") for r in runs.values())
    ok = audit.steps == expected > 0 and not audit.violations
    report(capsys, "C9 pseudo-label contract", ok,
           f"{audit.steps} unlabelled steps / {audit.rows} rows audited, "
           f"{len(audit.violations)} violations" + (f": {audit.violations[:3]}" if audit.violations else ""))
