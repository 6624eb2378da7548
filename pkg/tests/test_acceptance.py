"""End-to-end acceptance criteria, one test each.

Every test records a PASS/FAIL line (printed in the pytest terminal summary)
before asserting, so a run always shows the status of all nine.
"""
import time
from dataclasses import replace

import numpy as np

import oracles
from labelhalluc import cli, harness
from labelhalluc import diffcore as dc
from labelhalluc.data import AugmentationConfig, augment_batch, sample_episode
from labelhalluc.models import forward_logits, init_model
from labelhalluc.pipeline import FinetuneConfig, FitConfig, finetune, fit_support_classifier, pseudo_label

CONFIGS = 10


def _max_rel_error(loss_fn, params, eps=1e-6):
    dc.zero_grad(params)
    loss_fn().backward()
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    dc.zero_grad(params)
    worst = 0.0
    for a, p in zip(analytic, params):
        numeric = oracles.finite_difference(lambda: float(loss_fn().value), p.value, eps)
        worst = max(worst, oracles.rel_error(a, numeric))
    return worst


def _op_cases(rng):
    n, d, c = (int(v) for v in rng.integers(2, 6, size=3))
    a, b = dc.parameter(rng.normal(size=(n, d))), dc.parameter(rng.normal(size=(d, c)))
    y, bias = dc.parameter(rng.normal(size=(n, c))), dc.parameter(rng.normal(size=c))
    away = rng.normal(size=(n, c))
    x = dc.parameter(np.where(np.abs(away) < 1e-2, 0.5, away))  # keep relu off its kink
    r = dc.constant(rng.normal(size=(n, c)))
    labels, teacher = rng.integers(0, c, size=n), rng.normal(size=(n, c))
    temperature = float(rng.uniform(0.5, 5.0))
    proj = lambda node: dc.sum_all(dc.mul(node, r))
    return {
        "matmul": (lambda: proj(a @ b), [a, b]),
        "add": (lambda: proj(y + bias), [y, bias]),
        "mul": (lambda: proj(dc.mul(y, y) * 0.7), [y]),
        "sub/neg": (lambda: proj(y - (-x)), [y, x]),
        "relu": (lambda: proj(dc.relu(x)), [x]),
        "softmax": (lambda: proj(dc.softmax(y)), [y]),
        "log_softmax": (lambda: proj(dc.log_softmax(y)), [y]),
        "sum_all": (lambda: dc.sum_all(dc.mul(y, y)), [y]),
        "mean_all": (lambda: dc.mean_all(dc.mul(y, r)), [y]),
        "cross_entropy": (lambda: dc.cross_entropy(y, labels), [y]),
        "kd_loss": (lambda: dc.kd_loss(y, teacher, temperature), [y]),
    }


def _composed_case(seed):
    """Mixed base-KD + support-CE objective through a full MLP, or None near a relu kink."""
    rng = np.random.default_rng(seed)
    d_in, hidden, emb, way = 5, int(rng.integers(3, 7)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    backbone, head = init_model(d_in, [hidden], emb, way, seed=seed)
    xb = rng.normal(size=(6, d_in))
    teacher = rng.normal(size=(6, way)) * 2
    xs = augment_batch(rng.normal(size=(4, d_in)), AugmentationConfig(0.1, 0.2, 0.5), rng)
    ys = rng.integers(0, way, size=4)
    lam_kl, lam_ce, temperature = rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0), rng.uniform(1.0, 6.0)
    for h in (xb, xs):
        for w, b in backbone.layers:
            pre = h @ w.value + b.value
            if np.abs(pre).min() < 1e-4:
                return None
            h = np.maximum(pre, 0.0)

    def loss():
        kd = dc.kd_loss(forward_logits(backbone, head, xb), teacher, temperature)
        ce = dc.cross_entropy(forward_logits(backbone, head, xs), ys)
        return kd * lam_kl + ce * lam_ce

    return loss, backbone.params() + head.params()


def test_criterion_1_gradient_integrity(report):
    start = time.perf_counter()
    worst = {}
    for k in range(CONFIGS):
        for name, (fn, params) in _op_cases(np.random.default_rng(1000 + k)).items():
            worst[name] = max(worst.get(name, 0.0), _max_rel_error(fn, params))
    seed, done = 0, 0
    while done < CONFIGS:
        case = _composed_case(seed)
        seed += 1
        if case is None:
            continue
        worst["composed"] = max(worst.get("composed", 0.0), _max_rel_error(*case))
        done += 1
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 10
    report(1, ok, f"{len(worst)} checks x {CONFIGS} configs, max rel err {worst[top]:.2e} "
                  f"({top}), {elapsed:.1f}s")
    assert ok, worst


def test_criterion_2_support_classifier_oracle(report, benchmark):
    start = time.perf_counter()
    _, novel, _ = benchmark
    identity, _ = init_model(novel.dim, [], None, 1, seed=0)
    gaps = []
    for k in range(5):
        rng = np.random.default_rng(200 + k)
        support = novel.subset(rng.choice(len(novel), size=10, replace=False))
        z, y, way = support.features, support.local_labels(), len(support.class_set)
        head = fit_support_classifier(identity, support, FitConfig())
        w, b, _ = oracles.logreg_gd(z, y, way, FitConfig().l2)
        fit_loss = oracles.logreg_loss(head.weight.value, head.bias.value, z, y, FitConfig().l2)
        gaps.append(abs(fit_loss - oracles.logreg_loss(w, b, z, y, FitConfig().l2)))
    elapsed = time.perf_counter() - start
    ok = max(gaps) < 1e-3 and elapsed < 30
    report(2, ok, f"max |fit - oracle| loss gap {max(gaps):.2e} over 5 supports, {elapsed:.1f}s")
    assert ok, gaps


def test_criterion_3_degenerate_reduction(report, benchmark, pretrained):
    start = time.perf_counter()
    base, novel, split = benchmark
    backbone, _ = pretrained
    ep = sample_episode(novel, 5, 5, 15, seed=harness.episode_seeds(0, 0)[0], split=split)
    head = fit_support_classifier(backbone, ep.support)
    only = harness.StrategyConfig(strategy="finetune_only").effective_finetune()
    soft = harness.StrategyConfig(strategy="soft_halluc",
                                  finetune=FinetuneConfig(lambda_kl=0.0)).effective_finetune()
    ref = finetune(backbone, head, ep.support, base, None, only)
    no_base = finetune(backbone, head, ep.support, base, None, replace(soft, use_base=False))
    # stronger variant: base batches drawn and distilled, but weighted by zero
    store = pseudo_label(base, backbone, head, ep.classes)
    zero_kl = finetune(backbone, head, ep.support, base, store, soft)
    gap = lambda run: max(abs(a["total"] - b["total"]) for a, b in zip(ref.log, run.log))
    gaps = (gap(no_base), gap(zero_kl))
    elapsed = time.perf_counter() - start
    ok = len(ref.log) == 300 and max(gaps) <= 1e-10 and elapsed < 30
    report(3, ok, f"300-step loss gap {gaps[0]:.1e} (base off), {gaps[1]:.1e} (base on, "
                  f"lambda_kl=0), {elapsed:.1f}s")
    assert ok, gaps


def _line(summary):
    return f"{100 * summary.mean:.2f}±{100 * summary.ci95:.2f}"


def test_criterion_4_strategy_ordering_5shot(report, benchmark, pretrained):
    start = time.perf_counter()
    base, novel, split = benchmark
    backbone, _ = pretrained
    master = harness.StrategyConfig(shot=5, episodes=50)
    runs = {s: harness.run_strategy(backbone, novel, base, replace(master, strategy=s), split=split)
            for s in ("finetune_only", "hard_halluc", "soft_halluc")}
    soft, only, hard = runs["soft_halluc"], runs["finetune_only"], runs["hard_halluc"]
    elapsed = time.perf_counter() - start
    ok = (soft.mean > only.mean and not soft.overlaps(only) and soft.mean >= hard.mean
          and elapsed < 15 * 60)
    report(4, ok, f"soft {_line(soft)} vs finetune_only {_line(only)} vs hard {_line(hard)} "
                  f"(need soft > finetune_only, CIs disjoint; soft >= hard), {elapsed:.0f}s")
    assert ok


def test_criterion_5_gating_ordering_1shot(report, benchmark, pretrained):
    start = time.perf_counter()
    base, novel, split = benchmark
    backbone, _ = pretrained
    master = harness.StrategyConfig(shot=1, episodes=50)
    rows = {"TT": None, "TF": None, "FT": None}
    for label in rows:
        rows[label] = harness.run_strategy(backbone, novel, base,
                                           replace(master, mask=harness.MASKS[label]), split=split)
    rows["FF"] = harness.run_strategy(backbone, novel, base,
                                      replace(master, strategy="finetune_only"), split=split)
    tt, tf, ft, ff = (rows[k] for k in ("TT", "TF", "FT", "FF"))
    elapsed = time.perf_counter() - start
    chain = tt.mean >= tf.mean >= ft.mean >= ff.mean
    ok = chain and tt.mean > ff.mean and not tt.overlaps(ff) and elapsed < 15 * 60
    report(5, ok, "TT {} TF {} FT {} FF {} (need chain {}, TT/FF CIs disjoint {}), {:.0f}s".format(
        _line(tt), _line(tf), _line(ft), _line(ff), chain, not tt.overlaps(ff), elapsed))
    assert ok


def test_criterion_6_teacher_snapshot_equivalence(report, benchmark, pretrained):
    start = time.perf_counter()
    base, novel, split = benchmark
    backbone, _ = pretrained
    cfg = FinetuneConfig()
    worst = 0.0
    for i in range(3):
        sample_seed, ft_seed = harness.episode_seeds(0, i)
        ep = sample_episode(novel, 5, 5, 15, seed=sample_seed, split=split)
        head = fit_support_classifier(backbone, ep.support)
        store = pseudo_label(base, backbone, head, ep.classes, source_episode=i)
        ep_cfg = replace(cfg, seed=ft_seed)
        a = finetune(backbone, head, ep.support, base, store, ep_cfg)
        b = finetune(backbone, head, ep.support, base, None, replace(ep_cfg, on_the_fly=True))
        for p, q in zip(a.backbone.params() + a.head.params(), b.backbone.params() + b.head.params()):
            worst = max(worst, float(np.abs(p.value - q.value).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 120
    report(6, ok, f"max |param diff| {worst:.1e} over 3 episodes, {elapsed:.1f}s")
    assert ok


def test_criterion_7_protocol_contracts(report, benchmark):
    start = time.perf_counter()
    base, novel, split = benchmark
    violations = []
    if set(base.class_set) & set(novel.class_set) or split.base_classes & split.novel_classes:
        violations.append("base and novel classes overlap")
    for i in range(1000):
        way, shot, q = 5, (1, 5)[i % 2], 15
        ep = sample_episode(novel, way, shot, q, seed=harness.episode_seeds(7, i)[0], split=split)
        s_lab, q_lab = ep.support.labels, ep.query.labels
        problems = []
        if np.intersect1d(ep.support_index, ep.query_index).size:
            problems.append("support/query share examples")
        if not np.array_equal(novel.labels[ep.support_index], s_lab) or \
                not np.array_equal(novel.labels[ep.query_index], q_lab):
            problems.append("labels do not match source rows")
        classes = set(s_lab.tolist())
        if len(classes) != way or set(q_lab.tolist()) != classes:
            problems.append("class sets differ")
        if any(np.sum(s_lab == c) != shot or np.sum(q_lab == c) != q for c in classes):
            problems.append("per-class counts off")
        if classes & set(base.class_set):
            problems.append("base class in episode")
        violations += [f"episode {i}: {p}" for p in problems]
    elapsed = time.perf_counter() - start
    ok = not violations and elapsed < 10
    report(7, ok, f"1000 episodes, {len(violations)} violations, {elapsed:.1f}s")
    assert ok, violations[:5]


def test_criterion_8_statistics(report):
    s = harness.summarize([0.8, 0.9, 1.0])
    ok = abs(s.mean - 0.9) <= 1e-4 and abs(s.ci95 - 0.1132) <= 1e-4
    report(8, ok, f"mean {s.mean:.4f}, ci95 {s.ci95:.4f}")
    assert ok


def test_criterion_9_cli_determinism(report, tmp_path):
    start = time.perf_counter()
    cfg = cli.parse_config({"output_dir": str(tmp_path / "run")})
    cli.cmd_generate(cfg)
    cli.cmd_pretrain(cfg)
    path = tmp_path / "run" / "results.csv"
    cli.cmd_run(cfg, workers=1)
    first = path.read_bytes()
    cli.cmd_run(cfg, workers=2)
    second = path.read_bytes()
    elapsed = time.perf_counter() - start
    rows = first.count(b"\n") - 1
    ok = first == second and rows == 8 * 50 and elapsed < 30 * 60
    report(9, ok, f"results.csv ({rows} rows) identical across --workers 1/2: {first == second}, "
                  f"{elapsed:.0f}s")
    assert ok
