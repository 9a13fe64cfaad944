"""Acceptance criteria 1-11. Each test prints one ``criterion N: PASS|FAIL`` line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines appear in the
normal pytest output.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from trinet import network as nn
from trinet.cli import main as cli_main
from trinet.data import Dataset, LabeledRecord, smote, stratified_split
from trinet.edsim import SimConfig, compare, simulate
from trinet.metrics import (
    NoFeasibleThreshold, confusion, feature_distribution, rates, roc_auc, select_threshold_max_ppv,
)
from trinet.synth import SIGNAL_TOKENS, GeneratorConfig, generate
from trinet.text import pca, token_frequency_report, tokenize
from trinet.training import TrainConfig, predict_batch, train

from conftest import make_record
from oracles import brute_force_threshold, gradcheck, jacobi_pca, mann_whitney_auc, random_tiny_config

# Threshold selection floor used for the end-to-end benchmark: the low end of
# the published TriNet sensitivity range (0.13-0.25). The library default
# (0.05) is too permissive to land test TPR >= 0.10 reliably.
E2E_MIN_TPR = 0.15
E2E_SEED = 0


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return emit


def test_criterion_1_gradients(report):
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    worst, checked, skipped, max_params = 0.0, 0, 0, 0
    for _ in range(50):
        cfg = random_tiny_config(rng, max_params=500)
        max_params = max(max_params, cfg.n_params())
        w, c, s = gradcheck(cfg, rng)
        worst, checked, skipped = max(worst, w), checked + c, skipped + s
    elapsed = time.monotonic() - t0
    ok = worst < 1e-4 and elapsed < 60
    assert report(1, ok, f"50 configs (<= {max_params} params), {checked} coords, {skipped} kink-skipped, "
                         f"max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


def _smote_case(rng):
    n_min = int(rng.integers(2, 40))
    n_maj = n_min + int(rng.integers(0, 300))
    n_cont, width = int(rng.integers(1, 6)), 8
    n = n_min + n_maj
    numeric = np.c_[rng.normal(size=(n, n_cont)) * rng.uniform(0.1, 10), rng.integers(0, 2, (n, width - n_cont))]
    labels = np.r_[np.ones(n_min, int), np.zeros(n_maj, int)]
    perm = rng.permutation(n)
    return numeric[perm].astype(float), rng.integers(0, 30, (n, 6)), labels[perm], n_cont


def test_criterion_2_smote(report):
    rng = np.random.default_rng(7)
    failures, clamped = [], 0
    for case in range(100):
        numeric, tokens, labels, n_cont = _smote_case(rng)
        ratio = float(rng.choice([1.0, rng.uniform(0.05, 1.0)]))
        k = 15
        n_min, n_maj = int(labels.sum()), int((labels == 0).sum())
        num2, tok2, lab2, parents = smote(numeric, tokens, labels, n_cont, ratio, k, seed=case, return_parents=True)
        target = max(n_min, round(ratio * n_maj))
        if (lab2 == 1).sum() != target or (lab2 == 0).sum() != n_maj:
            failures.append(f"case {case}: counts")
            continue
        n = len(labels)
        base, nbr = numeric[parents[:, 0]], numeric[parents[:, 1]]
        d = nbr[:, :n_cont] - base[:, :n_cont]
        dd = np.sum(d * d, axis=1)
        u = np.divide(np.sum((num2[n:, :n_cont] - base[:, :n_cont]) * d, axis=1), dd,
                      out=np.zeros_like(dd), where=dd > 0)
        on_segment = np.allclose(num2[n:, :n_cont], base[:, :n_cont] + u[:, None] * d, atol=1e-9, rtol=0)
        if not (on_segment and (u >= -1e-9).all() and (u <= 1 + 1e-9).all() and (labels[parents] == 1).all()):
            failures.append(f"case {case}: geometry")
        if not np.array_equal(num2[n:, n_cont:], base[:, n_cont:]) or not np.array_equal(tok2[n:], tokens[parents[:, 0]]):
            failures.append(f"case {case}: copied columns")
        # neighbour must be within the k_eff nearest minority points
        k_eff = min(k, n_min - 1)
        if n_min - 1 < k:
            clamped += 1
        minority = np.flatnonzero(labels == 1)
        cont = numeric[minority, :n_cont]
        for b, nb in parents[:10]:
            dist = np.sum((cont - numeric[b, :n_cont]) ** 2, axis=1)
            dist[minority == b] = np.inf
            if np.sum((numeric[nb, :n_cont] - numeric[b, :n_cont]) ** 2) > np.sort(dist)[k_eff - 1] + 1e-9:
                failures.append(f"case {case}: neighbour outside k={k_eff}")
                break
    ok = not failures
    assert report(2, ok, f"100 datasets ({clamped} with k clamped below 15): "
                         + ("ratio, convex-combination and clamp checks hold" if ok else "; ".join(failures[:3])))


def test_criterion_3_split(report):
    rng = np.random.default_rng(3)
    worst_excess, failures = -1.0, []
    for case in range(100):
        n_pos, n_neg = int(rng.integers(3, 80)), int(rng.integers(10, 600))
        labels = rng.permutation(np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)])
        ds = Dataset("uti", tuple(LabeledRecord(make_record(age_months=float(i)), int(y))
                                  for i, y in enumerate(labels)))
        parts = stratified_split(ds, seed=case)
        ages = sorted(lr.record.age_months for p in parts for lr in p.records)
        if ages != [float(i) for i in range(len(ds))]:
            failures.append(f"case {case}: not a partition")
        g = n_pos / len(ds)
        for p in parts:
            dev = abs(p.class_counts()[0] / len(p) - g)
            worst_excess = max(worst_excess, dev - 1 / len(p))
    ok = not failures and worst_excess <= 1e-12
    assert report(3, ok, f"100 datasets: exact partitions, max(|dev| - 1/size) = {worst_excess:.4f} (<= 0)"
                  + ("" if not failures else "; " + "; ".join(failures[:3])))


def test_criterion_4_threshold(report):
    rng = np.random.default_rng(4)
    agree, infeasible, mismatches = 0, 0, []
    for case in range(200):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        levels = int(rng.integers(2, 50))
        probs = np.round(rng.beta(2, 2, n) * levels) / levels if case % 2 else rng.random(n)
        min_pos, min_tpr = int(rng.integers(1, 11)), float(rng.choice([0.0, 0.05, 0.15, 0.5]))
        oracle = brute_force_threshold(probs, labels.tolist(), min_pos, min_tpr)
        try:
            c = select_threshold_max_ppv(probs, labels, min_pos, min_tpr)
        except NoFeasibleThreshold:
            c = None
        if oracle is None and c is None:
            infeasible += 1
        elif oracle is not None and c is not None and (c.ppv, c.tpr) == oracle[:2] and c.threshold == oracle[2]:
            agree += 1
        else:
            mismatches.append(case)
    ok = not mismatches
    assert report(4, ok, f"200 instances (n <= 200): {agree} exact (PPV, TPR, threshold) matches, "
                         f"{infeasible} agreed infeasible, {len(mismatches)} mismatches")


def test_criterion_5_auc(report):
    rng = np.random.default_rng(5)
    worst, not_invariant = 0.0, 0
    for case in range(500):
        n = int(rng.integers(2, 120))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        probs = rng.integers(0, int(rng.integers(2, 15)), n) / 15.0 if case % 3 else rng.random(n)
        roc = roc_auc(probs, labels)
        worst = max(worst, abs(roc.auc - mann_whitney_auc(probs, labels)))
        for g in (np.exp, lambda x: 5 * x**3 - 2, lambda x: np.arctan(10 * x)):
            other = roc_auc(g(probs), labels)
            if (other.auc, other.fpr, other.tpr) != (roc.auc, roc.fpr, roc.tpr):
                not_invariant += 1
    ok = worst < 1e-9 and not_invariant == 0
    assert report(5, ok, f"500 instances with ties: max |AUC - Mann-Whitney| = {worst:.1e} (< 1e-9), "
                         f"{not_invariant} monotone-transform differences")


# -- end-to-end synthetic benchmark ---------------------------------------------


def _e2e(condition, null=False):
    cfg = GeneratorConfig(n=20000, condition=condition, prevalence=0.06, seed=E2E_SEED)
    if null:
        cfg = cfg.null_signal()
    ds = generate(cfg)
    tr, va, te = stratified_split(ds, seed=E2E_SEED)
    params, curve, spec, mcfg = train(tr, va, nn.ModelConfig(), TrainConfig.desk(seed=E2E_SEED))
    val_p = predict_batch(va, params, spec, mcfg)
    test_p = predict_batch(te, params, spec, mcfg)
    return dict(val_p=val_p, val_y=va.labels, test_p=test_p, test_y=te.labels, curve=curve)


@pytest.fixture(scope="module")
def e2e_runs():
    t0 = time.monotonic()
    runs = {c: _e2e(c) for c in ("pneumonia", "uti")}
    runs["null"] = _e2e("uti", null=True)
    runs["elapsed"] = time.monotonic() - t0
    return runs


def test_criterion_6_end_to_end(report, e2e_runs):
    parts, ok = [], True
    for cond in ("pneumonia", "uti"):
        r = e2e_runs[cond]
        choice = select_threshold_max_ppv(r["val_p"], r["val_y"], min_tpr=E2E_MIN_TPR)
        rt = rates(confusion(r["test_p"], r["test_y"], choice.threshold))
        good = rt.ppv is not None and rt.ppv >= 0.85 and rt.tpr >= 0.10
        ok &= good
        parts.append(f"{cond} test PPV {rt.ppv:.3f} TPR {rt.tpr:.3f} TNR {rt.tnr:.3f}")
    null_auc = roc_auc(e2e_runs["null"]["test_p"], e2e_runs["null"]["test_y"]).auc
    ok &= abs(null_auc - 0.5) <= 0.05
    elapsed = e2e_runs["elapsed"]
    ok &= elapsed <= 600
    desk = TrainConfig.desk()
    assert report(6, ok, "; ".join(parts) + f" (need PPV >= 0.85, TPR >= 0.10); null AUC {null_auc:.3f} "
                  f"(0.5 +/- 0.05); {desk.epochs} epochs at lr {desk.lr:g}; {elapsed:.0f}s (<= 600s)")


def test_learning_curve_sanity(e2e_runs, capsys):
    # train loss at epoch E+10 <= loss at epoch E for >= 80% of checkpoints
    fractions = []
    for cond in ("pneumonia", "uti"):
        loss = e2e_runs[cond]["curve"].train_loss
        pairs = [(loss[e], loss[e + 10]) for e in range(len(loss) - 10)]
        fractions.append(sum(b <= a for a, b in pairs) / len(pairs))
    with capsys.disabled():
        print(f"\nlearning curves: E+10 <= E for {fractions[0]:.0%} (pneumonia), {fractions[1]:.0%} (uti) of epochs")
    assert min(fractions) >= 0.8


@pytest.fixture(scope="module")
def default_data():
    return {c: generate(GeneratorConfig(n=20000, condition=c, seed=E2E_SEED)) for c in ("pneumonia", "uti")}


def test_criterion_7_tokens(report, default_data):
    missing, background = [], []
    for cond, ds in default_data.items():
        rows = token_frequency_report(ds)
        reported = {r.token for r in rows}
        planted = {t for phrase in SIGNAL_TOKENS[cond] for t in tokenize(phrase)}
        missing += sorted(planted - reported)
        background += sorted(reported - planted)
    ok = not missing and not background
    assert report(7, ok, f"planted tokens missing: {missing or 'none'}; "
                         f"background tokens reported: {background or 'none'}")


def test_criterion_8_features(report, default_data):
    temp = feature_distribution(default_data["uti"], "temp_c")
    weight = feature_distribution(default_data["pneumonia"], "weight_kg")
    ok = temp[1].median > temp[0].median and weight[1].median < weight[0].median
    assert report(8, ok, f"UTI temp median {temp[1].median:.1f} (pos) vs {temp[0].median:.1f} (neg); "
                         f"pneumonia weight median {weight[1].median:.1f} vs {weight[0].median:.1f} kg")


def test_criterion_9_simulator(report):
    base_cfg = SimConfig.for_condition("pneumonia")
    # (a) screening off: trinet run identical to baseline
    off = replace(base_cfg, screen_tpr=0.0, screen_fpr=0.0)
    b_res, b_eps = simulate(off, "baseline")
    t_res, t_eps = simulate(off, "trinet")
    a = b_eps == t_eps and replace(t_res, mode="baseline") == b_res
    # (b) screen-ordered unnecessary tests are exactly the screened-positive negatives;
    # with physician over-testing off that is every unnecessary test
    counts = []
    for cfg_b in (base_cfg, replace(base_cfg, false_suspicion_rate=0.0)):
        res_b, eps_b = simulate(cfg_b, "trinet")
        expected = sum(e.screened_positive and not e.truly_positive for e in eps_b)
        counts.append((res_b.directive_unnecessary_tests, res_b.unnecessary_tests, expected))
    b = counts[0][0] == counts[0][2] and counts[1][0] == counts[1][1] == counts[1][2]
    # (c) calibration
    p90 = simulate(SimConfig(), "baseline")[0].p90_los
    c = abs(p90 - 8.3) <= 0.5
    # (d) perfect screening bounds
    perfect = replace(base_cfg, screen_tpr=1.0, screen_fpr=0.0, false_suspicion_rate=0.0)
    cmp, eps_base, _ = compare(perfect)
    d = all(0.0 <= dl <= ((e.test_done - e.test_ordered) if e.tested else 0.0) + 1e-12
            for e, dl in zip(eps_base, cmp.los_deltas))
    ok = a and b and c and d
    assert report(9, ok, f"(a) identical={a}; (b) directive unnecessary {counts[0][0]} == {counts[0][2]} screened-positive negatives; "
                         f"(c) p90 LOS {p90:.2f} h (8.3 +/- 0.5); (d) deltas in [0, turnaround]={d}, "
                         f"mean LOS saved {cmp.mean_los_delta * 60:.1f} min")


def _cli_suite(workdir):
    """Run every subcommand in ``workdir`` with relative paths; return exit codes."""
    cwd = os.getcwd()
    os.chdir(workdir)
    try:
        codes = [
            cli_main(["generate", "--condition", "uti", "--n", "800", "--prevalence", "0.15", "--seed", "11",
                      "--out", "data.ndjson"]),
            cli_main(["train", "--dataset", "data.ndjson", "--condition", "uti", "--epochs", "2", "--lr", "1e-3",
                      "--seed", "11", "--checkpoint", "ck.json", "--curve", "curve.csv",
                      "--set", "model.embed_dim=4"]),
            cli_main(["eval", "--checkpoint", "ck.json", "--dataset", "data.ndjson", "--min-tpr", "0",
                      "--min-predicted-positives", "1", "--report", "report.json", "--roc", "roc.csv"]),
            cli_main(["predict", "--checkpoint", "ck.json", "--dataset", "data.ndjson", "--out", "pred.csv"]),
            cli_main(["tokens", "--dataset", "data.ndjson", "--condition", "uti", "--out", "tokens.csv"]),
            cli_main(["pca", "--checkpoint", "ck.json", "--out", "pca.csv"]),
            cli_main(["features", "--dataset", "data.ndjson", "--condition", "uti", "--out", "features.txt"]),
            cli_main(["simulate", "--compare", "--seed", "11", "--set", "horizon=300", "--out", "sim.json",
                      "--episodes", "episodes.csv", "--paired", "paired.csv"]),
        ]
    finally:
        os.chdir(cwd)
    return codes


def _manifest_without_clock(path):
    doc = json.loads(path.read_text())
    doc.pop("wall_clock_seconds")
    return doc


def test_criterion_10_determinism(report, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    codes = _cli_suite(a) + _cli_suite(b)
    files = sorted(p.name for p in a.iterdir())
    differing = []
    for name in files:
        if name.endswith(".manifest.json"):
            if _manifest_without_clock(a / name) != _manifest_without_clock(b / name):
                differing.append(name)
        elif (a / name).read_bytes() != (b / name).read_bytes():
            differing.append(name)
    n_outputs = sum(not f.endswith(".manifest.json") for f in files)
    ok = all(c == 0 for c in codes) and not differing and files == sorted(p.name for p in b.iterdir())
    assert report(10, ok, f"8 commands, {n_outputs} output files byte-identical across reruns "
                          f"(manifests compared without wall-clock time); differing: {differing or 'none'}")


def test_criterion_11_pca(report):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=(50, 8)) @ rng.normal(size=(8, 8))
        coords, _, _ = pca(x, 8)
        oracle, _ = jacobi_pca(x, 8)
        for j in range(8):
            sign = 1.0 if coords[:, j] @ oracle[:, j] >= 0 else -1.0
            worst = max(worst, float(np.max(np.abs(coords[:, j] - sign * oracle[:, j]))))
    ok = worst < 1e-6
    assert report(11, ok, f"20 random 50x8 matrices vs Jacobi oracle: max |diff| up to sign {worst:.1e} (< 1e-6)")
