"""Acceptance gate: one test and one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v`` (or execute this file).
"""
import json
import math
import random
import sys
import time
from collections import Counter

import numpy as np
import pytest

from enumeration import conditional, find_counterexample, random_instance, tv
from prefix_filters.cli import main as cli_main
from prefix_filters.decoder import RESIDUAL_FLOOR, DecoderConfig, TrieNode, Unsatisfiable, constrained_sample, update_trie
from prefix_filters.evalkit import bootstrap_ci, diff_significant, run_eval, top_k_share
from prefix_filters.filter_engine import (
    Contains,
    FilterSpec,
    RegexSearch,
    StrippedEmpty,
    SubstrCountAtLeast,
    eval_expr,
    first_trigger_prefix,
    parse_filter_set,
)
from prefix_filters.generator import TableModel, train_ngram
from prefix_filters.learner import LearningConfig, MinerSynthesizer, learn
from prefix_filters.oracle import BalancedBrackets, Counterexample, brute_force_sound
from prefix_filters.scenarios import bracket_corpus, write_demo


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return report


# --- 1 & 2: decoder exactness and zero leak ---------------------------------

N_DRAWS = 50_000


def _run(model, filters, max_len, seed):
    trie, rng, cfg = TrieNode(), random.Random(seed), DecoderConfig(max_len=max_len)
    return [constrained_sample(model, "", filters, trie, cfg, rng) for _ in range(N_DRAWS)]


@pytest.fixture(scope="module")
def exactness_runs():
    model = TableModel({"a": 0.5, "b": 0.3, "<eos>": 0.2})
    toy_filters = [FilterSpec("nob", Contains("b"))]
    start = time.perf_counter()
    toy = _run(model, toy_filters, 2, 0)
    toy_seconds = time.perf_counter() - start
    runs = [("toy", model, toy_filters, {"": 4 / 7, "a": 2 / 7, "aa": 1 / 7}, toy)]
    for seed in range(20):
        m, fs, max_len, p = random_instance(seed)
        runs.append((f"rand{seed}", m, fs, p, _run(m, fs, max_len, seed)))
    return toy_seconds, runs


def test_criterion_1_decoder_exactness(exactness_runs, verdict):
    toy_seconds, runs = exactness_runs
    tvs = {name: tv(p, Counter(o.text for o in outs)) for name, _, _, p, outs in runs}
    worst = max(tvs, key=tvs.get)
    ok = tvs["toy"] < 0.02 and toy_seconds < 10 and all(v < 0.02 for v in tvs.values())
    verdict(1, ok, f"toy TV={tvs['toy']:.4f} in {toy_seconds:.1f}s; worst of 20 random TV={tvs[worst]:.4f} ({worst})")


def test_criterion_2_zero_leak(exactness_runs, verdict):
    _, runs = exactness_runs
    leaks = checked = 0
    for _, model, filters, _, outs in runs:
        for o in outs:
            ids = o.token_ids
            boundaries = [len(model.vocab.decode(ids[:i])) for i in range(1, len(ids) + 1)] or [0]
            for f in filters:
                checked += 1
                leaks += first_trigger_prefix(f, o.text, boundaries) is not None
                leaks += eval_expr(f.expr, o.text)
    verdict(2, leaks == 0, f"{leaks} triggering prefixes in {checked} (output, filter) checks")


# --- 3: trie mass accounting -------------------------------------------------


def _random_tree(rng):
    v = rng.randint(2, 4)
    depth = rng.randint(1, 3)
    root = TrieNode()

    def expand(node, d):
        w = [rng.random() + 1e-3 for _ in range(v)]
        node.set_probs([x / sum(w) for x in w])
        if d < depth:
            for t in range(v):
                if rng.random() < 0.7:
                    expand(node.child(t), d + 1)

    expand(root, 1)
    return root


def _edges(node, path=()):
    for t in range(len(node.probs)):
        yield path + (t,)
    for t, c in node.children.items():
        if c.cached:
            yield from _edges(c, path + (t,))


def _nodes(node, path=()):
    yield node, path
    for t, c in node.children.items():
        if c.cached:
            yield from _nodes(c, path + (t,))


def _check_tree(root, direct):
    """Invariants after a ban sequence; ``direct`` holds the banned paths."""
    for n, path in _nodes(root):
        if sum(n.banned) > 1 + 1e-9:
            return "banned mass exceeds 1"
        for t in range(len(n.probs)):
            if path + (t,) in direct and n.banned[t] != n.probs[t]:
                return "directly banned edge keeps residual"
        for t, c in n.children.items():
            if not c.cached:
                continue
            if c.total_residual() < RESIDUAL_FLOOR and n.banned[t] != n.probs[t]:
                return "exhausted child did not ban its parent edge"
            if path + (t,) in direct or n.banned[t] == n.probs[t]:
                continue
            expected = n.probs[t] * (1 - c.total_residual())
            if abs(n.banned[t] - expected) > 1e-9:
                return "parent edge mass does not mirror child"
        # untouched siblings keep their model ratios
        clean = [t for t in range(len(n.probs)) if n.banned[t] == 0.0]
        res = n.residuals()
        for i in clean:
            for j in clean:
                if abs(res[i] * n.probs[j] - res[j] * n.probs[i]) > 1e-12:
                    return "sibling ratio changed"
    return None


def _unsat_instance(rng):
    letters = "abc"[: rng.randint(1, 3)]
    row = {c: rng.uniform(0.1, 1) for c in letters}
    row["<eos>"] = rng.uniform(0.1, 1)
    z = sum(row.values())
    model = TableModel({k: v / z for k, v in row.items()})
    pool = [StrippedEmpty()] + [Contains(c) for c in letters] + [Contains(a + b) for a in letters for b in letters]
    pool += [SubstrCountAtLeast(c, 2) for c in letters] + [RegexSearch(f"^{c}") for c in letters]
    filters = [FilterSpec(f"f{i}", e) for i, e in enumerate(rng.sample(pool, rng.randint(1, min(5, len(pool)))))]
    return model, filters, rng.randint(1, 4)


def test_criterion_3_trie_mass_accounting(verdict):
    rng = random.Random(0)
    problems = []
    n_seq = 0
    for _ in range(1000):
        root = _random_tree(rng)
        edges = list(_edges(root))
        direct = set()
        for path in rng.sample(edges, rng.randint(1, len(edges))):
            update_trie(root, path)
            direct.add(path)
            problem = _check_tree(root, direct)
            if problem:
                problems.append(problem)
                break
        n_seq += 1
    mismatches, n_empty, n_sat = 0, 0, 0
    for _ in range(300):
        model, filters, max_len = _unsat_instance(rng)
        empty = not conditional(model, filters, max_len)
        trie, drng = TrieNode(), random.Random(rng.random())
        cfg = DecoderConfig(max_len=max_len, max_attempts=10**6)
        raised = False
        try:
            for _ in range(30):
                constrained_sample(model, "", filters, trie, cfg, drng)
        except Unsatisfiable:
            raised = True
        mismatches += raised != empty
        n_empty += empty
        n_sat += not empty
    ok = not problems and mismatches == 0 and n_empty > 0 and n_sat > 0
    verdict(3, ok, f"{n_seq} ban sequences, {len(problems)} invariant violations; "
                   f"Unsatisfiable mismatches {mismatches}/300 ({n_empty} empty, {n_sat} satisfiable)")


# --- 4: filter-language fidelity --------------------------------------------

WHITESPACE = StrippedEmpty()
SOFTMAX = RegexSearch(r"(?m)^\s*(?:%[\w.]+(?::\d+)?\s*=\s*)?torch\.aten\.(?:softmax|log_softmax|logsumexp)\b")
CARBONYL = SubstrCountAtLeast("C(=O)", 3)
NAME_LEAK = RegexSearch(r"\b(?:named|called|identified as|referred to as)\s+[A-Z][a-z]+(?:\s+[A-Z][a-z]+){0,2}\b")

SUITES = {
    # sample-level: does some per-character prefix trigger
    "whitespace": (WHITESPACE, True, [
        " ", "\n", "\t", "   ", "\n\n  ", " function f() {}", "\n  return 1;", "\t}", "  \n}", "\r\nx", "", "     a",
    ], [
        "function f() {}", "return 1;", "x", "}\n", "a b c", "const x = 1;\n  y", "(", "0 ", "f\t", "é ",
    ]),
    "softmax": (SOFTMAX, True, [
        "%0 = torch.aten.softmax.int %arg0, %int1",
        "%1 = torch.aten.log_softmax.int %x, %d",
        "%r = torch.aten.logsumexp %x, %dims",
        "func.func @f() {\n  %3 = torch.aten.softmax.int %a\n}",
        "  torch.aten.softmax %x",
        "torch.aten.logsumexp",
        "%out.2 = torch.aten.softmax(%x)",
        "%5:2 = torch.aten.log_softmax %x",
        "\t%y = torch.aten.softmax",
        "module {\n%z=torch.aten.logsumexp %q\n}",
    ], [
        "%0 = torch.aten.add.Tensor %a, %b",
        "%0 = torch.aten._softmax %x",
        "%0 = torch.aten.sigmoid %x",
        "// torch.aten.softmax is not used",
        "%0 = torch.aten.exp %x",
        "%0 = torch.prim.softmax %x",
        "%0 = torch.aten.logsigmoid %x",
        "call torch.aten.softmax",
        "%0 = torch.aten.max %x",
        "torch_aten_softmax",
    ]),
    "carbonyl": (CARBONYL, True, [
        "CC(=O)CC(=O)CC(=O)C", "C(=O)C(=O)C(=O)", "OC(=O)C(=O)NC(=O)", "C(=O)" * 4, "CC(=O)OC(=O)C(=O)O",
        "C1CC(=O)C(=O)C(=O)C1", "NC(=O)C(=O)C(=O)N", "C(=O)C(=O)C(=O)CCCC", "CCCCC(=O)C(=O)C(=O)", "C(=O)NC(=O)NC(=O)N",
    ], [
        "C(=O)C(=O)", "CC(=O)C", "CCCC", "", "C(=O", "C(O)C(O)C(O)", "C(=N)C(=N)C(=N)", "CC(=O)CC(=O)", "C(C)C(C)C(=O)",
        "C=OC=OC=O",
    ]),
    "name_leak": (NAME_LEAK, True, [
        "the employee named John Smith", "a patient called Maria", "the suspect identified as Alan Turing",
        "an officer referred to as Jane Q Public", "She is named Anna.", "called  Bob", "named Li", "he was called Peter Parker Jr",
        "the client, identified as Omar, agreed", "a man referred to as Sam Lee",
    ], [
        "the employee named john smith", "named 42", "a patient called the hospital", "unnamed John", "renamed Mary",
        "the file is named report.txt", "identified as a risk", "referred to as the defendant", "John Smith was there",
        "nicknamed Joe",
    ]),
}


# a prefix such as "...softmax" of "...softmaxed" does trigger (the word
# boundary sits at the end of the prefix), so these only hold for whole texts
WHOLE_TEXT_NEGATIVES = {
    "softmax": ["%0 = torch.aten.softmaxed %x", "%0 = torch.aten.logsumexpx %x", "%0 = torch.aten.log_softmax_backward"],
    "name_leak": ["named Johnny5", "called McDonald"],
}


def test_criterion_4_filter_language_fidelity(verdict):
    failures = []
    for name, texts in WHOLE_TEXT_NEGATIVES.items():
        failures += [f"{name}: whole-text trigger on {t!r}" for t in texts if eval_expr(SUITES[name][0], t)]
    counts = {}
    for name, (expr, _, positives, negatives) in SUITES.items():
        counts[name] = (len(positives), len(negatives))
        for t in positives:
            if first_trigger_prefix(expr, t) is None:
                failures.append(f"{name}: missed {t!r}")
        for t in negatives:
            if first_trigger_prefix(expr, t) is not None:
                failures.append(f"{name}: false trigger on {t!r}")
    enough = all(p >= 10 and n >= 10 for p, n in counts.values())
    verdict(4, not failures and enough, f"{sum(p + n for p, n in counts.values())} strings over 4 filters; "
                                        f"failures: {failures[:3] or 'none'}")


# --- 5 & 6: learning gate and end-to-end ------------------------------------


def test_criterion_5_soundness_gate_post_hoc(tmp_path, verdict):
    cfg = write_demo(tmp_path / "demo")
    out = tmp_path / "run"
    code = cli_main(["learn", "--config", str(cfg), "--out", str(out), "--workers", "2"])
    fs = parse_filter_set((out / "filters.json").read_bytes())
    report = json.loads((out / "learn_report.json").read_text())
    eps = report["epsilon"]
    pools = {r["round"]: r["valid_texts"] for r in report["rounds"]}
    worst = 0.0
    for f in fs:
        pool = pools[f.round_learned] + report["reference_corpus"]
        rate = sum(first_trigger_prefix(f, t) is not None for t in pool) / len(pool)
        worst = max(worst, rate)
    ok = code == 0 and len(fs) > 0 and worst < eps
    verdict(5, ok, f"{len(fs)} filters re-verified from artifacts; worst mis_trigger_rate={worst:.4f} < {eps}")


def test_criterion_6_end_to_end(verdict):
    start = time.perf_counter()
    model = train_ngram(bracket_corpus(2000, 0), order=2)
    oracle = BalancedBrackets()
    dcfg = DecoderConfig(max_len=40, seed=7)
    lcfg = LearningConfig(budget=200, rounds=3, epsilon=0.01, decoder=dcfg)
    learned = learn(model, oracle, [f"learn {i}" for i in range(10)], MinerSynthesizer(), lcfg).filters
    eval_prompts = [f"eval {i}" for i in range(10)]
    base, base_rows = run_eval(model, None, eval_prompts, 100, oracle, dcfg, round_label="baseline")
    filt, filt_rows = run_eval(model, learned, eval_prompts, 100, oracle, dcfg, round_label="round 3")
    a = [1.0 if r.valid else 0.0 for r in base_rows]
    b = [1.0 if r.valid else 0.0 for r in filt_rows]
    gain = filt.validity_rate - base.validity_rate
    sig = diff_significant(a, b)
    share = top_k_share(filt.trigger_counts, 3)
    seconds = time.perf_counter() - start
    ok = gain >= 0.15 and sig and share >= 0.5 and seconds < 120
    verdict(6, ok, f"baseline {base.validity_rate:.3f} -> filtered {filt.validity_rate:.3f} "
                   f"(+{100 * gain:.1f}pp, significant={sig}), top-3 share {share:.2f}, "
                   f"{len(learned)} filters, {seconds:.1f}s")


# --- 7: statistics -----------------------------------------------------------


def test_criterion_7_bootstrap_vs_wald(verdict):
    z = 1.959963984540054
    hits = 0
    for seed in range(50):
        x = np.random.default_rng(seed).integers(0, 2, size=500)
        p = x.mean()
        half = z * math.sqrt(p * (1 - p) / x.size)
        lo, hi = bootstrap_ci(x, 10_000, 0.95, seed=seed)
        hits += abs(lo - (p - half)) <= 0.01 and abs(hi - (p + half)) <= 0.01
    verdict(7, hits >= 45, f"{hits}/50 seeds within +-0.01 of the Wald interval")


# --- 8: soundness checker ----------------------------------------------------


def test_criterion_8_soundness_checker(verdict):
    bb = BalancedBrackets()
    f_open = FilterSpec("open", Contains("("))
    got = brute_force_sound(f_open, bb, "()[]", 2)
    ref = find_counterexample(f_open, bb, "()[]", 2)
    dead = [FilterSpec("mismatch", Contains("(]")), FilterSpec("lead_close", RegexSearch(r"^[)\]]"))]
    dead_ok = all(brute_force_sound(f, bb, "()[]", 6) is None and find_counterexample(f, bb, "()[]", 6) is None
                  for f in dead)
    ok = got == ref == Counterexample("(", ")") and dead_ok
    verdict(8, ok, f"Contains('(') -> {got}; dead-prefix filters pass={dead_ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
