import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enumeration import conditional, tv
from prefix_filters.decoder import (
    RESIDUAL_FLOOR,
    AttemptsExhausted,
    DecoderConfig,
    PathNotFound,
    TrieNode,
    Unsatisfiable,
    ZeroResidual,
    constrained_sample,
    fallback_reject_sample,
    residual_distribution,
    update_trie,
)
from prefix_filters.filter_engine import Contains, FilterSet, FilterSpec, StrippedEmpty
from prefix_filters.generator import CapabilityMissing, Continuation, RemoteModel, TableModel

A, B, EOS = 0, 1, 2


def abe():
    return TableModel({"a": 0.5, "b": 0.3, "<eos>": 0.2})


def draw(model, filters, n, max_len=2, seed=0, trie=None):
    trie = trie if trie is not None else TrieNode()
    rng = random.Random(seed)
    cfg = DecoderConfig(max_len=max_len)
    return Counter(constrained_sample(model, "", filters, trie, cfg, rng).text for _ in range(n)), trie


def test_toy_conditional():
    counts, _ = draw(abe(), [FilterSpec("nob", Contains("b"))], 20_000)
    assert tv({"": 4 / 7, "a": 2 / 7, "aa": 1 / 7}, counts) < 0.02


def test_reference_enumeration_matches_hand_value():
    p = conditional(abe(), [FilterSpec("nob", Contains("b"))], 2)
    assert p == pytest.approx({"": 4 / 7, "a": 2 / 7, "aa": 1 / 7})


def test_empty_filters_is_unconstrained():
    m = abe()
    counts, _ = draw(m, FilterSet(()), 20_000)
    assert tv(conditional(m, [], 2), counts) < 0.02


def test_unsatisfiable():
    fs = [FilterSpec("a", Contains("a")), FilterSpec("b", Contains("b")), FilterSpec("ws", StrippedEmpty())]
    trie = TrieNode()
    with pytest.raises(Unsatisfiable):
        for _ in range(20):
            constrained_sample(abe(), "", fs, trie, DecoderConfig(max_len=2), random.Random(0))
    assert trie.total_residual() < RESIDUAL_FLOOR


def test_both_filters_checked():
    fs = [FilterSpec("x", Contains("aa")), FilterSpec("y", Contains("b"))]
    counts, _ = draw(abe(), fs, 2000)
    assert set(counts) <= {"", "a"}


def test_trie_reuse_saves_model_calls():
    m, trie = abe(), TrieNode()
    f = [FilterSpec("nob", Contains("b"))]
    rng = random.Random(1)
    first = constrained_sample(m, "", f, trie, DecoderConfig(max_len=2), rng)
    calls = [constrained_sample(m, "", f, trie, DecoderConfig(max_len=2), rng).model_calls for _ in range(200)]
    assert first.model_calls >= 1
    assert sum(calls) <= 3  # the whole depth-2 trie has three nodes reachable without "b"


def test_trigger_attribution_first_filter_in_order():
    fs = [FilterSpec("first", Contains("b")), FilterSpec("second", Contains("b"))]
    trie, rng = TrieNode(), random.Random(0)
    events = []
    for _ in range(300):
        events += constrained_sample(abe(), "", fs, trie, DecoderConfig(max_len=2), rng).trigger_events
    assert events and {fid for fid, _ in events} == {"first"}


def expanded_root():
    t = TrieNode()
    t.set_probs([0.5, 0.3, 0.2])
    return t


def test_update_trie_first_token():
    t = expanded_root()
    update_trie(t, [B])
    assert t.residuals() == pytest.approx([0.5, 0.0, 0.2])
    assert residual_distribution(t).probs.tolist() == pytest.approx([5 / 7, 0, 2 / 7])


def test_update_trie_exhaustion():
    t = expanded_root()
    for tok in (A, B, EOS):
        update_trie(t, [tok])
    assert t.total_residual() == pytest.approx(0.0)
    with pytest.raises(ZeroResidual):
        residual_distribution(t)


def test_update_trie_depth_two():
    t = expanded_root()
    t.child(A).set_probs([0.5, 0.3, 0.2])
    update_trie(t, [A, A])
    assert t.banned[A] == pytest.approx(0.25)
    assert t.residual(A) == pytest.approx(0.25)
    assert t.child(A).residuals() == pytest.approx([0.0, 0.3, 0.2])


def test_update_trie_propagates_exhaustion():
    t = expanded_root()
    child = t.child(A)
    child.set_probs([0.5, 0.3, 0.2])
    for tok in (A, B, EOS):
        update_trie(t, [A, tok])
    assert t.residual(A) == 0.0


def test_update_trie_missing_path():
    t = expanded_root()
    with pytest.raises(PathNotFound):
        update_trie(t, [A, A])
    with pytest.raises(PathNotFound):
        update_trie(t, [])
    with pytest.raises(PathNotFound):
        residual_distribution(TrieNode())


def test_residual_distribution_cases():
    t = expanded_root()
    assert residual_distribution(t).probs.tolist() == pytest.approx([0.5, 0.3, 0.2])
    update_trie(t, [A])
    update_trie(t, [EOS])
    assert residual_distribution(t).probs.tolist() == pytest.approx([0, 1, 0])


def test_over_length_never_accepted():
    m = abe()
    for seed in range(300):
        out = constrained_sample(m, "", [], TrieNode(), DecoderConfig(max_len=3), random.Random(seed))
        assert len(out.text) <= 3


def test_capability_required():
    with pytest.raises(CapabilityMissing):
        constrained_sample(RemoteModel("http://127.0.0.1:9"), "", [], TrieNode())


class SampleOnly:
    """Wraps a local model but only exposes unconstrained sampling."""

    from prefix_filters.generator import Capability as _C

    capabilities = _C.SAMPLE

    def __init__(self, inner):
        self.inner = inner

    def sample_continuation(self, prompt, max_len, seed):
        return self.inner.sample_continuation(prompt, max_len, seed)


def test_fallback_empty_filters_accepts_first():
    out = fallback_reject_sample(SampleOnly(abe()), "", [], DecoderConfig(max_len=5), random.Random(0))
    assert out.attempts == 1


def test_fallback_exhausts():
    class Always:
        capabilities = SampleOnly.capabilities

        def sample_continuation(self, prompt, max_len, seed):
            return Continuation(("x",), True, False, None, 2)

    with pytest.raises(AttemptsExhausted):
        fallback_reject_sample(Always(), "", [FilterSpec("x", Contains("x"))], DecoderConfig(max_attempts=25))


def test_fallback_matches_conditional():
    model = SampleOnly(abe())
    f = [FilterSpec("nob", Contains("b"))]
    rng = random.Random(3)
    cfg = DecoderConfig(max_len=2)
    counts = Counter(fallback_reject_sample(model, "", f, cfg, rng).text for _ in range(20_000))
    assert tv({"": 4 / 7, "a": 2 / 7, "aa": 1 / 7}, counts) < 0.02


# --- trie mass accounting properties ---------------------------------------

probs3 = st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3).map(lambda w: [x / sum(w) for x in w])


def _build(depth_probs):
    root = TrieNode()
    nodes = [root]
    root.set_probs(depth_probs[0])
    frontier = [(root, ())]
    for probs in depth_probs[1:]:
        nxt = []
        for node, path in frontier:
            for t in (0, 1):
                c = node.child(t)
                c.set_probs(probs)
                nodes.append(c)
                nxt.append((c, path + (t,)))
        frontier = nxt
    return root, nodes


@settings(max_examples=250, deadline=None)
@given(st.lists(probs3, min_size=1, max_size=3), st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 2)), max_size=12))
def test_mass_accounting(depth_probs, bans):
    root, nodes = _build(depth_probs)
    depth = len(depth_probs)
    for ban in bans:
        path = list(ban[:depth])
        # only paths through expanded nodes (tokens 0/1 above the last position)
        if any(t == 2 for t in path[:-1]):
            continue
        before = root.total_residual()
        update_trie(root, path)
        assert root.total_residual() <= before + 1e-12
    for n in nodes:
        assert sum(n.banned) <= 1 + 1e-9
        for p, b in zip(n.probs, n.banned):
            assert -1e-12 <= b <= p + 1e-12
        # banned share of each expanded child edge mirrors the child's own banned mass
        for t, c in n.children.items():
            if c.cached:
                expected = n.probs[t] * (1 - c.total_residual())
                if c.total_residual() < RESIDUAL_FLOOR:
                    expected = n.probs[t]
                assert n.banned[t] == pytest.approx(expected, abs=1e-9)
    # renormalized residuals keep sibling ratios
    res = root.residuals()
    if root.total_residual() > RESIDUAL_FLOOR:
        dist = residual_distribution(root).probs
        live = [i for i, r in enumerate(res) if r >= RESIDUAL_FLOOR]
        for i in live:
            for j in live:
                assert dist[i] * res[j] == pytest.approx(dist[j] * res[i], abs=1e-9)
