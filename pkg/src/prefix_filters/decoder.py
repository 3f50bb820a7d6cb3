"""Constrained adaptive rejection sampling with prefix filters.

Each sampling attempt walks a probability trie, drawing the next token in
proportion to its *residual* mass (model probability minus mass already
proven to lead only into rejected prefixes). When a prefix triggers a filter
the edge that produced it is banned and the ban is propagated toward the
root, so rejected regions are never re-explored. Accepted outputs are then
distributed exactly as the model conditioned on never passing through a
triggering prefix and on reaching EOS within ``max_len`` tokens.

Mass accounting: ``banned[t]`` on the edge from node ``n`` through token
``t`` equals ``probs[t]`` times the total banned fraction of the child.
Banning an edge with residual ``r`` removes ``r * probs`` of each ancestor
edge on the way up.
"""
from __future__ import annotations

import codecs
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .filter_engine import FilterSet, FilterSpec, eval_expr
from .generator import Capability, CapabilityMissing, NextTokenDistribution

__all__ = [
    "DecodeError",
    "Unsatisfiable",
    "AttemptsExhausted",
    "PathNotFound",
    "ZeroResidual",
    "TrieNode",
    "DecoderConfig",
    "DecodeOutcome",
    "constrained_sample",
    "update_trie",
    "residual_distribution",
    "fallback_reject_sample",
    "RESIDUAL_FLOOR",
]

RESIDUAL_FLOOR = 1e-12


class DecodeError(Exception):
    pass


class Unsatisfiable(DecodeError):
    """Every model-supported continuation is banned."""


class AttemptsExhausted(DecodeError):
    pass


class PathNotFound(DecodeError):
    """Internal invariant violation: a ban path is not in the trie."""


class ZeroResidual(DecodeError):
    pass


class TrieNode:
    __slots__ = ("probs", "banned", "children", "parent", "token", "depth")

    def __init__(self, parent: "TrieNode | None" = None, token: int | None = None):
        self.probs: list[float] | None = None
        self.banned: list[float] | None = None
        self.children: dict[int, TrieNode] = {}
        self.parent = parent
        self.token = token
        self.depth = 0 if parent is None else parent.depth + 1

    @property
    def cached(self) -> bool:
        return self.probs is not None

    def set_probs(self, probs: Sequence[float]) -> None:
        self.probs = [float(p) for p in probs]
        self.banned = [0.0] * len(self.probs)

    def residual(self, t: int) -> float:
        return self.probs[t] - self.banned[t]

    def residuals(self) -> list[float]:
        return [p - b for p, b in zip(self.probs, self.banned)]

    def total_residual(self) -> float:
        return sum(self.probs) - sum(self.banned)

    def child(self, t: int) -> "TrieNode":
        node = self.children.get(t)
        if node is None:
            node = self.children[t] = TrieNode(self, t)
        return node

    def walk(self, path: Sequence[int]) -> "TrieNode":
        node = self
        for t in path:
            node = node.children.get(t)
            if node is None:
                raise PathNotFound(f"token {t} not expanded at depth {len(path)}")
        return node


def _ban_edge(node: TrieNode, t: int) -> None:
    """Ban edge ``(node, t)`` completely and propagate the removed mass."""
    removed = node.probs[t] - node.banned[t]
    node.banned[t] = node.probs[t]
    while removed > 0.0 and node.parent is not None:
        parent, pt = node.parent, node.token
        if node.total_residual() < RESIDUAL_FLOOR:
            removed = parent.probs[pt] - parent.banned[pt]
            parent.banned[pt] = parent.probs[pt]
        else:
            removed *= parent.probs[pt]
            new = parent.banned[pt] + removed
            if parent.probs[pt] - new < RESIDUAL_FLOOR:
                removed = parent.probs[pt] - parent.banned[pt]
                new = parent.probs[pt]
            parent.banned[pt] = new
        node = parent


def update_trie(trie: TrieNode, banned_path: Sequence[int]) -> None:
    """Ban the last edge of ``banned_path`` (a token sequence from the root).

    Every node on the path except the final edge's child must already be
    expanded; :class:`PathNotFound` otherwise.
    """
    if not banned_path:
        raise PathNotFound("cannot ban the empty path")
    node = trie.walk(banned_path[:-1])
    t = banned_path[-1]
    if not node.cached or not 0 <= t < len(node.probs):
        raise PathNotFound(f"edge {t} is not cached at depth {len(banned_path) - 1}")
    _ban_edge(node, t)


def residual_distribution(node: TrieNode) -> NextTokenDistribution:
    if not node.cached:
        raise PathNotFound("node has not been expanded")
    res = [r if r >= RESIDUAL_FLOOR else 0.0 for r in node.residuals()]
    total = sum(res)
    if total <= 0.0:
        raise ZeroResidual("all edges are banned")
    return NextTokenDistribution(np.array(res) / total)


@dataclass
class DecoderConfig:
    max_len: int = 64
    max_attempts: int = 1000
    seed: int = 0


@dataclass
class DecodeOutcome:
    text: str
    accepted: bool
    tokens_sampled: int
    model_calls: int
    trigger_events: list[tuple[str, int]] = field(default_factory=list)
    attempts: int = 1
    token_ids: tuple[int, ...] = ()
    error: str | None = None


def _filters(filters) -> tuple[FilterSpec, ...]:
    if filters is None:
        return ()
    return tuple(filters.filters if isinstance(filters, FilterSet) else filters)


def _first_hit(filters: Sequence[FilterSpec], text: str) -> str | None:
    for f in filters:
        if eval_expr(f.expr, text):
            return f.id
    return None


def _sample_residual(node: TrieNode, rng: random.Random) -> int:
    probs, banned = node.probs, node.banned
    total = 0.0
    for p, b in zip(probs, banned):
        r = p - b
        if r >= RESIDUAL_FLOOR:
            total += r
    u = rng.random() * total
    acc = 0.0
    last = -1
    for i, (p, b) in enumerate(zip(probs, banned)):
        r = p - b
        if r < RESIDUAL_FLOOR:
            continue
        acc += r
        last = i
        if u < acc:
            return i
    return last


class _Sampler:
    """Holds per-call counters while drawing attempts from one trie."""

    def __init__(self, model, prompt: str, filters, trie: TrieNode, config: DecoderConfig, rng: random.Random):
        self.model = model
        self.prompt_ctx = tuple(model.encode_prompt(prompt))
        self.filters = _filters(filters)
        self.trie = trie
        self.config = config
        self.rng = rng
        self.vocab = model.vocab
        self.eos = model.vocab.eos_id
        self.model_calls = 0
        self.tokens = 0
        self.events: list[tuple[str, int]] = []

    def expand(self, node: TrieNode, path: Sequence[int]) -> None:
        if node.cached:
            return
        dist = self.model.next_distribution(self.prompt_ctx + tuple(path))
        self.model_calls += 1
        node.set_probs(dist.probs)
        if node.depth >= self.config.max_len:
            # only EOS may follow; every other edge is over-length
            for t in range(len(node.probs)):
                if t != self.eos and node.probs[t] > 0.0:
                    _ban_edge(node, t)

    def attempt(self) -> DecodeOutcome | None:
        node = self.trie
        path: list[int] = []
        decoder = codecs.getincrementaldecoder("utf-8")(errors="replace")
        text = ""
        last_checked: str | None = None
        while True:
            self.expand(node, path)
            if node.total_residual() < RESIDUAL_FLOOR:
                return None  # everything below was banned meanwhile
            t = _sample_residual(node, self.rng)
            self.tokens += 1
            path.append(t)
            if t == self.eos:
                text += decoder.decode(b"", final=True)
            else:
                text += decoder.decode(self.vocab.token_bytes(t))
            if text != last_checked:
                last_checked = text
                hit = _first_hit(self.filters, text)
                if hit is not None:
                    self.events.append((hit, len(text)))
                    _ban_edge(node, t)
                    return None
            if t == self.eos:
                return DecodeOutcome(text, True, 0, 0, token_ids=tuple(path[:-1]))
            node = node.child(t)


def constrained_sample(
    model,
    prompt: str,
    filters: FilterSet | Sequence[FilterSpec] | None,
    trie: TrieNode,
    config: DecoderConfig | None = None,
    rng: random.Random | None = None,
) -> DecodeOutcome:
    """Draw one output conditioned on passing every filter.

    ``trie`` must belong to this ``(model, prompt)`` pair and may be reused
    across calls; cached nodes cost no model calls. Raises
    :class:`Unsatisfiable` once the root has no residual mass and
    :class:`AttemptsExhausted` after ``max_attempts`` rejections.
    """
    config = config or DecoderConfig()
    if not (getattr(model, "capabilities", Capability(0)) & Capability.DISTRIBUTION):
        raise CapabilityMissing("constrained_sample needs a DISTRIBUTION model; use fallback_reject_sample")
    rng = rng or random.Random(config.seed)
    s = _Sampler(model, prompt, filters, trie, config, rng)
    attempts = 0
    while True:
        s.expand(trie, ())
        if trie.total_residual() < RESIDUAL_FLOOR:
            raise Unsatisfiable(f"all continuations banned after {attempts} attempts")
        if attempts >= config.max_attempts:
            raise AttemptsExhausted(f"no acceptance in {attempts} attempts")
        attempts += 1
        out = s.attempt()
        if out is not None:
            out.tokens_sampled = s.tokens
            out.model_calls = s.model_calls
            out.trigger_events = s.events
            out.attempts = attempts
            return out


def fallback_reject_sample(
    model,
    prompt: str,
    filters: FilterSet | Sequence[FilterSpec] | None,
    config: DecoderConfig | None = None,
    rng: random.Random | None = None,
) -> DecodeOutcome:
    """Early-abort rejection sampling for SAMPLE-only models (no trie).

    Filters are checked at every piece boundary of each continuation; an
    attempt is rejected at the first trigger or when it is truncated. With
    no filters the first continuation is returned as drawn.
    """
    config = config or DecoderConfig()
    rng = rng or random.Random(config.seed)
    fs = _filters(filters)
    if not fs:
        cont = model.sample_continuation(prompt, config.max_len, rng.getrandbits(63))
        return DecodeOutcome(
            text=cont.text,
            accepted=True,
            tokens_sampled=cont.tokens_drawn,
            model_calls=1,
            token_ids=tuple(cont.token_ids or ()),
            error="truncated at max_len" if cont.truncated else None,
        )
    tokens = 0
    events: list[tuple[str, int]] = []
    for attempt in range(1, config.max_attempts + 1):
        cont = model.sample_continuation(prompt, config.max_len, rng.getrandbits(63))
        text = ""
        checked: str | None = None
        rejected = False
        boundaries = list(cont.pieces) + [""] if cont.eos else list(cont.pieces)
        for piece in boundaries:
            tokens += 1
            text += piece
            if text == checked:
                continue
            checked = text
            hit = _first_hit(fs, text)
            if hit is not None:
                events.append((hit, len(text)))
                rejected = True
                break
        if rejected:
            continue
        if not cont.eos:
            tokens += 1  # the over-length draw
            continue
        return DecodeOutcome(
            text=text,
            accepted=True,
            tokens_sampled=tokens,
            model_calls=attempt,
            trigger_events=events,
            attempts=attempt,
            token_ids=tuple(cont.token_ids or ()),
        )
    raise AttemptsExhausted(f"no acceptance in {config.max_attempts} attempts")
