"""Sampled-model abstraction and desk-scale toy models.

Models expose ``next_distribution`` (DISTRIBUTION capability) and/or
``sample_continuation`` (SAMPLE capability). Toy models tokenize per
character and ignore prompt text: prompts act as task identifiers only.
"""
from __future__ import annotations

import enum
import random
import time
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import httpx
import numpy as np

__all__ = [
    "Capability",
    "Vocabulary",
    "NextTokenDistribution",
    "Continuation",
    "GeneratorError",
    "CapabilityMissing",
    "ContextTooLong",
    "RemoteUnavailable",
    "EmptyCorpus",
    "TableModel",
    "NGramModel",
    "RemoteModel",
    "train_ngram",
    "sample_continuation",
    "next_distribution",
]

EOS_NAME = b"<eos>"
_SUM_TOL = 1e-9


class GeneratorError(Exception):
    pass


class CapabilityMissing(GeneratorError):
    pass


class ContextTooLong(GeneratorError):
    pass


class RemoteUnavailable(GeneratorError):
    pass


class EmptyCorpus(GeneratorError):
    pass


class Capability(enum.Flag):
    DISTRIBUTION = enum.auto()
    SAMPLE = enum.auto()


class Vocabulary:
    """Ordered, unique byte-string tokens plus one EOS token.

    EOS is stored as a named token but contributes no bytes to decoded text.
    """

    def __init__(self, tokens: Sequence[bytes], eos: bytes = EOS_NAME):
        tokens = [bytes(t) for t in tokens]
        if any(not t for t in tokens):
            raise ValueError("tokens must be non-empty byte strings")
        if eos in tokens:
            raise ValueError("EOS must not also be a regular token")
        all_tokens = tokens + [eos]
        if len(set(all_tokens)) != len(all_tokens):
            raise ValueError("tokens must be unique")
        self.tokens: tuple[bytes, ...] = tuple(all_tokens)
        self.eos_id = len(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_chars(cls, chars: Iterable[str]) -> "Vocabulary":
        return cls([c.encode("utf-8") for c in sorted(set(chars))])

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: bytes | str) -> int:
        if isinstance(token, str):
            token = token.encode("utf-8")
        return self._index[token]

    def token_bytes(self, token_id: int) -> bytes:
        return b"" if token_id == self.eos_id else self.tokens[token_id]

    def decode(self, ids: Iterable[int]) -> str:
        return b"".join(self.token_bytes(i) for i in ids).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class NextTokenDistribution:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("distribution must be a non-empty vector")
        if (probs < 0).any() or abs(probs.sum() - 1.0) > _SUM_TOL:
            raise ValueError(f"not a probability vector (sum={probs.sum()!r})")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return self.probs.size

    def __getitem__(self, i: int) -> float:
        return float(self.probs[i])


@dataclass(frozen=True)
class Continuation:
    """Result of unconstrained sampling. ``pieces`` holds decoded text per
    non-EOS token; ``truncated`` is set when max_len was hit without EOS."""

    pieces: tuple[str, ...]
    eos: bool
    truncated: bool
    token_ids: tuple[int, ...] | None = None
    tokens_drawn: int = 0

    @property
    def text(self) -> str:
        return "".join(self.pieces)


def _sample_index(probs: Sequence[float], rng: random.Random) -> int:
    u = rng.random()
    acc = 0.0
    last = 0
    for i, p in enumerate(probs):
        if p <= 0.0:
            continue
        acc += p
        last = i
        if u < acc:
            return i
    return last


class _LocalModel:
    capabilities = Capability.DISTRIBUTION | Capability.SAMPLE
    context_limit = 1 << 20
    vocab: Vocabulary

    def encode_prompt(self, prompt: str) -> tuple[int, ...]:
        return ()

    def distribution(self, context: Sequence[int]) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def next_distribution(self, context: Sequence[int]) -> NextTokenDistribution:
        if len(context) > self.context_limit:
            raise ContextTooLong(f"context of {len(context)} tokens exceeds limit {self.context_limit}")
        return NextTokenDistribution(self.distribution(context))

    def sample_continuation(self, prompt: str, max_len: int, seed: int) -> Continuation:
        rng = random.Random(seed)
        context = list(self.encode_prompt(prompt))
        ids: list[int] = []
        drawn = 0
        while True:
            probs = self.next_distribution(context).probs
            t = _sample_index(probs.tolist(), rng)
            drawn += 1
            if t == self.vocab.eos_id:
                return self._finish(ids, True, False, drawn)
            if len(ids) >= max_len:
                return self._finish(ids, False, True, drawn)
            ids.append(t)
            context.append(t)

    def _finish(self, ids, eos, truncated, drawn) -> Continuation:
        raw = [self.vocab.token_bytes(i) for i in ids]
        text = b"".join(raw).decode("utf-8", errors="replace")
        pieces = tuple(r.decode("utf-8", errors="replace") for r in raw)
        if "".join(pieces) != text:  # multi-byte characters split across tokens
            pieces = (text,)
        return Continuation(pieces, eos, truncated, tuple(ids), drawn)


class TableModel(_LocalModel):
    """Fixed lookup-table model.

    ``default`` maps token text to probability and is used at any context not
    listed in ``table``; ``table`` keys are tuples of generated token texts.
    With ``order`` set, only the last ``order`` generated tokens are looked up.
    """

    def __init__(
        self,
        default: Mapping[str, float],
        table: Mapping[tuple[str, ...], Mapping[str, float]] | None = None,
        eos: str = "<eos>",
        order: int | None = None,
    ):
        names = [k for k in default if k != eos]
        for row in (table or {}).values():
            names.extend(k for k in row if k != eos and k not in names)
        self.vocab = Vocabulary([n.encode("utf-8") for n in dict.fromkeys(names)])
        self.eos_name = eos
        self.order = order
        self._default = self._vector(default)
        self._table = {tuple(k): self._vector(v) for k, v in (table or {}).items()}

    def _vector(self, row: Mapping[str, float]) -> np.ndarray:
        vec = np.zeros(len(self.vocab))
        for name, p in row.items():
            idx = self.vocab.eos_id if name == self.eos_name else self.vocab.index(name)
            vec[idx] = p
        NextTokenDistribution(vec)
        return vec

    def distribution(self, context: Sequence[int]) -> np.ndarray:
        if not self._table:
            return self._default
        names = tuple(self.vocab.tokens[i].decode("utf-8") for i in context)
        if self.order is not None:
            names = names[len(names) - self.order:] if self.order else ()
        return self._table.get(names, self._default)


_BOS = -1


class NGramModel(_LocalModel):
    def __init__(self, vocab: Vocabulary, order: int, smoothing: float, counts: Mapping[tuple, Counter]):
        self.vocab = vocab
        self.order = order
        self.smoothing = smoothing
        self._counts = counts
        self._cache: dict[tuple, np.ndarray] = {}
        self._uniform = np.full(len(vocab), 1.0 / len(vocab))

    def _history(self, context: Sequence[int]) -> tuple:
        padded = (_BOS,) * self.order + tuple(context)
        return padded[len(padded) - self.order:]

    def distribution(self, context: Sequence[int]) -> np.ndarray:
        hist = self._history(context)
        cached = self._cache.get(hist)
        if cached is not None:
            return cached
        counts = self._counts.get(hist)
        vec = np.zeros(len(self.vocab))
        if counts:
            for t, c in counts.items():
                vec[t] = c
        total = vec.sum()
        if total == 0 and self.smoothing == 0:
            vec = self._uniform
        else:
            vec = (vec + self.smoothing) / (total + self.smoothing * len(self.vocab))
        self._cache[hist] = vec
        return vec


def train_ngram(
    corpus: Sequence[str],
    order: int,
    smoothing: float = 0.0,
    alphabet: Iterable[str] = (),
) -> NGramModel:
    """Per-character n-gram with ``order`` characters of history.

    Each corpus string is padded on the left with a start marker and ends
    with EOS. ``alphabet`` adds characters to the vocabulary beyond those seen.
    """
    if not corpus:
        raise EmptyCorpus("corpus must contain at least one string")
    if order < 1:
        raise ValueError("order must be >= 1")
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    vocab = Vocabulary.from_chars(set("".join(corpus)) | set(alphabet))
    counts: dict[tuple, Counter] = defaultdict(Counter)
    for s in corpus:
        seq = [_BOS] * order + [vocab.index(c) for c in s] + [vocab.eos_id]
        for i in range(order, len(seq)):
            counts[tuple(seq[i - order:i])][seq[i]] += 1
    return NGramModel(vocab, order, float(smoothing), dict(counts))


class RemoteModel:
    """SAMPLE-only client for an HTTP text-generation endpoint."""

    capabilities = Capability.SAMPLE

    def __init__(
        self,
        url: str,
        auth_header: str | None = None,
        auth_value: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
        temperature: float = 1.0,
        backoff: float = 0.5,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url
        self.headers = {auth_header: auth_value} if auth_header and auth_value else {}
        self.timeout = timeout
        self.retries = retries
        self.temperature = temperature
        self.backoff = backoff
        self._transport = transport

    def next_distribution(self, context):
        raise CapabilityMissing("remote models do not expose next-token distributions")

    def sample_continuation(self, prompt: str, max_len: int, seed: int) -> Continuation:
        body = {"prompt": prompt, "max_tokens": max_len, "temperature": self.temperature, "seed": seed}
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                with httpx.Client(timeout=self.timeout, transport=self._transport) as client:
                    resp = client.post(self.url, json=body, headers=self.headers)
                    resp.raise_for_status()
                    text = resp.json()["text"]
                if not isinstance(text, str):
                    raise ValueError("response field 'text' is not a string")
                break
            except (httpx.HTTPError, ValueError, KeyError) as exc:
                last_exc = exc
                if attempt < self.retries and self.backoff:
                    time.sleep(self.backoff * (2 ** attempt))
        else:
            raise RemoteUnavailable(f"{self.url}: {last_exc}") from last_exc
        # characters stand in for tokens; over-long text counts as truncated
        truncated = len(text) > max_len
        pieces = tuple(text[:max_len]) if truncated else tuple(text)
        return Continuation(pieces, eos=not truncated, truncated=truncated, tokens_drawn=len(pieces) + 1)


def model_calls(cont: Continuation) -> int:
    """Model queries behind an unconstrained continuation: one per token
    for local models, one request for remote ones."""
    return cont.tokens_drawn if cont.token_ids is not None else 1


def next_distribution(model, context: Sequence[int]) -> NextTokenDistribution:
    if not (getattr(model, "capabilities", Capability(0)) & Capability.DISTRIBUTION):
        raise CapabilityMissing(f"{type(model).__name__} has no DISTRIBUTION capability")
    return model.next_distribution(context)


def sample_continuation(model, prompt: str, max_len: int, seed: int) -> Continuation:
    return model.sample_continuation(prompt, max_len, seed)
