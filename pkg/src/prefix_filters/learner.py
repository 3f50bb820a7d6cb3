"""Error-driven filter learning.

``learn`` runs several rounds of: sample the model (constrained by every
filter accepted so far), judge with the oracle, group the invalid samples by
error class, and ask a synthesizer for candidate filters per group. Each
candidate must pass ``validate_filter`` (distributional soundness plus a
minimum catch count) before it joins the set; failing candidates are sent
back with feedback up to ``retry_limit`` times.
"""
from __future__ import annotations

import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Protocol, Sequence

from .decoder import DecoderConfig, DecodeError, TrieNode, constrained_sample, fallback_reject_sample
from .filter_engine import (
    Contains,
    FilterSet,
    FilterSpec,
    StrippedEmpty,
    SubstrCountAtLeast,
    expr_to_dict,
    first_trigger_prefix,
)
from .generator import Capability, model_calls as _calls
from .oracle import ErrorGroup, Oracle, OracleCrashed, OracleVerdict, group_by_error, judge_many

log = logging.getLogger(__name__)

__all__ = [
    "SampleRecord",
    "LearningConfig",
    "MinerParams",
    "ValidationFeedback",
    "SynthesizerRequest",
    "SynthesizerResponse",
    "SynthesizerUnavailable",
    "Synthesizer",
    "MinerSynthesizer",
    "FallbackSynthesizer",
    "RemoteSynthesizer",
    "RoundReport",
    "LearnResult",
    "collect_samples",
    "validate_filter",
    "learn_group",
    "learn",
    "mine_candidates",
]


class SynthesizerUnavailable(Exception):
    pass


@dataclass
class SampleRecord:
    prompt_id: str
    text: str
    verdict: OracleVerdict | None
    tokens_consumed: int = 0
    diagnostics: str | None = None
    model_calls: int = 0
    trigger_ids: tuple[str, ...] = ()

    @property
    def valid(self) -> bool:
        return self.verdict is not None and self.verdict.valid


@dataclass(frozen=True)
class MinerParams:
    theta_catch: float = 0.3
    min_len: int = 2
    max_len: int = 12
    top_n: int = 10
    max_count_k: int = 8


@dataclass
class LearningConfig:
    budget: int = 50
    rounds: int = 3
    epsilon: float = 0.01
    retry_limit: int = 3
    min_catch: int = 2
    granularity: str = "per-character"
    seed: int = 0
    n_invalid_examples: int = 20
    n_valid_examples: int = 20
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    workers: int = 1

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        if self.min_catch < 1:
            raise ValueError("min_catch must be >= 1")
        if self.granularity != "per-character":
            raise ValueError("stored samples carry no token boundaries; granularity must be per-character")


@dataclass
class ValidationFeedback:
    passed: bool
    mis_trigger_rate: float
    catch_count: int
    counterexamples: list[tuple[str, int]] = field(default_factory=list)
    zero_catch: bool = False

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "mis_trigger_rate": self.mis_trigger_rate,
            "catch_count": self.catch_count,
            "counterexamples": [{"text": t, "position": p} for t, p in self.counterexamples],
            "zero_catch": self.zero_catch,
        }


@dataclass
class SynthesizerRequest:
    error_class: str
    invalid_examples: list[str]
    valid_examples: list[str]
    prior_candidate: FilterSpec | None = None
    prior_feedback: ValidationFeedback | None = None

    def to_dict(self) -> dict:
        doc = {
            "error_class": self.error_class,
            "invalid_examples": list(self.invalid_examples),
            "valid_examples": list(self.valid_examples),
        }
        if self.prior_candidate is not None:
            doc["prior_candidate"] = expr_to_dict(self.prior_candidate.expr)
        if self.prior_feedback is not None:
            doc["prior_feedback"] = self.prior_feedback.to_dict()
        return doc


@dataclass
class SynthesizerResponse:
    candidates: list[FilterSpec]
    diagnostics: list[str] = field(default_factory=list)


class Synthesizer(Protocol):
    def query(self, request: SynthesizerRequest) -> SynthesizerResponse: ...


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def collect_samples(
    model,
    prompts: Sequence[str],
    budget: int,
    oracle: Oracle,
    filters: FilterSet | None = None,
    seed: int = 0,
    decoder: DecoderConfig | None = None,
    workers: int = 1,
    prompt_ids: Sequence[str] | None = None,
) -> list[SampleRecord]:
    """Draw ``budget`` samples, cycling through ``prompts``, and judge them.

    With a non-empty ``filters`` the samples come from the constrained
    decoder (one trie per prompt). Decoder errors propagate.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not prompts:
        raise ValueError("prompts must be non-empty")
    decoder = decoder or DecoderConfig()
    prompt_ids = list(prompt_ids) if prompt_ids is not None else [str(i) for i in range(len(prompts))]
    rng = random.Random(seed)
    constrained = filters is not None and len(filters) > 0
    has_dist = bool(getattr(model, "capabilities", Capability(0)) & Capability.DISTRIBUTION)
    tries: dict[int, TrieNode] = {}
    drawn: list[tuple[int, str, int, int, str | None]] = []
    for i in range(budget):
        pi = i % len(prompts)
        prompt = prompts[pi]
        if constrained and has_dist:
            out = constrained_sample(model, prompt, filters, tries.setdefault(pi, TrieNode()), decoder, rng)
            drawn.append((pi, out.text, out.tokens_sampled, out.model_calls, None))
        elif constrained:
            out = fallback_reject_sample(model, prompt, filters, decoder, rng)
            drawn.append((pi, out.text, out.tokens_sampled, out.model_calls, None))
        else:
            cont = model.sample_continuation(prompt, decoder.max_len, rng.getrandbits(63))
            note = "truncated at max_len" if cont.truncated else None
            drawn.append((pi, cont.text, cont.tokens_drawn, _calls(cont), note))
    verdicts = judge_many(oracle, [d[1] for d in drawn], workers)
    records = []
    for (pi, text, tokens, calls, note), v in zip(drawn, verdicts):
        if isinstance(v, OracleCrashed):
            records.append(SampleRecord(prompt_ids[pi], text, None, tokens, f"oracle crashed: {v}", calls))
            continue
        diag = "; ".join(x for x in (note, v.diagnostics) if x) or None
        records.append(SampleRecord(prompt_ids[pi], text, v, tokens, diag, calls))
    return records


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_filter(
    spec: FilterSpec,
    invalid_group: Iterable[str],
    valid_set: Sequence[str],
    reference_corpus: Sequence[str] = (),
    epsilon: float = 0.01,
    min_catch: int = 2,
) -> ValidationFeedback:
    """Check distributional soundness and catch count on stored texts.

    ``valid_set`` and ``reference_corpus`` are concatenated (duplicates
    count with their multiplicity). A text mis-triggers if any of its
    per-character prefixes triggers.
    """
    pool = list(valid_set) + list(reference_corpus)
    if not pool:
        raise ValueError("validation needs at least one valid or reference text")
    mis = []
    for text in pool:
        pos = first_trigger_prefix(spec, text)
        if pos is not None:
            mis.append((text, pos))
    catch = sum(1 for t in invalid_group if first_trigger_prefix(spec, t) is not None)
    rate = len(mis) / len(pool)
    return ValidationFeedback(
        passed=rate < epsilon and catch >= min_catch,
        mis_trigger_rate=rate,
        catch_count=catch,
        counterexamples=mis[:5],
        zero_catch=catch == 0,
    )


# ---------------------------------------------------------------------------
# Heuristic miner
# ---------------------------------------------------------------------------


def _caught(expr, texts: Sequence[str]) -> frozenset[int]:
    return frozenset(i for i, t in enumerate(texts) if first_trigger_prefix(expr, t) is not None)


def mine_candidates(
    error_group: ErrorGroup | Sequence[str],
    valid_set: Sequence[str],
    params: MinerParams = MinerParams(),
    epsilon: float = 0.01,
    min_catch: int = 2,
    error_class: str = "",
) -> list[FilterSpec]:
    """Offline synthesizer proposing substring-style filters for a group.

    Families: ``Contains`` on substrings frequent in the group,
    ``SubstrCountAtLeast`` on substrings that also occur in valid texts but
    less often, and ``StrippedEmpty`` for whitespace-led groups. Candidates
    that fail validation against ``valid_set`` are dropped, as are those
    catching only a subset of what a better-ranked candidate catches.
    """
    if isinstance(error_group, ErrorGroup):
        error_class = error_class or error_group.error_class
        texts = error_group.texts
    else:
        texts = list(error_group)
    if not texts:
        raise ValueError("error group is empty")
    need = max(1, math.ceil(params.theta_catch * len(texts) - 1e-9))

    doc_freq: Counter[str] = Counter()
    for t in texts:
        seen = set()
        for n in range(params.min_len, params.max_len + 1):
            for i in range(len(t) - n + 1):
                seen.add(t[i:i + n])
        doc_freq.update(seen)
    frequent = sorted(w for w, c in doc_freq.items() if c >= need)

    exprs = []
    valid_has = {w for w in frequent if any(w in v for v in valid_set)}
    for w in frequent:
        if w not in valid_has:
            exprs.append(Contains(w))
    for w in sorted(valid_has):
        for k in range(2, params.max_count_k + 1):
            if sum(1 for t in texts if t.count(w) >= k) < need:
                break
            expr = SubstrCountAtLeast(w, k)
            if sum(1 for v in valid_set if first_trigger_prefix(expr, v) is not None) < epsilon * max(1, len(valid_set)):
                exprs.append(expr)
                break
    if sum(1 for t in texts if not t[:1].strip()) >= need:
        exprs.append(StrippedEmpty())

    scored = []
    for expr in exprs:
        caught = _caught(expr, texts)
        if len(caught) < min_catch:
            continue
        probe = FilterSpec("probe", expr)
        if valid_set:
            fb = validate_filter(probe, [], valid_set, (), epsilon, 1)
            if fb.mis_trigger_rate >= epsilon:
                continue
        scored.append((caught, expr))
    scored.sort(key=lambda ce: (-len(ce[0]), _expr_len(ce[1]), repr(ce[1])))

    kept: list[tuple[frozenset, object]] = []
    for caught, expr in scored:
        if any(caught <= k for k, _ in kept):
            continue
        kept.append((caught, expr))
        if len(kept) >= params.top_n:
            break
    return [
        FilterSpec(
            id=f"cand-{i}",
            expr=expr,
            name=_describe(expr),
            description=f"mined for {error_class or 'group'}: catches {len(c)}/{len(texts)}",
            error_class=error_class,
            provenance="mined",
        )
        for i, (c, expr) in enumerate(kept)
    ]


def _expr_len(expr) -> int:
    if isinstance(expr, (Contains, SubstrCountAtLeast)):
        return len(expr.needle)
    return 0


def _describe(expr) -> str:
    if isinstance(expr, Contains):
        return f"contains {expr.needle!r}"
    if isinstance(expr, SubstrCountAtLeast):
        return f"at least {expr.k} x {expr.needle!r}"
    if isinstance(expr, StrippedEmpty):
        return "whitespace-only prefix"
    return type(expr).__name__


class MinerSynthesizer:
    """Synthesizer backed by :func:`mine_candidates`.

    Mined candidates are pre-validated, so a requery has nothing better to
    offer and returns no candidates. The miner is local and cheap, so it is
    handed every group member and validation text rather than exemplars.
    """

    full_context = True

    def __init__(self, params: MinerParams = MinerParams(), epsilon: float = 0.01, min_catch: int = 2):
        self.params = params
        self.epsilon = epsilon
        self.min_catch = min_catch

    def query(self, request: SynthesizerRequest) -> SynthesizerResponse:
        if request.prior_candidate is not None:
            return SynthesizerResponse([])
        cands = mine_candidates(
            request.invalid_examples,
            request.valid_examples,
            self.params,
            self.epsilon,
            self.min_catch,
            request.error_class,
        )
        return SynthesizerResponse(cands)


class FallbackSynthesizer:
    """Use ``primary`` and fall back to ``fallback`` when it is unavailable."""

    def __init__(self, primary: Synthesizer, fallback: Synthesizer):
        self.primary = primary
        self.fallback = fallback
        self.fallbacks = 0

    def query(self, request: SynthesizerRequest) -> SynthesizerResponse:
        try:
            return self.primary.query(request)
        except SynthesizerUnavailable as exc:
            log.warning("synthesizer unavailable, using fallback: %s", exc)
            self.fallbacks += 1
            return self.fallback.query(request)


# ---------------------------------------------------------------------------
# Learning loops
# ---------------------------------------------------------------------------


def learn_group(
    synth: Synthesizer,
    error_group: ErrorGroup,
    valid_set: Sequence[str],
    reference_corpus: Sequence[str],
    config: LearningConfig,
    miner_valid: Sequence[str] | None = None,
) -> list[FilterSpec]:
    """Propose, validate, and requery candidates for one error group.

    Each candidate gets at most ``retry_limit`` requeries. Only candidates
    that pass a final validation are returned, with their stats attached.
    """
    if not len(error_group):
        raise ValueError("error group is empty")
    invalid = error_group.texts
    request = SynthesizerRequest(
        error_group.error_class,
        invalid[: config.n_invalid_examples],
        list(miner_valid if miner_valid is not None else valid_set)[: config.n_valid_examples],
    )
    if getattr(synth, "full_context", False):
        request.invalid_examples = list(invalid)
        request.valid_examples = list(valid_set) + list(reference_corpus)

    def check(spec):
        return validate_filter(spec, invalid, valid_set, reference_corpus, config.epsilon, config.min_catch)

    accepted = []
    for cand in synth.query(request).candidates:
        for _ in range(config.retry_limit):
            fb = check(cand)
            if fb.passed:
                break
            retry = replace(request, prior_candidate=cand, prior_feedback=fb)
            fixed = synth.query(retry).candidates
            if not fixed:
                cand = None
                break
            cand = fixed[0]
        if cand is None:
            continue
        fb = check(cand)
        if fb.passed:
            accepted.append(
                replace(
                    cand,
                    error_class=cand.error_class or error_group.error_class,
                    stats={"learn_catch_count": fb.catch_count, "learn_mis_trigger_rate": fb.mis_trigger_rate},
                )
            )
    return accepted


@dataclass
class RoundReport:
    round: int
    n_samples: int
    n_valid: int
    n_crashed: int
    group_sizes: dict[str, int]
    accepted_ids: list[str]
    valid_texts: list[str]
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "n_samples": self.n_samples,
            "n_valid": self.n_valid,
            "n_crashed": self.n_crashed,
            "group_sizes": self.group_sizes,
            "accepted_ids": self.accepted_ids,
            "valid_texts": self.valid_texts,
            "diagnostics": self.diagnostics,
        }


@dataclass
class LearnResult:
    filters: FilterSet
    rounds: list[RoundReport]
    warning: str | None = None


def learn(
    model,
    oracle: Oracle,
    prompts: Sequence[str],
    synth: Synthesizer,
    config: LearningConfig,
    reference_corpus: Sequence[str] = (),
    model_id: str = "",
    domain_id: str = "",
    prompt_ids: Sequence[str] | None = None,
) -> LearnResult:
    """Multi-round error-driven learning; returns the union of all rounds.

    Validation in round ``r`` uses every valid sample seen in rounds
    ``1..r`` plus the reference corpus. If a round aborts, the filters from
    completed rounds are returned with ``warning`` set.
    """
    fs = FilterSet(model_id=model_id, domain_id=domain_id, epsilon=config.epsilon)
    reports: list[RoundReport] = []
    valid_pool: list[str] = []
    seen_exprs = set()
    for r in range(1, config.rounds + 1):
        try:
            samples = collect_samples(
                model,
                prompts,
                config.budget,
                oracle,
                fs if len(fs) else None,
                seed=config.seed * 1_000_003 + r,
                decoder=config.decoder,
                workers=config.workers,
                prompt_ids=prompt_ids,
            )
        except DecodeError as exc:
            warning = f"round {r} aborted during sampling: {type(exc).__name__}: {exc}"
            log.warning(warning)
            return LearnResult(fs, reports, warning)
        groups, valid = group_by_error(samples)
        crashed = sum(1 for s in samples if s.verdict is None)
        valid_pool.extend(s.text for s in valid)
        report = RoundReport(
            round=r,
            n_samples=len(samples),
            n_valid=len(valid),
            n_crashed=crashed,
            group_sizes={k: len(g) for k, g in sorted(groups.items())},
            accepted_ids=[],
            valid_texts=list(valid_pool),
        )
        if crashed:
            report.diagnostics.append(f"{crashed} samples excluded: oracle crashed")
        if not groups:
            report.diagnostics.append("too few invalid examples to learn filters from (no invalid samples)")
        if not valid_pool and not reference_corpus:
            report.diagnostics.append("no valid samples or reference corpus; cannot validate filters")
            reports.append(report)
            continue
        new = []
        for cls, group in sorted(groups.items()):
            if len(group) < config.min_catch:
                report.diagnostics.append(f"{cls}: too few invalid examples ({len(group)} < min_catch)")
                continue
            try:
                accepted = learn_group(synth, group, valid_pool, reference_corpus, config)
            except SynthesizerUnavailable as exc:
                report.diagnostics.append(f"{cls}: synthesizer unavailable: {exc}")
                continue
            for spec in accepted:
                if spec.expr in seen_exprs:
                    continue
                seen_exprs.add(spec.expr)
                fid = f"r{r}-{_slug(cls)}-{sum(1 for f in new if f.error_class == spec.error_class)}"
                new.append(replace(spec, id=fid, round_learned=r))
        fs = fs.extended(new, created_rounds=r)
        report.accepted_ids = [f.id for f in new]
        reports.append(report)
        log.info("round %d: %d samples, %d valid, %d new filters", r, len(samples), len(valid), len(new))
    return LearnResult(fs, reports)


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in s) or "error"


class RemoteSynthesizer:
    """HTTP synthesizer client.

    Posts the request document and expects ``{"candidates": [expr, ...]}``.
    Malformed candidates are dropped one by one with a diagnostic.
    """

    def __init__(
        self,
        url: str,
        auth_header: str | None = None,
        auth_value: str | None = None,
        timeout: float = 60.0,
        retries: int = 1,
        transport=None,
    ):
        self.url = url
        self.headers = {auth_header: auth_value} if auth_header and auth_value else {}
        self.timeout = timeout
        self.retries = retries
        self._transport = transport
        self._counter = 0

    def query(self, request: SynthesizerRequest) -> SynthesizerResponse:
        import httpx

        from .filter_engine import FilterError, expr_from_dict

        last_exc: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                with httpx.Client(timeout=self.timeout, transport=self._transport) as client:
                    resp = client.post(self.url, json=request.to_dict(), headers=self.headers)
                    resp.raise_for_status()
                    doc = resp.json()
                break
            except (httpx.HTTPError, ValueError) as exc:
                last_exc = exc
        else:
            raise SynthesizerUnavailable(f"{self.url}: {last_exc}") from last_exc
        raw = doc.get("candidates") if isinstance(doc, dict) else None
        if not isinstance(raw, list):
            raise SynthesizerUnavailable(f"{self.url}: response has no 'candidates' list")
        cands, diags = [], []
        for i, item in enumerate(raw):
            try:
                expr = expr_from_dict(item, f"candidates[{i}]")
            except FilterError as exc:
                diags.append(f"candidate {i} rejected: {exc}")
                continue
            self._counter += 1
            cands.append(
                FilterSpec(
                    id=f"remote-{self._counter}",
                    expr=expr,
                    name=str(item.get("name", "")) if isinstance(item, dict) else "",
                    error_class=request.error_class,
                    provenance="synthesized",
                )
            )
        for d in diags:
            log.info(d)
        return SynthesizerResponse(cands, diags)
