"""Prefix-filter predicate language.

A filter is a small closed expression tree evaluated over text. A filter
*triggers* when it evaluates to ``True``: the prefix is considered doomed.

Prefix checkpoints
------------------
When a filter is checked against "all prefixes" of a text, the checkpoints
are the non-empty prefixes ``text[:1] .. text[:n]``. The empty prefix is a
checkpoint only when the text itself is empty. This matches the decoder,
which evaluates filters after every sampled token (EOS included), so the
empty string is only ever seen as a finished output.
"""
from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence, Union

with warnings.catch_warnings():
    warnings.simplefilter("ignore", DeprecationWarning)
    try:  # Python >= 3.11
        import re._parser as _sre_parse  # type: ignore[import-not-found]
        import re._constants as _sre_c  # type: ignore[import-not-found]
    except ImportError:  # pragma: no cover - depends on interpreter
        import sre_parse as _sre_parse  # type: ignore[no-redef]
        import sre_constants as _sre_c  # type: ignore[no-redef]

__all__ = [
    "FilterError",
    "PatternUnsupported",
    "SchemaError",
    "RegexSearch",
    "SubstrCountAtLeast",
    "Contains",
    "StrippedEmpty",
    "Not",
    "And",
    "Or",
    "FilterExpr",
    "FilterSpec",
    "FilterSet",
    "eval_expr",
    "eval_filter",
    "eval_set",
    "first_trigger",
    "first_trigger_prefix",
    "prefix_checkpoints",
    "expr_to_dict",
    "expr_from_dict",
    "parse_filter_set",
    "serialize_filter_set",
    "PROVENANCES",
]

PROVENANCES = ("mined", "synthesized", "handwritten")


class FilterError(Exception):
    """Base class for filter-language errors."""


class PatternUnsupported(FilterError):
    """A regex uses a construct outside the supported subset."""


class SchemaError(FilterError):
    """A filter document does not match the schema."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ---------------------------------------------------------------------------
# Regex subset check
# ---------------------------------------------------------------------------

_ALLOWED_FLAGS = _sre_c.SRE_FLAG_MULTILINE | _sre_c.SRE_FLAG_UNICODE
_ALLOWED_AT = {
    _sre_c.AT_BEGINNING,
    _sre_c.AT_BEGINNING_STRING,
    _sre_c.AT_END,
    _sre_c.AT_END_STRING,
    _sre_c.AT_BOUNDARY,
    _sre_c.AT_NON_BOUNDARY,
}
_ALLOWED_IN = {_sre_c.LITERAL, _sre_c.RANGE, _sre_c.CATEGORY, _sre_c.NEGATE}
_LEAF_OPS = {_sre_c.LITERAL, _sre_c.NOT_LITERAL, _sre_c.ANY}


def _check_items(items, pattern: str) -> None:
    for op, av in items:
        if op in _LEAF_OPS:
            continue
        if op is _sre_c.AT:
            if av not in _ALLOWED_AT:
                raise PatternUnsupported(f"anchor {av} not supported in {pattern!r}")
        elif op is _sre_c.IN:
            for sub_op, _ in av:
                if sub_op not in _ALLOWED_IN:
                    raise PatternUnsupported(f"class item {sub_op} not supported in {pattern!r}")
        elif op is _sre_c.CATEGORY:
            continue
        elif op is _sre_c.BRANCH:
            for alt in av[1]:
                _check_items(alt, pattern)
        elif op is _sre_c.SUBPATTERN:
            _group, add_flags, del_flags, sub = av
            if (add_flags | del_flags) & ~_ALLOWED_FLAGS:
                raise PatternUnsupported(f"scoped flags not supported in {pattern!r}")
            _check_items(sub, pattern)
        elif op in (_sre_c.MAX_REPEAT, _sre_c.MIN_REPEAT):
            _check_items(av[2], pattern)
        else:
            # backreferences, lookaround, conditionals, atomic groups, possessive repeats
            raise PatternUnsupported(f"construct {op} not supported in {pattern!r}")


def compile_pattern(pattern: str, multiline: bool = False) -> re.Pattern:
    """Compile ``pattern`` after checking it against the supported subset."""
    if not isinstance(pattern, str) or not pattern:
        raise PatternUnsupported("pattern must be a non-empty string")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DeprecationWarning)
            parsed = _sre_parse.parse(pattern)
    except re.error as exc:
        raise PatternUnsupported(f"pattern does not compile: {exc}") from exc
    if parsed.state.flags & ~_ALLOWED_FLAGS:
        raise PatternUnsupported(f"inline flags other than (?m) not supported in {pattern!r}")
    _check_items(parsed, pattern)
    return re.compile(pattern, re.MULTILINE if multiline else 0)


# ---------------------------------------------------------------------------
# Expression nodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegexSearch:
    pattern: str
    target: str = "full"  # "full" | "stripped"
    multiline: bool = False
    _compiled: re.Pattern = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.target not in ("full", "stripped"):
            raise SchemaError("target", f"unknown target {self.target!r}")
        object.__setattr__(self, "_compiled", compile_pattern(self.pattern, self.multiline))


@dataclass(frozen=True)
class SubstrCountAtLeast:
    needle: str
    k: int

    def __post_init__(self):
        if not isinstance(self.needle, str) or not self.needle:
            raise SchemaError("needle", "needle must be a non-empty string")
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 1:
            raise SchemaError("k", f"k must be a positive integer, got {self.k!r}")


@dataclass(frozen=True)
class Contains:
    needle: str

    def __post_init__(self):
        if not isinstance(self.needle, str) or not self.needle:
            raise SchemaError("needle", "needle must be a non-empty string")


@dataclass(frozen=True)
class StrippedEmpty:
    pass


@dataclass(frozen=True)
class Not:
    child: "FilterExpr"


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise SchemaError("children", "and needs at least one child")


@dataclass(frozen=True)
class Or:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise SchemaError("children", "or needs at least one child")


FilterExpr = Union[RegexSearch, SubstrCountAtLeast, Contains, StrippedEmpty, Not, And, Or]


def eval_expr(expr: FilterExpr, text: str) -> bool:
    """Evaluate an expression tree on ``text``; ``True`` means it triggers."""
    if isinstance(expr, Contains):
        return expr.needle in text
    if isinstance(expr, SubstrCountAtLeast):
        return text.count(expr.needle) >= expr.k
    if isinstance(expr, StrippedEmpty):
        return not text.strip()
    if isinstance(expr, RegexSearch):
        subject = text.strip() if expr.target == "stripped" else text
        return expr._compiled.search(subject) is not None
    if isinstance(expr, Not):
        return not eval_expr(expr.child, text)
    if isinstance(expr, And):
        return all(eval_expr(c, text) for c in expr.children)
    if isinstance(expr, Or):
        return any(eval_expr(c, text) for c in expr.children)
    raise TypeError(f"not a filter expression: {expr!r}")


# ---------------------------------------------------------------------------
# Filter specs and sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterSpec:
    id: str
    expr: FilterExpr
    name: str = ""
    description: str = ""
    error_class: str = ""
    round_learned: int = 1
    provenance: str = "handwritten"
    stats: Mapping[str, Any] | None = None

    def __post_init__(self):
        if not self.id:
            raise SchemaError("id", "filter id must be non-empty")
        if isinstance(self.round_learned, bool) or not isinstance(self.round_learned, int) or self.round_learned < 1:
            raise SchemaError("round_learned", "round_learned must be an integer >= 1")
        if self.provenance not in PROVENANCES:
            raise SchemaError("provenance", f"unknown provenance {self.provenance!r}")

    def __call__(self, text: str) -> bool:
        return eval_expr(self.expr, text)


@dataclass(frozen=True)
class FilterSet:
    filters: tuple = ()
    model_id: str = ""
    domain_id: str = ""
    epsilon: float = 0.01
    created_rounds: int = 0

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(self.filters))
        seen = set()
        for i, f in enumerate(self.filters):
            if f.id in seen:
                raise SchemaError(f"filters[{i}].id", f"duplicate filter id {f.id!r}")
            seen.add(f.id)
        if not (0.0 < self.epsilon < 1.0):
            raise SchemaError("metadata.epsilon", "epsilon must lie in (0, 1)")

    def __len__(self) -> int:
        return len(self.filters)

    def __iter__(self):
        return iter(self.filters)

    @property
    def ids(self) -> list[str]:
        return [f.id for f in self.filters]

    def extended(self, new_filters: Iterable[FilterSpec], created_rounds: int | None = None) -> "FilterSet":
        return FilterSet(
            filters=self.filters + tuple(new_filters),
            model_id=self.model_id,
            domain_id=self.domain_id,
            epsilon=self.epsilon,
            created_rounds=self.created_rounds if created_rounds is None else created_rounds,
        )


def eval_filter(spec: FilterSpec, text: str) -> bool:
    return eval_expr(spec.expr, text)


def eval_set(filters: Iterable[FilterSpec], text: str) -> list[str]:
    """Ids of every filter that triggers on ``text``, in set order."""
    return [f.id for f in filters if eval_expr(f.expr, text)]


def first_trigger(filters: Iterable[FilterSpec], text: str) -> str | None:
    """Id of the first filter (in set order) that triggers, or ``None``."""
    for f in filters:
        if eval_expr(f.expr, text):
            return f.id
    return None


def prefix_checkpoints(text: str) -> range:
    """Per-character checkpoint lengths for ``text`` (see module docstring)."""
    return range(1, len(text) + 1) if text else range(0, 1)


def _first_count_end(text: str, needle: str, k: int) -> int | None:
    # end of the k-th greedy non-overlapping match, which is when str.count first reaches k
    pos = 0
    for _ in range(k):
        idx = text.find(needle, pos)
        if idx < 0:
            return None
        pos = idx + len(needle)
    return pos


def first_trigger_prefix(
    spec: FilterSpec | FilterExpr,
    text: str,
    boundaries: Sequence[int] | None = None,
) -> int | None:
    """Length of the shortest triggering prefix of ``text``, or ``None``.

    With ``boundaries=None`` every per-character checkpoint is tried.
    Otherwise ``boundaries`` is a sorted list of character offsets and only
    those prefixes are evaluated.
    """
    expr = spec.expr if isinstance(spec, FilterSpec) else spec
    if boundaries is not None:
        for b in boundaries:
            if eval_expr(expr, text[:b]):
                return b
        return None
    if not text:
        return 0 if eval_expr(expr, "") else None
    # monotone fast paths
    if isinstance(expr, Contains):
        idx = text.find(expr.needle)
        return None if idx < 0 else idx + len(expr.needle)
    if isinstance(expr, SubstrCountAtLeast):
        return _first_count_end(text, expr.needle, expr.k)
    for p in range(1, len(text) + 1):
        if eval_expr(expr, text[:p]):
            return p
    return None


# ---------------------------------------------------------------------------
# JSON (de)serialization
# ---------------------------------------------------------------------------


def expr_to_dict(expr: FilterExpr) -> dict:
    if isinstance(expr, RegexSearch):
        return {"op": "regex", "pattern": expr.pattern, "target": expr.target, "multiline": expr.multiline}
    if isinstance(expr, SubstrCountAtLeast):
        return {"op": "substr_count_at_least", "needle": expr.needle, "k": expr.k}
    if isinstance(expr, Contains):
        return {"op": "contains", "needle": expr.needle}
    if isinstance(expr, StrippedEmpty):
        return {"op": "stripped_empty"}
    if isinstance(expr, Not):
        return {"op": "not", "child": expr_to_dict(expr.child)}
    if isinstance(expr, And):
        return {"op": "and", "children": [expr_to_dict(c) for c in expr.children]}
    if isinstance(expr, Or):
        return {"op": "or", "children": [expr_to_dict(c) for c in expr.children]}
    raise TypeError(f"not a filter expression: {expr!r}")


def _require(doc: Mapping, key: str, path: str, kind: type | tuple):
    if key not in doc:
        raise SchemaError(f"{path}.{key}", "missing field")
    value = doc[key]
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise SchemaError(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def expr_from_dict(doc: Any, path: str = "expr") -> FilterExpr:
    if not isinstance(doc, Mapping):
        raise SchemaError(path, "expression must be an object")
    op = doc.get("op")
    try:
        if op == "regex":
            return RegexSearch(
                pattern=_require(doc, "pattern", path, str),
                target=doc.get("target", "full"),
                multiline=bool(doc.get("multiline", False)),
            )
        if op == "substr_count_at_least":
            return SubstrCountAtLeast(_require(doc, "needle", path, str), _require(doc, "k", path, int))
        if op == "contains":
            return Contains(_require(doc, "needle", path, str))
        if op == "stripped_empty":
            return StrippedEmpty()
        if op == "not":
            return Not(expr_from_dict(doc.get("child"), f"{path}.child"))
        if op in ("and", "or"):
            children = _require(doc, "children", path, list)
            parsed = [expr_from_dict(c, f"{path}.children[{i}]") for i, c in enumerate(children)]
            return And(parsed) if op == "and" else Or(parsed)
    except SchemaError as exc:
        if exc.path.startswith(path):
            raise
        raise SchemaError(f"{path}.{exc.path}", str(exc).split(": ", 1)[-1]) from None
    raise SchemaError(f"{path}.op", f"unknown op {op!r}")


def spec_to_dict(spec: FilterSpec) -> dict:
    doc = {
        "id": spec.id,
        "name": spec.name,
        "description": spec.description,
        "error_class": spec.error_class,
        "round_learned": spec.round_learned,
        "provenance": spec.provenance,
        "expr": expr_to_dict(spec.expr),
    }
    if spec.stats is not None:
        doc["stats"] = dict(spec.stats)
    return doc


def spec_from_dict(doc: Any, path: str = "filter") -> FilterSpec:
    if not isinstance(doc, Mapping):
        raise SchemaError(path, "filter must be an object")
    fid = _require(doc, "id", path, str)
    expr = expr_from_dict(doc.get("expr"), f"{path}.expr")
    round_learned = doc.get("round_learned", 1)
    if isinstance(round_learned, bool) or not isinstance(round_learned, int) or round_learned < 1:
        raise SchemaError(f"{path}.round_learned", "must be an integer >= 1")
    provenance = doc.get("provenance", "handwritten")
    if provenance not in PROVENANCES:
        raise SchemaError(f"{path}.provenance", f"unknown provenance {provenance!r}")
    stats = doc.get("stats")
    if stats is not None and not isinstance(stats, Mapping):
        raise SchemaError(f"{path}.stats", "stats must be an object")
    return FilterSpec(
        id=fid,
        expr=expr,
        name=str(doc.get("name", "")),
        description=str(doc.get("description", "")),
        error_class=str(doc.get("error_class", "")),
        round_learned=round_learned,
        provenance=provenance,
        stats=dict(stats) if stats is not None else None,
    )


def filter_set_to_dict(fs: FilterSet) -> dict:
    return {
        "metadata": {
            "model_id": fs.model_id,
            "domain_id": fs.domain_id,
            "epsilon": fs.epsilon,
            "created_rounds": fs.created_rounds,
        },
        "filters": [spec_to_dict(f) for f in fs.filters],
    }


def serialize_filter_set(fs: FilterSet) -> bytes:
    return json.dumps(filter_set_to_dict(fs), indent=2, ensure_ascii=False).encode("utf-8")


def parse_filter_set(document: bytes | str) -> FilterSet:
    if isinstance(document, bytes):
        document = document.decode("utf-8")
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise SchemaError("$", "document must be an object")
    meta = doc.get("metadata", {})
    if not isinstance(meta, Mapping):
        raise SchemaError("metadata", "must be an object")
    filters_doc = doc.get("filters")
    if not isinstance(filters_doc, list):
        raise SchemaError("filters", "must be a list")
    filters = [spec_from_dict(f, f"filters[{i}]") for i, f in enumerate(filters_doc)]
    seen: dict[str, int] = {}
    for i, f in enumerate(filters):
        if f.id in seen:
            raise SchemaError(f"filters[{i}].id", f"duplicate id {f.id!r} (first at filters[{seen[f.id]}])")
        seen[f.id] = i
    epsilon = meta.get("epsilon", 0.01)
    if isinstance(epsilon, bool) or not isinstance(epsilon, (int, float)) or not (0 < epsilon < 1):
        raise SchemaError("metadata.epsilon", "epsilon must be a number in (0, 1)")
    created = meta.get("created_rounds", 0)
    if isinstance(created, bool) or not isinstance(created, int) or created < 0:
        raise SchemaError("metadata.created_rounds", "must be a non-negative integer")
    return FilterSet(
        filters=filters,
        model_id=str(meta.get("model_id", "")),
        domain_id=str(meta.get("domain_id", "")),
        epsilon=float(epsilon),
        created_rounds=created,
    )
